"""Contrastive pretraining, supervised finetuning and evaluation."""

from __future__ import annotations

import copy
import logging
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
import torch

from .metrics import MetricsReport, compute_metrics
from .models import EncoderConfig, TissueNet, scratch_model
from .objectives import contrastive_loss, cross_entropy
from .preprocess import CropSet
from .seeding import derive_seed, rng_for
from .splits import Fold, SplitError, check_fraction

log = logging.getLogger(__name__)

DEFAULT_BATCH_SIZE = 28
DEFAULT_EPOCHS = 100
DEFAULT_LR = 1e-4


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class RunConfig:
    init_mode: str = "scratch"
    modality_mode: str = "dual"
    label_fraction: float = 1.0
    batch_size: int = DEFAULT_BATCH_SIZE
    epochs: int = DEFAULT_EPOCHS
    pretrain_epochs: int = DEFAULT_EPOCHS
    learning_rate: float = DEFAULT_LR
    pretrain_learning_rate: float = DEFAULT_LR
    temperature: float = 0.1
    symmetric: bool = False
    optimizer: str = "adam"
    seed: int = 0

    def __post_init__(self):
        check_fraction(self.label_fraction)
        if self.batch_size < 1 or self.epochs < 1 or self.pretrain_epochs < 1:
            raise ValueError("batch_size and epoch counts must be positive")
        if self.learning_rate <= 0 or self.pretrain_learning_rate <= 0:
            raise ValueError("learning rates must be positive")
        if self.optimizer != "adam":
            raise ValueError("only the adam optimizer is supported")

    def to_dict(self) -> dict:
        return asdict(self)


@contextmanager
def deterministic_kernels(enabled: bool = True):
    """Restrict torch to deterministic kernels for the duration of the block."""
    previous = torch.are_deterministic_algorithms_enabled()
    torch.use_deterministic_algorithms(enabled)
    try:
        yield
    finally:
        torch.use_deterministic_algorithms(previous)


def _batches(n: int, batch_size: int, rng: np.random.Generator, min_size: int = 1):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        idx = order[start : start + batch_size]
        if idx.size >= min_size:
            yield np.sort(idx)


def _tensor(x) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(x, dtype=np.float32))


def _check_finite(loss: torch.Tensor, what: str, epoch: int, step: int) -> None:
    if not torch.isfinite(loss):
        raise TrainingError(f"non-finite {what} loss ({loss.item()}) at epoch {epoch}, step {step}")


@dataclass
class PretrainResult:
    model: TissueNet
    epoch_losses: list
    initial_loss: float
    steps: int


def contrastive_eval_loss(model: TissueNet, crops: CropSet, temperature: float = 0.1, symmetric=False) -> float:
    """Contrastive loss on the whole set as one batch, in inference mode."""
    was = model.training
    model.eval()
    with torch.no_grad():
        z_int = model.embed(_tensor(crops.intensity), "f")
        z_phs = model.embed(_tensor(crops.phase), "g")
        loss = contrastive_loss(z_int, z_phs, temperature, symmetric).item()
    model.train(was)
    return loss


def pretrain(
    pool: CropSet,
    encoder: EncoderConfig,
    run: RunConfig,
    model: Optional[TissueNet] = None,
) -> PretrainResult:
    """Train ``f`` and ``g`` jointly on aligned crop pairs with the contrastive loss.

    Labels are ignored. A trailing batch with a single pair is skipped
    because the loss is identically zero there.
    """
    if len(pool) == 0:
        raise TrainingError("empty pretraining pool")
    if run.batch_size < 2:
        raise TrainingError("contrastive pretraining needs batch_size >= 2")
    if model is None:
        model = scratch_model(encoder, "dual", derive_seed(run.seed, "pretrain-init"))
    params = list(model.f.parameters()) + list(model.g.parameters())
    opt = torch.optim.Adam(params, lr=run.pretrain_learning_rate)
    rng = rng_for(run.seed, "pretrain-batches")
    x_int, x_phs = _tensor(pool.intensity), _tensor(pool.phase)

    model.train()
    with torch.no_grad():
        init = [
            contrastive_loss(model.embed(x_int[idx], "f"), model.embed(x_phs[idx], "g"), run.temperature, run.symmetric).item()
            for idx in _batches(len(pool), run.batch_size, rng_for(run.seed, "pretrain-probe"), 2)
        ]
    initial = float(np.mean(init)) if init else float("nan")

    losses, steps = [], 0
    for epoch in range(run.pretrain_epochs):
        running = []
        for idx in _batches(len(pool), run.batch_size, rng, min_size=2):
            loss = contrastive_loss(model.embed(x_int[idx], "f"), model.embed(x_phs[idx], "g"), run.temperature, run.symmetric)
            _check_finite(loss, "contrastive", epoch, steps)
            opt.zero_grad()
            loss.backward()
            opt.step()
            steps += 1
            running.append(loss.item())
        losses.append(float(np.mean(running)) if running else float("nan"))
        log.debug("pretrain epoch %d loss %.4f", epoch + 1, losses[-1])
    if losses and not losses[-1] < losses[0]:
        log.warning("pretraining loss did not decrease (%.4f -> %.4f)", losses[0], losses[-1])
    return PretrainResult(model, losses, initial, steps)


def predict_proba(model: TissueNet, crops: CropSet, batch_size: int = 64) -> np.ndarray:
    was = model.training
    model.eval()
    out = []
    with torch.no_grad():
        for start in range(0, len(crops), batch_size):
            sl = slice(start, start + batch_size)
            logits = model(_tensor(crops.intensity[sl]), _tensor(crops.phase[sl]))
            out.append(torch.softmax(logits.double(), dim=1).numpy())
    model.train(was)
    return np.concatenate(out) if out else np.empty((0, 4))


def evaluate(model: TissueNet, test: CropSet) -> MetricsReport:
    """Weighted AP / F1 of ``model`` on the labeled crops of ``test``."""
    idx = test.labeled()
    if idx.size == 0:
        raise TrainingError("test set has no labeled crops")
    test = test.subset(idx)
    return compute_metrics(test.labels, predict_proba(model, test))


@dataclass
class FinetuneResult:
    model: TissueNet
    train_losses: list
    val_f1: list
    best_epoch: int
    steps: int = 0
    history: dict = field(default_factory=dict)


def finetune(model: TissueNet, train: CropSet, val: Optional[CropSet], run: RunConfig) -> FinetuneResult:
    """Cross-entropy training of the head and the active encoder(s).

    The model from the epoch with the best validation weighted F1 is kept
    (ties broken by lower validation loss, then earlier epoch). In a
    single-modality mode the unused encoder is neither run nor updated.
    """
    if len(train) == 0:
        raise TrainingError("empty labeled training subset")
    if np.any(train.labels < 0):
        raise TrainingError("finetuning subset contains unlabeled crops")
    if np.unique(train.labels).size < 2:
        raise SplitError("labeled training subset holds a single class")
    params = list(model.head.parameters())
    for branch in model.active_branches():
        params += list(getattr(model, branch).parameters())
    opt = torch.optim.Adam(params, lr=run.learning_rate)
    rng = rng_for(run.seed, "finetune-batches")
    x_int, x_phs = _tensor(train.intensity), _tensor(train.phase)
    y = torch.from_numpy(train.labels)
    if val is not None:
        val = val.subset(val.labeled())
        if len(val) == 0:
            val = None

    best_key, best_state, best_epoch = None, None, -1
    train_losses, val_f1, steps = [], [], 0
    for epoch in range(run.epochs):
        model.train()
        running = []
        for idx in _batches(len(train), run.batch_size, rng):
            logits = model(x_int[idx], x_phs[idx])
            loss = cross_entropy(logits, y[idx])
            _check_finite(loss, "cross-entropy", epoch, steps)
            opt.zero_grad()
            loss.backward()
            opt.step()
            steps += 1
            running.append(loss.item())
        train_losses.append(float(np.mean(running)))
        if val is None:
            key = (epoch,)
            val_f1.append(float("nan"))
        else:
            probs = predict_proba(model, val)
            f1 = compute_metrics(val.labels, probs).weighted_f1
            nll = float(-np.mean(np.log(np.clip(probs[np.arange(len(val)), val.labels], 1e-12, None))))
            val_f1.append(f1)
            key = (f1, -nll)
        if best_key is None or key > best_key:
            best_key, best_epoch = key, epoch
            best_state = copy.deepcopy(model.state_dict())
    model.load_state_dict(best_state)
    model.eval()
    return FinetuneResult(model, train_losses, val_f1, best_epoch + 1, steps)


def assert_no_leakage(fold: Fold, *crop_sets: CropSet) -> None:
    """Every crop used for training or model selection must come from train/val insertions."""
    test = set(fold.test)
    if test & (set(fold.train) | set(fold.val)):
        raise SplitError("test insertions overlap train/val")
    for crops in crop_sets:
        if crops is not None and test & set(np.unique(crops.insertion_ids).tolist()):
            raise SplitError("a test insertion leaked into training or model selection")
