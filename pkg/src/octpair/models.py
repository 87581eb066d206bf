"""Intensity and phase encoders plus the tissue classification head."""

from __future__ import annotations

import os
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
from torch import nn

from .phantom import TISSUE_CLASSES
from .seeding import derive_seed

N_CLASSES = len(TISSUE_CLASSES)
HEAD_HIDDEN = 512
CHECKPOINT_KIND = "octpair-checkpoint"
CHECKPOINT_VERSION = 1
ARCHITECTURES = ("resnet18_style", "tiny_conv")
HEAD_MODES = ("dual", "intensity_only", "phase_only")
INIT_MODES = ("scratch", "generic_pretrained", "contrastive_checkpoint")
BRANCH_MODALITY = {"f": "intensity", "g": "phase"}
# torchvision file name of the ImageNet-1k ResNet18 weights
IMAGENET_RESNET18_FILE = "resnet18-f37072fd.pth"


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class EncoderConfig:
    architecture: str = "resnet18_style"
    embed_dim: int = 512
    input_channels: int = 3
    widths: tuple = (16, 32, 64)  # tiny_conv blocks before the final embed_dim block

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if self.architecture not in ARCHITECTURES:
            raise ValueError(f"unknown architecture {self.architecture!r}")
        if self.embed_dim < 1:
            raise ValueError("embed_dim must be >= 1")
        if self.architecture == "resnet18_style" and self.embed_dim != 512:
            raise ValueError("resnet18_style encoders have embed_dim 512")
        if self.input_channels != 3:
            raise ValueError("encoders take 3-channel input")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        return d


@dataclass(frozen=True)
class HeadConfig:
    mode: str = "dual"
    embed_dim: int = 512

    def __post_init__(self):
        if self.mode not in HEAD_MODES:
            raise ValueError(f"unknown head mode {self.mode!r}")

    @property
    def layer_dims(self) -> list:
        k = 2 if self.mode == "dual" else 1
        return [self.embed_dim * k, HEAD_HIDDEN, N_CLASSES]


@dataclass
class Embedding:
    vector: np.ndarray
    source_modality: str
    time_window_index: int = -1

    def __post_init__(self):
        if not np.all(np.isfinite(self.vector)):
            raise ValueError("embedding has non-finite entries")


def replicate_channels(crop):
    """Single-channel H x W crop to H x W x 3 with identical channels."""
    if isinstance(crop, torch.Tensor):
        return crop.unsqueeze(-1).expand(*crop.shape, 3)
    crop = np.asarray(crop)
    if crop.ndim != 2:
        raise ValueError(f"expected a single-channel H x W crop, got shape {crop.shape}")
    return np.repeat(crop[:, :, None], 3, axis=2)


def _conv_block(c_in, c_out, kernel, stride):
    return nn.Sequential(
        nn.Conv2d(c_in, c_out, kernel, stride, kernel // 2, bias=False),
        nn.BatchNorm2d(c_out),
        nn.ReLU(inplace=True),
    )


class TinyConv(nn.Module):
    """Four strided conv blocks and global average pooling."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        w = list(cfg.widths) + [cfg.embed_dim]
        self.features = nn.Sequential(
            _conv_block(cfg.input_channels, w[0], 5, 4),
            _conv_block(w[0], w[1], 3, 2),
            _conv_block(w[1], w[2], 3, 2),
            _conv_block(w[2], w[3], 3, 2),
        )
        self.pool = nn.AdaptiveAvgPool2d(1)

    def forward(self, x):
        return self.pool(self.features(x)).flatten(1)


def build_encoder(cfg: EncoderConfig) -> nn.Module:
    if cfg.architecture == "tiny_conv":
        if len(cfg.widths) != 3:
            raise ValueError("tiny_conv needs three block widths")
        return TinyConv(cfg)
    from torchvision.models import resnet18

    net = resnet18(weights=None)
    net.fc = nn.Identity()
    return net


def build_head(cfg: HeadConfig) -> nn.Module:
    d_in, d_hidden, d_out = cfg.layer_dims
    return nn.Sequential(nn.Linear(d_in, d_hidden), nn.ReLU(inplace=True), nn.Linear(d_hidden, d_out))


def _as_batch(x) -> torch.Tensor:
    """N x H x W (or N x 3 x H x W) to a float N x 3 x H x W tensor."""
    x = torch.as_tensor(x, dtype=torch.float32)
    if x.ndim == 3:
        x = x.unsqueeze(1).expand(-1, 3, -1, -1)
    return x


class TissueNet(nn.Module):
    """``f`` encodes intensity, ``g`` encodes phase, ``head`` classifies."""

    def __init__(self, encoder: EncoderConfig, mode: str = "dual"):
        super().__init__()
        self.encoder_config = encoder
        self.head_config = HeadConfig(mode, encoder.embed_dim)
        self.f = build_encoder(encoder)
        self.g = build_encoder(encoder)
        self.head = build_head(self.head_config)

    @property
    def mode(self) -> str:
        return self.head_config.mode

    def embed(self, x, branch: str) -> torch.Tensor:
        return (self.f if branch == "f" else self.g)(_as_batch(x))

    def forward(self, x_int=None, x_phs=None) -> torch.Tensor:
        feats = []
        if self.mode in ("dual", "intensity_only"):
            if x_int is None:
                raise ValueError(f"{self.mode} mode needs intensity crops")
            feats.append(self.embed(x_int, "f"))
        if self.mode in ("dual", "phase_only"):
            if x_phs is None:
                raise ValueError(f"{self.mode} mode needs phase crops")
            feats.append(self.embed(x_phs, "g"))
        return self.head(torch.cat(feats, dim=1))

    def active_branches(self) -> tuple:
        return {"dual": ("f", "g"), "intensity_only": ("f",), "phase_only": ("g",)}[self.mode]


def encode(crop, branch: str, model: TissueNet, modality: str, time_window_index: int = -1) -> Embedding:
    """Embed one H x W x 3 crop with branch ``f`` (intensity) or ``g`` (phase)."""
    if branch not in BRANCH_MODALITY:
        raise ValueError(f"unknown branch {branch!r}")
    if BRANCH_MODALITY[branch] != modality:
        raise ValueError(f"branch {branch} only accepts {BRANCH_MODALITY[branch]} crops, got {modality}")
    crop = np.asarray(crop, dtype=np.float32)
    if crop.ndim != 3 or crop.shape[2] != 3:
        raise ValueError(f"expected an H x W x 3 crop, got {crop.shape}")
    if not np.all(np.isfinite(crop)):
        raise ValueError("crop has non-finite values")
    x = torch.from_numpy(np.ascontiguousarray(crop.transpose(2, 0, 1)))[None]
    was_training = model.training
    model.eval()
    with torch.no_grad():
        z = model.embed(x, branch)[0].numpy().astype(np.float64)
    model.train(was_training)
    return Embedding(z, modality, time_window_index)


def classify(embeddings: Sequence[Embedding], model: TissueNet) -> np.ndarray:
    """Four logits from one (single mode) or two (dual: intensity, phase) embeddings."""
    expected = {
        "dual": ("intensity", "phase"),
        "intensity_only": ("intensity",),
        "phase_only": ("phase",),
    }[model.mode]
    got = tuple(e.source_modality for e in embeddings)
    if got != expected:
        raise ValueError(f"{model.mode} head expects embeddings {expected}, got {got}")
    z = torch.as_tensor(np.concatenate([e.vector for e in embeddings]), dtype=torch.float32)[None]
    with torch.no_grad():
        return model.head(z)[0].numpy()


# --------------------------------------------------------------------------
# initialization and checkpoints


def _seeded(seed: int, build):
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return build()


def scratch_model(encoder: EncoderConfig, mode: str, seed: int) -> TissueNet:
    model = _seeded(derive_seed(seed, "model"), lambda: TissueNet(encoder, mode))
    # each branch gets its own stream so f and g never start identical
    for branch in ("f", "g"):
        fresh = _seeded(derive_seed(seed, "encoder", branch), lambda: build_encoder(encoder))
        getattr(model, branch).load_state_dict(fresh.state_dict())
    return model


def imagenet_weights_path(explicit: Optional[str] = None) -> Path:
    """Locate local ImageNet ResNet18 weights; never downloads."""
    candidates = []
    if explicit:
        candidates.append(Path(explicit))
    if os.environ.get("OCTPAIR_IMAGENET_WEIGHTS"):
        candidates.append(Path(os.environ["OCTPAIR_IMAGENET_WEIGHTS"]))
    candidates.append(Path(torch.hub.get_dir()) / "checkpoints" / IMAGENET_RESNET18_FILE)
    for path in candidates:
        if path.is_file():
            return path
    raise FileNotFoundError(
        "generic_pretrained needs local ImageNet ResNet18 weights. Download "
        f"{IMAGENET_RESNET18_FILE} (torchvision ResNet18_Weights.IMAGENET1K_V1) and set "
        "OCTPAIR_IMAGENET_WEIGHTS to its path, or place it in the torch hub checkpoint directory."
    )


def save_checkpoint(path, model: TissueNet, seed: int, extra: Optional[dict] = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    blob = {
        "kind": CHECKPOINT_KIND,
        "version": CHECKPOINT_VERSION,
        "config": {"encoder": model.encoder_config.to_dict(), "mode": "contrastive_pretrain"},
        "seed": int(seed),
        "f": model.f.state_dict(),
        "g": model.g.state_dict(),
        "extra": extra or {},
    }
    torch.save(blob, path)
    return path


def load_checkpoint(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint {path} not found")
    try:
        blob = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:  # torch raises several unrelated types on garbage input
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(blob, dict) or blob.get("kind") != CHECKPOINT_KIND:
        raise CheckpointError(f"{path} is not an octpair checkpoint")
    if blob.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"checkpoint version {blob.get('version')} != {CHECKPOINT_VERSION}")
    return blob


def init_weights(
    mode: str,
    encoder: EncoderConfig,
    head_mode: str = "dual",
    seed: int = 0,
    checkpoint_path=None,
    pretrained_path=None,
) -> TissueNet:
    """Build a model initialized per ``mode``; the head is always fresh."""
    if mode not in INIT_MODES:
        raise ValueError(f"unknown init mode {mode!r}")
    model = scratch_model(encoder, head_mode, seed)
    if mode == "generic_pretrained":
        if encoder.architecture != "resnet18_style":
            raise CheckpointError("generic_pretrained weights exist only for resnet18_style")
        state = torch.load(imagenet_weights_path(pretrained_path), map_location="cpu", weights_only=True)
        state = {k: v for k, v in state.items() if not k.startswith("fc.")}
        for branch in (model.f, model.g):
            branch.load_state_dict(state)
    elif mode == "contrastive_checkpoint":
        if checkpoint_path is None:
            raise CheckpointError("contrastive_checkpoint init needs a checkpoint path")
        blob = load_checkpoint(checkpoint_path)
        saved = blob["config"]["encoder"]
        if saved != encoder.to_dict():
            raise CheckpointError(f"checkpoint encoder config {saved} does not match {encoder.to_dict()}")
        model.f.load_state_dict(blob["f"])
        model.g.load_state_dict(blob["g"])
    return model


def parameter_digest(module: nn.Module) -> str:
    """Stable hash over a module's parameters and buffers."""
    import hashlib

    h = hashlib.sha256()
    for name, t in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


MODEL_KIND = "octpair-model"


def save_model(path, model: TissueNet, extra: Optional[dict] = None) -> Path:
    """Persist a finetuned classifier (both encoders and the head)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(
        {
            "kind": MODEL_KIND,
            "version": CHECKPOINT_VERSION,
            "encoder": model.encoder_config.to_dict(),
            "mode": model.mode,
            "state": model.state_dict(),
            "extra": extra or {},
        },
        path,
    )
    return path


def load_model(path) -> TissueNet:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"model file {path} not found")
    blob = torch.load(path, map_location="cpu", weights_only=True)
    if not isinstance(blob, dict) or blob.get("kind") != MODEL_KIND:
        raise CheckpointError(f"{path} is not an octpair model")
    enc = blob["encoder"]
    cfg = EncoderConfig(enc["architecture"], enc["embed_dim"], enc["input_channels"], tuple(enc["widths"]))
    model = TissueNet(cfg, blob["mode"])
    model.load_state_dict(blob["state"])
    model.eval()
    return model
