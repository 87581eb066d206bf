"""Cross-modal contrastive loss and supervised cross-entropy."""

from __future__ import annotations

import numpy as np
import torch
import torch.nn.functional as F

DEFAULT_TEMPERATURE = 0.1


def cosine_sim(a, b) -> float:
    """Cosine similarity of two non-zero vectors, clamped to [-1, 1]."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ValueError("cosine similarity is undefined for zero vectors")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def _normalize_rows(z: torch.Tensor, name: str) -> torch.Tensor:
    norms = z.norm(dim=1, keepdim=True)
    if bool((norms == 0).any()):
        raise ValueError(f"{name} has a zero-norm row")
    return z / norms


def _anchored_terms(anchor: torch.Tensor, other: torch.Tensor, tau: float) -> torch.Tensor:
    """Per-anchor loss with ``anchor`` rows as z_i in every similarity.

    The denominator holds the positive, all cross-modal negatives and all
    same-modality negatives except the self pair. Both are evaluated in one
    log-sum-exp, which shifts by the row max internally.
    """
    a = _normalize_rows(anchor, "anchor embeddings")
    o = _normalize_rows(other, "paired embeddings")
    cross = (a @ o.T).clamp(-1.0, 1.0) / tau
    same = (a @ a.T).clamp(-1.0, 1.0) / tau
    eye = torch.eye(a.shape[0], dtype=torch.bool, device=a.device)
    same = same.masked_fill(eye, float("-inf"))
    logits = torch.cat([cross, same], dim=1)
    return torch.logsumexp(logits, dim=1) - cross.diagonal()


def contrastive_loss(z_int, z_phs, temperature: float = DEFAULT_TEMPERATURE, symmetric: bool = False):
    """Mean over the batch of the intensity-anchored cross-modal InfoNCE loss.

    Row i of ``z_int`` and ``z_phs`` is a positive pair. Negatives for
    anchor i are the phase rows j != i and the intensity rows j != i.
    ``symmetric=True`` averages in the phase-anchored counterpart; it is an
    extension and off for reproduction runs.
    """
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    if z_int.ndim != 2 or z_int.shape != z_phs.shape:
        raise ValueError(f"embedding matrices must share an N x D shape, got {tuple(z_int.shape)} and {tuple(z_phs.shape)}")
    if z_int.shape[0] == 0:
        raise ValueError("empty batch")
    loss = _anchored_terms(z_int, z_phs, temperature).mean()
    if symmetric:
        loss = 0.5 * (loss + _anchored_terms(z_phs, z_int, temperature).mean())
    return loss


def cross_entropy(logits, labels, class_weights=None):
    """Mean negative log-softmax of the true class.

    With ``class_weights`` the mean is weighted by the weight of each
    sample's true class (normalized by the summed weights).
    """
    labels = torch.as_tensor(labels, dtype=torch.long)
    n_classes = logits.shape[1]
    if labels.numel() and (labels.min() < 0 or labels.max() >= n_classes):
        raise ValueError(f"labels must lie in [0, {n_classes - 1}]")
    weight = None
    if class_weights is not None:
        weight = torch.as_tensor(class_weights, dtype=logits.dtype)
    return F.cross_entropy(logits, labels, weight=weight)
