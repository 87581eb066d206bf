"""Independent reference implementations used only by the tests.

Each one is written the slow, obvious way so it shares no code path with
the package implementation it checks.
"""

import math

import numpy as np


def naive_contrastive_loss(z_int, z_phs, tau):
    """Direct evaluation: exp of every similarity, then -log of the ratio, averaged."""
    z_int = np.asarray(z_int, dtype=np.float64)
    z_phs = np.asarray(z_phs, dtype=np.float64)
    n = z_int.shape[0]

    def sim(a, b):
        return float(np.dot(a, b) / (math.sqrt(np.dot(a, a)) * math.sqrt(np.dot(b, b))))

    total = 0.0
    for i in range(n):
        pos = math.exp(sim(z_int[i], z_phs[i]) / tau)
        s1 = sum(math.exp(sim(z_int[i], z_phs[j]) / tau) for j in range(n) if j != i)
        s2 = sum(math.exp(sim(z_int[i], z_int[j]) / tau) for j in range(n) if j != i)
        total += -math.log(pos / (pos + s1 + s2))
    return total / n


def brute_force_crop_starts(n_ascans, window, crop_w):
    """Start columns of every full, non-overlapping crop, found by scanning."""
    width = 0
    while (width + 1) * window <= n_ascans:
        width += 1
    starts = []
    c = 0
    while c + crop_w <= width:
        starts.append(c)
        c += crop_w
    return starts


def class_at_index(config, t):
    """Tissue class name in front of the needle at A-scan ``t`` from cumulative thickness."""
    depth = t * config.insertion_velocity / config.a_scan_rate
    edge = 0.0
    for layer in config.layer_sequence:
        if layer.thickness is None:
            return layer.tissue_class
        edge += layer.thickness
        if depth < edge:
            return layer.tissue_class
    return None


def reference_weighted_scores(y_true, probs, n_classes=4):
    """Weighted AP / F1 via scikit-learn."""
    from sklearn.metrics import average_precision_score, f1_score

    y_true = np.asarray(y_true)
    present = [c for c in range(n_classes) if np.any(y_true == c)]
    support = np.array([np.sum(y_true == c) for c in present], dtype=np.float64)
    aps = np.array([average_precision_score(y_true == c, probs[:, c]) for c in present])
    w_ap = float(np.sum(support * aps) / support.sum())
    w_f1 = f1_score(y_true, probs.argmax(axis=1), labels=present, average="weighted", zero_division=0)
    return w_ap, float(w_f1)
