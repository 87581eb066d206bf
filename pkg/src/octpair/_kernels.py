"""Compiled inner loops for the simulator and temporal averaging."""

from __future__ import annotations

import math

import numba
import numpy as np

TWO_PI = 2.0 * math.pi


@numba.njit(cache=True, nogil=True)
def wrap(x):
    """Map an angle into (-pi, pi]."""
    while x > math.pi:
        x -= TWO_PI
    while x <= -math.pi:
        x += TWO_PI
    return x


RUN_SHIFT = 6
RUN = 1 << RUN_SHIFT  # consecutive samples read from a bank after each random jump
RUN_MASK = RUN - 1


@numba.njit(cache=True, nogil=True, fastmath=True)
def synth_block(
    tip, edges, scene_end, void,
    refl, drift, jitter, texture, atten, motion, phase_floor,
    fresh_bank, fresh_off, fresh_idx, noise_bank, int_off, phs_off, noise,
    phi, intensity, phase,
):
    """Fill ``intensity``/``phase`` (D x n views) for one block of A-scans.

    ``tip`` holds the needle depth of each A-scan. Bank reads for row ``d``
    restart at a random offset every ``RUN`` samples (``*_off[d, j // RUN]``);
    ``fresh_idx[j]`` is the fresh-speckle draw index of A-scan ``j``.
    ``phi`` carries the phase per depth between blocks, kept in (-pi, pi].
    """
    D, n = intensity.shape
    n_edges = edges.shape[0]
    has_fresh = fresh_bank.shape[0] > 0
    base = np.empty(n, dtype=np.int64)
    w = np.empty(n, dtype=np.float32)
    for j in range(n):
        b = int(math.floor(tip[j]))
        base[j] = b
        w[j] = tip[j] - b
    step = np.empty(n, dtype=np.float64)
    for d in range(D):
        a = atten[d]
        m = motion[d]
        pf = phase_floor[d]
        lay = 0
        for j in range(n):
            u = tip[j] + d
            while lay < n_edges and u >= edges[lay]:
                lay += 1
            cls = void if u >= scene_end else lay
            t0 = texture[base[j] + d]
            sig = refl[cls] * a * (t0 + w[j] * (texture[base[j] + d + 1] - t0))
            if has_fresh:
                f = fresh_idx[j]
                sig *= fresh_bank[fresh_off[d, f >> RUN_SHIFT] + (f & RUN_MASK)]
            blk = j >> RUN_SHIFT
            r = j & RUN_MASK
            val = sig + noise * noise_bank[int_off[d, blk] + r]
            intensity[d, j] = val if val > 0.0 else 0.0
            step[j] = drift[cls] * m + (jitter[cls] + pf) * noise_bank[phs_off[d, blk] + r]
        acc = phi[d]
        for j in range(n):
            acc += step[j]
            while acc > math.pi:
                acc -= TWO_PI
            while acc <= -math.pi:
                acc += TWO_PI
            phase[d, j] = acc
        phi[d] = acc


@numba.njit(cache=True, nogil=True)
def phase_difference_mean(phase, window, out):
    """Per-window mean of wrapped column-to-column phase differences.

    The difference into column 0 is defined as zero.
    """
    D = phase.shape[0]
    n_out = out.shape[1]
    for d in range(D):
        for k in range(n_out):
            s = 0.0
            start = k * window
            for t in range(start, start + window):
                if t > 0:
                    s += wrap(float(phase[d, t]) - float(phase[d, t - 1]))
            out[d, k] = s / window
