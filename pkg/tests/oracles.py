"""Independent reference implementations the tests compare against.

Each one is written the slow, obvious way (loops, sorting, enumeration) so
it shares no code path with the package.
"""

import itertools
import math

import numpy as np


def percentile_oracle(values, pct):
    """Sort, then interpolate linearly between neighbouring order statistics."""
    s = sorted(float(v) for v in np.ravel(values))
    pos = pct / 100.0 * (len(s) - 1)
    lo = math.floor(pos)
    hi = min(lo + 1, len(s) - 1)
    return s[lo] + (pos - lo) * (s[hi] - s[lo])


def softmax_oracle(e):
    """Plain softmax, no max shift."""
    ex = [math.exp(v) for v in e]
    return [v / sum(ex) for v in ex]


def count_oracle(pred, gt):
    """Dice and IoU from a voxel-by-voxel tally."""
    both = either = n_pred = n_gt = 0
    for p, g in zip(np.ravel(pred).tolist(), np.ravel(gt).tolist()):
        both += p and g
        either += p or g
        n_pred += p
        n_gt += g
    d = 1.0 if n_pred + n_gt == 0 else 2 * both / (n_pred + n_gt)
    j = 1.0 if either == 0 else both / either
    return d, j


def wilcoxon_oracle(a, b):
    """Enumerate every sign assignment of the midranks of the nonzero differences."""
    d = [x - y for x, y in zip(a, b) if x != y]
    if not d:
        return 1.0
    mags = [abs(v) for v in d]
    # midrank by counting: strictly smaller values, plus the middle of the tied block
    ranks = [sum(m < x for m in mags) + (sum(m == x for m in mags) + 1) / 2 for x in mags]
    w_obs = min(sum(r for r, v in zip(ranks, d) if v > 0), sum(r for r, v in zip(ranks, d) if v < 0))
    hits = 0
    for signs in itertools.product((0, 1), repeat=len(d)):
        if sum(r for r, s in zip(ranks, signs) if s) <= w_obs + 1e-9:
            hits += 1
    return min(1.0, 2 * hits / 2 ** len(d))


def combine_oracle(p_ncr, p_ed, p_et, tau=0.5):
    """Per-pixel rule: candidates at or above tau, highest wins, ties ET > NCR > ED."""
    cands = [(p, lab) for p, lab in ((p_et, 4), (p_ncr, 1), (p_ed, 2)) if p >= tau]
    if not cands:
        return 0
    best = max(p for p, _ in cands)
    return next(lab for p, lab in cands if p == best)


def shrinks_exclude(mask, box):
    r0, c0, r1, c1 = box
    rows, cols = np.nonzero(mask)
    inside = (rows >= r0) & (rows <= r1) & (cols >= c0) & (cols <= c1)
    if not inside.all():
        return False
    return all(
        [
            (rows == r0).any(),
            (rows == r1).any(),
            (cols == c0).any(),
            (cols == c1).any(),
        ]
    )


def bce_oracle(z, t):
    """-log sigmoid, written out per pixel."""
    z, t = np.asarray(z, dtype=float).ravel(), np.asarray(t, dtype=float).ravel()
    p = 1 / (1 + np.exp(-z))
    return float(np.mean(-(t * np.log(p) + (1 - t) * np.log(1 - p))))
