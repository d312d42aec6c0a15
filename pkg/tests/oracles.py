"""Independent reference implementations used to check the fast paths."""
from __future__ import annotations

import math
import struct
from fractions import Fraction

import numpy as np

from inpaintvad.tensor import backward as _backward


def conv2d_loops(x, w, b=None):
    """Direct same-padding cross-correlation, one output element at a time."""
    cin, h, wd = x.shape
    cout, _, kh, kw = w.shape
    ph, pw = kh // 2, kw // 2
    out = np.zeros((cout, h, wd))
    for o in range(cout):
        for i in range(h):
            for j in range(wd):
                acc = 0.0 if b is None else float(b[o])
                for c in range(cin):
                    for di in range(kh):
                        for dj in range(kw):
                            r, s = i + di - ph, j + dj - pw
                            if 0 <= r < h and 0 <= s < wd:
                                acc += float(x[c, r, s]) * float(w[o, c, di, dj])
                out[o, i, j] = acc
    return out


def softmax_direct(logits):
    e = [math.exp(v) for v in logits]
    z = sum(e)
    return [v / z for v in e]


def central_difference(f, arr: np.ndarray, index, eps: float = 1e-4) -> float:
    """d f / d arr[index] by central differences, perturbing ``arr`` in place."""
    old = arr[index]
    arr[index] = old + eps
    up = f()
    arr[index] = old - eps
    down = f()
    arr[index] = old
    return (up - down) / (2 * eps)


def relative_error(analytic: float, numeric: float, floor: float = 1e-3) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def eer_sweep(labels, scores):
    """Brute-force EER: exact rational rates at every candidate threshold.

    Mirrors the documented rule (midpoint candidates plus +-inf, exact crossing
    if one exists, otherwise linear interpolation across the sign change) but
    counts by plain loops.
    """
    normals = [s for l, s in zip(labels, scores) if not l]
    corrupted = [s for l, s in zip(labels, scores) if l]
    values = sorted(set(scores))
    cands = [-math.inf] + [(values[i] + values[i + 1]) / 2 for i in range(len(values) - 1)] + [math.inf]
    rows = []
    for t in cands:
        fpr = Fraction(sum(1 for s in normals if s >= t), len(normals))
        fnr = Fraction(sum(1 for s in corrupted if s < t), len(corrupted))
        rows.append((t, fpr, fnr))
    for t, fpr, fnr in rows:
        if fpr == fnr:
            return float(fpr), t
    for (ta, fa, na), (tb, fb, nb) in zip(rows, rows[1:]):
        if fa - na > 0 > fb - nb:
            alpha = (fa - na) / ((fa - na) - (fb - nb))
            eer = (fa + na) / 2 + alpha * ((fb + nb) / 2 - (fa + na) / 2)
            ta = values[0] if ta == -math.inf else ta
            tb = values[-1] if tb == math.inf else tb
            return float(eer), ta + float(alpha) * (tb - ta)
    raise AssertionError("rates never crossed")


def idx_first_image_checksum(path) -> tuple[int, int, int, int]:
    """(count, rows, cols, sum of first image's bytes) read with struct only."""
    with open(path, "rb") as fh:
        magic, count, rows, cols = struct.unpack(">IIII", fh.read(16))
        assert magic == 2051
        first = fh.read(rows * cols)
    return count, rows, cols, sum(first)


def bounce_position(start: float, velocity: float, t: int, limit: float) -> float:
    """Closed-form reflected coordinate: fold the free line into [0, limit]."""
    x = start + velocity * t
    if limit == 0:
        return 0.0
    period = 2 * limit
    x = math.fmod(x, period)
    if x < 0:
        x += period
    return period - x if x > limit else x


def numeric_check(build, leaves, n_probes=20, seed=0, tol=1e-4):
    """Compare backward() against central differences on random coordinates."""
    for leaf in leaves:
        leaf.grad = None
    _backward(build())
    r = np.random.default_rng(seed)
    worst = 0.0
    for leaf in leaves:
        for _ in range(n_probes):
            idx = tuple(int(r.integers(n)) for n in leaf.shape)
            num = central_difference(lambda: build().item(), leaf.data, idx)
            worst = max(worst, relative_error(leaf.grad[idx], num))
    assert worst < tol, worst
    return worst
