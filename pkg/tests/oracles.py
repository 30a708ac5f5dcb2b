"""Independent brute-force oracles used to freeze expected values in tests."""

import math

import numpy as np


def two_pass_stats(values):
    """Mean and population std by two explicit passes with exact summation."""
    vals = [float(v) for v in values]
    mu = math.fsum(vals) / len(vals)
    var = math.fsum((v - mu) ** 2 for v in vals) / len(vals)
    return mu, math.sqrt(var)


def central_difference(f, x: np.ndarray, index, h: float = 1e-6) -> float:
    """(f(x + h e_i) - f(x - h e_i)) / 2h for one flat index of ``x`` (restored afterwards)."""
    flat = x.reshape(-1)
    orig = flat[index]
    flat[index] = orig + h
    up = f()
    flat[index] = orig - h
    down = f()
    flat[index] = orig
    return (up - down) / (2 * h)


def count_dice(p, g):
    inter = sp = sg = 0
    for a, b in zip(np.asarray(p, bool).ravel().tolist(), np.asarray(g, bool).ravel().tolist()):
        inter += a and b
        sp += a
        sg += b
    if sp + sg == 0:
        return 1.0
    return 2 * inter / (sp + sg)


def _boundary_points(mask):
    m = np.asarray(mask, bool)
    h, w = m.shape
    pts = []
    for i in range(h):
        for j in range(w):
            if not m[i, j]:
                continue
            for di, dj in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                ii, jj = i + di, j + dj
                if not (0 <= ii < h and 0 <= jj < w) or not m[ii, jj]:
                    pts.append((i, j))
                    break
    return pts


def pairwise_hausdorff(p, g):
    """Symmetric boundary Hausdorff by exhaustive pairwise distances; None if a set is empty."""
    bp, bg = _boundary_points(p), _boundary_points(g)
    if not bp or not bg:
        return None

    def directed(a, b):
        return max(min(math.sqrt((i - k) ** 2 + (j - l) ** 2) for k, l in b) for i, j in a)

    return max(directed(bp, bg), directed(bg, bp))


def pixel_entropy_mean(probs: np.ndarray) -> float:
    """Mean over pixels of -sum p log p, looping pixel by pixel. probs: [B, C, H, W]."""
    b, c, h, w = probs.shape
    acc = []
    for n in range(b):
        for i in range(h):
            for j in range(w):
                acc.append(-math.fsum(float(p) * math.log(float(p)) for p in probs[n, :, i, j] if p > 0))
    return math.fsum(acc) / len(acc)
