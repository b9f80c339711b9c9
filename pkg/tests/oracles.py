"""Slow, loop-based reference implementations shared by the unit and acceptance tests."""

import math

import numpy as np


def brute_neighbors(f, anchor, n, radius):
    """Enumerate the window, sort by (-cosine, row-major position)."""
    d, h, w = f.shape
    r0, c0 = anchor
    a = f[:, r0, c0]
    cands = []
    for r in range(max(0, r0 - radius), min(h, r0 + radius + 1)):
        for c in range(max(0, c0 - radius), min(w, c0 + radius + 1)):
            if (r, c) == (r0, c0):
                continue
            v = f[:, r, c]
            cos = float(a @ v) / max(float(np.linalg.norm(a) * np.linalg.norm(v)), 1e-12)
            cands.append((-cos, r, c))
    cands.sort()
    return [(r, c) for _, r, c in cands[:n]]


def brute_semantic(s, t, anchors, n, radius):
    terms = []
    for b, r, c in anchors:
        pos = [(r, c)] + brute_neighbors(t[b], (r, c), n, radius)
        terms += [float(np.sum((s[b][:, pr, pc] - t[b][:, pr, pc]) ** 2)) for pr, pc in pos]
    return float(np.mean(terms))


def brute_infonce(s, t, anchors, n, radius, tau):
    vals = []
    for b, r, c in anchors:
        q = s[b][:, r, c]
        logits = [float(q @ t[b][:, r, c]) / tau]
        logits += [float(q @ t[b][:, nr, nc]) / tau for nr, nc in brute_neighbors(t[b], (r, c), n, radius)]
        m = max(logits)
        lse = m + math.log(sum(math.exp(x - m) for x in logits))
        vals.append(lse - logits[0])
    return float(np.mean(vals))


def ssim_oracle(a, b, L=2000.0, size=11, sigma=1.5):
    """Direct windowed sums over every fully covered 11x11 patch of every axial slice."""
    x = np.arange(size) - (size - 1) / 2
    g1 = np.exp(-(x**2) / (2 * sigma**2))
    w = np.outer(g1, g1)
    w /= w.sum()
    c1, c2 = (0.01 * L) ** 2, (0.03 * L) ** 2
    per_slice = []
    for z in range(a.shape[2]):
        vals = []
        for i in range(a.shape[0] - size + 1):
            for j in range(a.shape[1] - size + 1):
                pa, pb = a[i : i + size, j : j + size, z], b[i : i + size, j : j + size, z]
                m1, m2 = (w * pa).sum(), (w * pb).sum()
                v1 = (w * (pa - m1) ** 2).sum()
                v2 = (w * (pb - m2) ** 2).sum()
                cov = (w * (pa - m1) * (pb - m2)).sum()
                vals.append(((2 * m1 * m2 + c1) * (2 * cov + c2)) / ((m1**2 + m2**2 + c1) * (v1 + v2 + c2)))
        per_slice.append(np.mean(vals))
    return float(np.mean(per_slice))
