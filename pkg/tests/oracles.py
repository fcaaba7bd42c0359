"""Independent reference implementations used to check the package.

These are deliberately naive: explicit loops, no vectorization, no shared
code with the package.
"""
from __future__ import annotations

import math
from collections import deque

import numpy as np
import torch


# -- Canny ---------------------------------------------------------------------

def _gauss_kernel(sigma: float) -> list[float]:
    radius = int(4.0 * sigma + 0.5)
    w = [math.exp(-0.5 * (x / sigma) ** 2) for x in range(-radius, radius + 1)]
    s = sum(w)
    return [v / s for v in w]


def _clamp(i: int, n: int) -> int:
    return min(max(i, 0), n - 1)


def _blur_rows_then_cols(img: list[list[float]], sigma: float) -> list[list[float]]:
    h, w = len(img), len(img[0])
    k = _gauss_kernel(sigma)
    r = len(k) // 2
    tmp = [[sum(k[j] * img[_clamp(y + j - r, h)][x] for j in range(len(k))) for x in range(w)] for y in range(h)]
    return [[sum(k[j] * tmp[y][_clamp(x + j - r, w)] for j in range(len(k))) for x in range(w)] for y in range(h)]


def canny_reference(gray: np.ndarray, low: float, high: float, sigma: float) -> np.ndarray:
    h, w = gray.shape
    img = [[float(gray[y, x]) for x in range(w)] for y in range(h)]
    b = _blur_rows_then_cols(img, sigma) if sigma > 0 else img

    def px(y, x):
        return b[_clamp(y, h)][_clamp(x, w)]

    # normalizer: peak Sobel response of a blurred unit step, computed by the same loops
    step = [[0.0] * 32 + [1.0] * 32]
    step = _blur_rows_then_cols(step, sigma) if sigma > 0 else step
    norm = max(abs(step[0][i + 1] - step[0][i - 1]) for i in range(1, 63)) * 4.0

    mag = [[0.0] * w for _ in range(h)]
    direction = [[0] * w for _ in range(h)]
    for y in range(h):
        for x in range(w):
            gx = (px(y - 1, x + 1) + 2 * px(y, x + 1) + px(y + 1, x + 1)
                  - px(y - 1, x - 1) - 2 * px(y, x - 1) - px(y + 1, x - 1))
            gy = (px(y + 1, x - 1) + 2 * px(y + 1, x) + px(y + 1, x + 1)
                  - px(y - 1, x - 1) - 2 * px(y - 1, x) - px(y - 1, x + 1))
            mag[y][x] = round(math.hypot(gx, gy) / norm, 9)
            angle = math.degrees(math.atan2(gy, gx)) % 180.0
            if angle < 22.5 or angle >= 157.5:
                direction[y][x] = 0
            elif angle < 67.5:
                direction[y][x] = 1
            elif angle < 112.5:
                direction[y][x] = 2
            else:
                direction[y][x] = 3

    offsets = {0: (0, 1), 1: (1, 1), 2: (1, 0), 3: (1, -1)}

    def m(y, x):
        return mag[y][x] if 0 <= y < h and 0 <= x < w else 0.0

    nms = [[0.0] * w for _ in range(h)]
    for y in range(1, h - 1):
        for x in range(1, w - 1):
            dy, dx = offsets[direction[y][x]]
            c = mag[y][x]
            if c > 0 and c >= m(y - dy, x - dx) and c > m(y + dy, x + dx):
                nms[y][x] = c

    out = np.zeros((h, w), dtype=bool)
    seen = [[False] * w for _ in range(h)]
    for y in range(h):
        for x in range(w):
            if nms[y][x] >= high and not seen[y][x]:
                queue = deque([(y, x)])
                seen[y][x] = True
                while queue:
                    cy, cx = queue.popleft()
                    out[cy, cx] = True
                    for ny in range(cy - 1, cy + 2):
                        for nx in range(cx - 1, cx + 2):
                            if 0 <= ny < h and 0 <= nx < w and not seen[ny][nx] and nms[ny][nx] >= low:
                                seen[ny][nx] = True
                                queue.append((ny, nx))
    return out


# -- metrics -------------------------------------------------------------------

def metrics_reference(pred: np.ndarray, gt: np.ndarray, cap=(1e-3, 80.0), band="80", median_scaling=True):
    """Scalar-loop Eigen metrics on same-size grids."""
    lo, hi = cap
    ps, gs = [], []
    for p, g in zip(pred.ravel().tolist(), gt.ravel().tolist()):
        ok = (lo < g <= hi) if band == "80" else (lo <= g <= hi)
        if g > 0 and ok:
            ps.append(p)
            gs.append(g)
    if median_scaling:
        ratio = _median(gs) / _median(ps)
        ps = [p * ratio for p in ps]
    ps = [min(max(p, lo), hi) for p in ps]
    n = len(ps)
    abs_rel = sum(abs(p - g) / g for p, g in zip(ps, gs)) / n
    sq_rel = sum((p - g) ** 2 / g for p, g in zip(ps, gs)) / n
    rmse = math.sqrt(sum((p - g) ** 2 for p, g in zip(ps, gs)) / n)
    rmse_log = math.sqrt(sum((math.log(p) - math.log(g)) ** 2 for p, g in zip(ps, gs)) / n)
    deltas = []
    for k in (1, 2, 3):
        deltas.append(sum(1 for p, g in zip(ps, gs) if max(p / g, g / p) < 1.25 ** k) / n)
    return (abs_rel, sq_rel, rmse, rmse_log, *deltas)


def _median(values):
    s = sorted(values)
    n = len(s)
    return s[n // 2] if n % 2 else 0.5 * (s[n // 2 - 1] + s[n // 2])


# -- finite differences ------------------------------------------------------------

def central_difference(fn, tensors: list[torch.Tensor], eps: float = 1e-6) -> list[torch.Tensor]:
    """Numerical gradient of scalar ``fn(*tensors)`` w.r.t. each tensor, element by element."""
    grads = []
    with torch.no_grad():
        for t in tensors:
            g = torch.zeros_like(t)
            flat, gflat = t.view(-1), g.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + eps
                up = float(fn(*tensors))
                flat[i] = orig - eps
                down = float(fn(*tensors))
                flat[i] = orig
                gflat[i] = (up - down) / (2 * eps)
            grads.append(g)
    return grads


def analytic_gradient(fn, tensors: list[torch.Tensor]) -> list[torch.Tensor]:
    leaves = [t.detach().clone().requires_grad_(True) for t in tensors]
    out = fn(*leaves)
    grads = torch.autograd.grad(out, leaves, allow_unused=True)
    return [torch.zeros_like(t) if g is None else g for t, g in zip(tensors, grads)]


def relative_error(a: torch.Tensor, b: torch.Tensor) -> float:
    num = (a - b).abs().max().item()
    den = max(a.abs().max().item(), b.abs().max().item(), 1e-12)
    return num / den
