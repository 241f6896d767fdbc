"""Independent reference implementations used to verify the package.

Everything here is deliberately written as straight-line scalar code
(python loops, math module) so it shares no code path with the
implementations under test.
"""

from __future__ import annotations

import math
from collections import deque

import numpy as np

from alan.raptor_head import RaptorParams


def forward_oracle(x, params: RaptorParams) -> np.ndarray:
    """Scalar re-implementation of the 3-layer head with skips."""
    x = np.asarray(x, dtype=np.float64)
    n, c = x.shape
    k = params.K
    w1, b1, w2, b2, w3, b3 = params.arrays()
    probs = np.zeros((n, k))
    for i in range(n):
        a1 = [sum(w1[r][j] * x[i][j] for j in range(c)) + b1[r] for r in range(c)]
        h1 = [x[i][r] + 0.5 * a1[r] * (1.0 + math.erf(a1[r] / math.sqrt(2.0)))
              for r in range(c)]
        a2 = [sum(w2[r][j] * h1[j] for j in range(c)) + b2[r] for r in range(c)]
        h2 = [h1[r] + max(a2[r], 0.0) for r in range(c)]
        logits = [sum(w3[r][j] * h2[j] for j in range(c)) + b3[r] for r in range(k)]
        mx = max(logits)
        exps = [math.exp(v - mx) for v in logits]
        total = sum(exps)
        for r in range(k):
            probs[i][r] = exps[r] / total
    return probs


def finite_diff_params(f, params: RaptorParams, h: float = 1e-5) -> RaptorParams:
    """Central finite differences of a scalar function of the parameters."""
    grads = []
    for ai, arr in enumerate(params.arrays()):
        g = np.zeros_like(arr)
        for idx in np.ndindex(arr.shape):
            plus = [a.copy() for a in params.arrays()]
            minus = [a.copy() for a in params.arrays()]
            plus[ai][idx] += h
            minus[ai][idx] -= h
            g[idx] = (f(RaptorParams.from_arrays(plus))
                      - f(RaptorParams.from_arrays(minus))) / (2.0 * h)
        grads.append(g)
    return RaptorParams.from_arrays(grads)


def max_rel_error(analytic: RaptorParams, reference: RaptorParams,
                  floor: float = 1e-6) -> float:
    """Worst relative disagreement over all parameters."""
    worst = 0.0
    for a, r in zip(analytic.arrays(), reference.arrays()):
        denom = np.maximum(np.maximum(np.abs(a), np.abs(r)), floor)
        worst = max(worst, float(np.max(np.abs(a - r) / denom)))
    return worst


def cosine_oracle(f_a, f_b) -> np.ndarray:
    f_a = np.asarray(f_a, dtype=np.float64)
    f_b = np.asarray(f_b, dtype=np.float64)
    out = np.zeros((f_a.shape[0], f_b.shape[0]))
    for p in range(f_a.shape[0]):
        for q in range(f_b.shape[0]):
            na = math.sqrt(sum(v * v for v in f_a[p]))
            nb = math.sqrt(sum(v * v for v in f_b[q]))
            if na == 0.0 or nb == 0.0:
                out[p][q] = 0.0
            else:
                dot = sum(f_a[p][j] * f_b[q][j] for j in range(f_a.shape[1]))
                out[p][q] = dot / (na * nb)
    return out


def loss_term_oracle(f_corr, s_corr, shift, sign):
    f_corr = np.asarray(f_corr, dtype=np.float64)
    s_corr = np.asarray(s_corr, dtype=np.float64)
    count = f_corr.size
    value = 0.0
    d_s = np.zeros_like(s_corr)
    for p in range(f_corr.shape[0]):
        for q in range(f_corr.shape[1]):
            if s_corr[p][q] > 0.0:
                value += -sign * (f_corr[p][q] - shift) * s_corr[p][q] / count
                d_s[p][q] = -sign * (f_corr[p][q] - shift) / count
    return value, d_s


def adam_trace_oracle(theta0, grads, lr, b1=0.9, b2=0.999, eps=1e-8):
    """Scalar Adam iteration; returns parameter value after each step."""
    m = 0.0
    v = 0.0
    theta = theta0
    out = []
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        theta = theta - lr * m_hat / (math.sqrt(v_hat) + eps)
        out.append(theta)
    return out


def fit_interior_oracle(maps, masks, k, overlap_frac=0.75, hit_rate=0.50,
                        presence_rate=0.30) -> set[int]:
    """Triple-loop evaluation of the three interior rules."""
    total = len(maps)
    presence = [0] * k
    hits = [0] * k
    for pm, mask in zip(maps, masks):
        h, w = np.asarray(pm).shape
        for p in range(k):
            area = 0
            inter = 0
            for y in range(h):
                for x in range(w):
                    if pm[y][x] == p:
                        area += 1
                        if mask[y][x]:
                            inter += 1
            if area > 0:
                presence[p] += 1
                if inter >= overlap_frac * area:
                    hits[p] += 1
    return {
        p for p in range(k)
        if presence[p] > 0
        and hits[p] >= hit_rate * presence[p]
        and presence[p] >= presence_rate * total
    }


def components_oracle(mask):
    """4-connected component labelling by BFS, labels in scan order."""
    mask = np.asarray(mask).astype(bool)
    h, w = mask.shape
    labels = np.zeros((h, w), dtype=np.int32)
    n = 0
    for sy in range(h):
        for sx in range(w):
            if not mask[sy][sx] or labels[sy][sx]:
                continue
            n += 1
            queue = deque([(sy, sx)])
            labels[sy][sx] = n
            while queue:
                y, x = queue.popleft()
                for dy, dx in ((-1, 0), (1, 0), (0, -1), (0, 1)):
                    ny, nx = y + dy, x + dx
                    if 0 <= ny < h and 0 <= nx < w and mask[ny][nx] \
                            and not labels[ny][nx]:
                        labels[ny][nx] = n
                        queue.append((ny, nx))
    return labels, n


def _disk_offsets(radius):
    return [(dy, dx)
            for dy in range(-radius, radius + 1)
            for dx in range(-radius, radius + 1)
            if dy * dy + dx * dx <= radius * radius]


def close_oracle(mask, radius):
    """Scalar-loop closing: pad with background, dilate, erode, crop."""
    mask = np.asarray(mask).astype(bool)
    if radius == 0:
        return mask.astype(np.uint8)
    offsets = _disk_offsets(radius)
    padded = np.pad(mask, radius, constant_values=False)
    h, w = padded.shape

    def value(arr, y, x):
        return arr[y][x] if 0 <= y < h and 0 <= x < w else False

    dilated = np.zeros_like(padded)
    for y in range(h):
        for x in range(w):
            dilated[y][x] = any(value(padded, y + dy, x + dx)
                                for dy, dx in offsets)
    eroded = np.zeros_like(padded)
    for y in range(h):
        for x in range(w):
            eroded[y][x] = all(value(dilated, y + dy, x + dx)
                               for dy, dx in offsets)
    return eroded[radius:-radius, radius:-radius].astype(np.uint8)


def knn_oracle(query, descriptors, labels, k, tau):
    """Brute-force weighted kNN vote with explicit tie rules."""
    query = [float(v) for v in query]
    qn = math.sqrt(sum(v * v for v in query))
    query = [v / qn for v in query]
    sims = []
    for row in descriptors:
        rn = math.sqrt(sum(float(v) * float(v) for v in row))
        sims.append(sum((float(v) / rn) * q for v, q in zip(row, query)))
    order = sorted(range(len(sims)), key=lambda i: (-sims[i], i))[:k]
    weights: dict[str, float] = {}
    for i in order:
        weights[labels[i]] = weights.get(labels[i], 0.0) + math.exp(sims[i] / tau)
    best = None
    for name in sorted(weights):
        if best is None or weights[name] > weights[best]:
            best = name
    return best
