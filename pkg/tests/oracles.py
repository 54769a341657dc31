"""Scalar oracles used across the test suite.

Everything here is deliberately slow and literal: python loops, math.*
scalar calls, f64 throughout.  The library is correct when its vectorized
paths land on these values within the stated tolerances.
"""

import math

import numpy as np


def affine_oracle(x, weight, bias=None):
    x = np.asarray(x, dtype=np.float64)
    weight = np.asarray(weight, dtype=np.float64)
    out = np.zeros(x.shape[:-1] + (weight.shape[1],), dtype=np.float64)
    flat = x.reshape(-1, x.shape[-1])
    oflat = out.reshape(-1, weight.shape[1])
    for r in range(flat.shape[0]):
        for o in range(weight.shape[1]):
            acc = 0.0
            for i in range(weight.shape[0]):
                acc += flat[r, i] * weight[i, o]
            if bias is not None:
                acc += float(bias[o])
            oflat[r, o] = acc
    return out


def layer_norm_oracle(x, gamma, beta, eps=1e-5):
    x = np.asarray(x, dtype=np.float64)
    out = np.zeros_like(x)
    for r in range(x.shape[0]):
        row = x[r]
        mu = sum(row) / len(row)
        var = sum((t - mu) ** 2 for t in row) / len(row)
        denom = math.sqrt(var + eps)
        for i in range(len(row)):
            out[r, i] = (row[i] - mu) / denom * float(gamma[i]) \
                + float(beta[i])
    return out


def attention_oracle(q, k, v, group, allowed=None):
    """Grouped-query attention, one scalar at a time.

    allowed: optional per-query list/array of attendable key indices;
    None means all keys.
    """
    n, hq, dh = q.shape
    out = np.zeros((n, hq, dh), dtype=np.float64)
    inv = 1.0 / math.sqrt(dh)
    for i in range(n):
        keys = range(k.shape[0]) if allowed is None else \
            [int(j) for j in allowed[i]]
        for h in range(hq):
            kvh = h // group
            logits = []
            for j in keys:
                acc = 0.0
                for t in range(dh):
                    acc += float(q[i, h, t]) * float(k[j, kvh, t])
                logits.append(acc * inv)
            m = max(logits)
            ws = [math.exp(l - m) for l in logits]
            z = sum(ws)
            for w, j in zip(ws, keys):
                for t in range(dh):
                    out[i, h, t] += (w / z) * float(v[j, kvh, t])
    return out


def trilinear_oracle(volume, p):
    """One point, plain loops, cell-center convention with border
    extrapolation (frac may leave [0,1] near the walls)."""
    side = volume.shape[0]
    t = [p[a] * side - 0.5 for a in range(3)]
    i0 = [min(max(int(math.floor(t[a])), 0), side - 2) for a in range(3)]
    f = [t[a] - i0[a] for a in range(3)]
    out = np.zeros(volume.shape[3], dtype=np.float64)
    for dx in (0, 1):
        wx = f[0] if dx else 1.0 - f[0]
        for dy in (0, 1):
            wy = f[1] if dy else 1.0 - f[1]
            for dz in (0, 1):
                wz = f[2] if dz else 1.0 - f[2]
                out += wx * wy * wz * volume[
                    i0[0] + dx, i0[1] + dy, i0[2] + dz].astype(np.float64)
    return out


def gelu_oracle(x):
    x = np.asarray(x, dtype=np.float64)
    flat = x.reshape(-1)
    out = np.array([0.5 * t * (1.0 + math.erf(t / math.sqrt(2.0)))
                    for t in flat])
    return out.reshape(x.shape)


def sigmoid_oracle(x):
    x = np.asarray(x, dtype=np.float64)
    flat = x.reshape(-1)
    out = np.array([1.0 / (1.0 + math.exp(-t)) for t in flat])
    return out.reshape(x.shape)
