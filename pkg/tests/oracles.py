"""Independent reference computations used by the tests."""
import itertools
import math

import mpmath as mp
import numpy as np

mp.mp.dps = 40


def _cos(a, b):
    dot = mp.fsum(mp.mpf(float(x)) * mp.mpf(float(y)) for x, y in zip(a, b))
    na = mp.sqrt(mp.fsum(mp.mpf(float(x)) ** 2 for x in a))
    nb = mp.sqrt(mp.fsum(mp.mpf(float(y)) ** 2 for y in b))
    return dot / (na * nb)


def ntxent_bruteforce(z, tau):
    """Enumerate every anchor / candidate pair at 40-digit precision."""
    z = np.asarray(z, dtype=np.float64)
    n = len(z)
    total = mp.mpf(0)
    for i in range(n):
        j = i + 1 if i % 2 == 0 else i - 1
        num = mp.exp(_cos(z[i], z[j]) / tau)
        den = mp.fsum(mp.exp(_cos(z[i], z[k]) / tau) for k in range(n) if k != i)
        total += -mp.log(num / den)
    return float(total / n)


def masked_bruteforce(recon, targets):
    return float(mp.fsum(1 - _cos(a, b) for a, b in zip(recon, targets)) / len(recon))


def auc_pairs(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y]
    neg = [s for s, y in zip(scores, labels) if not y]
    wins = sum(1.0 if p > q else 0.5 if p == q else 0.0 for p, q in itertools.product(pos, neg))
    return wins / (len(pos) * len(neg))


def central_difference(f, x, h=1e-6):
    """Gradient of scalar f at array x by central differences."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[idx] += h
        xm[idx] -= h
        g[idx] = (f(xp) - f(xm)) / (2 * h)
    return g


def sinusoid_oracle(t, n_pairs, max_period=10000.0):
    freqs = [max_period ** (-k / (n_pairs - 1)) for k in range(n_pairs)]
    return [math.sin(t * f) for f in freqs] + [math.cos(t * f) for f in freqs]


def block_params(d, ratio):
    ln = 2 * d
    attn = (d * 3 * d + 3 * d) + (d * d + d)
    mlp = (d * ratio * d + ratio * d) + (ratio * d * d + d)
    return 2 * ln + attn + mlp


def encoder_params(image, patch, channels, d, ls, lt, capacity, ratio=4, te=False):
    n = (image // patch) ** 2
    spatial = (patch * patch * channels * d + d) + d + (n + 1) * d + ls * block_params(d, ratio) + 2 * d
    temporal = d + d + capacity * d + lt * block_params(d, ratio) + 2 * d
    if te:
        temporal += 2 * (d * d + d)
    return spatial + temporal
