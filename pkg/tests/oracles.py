"""Independent reference computations for the tests.

Deliberately plain: Python loops, the stdlib ``math`` and ``decimal`` modules,
no vectorised shortcuts shared with the package.
"""

from __future__ import annotations

import math
from decimal import Decimal, getcontext

getcontext().prec = 50

TWO_PI = 2 * Decimal("3.14159265358979323846264338327950288419716939937510")


def theta_exact(j: int, exponent_dim: int, base: int = 10000) -> Decimal:
    return Decimal(int(base)) ** (Decimal(-2 * (int(j) - 1)) / Decimal(int(exponent_dim)))


def wavelength_exact(j: int, exponent_dim: int, base: int = 10000) -> Decimal:
    return TWO_PI / theta_exact(j, exponent_dim, base)


def bands_bruteforce(wavelengths, L: float, m: int) -> dict[str, list[int]]:
    """1-based pair indices per band by sorting and thresholding one pair at a time."""
    order = sorted(range(len(wavelengths)), key=lambda i: (wavelengths[i], i))
    high = set(order[:m])
    out = {"High": [], "Mid": [], "Low": [], "VeryLow": []}
    for i, t in enumerate(wavelengths):
        if i in high:
            out["High"].append(i + 1)
        elif t < L:
            out["Mid"].append(i + 1)
        elif t <= 4 * L:
            out["Low"].append(i + 1)
        else:
            out["VeryLow"].append(i + 1)
    return out


def softmax_row(row, alpha: float = 1.0) -> list[float]:
    top = max(alpha * x for x in row)
    e = [math.exp(alpha * x - top) for x in row]
    z = math.fsum(e)
    return [v / z for v in e]


def entropy(S, alpha: float = 1.0) -> float:
    """Normalised Shannon entropy of softmax(alpha * S), averaged over rows."""
    total = []
    for row in S:
        p = softmax_row(list(row), alpha)
        h = -math.fsum(v * math.log(v) for v in p if v > 0)
        total.append(h / math.log(len(p)))
    return math.fsum(total) / len(total)


def logit_variance(S) -> float:
    out = []
    for row in S:
        p = softmax_row(list(row))
        mean = math.fsum(pi * s for pi, s in zip(p, row))
        out.append(math.fsum(pi * (s - mean) ** 2 for pi, s in zip(p, row)))
    return math.fsum(out) / len(out)


def central_difference(f, x: float, h: float = 1e-5) -> float:
    return (f(x + h) - f(x - h)) / (2 * h)


def bisect(f, lo: float, hi: float, tol: float = 1e-14, max_iter: int = 200) -> float:
    """Root of ``f`` on [lo, hi]; the endpoints must bracket a sign change."""
    flo, fhi = f(lo), f(hi)
    if flo == 0:
        return lo
    if fhi == 0:
        return hi
    if (flo > 0) == (fhi > 0):
        raise ValueError(f"no sign change on [{lo}, {hi}]")
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        fm = f(mid)
        if fm == 0 or hi - lo < tol:
            return mid
        if (fm > 0) == (flo > 0):
            lo, flo = mid, fm
        else:
            hi = mid
    return 0.5 * (lo + hi)


def rotate_pair(x0: float, x1: float, angle: float) -> tuple[float, float]:
    c, s = math.cos(angle), math.sin(angle)
    return x0 * c - x1 * s, x0 * s + x1 * c
