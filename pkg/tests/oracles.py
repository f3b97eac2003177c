"""Independent reference implementations used as test oracles.

Nothing here touches the block algebra of ``quenchlab.models``.  Fields are
evaluated site by site from the kernel definition; conditional expectations
come from resampling every non-measurable innovation with numpy's
``default_rng`` or, for sign innovations on few free sites, from exhaustive
enumeration of all sign patterns.
"""

from __future__ import annotations

import itertools
import math

import numpy as np

from quenchlab.kernels import FiniteSupportKernel, LinearKernel, VolterraKernel
from quenchlab.lattice import Box

MAX_ENUMERATED = 14


def kernel_offsets(kernel, radius: int) -> list[tuple[int, ...]]:
    """Lags ``j`` such that ``X_k`` depends on ``xi_{k-j}``."""
    d = kernel.d
    if isinstance(kernel, LinearKernel):
        return list(itertools.product(range(radius + 1), repeat=d))
    if isinstance(kernel, VolterraKernel):
        return sorted({p for pq in kernel.entries for p in pq})
    return list(kernel.stencil)


def hull_for(kernel, radius: int, sites) -> Box:
    sites = list(sites)
    offs = kernel_offsets(kernel, radius)
    d = kernel.d
    lo = tuple(min(s[i] - o[i] for s in sites for o in offs) for i in range(d))
    hi = tuple(max(s[i] - o[i] for s in sites for o in offs) for i in range(d))
    return Box(lo, hi)


def field_at(kernel, xi: np.ndarray, lo, site, radius: int) -> np.ndarray:
    """``X_site`` for a batch of innovation arrays ``xi`` of shape ``(N, *hull)``."""

    def at(j):
        idx = tuple(s - jj - l for s, jj, l in zip(site, j, lo))
        return xi[(slice(None),) + idx]

    n = xi.shape[0]
    if isinstance(kernel, LinearKernel):
        out = np.zeros(n)
        for j in itertools.product(range(radius + 1), repeat=kernel.d):
            a = kernel.coefficient(j)
            if a != 0.0:
                out += a * at(j)
        return out
    if isinstance(kernel, VolterraKernel):
        out = np.zeros(n)
        for (p, q), a in kernel.entries.items():
            out += a * at(p) * at(q)
        return out
    if isinstance(kernel, FiniteSupportKernel):
        x = np.stack([at(s) for s in kernel.stencil], axis=-1)
        return np.asarray(kernel.function(x), dtype=float)
    raise TypeError(type(kernel))


def window_sum(kernel, xi, lo, sites, radius) -> np.ndarray:
    return sum(field_at(kernel, xi, lo, s, radius) for s in sites)


def draw(spec, rng: np.random.Generator, shape) -> np.ndarray:
    sd = spec.sd
    if spec.distribution == "normal":
        return sd * rng.standard_normal(shape)
    if spec.distribution == "rademacher":
        return sd * rng.choice(np.array([-1.0, 1.0]), size=shape)
    if spec.distribution == "exponential":
        return rng.exponential(sd, size=shape) - sd
    raise ValueError(spec.distribution)


def free_mask(hull: Box, level) -> np.ndarray:
    """Sites of the hull that are NOT measurable for ``F_level``."""
    grids = np.meshgrid(*hull.axes(), indexing="ij")
    measurable = np.all([g <= a for g, a in zip(grids, level)], axis=0)
    return ~measurable


def conditional(fn, xi_base: np.ndarray, hull: Box, level, spec, rng, n: int = 4000):
    """``(estimate, standard error)`` of ``E(fn(xi) | F_level)`` given one innovation array.

    Exact (SE 0) by enumeration for sign innovations with few free sites.
    """
    free = free_mask(hull, level)
    m = int(free.sum())
    if m == 0:
        return float(fn(xi_base[None])[0]), 0.0
    if spec.distribution == "rademacher" and m <= MAX_ENUMERATED:
        signs = np.array(list(itertools.product((-1.0, 1.0), repeat=m))) * spec.sd
        batch = np.repeat(xi_base[None], len(signs), axis=0)
        batch[:, free] = signs
        return float(np.mean(fn(batch))), 0.0
    batch = np.repeat(xi_base[None], n, axis=0)
    batch[:, free] = draw(spec, rng, (n, m))
    vals = fn(batch)
    return float(np.mean(vals)), float(np.std(vals, ddof=1) / math.sqrt(n))


def corners(d: int):
    for e in itertools.product((0, 1), repeat=d):
        yield e, (-1) ** sum(e)


def projection(fn, xi_base, hull, u, spec, rng, n=4000):
    """``P_u`` as the alternating sum of conditional expectations."""
    total, var = 0.0, 0.0
    for e, sign in corners(len(u)):
        m, se = conditional(fn, xi_base, hull, tuple(a - b for a, b in zip(u, e)), spec, rng, n)
        total += sign * m
        var += se * se
    return total, math.sqrt(var)


def remainder(fn, xi_base, hull, window, spec, rng, n=4000):
    """``-sum over nonempty axis sets A of (-1)^|A| E(S | F_{n^A})``, n^A zeroing A."""
    d = len(window)
    total, var = 0.0, 0.0
    for k in range(1, d + 1):
        for axes in itertools.combinations(range(d), k):
            level = tuple(0 if i in axes else window[i] for i in range(d))
            m, se = conditional(fn, xi_base, hull, level, spec, rng, n)
            total += -((-1) ** k) * m
            var += se * se
    return total, math.sqrt(var)
