"""Coefficient kernels, local functions and the kernel file format.

Linear kernels map ``j >= 0`` to ``a_j``.  Separable kinds (geometric,
power-log) are products of one-dimensional axis factors, which lets every
series over the kernel factor into one-dimensional series with closed-form
or integral-comparison tail bounds.  Volterra kernels are finite tables of
off-diagonal pairs.  Finite-support kernels carry a local function of the
innovations on a small stencil.

Kernel files are JSON; :func:`dumps_kernel` is canonical, so
``dumps_kernel(loads_kernel(text)) == text`` for any text it produced.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .errors import KernelFormatError, KernelInvalid, UnsupportedDistribution
from .lattice import MAX_DIM, Index, InnovationSpec, as_index

MAX_STENCIL = 16
MAX_QUADRATURE_SITES = 4


# ---------------------------------------------------------------------------
# one-dimensional axis factors
# ---------------------------------------------------------------------------


def powerlog(t, s: float, r: float) -> np.ndarray:
    """``t^-s log(1+t)^-r`` for t >= 1."""
    t = np.asarray(t, dtype=float)
    return t**-s * np.log1p(t) ** -r


def powerlog_tail_upper(m: int, s: float, r: float) -> float:
    """Certified upper bound of ``sum_{t>=m} t^-s log(1+t)^-r`` (m >= 1).

    Uses ``sum_{t>=m} g(t) <= g(m) + int_m^inf g`` for decreasing g, and bounds
    the log factor by its value at m.  Returns inf when the series diverges
    or the comparison cannot certify it.
    """
    m = max(int(m), 1)
    g_m = float(powerlog(m, s, r))
    if s > 1:
        return g_m + math.log1p(m) ** -r * m ** (1 - s) / (s - 1)
    if s == 1 and r > 1:
        if m < 2:
            return g_m + powerlog_tail_upper(2, s, r)
        return g_m + math.log(m) ** (1 - r) / (r - 1)
    return math.inf


def powerlog_tail_lower(m: int, s: float, r: float) -> float:
    """Certified lower bound of ``sum_{t>=m} t^-s log(1+t)^-r`` (m >= 1)."""
    m = max(int(m), 1)
    if r == 0:
        if s <= 1:
            return math.inf
        return m ** (1 - s) / (s - 1)
    if s == 1:
        if r <= 1:
            return math.inf
        # sum_{t>=m} g(t) >= int_m^inf dt / ((1+t) log(1+t)^r)
        return math.log1p(m) ** (1 - r) / (r - 1)
    # sum_{t=m}^{2m-1} g(t) >= m g(2m)
    return m * float(powerlog(2 * m, s, r))


def product_tail(heads: Sequence[float], tails: Sequence[float]) -> float:
    """``prod(h + t) - prod(h)`` expanded over nonempty subsets, free of cancellation."""
    terms = []
    for pick in itertools.product((False, True), repeat=len(heads)):
        if any(pick):
            terms.append(math.prod(t if p else h for p, h, t in zip(pick, heads, tails)))
    return math.fsum(terms)


@dataclass(frozen=True)
class GeometricAxis:
    rate: float

    def values(self, t: np.ndarray) -> np.ndarray:
        return self.rate ** np.asarray(t, dtype=float)

    def sq_tail(self, m: int) -> tuple[float, float]:
        """Bracket ``(lo, hi)`` for ``sum_{t>=m} phi(t)^2``."""
        v = self.rate ** (2 * max(m, 0)) / (1 - self.rate**2)
        return v, v

    def abs_tail(self, m: int) -> tuple[float, float]:
        v = self.rate ** max(m, 0) / (1 - self.rate)
        return v, v


@dataclass(frozen=True)
class PowerLogAxis:
    """``phi(t) = t^-alpha log(1+t)^-beta`` for ``t >= start``, zero below."""

    alpha: float
    beta: float = 0.0
    start: int = 1

    def values(self, t: np.ndarray) -> np.ndarray:
        t = np.asarray(t)
        out = np.zeros(t.shape, dtype=float)
        ok = t >= self.start
        out[ok] = powerlog(t[ok], self.alpha, self.beta)
        return out

    def _tail(self, m: int, s: float, r: float) -> tuple[float, float]:
        m0 = max(int(m), self.start)
        return powerlog_tail_lower(m0, s, r), powerlog_tail_upper(m0, s, r)

    def sq_tail(self, m: int) -> tuple[float, float]:
        return self._tail(m, 2 * self.alpha, 2 * self.beta)

    def abs_tail(self, m: int) -> tuple[float, float]:
        return self._tail(m, self.alpha, self.beta)


# ---------------------------------------------------------------------------
# linear kernels
# ---------------------------------------------------------------------------


class LinearKernel:
    """Base class of coefficient kernels ``j -> a_j`` supported on ``j >= 0``."""

    kind: str
    d: int

    #: axis factors when the kernel is a product ``scale * prod_i phi_i(j_i)``
    axes: tuple | None = None
    scale: float = 1.0

    @property
    def support_radius(self) -> int | None:
        """Largest coordinate of the support, None for infinite support."""
        return None

    def dense(self, radius: int) -> np.ndarray:
        """Coefficients on ``[0, radius]^d`` as an array."""
        grid = np.indices((radius + 1,) * self.d)
        out = np.full((radius + 1,) * self.d, self.scale, dtype=float)
        for ax, idx in zip(self.axes, grid):
            out *= ax.values(idx)
        return out

    def coefficient(self, j: Sequence[int]) -> float:
        j = as_index(j, self.d)
        if any(c < 0 for c in j):
            return 0.0
        return self.scale * math.prod(float(ax.values(np.array([c]))[0]) for ax, c in zip(self.axes, j))

    def tail_sq(self, radius: int) -> float:
        """Certified upper bound of ``sum_{j not in [0, radius]^d} a_j^2``."""
        heads = [math.fsum(ax.values(np.arange(radius + 1)) ** 2) for ax in self.axes]
        tails = [ax.sq_tail(radius + 1)[1] for ax in self.axes]
        return self.scale**2 * product_tail(heads, tails)

    def tail_abs(self, radius: int) -> float:
        """Certified upper bound of ``sum_{j not in [0, radius]^d} |a_j|``."""
        heads = [math.fsum(np.abs(ax.values(np.arange(radius + 1)))) for ax in self.axes]
        tails = [ax.abs_tail(radius + 1)[1] for ax in self.axes]
        return abs(self.scale) * product_tail(heads, tails)

    def sum_bracket(self, head: int = 2**20) -> tuple[float, float]:
        """Certified bracket of ``sum_j a_j`` for a product kernel with summable axes."""
        lo, hi = abs(self.scale), abs(self.scale)
        for ax in self.axes:
            h = math.fsum(ax.values(np.arange(head + 1)))
            t_lo, t_hi = ax.abs_tail(head + 1)
            lo *= h + t_lo
            hi *= h + t_hi
        return (lo, hi) if self.scale >= 0 else (-hi, -lo)

    def choose_radius(self, variance: float, tolerance: float, max_radius: int = 512) -> int:
        """Smallest radius whose squared L2 tail is within ``tolerance``."""
        finite = self.support_radius
        if finite is not None:
            return finite
        for r in range(0, max_radius + 1):
            if variance * self.tail_sq(r) <= tolerance:
                return r
        return max_radius

    def to_record(self) -> dict:
        raise NotImplementedError

    def __eq__(self, other):
        return type(self) is type(other) and self.to_record() == other.to_record()

    def __hash__(self):
        return hash(json.dumps(self.to_record(), sort_keys=True))


class TableKernel(LinearKernel):
    """Finitely supported kernel given by explicit ``(index, coefficient)`` pairs."""

    kind = "table"

    def __init__(self, entries: Mapping[Sequence[int], float], d: int | None = None):
        items = {}
        for j, a in entries.items():
            j = as_index(j, d)
            d = len(j)
            if any(c < 0 for c in j):
                raise KernelInvalid(f"kernel index {j} is outside the adapted support j >= 0")
            if not math.isfinite(a):
                raise KernelInvalid(f"non-finite coefficient at {j}")
            if a != 0.0:
                items[j] = items.get(j, 0.0) + float(a)
        if d is None:
            raise KernelInvalid("empty table kernel needs an explicit dimension")
        self.d = d
        self.entries = dict(sorted(items.items()))

    @property
    def support_radius(self) -> int:
        return max((max(j) for j in self.entries), default=0)

    def coefficient(self, j):
        return self.entries.get(as_index(j, self.d), 0.0)

    def dense(self, radius: int) -> np.ndarray:
        out = np.zeros((radius + 1,) * self.d)
        for j, a in self.entries.items():
            if max(j) <= radius:
                out[j] = a
        return out

    def tail_sq(self, radius: int) -> float:
        return math.fsum(a * a for j, a in self.entries.items() if max(j) > radius)

    def tail_abs(self, radius: int) -> float:
        return math.fsum(abs(a) for j, a in self.entries.items() if max(j) > radius)

    def to_record(self) -> dict:
        return {
            "kind": self.kind,
            "d": self.d,
            "entries": [[list(j), a] for j, a in self.entries.items()],
        }

    def __repr__(self):
        return f"TableKernel({self.entries})"


class GeometricKernel(LinearKernel):
    """``a_j = scale * prod_i rate_i^{j_i}``."""

    kind = "geometric"

    def __init__(self, rates: Sequence[float], scale: float = 1.0):
        rates = tuple(float(r) for r in rates)
        if not 1 <= len(rates) <= MAX_DIM:
            raise KernelInvalid("geometric kernel needs one rate per axis")
        if not all(0 < r < 1 for r in rates):
            raise KernelInvalid(f"geometric rates must lie in (0, 1), got {rates}")
        self.d = len(rates)
        self.rates = rates
        self.scale = float(scale)
        self.axes = tuple(GeometricAxis(r) for r in rates)

    def to_record(self) -> dict:
        return {"kind": self.kind, "d": self.d, "rates": list(self.rates), "scale": self.scale}

    def __repr__(self):
        return f"GeometricKernel(rates={self.rates}, scale={self.scale})"


class PolySlowVarKernel(LinearKernel):
    """``a_j = scale * prod_i j_i^-alpha_i log(1+j_i)^-beta_i`` for ``j_i >= start``.

    With ``alpha = (1, 1)`` and ``beta = (2, 2)`` this is the family
    ``a_{u,v} = 1 / (u v h(u) g(v))`` with ``h = g = log^2(1 + .)``.
    """

    kind = "poly_slow_var"

    def __init__(
        self,
        exponents: Sequence[float],
        log_powers: Sequence[float] | None = None,
        start: int = 1,
        scale: float = 1.0,
    ):
        exponents = tuple(float(a) for a in exponents)
        log_powers = tuple(float(b) for b in (log_powers or (0.0,) * len(exponents)))
        if len(log_powers) != len(exponents) or not 1 <= len(exponents) <= MAX_DIM:
            raise KernelInvalid("need one exponent and one log power per axis")
        if not all(a > 0.5 for a in exponents):
            raise KernelInvalid("exponents must exceed 1/2 for a square-summable kernel")
        if any(b < 0 for b in log_powers):
            raise KernelInvalid("log powers must be >= 0")
        if int(start) < 1:
            raise KernelInvalid("start must be >= 1")
        self.d = len(exponents)
        self.exponents = exponents
        self.log_powers = log_powers
        self.start = int(start)
        self.scale = float(scale)
        self.axes = tuple(PowerLogAxis(a, b, self.start) for a, b in zip(exponents, log_powers))

    def to_record(self) -> dict:
        return {
            "kind": self.kind,
            "d": self.d,
            "exponents": list(self.exponents),
            "log_powers": list(self.log_powers),
            "start": self.start,
            "scale": self.scale,
        }

    def __repr__(self):
        return (
            f"PolySlowVarKernel(exponents={self.exponents}, log_powers={self.log_powers}, "
            f"start={self.start})"
        )


# ---------------------------------------------------------------------------
# Volterra kernels
# ---------------------------------------------------------------------------


class VolterraKernel:
    """Finite table of pair coefficients ``a_{u,v}``, zero on the diagonal."""

    kind = "volterra"

    def __init__(self, entries: Mapping[tuple[Sequence[int], Sequence[int]], float], d: int | None = None):
        items = {}
        for (u, v), a in entries.items():
            u, v = as_index(u, d), as_index(v, d)
            d = len(u)
            if len(v) != d:
                raise KernelInvalid("pair indices must share a dimension")
            if any(c < 0 for c in u + v):
                raise KernelInvalid(f"pair {(u, v)} is outside the adapted support")
            if not math.isfinite(a):
                raise KernelInvalid(f"non-finite coefficient at {(u, v)}")
            if u == v and a != 0.0:
                raise KernelInvalid(
                    f"Volterra kernels need a_(u,u) = 0 on the diagonal; got a_{(u, u)} = {a}"
                )
            if a != 0.0:
                items[(u, v)] = items.get((u, v), 0.0) + float(a)
        if d is None:
            raise KernelInvalid("empty Volterra kernel needs an explicit dimension")
        self.d = d
        self.entries = dict(sorted(items.items()))

    @property
    def support_radius(self) -> int:
        return max((max(u + v) for u, v in self.entries), default=0)

    def symmetrized(self) -> dict[tuple[Index, Index], float]:
        """Coefficients of the unordered site pairs ``{u, v}`` (keyed with u < v)."""
        out: dict[tuple[Index, Index], float] = {}
        for (u, v), a in self.entries.items():
            key = (u, v) if u < v else (v, u)
            out[key] = out.get(key, 0.0) + a
        return out

    def to_record(self) -> dict:
        return {
            "kind": self.kind,
            "d": self.d,
            "entries": [[list(u), list(v), a] for (u, v), a in self.entries.items()],
        }

    def __eq__(self, other):
        return isinstance(other, VolterraKernel) and self.to_record() == other.to_record()

    def __hash__(self):
        return hash(json.dumps(self.to_record(), sort_keys=True))

    def __repr__(self):
        return f"VolterraKernel({self.entries})"


# ---------------------------------------------------------------------------
# local functions for finite-support fields
# ---------------------------------------------------------------------------


class LocalFunction:
    """Real function of ``arity`` innovations, evaluated on arrays ``(..., arity)``."""

    arity: int
    serializable = False

    def __call__(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def condition(self, keep: Sequence[bool], spec: InnovationSpec) -> "LocalFunction":
        """Integrate out the arguments with ``keep[i] == False``."""
        raise NotImplementedError

    def constant(self, spec: InnovationSpec) -> float:
        """The full expectation ``E f``."""
        g = self.condition((False,) * self.arity, spec)
        return float(np.asarray(g(np.zeros((0,)))))

    def to_record(self) -> dict:
        raise KernelInvalid(f"{type(self).__name__} cannot be serialised")


class SignTable(LocalFunction):
    """Values of f on the sign patterns ``{-1, +1}^m`` (index 0 is the negative sign)."""

    serializable = True

    def __init__(self, values):
        values = np.asarray(values, dtype=float)
        m = int(round(math.log2(values.size))) if values.size else -1
        if values.size != 2**m:
            raise KernelInvalid("a sign table needs 2^m values")
        self.arity = m
        self.values = values.reshape((2,) * m)

    def __call__(self, x):
        x = np.asarray(x)
        idx = (x > 0).astype(np.intp)
        return self.values[tuple(idx[..., i] for i in range(self.arity))]

    def condition(self, keep, spec):
        if spec.distribution != "rademacher":
            raise UnsupportedDistribution("sign tables are only defined for Rademacher innovations")
        drop = tuple(i for i, k in enumerate(keep) if not k)
        return SignTable(self.values.mean(axis=drop) if drop else self.values)

    def to_record(self):
        return {"type": "sign_table", "values": self.values.ravel().tolist()}


class Polynomial(LocalFunction):
    """``sum_t c_t prod_i x_i^{e_{t,i}}``; conditioning substitutes raw moments."""

    serializable = True

    def __init__(self, terms: Sequence[tuple[float, Sequence[int]]], arity: int | None = None):
        merged: dict[tuple[int, ...], float] = {}
        for coef, exps in terms:
            exps = tuple(int(e) for e in exps)
            if arity is None:
                arity = len(exps)
            if len(exps) != arity or any(e < 0 for e in exps):
                raise KernelInvalid("polynomial exponents must be nonnegative, one per stencil site")
            merged[exps] = merged.get(exps, 0.0) + float(coef)
        if arity is None:
            raise KernelInvalid("empty polynomial needs an explicit arity")
        self.arity = arity
        self.terms = tuple(sorted((e, c) for e, c in merged.items() if c != 0.0))

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        out = np.zeros(x.shape[:-1])
        for exps, coef in self.terms:
            term = np.full(x.shape[:-1], coef)
            for i, e in enumerate(exps):
                if e:
                    term = term * x[..., i] ** e
            out = out + term
        return out

    def condition(self, keep, spec):
        terms = []
        for exps, coef in self.terms:
            factor = math.prod(spec.raw_moment(e) for e, k in zip(exps, keep) if not k)
            terms.append((coef * factor, tuple(e for e, k in zip(exps, keep) if k)))
        return Polynomial(terms, arity=sum(bool(k) for k in keep))

    @property
    def degree(self) -> int:
        return max((sum(e) for e, _ in self.terms), default=0)

    def to_record(self):
        return {"type": "polynomial", "terms": [[c, list(e)] for e, c in self.terms]}


class CallableFunction(LocalFunction):
    """Arbitrary vectorised callable; conditioning integrates by quadrature.

    Rademacher innovations are summed exhaustively; normal and centred
    exponential innovations use 64-node Gauss rules with at most
    ``MAX_QUADRATURE_SITES`` integrated sites.
    """

    def __init__(self, fn: Callable[[np.ndarray], np.ndarray], arity: int, nodes: int = 64):
        self.fn = fn
        self.arity = int(arity)
        self.nodes = nodes

    def __call__(self, x):
        return self.fn(np.asarray(x, dtype=float))

    def condition(self, keep, spec):
        return _Integrated(self, tuple(bool(k) for k in keep), spec)


class _Integrated(LocalFunction):
    def __init__(self, base: CallableFunction, keep: tuple[bool, ...], spec: InnovationSpec):
        n_drop = keep.count(False)
        limit = MAX_STENCIL if spec.distribution == "rademacher" else MAX_QUADRATURE_SITES
        if n_drop > limit:
            raise UnsupportedDistribution(
                f"cannot integrate {n_drop} {spec.distribution} sites by quadrature (cap {limit})"
            )
        self.base, self.keep, self.spec = base, keep, spec
        self.arity = sum(keep)
        x, w = spec.quadrature(base.nodes)
        grid = np.array(list(itertools.product(x, repeat=n_drop))).reshape(-1, n_drop)
        weights = np.array([math.prod(c) for c in itertools.product(w, repeat=n_drop)])
        self._grid, self._weights = grid, weights

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        lead = x.shape[:-1]
        if self.arity == 0:
            return np.full(lead, float(self.base(self._grid) @ self._weights))
        flat = x.reshape(-1, self.arity)
        kept = [i for i, k in enumerate(self.keep) if k]
        dropped = [i for i, k in enumerate(self.keep) if not k]
        out = np.empty(flat.shape[0])
        chunk = max(1, 2**20 // max(len(self._weights), 1))
        for s in range(0, flat.shape[0], chunk):
            part = flat[s : s + chunk]
            full = np.empty((part.shape[0], len(self._weights), self.base.arity))
            full[:, :, kept] = part[:, None, :]
            full[:, :, dropped] = self._grid[None, :, :]
            out[s : s + chunk] = self.base(full) @ self._weights
        return out.reshape(lead)

    def condition(self, keep, spec):
        merged = list(self.keep)
        kept = [i for i, k in enumerate(self.keep) if k]
        for i, k in zip(kept, keep):
            merged[i] = bool(k)
        return _Integrated(self.base, tuple(merged), spec)


class Shifted(LocalFunction):
    """``f + c``; used to centre a local function."""

    def __init__(self, base: LocalFunction, shift: float):
        self.base, self.shift = base, float(shift)
        self.arity = base.arity
        self.serializable = base.serializable

    def __call__(self, x):
        return self.base(x) + self.shift

    def condition(self, keep, spec):
        return Shifted(self.base.condition(keep, spec), self.shift)

    def to_record(self):
        return self.base.to_record()


class FiniteSupportKernel:
    """``X_k = f(xi_{k-s} : s in stencil)`` for a local function f."""

    kind = "finite_support"

    def __init__(self, stencil: Sequence[Sequence[int]], function: LocalFunction):
        stencil = tuple(as_index(s) for s in stencil)
        if not stencil:
            raise KernelInvalid("stencil must not be empty")
        d = len(stencil[0])
        if any(len(s) != d for s in stencil) or len(set(stencil)) != len(stencil):
            raise KernelInvalid("stencil offsets must be distinct and share a dimension")
        if any(c < 0 for s in stencil for c in s):
            raise KernelInvalid("stencil offsets must be >= 0 (adapted field)")
        if len(stencil) > MAX_STENCIL:
            raise KernelInvalid(f"stencil capped at {MAX_STENCIL} sites")
        if function.arity != len(stencil):
            raise KernelInvalid("local function arity must match the stencil size")
        self.d = d
        self.stencil = stencil
        self.function = function

    @property
    def support_radius(self) -> int:
        return max(max(s) for s in self.stencil)

    def to_record(self) -> dict:
        return {
            "kind": self.kind,
            "d": self.d,
            "stencil": [list(s) for s in self.stencil],
            "function": self.function.to_record(),
        }

    def __eq__(self, other):
        return isinstance(other, FiniteSupportKernel) and self.to_record() == other.to_record()

    def __hash__(self):
        return id(self)

    def __repr__(self):
        return f"FiniteSupportKernel(stencil={self.stencil}, function={type(self.function).__name__})"


def identity_stencil(d: int) -> FiniteSupportKernel:
    """The stencil ``{0}`` with ``f(x) = x``, i.e. ``X_k = xi_k``."""
    return FiniteSupportKernel([(0,) * d], Polynomial([(1.0, (1,))]))


# ---------------------------------------------------------------------------
# serialisation
# ---------------------------------------------------------------------------

Kernel = LinearKernel | VolterraKernel | FiniteSupportKernel


def kernel_from_record(rec: Mapping) -> Kernel:
    try:
        kind = rec["kind"]
        d = int(rec["d"])
        if kind == "table":
            return TableKernel({tuple(j): float(a) for j, a in rec["entries"]}, d=d)
        if kind == "geometric":
            kernel = GeometricKernel(rec["rates"], rec.get("scale", 1.0))
        elif kind == "poly_slow_var":
            kernel = PolySlowVarKernel(
                rec["exponents"], rec.get("log_powers"), rec.get("start", 1), rec.get("scale", 1.0)
            )
        elif kind == "volterra":
            return VolterraKernel({(tuple(u), tuple(v)): float(a) for u, v, a in rec["entries"]}, d=d)
        elif kind == "finite_support":
            fn = rec["function"]
            if fn["type"] == "sign_table":
                function = SignTable(fn["values"])
            elif fn["type"] == "polynomial":
                function = Polynomial([(c, e) for c, e in fn["terms"]], arity=len(rec["stencil"]))
            else:
                raise KernelFormatError(f"unknown local function type {fn['type']!r}")
            return FiniteSupportKernel([tuple(s) for s in rec["stencil"]], function)
        else:
            raise KernelFormatError(f"unknown kernel kind {kind!r}")
    except (KeyError, TypeError, ValueError) as exc:
        raise KernelFormatError(f"malformed kernel record: {exc}") from exc
    if kernel.d != d:
        raise KernelInvalid(f"declared d={d} does not match kernel parameters")
    return kernel


def dumps_kernel(kernel: Kernel) -> str:
    return json.dumps(kernel.to_record(), sort_keys=True, indent=2) + "\n"


def loads_kernel(text: str) -> Kernel:
    try:
        rec = json.loads(text)
    except json.JSONDecodeError as exc:
        raise KernelFormatError(f"kernel file is not valid JSON: {exc}") from exc
    if not isinstance(rec, dict):
        raise KernelFormatError("kernel file must hold a JSON object")
    return kernel_from_record(rec)


def load_kernel(path: str | Path) -> Kernel:
    return loads_kernel(Path(path).read_text(encoding="utf-8"))
