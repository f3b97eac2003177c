"""Lattice indexing and reproducible i.i.d. innovation sampling.

Every innovation value is a pure function of ``(seed, replication, site)``:
a splitmix64 cascade hashes the seed, the replication id and each lattice
coordinate in turn, and the resulting 64 random bits are pushed through the
inverse CDF of the innovation law.  Nothing depends on evaluation order, so
sampling a window row-major, column-major, site by site or in parallel
batches yields bit-identical fields.

Sites in the past quadrant ``{u <= 0}`` are drawn from the ``omega_seed``
stream only.  They are the frozen trajectory the quenched law conditions on.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Iterable, Iterator, Sequence

import numpy as np
from scipy import special, stats

from .errors import MomentUnavailable, UnsupportedDistribution

MAX_DIM = 3

Index = tuple[int, ...]

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_S30, _S27, _S31, _S11, _S63 = (np.uint64(s) for s in (30, 27, 31, 11, 63))
_MASK64 = (1 << 64) - 1

# Replication id reserved for the frozen past stream.
FROZEN_STREAM = _MASK64


# ---------------------------------------------------------------------------
# multi-indices
# ---------------------------------------------------------------------------


def as_index(coords: Iterable[int] | int, d: int | None = None) -> Index:
    """Normalise ``coords`` to a tuple of Python ints, checking the dimension."""
    if isinstance(coords, (int, np.integer)):
        if d is None:
            raise ValueError("dimension required to broadcast a scalar index")
        coords = (int(coords),) * d
    out = tuple(int(c) for c in coords)
    if not 1 <= len(out) <= MAX_DIM:
        raise ValueError(f"dimension must be in 1..{MAX_DIM}, got {len(out)}")
    if d is not None and len(out) != d:
        raise ValueError(f"expected a {d}-dimensional index, got {out}")
    return out


def leq(u: Sequence[int], v: Sequence[int]) -> bool:
    """Coordinate-wise partial order ``u <= v``."""
    return all(a <= b for a, b in zip(u, v))


def meet(u: Sequence[int], v: Sequence[int]) -> Index:
    return tuple(min(a, b) for a, b in zip(u, v))


def join(u: Sequence[int], v: Sequence[int]) -> Index:
    return tuple(max(a, b) for a, b in zip(u, v))


def add(u: Sequence[int], v: Sequence[int]) -> Index:
    return tuple(a + b for a, b in zip(u, v))


def sub(u: Sequence[int], v: Sequence[int]) -> Index:
    return tuple(a - b for a, b in zip(u, v))


def corner_offsets(d: int) -> Iterator[tuple[Index, int]]:
    """Yield ``(e, sign)`` for ``e`` in ``{0,1}^d`` with ``sign = (-1)^|e|``."""
    for e in itertools.product((0, 1), repeat=d):
        yield e, (-1) ** sum(e)


@dataclass(frozen=True)
class Box:
    """Closed rectangular region ``{lo <= u <= hi}`` of Z^d."""

    lo: Index
    hi: Index

    def __post_init__(self):
        object.__setattr__(self, "lo", as_index(self.lo))
        object.__setattr__(self, "hi", as_index(self.hi, len(self.lo)))

    @property
    def d(self) -> int:
        return len(self.lo)

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(max(h - l + 1, 0) for l, h in zip(self.lo, self.hi))

    @property
    def size(self) -> int:
        return math.prod(self.shape)

    @property
    def empty(self) -> bool:
        return self.size == 0

    def __contains__(self, u) -> bool:
        return leq(self.lo, u) and leq(u, self.hi)

    def __iter__(self) -> Iterator[Index]:
        return itertools.product(*(range(l, h + 1) for l, h in zip(self.lo, self.hi)))

    def shifted(self, v: Sequence[int]) -> "Box":
        return Box(add(self.lo, v), add(self.hi, v))

    def intersect(self, other: "Box") -> "Box":
        return Box(join(self.lo, other.lo), meet(self.hi, other.hi))

    def union_hull(self, other: "Box") -> "Box":
        if self.empty:
            return other
        if other.empty:
            return self
        return Box(meet(self.lo, other.lo), join(self.hi, other.hi))

    def slices(self, inner: "Box") -> tuple[slice, ...]:
        """Array slices selecting ``inner`` inside an array laid out over ``self``."""
        return tuple(slice(a - l, a - l + n) for a, l, n in zip(inner.lo, self.lo, inner.shape))

    def axes(self) -> list[np.ndarray]:
        return [np.arange(l, h + 1) for l, h in zip(self.lo, self.hi)]


@dataclass(frozen=True)
class Window:
    """Summation rectangle ``{1..n_1} x ... x {1..n_d}``."""

    upper: Index

    def __post_init__(self):
        upper = as_index(self.upper)
        if any(n < 1 for n in upper):
            raise ValueError(f"window coordinates must all be >= 1, got {upper}")
        object.__setattr__(self, "upper", upper)

    @property
    def d(self) -> int:
        return len(self.upper)

    @property
    def volume(self) -> int:
        return math.prod(self.upper)

    @property
    def box(self) -> Box:
        return Box((1,) * self.d, self.upper)


def box_of(target) -> Box:
    """Coerce a Window, Box or single site to a Box."""
    if isinstance(target, Box):
        return target
    if isinstance(target, Window):
        return target.box
    site = as_index(target)
    return Box(site, site)


# ---------------------------------------------------------------------------
# innovation laws
# ---------------------------------------------------------------------------

DISTRIBUTIONS = ("normal", "rademacher", "exponential", "student_t")

_ALIASES = {
    "standardnormal": "normal",
    "standard_normal": "normal",
    "gaussian": "normal",
    "centeredexponential": "exponential",
    "centered_exponential": "exponential",
    "studentt": "student_t",
    "student-t": "student_t",
    "t": "student_t",
}


@dataclass(frozen=True)
class InnovationSpec:
    """Law of the i.i.d. innovations: centred, with the given variance.

    ``dof`` is the Student-t degrees of freedom; it must exceed 2 so the
    variance exists.  The moment conditions used with q = 4 need ``dof > 4``;
    that is checked where such a moment is requested, see
    :meth:`require_moment`.
    """

    distribution: str = "normal"
    variance: float = 1.0
    dof: float | None = None

    def __post_init__(self):
        name = _ALIASES.get(self.distribution.lower(), self.distribution.lower())
        if name not in DISTRIBUTIONS:
            raise UnsupportedDistribution(f"unknown innovation distribution {self.distribution!r}")
        object.__setattr__(self, "distribution", name)
        if not self.variance > 0:
            raise ValueError("variance must be positive")
        object.__setattr__(self, "variance", float(self.variance))
        if name == "student_t":
            if self.dof is None or not self.dof > 2:
                raise UnsupportedDistribution("student_t requires dof > 2")
            object.__setattr__(self, "dof", float(self.dof))
        elif self.dof is not None:
            raise ValueError(f"dof only applies to student_t, not {name}")

    @property
    def sd(self) -> float:
        return math.sqrt(self.variance)

    @property
    def q_max(self) -> float:
        """Supremum of the moment orders q with E|xi|^q finite (exclusive for t)."""
        return self.dof if self.distribution == "student_t" else math.inf

    def moment_available(self, q: float) -> bool:
        return q < self.q_max

    def require_moment(self, q: float) -> None:
        if not self.moment_available(q):
            raise MomentUnavailable(
                f"E|xi|^{q:g} is infinite for student_t with dof={self.dof:g}"
            )

    # -- transforms from uniforms ------------------------------------------

    @property
    def _t_scale(self) -> float:
        return math.sqrt(self.variance * (self.dof - 2.0) / self.dof)

    def from_uniform(self, u: np.ndarray) -> np.ndarray:
        """Inverse-CDF transform of uniforms in (0, 1)."""
        if self.distribution == "normal":
            return self.sd * special.ndtri(u)
        if self.distribution == "rademacher":
            return np.where(u < 0.5, -self.sd, self.sd)
        if self.distribution == "exponential":
            return self.sd * (-np.log1p(-u) - 1.0)
        return self._t_scale * special.stdtrit(self.dof, u)

    def from_bits(self, bits: np.ndarray) -> np.ndarray:
        if self.distribution == "rademacher":
            return np.where((bits >> _S63).astype(bool), self.sd, -self.sd)
        return self.from_uniform(bits_to_uniform(bits))

    # -- moments -------------------------------------------------------------

    def raw_moment(self, p: int) -> float:
        """E[xi^p] for integer p >= 0."""
        p = int(p)
        if p < 0:
            raise ValueError("moment order must be >= 0")
        if p == 0:
            return 1.0
        if p == 1:
            return 0.0
        self.require_moment(p)
        v = self.variance
        if self.distribution == "normal":
            return 0.0 if p % 2 else v ** (p / 2) * float(special.factorial2(p - 1))
        if self.distribution == "rademacher":
            return 0.0 if p % 2 else v ** (p / 2)
        if self.distribution == "exponential":
            # E(E-1)^p is the number of derangements of p objects.
            der = [1, 0]
            for n in range(2, p + 1):
                der.append((n - 1) * (der[-1] + der[-2]))
            return v ** (p / 2) * der[p]
        if p % 2:
            return 0.0
        k = p // 2
        m = self.dof**k * math.prod((2 * i - 1) / (self.dof - 2 * i) for i in range(1, k + 1))
        return self._t_scale**p * m

    def abs_moment(self, q: float) -> float:
        """E|xi|^q for real q >= 0."""
        if q == 0:
            return 1.0
        self.require_moment(q)
        v = self.variance
        if self.distribution == "normal":
            return v ** (q / 2) * 2 ** (q / 2) * special.gamma((q + 1) / 2) / math.sqrt(math.pi)
        if self.distribution == "rademacher":
            return v ** (q / 2)
        if self.distribution == "exponential":
            # int_0^inf |x-1|^q e^{-x} dx = e^{-1} (Gamma(q+1) + int_0^1 y^q e^y dy)
            # int_0^1 y^q e^y dy as the series sum_k 1 / (k! (q + k + 1))
            near = math.fsum(1.0 / (math.factorial(k) * (q + k + 1)) for k in range(40))
            return v ** (q / 2) * math.exp(-1.0) * (special.gamma(q + 1) + near)
        nu = self.dof
        m = nu ** (q / 2) * special.gamma((q + 1) / 2) * special.gamma((nu - q) / 2)
        m /= math.sqrt(math.pi) * special.gamma(nu / 2)
        return self._t_scale**q * m

    def lq_norm(self, q: float) -> float:
        return self.abs_moment(q) ** (1.0 / q)

    # -- densities and quadrature -----------------------------------------------

    def frozen_law(self):
        """scipy continuous law of xi; None for Rademacher."""
        sd = self.sd
        if self.distribution == "normal":
            return stats.norm(scale=sd)
        if self.distribution == "exponential":
            return stats.expon(loc=-sd, scale=sd)
        if self.distribution == "student_t":
            return stats.t(self.dof, scale=self._t_scale)
        return None

    def quadrature(self, n_nodes: int = 64) -> tuple[np.ndarray, np.ndarray]:
        """Nodes and weights integrating E g(xi); exact support for Rademacher."""
        if self.distribution == "rademacher":
            return np.array([-self.sd, self.sd]), np.array([0.5, 0.5])
        return _gauss_rule(self.distribution, n_nodes, self.sd)

    def to_record(self) -> dict:
        rec = {"distribution": self.distribution, "variance": self.variance}
        if self.dof is not None:
            rec["dof"] = self.dof
        return rec


@lru_cache(maxsize=None)
def _gauss_rule(distribution: str, n: int, sd: float) -> tuple[np.ndarray, np.ndarray]:
    if distribution == "normal":
        x, w = np.polynomial.hermite.hermgauss(n)
        return sd * math.sqrt(2.0) * x, w / math.sqrt(math.pi)
    if distribution == "exponential":
        x, w = np.polynomial.laguerre.laggauss(n)
        return sd * (x - 1.0), w
    raise UnsupportedDistribution(f"no Gauss rule for {distribution}; use a sign table or polynomial")


# ---------------------------------------------------------------------------
# counter-based seeding
# ---------------------------------------------------------------------------


def _mix(x: np.ndarray) -> np.ndarray:
    """splitmix64 finaliser, applied in place to a uint64 array."""
    x += _GOLDEN
    x ^= x >> _S30
    x *= _M1
    x ^= x >> _S27
    x *= _M2
    x ^= x >> _S31
    return x


def _stream_heads(root: int, replications) -> np.ndarray:
    head = _mix(np.array([int(root) & _MASK64], dtype=np.uint64))
    reps = np.atleast_1d(np.asarray(replications))
    if reps.dtype.kind == "i":
        reps = reps.astype(np.int64).view(np.uint64)
    elif reps.dtype != np.uint64:
        reps = np.array([int(r) & _MASK64 for r in reps.ravel()], dtype=np.uint64)
    return _mix(head ^ reps.ravel())


def seed_grid(root: int, replications, box: Box) -> np.ndarray:
    """Site seeds over ``box`` for each replication; shape ``(R, *box.shape)``."""
    h = _stream_heads(root, replications)
    for axis in box.axes():
        coords = axis.astype(np.int64).view(np.uint64)
        h = h[..., None] ^ coords
        _mix(h)
    return h


def derive_site_seed(root: int, replication: int, site: Sequence[int]) -> int:
    """64-bit seed of one lattice site; a pure function of its arguments."""
    site = as_index(site)
    return int(seed_grid(root, [replication], Box(site, site)).ravel()[0])


def bits_to_uniform(bits: np.ndarray) -> np.ndarray:
    """Map 64 random bits to the open interval (0, 1) with 53-bit resolution."""
    return ((bits >> _S11).astype(np.float64) + 0.5) * 2.0**-53


# ---------------------------------------------------------------------------
# quenched scenarios
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class QuenchedScenario:
    """Seeds fixing the fresh innovations and the frozen past trajectory."""

    root_seed: int
    omega_seed: int
    d: int = 2

    def __post_init__(self):
        if not 1 <= self.d <= MAX_DIM:
            raise ValueError(f"d must be in 1..{MAX_DIM}")
        for name in ("root_seed", "omega_seed"):
            value = int(getattr(self, name))
            if not 0 <= value <= _MASK64:
                raise ValueError(f"{name} must be a 64-bit unsigned integer")
            object.__setattr__(self, name, value)

    @property
    def origin(self) -> Index:
        return (0,) * self.d

    def with_omega(self, omega_seed: int) -> "QuenchedScenario":
        return QuenchedScenario(self.root_seed, omega_seed, self.d)

    def to_record(self) -> dict:
        return {"root_seed": self.root_seed, "omega_seed": self.omega_seed, "d": self.d}


@dataclass(frozen=True)
class Context:
    """A scenario together with one replication id."""

    scenario: QuenchedScenario
    replication: int = 0


@lru_cache(maxsize=64)
def _frozen_block(omega_seed: int, spec: InnovationSpec, box: Box) -> np.ndarray:
    values = spec.from_bits(seed_grid(omega_seed, [FROZEN_STREAM], box))[0]
    values.setflags(write=False)
    return values


def sample_box(
    scenario: QuenchedScenario,
    spec: InnovationSpec,
    replications,
    box: Box,
    *,
    frozen_level: Sequence[int] | None = None,
    quenched: bool = True,
) -> np.ndarray:
    """Innovations over ``box`` for each replication, shape ``(R, *box.shape)``.

    Sites ``u <= frozen_level`` (default: the origin) take the frozen-past
    values of ``scenario.omega_seed``; with ``quenched=False`` every site is
    drawn afresh per replication, giving samples of the annealed law.
    """
    if box.d != scenario.d:
        raise ValueError(f"box dimension {box.d} does not match scenario d={scenario.d}")
    reps = np.atleast_1d(np.asarray(replications))
    out = spec.from_bits(seed_grid(scenario.root_seed, reps, box))
    if quenched:
        level = scenario.origin if frozen_level is None else as_index(frozen_level, scenario.d)
        past = box.intersect(Box(box.lo, level))
        if not past.empty:
            out[(slice(None),) + box.slices(past)] = _frozen_block(scenario.omega_seed, spec, past)
    return out


def sample_innovation(
    scenario: QuenchedScenario, spec: InnovationSpec, replication: int, site: Sequence[int]
) -> float:
    """One innovation value; frozen-past sites ignore ``replication``."""
    site = as_index(site, scenario.d)
    return float(sample_box(scenario, spec, [replication], Box(site, site)).ravel()[0])
