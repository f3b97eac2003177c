"""Field models and exact conditional expectations through measurability masks.

Every quantity handled here (a field value, a partial sum, a conditional
expectation, a projection, a remainder) is a finite sum of *blocks*.  A
block is a weighted sum over a box of anchors ``k`` of a local function of
the innovations ``xi_{k - o}`` at a few offsets ``o``:

* ``site``: one offset at 0, the identity function (linear fields);
* ``prod``: two offsets, the product ``xi_{k-p} xi_{k-q}`` (Volterra fields);
* ``fs``: the retained stencil sites of a finite-support field, with the
  local function integrated over the dropped ones.

Conditioning a block on ``F_a`` keeps the site ``k - o`` iff ``k <= a + o``.
Along each axis the anchors split into at most ``m + 1`` intervals on which
the kept/dropped pattern is constant, so the conditioned block is again a
finite list of blocks.  A dropped site in a linear term contributes its mean
0; a Volterra product with a dropped factor contributes 0 because the pair
sites are distinct; a finite-support block swaps ``f`` for its conditioned
version.  Blocks with the same kind, offsets and function are merged by
adding their weight arrays, which makes cancellations (for example in the
alternating projection sums) happen in weight space.
"""

from __future__ import annotations

import itertools
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
from scipy import signal

from .errors import TruncationInsufficient, Unavailable, UnsupportedModelClass
from .kernels import (
    FiniteSupportKernel,
    GeometricKernel,
    LinearKernel,
    LocalFunction,
    Polynomial,
    Shifted,
    SignTable,
    VolterraKernel,
)
from .lattice import (
    Box,
    Context,
    Index,
    InnovationSpec,
    QuenchedScenario,
    Window,
    as_index,
    box_of,
    corner_offsets,
    leq,
    sample_box,
    sub,
)

DEFAULT_TAIL_TOLERANCE = 1e-10
MAX_ENUMERATION_SITES = 20
_CHUNK_FLOATS = 2**22


# ---------------------------------------------------------------------------
# blocks
# ---------------------------------------------------------------------------


@dataclass
class Block:
    """``sum_{k in box} weights[k] * g(xi_{k - o} : o in offsets)``."""

    kind: str
    offsets: tuple[Index, ...]
    box: Box
    weights: np.ndarray
    mask: tuple[bool, ...] | None = None

    @property
    def key(self) -> tuple:
        return (self.kind, self.mask, self.offsets)

    def site_hull(self) -> Box | None:
        hull = None
        for o in self.offsets:
            b = self.box.shifted(tuple(-c for c in o))
            hull = b if hull is None else hull.union_hull(b)
        return hull

    def restricted(self, sub_box: Box, **changes) -> "Block":
        w = self.weights[self.box.slices(sub_box)]
        params = dict(kind=self.kind, offsets=self.offsets, box=sub_box, weights=w, mask=self.mask)
        params.update(changes)
        return Block(**params)

    def scaled(self, c: float) -> "Block":
        return Block(self.kind, self.offsets, self.box, c * self.weights, self.mask)


def merge_blocks(blocks: Iterable[Block]) -> list[Block]:
    """Add the weights of blocks sharing a key; drop blocks whose weights vanish."""
    groups: dict[tuple, list[Block]] = {}
    for b in blocks:
        if b.box.empty:
            continue
        groups.setdefault(b.key, []).append(b)
    merged = []
    # canonical order, so that equal block sets evaluate in the same float order
    for key in sorted(groups, key=lambda k: (k[0], k[1] or (), k[2])):
        group = sorted(groups[key], key=lambda b: (b.box.lo, b.box.hi))
        hull = group[0].box
        for b in group[1:]:
            hull = hull.union_hull(b.box)
        if len(group) == 1:
            w = group[0].weights.copy()
        else:
            w = np.zeros(hull.shape)
            for b in group:
                w[hull.slices(b.box)] += b.weights
        if np.any(w != 0.0):
            g = group[0]
            merged.append(Block(g.kind, g.offsets, hull, w, g.mask))
    return merged


def _split_by_pattern(box: Box, offsets: Sequence[Index], level: Index):
    """Partition ``box`` into sub-boxes with a constant kept/dropped pattern.

    Site ``k - o`` is measurable for ``F_level`` iff ``k <= level + o``.
    """
    axes = []
    for i in range(box.d):
        cuts = {box.lo[i], box.hi[i] + 1}
        for o in offsets:
            c = level[i] + o[i] + 1
            if box.lo[i] < c <= box.hi[i]:
                cuts.add(c)
        cuts = sorted(cuts)
        axes.append(list(zip(cuts[:-1], cuts[1:])))
    for pieces in itertools.product(*axes):
        lo = tuple(p[0] for p in pieces)
        hi = tuple(p[1] - 1 for p in pieces)
        kept = tuple(all(lo[i] <= level[i] + o[i] for i in range(box.d)) for o in offsets)
        yield Box(lo, hi), kept


# ---------------------------------------------------------------------------
# functionals: linear combinations of (iterated) conditional expectations
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Term:
    """``coef * E_{l_m}(... E_{l_1}(S_box))`` with ``levels = (l_1, ..., l_m)``."""

    coef: float
    box: Box
    levels: tuple[Index, ...] = ()


@dataclass(frozen=True)
class Functional:
    terms: tuple[Term, ...]

    @staticmethod
    def sum_over(target) -> "Functional":
        """``S`` over a Window or Box, or ``X_k`` for a single site."""
        return Functional((Term(1.0, box_of(target)),))

    def given(self, level: Sequence[int]) -> "Functional":
        level = tuple(int(c) for c in level)
        return Functional(tuple(Term(t.coef, t.box, t.levels + (level,)) for t in self.terms))

    def project(self, u: Sequence[int]) -> "Functional":
        """Alternating sum ``sum_e (-1)^|e| E_{u-e}`` over ``e in {0,1}^d``."""
        u = tuple(int(c) for c in u)
        terms = []
        for e, sign in corner_offsets(len(u)):
            terms.extend((sign * self.given(sub(u, e))).terms)
        return Functional(tuple(terms))

    def __add__(self, other: "Functional") -> "Functional":
        return Functional(self.terms + other.terms)

    def __neg__(self) -> "Functional":
        return -1.0 * self

    def __sub__(self, other: "Functional") -> "Functional":
        return self + (-other)

    def __rmul__(self, c: float) -> "Functional":
        return Functional(tuple(Term(c * t.coef, t.box, t.levels) for t in self.terms))


def remainder_functional(window: Window) -> Functional:
    """``R_n = S_n - sum_{u=1..n} P_u(S_n)`` by inclusion-exclusion.

    ``sum_{u=1..n} P_u S = sum_{A subset [d]} (-1)^|A| E_{n^A} S`` where
    ``n^A`` zeroes the coordinates in A; the ``A = {}`` term is ``S`` itself,
    so ``R = -sum_{A != {}} (-1)^|A| E_{n^A} S``.  For d = 2 this is
    ``E_{n,0} S + E_{0,n} S - E_{0,0} S``.
    """
    s = Functional.sum_over(window)
    terms = []
    for e, sign in corner_offsets(window.d):
        if not any(e):
            continue
        level = tuple(0 if ei else n for ei, n in zip(e, window.upper))
        terms.extend((-sign * s.given(level)).terms)
    return Functional(tuple(terms))


def projection_sum_functional(window: Window) -> Functional:
    """``sum_{u=1..n} P_u(S_n)`` as an explicit sum of ``2^d |n|`` terms."""
    s = Functional.sum_over(window)
    terms = []
    for u in window.box:
        terms.extend(s.project(u).terms)
    return Functional(tuple(terms))


# ---------------------------------------------------------------------------
# models
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ProjectionValue:
    """Value of ``P_u(X_v)`` in one replication.

    ``representation`` is ``"closed_form"`` (linear: ``a_{v-u} xi_u``) or
    ``"mask_sum"`` (alternating sum of ``2^d`` conditional expectations).
    ``l2_norm`` is ``||P_u(X_v)||_2``, None when it has no exact evaluation.
    """

    representation: str
    value: float
    l2_norm: float | None
    coefficient: float | None = None


class FieldModel:
    """Common interface of the three model classes."""

    kind: str

    def __init__(
        self,
        kernel,
        innovation: InnovationSpec | None = None,
        truncation_radius: int | None = None,
        tail_tolerance: float = DEFAULT_TAIL_TOLERANCE,
    ):
        self.kernel = kernel
        self.innovation = innovation or InnovationSpec()
        if not tail_tolerance > 0:
            raise ValueError("tail_tolerance must be positive")
        self.tail_tolerance = float(tail_tolerance)
        self.d = kernel.d
        self.radius = self._choose_radius(truncation_radius)

    def _choose_radius(self, radius: int | None) -> int:
        natural = self.kernel.support_radius
        if radius is None:
            return natural
        if radius < 0:
            raise ValueError("truncation radius must be >= 0")
        return int(radius)

    # -- truncation -------------------------------------------------------------

    @property
    def tail_bound(self) -> float:
        """Certified ``E (X_k - X_k^trunc)^2`` for every site."""
        return 0.0

    def require_truncation(self) -> None:
        if self.tail_bound > self.tail_tolerance:
            raise TruncationInsufficient(
                f"tail bound {self.tail_bound:.3e} at radius {self.radius} exceeds "
                f"tolerance {self.tail_tolerance:.3e}"
            )

    def sum_tail_bound(self, box: Box) -> float:
        """Mean-square truncation error of a sum over ``box`` (Minkowski)."""
        return box.size**2 * self.tail_bound

    # -- block construction ---------------------------------------------------

    def sum_blocks(self, box: Box, coef: float = 1.0) -> list[Block]:
        raise NotImplementedError

    def condition_blocks(self, blocks: Iterable[Block], level: Sequence[int]) -> list[Block]:
        level = as_index(level, self.d)
        out = []
        for b in blocks:
            if not b.offsets:
                out.append(b)
                continue
            for piece, kept in _split_by_pattern(b.box, b.offsets, level):
                nb = self._condition_piece(b, piece, kept)
                if nb is not None:
                    out.append(nb)
        return out

    def _condition_piece(self, b: Block, piece: Box, kept: tuple[bool, ...]) -> Block | None:
        # linear and Volterra: a block survives only if every factor is measurable
        return b.restricted(piece) if all(kept) else None

    def relative_condition(self, b: Block, rel: Index) -> Block | None:
        """Condition on ``F_{k + rel}`` with the level moving along with the anchor k."""
        kept = tuple(all(-c <= oi for c, oi in zip(rel, o)) for o in b.offsets)
        return self._condition_piece(b, b.box, kept)

    def materialize(self, functional: Functional) -> list[Block]:
        blocks = []
        for t in functional.terms:
            bs = self.sum_blocks(t.box, t.coef)
            for level in t.levels:
                bs = self.condition_blocks(bs, level)
            blocks.extend(bs)
        return merge_blocks(blocks)

    def mask(self, level: Sequence[int], site: Sequence[int]) -> np.ndarray:
        """Boolean measurability mask of the atoms of ``X_site`` at ``F_level``."""
        raise NotImplementedError

    # -- direct evaluation ----------------------------------------------------

    def field_hull(self, box: Box) -> Box:
        r = self.radius
        return Box(tuple(c - r for c in box.lo), box.hi)

    def field_box(self, xi: np.ndarray, hull: Box, box: Box) -> np.ndarray:
        """X over ``box`` from innovations ``xi`` (shape ``(R, *hull.shape)``)."""
        raise NotImplementedError

    def block_values(self, b: Block, xi: np.ndarray, hull: Box) -> np.ndarray:
        """Local function values of a block over its anchors, shape ``(R, *box.shape)``."""
        vals = [xi[(slice(None),) + hull.slices(b.box.shifted(tuple(-c for c in o)))] for o in b.offsets]
        if b.kind == "site":
            return vals[0]
        if b.kind == "prod":
            return vals[0] * vals[1]
        return self._local(b.mask)(np.stack(vals, axis=-1))

    def _local(self, mask) -> LocalFunction:
        raise UnsupportedModelClass(f"{self.kind} models have no local function blocks")

    # -- analytic quantities ---------------------------------------------------

    def sigma2_analytic(self) -> float:
        raise Unavailable(f"no closed-form sigma^2 for {self.kind} models")

    def second_moment(self, blocks: Sequence[Block]) -> float | None:
        """Exact ``E(value^2)`` of a block sum, None if not exactly computable."""
        return None

    def to_record(self) -> dict:
        return {
            "class": self.kind,
            "kernel": self.kernel.to_record(),
            "innovation": self.innovation.to_record(),
            "truncation_radius": self.radius,
            "tail_tolerance": self.tail_tolerance,
        }

    def __repr__(self):
        return f"{type(self).__name__}({self.kernel!r}, {self.innovation!r}, radius={self.radius})"


SIGMA2_REL_WIDTH = 1e-6


class LinearModel(FieldModel):
    """``X_k = sum_{j >= 0} a_j xi_{k-j}``, truncated to ``j in [0, radius]^d``."""

    kind = "linear"

    def __init__(self, kernel: LinearKernel, innovation=None, truncation_radius=None,
                 tail_tolerance=DEFAULT_TAIL_TOLERANCE, max_radius: int = 256):
        if not isinstance(kernel, LinearKernel):
            raise UnsupportedModelClass("LinearModel needs a linear coefficient kernel")
        self._max_radius = max_radius
        super().__init__(kernel, innovation, truncation_radius, tail_tolerance)
        self.coefficients = kernel.dense(self.radius)
        self.coefficients.setflags(write=False)
        self._prefix = self._prefix_sums(self.coefficients)
        self._nonzero = [(tuple(int(c) for c in j), float(self.coefficients[tuple(j)]))
                         for j in zip(*np.nonzero(self.coefficients))]

    def _choose_radius(self, radius):
        if radius is None:
            return self.kernel.choose_radius(
                self.innovation.variance, self.tail_tolerance, self._max_radius
            )
        return super()._choose_radius(radius)

    @staticmethod
    def _prefix_sums(a: np.ndarray) -> np.ndarray:
        p = np.zeros(tuple(s + 1 for s in a.shape))
        p[(slice(1, None),) * a.ndim] = a
        for ax in range(a.ndim):
            np.cumsum(p, axis=ax, out=p)
        return p

    @property
    def tail_bound(self) -> float:
        return self.innovation.variance * self.kernel.tail_sq(self.radius)

    @property
    def coefficient_sum(self) -> float:
        """``sum_j a_j`` over the truncated support (exact prefix-sum total)."""
        return float(self._prefix[(-1,) * self.d])

    def coefficient(self, j: Sequence[int]) -> float:
        j = as_index(j, self.d)
        if any(c < 0 or c > self.radius for c in j):
            return 0.0
        return float(self.coefficients[j])

    def sum_weights(self, box: Box) -> tuple[Box, np.ndarray]:
        """``c_w = sum_{k in box} a_{k-w}`` on the site box ``[box.lo - r, box.hi]``."""
        r = self.radius
        sites = self.field_hull(box)
        hi_idx, lo_idx = [], []
        for i, w in enumerate(sites.axes()):
            lo = np.clip(box.lo[i] - w, 0, r + 1)
            hi = np.clip(box.hi[i] - w, -1, r) + 1
            lo_idx.append(lo)
            hi_idx.append(np.maximum(hi, lo))
        c = np.zeros(sites.shape)
        for e, sign in corner_offsets(self.d):
            sel = [lo_idx[i] if e[i] else hi_idx[i] for i in range(self.d)]
            c += sign * self._prefix[np.ix_(*sel)]
        return sites, c

    def sum_blocks(self, box, coef=1.0):
        sites, c = self.sum_weights(box)
        return [Block("site", ((0,) * self.d,), sites, coef * c)]

    def mask(self, level, site):
        level, site = as_index(level, self.d), as_index(site, self.d)
        grid = np.indices(self.coefficients.shape)
        # term j is measurable iff k - j <= a
        return np.all([site[i] - grid[i] <= level[i] for i in range(self.d)], axis=0)

    def field_box(self, xi, hull, box):
        src = xi[(slice(None),) + hull.slices(self.field_hull(box))]
        if len(self._nonzero) <= 64:
            out = np.zeros((xi.shape[0],) + box.shape)
            r = self.radius
            for j, a in self._nonzero:
                sl = tuple(slice(r - ji, r - ji + n) for ji, n in zip(j, box.shape))
                out += a * src[(slice(None),) + sl]
            return out
        kern = self.coefficients[None]
        return signal.fftconvolve(src, kern, mode="valid", axes=tuple(range(1, self.d + 1)))

    def closed_projection(self, u: Index, v: Index) -> float:
        return self.coefficient(sub(v, u))

    def sigma2_analytic(self) -> float:
        k = self.kernel
        if isinstance(k, GeometricKernel):
            total = k.scale * math.prod(1.0 / (1.0 - r) for r in k.rates)
        elif k.axes is not None:
            lo, hi = k.sum_bracket()
            if not math.isfinite(hi - lo):
                raise Unavailable("kernel coefficients are not summable; sigma^2 is infinite")
            if hi - lo > SIGMA2_REL_WIDTH * max(abs(lo), abs(hi)):
                raise Unavailable(f"sum of coefficients only bracketed in [{lo:.6g}, {hi:.6g}]")
            total = 0.5 * (lo + hi)
        else:
            self.require_truncation()
            total = math.fsum(self.coefficients.ravel())
        return total**2 * self.innovation.variance

    def second_moment(self, blocks):
        return self.innovation.variance * math.fsum(
            float(np.sum(b.weights**2)) for b in blocks if b.kind == "site"
        )


class VolterraModel(FieldModel):
    """``X_k = sum_{(p,q)} a_{p,q} xi_{k-p} xi_{k-q}`` over a finite pair table."""

    kind = "volterra"

    def __init__(self, kernel: VolterraKernel, innovation=None, truncation_radius=None,
                 tail_tolerance=DEFAULT_TAIL_TOLERANCE):
        if not isinstance(kernel, VolterraKernel):
            raise UnsupportedModelClass("VolterraModel needs a Volterra pair kernel")
        super().__init__(kernel, innovation, truncation_radius, tail_tolerance)
        self.pairs = [(p, q, a) for (p, q), a in kernel.entries.items()
                      if max(p + q) <= self.radius]

    @property
    def tail_bound(self) -> float:
        dropped = [a for (p, q), a in self.kernel.symmetrized().items() if max(p + q) > self.radius]
        return self.innovation.variance**2 * math.fsum(a * a for a in dropped)

    def sum_blocks(self, box, coef=1.0):
        return [Block("prod", (p, q), box, np.full(box.shape, coef * a)) for p, q, a in self.pairs]

    def mask(self, level, site):
        level, site = as_index(level, self.d), as_index(site, self.d)
        return np.array([leq(sub(site, p), level) and leq(sub(site, q), level)
                         for p, q, _ in self.pairs], dtype=bool)

    def field_box(self, xi, hull, box):
        out = np.zeros((xi.shape[0],) + box.shape)
        for p, q, a in self.pairs:
            b = Block("prod", (p, q), box, np.empty(0))
            out += a * self.block_values(b, xi, hull)
        return out

    def second_moment(self, blocks):
        # E(sum w xi_i xi_j)^2 over distinct sites i != j: orthogonal pair products
        acc: dict[tuple, float] = {}
        for b in blocks:
            p, q = b.offsets
            for k in b.box:
                i, j = sub(k, p), sub(k, q)
                key = (i, j) if i < j else (j, i)
                w = float(b.weights[tuple(c - l for c, l in zip(k, b.box.lo))])
                acc[key] = acc.get(key, 0.0) + w
        return self.innovation.variance**2 * math.fsum(v * v for v in acc.values())


class FiniteSupportModel(FieldModel):
    """``X_k = f(xi_{k-s} : s in stencil)`` for a local function ``f``.

    With ``center=True`` the constant ``E f`` is subtracted so that the field
    is centred.
    """

    kind = "finite_support"

    def __init__(self, kernel: FiniteSupportKernel, innovation=None, truncation_radius=None,
                 tail_tolerance=DEFAULT_TAIL_TOLERANCE, center: bool = True):
        if not isinstance(kernel, FiniteSupportKernel):
            raise UnsupportedModelClass("FiniteSupportModel needs a finite-support kernel")
        super().__init__(kernel, innovation, truncation_radius, tail_tolerance)
        if self.radius < kernel.support_radius:
            raise TruncationInsufficient("a finite-support stencil cannot be truncated")
        self.stencil = kernel.stencil
        f = kernel.function
        if center:
            f = _centered(f, self.innovation)
        self.function = f
        self._cache: dict[tuple[bool, ...], LocalFunction] = {}

    def _local(self, mask):
        g = self._cache.get(mask)
        if g is None:
            g = self.function if all(mask) else self.function.condition(mask, self.innovation)
            self._cache[mask] = g
        return g

    def sum_blocks(self, box, coef=1.0):
        m = len(self.stencil)
        return [Block("fs", self.stencil, box, np.full(box.shape, float(coef)), (True,) * m)]

    def _condition_piece(self, b, piece, kept):
        if all(kept):
            return b.restricted(piece)
        atoms = [i for i, k in enumerate(b.mask) if k]
        mask = list(b.mask)
        for atom, k in zip(atoms, kept):
            mask[atom] = k
        offsets = tuple(o for o, k in zip(b.offsets, kept) if k)
        return b.restricted(piece, offsets=offsets, mask=tuple(mask))

    def block_values(self, b, xi, hull):
        if not b.offsets:
            const = float(np.asarray(self._local(b.mask)(np.zeros((0,)))))
            return np.full((xi.shape[0],) + b.box.shape, const)
        return super().block_values(b, xi, hull)

    def constant_value(self, b: Block) -> float:
        return float(np.asarray(self._local(b.mask)(np.zeros((0,)))))

    def mask(self, level, site):
        level, site = as_index(level, self.d), as_index(site, self.d)
        return np.array([leq(sub(site, s), level) for s in self.stencil], dtype=bool)

    def field_box(self, xi, hull, box):
        b = Block("fs", self.stencil, box, np.empty(0), (True,) * len(self.stencil))
        return self.block_values(b, xi, hull)

    # exact second moments of local expressions

    def second_moment(self, blocks):
        sites: dict[Index, int] = {}
        pieces = []
        for b in blocks:
            for k in b.box:
                w = float(b.weights[tuple(c - l for c, l in zip(k, b.box.lo))])
                if w == 0.0:
                    continue
                idx = tuple(sites.setdefault(sub(k, o), len(sites)) for o in b.offsets)
                pieces.append((w, b.mask, idx))
        spec = self.innovation
        if spec.distribution == "rademacher" and len(sites) <= MAX_ENUMERATION_SITES:
            n = len(sites)
            patterns = (((np.arange(2**n)[:, None] >> np.arange(n)) & 1) * 2 - 1) * spec.sd
            total = np.zeros(2**n)
            for w, mask, idx in pieces:
                total += w * self._local(mask)(patterns[:, list(idx)])
            return float(np.mean(total**2))
        if isinstance(_base(self.function), Polynomial):
            poly: dict[tuple[int, ...], float] = {}
            n = len(sites)
            for w, mask, idx in pieces:
                g = _as_polynomial(self._local(mask))
                for exps, c in g.terms:
                    full = [0] * n
                    for e, i in zip(exps, idx):
                        full[i] += e
                    key = tuple(full)
                    poly[key] = poly.get(key, 0.0) + w * c
            acc = []
            items = [(e, c) for e, c in poly.items() if c != 0.0]
            for (e1, c1), (e2, c2) in itertools.product(items, repeat=2):
                acc.append(c1 * c2 * math.prod(spec.raw_moment(a + b) for a, b in zip(e1, e2)))
            return math.fsum(acc)
        return None

    def sigma2_analytic(self) -> float:
        # sigma^2 = E D_0^2 with D_0 = sum_t P_0(X_t), a local expression
        from .approx import martingale_blocks

        blocks = martingale_blocks(self, Box((0,) * self.d, (0,) * self.d))
        value = self.second_moment(blocks)
        if value is None:
            raise Unavailable("sigma^2 needs Rademacher innovations or a polynomial local function")
        return value


def _centered(f: LocalFunction, spec: InnovationSpec) -> LocalFunction:
    mean = f.constant(spec)
    if mean == 0.0:
        return f
    if isinstance(f, SignTable):
        return SignTable(f.values - mean)
    if isinstance(f, Polynomial):
        return Polynomial([(c, e) for e, c in f.terms] + [(-mean, (0,) * f.arity)], arity=f.arity)
    return Shifted(f, -mean)


def _base(f: LocalFunction) -> LocalFunction:
    while isinstance(f, Shifted):
        f = f.base
    return f


def _as_polynomial(f: LocalFunction) -> Polynomial:
    if isinstance(f, Polynomial):
        return f
    if isinstance(f, Shifted):
        p = _as_polynomial(f.base)
        return Polynomial([(c, e) for e, c in p.terms] + [(f.shift, (0,) * p.arity)], arity=p.arity)
    raise Unavailable("not a polynomial")


def make_model(kernel, innovation: InnovationSpec | None = None, **options) -> FieldModel:
    """Build the model class matching the kernel type."""
    if isinstance(kernel, LinearKernel):
        options.pop("center", None)
        return LinearModel(kernel, innovation, **options)
    if isinstance(kernel, VolterraKernel):
        options.pop("center", None)
        return VolterraModel(kernel, innovation, **options)
    if isinstance(kernel, FiniteSupportKernel):
        return FiniteSupportModel(kernel, innovation, **options)
    raise UnsupportedModelClass(f"no model class for {type(kernel).__name__}")


# ---------------------------------------------------------------------------
# batch evaluation
# ---------------------------------------------------------------------------


def blocks_hull(block_lists: Iterable[Sequence[Block]]) -> Box | None:
    hull = None
    for blocks in block_lists:
        for b in blocks:
            h = b.site_hull()
            if h is not None:
                hull = h if hull is None else hull.union_hull(h)
    return hull


def evaluate_blocks(model: FieldModel, blocks: Sequence[Block], xi: np.ndarray, hull: Box | None) -> np.ndarray:
    """Sum of the blocks for each replication row of ``xi``."""
    n_rep = xi.shape[0]
    total = np.zeros(n_rep)
    for b in blocks:
        if not b.offsets:
            const = model.constant_value(b) if isinstance(model, FiniteSupportModel) else 0.0
            total += const * float(np.sum(b.weights))
            continue
        vals = model.block_values(b, xi, hull).reshape(n_rep, -1)
        total += vals @ b.weights.ravel()
    return total


def _chunks(n: int, size: int) -> list[slice]:
    return [slice(s, min(s + size, n)) for s in range(0, n, size)]


def run_batched(fn, replications: np.ndarray, per_rep: int, threads: int = 1, budget: int = _CHUNK_FLOATS):
    """Apply ``fn(rep_ids) -> array(k, len(rep_ids))`` over deterministic chunks.

    The chunking depends only on ``per_rep`` and ``budget``, never on the
    number of threads, so outputs are identical for any ``threads``.
    """
    size = max(1, budget // max(per_rep, 1))
    parts = _chunks(len(replications), size)
    if threads > 1 and len(parts) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(lambda s: fn(replications[s]), parts))
    else:
        results = [fn(replications[s]) for s in parts]
    return np.concatenate(results, axis=-1)


def evaluate(
    model: FieldModel,
    expressions: Sequence[Functional | Sequence[Block]],
    scenario: QuenchedScenario,
    replications,
    *,
    frozen_level: Sequence[int] | None = None,
    quenched: bool = True,
    threads: int = 1,
) -> np.ndarray:
    """Values of several expressions per replication, shape ``(n_expr, R)``."""
    block_lists = [model.materialize(e) if isinstance(e, Functional) else list(e) for e in expressions]
    reps = np.atleast_1d(np.asarray(replications))
    hull = blocks_hull(block_lists)

    def one(rep_ids):
        if hull is None:
            xi = np.zeros((len(rep_ids),) + (0,) * model.d)
        else:
            xi = sample_box(scenario, model.innovation, rep_ids, hull,
                            frozen_level=frozen_level, quenched=quenched)
        return np.stack([evaluate_blocks(model, bl, xi, hull) for bl in block_lists])

    return run_batched(one, reps, hull.size if hull is not None else 1, threads)


def sample_field(
    model: FieldModel,
    box: Box,
    scenario: QuenchedScenario,
    replications,
    *,
    frozen_level=None,
    quenched: bool = True,
) -> np.ndarray:
    """X over ``box`` per replication via the direct (convolution) route."""
    model.require_truncation()
    hull = model.field_hull(box)
    xi = sample_box(scenario, model.innovation, replications, hull,
                    frozen_level=frozen_level, quenched=quenched)
    return model.field_box(xi, hull, box)


# ---------------------------------------------------------------------------
# single-replication operations
# ---------------------------------------------------------------------------


def _one(model, functional, ctx: Context) -> float:
    return float(evaluate(model, [functional], ctx.scenario, [ctx.replication])[0, 0])


def eval_field(model: FieldModel, site: Sequence[int], ctx: Context) -> tuple[float, float]:
    """``(X_site, certified mean-square truncation error)``."""
    model.require_truncation()
    site = as_index(site, model.d)
    return _one(model, Functional.sum_over(site), ctx), model.tail_bound


def conditional_expectation(model: FieldModel, level: Sequence[int], target, ctx: Context) -> float:
    """``E(X_target | F_level)`` for a site, or of the sum over a Window/Box."""
    if not isinstance(model, FieldModel):
        raise UnsupportedModelClass(f"unsupported model {type(model).__name__}")
    model.require_truncation()
    return _one(model, Functional.sum_over(target).given(as_index(level, model.d)), ctx)


def projection(model: FieldModel, u: Sequence[int], v: Sequence[int], ctx: Context) -> ProjectionValue:
    """``P_u(X_v)``."""
    model.require_truncation()
    u, v = as_index(u, model.d), as_index(v, model.d)
    if isinstance(model, LinearModel):
        a = model.closed_projection(u, v)
        xi_u = sample_box(ctx.scenario, model.innovation, [ctx.replication], Box(u, u)).ravel()[0]
        return ProjectionValue("closed_form", a * float(xi_u), abs(a) * model.innovation.sd, a)
    f = Functional.sum_over(v).project(u)
    blocks = model.materialize(f)
    value = float(evaluate(model, [blocks], ctx.scenario, [ctx.replication])[0, 0])
    m2 = model.second_moment(blocks)
    return ProjectionValue("mask_sum", value, None if m2 is None else math.sqrt(max(m2, 0.0)))


def partial_sum(model: FieldModel, window: Window, ctx: Context) -> tuple[float, float]:
    """``(S_n, certified mean-square truncation error of the sum)``."""
    if not isinstance(window, Window):
        window = Window(window)
    model.require_truncation()
    return _one(model, Functional.sum_over(window), ctx), model.sum_tail_bound(window.box)


def remainder(model: FieldModel, window: Window, ctx: Context) -> float:
    if not isinstance(window, Window):
        window = Window(window)
    model.require_truncation()
    return _one(model, remainder_functional(window), ctx)


def sigma2_analytic(model: FieldModel) -> float:
    return model.sigma2_analytic()
