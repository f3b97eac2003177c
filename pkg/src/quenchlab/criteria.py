"""Certified verdicts for projective summability conditions.

For a linear field ``P_0(X_u) = a_u xi_0`` and
``E_1(X_k) = sum_{j >= k-1} a_j xi_{k-j}``, so every condition reduces to a
coefficient series times an innovation norm:

=========  ==============================================================
C_L2       ``||xi||_2   * sum_u |a_u|``
C_LUX      ``||xi||_phi * sum_u |a_u|``  with ``phi_d(x) = x^2 log^{d-1}(1+|x|)``
C_DELTA    ``||xi||_q   * sum_u |a_u|``
C_LIN      ``sum_{k>=1} |k|^{-1/q} (sum_{j>=k-1} a_j^2)^{1/2}``
C_H2       ``||xi||_2 *`` the C_LIN series with q = 2 (exact)
C_Hq       ``||xi||_2 *`` the C_LIN series (Rosenthal constant omitted)
=========  ==============================================================

Separable kernels ``a_j = c prod_i phi_i(j_i)`` factor every series into a
product of one-dimensional series.  Each one-dimensional series gets a
partial sum up to the horizon and a certified tail: closed form for
geometric factors, integral comparison for ``t^-alpha log(1+t)^-beta``
factors.  Divergence is certified from lower envelopes
``c k^-gamma log(2k)^-beta`` with ``gamma < 1``, or ``gamma = 1`` and
``beta <= 1``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import integrate

from .errors import NonIntegrable, UnsupportedCondition
from .kernels import (
    GeometricAxis,
    LinearKernel,
    Polynomial,
    PowerLogAxis,
    TableKernel,
    powerlog_tail_upper,
    product_tail,
)
from .lattice import Box, InnovationSpec
from .models import (
    FieldModel,
    FiniteSupportModel,
    Functional,
    LinearModel,
    VolterraModel,
)

CONDITIONS = ("C_L2", "C_LUX", "C_H2", "C_Hq", "C_LIN", "C_VOLT", "C_DELTA")
DEFAULT_HORIZON = 10_000
TAU_CUTOFF = 100_000


# ---------------------------------------------------------------------------
# Luxemburg norms
# ---------------------------------------------------------------------------


def phi(x, d: int):
    """Young function ``x^2 log^{d-1}(1 + |x|)``."""
    x = np.abs(np.asarray(x, dtype=float))
    return x * x * np.log1p(x) ** (d - 1)


@dataclass(frozen=True)
class Constant:
    value: float


@dataclass(frozen=True)
class ScaledInnovation:
    scale: float
    innovation: InnovationSpec


@dataclass(frozen=True)
class DiscreteValue:
    values: tuple[float, ...]
    probabilities: tuple[float, ...]


def expected_phi(value_model, k: float, d: int) -> float:
    """``E phi_d(|f| / k)``."""
    if isinstance(value_model, Constant):
        return float(phi(value_model.value / k, d))
    if isinstance(value_model, DiscreteValue):
        v = np.asarray(value_model.values) / k
        return float(np.dot(value_model.probabilities, phi(v, d)))
    spec = value_model.innovation
    c = abs(value_model.scale) / k
    if spec.distribution == "rademacher":
        return float(phi(c * spec.sd, d))
    if not spec.moment_available(2.0):
        raise NonIntegrable("E phi(|xi|) needs a finite second moment")
    law = spec.frozen_law()
    lo, hi = law.support()
    total, err = 0.0, 0.0
    # split at 0 and at the mean so the kink of |x| is a breakpoint
    for a, b in ((lo, 0.0), (0.0, hi)):
        if a >= b:
            continue
        val, e = integrate.quad(lambda x: float(phi(c * x, d)) * law.pdf(x), a, b, limit=200)
        total += val
        err += e
    if not math.isfinite(total):
        raise NonIntegrable("E phi(|xi|) diverges")
    return total


def luxemburg_norm(value_model, d: int, tol: float = 1e-10) -> float:
    """``inf{k > 0 : E phi_d(|f|/k) <= 1}`` by bisection to absolute ``tol``.

    The returned value is the upper end of the final bracket, so it always
    satisfies ``E phi_d(|f|/k) <= 1``.
    """
    if isinstance(value_model, Constant) and value_model.value == 0:
        return 0.0
    if isinstance(value_model, ScaledInnovation) and value_model.scale == 0:
        return 0.0
    if isinstance(value_model, DiscreteValue) and not np.any(np.asarray(value_model.values)):
        return 0.0
    g = lambda k: expected_phi(value_model, k, d) - 1.0
    lo, hi = 0.5, 2.0
    while g(hi) > 0:
        lo, hi = hi, 2 * hi
    while g(lo) <= 0:
        lo, hi = lo / 2, lo
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if g(mid) > 0:
            lo = mid
        else:
            hi = mid
        if hi - lo <= 4 * np.finfo(float).eps * hi:
            break
    return hi


def innovation_phi_norm(spec: InnovationSpec, d: int, tol: float = 1e-12) -> float:
    return luxemburg_norm(ScaledInnovation(1.0, spec), d, tol)


# ---------------------------------------------------------------------------
# verdicts
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ConditionId:
    id: str
    q: float = 2.0

    def __post_init__(self):
        if self.id not in CONDITIONS:
            raise UnsupportedCondition(f"unknown condition {self.id!r}")
        if not self.q >= 2:
            raise ValueError("q must be >= 2")

    @property
    def label(self) -> str:
        return f"{self.id}(q={self.q:g})" if self.id in ("C_Hq", "C_LIN", "C_VOLT", "C_DELTA") else self.id


@dataclass
class Verdict:
    condition: str
    status: str  # "convergent" | "divergent" | "inconclusive"
    horizon: int
    partial_sum: float
    tail_bound: float | None = None
    witness: dict | None = None
    scaled: bool = False
    note: str = ""

    def to_record(self) -> dict:
        rec = {
            "condition": self.condition,
            "status": self.status,
            "horizon": self.horizon,
            "partial_sum": self.partial_sum,
            "tail_bound": self.tail_bound,
            "scaled": self.scaled,
        }
        if self.witness is not None:
            rec["witness"] = self.witness
        if self.note:
            rec["note"] = self.note
        return rec


@dataclass
class _Series:
    """Certified one-dimensional series: bracket of the partial sum plus a tail bound."""

    lo: float
    hi: float
    tail: float  # upper bound of the omitted tail, inf if not certified
    divergent: bool = False
    lower_half: float = 0.0  # lower partial sum at horizon // 2 (growth witness)
    envelope: tuple[float, float] | None = None

    @property
    def total_hi(self) -> float:
        return self.hi + self.tail


def _tau_bracket(ax: PowerLogAxis, m_max: int, cutoff: int) -> tuple[np.ndarray, np.ndarray]:
    """Bracket of ``tau(m) = sum_{t>=m} phi(t)^2`` for ``m = 0..m_max``."""
    cutoff = max(cutoff, m_max + 1, ax.start)
    sq = ax.values(np.arange(cutoff)) ** 2
    head = np.cumsum(sq[::-1])[::-1]  # sum_{t=m}^{cutoff-1}
    t_lo, t_hi = ax.sq_tail(cutoff)
    return head[: m_max + 1] + t_lo, head[: m_max + 1] + t_hi


def _axis_series(ax, kind: str, q: float, horizon: int) -> _Series:
    H = max(int(horizon), 1)
    if isinstance(ax, GeometricAxis):
        r = ax.rate
        if kind == "abs":
            t = np.arange(H + 1)
            s = math.fsum(r**t)
            return _Series(s, s, r ** (H + 1) / (1 - r))
        c = 1.0 / math.sqrt(1 - r * r)
        k = np.arange(1, H + 1, dtype=float)
        if kind == "lin":
            terms = k ** (-1 / q) * r ** (k - 1) * c
            tail = r**H * c / (1 - r)
        else:
            terms = k ** (-1 / q) * r**k * c
            tail = r ** (H + 1) * c / (1 - r)
        s = math.fsum(terms)
        return _Series(s, s, tail)

    assert isinstance(ax, PowerLogAxis)
    H = max(H, ax.start)
    a, b = ax.alpha, ax.beta
    if kind == "abs":
        t = np.arange(H + 1)
        vals = ax.values(t)
        s = math.fsum(vals)
        half = math.fsum(vals[: H // 2 + 1])
        tail = ax.abs_tail(H + 1)[1]
        gamma = a
    else:
        gamma = a - 0.5 + 1.0 / q
        if kind == "lin":
            k = np.arange(1, H + 1)
            t_lo, t_hi = _tau_bracket(ax, H - 1, max(4 * H, TAU_CUTOFF))
            w = k.astype(float) ** (-1 / q)
            lo_terms, hi_terms = w * np.sqrt(t_lo), w * np.sqrt(t_hi)
            c = 1.0 / H + 1.0 / (2 * a - 1)
            tail = math.sqrt(c) * powerlog_tail_upper(H, gamma, b)
        else:
            k = np.arange(1, H + 1)
            t_lo, t_hi = _tau_bracket(ax, H, max(4 * H, TAU_CUTOFF))
            w = k.astype(float) ** (-1 / q)
            lo_terms, hi_terms = w * np.sqrt(t_lo[1:]), w * np.sqrt(t_hi[1:])
            c = 1.0 / (H + 1) + 1.0 / (2 * a - 1)
            tail = math.sqrt(c) * powerlog_tail_upper(H + 1, gamma, b)
        s_lo, s_hi = math.fsum(lo_terms), math.fsum(hi_terms)
        half = math.fsum(lo_terms[: H // 2])
        divergent = gamma < 1 or (gamma == 1 and b <= 1)
        return _Series(s_lo, s_hi, tail, divergent, half, (gamma, b))
    divergent = gamma < 1 or (gamma == 1 and b <= 1)
    return _Series(s, s, tail, divergent, half, (gamma, b))


def _product_verdict(name: str, factors: Sequence[_Series], scale: float, horizon: int,
                     scaled: bool, note: str = "") -> Verdict:
    scale = abs(scale)
    lo = scale * math.prod(f.lo for f in factors)
    hi = scale * math.prod(f.hi for f in factors)
    if scale == 0 or any(f.hi == 0 for f in factors):
        return Verdict(name, "convergent", horizon, 0.0, 0.0, scaled=scaled, note=note)
    if any(f.divergent for f in factors):
        div = [f for f in factors if f.divergent]
        rest = scale * math.prod(f.lo for f in factors if not f.divergent)
        witness = {
            "lower_partial_sum": rest * math.prod(f.lo for f in div),
            "lower_partial_sum_half_horizon": rest * math.prod(f.lower_half for f in div),
            "envelope": [list(f.envelope) for f in div],
            "argument": "lower envelope c*k^-gamma*log(2k)^-beta with gamma<1, or gamma=1 and "
                        "beta<=1, diverges by integral comparison",
        }
        return Verdict(name, "divergent", horizon, lo, None, witness, scaled, note)
    if all(math.isfinite(f.tail) for f in factors):
        # bracket width of the partial sums plus the omitted tail
        tail = scale * (product_tail([f.lo for f in factors], [f.hi - f.lo + f.tail for f in factors]))
        return Verdict(name, "convergent", horizon, hi, tail, scaled=scaled, note=note)
    return Verdict(name, "inconclusive", horizon, hi, None, scaled=scaled, note=note)


# ---------------------------------------------------------------------------
# exact finite sums (tables, Volterra, finite support)
# ---------------------------------------------------------------------------


def _table_series(kernel: TableKernel, kind: str, q: float) -> float:
    d = kernel.d
    R = kernel.support_radius
    a = kernel.dense(R)
    if kind == "abs":
        return math.fsum(np.abs(a).ravel())
    # tau[k] = sum_{j >= k} a_j^2 as a reverse cumulative sum along every axis
    tau = a**2
    for ax in range(d):
        tau = np.flip(np.cumsum(np.flip(tau, ax), axis=ax), ax)
    if kind == "lin":
        k = np.indices(a.shape) + 1  # k = j + 1 for j in [0, R]
        vol = np.prod(k, axis=0).astype(float)
        return math.fsum((vol ** (-1 / q) * np.sqrt(tau)).ravel())
    if d != 2:
        raise UnsupportedCondition("the one-coordinate projection series is implemented for d = 2")
    # sum_{u>=1} u^{-1/q} sum_v (sum_{j1>=u} a_{j1,v}^2)^{1/2}
    col = np.flip(np.cumsum(np.flip(a**2, 0), axis=0), 0)
    u = np.arange(a.shape[0], dtype=float)
    return math.fsum(
        (u[1:, None] ** (-1 / q) * np.sqrt(col[1:])).ravel()
    )


def _linear_equivalent(model: FieldModel) -> LinearModel | None:
    """A finite-support model with a degree <= 1 polynomial is a linear field."""
    if isinstance(model, LinearModel):
        return model
    if isinstance(model, FiniteSupportModel) and isinstance(model.function, Polynomial):
        f = model.function
        if f.degree <= 1:
            entries = {}
            for exps, c in f.terms:
                if sum(exps) == 1:
                    entries[model.stencil[exps.index(1)]] = c
            return LinearModel(TableKernel(entries, d=model.d), model.innovation)
    return None


def _fs_distribution(model: FiniteSupportModel, functional: Functional):
    """Exact law of a finite-support expression under Rademacher innovations."""
    blocks = model.materialize(functional)
    spec = model.innovation
    sites: dict = {}
    pieces = []
    for b in blocks:
        for k in b.box:
            w = float(b.weights[tuple(c - l for c, l in zip(k, b.box.lo))])
            idx = tuple(sites.setdefault(tuple(ki - oi for ki, oi in zip(k, o)), len(sites)) for o in b.offsets)
            pieces.append((w, b.mask, idx))
    n = len(sites)
    if n > 20:
        raise UnsupportedCondition("too many sites for exhaustive enumeration")
    patterns = (((np.arange(2**n)[:, None] >> np.arange(n)) & 1) * 2 - 1) * spec.sd
    total = np.zeros(2**n)
    for w, mask, idx in pieces:
        total += w * model._local(mask)(patterns[:, list(idx)])
    return total


def _fs_norm(model: FiniteSupportModel, functional: Functional, norm: str, q: float, d: int) -> float:
    if norm == "l2":
        return math.sqrt(max(model.second_moment(model.materialize(functional)) or 0.0, 0.0))
    if model.innovation.distribution != "rademacher":
        raise UnsupportedCondition(
            "q-norms and Luxemburg norms of nonlinear local functions need Rademacher innovations"
        )
    vals = _fs_distribution(model, functional)
    if norm == "q":
        return float(np.mean(np.abs(vals) ** q)) ** (1 / q)
    probs = np.full(vals.size, 1.0 / vals.size)
    return luxemburg_norm(DiscreteValue(tuple(vals), tuple(probs)), d)


def _finite_condition(model, cond: ConditionId, horizon: int) -> Verdict:
    d, q = model.d, cond.q
    r = model.radius
    origin = (0,) * d
    sum_box = Box(origin, (r,) * d)
    if isinstance(model, VolterraModel):
        var = model.innovation.variance
        sym = model.kernel.symmetrized()
        if cond.id in ("C_VOLT", "C_H2", "C_Hq"):
            qq = 2.0 if cond.id == "C_H2" else q
            terms = []
            for k in Box((1,) * d, (r + 1,) * d):
                km1 = tuple(c - 1 for c in k)
                s2 = math.fsum(a * a for (u, v), a in model.kernel.entries.items()
                               if all(x >= y for x, y in zip(u, km1)) and all(x >= y for x, y in zip(v, km1)))
                if cond.id != "C_VOLT":
                    # ||E_1(X_k)||_2^2 = Var^2 sum over unordered site pairs of the symmetrised weight^2
                    s2 = var**2 * math.fsum(
                        a * a for (u, v), a in sym.items()
                        if all(x >= y for x, y in zip(u, km1)) and all(x >= y for x, y in zip(v, km1))
                    )
                terms.append(math.prod(k) ** (-1 / qq) * math.sqrt(s2))
            return Verdict(cond.label, "convergent", horizon, math.fsum(terms), 0.0,
                           scaled=cond.id == "C_Hq",
                           note="finite pair table: exact finite sum")
        if cond.id == "C_L2":
            terms = []
            for u in sum_box:
                blocks = model.materialize(Functional.sum_over(u).project(origin))
                terms.append(math.sqrt(model.second_moment(blocks)))
            return Verdict(cond.label, "convergent", horizon, math.fsum(terms), 0.0,
                           note="finite pair table: exact finite sum")
        raise UnsupportedCondition(f"{cond.id} has no computable summand for Volterra fields")

    assert isinstance(model, FiniteSupportModel)
    if cond.id in ("C_LIN", "C_VOLT"):
        raise UnsupportedCondition(f"{cond.id} applies to linear/Volterra kernels only")
    if cond.id in ("C_Hq", "C_DELTA"):
        model.innovation.require_moment(q)
    terms = []
    if cond.id in ("C_L2", "C_LUX", "C_DELTA"):
        norm = {"C_L2": "l2", "C_LUX": "lux", "C_DELTA": "q"}[cond.id]
        for u in sum_box:
            terms.append(_fs_norm(model, Functional.sum_over(u).project(origin), norm, q, d))
    else:
        qq = 2.0 if cond.id == "C_H2" else q
        for k in Box((1,) * d, (r + 1,) * d):
            f = Functional.sum_over(k).given((1,) * d)
            n = _fs_norm(model, f, "l2" if cond.id == "C_H2" else "q", qq, d)
            terms.append(math.prod(k) ** (-1 / qq) * n)
    return Verdict(cond.label, "convergent", horizon, math.fsum(terms), 0.0,
                   note="finite stencil: exact finite sum")


def check_condition(model: FieldModel, cond: ConditionId | str, horizon: int = DEFAULT_HORIZON) -> Verdict:
    """Certified verdict for one summability condition on a model."""
    if isinstance(cond, str):
        cond = ConditionId(cond)
    lin = _linear_equivalent(model)
    if lin is None:
        return _finite_condition(model, cond, horizon)
    if cond.id == "C_VOLT":
        raise UnsupportedCondition("C_VOLT applies to Volterra kernels")
    spec = lin.innovation
    d, q = lin.d, cond.q
    if cond.id in ("C_DELTA", "C_Hq", "C_LIN"):
        spec.require_moment(q)
    factor, kind, qq, scaled, note = 1.0, "abs", q, False, ""
    if cond.id == "C_L2":
        factor = spec.sd
    elif cond.id == "C_LUX":
        factor = innovation_phi_norm(spec, d)
    elif cond.id == "C_DELTA":
        factor = float(spec.lq_norm(q))
    elif cond.id == "C_LIN":
        kind = "lin"
    elif cond.id == "C_H2":
        kind, qq, factor = "lin", 2.0, spec.sd
    elif cond.id == "C_Hq":
        kind, factor, scaled = "lin", spec.sd, True
        note = "Rosenthal constant C_q omitted: series equals ||E_1 X_k||_q up to constants"
    kernel: LinearKernel = lin.kernel
    if isinstance(kernel, TableKernel):
        s = factor * _table_series(kernel, kind, qq)
        return Verdict(cond.label, "convergent", horizon, s, 0.0, scaled=scaled,
                       note=(note + "; " if note else "") + "finite table: exact finite sum")
    factors = [_axis_series(ax, kind, qq, horizon) for ax in kernel.axes]
    return _product_verdict(cond.label, factors, factor * kernel.scale, horizon, scaled, note)


def nm_series_verdict(model: FieldModel, q: float, horizon: int = DEFAULT_HORIZON) -> Verdict:
    """``sum_{u>=1} u^{-1/q} sum_{v>=0} ||P_{0,~0}(X_{u,v})||`` for a linear d = 2 field.

    For a linear field ``P_{0,~0}(X_{u,v}) = sum_{j_1 >= u} a_{j_1,v} xi_{(u-j_1, 0)}``;
    the L2 norm is used (q-norm equivalent up to the Rosenthal constant).
    """
    lin = _linear_equivalent(model)
    if lin is None or lin.d != 2:
        raise UnsupportedCondition("the one-coordinate projection series needs a linear d = 2 field")
    name = f"NM_FACT(q={q:g})"
    kernel = lin.kernel
    sd = lin.innovation.sd
    if isinstance(kernel, TableKernel):
        return Verdict(name, "convergent", horizon, sd * _table_series(kernel, "nm", q), 0.0, scaled=True)
    factors = [_axis_series(kernel.axes[0], "nm", q, horizon), _axis_series(kernel.axes[1], "abs", q, horizon)]
    return _product_verdict(name, factors, sd * kernel.scale, horizon, True,
                            "Rosenthal constant C_q omitted")


@dataclass
class ImplicationResult:
    hypothesis: Verdict
    conclusion: Verdict
    consistent: bool
    message: str

    def to_record(self) -> dict:
        return {
            "hypothesis": self.hypothesis.to_record(),
            "conclusion": self.conclusion.to_record(),
            "consistent": self.consistent,
            "message": self.message,
        }


def _implication(hyp: Verdict, con: Verdict) -> ImplicationResult:
    if hyp.status != "convergent":
        return ImplicationResult(hyp, con, True, "hypothesis fails; implication vacuous")
    ok = con.status == "convergent"
    msg = "hypothesis and conclusion both convergent" if ok else "implication violated"
    return ImplicationResult(hyp, con, ok, msg)


def implication_probe(model: FieldModel, horizon: int = DEFAULT_HORIZON, q: float = 4.0) -> dict:
    """Check that convergent hypotheses of the condition chain give convergent conclusions.

    Chains: ``C_LIN => C_Hq``, ``C_Hq => C_LUX``, and for d = 2
    ``C_Hq => NM_FACT`` (the one-coordinate projection series).  Rosenthal
    constants are not known numerically; the series are reported without them.
    """
    lin = _linear_equivalent(model)
    if lin is None:
        raise UnsupportedCondition("the implication probe needs a linear model")
    lin_v = check_condition(lin, ConditionId("C_LIN", q), horizon)
    hq = check_condition(lin, ConditionId("C_Hq", q), horizon)
    lux = check_condition(lin, ConditionId("C_LUX"), horizon)
    chains = {
        "C_LIN=>C_Hq": _implication(lin_v, hq),
        "C_Hq=>C_LUX": _implication(hq, lux),
    }
    if lin.d == 2:
        chains["C_Hq=>NM_FACT"] = _implication(hq, nm_series_verdict(lin, q, horizon))
    return {
        "chains": {k: v.to_record() for k, v in chains.items()},
        "consistent": all(v.consistent for v in chains.values()),
        "constants_omitted": True,
        "note": "Rosenthal constants C_q are not known numerically; series reported without them",
    }
