"""Ortho-martingale approximation: increments ``D_u``, sums ``M_n`` and negligibility.

``D_u = sum_{v >= u} P_u(X_v)`` has a closed form for each model class:

* linear: ``D_u = (sum_j a_j) xi_u``;
* Volterra: a pair ``(p, q)`` anchored at v is measurable for ``F_a`` iff
  ``v <= a + p ^ q`` (coordinate-wise minimum), so ``P_u`` keeps exactly the
  anchor ``v = u + p ^ q`` and
  ``D_u = sum_{(p,q)} a_{p,q} xi_{u - (p - p^q)} xi_{u - (q - p^q)}``;
* finite support: ``P_u(X_{u+t})`` is an alternating sum over ``e in {0,1}^d``
  of ``f`` integrated over the stencil sites ``s`` with ``s < t + e``
  somewhere, which is a stationary local expression in the anchor u.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import stats

from .lattice import Box, Context, QuenchedScenario, Window, as_index, corner_offsets, leq, meet, sub
from .models import (
    Block,
    FieldModel,
    FiniteSupportModel,
    Functional,
    LinearModel,
    VolterraModel,
    evaluate,
    merge_blocks,
    remainder_functional,
)


@dataclass(frozen=True)
class MartingaleIncrement:
    index: tuple[int, ...]
    value: float
    truncation_tail: float


def martingale_blocks(model: FieldModel, box: Box, coef: float = 1.0) -> list[Block]:
    """Blocks of ``sum_{u in box} D_u``."""
    d = model.d
    zero = (0,) * d
    if isinstance(model, LinearModel):
        return [Block("site", (zero,), box, np.full(box.shape, coef * model.coefficient_sum))]
    if isinstance(model, VolterraModel):
        out = []
        for p, q, a in model.pairs:
            m = meet(p, q)
            out.append(Block("prod", (sub(p, m), sub(q, m)), box, np.full(box.shape, coef * a)))
        return merge_blocks(out)
    if isinstance(model, FiniteSupportModel):
        return merge_blocks(_relative_projection_blocks(model, box, coef))
    raise TypeError(f"unsupported model {type(model).__name__}")


def _relative_projection_blocks(model: FieldModel, box: Box, coef: float) -> list[Block]:
    """``sum_t P_u(X_{u+t})`` through relative conditioning of shifted field blocks."""
    d = model.d
    out = []
    for t in Box((0,) * d, (model.radius,) * d):
        for base in model.sum_blocks(box, coef):
            shifted = Block(base.kind, tuple(sub(o, t) for o in base.offsets), base.box,
                            base.weights, base.mask)
            for e, sign in corner_offsets(d):
                b = model.relative_condition(shifted, tuple(-c for c in e))
                if b is not None:
                    out.append(b.scaled(sign))
    return out


def increment_tail(model: FieldModel) -> float:
    """Certified mean-square truncation error of one increment ``D_u``."""
    if isinstance(model, LinearModel):
        return model.innovation.variance * model.kernel.tail_abs(model.radius) ** 2
    return 0.0


def martingale_increment(model: FieldModel, index, ctx: Context) -> MartingaleIncrement:
    model.require_truncation()
    index = as_index(index, model.d)
    blocks = martingale_blocks(model, Box(index, index))
    value = float(evaluate(model, [blocks], ctx.scenario, [ctx.replication])[0, 0])
    return MartingaleIncrement(index, value, increment_tail(model))


def martingale_sum(model: FieldModel, window: Window, ctx: Context) -> float:
    blocks = martingale_blocks(model, window.box)
    return float(evaluate(model, [blocks], ctx.scenario, [ctx.replication])[0, 0])


def negligibility_blocks(model: FieldModel, window: Window) -> tuple[list[Block], list[Block]]:
    """Blocks of ``S - R - M`` and of ``R`` over a window."""
    r_blocks = model.materialize(remainder_functional(window))
    s_blocks = model.materialize(Functional.sum_over(window))
    m_blocks = martingale_blocks(model, window.box, coef=-1.0)
    resid = merge_blocks(s_blocks + [b.scaled(-1.0) for b in r_blocks] + m_blocks)
    return resid, r_blocks


@dataclass
class NegligibilityCurve:
    sizes: list[tuple[int, ...]]
    estimates: list[float]
    std_errors: list[float]
    truncation_bands: list[float]
    remainder_estimates: list[float]
    remainder_std_errors: list[float]
    replications: int

    def to_records(self) -> list[dict]:
        return [
            {
                "n": list(n),
                "estimate": e,
                "std_error": s,
                "certified_truncation_band": b,
                "remainder_estimate": re,
                "remainder_std_error": rs,
            }
            for n, e, s, b, re, rs in zip(
                self.sizes, self.estimates, self.std_errors, self.truncation_bands,
                self.remainder_estimates, self.remainder_std_errors,
            )
        ]


def _mean_se(x: np.ndarray) -> tuple[float, float]:
    return float(np.mean(x)), float(np.std(x, ddof=1) / math.sqrt(x.size)) if x.size > 1 else 0.0


def negligibility_curve(
    model: FieldModel,
    scenario: QuenchedScenario,
    n_grid,
    replications: int,
    *,
    threads: int = 1,
) -> NegligibilityCurve:
    """``(1/|n|) E^omega (S_n - R_n - M_n)^2`` and ``(1/|n|) E^omega R_n^2`` along ``n_grid``."""
    model.require_truncation()
    reps = np.arange(replications)
    curve = NegligibilityCurve([], [], [], [], [], [], replications)
    for n in n_grid:
        window = Window(as_index(n, model.d))
        resid, rem = negligibility_blocks(model, window)
        vals = evaluate(model, [resid, rem], scenario, reps, threads=threads)
        vol = window.volume
        est, se = _mean_se(vals[0] ** 2 / vol)
        r_est, r_se = _mean_se(vals[1] ** 2 / vol)
        curve.sizes.append(window.upper)
        curve.estimates.append(est)
        curve.std_errors.append(se)
        curve.remainder_estimates.append(r_est)
        curve.remainder_std_errors.append(r_se)
        curve.truncation_bands.append(_truncation_band(model, vol, est))
    return curve


def _truncation_band(model: FieldModel, volume: int, estimate: float) -> float:
    """Deterministic bound on the truncation error of the normalised estimate.

    Per site of the window the truncated residual weight differs from the
    exact one by at most ``2 * tail_abs``, so the residual error ``delta``
    has ``E delta^2 <= 4 Var |n| tail_abs^2``.
    """
    if not isinstance(model, LinearModel):
        return 0.0
    msq = 4.0 * model.innovation.variance * volume * model.kernel.tail_abs(model.radius) ** 2
    return (2.0 * math.sqrt(max(estimate, 0.0) * volume * msq) + msq) / volume


@dataclass
class MartingaleCheck:
    level: tuple[int, ...]
    index: tuple[int, ...]
    skipped: bool
    mean: float | None = None
    std_error: float | None = None
    passed: bool | None = None

    def to_record(self) -> dict:
        return dict(self.__dict__)


def martingale_property_test(
    model: FieldModel,
    scenario: QuenchedScenario,
    cases,
    replications: int = 1000,
) -> list[MartingaleCheck]:
    """``E(D_index | F_level) = 0`` for levels strictly smaller in some coordinate.

    The ``F_level`` data is frozen from the omega stream (every site
    ``<= level`` is held fixed); the remaining sites are redrawn per
    replication.  Levels with ``index <= level`` are skipped.
    """
    out = []
    reps = np.arange(replications)
    for level, index in cases:
        level, index = as_index(level, model.d), as_index(index, model.d)
        if leq(index, level):
            out.append(MartingaleCheck(level, index, True))
            continue
        blocks = martingale_blocks(model, Box(index, index))
        vals = evaluate(model, [blocks], scenario, reps, frozen_level=level)[0]
        mean, se = _mean_se(vals)
        out.append(MartingaleCheck(level, index, False, mean, se, abs(mean) <= 3 * se))
    return out


def increment_stationarity_test(
    model: FieldModel,
    scenario: QuenchedScenario,
    first,
    second,
    replications: int = 10_000,
    alpha: float = 0.01,
) -> dict:
    """Two-sample KS test between the laws of ``D_first`` and ``D_second``."""
    reps = np.arange(replications)
    b1 = martingale_blocks(model, Box(as_index(first, model.d), as_index(first, model.d)))
    b2 = martingale_blocks(model, Box(as_index(second, model.d), as_index(second, model.d)))
    vals = evaluate(model, [b1, b2], scenario, reps)
    res = stats.ks_2samp(vals[0], vals[1])
    return {"statistic": float(res.statistic), "p_value": float(res.pvalue), "passed": bool(res.pvalue >= alpha)}


def sigma2_from_projections(model: FieldModel) -> float | None:
    """``||sum_{u >= 0} P_0(X_u)||_2^2 = E D_0^2`` from the (truncated) increment."""
    origin = (0,) * model.d
    return model.second_moment(martingale_blocks(model, Box(origin, origin)))
