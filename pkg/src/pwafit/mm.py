"""Nonmonotone majorization-minimization outer loop.

Each iteration linearizes one (or several) selected atom pairs per sample to
build a convex subproblem over the augmented variables z = (theta, r, s,
slacks), solves it through the Lagrangian dual with the semismooth Newton
method, and accepts the candidate according to the chosen variant:

  full   - enumerate the per-sample eps-argmax pair product (capped), keep
           the candidate with the smallest subproblem objective;
  one    - single lexicographically-first exact-argmax pair, always accept;
  random - one uniform draw from the eps-argmax product, accept only on a
           strict surrogate decrease.
"""

from __future__ import annotations

import itertools
import time
from dataclasses import dataclass, field

import numpy as np

from .funcs import TIE_TOL, CompositeProblem, regularizer_majorant
from .snewton import DualSubproblem, SNConfig, SNResult, sn_solve


@dataclass
class MMConfig:
    c: float | None = None          # proximal weight; None -> data-scaled default
    eps: float = 1e-4               # argmax expansion
    variant: str = "full"           # full | one | random
    tol_rel: float = 1e-4           # relative objective-change stopping rule
    tol_step: float = 0.0           # optional: also require ||dz|| <= tol_step
    max_outer: int = 500
    combo_cap: int = 64
    seed: int = 0
    sn_tol_floor: float = 1e-6      # floor of the inner tolerance schedule
    sn_tol_fixed: bool = False      # True: always solve to sn_tol_floor
    sn_max_iter: int = 100
    compute_residual: bool = True   # terminal stationarity residual in the report

    def resolve_c(self, problem: CompositeProblem) -> float:
        if self.c is not None:
            return float(self.c)
        if problem.split.kind == "linear" or problem.split.y is None:
            return 1e-2
        return 1e-2 * (1.0 + float(np.mean(np.atleast_1d(problem.split.y) ** 2)))


@dataclass
class AugmentedIterate:
    theta: np.ndarray
    r: np.ndarray
    s: np.ndarray
    rhat: np.ndarray
    shat: np.ndarray
    warm: tuple | None = None       # dual warm start carried between solves


@dataclass
class Record:
    iteration: int
    f_N: float
    surrogate: float
    step_norm: float
    accepted: bool
    selection: tuple
    sn_iterations: int
    wall_time: float


@dataclass
class SolveReport:
    theta: np.ndarray
    f_N: float
    iterations: int
    sn_total: int
    reason: str
    trace: list[Record]
    residual: float | None = None
    residual_kind: str | None = None
    residual_coverage: float | None = None
    wall_time: float = 0.0


def init_state(problem: CompositeProblem, theta0) -> AugmentedIterate:
    """Augmented start z0 with r = s = psi(theta0) and tight slacks."""
    theta0 = problem.clip_theta(np.asarray(theta0, dtype=float))
    g, h, psi = problem.psi(theta0)
    gv, hv = problem.atom_values(theta0)
    rhat = (np.repeat(g, problem.k1) - (problem.U @ theta0 + problem.e))
    shat = (np.repeat(h, problem.k2) - (problem.W @ theta0 + problem.f))
    return AugmentedIterate(theta=theta0, r=psi.copy(), s=psi.copy(),
                            rhat=np.maximum(rhat, 0.0), shat=np.maximum(shat, 0.0))


def select_pairs(problem: CompositeProblem, theta, eps: float, variant: str,
                 rng: np.random.Generator | None = None,
                 combo_cap: int = 64):
    """Per-sample pair selections (0-based index arrays (sel1, sel2)).

    Returns (selections, coverage) where coverage is the enumerated fraction
    of the full eps-argmax product (always 1.0 for one/random).
    """
    N = problem.n_samples
    if variant == "one":
        gv, hv = problem.atom_values(theta)
        m1, m2 = gv >= gv.max(1, keepdims=True) - TIE_TOL, hv >= hv.max(1, keepdims=True) - TIE_TOL
        sel1 = m1.argmax(axis=1)
        sel2 = m2.argmax(axis=1)
        return [(sel1, sel2)], 1.0
    m1, m2 = problem.argmax_masks(theta, eps)
    per_sample = []
    total = 1.0
    for sidx in range(N):
        i1 = np.flatnonzero(m1[sidx])
        i2 = np.flatnonzero(m2[sidx])
        pairs = [(a, b) for a in i1 for b in i2]
        per_sample.append(pairs)
        total *= len(pairs)
    if variant == "random":
        if rng is None:
            rng = np.random.default_rng(0)
        sel1 = np.empty(N, dtype=int)
        sel2 = np.empty(N, dtype=int)
        for sidx, pairs in enumerate(per_sample):
            a, b = pairs[rng.integers(len(pairs))]
            sel1[sidx], sel2[sidx] = a, b
        return [(sel1, sel2)], 1.0
    if variant != "full":
        raise ValueError(f"unknown variant {variant!r}")
    sels = []
    for combo in itertools.islice(itertools.product(*per_sample), combo_cap):
        sel1 = np.array([p[0] for p in combo], dtype=int)
        sel2 = np.array([p[1] for p in combo], dtype=int)
        sels.append((sel1, sel2))
    coverage = len(sels) / total if total > 0 else 1.0
    return sels, min(coverage, 1.0)


def build_subproblem(problem: CompositeProblem, state: AugmentedIterate,
                     sel1, sel2, c: float) -> DualSubproblem:
    """Dual subproblem data for one per-sample atom-pair selection."""
    theta = state.theta
    N, k1, k2 = problem.n_samples, problem.k1, problem.k2
    g, h, _ = problem.psi(theta)

    v_sel = problem.W[np.arange(N) * k2 + sel2]          # (N, m) chosen h-atom grads
    f_sel = problem.f[np.arange(N) * k2 + sel2]
    u_sel = problem.U[np.arange(N) * k1 + sel1]
    e_sel = problem.e[np.arange(N) * k1 + sel1]

    B1 = problem.U - np.repeat(v_sel, k1, axis=0)
    beta1 = np.repeat(h - (v_sel * theta).sum(axis=1), k1) - problem.e
    B2 = problem.W - np.repeat(u_sel, k2, axis=0)
    beta2 = np.repeat(g - (u_sel * theta).sum(axis=1), k2) - problem.f

    # slack anchors: the point (theta, r, s, rhat, shat) is feasible for this
    # selection's constraints and carries the current surrogate value exactly
    psi1 = problem.U @ theta + problem.e
    psi2 = problem.W @ theta + problem.f
    rhat = np.repeat(state.r + h, k1) - psi1
    shat = np.repeat(g - state.s, k2) - psi2
    rhat = np.maximum(rhat, 0.0)
    shat = np.maximum(shat, 0.0)

    _, l1, lin = regularizer_majorant(problem.reg, theta, theta)
    reg_const = 0.0
    if problem.reg is not None and problem.reg.gamma > 0:
        _, lin_, const = problem.reg.majorant_data(theta)
        reg_const = const

    return DualSubproblem(B1=B1, beta1=beta1, B2=B2, beta2=beta2,
                          split=problem.split, n_samples=N, weight=problem.weight,
                          c=c, theta_nu=theta, r_nu=state.r, s_nu=state.s,
                          rhat_nu=rhat, shat_nu=shat, l1=l1, lin=lin,
                          reg_const=reg_const,
                          lower=problem.lower, upper=problem.upper)


def _step_norm(sub: DualSubproblem, res: SNResult) -> float:
    return float(np.sqrt(np.sum((res.theta - sub.theta_nu) ** 2)
                         + np.sum((res.r - sub.r_nu) ** 2)
                         + np.sum((res.s - sub.s_nu) ** 2)
                         + np.sum((res.rhat - sub.rhat_nu) ** 2)
                         + np.sum((res.shat - sub.shat_nu) ** 2)))


def mm_iterate(problem: CompositeProblem, state: AugmentedIterate,
               config: MMConfig, c: float, sn_cfg: SNConfig,
               rng: np.random.Generator, iteration: int = 0):
    """One outer step.  Returns (next_state, Record)."""
    t0 = time.perf_counter()
    sels, _ = select_pairs(problem, state.theta, config.eps, config.variant,
                           rng=rng, combo_cap=config.combo_cap)
    old_surrogate = problem.surrogate_value(state.theta, state.r, state.s)

    best = None
    best_sub = None
    best_sel = None
    sn_iters = 0
    for sel1, sel2 in sels:
        sub = build_subproblem(problem, state, sel1, sel2, c)
        res = sn_solve(sub, warm=state.warm, cfg=sn_cfg)
        sn_iters += res.iterations
        # strict improvement keeps the lexicographically-first minimizer
        if best is None or res.value < best.value:
            best, best_sub, best_sel = res, sub, (sel1, sel2)

    accepted = True
    if config.variant == "random" and not (best.value < old_surrogate):
        accepted = False

    # candidate displacement is recorded even on rejection: a tiny step for
    # the drawn selection is the stationarity signal the stopping rule reads
    step = _step_norm(best_sub, best)
    if accepted:
        nxt = AugmentedIterate(theta=best.theta, r=best.r, s=best.s,
                               rhat=best.rhat, shat=best.shat,
                               warm=(best.lam, best.mu))
        surrogate = problem.surrogate_value(best.theta, best.r, best.s)
    else:
        nxt = state
        surrogate = old_surrogate

    rec = Record(iteration=iteration, f_N=problem.f_N(nxt.theta),
                 surrogate=surrogate, step_norm=step, accepted=accepted,
                 selection=(best_sel[0].copy(), best_sel[1].copy()),
                 sn_iterations=sn_iters, wall_time=time.perf_counter() - t0)
    return nxt, rec


def run(problem: CompositeProblem, config: MMConfig, theta0) -> SolveReport:
    """Full solve from one starting point."""
    t_start = time.perf_counter()
    c = config.resolve_c(problem)
    rng = np.random.default_rng(config.seed)
    state = init_state(problem, theta0)
    f_prev = problem.f_N(state.theta)
    if not np.isfinite(f_prev):
        raise ValueError("non-finite objective at the starting point")

    trace: list[Record] = []
    sn_total = 0
    reason = "max_outer"
    sn_tol = config.sn_tol_floor
    for it in range(config.max_outer):
        sn_cfg = SNConfig(tol_grad=sn_tol, max_iter=config.sn_max_iter)
        state, rec = mm_iterate(problem, state, config, c, sn_cfg, rng, it)
        trace.append(rec)
        sn_total += rec.sn_iterations
        df = abs(rec.f_N - f_prev)
        if not config.sn_tol_fixed:
            sn_tol = max(config.sn_tol_floor, 1e-2 * df)
        rel = df / max(1.0, abs(f_prev))
        f_prev = rec.f_N
        if config.tol_step > 0.0:
            if rec.step_norm <= config.tol_step:
                reason = "tolerance"
                break
        elif rel <= config.tol_rel:
            reason = "tolerance"
            break

    report = SolveReport(theta=state.theta, f_N=f_prev, iterations=len(trace),
                         sn_total=sn_total, reason=reason, trace=trace,
                         wall_time=time.perf_counter() - t_start)

    if config.compute_residual:
        from . import stationarity
        if config.variant == "one":
            sels, _ = select_pairs(problem, state.theta, config.eps, "one")
            report.residual = stationarity.weak_mstat_residual(
                problem, state.theta, sels[0], c)
            report.residual_kind = "weak_mstat"
            report.residual_coverage = 1.0
        else:
            res, _, cov = stationarity.dstat_residual(
                problem, state.theta, c, config.combo_cap, seed=config.seed)
            report.residual = res
            report.residual_kind = "dstat"
            report.residual_coverage = cov
    return report
