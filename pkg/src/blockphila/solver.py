"""Block-coordinate inexact forward-backward solver with heavy-ball
inertia, adaptive steplengths, and an Armijo-type line search on a merit
function.

One iteration updates a single block i = k mod N of the image:

1. pick the block cyclically;
2. choose a steplength (spectral quotient rule or fixed) and an inertia
   weight (accelerated schedule or zero);
3. compute an inexact proximal-gradient point for the block, certified
   through the dual gap (:mod:`blockphila.prox`);
4. evaluate the shifted subproblem value h_k at the accepted point;
5. backtrack the smallest m with

   ``F(x_k + delta^m U_i d_k) + (gamma/2) ||delta^m d_k||^2
       <= F(x_k) + (gamma/2) ||U_i^T (x_k - x_{k-N})||^2
          + sigma delta^m h_k``;

6. take the full step instead of the damped one when it scores strictly
   better on the same merit quantity.

The merit function ``Psi = F(z_1) + (gamma/2) sum ||z_i - z_{i+1}||^2``
over the rolling window of N+1 iterates decreases by at least
``-sigma lambda_k h_k`` per iteration, which the diagnostics module
verifies from the trace.

The objective is split either as fidelity-in-the-prox (phi = least
squares, f = the denoiser potential) or all-smooth (phi = 0, f = the
whole objective; the proximal step degenerates to the identity).
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .diagnostics import Trace, TraceRow, psnr as psnr_db
from .problems import Objective
from .prox import ProxSolveError, ProxSubproblem, solve_block_prox
from .tensor import BlockPartition, ImageTensor, extract_block, scatter_block

__all__ = [
    "SolverConfig",
    "SolverState",
    "MeritSnapshot",
    "VARIANTS",
    "LineSearchError",
    "CertificateViolation",
    "DivergenceError",
    "fista_beta",
    "bb_steplength",
    "line_search",
    "merit_value",
    "init_state",
    "step",
    "run",
]

H_FLOOR = 1e-12
DIVERGENCE_LIMIT = 1e12

SPLITTINGS = ("prox-fidelity", "all-smooth")

# variant -> (steplength rule, inertia on, splitting)
VARIANTS = {
    "v1": ("bb", True, "prox-fidelity"),
    "v2": ("bb", False, "prox-fidelity"),
    "v3": ("fixed", True, "prox-fidelity"),
    "v4": ("fixed", False, "prox-fidelity"),
    "v5": ("bb", True, "all-smooth"),
    "v6": ("bb", False, "all-smooth"),
    "v7": ("fixed", True, "all-smooth"),
    "v8": ("fixed", False, "all-smooth"),
}


class LineSearchError(RuntimeError):
    """Backtracking exhausted; indicates a gradient/prox inconsistency."""

    def __init__(self, m, lhs, rhs):
        super().__init__(
            f"line search failed after {m} backtracks: lhs {lhs!r} > rhs {rhs!r}"
        )
        self.m = m
        self.lhs = lhs
        self.rhs = rhs


class CertificateViolation(RuntimeError):
    """Accepted subproblem value was positive beyond roundoff."""


class DivergenceError(RuntimeError):
    """Objective exceeded the divergence guard."""


@dataclass(frozen=True)
class SolverConfig:
    """Parameters of one solver run. Defaults follow the experiment
    protocol; variant presets set the rule fields consistently."""

    variant: str = "v1"
    steplength: str = "bb"            # "bb" | "fixed"
    fixed_alpha: float = None         # None -> 1/weight at run time
    inertia: bool = True
    splitting: str = "prox-fidelity"
    alpha_min: float = 1e-2
    alpha_max: float = 1e3
    beta_max: float = 1.0
    gamma: float = 1e-4
    armijo_sigma: float = 1e-4
    delta: float = 0.5
    tau: float = 1e6
    mu: float = 1.0
    max_backtracks: int = 60
    max_iters: int = 400
    epsilon: float = 1e-5
    max_dual_iters: int = 200
    cert_stride: int = 1
    log_grad_norms: bool = False
    timing: bool = False

    def __post_init__(self):
        if not 0 < self.alpha_min <= self.alpha_max:
            raise ValueError("require 0 < alpha_min <= alpha_max")
        if not 0 < self.delta < 1:
            raise ValueError("delta must lie in (0, 1)")
        if not 0 < self.armijo_sigma < 1:
            raise ValueError("armijo_sigma must lie in (0, 1)")
        if self.gamma < 0 or self.tau < 0 or self.beta_max < 0:
            raise ValueError("gamma, tau, beta_max must be nonnegative")
        if self.mu < 1:
            raise ValueError("mu must be >= 1")
        if self.splitting not in SPLITTINGS:
            raise ValueError(f"unknown splitting {self.splitting!r}")
        if self.steplength not in ("bb", "fixed"):
            raise ValueError(f"unknown steplength rule {self.steplength!r}")
        if self.epsilon < 0:
            raise ValueError("epsilon must be nonnegative")
        if self.fixed_alpha is not None and self.fixed_alpha <= 0:
            raise ValueError("fixed_alpha must be positive when set")

    @classmethod
    def for_variant(cls, variant: str, **overrides) -> "SolverConfig":
        """Preset for one of the eight protocol variants.

        Inertial variants get gamma = 1e-4 and beta_max = 1; the others
        run with gamma = 0. Any field can still be overridden.
        """
        if variant not in VARIANTS:
            raise ValueError(f"unknown variant {variant!r}")
        rule, inertia, splitting = VARIANTS[variant]
        base = dict(
            variant=variant,
            steplength=rule,
            inertia=inertia,
            splitting=splitting,
            gamma=1e-4 if inertia else 0.0,
        )
        base.update(overrides)
        return cls(**base)


@dataclass(frozen=True)
class MeritSnapshot:
    """Merit value decomposition at one window."""

    F: float
    gap_sq: float
    psi: float


def merit_value(window, gamma: float, F) -> MeritSnapshot:
    """Psi(z_1, ..., z_{N+1}) = F(z_1) + (gamma/2) sum_i ||z_i - z_{i+1}||^2.

    ``F`` may be a callable on images or the precomputed head value.
    """
    head = F(window[0]) if callable(F) else float(F)
    gap = 0.0
    for a, c in zip(window[:-1], window[1:]):
        diff = a.data - c.data
        gap += float(np.vdot(diff, diff))
    return MeritSnapshot(head, gap, head + 0.5 * gamma * gap)


def fista_beta(k: int, N: int, beta_max: float) -> float:
    """Accelerated inertia schedule on the sweep counter, clamped to
    [0, beta_max]: ``(div(k, N) - 1) / (div(k, N) + 2)``."""
    div = k // N
    raw = (div - 1.0) / (div + 2.0)
    return min(beta_max, max(0.0, raw))


def bb_steplength(s_blk: np.ndarray, y_blk: np.ndarray, k: int, N: int,
                  alpha_min: float, alpha_max: float) -> float:
    """Spectral steplength: the geometric mean of the two classical
    quotient rules, ``||s|| / ||y||`` over the active block, clamped.

    ``s`` and ``y`` are the block differences of iterates and gradients
    between the current iterate and the one N iterations back. Falls back
    to alpha_max before a same-block history exists or when the
    denominator vanishes.
    """
    if k < N:
        return alpha_max
    ny = float(np.linalg.norm(y_blk))
    if ny < 1e-30:
        return alpha_max
    ns = float(np.linalg.norm(s_blk))
    return min(alpha_max, max(alpha_min, ns / ny))


def line_search(total, x: ImageTensor, partition: BlockPartition, i: int,
                x_blk: np.ndarray, d: np.ndarray, h_val: float, F0: float,
                inert_sq: float, cfg: SolverConfig):
    """Backtracking on the merit inequality; returns the accepted damped
    point together with the first (full-step) trial for the step-6 choice.

    Returns ``(lam, m, x_lam, F_lam, x_full, F_full)``.
    """
    dsq = float(np.dot(d, d))
    x_full = None
    F_full = None
    lhs = rhs = np.nan
    for m in range(cfg.max_backtracks + 1):
        lam = cfg.delta ** m
        x_trial = scatter_block(x, partition, i, x_blk + lam * d)
        F_trial = total(x_trial)
        if m == 0:
            x_full, F_full = x_trial, F_trial
        lhs = F_trial + 0.5 * cfg.gamma * lam * lam * dsq
        rhs = F0 + 0.5 * cfg.gamma * inert_sq + cfg.armijo_sigma * lam * h_val
        if lhs <= rhs:
            return lam, m, x_trial, F_trial, x_full, F_full
    raise LineSearchError(cfg.max_backtracks, lhs, rhs)


@dataclass
class SolverState:
    """Rolling window of N+1 iterates (newest first) plus run counters."""

    window: list
    k: int = 0
    F_curr: float = 0.0
    offblock_max: float = 0.0

    @property
    def x(self) -> ImageTensor:
        return self.window[0]


def init_state(objective: Objective, x0: ImageTensor, N: int) -> SolverState:
    window = [x0] * (N + 1)
    return SolverState(window=window, k=0, F_curr=objective.total(x0))


def _block_grad(objective: Objective, cfg: SolverConfig, x: ImageTensor,
                partition: BlockPartition, i: int, pad: int) -> np.ndarray:
    g = objective.reg.grad_block(x, partition, i, pad)
    if cfg.splitting == "all-smooth":
        g = g + extract_block(objective.fidelity_grad(x), partition, i)
    return g


def _fixed_alpha(objective: Objective, cfg: SolverConfig) -> float:
    if cfg.fixed_alpha is not None:
        alpha = cfg.fixed_alpha
    else:
        if objective.reg.weight <= 0:
            raise ValueError("fixed 1/weight steplength needs a positive weight; "
                             "set fixed_alpha explicitly")
        alpha = 1.0 / objective.reg.weight
    return min(cfg.alpha_max, max(cfg.alpha_min, alpha))


def _offblock_delta(x_new: ImageTensor, x_old: ImageTensor,
                    partition: BlockPartition, i: int) -> float:
    diff = np.abs(x_new.data - x_old.data)
    r = partition.rects[i]
    diff[:, r.r0:r.r1, r.c0:r.c1] = 0.0
    return float(diff.max())


def step(state: SolverState, objective: Objective, partition: BlockPartition,
         cfg: SolverConfig, pad: int, ref: ImageTensor = None) -> TraceRow:
    """Advance one iteration in place and return its trace row."""
    t0 = time.perf_counter() if cfg.timing else 0.0
    N = partition.N
    i = state.k % N
    x, w = state.window[0], state.window[N]
    x_blk = extract_block(x, partition, i)
    w_blk = extract_block(w, partition, i)

    grad_blk = _block_grad(objective, cfg, x, partition, i, pad)

    if cfg.steplength == "bb":
        if state.k < N:
            alpha = cfg.alpha_max
        else:
            grad_old = _block_grad(objective, cfg, w, partition, i, pad)
            alpha = bb_steplength(x_blk - w_blk, grad_blk - grad_old,
                                  state.k, N, cfg.alpha_min, cfg.alpha_max)
    else:
        alpha = _fixed_alpha(objective, cfg)
    beta = fista_beta(state.k, N, cfg.beta_max) if cfg.inertia else 0.0

    prox_model = objective.model if cfg.splitting == "prox-fidelity" else None
    prox_b = objective.b if cfg.splitting == "prox-fidelity" else None
    # Any steplength in [alpha_min, alpha_max] is admissible; when the dual
    # solver cannot certify the subproblem within budget (large adaptive
    # steps make its ascent slow), retry with a smaller one.
    while True:
        sub = ProxSubproblem(model=prox_model, b=prox_b, partition=partition,
                             i=i, x=x, w=w, alpha=alpha, beta=beta)
        try:
            y_blk, cert = solve_block_prox(sub, grad_blk, cfg.tau,
                                           max_dual_iters=cfg.max_dual_iters,
                                           cert_stride=cfg.cert_stride)
            break
        except ProxSolveError:
            if alpha <= cfg.alpha_min:
                raise
            alpha = max(cfg.alpha_min, alpha / 16.0)
    h_val = cert.primal
    if h_val > H_FLOOR:
        raise CertificateViolation(
            f"h_k = {h_val!r} > {H_FLOOR} at k={state.k}: certificate violated"
        )

    if h_val >= 0.0:
        # Roundoff-positive h within the floor: converged block, freeze the
        # iterate and record h as exactly zero.
        x_next, F_next = x, state.F_curr
        lam, m, h_rec, branch = 1.0, 0, 0.0, "frozen"
    else:
        d = y_blk - x_blk
        inert_sq = float(np.dot(x_blk - w_blk, x_blk - w_blk))
        lam, m, x_lam, F_lam, x_full, F_full = line_search(
            objective.total, x, partition, i, x_blk, d, h_val,
            state.F_curr, inert_sq, cfg,
        )
        dsq = float(np.dot(d, d))
        if F_full + 0.5 * cfg.gamma * dsq < F_lam + 0.5 * cfg.gamma * lam * lam * dsq:
            x_next, F_next, branch = x_full, F_full, "full"
        else:
            x_next, F_next, branch = x_lam, F_lam, "damped"
        h_rec = h_val
        state.offblock_max = max(state.offblock_max,
                                 _offblock_delta(x_next, x, partition, i))

    state.window = [x_next] + state.window[:-1]
    k = state.k
    state.k += 1
    state.F_curr = F_next

    snap = merit_value(state.window, cfg.gamma, F_next)
    grad_norm = (
        float(np.linalg.norm(objective.full_grad(x_next).data))
        if cfg.log_grad_norms else float("nan")
    )
    value_psnr = psnr_db(x_next, ref) if ref is not None else float("nan")
    wall = (time.perf_counter() - t0) * 1e3 if cfg.timing else 0.0
    return TraceRow(
        k=k, i_k=i, alpha_k=alpha, beta_k=beta, m_k=m, lambda_k=lam,
        h_k=h_rec, psi=snap.psi, F=F_next, grad_norm=grad_norm,
        psnr=value_psnr, wall_ms=wall, dual_iters=cert.dual_iters,
        step6_branch=branch,
    )


def run(objective: Objective, partition: BlockPartition, cfg: SolverConfig,
        x0: ImageTensor, pad: int = 16, ref: ImageTensor = None,
        metadata: dict = None):
    """Iterate to the stopping rule or the iteration budget.

    The relative objective-change criterion is evaluated once per full
    sweep of N blocks (per-iteration values stay available in the trace's
    F column). Returns ``(x_final, Trace)``; raises
    :class:`DivergenceError` if the objective passes 1e12.
    """
    N = partition.N
    state = init_state(objective, x0, N)
    psi0 = state.F_curr  # all window entries equal x0
    trace = Trace(metadata=dict(metadata or {}))
    trace.metadata.update({
        "variant": cfg.variant,
        "splitting": cfg.splitting,
        "N": N,
        "pad": pad,
        "armijo_sigma": cfg.armijo_sigma,
        "gamma": cfg.gamma,
        "epsilon": cfg.epsilon,
        "psi0": psi0,
        "f_low": 0.0,
    })
    sweep_prev = state.F_curr
    stopped = None
    for _ in range(cfg.max_iters):
        row = step(state, objective, partition, cfg, pad, ref=ref)
        trace.append(row)
        if not np.isfinite(row.F) or row.F > DIVERGENCE_LIMIT:
            raise DivergenceError(f"objective {row.F!r} beyond guard at k={row.k}")
        if (row.k + 1) % N == 0:
            F_now = state.F_curr
            if abs(F_now - sweep_prev) <= cfg.epsilon * abs(sweep_prev):
                stopped = (row.k + 1) // N
                break
            sweep_prev = F_now
    trace.metadata["offblock_max"] = state.offblock_max
    trace.metadata["stopped_at_sweep"] = stopped
    trace.metadata["iterations"] = state.k
    return state.x, trace
