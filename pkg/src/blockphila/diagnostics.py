"""Metrics, run traces, convergence certificates, and empirical rate probes."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict

import numpy as np

from .tensor import ImageTensor

__all__ = [
    "TraceRow",
    "Trace",
    "psnr",
    "MinGradCheck",
    "min_grad_rate_check",
    "RateFit",
    "RateProbe",
    "rate_fit",
    "make_rate_probe",
    "CheckResult",
    "CertificateReport",
    "certificate_report",
]

PSNR_CAP = 300.0

CSV_COLUMNS = (
    "k", "i_k", "alpha_k", "beta_k", "m_k", "lambda_k", "h_k", "Psi", "F",
    "grad_norm", "PSNR", "wall_ms", "dual_iters", "step6_branch",
)


@dataclass(frozen=True)
class TraceRow:
    """One solver iteration, in the fixed CSV column order."""

    k: int
    i_k: int
    alpha_k: float
    beta_k: float
    m_k: int
    lambda_k: float
    h_k: float
    psi: float
    F: float
    grad_norm: float
    psnr: float
    wall_ms: float
    dual_iters: int
    step6_branch: str

    def csv_cells(self):
        return (
            str(self.k), str(self.i_k), repr(self.alpha_k), repr(self.beta_k),
            str(self.m_k), repr(self.lambda_k), repr(self.h_k), repr(self.psi),
            repr(self.F), repr(self.grad_norm), repr(self.psnr),
            repr(self.wall_ms), str(self.dual_iters), self.step6_branch,
        )


@dataclass
class Trace:
    """Per-iteration records plus run metadata (variant, N, seed, ...)."""

    rows: list = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    def append(self, row: TraceRow):
        if self.rows and row.k <= self.rows[-1].k:
            raise ValueError("trace iteration counter must strictly increase")
        self.rows.append(row)

    def column(self, name: str) -> np.ndarray:
        attr = {"Psi": "psi", "PSNR": "psnr"}.get(name, name)
        return np.array([getattr(r, attr) for r in self.rows])

    def sweep_objectives(self) -> np.ndarray:
        """F at the end of each full sweep of N blocks."""
        N = int(self.metadata.get("N", 1))
        return np.array([r.F for r in self.rows if (r.k + 1) % N == 0])

    def to_csv(self, fh):
        fh.write(",".join(CSV_COLUMNS) + "\n")
        for row in self.rows:
            fh.write(",".join(row.csv_cells()) + "\n")

    @classmethod
    def from_csv(cls, fh, metadata=None):
        header = fh.readline().strip().split(",")
        if tuple(header) != CSV_COLUMNS:
            raise ValueError("unexpected trace CSV header")
        rows = []
        for line in fh:
            c = line.strip().split(",")
            rows.append(TraceRow(
                int(c[0]), int(c[1]), float(c[2]), float(c[3]), int(c[4]),
                float(c[5]), float(c[6]), float(c[7]), float(c[8]), float(c[9]),
                float(c[10]), float(c[11]), int(c[12]), c[13],
            ))
        return cls(rows, dict(metadata or {}))


def psnr(x: ImageTensor, ref: ImageTensor, peak: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB, capped at 300 for exact matches."""
    if x.shape != ref.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {ref.shape}")
    if peak <= 0:
        raise ValueError("peak must be positive")
    mse = float(np.mean((x.data - ref.data) ** 2))
    if mse < 1e-30:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(peak * peak / mse))


def _linfit_r2(xs: np.ndarray, ys: np.ndarray):
    slope, intercept = np.polyfit(xs, ys, 1)
    pred = slope * xs + intercept
    ss_res = float(np.sum((ys - pred) ** 2))
    ss_tot = float(np.sum((ys - ys.mean()) ** 2))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 0.0
    return float(slope), float(intercept), r2


@dataclass(frozen=True)
class MinGradCheck:
    """Bound probe for the sublinear min-gradient rate."""

    c_hat: float
    slope: float

    def passes(self, slope_tol: float = 0.05) -> bool:
        return self.slope <= slope_tol


def min_grad_rate_check(grad_norms) -> MinGradCheck:
    """Probe ``C_K = (K+1) min_{i<=K} ||grad F(x_i)||^2`` for boundedness.

    Returns the largest ``C_K`` and the log-log slope of ``C_K`` over the
    second half of the run; a nonpositive slope means no growth trend.
    Requires at least 20 samples.
    """
    g = np.asarray(grad_norms, dtype=np.float64)
    if g.size < 20:
        raise ValueError(f"need at least 20 gradient samples, got {g.size}")
    c = (np.arange(g.size) + 1.0) * np.minimum.accumulate(g * g)
    c_hat = float(c.max())
    if c_hat == 0.0:
        return MinGradCheck(0.0, 0.0)
    half = c[g.size // 2:]
    ks = np.arange(g.size // 2, g.size) + 1.0
    slope, _, _ = _linfit_r2(np.log(ks), np.log(np.maximum(half, 1e-300)))
    return MinGradCheck(c_hat, slope)


@dataclass(frozen=True)
class RateFit:
    """Classification of a nonincreasing gap sequence.

    ``model`` is ``finite-termination``, ``linear`` (rate = contraction
    factor per index), or ``sublinear`` (rate = power-law exponent).
    """

    model: str
    rate: float
    r2: float
    n_points: int


@dataclass(frozen=True)
class RateProbe:
    """Per-sweep objective gaps and their fitted decay model."""

    deltas: np.ndarray
    fit: RateFit


RATE_FLOOR = 1e-13
RATE_MIN_POINTS = 30


def rate_fit(deltas, floor: float = RATE_FLOOR, min_points: int = RATE_MIN_POINTS) -> RateFit:
    """Fit the decay of a gap sequence and pick the better regime.

    Fits ``log d_k`` against ``k`` (geometric decay) and against ``log k``
    (power law) over the leading stretch above ``floor`` and reports the
    model with the higher R^2. Sequences that hit the floor before
    ``min_points`` samples classify as finite termination.
    """
    d = np.asarray(deltas, dtype=np.float64)
    above = np.nonzero(d > floor)[0]
    count = 0 if above.size == 0 else int(above[-1]) + 1
    count = min(count, d.size)
    head = d[:count]
    head = head[head > floor] if count else head
    if head.size < min_points:
        return RateFit("finite-termination", math.nan, math.nan, int(head.size))
    ks = np.arange(1, head.size + 1, dtype=np.float64)
    ys = np.log(head)
    slope_lin, _, r2_lin = _linfit_r2(ks, ys)
    slope_sub, _, r2_sub = _linfit_r2(np.log(ks), ys)
    if r2_lin >= r2_sub:
        return RateFit("linear", math.exp(slope_lin), r2_lin, int(head.size))
    return RateFit("sublinear", slope_sub, r2_sub, int(head.size))


def make_rate_probe(sweep_objectives, f_best: float) -> RateProbe:
    """Gap sequence ``F(x_{kN}) - F_best`` with its fitted decay model.

    ``f_best`` is an empirical stand-in for the unknown optimal value,
    e.g. the minimum objective of a longer reference run.
    """
    deltas = np.asarray(sweep_objectives, dtype=np.float64) - f_best
    if deltas.size and float(deltas.min()) < -1e-12:
        raise ValueError(f"gap sequence dips below -1e-12 ({deltas.min():.3e}); bad F_best")
    deltas = np.maximum(deltas, 0.0)
    return RateProbe(deltas, rate_fit(deltas))


# ----------------------------------------------------------------------
# Certificates over a finished trace.

H_SLACK = 1e-12
MERIT_SLACK = 1e-9


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    margin: float
    detail: str = ""


@dataclass(frozen=True)
class CertificateReport:
    checks: tuple

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def render_text(self) -> str:
        lines = []
        for c in self.checks:
            status = "PASS" if c.passed else "FAIL"
            line = f"[{status}] {c.name}: worst margin {c.margin:.6e}"
            if c.detail:
                line += f" ({c.detail})"
            lines.append(line)
        lines.append("overall: " + ("PASS" if self.passed else "FAIL"))
        return "\n".join(lines)

    def to_json_dict(self) -> dict:
        return {
            "passed": self.passed,
            "checks": [asdict(c) for c in self.checks],
        }


def certificate_report(trace: Trace) -> CertificateReport:
    """Verify the run invariants recorded in a trace.

    Checks merit descent (with the Armijo decrement and 1e-9 slack),
    nonpositivity of every accepted h_k, the telescoped summability bound
    on ``sum(-h_k)``, and that iterates only ever changed inside the
    active block. Deterministic given the trace.
    """
    md = trace.metadata
    sigma = float(md["armijo_sigma"])
    psi0 = float(md["psi0"])
    rows = trace.rows

    checks = []

    worst = -np.inf
    worst_k = -1
    prev_psi = psi0
    for r in rows:
        bound = prev_psi + sigma * r.lambda_k * r.h_k + MERIT_SLACK
        margin = r.psi - bound
        if margin > worst:
            worst, worst_k = margin, r.k
        prev_psi = r.psi
    checks.append(CheckResult(
        "merit-descent", worst <= 0.0, worst if rows else 0.0,
        f"offending k={worst_k}" if worst > 0.0 else "",
    ))

    h = np.array([r.h_k for r in rows]) if rows else np.zeros(0)
    worst_h = float(h.max()) if rows else 0.0
    checks.append(CheckResult("h-nonpositive", worst_h <= H_SLACK, worst_h - H_SLACK))

    if rows:
        lam_min = float(min(r.lambda_k for r in rows))
        total = float(np.sum(-h))
        bound = (psi0 - float(md.get("f_low", 0.0))) / (sigma * lam_min) + MERIT_SLACK
        margin = total - bound
    else:
        total, margin = 0.0, -MERIT_SLACK
    checks.append(CheckResult(
        "h-summability", margin <= 0.0, margin,
        f"sum(-h)={total:.6e}",
    ))

    offblock = float(md.get("offblock_max", 0.0))
    checks.append(CheckResult("single-block-mutation", offblock == 0.0, offblock))

    return CertificateReport(tuple(checks))
