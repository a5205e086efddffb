"""Batch experiment front-end.

Reads an INI-style config (sections: problem, denoiser, partition,
solver, run), builds the fixtures, runs the requested (variant, N)
matrix, and writes per-run artifacts: recon.png, trace.csv,
certificates.txt (+ certificates.json), rates.txt. Exit status is 0 only
if every run finishes and passes all certificates.
"""

from __future__ import annotations

import argparse
import configparser
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, fields, replace
from pathlib import Path

import numpy as np

from .denoisers import LinearConvDenoiser, TinyConvNet
from .diagnostics import certificate_report, make_rate_probe
from .imgio import read_image, write_image
from .operators import gaussian_kernel
from .problems import ProblemSpec, assemble, make_test_image
from .solver import SolverConfig, VARIANTS, run as run_solver
from .tensor import ImageTensor, make_partition, parse_scheme

__all__ = ["RunConfig", "parse_config", "serialize_config", "run_experiment", "main"]

PROCEDURAL_KINDS = ("blobs", "checkerboard", "texture")
CANONICAL_SCHEMES = {1: "full", 2: "horizontal-halves", 4: "quadrants"}

AUTO = "auto"


@dataclass(frozen=True)
class DenoiserConfig:
    kind: str = "linear"            # "linear" | "tinyconv"
    kernel_size: int = 5
    kernel_std: float = 1.0
    layers: int = 3
    hidden: int = 8
    conv_size: int = 3
    weight_seed: int = 0
    weights_file: str = ""

    def __post_init__(self):
        if self.kind not in ("linear", "tinyconv"):
            raise ValueError(f"unknown denoiser kind {self.kind!r}")


@dataclass(frozen=True)
class PartitionConfig:
    scheme: str = "full"
    blocks: int = 1
    pad: int = 16

    def __post_init__(self):
        rows, cols = parse_scheme(self.scheme)
        if rows * cols != self.blocks:
            raise ValueError(
                f"partition scheme {self.scheme!r} has {rows * cols} blocks, "
                f"config says {self.blocks}"
            )
        if self.pad < 0:
            raise ValueError("pad must be nonnegative")


@dataclass(frozen=True)
class SolverSection:
    """Solver keys as configured; 'auto' defers to the variant preset."""

    variant: str = "v1"
    gamma: object = AUTO
    fixed_alpha: object = AUTO
    alpha_min: float = 1e-2
    alpha_max: float = 1e3
    beta_max: float = 1.0
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

    def build(self, variant: str) -> SolverConfig:
        overrides = dict(
            alpha_min=self.alpha_min, alpha_max=self.alpha_max,
            beta_max=self.beta_max, armijo_sigma=self.armijo_sigma,
            delta=self.delta, tau=self.tau, mu=self.mu,
            max_backtracks=self.max_backtracks, max_iters=self.max_iters,
            epsilon=self.epsilon, max_dual_iters=self.max_dual_iters,
            cert_stride=self.cert_stride, log_grad_norms=self.log_grad_norms,
            timing=self.timing,
        )
        if self.gamma != AUTO:
            overrides["gamma"] = float(self.gamma)
        if self.fixed_alpha != AUTO:
            overrides["fixed_alpha"] = float(self.fixed_alpha)
        return SolverConfig.for_variant(variant, **overrides)


@dataclass(frozen=True)
class RunConfig:
    problem: ProblemSpec
    denoiser: DenoiserConfig = DenoiserConfig()
    partition: PartitionConfig = PartitionConfig()
    solver: SolverSection = SolverSection()
    variants: tuple = ("v1",)
    blocks: tuple = (1,)
    out: str = "results"
    final_denoise: bool = False


_PROBLEM_KEYS = {
    "task": str, "height": int, "width": int, "channels": int, "image": str,
    "kernel_size": int, "kernel_std": float, "kernel_file": str, "scale": int,
    "noise_level": float, "lam": float, "denoiser_sigma": float, "seed": int,
}
_DENOISER_KEYS = {
    "kind": str, "kernel_size": int, "kernel_std": float, "layers": int,
    "hidden": int, "conv_size": int, "weight_seed": int, "weights_file": str,
}
_PARTITION_KEYS = {"scheme": str, "blocks": int, "pad": int}
_SOLVER_KEYS = {
    "variant": str, "gamma": "auto_float", "fixed_alpha": "auto_float",
    "alpha_min": float, "alpha_max": float, "beta_max": float,
    "armijo_sigma": float, "delta": float, "tau": float, "mu": float,
    "max_backtracks": int, "max_iters": int, "epsilon": float,
    "max_dual_iters": int, "cert_stride": int,
    "log_grad_norms": "bool", "timing": "bool",
}
_RUN_KEYS = {"variants": "strlist", "blocks": "intlist", "out": str,
             "final_denoise": "bool"}


def _convert(raw: str, typ):
    raw = raw.strip()
    if typ == "bool":
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if typ == "auto_float":
        return AUTO if raw.lower() == AUTO else float(raw)
    if typ == "strlist":
        return tuple(t.strip() for t in raw.split(",") if t.strip())
    if typ == "intlist":
        return tuple(int(t) for t in raw.split(",") if t.strip())
    return typ(raw)


def _section(parser, name, keymap):
    if not parser.has_section(name):
        return {}
    out = {}
    for key, raw in parser.items(name):
        if key not in keymap:
            raise ValueError(f"unknown key {key!r} in section [{name}]")
        out[key] = _convert(raw, keymap[key])
    return out


def scheme_for_blocks(n: int) -> str:
    return CANONICAL_SCHEMES.get(n, f"grid:1x{n}")


def parse_config(path) -> RunConfig:
    """Parse and fully validate a config file; missing keys get the
    protocol defaults, unknown keys are hard errors."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(path)
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    with open(path) as fh:
        parser.read_file(fh)
    known = {"problem", "denoiser", "partition", "solver", "run"}
    extra = set(parser.sections()) - known
    if extra:
        raise ValueError(f"unknown config sections: {sorted(extra)}")

    prob_kw = _section(parser, "problem", _PROBLEM_KEYS)
    prob_kw.setdefault("task", "deblur")
    prob_kw.setdefault("height", 32)
    prob_kw.setdefault("width", 32)
    problem = ProblemSpec(**prob_kw)

    denoiser = DenoiserConfig(**_section(parser, "denoiser", _DENOISER_KEYS))
    part_kw = _section(parser, "partition", _PARTITION_KEYS)
    # either of scheme/blocks determines the other when only one is given
    if "scheme" in part_kw and "blocks" not in part_kw:
        rows, cols = parse_scheme(part_kw["scheme"])
        part_kw["blocks"] = rows * cols
    elif "blocks" in part_kw and "scheme" not in part_kw:
        part_kw["scheme"] = scheme_for_blocks(part_kw["blocks"])
    partition = PartitionConfig(**part_kw)
    solver = SolverSection(**_section(parser, "solver", _SOLVER_KEYS))
    run_kw = _section(parser, "run", _RUN_KEYS)
    variants = run_kw.get("variants", (solver.variant,))
    blocks = run_kw.get("blocks", (partition.blocks,))
    for v in variants:
        if v not in VARIANTS:
            raise ValueError(f"unknown variant {v!r}")
    for n in blocks:
        if n < 1:
            raise ValueError(f"block count must be positive, got {n}")
    cfg = RunConfig(
        problem=problem, denoiser=denoiser, partition=partition, solver=solver,
        variants=tuple(variants), blocks=tuple(blocks),
        out=run_kw.get("out", "results"),
        final_denoise=run_kw.get("final_denoise", False),
    )
    _validate_files(cfg)
    return cfg


def _validate_files(cfg: RunConfig):
    if cfg.problem.image not in PROCEDURAL_KINDS and not Path(cfg.problem.image).is_file():
        raise ValueError(f"image file not found: {cfg.problem.image}")
    if cfg.denoiser.weights_file and not Path(cfg.denoiser.weights_file).is_file():
        raise ValueError(f"weights file not found: {cfg.denoiser.weights_file}")
    if cfg.problem.kernel_file and not Path(cfg.problem.kernel_file).is_file():
        raise ValueError(f"kernel file not found: {cfg.problem.kernel_file}")


def _fmt(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return str(value)


def serialize_config(cfg: RunConfig) -> str:
    """Render a config with every key explicit; parse(serialize(c)) == c."""
    parts = []
    for section, obj in (("problem", cfg.problem), ("denoiser", cfg.denoiser),
                         ("partition", cfg.partition), ("solver", cfg.solver)):
        parts.append(f"[{section}]")
        for f in fields(obj):
            parts.append(f"{f.name} = {_fmt(getattr(obj, f.name))}")
        parts.append("")
    parts.append("[run]")
    parts.append(f"variants = {_fmt(cfg.variants)}")
    parts.append(f"blocks = {_fmt(cfg.blocks)}")
    parts.append(f"out = {cfg.out}")
    parts.append(f"final_denoise = {_fmt(cfg.final_denoise)}")
    parts.append("")
    return "\n".join(parts)


def _build_denoiser(cfg: RunConfig, channels: int):
    sigma = cfg.problem.denoiser_sigma
    d = cfg.denoiser
    if d.kind == "linear":
        taps = gaussian_kernel(d.kernel_size, d.kernel_std).taps
        return LinearConvDenoiser(taps, noise_level=sigma)
    if d.weights_file:
        return TinyConvNet.load_weights(d.weights_file, noise_level=sigma)
    return TinyConvNet(channels=channels, hidden=d.hidden, layers=d.layers,
                       kernel_size=d.conv_size, seed=d.weight_seed,
                       noise_level=sigma)


def _load_truth(cfg: RunConfig):
    p = cfg.problem
    if p.image in PROCEDURAL_KINDS:
        img = make_test_image(p.image, p.height, p.width, p.channels, seed=p.seed)
        return img, p
    img = read_image(p.image)
    spec = replace(p, height=img.height, width=img.width, channels=img.channels)
    return img, spec


def _one_run(cfg, spec, objective, x_true, x0, variant, n_blocks, out_root):
    name = f"{variant}_N{n_blocks}"
    out_dir = Path(out_root) / name
    out_dir.mkdir(parents=True, exist_ok=True)
    scheme = (cfg.partition.scheme if n_blocks == cfg.partition.blocks
              else scheme_for_blocks(n_blocks))
    partition = make_partition(spec.height, spec.width, scheme, channels=spec.channels)
    solver_cfg = cfg.solver.build(variant)
    meta = {"problem_id": f"{spec.task}:{spec.image}", "seed": spec.seed,
            "scheme": scheme}
    x_final, trace = run_solver(objective, partition, solver_cfg, x0,
                                pad=cfg.partition.pad, ref=x_true, metadata=meta)

    recon = x_final
    if cfg.final_denoise:
        # One extra gradient-step denoising pass x - grad g(x) on the last iterate.
        den = objective.reg.denoiser
        res = x_final.data - den._forward(x_final.data)
        recon = ImageTensor(x_final.data - (res - den._vjp(x_final.data, res)))
    write_image(out_dir / "recon.png", ImageTensor(np.clip(recon.data, 0.0, 1.0)))

    with open(out_dir / "trace.csv", "w") as fh:
        trace.to_csv(fh)

    report = certificate_report(trace)
    (out_dir / "certificates.txt").write_text(report.render_text() + "\n")
    payload = report.to_json_dict()
    payload["metadata"] = {k: v for k, v in trace.metadata.items()}
    (out_dir / "certificates.json").write_text(json.dumps(payload, indent=2) + "\n")

    sweeps = trace.sweep_objectives()
    probe = make_rate_probe(sweeps, float(sweeps.min()) if sweeps.size else 0.0)
    fit = probe.fit
    (out_dir / "rates.txt").write_text(
        "gap reference: minimum objective over this run (empirical surrogate)\n"
        f"sweeps: {sweeps.size}\n"
        f"model: {fit.model}\nrate: {fit.rate!r}\nR2: {fit.r2!r}\n"
        f"points_fitted: {fit.n_points}\n"
    )
    return name, report.passed


def run_experiment(cfg: RunConfig) -> int:
    """Run the (variant, N) matrix; 0 exit iff every certificate passed."""
    out_root = Path(cfg.out)
    out_root.mkdir(parents=True, exist_ok=True)
    x_true, spec = _load_truth(cfg)
    denoiser = _build_denoiser(cfg, spec.channels)
    objective, x_true, b, x0 = assemble(spec, denoiser, x_true=x_true)
    (out_root / "config.resolved.ini").write_text(serialize_config(cfg))

    jobs = [(v, n) for v in cfg.variants for n in cfg.blocks]
    threads = max(1, int(os.environ.get("BLOCKPHILA_THREADS", "1")))

    def work(job):
        variant, n = job
        try:
            return _one_run(cfg, spec, objective, x_true, x0, variant, n, out_root)
        except Exception as exc:  # keep partial outputs, fail the matrix
            name = f"{variant}_N{n}"
            err_dir = out_root / name
            err_dir.mkdir(parents=True, exist_ok=True)
            (err_dir / "error.txt").write_text(f"{type(exc).__name__}: {exc}\n")
            return name, False

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(work, jobs))
    else:
        results = [work(j) for j in jobs]

    ok = True
    for name, passed in results:
        print(f"{name}: {'PASS' if passed else 'FAIL'}")
        ok = ok and passed
    return 0 if ok else 1


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="blockphila",
                                     description="Block-coordinate PnP restoration runs")
    sub = parser.add_subparsers(dest="command", required=True)
    runp = sub.add_parser("run", help="run the experiment matrix from a config file")
    runp.add_argument("config", help="path to the INI config")
    runp.add_argument("--out", help="output directory override")
    runp.add_argument("--seed", type=int, help="problem seed override")
    runp.add_argument("--variants", help="comma-separated variant list (v1..v8)")
    runp.add_argument("--blocks", help="comma-separated block counts")
    runp.add_argument("--max-iters", type=int, help="iteration budget override")
    runp.add_argument("--emit-grad-norms", action="store_true",
                      help="log the full gradient norm each iteration")
    args = parser.parse_args(argv)

    cfg = parse_config(args.config)
    if args.out:
        cfg = replace(cfg, out=args.out)
    if args.seed is not None:
        cfg = replace(cfg, problem=replace(cfg.problem, seed=args.seed))
    if args.variants:
        variants = _convert(args.variants, "strlist")
        for v in variants:
            if v not in VARIANTS:
                raise SystemExit(f"unknown variant {v!r}")
        cfg = replace(cfg, variants=variants)
    if args.blocks:
        cfg = replace(cfg, blocks=_convert(args.blocks, "intlist"))
    if args.max_iters is not None:
        cfg = replace(cfg, solver=replace(cfg.solver, max_iters=args.max_iters))
    if args.emit_grad_norms:
        cfg = replace(cfg, solver=replace(cfg.solver, log_grad_norms=True))
    return run_experiment(cfg)


if __name__ == "__main__":
    sys.exit(main())
