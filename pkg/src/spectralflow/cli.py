"""Configuration-driven experiment runner.

Usage::

    spectralflow <command> --config run.json [--out DIR] [--seed N]
    spectralflow validate --config run.json
    spectralflow summarize DIR

Commands: filter-table, flow-run, lr-scan, locality-scan, lemma-checks.
The only environment variable read is SPECTRALFLOW_THREADS (BLAS threads).
"""
from __future__ import annotations

import os

_threads = os.environ.get("SPECTRALFLOW_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, _threads)

import argparse
import csv
import json
import platform
import sys
import traceback
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .algebra import Region, pauli_string, random_local_operator
from .dynamics import decoupling_residual, diagonalize, filter_weights, key_lemma_residual, lr_commutator_profile
from .filter import FilterFunction, FilterParams, fmt17
from .flow import FlowConfig, GapTooSmall, build_tfi_path, hamiltonian_at, path_from_file, solve_flow
from .lab import alpha_locality_profile, tau_locality_profile

CONFIG_VERSION = 1
COMMANDS = ("filter-table", "flow-run", "lr-scan", "locality-scan", "lemma-checks")
EXIT_OK, EXIT_INTERNAL, EXIT_PRECONDITION = 0, 1, 2

_FILTER_KEYS = {"a1", "n_terms", "t_cut", "quad_nodes", "tail_tol"}
_SECTION_DEFAULTS = {
    "table": {"t_max": 60.0, "t_points": 241, "k_max": 1.5, "k_points": 151},
    "flow": {"s_steps": 200, "reunitarize_every": 1, "gap_samples": 21},
    "lr": {"site": 0, "pauli": "X", "probe": "Z", "t_grid": [0.0, 0.5, 1.0, 1.5, 2.0], "s": 0.0},
    "locality": {"site": 0, "pauli": "X", "t": 1.0, "s_tau": 0.0, "s_alpha": 1.0, "n_grid": None, "s_steps": 100},
    "lemma": {"samples": 10, "s": 0.0, "support_size": 2, "control_fraction": 1.5},
}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Diagnostic:
    severity: str  # "error" or "warning"
    code: str
    message: str

    def __str__(self) -> str:
        return f"{self.severity}[{self.code}]: {self.message}"


@dataclass
class ExperimentConfig:
    command: str
    chain: dict
    path: dict | None
    filter: dict
    gamma: dict
    output_dir: str
    seed: int = 0
    sections: dict = field(default_factory=dict)
    raw: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, doc: dict, command: str | None = None) -> "ExperimentConfig":
        if not isinstance(doc, dict):
            raise ConfigError("config must be a JSON object")
        if doc.get("version") != CONFIG_VERSION:
            raise ConfigError(f"config 'version' must be {CONFIG_VERSION}")
        cmd = doc.get("command", command)
        if command is not None and cmd != command:
            raise ConfigError(f"config command {cmd!r} differs from requested command {command!r}")
        if cmd not in COMMANDS:
            raise ConfigError(f"unknown command {cmd!r}; expected one of {', '.join(COMMANDS)}")
        chain = doc.get("chain")
        if cmd != "filter-table":
            if not isinstance(chain, dict) or not ({"radius", "n_sites"} & chain.keys()):
                raise ConfigError("chain must be an object with 'radius' or 'n_sites'")
            if int(chain.get("d", 2)) != 2:
                raise ConfigError("only qubit chains (d = 2) are supported")
        path = doc.get("path")
        if cmd != "filter-table" or path is not None:
            if not isinstance(path, dict) or path.get("kind") not in ("tfi", "file"):
                raise ConfigError("path must be an object with kind 'tfi' or 'file'")
            params = path.get("params", {})
            if path["kind"] == "tfi" and not {"h0", "h1"} <= params.keys():
                raise ConfigError("tfi path needs params h0 and h1")
            if path["kind"] == "file" and "file" not in params:
                raise ConfigError("file path needs params.file")
        filt = dict(doc.get("filter", {}))
        gamma = filt.pop("gamma", None)
        unknown = set(filt) - _FILTER_KEYS
        if unknown:
            raise ConfigError(f"unknown filter keys: {sorted(unknown)}")
        if gamma is None:
            gamma = {"policy": "fixed", "value": 1.0} if path is None else {"policy": "fraction-of-gap", "value": 0.45}
        if not isinstance(gamma, dict) or gamma.get("policy") not in ("fixed", "fraction-of-gap"):
            raise ConfigError("filter.gamma must be {policy: fixed | fraction-of-gap, value}")
        if not float(gamma.get("value", 0)) > 0:
            raise ConfigError("filter.gamma.value must be positive")
        if gamma["policy"] == "fraction-of-gap" and path is None:
            raise ConfigError("fraction-of-gap gamma needs a path")
        sections = {}
        for name, defaults in _SECTION_DEFAULTS.items():
            given = doc.get(name, {})
            extra = set(given) - set(defaults)
            if extra:
                raise ConfigError(f"unknown keys in {name}: {sorted(extra)}")
            sections[name] = {**defaults, **given}
        return cls(
            command=cmd,
            chain=chain or {},
            path=path,
            filter=filt,
            gamma=dict(gamma),
            output_dir=str(doc.get("output_dir", "out")),
            seed=int(doc.get("seed", 0)),
            sections=sections,
            raw=doc,
        )

    def echo(self) -> dict:
        return {
            "version": CONFIG_VERSION,
            "command": self.command,
            "chain": self.chain,
            "path": self.path,
            "filter": {**self.filter, "gamma": self.gamma},
            "output_dir": self.output_dir,
            "seed": self.seed,
            **{k: v for k, v in self.sections.items() if k in _relevant_sections(self.command)},
        }


def _relevant_sections(command: str) -> tuple[str, ...]:
    return {
        "filter-table": ("table",),
        "flow-run": ("flow",),
        "lr-scan": ("lr",),
        "locality-scan": ("locality",),
        "lemma-checks": ("lemma",),
    }[command]


def load_config(source, command: str | None = None) -> ExperimentConfig:
    if isinstance(source, (str, Path)):
        try:
            doc = json.loads(Path(source).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config: {exc}") from exc
    else:
        doc = source
    return ExperimentConfig.from_dict(doc, command)


# -- resolution of physics objects -------------------------------------------


@dataclass
class _Context:
    region: Region | None = None
    path: object = None
    gap: float | None = None
    gamma: float | None = None
    params: FilterParams | None = None
    gap_points: tuple = ()


def _region(cfg: ExperimentConfig) -> Region:
    if "n_sites" in cfg.chain:
        return Region.chain(int(cfg.chain["n_sites"]))
    return Region.ball(int(cfg.chain["radius"]))


def _gap_points(cfg: ExperimentConfig) -> tuple:
    if cfg.command == "flow-run":
        return tuple(np.linspace(0.0, 1.0, int(cfg.sections["flow"]["gap_samples"])))
    if cfg.command == "lr-scan":
        return (float(cfg.sections["lr"]["s"]),)
    if cfg.command == "lemma-checks":
        return (float(cfg.sections["lemma"]["s"]),)
    if cfg.command == "locality-scan":
        loc = cfg.sections["locality"]
        return tuple(sorted({float(loc["s_tau"]), 0.0, float(loc["s_alpha"])}))
    return ()


def _resolve(cfg: ExperimentConfig) -> _Context:
    ctx = _Context(params=FilterParams(**cfg.filter))
    if cfg.path is not None:
        if cfg.path["kind"] == "tfi":
            ctx.region = _region(cfg)
            prm = cfg.path["params"]
            ctx.path = build_tfi_path(ctx.region.size, float(prm["h0"]), float(prm["h1"]), ctx.region)
        else:
            ctx.path, file_region = path_from_file(cfg.path["params"]["file"])
            ctx.region = _region(cfg) if cfg.chain else file_region
        ctx.gap_points = _gap_points(cfg)
        if ctx.gap_points:
            ctx.gap = min(diagonalize(hamiltonian_at(ctx.path, ctx.region, s)).gap for s in ctx.gap_points)
    if cfg.gamma["policy"] == "fixed":
        ctx.gamma = float(cfg.gamma["value"])
    elif ctx.gap is not None:
        ctx.gamma = float(cfg.gamma["value"]) * ctx.gap
    return ctx


def _diagnose(cfg: ExperimentConfig, ctx: _Context) -> list[Diagnostic]:
    out = []
    if ctx.gap is not None and ctx.gamma is not None:
        if ctx.gap <= 0:
            out.append(Diagnostic("error", "gap", "the finite-volume Hamiltonian has no gap above a degenerate ground level"))
        elif ctx.gamma > ctx.gap:
            out.append(
                Diagnostic(
                    "error",
                    "gap-assumption",
                    f"gamma = {ctx.gamma:.6g} exceeds the measured gap {ctx.gap:.6g}; the spectral-gap "
                    "assumption needs the spectrum above the ground level to start at 2 gamma or higher",
                )
            )
        elif 2 * ctx.gamma > ctx.gap:
            out.append(
                Diagnostic(
                    "error" if cfg.command == "flow-run" else "warning",
                    "gap-assumption",
                    f"2 gamma = {2 * ctx.gamma:.6g} exceeds the measured gap {ctx.gap:.6g}; the spectral-gap "
                    "assumption is violated",
                )
            )
    if ctx.region is not None:
        sec = cfg.sections
        radius = ctx.region.radius
        if cfg.command == "locality-scan":
            grid = sec["locality"]["n_grid"]
            if grid is not None and max(grid) > radius:
                out.append(
                    Diagnostic("error", "n-grid", f"N grid reaches {max(grid)} but the chain radius is {radius}")
                )
            if grid is not None and min(grid) < 0:
                out.append(Diagnostic("error", "n-grid", "N grid entries must be >= 0"))
        for name in ("lr", "locality"):
            if cfg.command == {"lr": "lr-scan", "locality": "locality-scan"}[name]:
                site = int(sec[name]["site"])
                if site not in ctx.region:
                    out.append(Diagnostic("error", "site", f"observable site {site} lies outside the chain"))
        if cfg.command == "lemma-checks" and int(sec["lemma"]["support_size"]) > ctx.region.size:
            out.append(Diagnostic("error", "support", "observable support is larger than the chain"))
    return out


def validate(config) -> list[Diagnostic]:
    """Schema and physics checks; never raises and never writes files."""
    try:
        cfg = config if isinstance(config, ExperimentConfig) else load_config(config)
    except (ConfigError, TypeError, ValueError) as exc:
        return [Diagnostic("error", "schema", str(exc))]
    try:
        ctx = _resolve(cfg)
    except (ConfigError, TypeError, ValueError, KeyError, OSError) as exc:
        return [Diagnostic("error", "schema", str(exc))]
    return _diagnose(cfg, ctx)


# -- pipelines ------------------------------------------------------------------


def _check(name: str, measured: float, threshold: float, op: str) -> dict:
    passed = {"<=": measured <= threshold, ">=": measured >= threshold, "==": measured == threshold}[op]
    return {"name": name, "measured": float(measured), "threshold": float(threshold), "op": op, "passed": bool(passed)}


def _flag(name: str, value: bool) -> dict:
    return {"name": name, "measured": bool(value), "threshold": True, "op": "==", "passed": bool(value)}


def _run_filter_table(cfg, ctx, f, out: Path) -> tuple[list, list]:
    tab = cfg.sections["table"]
    t_grid = np.linspace(-float(tab["t_max"]), float(tab["t_max"]), int(tab["t_points"])) / f.gamma
    k_grid = np.linspace(0.0, float(tab["k_max"]), int(tab["k_points"])) * f.gamma
    f.write_time_table(out / "omega_time.csv", t_grid)
    f.write_fourier_table(out / "omega_fourier.csv", k_grid)
    mass = f.total_mass()
    checks = [
        _check("normalization_lower", mass, 1.0 - 1e-6, ">="),
        _check("normalization_upper", mass, 1.0 + f.normalization_tol, "<="),
    ]
    return ["omega_time.csv", "omega_fourier.csv"], checks


def _run_flow(cfg, ctx, f, out: Path) -> tuple[list, list]:
    sec = cfg.sections["flow"]
    fc = FlowConfig(int(sec["s_steps"]), f.gamma, ctx.region, f.params, int(sec["reunitarize_every"]))
    res = solve_flow(ctx.path, fc, f)
    res.write_csv(out / "flow.csv")
    res.write_json(out / "flow.json")
    checks = [
        _check("min_fidelity", res.min_fidelity, 0.99, ">="),
        _check("unitarity_drift", res.unitarity_drift, 1e-8, "<="),
    ]
    return ["flow.csv", "flow.json"], checks


def _operator(site: int, pauli: str):
    return pauli_string([(int(site), str(pauli))])


def _run_lr(cfg, ctx, f, out: Path) -> tuple[list, list]:
    sec = cfg.sections["lr"]
    spec = diagonalize(hamiltonian_at(ctx.path, ctx.region, float(sec["s"])))
    a = _operator(sec["site"], sec["pauli"])
    bs = [_operator(j, sec["probe"]) for j in ctx.region.sites if j != int(sec["site"])]
    prof = lr_commutator_profile(a, bs, sec["t_grid"], spec)
    prof.write_csv(out / "lr_profile.csv")
    prof.write_fit_json(out / "lr_fit.json")
    checks = [_flag("lr_envelope_one_sided", prof.envelope_ok()), _check("lr_velocity", prof.fit_v, 0.0, ">=")]
    return ["lr_profile.csv", "lr_fit.json"], checks


def _run_locality(cfg, ctx, f, out: Path) -> tuple[list, list]:
    sec = cfg.sections["locality"]
    a = _operator(sec["site"], sec["pauli"])
    grid = sec["n_grid"]
    spec = diagonalize(hamiltonian_at(ctx.path, ctx.region, float(sec["s_tau"])))
    tau = tau_locality_profile(a, float(sec["t"]), spec, grid)
    tau.write_csv(out / "tau_locality.csv")
    files = ["tau_locality.csv"]
    checks = [_flag("tau_envelope_bound", tau.meta.get("envelope_bound_ok", False))]
    if tau.fit is not None:
        tau.write_fit_json(out / "tau_locality_fit.json")
        files.append("tau_locality_fit.json")
        checks += [_check("tau_fit_quality", tau.fit.quality, 0.9, ">="), _check("tau_fit_rate", tau.fit.rate, 0.0, ">=")]
    steps = int(sec["s_steps"])
    fc = FlowConfig(steps, f.gamma, ctx.region, f.params, store_every=1)
    flow = solve_flow(ctx.path, fc, f)
    s_alpha = round(float(sec["s_alpha"]) * steps) / steps
    alpha = alpha_locality_profile(a, flow, s_alpha, grid, model="pure-exp")
    alpha.write_csv(out / "alpha_locality.csv")
    files.append("alpha_locality.csv")
    checks.append(_flag("alpha_nonincreasing", alpha.is_nonincreasing(1e-12)))
    if alpha.fit is not None:
        alpha.write_fit_json(out / "alpha_locality_fit.json")
        files.append("alpha_locality_fit.json")
        checks.append(_check("alpha_fit_rate", alpha.fit.rate, 0.0, ">="))
    return files, checks


def _run_lemmas(cfg, ctx, f, out: Path) -> tuple[list, list]:
    sec = cfg.sections["lemma"]
    rng = np.random.default_rng(cfg.seed)
    spec = diagonalize(hamiltonian_at(ctx.path, ctx.region, float(sec["s"])))
    control = FilterFunction(f.params, float(sec["control_fraction"]) * spec.gap)
    w, wc = filter_weights(spec, f), filter_weights(spec, control)
    size = int(sec["support_size"])
    lo_max = ctx.region.hi - size + 1
    rows = []
    for i in range(int(sec["samples"])):
        la, lb = (int(x) for x in rng.integers(ctx.region.lo, lo_max + 1, size=2))
        a = random_local_operator(rng, Region(la, la + size - 1))
        b = random_local_operator(rng, Region(lb, lb + size - 1))
        rows.append(
            [
                i, la, lb,
                key_lemma_residual(a, spec, f, w).value,
                decoupling_residual(a, b, spec, f, w).value,
                key_lemma_residual(a, spec, control, wc).value,
                decoupling_residual(a, b, spec, control, wc).value,
            ]
        )
    with open(out / "lemma_residuals.csv", "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["sample", "a_lo", "b_lo", "key_residual", "decoupling_residual", "key_control", "decoupling_control"])
        for r in rows:
            wr.writerow(r[:3] + [fmt17(v) for v in r[3:]])
    arr = np.array([r[3:] for r in rows])
    checks = [
        _check("key_lemma_residual", arr[:, 0].max(), 1e-3, "<="),
        _check("decoupling_residual", arr[:, 1].max(), 1e-3, "<="),
        _check("negative_control_key", arr[:, 2].max(), 1e-1, ">="),
    ]
    return ["lemma_residuals.csv"], checks


_PIPELINES = {
    "filter-table": _run_filter_table,
    "flow-run": _run_flow,
    "lr-scan": _run_lr,
    "locality-scan": _run_locality,
    "lemma-checks": _run_lemmas,
}


def _versions() -> dict:
    return {"spectralflow": __version__, "numpy": np.__version__, "scipy": scipy.__version__, "python": platform.python_version()}


def run(config, out_dir: str | Path | None = None, seed: int | None = None, stream=None) -> int:
    """Execute the configured pipeline; returns the process exit code."""
    stream = stream or sys.stderr
    try:
        cfg = config if isinstance(config, ExperimentConfig) else load_config(config)
        if seed is not None:
            cfg.seed = int(seed)
        if out_dir is not None:
            cfg.output_dir = str(out_dir)
        ctx = _resolve(cfg)
    except (ConfigError, TypeError, ValueError, KeyError, OSError) as exc:
        print(f"error[schema]: {exc}", file=stream)
        return EXIT_PRECONDITION
    problems = [d for d in _diagnose(cfg, ctx) if d.severity == "error"]
    for d in _diagnose(cfg, ctx):
        print(d, file=stream)
    if problems:
        return EXIT_PRECONDITION
    out = Path(cfg.output_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write_probe"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        print(f"error[output]: output directory not writable: {exc}", file=stream)
        return EXIT_PRECONDITION
    try:
        f = FilterFunction(ctx.params, ctx.gamma)
        files, checks = _PIPELINES[cfg.command](cfg, ctx, f, out)
    except GapTooSmall as exc:
        print(f"error[gap-assumption]: {exc}", file=stream)
        return EXIT_PRECONDITION
    except Exception:  # noqa: BLE001 - reported as an internal error
        traceback.print_exc(file=stream)
        return EXIT_INTERNAL
    derived = {
        "a1": f.params.a1,
        "c": f.c,
        "normalization_integral": f.total_mass(),
        "normalization_tol": f.normalization_tol,
        "gamma": f.gamma,
        "gamma_policy": cfg.gamma,
        "gap": ctx.gap,
        "gap_sample_points": len(ctx.gap_points),
        "n_terms": f.params.n_terms,
        "t_cut": f.params.t_cut,
        "quad_nodes": f.params.quad_nodes,
    }
    for name in _relevant_sections(cfg.command):
        for key in ("s_steps", "samples", "t_grid", "n_grid"):
            if key in cfg.sections[name]:
                derived[key] = cfg.sections[name][key]
    manifest = {
        "command": cfg.command,
        "config": cfg.echo(),
        "versions": _versions(),
        "derived": derived,
        "outputs": files,
        "checks": checks,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return EXIT_OK


def summarize(output_dir: str | Path) -> tuple[str, int]:
    """Human-readable pass/fail report from ``manifest.json``; returns (text, exit code)."""
    path = Path(output_dir) / "manifest.json"
    try:
        manifest = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        return f"error: no readable manifest in {output_dir} ({exc})", EXIT_INTERNAL
    d = manifest.get("derived", {})
    lines = [f"{manifest.get('command')}: gamma = {d.get('gamma'):.6g}, gap = {d.get('gap')}, c = {d.get('c')}"]
    for chk in manifest.get("checks", []):
        tag = "PASS" if chk["passed"] else "FAIL"
        lines.append(f"{tag} {chk['name']}: measured {chk['measured']} {chk['op']} threshold {chk['threshold']}")
    return "\n".join(lines), EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="spectralflow", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True)
        p.add_argument("--out", default=None)
        p.add_argument("--seed", type=int, default=None)
    p = sub.add_parser("validate")
    p.add_argument("--config", required=True)
    p = sub.add_parser("summarize")
    p.add_argument("output_dir")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "summarize":
        text, code = summarize(args.output_dir)
        print(text, file=sys.stdout if code == EXIT_OK else sys.stderr)
        return code
    if args.command == "validate":
        diags = validate(args.config)
        for dgn in diags:
            print(dgn)
        return EXIT_PRECONDITION if any(dgn.severity == "error" for dgn in diags) else EXIT_OK
    try:
        cfg = load_config(args.config, args.command)
    except ConfigError as exc:
        print(f"error[schema]: {exc}", file=sys.stderr)
        return EXIT_PRECONDITION
    return run(cfg, args.out, args.seed)


if __name__ == "__main__":
    sys.exit(main())
