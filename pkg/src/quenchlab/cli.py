"""Command-line front end: ``quenchlab validate|run|report``.

Exit codes
----------
0  success (every assertion in the config holds)
1  an assertion in the config failed (or ``validate`` found problems)
2  the config or a kernel file could not be parsed, or failed static checks
3  a kernel violates a structural invariant
4  a file could not be read or the output directory is not writable
5  an experiment could not be carried out (e.g. truncation insufficient)
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import __version__
from .approx import negligibility_curve
from .config import (
    ExperimentConfig,
    IoFailure,
    load_config,
    parse_conditions,
    static_diagnostics,
    sub_innovation,
    validate_file,
)
from .criteria import check_condition, implication_probe
from .errors import ConfigError, KernelFormatError, KernelInvalid, QuenchLabError, Unavailable, UnsupportedCondition
from .harness import (
    ExperimentReport,
    QuenchedCltConfig,
    decoupling_property_test,
    functional_covariance_test,
    increment_moment_test,
    omega_panel,
    quenched_clt_experiment,
    rosenthal_property_test,
)
from .kernels import VolterraKernel
from .lattice import QuenchedScenario
from .models import make_model
from .reports import build_report, read_report, render_text, write_report

EXIT_OK = 0
EXIT_ASSERTION = 1
EXIT_CONFIG = 2
EXIT_KERNEL = 3
EXIT_IO = 4
EXIT_EXPERIMENT = 5

DEFAULT_OUT = "quenchlab-out"


# ---------------------------------------------------------------------------
# experiment families
# ---------------------------------------------------------------------------


def _expectation(report: ExperimentReport, expect: str) -> ExperimentReport:
    """Apply ``expect: fail`` (expected-fail fixtures) to a report verdict."""
    if expect == "fail":
        report.statistics["expected"] = "fail"
        report.passed = not report.passed
    return report


def _check_conditions(cfg: ExperimentConfig, model) -> list[dict]:
    opts = cfg.options
    verdicts = []
    for cond in parse_conditions(opts.get("conditions", ["C_L2"])):
        try:
            verdicts.append(check_condition(model, cond, int(opts.get("horizon", 10_000))).to_record())
        except UnsupportedCondition as exc:
            verdicts.append({"condition": cond.label, "status": "unsupported", "note": str(exc)})
    expect = {str(k): str(v) for k, v in (opts.get("expect") or {}).items()}
    mismatches = [v["condition"] for v in verdicts if v["condition"] in expect and expect[v["condition"]] != v["status"]]
    missing = sorted(set(expect) - {v["condition"] for v in verdicts})
    stats = {"verdicts": verdicts, "expected": expect, "mismatches": mismatches + missing}
    if opts.get("implications"):
        stats["implications"] = implication_probe(model, int(opts.get("horizon", 10_000)), float(opts.get("q", 4)))
    try:
        stats["sigma2_analytic"] = model.sigma2_analytic()
    except Unavailable as exc:
        stats["sigma2_analytic"] = None
        stats["sigma2_note"] = str(exc)
    passed = not stats["mismatches"] and stats.get("implications", {}).get("consistent", True)
    return [{"kind": "check-conditions", "passed": passed, "statistics": stats}]


def _required_certificates(cfg: ExperimentConfig, model) -> tuple[list[dict], bool]:
    """Conditions that must be certified convergent before sampling."""
    out, ok = [], True
    for cond in parse_conditions(cfg.options.get("require_convergent")):
        v = check_condition(model, cond).to_record()
        out.append(v)
        ok &= v["status"] == "convergent"
    return out, ok


def _quenched_clt(cfg: ExperimentConfig, model, root: int, threads: int) -> list[dict]:
    opts = cfg.options
    certs, cert_ok = _required_certificates(cfg, model)
    results = []
    if certs:
        results.append({"kind": "check-conditions", "passed": cert_ok,
                        "statistics": {"verdicts": certs, "expected": {}, "mismatches": []}})
    for w in cfg.windows:
        qc = QuenchedCltConfig(model, QuenchedScenario(root, cfg.omega_seeds[0], model.d), w, cfg.replications,
                               str(opts.get("centering", "none")), float(opts.get("alpha", 0.05)), threads,
                               opts.get("sigma2"))
        if len(cfg.omega_seeds) > 1:
            rep = omega_panel(qc, cfg.omega_seeds, float(opts.get("min_pass_fraction", 0.9)))
        else:
            rep = quenched_clt_experiment(qc)
        results.append(_expectation(rep, str(opts.get("expect", "pass"))).to_record())
    return results


def _functional_clt(cfg: ExperimentConfig, model, root: int, threads: int) -> list[dict]:
    opts = cfg.options
    results = []
    scenario = QuenchedScenario(root, cfg.omega_seeds[0], model.d)
    for w in cfg.windows:
        qc = QuenchedCltConfig(model, scenario, w, cfg.replications, threads=threads, sigma2=opts.get("sigma2"))
        grid = opts.get("grid", [0.0, 0.25, 0.5, 0.75, 1.0])
        rep = functional_covariance_test(qc, grid)
        for key in ("covariance", "expected", "std_errors"):
            rep.statistics.pop(key)  # large matrices stay out of the report
        results.append(rep.to_record())
        inc = opts.get("increment_moments")
        if inc:
            rep = increment_moment_test(qc, float(inc.get("p", 3)), inc.get("levels", [1, 2, 3, 4]),
                                        inc.get("q"), float(inc.get("bound_factor", 3.0)))
            results.append(rep.to_record())
    return results


def _negligibility(cfg: ExperimentConfig, model, root: int, threads: int) -> list[dict]:
    opts = cfg.options
    scenario = QuenchedScenario(root, cfg.omega_seeds[0], model.d)
    n_grid = opts.get("n_grid", [8, 16, 32, 64, 128])
    curve = negligibility_curve(model, scenario, n_grid, cfg.replications, threads=threads)
    est = curve.estimates
    notes, passed = [], True
    if "max_ratio" in opts:
        ratio = est[-1] / est[0] if est[0] > 0 else 0.0
        passed &= ratio <= float(opts["max_ratio"])
        notes.append(f"last/first = {ratio:.6g} (required <= {float(opts['max_ratio']):g})")
    if opts.get("expect_zero"):
        passed &= all(e == 0.0 for e in est)
        notes.append("residual required to vanish identically")
    return [{"kind": "negligibility", "passed": passed, "notes": notes,
             "statistics": {"curve": curve.to_records(), "replications": cfg.replications}}]


def _inequality_suite(cfg: ExperimentConfig, root: int) -> list[dict]:
    opts = cfg.options
    results = []
    ros = opts.get("rosenthal")
    if ros:
        rep = rosenthal_property_test(float(ros.get("p", 4)), ros.get("n_grid", [1, 4, 16, 64]),
                                      int(ros.get("replications", cfg.replications)),
                                      sub_innovation(ros, cfg.innovation), root)
        results.append(rep.to_record())
    dec = opts.get("decoupling")
    if dec:
        rep = decoupling_property_test(cfg.kernel, float(dec.get("q", 4)),
                                       int(dec.get("replications", cfg.replications)),
                                       sub_innovation(dec, cfg.innovation), root,
                                       float(dec.get("max_constant", 16.0)))
        results.append(rep.to_record())
    return results


def run_config(cfg: ExperimentConfig, threads: int | None = None, seed_override: int | None = None) -> dict:
    """Run every experiment of a validated config and assemble the report record."""
    root = cfg.root_seed if seed_override is None else seed_override
    threads = threads or cfg.threads
    model = None
    if cfg.kernel is not None and not (cfg.experiment == "inequality-suite" and isinstance(cfg.kernel, VolterraKernel)):
        model = make_model(cfg.kernel, cfg.innovation)
    if cfg.experiment == "check-conditions":
        results = _check_conditions(cfg, model)
    elif cfg.experiment == "quenched-clt":
        results = _quenched_clt(cfg, model, root, threads)
    elif cfg.experiment == "functional-clt":
        results = _functional_clt(cfg, model, root, threads)
    elif cfg.experiment == "negligibility":
        results = _negligibility(cfg, model, root, threads)
    else:
        results = _inequality_suite(cfg, root)
    passed = all(r["passed"] for r in results)
    return build_report(cfg, results, passed, root)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def _err(msg: str) -> None:
    print(f"error: {msg}", file=sys.stderr)


def _writable(out: Path) -> None:
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write-probe"
        probe.write_text("", encoding="utf-8")
        probe.unlink()
    except OSError as exc:
        raise IoFailure(f"output directory {out} is not writable: {exc}") from exc


def cmd_validate(args) -> int:
    diags = validate_file(args.config)
    if not diags:
        print("ok")
        return EXIT_OK
    for d in diags:
        print(d)
    return EXIT_ASSERTION


def cmd_run(args) -> int:
    try:
        cfg = load_config(args.config)
        diags = static_diagnostics(cfg)
        if diags:
            for d in diags:
                _err(d)
            return EXIT_CONFIG
        out = Path(args.out or cfg.output or DEFAULT_OUT)
        _writable(out)
        report = run_config(cfg, args.threads, args.seed_override)
        paths = write_report(out, report)
    except KernelFormatError as exc:
        _err(f"kernel file malformed: {exc}")
        return EXIT_CONFIG
    except KernelInvalid as exc:
        _err(f"kernel invalid: {exc}")
        return EXIT_KERNEL
    except ConfigError as exc:
        _err(str(exc))
        return EXIT_CONFIG
    except IoFailure as exc:
        _err(str(exc))
        return EXIT_IO
    except OSError as exc:
        _err(f"i/o failure: {exc}")
        return EXIT_IO
    except QuenchLabError as exc:
        _err(f"{type(exc).__name__}: {exc}")
        return EXIT_EXPERIMENT
    print(render_text(report))
    for p in paths:
        print(f"wrote {p}")
    return EXIT_OK if report["passed"] else EXIT_ASSERTION


def cmd_report(args) -> int:
    path = Path(args.out or DEFAULT_OUT)
    try:
        report = read_report(path)
    except (OSError, ValueError) as exc:
        _err(f"cannot read report at {path}: {exc}")
        return EXIT_IO
    print(render_text(report))
    return EXIT_OK if report.get("passed") else EXIT_ASSERTION


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="quenchlab", description="Quenched CLT laboratory for random fields.")
    parser.add_argument("--version", action="version", version=f"quenchlab {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("validate", help="static validation of a config, no sampling")
    p.add_argument("--config", required=True, help="config path or bundled fixture name")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("run", help="run the experiment of a config and write reports")
    p.add_argument("--config", required=True, help="config path or bundled fixture name")
    p.add_argument("--out", help="output directory (overrides the config)")
    p.add_argument("--threads", type=int, help="worker threads; never changes results")
    p.add_argument("--seed-override", type=int, help="replace the root seed of the config")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("report", help="print the summary of an existing report")
    p.add_argument("--out", help="report directory or report.json path")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    if getattr(args, "threads", None) is not None and args.threads < 1:
        _err("--threads must be >= 1")
        return EXIT_CONFIG
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
