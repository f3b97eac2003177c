"""Report records (JSON) and tabular text summaries.

Reports carry no timestamps or host names, so repeated runs of one config
produce byte-identical files.  Provenance holds the config hash, seeds and
library versions needed to rerun exactly.
"""

from __future__ import annotations

import json
import math
import platform
from pathlib import Path

import numpy as np
import scipy

from . import __version__

REPORT_JSON = "report.json"
SUMMARY_TXT = "summary.txt"


def clean(obj):
    """Plain JSON types only; non-finite floats become strings."""
    if isinstance(obj, dict):
        return {str(k): clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [clean(v) for v in obj]
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        return x if math.isfinite(x) else str(x)
    if isinstance(obj, np.ndarray):
        return clean(obj.tolist())
    return obj


def versions() -> dict:
    return {
        "quenchlab": __version__,
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "python": platform.python_version(),
    }


def build_report(cfg, results: list[dict], passed: bool, root_seed: int) -> dict:
    return clean({
        "experiment": cfg.experiment,
        "passed": passed,
        "results": results,
        "provenance": {
            "config_sha256": cfg.sha256,
            "config": cfg.text,
            "kernel_source": cfg.kernel_source,
            "kernel": None if cfg.kernel is None else cfg.kernel.to_record(),
            "innovation": cfg.innovation.to_record(),
            "root_seed": root_seed,
            "omega_seeds": cfg.omega_seeds,
            "replications": cfg.replications,
            "versions": versions(),
        },
    })


def dumps_report(report: dict) -> str:
    return json.dumps(report, sort_keys=True, indent=2) + "\n"


def _fmt(x) -> str:
    if isinstance(x, bool):
        return "yes" if x else "no"
    if isinstance(x, float):
        return f"{x:.6g}"
    if isinstance(x, list):
        return "x".join(str(v) for v in x) if all(isinstance(v, int) for v in x) else str(x)
    return "-" if x is None else str(x)


def table(rows: list[dict], columns: list[str]) -> str:
    cells = [[_fmt(r.get(c)) for c in columns] for r in rows]
    widths = [max(len(c), *(len(row[i]) for row in cells)) if cells else len(c) for i, c in enumerate(columns)]
    line = "  ".join(c.ljust(w) for c, w in zip(columns, widths))
    out = [line, "  ".join("-" * w for w in widths)]
    out += ["  ".join(v.ljust(w) for v, w in zip(row, widths)) for row in cells]
    return "\n".join(out)


_COLUMNS = {
    "condition": ["condition", "status", "partial_sum", "tail_bound", "horizon", "scaled"],
    "quenched-clt": ["window", "centering", "sigma2", "sigma2_source", "ks_distance", "ks_threshold", "passed"],
    "quenched-clt-panel": ["omega_seed", "ks_distance", "passed"],
    "functional-clt": ["window", "sigma2", "max_abs_error", "reference_std_error", "max_entry_z", "passed"],
    "increment-moments": ["level", "block_area", "ratio", "std_error"],
    "negligibility": ["n", "estimate", "std_error", "certified_truncation_band", "remainder_estimate"],
    "rosenthal": ["n", "denominator", "exact_ratio", "mc_ratio", "mc_std_error"],
    "decoupling": ["q", "coupled_moment", "decoupled_moment", "ratio", "ratio_std_error", "fitted_constant"],
    "implication": ["chain", "hypothesis", "conclusion", "message"],
}


def render_text(report: dict) -> str:
    """Human-readable summary rendered from the report record."""
    prov = report["provenance"]
    lines = [
        f"experiment: {report['experiment']}",
        f"verdict: {'PASS' if report['passed'] else 'FAIL'}",
        f"config sha256: {prov['config_sha256']}",
        f"seeds: root={prov['root_seed']} omega={prov['omega_seeds']}",
        "",
    ]
    for res in report["results"]:
        kind = res["kind"]
        lines.append(f"[{kind}] {'pass' if res.get('passed', True) else 'FAIL'}")
        stats = res.get("statistics", {})
        if kind == "check-conditions":
            lines.append(table(stats["verdicts"], _COLUMNS["condition"]))
            if "implications" in stats:
                rows = [{"chain": k, "hypothesis": v["hypothesis"]["status"],
                         "conclusion": v["conclusion"]["status"], "message": v["message"]}
                        for k, v in stats["implications"]["chains"].items()]
                lines.append(table(rows, _COLUMNS["implication"]))
        elif kind == "quenched-clt-panel":
            lines.append(f"window={_fmt(stats['window'])} sigma2={_fmt(stats['sigma2'])} "
                         f"threshold={_fmt(stats['ks_threshold'])} passes={stats['passes']}/{len(stats['omega_runs'])}")
            lines.append(table(stats["omega_runs"], _COLUMNS["quenched-clt-panel"]))
        elif kind in ("quenched-clt", "functional-clt", "decoupling"):
            lines.append(table([{**stats, "passed": res["passed"]}], _COLUMNS[kind]))
        elif kind in ("increment-moments", "rosenthal"):
            lines.append(table(stats["rows"], _COLUMNS[kind]))
        elif kind == "negligibility":
            lines.append(table(stats["curve"], _COLUMNS[kind]))
        for note in res.get("notes", []):
            lines.append(f"note: {note}")
        lines.append("")
    return "\n".join(lines)


def write_report(out_dir: Path, report: dict) -> list[Path]:
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = [out_dir / REPORT_JSON, out_dir / SUMMARY_TXT]
    paths[0].write_text(dumps_report(report), encoding="utf-8")
    paths[1].write_text(render_text(report), encoding="utf-8")
    return paths


def read_report(path: Path) -> dict:
    if path.is_dir():
        path = path / REPORT_JSON
    return json.loads(path.read_text(encoding="utf-8"))
