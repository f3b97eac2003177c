import json
import subprocess
import sys

import pytest

from quenchlab.cli import main
from quenchlab.config import bundled_configs, validate_file

SMALL_CLT = """\
experiment: quenched-clt
kernel: geometric-half
innovation: {distribution: normal}
seeds: {root: 12345, omega: [1000, 1001]}
window: [16, 16]
replications: 1000
options: {alpha: 0.01}
"""


def _write(tmp_path, name, text):
    p = tmp_path / name
    p.write_text(text, encoding="utf-8")
    return p


def _run(*argv):
    return main([str(a) for a in argv])


@pytest.mark.parametrize("name", bundled_configs())
def test_bundled_configs_validate(name, capsys):
    assert _run("validate", "--config", name) == 0
    assert capsys.readouterr().out.strip() == "ok"


def test_identity_stencil_fixture_runs(tmp_path, capsys):
    out = tmp_path / "out"
    assert _run("run", "--config", "identity-stencil-clt", "--out", out) == 0
    report = json.loads((out / "report.json").read_text())
    assert report["passed"]
    assert report["provenance"]["root_seed"] == 12345
    assert (out / "summary.txt").read_text().startswith("experiment: quenched-clt")
    assert "verdict: PASS" in capsys.readouterr().out


def test_expected_failure_fixture_exits_zero(tmp_path):
    assert _run("run", "--config", "rademacher-small-expected-fail", "--out", tmp_path) == 0


def test_reruns_are_byte_identical_and_thread_invariant(tmp_path):
    cfg = _write(tmp_path, "clt.yaml", SMALL_CLT)
    outs = [tmp_path / "a", tmp_path / "b", tmp_path / "c"]
    assert _run("run", "--config", cfg, "--out", outs[0]) == 0
    assert _run("run", "--config", cfg, "--out", outs[1]) == 0
    assert _run("run", "--config", cfg, "--out", outs[2], "--threads", 4) == 0
    texts = [(o / "report.json").read_bytes() for o in outs]
    assert texts[0] == texts[1] == texts[2]


def test_seed_override_changes_the_root_seed(tmp_path):
    cfg = _write(tmp_path, "clt.yaml", SMALL_CLT)
    assert _run("run", "--config", cfg, "--out", tmp_path / "o", "--seed-override", 7) in (0, 1)
    report = json.loads((tmp_path / "o" / "report.json").read_text())
    assert report["provenance"]["root_seed"] == 7


def test_report_subcommand(tmp_path, capsys):
    cfg = _write(tmp_path, "clt.yaml", SMALL_CLT)
    _run("run", "--config", cfg, "--out", tmp_path / "o")
    capsys.readouterr()
    assert _run("report", "--out", tmp_path / "o") == 0
    assert "quenched-clt-panel" in capsys.readouterr().out
    assert _run("report", "--out", tmp_path / "missing") == 4


def test_malformed_kernel_file_is_a_config_error(tmp_path):
    _write(tmp_path, "bad.json", "{not json")
    cfg = _write(tmp_path, "c.yaml", SMALL_CLT.replace("geometric-half", "bad.json"))
    assert _run("run", "--config", cfg, "--out", tmp_path / "o") == 2
    assert not (tmp_path / "o" / "report.json").exists()
    assert validate_file(str(cfg))[0].startswith("kernel file malformed")


def test_diagonal_volterra_kernel_is_invalid(tmp_path, capsys):
    kernel = {"kind": "volterra", "d": 2, "entries": [[[1, 0], [1, 0], 1.0]]}
    _write(tmp_path, "diag.json", json.dumps(kernel))
    cfg = _write(tmp_path, "c.yaml", SMALL_CLT.replace("geometric-half", "diag.json"))
    assert _run("validate", "--config", cfg) == 1
    assert "a_(u,u) = 0" in capsys.readouterr().out
    assert _run("run", "--config", cfg, "--out", tmp_path / "o") == 3


def test_missing_moment_is_a_static_diagnostic(tmp_path, capsys):
    text = """\
experiment: check-conditions
kernel: geometric-half
innovation: {distribution: student_t, dof: 3}
seeds: {root: 1, omega: 1}
options:
  conditions: [{id: C_LIN, q: 4}]
"""
    cfg = _write(tmp_path, "c.yaml", text)
    assert _run("validate", "--config", cfg) == 1
    assert "moment order unavailable" in capsys.readouterr().out
    assert _run("run", "--config", cfg, "--out", tmp_path / "o") == 2


@pytest.mark.parametrize(
    "text",
    [
        "experiment: [unclosed",
        SMALL_CLT.replace("seeds: {root: 12345, omega: [1000, 1001]}\n", ""),
        SMALL_CLT + "surprise: 1\n",
        SMALL_CLT.replace("quenched-clt", "quenched-lottery"),
        SMALL_CLT.replace("replications: 1000", "replications: 10"),
    ],
    ids=["bad-yaml", "no-seeds", "unknown-key", "unknown-experiment", "too-few-replications"],
)
def test_bad_configs_exit_2(tmp_path, text):
    cfg = _write(tmp_path, "c.yaml", text)
    assert _run("run", "--config", cfg, "--out", tmp_path / "o") == 2


def test_io_failures_exit_4(tmp_path):
    assert _run("run", "--config", tmp_path / "nope.yaml") == 4
    cfg = _write(tmp_path, "c.yaml", SMALL_CLT)
    blocker = _write(tmp_path, "file", "")
    assert _run("run", "--config", cfg, "--out", blocker / "sub") == 4
    missing_kernel = _write(tmp_path, "k.yaml", SMALL_CLT.replace("geometric-half", "absent.json"))
    assert _run("run", "--config", missing_kernel, "--out", tmp_path / "o") == 4


def test_unsummable_kernel_clt_exits_5(tmp_path):
    cfg = _write(tmp_path, "c.yaml", SMALL_CLT.replace("geometric-half", "inverse-product"))
    assert _run("run", "--config", cfg, "--out", tmp_path / "o") == 5


def test_conditions_fixture_reports_divergence(tmp_path):
    assert _run("run", "--config", "divergent-kernel-conditions", "--out", tmp_path) == 0
    report = json.loads((tmp_path / "report.json").read_text())
    verdicts = {v["condition"]: v["status"] for v in report["results"][0]["statistics"]["verdicts"]}
    assert verdicts["C_L2"] == "divergent"


def test_console_entry_point(tmp_path):
    res = subprocess.run([sys.executable, "-m", "quenchlab.cli", "validate", "--config", "geometric-clt"],
                         capture_output=True, text=True, check=False)
    assert res.returncode == 0 and res.stdout.strip() == "ok"
