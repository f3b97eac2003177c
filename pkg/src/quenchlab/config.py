"""Experiment configuration files (YAML) and static validation.

A config names one experiment family, a kernel file, the innovation law,
explicit seeds, windows and replication counts.  Kernel paths are resolved
relative to the config file; a bare name such as ``geometric-half`` refers to
a kernel bundled in :mod:`quenchlab.fixtures`.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import yaml

from .criteria import ConditionId
from .errors import ConfigError, KernelFormatError, KernelInvalid, QuenchLabError
from .kernels import Kernel, VolterraKernel, loads_kernel
from .lattice import MAX_DIM, InnovationSpec

EXPERIMENTS = ("check-conditions", "quenched-clt", "functional-clt", "negligibility", "inequality-suite")
_NEEDS_KERNEL = ("check-conditions", "quenched-clt", "functional-clt", "negligibility")


class IoFailure(QuenchLabError):
    """A referenced file is missing or an output location is not writable."""


@dataclass
class ExperimentConfig:
    experiment: str
    kernel: Kernel | None
    kernel_source: str | None
    innovation: InnovationSpec
    root_seed: int
    omega_seeds: list[int]
    windows: list[tuple[int, ...]]
    replications: int
    threads: int = 1
    output: str | None = None
    options: dict = field(default_factory=dict)
    text: str = ""

    @property
    def d(self) -> int | None:
        return None if self.kernel is None else self.kernel.d

    @property
    def sha256(self) -> str:
        return hashlib.sha256(self.text.encode("utf-8")).hexdigest()


def fixture_path(name: str) -> Path:
    return Path(str(resources.files("quenchlab") / "fixtures" / name))


def bundled_configs() -> list[str]:
    root = resources.files("quenchlab") / "fixtures"
    return sorted(p.name[: -len(".yaml")] for p in root.iterdir() if p.name.endswith(".yaml"))


def resolve_config_path(name: str) -> Path:
    """A filesystem path, or the name of a bundled fixture config."""
    p = Path(name)
    if p.exists():
        return p
    bundled = fixture_path(name if name.endswith(".yaml") else name + ".yaml")
    if bundled.exists():
        return bundled
    raise IoFailure(f"config file {name!r} not found (bundled configs: {', '.join(bundled_configs())})")


def _resolve_kernel(ref: str, base: Path) -> Path:
    p = Path(ref)
    if not p.is_absolute():
        p = base / p
    if p.exists():
        return p
    bundled = fixture_path(ref if ref.endswith(".json") else ref + ".json")
    if bundled.exists():
        return bundled
    raise IoFailure(f"kernel file {ref!r} not found")


def _int_list(value, what: str) -> list[int]:
    if isinstance(value, int) and not isinstance(value, bool):
        return [value]
    if not isinstance(value, list) or not all(isinstance(v, int) and not isinstance(v, bool) for v in value):
        raise ConfigError(f"{what} must be an integer or a list of integers")
    return list(value)


def _windows(raw: dict, d: int | None) -> list[tuple[int, ...]]:
    if "windows" in raw:
        items = raw["windows"]
    elif "window" in raw:
        items = [raw["window"]]
    else:
        return []
    if not isinstance(items, list):
        raise ConfigError("windows must be a list")
    out = []
    for w in items:
        w = _int_list(w, "window")
        if d is not None:
            if len(w) == 1:
                w = w * d
            if len(w) != d:
                raise ConfigError(f"window {w} does not match dimension d={d}")
        if any(n < 1 for n in w):
            raise ConfigError(f"window sizes must be >= 1, got {w}")
        out.append(tuple(w))
    return out


def _innovation(inn: dict) -> InnovationSpec:
    try:
        return InnovationSpec(str(inn.get("distribution", "normal")), float(inn.get("variance", 1.0)), inn.get("dof"))
    except (QuenchLabError, ValueError, TypeError) as exc:
        raise ConfigError(f"invalid innovation: {exc}") from exc


def sub_innovation(section: dict, default: InnovationSpec) -> InnovationSpec:
    """Per-test innovation override (``innovation:`` inside an options section)."""
    inn = section.get("innovation")
    if inn is None:
        return default
    if not isinstance(inn, dict):
        raise ConfigError("innovation must be a mapping")
    return _innovation(inn)


def parse_config(text: str, base: Path | None = None) -> ExperimentConfig:
    """Parse and type-check a config; kernel errors surface as ``KernelInvalid``."""
    base = base or Path(".")
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"config is not valid YAML: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("config must be a mapping")
    known = {"experiment", "kernel", "innovation", "seeds", "window", "windows",
             "replications", "threads", "output", "options"}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    exp = raw.get("experiment")
    if exp not in EXPERIMENTS:
        raise ConfigError(f"experiment must be one of {EXPERIMENTS}, got {exp!r}")

    seeds = raw.get("seeds")
    if not isinstance(seeds, dict) or "root" not in seeds or "omega" not in seeds:
        raise ConfigError("explicit seeds are required: seeds: {root: <int>, omega: <int or list>}")
    root = _int_list(seeds["root"], "seeds.root")
    if len(root) != 1:
        raise ConfigError("seeds.root must be a single integer")
    omegas = _int_list(seeds["omega"], "seeds.omega")
    if not omegas:
        raise ConfigError("seeds.omega must not be empty")

    inn = raw.get("innovation", {"distribution": "normal"})
    if not isinstance(inn, dict):
        raise ConfigError("innovation must be a mapping")
    innovation = _innovation(inn)

    kernel, source = None, None
    if raw.get("kernel") is not None:
        path = _resolve_kernel(str(raw["kernel"]), base)
        try:
            text_k = path.read_text(encoding="utf-8")
        except OSError as exc:
            raise IoFailure(f"cannot read kernel file {path}: {exc}") from exc
        kernel = loads_kernel(text_k)
        source = str(raw["kernel"])
        if kernel.d > MAX_DIM:
            raise KernelInvalid(f"dimension d={kernel.d} exceeds {MAX_DIM}")
    elif exp in _NEEDS_KERNEL:
        raise ConfigError(f"experiment {exp!r} needs a kernel")

    reps = raw.get("replications", 1000)
    threads = raw.get("threads", 1)
    if not isinstance(reps, int) or reps < 1:
        raise ConfigError("replications must be a positive integer")
    if not isinstance(threads, int) or threads < 1:
        raise ConfigError("threads must be a positive integer")
    options = raw.get("options") or {}
    if not isinstance(options, dict):
        raise ConfigError("options must be a mapping")
    cfg = ExperimentConfig(
        experiment=exp,
        kernel=kernel,
        kernel_source=source,
        innovation=innovation,
        root_seed=root[0],
        omega_seeds=omegas,
        windows=_windows(raw, kernel.d if kernel is not None else None),
        replications=reps,
        threads=threads,
        output=raw.get("output"),
        options=options,
        text=text,
    )
    if exp in ("quenched-clt", "functional-clt") and not cfg.windows:
        raise ConfigError(f"experiment {exp!r} needs window or windows")
    return cfg


def load_config(name: str) -> ExperimentConfig:
    path = resolve_config_path(name)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise IoFailure(f"cannot read config {path}: {exc}") from exc
    return parse_config(text, path.parent)


def parse_conditions(items) -> list[ConditionId]:
    """Condition entries are names (``C_L2``) or mappings ``{id: C_LIN, q: 4}``."""
    out = []
    for it in items or []:
        if isinstance(it, str):
            out.append(ConditionId(it))
        elif isinstance(it, dict) and "id" in it:
            out.append(ConditionId(str(it["id"]), float(it.get("q", 2.0))))
        else:
            raise ConfigError(f"cannot parse condition entry {it!r}")
    return out


def static_diagnostics(cfg: ExperimentConfig) -> list[str]:
    """Problems detectable without sampling (moment orders, option shapes)."""
    diags: list[str] = []
    opts = cfg.options
    spec = cfg.innovation
    try:
        conds = parse_conditions(opts.get("conditions")) + parse_conditions(opts.get("require_convergent"))
    except (QuenchLabError, ValueError) as exc:
        return [f"conditions: {exc}"]
    for c in conds:
        if c.id in ("C_DELTA", "C_Hq", "C_LIN", "C_VOLT") and not spec.moment_available(c.q):
            law = spec.distribution + (f"(dof={spec.dof:g})" if spec.dof else "")
            diags.append(f"{c.label}: moment order unavailable, E|xi|^{c.q:g} is infinite for {law}")
    if cfg.experiment == "quenched-clt":
        if opts.get("centering", "none") not in ("none", "random"):
            diags.append("centering must be 'none' or 'random'")
        if cfg.replications < 1000:
            diags.append("quenched-clt needs at least 1000 replications")
    if cfg.experiment == "functional-clt":
        inc = opts.get("increment_moments")
        if inc:
            p = float(inc.get("p", 3))
            if spec.q_max <= p:
                diags.append(f"increment_moments: moment order unavailable, need E|xi|^q finite for some q > {p:g}")
    if cfg.experiment == "inequality-suite":
        ros = opts.get("rosenthal")
        if ros:
            try:
                ok = sub_innovation(ros, spec).moment_available(float(ros.get("p", 4)))
            except ConfigError as exc:
                diags.append(f"rosenthal: {exc}")
            else:
                if not ok:
                    diags.append(f"rosenthal: moment order p={ros.get('p', 4)} unavailable")
        dec = opts.get("decoupling")
        if dec and not isinstance(cfg.kernel, VolterraKernel):
            diags.append("decoupling needs a Volterra kernel")
    return diags


def validate_file(name: str) -> list[str]:
    """Full static validation; returns diagnostics (empty list means ok)."""
    try:
        cfg = load_config(name)
    except KernelFormatError as exc:
        return [f"kernel file malformed: {exc}"]
    except KernelInvalid as exc:
        return [f"kernel invalid: {exc}"]
    except (ConfigError, IoFailure) as exc:
        return [str(exc)]
    return static_diagnostics(cfg)
