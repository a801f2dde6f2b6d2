"""Run configuration: ``key = value`` text files with dotted keys.

Example::

    seed = 0
    output_dir = runs/demo
    data.kind = synthetic
    data.cluster_separation = 3.0
    train.epochs = 30
    train.hidden = 64, 64
    detectors = MSP, EBO

Values are coerced to the type of the matching field's default, unknown keys
are rejected, and ``UDG_SEED`` in the environment replaces ``seed``.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field, fields
from enum import Enum
from pathlib import Path

from .data import CIFAR10_MEAN, CIFAR10_STD, SyntheticSpec
from .detection import ODIN_EPSILONS, ODIN_TEMPERATURES, DetectorConfig
from .trainer import TrainConfig

REQUIRED = ("seed", "output_dir", "data.kind", "train.epochs")
SWEEP_AXES = ("K", "tau", "filter_strategy", "odin")
_SYNTH_KEYS = {f.name for f in fields(SyntheticSpec)} - {"seed"}
_TRAIN_KEYS = {f.name for f in fields(TrainConfig)} - {"seed"}


class ConfigError(ValueError):
    pass


def parse_lines(lines) -> dict[str, str]:
    out = {}
    for lineno, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep or not key:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        if key in out:
            raise ConfigError(f"line {lineno}: duplicate key {key}")
        out[key] = value.strip()
    return out


def _as_bool(key, s):
    low = s.lower()
    if low in ("true", "yes", "1", "on"):
        return True
    if low in ("false", "no", "0", "off"):
        return False
    raise ConfigError(f"{key}: expected a boolean, got {s!r}")


def _split(s):
    return [p.strip() for p in s.split(",") if p.strip()]


def coerce(key: str, raw: str, like):
    """Convert ``raw`` to the type of ``like``."""
    try:
        if isinstance(like, bool):
            return _as_bool(key, raw)
        if isinstance(like, Enum):
            return type(like)(raw.upper())
        if isinstance(like, int):
            return int(raw)
        if isinstance(like, float):
            return float(raw)
        if isinstance(like, (tuple, list)):
            inner = like[0] if like else 0
            return tuple(coerce(key, p, inner) for p in _split(raw))
        return raw
    except ConfigError:
        raise
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {type(like).__name__}") from None


def format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, Enum):
        return v.value
    if isinstance(v, (tuple, list)):
        return ", ".join(format_value(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


@dataclass
class DataConfig:
    kind: str = "synthetic"
    synthetic: SyntheticSpec = field(default_factory=SyntheticSpec)
    # record files (kind = records)
    format: str = "float"
    dim: int = 0
    labeled: Path | None = None
    unlabeled: Path | None = None
    unlabeled_truth: Path | None = None
    tests: dict = field(default_factory=dict)        # name -> path
    test_truth: dict = field(default_factory=dict)   # name -> ground-truth CSV
    test_default_id: dict = field(default_factory=dict)
    manifest: Path | None = None
    mean: tuple = CIFAR10_MEAN
    std: tuple = CIFAR10_STD


@dataclass
class RunConfig:
    seed: int
    output_dir: Path
    data: DataConfig
    train: TrainConfig
    detectors: list[DetectorConfig]
    odin_search: bool = False
    val_fraction: float = 0.2
    oracle: bool = False
    write_scores: bool = False
    checkpoint_every: int = 0
    sweep: dict = field(default_factory=dict)
    source: dict = field(default_factory=dict)

    def resolved(self) -> dict[str, str]:
        """Flat key -> text mapping that reloads to an identical config."""
        out = {"seed": str(self.seed), "output_dir": str(self.output_dir),
               "data.kind": self.data.kind}
        if self.data.kind == "synthetic":
            for f in fields(SyntheticSpec):
                if f.name != "seed":
                    out[f"data.{f.name}"] = format_value(getattr(self.data.synthetic, f.name))
        else:
            d = self.data
            out["data.format"] = d.format
            out["data.dim"] = str(d.dim)
            for k in ("labeled", "unlabeled", "unlabeled_truth", "manifest"):
                if getattr(d, k) is not None:
                    out[f"data.{k}"] = str(getattr(d, k))
            for name, p in d.tests.items():
                out[f"data.test.{name}"] = str(p)
            for name, p in d.test_truth.items():
                out[f"data.test_truth.{name}"] = str(p)
            for name, v in d.test_default_id.items():
                out[f"data.test_default_id.{name}"] = format_value(v)
            out["data.mean"] = format_value(d.mean)
            out["data.std"] = format_value(d.std)
        for f in fields(TrainConfig):
            if f.name != "seed":
                out[f"train.{f.name}"] = format_value(getattr(self.train, f.name))
        out["train.checkpoint_every"] = str(self.checkpoint_every)
        out["detectors"] = ", ".join(d.name for d in self.detectors)
        d0 = self.detectors[0] if self.detectors else DetectorConfig()
        out["detector.temperature"] = repr(d0.temperature)
        out["detector.odin_epsilon"] = repr(d0.odin_epsilon)
        out["detector.threshold"] = repr(d0.threshold)
        out["eval.odin_search"] = format_value(self.odin_search)
        out["eval.val_fraction"] = repr(self.val_fraction)
        out["eval.oracle"] = format_value(self.oracle)
        out["eval.write_scores"] = format_value(self.write_scores)
        for k, v in self.sweep.items():
            out[f"sweep.{k}"] = format_value(v)
        return out

    def dumps(self) -> str:
        return "".join(f"{k} = {v}\n" for k, v in self.resolved().items())


def _path(key, raw, base: Path, must_exist=True) -> Path:
    p = Path(raw)
    if not p.is_absolute():
        p = base / p
    if must_exist and not p.exists():
        raise ConfigError(f"{key}: path does not exist: {p}")
    return p


def build(raw: dict[str, str], base: Path = Path("."), env=None) -> RunConfig:
    env = os.environ if env is None else env
    raw = dict(raw)
    for key in REQUIRED:
        if key not in raw:
            raise ConfigError(f"missing required field: {key}")
    if env.get("UDG_SEED"):
        raw["seed"] = env["UDG_SEED"]
    seed = coerce("seed", raw.pop("seed"), 0)
    out_dir = _path("output_dir", raw.pop("output_dir"), base, must_exist=False)

    data = DataConfig(kind=raw.pop("data.kind"))
    if data.kind not in ("synthetic", "records"):
        raise ConfigError("data.kind must be 'synthetic' or 'records'")
    synth, train_kw = {}, {}
    det_kw, det_names = {}, ["MSP"]
    run_kw, sweep = {}, {}
    defaults_s, defaults_t = SyntheticSpec(), TrainConfig()
    for key, value in raw.items():
        head, _, rest = key.partition(".")
        if head == "data" and rest in _SYNTH_KEYS and data.kind == "synthetic":
            synth[rest] = coerce(key, value, getattr(defaults_s, rest))
        elif head == "data" and data.kind == "records":
            sub, _, name = rest.partition(".")
            if sub == "test" and name:
                data.tests[name] = _path(key, value, base)
            elif sub == "test_truth" and name:
                data.test_truth[name] = _path(key, value, base)
            elif sub == "test_default_id" and name:
                data.test_default_id[name] = _as_bool(key, value)
            elif rest in ("labeled", "unlabeled", "unlabeled_truth", "manifest"):
                setattr(data, rest, _path(key, value, base))
            elif rest == "format":
                if value not in ("float", "cifar"):
                    raise ConfigError("data.format must be 'float' or 'cifar'")
                data.format = value
            elif rest == "dim":
                data.dim = coerce(key, value, 0)
            elif rest in ("mean", "std"):
                setattr(data, rest, coerce(key, value, (0.0,)))
            else:
                raise ConfigError(f"unknown key: {key}")
        elif head == "train" and rest in _TRAIN_KEYS:
            like = getattr(defaults_t, rest)
            train_kw[rest] = coerce(key, value, like if rest != "hidden" else (0,))
        elif key == "train.checkpoint_every":
            run_kw["checkpoint_every"] = coerce(key, value, 0)
        elif key == "detectors":
            det_names = [s.upper() for s in _split(value)]
        elif head == "detector" and rest in ("temperature", "odin_epsilon", "threshold"):
            det_kw[rest] = coerce(key, value, 0.0)
        elif key == "eval.odin_search":
            run_kw["odin_search"] = _as_bool(key, value)
        elif key == "eval.val_fraction":
            run_kw["val_fraction"] = coerce(key, value, 0.0)
        elif key == "eval.oracle":
            run_kw["oracle"] = _as_bool(key, value)
        elif key == "eval.write_scores":
            run_kw["write_scores"] = _as_bool(key, value)
        elif head == "sweep" and rest in SWEEP_AXES + ("odin_epsilon",):
            sweep[rest] = _split(value)
        else:
            raise ConfigError(f"unknown key: {key}")

    try:
        if data.kind == "synthetic":
            data.synthetic = SyntheticSpec(**synth, seed=seed)
            data.synthetic.validate()
        else:
            for k in ("labeled", "unlabeled"):
                if getattr(data, k) is None:
                    raise ConfigError(f"missing required field: data.{k}")
            if not data.tests:
                raise ConfigError("missing required field: data.test.<name>")
            if data.format == "float" and data.dim < 1:
                raise ConfigError("missing required field: data.dim")
        train = TrainConfig(**train_kw, seed=seed)
        detectors = [DetectorConfig(n, **det_kw) for n in det_names]
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    if not 0.0 < run_kw.get("val_fraction", 0.2) < 1.0:
        raise ConfigError("eval.val_fraction must be in (0, 1)")
    return RunConfig(seed, out_dir, data, train, detectors, sweep=sweep, source=dict(raw), **run_kw)


def load_config(path, env=None) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return build(parse_lines(text.splitlines()), path.parent, env)


def sweep_values(cfg: RunConfig, axis: str) -> list:
    if axis not in SWEEP_AXES:
        raise ConfigError(f"unknown sweep axis {axis!r}; choose from {', '.join(SWEEP_AXES)}")
    if axis == "odin":
        temps = [float(v) for v in cfg.sweep.get("odin", ODIN_TEMPERATURES)]
        eps = [float(v) for v in cfg.sweep.get("odin_epsilon", ODIN_EPSILONS)]
        return [(t, e) for t in temps for e in eps]
    if axis not in cfg.sweep:
        raise ConfigError(f"missing required field: sweep.{axis}")
    try:
        if axis == "K":
            return [int(v) for v in cfg.sweep[axis]]
        if axis == "tau":
            return [float(v) for v in cfg.sweep[axis]]
    except ValueError:
        raise ConfigError(f"sweep.{axis}: values must be numeric") from None
    return [v.upper() for v in cfg.sweep[axis]]
