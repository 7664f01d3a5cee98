"""Experiment configuration: YAML loading, validation and named presets.

Validation errors carry the line of the offending key so a user can jump
straight to it::

    run.yaml:7: attack.eps: eps must be nonnegative, got -0.1
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from . import architectures
from .attacks import CwConfig, FgsmConfig, SubstituteConfig, attack_from_dict
from .defense import ConvergenceStop, GeneratorConfig
from .nn import LayerSpec, TrainConfig

SCALES = ("desk", "full")
SCENARIOS = ("whitebox", "blackbox")


class ConfigError(ValueError):
    """A configuration problem, optionally located at a line of the source file."""

    def __init__(self, message: str, path: str | None = None, line: int | None = None,
                 source: str | None = None):
        self.message, self.path, self.line, self.source = message, path, line, source
        where = ""
        if source:
            where += f"{source}:"
        if line:
            where += f"{line}:"
        if path:
            where += f" {path}:" if where else f"{path}:"
        super().__init__(f"{where} {message}".strip())


@dataclass
class DatasetConfig:
    source: str = "mnist"
    n_train: int | None = 12000
    n_test: int | None = 2000
    subset_seed: int = 0
    root: str | None = None


@dataclass
class EvalPlan:
    scenario: str = "whitebox"
    n_eval: int | None = None
    draws: int = 1
    direct: bool = True
    cross: list = field(default_factory=list)


@dataclass
class ExperimentConfig:
    name: str = "custom"
    seed: int = 0
    repeats: int = 3
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    architecture: str | list = "mnist-desk"
    train: TrainConfig = field(default_factory=TrainConfig)
    attack: FgsmConfig | CwConfig = field(default_factory=FgsmConfig)
    blackbox_attack: FgsmConfig | CwConfig | None = None
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    substitute: SubstituteConfig = field(default_factory=SubstituteConfig)
    evaluation: EvalPlan = field(default_factory=EvalPlan)

    def layer_spec(self) -> tuple[list[LayerSpec], tuple]:
        if isinstance(self.architecture, str):
            return architectures.get(self.architecture)
        spec = [LayerSpec.from_dict(d) for d in self.architecture["layers"]]
        return spec, tuple(self.architecture["input_shape"])

    def to_dict(self) -> dict:
        gen = self.generator.to_dict()
        for k in ("attack", "train_cfg", "rng_seed"):
            gen.pop(k)
        sub = {"holdout_size": self.substitute.holdout_size,
               "augmentation_epochs": self.substitute.augmentation_epochs,
               "lam": self.substitute.lam,
               "batch_size": self.substitute.train_cfg.batch_size,
               "max_epochs": self.substitute.train_cfg.max_epochs}
        train = self.train.to_dict()
        train.pop("rng_seed")
        return {
            "name": self.name,
            "seed": self.seed,
            "repeats": self.repeats,
            "dataset": dict(self.dataset.__dict__),
            "architecture": self.architecture,
            "train": train,
            "attack": self.attack.to_dict(),
            "blackbox_attack": None if self.blackbox_attack is None else self.blackbox_attack.to_dict(),
            "generator": gen,
            "substitute": sub,
            "evaluation": {**self.evaluation.__dict__,
                           "cross": [a.to_dict() for a in self.evaluation.cross]},
        }


# ---------------------------------------------------------------------------
# presets

_MNIST = {
    "dataset": {"source": "mnist"},
    "train": {"max_epochs": 10, "batch_size": 64},
    "generator": {"aug_fraction": 0.15, "num_additional": 4},
}
_CIFAR = {
    "dataset": {"source": "cifar10"},
    "train": {"max_epochs": 50},
    "generator": {"aug_fraction": 0.25, "num_additional": 4},
}

PRESETS = {
    "mnist-fgsm-wb": {**_MNIST, "attack": {"name": "fgsm", "eps": 0.3}},
    "mnist-cw-wb": {**_MNIST, "attack": {"name": "cw", "confidence": 0.01, "max_iterations": 300}},
    "cifar-fgsm-wb": {**_CIFAR, "attack": {"name": "fgsm", "eps": 0.05}},
    "cifar-cw-wb": {**_CIFAR, "attack": {"name": "cw", "confidence": 0.01, "max_iterations": 100}},
    "mnist-fgsm-bb": {**_MNIST, "attack": {"name": "fgsm", "eps": 0.3},
                      "evaluation": {"scenario": "blackbox"}},
    "mnist-cw-bb": {**_MNIST, "attack": {"name": "cw", "confidence": 0.01, "max_iterations": 300},
                    "blackbox_attack": {"name": "cw", "confidence": 10.0, "max_iterations": 300},
                    "evaluation": {"scenario": "blackbox"}},
}

_SCALE = {
    ("mnist", "desk"): {"dataset": {"n_train": 12000, "n_test": 2000}, "architecture": "mnist-desk"},
    ("mnist", "full"): {"dataset": {"n_train": None, "n_test": None}, "architecture": "mnist-paper"},
    ("cifar10", "desk"): {"dataset": {"n_train": 10000, "n_test": 2000}, "architecture": "cifar-desk"},
    ("cifar10", "full"): {"dataset": {"n_train": None, "n_test": None}, "architecture": "cifar-paper"},
}


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict) and k not in ("attack", "blackbox_attack"):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def preset(name: str, scale: str = "desk") -> dict:
    """The raw (unvalidated) mapping for a named preset at ``scale``."""
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; known presets: {', '.join(sorted(PRESETS))}")
    if scale not in SCALES:
        raise ConfigError(f"scale must be one of {SCALES}, got {scale!r}")
    raw = copy.deepcopy(PRESETS[name])
    raw["name"] = name
    return _merge(raw, _SCALE[(raw["dataset"]["source"], scale)])


# ---------------------------------------------------------------------------
# YAML loading with line tracking


def _line_map(node, prefix=(), out=None) -> dict:
    """Map each key path to the 1-based line where it appears."""
    out = {} if out is None else out
    if isinstance(node, yaml.MappingNode):
        for key, value in node.value:
            path = prefix + (key.value,)
            out[path] = key.start_mark.line + 1
            _line_map(value, path, out)
    elif isinstance(node, yaml.SequenceNode):
        for i, item in enumerate(node.value):
            path = prefix + (i,)
            out[path] = item.start_mark.line + 1
            _line_map(item, path, out)
    return out


def _read_yaml(text: str, source: str | None):
    try:
        node = yaml.compose(text, Loader=yaml.SafeLoader)
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        raise ConfigError(f"invalid YAML: {getattr(exc, 'problem', exc)}", None,
                          mark.line + 1 if mark else None, source) from None
    if raw is None:
        return {}, {}
    if not isinstance(raw, dict):
        raise ConfigError("top level must be a mapping", None, 1, source)
    return raw, _line_map(node)


class _Builder:
    def __init__(self, raw: dict, lines: dict, source: str | None):
        self.raw, self.lines, self.source = raw, lines, source

    def fail(self, path: tuple, message: str):
        line = None
        for k in range(len(path), 0, -1):
            if path[:k] in self.lines:
                line = self.lines[path[:k]]
                break
        raise ConfigError(message, ".".join(map(str, path)) or None, line, self.source)

    def section(self, key: str, allowed) -> dict:
        value = self.raw.get(key, {})
        if value is None:
            value = {}
        if not isinstance(value, dict):
            self.fail((key,), "must be a mapping")
        for k in value:
            if k not in allowed:
                self.fail((key, k), f"unknown field; expected one of {sorted(allowed)}")
        return value

    def build(self, path: tuple, factory, values: dict):
        """Call ``factory(**values)``, pinning a validation error on the field it names."""
        try:
            return factory(**values)
        except (ValueError, TypeError) as exc:
            msg = str(exc)
            named = [k for k in values if k in msg]
            key = max(named, key=len) if named else None
            self.fail(path + ((key,) if key else ()), msg)

    def attack(self, path: tuple, value) -> FgsmConfig | CwConfig:
        if not isinstance(value, dict):
            self.fail(path, "attack must be a mapping with a 'name' field")
        name = value.get("name")
        allowed = {"fgsm": FgsmConfig, "cw": CwConfig}
        if name not in allowed:
            self.fail(path + ("name",), f"attack name must be 'fgsm' or 'cw', got {name!r}")
        fields = set(allowed[name].__dataclass_fields__) | {"name"}
        for k in value:
            if k not in fields:
                self.fail(path + (k,), f"unknown {name} field; expected one of {sorted(fields)}")
        return self.build(path, lambda **kw: attack_from_dict(kw), value)


_TOP = {"name", "seed", "repeats", "dataset", "architecture", "train", "attack",
        "blackbox_attack", "generator", "substitute", "evaluation"}


def _positive_int(b: _Builder, path: tuple, value, allow_none=False, minimum=1):
    if value is None and allow_none:
        return None
    if isinstance(value, bool) or not isinstance(value, int) or value < minimum:
        b.fail(path, f"must be an integer >= {minimum}, got {value!r}")
    return value


def from_mapping(raw: dict, lines: dict | None = None, source: str | None = None) -> ExperimentConfig:
    """Validate a raw mapping and materialize every default."""
    b = _Builder(raw, lines or {}, source)
    for k in raw:
        if k not in _TOP:
            b.fail((k,), f"unknown top-level field; expected one of {sorted(_TOP)}")

    seed = _positive_int(b, ("seed",), raw.get("seed", 0), minimum=0)
    repeats = _positive_int(b, ("repeats",), raw.get("repeats", 3))

    ds_raw = b.section("dataset", DatasetConfig.__dataclass_fields__)
    ds = b.build(("dataset",), DatasetConfig, ds_raw)
    if ds.source not in ("mnist", "cifar10", "blobs"):
        b.fail(("dataset", "source"), f"source must be mnist, cifar10 or blobs, got {ds.source!r}")
    for k in ("n_train", "n_test"):
        _positive_int(b, ("dataset", k), getattr(ds, k), allow_none=True)

    arch = raw.get("architecture", "mnist-desk")
    if isinstance(arch, str):
        if arch not in architectures.ARCHITECTURES:
            b.fail(("architecture",), f"unknown architecture {arch!r}; known: "
                   f"{sorted(architectures.ARCHITECTURES)}")
    elif isinstance(arch, dict) and set(arch) == {"layers", "input_shape"}:
        for i, layer in enumerate(arch["layers"]):
            try:
                LayerSpec.from_dict(layer)
            except (ValueError, KeyError, TypeError) as exc:
                b.fail(("architecture", "layers", i), f"bad layer: {exc}")
    else:
        b.fail(("architecture",), "must be a named architecture or a mapping with "
               "'layers' and 'input_shape'")

    tr_fields = set(TrainConfig.__dataclass_fields__) - {"rng_seed"}
    train = b.build(("train",), TrainConfig, b.section("train", tr_fields))

    attack = b.attack(("attack",), raw.get("attack", {"name": "fgsm"}))
    bb_raw = raw.get("blackbox_attack")
    bb_attack = None if bb_raw is None else b.attack(("blackbox_attack",), bb_raw)

    gen_raw = dict(b.section("generator", {"num_additional", "solution", "aug_fraction",
                                           "convergence_stop", "warm_start"}))
    conv = gen_raw.pop("convergence_stop", None) or {}
    if not isinstance(conv, dict) or set(conv) - {"enabled", "min_delta"}:
        b.fail(("generator", "convergence_stop"), "expected a mapping with 'enabled' and 'min_delta'")
    gen_raw["convergence_stop"] = ConvergenceStop(**conv)
    generator = b.build(("generator",), GeneratorConfig,
                        {**gen_raw, "attack": attack, "train_cfg": train, "rng_seed": seed})
    _positive_int(b, ("generator", "num_additional"), generator.num_additional, minimum=0)

    sub_raw = dict(b.section("substitute", {"holdout_size", "augmentation_epochs", "lam",
                                            "batch_size", "max_epochs"}))
    sub_train = b.build(("substitute",), TrainConfig,
                        {"batch_size": sub_raw.pop("batch_size", 32),
                         "max_epochs": sub_raw.pop("max_epochs", 10)})
    substitute = b.build(("substitute",), SubstituteConfig, {**sub_raw, "train_cfg": sub_train})

    ev_raw = dict(b.section("evaluation", EvalPlan.__dataclass_fields__))
    cross = ev_raw.pop("cross", None) or []
    if not isinstance(cross, list):
        b.fail(("evaluation", "cross"), "must be a list of attacks")
    ev_raw["cross"] = [b.attack(("evaluation", "cross", i), a) for i, a in enumerate(cross)]
    plan = b.build(("evaluation",), EvalPlan, ev_raw)
    if plan.scenario not in SCENARIOS:
        b.fail(("evaluation", "scenario"), f"scenario must be one of {SCENARIOS}, got {plan.scenario!r}")
    _positive_int(b, ("evaluation", "n_eval"), plan.n_eval, allow_none=True)
    _positive_int(b, ("evaluation", "draws"), plan.draws)

    name = raw.get("name", "custom")
    if not isinstance(name, str):
        b.fail(("name",), "must be a string")
    return ExperimentConfig(name, seed, repeats, ds, arch, train, attack, bb_attack,
                            generator, substitute, plan)


def load(source: str | Path, scale: str = "desk") -> ExperimentConfig:
    """Load a preset by name or a YAML file.

    A YAML file may name a ``preset`` to start from; its other keys then
    override the preset's values.
    """
    text_source = str(source)
    if text_source in PRESETS:
        return from_mapping(preset(text_source, scale))
    path = Path(source)
    if not path.exists():
        raise ConfigError(f"no such preset or config file: {text_source}")
    raw, lines = _read_yaml(path.read_text(), str(path))
    base = raw.pop("preset", None)
    if base is not None:
        try:
            raw = _merge(preset(base, scale), raw)
        except ConfigError as exc:
            raise ConfigError(exc.message, "preset", lines.get(("preset",)), str(path)) from None
    return from_mapping(raw, lines, str(path))


def dump(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=True)
