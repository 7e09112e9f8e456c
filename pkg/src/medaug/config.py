"""Run configuration: one INI-style file per run, with dotted ``--set`` overrides.

A file has the sections ``run``, ``cohort``, ``criteria``, ``augment``,
``engine``, ``negatives``, ``eval`` and ``benchmark``. Benchmark arms live in
``[arm.NAME]`` sections whose keys are dotted overrides restricted to the
``criteria``, ``negatives`` and ``augment`` sections, e.g.::

    [arm.same-study]
    criteria.study_rule = same

Every key is optional; missing keys take the dataclass defaults below.
``none`` spells an absent optional value. An ``[include]`` section with
``files = a.cfg, b.cfg`` loads those files first (paths relative to the
including file); keys in the including file win.
"""

from __future__ import annotations

import configparser
import copy
import hashlib
import io
import json
import types
import typing
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from medaug import augment, cohort, engine, evaluation, pairs, training
from medaug.errors import ConfigError

ARM_SECTIONS = ("criteria", "negatives", "augment")


@dataclass
class RunSection:
    seed: int = 0
    out: str = "runs/default"
    test_fraction: float = 0.25
    task: int = 0  # label dimension for every downstream use (probes and the oracle included)


@dataclass
class CohortSection:
    source: str = "synthetic"  # synthetic | csv
    csv_path: str | None = None
    blob_path: str | None = None
    uncertain_policy: str = "zeros"
    seed: int | None = None  # None follows run.seed
    n_patients: int = 200
    studies_per_patient: str = "1:0.15,2:0.35,3:0.3,4:0.2"
    images_per_study: str = "1:0.2,2:0.5,3:0.3"
    p_frontal: float = 0.7
    p_label_flip_between_studies: float = 0.3
    n_tasks: int = 3
    prevalence: float = 0.4
    image_size: tuple[int, int] = (16, 16)
    noise_std: float = 0.05
    signal_strength: float = 0.4
    signal_width: float = 0.12
    severity_spread: float = 0.5
    nuisance_strength: float = 0.05
    acquisition_strength: float = 0.3


@dataclass
class CriteriaSection:
    positives: str = "metadata"  # metadata | instance (self pairs only)
    study_rule: str = "same"
    laterality_rule: str = "all"
    same_label_oracle: bool = False
    distinct_image_only: bool = False
    control_study_rule: str | None = None  # set both control rules to enable size control
    control_laterality_rule: str | None = None
    control_distinct_image_only: bool = False
    empty_policy: str = "fallback_self"


@dataclass
class AugmentSection:
    horizontal_flip_prob: float = 0.5
    rotation_range_degrees: tuple[float, float] = (-10.0, 10.0)
    crop_scale_range: tuple[float, float] | None = None
    output_size: tuple[int, int] | None = None


@dataclass
class EngineSection:
    epochs: int = 20
    batch_size: int = 16
    lr: float = 1e-3
    sgd_momentum: float = 0.0
    weight_decay: float = 0.0
    temperature: float = 0.2
    momentum: float = 0.999
    queue_size: int = 1024
    warmup_fraction: float = 0.5
    widths: tuple[int, ...] = (256, 128)
    head_width: int = 128
    embed_dim: int = 64
    checkpoint_every: int = 1


@dataclass
class NegativesSection:
    kind: str = "default"
    target: float = 0.1
    m: int | None = None
    match_proportion: bool = False


@dataclass
class EvalSection:
    modes: tuple[str, ...] = ("linear", "end_to_end")
    fraction: float = 0.01
    n_repeats: int = 5
    unit: str = "by_image"
    probe_lr: float = 1e-2
    probe_epochs: int = 500
    probe_batch_size: int | None = None
    probe_weight_decay: float = 0.0
    standardize: bool = True
    e2e_lr: float = 1e-2
    e2e_epochs: int = 500
    e2e_batch_size: int | None = None
    selection: str = "knn"  # knn | last
    knn_k: int = 20
    knn_fraction: float = 0.2


@dataclass
class BenchmarkSection:
    arms: tuple[str, ...] = ()
    seeds: tuple[int, ...] = (0,)


SECTIONS = {
    "run": RunSection,
    "cohort": CohortSection,
    "criteria": CriteriaSection,
    "augment": AugmentSection,
    "engine": EngineSection,
    "negatives": NegativesSection,
    "eval": EvalSection,
    "benchmark": BenchmarkSection,
}


@dataclass
class RunConfig:
    run: RunSection = field(default_factory=RunSection)
    cohort: CohortSection = field(default_factory=CohortSection)
    criteria: CriteriaSection = field(default_factory=CriteriaSection)
    augment: AugmentSection = field(default_factory=AugmentSection)
    engine: EngineSection = field(default_factory=EngineSection)
    negatives: NegativesSection = field(default_factory=NegativesSection)
    eval: EvalSection = field(default_factory=EvalSection)
    benchmark: BenchmarkSection = field(default_factory=BenchmarkSection)
    arms: dict[str, dict[str, str]] = field(default_factory=dict)

    # ------------------------------------------------------------------ identity

    def to_dict(self) -> dict:
        d = {name: asdict(getattr(self, name)) for name in SECTIONS}
        d["arms"] = {k: dict(sorted(v.items())) for k, v in sorted(self.arms.items())}
        return d

    def canonical_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()

    # ------------------------------------------------------------------ builders

    @property
    def cohort_seed(self) -> int:
        return self.run.seed if self.cohort.seed is None else self.cohort.seed

    def cohort_config(self) -> cohort.CohortConfig:
        c = self.cohort
        kw = {f.name: getattr(c, f.name) for f in fields(cohort.CohortConfig) if f.name != "seed"}
        return cohort.CohortConfig(**kw, seed=self.cohort_seed)

    def pair_criteria(self) -> pairs.PairCriteria | None:
        """``None`` means instance discrimination."""
        c = self.criteria
        if c.positives == "instance":
            return None
        ref = None
        if c.control_study_rule is not None or c.control_laterality_rule is not None:
            ref = pairs.PairCriteria(
                c.control_study_rule or "all",
                c.control_laterality_rule or "all",
                distinct_image_only=c.control_distinct_image_only,
                label_task=self.run.task,
            )
        return pairs.PairCriteria(
            c.study_rule,
            c.laterality_rule,
            same_label_oracle=c.same_label_oracle,
            distinct_image_only=c.distinct_image_only,
            size_control_reference=ref,
            label_task=self.run.task,
        )

    def criteria_name(self) -> str:
        crit = self.pair_criteria()
        return "instance" if crit is None else crit.name

    def augmentation(self) -> augment.AugmentationSpec:
        a = self.augment
        return augment.AugmentationSpec(
            a.horizontal_flip_prob, tuple(a.rotation_range_degrees), a.crop_scale_range, a.output_size
        )

    def strategy(self) -> engine.NegativeStrategy:
        n = self.negatives
        return engine.NegativeStrategy(n.kind, n.target, n.m, n.match_proportion)

    def pretrain_settings(self) -> training.PretrainSettings:
        return training.PretrainSettings(**asdict(self.engine))

    def split_spec(self) -> evaluation.SplitSpec:
        e = self.eval
        return evaluation.SplitSpec(e.fraction, e.n_repeats, self.run.seed, e.unit)

    def probe_hyper(self, mode: str) -> evaluation.ProbeHyper:
        e = self.eval
        if evaluation.EvalMode(mode) is evaluation.EvalMode.LINEAR_PROBE:
            return evaluation.ProbeHyper(
                e.probe_lr, e.probe_epochs, e.probe_batch_size, e.probe_weight_decay, e.standardize, self.run.seed
            )
        return evaluation.ProbeHyper(e.e2e_lr, e.e2e_epochs, e.e2e_batch_size, 0.0, False, self.run.seed)

    # ------------------------------------------------------------------ validation

    def validate(self) -> "RunConfig":
        """Build every derived object once so that bad values surface as ConfigError."""
        checks = {
            "cohort": lambda: self.cohort_config().validate() if self.cohort.source == "synthetic" else None,
            "criteria": self.pair_criteria,
            "augment": self.augmentation,
            "negatives": self.strategy,
            "eval": lambda: [self.split_spec(), *(evaluation.EvalMode(m) for m in self.eval.modes)],
        }
        if self.cohort.source not in ("synthetic", "csv"):
            raise ConfigError(f"cohort.source: unknown source {self.cohort.source!r}")
        if self.cohort.source == "csv" and not self.cohort.csv_path:
            raise ConfigError("cohort.csv_path: required when cohort.source = csv")
        if self.criteria.positives not in ("metadata", "instance"):
            raise ConfigError(f"criteria.positives: unknown value {self.criteria.positives!r}")
        try:
            pairs.EmptyPolicy(self.criteria.empty_policy)
        except ValueError:
            raise ConfigError(f"criteria.empty_policy: unknown value {self.criteria.empty_policy!r}") from None
        if self.eval.selection not in ("knn", "last"):
            raise ConfigError(f"eval.selection: unknown value {self.eval.selection!r}")
        if not 0.0 < self.run.test_fraction < 1.0:
            raise ConfigError("run.test_fraction: must be in (0, 1)")
        e = self.engine
        for name in ("epochs", "batch_size", "queue_size", "embed_dim", "head_width", "checkpoint_every"):
            if getattr(e, name) < 1:
                raise ConfigError(f"engine.{name}: must be >= 1")
        if not 0.0 <= e.momentum <= 1.0:
            raise ConfigError("engine.momentum: must be in [0, 1]")
        if e.temperature <= 0:
            raise ConfigError("engine.temperature: must be > 0")
        for section, check in checks.items():
            try:
                check()
            except ConfigError:
                raise
            except (ValueError, TypeError) as exc:
                raise ConfigError(f"{section}: {exc}") from None
        for arm in self.arms:
            self.arm(arm)
        for arm in self.benchmark.arms:
            if arm not in self.arms:
                raise ConfigError(f"benchmark.arms: no section [arm.{arm}]")
        return self

    # ------------------------------------------------------------------ arms

    def arm(self, name: str) -> "RunConfig":
        """This config with ``[arm.NAME]`` overrides applied and the arm table dropped."""
        if name not in self.arms:
            raise ConfigError(f"benchmark.arms: no section [arm.{name}]")
        out = copy.deepcopy(self)
        out.arms = {}
        out.benchmark = BenchmarkSection()
        for key, value in self.arms[name].items():
            section = key.split(".", 1)[0]
            if section not in ARM_SECTIONS:
                raise ConfigError(f"arm.{name}: key {key!r} outside {', '.join(ARM_SECTIONS)}")
            out = with_override(out, key, value)
        return out


# --------------------------------------------------------------------------- text <-> values


def _hints(cls) -> dict:
    return typing.get_type_hints(cls)


def _strip_optional(tp):
    args = typing.get_args(tp)
    if typing.get_origin(tp) in (typing.Union, types.UnionType) and type(None) in args:
        rest = [a for a in args if a is not type(None)]
        return rest[0], True
    return tp, False


def parse_value(text: str, tp, where: str):
    """Convert config text to the annotated type ``tp``."""
    tp, optional = _strip_optional(tp)
    raw = text.strip()
    if optional and raw.lower() in ("none", ""):
        return None
    try:
        if tp is bool:
            low = raw.lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        if tp is int:
            return int(raw)
        if tp is float:
            return float(raw)
        if tp is str:
            return raw
        if typing.get_origin(tp) is tuple:
            args = typing.get_args(tp)
            items = [s.strip() for s in raw.replace("(", "").replace(")", "").split(",") if s.strip()]
            if len(args) == 2 and args[1] is Ellipsis:
                return tuple(parse_value(s, args[0], where) for s in items)
            if len(items) != len(args):
                raise ValueError(f"expected {len(args)} comma-separated values")
            return tuple(parse_value(s, a, where) for s, a in zip(items, args))
    except ValueError as exc:
        raise ConfigError(f"{where}: {exc}") from None
    raise ConfigError(f"{where}: unsupported field type {tp}")


def format_value(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(format_value(v) for v in value)
    return str(value)


def with_override(cfg: RunConfig, key: str, value: str) -> RunConfig:
    """Return ``cfg`` with the dotted ``section.field`` set from text."""
    if "." not in key:
        raise ConfigError(f"{key}: overrides take the form section.field=value")
    section, name = key.split(".", 1)
    if section.startswith("arm") and section not in SECTIONS:
        # arm.NAME.section.field
        arm_name, rest = name.split(".", 1) if "." in name else (name, "")
        if not rest:
            raise ConfigError(f"{key}: arm overrides take the form arm.NAME.section.field")
        cfg = copy.deepcopy(cfg)
        cfg.arms.setdefault(arm_name, {})[rest] = value
        return cfg
    if section not in SECTIONS:
        raise ConfigError(f"{key}: unknown section {section!r}")
    cls = SECTIONS[section]
    hints = _hints(cls)
    if name not in hints:
        raise ConfigError(f"{section}.{name}: unknown field")
    parsed = parse_value(value, hints[name], f"{section}.{name}")
    return replace(cfg, **{section: replace(getattr(cfg, section), **{name: parsed})})


def apply_overrides(cfg: RunConfig, overrides) -> RunConfig:
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"--set {item!r}: expected key=value")
        key, value = item.split("=", 1)
        cfg = with_override(cfg, key.strip(), value)
    return cfg


# --------------------------------------------------------------------------- files


def loads(text: str, base_dir=None, _seen=()) -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=(";",))
    parser.optionxform = str  # keep key case
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"config syntax: {exc}") from None
    cfg = RunConfig()
    if parser.has_section("include"):
        for name in parser["include"].get("files", "").split(","):
            if name.strip():
                cfg = _merge(cfg, _load(Path(base_dir or ".") / name.strip(), _seen))
    for section in parser.sections():
        if section == "include":
            continue
        if section.startswith("arm."):
            cfg.arms[section[4:]] = dict(parser[section])
            continue
        if section not in SECTIONS:
            raise ConfigError(f"unknown section [{section}]")
        for key, value in parser[section].items():
            cfg = with_override(cfg, f"{section}.{key}", value)
    return cfg


def _merge(base: RunConfig, top: RunConfig) -> RunConfig:
    """``top`` wins wherever it differs from the defaults."""
    default = RunConfig()
    out = copy.deepcopy(base)
    for name in SECTIONS:
        changed = {
            f.name: getattr(getattr(top, name), f.name)
            for f in fields(SECTIONS[name])
            if getattr(getattr(top, name), f.name) != getattr(getattr(default, name), f.name)
        }
        setattr(out, name, replace(getattr(out, name), **changed))
    for arm, items in top.arms.items():
        out.arms.setdefault(arm, {}).update(items)
    return out


def _load(path: Path, seen) -> RunConfig:
    path = Path(path).resolve()
    if path in seen:
        raise ConfigError(f"include cycle through {path}")
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return loads(text, path.parent, (*seen, path))


def load(path) -> RunConfig:
    return _load(Path(path), ())


def dumps(cfg: RunConfig) -> str:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    for name in SECTIONS:
        parser[name] = {k: format_value(v) for k, v in asdict(getattr(cfg, name)).items()}
    for arm, items in sorted(cfg.arms.items()):
        parser[f"arm.{arm}"] = dict(sorted(items.items()))
    buf = io.StringIO()
    buf.write(f"# config hash {cfg.hash()}\n")
    parser.write(buf)
    return buf.getvalue()


def save(cfg: RunConfig, path) -> None:
    Path(path).write_text(dumps(cfg))
