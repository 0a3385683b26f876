"""Run configuration: flat ``key = value`` text with dotted namespaces.

Five namespaces cover a run: net.* (architecture), quant.* (quantizer),
exp.* (expansion), decay.* (the f schedule), train.* (optimization and
data). Every key has a default, unknown keys are errors, and command-line
overrides apply last-wins on top of the file. ``render_config`` writes the
merged result back out so a run's exact settings survive as an artifact.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

from .blocks import ExpBlockConfig
from .data import Dataset, load_cifar10_binary, load_idx, synth_dataset
from .decay import DecaySchedule, validate_overrides
from .netspec import ConvDef, NetworkSpec, PoolDef
from .quantizers import QuantConfig


class ConfigError(ValueError):
    """Malformed, unknown, or inconsistent configuration."""


# declaration order is the canonical rendering order
DEFAULTS: dict[str, str] = {
    "net.input": "1x16x16",
    "net.classes": "4",
    "net.layers": "conv 8 3 1 1, pool 2, conv 8 3 1 1, conv 8 3 1 1, pool 2, conv 16 3 1 1",
    "net.edge_unquantized": "true",
    "quant.family": "dorefa",
    "quant.weight_bits": "1",
    "quant.act_bits": "1",
    "quant.bypass": "false",
    "exp.layers": "none",
    "exp.scheme": "2",
    "exp.combine": "add",
    "exp.fp_width_factor": "1",
    "decay.family": "cosine",
    "decay.beta": "20",
    "decay.delta": "",
    "decay.epsilon": "",
    "decay.unit": "epoch",
    "decay.overrides": "",
    "train.epochs": "40",
    "train.batch_size": "50",
    "train.seed": "1",
    "train.optimizer": "adam",
    "train.lr": "0.001",
    "train.momentum": "0.9",
    "train.lr_milestones": "",
    "train.lr_divisors": "",
    "train.fp_lr_scale": "1",
    "train.weight_decay": "0",
    "train.augment": "false",
    "train.dataset": "synth",
    "train.synth_train": "1024",
    "train.synth_test": "256",
    "train.idx_train_images": "",
    "train.idx_train_labels": "",
    "train.idx_test_images": "",
    "train.idx_test_labels": "",
    "train.cifar_train": "",
    "train.cifar_test": "",
}


def parse_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    """Parse ``key = value`` lines; '#' starts a comment, blanks are skipped."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in DEFAULTS:
            raise ConfigError(f"{source}:{lineno}: unknown config key {key!r}")
        if key in out:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def apply_overrides(base: dict[str, str], overrides: list[str]) -> dict[str, str]:
    """Merge ``key=value`` override strings onto ``base``, last one winning."""
    merged = dict(base)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, value = (part.strip() for part in item.split("=", 1))
        if key not in DEFAULTS:
            raise ConfigError(f"unknown config key {key!r} in override")
        merged[key] = value
    return merged


def merge_config(file_values: dict[str, str], overrides: list[str] | None = None
                 ) -> dict[str, str]:
    """Defaults, then file values, then overrides."""
    cfg = dict(DEFAULTS)
    cfg.update(file_values)
    return apply_overrides(cfg, overrides or [])


def render_config(cfg: dict[str, str]) -> str:
    lines = [f"{key} = {cfg[key]}" for key in DEFAULTS]
    return "\n".join(lines) + "\n"


def load_config(path, overrides: list[str] | None = None) -> dict[str, str]:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    return merge_config(parse_config_text(path.read_text(), str(path)), overrides)


# ----------------------------------------------------------- typed parsing


def _want_int(cfg, key):
    try:
        return int(cfg[key])
    except ValueError:
        raise ConfigError(f"{key} must be an integer, got {cfg[key]!r}") from None


def _want_float(cfg, key):
    try:
        return float(cfg[key])
    except ValueError:
        raise ConfigError(f"{key} must be a number, got {cfg[key]!r}") from None


def _want_bool(cfg, key):
    value = cfg[key].lower()
    if value not in ("true", "false"):
        raise ConfigError(f"{key} must be true or false, got {cfg[key]!r}")
    return value == "true"


def _want_choice(cfg, key, choices):
    if cfg[key] not in choices:
        raise ConfigError(f"{key} must be one of {', '.join(choices)}, got {cfg[key]!r}")
    return cfg[key]


def _parse_shape(cfg, key):
    parts = cfg[key].split("x")
    if len(parts) != 3:
        raise ConfigError(f"{key} must look like CxHxW, got {cfg[key]!r}")
    try:
        c, h, w = (int(p) for p in parts)
    except ValueError:
        raise ConfigError(f"{key} must look like CxHxW, got {cfg[key]!r}") from None
    return (c, h, w)


def _parse_layers(cfg) -> tuple[ConvDef | PoolDef, ...]:
    out: list[ConvDef | PoolDef] = []
    for chunk in cfg["net.layers"].split(","):
        words = chunk.split()
        if not words:
            raise ConfigError("net.layers has an empty entry")
        kind, args = words[0], words[1:]
        try:
            nums = [int(a) for a in args]
        except ValueError:
            raise ConfigError(f"net.layers entry {chunk.strip()!r} has a non-integer field") from None
        if kind == "conv":
            if not 2 <= len(nums) <= 4:
                raise ConfigError(
                    f"conv entry needs 'conv OUT KERNEL [STRIDE [PADDING]]', got {chunk.strip()!r}"
                )
            out_ch, kernel = nums[0], nums[1]
            stride = nums[2] if len(nums) > 2 else 1
            padding = nums[3] if len(nums) > 3 else 0
            out.append(ConvDef(out_ch, kernel, stride, padding))
        elif kind == "pool":
            if len(nums) != 1:
                raise ConfigError(f"pool entry needs 'pool SIZE', got {chunk.strip()!r}")
            out.append(PoolDef(nums[0]))
        else:
            raise ConfigError(f"unknown layer kind {kind!r} in net.layers")
    return tuple(out)


def _parse_expansion(cfg) -> frozenset[int]:
    value = cfg["exp.layers"].strip()
    if value == "none" or value == "":
        return frozenset()
    if value == "all":
        return frozenset()  # resolved against quantized positions by the caller
    if "," in value:
        try:
            positions = [int(p) for p in value.split(",")]
        except ValueError:
            raise ConfigError(f"exp.layers list {value!r} has a non-integer entry") from None
    elif value.isdigit():
        # compact form: one digit per conv position, e.g. 56 expands convs 5 and 6
        positions = [int(ch) for ch in value]
    else:
        raise ConfigError(
            f"exp.layers must be none, all, a digit string, or a comma list, got {value!r}"
        )
    if len(set(positions)) != len(positions):
        raise ConfigError(f"exp.layers names a conv position twice: {value!r}")
    return frozenset(positions)


def _parse_int_list(cfg, key) -> tuple[int, ...]:
    value = cfg[key].strip()
    if not value:
        return ()
    try:
        return tuple(int(p) for p in value.split(","))
    except ValueError:
        raise ConfigError(f"{key} must be a comma list of integers, got {value!r}") from None


def _parse_float_list(cfg, key) -> tuple[float, ...]:
    value = cfg[key].strip()
    if not value:
        return ()
    try:
        return tuple(float(p) for p in value.split(","))
    except ValueError:
        raise ConfigError(f"{key} must be a comma list of numbers, got {value!r}") from None


def _parse_decay_overrides(cfg) -> dict[str, float]:
    value = cfg["decay.overrides"].strip()
    if not value:
        return {}
    out: dict[str, float] = {}
    for item in value.split(","):
        if ":" not in item:
            raise ConfigError(
                f"decay.overrides entries look like conv5:30, got {item.strip()!r}"
            )
        layer_id, beta = (p.strip() for p in item.split(":", 1))
        try:
            out[layer_id] = float(beta)
        except ValueError:
            raise ConfigError(f"decay override for {layer_id!r} is not a number") from None
    return out


@dataclass(frozen=True)
class LRSchedule:
    """Piecewise-constant learning rate: divided at each passed milestone."""

    initial: float
    milestones: tuple[int, ...] = ()
    divisors: tuple[float, ...] = ()

    def __post_init__(self):
        if self.initial <= 0:
            raise ConfigError(f"learning rate must be positive, got {self.initial}")
        if len(self.milestones) != len(self.divisors):
            raise ConfigError(
                f"{len(self.milestones)} lr milestones but {len(self.divisors)} divisors"
            )
        if any(m2 <= m1 for m1, m2 in zip(self.milestones, self.milestones[1:])):
            raise ConfigError(f"lr milestones must be strictly increasing: {self.milestones}")
        if any(m < 1 for m in self.milestones):
            raise ConfigError(f"lr milestones must be >= 1, got {self.milestones}")
        if any(d <= 1 for d in self.divisors):
            raise ConfigError(f"lr divisors must be > 1, got {self.divisors}")


@dataclass(frozen=True)
class DatasetRef:
    """Which dataset a run trains on, resolvable to (train, test) splits."""

    kind: str
    seed: int = 0
    synth_train: int = 1024
    synth_test: int = 256
    paths: tuple[tuple[str, str], ...] = ()  # (role, path) pairs for file-backed kinds


@dataclass(frozen=True)
class TrainConfig:
    epochs: int
    batch_size: int
    seed: int
    optimizer: str
    lr: LRSchedule
    momentum: float = 0.9
    fp_lr_scale: float = 1.0
    weight_decay: float = 0.0
    augment: bool = False
    decay: DecaySchedule = field(default_factory=DecaySchedule)
    dataset: DatasetRef = field(default_factory=lambda: DatasetRef("synth"))

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError(f"train.epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"train.batch_size must be >= 1, got {self.batch_size}")
        if self.optimizer not in ("adam", "sgd-momentum"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.fp_lr_scale <= 0:
            raise ConfigError(f"train.fp_lr_scale must be positive, got {self.fp_lr_scale}")
        if self.weight_decay < 0:
            raise ConfigError(f"train.weight_decay must be >= 0, got {self.weight_decay}")


@dataclass(frozen=True)
class RunSetup:
    """Everything a run needs, typed and validated, plus the merged raw text."""

    spec: NetworkSpec
    train: TrainConfig
    raw: dict[str, str]

    def config_text(self) -> str:
        return render_config(self.raw)


def build_run(cfg: dict[str, str]) -> RunSetup:
    """Validate a merged key/value mapping into a RunSetup."""
    missing = sorted(set(DEFAULTS) - set(cfg))
    stray = sorted(set(cfg) - set(DEFAULTS))
    if missing or stray:
        raise ConfigError(f"config mapping incomplete: missing {missing}, unknown {stray}")

    try:
        quant = QuantConfig(
            family=_want_choice(cfg, "quant.family", ("dorefa", "xnor", "syq")),
            weight_bits=_want_int(cfg, "quant.weight_bits"),
            act_bits=_want_int(cfg, "quant.act_bits"),
            bypass=_want_bool(cfg, "quant.bypass"),
        )
        scheme = _want_int(cfg, "exp.scheme")
        try:
            factor = Fraction(cfg["exp.fp_width_factor"])
        except (ValueError, ZeroDivisionError):
            raise ConfigError(
                f"exp.fp_width_factor must be a fraction like 1 or 1/2, got "
                f"{cfg['exp.fp_width_factor']!r}"
            ) from None
        block = ExpBlockConfig(
            scheme=scheme,
            combine=_want_choice(cfg, "exp.combine", ("add", "sub", "concat")),
            fp_width_factor=factor,
        )

        layers = _parse_layers(cfg)
        spec = NetworkSpec(
            input_shape=_parse_shape(cfg, "net.input"),
            num_classes=_want_int(cfg, "net.classes"),
            layers=layers,
            quant=quant,
            expanded=_parse_expansion(cfg),
            block=block,
            edge_unquantized=_want_bool(cfg, "net.edge_unquantized"),
        )
        if cfg["exp.layers"].strip() == "all":
            spec = dataclasses.replace(spec, expanded=spec.quantized_positions)

        family = _want_choice(cfg, "decay.family", ("cosine", "exponential"))
        schedule = DecaySchedule(
            family=family,
            beta=_want_float(cfg, "decay.beta"),
            delta=_want_float(cfg, "decay.delta") if cfg["decay.delta"].strip() else None,
            epsilon=_want_float(cfg, "decay.epsilon") if cfg["decay.epsilon"].strip() else None,
            unit=_want_choice(cfg, "decay.unit", ("epoch", "iteration")),
            overrides=_parse_decay_overrides(cfg),
        )
        validate_overrides(schedule, spec.expanded_ids())

        milestones = _parse_int_list(cfg, "train.lr_milestones")
        divisors = _parse_float_list(cfg, "train.lr_divisors")
        if len(divisors) == 1 and len(milestones) > 1:
            divisors = divisors * len(milestones)
        lr = LRSchedule(_want_float(cfg, "train.lr"), milestones, divisors)

        seed = _want_int(cfg, "train.seed")
        kind = _want_choice(cfg, "train.dataset", ("synth", "idx", "cifar"))
        path_keys = {
            "idx": ("train.idx_train_images", "train.idx_train_labels",
                    "train.idx_test_images", "train.idx_test_labels"),
            "cifar": ("train.cifar_train", "train.cifar_test"),
            "synth": (),
        }[kind]
        paths = []
        for key in path_keys:
            if not cfg[key].strip():
                raise ConfigError(f"train.dataset = {kind} requires {key}")
            paths.append((key.removeprefix("train."), cfg[key].strip()))
        dataset = DatasetRef(
            kind=kind,
            seed=seed,
            synth_train=_want_int(cfg, "train.synth_train"),
            synth_test=_want_int(cfg, "train.synth_test"),
            paths=tuple(paths),
        )

        train = TrainConfig(
            epochs=_want_int(cfg, "train.epochs"),
            batch_size=_want_int(cfg, "train.batch_size"),
            seed=seed,
            optimizer=_want_choice(cfg, "train.optimizer", ("adam", "sgd-momentum")),
            lr=lr,
            momentum=_want_float(cfg, "train.momentum"),
            fp_lr_scale=_want_float(cfg, "train.fp_lr_scale"),
            weight_decay=_want_float(cfg, "train.weight_decay"),
            augment=_want_bool(cfg, "train.augment"),
            decay=schedule,
            dataset=dataset,
        )
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc

    return RunSetup(spec=spec, train=train, raw=dict(cfg))


def resolve_datasets(ref: DatasetRef, spec: NetworkSpec) -> tuple[Dataset, Dataset]:
    """Materialize the (train, test) splits a DatasetRef points at."""
    if ref.kind == "synth":
        c, h, w = spec.input_shape
        train = synth_dataset(ref.seed, ref.synth_train, spec.num_classes, c, h, w,
                              split="train")
        test = synth_dataset(ref.seed + 1_000_003, ref.synth_test, spec.num_classes,
                             c, h, w, split="test")
    elif ref.kind == "idx":
        paths = dict(ref.paths)
        train = load_idx(paths["idx_train_images"], paths["idx_train_labels"],
                         split="train", num_classes=spec.num_classes)
        test = load_idx(paths["idx_test_images"], paths["idx_test_labels"],
                        split="test", num_classes=spec.num_classes)
    else:
        paths = dict(ref.paths)
        train = load_cifar10_binary(paths["cifar_train"].split(";"), split="train")
        test = load_cifar10_binary(paths["cifar_test"].split(";"), split="test")
    for ds in (train, test):
        if tuple(ds.images.shape[1:]) != spec.input_shape:
            raise ConfigError(
                f"{ds.split} split images are {ds.images.shape[1:]}, but net.input "
                f"says {spec.input_shape}"
            )
        if ds.num_classes != spec.num_classes:
            raise ConfigError(
                f"{ds.split} split has {ds.num_classes} classes, but net.classes "
                f"says {spec.num_classes}"
            )
    return train, test
