"""Flat dotted-key experiment configuration.

Grammar: one `section.key = value` per line, `#` comments, blank lines
ignored. Unknown keys are hard errors; every violated constraint is
reported at once. The canonical serialization (sorted keys, normalized
values) round-trips through the parser unchanged, which is what makes run
manifests diffable and re-runnable.

Keys under `run.` are manifest metadata (code version, dataset checksum,
timestamps); the resolver accepts and ignores them so a manifest can be fed
straight back to `train --config`.
"""

from __future__ import annotations

import datetime as _dt
import os
from dataclasses import dataclass, field

from .data import (Dataset, SyntheticSpec, load_cifar, make_shape_images, make_synthetic,
                   write_cifar, _standardized)
from .losses import DistillConfig, KL_DIRECTIONS
from .models import ARCHS, SectionSpec, MultiExitModel, build_model
from .training import REGIMES, TrainPlan


class ConfigError(ValueError):
    def __init__(self, errors: list[str]):
        self.errors = list(errors)
        super().__init__("; ".join(self.errors))


DEFAULTS: dict[str, str] = {
    "model.arch": "mini_resnet",
    "model.sections": "1x8,1x16d,1x32d,1x64d",
    "model.num_classes": "10",
    "model.input": "3x32x32",
    "model.seed": "0",
    "data.kind": "shapes",
    "data.path": "",
    "data.subset_train": "0",        # 0 means no cap
    "data.subset_test": "0",
    "data.n_samples": "200",
    "data.num_classes": "0",         # 0 means follow model.num_classes
    "data.noise": "0.0",
    "data.per_class_train": "500",
    "data.per_class_test": "100",
    "data.seed": "0",
    "train.regime": "self_distill",
    "train.epochs": "10",
    "train.batch_size": "64",
    "train.lr": "0.1",
    "train.lr_milestones": "0.5,0.75",
    "train.lr_factor": "0.1",
    "train.weight_decay": "0.0005",
    "train.momentum": "0.9",
    "train.seed": "0",
    "train.augment": "none",
    "train.checkpoint_every": "10",
    "train.deterministic": "true",
    "train.finetune_epochs": "0",
    "distill.alpha": "0.3",
    "distill.lambda": "0.03",
    "distill.temperature": "1.0",
    "distill.detach_teacher": "true",
    "distill.t_squared_scaling": "false",
    "distill.kl_direction": "teacher_as_target",
    "ensemble.weights": "uniform",
    "ensemble.exits": "all",
    "probe.sigmas": "auto",
    "probe.trials": "5",
    "probe.seed": "0",
    "pca.components": "2",
    "pca.exit": "0",                 # 0 means deepest
}

DATA_KINDS = ("cifar10", "cifar100", "gaussian_blobs", "two_moons_grid", "shapes")


def parse_text(text: str) -> dict[str, str]:
    """Raw key/value pairs from config text; syntax errors name the line."""
    out: dict[str, str] = {}
    errors: list[str] = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            errors.append(f"line {lineno}: expected 'key = value', got {stripped!r}")
            continue
        key, value = stripped.split("=", 1)
        key = key.strip()
        if not key or "." not in key:
            errors.append(f"line {lineno}: keys must look like section.name, got {key!r}")
            continue
        if key in out:
            errors.append(f"line {lineno}: duplicate key {key}")
            continue
        out[key] = value.strip()
    if errors:
        raise ConfigError(errors)
    return out


def serialize(values: dict[str, str]) -> str:
    return "".join(f"{k} = {values[k]}\n" for k in sorted(values))


def _parse_bool(value: str, key: str, errors: list[str]) -> bool:
    if value.lower() in ("true", "1", "yes"):
        return True
    if value.lower() in ("false", "0", "no"):
        return False
    errors.append(f"{key}: expected true/false, got {value!r}")
    return False


def _parse_int(value: str, key: str, errors: list[str]) -> int:
    try:
        return int(value)
    except ValueError:
        errors.append(f"{key}: expected an integer, got {value!r}")
        return 0


def _parse_float(value: str, key: str, errors: list[str]) -> float:
    try:
        return float(value)
    except ValueError:
        errors.append(f"{key}: expected a number, got {value!r}")
        return 0.0


def _parse_sections(value: str, key: str, errors: list[str]) -> list[SectionSpec]:
    specs = []
    for item in value.split(","):
        item = item.strip()
        if not item:
            continue
        down = item.endswith("d")
        core = item[:-1] if down else item
        blocks = 1
        if "x" in core:
            btxt, core = core.split("x", 1)
            blocks = _parse_int(btxt, key, errors)
        channels = _parse_int(core, key, errors)
        try:
            specs.append(SectionSpec(blocks=blocks, channels=channels, downsample=down))
        except ValueError as exc:
            errors.append(f"{key}: {exc}")
    if not specs:
        errors.append(f"{key}: no sections given")
    return specs


def _parse_shape(value: str, key: str, errors: list[str]) -> tuple[int, ...]:
    try:
        return tuple(int(p) for p in value.split("x"))
    except ValueError:
        errors.append(f"{key}: expected dims like 3x32x32 or 16, got {value!r}")
        return (1,)


@dataclass
class Config:
    """Fully resolved experiment configuration."""

    values: dict[str, str]          # canonical key -> string value
    arch: str
    sections: list[SectionSpec]
    num_classes: int
    input_shape: tuple[int, ...]
    model_seed: int
    data_kind: str
    data_path: str
    data_seed: int
    plan: TrainPlan
    ensemble_weights: list[float] | None
    ensemble_exits: str | list[int]
    probe_sigmas: list[float] | None
    probe_trials: int
    probe_seed: int
    pca_components: int
    pca_exit: int                   # 0 = deepest

    def text(self) -> str:
        return serialize(self.values)


def resolve(raw: dict[str, str], overrides: dict[str, str] | None = None) -> Config:
    """Merge defaults, file values, and overrides; validate everything at once."""
    errors: list[str] = []
    merged = dict(DEFAULTS)
    for source in (raw, overrides or {}):
        for key, value in source.items():
            if key.startswith("run."):
                continue  # manifest metadata, not configuration
            if key not in DEFAULTS:
                errors.append(f"unknown key {key}")
                continue
            merged[key] = value
    if errors:
        raise ConfigError(errors)

    arch = merged["model.arch"]
    if arch not in ARCHS:
        errors.append(f"model.arch must be one of {ARCHS}, got {arch!r}")
    sections = _parse_sections(merged["model.sections"], "model.sections", errors)
    num_classes = _parse_int(merged["model.num_classes"], "model.num_classes", errors)
    if num_classes < 2:
        errors.append(f"model.num_classes must be >= 2, got {num_classes}")
    input_shape = _parse_shape(merged["model.input"], "model.input", errors)

    data_kind = merged["data.kind"]
    if data_kind not in DATA_KINDS:
        errors.append(f"data.kind must be one of {DATA_KINDS}, got {data_kind!r}")
    if data_kind in ("cifar10", "cifar100", "shapes") and not merged["data.path"]:
        errors.append(f"data.path is required for data.kind={data_kind}")

    distill = DistillConfig(
        alpha=_parse_float(merged["distill.alpha"], "distill.alpha", errors),
        lam=_parse_float(merged["distill.lambda"], "distill.lambda", errors),
        temperature=_parse_float(merged["distill.temperature"], "distill.temperature", errors),
        detach_teacher=_parse_bool(merged["distill.detach_teacher"], "distill.detach_teacher", errors),
        t_squared_scaling=_parse_bool(merged["distill.t_squared_scaling"],
                                      "distill.t_squared_scaling", errors),
        kl_direction=merged["distill.kl_direction"],
    )
    milestones = tuple(_parse_float(p, "train.lr_milestones", errors)
                       for p in merged["train.lr_milestones"].split(",") if p.strip())
    plan = TrainPlan(
        regime=merged["train.regime"],
        epochs=_parse_int(merged["train.epochs"], "train.epochs", errors),
        batch_size=_parse_int(merged["train.batch_size"], "train.batch_size", errors),
        lr=_parse_float(merged["train.lr"], "train.lr", errors),
        lr_milestones=milestones,
        lr_factor=_parse_float(merged["train.lr_factor"], "train.lr_factor", errors),
        weight_decay=_parse_float(merged["train.weight_decay"], "train.weight_decay", errors),
        momentum=_parse_float(merged["train.momentum"], "train.momentum", errors),
        seed=_parse_int(merged["train.seed"], "train.seed", errors),
        distill=distill,
        augment=merged["train.augment"],
        checkpoint_every=_parse_int(merged["train.checkpoint_every"], "train.checkpoint_every", errors),
        deterministic=_parse_bool(merged["train.deterministic"], "train.deterministic", errors),
        finetune_epochs=_parse_int(merged["train.finetune_epochs"], "train.finetune_epochs", errors),
    )
    errors.extend(plan.validate())

    wtxt = merged["ensemble.weights"]
    weights = None
    if wtxt != "uniform":
        weights = [_parse_float(p, "ensemble.weights", errors) for p in wtxt.split(",")]
        if weights and (min(weights) < 0 or max(weights) <= 0):
            errors.append("ensemble.weights must be >= 0 with at least one positive")
    etxt = merged["ensemble.exits"]
    exits: str | list[int] = etxt
    if etxt not in ("all", "deepest3"):
        exits = [_parse_int(p, "ensemble.exits", errors) for p in etxt.split(",")]

    stxt = merged["probe.sigmas"]
    sigmas = None
    if stxt != "auto":
        sigmas = [_parse_float(p, "probe.sigmas", errors) for p in stxt.split(",")]
    probe_trials = _parse_int(merged["probe.trials"], "probe.trials", errors)
    if probe_trials < 1:
        errors.append(f"probe.trials must be >= 1, got {probe_trials}")

    pca_components = _parse_int(merged["pca.components"], "pca.components", errors)
    if pca_components < 1:
        errors.append(f"pca.components must be >= 1, got {pca_components}")

    for key in ("data.subset_train", "data.subset_test", "data.n_samples",
                "data.per_class_train", "data.per_class_test", "data.num_classes",
                "data.seed", "model.seed", "probe.seed", "pca.exit"):
        if _parse_int(merged[key], key, errors) < 0:
            errors.append(f"{key} must be >= 0")
    _parse_float(merged["data.noise"], "data.noise", errors)

    if errors:
        raise ConfigError(sorted(set(errors)))

    return Config(
        values=merged,
        arch=arch,
        sections=sections,
        num_classes=num_classes,
        input_shape=input_shape,
        model_seed=int(merged["model.seed"]),
        data_kind=data_kind,
        data_path=merged["data.path"],
        data_seed=int(merged["data.seed"]),
        plan=plan,
        ensemble_weights=weights,
        ensemble_exits=exits,
        probe_sigmas=sigmas,
        probe_trials=probe_trials,
        probe_seed=int(merged["probe.seed"]),
        pca_components=pca_components,
        pca_exit=int(merged["pca.exit"]),
    )


def load_config(path: str, overrides: dict[str, str] | None = None) -> Config:
    if not os.path.exists(path):
        raise ConfigError([f"config file not found: {path}"])
    with open(path, encoding="utf-8") as f:
        return resolve(parse_text(f.read()), overrides)


def build_dataset(cfg: Config) -> Dataset:
    kind = cfg.data_kind
    caps = (int(cfg.values["data.subset_train"]), int(cfg.values["data.subset_test"]))
    subset = caps if caps[0] or caps[1] else None
    if subset:
        subset = (caps[0] or 10 ** 9, caps[1] or 10 ** 9)
    if kind in ("cifar10", "cifar100"):
        return load_cifar(cfg.data_path, kind, subset=subset, seed=cfg.data_seed)
    if kind == "shapes":
        n_classes = int(cfg.values["data.num_classes"]) or cfg.num_classes
        per_train = int(cfg.values["data.per_class_train"])
        per_test = int(cfg.values["data.per_class_test"])
        if not os.path.exists(os.path.join(cfg.data_path, "test_batch.bin")):
            trx, trl, tex, tel = make_shape_images(per_train, per_test, n_classes,
                                                   seed=cfg.data_seed)
            write_cifar(cfg.data_path, "cifar10", trx, trl, tex, tel)
        return load_cifar(cfg.data_path, "cifar10", subset=subset, seed=cfg.data_seed)
    n_classes = int(cfg.values["data.num_classes"]) or cfg.num_classes
    spec = SyntheticSpec(kind=kind, n_samples=int(cfg.values["data.n_samples"]),
                         num_classes=n_classes, noise=float(cfg.values["data.noise"]),
                         seed=cfg.data_seed)
    return make_synthetic(spec)


def build_model_from(cfg: Config) -> MultiExitModel:
    return build_model(cfg.arch, cfg.sections, cfg.num_classes,
                       in_shape=cfg.input_shape, seed=cfg.model_seed)


# -- run manifest ---------------------------------------------------------------


@dataclass
class RunManifest:
    config: Config
    code_version: str
    dataset_checksum: str
    started_at: str
    finished_at: str = ""

    def text(self) -> str:
        values = dict(self.config.values)
        values["run.code_version"] = self.code_version
        values["run.dataset_checksum"] = self.dataset_checksum
        values["run.started_at"] = self.started_at
        if self.finished_at:
            values["run.finished_at"] = self.finished_at
        return serialize(values)


def utc_now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


def write_manifest(path: str, manifest: RunManifest) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(manifest.text())


def read_manifest(path: str) -> tuple[Config, dict[str, str]]:
    """Config plus the run.* metadata block from a manifest file."""
    with open(path, encoding="utf-8") as f:
        raw = parse_text(f.read())
    meta = {k: v for k, v in raw.items() if k.startswith("run.")}
    return resolve(raw), meta
