"""Run configuration: one TOML file with [anchors], [train], [synth] and [paths]."""

from __future__ import annotations

import sys
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .geometry import AnchorSpec
from .synthdata import SynthConfig
from .trainer import TrainConfig


# shipped example configurations
CONFIG_DIR = Path(__file__).parent / "configs"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Paths:
    dataset: str = "data/synth"
    checkpoint: str = "runs/model.ntsc"
    report: str = "runs"


@dataclass(frozen=True)
class RunConfig:
    synth: SynthConfig = field(default_factory=SynthConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    paths: Paths = field(default_factory=Paths)

    @property
    def anchors(self) -> AnchorSpec:
        return self.train.anchors

    def with_overrides(
        self, seed: int | None = None, k: int | None = None, ablation: str | None = None, epochs: int | None = None
    ) -> "RunConfig":
        """Apply command-line overrides, re-validating the result."""
        train, synth = self.train, self.synth
        try:
            if seed is not None:
                train, synth = replace(train, seed=seed), replace(synth, seed=seed)
            if epochs is not None:
                train = replace(train, epochs=epochs)
            if k is not None:
                train = replace(train, n_scrutinized=k)
            if ablation is not None:
                if ablation != "ns-net":
                    raise ConfigError(f"unknown ablation {ablation!r}; only 'ns-net' is supported")
                train = replace(train, navigation_loss_enabled=False)
        except ConfigError:
            raise
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        return replace(self, train=train, synth=synth)


def _known(cls, table: dict, section: str, skip: tuple[str, ...] = ()) -> dict:
    names = {f.name for f in fields(cls)} - set(skip)
    unknown = sorted(set(table) - names)
    if unknown:
        raise ConfigError(f"unknown key(s) in [{section}]: {', '.join(unknown)}")
    return dict(table)


def _anchors(table: dict) -> AnchorSpec:
    allowed = {"input_size", "sides", "scales", "ratios"}
    unknown = sorted(set(table) - allowed)
    if unknown:
        raise ConfigError(f"unknown key(s) in [anchors]: {', '.join(unknown)}")
    try:
        sides, scales = table["sides"], table["scales"]
        input_size = table["input_size"]
    except KeyError as exc:
        raise ConfigError(f"[anchors] is missing {exc.args[0]!r}") from None
    if len(sides) != len(scales):
        raise ConfigError("[anchors] sides and scales must have the same length")
    kwargs = {"input_size": input_size, "levels": tuple(zip(sides, scales))}
    if "ratios" in table:
        kwargs["ratios"] = tuple(tuple(r) for r in table["ratios"])
    try:
        return AnchorSpec(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[anchors]: {exc}") from exc


def config_from_dict(doc: dict) -> RunConfig:
    unknown = sorted(set(doc) - {"anchors", "train", "synth", "paths"})
    if unknown:
        raise ConfigError(f"unknown section(s): {', '.join(unknown)}")
    train_kw = _known(TrainConfig, doc.get("train", {}), "train", skip=("anchors",))
    if "anchors" in doc:
        spec = _anchors(doc["anchors"])
        train_kw["anchors"] = spec
        train_kw.setdefault("input_side", spec.input_size)
    try:
        synth = SynthConfig(**_known(SynthConfig, doc.get("synth", {}), "synth"))
        train = TrainConfig(**train_kw)
        paths = Paths(**_known(Paths, doc.get("paths", {}), "paths"))
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    if synth.image_side != train.input_side:
        raise ConfigError(f"synthetic image side {synth.image_side} differs from network input side {train.input_side}")
    return RunConfig(synth, train, paths)


def load_config(path: str | Path | None) -> RunConfig:
    """Parse a TOML run configuration; ``None`` gives the built-in defaults."""
    if path is None:
        return RunConfig()
    try:
        with open(path, "rb") as fh:
            doc = tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return config_from_dict(doc)
