"""Flat ``key = value`` run configuration.

Blank lines and ``#`` comments are ignored. Every key is optional; unknown
keys are rejected. Relative paths resolve against the config file's
directory. When ``dataset`` is empty the run generates synthetic data from
the ``synth_*`` keys and splits classes evenly into ``num_groups`` groups
unless ``split`` names a split file.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path

from .losses import HyperParams
from .protocol import SyntheticSpec
from .trainer import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    dataset: str = ""
    embeddings: str = ""
    split: str = ""
    out_dir: str = "izsd_run"
    num_groups: int = 4
    # loss and decision hyperparameters
    alpha: float = 5.0
    beta: float = 0.001
    gamma: float = 2.0
    temperature: float = 2.0
    margin: float = 1.0
    eta: float = 0.2
    delta: float = 0.02
    memory_size: int = 150
    balanced_mse: bool = True
    distillation: bool = True
    projection_distance: bool = True
    # optimization
    learning_rate: float = 0.001
    lr_decay: float = 0.2
    epochs: int = 10
    batch_size: int = 32
    replay_fraction: float = 0.5
    visual_dim: int = 32
    ap_mode: str = "interp11"
    # synthetic data, used when no dataset file is given
    synth_num_classes: int = 20
    synth_d: int = 16
    synth_r: int = 32
    synth_scenes_per_class: int = 60
    synth_proposals_per_scene: int = 6
    synth_noise_sigma: float = 0.08
    synth_bg_fraction: float = 0.5
    synth_test_fraction: float = 0.5

    def hyperparams(self) -> HyperParams:
        return HyperParams(
            alpha=self.alpha,
            beta=self.beta,
            gamma=self.gamma,
            temperature=self.temperature,
            margin=self.margin,
            eta=self.eta,
            delta=self.delta,
            memory_size=self.memory_size,
            balanced_mse=self.balanced_mse,
            distillation=self.distillation,
            projection_distance=self.projection_distance,
        )

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            learning_rate=self.learning_rate,
            lr_decay=self.lr_decay,
            epochs=self.epochs,
            batch_size=self.batch_size,
            seed=self.seed,
            replay_fraction=self.replay_fraction,
        )

    def synthetic_spec(self) -> SyntheticSpec:
        return SyntheticSpec(
            num_classes=self.synth_num_classes,
            d=self.synth_d,
            r=self.synth_r,
            scenes_per_class=self.synth_scenes_per_class,
            proposals_per_scene=self.synth_proposals_per_scene,
            noise_sigma=self.synth_noise_sigma,
            bg_fraction=self.synth_bg_fraction,
            test_fraction=self.synth_test_fraction,
            seed=self.seed,
        )

    def to_text(self) -> str:
        return "".join(f"{f.name} = {_format(getattr(self, f.name))}\n" for f in fields(self))


_BOOL = {"true": True, "1": True, "yes": True, "false": False, "0": False, "no": False}


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _coerce(name: str, kind, raw: str):
    try:
        if kind in (bool, "bool"):
            return _BOOL[raw.lower()]
        if kind in (int, "int"):
            return int(raw)
        if kind in (float, "float"):
            return float(raw)
    except (KeyError, ValueError):
        raise ConfigError(f"bad value for {name}: {raw!r}") from None
    return raw


def parse_config(text: str, base_dir: Path | None = None) -> RunConfig:
    types = {f.name: f.type for f in fields(RunConfig)}
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key not in types:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        values[key] = _coerce(key, types[key], raw)
    if base_dir is not None:
        for key in ("dataset", "embeddings", "split", "out_dir"):
            if values.get(key) and not Path(values[key]).is_absolute():
                values[key] = str(Path(base_dir) / values[key])
    try:
        cfg = RunConfig(**values)
        cfg.hyperparams()
        cfg.train_config()
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return cfg


def load_config(path) -> RunConfig:
    path = Path(path)
    return parse_config(path.read_text(), base_dir=path.parent)
