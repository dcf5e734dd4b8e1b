"""Experiment configuration: TOML in, validated dataclasses, resolved JSON out."""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import tomli

from .arch import ArchConfig
from .data import AugmentPolicy
from .errors import ConfigError
from .phase1 import Phase1Config
from .phase2 import Phase2Config
from .train import OptimConfig, ScheduleConfig, TrainConfig

SEED_ENV = "ENGINE_SEED"


@dataclass
class ArchSection:
    T: int = 3
    L: int = 4
    N_mult: float = 1.0
    W_back: int | None = None
    base_width: int = 8
    fusion: str = "concat"
    upsample: str = "transpose"
    width_rule: str = "doubling"


@dataclass
class DataSection:
    n_train: int = 256
    n_val: int = 64
    H: int = 64
    W: int = 64
    K: int = 3
    channels: int = 3
    noise_level: float = 0.1


@dataclass
class TrainSection:
    arch: str = "bionet"
    topology: str | None = None
    epochs: int = 20
    batch_size: int = 8
    optimizer: str = "adam"
    lr: float = 1e-3
    weight_decay: float = 0.0
    momentum: float = 0.9
    grad_clip: float | None = None
    schedule: str = "constant"
    step_every: int = 10
    step_factor: float = 0.1
    decay_rate: float = 0.003
    patience: int = 5
    plateau_factor: float = 0.2
    threshold: float = 1e-4
    min_lr: float = 0.0
    rotate_deg: float = 0.0
    translate_frac: float = 0.0
    hflip: float = 0.0
    vflip: float = 0.0
    dtype: str = "float32"
    stop_at: float | None = None


@dataclass
class SearchSection:
    phase1_epochs: int = 8
    phase1_lr: float = 1e-3
    temperature: float = 1.0
    anneal_to: float | None = None
    samples: int = 4
    cap: int = 3
    phase2_epochs: int = 2
    phase2_lr: float = 1e-3
    decay_every: int = 10
    decay_factor: float = 0.1
    search_width_mult: float = 1.0
    recalib_batches: int = 4
    mac_input: list = field(default_factory=lambda: [512, 512])
    random_candidates: int = 8
    random_epochs: int = 2


@dataclass
class ExperimentConfig:
    name: str = "experiment"
    seed: int = 0
    output_dir: str = "runs/experiment"
    arch: ArchSection = field(default_factory=ArchSection)
    data: DataSection = field(default_factory=DataSection)
    train: TrainSection = field(default_factory=TrainSection)
    search: SearchSection = field(default_factory=SearchSection)

    # -- derived objects --
    def arch_config(self) -> ArchConfig:
        a = self.arch
        return ArchConfig(T=a.T, L=a.L, N_mult=a.N_mult, W_back=a.W_back, base_width=a.base_width,
                          fusion=a.fusion, upsample=a.upsample, width_rule=a.width_rule,
                          in_channels=self.data.channels, num_classes=self.data.K)

    def train_config(self) -> TrainConfig:
        t = self.train
        optim = OptimConfig(kind=t.optimizer, lr=t.lr, momentum=t.momentum, weight_decay=t.weight_decay,
                            grad_clip=t.grad_clip)
        factor = t.plateau_factor if t.schedule == "plateau" else t.step_factor
        sched = ScheduleConfig(kind=t.schedule, lr0=t.lr, factor=factor, every=t.step_every,
                               rate=t.decay_rate, patience=t.patience, threshold=t.threshold,
                               min_lr=t.min_lr)
        policy = AugmentPolicy(t.rotate_deg, t.translate_frac, t.hflip, t.vflip)
        return TrainConfig(epochs=t.epochs, batch_size=t.batch_size, seed=self.seed, optim=optim,
                           sched=sched, augment=None if policy.is_identity else policy,
                           stop_at=t.stop_at)

    def phase1_config(self) -> Phase1Config:
        s = self.search
        return Phase1Config(epochs=s.phase1_epochs, batch_size=self.train.batch_size, lr=s.phase1_lr,
                            temperature=s.temperature, anneal_to=s.anneal_to, seed=self.seed)

    def phase2_config(self, mode: str = "progressive") -> Phase2Config:
        s = self.search
        return Phase2Config(samples=s.samples, cap=s.cap, epochs_per_iter=s.phase2_epochs,
                            batch_size=self.train.batch_size, lr=s.phase2_lr, decay_every=s.decay_every,
                            decay_factor=s.decay_factor, search_width_mult=s.search_width_mult,
                            recalib_batches=s.recalib_batches, mac_input=tuple(s.mac_input), mode=mode,
                            seed=self.seed)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def resolved_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def validate(self) -> "ExperimentConfig":
        d, t, s = self.data, self.train, self.search
        checks = [
            (d.n_train >= 1 and d.n_val >= 1, "data.n_train and data.n_val must be >= 1"),
            (d.K >= 2, "data.K must be >= 2"),
            (0 <= d.noise_level, "data.noise_level must be >= 0"),
            (t.arch in ("bionet", "bionetpp", "sub"), "train.arch must be bionet, bionetpp or sub"),
            (t.arch != "sub" or t.topology, "train.topology is required when train.arch = 'sub'"),
            (t.epochs >= 0 and t.batch_size >= 1, "train.epochs >= 0 and train.batch_size >= 1"),
            (t.dtype in ("float32", "float64"), "train.dtype must be float32 or float64"),
            (s.samples >= 1 and s.cap >= 1, "search.samples and search.cap must be >= 1"),
            (s.search_width_mult > 0, "search.search_width_mult must be positive"),
            (len(s.mac_input) == 2, "search.mac_input must be [H, W]"),
            (s.temperature > 0, "search.temperature must be positive"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)
        arch = self.arch_config()  # raises ConfigError on bad architecture fields
        div = 2 ** arch.L
        if d.H % div or d.W % div:
            raise ConfigError(f"data size {d.H}x{d.W} must be divisible by 2^L = {div}")
        self.train_config()
        return self


def _section(cls, raw, where: str):
    if raw is None:
        return cls()
    if not isinstance(raw, dict):
        raise ConfigError(f"[{where}] must be a table")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - names)
    if unknown:
        raise ConfigError(f"unknown keys in [{where}]: {', '.join(unknown)}")
    defaults = cls()
    for k, v in raw.items():
        ref = getattr(defaults, k)
        if isinstance(ref, bool) != isinstance(v, bool):
            raise ConfigError(f"{where}.{k}: expected {type(ref).__name__}, got {type(v).__name__}")
        if isinstance(ref, int) and not isinstance(ref, bool) and not isinstance(v, int):
            raise ConfigError(f"{where}.{k}: expected an integer, got {v!r}")
        if isinstance(ref, float) and not isinstance(v, (int, float)):
            raise ConfigError(f"{where}.{k}: expected a number, got {v!r}")
        if isinstance(ref, str) and not isinstance(v, str):
            raise ConfigError(f"{where}.{k}: expected a string, got {v!r}")
    return cls(**{k: (float(v) if isinstance(getattr(defaults, k), float) else v) for k, v in raw.items()})


def from_dict(raw: dict, env: dict | None = None) -> ExperimentConfig:
    env = os.environ if env is None else env
    top = {f.name for f in dataclasses.fields(ExperimentConfig)}
    unknown = sorted(set(raw) - top)
    if unknown:
        raise ConfigError(f"unknown top-level keys: {', '.join(unknown)}")
    seed = raw.get("seed", 0)
    if SEED_ENV in env:
        try:
            seed = int(env[SEED_ENV])
        except ValueError:
            raise ConfigError(f"{SEED_ENV} must be an integer, got {env[SEED_ENV]!r}") from None
    if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
        raise ConfigError("seed must be a non-negative integer")
    cfg = ExperimentConfig(
        name=str(raw.get("name", "experiment")),
        seed=seed,
        output_dir=str(raw.get("output_dir", "runs/experiment")),
        arch=_section(ArchSection, raw.get("arch"), "arch"),
        data=_section(DataSection, raw.get("data"), "data"),
        train=_section(TrainSection, raw.get("train"), "train"),
        search=_section(SearchSection, raw.get("search"), "search"),
    )
    return cfg.validate()


def load_config(path, env: dict | None = None) -> ExperimentConfig:
    path = Path(path)
    try:
        raw = tomli.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    cfg = from_dict(raw, env)
    out = Path(cfg.output_dir)
    if not out.is_absolute():
        cfg.output_dir = str((path.parent / out).resolve())
    return cfg
