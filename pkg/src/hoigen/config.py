"""Run configuration: one flat record of every hyperparameter, serialized into
each checkpoint and report.  Two runs with equal config and seed are
bit-identical.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from pathlib import Path

VERSION = "hoigen-0.1.0"


class ConfigError(ValueError):
    pass


@dataclasses.dataclass
class RunConfig:
    # geometry / conditioning
    n_points: int = 1024
    contact_tau: float = 0.02
    # diffusion
    diffusion_steps: int = 1000
    l_max: int = 150
    d_model: int = 512
    n_layers: int = 8
    n_heads: int = 4
    ff_mult: int = 2
    # training
    seed: int = 0
    lr: float = 1e-4
    batch_size: int = 32
    contact_steps: int = 2000
    motion_steps: int = 50000
    refiner_steps: int = 2000
    length_steps: int = 2000
    kl_weight: float = 1e-3
    kl_warmup_frac: float = 0.1
    refiner_noise_std: float = 0.05
    # optional per-step jitter on generator samples (anchored to the
    # unjittered sample); off by default — asking the refiner to denoise
    # makes its corrections misfire on the clean inference inputs
    refiner_gen_noise_std: float = 0.0
    refiner_contact_weight: float = 5.0
    refiner_pen_weight: float = 1.0
    # the refiner trains on single sequences (no batching across clips), so
    # its steps are noisier than the other stages' and want a smaller rate
    refiner_lr: float = 3e-4
    # metrics
    realism_pen_max: float = 0.005
    realism_move_thresh: float = 0.002
    eval_runs: int = 20
    diversity_pairs: int = 32
    classifier_hidden: int = 64
    # text
    encoder: str = "hashing"
    # paths
    data_root: str = "data"
    checkpoint_dir: str = "checkpoints"
    output_root: str = "outputs"

    def __post_init__(self):
        if self.n_points < 1:
            raise ConfigError("n_points must be positive")
        if self.diffusion_steps < 1:
            raise ConfigError("diffusion_steps must be positive")
        if not 1 <= self.l_max <= 150:
            raise ConfigError("l_max must be in [1, 150]")
        if self.d_model % self.n_heads != 0:
            raise ConfigError("d_model must be divisible by n_heads")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def load(cls, path) -> "RunConfig":
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        if path.suffix == ".toml":
            with open(path, "rb") as fh:
                data = tomllib.load(fh)
        elif path.suffix == ".json":
            with open(path) as fh:
                data = json.load(fh)
        else:
            raise ConfigError(f"config must be .toml or .json, got {path.suffix}")
        try:
            return cls.from_dict(data)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)

    @property
    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def stamp(self) -> dict:
        """Provenance record embedded in every output artifact."""
        return {"config_hash": self.hash, "version": VERSION}


def desk_scale_config(**overrides) -> RunConfig:
    """Small configuration for CPU-scale synthetic training runs."""
    base = dict(
        n_points=128, diffusion_steps=100, l_max=60,
        d_model=96, n_layers=2, n_heads=4,
        batch_size=16, contact_steps=400, motion_steps=3000,
        refiner_steps=1500, length_steps=1500, lr=1e-3,
    )
    base.update(overrides)
    return RunConfig(**base)
