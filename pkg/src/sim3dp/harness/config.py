"""Run configuration, read from and written to YAML."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import yaml

from ..encoder import EncoderConfig
from ..policy import ActionLayout, ObsLayout, PolicyConfig
from ..pusht.env import SETUPS, PushTConfig

VARIANTS = ("equibot", "dp-baseline", "dp-baseline+aug")


@dataclass
class TaskConfig:
    n_demos: int = 25
    demo_dir: str = "demos"
    control_every: int = 1
    max_steps: int = 300


@dataclass
class ModelConfig:
    obs_horizon: int = 2
    pred_horizon: int = 16
    action_horizon: int = 8
    down_dims: tuple = (16, 32)
    kernel_size: int = 3
    encoder_hidden: int = 16
    encoder_layers: int = 2
    knn: int | None = None
    neighborhood_bandwidth: float | None = 0.5
    cond_vectors: int = 16
    cond_hidden: int = 64
    gram_cap: int = 8


@dataclass
class OptimConfig:
    lr: float = 1e-3
    batch_size: int = 64
    epochs: int = 300
    checkpoint_every: int = 50
    warmup_steps: int = 0
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8


@dataclass
class DiffusionConfig:
    K: int = 100
    schedule: str = "squared-cosine"
    sampler: str = "ddim"
    ddim_steps: int = 8


@dataclass
class EvalConfig:
    episodes: int = 10
    setups: tuple = SETUPS
    last_checkpoints: int = 3


_SECTIONS = {"task": TaskConfig, "model": ModelConfig, "optim": OptimConfig,
             "diffusion": DiffusionConfig, "eval": EvalConfig}


@dataclass
class RunConfig:
    variant: str = "equibot"
    seed: int = 0
    out: str = "runs/default"
    task: TaskConfig = field(default_factory=TaskConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    diffusion: DiffusionConfig = field(default_factory=DiffusionConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.diffusion.sampler not in ("ddpm", "ddim"):
            raise ValueError(f"unknown sampler {self.diffusion.sampler!r}")
        for s in self.eval.setups:
            if s not in SETUPS:
                raise ValueError(f"unknown setup tag {s!r}")
        m = self.model
        if not 1 <= m.action_horizon <= m.pred_horizon:
            raise ValueError("action_horizon must lie in [1, pred_horizon]")
        if self.optim.batch_size < 1 or self.optim.epochs < 0 or self.optim.checkpoint_every < 1:
            raise ValueError("batch_size and checkpoint_every must be positive, epochs non-negative")

    @property
    def augment(self) -> bool:
        return self.variant == "dp-baseline+aug"

    def policy_config(self) -> PolicyConfig:
        m = self.model
        enc = EncoderConfig(num_layers=m.encoder_layers, hidden_channels=m.encoder_hidden,
                            points_in=8, knn=m.knn, bandwidth=m.neighborhood_bandwidth,
                            inv_cap=m.gram_cap)
        return PolicyConfig(obs_horizon=m.obs_horizon, pred_horizon=m.pred_horizon,
                            action_horizon=m.action_horizon, down_dims=tuple(m.down_dims),
                            kernel_size=m.kernel_size, cond_vectors=m.cond_vectors,
                            cond_hidden=m.cond_hidden, gram_cap=m.gram_cap, encoder=enc,
                            action_layout=ActionLayout(("point",)), obs_layout=ObsLayout(8, 3))

    def task_config(self) -> PushTConfig:
        return PushTConfig(max_steps=self.task.max_steps)

    def to_dict(self) -> dict:
        def plain(x):
            if isinstance(x, dict):
                return {k: plain(v) for k, v in x.items()}
            if isinstance(x, (list, tuple)):
                return [plain(v) for v in x]
            return x
        return plain(asdict(self))

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d or {})
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        kwargs = {}
        for key, val in d.items():
            if key in _SECTIONS:
                sec = _SECTIONS[key]
                names = {f.name for f in fields(sec)}
                bad = set(val or {}) - names
                if bad:
                    raise ValueError(f"unknown keys in [{key}]: {sorted(bad)}")
                kwargs[key] = sec(**{k: tuple(v) if isinstance(v, list) else v
                                     for k, v in (val or {}).items()})
            else:
                kwargs[key] = val
        return cls(**kwargs)

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=True)

    def with_overrides(self, **kw) -> "RunConfig":
        d = self.to_dict()
        for k, v in kw.items():
            if v is None:
                continue
            sec, _, name = k.rpartition(".")
            (d[sec] if sec else d)[name] = v
        return RunConfig.from_dict(d)


def load_config(path) -> RunConfig:
    try:
        data = yaml.safe_load(Path(path).read_text())
    except yaml.YAMLError as e:
        raise ValueError(f"{path}: not valid YAML ({e})") from None
    return RunConfig.from_dict(data)


def save_config(cfg: RunConfig, path) -> None:
    Path(path).write_text(cfg.to_yaml())
