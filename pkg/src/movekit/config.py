"""Stage settings and the flat ``key = value`` run configuration.

Config files are plain text, one ``dotted.key = value`` per line, ``#``
starts a comment. Unknown keys are rejected. Every field has a default, so
an empty file is a valid desk-profile configuration.
"""

from __future__ import annotations

from dataclasses import dataclass, fields, replace
from pathlib import Path

from . import numerics as nx
from .errors import ConfigurationError, DataError

STAGES = ("router", "pretrain", "finetune")

# lr, batch, steps as published for the full-scale model
PAPER_STAGES = {
    "router": (1e-2, 12, 8500),
    "pretrain": (2e-3, 256, 7200),
    "finetune": (1e-5, 192, 7700),
}

# desk schedule: fewer steps, batch sizes 12/32/24; finetune lr raised
# because the desk decoder is tiny and barely pre-fitted
DESK_STAGES = {
    "router": (1e-2, 12, 2000),
    "pretrain": (2e-3, 32, 1800),
    "finetune": (2e-3, 24, 3800),
}


@dataclass(frozen=True)
class StageConfig:
    stage: str
    learning_rate: float
    batch_size: int
    steps: int
    seed: int = 0
    eval_every: int = 100
    weight_decay: float = 0.01

    def __post_init__(self) -> None:
        if self.stage not in STAGES:
            raise ConfigurationError(f"unknown stage {self.stage!r}; expected one of {STAGES}")
        if self.batch_size < 1 or self.steps < 0 or not self.learning_rate >= 0 or self.eval_every < 1:
            raise ConfigurationError(f"invalid {self.stage} stage settings: {self}")

    def optimizer(self) -> nx.OptimizerConfig:
        return nx.OptimizerConfig(self.learning_rate, weight_decay=self.weight_decay)


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in {"1", "true", "yes", "on"}:
        return True
    if t in {"0", "false", "no", "off"}:
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _override(text: str) -> int | None:
    t = text.strip().lower()
    return None if t in {"", "none", "off"} else int(t)


@dataclass
class RunConfig:
    profile: str = "desk"
    seed: int = 0
    data_dir: str = "data"
    checkpoint_dir: str = "checkpoints"
    metrics_path: str = "metrics.jsonl"
    router_lr: float = DESK_STAGES["router"][0]
    router_batch: int = DESK_STAGES["router"][1]
    router_steps: int = DESK_STAGES["router"][2]
    pretrain_lr: float = DESK_STAGES["pretrain"][0]
    pretrain_batch: int = DESK_STAGES["pretrain"][1]
    pretrain_steps: int = DESK_STAGES["pretrain"][2]
    finetune_lr: float = DESK_STAGES["finetune"][0]
    finetune_batch: int = DESK_STAGES["finetune"][1]
    finetune_steps: int = DESK_STAGES["finetune"][2]
    eval_every: int = 100
    router_bias: bool = False
    router_trainable_in_stage2: bool = False
    stage2_train_embedding: bool = True
    route_override: int | None = None
    prefit_encoder_steps: int = 300
    prefit_decoder_steps: int = 400
    prefit_images: int = 1000
    metrics_timing: bool = False

    def stage(self, name: str) -> StageConfig:
        if name not in STAGES:
            raise ConfigurationError(f"unknown stage {name!r}; expected one of {STAGES}")
        return StageConfig(
            stage=name,
            learning_rate=getattr(self, f"{name}_lr"),
            batch_size=getattr(self, f"{name}_batch"),
            steps=getattr(self, f"{name}_steps"),
            seed=self.seed * 1000 + STAGES.index(name) + 1,
            eval_every=self.eval_every,
        )

    def with_stage(self, name: str, lr=None, batch=None, steps=None) -> "RunConfig":
        kw = {}
        if lr is not None:
            kw[f"{name}_lr"] = lr
        if batch is not None:
            kw[f"{name}_batch"] = batch
        if steps is not None:
            kw[f"{name}_steps"] = steps
        return replace(self, **kw)

    # -- text form ---------------------------------------------------------

    def to_text(self) -> str:
        return "".join(f"{key} = {_fmt(getattr(self, attr))}\n" for key, (attr, _) in KEYS.items())

    @classmethod
    def from_text(cls, text: str, source: str = "<config>") -> "RunConfig":
        kw = {}
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = (s.strip() for s in line.partition("="))
            if not sep:
                raise ConfigurationError(f"{source}:{lineno}: expected 'key = value', got {raw!r}")
            if key not in KEYS:
                raise ConfigurationError(f"{source}:{lineno}: unknown key {key!r}")
            attr, conv = KEYS[key]
            try:
                kw[attr] = conv(value)
            except ValueError as exc:
                raise ConfigurationError(f"{source}:{lineno}: bad value for {key}: {exc}") from None
        cfg = cls(**kw)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        path = Path(path)
        try:
            text = path.read_text()
        except OSError as exc:
            raise DataError(f"cannot read config {path}: {exc}") from exc
        cfg = cls.from_text(text, source=str(path))
        base = path.parent
        for attr in ("data_dir", "checkpoint_dir", "metrics_path"):
            p = Path(getattr(cfg, attr))
            if not p.is_absolute():
                setattr(cfg, attr, str(base / p))
        return cfg

    def validate(self) -> None:
        from .vision import PROFILES

        if self.profile not in PROFILES:
            raise ConfigurationError(f"unknown profile {self.profile!r}; expected one of {sorted(PROFILES)}")
        for name in STAGES:
            self.stage(name)
        if self.route_override is not None and self.route_override not in range(3):
            raise ConfigurationError(f"route_override must be 0, 1 or 2, got {self.route_override}")


def _fmt(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    return str(v)


KEYS = {
    "profile": ("profile", str),
    "seed": ("seed", int),
    "paths.data": ("data_dir", str),
    "paths.checkpoints": ("checkpoint_dir", str),
    "paths.metrics": ("metrics_path", str),
    "stage.router.lr": ("router_lr", float),
    "stage.router.batch": ("router_batch", int),
    "stage.router.steps": ("router_steps", int),
    "stage.pretrain.lr": ("pretrain_lr", float),
    "stage.pretrain.batch": ("pretrain_batch", int),
    "stage.pretrain.steps": ("pretrain_steps", int),
    "stage.finetune.lr": ("finetune_lr", float),
    "stage.finetune.batch": ("finetune_batch", int),
    "stage.finetune.steps": ("finetune_steps", int),
    "eval.every": ("eval_every", int),
    "flags.router_bias": ("router_bias", _bool),
    "flags.router_trainable_in_stage2": ("router_trainable_in_stage2", _bool),
    "flags.stage2_train_embedding": ("stage2_train_embedding", _bool),
    "flags.route_override": ("route_override", _override),
    "prefit.encoder_steps": ("prefit_encoder_steps", int),
    "prefit.decoder_steps": ("prefit_decoder_steps", int),
    "prefit.images_per_domain": ("prefit_images", int),
    "metrics.timing": ("metrics_timing", _bool),
}

assert {a for a, _ in KEYS.values()} == {f.name for f in fields(RunConfig)}
