"""Run configuration: every scalar hyperparameter of a pretraining run."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

from .errors import ConfigError

LOSS_KINDS = ("locsce", "sce", "infonce", "locnce")
RELATION_MASKS = ("as_written", "self_only")
IMAGE_SCALES = ("mid", "large")

# Fields that change how long a run is or where it writes, not what it computes.
_NON_TRAJECTORY = {"iterations", "checkpoint_every", "out_dir", "log_every"}


@dataclass
class RunConfig:
    # batch / proposal counts
    batch_size: int = 8
    num_queries: int = 300
    num_ss_boxes: int = 30
    # contrastive objective
    delta: float = 0.5
    tau: float = 0.1
    tau_t: float = 0.07
    lambda_sce: float = 0.5
    loss_kind: str = "locsce"
    relation_mask: str = "as_written"
    # loss weights
    lambda_sim: float = 2.0
    lambda_coord: float = 5.0
    lambda_giou: float = 2.0
    lambda_contrast: float = 2.0
    # optimisation
    ema_keep_rate: float = 0.999
    learning_rate: float = 2e-4
    weight_decay: float = 1e-4
    grad_clip: float = 0.1
    lr_decay_step: int | None = None
    iterations: int = 200
    # detector architecture (desk scale)
    d_model: int = 64
    d_proj: int = 32
    proj_hidden: int = 64
    input_size: int = 64
    grid_size: int = 8
    # data
    image_scale: str = "large"
    data_source: str = "synthetic"
    num_scenes: int = 32
    image_dir: str | None = None
    ss_cache: str | None = None
    ss_scales: tuple[float, ...] = (100.0, 300.0)
    ss_min_size: int = 20
    # seeds
    seed: int = 0
    data_seed: int = 0
    # bookkeeping
    checkpoint_every: int = 0
    out_dir: str = "runs/default"

    def __post_init__(self):
        self.ss_scales = tuple(float(s) for s in self.ss_scales)
        self.validate()

    @classmethod
    def desk(cls, **overrides) -> "RunConfig":
        """Desk-scale preset: 8 images x 8 queries x 8 sampled boxes."""
        base = dict(batch_size=8, num_queries=8, num_ss_boxes=8)
        base.update(overrides)
        return cls(**base)

    def validate(self) -> None:
        if not 0.0 < self.delta <= 1.0:
            raise ConfigError(f"delta must lie in (0, 1], got {self.delta}")
        if self.tau <= 0 or self.tau_t <= 0:
            raise ConfigError("temperatures must be positive")
        if not 0.0 <= self.lambda_sce <= 1.0:
            raise ConfigError(f"lambda_sce must lie in [0, 1], got {self.lambda_sce}")
        if not 0.0 <= self.ema_keep_rate <= 1.0:
            raise ConfigError(f"ema_keep_rate must lie in [0, 1], got {self.ema_keep_rate}")
        if self.loss_kind not in LOSS_KINDS:
            raise ConfigError(f"loss_kind must be one of {LOSS_KINDS}")
        if self.relation_mask not in RELATION_MASKS:
            raise ConfigError(f"relation_mask must be one of {RELATION_MASKS}")
        if self.image_scale not in IMAGE_SCALES:
            raise ConfigError(f"image_scale must be one of {IMAGE_SCALES}")
        if self.data_source not in ("synthetic", "directory"):
            raise ConfigError("data_source must be 'synthetic' or 'directory'")
        for name in ("batch_size", "num_queries", "d_model", "d_proj", "proj_hidden", "input_size", "grid_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.num_ss_boxes < 0 or self.iterations < 0:
            raise ConfigError("num_ss_boxes and iterations must be >= 0")
        if self.num_ss_boxes > self.num_queries:
            raise ConfigError(
                f"num_ss_boxes={self.num_ss_boxes} exceeds num_queries={self.num_queries}; "
                "box matching needs K <= N"
            )
        if self.input_size % self.grid_size:
            raise ConfigError("input_size must be divisible by grid_size")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["ss_scales"] = list(self.ss_scales)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        with open(path, encoding="utf-8") as fh:
            try:
                data = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        return cls.from_dict(data)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")

    def hash(self) -> bytes:
        """32-byte digest of everything that shapes the training trajectory."""
        d = {k: v for k, v in self.to_dict().items() if k not in _NON_TRAJECTORY}
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).digest()
