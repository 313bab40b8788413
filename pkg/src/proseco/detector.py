"""A toy query-based detector: frozen patch backbone, one cross-attention
decoder layer, a projector head for embeddings and a sigmoid box head.

The student and the EMA teacher share one :class:`Detector` (architecture +
frozen backbone) and differ only in their :class:`DetectorParams`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .boxes import BoxSet
from .errors import ContractError
from .pipeline import resize
from .tensor import Tensor

_BACKBONE_STREAM = 0x5EED
_BACKBONE_GAIN = 8.0
# Sharpens the attention logits so each query reads a few cells instead of
# mean-pooling the whole grid.
ATTN_GAIN = 32.0
# Init scale of the value/output projections relative to the scaled-uniform default.
VALUE_INIT_SCALE = 0.7


@dataclass(frozen=True)
class DetectorConfig:
    num_queries: int = 8
    d_model: int = 64
    d_proj: int = 32
    proj_hidden: int = 64
    input_size: int = 64
    grid_size: int = 8
    seed: int = 0

    def __post_init__(self):
        for name in ("num_queries", "d_model", "d_proj", "proj_hidden", "input_size", "grid_size"):
            if getattr(self, name) < 1:
                raise ContractError(f"DetectorConfig.{name} must be >= 1")
        if self.input_size % self.grid_size:
            raise ContractError("input_size must be divisible by grid_size")

    @classmethod
    def from_run(cls, cfg) -> "DetectorConfig":
        return cls(cfg.num_queries, cfg.d_model, cfg.d_proj, cfg.proj_hidden,
                   cfg.input_size, cfg.grid_size, cfg.seed)

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        d, n = self.d_model, self.num_queries
        return {
            "queries": (n, d),
            "attn.wq": (d, d),
            "attn.wk": (d, d),
            "attn.wv": (d, d),
            "attn.wo": (d, d),
            "mlp.w1": (d, d),
            "mlp.b1": (d,),
            "mlp.w2": (d, d),
            "mlp.b2": (d,),
            "proj.w1": (d, self.proj_hidden),
            "proj.b1": (self.proj_hidden,),
            "proj.w2": (self.proj_hidden, self.d_proj),
            "proj.b2": (self.d_proj,),
            "box.w": (d, 4),
            "box.b": (4,),
        }


class DetectorParams(dict):
    """Named learnable tensors, in a fixed order."""

    def clone(self, requires_grad: bool | None = None) -> "DetectorParams":
        return DetectorParams(
            (k, Tensor(v.data.copy(), requires_grad=v.requires_grad if requires_grad is None else requires_grad))
            for k, v in self.items()
        )

    def zero_grad(self) -> None:
        for v in self.values():
            v.grad = None

    def check_compatible(self, other: "DetectorParams") -> None:
        if list(self) != list(other):
            raise ContractError(f"parameter names differ: {sorted(set(self) ^ set(other))}")
        for k in self:
            if self[k].shape != other[k].shape:
                raise ContractError(f"parameter {k}: shape {self[k].shape} vs {other[k].shape}")


@dataclass
class ProposalSet:
    """One image's ``N`` (embedding, box) pairs."""

    embeddings: Tensor  # (N, d_proj), rows unit-norm
    boxes: Tensor  # (N, 4), (cx, cy, w, h) in (0, 1)

    def box_set(self, image_id: str = "") -> BoxSet:
        return BoxSet(self.boxes.data, image_id)


@dataclass
class ProposalBatch:
    embeddings: Tensor  # (B, N, d_proj)
    boxes: Tensor  # (B, N, 4)

    def __len__(self) -> int:
        return self.embeddings.shape[0]

    def __getitem__(self, i: int) -> ProposalSet:
        """Detached per-image view, for matching and diagnostics."""
        return ProposalSet(Tensor(self.embeddings.data[i]), Tensor(self.boxes.data[i]))


def _positional_encoding(grid: int, d: int) -> np.ndarray:
    """Fixed 2-D sinusoidal encoding: half the channels for y, half for x."""
    ys, xs = np.mgrid[0:grid, 0:grid]
    pos = np.zeros((grid * grid, d))
    half = max(d // 2, 1)
    freqs = np.exp(-math.log(100.0) * np.arange(0, half, 2) / half)
    for offset, coord in ((0, ys.ravel()), (half, xs.ravel())):
        angles = (coord[:, None] + 0.5) / grid * 2 * math.pi * freqs[None, :] * grid / 4
        for j in range(len(freqs)):
            if offset + 2 * j < d:
                pos[:, offset + 2 * j] = np.sin(angles[:, j])
            if offset + 2 * j + 1 < d:
                pos[:, offset + 2 * j + 1] = np.cos(angles[:, j])
    return pos.astype(np.float32)


class Detector:
    """Architecture plus frozen backbone weights for one :class:`DetectorConfig`."""

    def __init__(self, cfg: DetectorConfig):
        self.cfg = cfg
        rng = np.random.default_rng([cfg.seed, _BACKBONE_STREAM])
        patch = cfg.input_size // cfg.grid_size
        fan_in = patch * patch * 3
        bound = 1.0 / math.sqrt(fan_in)
        # frozen: plain arrays, never Tensors with requires_grad
        w = rng.uniform(-bound, bound, (fan_in, cfg.d_model)) * _BACKBONE_GAIN
        b = rng.uniform(-0.5, 0.5, cfg.d_model)
        # pixels are centred to [-1, 1]; folded in so that (2x - 1) @ w + b == x @ (2w) + (b - sum(w))
        self.backbone_w = (2.0 * w).astype(np.float32)
        self.backbone_b = (b - w.sum(axis=0)).astype(np.float32)
        self.pos = _positional_encoding(cfg.grid_size, cfg.d_model)

    def backbone_features(self, img: np.ndarray) -> np.ndarray:
        """``(G*G, d_model)`` features: per-patch frozen linear map and tanh."""
        cfg = self.cfg
        g, s = cfg.grid_size, cfg.input_size
        if img.shape[:2] != (s, s):
            img = resize(img, s, s)
        p = s // g
        patches = img.reshape(g, p, g, p, 3).transpose(0, 2, 1, 3, 4).reshape(g * g, p * p * 3)
        return np.tanh(patches @ self.backbone_w + self.backbone_b).astype(np.float32)

    def forward_batch(self, params: DetectorParams, images) -> ProposalBatch:
        cfg = self.cfg
        feats = np.stack([self.backbone_features(img) for img in images])
        b, cells, d = feats.shape
        n = cfg.num_queries
        f = Tensor(feats.reshape(b * cells, d))
        keys = ((f + Tensor(np.tile(self.pos, (b, 1)))) @ params["attn.wk"]).reshape(b, cells, d)
        values = (f @ params["attn.wv"]).reshape(b, cells, d)
        q = params["queries"] @ params["attn.wq"]
        scores = (q @ T.transpose(keys)) * (ATTN_GAIN / math.sqrt(d))  # (B, N, cells)
        attn = T.masked_softmax_rows(scores.reshape(b * n, cells)).reshape(b, n, cells)
        context = (attn @ values).reshape(b * n, d)
        # queries steer attention only; content starts from the image
        h = context @ params["attn.wo"]
        h = h + T.relu(h @ params["mlp.w1"] + params["mlp.b1"]) @ params["mlp.w2"] + params["mlp.b2"]
        z = T.relu(h @ params["proj.w1"] + params["proj.b1"]) @ params["proj.w2"] + params["proj.b2"]
        z = T.l2_normalize(z).reshape(b, n, cfg.d_proj)
        boxes = T.sigmoid(h @ params["box.w"] + params["box.b"]).reshape(b, n, 4)
        return ProposalBatch(z, boxes)

    def forward(self, params: DetectorParams, img: np.ndarray) -> ProposalSet:
        out = self.forward_batch(params, [img])
        return ProposalSet(out.embeddings.reshape(self.cfg.num_queries, -1),
                           out.boxes.reshape(self.cfg.num_queries, 4))


def init_params(cfg: DetectorConfig, seed: int) -> DetectorParams:
    """Scaled-uniform init: weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)), biases zero,
    queries ~ U(-1, 1).

    The projector's output layer is centred per column: ReLU activations share
    a positive mean, which would otherwise leak one common direction into
    every embedding and make all instances look alike at step 0.
    """
    rng = np.random.default_rng(seed)
    params = DetectorParams()
    for name, shape in cfg.param_shapes().items():
        if len(shape) == 1:
            values = np.zeros(shape)
        else:
            bound = 1.0 if name == "queries" else 1.0 / math.sqrt(shape[0])
            values = rng.uniform(-bound, bound, shape)
        if name in ("attn.wv", "attn.wo"):
            values = values * VALUE_INIT_SCALE
        params[name] = Tensor(values, requires_grad=True)
    params["proj.w2"].data = params["proj.w2"].data - params["proj.w2"].data.mean(axis=0)
    return params


def init_pair(cfg: DetectorConfig, seed: int | None = None) -> tuple[DetectorParams, DetectorParams]:
    """Student initialised at random; teacher an exact, gradient-free copy."""
    student = init_params(cfg, cfg.seed if seed is None else seed)
    return student, student.clone(requires_grad=False)


def ema_update(teacher: DetectorParams, student: DetectorParams, keep_rate: float) -> None:
    """``teacher <- keep_rate * teacher + (1 - keep_rate) * student``, in place."""
    if not 0.0 <= keep_rate <= 1.0:
        raise ContractError(f"keep_rate must lie in [0, 1], got {keep_rate}")
    teacher.check_compatible(student)
    for name, t in teacher.items():
        mixed = keep_rate * t.data.astype(np.float64) + (1.0 - keep_rate) * student[name].data.astype(np.float64)
        t.data = mixed.astype(np.float32)
