"""Normalized center-format boxes and the overlap/regression losses on them.

Three flavours of each measure live here: scalar functions on :class:`BoxN`
(64-bit, used by oracles and diagnostics), vectorised numpy versions used
to build matching costs, and :class:`~proseco.tensor.Tensor` versions that
sit on the differentiation tape.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor

MIN_SIZE = 1e-6


@dataclass(frozen=True)
class BoxN:
    """A box ``(cx, cy, w, h)`` in image-normalized units."""

    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        if not (0.0 <= self.cx <= 1.0 and 0.0 <= self.cy <= 1.0):
            raise ValueError(f"box center outside [0,1]: ({self.cx}, {self.cy})")
        if not (0.0 < self.w <= 1.0 and 0.0 < self.h <= 1.0):
            raise ValueError(f"box size outside (0,1]: ({self.w}, {self.h})")
        object.__setattr__(self, "w", max(float(self.w), MIN_SIZE))
        object.__setattr__(self, "h", max(float(self.h), MIN_SIZE))

    @classmethod
    def from_corners(cls, x1: float, y1: float, x2: float, y2: float) -> "BoxN":
        return cls((x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1)

    def to_corners(self) -> tuple[float, float, float, float]:
        return to_corners(self)

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.cx, self.cy, self.w, self.h)


FULL_IMAGE = BoxN(0.5, 0.5, 1.0, 1.0)


def validate_array(arr) -> np.ndarray:
    """Coerce to an ``(n, 4)`` float32 array obeying the BoxN invariants.

    Computed sizes that underflow to zero are clamped rather than rejected.
    """
    a = np.asarray(arr, dtype=np.float32).reshape(-1, 4).copy()
    if not np.all(np.isfinite(a)):
        raise ValueError("non-finite box coordinates")
    if np.any(a[:, :2] < 0) or np.any(a[:, :2] > 1) or np.any(a[:, 2:] > 1) or np.any(a[:, 2:] < 0):
        raise ValueError("box coordinates outside [0,1]")
    a[:, 2:] = np.maximum(a[:, 2:], np.float32(MIN_SIZE))
    return a


@dataclass
class BoxSet:
    """An ordered, index-addressable collection of boxes for one image.

    Stored as a float32 ``(n, 4)`` array so it serialises bit-exactly.
    """

    data: np.ndarray = field(default_factory=lambda: np.zeros((0, 4), np.float32))
    image_id: str = ""

    def __post_init__(self):
        self.data = validate_array(self.data)

    @classmethod
    def from_boxes(cls, boxes: Sequence[BoxN], image_id: str = "") -> "BoxSet":
        return cls(np.array([b.as_tuple() for b in boxes], dtype=np.float32).reshape(-1, 4), image_id)

    def __len__(self) -> int:
        return len(self.data)

    def __getitem__(self, i: int) -> BoxN:
        return BoxN(*map(float, self.data[i]))

    def __iter__(self) -> Iterator[BoxN]:
        return (self[i] for i in range(len(self)))

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, BoxSet)
            and self.image_id == other.image_id
            and np.array_equal(self.data, other.data)
        )


# -- scalar -------------------------------------------------------------------


def to_corners(b: BoxN) -> tuple[float, float, float, float]:
    return (b.cx - b.w / 2, b.cy - b.h / 2, b.cx + b.w / 2, b.cy + b.h / 2)


def iou(a: BoxN, b: BoxN) -> float:
    if a == b:
        return 1.0
    ax1, ay1, ax2, ay2 = to_corners(a)
    bx1, by1, bx2, by2 = to_corners(b)
    iw = max(0.0, min(ax2, bx2) - max(ax1, bx1))
    ih = max(0.0, min(ay2, by2) - max(ay1, by1))
    inter = iw * ih
    union = a.w * a.h + b.w * b.h - inter
    return inter / union


def giou_loss(a: BoxN, b: BoxN) -> float:
    """``1 - GIoU``; lies in [0, 2]."""
    ax1, ay1, ax2, ay2 = to_corners(a)
    bx1, by1, bx2, by2 = to_corners(b)
    iw = max(0.0, min(ax2, bx2) - max(ax1, bx1))
    ih = max(0.0, min(ay2, by2) - max(ay1, by1))
    inter = iw * ih
    union = a.w * a.h + b.w * b.h - inter
    enclosing = (max(ax2, bx2) - min(ax1, bx1)) * (max(ay2, by2) - min(ay1, by1))
    return 1.0 - (inter / union - (enclosing - union) / enclosing)


def l1_coord_loss(a: BoxN, b: BoxN) -> float:
    return sum(abs(p - q) for p, q in zip(a.as_tuple(), b.as_tuple()))


# -- vectorised numpy ---------------------------------------------------------


def corners_array(boxes: np.ndarray) -> np.ndarray:
    b = np.asarray(boxes, dtype=np.float64)
    half = b[..., 2:] / 2
    return np.concatenate([b[..., :2] - half, b[..., :2] + half], axis=-1)


def centers_array(corners: np.ndarray) -> np.ndarray:
    c = np.asarray(corners, dtype=np.float64)
    return np.concatenate([(c[..., :2] + c[..., 2:]) / 2, c[..., 2:] - c[..., :2]], axis=-1)


def _pairwise_terms(a: np.ndarray, b: np.ndarray):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    ca, cb = corners_array(a)[:, None, :], corners_array(b)[None, :, :]
    lo = np.maximum(ca[..., :2], cb[..., :2])
    hi = np.minimum(ca[..., 2:], cb[..., 2:])
    span = np.maximum(hi - lo, 0.0)
    inter = span[..., 0] * span[..., 1]
    union = (a[:, 2] * a[:, 3])[:, None] + (b[:, 2] * b[:, 3])[None, :] - inter
    outer = np.maximum(ca[..., 2:], cb[..., 2:]) - np.minimum(ca[..., :2], cb[..., :2])
    enc = outer[..., 0] * outer[..., 1]
    return inter, union, enc


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """IoU between every box of ``a`` (n,4) and every box of ``b`` (m,4)."""
    inter, union, _ = _pairwise_terms(a, b)
    return inter / union


def pairwise_iou(s) -> np.ndarray:
    """Symmetric IoU matrix of one box set, with an exact unit diagonal."""
    arr = s.data if isinstance(s, BoxSet) else validate_array(s)
    m = iou_matrix(arr, arr)
    m = np.minimum(m, m.T)
    np.fill_diagonal(m, 1.0)
    return m


def giou_loss_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    inter, union, enc = _pairwise_terms(a, b)
    return 1.0 - (inter / union - (enc - union) / enc)


def l1_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return np.abs(a[:, None, :] - b[None, :, :]).sum(-1)


# -- differentiable -----------------------------------------------------------


def _corners_tensor(b: Tensor):
    cx, cy, w, h = b[:, 0], b[:, 1], b[:, 2], b[:, 3]
    return cx - w * 0.5, cy - h * 0.5, cx + w * 0.5, cy + h * 0.5


def giou_loss_tensor(a: Tensor, b: Tensor) -> Tensor:
    """Row-wise ``1 - GIoU`` between two ``(k, 4)`` box tensors."""
    ax1, ay1, ax2, ay2 = _corners_tensor(a)
    bx1, by1, bx2, by2 = _corners_tensor(b)
    iw = T.clamp_min(T.minimum(ax2, bx2) - T.maximum(ax1, bx1), 0.0)
    ih = T.clamp_min(T.minimum(ay2, by2) - T.maximum(ay1, by1), 0.0)
    inter = iw * ih
    union = a[:, 2] * a[:, 3] + b[:, 2] * b[:, 3] - inter
    enc = (T.maximum(ax2, bx2) - T.minimum(ax1, bx1)) * (T.maximum(ay2, by2) - T.minimum(ay1, by1))
    return 1.0 - (inter / union - (enc - union) / enc)


def l1_coord_loss_tensor(a: Tensor, b: Tensor) -> Tensor:
    """Row-wise L1 distance between two ``(k, 4)`` box tensors."""
    return T.abs_(a - b).sum(axis=1)
