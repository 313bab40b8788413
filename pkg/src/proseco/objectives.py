"""Contrastive objectives between teacher proposals and student predictions.

Notation used throughout: a batch holds ``B`` images with ``N`` proposals
each. Proposal ``j`` of image ``i`` is flattened to row ``i * N + j``, so
similarity distributions are ``(B*N, B*N)`` matrices. ``sigma[i]`` is the
proposal matching of image ``i``: teacher proposal ``j`` is paired with
student prediction ``sigma[i](j)``.

Teacher-side quantities (relations, IoU gates, teacher embeddings) are
constants; gradients reach only the student embeddings and boxes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .boxes import giou_loss_tensor, l1_coord_loss_tensor, pairwise_iou
from .errors import ContractError
from .tensor import Tensor


@dataclass
class SimilarityDistribution:
    values: Tensor
    temperature: float
    mask: np.ndarray | None = None


def _flat(z) -> Tensor:
    t = z if isinstance(z, Tensor) else Tensor(z)
    if t.ndim != 3:
        raise ContractError(f"expected embeddings of shape (B, N, d), got {t.shape}")
    b, n, d = t.shape
    return t.reshape(b * n, d)


def relation_mask(batch_size: int, num_queries: int, mode: str = "as_written") -> np.ndarray:
    """Which (row, column) pairs enter the teacher relation softmax.

    ``as_written`` drops every column from the same image or with the same
    query index; ``self_only`` drops just the diagonal.
    """
    img = np.repeat(np.arange(batch_size), num_queries)
    query = np.tile(np.arange(num_queries), batch_size)
    if mode == "as_written":
        return (img[:, None] != img[None, :]) & (query[:, None] != query[None, :])
    if mode == "self_only":
        return ~np.eye(batch_size * num_queries, dtype=bool)
    raise ContractError(f"unknown relation mask {mode!r}")


def teacher_relations(z, tau_t: float, mode: str = "as_written") -> SimilarityDistribution:
    """Temperature softmax over teacher-teacher similarities (detached)."""
    zf = _flat(z).detach()
    b, n = z.shape[0], z.shape[1]
    mask = relation_mask(b, n, mode)
    with T.no_grad():
        values = T.masked_softmax_rows((zf @ zf.T) * (1.0 / tau_t), mask)
    return SimilarityDistribution(values, tau_t, mask)


def cross_similarities(z, z_hat, tau: float) -> SimilarityDistribution:
    """Row ``(i,j)``: softmax of teacher ``z_(i,j)`` against every student embedding."""
    zf = _flat(z).detach()
    zs = _flat(z_hat)
    return SimilarityDistribution(T.masked_softmax_rows((zf @ zs.T) * (1.0 / tau)), tau)


def iou_gates(teacher_boxes, delta: float) -> np.ndarray:
    """``(B, N, N)`` indicator that two teacher proposals of one image overlap by >= delta."""
    boxes = np.asarray(getattr(teacher_boxes, "data", teacher_boxes))
    return np.stack([pairwise_iou(b) >= delta for b in boxes])


def _block_diag(blocks: np.ndarray) -> np.ndarray:
    b, n, _ = blocks.shape
    out = np.zeros((b * n, b * n), dtype=np.float64)
    for i in range(b):
        out[i * n:(i + 1) * n, i * n:(i + 1) * n] = blocks[i]
    return out


def locsce_target(p_prime, ious, lambda_sce: float, delta: float) -> np.ndarray:
    """Target weights: IoU-gated same-image positives mixed with teacher relations.

    ``ious`` holds one ``(N, N)`` teacher IoU matrix per image. ``p_prime`` may
    be None when ``lambda_sce == 1``. Rows are not renormalised.
    """
    gates = np.asarray(ious) >= delta
    positives = _block_diag(gates.astype(np.float64))
    if p_prime is None:
        if lambda_sce != 1.0:
            raise ContractError("teacher relations are required unless lambda_sce == 1")
        return positives
    pp = np.asarray(getattr(getattr(p_prime, "values", p_prime), "data", p_prime), dtype=np.float64)
    return lambda_sce * positives + (1.0 - lambda_sce) * pp


def _matched_columns(sigma, batch_size: int, num_queries: int) -> np.ndarray:
    cols = np.empty(batch_size * num_queries, dtype=np.int64)
    for n in range(batch_size):
        targets = sigma[n].targets(num_queries)
        if np.any(targets < 0) or len(set(targets.tolist())) != num_queries:
            raise ContractError(f"proposal matching of image {n} is not a permutation")
        cols[n * num_queries:(n + 1) * num_queries] = n * num_queries + targets
    return cols


def _log_cross(teacher, student, cfg) -> Tensor:
    return T.log(cross_similarities(teacher.embeddings, student.embeddings, cfg.tau).values)


def locsce_loss(teacher, student, sigma, cfg, delta: float | None = None) -> Tensor:
    """Localized SCE: target-weighted cross-entropy over all B*N student columns.

    Target weight is read at teacher pair ``((i,j), (n,m))``; the log-probability
    at the student column ``(n, sigma[n](m))``.
    """
    b, n = teacher.embeddings.shape[:2]
    delta = cfg.delta if delta is None else delta
    p_prime = None
    if cfg.lambda_sce != 1.0:
        p_prime = teacher_relations(teacher.embeddings, cfg.tau_t, cfg.relation_mask)
    ious = np.stack([pairwise_iou(bx) for bx in np.asarray(teacher.boxes.data)])
    w = locsce_target(p_prime, ious, cfg.lambda_sce, delta)
    log_p = T.gather(_log_cross(teacher, student, cfg), _matched_columns(sigma, b, n), axis=1)
    return -(log_p * Tensor(w)).sum() * (1.0 / (b * n))


def sce_loss(teacher, student, sigma, cfg) -> Tensor:
    """SCE is the localized loss with the exact-overlap threshold."""
    return locsce_loss(teacher, student, sigma, cfg, delta=1.0)


def infonce_loss(teacher, student, sigma, cfg) -> Tensor:
    """Single matched positive per teacher proposal, all B*N student negatives."""
    b, n = teacher.embeddings.shape[:2]
    cols = _matched_columns(sigma, b, n)
    log_p = _log_cross(teacher, student, cfg)
    return -log_p[np.arange(b * n), cols].sum() * (1.0 / (b * n))


def locnce_loss(teacher, student, sigma, cfg) -> Tensor:
    """InfoNCE with every same-image proposal overlapping by >= delta as a positive."""
    b, n = teacher.embeddings.shape[:2]
    gates = iou_gates(teacher.boxes, cfg.delta)
    log_p = _log_cross(teacher, student, cfg)
    total = None
    for i in range(b):
        rows = slice(i * n, (i + 1) * n)
        cols = i * n + sigma[i].targets(n)
        block = T.gather(log_p[rows], cols, axis=1)
        term = (block * Tensor(gates[i].astype(np.float64))).sum()
        total = term if total is None else total + term
    return -total * (1.0 / (b * n))


CONTRASTIVE = {
    "locsce": locsce_loss,
    "sce": sce_loss,
    "infonce": infonce_loss,
    "locnce": locnce_loss,
}


def contrastive_loss(teacher, student, sigma, cfg) -> Tensor:
    return CONTRASTIVE[cfg.loss_kind](teacher, student, sigma, cfg)


def box_losses(student, sigma_box, ss_boxes, cfg) -> tuple[Tensor, Tensor]:
    """Weighted L1 and GIoU terms over box-matched pairs, each divided by B*K."""
    b, n = student.boxes.shape[:2]
    k = len(ss_boxes[0]) if len(ss_boxes) else 0
    if k == 0:
        zero = Tensor(0.0)
        return zero, zero
    pred_idx, targets = [], []
    for i in range(b):
        for j, s in sigma_box[i].pairs:
            pred_idx.append(i * n + s)
            targets.append(np.asarray(getattr(ss_boxes[i], "data", ss_boxes[i]))[j])
    pred = T.gather(student.boxes.reshape(b * n, 4), pred_idx, axis=0)
    tgt = Tensor(np.stack(targets))
    norm = 1.0 / (b * k)
    coord = l1_coord_loss_tensor(pred, tgt).sum() * (cfg.lambda_coord * norm)
    giou = giou_loss_tensor(pred, tgt).sum() * (cfg.lambda_giou * norm)
    return coord, giou


def global_loss(teacher, student, sigma_prop, sigma_box, ss_boxes, cfg):
    """Total unsupervised loss and its parts ``(total, contrast, coord, giou)``."""
    contrast = contrastive_loss(teacher, student, sigma_prop, cfg)
    coord, giou = box_losses(student, sigma_box, ss_boxes, cfg)
    total = contrast * cfg.lambda_contrast + coord + giou
    return total, contrast, coord, giou
