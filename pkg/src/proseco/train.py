"""The pretraining loop.

One step: sample a batch, build weak/strong views and carry the cached
Selective Search boxes into the weak view, run the teacher (no tape) on the
weak views and the student on the strong views, match proposals and boxes,
evaluate the global loss, backpropagate, update the student, then move the
teacher towards the student.

All randomness is derived from ``(seed, step, image_id)`` so a run resumed
from a checkpoint continues exactly where an unbroken run would be.
"""

from __future__ import annotations

import csv
import logging
import time
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .boxes import BoxSet
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import RunConfig
from .detector import Detector, DetectorConfig, DetectorParams, ema_update, init_pair
from .errors import ConfigError, ContractError
from .matching import box_cost, hungarian, proposal_cost
from .objectives import global_loss, iou_gates
from .optim import AdamW
from .pipeline import load_image, strong_augment, synth_scene, transport_boxes, weak_augment
from .proposals import SSParams, read_cache, sample_boxes, selective_search, thread_count

logger = logging.getLogger(__name__)

METRIC_COLUMNS = (
    "step", "loss_total", "loss_contrast", "loss_coord", "loss_giou",
    "matched_cosine", "positives_per_proposal",
)


@dataclass
class MetricsRow:
    step: int
    loss_total: float
    loss_contrast: float
    loss_coord: float
    loss_giou: float
    matched_cosine: float
    positives_per_proposal: float
    wall_ms: float = 0.0

    def csv_fields(self) -> list[str]:
        return [str(self.step)] + [f"{getattr(self, c):.9g}" for c in METRIC_COLUMNS[1:]]


@dataclass
class Dataset:
    image_ids: list[str]
    images: list[np.ndarray]
    proposals: list[BoxSet]
    ground_truth: list[BoxSet] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.images)


def synthetic_dataset(cfg: RunConfig) -> Dataset:
    ids, images, gts = [], [], []
    for i in range(cfg.num_scenes):
        img, spec = synth_scene(np.random.default_rng([cfg.data_seed, i]), size=cfg.input_size)
        ids.append(f"scene_{i:04d}")
        images.append(img)
        gts.append(spec.ground_truth())
    params = SSParams(cfg.ss_scales, cfg.ss_min_size)
    with ThreadPoolExecutor(max_workers=thread_count()) as pool:
        proposals = list(pool.map(lambda im: selective_search(im, params), images))
    for ident, boxes in zip(ids, proposals):
        boxes.image_id = ident
    return Dataset(ids, images, proposals, gts)


def directory_dataset(cfg: RunConfig) -> Dataset:
    if not cfg.image_dir:
        raise ConfigError("data_source 'directory' needs image_dir")
    cache = Path(cfg.ss_cache or Path(cfg.image_dir) / "proposals.pssc")
    if not cache.exists():
        raise FileNotFoundError(
            f"Selective Search cache {cache} not found; run "
            f"`proseco ss-precompute {cfg.image_dir} --out {cache}` first"
        )
    entries = read_cache(cache)
    ids, images, proposals = [], [], []
    for ident in sorted(entries):
        path = Path(cfg.image_dir) / f"{ident}.ppm"
        ids.append(ident)
        images.append(load_image(path))
        proposals.append(entries[ident])
    if not ids:
        raise ContractError(f"cache {cache} holds no images")
    return Dataset(ids, images, proposals)


def build_dataset(cfg: RunConfig) -> Dataset:
    return synthetic_dataset(cfg) if cfg.data_source == "synthetic" else directory_dataset(cfg)


def image_seed(seed: int, image_id: str, step: int) -> np.random.Generator:
    return np.random.default_rng([seed, zlib.crc32(image_id.encode("utf-8")), step])


@dataclass
class TrainState:
    cfg: RunConfig
    detector: Detector
    student: DetectorParams
    teacher: DetectorParams
    optimizer: AdamW
    step: int = 0

    @classmethod
    def create(cls, cfg: RunConfig) -> "TrainState":
        det_cfg = DetectorConfig.from_run(cfg)
        student, teacher = init_pair(det_cfg)
        opt = AdamW(student, lr=cfg.learning_rate, weight_decay=cfg.weight_decay, clip_norm=cfg.grad_clip)
        return cls(cfg, Detector(det_cfg), student, teacher, opt)

    def current_lr(self) -> float:
        decay = self.cfg.lr_decay_step
        return self.cfg.learning_rate * (0.1 if decay is not None and self.step >= decay else 1.0)

    def to_checkpoint(self) -> Checkpoint:
        tensors: dict[str, np.ndarray] = {}
        for name, p in self.student.items():
            tensors[f"student/{name}"] = p.data
        for name, p in self.teacher.items():
            tensors[f"teacher/{name}"] = p.data
        for name in self.student:
            tensors[f"adam.m/{name}"] = self.optimizer.m[name]
        for name in self.student:
            tensors[f"adam.v/{name}"] = self.optimizer.v[name]
        return Checkpoint(self.step, self.cfg.hash(), tensors)

    def restore(self, ckpt: Checkpoint) -> None:
        if ckpt.config_hash != self.cfg.hash():
            raise ConfigError("checkpoint was written under a different configuration (config hash mismatch)")
        for group, target in (("student", self.student), ("teacher", self.teacher)):
            for name, arr in ckpt.group(group).items():
                target[name].data = arr.copy()
        self.optimizer.m = {k: v.copy() for k, v in ckpt.group("adam.m").items()}
        self.optimizer.v = {k: v.copy() for k, v in ckpt.group("adam.v").items()}
        self.optimizer.step_count = ckpt.step
        self.step = ckpt.step


@dataclass
class Batch:
    weak: list[np.ndarray]
    strong: list[np.ndarray]
    ss_boxes: list[BoxSet]


def prepare_batch(cfg: RunConfig, data: Dataset, step: int) -> Batch:
    rng = np.random.default_rng([cfg.seed, step, 0xBA7C])
    idx = rng.choice(len(data), size=cfg.batch_size, replace=len(data) < cfg.batch_size)
    weak, strong, boxes = [], [], []
    for i in idx:
        ident = data.image_ids[i]
        r = image_seed(cfg.seed, ident, step)
        view, record = weak_augment(data.images[i], r, cfg.image_scale, cfg.input_size)
        weak.append(view)
        strong.append(strong_augment(view, r))
        moved = transport_boxes(data.proposals[i], record)
        boxes.append(sample_boxes(moved, cfg.num_ss_boxes, r))
    return Batch(weak, strong, boxes)


def effective_delta(cfg: RunConfig) -> float:
    return 1.0 if cfg.loss_kind in ("sce", "infonce") else cfg.delta


def train_step(state: TrainState, batch: Batch) -> MetricsRow:
    """One optimisation step; mutates ``state`` and returns its metrics."""
    cfg = state.cfg
    start = time.perf_counter()
    with T.no_grad():
        teacher_out = state.detector.forward_batch(state.teacher, batch.weak)
    student_out = state.detector.forward_batch(state.student, batch.strong)

    sigma_prop, sigma_box = [], []
    for i in range(cfg.batch_size):
        sigma_prop.append(hungarian(proposal_cost(teacher_out[i], student_out[i], cfg)))
        sigma_box.append(hungarian(box_cost(batch.ss_boxes[i], student_out[i], cfg)))

    try:
        total, contrast, coord, giou = global_loss(
            teacher_out, student_out, sigma_prop, sigma_box, batch.ss_boxes, cfg
        )
    except ContractError as exc:
        raise type(exc)(f"step {state.step + 1}: {exc}") from exc

    state.student.zero_grad()
    total.backward()
    state.optimizer.step(state.student, lr=state.current_lr())
    ema_update(state.teacher, state.student, cfg.ema_keep_rate)
    state.step += 1

    zt, zs = teacher_out.embeddings.data, student_out.embeddings.data
    cosines = [
        float((zt[i] * zs[i][sigma_prop[i].targets(cfg.num_queries)]).sum(axis=1).mean())
        for i in range(cfg.batch_size)
    ]
    gates = iou_gates(teacher_out.boxes, effective_delta(cfg))
    return MetricsRow(
        step=state.step,
        loss_total=total.item(),
        loss_contrast=contrast.item(),
        loss_coord=coord.item(),
        loss_giou=giou.item(),
        matched_cosine=float(np.mean(cosines)),
        positives_per_proposal=float(gates.sum(axis=2).mean()),
        wall_ms=(time.perf_counter() - start) * 1000.0,
    )


# -- run driver ---------------------------------------------------------------------


TIMING_HEADER = "step,wall_ms\n"


def _metrics_header() -> str:
    return ",".join(METRIC_COLUMNS) + "\n"


def _truncate_csv(path: Path, step: int, header: str) -> None:
    """Keep the header and every row up to and including ``step``."""
    if not path.exists():
        path.write_text(header, encoding="utf-8")
        return
    lines = path.read_text(encoding="utf-8").splitlines(keepends=True)
    kept = lines[:1] + [ln for ln in lines[1:] if int(ln.split(",", 1)[0]) <= step]
    path.write_text("".join(kept), encoding="utf-8")


def pretrain(cfg: RunConfig, out_dir: str | Path | None = None, resume: str | Path | None = None,
             stop_after: int | None = None, dataset: Dataset | None = None) -> Path:
    """Run (or resume) pretraining; returns the output directory.

    Writes ``config.json``, ``metrics.csv`` (deterministic), ``timing.csv``
    (wall-clock per step), interval checkpoints and ``checkpoint.bin``.
    ``stop_after`` ends the run early at that step, as if interrupted.
    """
    out = Path(out_dir or cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "config.json")
    state = TrainState.create(cfg)
    expected = state.detector.cfg.param_shapes()
    metrics_path, timing_path = out / "metrics.csv", out / "timing.csv"
    if resume is not None:
        state.restore(load_checkpoint(resume, expected))
        _truncate_csv(metrics_path, state.step, _metrics_header())
        _truncate_csv(timing_path, state.step, TIMING_HEADER)
    else:
        metrics_path.write_text(_metrics_header(), encoding="utf-8")
        timing_path.write_text(TIMING_HEADER, encoding="utf-8")

    data = dataset if dataset is not None else build_dataset(cfg)
    end = cfg.iterations if stop_after is None else min(cfg.iterations, stop_after)
    with open(metrics_path, "a", newline="", encoding="utf-8") as mfh, \
            open(timing_path, "a", encoding="utf-8") as tfh:
        writer = csv.writer(mfh, lineterminator="\n")
        while state.step < end:
            row = train_step(state, prepare_batch(cfg, data, state.step))
            writer.writerow(row.csv_fields())
            mfh.flush()
            tfh.write(f"{row.step},{row.wall_ms:.3f}\n")
            logger.info("step %d  L_u=%.4f  contrast=%.4f  cos=%.4f",
                        row.step, row.loss_total, row.loss_contrast, row.matched_cosine)
            if cfg.checkpoint_every and state.step % cfg.checkpoint_every == 0:
                save_checkpoint(state.to_checkpoint(), out / f"checkpoint_{state.step:06d}.bin")
    save_checkpoint(state.to_checkpoint(), out / "checkpoint.bin")
    return out


def read_metrics(path: str | Path) -> list[dict[str, float]]:
    with open(path, newline="", encoding="utf-8") as fh:
        return [{k: float(v) for k, v in row.items()} for row in csv.DictReader(fh)]


__all__ = [
    "Batch", "Dataset", "MetricsRow", "TrainState", "build_dataset", "prepare_batch",
    "pretrain", "read_metrics", "synthetic_dataset", "train_step",
]
