"""Selective Search box proposals, their on-disk cache, and the K-box sampler.

Selective Search here is the classic two-stage recipe: a graph-based
over-segmentation (Felzenszwalb & Huttenlocher) followed by greedy merging
of the most similar adjacent regions, emitting the bounding box of every
region ever formed. Similarity is the sum of color-histogram intersection,
size and fill terms; the texture term is left out.
"""

from __future__ import annotations

import heapq
import logging
import os
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np
from scipy.ndimage import gaussian_filter

from .boxes import FULL_IMAGE, BoxSet, centers_array
from .errors import FormatError

logger = logging.getLogger(__name__)

CACHE_MAGIC = b"PSSC"
CACHE_VERSION = 1
HIST_BINS = 25
DEDUP_GRANULARITY = 1e-4


@dataclass(frozen=True)
class SSParams:
    scales: tuple[float, ...] = (100.0, 300.0)
    min_size: int = 20
    sigma: float = 0.8


@dataclass
class SegmentLabelMap:
    labels: np.ndarray  # (H, W) int ids 0..segment_count-1
    segment_count: int

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    @property
    def width(self) -> int:
        return self.labels.shape[1]


# -- segmentation -------------------------------------------------------------------


class _DisjointSet:
    def __init__(self, n: int):
        self.parent = list(range(n))
        self.size = [1] * n
        self.internal = [0.0] * n

    def find(self, x: int) -> int:
        parent = self.parent
        root = x
        while parent[root] != root:
            root = parent[root]
        while parent[x] != root:
            parent[x], x = root, parent[x]
        return root

    def union(self, a: int, b: int, weight: float) -> int:
        if self.size[a] < self.size[b]:
            a, b = b, a
        self.parent[b] = a
        self.size[a] += self.size[b]
        self.internal[a] = weight
        return a


def _grid_edges(h: int, w: int) -> tuple[np.ndarray, np.ndarray]:
    idx = np.arange(h * w).reshape(h, w)
    src = np.concatenate([idx[:, :-1].ravel(), idx[:-1, :].ravel()])
    dst = np.concatenate([idx[:, 1:].ravel(), idx[1:, :].ravel()])
    return src, dst


def felzenszwalb_segment(img: np.ndarray, k: float, min_size: int, sigma: float = 0.8) -> SegmentLabelMap:
    """Graph-based segmentation on the 4-connected pixel grid.

    Edge weights are RGB distances on the 0-255 scale after Gaussian
    smoothing. Components merge when the edge weight is within both
    components' internal difference plus ``k / size``; afterwards segments
    smaller than ``min_size`` are absorbed along the lightest edges.
    """
    h, w = img.shape[:2]
    smooth = img.astype(np.float64) * 255.0
    if sigma > 0:
        smooth = gaussian_filter(smooth, sigma=(sigma, sigma, 0), mode="nearest")
    flat = smooth.reshape(-1, smooth.shape[-1])
    src, dst = _grid_edges(h, w)
    weights = np.sqrt(((flat[src] - flat[dst]) ** 2).sum(axis=1))
    order = np.argsort(weights, kind="stable")
    src_l, dst_l, w_l = src[order].tolist(), dst[order].tolist(), weights[order].tolist()

    ds = _DisjointSet(h * w)
    for a, b, wt in zip(src_l, dst_l, w_l):
        ra, rb = ds.find(a), ds.find(b)
        if ra == rb:
            continue
        if wt <= min(ds.internal[ra] + k / ds.size[ra], ds.internal[rb] + k / ds.size[rb]):
            ds.union(ra, rb, wt)
    for a, b in zip(src_l, dst_l):
        ra, rb = ds.find(a), ds.find(b)
        if ra != rb and (ds.size[ra] < min_size or ds.size[rb] < min_size):
            ds.union(ra, rb, ds.internal[ra])

    roots = np.array([ds.find(i) for i in range(h * w)])
    _, first, inverse = np.unique(roots, return_index=True, return_inverse=True)
    # relabel by first appearance in raster order
    rank = np.empty(len(first), dtype=np.int64)
    rank[np.argsort(first, kind="stable")] = np.arange(len(first))
    labels = rank[inverse].reshape(h, w)
    return SegmentLabelMap(labels, len(first))


# -- hierarchical grouping ------------------------------------------------------------


def _color_histograms(img: np.ndarray, labels: np.ndarray, count: int) -> np.ndarray:
    bins = np.minimum((img * HIST_BINS).astype(int), HIST_BINS - 1)
    hist = np.zeros((count, 3 * HIST_BINS))
    lab = labels.ravel()
    for c in range(3):
        np.add.at(hist, (lab, c * HIST_BINS + bins[..., c].ravel()), 1.0)
    return hist / hist.sum(axis=1, keepdims=True)


def _adjacent_pairs(labels: np.ndarray) -> set[tuple[int, int]]:
    pairs = set()
    for a, b in ((labels[:, :-1], labels[:, 1:]), (labels[:-1, :], labels[1:, :])):
        diff = a != b
        lo = np.minimum(a[diff], b[diff])
        hi = np.maximum(a[diff], b[diff])
        pairs.update(zip(lo.tolist(), hi.tolist()))
    return pairs


def _dedup(corners: np.ndarray) -> np.ndarray:
    seen, keep = set(), []
    for i, row in enumerate(np.round(corners / DEDUP_GRANULARITY).astype(np.int64)):
        key = tuple(row.tolist())
        if key not in seen:
            seen.add(key)
            keep.append(i)
    return corners[keep]


def hierarchical_group(seg: SegmentLabelMap, img: np.ndarray, dedup: bool = True) -> BoxSet:
    """Greedily merge the most similar adjacent regions until one remains.

    Returns the normalized bounding box of every region formed: the
    ``s`` initial segments plus ``s - 1`` merges.
    """
    corners = _group_corners(seg, img)
    if dedup:
        corners = _dedup(corners)
    return BoxSet(centers_array(corners))


def _group_corners(seg: SegmentLabelMap, img: np.ndarray) -> np.ndarray:
    labels, s = seg.labels, seg.segment_count
    h, w = labels.shape
    im_size = float(h * w)
    ys, xs = np.mgrid[0:h, 0:w]
    lab = labels.ravel()
    size = np.bincount(lab, minlength=s).astype(float).tolist()
    bbox = np.stack([
        np.full(s, w), np.full(s, h), np.zeros(s), np.zeros(s),
    ], axis=1).astype(float)
    np.minimum.at(bbox[:, 0], lab, xs.ravel())
    np.minimum.at(bbox[:, 1], lab, ys.ravel())
    np.maximum.at(bbox[:, 2], lab, xs.ravel() + 1)
    np.maximum.at(bbox[:, 3], lab, ys.ravel() + 1)
    boxes = [tuple(b) for b in bbox.tolist()]
    hists = list(_color_histograms(img, labels, s))
    neighbours: dict[int, set[int]] = {i: set() for i in range(s)}
    for a, b in _adjacent_pairs(labels):
        neighbours[a].add(b)
        neighbours[b].add(a)

    def similarity(a: int, b: int) -> float:
        ba, bb = boxes[a], boxes[b]
        enclosing = (max(ba[2], bb[2]) - min(ba[0], bb[0])) * (max(ba[3], bb[3]) - min(ba[1], bb[1]))
        colour = float(np.minimum(hists[a], hists[b]).sum())
        size_sim = 1.0 - (size[a] + size[b]) / im_size
        fill = 1.0 - (enclosing - size[a] - size[b]) / im_size
        return colour + size_sim + fill

    heap = [(-similarity(a, b), a, b) for a in range(s) for b in neighbours[a] if a < b]
    heapq.heapify(heap)
    alive = [True] * s
    while heap:
        _, a, b = heapq.heappop(heap)
        if not (alive[a] and alive[b]):
            continue
        t = len(boxes)
        ba, bb = boxes[a], boxes[b]
        boxes.append((min(ba[0], bb[0]), min(ba[1], bb[1]), max(ba[2], bb[2]), max(ba[3], bb[3])))
        size.append(size[a] + size[b])
        hists.append((size[a] * hists[a] + size[b] * hists[b]) / size[t])
        alive[a] = alive[b] = False
        alive.append(True)
        merged = (neighbours.pop(a) | neighbours.pop(b)) - {a, b}
        neighbours[t] = merged
        for n in sorted(merged):
            neighbours[n] -= {a, b}
            neighbours[n].add(t)
            heapq.heappush(heap, (-similarity(n, t), n, t))

    return np.array(boxes, dtype=np.float64) / np.array([w, h, w, h])


def selective_search(img: np.ndarray, params: SSParams = SSParams()) -> BoxSet:
    """Union of hierarchical grouping over every segmentation scale, deduplicated."""
    parts = []
    for k in params.scales:
        seg = felzenszwalb_segment(img, k, params.min_size, params.sigma)
        parts.append(_group_corners(seg, img))
    return BoxSet(centers_array(_dedup(np.concatenate(parts))))


# -- sampling ----------------------------------------------------------------------------


def sample_boxes(entry: BoxSet, k: int, rng: np.random.Generator) -> BoxSet:
    """Draw ``k`` boxes: without replacement when possible, else with replacement.

    An empty entry yields ``k`` copies of the full-image box.
    """
    n = len(entry)
    if k == 0:
        return BoxSet(np.zeros((0, 4)), entry.image_id)
    if n == 0:
        return BoxSet(np.tile(FULL_IMAGE.as_tuple(), (k, 1)), entry.image_id)
    idx = rng.choice(n, size=k, replace=n < k)
    return BoxSet(entry.data[idx], entry.image_id)


# -- cache file --------------------------------------------------------------------------


def _encode_entry(entry: BoxSet) -> bytes:
    ident = entry.image_id.encode("utf-8")
    data = np.ascontiguousarray(entry.data, dtype="<f4")
    return struct.pack("<I", len(ident)) + ident + struct.pack("<I", len(data)) + data.tobytes()


def write_cache(entries: Iterable[BoxSet], path: str | Path) -> dict[str, int]:
    """Serialise entries; returns image_id -> byte offset of each entry."""
    entries = list(entries)
    offsets: dict[str, int] = {}
    blob = bytearray(CACHE_MAGIC + struct.pack("<II", CACHE_VERSION, len(entries)))
    for e in entries:
        offsets[e.image_id] = len(blob)
        blob += _encode_entry(e)
    Path(path).write_bytes(bytes(blob))
    return offsets


def _read_entry(raw: bytes, pos: int, path) -> tuple[BoxSet, int]:
    try:
        (id_len,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        ident = raw[pos:pos + id_len].decode("utf-8")
        pos += id_len
        (count,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        end = pos + 16 * count
        if end > len(raw):
            raise struct.error("box data runs past end of file")
        data = np.frombuffer(raw[pos:end], dtype="<f4").reshape(count, 4).astype(np.float32)
    except (struct.error, UnicodeDecodeError) as exc:
        raise FormatError(f"{path}: truncated or corrupt cache entry at byte {pos}") from exc
    return BoxSet(data, ident), end


def read_cache(path: str | Path) -> dict[str, BoxSet]:
    raw = Path(path).read_bytes()
    if raw[:4] != CACHE_MAGIC:
        raise FormatError(f"{path}: not a proposal cache (bad magic)")
    if len(raw) < 12:
        raise FormatError(f"{path}: truncated header")
    version, count = struct.unpack_from("<II", raw, 4)
    if version != CACHE_VERSION:
        raise FormatError(f"{path}: unsupported cache version {version}")
    pos, out = 12, {}
    for _ in range(count):
        entry, pos = _read_entry(raw, pos, path)
        out[entry.image_id] = entry
    return out


def read_cache_entry(path: str | Path, offset: int) -> BoxSet:
    raw = Path(path).read_bytes()
    if raw[:4] != CACHE_MAGIC:
        raise FormatError(f"{path}: not a proposal cache (bad magic)")
    return _read_entry(raw, offset, path)[0]


def manifest_path(cache_path: str | Path) -> Path:
    return Path(str(cache_path) + ".manifest")


def read_manifest(path: str | Path) -> dict[str, int | None]:
    """image_id -> byte offset, or None for images that were skipped."""
    out: dict[str, int | None] = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line:
            continue
        ident, _, value = line.rpartition("\t")
        out[ident] = None if value == "skipped" else int(value)
    return out


def thread_count() -> int:
    raw = os.environ.get("PROSECO_THREADS")
    if raw:
        try:
            return max(1, int(raw))
        except ValueError:
            logger.warning("ignoring non-integer PROSECO_THREADS=%r", raw)
    return os.cpu_count() or 1


def list_images(directory: str | Path) -> list[tuple[str, Path]]:
    return [(p.stem, p) for p in sorted(Path(directory).glob("*.ppm"))]


def precompute_cache(dataset, params: SSParams, out: str | Path) -> dict[str, int | None]:
    """Run Selective Search on every image and write cache + manifest.

    ``dataset`` is a directory of ``.ppm`` files or an iterable of
    ``(image_id, path_or_array)``. Unreadable images are skipped with a
    warning and marked ``skipped`` in the manifest.
    """
    from .pipeline import load_image

    items = list_images(dataset) if isinstance(dataset, (str, Path)) else list(dataset)
    items.sort(key=lambda item: item[0])

    def work(item):
        ident, source = item
        try:
            img = load_image(source) if isinstance(source, (str, Path)) else np.asarray(source, np.float32)
        except (IOError, ValueError) as exc:
            logger.warning("skipping %s: %s", ident, exc)
            return ident, None
        boxes = selective_search(img, params)
        boxes.image_id = ident
        return ident, boxes

    with ThreadPoolExecutor(max_workers=thread_count()) as pool:
        results = list(pool.map(work, items))
    entries = [boxes for _, boxes in results if boxes is not None]
    offsets = write_cache(entries, out)
    manifest: dict[str, int | None] = {ident: offsets.get(ident) for ident, _ in results}
    lines = [f"{ident}\t{'skipped' if off is None else off}" for ident, off in manifest.items()]
    manifest_path(out).write_text("".join(line + "\n" for line in lines), encoding="utf-8")
    return manifest
