"""Images, synthetic scenes, and the weak/strong view augmentations.

Images are ``(H, W, 3)`` float32 arrays with values in [0, 1].

The weak augmentation is geometric (flip, resize, random-size crop) and
returns an :class:`AugRecord` so that boxes computed on the original image
can be carried into the view's frame with :func:`transport_boxes`. The
strong augmentation is photometric only; it never moves pixels, which is why
student boxes on the strong view and teacher boxes on the weak view share one
coordinate frame.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter
from skimage.color import hsv2rgb, rgb2hsv

from .boxes import BoxN, BoxSet, centers_array, corners_array

# Large/mid-scale short-edge choices and crop bounds, in pixels at 800px reference.
LARGE_SCALES = tuple(range(480, 801, 32))
MID_SCALES = tuple(range(320, 481, 16))
PRE_CROP_SCALES = (400, 500, 600)
CROP_MIN, CROP_MAX = 384, 600
REFERENCE_SIZE = 800

JITTER = (0.4, 0.4, 0.4, 0.1)
BLUR_SIGMA = (0.1, 2.0)
CROP_KEEP_FRACTION = 0.1


def _scaled(values, input_size: int) -> list[int]:
    return [max(1, int(round(v * input_size / REFERENCE_SIZE))) for v in values]


# -- geometry primitives -----------------------------------------------------------


def resize(img: np.ndarray, height: int, width: int) -> np.ndarray:
    """Bilinear resize with half-pixel centers."""
    h, w = img.shape[:2]
    if (h, w) == (height, width):
        return img.copy()
    ys = np.clip((np.arange(height) + 0.5) * h / height - 0.5, 0, h - 1)
    xs = np.clip((np.arange(width) + 0.5) * w / width - 0.5, 0, w - 1)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0)[:, None, None]
    fx = (xs - x0)[None, :, None]
    top = img[y0][:, x0] * (1 - fx) + img[y0][:, x1] * fx
    bottom = img[y1][:, x0] * (1 - fx) + img[y1][:, x1] * fx
    return (top * (1 - fy) + bottom * fy).astype(np.float32)


def resize_short_edge(img: np.ndarray, short: int) -> np.ndarray:
    h, w = img.shape[:2]
    if h <= w:
        size = (short, max(1, int(round(short * w / h))))
    else:
        size = (max(1, int(round(short * h / w))), short)
    return resize(img, *size)


@dataclass
class AugRecord:
    """Geometric ops applied to produce a weak view, in order.

    Each op is a dict: ``{"op": "flip"}``, ``{"op": "resize", "size": [h, w]}``
    or ``{"op": "crop", "rect": [x0, y0, w, h], "source": [H, W]}``.
    """

    ops: list[dict] = field(default_factory=list)

    def apply(self, img: np.ndarray) -> np.ndarray:
        out = img
        for op in self.ops:
            if op["op"] == "flip":
                out = out[:, ::-1].copy()
            elif op["op"] == "resize":
                out = resize(out, *op["size"])
            elif op["op"] == "crop":
                x0, y0, cw, ch = op["rect"]
                out = out[y0:y0 + ch, x0:x0 + cw].copy()
            else:
                raise ValueError(f"unknown augmentation op {op['op']!r}")
        return np.clip(out, 0.0, 1.0).astype(np.float32)


def weak_augment(img: np.ndarray, rng: np.random.Generator, image_scale: str = "large",
                 input_size: int = 64) -> tuple[np.ndarray, AugRecord]:
    """Flip (p=0.5), then either a plain resize or resize -> random crop -> resize.

    Pixel constants are defined at an 800px reference and scaled by
    ``input_size / 800``.
    """
    scales = _scaled(LARGE_SCALES if image_scale == "large" else MID_SCALES, input_size)
    ops: list[dict] = []
    if rng.random() < 0.5:
        ops.append({"op": "flip"})
    h, w = img.shape[:2]

    def short_edge_size(hh, ww, short):
        if hh <= ww:
            return [short, max(1, int(round(short * ww / hh)))]
        return [max(1, int(round(short * hh / ww))), short]

    if rng.random() < 0.5:
        ops.append({"op": "resize", "size": short_edge_size(h, w, int(rng.choice(scales)))})
    else:
        pre = short_edge_size(h, w, int(rng.choice(_scaled(PRE_CROP_SCALES, input_size))))
        ops.append({"op": "resize", "size": pre})
        ph, pw = pre
        lo, hi = _scaled((CROP_MIN, CROP_MAX), input_size)
        cw = int(rng.integers(min(lo, pw), min(pw, hi) + 1))
        ch = int(rng.integers(min(lo, ph), min(ph, hi) + 1))
        x0 = int(rng.integers(0, pw - cw + 1))
        y0 = int(rng.integers(0, ph - ch + 1))
        ops.append({"op": "crop", "rect": [x0, y0, cw, ch], "source": [ph, pw]})
        ops.append({"op": "resize", "size": short_edge_size(ch, cw, int(rng.choice(scales)))})
    record = AugRecord(ops)
    return record.apply(img), record


def transport_boxes(boxes: BoxSet, record: AugRecord) -> BoxSet:
    """Carry normalized boxes from the original image into the weak view's frame."""
    c = corners_array(boxes.data)
    keep = np.ones(len(c), dtype=bool)
    for op in record.ops:
        if op["op"] == "flip":
            c = np.stack([1 - c[:, 2], c[:, 1], 1 - c[:, 0], c[:, 3]], axis=1)
        elif op["op"] == "crop":
            x0, y0, cw, ch = op["rect"]
            sh, sw = op["source"]
            px = c * np.array([sw, sh, sw, sh])
            area = (px[:, 2] - px[:, 0]) * (px[:, 3] - px[:, 1])
            clipped = np.stack([
                np.clip(px[:, 0], x0, x0 + cw), np.clip(px[:, 1], y0, y0 + ch),
                np.clip(px[:, 2], x0, x0 + cw), np.clip(px[:, 3], y0, y0 + ch),
            ], axis=1)
            kept = (clipped[:, 2] - clipped[:, 0]) * (clipped[:, 3] - clipped[:, 1])
            keep &= kept >= CROP_KEEP_FRACTION * area
            c = (clipped - np.array([x0, y0, x0, y0])) / np.array([cw, ch, cw, ch])
    c = np.clip(c[keep], 0.0, 1.0)
    return BoxSet(centers_array(c), boxes.image_id)


def strong_augment(img: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Color jitter (p=0.8), grayscale (p=0.2), Gaussian blur (p=0.5)."""
    out = img.astype(np.float32)
    if rng.random() < 0.8:
        b, c, s, h = JITTER
        factors = {
            "brightness": rng.uniform(1 - b, 1 + b),
            "contrast": rng.uniform(1 - c, 1 + c),
            "saturation": rng.uniform(1 - s, 1 + s),
            "hue": rng.uniform(-h, h),
        }
        for name in rng.permutation(list(factors)):
            out = color_jitter(out, **{name: factors[name]})
    if rng.random() < 0.2:
        out = grayscale(out)
    if rng.random() < 0.5:
        lo, hi = BLUR_SIGMA
        out = blur(out, float(math.exp(rng.uniform(math.log(lo), math.log(hi)))))
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def _luma(img: np.ndarray) -> np.ndarray:
    return img[..., 0] * 0.299 + img[..., 1] * 0.587 + img[..., 2] * 0.114


def grayscale(img: np.ndarray) -> np.ndarray:
    return np.repeat(_luma(img)[..., None], 3, axis=2).astype(np.float32)


def color_jitter(img: np.ndarray, brightness: float = 1.0, contrast: float = 1.0,
                 saturation: float = 1.0, hue: float = 0.0) -> np.ndarray:
    """Apply any subset of the four jitter adjustments; neutral values are no-ops."""
    out = img
    if brightness != 1.0:
        out = np.clip(out * brightness, 0, 1)
    if contrast != 1.0:
        out = np.clip((out - _luma(out).mean()) * contrast + _luma(out).mean(), 0, 1)
    if saturation != 1.0:
        gray = _luma(out)[..., None]
        out = np.clip((out - gray) * saturation + gray, 0, 1)
    if hue != 0.0:
        hsv = rgb2hsv(out)
        hsv[..., 0] = (hsv[..., 0] + hue) % 1.0
        out = hsv2rgb(hsv)
    return out.astype(np.float32)


def blur(img: np.ndarray, sigma: float) -> np.ndarray:
    return gaussian_filter(img, sigma=(sigma, sigma, 0), mode="reflect", truncate=4.0).astype(np.float32)


# -- synthetic scenes --------------------------------------------------------------


SHAPE_KINDS = ("rectangle", "ellipse", "triangle")


@dataclass
class SceneShape:
    kind: str
    color: tuple[float, float, float]
    box: tuple[float, float, float, float]


@dataclass
class SceneSpec:
    background: tuple[float, float, float]
    shapes: list[SceneShape] = field(default_factory=list)

    def ground_truth(self) -> BoxSet:
        return BoxSet(np.array([s.box for s in self.shapes], dtype=np.float32).reshape(-1, 4))

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)


def _shape_mask(kind: str, size: int, x0: int, y0: int, w: int, h: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    if kind == "rectangle":
        return (xx >= x0) & (xx < x0 + w) & (yy >= y0) & (yy < y0 + h)
    if kind == "ellipse":
        cx, cy = x0 + w / 2, y0 + h / 2
        return ((xx - cx) / (w / 2)) ** 2 + ((yy - cy) / (h / 2)) ** 2 <= 1.0
    # isoceles triangle with apex at the top center
    inside = (yy >= y0) & (yy < y0 + h)
    frac = (yy - y0) / h
    half = frac * w / 2
    cx = x0 + w / 2
    return inside & (xx >= cx - half) & (xx <= cx + half)


def _tight_box(mask: np.ndarray, size: int) -> tuple[float, float, float, float]:
    ys, xs = np.nonzero(mask)
    x1, x2 = xs.min(), xs.max() + 1
    y1, y2 = ys.min(), ys.max() + 1
    return ((x1 + x2) / 2 / size, (y1 + y2) / 2 / size, (x2 - x1) / size, (y2 - y1) / size)


def _distinct_color(rng, avoid: list[np.ndarray], min_gap: float = 0.2) -> np.ndarray:
    for _ in range(100):
        c = rng.random(3)
        if all(np.abs(c - a).max() >= min_gap for a in avoid):
            return c
    return 1.0 - avoid[0]


def synth_scene(rng: np.random.Generator, size: int = 64, num_shapes: int | None = None,
                min_extent: float = 0.15, max_extent: float = 0.5,
                max_overlap: float = 0.3,
                layout: list[tuple[str, BoxN]] | None = None) -> tuple[np.ndarray, SceneSpec]:
    """Render 1-5 flat-colored shapes on a flat background.

    Shapes are painted back to front. ``layout`` pins the kinds and boxes
    instead of sampling them. Ground-truth boxes are tight around each
    shape's own rasterised mask; they exist for diagnostics only.
    """
    if layout is not None:
        num_shapes = len(layout)
    elif num_shapes is None:
        num_shapes = int(rng.integers(1, 6))
    background = rng.random(3)
    img = np.broadcast_to(background, (size, size, 3)).astype(np.float32).copy()
    spec = SceneSpec(tuple(float(v) for v in background))
    colors = [background]
    placed: list[np.ndarray] = []
    for index in range(num_shapes):
        if layout is not None:
            kind, pinned = layout[index]
            x1, y1, x2, y2 = (np.array(pinned.to_corners()) * size).round().astype(int)
            _place_shape(img, spec, colors, placed, rng, kind, size, x1, y1, x2 - x1, y2 - y1)
            continue
        for _attempt in range(50):
            w = int(round(rng.uniform(min_extent, max_extent) * size))
            h = int(round(rng.uniform(min_extent, max_extent) * size))
            x0 = int(rng.integers(0, size - w + 1))
            y0 = int(rng.integers(0, size - h + 1))
            box = np.array([x0, y0, x0 + w, y0 + h], dtype=float)
            if all(_overlap_fraction(box, other) <= max_overlap for other in placed):
                break
        kind = SHAPE_KINDS[int(rng.integers(len(SHAPE_KINDS)))]
        _place_shape(img, spec, colors, placed, rng, kind, size, x0, y0, w, h)
    return img, spec


def _place_shape(img, spec, colors, placed, rng, kind, size, x0, y0, w, h) -> None:
    mask = _shape_mask(kind, size, x0, y0, w, h)
    if not mask.any():
        return
    color = _distinct_color(rng, colors)
    colors.append(color)
    placed.append(np.array([x0, y0, x0 + w, y0 + h], dtype=float))
    img[mask] = color
    spec.shapes.append(SceneShape(kind, tuple(float(v) for v in color), _tight_box(mask, size)))


def _overlap_fraction(a: np.ndarray, b: np.ndarray) -> float:
    iw = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    ih = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    smaller = min((a[2] - a[0]) * (a[3] - a[1]), (b[2] - b[0]) * (b[3] - b[1]))
    return iw * ih / smaller


# -- image files ------------------------------------------------------------------


def save_image(img: np.ndarray, path: str | Path) -> None:
    """Write a binary PPM (P6, maxval 255); values are quantised to 8 bits."""
    arr = np.clip(np.round(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)
    h, w = arr.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(arr.tobytes())


def load_image(path: str | Path) -> np.ndarray:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise IOError(f"cannot read image {path}: {exc.strerror or exc}") from exc
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise IOError(f"truncated image header in {path}")
        tokens.append(raw[start:pos])
    if tokens[0] != b"P6":
        raise IOError(f"unsupported image format in {path} (expected binary PPM 'P6')")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise IOError(f"malformed image header in {path}") from exc
    if maxval != 255 or w < 1 or h < 1:
        raise IOError(f"unsupported PPM geometry or maxval in {path}")
    pos += 1
    body = raw[pos:pos + w * h * 3]
    if len(body) != w * h * 3:
        raise IOError(f"truncated pixel data in {path}")
    return (np.frombuffer(body, dtype=np.uint8).reshape(h, w, 3) / 255.0).astype(np.float32)
