"""Image loading, normalization, augmentation, the substitute CNN
feature extractor, and max-aggregation across exam views.

The extractor stands in for the pretrained classification network: three
3x3-conv/ReLU/2x2-maxpool blocks, global average pooling, then an affine
map to the feature size F. Externally computed per-view features can be
imported from a TSV file instead (see import_features).
"""

from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import DataError, ShapeError
from .optim import Params

VIEW_TAGS = ("AP", "L", "S", "unknown")
SIDE_TAGS = ("L", "R", "unknown")


@dataclass
class ViewImage:
    pixels: np.ndarray  # (H, W) float64 in [0, 1]
    view: str = "unknown"
    side: str = "unknown"
    weight_bearing: bool = False

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float64)
        h, w = self.pixels.shape
        if h < 32 or w < 32:
            raise DataError(f"view image {h}x{w} is smaller than the 32px minimum")
        if self.pixels.min() < 0.0 or self.pixels.max() > 1.0:
            raise DataError("view image pixels must lie in [0, 1]")
        if self.view not in VIEW_TAGS:
            raise DataError(f"unknown view tag {self.view!r}")
        if self.side not in SIDE_TAGS:
            raise DataError(f"unknown side tag {self.side!r}")


@dataclass
class Exam:
    exam_id: str
    views: list[ViewImage]
    report: str


# ---------------------------------------------------------------------------
# PGM (P5, 8-bit) image files


def write_pgm(path, pixels):
    arr = np.asarray(pixels, dtype=np.float64)
    data = np.rint(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8)
    h, w = data.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(data.tobytes())


def read_pgm(path):
    with open(path, "rb") as f:
        blob = f.read()
    if not blob.startswith(b"P5"):
        raise DataError(f"{path}: not a binary PGM (P5) file")
    # header = magic, width, height, maxval; '#' comments allowed
    fields, pos = [], 2
    while len(fields) < 3:
        m = re.match(rb"(?:\s+|#[^\n]*\n)*(\d+)", blob[pos:])
        if not m:
            raise DataError(f"{path}: truncated PGM header")
        fields.append(int(m.group(1)))
        pos += m.end()
    w, h, maxval = fields
    if maxval > 255:
        raise DataError(f"{path}: only 8-bit PGM supported (maxval {maxval})")
    pos += 1  # single whitespace byte after maxval
    raster = blob[pos:pos + w * h]
    if len(raster) != w * h:
        raise DataError(f"{path}: truncated PGM raster")
    return np.frombuffer(raster, dtype=np.uint8).reshape(h, w).astype(np.float64) / maxval


# ---------------------------------------------------------------------------
# geometry


def _resize_bilinear(arr, out_h, out_w):
    h, w = arr.shape
    ys = np.linspace(0.0, h - 1.0, out_h)
    xs = np.linspace(0.0, w - 1.0, out_w)
    y0 = np.minimum(ys.astype(np.int64), h - 1)
    x0 = np.minimum(xs.astype(np.int64), w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    top = arr[np.ix_(y0, x0)] * (1 - fx) + arr[np.ix_(y0, x1)] * fx
    bot = arr[np.ix_(y1, x0)] * (1 - fx) + arr[np.ix_(y1, x1)] * fx
    return top * (1 - fy) + bot * fy


def resize_pad_array(arr, target):
    """Scale the longer side to `target` (bilinear, aspect preserved) and
    center with zero padding to target x target."""
    h, w = arr.shape
    if h < 1 or w < 1 or target < 1:
        raise DataError(f"resize_pad: degenerate dims {h}x{w} -> {target}")
    scale = target / max(h, w)
    nh = target if h >= w else max(1, int(round(h * scale)))
    nw = target if w >= h else max(1, int(round(w * scale)))
    resized = _resize_bilinear(arr, nh, nw)
    out = np.zeros((target, target), dtype=np.float64)
    top = (target - nh) // 2
    left = (target - nw) // 2
    out[top:top + nh, left:left + nw] = resized
    return np.clip(out, 0.0, 1.0)


def resize_pad(img: ViewImage, target: int = 224) -> ViewImage:
    if target < 32:
        raise DataError(f"resize_pad: target {target} below the 32px minimum")
    return ViewImage(
        pixels=resize_pad_array(img.pixels, target),
        view=img.view, side=img.side, weight_bearing=img.weight_bearing,
    )


def flip_view(img: ViewImage) -> ViewImage:
    """Mirror along the vertical axis (left-right flip)."""
    return ViewImage(
        pixels=np.fliplr(img.pixels).copy(),
        view=img.view, side=img.side, weight_bearing=img.weight_bearing,
    )


def crop_view(img: ViewImage, top: int, left: int, size: int) -> ViewImage:
    h, w = img.pixels.shape
    if top < 0 or left < 0 or top + size > h or left + size > w:
        raise DataError(f"crop [{top}:{top+size}, {left}:{left+size}] exceeds image {h}x{w}")
    return ViewImage(
        pixels=img.pixels[top:top + size, left:left + size].copy(),
        view=img.view, side=img.side, weight_bearing=img.weight_bearing,
    )


def augment_views(exam: Exam, rng: np.random.Generator, crop_size: int = 224,
                  report_shuffler=None) -> list[Exam]:
    """Eight-fold augmentation: 4 seeded random crops x {unflipped,
    flipped}. Crop offsets are drawn per view from [0, dim - crop_size].
    If report_shuffler is given it is called once per variant as
    shuffler(report, rng) -> report (sentence shuffling)."""
    for v in exam.views:
        h, w = v.pixels.shape
        if h < crop_size or w < crop_size:
            raise DataError(
                f"exam {exam.exam_id}: view {h}x{w} smaller than crop size {crop_size}"
            )
    out = []
    for _ in range(4):
        cropped = []
        for v in exam.views:
            h, w = v.pixels.shape
            top = int(rng.integers(0, h - crop_size + 1))
            left = int(rng.integers(0, w - crop_size + 1))
            cropped.append(crop_view(v, top, left, crop_size))
        for flipped in (False, True):
            views = [flip_view(v) for v in cropped] if flipped else list(cropped)
            report = exam.report
            if report_shuffler is not None:
                report = report_shuffler(exam.report, rng)
            out.append(Exam(exam_id=exam.exam_id, views=views, report=report))
    return out


# ---------------------------------------------------------------------------
# feature extraction


@dataclass
class FeatureVector:
    values: T.Tensor  # shape (F,)
    source: str = "cnn"  # cnn | imported

    def __post_init__(self):
        if self.values.data.ndim != 1:
            raise ShapeError(f"feature vector must be 1D, got {self.values.data.shape}")


def init_cnn_params(params: Params, rng: np.random.Generator, feature_size: int,
                    channels=(8, 16, 32), prefix="cnn."):
    """Conv kernels get He-normal init (ReLU blocks); the head affine is
    Xavier-uniform; biases start at zero."""
    in_c = 1
    for i, c in enumerate(channels, 1):
        fan_in = in_c * 9
        params.add(f"{prefix}conv{i}.w", rng.normal(0.0, np.sqrt(2.0 / fan_in), (c, in_c, 3, 3)))
        params.add(f"{prefix}conv{i}.b", np.zeros(c))
        in_c = c
    bound = np.sqrt(6.0 / (in_c + feature_size))
    params.add(f"{prefix}fc.w", rng.uniform(-bound, bound, (in_c, feature_size)))
    params.add(f"{prefix}fc.b", np.zeros(feature_size))


def cnn_forward(batch: T.Tensor, params: Params, channels=(8, 16, 32), prefix="cnn.") -> T.Tensor:
    """(B, 1, H, W) -> (B, F). H and W must survive len(channels) 2x pools."""
    x = batch
    for i in range(1, len(channels) + 1):
        x = T.maxpool2d(T.relu(T.conv2d(x, params[f"{prefix}conv{i}.w"], params[f"{prefix}conv{i}.b"])))
    x = T.global_avg_pool(x)
    return T.linear(x, params[f"{prefix}fc.w"], params[f"{prefix}fc.b"])


def cnn_extract(img: ViewImage, params: Params, channels=(8, 16, 32)) -> FeatureVector:
    """Per-view feature vector from the substitute CNN; differentiable."""
    batch = T.Tensor(img.pixels[None, None, :, :])
    feats = cnn_forward(batch, params, channels=channels)
    return FeatureVector(values=T.reshape(feats, (feats.data.shape[1],)), source="cnn")


def max_aggregate(features: list[FeatureVector]) -> FeatureVector:
    """Elementwise max across the K per-view vectors. The gradient routes
    to the argmax element per coordinate (ties: lowest view index)."""
    if not features:
        raise ShapeError("max_aggregate: empty feature list")
    dim = features[0].values.data.shape[0]
    for i, f in enumerate(features):
        if f.values.data.shape[0] != dim:
            raise ShapeError(
                f"max_aggregate: view {i} has length {f.values.data.shape[0]}, expected {dim}"
            )
    if len(features) == 1:
        return features[0]
    stacked = T.concat0([T.reshape(f.values, (1, dim)) for f in features])
    return FeatureVector(values=T.reduce_max(stacked, axis=0), source=features[0].source)


def project(agg: FeatureVector, params: Params, prefix="proj.") -> T.Tensor:
    """Affine F -> E; the exam embedding consumed by the LSTM at t=0."""
    return T.linear(agg.values, params[f"{prefix}w"], params[f"{prefix}b"])


def init_projection_params(params: Params, rng: np.random.Generator, feature_size: int,
                           hidden_size: int, prefix="proj."):
    bound = np.sqrt(6.0 / (feature_size + hidden_size))
    params.add(f"{prefix}w", rng.uniform(-bound, bound, (feature_size, hidden_size)))
    params.add(f"{prefix}b", np.zeros(hidden_size))


# ---------------------------------------------------------------------------
# precomputed feature files: exam_id <TAB> view_index <TAB> f0,f1,...,f{F-1}


def export_features(path, features: dict[str, list[np.ndarray]]):
    with open(path, "w", encoding="utf-8") as f:
        for exam_id in features:
            for k, vec in enumerate(features[exam_id]):
                f.write(f"{exam_id}\t{k}\t{','.join(repr(float(x)) for x in vec)}\n")


def import_features(path, feature_size: int, known_exam_ids=None) -> dict[str, list[FeatureVector]]:
    """Load per-view feature vectors; validates length and (optionally)
    that every exam id is known."""
    raw: dict[str, dict[int, np.ndarray]] = {}
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise DataError(f"{path}:{lineno}: expected 3 tab-separated fields")
            exam_id, idx_s, vec_s = parts
            try:
                idx = int(idx_s)
                vec = np.array([float(x) for x in vec_s.split(",")], dtype=np.float64)
            except ValueError as e:
                raise DataError(f"{path}:{lineno}: malformed feature line: {e}") from e
            if vec.shape[0] != feature_size:
                raise DataError(
                    f"{path}:{lineno}: exam {exam_id!r} vector has length "
                    f"{vec.shape[0]}, expected {feature_size}"
                )
            if known_exam_ids is not None and exam_id not in known_exam_ids:
                raise DataError(f"{path}:{lineno}: unknown exam id {exam_id!r}")
            views = raw.setdefault(exam_id, {})
            if idx in views:
                raise DataError(f"{path}:{lineno}: duplicate view index {idx} for exam {exam_id!r}")
            views[idx] = vec
    out = {}
    for exam_id, views in raw.items():
        out[exam_id] = [
            FeatureVector(values=T.Tensor(views[k]), source="imported")
            for k in sorted(views)
        ]
    return out
