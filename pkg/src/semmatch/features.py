"""Image ingestion, the toy multi-scale backbone, and semantic providers.

Images are grayscale in [0, 1], zero-padded to multiples of 8. The backbone
is a small strided conv stack (1/8 coarse, 1/2 fine). Semantic grids come
either from a deterministic histogram+DCT toy descriptor or from SRMT blobs
written by an external exporter; neither source ever receives gradients.
"""
from __future__ import annotations

import math
import os
from dataclasses import dataclass

import numpy as np
from scipy.fft import dctn

from . import blob
from .tensor import Tensor, conv2d, fan_in_uniform, relu

COARSE_SCALE = 1.0 / 8.0
FINE_SCALE = 1.0 / 2.0
COARSE_CHANNELS = 64
FINE_CHANNELS = 32
TOY_SEMANTIC_CHANNELS = 24


class ImageFormatError(ValueError):
    pass


@dataclass
class Image:
    pixels: np.ndarray  # (H, W) float32 in [0,1], dims multiples of 8
    orig_h: int
    orig_w: int

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


def image_from_array(arr: np.ndarray) -> Image:
    """Wrap a [0,1] grayscale array, zero-padding dims up to multiples of 8."""
    arr = np.asarray(arr, dtype=np.float32)
    if arr.ndim != 2:
        raise ImageFormatError(f"expected 2D grayscale, got shape {arr.shape}")
    if arr.size == 0:
        raise ImageFormatError("empty image")
    if np.any(arr < 0) or np.any(arr > 1) or not np.all(np.isfinite(arr)):
        raise ImageFormatError("pixels must lie in [0, 1]")
    h, w = arr.shape
    ph = (8 - h % 8) % 8
    pw = (8 - w % 8) % 8
    if ph or pw:
        arr = np.pad(arr, ((0, ph), (0, pw)))
    return Image(pixels=arr, orig_h=h, orig_w=w)


def _read_pnm_tokens(raw: bytes, count: int, start: int) -> tuple[list[bytes], int]:
    toks: list[bytes] = []
    i = start
    while len(toks) < count:
        while i < len(raw) and raw[i:i + 1].isspace():
            i += 1
        if i < len(raw) and raw[i:i + 1] == b"#":
            while i < len(raw) and raw[i] != 0x0A:
                i += 1
            continue
        j = i
        while j < len(raw) and not raw[j:j + 1].isspace():
            j += 1
        if j == i:
            raise ImageFormatError("truncated PNM header")
        toks.append(raw[i:j])
        i = j
    return toks, i + 1  # skip the single whitespace after maxval


def load_image(path: str | os.PathLike) -> Image:
    """Load a binary PGM (P5) or PPM (P6) with maxval 255.

    PPM converts to grayscale with luma weights (0.299, 0.587, 0.114);
    intensities scale to [0, 1] and dims pad up to multiples of 8.
    """
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:2] not in (b"P5", b"P6"):
        raise ImageFormatError(f"unsupported PNM magic {raw[:2]!r}")
    color = raw[:2] == b"P6"
    toks, off = _read_pnm_tokens(raw, 3, 2)
    w, h, maxval = (int(t) for t in toks)
    if maxval != 255:
        raise ImageFormatError(f"unsupported maxval {maxval}")
    nch = 3 if color else 1
    payload = raw[off:off + w * h * nch]
    if len(payload) != w * h * nch:
        raise ImageFormatError("truncated pixel payload")
    data = np.frombuffer(payload, dtype=np.uint8).astype(np.float32) / 255.0
    if color:
        rgb = data.reshape(h, w, 3)
        gray = rgb @ np.array([0.299, 0.587, 0.114], dtype=np.float32)
    else:
        gray = data.reshape(h, w)
    return image_from_array(np.clip(gray, 0.0, 1.0))


def save_pgm(path: str | os.PathLike, img: Image,
             original_extent: bool = True) -> None:
    """Write a binary P5 PGM with maxval 255."""
    px = img.pixels
    if original_extent:
        px = px[:img.orig_h, :img.orig_w]
    data = np.clip(np.round(px * 255.0), 0, 255).astype(np.uint8)
    h, w = data.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode())
        f.write(data.tobytes())


@dataclass
class FeatureMap:
    """Dense grid of descriptors at a fixed fraction of image resolution.

    `valid_h`/`valid_w` bound the cells backed by real (unpadded) pixels;
    `tensor` carries the tape-tracked view of `values` during training.
    """
    values: np.ndarray  # (grid_h, grid_w, channels)
    scale: float
    origin: str  # coarse | enhanced | fused | fine | semantic
    valid_h: int
    valid_w: int
    tensor: Tensor | None = None

    @property
    def grid_h(self) -> int:
        return self.values.shape[0]

    @property
    def grid_w(self) -> int:
        return self.values.shape[1]

    @property
    def channels(self) -> int:
        return self.values.shape[2]

    def valid_mask(self) -> np.ndarray:
        m = np.zeros((self.grid_h, self.grid_w), dtype=bool)
        m[:self.valid_h, :self.valid_w] = True
        return m


def _valid_cells(orig: int, scale: float) -> int:
    return int(math.ceil(orig * scale))


def init_backbone_params(rng: np.random.Generator) -> dict[str, np.ndarray]:
    """Three stride-2 stages to 1/8 (coarse) plus a one-conv fine branch.

    The fine branch reads the half-resolution trunk features rather than
    raw pixels: a pixel-level 3x3 tap has too small a receptive field to
    tell half-resolution cells apart.
    """
    p: dict[str, np.ndarray] = {}
    stages = [("backbone.c1", 1, 16), ("backbone.c2", 16, 32),
              ("backbone.c3", 32, COARSE_CHANNELS)]
    for name, cin, cout in stages:
        p[f"{name}.w"] = fan_in_uniform(rng, 9 * cin, (3, 3, cin, cout))
        p[f"{name}.b"] = fan_in_uniform(rng, 9 * cin, (cout,))
    p["backbone.f1.w"] = fan_in_uniform(rng, 9 * 16, (3, 3, 16, FINE_CHANNELS))
    p["backbone.f1.b"] = fan_in_uniform(rng, 9 * 16, (FINE_CHANNELS,))
    return p


def _t(params, key: str) -> Tensor:
    v = params[key]
    return v if isinstance(v, Tensor) else Tensor(v)


def extract_pyramid(img: Image, params) -> tuple[FeatureMap, FeatureMap]:
    """Coarse 1/8 and fine 1/2 feature maps from the toy conv stack.

    `params` maps backbone keys to arrays or tape-tracked Tensors; passing
    tracked tensors makes both output maps differentiable.
    """
    x = Tensor(img.pixels[:, :, None])
    h1 = relu(conv2d(x, _t(params, "backbone.c1.w"), _t(params, "backbone.c1.b"),
                     stride=2, pad=1))
    h2 = relu(conv2d(h1, _t(params, "backbone.c2.w"), _t(params, "backbone.c2.b"),
                     stride=2, pad=1))
    coarse = conv2d(h2, _t(params, "backbone.c3.w"), _t(params, "backbone.c3.b"),
                    stride=2, pad=1)
    fine = conv2d(h1, _t(params, "backbone.f1.w"), _t(params, "backbone.f1.b"),
                  stride=1, pad=1)
    cmap = FeatureMap(coarse.data, COARSE_SCALE, "coarse",
                      _valid_cells(img.orig_h, COARSE_SCALE),
                      _valid_cells(img.orig_w, COARSE_SCALE), tensor=coarse)
    fmap = FeatureMap(fine.data, FINE_SCALE, "fine",
                      _valid_cells(img.orig_h, FINE_SCALE),
                      _valid_cells(img.orig_w, FINE_SCALE), tensor=fine)
    return cmap, fmap


# ---------------------------------------------------------------------------
# semantic providers (frozen: plain numpy, never on a tape)

_DCT_ORDER = [(0, 0), (0, 1), (1, 0), (0, 2), (1, 1), (2, 0), (0, 3), (1, 2)]
_HIST_BINS = 16


def _discover_blob_channels(blob_dir) -> int:
    """Channel width of a blob directory, from any .srmt file in it."""
    for name in sorted(os.listdir(blob_dir)):
        if name.endswith(".srmt"):
            arr = blob.load_tensor(os.path.join(blob_dir, name))
            if arr.ndim == 3:
                return int(arr.shape[2])
    raise ValueError(f"no semantic blobs under {blob_dir}")


def _patch_descriptor(patch: np.ndarray) -> np.ndarray:
    hist, _ = np.histogram(patch, bins=_HIST_BINS, range=(0.0, 1.0))
    hist = hist.astype(np.float64) / patch.size
    coeffs = dctn(patch.astype(np.float64), norm="ortho")
    dct8 = np.array([coeffs[u, v] for u, v in _DCT_ORDER])
    return np.concatenate([hist, dct8])


class SemanticProvider:
    """Deterministic source of semantic grids; its parameters never train.

    Toy mode computes a per-8x8-patch histogram+DCT descriptor projected
    through a fixed seeded matrix. File mode reads `<dir>/<image_id>.srmt`
    grids written by an external exporter.
    """

    def __init__(self, mode: str = "toy",
                 channels: int | None = None,
                 seed: int = 7,
                 blob_dir: str | os.PathLike | None = None):
        if mode not in ("toy", "file"):
            raise ValueError(f"unknown provider mode {mode!r}")
        if mode == "file" and blob_dir is None:
            raise ValueError("file mode needs blob_dir")
        self.mode = mode
        self.blob_dir = blob_dir
        if channels is None and mode == "toy":
            channels = TOY_SEMANTIC_CHANNELS
        self._channels = channels
        if mode == "toy":
            rng = np.random.default_rng(seed)
            raw_dim = _HIST_BINS + len(_DCT_ORDER)
            self._projection = rng.standard_normal(
                (raw_dim, channels)) / np.sqrt(raw_dim)

    @property
    def channels(self) -> int:
        if self._channels is None:  # file mode: read the width off a blob
            self._channels = _discover_blob_channels(self.blob_dir)
        return self._channels

    def extract(self, img: Image, image_id: str | None = None) -> FeatureMap:
        if self.mode == "file":
            return self._from_file(img, image_id)
        return self._toy(img)

    def _toy(self, img: Image) -> FeatureMap:
        gh, gw = img.height // 8, img.width // 8
        out = np.empty((gh, gw, self.channels), dtype=np.float32)
        for r in range(gh):
            for c in range(gw):
                patch = img.pixels[r * 8:(r + 1) * 8, c * 8:(c + 1) * 8]
                out[r, c] = (_patch_descriptor(patch) @ self._projection
                             ).astype(np.float32)
        return FeatureMap(out, COARSE_SCALE, "semantic",
                          _valid_cells(img.orig_h, COARSE_SCALE),
                          _valid_cells(img.orig_w, COARSE_SCALE))

    def _from_file(self, img: Image, image_id: str | None) -> FeatureMap:
        if image_id is None:
            raise ValueError("file mode needs an image_id")
        arr = blob.load_tensor(os.path.join(self.blob_dir, f"{image_id}.srmt"))
        if arr.ndim != 3:
            raise blob.BlobFormatError(f"semantic blob must be 3D, got {arr.ndim}D")
        # the exporter's grid covers the full frame; resampling to the coarse
        # grid happens downstream, so every cell over real pixels is valid
        return FeatureMap(arr, COARSE_SCALE, "semantic",
                          arr.shape[0], arr.shape[1])


def bilinear_resize_grid(values: np.ndarray, target_h: int,
                         target_w: int) -> np.ndarray:
    """Corner-aligned bilinear resample of an (h, w, c) grid."""
    h, w, _ = values.shape
    if target_h <= 0 or target_w <= 0:
        raise ValueError("target dims must be positive")
    ys = (np.linspace(0, h - 1, target_h) if target_h > 1
          else np.zeros(1))
    xs = (np.linspace(0, w - 1, target_w) if target_w > 1
          else np.zeros(1))
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0)[:, None, None]
    fx = (xs - x0)[None, :, None]
    v00 = values[np.ix_(y0, x0)]
    v01 = values[np.ix_(y0, x1)]
    v10 = values[np.ix_(y1, x0)]
    v11 = values[np.ix_(y1, x1)]
    top = v00 * (1 - fx) + v01 * fx
    bot = v10 * (1 - fx) + v11 * fx
    return (top * (1 - fy) + bot * fy).astype(values.dtype)


def resize_semantic(s: FeatureMap, target_h: int, target_w: int) -> FeatureMap:
    """Bilinear resample of a semantic grid onto the coarse grid.

    The learned channel projection to the image-feature width is applied
    separately in the fusion pipeline (it is part of the trainable model).
    """
    if s.channels <= 0:
        raise ValueError("semantic map has no channels")
    resized = bilinear_resize_grid(s.values, target_h, target_w)
    vh = min(target_h, int(round(s.valid_h * target_h / max(s.grid_h, 1))))
    vw = min(target_w, int(round(s.valid_w * target_w / max(s.grid_w, 1))))
    return FeatureMap(resized, COARSE_SCALE, "semantic",
                      max(vh, 1), max(vw, 1))
