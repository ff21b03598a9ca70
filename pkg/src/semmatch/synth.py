"""Self-supervised pair synthesis: sampled homographies, inverse warping,
photometric distortion, and cell-level ground-truth match derivation.

Geometry and appearance stay separated: distortion touches pixels only and
can never change the planted transform or the ground-truth match sets.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import convolve

from .features import Image, image_from_array
from .geometry import (Correspondence, GeometryError, Homography, fit_dlt,
                       invert, warp_points)


@dataclass
class HomographySamplerConfig:
    """Ranges for the perturbed-corner sampler, in fractions of image size."""
    corner_perturbation: float = 0.2
    rotation_deg: float = 15.0
    scale_min: float = 0.8
    scale_max: float = 1.25
    translation: float = 0.1
    perspective: float = 0.05

    def __post_init__(self):
        if min(self.corner_perturbation, self.rotation_deg, self.translation,
               self.perspective) < 0 or self.scale_min <= 0:
            raise ValueError("sampler ranges must be non-negative")
        if self.scale_max < self.scale_min:
            raise ValueError("scale_max below scale_min")


def corner_shift_bound(cfg: HomographySamplerConfig) -> float:
    """Worst-case unit-square corner displacement under the sampler."""
    r = math.sqrt(0.5)  # corner distance from the square center
    theta = math.radians(cfg.rotation_deg)
    sim = max(r * math.sqrt(s * s + 1.0 - 2.0 * s * math.cos(theta))
              for s in (cfg.scale_min, cfg.scale_max))
    reach = r + sim + cfg.translation * math.sqrt(2.0)
    persp = 0.0
    if cfg.perspective > 0:
        p = cfg.perspective
        denom = 1.0 - 2.0 * p * (0.5 + reach)
        if denom <= 0:
            return float("inf")
        persp = (0.5 + reach) * (2.0 * p * (0.5 + reach)) / denom
    return sim + cfg.translation * math.sqrt(2.0) + persp \
        + cfg.corner_perturbation * math.sqrt(2.0)


_UNIT_CORNERS = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]])


def sample_homography(seed: int, cfg: HomographySamplerConfig,
                      width: int = 1, height: int = 1) -> Homography:
    """Random in-bounds projective transform, deterministic per seed.

    Unit-square corners go through a random similarity, a perspective
    warp and per-corner jitter; the transform is then solved by DLT and
    conjugated to pixel coordinates for the given image size.
    """
    rng = np.random.default_rng(seed)
    for _ in range(100):
        theta = math.radians(rng.uniform(-cfg.rotation_deg, cfg.rotation_deg))
        s = rng.uniform(cfg.scale_min, cfg.scale_max)
        t = rng.uniform(-cfg.translation, cfg.translation, size=2)
        rot = np.array([[math.cos(theta), -math.sin(theta)],
                        [math.sin(theta), math.cos(theta)]])
        pts = (_UNIT_CORNERS - 0.5) @ (s * rot).T + 0.5 + t
        if cfg.perspective > 0:
            g, hcoef = rng.uniform(-cfg.perspective, cfg.perspective, size=2)
            denom = g * pts[:, 0] + hcoef * pts[:, 1] + 1.0
            pts = pts / denom[:, None]
        pts = pts + rng.uniform(-cfg.corner_perturbation,
                                cfg.corner_perturbation, size=(4, 2))
        corrs = [Correspondence(p, q) for p, q in zip(_UNIT_CORNERS, pts)]
        try:
            h_unit = fit_dlt(corrs)
        except GeometryError:
            continue
        scale = np.diag([float(width), float(height), 1.0])
        try:
            return Homography(scale @ h_unit.matrix @ np.linalg.inv(scale))
        except GeometryError:
            continue
    raise GeometryError("could not sample a non-degenerate homography")


def warp_image(img: Image, h: Homography) -> tuple[Image, np.ndarray]:
    """Inverse-warp with bilinear sampling.

    Each target pixel samples warp(h^-1, target) from the source; targets
    falling outside the source become zero with mask False. The mask covers
    the padded frame so downstream cell masking can trust it.
    """
    hinv = invert(h)
    hh, ww = img.pixels.shape
    ys, xs = np.meshgrid(np.arange(hh), np.arange(ww), indexing="ij")
    tgt = np.stack([xs.reshape(-1), ys.reshape(-1)], axis=1).astype(np.float64)
    src = warp_points(hinv, tgt)
    sx = src[:, 0].reshape(hh, ww)
    sy = src[:, 1].reshape(hh, ww)
    inb = (np.isfinite(sx) & np.isfinite(sy)
           & (sx >= 0) & (sx <= ww - 1) & (sy >= 0) & (sy <= hh - 1))
    sx = np.where(inb, sx, 0.0)
    sy = np.where(inb, sy, 0.0)
    x0 = np.floor(sx).astype(int)
    y0 = np.floor(sy).astype(int)
    x1 = np.minimum(x0 + 1, ww - 1)
    y1 = np.minimum(y0 + 1, hh - 1)
    fx = sx - x0
    fy = sy - y0
    p = img.pixels
    out = ((1 - fy) * ((1 - fx) * p[y0, x0] + fx * p[y0, x1])
           + fy * ((1 - fx) * p[y1, x0] + fx * p[y1, x1]))
    out = np.where(inb, out, 0.0).astype(np.float32)
    warped = Image(pixels=np.clip(out, 0.0, 1.0),
                   orig_h=img.orig_h, orig_w=img.orig_w)
    return warped, inb


@dataclass
class PhotometricConfig:
    brightness: float = 0.1
    contrast: float = 0.2
    blur_max_len: int = 3
    noise_sigma: float = 0.02


def apply_brightness(pixels: np.ndarray, offset: float) -> np.ndarray:
    return pixels + offset


def apply_contrast(pixels: np.ndarray, scale: float) -> np.ndarray:
    """Contrast scaling about mid-gray 0.5."""
    return 0.5 + (pixels - 0.5) * scale


def motion_blur_kernel(length: int, angle: float) -> np.ndarray:
    """Normalized 1-px-wide line kernel of the given length and angle."""
    k = np.zeros((length, length))
    cx = (length - 1) / 2.0
    for i in range(length):
        t = i - cx
        x = int(round(cx + t * math.cos(angle)))
        y = int(round(cx + t * math.sin(angle)))
        k[y, x] += 1.0
    return k / k.sum()


def photometric_distort(img: Image, seed: int,
                        cfg: PhotometricConfig) -> Image:
    """Brightness, contrast about 0.5, linear motion blur, Gaussian noise.

    Applied in that fixed order, clamped to [0, 1], deterministic per seed.
    """
    rng = np.random.default_rng(seed)
    px = img.pixels.astype(np.float64)
    if cfg.brightness > 0:
        px = apply_brightness(px, rng.uniform(-cfg.brightness, cfg.brightness))
    if cfg.contrast > 0:
        px = apply_contrast(px, 1.0 + rng.uniform(-cfg.contrast, cfg.contrast))
    if cfg.blur_max_len >= 2:
        length = int(rng.integers(1, cfg.blur_max_len + 1))
        if length >= 2:
            px = convolve(px, motion_blur_kernel(length, rng.uniform(0, math.pi)),
                          mode="nearest")
    if cfg.noise_sigma > 0:
        px = px + rng.normal(0.0, cfg.noise_sigma, size=px.shape)
    return Image(pixels=np.clip(px, 0.0, 1.0).astype(np.float32),
                 orig_h=img.orig_h, orig_w=img.orig_w)


@dataclass
class SyntheticPair:
    image0: Image
    image1: Image
    h_gt: Homography
    mask: np.ndarray  # image1 pixels that originate inside image0


def make_pair(base: Image, seed: int,
              sampler_cfg: HomographySamplerConfig,
              photo_cfg: PhotometricConfig | None = None) -> SyntheticPair:
    """Warp a base image by a sampled homography; distort the warped view."""
    h = sample_homography(int(np.random.default_rng([seed, 0]).integers(2**31)),
                          sampler_cfg, base.width, base.height)
    warped, mask = warp_image(base, h)
    if photo_cfg is not None:
        warped = photometric_distort(
            warped, int(np.random.default_rng([seed, 1]).integers(2**31)),
            photo_cfg)
    return SyntheticPair(image0=base, image1=warped, h_gt=h, mask=mask)


# ---------------------------------------------------------------------------
# ground-truth matches


def gt_matches(h: Homography,
               coarse_hw: tuple[int, int],
               fine_hw: tuple[int, int],
               mask: np.ndarray,
               window: int = 5,
               valid0_coarse: tuple[int, int] | None = None,
               valid1_coarse: tuple[int, int] | None = None
               ) -> tuple[list[tuple[int, int]], list[tuple[int, int, int]]]:
    """Cell-index supervision at both scales from a known homography.

    Coarse: each valid source grid point warps into image 1; the pair is
    kept when the landing spot is masked-in and within half a cell (4 px)
    of a target grid point. Fine: inside w x w windows around each coarse
    pair, the same rule on the half-resolution grid (half cell = 1 px).

    Returns (g_c, g_f): g_c as (i0, i1) flat coarse indices, g_f as
    (k, a, b) with k indexing g_c and a/b flat window cells.
    """
    ch, cw = coarse_hw
    fh, fw = fine_hw
    v0h, v0w = valid0_coarse or (ch, cw)
    v1h, v1w = valid1_coarse or (ch, cw)
    img_h, img_w = mask.shape

    rr, cc = np.meshgrid(np.arange(v0h), np.arange(v0w), indexing="ij")
    src = np.stack([cc.reshape(-1) * 8.0, rr.reshape(-1) * 8.0], axis=1)
    dst = warp_points(h, src)
    g_c: list[tuple[int, int]] = []
    centers: list[tuple[tuple[int, int], tuple[int, int]]] = []
    for k, (r, c) in enumerate(zip(rr.reshape(-1), cc.reshape(-1))):
        x, y = dst[k]
        if not (np.isfinite(x) and np.isfinite(y)):
            continue
        tc = int(math.floor(x / 8.0 + 0.5))
        tr = int(math.floor(y / 8.0 + 0.5))
        if not (0 <= tr < v1h and 0 <= tc < v1w):
            continue
        if math.hypot(x - 8.0 * tc, y - 8.0 * tr) > 4.0:
            continue
        mx = min(max(int(round(x)), 0), img_w - 1)
        my = min(max(int(round(y)), 0), img_h - 1)
        if not mask[my, mx]:
            continue
        g_c.append((int(r) * cw + int(c), tr * cw + tc))
        centers.append(((int(r), int(c)), (tr, tc)))

    half = window // 2
    v1h_f, v1w_f = min(fh, 4 * v1h), min(fw, 4 * v1w)
    g_f: list[tuple[int, int, int]] = []
    for k, ((r0c, c0c), (r1c, c1c)) in enumerate(centers):
        t0r, t0c = 4 * r0c - half, 4 * c0c - half
        t1r, t1c = 4 * r1c - half, 4 * c1c - half
        for a in range(window * window):
            ar, ac = t0r + a // window, t0c + a % window
            if not (0 <= ar < min(fh, 4 * v0h) and 0 <= ac < min(fw, 4 * v0w)):
                continue
            x, y = warp_points(h, np.array([[2.0 * ac, 2.0 * ar]]))[0]
            if not (np.isfinite(x) and np.isfinite(y)):
                continue
            bc = int(math.floor(x / 2.0 + 0.5))
            br = int(math.floor(y / 2.0 + 0.5))
            if not (0 <= br < v1h_f and 0 <= bc < v1w_f):
                continue
            if math.hypot(x - 2.0 * bc, y - 2.0 * br) > 1.0:
                continue
            if not (t1r <= br < t1r + window and t1c <= bc < t1c + window):
                continue
            mx = min(max(int(round(x)), 0), img_w - 1)
            my = min(max(int(round(y)), 0), img_h - 1)
            if not mask[my, mx]:
                continue
            b = (br - t1r) * window + (bc - t1c)
            g_f.append((k, a, b))
    return g_c, g_f


# ---------------------------------------------------------------------------
# procedural source imagery


def _value_noise(rng: np.random.Generator, h: int, w: int,
                 cells: int) -> np.ndarray:
    grid = rng.random((cells + 1, cells + 1))
    ys = np.linspace(0, cells, h)
    xs = np.linspace(0, cells, w)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, cells)
    x1 = np.minimum(x0 + 1, cells)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    top = grid[np.ix_(y0, x0)] * (1 - fx) + grid[np.ix_(y0, x1)] * fx
    bot = grid[np.ix_(y1, x0)] * (1 - fx) + grid[np.ix_(y1, x1)] * fx
    return top * (1 - fy) + bot * fy


def procedural_image(seed: int, height: int = 64, width: int = 64) -> Image:
    """Textured grayscale test card: gradient + multi-octave noise + blobs
    + a checkerboard patch. Deterministic per seed."""
    rng = np.random.default_rng(seed)
    ys, xs = np.meshgrid(np.linspace(0, 1, height), np.linspace(0, 1, width),
                         indexing="ij")
    gx, gy = rng.uniform(-1, 1, size=2)
    img = 0.5 + 0.25 * (gx * xs + gy * ys)
    for cells, amp in ((4, 0.35), (8, 0.25), (16, 0.15)):
        img = img + amp * (_value_noise(rng, height, width, cells) - 0.5)
    for _ in range(rng.integers(2, 5)):
        cy, cx = rng.uniform(0.15, 0.85, size=2)
        sigma = rng.uniform(0.05, 0.15)
        amp = rng.uniform(-0.5, 0.5)
        img = img + amp * np.exp(-((xs - cx) ** 2 + (ys - cy) ** 2)
                                 / (2 * sigma * sigma))
    if rng.random() < 0.7:
        r0 = int(rng.integers(0, height // 2))
        c0 = int(rng.integers(0, width // 2))
        size = int(rng.integers(height // 4, height // 2))
        cell = max(2, int(rng.integers(2, 7)))
        yy, xx = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
        board = ((yy // cell + xx // cell) % 2).astype(np.float64)
        r1 = min(r0 + size, height)
        c1 = min(c0 + size, width)
        img[r0:r1, c0:c1] = 0.5 * img[r0:r1, c0:c1] \
            + 0.5 * board[:r1 - r0, :c1 - c0]
    lo, hi = img.min(), img.max()
    img = (img - lo) / max(hi - lo, 1e-9)
    return image_from_array(img.astype(np.float32))


# ---------------------------------------------------------------------------
# dataset manifests


@dataclass
class DatasetSpec:
    """Parsed manifest: procedural (`synthetic N master_seed`) or image list."""
    entries: list[tuple[str | None, int]] = field(default_factory=list)
    procedural_n: int = 0
    master_seed: int = 0
    image_size: int = 64

    def __len__(self) -> int:
        return self.procedural_n or len(self.entries)

    def base_image(self, index: int) -> Image:
        from .features import load_image
        if self.procedural_n:
            seed = int(np.random.default_rng(
                [self.master_seed, index]).integers(2**31))
            return procedural_image(seed, self.image_size, self.image_size)
        path, _ = self.entries[index]
        return load_image(path)

    def pair_seed(self, index: int) -> int:
        if self.procedural_n:
            return int(np.random.default_rng(
                [self.master_seed, index, 1]).integers(2**31))
        return self.entries[index][1]


def parse_manifest(path_or_text: str, is_text: bool = False) -> DatasetSpec:
    """`synthetic N master_seed` or one `image_path seed` per line."""
    if is_text:
        text = path_or_text
    else:
        with open(path_or_text) as f:
            text = f.read()
    lines = [ln.strip() for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise ValueError("empty dataset manifest")
    first = lines[0].split()
    if first[0] == "synthetic":
        if len(first) != 3:
            raise ValueError("expected: synthetic N master_seed")
        return DatasetSpec(procedural_n=int(first[1]),
                           master_seed=int(first[2]))
    entries = []
    for ln in lines:
        parts = ln.rsplit(None, 1)
        if len(parts) != 2:
            raise ValueError(f"bad manifest line: {ln!r}")
        entries.append((parts[0], int(parts[1])))
    return DatasetSpec(entries=entries)
