"""Coarse dual-softmax matching, windowed fine matching, and the pipeline.

Coarse: L2-normalized fused tokens score by inner product over temperature,
dual-softmax turns scores into mutual confidences, and matches are the
thresholded mutual nearest neighbors. Fine: a w x w window around 4x each
coarse index on the half-resolution maps, the same dual-softmax + mutual
selection inside the window pair, cells mapped back to sub-pixel positions.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .features import (FeatureMap, Image, extract_pyramid, init_backbone_params,
                       resize_semantic)
from .fusion import (enhance, init_enhancer_params, init_sfb_params, sfb_forward)
from .tensor import (Tensor, fan_in_uniform, l2_normalize_rows, linear,
                     matmul, mul, mul_const, reshape, softmax, take_rows,
                     transpose2d)


class MatchingError(ValueError):
    pass


@dataclass
class MatcherConfig:
    coarse_temperature: float = 0.1
    coarse_threshold: float = 0.2
    window: int = 5
    fine_temperature: float = 0.1
    fine_threshold: float = 0.2
    enhancer_layers: int = 4
    stage2_repeats: int = 1
    use_sfb: bool = True
    cross_image_fusion: bool = True
    overlap_fine: bool = True
    semantic_mode: str = "toy"  # toy | file


@dataclass
class CoarseMatch:
    i: int  # flat token index in image 0
    j: int  # flat token index in image 1
    confidence: float


@dataclass
class FineMatch:
    p0: tuple[float, float]  # sub-pixel (x, y) in image 0
    p1: tuple[float, float]
    confidence: float


def init_model_params(seed: int, semantic_channels: int,
                      cfg: MatcherConfig) -> dict[str, np.ndarray]:
    """All trainable arrays; the frozen semantic extractor stays outside."""
    from .features import COARSE_CHANNELS
    rng = np.random.default_rng(seed)
    params = init_backbone_params(rng)
    params.update(init_enhancer_params(rng, COARSE_CHANNELS,
                                       cfg.enhancer_layers))
    params.update(init_sfb_params(rng, COARSE_CHANNELS, cfg.stage2_repeats))
    params["sem_proj.w"] = fan_in_uniform(rng, semantic_channels,
                                          (semantic_channels, COARSE_CHANNELS))
    params["sem_proj.b"] = np.zeros(COARSE_CHANNELS, dtype=np.float32)
    return params


def _t(params, key: str) -> Tensor:
    v = params[key]
    return v if isinstance(v, Tensor) else Tensor(v)


# ---------------------------------------------------------------------------
# coarse matching


def similarity_matrix(f0: FeatureMap, f1: FeatureMap,
                      temperature: float = 0.1) -> np.ndarray:
    """Token inner products over temperature; padded rows/cols become -inf."""
    if f0.channels != f1.channels:
        raise MatchingError(f"channel mismatch: {f0.channels} vs {f1.channels}")
    a = f0.values.reshape(-1, f0.channels)
    b = f1.values.reshape(-1, f1.channels)
    scores = (a @ b.T) / temperature
    pair = f0.valid_mask().reshape(-1)[:, None] & f1.valid_mask().reshape(-1)[None, :]
    return np.where(pair, scores, -np.inf)


def dual_softmax(scores: np.ndarray) -> np.ndarray:
    """Product of row- and column-softmax; -inf entries are masked out."""
    scores = np.asarray(scores, dtype=np.float64)
    mask = np.isfinite(scores)
    if not mask.any():
        raise MatchingError("all entries masked")
    finite = np.where(mask, scores, 0.0)
    t = Tensor(finite)
    p = mul(softmax(t, axis=1, mask=mask), softmax(t, axis=0, mask=mask))
    return p.data


def mnn_select(p: np.ndarray, threshold: float) -> list[CoarseMatch]:
    """Thresholded mutual argmax pairs; ties break to the smallest index."""
    p = np.asarray(p)
    if p.size == 0:
        return []
    row_best = p.argmax(axis=1)
    col_best = p.argmax(axis=0)
    out = []
    for i, j in enumerate(row_best):
        if col_best[j] == i and p[i, j] >= threshold:
            out.append(CoarseMatch(i=int(i), j=int(j),
                                   confidence=float(p[i, j])))
    return out


def coarse_confidence(tok0: Tensor, tok1: Tensor,
                      valid0: np.ndarray, valid1: np.ndarray,
                      temperature: float) -> Tensor:
    """Differentiable dual-softmax confidences over flattened token sets."""
    n0 = l2_normalize_rows(tok0)
    n1 = l2_normalize_rows(tok1)
    scores = mul_const(matmul(n0, transpose2d(n1)), 1.0 / temperature)
    pair = valid0[:, None] & valid1[None, :]
    if not pair.any():
        raise MatchingError("all token pairs masked")
    return mul(softmax(scores, axis=1, mask=pair),
               softmax(scores, axis=0, mask=pair))


# ---------------------------------------------------------------------------
# fine matching


@dataclass
class Window:
    """w x w crop of a fine grid around a coarse cell, with a validity mask."""
    idx: np.ndarray   # (w*w,) clamped flat indices into the fine grid
    mask: np.ndarray  # (w*w,) in-bounds and unpadded
    top: tuple[int, int]  # fine-grid (row, col) of the window origin
    size: int


def make_window(center_rc: tuple[int, int], fine_h: int, fine_w: int,
                valid_h: int, valid_w: int, w: int) -> Window:
    """Window around the fine-grid point 4x a coarse index; w must be odd."""
    if w % 2 != 1:
        raise MatchingError(f"window size must be odd, got {w}")
    cr, cc = 4 * center_rc[0], 4 * center_rc[1]
    half = w // 2
    r0, c0 = cr - half, cc - half
    rows = np.arange(r0, r0 + w)
    cols = np.arange(c0, c0 + w)
    rr, cc2 = np.meshgrid(rows, cols, indexing="ij")
    inb = (rr >= 0) & (rr < valid_h) & (cc2 >= 0) & (cc2 < valid_w)
    rcl = np.clip(rr, 0, fine_h - 1)
    ccl = np.clip(cc2, 0, fine_w - 1)
    return Window(idx=(rcl * fine_w + ccl).reshape(-1),
                  mask=inb.reshape(-1), top=(r0, c0), size=w)


def crop_window(f: FeatureMap, center_rc: tuple[int, int], w: int
                ) -> tuple[np.ndarray, np.ndarray]:
    """Zero-filled window values and mask from a half-resolution map."""
    win = make_window(center_rc, f.grid_h, f.grid_w, f.valid_h, f.valid_w, w)
    flat = f.values.reshape(-1, f.channels)
    vals = flat[win.idx] * win.mask[:, None]
    return vals.reshape(w, w, f.channels), win.mask.reshape(w, w)


def window_tokens(fine2d: Tensor, win: Window) -> Tensor:
    """Differentiable window gather; masked cells zero out."""
    gathered = take_rows(fine2d, win.idx)
    return mul(gathered, Tensor(win.mask[:, None].astype(fine2d.data.dtype)))


def window_confidence(fine2d_0: Tensor, fine2d_1: Tensor,
                      win0: Window, win1: Window,
                      temperature: float) -> Tensor | None:
    """Dual-softmax confidences between two windows; None if fully masked."""
    pair = win0.mask[:, None] & win1.mask[None, :]
    if not pair.any():
        return None
    t0 = l2_normalize_rows(window_tokens(fine2d_0, win0))
    t1 = l2_normalize_rows(window_tokens(fine2d_1, win1))
    scores = mul_const(matmul(t0, transpose2d(t1)), 1.0 / temperature)
    return mul(softmax(scores, axis=1, mask=pair),
               softmax(scores, axis=0, mask=pair))


def _cell_to_pixel(win: Window, flat_cell: int) -> tuple[float, float]:
    r = win.top[0] + flat_cell // win.size
    c = win.top[1] + flat_cell % win.size
    return (2.0 * c, 2.0 * r)  # half-resolution grid points, x = column


def fine_match_overlap(p_f: np.ndarray, win0: Window, win1: Window,
                       threshold: float) -> list[FineMatch]:
    """Mutual nearest neighbors above threshold inside a window pair."""
    out = []
    for m in mnn_select(p_f, threshold):
        out.append(FineMatch(p0=_cell_to_pixel(win0, m.i),
                             p1=_cell_to_pixel(win1, m.j),
                             confidence=m.confidence))
    return out


def fine_match_center(p_f: np.ndarray, win0: Window, win1: Window
                      ) -> list[FineMatch]:
    """One match per window from the center cell's argmax (no mutual check)."""
    center = (win0.size // 2) * win0.size + win0.size // 2
    if not win0.mask[center]:
        return []
    j = int(p_f[center].argmax())
    if not win1.mask[j]:
        return []
    return [FineMatch(p0=_cell_to_pixel(win0, center),
                      p1=_cell_to_pixel(win1, j),
                      confidence=float(p_f[center, j]))]


# ---------------------------------------------------------------------------
# full forward chain


@dataclass
class ForwardState:
    """Everything the matcher and the loss need from one forward pass."""
    fused0: Tensor  # (N0, C) coarse tokens after enhancement (+ fusion)
    fused1: Tensor
    fine0: Tensor  # (Hf*Wf, C) flattened fine maps
    fine1: Tensor
    coarse0: FeatureMap
    coarse1: FeatureMap
    fine_map0: FeatureMap
    fine_map1: FeatureMap


@dataclass
class MatchResult:
    coarse: list[CoarseMatch]
    fine: list[FineMatch]
    p_c: np.ndarray
    p_f: list[np.ndarray] = field(default_factory=list)


def forward_features(img0: Image, img1: Image, params, provider,
                     cfg: MatcherConfig,
                     image_ids: tuple[str | None, str | None] = (None, None)
                     ) -> ForwardState:
    """Extract, enhance and (optionally) semantically fuse coarse tokens."""
    c0, f0 = extract_pyramid(img0, params)
    c1, f1 = extract_pyramid(img1, params)
    n0 = c0.grid_h * c0.grid_w
    n1 = c1.grid_h * c1.grid_w
    tok0 = reshape(c0.tensor, (n0, c0.channels))
    tok1 = reshape(c1.tensor, (n1, c1.channels))
    tok0, tok1 = enhance(tok0, tok1, params,
                         (c0.grid_h, c0.grid_w), (c1.grid_h, c1.grid_w),
                         cfg.enhancer_layers)
    if cfg.use_sfb:
        raw0 = provider.extract(img0, image_ids[0])
        raw1 = provider.extract(img1, image_ids[1])

        def project(sem: FeatureMap) -> Tensor:
            flat = sem.values.reshape(-1, sem.channels)
            return linear(Tensor(flat), _t(params, "sem_proj.w"),
                          _t(params, "sem_proj.b"))

        st0 = project(resize_semantic(raw0, c0.grid_h, c0.grid_w))
        st1 = project(resize_semantic(raw1, c1.grid_h, c1.grid_w))
        cross0 = cross1 = None
        if (c0.grid_h, c0.grid_w) != (c1.grid_h, c1.grid_w):
            # stage-2 queries need the other image's semantics on this grid
            cross0 = project(resize_semantic(raw1, c0.grid_h, c0.grid_w))
            cross1 = project(resize_semantic(raw0, c1.grid_h, c1.grid_w))
        tok0, tok1 = sfb_forward(st0, st1, tok0, tok1, params,
                                 cfg.stage2_repeats, cfg.cross_image_fusion,
                                 s_cross0=cross0, s_cross1=cross1)
    fine0 = reshape(f0.tensor, (f0.grid_h * f0.grid_w, f0.channels))
    fine1 = reshape(f1.tensor, (f1.grid_h * f1.grid_w, f1.channels))
    return ForwardState(tok0, tok1, fine0, fine1, c0, c1, f0, f1)


def match_pipeline(img0: Image, img1: Image, params, provider,
                   cfg: MatcherConfig,
                   image_ids: tuple[str | None, str | None] = (None, None)
                   ) -> MatchResult:
    """Full forward chain from an image pair to coarse and fine matches."""
    st = forward_features(img0, img1, params, provider, cfg, image_ids)
    p_c = coarse_confidence(st.fused0, st.fused1,
                            st.coarse0.valid_mask().reshape(-1),
                            st.coarse1.valid_mask().reshape(-1),
                            cfg.coarse_temperature).data
    coarse = mnn_select(p_c, cfg.coarse_threshold)
    gw0, gw1 = st.coarse0.grid_w, st.coarse1.grid_w
    fine = []
    p_f_list = []
    for m in coarse:
        win0 = make_window(divmod(m.i, gw0), st.fine_map0.grid_h,
                           st.fine_map0.grid_w, st.fine_map0.valid_h,
                           st.fine_map0.valid_w, cfg.window)
        win1 = make_window(divmod(m.j, gw1), st.fine_map1.grid_h,
                           st.fine_map1.grid_w, st.fine_map1.valid_h,
                           st.fine_map1.valid_w, cfg.window)
        p_f_t = window_confidence(st.fine0, st.fine1, win0, win1,
                                  cfg.fine_temperature)
        if p_f_t is None:
            continue
        p_f = p_f_t.data
        p_f_list.append(p_f)
        if cfg.overlap_fine:
            fine.extend(fine_match_overlap(p_f, win0, win1,
                                           cfg.fine_threshold))
        else:
            fine.extend(fine_match_center(p_f, win0, win1))
    return MatchResult(coarse=coarse, fine=fine, p_c=p_c, p_f=p_f_list)


def write_matches(path, matches: list[FineMatch]) -> None:
    """Text dump: `x0 y0 x1 y1 confidence` per line, six decimals."""
    with open(path, "w") as f:
        for m in matches:
            f.write(f"{m.p0[0]:.6f} {m.p0[1]:.6f} "
                    f"{m.p1[0]:.6f} {m.p1[1]:.6f} {m.confidence:.6f}\n")


def read_matches(path) -> list[FineMatch]:
    out = []
    with open(path) as f:
        for line in f:
            parts = line.split()
            if len(parts) != 5:
                continue
            x0, y0, x1, y1, conf = (float(v) for v in parts)
            out.append(FineMatch(p0=(x0, y0), p1=(x1, y1), confidence=conf))
    return out
