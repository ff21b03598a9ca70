"""Match-confidence losses, the toy training loop, and ablation wiring.

The loss supervises only ground-truth pairs: mean negative log-confidence
at coarse and fine scale (optionally focal-modulated), summed into the
total. One image pair per step, Adam, everything derived from one master
seed so two runs produce identical logs.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field, replace

import numpy as np

from . import blob
from .features import SemanticProvider
from .matching import (MatcherConfig, coarse_confidence, forward_features,
                       make_window, window_confidence)
from .optim import AdamState, adam_step
from .synth import (DatasetSpec, HomographySamplerConfig, PhotometricConfig,
                    SyntheticPair, gt_matches, make_pair)
from .tensor import (Tape, Tensor, add, backward, clamp, log, mean_all,
                     mul, mul_const, neg, power_const, sub, take_flat)

CONFIDENCE_FLOOR = 1e-6


class SkipSample(Exception):
    """Pair carries no usable supervision; the trainer moves on."""


class TrainingDiverged(RuntimeError):
    """Loss went non-finite; message carries the offending pair seed."""


def _gathered_nll(p: Tensor, flat_idx: np.ndarray,
                  focal_gamma: float | None) -> Tensor:
    picked = take_flat(p, flat_idx)
    picked = clamp(picked, CONFIDENCE_FLOOR, 1.0)
    nll = neg(log(picked))
    if focal_gamma is not None:
        weight = power_const(sub(Tensor(np.ones(len(flat_idx),
                                                dtype=picked.data.dtype)),
                                 picked), focal_gamma)
        nll = mul(weight, nll)
    return mean_all(nll)


def loss_coarse(p_c: Tensor, g_c: list[tuple[int, int]],
                focal_gamma: float | None = None) -> Tensor:
    """Mean -log P over ground-truth coarse pairs, confidences floored."""
    if not g_c:
        raise SkipSample("no coarse ground truth")
    cols = p_c.shape[1]
    idx = np.array([i * cols + j for i, j in g_c], dtype=np.int64)
    return _gathered_nll(p_c, idx, focal_gamma)


def loss_fine(p_f_list: list[Tensor], g_f: list[tuple[int, int, int]],
              focal_gamma: float | None = None) -> Tensor:
    """Mean -log P over fine pairs pooled across all windows."""
    usable = [(k, a, b) for k, a, b in g_f if p_f_list[k] is not None]
    if not usable:
        raise SkipSample("no fine ground truth in any window")
    terms = []
    by_window: dict[int, list[tuple[int, int]]] = {}
    for k, a, b in usable:
        by_window.setdefault(k, []).append((a, b))
    total = len(usable)
    for k, cells in sorted(by_window.items()):
        p = p_f_list[k]
        cols = p.shape[1]
        idx = np.array([a * cols + b for a, b in cells], dtype=np.int64)
        part = _gathered_nll(p, idx, focal_gamma)
        terms.append(mul_const(part, len(cells) / total))
    out = terms[0]
    for t in terms[1:]:
        out = add(out, t)
    return out


@dataclass
class LossReport:
    l_c: float
    l_f: float
    l_total: float
    n_gc: int
    n_gf: int


@dataclass
class TrainConfig:
    epochs: int = 3
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    seed: int = 0
    grad_accumulation: int = 1
    focal_gamma: float | None = None  # printed formula by default
    checkpoint_every: int = 0  # epochs between checkpoint writes; 0 = end only
    sampler: HomographySamplerConfig = field(
        default_factory=HomographySamplerConfig)
    photometric: PhotometricConfig | None = field(
        default_factory=PhotometricConfig)
    matcher: MatcherConfig = field(default_factory=MatcherConfig)


def pair_losses(pair: SyntheticPair, params, provider: SemanticProvider,
                cfg: MatcherConfig,
                focal_gamma: float | None = None
                ) -> tuple[Tensor, LossReport]:
    """Total loss tensor for one synthetic pair (teacher-forced windows)."""
    st = forward_features(pair.image0, pair.image1, params, cfg=cfg,
                          provider=provider)
    c0, c1 = st.coarse0, st.coarse1
    g_c, g_f = gt_matches(pair.h_gt, (c0.grid_h, c0.grid_w),
                          (st.fine_map0.grid_h, st.fine_map0.grid_w),
                          pair.mask, window=cfg.window,
                          valid0_coarse=(c0.valid_h, c0.valid_w),
                          valid1_coarse=(c1.valid_h, c1.valid_w))
    if not g_c:
        raise SkipSample("pair has no coarse supervision")
    p_c = coarse_confidence(st.fused0, st.fused1,
                            c0.valid_mask().reshape(-1),
                            c1.valid_mask().reshape(-1),
                            cfg.coarse_temperature)
    l_c = loss_coarse(p_c, g_c, focal_gamma)
    gw = c0.grid_w
    p_f_list: list[Tensor | None] = []
    for i0, i1 in g_c:
        win0 = make_window(divmod(i0, gw), st.fine_map0.grid_h,
                           st.fine_map0.grid_w, st.fine_map0.valid_h,
                           st.fine_map0.valid_w, cfg.window)
        win1 = make_window(divmod(i1, c1.grid_w), st.fine_map1.grid_h,
                           st.fine_map1.grid_w, st.fine_map1.valid_h,
                           st.fine_map1.valid_w, cfg.window)
        p_f_list.append(window_confidence(st.fine0, st.fine1, win0, win1,
                                          cfg.fine_temperature))
    l_f = loss_fine(p_f_list, g_f, focal_gamma)
    total = add(l_c, l_f)
    lc = float(l_c.data)
    lf = float(l_f.data)
    report = LossReport(l_c=lc, l_f=lf, l_total=lc + lf,
                        n_gc=len(g_c), n_gf=len(g_f))
    return total, report


def trainable_parameters(params: dict[str, np.ndarray]) -> list[str]:
    """Every leaf the optimizer sees; semantic-extractor state never appears."""
    return sorted(params.keys())


def train_toy(dataset: DatasetSpec, params: dict[str, np.ndarray],
              provider: SemanticProvider, cfg: TrainConfig,
              checkpoint_dir: str | os.PathLike | None = None,
              log_path: str | os.PathLike | None = None
              ) -> tuple[dict[str, np.ndarray], list[dict]]:
    """Adam over the total loss, one pair per step.

    Returns the trained parameters and a log of per-step rows
    (epoch, step, L_c, L_f, L_total). Deterministic for a fixed config.
    """
    state = AdamState.for_params(params)
    log_rows: list[dict] = []
    accum: dict[str, np.ndarray] = {}
    pending = 0
    for epoch in range(cfg.epochs):
        for step in range(len(dataset)):
            base = dataset.base_image(step)
            pair_seed = dataset.pair_seed(step) + epoch * 1_000_003
            pair = make_pair(base, pair_seed, cfg.sampler, cfg.photometric)
            tape = Tape()
            tracked = {k: tape.leaf(v) for k, v in params.items()}
            try:
                total, report = pair_losses(pair, tracked, provider,
                                            cfg.matcher, cfg.focal_gamma)
            except SkipSample:
                continue
            except ValueError as exc:
                raise TrainingDiverged(
                    f"non-finite loss on pair seed {pair_seed} "
                    f"(epoch {epoch}, step {step})") from exc
            grads = backward(tape, total)
            for name, leaf in tracked.items():
                g = grads.get(leaf)
                if g is None:
                    continue
                if name in accum:
                    accum[name] += g
                else:
                    accum[name] = g.astype(np.float32)
            pending += 1
            if pending >= cfg.grad_accumulation:
                scaled = {k: v / pending for k, v in accum.items()}
                adam_step(params, scaled, state, lr=cfg.lr, betas=cfg.betas)
                accum.clear()
                pending = 0
            log_rows.append({"epoch": epoch, "step": step,
                             "L_c": report.l_c, "L_f": report.l_f,
                             "L_total": report.l_total})
        if checkpoint_dir is not None and cfg.checkpoint_every \
                and (epoch + 1) % cfg.checkpoint_every == 0:
            blob.save_checkpoint(checkpoint_dir, params)
    if pending:
        scaled = {k: v / pending for k, v in accum.items()}
        adam_step(params, scaled, state, lr=cfg.lr, betas=cfg.betas)
    if checkpoint_dir is not None:
        blob.save_checkpoint(checkpoint_dir, params)
    if log_path is not None:
        write_loss_log(log_path, log_rows)
    return params, log_rows


def write_loss_log(path: str | os.PathLike, rows: list[dict]) -> None:
    with open(path, "w") as f:
        f.write("epoch,step,L_c,L_f,L_total\n")
        for r in rows:
            f.write(f"{r['epoch']},{r['step']},{r['L_c']:.6f},"
                    f"{r['L_f']:.6f},{r['L_total']:.6f}\n")


def epoch_means(rows: list[dict]) -> dict[int, float]:
    sums: dict[int, list[float]] = {}
    for r in rows:
        sums.setdefault(r["epoch"], []).append(r["L_total"])
    return {e: float(np.mean(v)) for e, v in sums.items()}


ABLATION_FLAGS = ("no_sfb", "no_cross", "no_overlap", "toy_semantic",
                  "file_semantic")
_FLAG_ALIASES = {"no_cross_image_fusion": "no_cross",
                 "no_overlap_fine": "no_overlap"}


def configure_ablation(flags, base: MatcherConfig | None = None
                       ) -> MatcherConfig:
    """Matcher variant for a set of ablation flags.

    no_sfb bypasses semantic fusion entirely, no_cross keeps only stage 1,
    no_overlap swaps mutual fine matching for the center-cell argmax.
    """
    cfg = base or MatcherConfig()
    flags = [_FLAG_ALIASES.get(f, f) for f in flags]
    unknown = [f for f in flags if f not in ABLATION_FLAGS]
    if unknown:
        raise ValueError(f"unknown ablation flags {unknown}")
    if "no_sfb" in flags and "no_cross" in flags:
        raise ValueError("no_sfb already disables cross-image fusion")
    if "toy_semantic" in flags and "file_semantic" in flags:
        raise ValueError("pick one semantic source")
    if "no_sfb" in flags:
        cfg = replace(cfg, use_sfb=False)
    if "no_cross" in flags:
        cfg = replace(cfg, cross_image_fusion=False)
    if "no_overlap" in flags:
        cfg = replace(cfg, overlap_fine=False)
    if "toy_semantic" in flags:
        cfg = replace(cfg, semantic_mode="toy")
    if "file_semantic" in flags:
        cfg = replace(cfg, semantic_mode="file")
    return cfg
