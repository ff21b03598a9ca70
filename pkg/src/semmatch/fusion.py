"""Coarse-feature enhancement and semantic fusion blocks.

The enhancer interleaves linear-attention self/cross layers over flattened
coarse tokens with one sinusoidal positional encoding added up front. The
semantic-guided interaction block (SGIB) self-attends the semantic stream,
uses it as the query against image-feature keys/values, concatenates the
attended message onto the image features and projects back down. The
fusion block (SFB) runs SGIB twice: same-image semantics first, then the
other image's semantics; both images share weights.
"""
from __future__ import annotations

import numpy as np

from .tensor import (Tensor, add, concat_channels, div, elu_plus_one,
                     fan_in_uniform, linear, matmul, mul_const, softmax,
                     sum_axis, transpose2d)

ENHANCER_LAYERS = 4  # alternating self/cross, must stay even


def _t(params, key: str) -> Tensor:
    v = params[key]
    return v if isinstance(v, Tensor) else Tensor(v)


def init_enhancer_params(rng: np.random.Generator, channels: int,
                         n_layers: int = ENHANCER_LAYERS) -> dict[str, np.ndarray]:
    if n_layers % 2 != 0:
        raise ValueError("enhancer layer count must be even (self/cross pairs)")
    p: dict[str, np.ndarray] = {}
    for i in range(n_layers):
        base = f"enhancer.l{i}"
        for proj in ("wq", "wk", "wv"):
            p[f"{base}.{proj}"] = fan_in_uniform(rng, channels,
                                                 (channels, channels))
        # small output projection: residual layers start near identity
        p[f"{base}.wo"] = 0.1 * fan_in_uniform(rng, channels,
                                               (channels, channels))
        p[f"{base}.bo"] = np.zeros(channels, dtype=np.float32)
    return p


def init_sgib_params(rng: np.random.Generator, channels: int,
                     prefix: str) -> dict[str, np.ndarray]:
    p: dict[str, np.ndarray] = {}
    for proj in ("sa_wq", "sa_wk", "sa_wv", "x_wq", "x_wk", "x_wv"):
        p[f"{prefix}.{proj}"] = fan_in_uniform(rng, channels,
                                               (channels, channels))
    p[f"{prefix}.sa_wo"] = 0.1 * fan_in_uniform(rng, channels,
                                                (channels, channels))
    p[f"{prefix}.sa_bo"] = np.zeros(channels, dtype=np.float32)
    # post-concat projection starts as "keep the image features, listen
    # faintly to the attended message" so fusion begins as a near-no-op
    proj = np.concatenate([np.eye(channels, dtype=np.float32),
                           0.1 * fan_in_uniform(rng, channels,
                                                (channels, channels))],
                          axis=0)
    p[f"{prefix}.proj_w"] = proj
    p[f"{prefix}.proj_b"] = np.zeros(channels, dtype=np.float32)
    return p


def init_sfb_params(rng: np.random.Generator, channels: int,
                    stage2_repeats: int = 1) -> dict[str, np.ndarray]:
    p = init_sgib_params(rng, channels, "sfb.stage1")
    for r in range(stage2_repeats):
        p.update(init_sgib_params(rng, channels, f"sfb.stage2.{r}"))
    return p


def sinusoidal_encoding(grid_h: int, grid_w: int, channels: int) -> np.ndarray:
    """2D sine/cosine positional grid, flattened to (grid_h*grid_w, channels)."""
    if channels % 4 != 0:
        raise ValueError("positional encoding needs channels divisible by 4")
    quarter = channels // 4
    freqs = np.exp(-np.log(10000.0) * np.arange(quarter) / max(quarter, 1))
    ys, xs = np.meshgrid(np.arange(grid_h), np.arange(grid_w), indexing="ij")
    ay = ys[..., None] * freqs
    ax = xs[..., None] * freqs
    pe = np.concatenate([np.sin(ax), np.cos(ax), np.sin(ay), np.cos(ay)],
                        axis=-1)
    return pe.reshape(grid_h * grid_w, channels).astype(np.float32)


def _linear_attention(q_tok: Tensor, kv_tok: Tensor, params, base: str) -> Tensor:
    """Kernelized attention with the elu(x)+1 feature map; O(N d^2)."""
    q = elu_plus_one(matmul(q_tok, _t(params, f"{base}.wq")))
    k = elu_plus_one(matmul(kv_tok, _t(params, f"{base}.wk")))
    v = matmul(kv_tok, _t(params, f"{base}.wv"))
    kv = matmul(transpose2d(k), v)                      # (d, d)
    num = matmul(q, kv)                                 # (N, d)
    ksum = sum_axis(k, axis=0, keepdims=True)           # (1, d)
    den = matmul(q, transpose2d(ksum))                  # (N, 1)
    msg = div(num, den)
    return linear(msg, _t(params, f"{base}.wo"), _t(params, f"{base}.bo"))


def enhance(tok0: Tensor, tok1: Tensor, params,
            grid0: tuple[int, int], grid1: tuple[int, int],
            n_layers: int = ENHANCER_LAYERS) -> tuple[Tensor, Tensor]:
    """Interleaved self/cross linear attention over two token sets.

    Weights are shared between the images, so swapping the inputs swaps
    the outputs. Zero layers is the identity.
    """
    if tok0.shape[1] != tok1.shape[1]:
        raise ValueError(f"channel mismatch: {tok0.shape} vs {tok1.shape}")
    if n_layers == 0:
        return tok0, tok1
    c = tok0.shape[1]
    x0 = add(tok0, Tensor(sinusoidal_encoding(*grid0, c)))
    x1 = add(tok1, Tensor(sinusoidal_encoding(*grid1, c)))
    for i in range(n_layers):
        base = f"enhancer.l{i}"
        if i % 2 == 0:  # self
            x0 = add(x0, _linear_attention(x0, x0, params, base))
            x1 = add(x1, _linear_attention(x1, x1, params, base))
        else:  # cross, computed from the pre-update pair
            m0 = _linear_attention(x0, x1, params, base)
            m1 = _linear_attention(x1, x0, params, base)
            x0 = add(x0, m0)
            x1 = add(x1, m1)
    return x0, x1


def sgib_attend(s_tok: Tensor, c_tok: Tensor, params, prefix: str) -> Tensor:
    """Cross-attention message: self-attended semantics query image tokens.

    No positional encoding enters here, so the message is invariant to
    joint permutations of the image-token keys/values.
    """
    c_dim = s_tok.shape[1]
    sq = matmul(s_tok, _t(params, f"{prefix}.sa_wq"))
    sk = matmul(s_tok, _t(params, f"{prefix}.sa_wk"))
    sv = matmul(s_tok, _t(params, f"{prefix}.sa_wv"))
    scores = mul_const(matmul(sq, transpose2d(sk)), 1.0 / np.sqrt(c_dim))
    sa = matmul(softmax(scores, axis=1), sv)
    s2 = add(s_tok, linear(sa, _t(params, f"{prefix}.sa_wo"),
                           _t(params, f"{prefix}.sa_bo")))

    q = matmul(s2, _t(params, f"{prefix}.x_wq"))
    k = matmul(c_tok, _t(params, f"{prefix}.x_wk"))
    v = matmul(c_tok, _t(params, f"{prefix}.x_wv"))
    xscores = mul_const(matmul(q, transpose2d(k)), 1.0 / np.sqrt(c_dim))
    return matmul(softmax(xscores, axis=1), v)


def sgib_forward(s_tok: Tensor, c_tok: Tensor, params, prefix: str) -> Tensor:
    """One semantic-guided interaction: concat(image, message) projected back."""
    if s_tok.shape[0] != c_tok.shape[0]:
        raise ValueError(f"token-grid mismatch: {s_tok.shape} vs {c_tok.shape}")
    if s_tok.shape[1] != c_tok.shape[1]:
        raise ValueError(f"channel mismatch: {s_tok.shape} vs {c_tok.shape}")
    message = sgib_attend(s_tok, c_tok, params, prefix)
    fused = concat_channels(c_tok, message)
    return linear(fused, _t(params, f"{prefix}.proj_w"),
                  _t(params, f"{prefix}.proj_b"))


def sfb_forward(s0: Tensor, s1: Tensor, c0: Tensor, c1: Tensor, params,
                stage2_repeats: int = 1, cross_image: bool = True,
                s_cross0: Tensor | None = None,
                s_cross1: Tensor | None = None) -> tuple[Tensor, Tensor]:
    """Two-stage fusion: own semantics, then the other image's semantics.

    `cross_image=False` stops after stage 1 (the single-image variant).
    When the two token grids differ, `s_cross0`/`s_cross1` carry the other
    image's semantics resampled onto this image's grid; by default the raw
    swapped streams are used, which assumes matching grids.
    """
    f0 = sgib_forward(s0, c0, params, "sfb.stage1")
    f1 = sgib_forward(s1, c1, params, "sfb.stage1")
    if not cross_image:
        return f0, f1
    q0 = s1 if s_cross0 is None else s_cross0
    q1 = s0 if s_cross1 is None else s_cross1
    for r in range(stage2_repeats):
        prefix = f"sfb.stage2.{r}"
        n0 = sgib_forward(q0, f0, params, prefix)
        n1 = sgib_forward(q1, f1, params, prefix)
        f0, f1 = n0, n1
    return f0, f1
