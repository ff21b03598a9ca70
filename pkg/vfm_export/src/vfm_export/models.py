"""Patch-feature model registry.

`dinov2_*` identifiers load the published checkpoints through torch.hub
(network required once; failures surface as ModelLoadError). `test-tiny`
is a small randomly-initialized ViT with a fixed seed, used to exercise
the export path hermetically.
"""
from __future__ import annotations

import torch
import torch.nn as nn

DINOV2_MODELS = ("dinov2_vits14", "dinov2_vitb14", "dinov2_vitl14")


class ModelLoadError(RuntimeError):
    pass


class PatchFeatureModel:
    """Uniform wrapper: images in, one (gh, gw, D) grid per layer out."""

    def __init__(self, patch_size: int, depth: int):
        self.patch_size = patch_size
        self.depth = depth

    def patch_features(self, x: torch.Tensor, layer: int) -> torch.Tensor:
        """x: (1, 3, H, W) normalized; layer: python-style index into blocks."""
        raise NotImplementedError


class _Dinov2Wrapper(PatchFeatureModel):
    def __init__(self, model):
        super().__init__(patch_size=model.patch_size, depth=len(model.blocks))
        self._model = model.eval()

    @torch.no_grad()
    def patch_features(self, x: torch.Tensor, layer: int) -> torch.Tensor:
        index = layer % self.depth
        out = self._model.get_intermediate_layers(x, n=[index], reshape=True)
        return out[0][0].permute(1, 2, 0).contiguous()  # (gh, gw, D)


class _TinyBlock(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = nn.MultiheadAttention(dim, num_heads=2, batch_first=True)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, dim * 2), nn.GELU(),
                                 nn.Linear(dim * 2, dim))

    def forward(self, x):
        h = self.norm1(x)
        x = x + self.attn(h, h, h, need_weights=False)[0]
        return x + self.mlp(self.norm2(x))


class _TinyViT(nn.Module):
    """Deterministic stand-in transformer: patch 14, dim 32, 4 blocks."""

    def __init__(self, patch_size: int = 14, dim: int = 32, depth: int = 4,
                 seed: int = 0):
        super().__init__()
        torch.manual_seed(seed)
        self.patch_size = patch_size
        self.embed = nn.Conv2d(3, dim, patch_size, stride=patch_size)
        self.blocks = nn.ModuleList(_TinyBlock(dim) for _ in range(depth))

    def forward_blocks(self, x):
        tok = self.embed(x)  # (1, D, gh, gw)
        _, d, gh, gw = tok.shape
        t = tok.flatten(2).transpose(1, 2)  # (1, N, D)
        outs = []
        for blk in self.blocks:
            t = blk(t)
            outs.append(t.reshape(1, gh, gw, d))
        return outs


class _TinyWrapper(PatchFeatureModel):
    def __init__(self, model: _TinyViT):
        super().__init__(patch_size=model.patch_size, depth=len(model.blocks))
        self._model = model.eval()

    @torch.no_grad()
    def patch_features(self, x: torch.Tensor, layer: int) -> torch.Tensor:
        outs = self._model.forward_blocks(x)
        return outs[layer % self.depth][0].contiguous()


def load_model(model_id: str) -> PatchFeatureModel:
    if model_id == "test-tiny":
        return _TinyWrapper(_TinyViT())
    if model_id in DINOV2_MODELS:
        try:
            model = torch.hub.load("facebookresearch/dinov2", model_id)
        except Exception as exc:  # hub raises a zoo of network/IO errors
            raise ModelLoadError(
                f"could not obtain checkpoint for {model_id!r}: {exc}"
            ) from exc
        return _Dinov2Wrapper(model)
    raise ModelLoadError(f"unknown model id {model_id!r}; "
                         f"known: {DINOV2_MODELS + ('test-tiny',)}")
