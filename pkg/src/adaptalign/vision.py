"""Patchify radiographs, draw random patch masks and encode view quaternions with a shared ViT tower."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np
import torch
from torch import nn

from .backbone import LN_EPS, AdapterBlock, sincos_2d

VIEW_TAGS = ("cf", "cl", "pf", "pl")


def patchify(image: np.ndarray | torch.Tensor, patch: int):
    """Split ``(..., H, W)`` into row-major patches ``(..., P, patch*patch)``."""
    H, W = image.shape[-2:]
    if H % patch or W % patch:
        raise ValueError(f"image {H}x{W} not divisible by patch size {patch}")
    gh, gw = H // patch, W // patch
    lead = tuple(image.shape[:-2])
    x = image.reshape(*lead, gh, patch, gw, patch)
    if isinstance(x, torch.Tensor):
        x = x.movedim(-3, -2)
    else:
        x = np.moveaxis(x, -3, -2)
    return x.reshape(*lead, gh * gw, patch * patch)


def unpatchify(patches: np.ndarray | torch.Tensor, patch: int, grid: tuple[int, int] | None = None):
    P = patches.shape[-2]
    if grid is None:
        g = int(round(P ** 0.5))
        if g * g != P:
            raise ValueError(f"{P} patches do not form a square grid; pass grid=")
        grid = (g, g)
    gh, gw = grid
    lead = tuple(patches.shape[:-2])
    x = patches.reshape(*lead, gh, gw, patch, patch)
    if isinstance(x, torch.Tensor):
        x = x.movedim(-2, -3)
    else:
        x = np.moveaxis(x, -2, -3)
    return x.reshape(*lead, gh * patch, gw * patch)


@dataclass(frozen=True)
class PatchPartition:
    """Kept and masked patch indices (both sorted ascending).

    The class token is not part of either set; an encoded view has
    ``len(non_masked_idx) + 1`` rows.
    """

    non_masked_idx: np.ndarray
    masked_idx: np.ndarray

    @property
    def n_patches(self) -> int:
        return len(self.non_masked_idx) + len(self.masked_idx)


def n_masked(P: int, ratio: float) -> int:
    return int(round(ratio * P))


def mask_patches(P: int, ratio: float, rng: np.random.Generator) -> PatchPartition:
    if not 0 <= ratio < 1:
        raise ValueError(f"mask ratio must be in [0, 1), got {ratio}")
    k = n_masked(P, ratio)
    perm = rng.permutation(P)
    return PatchPartition(np.sort(perm[k:]).astype(np.int64), np.sort(perm[:k]).astype(np.int64))


class VisionEncoder(nn.Module):
    """Shared ViT tower over the four temporal-view slots.

    Tokens of a view are ``[cls] + kept patches``, each summed with the fixed
    sin-cos positional embedding of its slot and the learnable embedding of the
    view's tag.
    """

    def __init__(
        self,
        image_size: int,
        patch_size: int,
        dim: int,
        depth: int,
        heads: int,
        mlp_ratio: float = 4.0,
        adapter_ratio: float | None = 0.25,
    ):
        super().__init__()
        if image_size % patch_size:
            raise ValueError("image_size must be divisible by patch_size")
        self.patch_size = patch_size
        self.grid = image_size // patch_size
        self.n_patches = self.grid ** 2
        self.dim = dim
        self.patch_embed = nn.Linear(patch_size * patch_size, dim)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, dim))
        nn.init.normal_(self.cls_token, std=0.02)
        self.pos_embed = nn.Parameter(
            torch.from_numpy(sincos_2d(dim, self.grid)).float()[None], requires_grad=False
        )
        self.view_embed = nn.Parameter(torch.zeros(len(VIEW_TAGS), dim))
        nn.init.normal_(self.view_embed, std=0.02)
        self.blocks = nn.ModuleList(AdapterBlock(dim, heads, mlp_ratio, adapter_ratio) for _ in range(depth))
        self.norm = nn.LayerNorm(dim, eps=LN_EPS)

    def forward(self, patches: torch.Tensor, keep_idx: torch.Tensor, view_idx: torch.Tensor) -> torch.Tensor:
        """``patches`` (N, P, p*p), ``keep_idx`` (N, m-1), ``view_idx`` (N,) -> (N, m, d)."""
        N, P, _ = patches.shape
        if P != self.n_patches:
            raise ValueError(f"expected {self.n_patches} patches per view, got {P}")
        x = self.patch_embed(patches) + self.pos_embed[:, 1:]
        x = torch.gather(x, 1, keep_idx[..., None].expand(-1, -1, self.dim))
        cls = (self.cls_token + self.pos_embed[:, :1]).expand(N, -1, -1)
        x = torch.cat([cls, x], dim=1) + self.view_embed[view_idx][:, None, :]
        for blk in self.blocks:
            x = blk(x)
        return self.norm(x)


def encode_views(
    images: Mapping[str, np.ndarray | torch.Tensor],
    partitions: Mapping[str, PatchPartition],
    encoder: VisionEncoder,
) -> dict[str, torch.Tensor]:
    """Encode one record's four views; returns ``tag -> (m, d)`` token tensors."""
    out = {}
    p = next(encoder.parameters())
    for tag in VIEW_TAGS:
        if tag not in images:
            raise KeyError(f"view {tag!r} missing; absent views must be zero-filled grids")
        if tag not in partitions:
            raise KeyError(f"no patch partition for view {tag!r}")
        img = torch.as_tensor(np.asarray(images[tag]), dtype=p.dtype, device=p.device)
        patches = patchify(img, encoder.patch_size)[None]
        keep = torch.as_tensor(partitions[tag].non_masked_idx, device=p.device)[None]
        view = torch.tensor([VIEW_TAGS.index(tag)], device=p.device)
        out[tag] = encoder(patches, keep, view)[0]
    return out
