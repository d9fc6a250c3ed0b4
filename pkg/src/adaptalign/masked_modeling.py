"""Masked image and masked language modeling losses kept alive during alignment."""
from __future__ import annotations

import warnings

import torch
import torch.nn.functional as F
from torch import nn

from .backbone import LN_EPS, AdapterBlock, sincos_2d
from .language import IGNORE_INDEX, LanguageEncoder, MlmHead


class ImageDecoder(nn.Module):
    """Light-weight ViT decoder: scatters encoder tokens back into the full patch grid.

    Masked slots receive the mask token; all slots get fixed sin-cos positions.
    Predicts ``(patch * target_scale)**2`` pixels per patch.
    """

    def __init__(
        self,
        enc_dim: int,
        grid: int,
        patch_size: int,
        dim: int,
        depth: int,
        heads: int,
        mlp_ratio: float = 4.0,
        target_scale: int = 1,
    ):
        super().__init__()
        self.grid = grid
        self.n_patches = grid * grid
        self.dim = dim
        self.embed = nn.Linear(enc_dim, dim)
        self.mask_token = nn.Parameter(torch.zeros(1, 1, dim))
        nn.init.normal_(self.mask_token, std=0.02)
        self.pos_embed = nn.Parameter(torch.from_numpy(sincos_2d(dim, grid)).float()[None], requires_grad=False)
        self.blocks = nn.ModuleList(AdapterBlock(dim, heads, mlp_ratio, adapter_ratio=None) for _ in range(depth))
        self.norm = nn.LayerNorm(dim, eps=LN_EPS)
        self.pred = nn.Linear(dim, (patch_size * target_scale) ** 2)

    def forward(self, tokens: torch.Tensor, keep_idx: torch.Tensor) -> torch.Tensor:
        """``tokens`` (B, m, d_enc) with class token first, ``keep_idx`` (B, m-1) -> (B, P, pixels)."""
        B = tokens.shape[0]
        x = self.embed(tokens)
        full = self.mask_token.expand(B, self.n_patches, -1).clone()
        full = full.scatter(1, keep_idx[..., None].expand(-1, -1, self.dim), x[:, 1:])
        x = torch.cat([x[:, :1], full], dim=1) + self.pos_embed
        for blk in self.blocks:
            x = blk(x)
        return self.pred(self.norm(x))[:, 1:]


def masked_mse(pred: torch.Tensor, target: torch.Tensor, mask_idx: torch.Tensor) -> torch.Tensor:
    """Per-pixel MSE over the masked patches only.

    ``pred``/``target`` are ``(B, P, pixels)``; ``mask_idx`` is ``(B, k)``.
    """
    if mask_idx.shape[1] == 0:
        warnings.warn("no masked patches; MIM loss defined as 0", RuntimeWarning, stacklevel=2)
        return pred.sum() * 0.0
    idx = mask_idx[..., None].expand(-1, -1, pred.shape[-1])
    return F.mse_loss(torch.gather(pred, 1, idx), torch.gather(target, 1, idx))


def mim_loss(
    cf_tokens: torch.Tensor,
    keep_idx: torch.Tensor,
    mask_idx: torch.Tensor,
    decoder: ImageDecoder,
    target_patches: torch.Tensor,
) -> torch.Tensor:
    """Reconstruct the masked current-frontal patches through the frozen decoder."""
    return masked_mse(decoder(cf_tokens, keep_idx), target_patches, mask_idx)


def mlm_loss(
    masked_ids: torch.Tensor,
    pad_mask: torch.Tensor,
    targets: torch.Tensor,
    g_image: torch.Tensor,
    encoder: LanguageEncoder,
    hybrid_proj: nn.Module,
    head: MlmHead,
    head_bias: torch.Tensor,
    return_logits: bool = False,
):
    """Mean cross-entropy over masked report positions given hybrid embeddings.

    The image global ``g_image`` (B, d_G) is mapped to the language width and
    added to every token embedding of its sample before the language tower.
    """
    n_targets = int((targets != IGNORE_INDEX).sum())
    z = encoder(masked_ids, pad_mask, inject=hybrid_proj(g_image))
    logits = head(z, head_bias)
    if n_targets == 0:
        warnings.warn("no masked tokens; MLM loss defined as 0", RuntimeWarning, stacklevel=2)
        loss = logits.sum() * 0.0
    else:
        loss = F.cross_entropy(logits.reshape(-1, logits.shape[-1]), targets.reshape(-1), ignore_index=IGNORE_INDEX)
    return (loss, logits) if return_logits else loss
