"""Global/local projections, temporal-multiview merging and contrastive losses."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping

import torch
import torch.nn.functional as F
from torch import nn

from .vision import VIEW_TAGS


class DegenerateBatchError(ValueError):
    pass


@dataclass
class EmbeddingBundle:
    """Unit-normalized global ``(B, d_G)`` and local ``(B, L, d_L)`` embeddings.

    ``local_mask`` is ``(B, L)`` with True on valid tokens; ``None`` means all
    tokens are valid (image bundles).
    """

    global_: torch.Tensor
    local: torch.Tensor
    modality: str
    local_mask: torch.Tensor | None = None


@dataclass(frozen=True)
class Temperatures:
    tau_global: float = 0.07
    tau_attn: float = 0.1
    tau_local: float = 0.1

    def __post_init__(self):
        for name in ("tau_global", "tau_attn", "tau_local"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be > 0")


class Projector(nn.Module):
    """MLP projector: ``Linear -> GELU -> Linear`` (hidden = output dim) or a single ``Linear``."""

    def __init__(self, in_dim: int, out_dim: int, layers: int = 2):
        super().__init__()
        if layers not in (1, 2):
            raise ValueError("projector supports 1 or 2 layers")
        self.fc1 = nn.Linear(in_dim, out_dim)
        self.fc2 = nn.Linear(out_dim, out_dim) if layers == 2 else None

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = self.fc1(x)
        if self.fc2 is not None:
            x = self.fc2(F.gelu(x))
        return x


def project_text(
    z_text: torch.Tensor,
    global_proj: nn.Module,
    local_proj: nn.Module,
    pad_mask: torch.Tensor | None = None,
) -> EmbeddingBundle:
    """Class token -> global, remaining tokens -> locals; accepts ``(n, d)`` or ``(B, n, d)``."""
    if z_text.dim() == 2:
        z_text = z_text[None]
        pad_mask = None if pad_mask is None else pad_mask[None]
    g = F.normalize(global_proj(z_text[:, 0]), dim=-1)
    loc = F.normalize(local_proj(z_text[:, 1:]), dim=-1)
    valid = None if pad_mask is None else ~pad_mask[:, 1:]
    return EmbeddingBundle(g, loc, "text", valid)


def project_and_merge_image(
    views: Mapping[str, torch.Tensor],
    global_proj: nn.Module,
    local_proj: nn.Module,
    with_local: bool = True,
) -> EmbeddingBundle:
    """Mean of the four class tokens -> global; patch tokens concatenated in cf, cl, pf, pl order -> locals.

    The mean always divides by four, absent (zero-filled) views included.
    ``with_local=False`` skips the local projection (empty local set).
    """
    missing = [t for t in VIEW_TAGS if t not in views]
    if missing:
        raise KeyError(f"views missing for merge: {missing}")
    zs = [views[t] if views[t].dim() == 3 else views[t][None] for t in VIEW_TAGS]
    cls_mean = sum(z[:, 0] for z in zs) / len(VIEW_TAGS)
    g = F.normalize(global_proj(cls_mean), dim=-1)
    if not with_local:
        return EmbeddingBundle(g, g.new_zeros(g.shape[0], 0, g.shape[1]), "image")
    merged = torch.cat([z[:, 1:] for z in zs], dim=1)
    loc = F.normalize(local_proj(merged), dim=-1)
    return EmbeddingBundle(g, loc, "image")


def attend_pairwise(
    img_local: torch.Tensor,
    txt_local: torch.Tensor,
    tau_attn: float,
    txt_mask: torch.Tensor | None = None,
) -> torch.Tensor:
    """Text-token-indexed attention over image locals, for every (image b, text c) pair.

    ``(B_i, L_i, d)`` x ``(B_t, L_t, d)`` -> ``(B_i, B_t, L_t, d)``; padded text
    rows (``txt_mask`` False) come back as zeros.
    """
    if img_local.shape[1] == 0:
        raise ValueError("image local set is empty (L_i = 0)")
    logits = torch.einsum("cid,bjd->bcij", txt_local, img_local) / tau_attn
    attn = logits.softmax(dim=-1)
    out = F.normalize(torch.einsum("bcij,bjd->bcid", attn, img_local), dim=-1)
    if txt_mask is not None:
        out = out * txt_mask[None, :, :, None]
    return out


def local_attend(
    img_local: torch.Tensor,
    txt_local: torch.Tensor,
    tau_attn: float,
    txt_mask: torch.Tensor | None = None,
) -> torch.Tensor:
    """Report-token-weighted image representation of matched pairs.

    For text token ``i``: ``normalize(sum_j softmax_j(<t_i, v_j> / tau) v_j)``.
    ``(B, L_i, d)`` x ``(B, L_t, d)`` -> ``(B, L_t, d)``.
    """
    if img_local.shape[1] == 0:
        raise ValueError("image local set is empty (L_i = 0)")
    attn = (torch.einsum("bid,bjd->bij", txt_local, img_local) / tau_attn).softmax(dim=-1)
    out = F.normalize(torch.einsum("bij,bjd->bid", attn, img_local), dim=-1)
    if txt_mask is not None:
        out = out * txt_mask[..., None]
    return out


def _attend_text(img_local, txt_local, tau_attn, txt_mask):
    """Image-token-indexed alternative: every image token attends over (valid) text tokens."""
    logits = torch.einsum("bjd,cid->bcji", img_local, txt_local) / tau_attn
    if txt_mask is not None:
        logits = logits.masked_fill(~txt_mask[None, :, None, :], float("-inf"))
    attn = logits.softmax(dim=-1)
    return F.normalize(torch.einsum("bcji,cid->bcjd", attn, txt_local), dim=-1)


def symmetric_info_nce(scores: torch.Tensor, tau: float | torch.Tensor) -> torch.Tensor:
    """Mean of row-wise and column-wise cross-entropy of ``scores / tau`` with diagonal targets."""
    B = scores.shape[0]
    if B < 2:
        raise DegenerateBatchError("InfoNCE needs a batch of at least 2 pairs")
    logits = scores / tau
    target = torch.arange(B, device=scores.device)
    return 0.5 * (F.cross_entropy(logits, target) + F.cross_entropy(logits.t(), target))


def info_nce_global(g_img: torch.Tensor, g_txt: torch.Tensor, tau_global: float | torch.Tensor) -> torch.Tensor:
    return symmetric_info_nce(g_img @ g_txt.t(), tau_global)


def local_scores(
    img_local: torch.Tensor,
    txt_local: torch.Tensor,
    tau_attn: float,
    txt_mask: torch.Tensor | None = None,
    pool: str = "mean",
    direction: str = "text",
    lse_gamma: float = 5.0,
) -> torch.Tensor:
    """``(B, B)`` matrix of image-b / text-c local matching scores.

    ``direction="text"`` pools, over the text tokens of c, the cosine between
    each token and its attended image representation; ``"image"`` swaps the
    roles. ``pool`` is ``"mean"`` or ``"lse"`` (``log(sum(exp(gamma*s)))/gamma``).
    """
    B_t, L_t = txt_local.shape[:2]
    if txt_mask is None:
        txt_mask = torch.ones(B_t, L_t, dtype=torch.bool, device=txt_local.device)
    if direction == "text":
        att = attend_pairwise(img_local, txt_local, tau_attn, txt_mask)
        cos = torch.einsum("bcid,cid->bci", att, txt_local)
        valid = txt_mask[None].expand_as(cos)
    elif direction == "image":
        att = _attend_text(img_local, txt_local, tau_attn, txt_mask)
        cos = torch.einsum("bcjd,bjd->bcj", att, img_local)
        valid = torch.ones_like(cos, dtype=torch.bool)
    else:
        raise ValueError(f"unknown local attention direction {direction!r}")
    if pool == "mean":
        return (cos * valid).sum(-1) / valid.sum(-1).clamp_min(1)
    if pool == "lse":
        return torch.logsumexp((lse_gamma * cos).masked_fill(~valid, float("-inf")), dim=-1) / lse_gamma
    raise ValueError(f"unknown local pooling {pool!r}")


def info_nce_local(
    img_local: torch.Tensor,
    txt_local: torch.Tensor,
    taus: Temperatures,
    txt_mask: torch.Tensor | None = None,
    pool: str = "mean",
    direction: str = "text",
) -> torch.Tensor:
    if img_local.shape[0] < 2:
        raise DegenerateBatchError("InfoNCE needs a batch of at least 2 pairs")
    s = local_scores(img_local, txt_local, taus.tau_attn, txt_mask, pool, direction)
    return symmetric_info_nce(s, taus.tau_local)


class LogTemperature(nn.Module):
    """Learnable temperature stored as its log, clamped to ``[lo, hi]`` when read."""

    def __init__(self, init: float = 0.07, lo: float = 0.01, hi: float = 1.0):
        super().__init__()
        self.lo, self.hi = lo, hi
        self.log_tau = nn.Parameter(torch.tensor(math.log(init)))

    def forward(self) -> torch.Tensor:
        return self.log_tau.exp().clamp(self.lo, self.hi)
