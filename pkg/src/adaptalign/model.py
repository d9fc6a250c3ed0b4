"""Dual-tower alignment model: configuration, freezing policy and forward helpers."""
from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .alignment import EmbeddingBundle, LogTemperature, Projector, Temperatures, project_and_merge_image, project_text
from .backbone import FROZEN, TRAINABLE, assign_roles, parameter_accounting
from .language import LanguageEncoder, MlmHead
from .masked_modeling import ImageDecoder
from .vision import VIEW_TAGS, VisionEncoder, mask_patches, n_masked, patchify


@dataclass
class ModelConfig:
    image_size: int = 32
    patch_size: int = 4
    vision_dim: int = 32
    vision_depth: int = 2
    vision_heads: int = 4
    vocab_size: int = 64
    text_dim: int = 32
    text_depth: int = 2
    text_heads: int = 4
    max_tokens: int = 128
    mlp_ratio: float = 4.0
    decoder_dim: int = 32
    decoder_depth: int = 1
    decoder_heads: int = 4
    adapters: bool = True
    bottleneck_ratio: float = 0.25
    global_dim: int = 128
    local_dim: int = 128
    projector_layers: int = 2
    tau_global: float = 0.07
    tau_attn: float = 0.1
    tau_local: float = 0.1
    local_pool: str = "mean"
    local_direction: str = "text"
    image_mask_ratio: float = 0.75
    text_mask_ratio: float = 0.5
    mim_target_scale: int = 1
    text_embed_std: float = 1.0

    @classmethod
    def toy(cls, **overrides) -> "ModelConfig":
        return cls(**overrides)

    @classmethod
    def vit_b_bert_base(cls, **overrides) -> "ModelConfig":
        """ViT-B/16 vision tower, BERT-base language tower, 8-block 512-wide decoder."""
        base = dict(
            image_size=224, patch_size=16, vision_dim=768, vision_depth=12, vision_heads=12,
            vocab_size=30522, text_dim=768, text_depth=12, text_heads=12, max_tokens=512,
            decoder_dim=512, decoder_depth=8, decoder_heads=16, text_embed_std=0.02,
        )
        base.update(overrides)
        return cls(**base)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise KeyError(f"unknown model config keys: {unknown}")
        return cls(**d)

    @property
    def n_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2


# First matching rule wins; anything unmatched is an accounting error.
FREEZE_RULES = (
    (r"\.adapter_(attn|ffn)\.", TRAINABLE),
    (r"^vision\.view_embed$", TRAINABLE),
    (r"^(img|txt)_(global|local)_proj\.", TRAINABLE),
    (r"^hybrid_proj\.", TRAINABLE),
    (r"^mlm_bias$", TRAINABLE),
    (r"^tau_global\.log_tau$", TRAINABLE),
    (r"^vision\.", FROZEN),
    (r"^language\.", FROZEN),
    (r"^decoder\.", FROZEN),
    (r"^mlm_head\.", FROZEN),
)


class AlignmentModel(nn.Module):
    """Frozen vision/language backbones with adapters, projectors, heads and the MIM decoder."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = c = config
        ratio = c.bottleneck_ratio if c.adapters else None
        self.vision = VisionEncoder(c.image_size, c.patch_size, c.vision_dim, c.vision_depth,
                                    c.vision_heads, c.mlp_ratio, ratio)
        self.language = LanguageEncoder(c.vocab_size, c.text_dim, c.text_depth, c.text_heads,
                                        c.mlp_ratio, c.max_tokens, ratio, c.text_embed_std)
        self.decoder = ImageDecoder(c.vision_dim, self.vision.grid, c.patch_size, c.decoder_dim,
                                    c.decoder_depth, c.decoder_heads, c.mlp_ratio, c.mim_target_scale)
        self.mlm_head = MlmHead(c.text_dim, self.language.tok_embed)
        self.mlm_bias = nn.Parameter(torch.zeros(c.vocab_size))
        self.img_global_proj = Projector(c.vision_dim, c.global_dim, c.projector_layers)
        self.img_local_proj = Projector(c.vision_dim, c.local_dim, c.projector_layers)
        self.txt_global_proj = Projector(c.text_dim, c.global_dim, c.projector_layers)
        self.txt_local_proj = Projector(c.text_dim, c.local_dim, c.projector_layers)
        self.hybrid_proj = nn.Linear(c.global_dim, c.text_dim)
        self.tau_global = LogTemperature(c.tau_global)
        self.param_roles = assign_roles(self, FREEZE_RULES)

    # -- parameter sets ---------------------------------------------------------------
    def trainable_parameters(self) -> list[tuple[str, nn.Parameter]]:
        return [(n, p) for n, p in self.named_parameters() if self.param_roles.get(n) == TRAINABLE]

    def frozen_parameters(self) -> list[tuple[str, nn.Parameter]]:
        return [(n, p) for n, p in self.named_parameters() if self.param_roles.get(n) == FROZEN]

    def accounting(self) -> dict:
        return parameter_accounting(self)

    @property
    def temperatures(self) -> Temperatures:
        c = self.config
        return Temperatures(float(self.tau_global().detach()), c.tau_attn, c.tau_local)

    # -- encoders ---------------------------------------------------------------------
    def draw_partitions(self, batch: int, ratio: float, rng: np.random.Generator):
        """Independent partitions per (sample, view): returns ``keep (B,4,m-1)``, ``masked (B,4,k)``."""
        P = self.vision.n_patches
        keep, masked = [], []
        for _ in range(batch):
            parts = [mask_patches(P, ratio, rng) for _ in VIEW_TAGS]
            keep.append(np.stack([p.non_masked_idx for p in parts]))
            masked.append(np.stack([p.masked_idx for p in parts]))
        k = n_masked(P, ratio)
        return (torch.from_numpy(np.stack(keep)).long(),
                torch.from_numpy(np.stack(masked)).long().reshape(batch, len(VIEW_TAGS), k))

    def encode_images(self, images: torch.Tensor, keep_idx: torch.Tensor | None = None) -> dict[str, torch.Tensor]:
        """``images`` (B, 4, H, W) in cf, cl, pf, pl order -> ``tag -> (B, m, d_I)``.

        ``keep_idx`` (B, 4, m-1); ``None`` keeps every patch.
        """
        B = images.shape[0]
        patches = patchify(images, self.config.patch_size)  # (B, 4, P, p*p)
        P = patches.shape[2]
        if keep_idx is None:
            keep_idx = torch.arange(P, device=images.device).expand(B, len(VIEW_TAGS), P)
        views = torch.arange(len(VIEW_TAGS), device=images.device).repeat(B)
        z = self.vision(patches.reshape(B * len(VIEW_TAGS), P, -1), keep_idx.reshape(B * len(VIEW_TAGS), -1), views)
        z = z.reshape(B, len(VIEW_TAGS), *z.shape[1:])
        return {t: z[:, i] for i, t in enumerate(VIEW_TAGS)}

    def encode_text(self, ids: torch.Tensor, pad_mask: torch.Tensor | None = None) -> torch.Tensor:
        return self.language(ids, pad_mask)

    def image_bundle(self, views: dict[str, torch.Tensor], with_local: bool = True) -> EmbeddingBundle:
        return project_and_merge_image(views, self.img_global_proj, self.img_local_proj, with_local)

    def text_bundle(self, z: torch.Tensor, pad_mask: torch.Tensor | None = None) -> EmbeddingBundle:
        return project_text(z, self.txt_global_proj, self.txt_local_proj, pad_mask)

    def embed_images(
        self, images: torch.Tensor, keep_idx: torch.Tensor | None = None, with_local: bool = True
    ) -> EmbeddingBundle:
        return self.image_bundle(self.encode_images(images, keep_idx), with_local)

    def embed_texts(self, ids: torch.Tensor, pad_mask: torch.Tensor | None = None) -> EmbeddingBundle:
        return self.text_bundle(self.encode_text(ids, pad_mask), pad_mask)


def build_model(config: ModelConfig, seed: int = 0, dtype: torch.dtype = torch.float32) -> AlignmentModel:
    torch.manual_seed(seed)
    return AlignmentModel(config).to(dtype)


def image_tensor(records: Sequence, dtype=torch.float32) -> torch.Tensor:
    return torch.from_numpy(np.stack([np.stack([r.images[t] for t in VIEW_TAGS]) for r in records])).to(dtype)
