"""Transformer blocks with bottleneck adapters, freezing policy and parameter accounting.

Both towers are built from :class:`AdapterBlock`. The base block is a pre-norm
transformer layer (multi-head self-attention + feed-forward network) whose
parameters stay frozen; two adapters are the only trainable block-level
parameters:

* ``adapter_attn`` sits on the attention output, before the residual add, and
  is itself residual (``a + up(gelu(down(a)))``).
* ``adapter_ffn`` runs in parallel to the FFN on the same normalized input and
  contributes only its delta ``up(gelu(down(y)))``.

With the up-projections at zero both adapters are exact identities, so a
freshly built model reproduces the adapter-free backbone.
"""
from __future__ import annotations

import hashlib
import io
import json
import re
import zipfile
from dataclasses import asdict, is_dataclass
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

FROZEN = "frozen"
TRAINABLE = "trainable"

LN_EPS = 1e-6


class AccountingError(RuntimeError):
    """Raised when a parameter carries no (or a contradictory) freeze flag."""


def bottleneck_dim(dim: int, ratio: float) -> int:
    r = int(round(ratio * dim))
    if r < 1:
        raise ValueError(f"bottleneck ratio {ratio} gives r={r} for d={dim}; need r >= 1")
    return r


class Adapter(nn.Module):
    """Bottleneck adapter: down-project, GELU, up-project."""

    def __init__(self, dim: int, ratio: float = 0.25, init_std: float = 1e-2):
        super().__init__()
        self.dim = dim
        self.rank = bottleneck_dim(dim, ratio)
        self.down = nn.Linear(dim, self.rank)
        self.up = nn.Linear(self.rank, dim)
        nn.init.normal_(self.down.weight, std=init_std)
        nn.init.zeros_(self.down.bias)
        nn.init.zeros_(self.up.weight)
        nn.init.zeros_(self.up.bias)

    def _check(self, x: torch.Tensor) -> None:
        if x.shape[-1] != self.dim:
            raise ValueError(
                f"adapter hidden axis (last, size d) must be {self.dim}, got {x.shape[-1]} "
                f"for input of shape {tuple(x.shape)}"
            )

    def delta(self, x: torch.Tensor) -> torch.Tensor:
        self._check(x)
        return self.up(F.gelu(self.down(x)))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x + self.delta(x)


def adapter_forward(x: torch.Tensor, adapter: Adapter) -> torch.Tensor:
    """Residual adapter output ``x + up(gelu(down(x)))``."""
    return adapter(x)


class Attention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        if dim % heads:
            raise ValueError(f"hidden size {dim} not divisible by {heads} heads")
        self.heads = heads
        self.head_dim = dim // heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor, pad_mask: torch.Tensor | None = None) -> torch.Tensor:
        B, L, D = x.shape
        qkv = self.qkv(x).reshape(B, L, 3, self.heads, self.head_dim).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        # pad_mask: (B, L) True at padded keys; SDPA wants True where attention is allowed
        keep = None if pad_mask is None else ~pad_mask[:, None, None, :]
        out = F.scaled_dot_product_attention(q, k, v, attn_mask=keep).transpose(1, 2).reshape(B, L, D)
        return self.proj(out)


class Mlp(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(F.gelu(self.fc1(x)))


class AdapterBlock(nn.Module):
    """Pre-norm transformer block with optional post-attention and parallel-FFN adapters.

    ``adapter_ratio=None`` builds the plain backbone block (used by the frozen
    image decoder and by adapter-free reference models).
    """

    def __init__(
        self,
        dim: int,
        heads: int,
        mlp_ratio: float = 4.0,
        adapter_ratio: float | None = 0.25,
    ):
        super().__init__()
        self.dim = dim
        self.norm1 = nn.LayerNorm(dim, eps=LN_EPS)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim, eps=LN_EPS)
        self.mlp = Mlp(dim, int(dim * mlp_ratio))
        if adapter_ratio is None:
            self.adapter_attn = None
            self.adapter_ffn = None
        else:
            self.adapter_attn = Adapter(dim, adapter_ratio)
            self.adapter_ffn = Adapter(dim, adapter_ratio)

    def forward(self, x: torch.Tensor, pad_mask: torch.Tensor | None = None) -> torch.Tensor:
        if x.shape[-1] != self.dim:
            raise ValueError(f"block hidden axis (last, size d) must be {self.dim}, got {x.shape[-1]}")
        if x.shape[1] < 1:
            raise ValueError("block input needs sequence length L >= 1")
        a = self.attn(self.norm1(x), pad_mask)
        if self.adapter_attn is not None:
            a = self.adapter_attn(a)
        h = x + a
        y = self.norm2(h)
        out = h + self.mlp(y)
        if self.adapter_ffn is not None:
            out = out + self.adapter_ffn.delta(y)
        return out


def block_forward(x: torch.Tensor, blk: AdapterBlock, pad_mask: torch.Tensor | None = None) -> torch.Tensor:
    return blk(x, pad_mask)


def sincos_1d(dim: int, positions: np.ndarray) -> np.ndarray:
    if dim % 2:
        raise ValueError("sin-cos embedding dimension must be even")
    omega = 1.0 / 10000 ** (np.arange(dim // 2, dtype=np.float64) / (dim / 2.0))
    out = np.einsum("p,d->pd", positions.reshape(-1).astype(np.float64), omega)
    return np.concatenate([np.sin(out), np.cos(out)], axis=1)


def sincos_2d(dim: int, grid: int, with_cls: bool = True) -> np.ndarray:
    """Fixed 2-D sine-cosine positional table of shape ``(grid**2 [+1], dim)``.

    Half the channels encode the row, half the column; the class-token slot
    (row 0 when ``with_cls``) is all zeros.
    """
    if dim % 4:
        raise ValueError("2-D sin-cos embedding dimension must be divisible by 4")
    rows, cols = np.meshgrid(np.arange(grid), np.arange(grid), indexing="ij")
    emb = np.concatenate([sincos_1d(dim // 2, rows), sincos_1d(dim // 2, cols)], axis=1)
    if with_cls:
        emb = np.concatenate([np.zeros((1, dim)), emb], axis=0)
    return emb


# --------------------------------------------------------------------------------------
# Freezing policy and accounting
# --------------------------------------------------------------------------------------

def assign_roles(module: nn.Module, rules: Iterable[tuple[str, str]]) -> dict[str, str]:
    """Flag every parameter by the first matching ``(regex, role)`` rule.

    Sets ``requires_grad`` to match the role. Parameters matching no rule are
    left out of the returned map; :func:`parameter_accounting` reports them.
    """
    rules = [(re.compile(p), role) for p, role in rules]
    roles: dict[str, str] = {}
    for name, p in module.named_parameters():
        for pattern, role in rules:
            if pattern.search(name):
                roles[name] = role
                p.requires_grad_(role == TRAINABLE)
                break
    return roles


def parameter_accounting(model: nn.Module, roles: Mapping[str, str] | None = None) -> dict:
    """Count trainable and frozen parameters.

    ``roles`` defaults to ``model.param_roles``. Every named parameter must
    carry exactly one role and its ``requires_grad`` must agree with it.
    """
    if roles is None:
        roles = getattr(model, "param_roles", {})
    trainable = frozen = 0
    unflagged, inconsistent = [], []
    for name, p in model.named_parameters():
        role = roles.get(name)
        if role is None:
            unflagged.append(name)
            continue
        if (role == TRAINABLE) != p.requires_grad:
            inconsistent.append(name)
        if role == TRAINABLE:
            trainable += p.numel()
        else:
            frozen += p.numel()
    if unflagged:
        raise AccountingError("parameters without a freeze flag: " + ", ".join(unflagged))
    if inconsistent:
        raise AccountingError("requires_grad disagrees with freeze flag: " + ", ".join(inconsistent))
    total = trainable + frozen
    return {
        "trainable": trainable,
        "frozen": frozen,
        "fraction": trainable / total if total else 0.0,
    }


# --------------------------------------------------------------------------------------
# Checkpoints and weight import
# --------------------------------------------------------------------------------------

def config_hash(config) -> str:
    payload = asdict(config) if is_dataclass(config) else dict(config)
    blob = json.dumps(payload, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def save_checkpoint(path: str | Path, model: nn.Module, config, extra: Mapping | None = None) -> None:
    """Write a zip archive: one ``.npy`` per named parameter/buffer + ``manifest.json``."""
    roles = getattr(model, "param_roles", {})
    state = model.state_dict()
    manifest = {
        "config": asdict(config) if is_dataclass(config) else dict(config),
        "config_hash": config_hash(config),
        "freeze_flags": {k: roles.get(k, "buffer") for k in state},
        "extra": dict(extra or {}),
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    # fixed timestamps keep archives byte-reproducible
    stamp = (1980, 1, 1, 0, 0, 0)
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        zf.writestr(zipfile.ZipInfo("manifest.json", date_time=stamp), json.dumps(manifest, sort_keys=True, indent=1))
        for name, t in state.items():
            buf = io.BytesIO()
            np.save(buf, t.detach().cpu().numpy(), allow_pickle=False)
            zf.writestr(zipfile.ZipInfo(f"params/{name}.npy", date_time=stamp), buf.getvalue())


def read_checkpoint(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    with zipfile.ZipFile(path) as zf:
        manifest = json.loads(zf.read("manifest.json"))
        arrays = {}
        for item in zf.namelist():
            if item.startswith("params/") and item.endswith(".npy"):
                arrays[item[len("params/"):-len(".npy")]] = np.load(io.BytesIO(zf.read(item)))
    return manifest, arrays


def load_state(model: nn.Module, arrays: Mapping[str, np.ndarray]) -> None:
    state = model.state_dict()
    missing = sorted(set(state) - set(arrays))
    unexpected = sorted(set(arrays) - set(state))
    if missing or unexpected:
        raise KeyError(f"checkpoint mismatch: missing={missing[:5]} unexpected={unexpected[:5]}")
    with torch.no_grad():
        for name, t in state.items():
            src = torch.as_tensor(arrays[name])
            if src.shape != t.shape:
                raise ValueError(f"{name}: checkpoint shape {tuple(src.shape)} != model {tuple(t.shape)}")
            t.copy_(src.to(t.dtype))


# Name-mapping tables for externally trained backbones. Keys are regexes over the
# external names, values are templates over this package's names. Entries mapped
# to a callable receive the whole external state and return the tensor.
#
# MAE/timm-style ViT (the format of masked-record-modeling checkpoints):
VIT_NAME_MAP: dict[str, str] = {
    r"^patch_embed\.proj\.weight$": "vision.patch_embed.weight",  # conv kernel, flattened below
    r"^patch_embed\.proj\.bias$": "vision.patch_embed.bias",
    r"^cls_token$": "vision.cls_token",
    r"^blocks\.(\d+)\.norm1\.(weight|bias)$": r"vision.blocks.\1.norm1.\2",
    r"^blocks\.(\d+)\.attn\.qkv\.(weight|bias)$": r"vision.blocks.\1.attn.qkv.\2",
    r"^blocks\.(\d+)\.attn\.proj\.(weight|bias)$": r"vision.blocks.\1.attn.proj.\2",
    r"^blocks\.(\d+)\.norm2\.(weight|bias)$": r"vision.blocks.\1.norm2.\2",
    r"^blocks\.(\d+)\.mlp\.fc1\.(weight|bias)$": r"vision.blocks.\1.mlp.fc1.\2",
    r"^blocks\.(\d+)\.mlp\.fc2\.(weight|bias)$": r"vision.blocks.\1.mlp.fc2.\2",
    r"^norm\.(weight|bias)$": r"vision.norm.\1",
    r"^decoder_embed\.(weight|bias)$": r"decoder.embed.\1",
    r"^mask_token$": "decoder.mask_token",
    r"^decoder_blocks\.(\d+)\.(.*)$": r"decoder.blocks.\1.\2",
    r"^decoder_norm\.(weight|bias)$": r"decoder.norm.\1",
    r"^decoder_pred\.(weight|bias)$": r"decoder.pred.\1",
}

# HuggingFace BERT-style language model. Query/key/value are fused into one qkv
# projection by :func:`import_backbone_weights`; each layer's output LayerNorm
# feeds the next layer, so it lands on the next block's norm1 (the last one on
# the tower's final norm).
BERT_NAME_MAP: dict[str, str] = {
    r"^(?:bert\.)?embeddings\.word_embeddings\.weight$": "language.tok_embed.weight",
    r"^(?:bert\.)?embeddings\.position_embeddings\.weight$": "language.pos_embed.weight",
    r"^(?:bert\.)?embeddings\.LayerNorm\.(weight|bias)$": r"language.emb_norm.\1",
    r"^(?:bert\.)?encoder\.layer\.(\d+)\.attention\.output\.dense\.(weight|bias)$": r"language.blocks.\1.attn.proj.\2",
    r"^(?:bert\.)?encoder\.layer\.(\d+)\.attention\.output\.LayerNorm\.(weight|bias)$": r"language.blocks.\1.norm2.\2",
    r"^(?:bert\.)?encoder\.layer\.(\d+)\.intermediate\.dense\.(weight|bias)$": r"language.blocks.\1.mlp.fc1.\2",
    r"^(?:bert\.)?encoder\.layer\.(\d+)\.output\.dense\.(weight|bias)$": r"language.blocks.\1.mlp.fc2.\2",
    r"^cls\.predictions\.transform\.dense\.(weight|bias)$": r"mlm_head.dense.\1",
    r"^cls\.predictions\.transform\.LayerNorm\.(weight|bias)$": r"mlm_head.norm.\1",
}

_BERT_QKV = re.compile(r"^(?:bert\.)?encoder\.layer\.(\d+)\.attention\.self\.(query|key|value)\.(weight|bias)$")
_BERT_OUT_LN = re.compile(r"^(?:bert\.)?encoder\.layer\.(\d+)\.output\.LayerNorm\.(weight|bias)$")


def import_backbone_weights(
    model: nn.Module,
    external: Mapping[str, np.ndarray | torch.Tensor],
    name_map: Mapping[str, str],
) -> list[str]:
    """Copy externally named backbone tensors into frozen model parameters.

    Only parameters flagged frozen are written; adapters, projectors and
    other trainable parts are never touched. Returns the external names that
    had no destination. Pre-norm/post-norm differences between the source
    architecture and :class:`AdapterBlock` are the caller's concern; the hook
    only moves tensors.
    """
    roles = getattr(model, "param_roles", {})
    params = dict(model.named_parameters())
    compiled = [(re.compile(k), v) for k, v in name_map.items()]
    unmatched: list[str] = []
    fused: dict[tuple[str, str], dict[str, torch.Tensor]] = {}

    def write(dest: str, value: torch.Tensor) -> None:
        if dest not in params:
            raise KeyError(f"mapped destination {dest!r} is not a model parameter")
        if roles.get(dest) != FROZEN:
            raise AccountingError(f"refusing to import into non-frozen parameter {dest!r}")
        p = params[dest]
        value = value.reshape(p.shape) if value.numel() == p.numel() else value
        if value.shape != p.shape:
            raise ValueError(f"{dest}: imported shape {tuple(value.shape)} != {tuple(p.shape)}")
        with torch.no_grad():
            p.copy_(value.to(p.dtype))

    for ext_name, value in external.items():
        value = torch.as_tensor(np.asarray(value))
        m = _BERT_QKV.match(ext_name)
        if m and name_map is BERT_NAME_MAP:
            fused.setdefault((m.group(1), m.group(3)), {})[m.group(2)] = value
            continue
        m = _BERT_OUT_LN.match(ext_name)
        if m and name_map is BERT_NAME_MAP:
            nxt = f"language.blocks.{int(m.group(1)) + 1}.norm1.{m.group(2)}"
            write(nxt if nxt in params else f"language.norm.{m.group(2)}", value)
            continue
        for pattern, template in compiled:
            if pattern.match(ext_name):
                write(pattern.sub(template, ext_name), value)
                break
        else:
            unmatched.append(ext_name)

    for (layer, kind), parts in fused.items():
        if set(parts) != {"query", "key", "value"}:
            unmatched.extend(f"layer {layer} {k}" for k in parts)
            continue
        write(f"language.blocks.{layer}.attn.qkv.{kind}",
              torch.cat([parts["query"], parts["key"], parts["value"]], dim=0))
    return unmatched
