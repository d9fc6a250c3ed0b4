"""Report tokenization, MLM token masking and the adapter-integrated language tower."""
from __future__ import annotations

import re
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .backbone import LN_EPS, AdapterBlock

CLS, MASK, UNK, PAD = "[CLS]", "[MASK]", "[UNK]", "[PAD]"
CLS_ID, MASK_ID, UNK_ID, PAD_ID = 0, 1, 2, 3
RESERVED = (CLS, MASK, UNK, PAD)
IGNORE_INDEX = -100
MAX_TOKENS = 128

_WORD_RE = re.compile(r"\w+|[^\w\s]")


class Vocab:
    """Token list where the line number is the id; ids 0-3 are reserved."""

    def __init__(self, tokens: Sequence[str]):
        tokens = list(tokens)
        if tuple(tokens[:4]) != RESERVED:
            raise ValueError(f"vocabulary must start with {RESERVED}, got {tokens[:4]}")
        if len(set(tokens)) != len(tokens):
            raise ValueError("vocabulary contains duplicate tokens")
        self.tokens = tokens
        self.index = {t: i for i, t in enumerate(tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self.index

    def id(self, token: str) -> int:
        return self.index.get(token, UNK_ID)

    @classmethod
    def from_words(cls, words: Iterable[str]) -> "Vocab":
        seen = dict.fromkeys(w for w in words if w not in RESERVED)
        return cls(list(RESERVED) + list(seen))

    @classmethod
    def from_file(cls, path: str | Path) -> "Vocab":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls([ln for ln in lines if ln != ""])

    def to_file(self, path: str | Path) -> None:
        Path(path).write_text("\n".join(self.tokens) + "\n", encoding="utf-8")


def build_vocab(texts: Iterable[str], min_count: int = 1) -> Vocab:
    counts: dict[str, int] = {}
    for text in texts:
        for w in _WORD_RE.findall(text.lower()):
            counts[w] = counts.get(w, 0) + 1
    words = sorted(w for w, c in counts.items() if c >= min_count)
    if "." in words:
        words.remove(".")
    return Vocab.from_words(["."] + words)


@dataclass(frozen=True)
class TokenizedReport:
    ids: np.ndarray
    mask_positions: np.ndarray | None = None
    targets: np.ndarray | None = None

    @property
    def n(self) -> int:
        return int(len(self.ids))


class WordPieceTokenizer:
    """Lower-cased word/punctuation splitter with greedy word-piece fallback.

    A word missing from the vocabulary is split into the longest known prefix
    followed by ``##``-prefixed continuation pieces; if no split exists the
    whole word becomes ``[UNK]``.
    """

    def __init__(self, vocab: Vocab, max_len: int = MAX_TOKENS, lowercase: bool = True):
        if max_len < 1:
            raise ValueError("max_len must be >= 1")
        self.vocab = vocab
        self.max_len = max_len
        self.lowercase = lowercase

    def _pieces(self, word: str) -> list[int]:
        if word in self.vocab:
            return [self.vocab.id(word)]
        out, start = [], 0
        while start < len(word):
            end = len(word)
            while end > start:
                piece = word[start:end] if start == 0 else "##" + word[start:end]
                if piece in self.vocab:
                    out.append(self.vocab.id(piece))
                    break
                end -= 1
            else:
                return [UNK_ID]
            start = end
        return out

    def __call__(self, text: str) -> TokenizedReport:
        return tokenize(text, self)


def tokenize(text: str, tokenizer: WordPieceTokenizer) -> TokenizedReport:
    """Class token followed by word pieces, truncated to ``tokenizer.max_len``."""
    if tokenizer.lowercase:
        text = text.lower()
    ids = [CLS_ID]
    for word in _WORD_RE.findall(text):
        ids.extend(tokenizer._pieces(word))
        if len(ids) >= tokenizer.max_len:
            break
    return TokenizedReport(np.asarray(ids[: tokenizer.max_len], dtype=np.int64))


def mask_tokens(t: TokenizedReport, ratio: float, rng: np.random.Generator) -> TokenizedReport:
    """Replace ``round(ratio*(n-1))`` non-class positions with ``[MASK]``.

    Originals are kept in ``targets``; every other target slot is
    ``IGNORE_INDEX``.
    """
    if not 0 <= ratio < 1:
        raise ValueError(f"mask ratio must be in [0, 1), got {ratio}")
    n = t.n
    k = int(round(ratio * (n - 1))) if n > 1 else 0
    if ratio > 0 and n < 2:
        raise ValueError("masking needs at least one non-class token")
    positions = np.sort(rng.choice(np.arange(1, n), size=k, replace=False)) if k else np.zeros(0, np.int64)
    ids = t.ids.copy()
    targets = np.full(n, IGNORE_INDEX, dtype=np.int64)
    targets[positions] = ids[positions]
    ids[positions] = MASK_ID
    return replace(t, ids=ids, mask_positions=positions.astype(np.int64), targets=targets)


def pad_batch(seqs: Sequence[np.ndarray], pad_value: int = PAD_ID) -> tuple[torch.Tensor, torch.Tensor]:
    """Right-pad integer sequences; returns ``(ids, pad_mask)`` with True at padding."""
    n = max(len(s) for s in seqs)
    ids = np.full((len(seqs), n), pad_value, dtype=np.int64)
    mask = np.ones((len(seqs), n), dtype=bool)
    for i, s in enumerate(seqs):
        ids[i, : len(s)] = s
        mask[i, : len(s)] = False
    return torch.from_numpy(ids), torch.from_numpy(mask)


class LanguageEncoder(nn.Module):
    """Token + learned positional embeddings, embedding LayerNorm, adapter blocks, final norm."""

    def __init__(
        self,
        vocab_size: int,
        dim: int,
        depth: int,
        heads: int,
        mlp_ratio: float = 4.0,
        max_len: int = MAX_TOKENS,
        adapter_ratio: float | None = 0.25,
        embed_std: float = 1.0,
    ):
        super().__init__()
        self.vocab_size = vocab_size
        self.dim = dim
        self.tok_embed = nn.Embedding(vocab_size, dim)
        self.pos_embed = nn.Embedding(max_len, dim)
        nn.init.normal_(self.tok_embed.weight, std=embed_std)
        nn.init.normal_(self.pos_embed.weight, std=embed_std)
        self.emb_norm = nn.LayerNorm(dim, eps=LN_EPS)
        self.blocks = nn.ModuleList(AdapterBlock(dim, heads, mlp_ratio, adapter_ratio) for _ in range(depth))
        self.norm = nn.LayerNorm(dim, eps=LN_EPS)

    def forward(
        self,
        ids: torch.Tensor,
        pad_mask: torch.Tensor | None = None,
        inject: torch.Tensor | None = None,
    ) -> torch.Tensor:
        """Encode ``(B, n)`` ids to ``(B, n, d)``.

        ``inject`` is an optional ``(B, d)`` vector added to every token
        embedding of its sample (the hybrid MLM input).
        """
        if ids.numel() and (int(ids.min()) < 0 or int(ids.max()) >= self.vocab_size):
            raise IndexError(f"token id out of range [0, {self.vocab_size})")
        if ids.shape[1] > self.pos_embed.num_embeddings:
            raise ValueError(f"sequence length {ids.shape[1]} exceeds {self.pos_embed.num_embeddings}")
        x = self.tok_embed(ids)
        if inject is not None:
            x = x + inject[:, None, :]
        pos = torch.arange(ids.shape[1], device=ids.device)
        x = self.emb_norm(x + self.pos_embed(pos)[None])
        for blk in self.blocks:
            x = blk(x, pad_mask)
        return self.norm(x)


def encode_report(t: TokenizedReport | Sequence[TokenizedReport], encoder: LanguageEncoder) -> torch.Tensor:
    """Encode one report to ``(n, d_R)`` or a list of reports to a padded ``(B, n_max, d_R)``."""
    single = isinstance(t, TokenizedReport)
    reports = [t] if single else list(t)
    ids, pad = pad_batch([r.ids for r in reports])
    p = next(encoder.parameters())
    z = encoder(ids.to(p.device), pad.to(p.device))
    return z[0] if single else z


class MlmHead(nn.Module):
    """Frozen transform (dense, GELU, LayerNorm) + output layer tied to the token embeddings.

    The bias lives outside the tied weight so it can be trainable on its own.
    """

    def __init__(self, dim: int, tok_embed: nn.Embedding):
        super().__init__()
        self.dense = nn.Linear(dim, dim)
        self.norm = nn.LayerNorm(dim, eps=LN_EPS)
        self._tied = [tok_embed]  # list keeps the tied module out of this head's parameters

    def forward(self, h: torch.Tensor, bias: torch.Tensor) -> torch.Tensor:
        h = self.norm(F.gelu(self.dense(h)))
        return h @ self._tied[0].weight.t() + bias
