"""Retrieval P@k, prompt-based zero-shot classification and sentence-similarity classification."""
from __future__ import annotations

import hashlib
import json
import warnings
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np
import torch
from scipy.stats import rankdata

from .alignment import EmbeddingBundle
from .language import TokenizedReport, WordPieceTokenizer, pad_batch
from .model import AlignmentModel, image_tensor
from .records import (
    FINDINGS,
    ConfigurationError,
    Record,
    SyntheticConfig,
    class_prompts,
    make_synthetic_corpus,
    synthetic_vocab,
)

TASKS = ("I2I", "T2I", "I2T", "ZSHOT-MULTI", "ZSHOT-BINARY", "SENT-SIM")
RETRIEVAL_TASKS = ("I2I", "T2I", "I2T")


class ProtocolError(ValueError):
    pass


# --------------------------------------------------------------------------------------
# Protocol and report types
# --------------------------------------------------------------------------------------

def _item_key(item) -> object:
    if isinstance(item, Record):
        return item.record_id
    if isinstance(item, TokenizedReport):
        return [int(t) for t in item.ids]
    if isinstance(item, tuple):
        return [_item_key(x) for x in item]
    return [int(t) for t in np.asarray(item)]


@dataclass
class EvalProtocol:
    """Queries, candidates and labels for one evaluation task.

    Retrieval: ``queries``/``candidates`` are Records (image or report side
    chosen by ``kind``). Zero-shot: ``queries`` are Records and ``prompts``
    holds tokenized prompts per class. Sentence similarity: ``queries`` are
    pairs of token arrays with binary ``query_labels``.
    """

    kind: str
    queries: list
    query_labels: np.ndarray
    candidates: list = field(default_factory=list)
    candidate_labels: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))
    ks: tuple[int, ...] = (5, 10, 50)
    prompts: list[list[np.ndarray]] | None = None
    folds: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.kind not in TASKS:
            raise ProtocolError(f"unknown task {self.kind!r}; choose from {TASKS}")
        self.query_labels = np.asarray(self.query_labels, dtype=np.int64)
        self.candidate_labels = np.asarray(self.candidate_labels, dtype=np.int64)
        self.ks = tuple(int(k) for k in self.ks)
        if len(self.queries) != len(self.query_labels):
            raise ProtocolError("one label per query required")
        if self.kind in RETRIEVAL_TASKS:
            if len(self.candidates) == 0:
                raise ProtocolError("empty candidate set")
            if len(self.candidates) != len(self.candidate_labels):
                raise ProtocolError("one label per candidate required")
            missing = set(self.query_labels.tolist()) - set(self.candidate_labels.tolist())
            if missing:
                raise ProtocolError(f"query classes {sorted(missing)} absent from candidates")
            if max(self.ks) > len(self.candidates):
                raise ProtocolError(f"k={max(self.ks)} exceeds candidate count {len(self.candidates)}")
        if self.kind.startswith("ZSHOT"):
            if not self.prompts:
                raise ProtocolError("zero-shot protocol needs prompt sets")
            empty = [c for c, p in enumerate(self.prompts) if len(p) == 0]
            if empty:
                raise ProtocolError(f"class(es) {empty} have zero prompts")
            if self.kind == "ZSHOT-BINARY" and len(self.prompts) != 2:
                raise ProtocolError("binary zero-shot needs exactly two prompt sets (negative, positive)")

    def hash(self) -> str:
        payload = {
            "kind": self.kind,
            "ks": list(self.ks),
            "queries": [_item_key(q) for q in self.queries],
            "query_labels": self.query_labels.tolist(),
            "candidates": [_item_key(c) for c in self.candidates],
            "candidate_labels": self.candidate_labels.tolist(),
            "prompts": None if self.prompts is None else [[_item_key(p) for p in ps] for ps in self.prompts],
            "folds": self.folds,
            "seed": self.seed,
        }
        return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class MetricReport:
    kind: str
    protocol_hash: str
    precision: dict[int, float] = field(default_factory=dict)
    acc: float | None = None
    f1: float | None = None
    auc: float | None = None
    threshold: float | None = None
    per_class: dict[str, dict[str, float]] = field(default_factory=dict)
    config_hash: str | None = None
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["precision"] = {f"P@{k}": v for k, v in sorted(self.precision.items())}
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    def to_table(self) -> str:
        """Tab-delimited single-row table: P@k columns (percent) then ACC/F1/AUC where defined."""
        cols, vals = ["task"], [self.kind]
        for k, v in sorted(self.precision.items()):
            cols.append(f"P@{k}")
            vals.append(f"{100 * v:.1f}")
        for name in ("acc", "f1", "auc"):
            v = getattr(self, name)
            if v is not None:
                cols.append(name.upper())
                vals.append(f"{100 * v:.1f}")
        return "\t".join(cols) + "\n" + "\t".join(vals) + "\n"


# --------------------------------------------------------------------------------------
# Embedding
# --------------------------------------------------------------------------------------

def _as_ids(item) -> np.ndarray:
    if isinstance(item, Record):
        return item.report_tokens
    if isinstance(item, TokenizedReport):
        return item.ids
    return np.asarray(item, dtype=np.int64)


@torch.no_grad()
def embed_for_eval(
    items: Sequence,
    model: AlignmentModel,
    modality: str,
    batch_size: int = 256,
    with_local: bool = False,
) -> EmbeddingBundle:
    """Unmasked, gradient-free embeddings; ``modality`` is ``"image"`` (Records) or ``"text"``.

    Every patch is kept (mask ratio 0). Locals are skipped unless requested.
    """
    if modality not in ("image", "text"):
        raise ValueError("modality must be 'image' or 'text'")
    was_training = model.training
    model.eval()
    dtype = next(model.parameters()).dtype
    globals_, locals_, masks = [], [], []
    try:
        for i in range(0, len(items), batch_size):
            chunk = items[i:i + batch_size]
            if modality == "image":
                b = model.embed_images(image_tensor(chunk, dtype), None, with_local)
            else:
                ids, pad = pad_batch([_as_ids(x) for x in chunk])
                b = model.embed_texts(ids, pad)
                masks.append(b.local_mask)
            globals_.append(b.global_)
            locals_.append(b.local)
    finally:
        model.train(was_training)
    g = torch.cat(globals_)
    if modality == "text":
        # text locals vary in length across chunks; keep them only when asked
        if with_local:
            L = max(x.shape[1] for x in locals_)
            loc = torch.cat([torch.nn.functional.pad(x, (0, 0, 0, L - x.shape[1])) for x in locals_])
            mask = torch.cat([torch.nn.functional.pad(m, (0, L - m.shape[1])) for m in masks])
            return EmbeddingBundle(g, loc, "text", mask)
        return EmbeddingBundle(g, g.new_zeros(g.shape[0], 0, g.shape[1]), "text")
    return EmbeddingBundle(g, torch.cat(locals_), "image")


def _unit(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return x / np.maximum(np.linalg.norm(x, axis=-1, keepdims=True), 1e-12)


# --------------------------------------------------------------------------------------
# Metrics
# --------------------------------------------------------------------------------------

def rank_candidates(queries: np.ndarray, candidates: np.ndarray) -> np.ndarray:
    """Candidate indices per query, most similar first; equal similarities keep index order."""
    sims = _unit(queries) @ _unit(candidates).T
    return np.argsort(-sims, axis=1, kind="stable")


def precision_at_k(
    queries: np.ndarray,
    candidates: np.ndarray,
    query_labels: np.ndarray,
    candidate_labels: np.ndarray,
    k: int,
) -> float:
    """Mean over queries of the fraction of the top-``k`` candidates sharing the query class."""
    return precision_at_ks(queries, candidates, query_labels, candidate_labels, (k,))[0][k]


def precision_at_ks(queries, candidates, query_labels, candidate_labels, ks: Sequence[int]):
    """``({k: P@k}, {class: {k: P@k}})`` from one ranking."""
    candidate_labels = np.asarray(candidate_labels)
    query_labels = np.asarray(query_labels)
    if len(candidates) == 0:
        raise ProtocolError("empty candidate set")
    if max(ks) > len(candidates):
        raise ProtocolError(f"k={max(ks)} exceeds candidate count {len(candidates)}")
    order = rank_candidates(queries, candidates)[:, : max(ks)]
    hits = candidate_labels[order] == query_labels[:, None]
    # one division per value so the result is the correctly rounded hit fraction
    overall = {k: int(hits[:, :k].sum()) / (len(hits) * k) for k in ks}
    per_class = {}
    for c in np.unique(query_labels):
        sel = hits[query_labels == c]
        per_class[int(c)] = {k: int(sel[:, :k].sum()) / (len(sel) * k) for k in ks}
    return overall, per_class


def auc_score(scores: np.ndarray, labels: np.ndarray) -> float:
    """ROC AUC as the normalized Mann-Whitney U statistic (ties count one half)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    n_pos, n_neg = int(labels.sum()), int((~labels).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs both classes present")
    ranks = rankdata(scores)
    return float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def binary_f1(pred: np.ndarray, labels: np.ndarray) -> float:
    pred, labels = np.asarray(pred).astype(bool), np.asarray(labels).astype(bool)
    tp = int((pred & labels).sum())
    denom = int(pred.sum()) + int(labels.sum())
    return 2 * tp / denom if denom else 0.0


def macro_f1(pred: np.ndarray, labels: np.ndarray) -> float:
    classes = np.union1d(np.unique(pred), np.unique(labels))
    return float(np.mean([binary_f1(pred == c, labels == c) for c in classes]))


def threshold_grid(step: float = 0.005) -> np.ndarray:
    n = int(round(1.0 / step))
    if not np.isclose(n * step, 1.0):
        raise ValueError("step must divide 1")
    return np.linspace(0.0, 1.0, n + 1)


def _minmax(x: np.ndarray, ref: np.ndarray) -> np.ndarray:
    lo, hi = float(ref.min()), float(ref.max())
    return np.zeros_like(x) if hi == lo else (x - lo) / (hi - lo)


def _best_threshold(norm_scores: np.ndarray, labels: np.ndarray, grid: np.ndarray) -> float:
    """Middle of the grid points that tie for the best accuracy (the widest-margin choice)."""
    accs = ((norm_scores[None, :] >= grid[:, None]) == labels[None, :]).mean(axis=1)
    ties = np.flatnonzero(accs == accs.max())
    return float(grid[ties[len(ties) // 2]])


@dataclass
class ThresholdResult:
    threshold: float
    acc: float
    f1: float
    auc: float | None
    folds_used: int
    fold_metrics: list[dict] = field(default_factory=list)


def tune_threshold(
    scores: np.ndarray,
    labels: np.ndarray,
    folds: int = 10,
    step: float = 0.005,
    seed: int = 0,
) -> ThresholdResult:
    """Cross-validated threshold selection on a min-max normalized score.

    Each fold tunes the ACC-maximizing grid threshold on the other folds (scores
    normalized by the tuning portion's min/max) and is scored on itself. A fold
    whose tuning or held-out part has a single class is skipped with a warning.
    The returned threshold is the grid argmax on the full set.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ValueError("scores and labels must be 1-D of equal length")
    if len(scores) < folds:
        raise ValueError(f"need at least {folds} items for {folds}-fold tuning")
    grid = threshold_grid(step)
    parts = np.array_split(np.random.default_rng(seed).permutation(len(scores)), folds)
    fold_metrics = []
    for f, test in enumerate(parts):
        tune = np.setdiff1d(np.arange(len(scores)), test)
        if len(np.unique(labels[tune])) < 2 or len(np.unique(labels[test])) < 2:
            warnings.warn(f"fold {f} has a single class; skipped", RuntimeWarning, stacklevel=2)
            continue
        thr = _best_threshold(_minmax(scores[tune], scores[tune]), labels[tune], grid)
        pred = _minmax(scores[test], scores[tune]) >= thr
        fold_metrics.append({
            "fold": f, "threshold": thr,
            "acc": float((pred == labels[test]).mean()),
            "f1": binary_f1(pred, labels[test]),
            "auc": auc_score(scores[test], labels[test]),
        })
    if not fold_metrics:
        raise ValueError("every fold was single-class; cannot tune a threshold")
    full_auc = auc_score(scores, labels) if len(np.unique(labels)) == 2 else None
    return ThresholdResult(
        threshold=_best_threshold(_minmax(scores, scores), labels, grid),
        acc=float(np.mean([m["acc"] for m in fold_metrics])),
        f1=float(np.mean([m["f1"] for m in fold_metrics])),
        auc=full_auc,
        folds_used=len(fold_metrics),
        fold_metrics=fold_metrics,
    )


# --------------------------------------------------------------------------------------
# Task runners
# --------------------------------------------------------------------------------------

def class_scores(image_globals: np.ndarray, prompt_globals: Sequence[np.ndarray]) -> np.ndarray:
    """``(N, C)``: mean cosine between each image and the prompts of each class."""
    img = _unit(image_globals)
    return np.stack([(img @ _unit(p).T).mean(axis=1) for p in prompt_globals], axis=1)


def zero_shot_from_embeddings(
    image_globals: np.ndarray,
    prompt_globals: Sequence[np.ndarray],
    labels: np.ndarray,
    binary: bool = False,
    folds: int = 10,
    seed: int = 0,
    protocol_hash: str = "",
) -> MetricReport:
    if any(len(p) == 0 for p in prompt_globals):
        raise ProtocolError("every class needs at least one prompt")
    labels = np.asarray(labels, dtype=np.int64)
    s = class_scores(image_globals, prompt_globals)
    if binary:
        diff = s[:, 1] - s[:, 0]
        tr = tune_threshold(diff, labels == 1, folds=folds, seed=seed)
        return MetricReport("ZSHOT-BINARY", protocol_hash, acc=tr.acc, f1=tr.f1, auc=tr.auc,
                            threshold=tr.threshold, extra={"folds_used": tr.folds_used})
    pred = np.argmax(s, axis=1)
    per_class = {}
    aucs = []
    for c in range(s.shape[1]):
        row = {"support": float((labels == c).sum()), "f1": binary_f1(pred == c, labels == c)}
        if 0 < (labels == c).sum() < len(labels):
            row["auc"] = auc_score(s[:, c], labels == c)
            aucs.append(row["auc"])
        per_class[str(c)] = row
    return MetricReport(
        "ZSHOT-MULTI", protocol_hash,
        acc=float((pred == labels).mean()),
        f1=macro_f1(pred, labels),
        auc=float(np.mean(aucs)) if aucs else None,
        per_class=per_class,
    )


def zero_shot_classify(protocol: EvalProtocol, model: AlignmentModel) -> MetricReport:
    img = embed_for_eval(protocol.queries, model, "image").global_.numpy()
    prompts = [embed_for_eval(p, model, "text").global_.numpy() for p in protocol.prompts]
    return zero_shot_from_embeddings(img, prompts, protocol.query_labels, protocol.kind == "ZSHOT-BINARY",
                                     protocol.folds, protocol.seed, protocol.hash())


def sentence_similarity(protocol: EvalProtocol, model: AlignmentModel) -> MetricReport:
    """Pair score = cosine of the two text globals; thresholded by ``tune_threshold``."""
    a = embed_for_eval([p[0] for p in protocol.queries], model, "text").global_.numpy()
    b = embed_for_eval([p[1] for p in protocol.queries], model, "text").global_.numpy()
    scores = (_unit(a) * _unit(b)).sum(axis=1)
    tr = tune_threshold(scores, protocol.query_labels == 1, folds=protocol.folds, seed=protocol.seed)
    return MetricReport("SENT-SIM", protocol.hash(), acc=tr.acc, f1=tr.f1, auc=tr.auc, threshold=tr.threshold,
                        extra={"folds_used": tr.folds_used, "mean_score": float(scores.mean())})


def retrieval(protocol: EvalProtocol, model: AlignmentModel) -> MetricReport:
    q_mod, c_mod = {"I2I": ("image", "image"), "T2I": ("text", "image"), "I2T": ("image", "text")}[protocol.kind]
    q = embed_for_eval(protocol.queries, model, q_mod).global_.numpy()
    c = embed_for_eval(protocol.candidates, model, c_mod).global_.numpy()
    overall, per_class = precision_at_ks(q, c, protocol.query_labels, protocol.candidate_labels, protocol.ks)
    return MetricReport(
        protocol.kind, protocol.hash(), precision=overall,
        per_class={str(k): {f"P@{kk}": v for kk, v in d.items()} for k, d in per_class.items()},
    )


def evaluate(protocol: EvalProtocol, model: AlignmentModel) -> MetricReport:
    if protocol.kind in RETRIEVAL_TASKS:
        return retrieval(protocol, model)
    if protocol.kind.startswith("ZSHOT"):
        return zero_shot_classify(protocol, model)
    return sentence_similarity(protocol, model)


def retrieval_scorer(val_records: Sequence[Record], k: int = 5):
    """Default validation score for training: text-to-image P@k over a labelled split."""
    labels = np.array([r.label for r in val_records])
    protocol = EvalProtocol("T2I", list(val_records), labels, list(val_records), labels, ks=(k,))

    def score(model: AlignmentModel) -> float:
        return retrieval(protocol, model).precision[k]

    return score


# --------------------------------------------------------------------------------------
# Protocol builders
# --------------------------------------------------------------------------------------

def retrieval_protocol(
    records: Sequence[Record],
    kind: str,
    n_queries_per_class: int,
    ks: Sequence[int] = (5, 10, 50),
    seed: int = 0,
) -> EvalProtocol:
    """Split labelled records into per-class queries and the remaining candidates."""
    if any(r.label is None for r in records):
        raise ProtocolError("retrieval protocols need labelled records")
    labels = np.array([r.label for r in records])
    order = np.random.default_rng(seed).permutation(len(records))
    q_idx = np.concatenate([order[labels[order] == c][:n_queries_per_class] for c in np.unique(labels)])
    q_idx = np.sort(q_idx)
    c_idx = np.setdiff1d(np.arange(len(records)), q_idx)
    return EvalProtocol(kind, [records[i] for i in q_idx], labels[q_idx],
                        [records[i] for i in c_idx], labels[c_idx], ks=tuple(ks), seed=seed)


def synthetic_retrieval_protocol(
    kind: str,
    n_classes: int,
    candidates_per_class: int = 200,
    queries_per_class: int = 10,
    seed: int = 0,
    ks: Sequence[int] = (5, 10, 50),
    config: SyntheticConfig | None = None,
) -> EvalProtocol:
    n = n_classes * (candidates_per_class + queries_per_class)
    records = make_synthetic_corpus(n, n_classes, np.random.default_rng(seed), config)
    return retrieval_protocol(records, kind, queries_per_class, ks, seed)


def tokenized_prompts(prompt_texts: Sequence[Sequence[str]], tokenizer: WordPieceTokenizer) -> list[list[np.ndarray]]:
    return [[tokenizer(t).ids for t in texts] for texts in prompt_texts]


def zero_shot_protocol(
    records: Sequence[Record],
    prompt_texts: Sequence[Sequence[str]],
    tokenizer: WordPieceTokenizer | None = None,
    binary: bool = False,
    seed: int = 0,
) -> EvalProtocol:
    tok = tokenizer or WordPieceTokenizer(synthetic_vocab())
    labels = np.array([r.label for r in records])
    return EvalProtocol("ZSHOT-BINARY" if binary else "ZSHOT-MULTI", list(records), labels,
                        prompts=tokenized_prompts(prompt_texts, tok), seed=seed)


def synthetic_zero_shot_protocol(records: Sequence[Record], n_classes: int, binary: bool = False, seed: int = 0):
    """Prompts built from the synthetic templates.

    Binary asks "class 1 or not": the positive set is the class-1 prompts and the negative
    set pools the prompts of every other class. The corpus never negates a finding, so
    negated prompts would be out of distribution.
    """
    if binary:
        per_class = class_prompts(n_classes)
        prompts = [sum((p for c, p in enumerate(per_class) if c != 1), []), per_class[1]]
        relabelled = [r if r.label is None else _with_label(r, int(r.label == 1)) for r in records]
        return zero_shot_protocol(relabelled, prompts, binary=True, seed=seed)
    return zero_shot_protocol(records, class_prompts(n_classes), seed=seed)


def _with_label(r: Record, label: int) -> Record:
    return replace(r, label=label)


def synthetic_sentence_pairs(n_pairs: int, n_classes: int, seed: int = 0) -> EvalProtocol:
    """Balanced paraphrase (same finding, different phrasing, label 1) and
    contradiction (finding asserted vs negated, label 0) pairs."""
    if n_classes > len(FINDINGS):
        raise ConfigurationError(f"{n_classes} classes exceed the synthetic vocabulary capacity {len(FINDINGS)}")
    rng = np.random.default_rng(seed)
    tok = WordPieceTokenizer(synthetic_vocab())
    templates = class_prompts(n_classes)
    pairs, labels = [], []
    for i in range(n_pairs):
        c = int(rng.integers(n_classes))
        a, b = rng.choice(len(templates[c]), size=2, replace=False)
        if i % 2 == 0:
            pairs.append((tok(templates[c][a]).ids, tok(templates[c][b]).ids))
            labels.append(1)
        else:
            pairs.append((tok(templates[c][a]).ids, tok(f"there is no {FINDINGS[c]} .").ids))
            labels.append(0)
    return EvalProtocol("SENT-SIM", pairs, np.array(labels), seed=seed)
