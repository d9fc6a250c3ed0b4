"""Multi-task optimization of the alignment objective with warm-up + cosine schedule and early stopping."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .alignment import Temperatures, info_nce_global, info_nce_local
from .backbone import save_checkpoint
from .language import IGNORE_INDEX, TokenizedReport, mask_tokens, pad_batch
from .masked_modeling import mim_loss, mlm_loss
from .model import AlignmentModel, image_tensor
from .records import AugmentConfig, Record, augment, drop_views
from .vision import patchify

log = logging.getLogger(__name__)


class NonFiniteLossError(FloatingPointError):
    pass


class TrainingAborted(RuntimeError):
    pass


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 1.0
    lambda2: float = 1.0
    lambda3: float = 1.0

    def __post_init__(self):
        if min(self.lambda1, self.lambda2, self.lambda3) < 0:
            raise ValueError("loss weights must be nonnegative")


@dataclass(frozen=True)
class Ablation:
    """Switches mirroring the ablation rows: drop view families or loss terms."""

    temporal: bool = False
    multiview: bool = False
    local: bool = False
    mlm: bool = False
    mim: bool = False

    @classmethod
    def from_flags(cls, flags: Sequence[str]) -> "Ablation":
        known = {"temporal", "multiview", "local", "mlm", "mim"}
        bad = sorted(set(flags) - known)
        if bad:
            raise ValueError(f"unknown ablation flag(s) {bad}; choose from {sorted(known)}")
        return cls(**{f: True for f in flags})

    def dropped_views(self) -> set[str]:
        tags = set()
        if self.temporal:
            tags |= {"pf", "pl"}
        if self.multiview:
            tags |= {"cl", "pl"}
        return tags

    def effective(self, w: LossWeights) -> LossWeights:
        return LossWeights(
            0.0 if self.local else w.lambda1,
            0.0 if self.mlm else w.lambda2,
            0.0 if self.mim else w.lambda3,
        )


@dataclass
class TrainConfig:
    batch_size: int = 96
    lr: float = 5.625e-5
    weight_decay: float = 0.05
    betas: tuple[float, float] = (0.9, 0.95)
    warmup_steps: int = 200
    max_epochs: int = 30
    patience: int = 10
    seed: int = 0
    max_steps: int | None = None
    total_steps: int | None = None

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be > 0")
        if self.patience > self.max_epochs:
            raise ValueError("patience must not exceed max_epochs")
        self.betas = tuple(self.betas)


@dataclass
class LossReport:
    step: int
    l_global: float
    l_local: float
    l_mlm: float
    l_mim: float
    total: float
    lr: float

    def recompute_total(self, w: LossWeights) -> float:
        return self.l_global + w.lambda1 * self.l_local + w.lambda2 * self.l_mlm + w.lambda3 * self.l_mim


def lr_at(step: int, config: TrainConfig, total_steps: int | None = None) -> float:
    """Linear warm-up from 0 to the peak, then half-cosine decay to 0 at ``total_steps``."""
    if step < 0:
        raise ValueError("step must be >= 0")
    total = total_steps or config.total_steps or config.max_steps
    if total is None:
        raise ValueError("schedule length unknown: set total_steps or max_steps")
    warm = config.warmup_steps
    if step >= total:
        return 0.0
    if step < warm:
        return config.lr * step / warm
    progress = (step - warm) / max(1, total - warm)
    return config.lr * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass
class Batch:
    images: torch.Tensor
    present: torch.Tensor
    ids: torch.Tensor
    pad_mask: torch.Tensor
    tokens: list[np.ndarray]


def collate(records: Sequence[Record], dtype: torch.dtype = torch.float32) -> Batch:
    ids, pad = pad_batch([r.report_tokens for r in records])
    present = torch.tensor([[r.present[t] for t in ("cf", "cl", "pf", "pl")] for r in records])
    return Batch(image_tensor(records, dtype), present, ids, pad, [r.report_tokens for r in records])


def mim_targets(cf_images: torch.Tensor, patch: int, scale: int = 1) -> torch.Tensor:
    if scale != 1:
        cf_images = F.interpolate(cf_images[:, None], scale_factor=scale, mode="bilinear", align_corners=False)[:, 0]
    return patchify(cf_images, patch * scale)


def compute_losses(
    model: AlignmentModel,
    batch: Batch,
    weights: LossWeights,
    rng: np.random.Generator,
) -> dict[str, torch.Tensor]:
    """All four loss terms for one batch; terms with zero weight are skipped and reported as 0.

    Vision encodings of the masked quaternion are shared by the alignment and
    MIM terms; MLM runs a separately masked copy of the report through the
    language tower.
    """
    c = model.config
    B = batch.images.shape[0]
    keep, masked = model.draw_partitions(B, c.image_mask_ratio, rng)
    views = model.encode_images(batch.images, keep)
    img = model.image_bundle(views)
    txt = model.embed_texts(batch.ids, batch.pad_mask)
    zero = img.global_.new_zeros(())
    out = {"l_global": info_nce_global(img.global_, txt.global_, model.tau_global())}
    if weights.lambda1 > 0:
        taus = Temperatures(1.0, c.tau_attn, c.tau_local)
        out["l_local"] = info_nce_local(img.local, txt.local, taus, txt.local_mask, c.local_pool, c.local_direction)
    else:
        out["l_local"] = zero
    if weights.lambda2 > 0:
        masked_reports = [mask_tokens(TokenizedReport(t), c.text_mask_ratio, rng) for t in batch.tokens]
        ids, pad = pad_batch([r.ids for r in masked_reports])
        targets, _ = pad_batch([r.targets for r in masked_reports], pad_value=IGNORE_INDEX)
        out["l_mlm"] = mlm_loss(ids, pad, targets, img.global_, model.language, model.hybrid_proj,
                                model.mlm_head, model.mlm_bias)
    else:
        out["l_mlm"] = zero
    if weights.lambda3 > 0:
        target = mim_targets(batch.images[:, 0], c.patch_size, c.mim_target_scale)
        out["l_mim"] = mim_loss(views["cf"], keep[:, 0], masked[:, 0], model.decoder, target)
    else:
        out["l_mim"] = zero
    out["total"] = (out["l_global"] + weights.lambda1 * out["l_local"]
                    + weights.lambda2 * out["l_mlm"] + weights.lambda3 * out["l_mim"])
    return out


@dataclass
class FitResult:
    best_score: float
    best_epoch: int
    history: list[LossReport]
    validation: list[float]
    best_state: dict[str, torch.Tensor] = field(repr=False, default_factory=dict)
    stopped_early: bool = False


class Trainer:
    """AdamW over the trainable parameter set only; frozen parameters are never handed to the optimizer."""

    def __init__(
        self,
        model: AlignmentModel,
        config: TrainConfig,
        weights: LossWeights = LossWeights(),
        ablation: Ablation = Ablation(),
        augment_config: AugmentConfig | None = None,
    ):
        self.model = model
        self.config = config
        self.ablation = ablation
        self.weights = ablation.effective(weights)
        self.augment_config = augment_config
        self.rng = np.random.default_rng(config.seed)
        self.step = 0
        named = model.trainable_parameters()
        decay = [p for n, p in named if p.ndim >= 2]
        no_decay = [p for n, p in named if p.ndim < 2]
        self.optimizer = torch.optim.AdamW(
            [{"params": decay, "weight_decay": config.weight_decay}, {"params": no_decay, "weight_decay": 0.0}],
            lr=config.lr, betas=config.betas,
        )
        self.dtype = next(model.parameters()).dtype

    def prepare(self, records: Sequence[Record]) -> Batch:
        dropped = self.ablation.dropped_views()
        recs = [drop_views(r, dropped) for r in records]
        if self.augment_config is not None:
            recs = [augment(r, self.rng, self.augment_config) for r in recs]
        return collate(recs, self.dtype)

    def train_step(self, records: Sequence[Record] | Batch) -> LossReport:
        batch = records if isinstance(records, Batch) else self.prepare(records)
        lr = lr_at(self.step, self.config)
        for group in self.optimizer.param_groups:
            group["lr"] = lr
        self.model.train()
        losses = compute_losses(self.model, batch, self.weights, self.rng)
        values = {k: float(v.detach()) for k, v in losses.items()}
        if not all(math.isfinite(v) for v in values.values()):
            raise NonFiniteLossError(f"non-finite loss at step {self.step}: {values}")
        self.optimizer.zero_grad(set_to_none=True)
        losses["total"].backward()
        self.optimizer.step()
        report = LossReport(step=self.step, lr=lr, **values)
        self.step += 1
        return report

    def _snapshot(self) -> dict[str, torch.Tensor]:
        return {n: p.detach().clone() for n, p in self.model.trainable_parameters()}

    def fit(
        self,
        corpus: Sequence[Record],
        scorer: Callable[[AlignmentModel], float],
        out_dir: str | Path | None = None,
    ) -> FitResult:
        """Epoch loop with early stopping on ``scorer``; the best state is restored into the model.

        Writes ``history.jsonl`` (one LossReport per step) and
        ``validation.jsonl`` to ``out_dir`` as training proceeds, and
        ``best.ckpt`` at the end.
        """
        cfg = self.config
        bs = min(cfg.batch_size, len(corpus))
        if bs < 2:
            raise ValueError("contrastive training needs at least 2 records per batch")
        steps_per_epoch = len(corpus) // bs
        if cfg.total_steps is None:
            cfg.total_steps = cfg.max_steps or cfg.max_epochs * steps_per_epoch
        max_steps = cfg.max_steps or cfg.total_steps
        out = Path(out_dir) if out_dir is not None else None
        if out is not None:
            out.mkdir(parents=True, exist_ok=True)
        hist_f = open(out / "history.jsonl", "w", encoding="utf-8") if out else None
        val_f = open(out / "validation.jsonl", "w", encoding="utf-8") if out else None
        history: list[LossReport] = []
        validation: list[float] = []
        best, best_epoch, bad = -math.inf, -1, 0
        best_state = self._snapshot()
        stopped = False
        try:
            for epoch in range(cfg.max_epochs):
                order = self.rng.permutation(len(corpus))
                for b in range(steps_per_epoch):
                    if self.step >= max_steps:
                        break
                    report = self.train_step([corpus[i] for i in order[b * bs:(b + 1) * bs]])
                    history.append(report)
                    if hist_f:
                        hist_f.write(json.dumps(asdict(report), sort_keys=True) + "\n")
                        hist_f.flush()
                self.model.eval()
                try:
                    score = float(scorer(self.model))
                except Exception as exc:
                    raise TrainingAborted(f"validation scorer failed after epoch {epoch}: {exc}") from exc
                validation.append(score)
                if val_f:
                    val_f.write(json.dumps({"epoch": epoch, "score": score, "step": self.step}, sort_keys=True) + "\n")
                    val_f.flush()
                if score > best:
                    best, best_epoch, bad = score, epoch, 0
                    best_state = self._snapshot()
                else:
                    bad += 1
                if bad >= cfg.patience:
                    stopped = True
                    break
                if self.step >= max_steps:
                    break
        finally:
            for f in (hist_f, val_f):
                if f:
                    f.close()
        with torch.no_grad():
            params = dict(self.model.named_parameters())
            for n, v in best_state.items():
                params[n].copy_(v)
        if out is not None:
            save_checkpoint(out / "best.ckpt", self.model, self.model.config,
                            extra={"best_score": best, "best_epoch": best_epoch})
        return FitResult(best, best_epoch, history, validation, best_state, stopped)
