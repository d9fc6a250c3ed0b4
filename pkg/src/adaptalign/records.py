"""Temporal-multiview record construction, augmentation, synthetic corpora and the record store.

A record holds an image quaternion ``(cf, cl, pf, pl)``: current frontal,
current lateral, prior frontal, prior lateral. Only ``cf`` is guaranteed; the
others are zero-filled grids when missing.
"""
from __future__ import annotations

import csv
import datetime as dt
import json
import logging
import math
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
from scipy import ndimage

from .language import CLS_ID, Vocab, WordPieceTokenizer
from .vision import VIEW_TAGS

log = logging.getLogger(__name__)

MANIFEST_COLUMNS = ("subject_id", "study_id", "image_id", "view", "study_date", "study_time", "report_path")
INTERVAL_EDGES = (0.0, 1.0, 7.0, 30.0, 90.0, 180.0, 365.0, 730.0, math.inf)


class ManifestError(ValueError):
    """Structural problem with a manifest (e.g. a missing column)."""


class EmptyCorpusError(ValueError):
    pass


class ConfigurationError(ValueError):
    pass


class View(str, Enum):
    FRONTAL = "FRONTAL"
    LATERAL = "LATERAL"
    OTHER = "OTHER"

    @classmethod
    def parse(cls, value: str) -> "View":
        v = value.strip().upper()
        if v in ("FRONTAL", "PA", "AP"):
            return cls.FRONTAL
        if v in ("LATERAL", "LL", "LAT"):
            return cls.LATERAL
        return cls.OTHER


@dataclass(frozen=True)
class StudyMeta:
    subject_id: str
    study_id: str
    image_id: str
    view: View
    study_date: dt.date
    study_time: dt.time
    report_text: str = ""

    @property
    def timestamp(self) -> dt.datetime:
        return dt.datetime.combine(self.study_date, self.study_time)


@dataclass
class Record:
    record_id: str
    images: dict[str, np.ndarray]
    present: dict[str, bool]
    report_tokens: np.ndarray
    time_interval_days: float | None = None
    report_text: str = ""
    label: int | None = None
    sources: dict[str, str] = field(default_factory=dict)
    warnings: tuple[str, ...] = ()


@dataclass
class CorpusStats:
    n_records: int
    frac_with_prior: float
    frac_with_lateral: float
    interval_histogram: list[tuple[tuple[float, float], int]]
    diagnostics: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "n_records": self.n_records,
            "frac_with_prior": self.frac_with_prior,
            "frac_with_lateral": self.frac_with_lateral,
            "interval_histogram": [
                {"lo_days": lo, "hi_days": (None if math.isinf(hi) else hi), "count": c}
                for (lo, hi), c in self.interval_histogram
            ],
            "diagnostics": list(self.diagnostics),
        }


@dataclass
class RecordConfig:
    input_size: int = 224
    resize_to: int = 256
    max_tokens: int = 128


@dataclass
class AugmentConfig:
    rotation_deg: float = 20.0
    shear_deg: float = 15.0
    translate: float = 0.1
    scale: tuple[float, float] = (0.95, 1.05)
    brightness: tuple[float, float] = (0.8, 1.2)
    contrast: tuple[float, float] = (0.8, 1.2)
    shuffle_sentences: bool = True
    sentence_end_id: int = 4
    max_tokens: int = 128

    @classmethod
    def identity(cls) -> "AugmentConfig":
        return cls(0.0, 0.0, 0.0, (1.0, 1.0), (1.0, 1.0), (1.0, 1.0), False)

    def is_identity_image(self) -> bool:
        return (self.rotation_deg == 0 and self.shear_deg == 0 and self.translate == 0
                and tuple(self.scale) == (1.0, 1.0) and tuple(self.brightness) == (1.0, 1.0)
                and tuple(self.contrast) == (1.0, 1.0))


# --------------------------------------------------------------------------------------
# Manifest parsing
# --------------------------------------------------------------------------------------

def parse_study_date(value: str) -> dt.date:
    return dt.datetime.strptime(value.strip(), "%Y%m%d").date()


def parse_study_time(value: str) -> dt.time:
    """``HHMMSS[.ffff]``; short integer parts are left-padded (``83000`` is 08:30:00)."""
    whole, _, frac = value.strip().partition(".")
    if not whole.isdigit() or len(whole) > 6 or (frac and not frac.isdigit()):
        raise ValueError(f"malformed study time {value!r}")
    whole = whole.zfill(6)
    micro = int(round(float("0." + frac) * 1e6)) if frac else 0
    return dt.time(int(whole[:2]), int(whole[2:4]), int(whole[4:6]), min(micro, 999999))


def read_manifest(path: str | Path) -> list[dict[str, str]]:
    """Raw manifest rows; tab-delimited if the header has a tab, else comma-delimited.

    ``report_path`` entries are resolved relative to the manifest directory.
    """
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    if not text.strip():
        return []
    header = text.splitlines()[0]
    delim = "\t" if "\t" in header else ","
    reader = csv.DictReader(text.splitlines(), delimiter=delim)
    cols = [c.strip() for c in (reader.fieldnames or [])]
    for col in MANIFEST_COLUMNS:
        if col not in cols:
            raise ManifestError(f"manifest is missing column {col!r}")
    rows = []
    for raw in reader:
        row = {k.strip(): (v or "").strip() for k, v in raw.items() if k}
        rp = row.get("report_path", "")
        row["report_path"] = str((path.parent / rp).resolve()) if rp else ""
        rows.append(row)
    return rows


def _parse_row(row: Mapping[str, str], report_loader: Callable[[str], str]) -> StudyMeta:
    missing = [c for c in MANIFEST_COLUMNS if c not in row and not (c == "report_path" and "report_text" in row)]
    if missing:
        raise ValueError(f"missing fields {missing}")
    date = parse_study_date(row["study_date"])
    time = parse_study_time(row["study_time"])
    text = row["report_text"] if "report_text" in row else report_loader(row["report_path"])
    return StudyMeta(row["subject_id"], row["study_id"], row["image_id"], View.parse(row["view"]), date, time, text)


def _read_report(path: str) -> str:
    return Path(path).read_text(encoding="utf-8") if path else ""


# --------------------------------------------------------------------------------------
# Preprocessing and record assembly
# --------------------------------------------------------------------------------------

def resize_and_crop(image: np.ndarray, resize_to: int, crop: int) -> np.ndarray:
    """Resize the shorter edge to ``resize_to`` (bilinear) and center-crop ``crop x crop``."""
    img = np.asarray(image, dtype=np.float64)
    if img.max(initial=0.0) > 1.0:
        img = img / 255.0
    h, w = img.shape
    if min(h, w) != resize_to:
        s = resize_to / min(h, w)
        img = ndimage.zoom(img, (max(resize_to, round(h * s)) / h, max(resize_to, round(w * s)) / w), order=1)
    h, w = img.shape
    top, left = (h - crop) // 2, (w - crop) // 2
    return np.clip(img[top:top + crop, left:left + crop], 0.0, 1.0).astype(np.float32)


def default_image_loader(root: str | Path) -> Callable[[str], np.ndarray]:
    """Load ``<root>/<image_id>.npy`` or ``<root>/<image_id>.png`` as a 2-D float grid."""
    root = Path(root)

    def load(image_id: str) -> np.ndarray:
        npy = root / f"{image_id}.npy"
        if npy.exists():
            return np.load(npy)
        from PIL import Image

        return np.asarray(Image.open(root / f"{image_id}.png").convert("L"), dtype=np.float32) / 255.0

    return load


def build_records(
    manifest: Iterable[StudyMeta | Mapping[str, str]],
    config: RecordConfig,
    tokenizer: WordPieceTokenizer,
    image_loader: Callable[[str], np.ndarray] | None = None,
    report_loader: Callable[[str], str] = _read_report,
) -> tuple[list[Record], CorpusStats]:
    """Assemble one temporal-multiview record per study that has a frontal image.

    Raw mapping rows are parsed here; rows with malformed dates/times,
    unreadable reports or duplicate ids are rejected and reported in
    ``CorpusStats.diagnostics``. Without an ``image_loader`` the records carry
    source image ids only and zero grids.
    """
    diagnostics: list[str] = []
    metas: list[StudyMeta] = []
    seen: set[tuple[str, str, str]] = set()
    for i, row in enumerate(manifest):
        if not isinstance(row, StudyMeta):
            try:
                row = _parse_row(row, report_loader)
            except (ValueError, OSError) as exc:
                diagnostics.append(f"row {i}: rejected ({exc})")
                continue
        key = (row.subject_id, row.study_id, row.image_id)
        if key in seen:
            diagnostics.append(f"row {i}: rejected (duplicate {key})")
            continue
        seen.add(key)
        metas.append(row)
    for d in diagnostics:
        log.warning(d)

    # group by subject -> study
    studies: dict[tuple[str, str], list[StudyMeta]] = {}
    for m in metas:
        studies.setdefault((m.subject_id, m.study_id), []).append(m)
    by_subject: dict[str, list[tuple[dt.datetime, str, dict[str, str]]]] = {}
    texts: dict[tuple[str, str], str] = {}
    for (subj, study), rows in studies.items():
        ts = {r.timestamp for r in rows}
        if len(ts) > 1:
            diagnostics.append(f"study {study}: inconsistent timestamps, earliest used")
        frontal = sorted(r.image_id for r in rows if r.view is View.FRONTAL)
        lateral = sorted(r.image_id for r in rows if r.view is View.LATERAL)
        if not frontal:
            reason = "undefined views only" if not lateral else "no frontal image"
            diagnostics.append(f"study {study}: excluded ({reason})")
            continue
        slots = {"f": frontal[0]}
        if lateral:
            slots["l"] = lateral[0]
        by_subject.setdefault(subj, []).append((min(ts), study, slots))
        texts[(subj, study)] = next((r.report_text for r in rows if r.report_text), "")

    blank = np.zeros((config.input_size, config.input_size), np.float32)
    cache: dict[str, np.ndarray] = {}

    def pixels(image_id: str) -> np.ndarray:
        if image_loader is None:
            return blank
        if image_id not in cache:
            cache[image_id] = resize_and_crop(image_loader(image_id), config.resize_to, config.input_size)
        return cache[image_id]

    records: list[Record] = []
    for subj in sorted(by_subject):
        seq = sorted(by_subject[subj], key=lambda s: (s[0], s[1]))
        for idx, (ts, study, slots) in enumerate(seq):
            prior = None
            for j in range(idx - 1, -1, -1):
                if seq[j][0] < ts:
                    prior = seq[j]
                    break
            sources = {"cf": slots["f"]}
            if "l" in slots:
                sources["cl"] = slots["l"]
            interval = None
            if prior is not None:
                sources["pf"] = prior[2]["f"]
                if "l" in prior[2]:
                    sources["pl"] = prior[2]["l"]
                interval = (ts - prior[0]).total_seconds() / 86400.0
            tokens = tokenizer(texts[(subj, study)]).ids[: config.max_tokens]
            records.append(Record(
                record_id=f"{subj}_{study}",
                images={t: (pixels(sources[t]) if t in sources else blank) for t in VIEW_TAGS},
                present={t: t in sources for t in VIEW_TAGS},
                report_tokens=tokens,
                time_interval_days=interval,
                report_text=texts[(subj, study)],
                sources=sources,
            ))
    if not records:
        raise EmptyCorpusError("empty corpus: no study with a frontal image survived filtering")
    return records, corpus_stats(records, diagnostics)


def interval_histogram(intervals: Sequence[float], edges: Sequence[float] = INTERVAL_EDGES):
    counts = [0] * (len(edges) - 1)
    for v in intervals:
        for b in range(len(edges) - 1):
            if edges[b] <= v < edges[b + 1]:
                counts[b] += 1
                break
    return [((edges[b], edges[b + 1]), counts[b]) for b in range(len(counts))]


def corpus_stats(records: Sequence[Record], diagnostics: Sequence[str] = ()) -> CorpusStats:
    n = len(records)
    with_prior = [r for r in records if r.present["pf"]]
    return CorpusStats(
        n_records=n,
        frac_with_prior=len(with_prior) / n if n else 0.0,
        frac_with_lateral=sum(r.present["cl"] for r in records) / n if n else 0.0,
        interval_histogram=interval_histogram([r.time_interval_days for r in with_prior]),
        diagnostics=list(diagnostics),
    )


# --------------------------------------------------------------------------------------
# Augmentation
# --------------------------------------------------------------------------------------

def _affine(img: np.ndarray, rng: np.random.Generator, cfg: AugmentConfig) -> np.ndarray:
    h, w = img.shape
    rot = math.radians(rng.uniform(-cfg.rotation_deg, cfg.rotation_deg))
    shear = math.radians(rng.uniform(-cfg.shear_deg, cfg.shear_deg))
    ty, tx = rng.uniform(-cfg.translate, cfg.translate, size=2) * (h, w)
    s = rng.uniform(*cfg.scale)
    b = rng.uniform(*cfg.brightness)
    c = rng.uniform(*cfg.contrast)
    # forward map (row, col) about the center: translate . rotate . shear . scale
    R = np.array([[math.cos(rot), -math.sin(rot)], [math.sin(rot), math.cos(rot)]])
    Sh = np.array([[1.0, 0.0], [math.tan(shear), 1.0]])
    A = R @ Sh * s
    inv = np.linalg.inv(A)
    center = np.array([(h - 1) / 2, (w - 1) / 2])
    offset = center - inv @ (center + np.array([ty, tx]))
    out = ndimage.affine_transform(img.astype(np.float64), inv, offset=offset, order=1, mode="constant", cval=0.0)
    out = out * b
    out = (out - out.mean()) * c + out.mean()
    return np.clip(out, 0.0, 1.0).astype(img.dtype)


def split_sentences(ids: np.ndarray, end_id: int) -> list[np.ndarray]:
    """Split a token body (no class token) after every sentence-end token."""
    cuts = np.flatnonzero(ids == end_id) + 1
    return [s for s in np.split(ids, cuts) if len(s)]


def augment(record: Record, rng: np.random.Generator, config: AugmentConfig) -> Record:
    """Random affine + intensity jitter on present views and a sentence shuffle of the report.

    Image and text randomness come from two generators spawned off ``rng``,
    so the sentence order depends only on the seed, not on the image ops.
    """
    img_rng, txt_rng = rng.spawn(2)
    images = dict(record.images)
    flags = list(record.warnings)
    if not config.is_identity_image():
        for tag in VIEW_TAGS:
            img = record.images[tag]
            if not record.present[tag]:
                continue
            if not np.any(img):
                flags.append(f"degenerate_view:{tag}")
                continue
            images[tag] = _affine(img, img_rng, config)
    tokens = record.report_tokens
    if config.shuffle_sentences and len(tokens) > 1:
        body = split_sentences(tokens[1:], config.sentence_end_id)
        order = txt_rng.permutation(len(body))
        tokens = np.concatenate([[CLS_ID], *[body[k] for k in order]]).astype(tokens.dtype)
    tokens = tokens[: config.max_tokens]
    return replace(record, images=images, report_tokens=tokens, warnings=tuple(flags))


# --------------------------------------------------------------------------------------
# Synthetic corpus
# --------------------------------------------------------------------------------------

FINDINGS = (
    "effusion", "edema", "pneumonia", "atelectasis", "cardiomegaly", "consolidation",
    "pneumothorax", "nodule", "fracture", "opacity", "emphysema", "fibrosis",
)
_FILLER = (
    "the heart size is normal .",
    "no acute osseous abnormality .",
    "lungs are otherwise clear .",
    "stable mediastinal contour .",
    "compared with the prior study .",
    "no free air under the diaphragm .",
)
_TEMPLATES = (
    "there is {f} in the {side} lung .",
    "findings consistent with {f} .",
    "{f} is present .",
)
_SIDES = ("left", "right")
PROMPT_TEMPLATES = ("there is {f} .", "findings consistent with {f} .", "{f} is present .")


def synthetic_vocab() -> Vocab:
    words = ["."]
    for text in _FILLER + _TEMPLATES + PROMPT_TEMPLATES + ("there is no {f} .",):
        words += text.replace("{f}", "").replace("{side}", "").split()
    words += list(_SIDES) + list(FINDINGS)
    return Vocab.from_words(words)


def class_prompts(n_classes: int) -> list[list[str]]:
    if n_classes > len(FINDINGS):
        raise ConfigurationError(f"{n_classes} classes exceed the synthetic vocabulary capacity {len(FINDINGS)}")
    return [[t.format(f=FINDINGS[c]) for t in PROMPT_TEMPLATES] for c in range(n_classes)]


@dataclass
class SyntheticConfig:
    image_size: int = 32
    noise: float = 0.05
    amplitude: float = 0.45
    offset_share: float = 0.5
    prior_rate: float = 0.75
    lateral_rate: float = 0.5
    n_filler: int = 0
    max_tokens: int = 128


def _class_patterns(n_classes: int, size: int, rng: np.random.Generator, offset_share: float = 0.5) -> np.ndarray:
    """Low-frequency cosine texture plus a class-specific brightness offset, scaled to [-1, 1].

    The offset keeps the class visible to near-uniform attention, which
    averages the zero-mean texture away.
    """
    offsets = rng.permutation(np.linspace(-1.0, 1.0, n_classes))
    yy, xx = np.meshgrid(np.linspace(0, 1, size), np.linspace(0, 1, size), indexing="ij")
    pats = np.zeros((n_classes, size, size))
    for c in range(n_classes):
        for _ in range(3):
            fy, fx = rng.integers(0, 3, size=2)
            phase = rng.uniform(0, 2 * np.pi)
            pats[c] += np.cos(2 * np.pi * (fy * yy + fx * xx) + phase)
        pats[c] /= np.abs(pats[c]).max() + 1e-12
        pats[c] = (1 - offset_share) * pats[c] + offset_share * offsets[c]
    return pats


def synthetic_report(label: int, rng: np.random.Generator, n_filler: int = 2) -> str:
    tpl = _TEMPLATES[rng.integers(len(_TEMPLATES))]
    finding = tpl.format(f=FINDINGS[label], side=_SIDES[rng.integers(2)])
    fillers = [_FILLER[k] for k in rng.choice(len(_FILLER), size=n_filler, replace=False)]
    sentences = [finding] + fillers
    return " ".join(sentences[k] for k in rng.permutation(len(sentences)))


def make_synthetic_corpus(
    n: int,
    n_classes: int,
    rng: np.random.Generator,
    config: SyntheticConfig | None = None,
) -> list[Record]:
    """Records whose images carry a planted per-class low-frequency pattern and whose
    reports mention the class finding; class counts are balanced (``i % n_classes``,
    shuffled)."""
    cfg = config or SyntheticConfig()
    if not n >= n_classes >= 2:
        raise ConfigurationError(f"need n >= n_classes >= 2, got n={n}, n_classes={n_classes}")
    if n_classes > len(FINDINGS):
        raise ConfigurationError(f"{n_classes} classes exceed the synthetic vocabulary capacity {len(FINDINGS)}")
    size = cfg.image_size
    tokenizer = WordPieceTokenizer(synthetic_vocab(), max_len=cfg.max_tokens)
    pats = _class_patterns(n_classes, size, rng, cfg.offset_share)
    labels = rng.permutation(np.arange(n) % n_classes)

    def image(pattern: np.ndarray, strength: float) -> np.ndarray:
        img = 0.5 + cfg.amplitude * strength * pattern + cfg.noise * rng.standard_normal((size, size))
        return np.clip(img, 0.0, 1.0).astype(np.float32)

    blank = np.zeros((size, size), np.float32)
    records = []
    for i, y in enumerate(labels):
        has_prior = rng.random() < cfg.prior_rate
        has_lateral = rng.random() < cfg.lateral_rate
        prior_lateral = has_prior and rng.random() < cfg.lateral_rate
        present = {"cf": True, "cl": has_lateral, "pf": has_prior, "pl": prior_lateral}
        images = {
            "cf": image(pats[y], 1.0),
            "cl": image(pats[y].T, 1.0) if has_lateral else blank,
            "pf": image(pats[y], 0.5) if has_prior else blank,
            "pl": image(pats[y].T, 0.5) if prior_lateral else blank,
        }
        text = synthetic_report(int(y), rng, cfg.n_filler)
        records.append(Record(
            record_id=f"syn{i:05d}",
            images=images,
            present=present,
            report_tokens=tokenizer(text).ids,
            time_interval_days=float(rng.lognormal(4.0, 1.2)) if has_prior else None,
            report_text=text,
            label=int(y),
        ))
    return records


# --------------------------------------------------------------------------------------
# Ablation views
# --------------------------------------------------------------------------------------

def drop_views(record: Record, tags: Iterable[str]) -> Record:
    """Mark ``tags`` absent and zero their grids (``cf`` cannot be dropped)."""
    tags = set(tags)
    if "cf" in tags:
        raise ValueError("the current frontal view cannot be dropped")
    if not tags:
        return record
    images = {t: (np.zeros_like(v) if t in tags else v) for t, v in record.images.items()}
    present = {t: (False if t in tags else v) for t, v in record.present.items()}
    interval = None if {"pf", "pl"} <= tags else record.time_interval_days
    return replace(record, images=images, present=present, time_interval_days=interval)


# --------------------------------------------------------------------------------------
# Record store
# --------------------------------------------------------------------------------------

INDEX_COLUMNS = ("record_id", "cf", "cl", "pf", "pl", "n_tokens", "time_interval_days", "label")


def save_record_store(records: Sequence[Record], out_dir: str | Path, image_format: str = "npy") -> Path:
    """One directory per split: ``index.tsv``, ``reports.jsonl`` and ``images/<id>_<tag>.{npy,png}``.

    Only present views are written; absent ones are zero grids on load.
    """
    if image_format not in ("npy", "png"):
        raise ValueError("image_format must be 'npy' or 'png'")
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    with open(out / "index.tsv", "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, delimiter="\t", lineterminator="\n")
        w.writerow(INDEX_COLUMNS)
        for r in records:
            w.writerow([r.record_id, *(int(r.present[t]) for t in VIEW_TAGS), len(r.report_tokens),
                        "" if r.time_interval_days is None else repr(r.time_interval_days),
                        "" if r.label is None else r.label])
    with open(out / "reports.jsonl", "w", encoding="utf-8") as f:
        for r in records:
            f.write(json.dumps({"record_id": r.record_id, "tokens": [int(t) for t in r.report_tokens],
                                "text": r.report_text, "sources": r.sources}, sort_keys=True) + "\n")
    size = next(iter(records)).images["cf"].shape if records else (0, 0)
    (out / "store.json").write_text(json.dumps({"image_format": image_format, "image_shape": list(size),
                                                "n_records": len(records)}, sort_keys=True))
    for r in records:
        for t in VIEW_TAGS:
            if not r.present[t]:
                continue
            if image_format == "npy":
                np.save(out / "images" / f"{r.record_id}_{t}.npy", r.images[t].astype(np.float32))
            else:
                from PIL import Image

                arr = np.round(np.clip(r.images[t], 0, 1) * 255).astype(np.uint8)
                Image.fromarray(arr, mode="L").save(out / "images" / f"{r.record_id}_{t}.png")
    return out


def load_record_store(store_dir: str | Path) -> list[Record]:
    store = Path(store_dir)
    meta = json.loads((store / "store.json").read_text())
    fmt, shape = meta["image_format"], tuple(meta["image_shape"])
    reports = {}
    with open(store / "reports.jsonl", encoding="utf-8") as f:
        for line in f:
            d = json.loads(line)
            reports[d["record_id"]] = d
    records = []
    with open(store / "index.tsv", encoding="utf-8") as f:
        for row in csv.DictReader(f, delimiter="\t"):
            rid = row["record_id"]
            present = {t: row[t] == "1" for t in VIEW_TAGS}
            images = {}
            for t in VIEW_TAGS:
                if not present[t]:
                    images[t] = np.zeros(shape, np.float32)
                elif fmt == "npy":
                    images[t] = np.load(store / "images" / f"{rid}_{t}.npy")
                else:
                    from PIL import Image

                    images[t] = np.asarray(Image.open(store / "images" / f"{rid}_{t}.png"), np.float32) / 255.0
            rep = reports[rid]
            records.append(Record(
                record_id=rid, images=images, present=present,
                report_tokens=np.asarray(rep["tokens"], dtype=np.int64),
                time_interval_days=float(row["time_interval_days"]) if row["time_interval_days"] else None,
                report_text=rep.get("text", ""), label=int(row["label"]) if row["label"] else None,
                sources=rep.get("sources", {}),
            ))
    return records
