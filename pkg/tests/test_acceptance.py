"""Acceptance suite: one test per criterion, each recording a pass/fail line.

The lines are printed at the end of the session by the terminal-summary hook in conftest.
"""
import json
import math
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest
import torch
import torch.nn.functional as F

import oracles as O
from conftest import randomize_adapters
from test_backbone import fd_grad, rel_err
from adaptalign import evaluator as ev
from adaptalign.alignment import (LogTemperature, Projector, Temperatures, info_nce_global, info_nce_local,
                                  symmetric_info_nce)
from adaptalign.backbone import Adapter, AdapterBlock, adapter_forward, block_forward
from adaptalign.cli import EXIT_OK, main
from adaptalign.language import CLS_ID, IGNORE_INDEX, TokenizedReport, mask_tokens, pad_batch
from adaptalign.masked_modeling import mim_loss, mlm_loss
from adaptalign.model import AlignmentModel, ModelConfig, build_model
from adaptalign.records import make_synthetic_corpus
from adaptalign.trainer import TrainConfig, Trainer, collate, mim_targets
from adaptalign.vision import VIEW_TAGS, mask_patches

RESULTS: dict[int, str] = {}
FIXTURE = Path(__file__).parent / "fixtures" / "manifest6.tsv"


def record(n: int, title: str, ok: bool, detail: str) -> None:
    RESULTS[n] = f"[{'PASS' if ok else 'FAIL'}] criterion {n:2d}: {title}: {detail}"
    assert ok, RESULTS[n]


# 1 -----------------------------------------------------------------------------------

def test_c01_random_baseline():
    t0 = time.perf_counter()
    worst = []
    summary = []
    for n_classes in (8, 5):
        vals = []
        for seed in range(20):
            p = ev.synthetic_retrieval_protocol("T2I", n_classes, candidates_per_class=200 // n_classes,
                                                queries_per_class=10, seed=seed)
            prec = ev.retrieval(p, build_model(ModelConfig.toy(), seed=seed)).precision
            vals.append([prec[k] for k in (5, 10, 50)])
        mean = np.mean(vals, axis=0)
        worst.append(np.abs(mean - 1 / n_classes).max())
        summary.append(f"{n_classes}-class P@5/10/50 = " + "/".join(f"{m:.3f}" for m in mean))
    elapsed = time.perf_counter() - t0
    ok = max(worst) <= 0.02 and elapsed < 120
    record(1, "random baseline", ok, "; ".join(summary) + f" (tol 0.02, {elapsed:.0f}s < 120s)")


# 2 -----------------------------------------------------------------------------------

def test_c02_parameter_accounting(capsys):
    assert main(["account-params", "--preset", "vit_b_bert_base"]) == EXIT_OK
    acct = json.loads(capsys.readouterr().out)
    trainable, frozen = O.count_parameters(ModelConfig.vit_b_bert_base())
    ok = (acct["trainable"], acct["frozen"]) == (trainable, frozen) and 0.06 <= acct["fraction"] <= 0.10
    record(2, "parameter accounting", ok,
           f"trainable {acct['trainable']} (oracle {trainable}), frozen {acct['frozen']} (oracle {frozen}), "
           f"fraction {acct['fraction']:.4f} in [0.06, 0.10]")


# 3 -----------------------------------------------------------------------------------

def test_c03_identity_at_init():
    cfg = ModelConfig.toy()
    with_adapters = build_model(cfg, seed=0)
    plain = AlignmentModel(replace(cfg, adapters=False))
    shared = {k: v for k, v in with_adapters.state_dict().items() if "adapter" not in k}
    plain.load_state_dict(shared, strict=True)
    batch = collate(make_synthetic_corpus(6, 3, np.random.default_rng(0)))
    worst = 0.0
    with torch.no_grad():
        for m in (with_adapters, plain):
            m.eval()
        a_img, p_img = with_adapters.embed_images(batch.images), plain.embed_images(batch.images)
        a_txt = with_adapters.embed_texts(batch.ids, batch.pad_mask)
        p_txt = plain.embed_texts(batch.ids, batch.pad_mask)
        pairs = [(a_img.global_, p_img.global_), (a_img.local, p_img.local),
                 (a_txt.global_, p_txt.global_), (a_txt.local, p_txt.local),
                 (with_adapters.encode_text(batch.ids, batch.pad_mask), plain.encode_text(batch.ids, batch.pad_mask))]
        for a, b in pairs:
            worst = max(worst, (a - b).abs().max().item())
    record(3, "identity at init", worst <= 1e-6, f"max-abs difference {worst:.2e} <= 1e-6")


# 4 -----------------------------------------------------------------------------------

def test_c04_freeze_invariance():
    model = build_model(ModelConfig.toy(), seed=0)
    trainer = Trainer(model, TrainConfig(batch_size=8, lr=1e-3, warmup_steps=5, max_steps=50, total_steps=50))
    frozen0 = {n: p.detach().clone() for n, p in model.frozen_parameters()}
    data = make_synthetic_corpus(40, 5, np.random.default_rng(0))
    rng = np.random.default_rng(1)
    for _ in range(50):
        trainer.train_step([data[i] for i in rng.choice(len(data), 8, replace=False)])
    changed = [n for n, p in model.frozen_parameters() if not torch.equal(p, frozen0[n])]
    groups = {n.split(".")[0] for n in frozen0}
    record(4, "freeze invariance", not changed,
           f"{len(frozen0)} frozen tensors ({', '.join(sorted(groups))}) bit-identical after 50 steps"
           if not changed else f"changed: {changed[:3]}")


# 5 -----------------------------------------------------------------------------------

def _gradient_cases(tiny_config):
    torch.manual_seed(0)
    cases = {}

    adapter = Adapter(6, 0.5).double()
    with torch.no_grad():
        adapter.up.weight.normal_(0, 0.5)
    x = torch.randn(2, 3, 6, dtype=torch.float64)
    cases["adapter_forward"] = (lambda: (adapter_forward(x, adapter) ** 2).sum(),
                                [adapter.down.weight, adapter.up.weight, adapter.up.bias])

    blk = AdapterBlock(8, 2, 4.0, 0.25).double()
    with torch.no_grad():
        for a in (blk.adapter_attn, blk.adapter_ffn):
            a.up.weight.normal_(0, 0.3)
    xb = torch.randn(2, 4, 8, dtype=torch.float64)
    pad = torch.tensor([[False, False, False, True], [False] * 4])
    cases["block_forward"] = (lambda: (block_forward(xb, blk, pad)[~pad] ** 2).sum(),
                              [blk.adapter_attn.down.weight, blk.adapter_ffn.up.weight])

    gp_i, gp_t, tau = Projector(5, 4).double(), Projector(5, 4).double(), LogTemperature(0.2).double()
    xi, xt = torch.randn(3, 5, dtype=torch.float64), torch.randn(3, 5, dtype=torch.float64)
    cases["info_nce_global"] = (
        lambda: info_nce_global(F.normalize(gp_i(xi), dim=-1), F.normalize(gp_t(xt), dim=-1), tau()),
        [gp_i.fc1.weight, gp_t.fc2.weight, tau.log_tau])

    lp_i, lp_t = Projector(5, 4).double(), Projector(5, 4).double()
    zi, zt = torch.randn(3, 6, 5, dtype=torch.float64), torch.randn(3, 4, 5, dtype=torch.float64)
    valid = torch.tensor([[1, 1, 1, 1], [1, 1, 1, 0], [1, 1, 0, 0]], dtype=torch.bool)
    taus = Temperatures(0.07, 0.5, 0.5)
    cases["info_nce_local"] = (
        lambda: info_nce_local(F.normalize(lp_i(zi), dim=-1), F.normalize(lp_t(zt), dim=-1), taus, valid),
        [lp_i.fc1.weight, lp_t.fc2.bias])

    model = build_model(tiny_config, seed=0, dtype=torch.float64)
    randomize_adapters(model)
    ids = torch.tensor([[0, 1, 6, 1, 3], [0, 7, 1, 9, 10]])
    tpad = torch.tensor([[False, False, False, False, True], [False] * 5])
    targets = torch.full((2, 5), IGNORE_INDEX)
    targets[0, 1], targets[0, 3], targets[1, 2] = 5, 11, 8
    g = torch.randn(2, 8, dtype=torch.float64)
    blk_t = model.language.blocks[0]
    cases["mlm_loss"] = (
        lambda: mlm_loss(ids, tpad, targets, g, model.language, model.hybrid_proj, model.mlm_head, model.mlm_bias),
        [model.hybrid_proj.weight, model.mlm_bias, blk_t.adapter_ffn.up.weight])

    images = torch.rand(2, 4, 8, 8, dtype=torch.float64, generator=torch.Generator().manual_seed(1))
    keep = torch.tensor([[[0, 2]] * 4, [[1, 3]] * 4])
    masked = torch.tensor([[1, 3], [0, 2]])
    target = mim_targets(images[:, 0], 4)
    blk_v = model.vision.blocks[0]
    cases["mim_loss"] = (
        lambda: mim_loss(model.encode_images(images, keep)["cf"], keep[:, 0], masked, model.decoder, target),
        [blk_v.adapter_attn.up.weight, model.vision.view_embed])
    return cases


def test_c05_gradient_oracles(tiny_config):
    t0 = time.perf_counter()
    errors = {}
    for name, (loss, params) in _gradient_cases(tiny_config).items():
        for p in params:
            p.grad = None
        loss().backward()
        errors[name] = max(rel_err(p.grad, fd_grad(loss, p)) for p in params)
    elapsed = time.perf_counter() - t0
    ok = max(errors.values()) < 1e-4 and elapsed < 300
    record(5, "gradient oracles", ok,
           ", ".join(f"{k} {v:.1e}" for k, v in errors.items()) + f" (< 1e-4, {elapsed:.0f}s)")


# 6 -----------------------------------------------------------------------------------

def test_c06_infonce_calibration():
    constant = {B: symmetric_info_nce(torch.full((B, B), 0.3, dtype=torch.float64), 0.07).item() for B in (2, 3, 8)}
    exact = all(v == pytest.approx(math.log(B), abs=1e-12) for B, v in constant.items())
    B, inside = 16, 0
    for seed in range(100):
        g = torch.Generator().manual_seed(seed)
        a = F.normalize(torch.randn(B, 32, generator=g, dtype=torch.float64), dim=-1)
        b = F.normalize(torch.randn(B, 32, generator=g, dtype=torch.float64), dim=-1)
        inside += abs(info_nce_global(a, b, 1.0).item() - math.log(B)) <= 0.5
    record(6, "InfoNCE calibration", exact and inside >= 99,
           "constant scores: " + ", ".join(f"B={B} {v:.12f} vs ln B {math.log(B):.12f}" for B, v in constant.items())
           + f"; random unit embeddings in ln 16 +/- 0.5 on {inside}/100 seeds")


# 7 -----------------------------------------------------------------------------------

def test_c07_masking_exactness():
    rng = np.random.default_rng(0)
    counts = {len(mask_patches(196, 0.75, rng).masked_idx) for _ in range(200)}
    model = build_model(ModelConfig.toy(image_size=56, patch_size=4), seed=0)
    keep, masked = model.draw_partitions(3, 0.75, rng)
    per_view = {masked.shape[-1]} | {196 - keep.shape[-1]}
    token_counts, cls_masked = set(), False
    for seed in range(200):
        ids = np.concatenate([[CLS_ID], np.random.default_rng(seed).integers(5, 60, size=10)])
        m = mask_tokens(TokenizedReport(ids), 0.5, np.random.default_rng(seed))
        token_counts.add(int((m.targets != IGNORE_INDEX).sum()))
        cls_masked |= m.ids[0] != CLS_ID or m.targets[0] != IGNORE_INDEX
    ok = counts == {147} and per_view == {147} and token_counts == {5} and not cls_masked
    record(7, "masking exactness", ok,
           f"patches masked per draw {sorted(counts)}, per view in a batch {sorted(per_view)}; "
           f"tokens masked {sorted(token_counts)}; class token masked: {cls_masked}")


# 8 -----------------------------------------------------------------------------------

def test_c08_merge_shape():
    cfg = ModelConfig.toy()
    model = build_model(cfg, seed=0)
    recs = make_synthetic_corpus(30, 3, np.random.default_rng(2))
    absent = sum(not all(r.present.values()) for r in recs)
    m = cfg.n_patches + 1
    with torch.no_grad():
        full = model.embed_images(collate(recs).images).local.shape[1]
        keep, _ = model.draw_partitions(len(recs), 0.75, np.random.default_rng(0))
        masked = model.embed_images(collate(recs).images, keep).local.shape[1]
    m_masked = keep.shape[-1] + 1
    ok = full == 4 * (m - 1) and masked == 4 * (m_masked - 1) and absent > 0
    record(8, "merge shape", ok, f"local length {full} = 4*(m-1) with m={m}; masked {masked} = 4*({m_masked}-1); "
           f"{absent}/{len(recs)} records with absent views")


# 9 -----------------------------------------------------------------------------------

@pytest.mark.slow
def test_c09_synthetic_alignment(tmp_path):
    t0 = time.perf_counter()
    long_run = ["--max-steps", "500", "--set", "train.max_epochs=100", "--set", "train.patience=100"]
    reports = {}
    for tag, extra in (("full", []), ("temporal", ["--ablate", "temporal"]), ("multiview", ["--ablate", "multiview"])):
        out = tmp_path / tag
        assert main(["train", "--out", str(out), *long_run, *extra]) == EXIT_OK
        ckpt = ["--set", f"eval.checkpoint={out / 'best.ckpt'}"]
        assert main(["eval-retrieval", "--out", str(out / "eval"), "--task", "T2I", *ckpt]) == EXIT_OK
        assert main(["eval-zeroshot", "--out", str(out / "eval"), *ckpt]) == EXIT_OK
        steps = json.loads((out / "summary.json").read_text())["steps"]
        reports[tag] = (steps, json.loads((out / "eval" / "retrieval_T2I.json").read_text()),
                        json.loads((out / "eval" / "zeroshot.json").read_text()))
    elapsed = time.perf_counter() - t0
    steps, ret, zs = reports["full"]
    p5, acc = ret["precision"]["P@5"], zs["acc"]
    comparable = len({r[1]["protocol_hash"] for r in reports.values()}) == 1
    ok = steps <= 500 and p5 >= 0.60 and acc >= 2 / 5 and comparable and elapsed < 600
    ablations = "; ".join(f"{k} P@5 {r[1]['precision']['P@5']:.3f} ACC {r[2]['acc']:.3f}"
                          for k, r in reports.items() if k != "full")
    record(9, "synthetic alignment", ok,
           f"{steps} steps, held-out T2I P@5 {p5:.3f} >= 0.60, zero-shot ACC {acc:.3f} >= 0.40; "
           f"ablations ({ablations}) share one protocol hash: {comparable}; {elapsed:.0f}s for three runs")


# 10 ----------------------------------------------------------------------------------

def test_c10_mlm_overfit():
    torch.manual_seed(0)
    records = make_synthetic_corpus(64, 5, np.random.default_rng(0))[:16]
    model = build_model(ModelConfig.toy(), seed=0)
    trainer = Trainer(model, TrainConfig(batch_size=16, lr=1e-2, warmup_steps=20, max_steps=300, total_steps=300))
    batch = collate(records)
    for _ in range(300):
        trainer.train_step(records)
    model.eval()
    rng = np.random.default_rng(123)
    hits = total = 0
    with torch.no_grad():
        g_img = model.embed_images(batch.images).global_
        for _ in range(5):
            masked = [mask_tokens(TokenizedReport(t), 0.5, rng) for t in batch.tokens]
            ids, pad = pad_batch([m.ids for m in masked])
            targets, _ = pad_batch([m.targets for m in masked], pad_value=IGNORE_INDEX)
            _, logits = mlm_loss(ids, pad, targets, g_img, model.language, model.hybrid_proj, model.mlm_head,
                                 model.mlm_bias, return_logits=True)
            sel = targets != IGNORE_INDEX
            hits += int((logits.argmax(-1)[sel] == targets[sel]).sum())
            total += int(sel.sum())
    acc = hits / total
    record(10, "MLM overfit", acc >= 0.9, f"masked-token accuracy {acc:.3f} >= 0.9 after 300 steps on one batch")


# 11 ----------------------------------------------------------------------------------

def test_c11_evaluator_oracles():
    rng = np.random.default_rng(0)
    pk_cases = auc_cases = 0
    pk_ok = auc_ok = True
    for _ in range(300):
        n_c, n_q = int(rng.integers(2, 21)), int(rng.integers(1, 11))
        pool = rng.normal(size=(5, 4))
        q, c = rng.normal(size=(n_q, 4)), pool[rng.integers(5, size=n_c)]
        ql, cl = rng.integers(3, size=n_q), rng.integers(3, size=n_c)
        for k in range(1, n_c + 1):
            pk_ok &= ev.precision_at_k(q, c, ql, cl, k) == O.precision_at_k(q, c, ql, cl, k)
            pk_cases += 1
        n = int(rng.integers(2, 101))
        scores = rng.integers(0, 10, size=n).astype(float) / 7
        labels = rng.integers(0, 2, size=n)
        labels[:2] = [0, 1]
        auc_ok &= abs(ev.auc_score(scores, labels) - O.mann_whitney_auc(scores, labels)) <= 1e-12
        auc_cases += 1
    grid = ev.threshold_grid()
    grid_ok = len(grid) == 201 and np.allclose(np.diff(grid), 0.005) and grid[0] == 0 and grid[-1] == 1
    record(11, "evaluator oracles", pk_ok and auc_ok and grid_ok,
           f"P@k exact on {pk_cases} cases: {pk_ok}; AUC within 1e-12 on {auc_cases} cases: {auc_ok}; "
           f"grid {len(grid)} points")


# 12 ----------------------------------------------------------------------------------

def test_c12_records_fixture():
    from adaptalign.language import WordPieceTokenizer, build_vocab
    from adaptalign.records import RecordConfig, build_records, read_manifest

    rows = read_manifest(FIXTURE)
    tok = WordPieceTokenizer(build_vocab(Path(r["report_path"]).read_text() for r in rows))
    recs, stats = build_records(rows, RecordConfig(input_size=8, resize_to=8), tok,
                                lambda image_id: np.full((8, 8), int(image_id[3:]) / 10.0))
    expected = {
        "S1_s1a": ({"cf": "img1", "cl": "img2"}, None),
        "S1_s1b": ({"cf": "img3", "pf": "img1", "pl": "img2"}, 60 + (45 * 60 + 0.5) / 86400),
        "S3_s3a": ({"cf": "img5"}, None),
    }
    got = {r.record_id: r for r in recs}
    quads = sorted(got) == sorted(expected) and all(
        got[k].sources == src and got[k].present == {t: t in src for t in VIEW_TAGS}
        and (got[k].time_interval_days == iv if iv is None else abs(got[k].time_interval_days - iv) < 1e-9)
        for k, (src, iv) in expected.items())
    stats_ok = (stats.n_records, stats.frac_with_prior, stats.frac_with_lateral) == (3, 1 / 3, 1 / 3) \
        and dict(stats.interval_histogram)[(30.0, 90.0)] == 1 and sum(c for _, c in stats.interval_histogram) == 1
    zero_fill = all(np.abs(r.images[t]).max() == 0 for r in recs for t in VIEW_TAGS if not r.present[t])
    record(12, "records pipeline", quads and stats_ok and zero_fill,
           f"quaternions and flags exact: {quads}; stats exact: {stats_ok}; zero-fill on absent views: {zero_fill}")


# 13 ----------------------------------------------------------------------------------

def test_c13_determinism(tmp_path):
    small = ["--set", "records.synthetic.n_train=48", "--set", "records.synthetic.n_val=24",
             "--set", "records.synthetic.n_test=10", "--set", "train.batch_size=8", "--set", "seed=7",
             "--set", "train.max_epochs=2", "--set", "train.patience=2", "--set", "train.augment=true"]
    for run in ("a", "b"):
        assert main(["train", "--out", str(tmp_path / run), *small]) == EXIT_OK
    a = (tmp_path / "a" / "history.jsonl").read_bytes()
    b = (tmp_path / "b" / "history.jsonl").read_bytes()
    record(13, "determinism", a == b and len(a) > 0,
           f"history files byte-identical: {a == b} ({len(a.splitlines())} lines, {len(a)} bytes)")
