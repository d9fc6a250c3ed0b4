import warnings

import numpy as np
import pytest
import torch

import oracles as O
from conftest import randomize_adapters
from test_backbone import fd_grad, rel_err
from adaptalign.language import IGNORE_INDEX, MASK_ID
from adaptalign.masked_modeling import masked_mse, mim_loss, mlm_loss
from adaptalign.model import build_model
from adaptalign.trainer import mim_targets


def _tiny(tiny_config, seed=0):
    model = build_model(tiny_config, seed=seed, dtype=torch.float64)
    randomize_adapters(model)
    return model


def decoder_oracle(tokens, keep, p, heads, depth):
    """Scatter, add sin-cos positions, plain blocks, norm, pixel head; drops the class row."""
    x = O.linear(tokens, p, "embed")
    P = p["pos_embed"].shape[1] - 1
    full = np.tile(p["mask_token"].reshape(1, -1), (P, 1))
    for row, j in enumerate(keep):
        full[j] = x[1 + row]
    x = np.vstack([x[:1], full]) + p["pos_embed"][0]
    for b in range(depth):
        x = O.block(x, O.sub(p, f"blocks.{b}"), heads, adapters=False)
    return O.linear(O.layer_norm(x, p, "norm"), p, "pred")[1:]


def test_masked_mse_constant_offset_is_one():
    target = torch.randn(2, 4, 16, dtype=torch.float64)
    idx = torch.tensor([[0, 3], [1, 2]])
    assert masked_mse(target + 1, target, idx).item() == pytest.approx(1.0, abs=1e-15)


def test_masked_mse_matches_oracle_and_ignores_visible_patches(rng):
    pred, target = rng.normal(size=(2, 4, 16)), rng.normal(size=(2, 4, 16))
    idx = np.array([[0, 3], [1, 2]])
    val = masked_mse(torch.from_numpy(pred), torch.from_numpy(target), torch.from_numpy(idx)).item()
    assert val == pytest.approx(O.masked_mse(pred, target, idx), rel=1e-12)
    target[0, 1] += 100.0
    target[1, 3] -= 50.0
    again = masked_mse(torch.from_numpy(pred), torch.from_numpy(target), torch.from_numpy(idx)).item()
    assert again == val


def test_empty_mask_warns_and_returns_zero():
    with warnings.catch_warnings(record=True) as w:
        warnings.simplefilter("always")
        val = masked_mse(torch.zeros(1, 4, 16), torch.ones(1, 4, 16), torch.zeros(1, 0, dtype=torch.long))
    assert val.item() == 0.0 and any("MIM" in str(x.message) for x in w)


def test_decoder_matches_straight_line_oracle(tiny_config):
    model = _tiny(tiny_config)
    p = O.arrays(model.decoder)
    tokens = torch.randn(2, 3, 8, dtype=torch.float64)
    keep = torch.tensor([[0, 2], [1, 3]])
    out = model.decoder(tokens, keep).detach().numpy()
    for b in range(2):
        ref = decoder_oracle(tokens[b].numpy(), keep[b].numpy(), p, heads=2, depth=1)
        assert np.allclose(out[b], ref, atol=1e-12)


def test_mim_golden_value(tiny_config):
    model = _tiny(tiny_config)
    p = O.arrays(model.decoder)
    g = torch.Generator().manual_seed(4)
    tokens = torch.randn(1, 3, 8, generator=g, dtype=torch.float64)
    target = torch.randn(1, 4, 16, generator=g, dtype=torch.float64)
    keep, masked = torch.tensor([[1, 2]]), torch.tensor([[0, 3]])
    val = mim_loss(tokens, keep, masked, model.decoder, target).item()
    pred = decoder_oracle(tokens[0].numpy(), [1, 2], p, 2, 1)
    assert val == pytest.approx(O.masked_mse(pred[None], target.numpy(), [[0, 3]]), rel=1e-12)


def test_mim_targets_are_cf_patches():
    imgs = torch.arange(2 * 8 * 8, dtype=torch.float64).reshape(2, 8, 8)
    t = mim_targets(imgs, 4)
    assert t.shape == (2, 4, 16)
    assert torch.equal(t[0, 1], imgs[0, :4, 4:].reshape(-1))
    assert mim_targets(imgs, 4, scale=2).shape == (2, 4, 64)


def _mlm_inputs():
    ids = torch.tensor([[0, MASK_ID, 6, MASK_ID, 3], [0, 7, MASK_ID, 9, 10]])
    pad = torch.tensor([[False, False, False, False, True], [False] * 5])
    targets = torch.full((2, 5), IGNORE_INDEX)
    targets[0, 1], targets[0, 3], targets[1, 2] = 5, 11, 8
    return ids, pad, targets


def test_mlm_loss_matches_manual_cross_entropy(tiny_config):
    model = _tiny(tiny_config)
    ids, pad, targets = _mlm_inputs()
    g = torch.nn.functional.normalize(torch.randn(2, 8, dtype=torch.float64), dim=-1)
    loss, logits = mlm_loss(ids, pad, targets, g, model.language, model.hybrid_proj, model.mlm_head,
                            model.mlm_bias, return_logits=True)
    lg = logits.detach().numpy()
    ref = O.cross_entropy_rows(np.stack([lg[0, 1], lg[0, 3], lg[1, 2]]), [5, 11, 8])
    assert loss.item() == pytest.approx(ref, rel=1e-12)


def test_mlm_loss_ignores_unmasked_target_slots(tiny_config):
    model = _tiny(tiny_config)
    ids, pad, targets = _mlm_inputs()
    g = torch.randn(2, 8, dtype=torch.float64)
    args = (model.language, model.hybrid_proj, model.mlm_head, model.mlm_bias)
    base, logits = mlm_loss(ids, pad, targets, g, *args, return_logits=True)
    flagged = targets == IGNORE_INDEX
    for seed in range(5):
        filler = torch.randint(0, 16, targets.shape, generator=torch.Generator().manual_seed(seed))
        t2 = torch.where(flagged, filler, targets)
        per_slot = torch.nn.functional.cross_entropy(logits.reshape(-1, 16), t2.reshape(-1), reduction="none")
        assert ((per_slot * ~flagged.reshape(-1)).sum() / (~flagged).sum()).item() == pytest.approx(base.item(), rel=1e-12)
    empty = torch.full_like(targets, IGNORE_INDEX)
    with pytest.warns(RuntimeWarning, match="MLM"):
        assert mlm_loss(ids, pad, empty, g, *args).item() == 0.0


def test_mlm_gradients_match_finite_differences(tiny_config):
    model = _tiny(tiny_config)
    ids, pad, targets = _mlm_inputs()
    g = torch.randn(2, 8, dtype=torch.float64)

    def loss():
        return mlm_loss(ids, pad, targets, g, model.language, model.hybrid_proj, model.mlm_head, model.mlm_bias)

    loss().backward()
    blk = model.language.blocks[0]
    for p in (model.hybrid_proj.weight, model.mlm_bias, blk.adapter_ffn.up.weight, blk.adapter_attn.down.weight):
        assert rel_err(p.grad, fd_grad(loss, p)) < 1e-4


def test_mim_gradients_match_finite_differences(tiny_config):
    model = _tiny(tiny_config)
    images = torch.rand(2, 4, 8, 8, dtype=torch.float64, generator=torch.Generator().manual_seed(1))
    keep = torch.tensor([[[0, 2]] * 4, [[1, 3]] * 4])
    masked = torch.tensor([[1, 3], [0, 2]])
    target = mim_targets(images[:, 0], 4)

    def loss():
        views = model.encode_images(images, keep)
        return mim_loss(views["cf"], keep[:, 0], masked, model.decoder, target)

    loss().backward()
    blk = model.vision.blocks[0]
    for p in (blk.adapter_attn.up.weight, blk.adapter_ffn.down.weight, model.vision.view_embed):
        assert rel_err(p.grad, fd_grad(loss, p)) < 1e-4
    assert all(p.grad is None for _, p in model.decoder.named_parameters())


def test_mlm_gradient_reaches_vision_adapters(tiny_config):
    model = _tiny(tiny_config)
    images = torch.rand(2, 4, 8, 8, dtype=torch.float64)
    ids, pad, targets = _mlm_inputs()
    g_img = model.embed_images(images).global_
    mlm_loss(ids, pad, targets, g_img, model.language, model.hybrid_proj, model.mlm_head, model.mlm_bias).backward()
    grads = [p.grad for n, p in model.named_parameters() if n.startswith("vision.blocks") and "adapter" in n]
    assert any(g is not None and g.abs().max() > 0 for g in grads)
