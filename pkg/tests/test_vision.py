import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

import oracles as O
from conftest import randomize_adapters
from adaptalign.model import ModelConfig, build_model
from adaptalign.vision import VIEW_TAGS, PatchPartition, encode_views, mask_patches, n_masked, patchify, unpatchify


@given(st.integers(1, 400), st.floats(0, 0.95), st.integers(0, 2**31))
def test_partition_is_disjoint_cover(P, ratio, seed):
    part = mask_patches(P, ratio, np.random.default_rng(seed))
    keep, masked = set(part.non_masked_idx.tolist()), set(part.masked_idx.tolist())
    assert not keep & masked
    assert keep | masked == set(range(P))
    assert len(masked) == round(ratio * P)
    assert list(part.non_masked_idx) == sorted(keep)


def test_partition_sizes_at_vit_b_grid():
    rng = np.random.default_rng(0)
    for _ in range(20):
        part = mask_patches(196, 0.75, rng)
        assert len(part.masked_idx) == 147 and len(part.non_masked_idx) == 49


def test_partition_ratio_bounds():
    with pytest.raises(ValueError):
        mask_patches(16, 1.0, np.random.default_rng(0))
    part = mask_patches(16, 0.0, np.random.default_rng(0))
    assert len(part.masked_idx) == 0 and len(part.non_masked_idx) == 16


def test_partition_seed_determinism():
    a = mask_patches(64, 0.75, np.random.default_rng(5))
    b = mask_patches(64, 0.75, np.random.default_rng(5))
    assert np.array_equal(a.masked_idx, b.masked_idx)


def test_patchify_matches_oracle_and_roundtrips(rng):
    img = rng.normal(size=(12, 12))
    assert np.array_equal(patchify(img, 4), O.patchify(img, 4))
    assert np.array_equal(unpatchify(patchify(img, 4), 4), img)
    t = torch.from_numpy(img)
    assert torch.equal(unpatchify(patchify(t, 4), 4), t)


def test_patchify_rejects_indivisible():
    with pytest.raises(ValueError, match="not divisible"):
        patchify(np.zeros((10, 10)), 4)


def _tiny(tiny_config, seed=0):
    model = build_model(tiny_config, seed=seed, dtype=torch.float64)
    randomize_adapters(model)
    return model


def test_view_encoding_matches_straight_line_oracle(tiny_config):
    model = _tiny(tiny_config)
    p = O.arrays(model.vision)
    rng = np.random.default_rng(3)
    images = {t: rng.normal(size=(8, 8)) for t in VIEW_TAGS}
    parts = {t: mask_patches(4, 0.5, rng) for t in VIEW_TAGS}
    out = encode_views(images, parts, model.vision)
    for i, t in enumerate(VIEW_TAGS):
        assert out[t].shape == (3, 8)
        ref = O.vision_encode(images[t], parts[t].non_masked_idx, i, p, heads=2, depth=1, patch=4)
        assert np.allclose(out[t].detach().numpy(), ref, atol=1e-12)


def test_zero_filled_view_gives_deterministic_nonzero_embedding(tiny_config):
    model = _tiny(tiny_config)
    zeros = {t: np.zeros((8, 8)) for t in VIEW_TAGS}
    parts = {t: mask_patches(4, 0.5, np.random.default_rng(0)) for t in VIEW_TAGS}
    a = encode_views(zeros, parts, model.vision)
    b = encode_views(zeros, parts, model.vision)
    for t in VIEW_TAGS:
        assert torch.equal(a[t], b[t])
        assert a[t].abs().max() > 0


def test_view_tag_changes_output(tiny_config):
    model = _tiny(tiny_config)
    img = torch.rand(1, 4, 8, 8, dtype=torch.float64).expand(1, 4, 8, 8).clone()
    img[:, 1:] = img[:, :1]
    z = model.encode_images(img)
    assert not torch.allclose(z["cf"], z["cl"])


def test_batched_encoding_equals_per_view_calls(tiny_config):
    model = _tiny(tiny_config)
    images = torch.rand(2, 4, 8, 8, dtype=torch.float64)
    keep, _ = model.draw_partitions(2, 0.5, np.random.default_rng(1))
    batched = model.encode_images(images, keep)
    for b in range(2):
        parts = {t: _part(keep[b, i]) for i, t in enumerate(VIEW_TAGS)}
        single = encode_views({t: images[b, i].numpy() for i, t in enumerate(VIEW_TAGS)}, parts, model.vision)
        for t in VIEW_TAGS:
            assert torch.allclose(batched[t][b], single[t], atol=1e-12)


def _part(keep_row):
    keep = keep_row.numpy()
    return PatchPartition(keep, np.setdiff1d(np.arange(4), keep))


def test_encoding_order_is_irrelevant_and_stateless(tiny_config):
    model = _tiny(tiny_config)
    before = {k: v.clone() for k, v in model.vision.state_dict().items()}
    rng = np.random.default_rng(2)
    images = {t: rng.normal(size=(8, 8)) for t in VIEW_TAGS}
    parts = {t: mask_patches(4, 0.5, rng) for t in VIEW_TAGS}
    first = encode_views(images, parts, model.vision)
    rev = {t: images[t] for t in reversed(VIEW_TAGS)}
    second = encode_views(rev, parts, model.vision)
    for t in VIEW_TAGS:
        assert torch.equal(first[t], second[t])
    for k, v in model.vision.state_dict().items():
        assert torch.equal(v, before[k])


@pytest.mark.parametrize("image_size,patch", [(32, 4), (32, 8), (224, 16)])
def test_token_count(image_size, patch):
    P = (image_size // patch) ** 2
    part = mask_patches(P, 0.75, np.random.default_rng(0))
    assert len(part.non_masked_idx) + 1 == P - n_masked(P, 0.75) + 1


def test_missing_view_is_an_error(tiny_config):
    model = _tiny(tiny_config)
    parts = {t: mask_patches(4, 0.5, np.random.default_rng(0)) for t in VIEW_TAGS}
    with pytest.raises(KeyError, match="pl"):
        encode_views({t: np.zeros((8, 8)) for t in VIEW_TAGS[:3]}, parts, model.vision)


def test_positional_embeddings_are_frozen():
    model = build_model(ModelConfig.toy())
    assert not model.vision.pos_embed.requires_grad
    assert model.vision.view_embed.requires_grad
    assert not model.vision.patch_embed.weight.requires_grad
