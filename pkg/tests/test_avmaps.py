import json
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from avloc import avmaps
from avloc.encoders import ReferenceEmbeddings
from avloc.errors import DimensionError, ValidationError

from .conftest import unit


def test_cosine_self_orthogonal_antiparallel():
    la = torch.tensor([[1.0, 2.0, 0.5]], dtype=torch.float64)
    ortho = torch.tensor([-2.0, 1.0, 0.0], dtype=torch.float64)
    F_v = torch.stack([la[0], ortho, -la[0]]).reshape(1, 3, 1, 3)
    S = avmaps.cosine_map(F_v, la)
    assert S.shape == (1, 3, 1)
    np.testing.assert_allclose(S.flatten().numpy(), [1.0, 0.0, -1.0], atol=1e-15)


def test_cosine_zero_vector_warns_and_is_zero():
    F_v = torch.zeros(1, 2, 2, 4, dtype=torch.float64)
    with pytest.warns(RuntimeWarning):
        S, flag = avmaps.cosine_map(F_v, torch.ones(1, 4, dtype=torch.float64), return_flag=True)
    assert flag and torch.all(S == 0)


def test_cosine_shape_errors():
    with pytest.raises(DimensionError):
        avmaps.cosine_map(torch.zeros(2, 2, 4), torch.ones(1, 4))
    with pytest.raises(DimensionError):
        avmaps.cosine_map(torch.ones(1, 2, 2, 4), torch.ones(1, 5))


def test_cosine_multi_reference_shape():
    S = avmaps.cosine_map(torch.randn(2, 3, 4, 8), torch.randn(2, 5, 8))
    assert S.shape == (2, 5, 3, 4)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000))
def test_cosine_range(seed):
    g = torch.Generator().manual_seed(seed)
    S = avmaps.cosine_map(torch.randn(2, 3, 3, 6, generator=g, dtype=torch.float64),
                          torch.randn(2, 6, generator=g, dtype=torch.float64))
    assert S.min() >= -1 - 1e-6 and S.max() <= 1 + 1e-6


def test_mask_midpoints_exact():
    mp = avmaps.masks(torch.tensor([0.65, 0.4], dtype=torch.float64))
    assert mp.foreground[0].item() == 0.5
    assert mp.background[1].item() == 0.5


def test_mask_saturation_value():
    mp = avmaps.masks(torch.tensor([1.0], dtype=torch.float64))
    expected = 1 / (1 + math.exp(-(1 - 0.65) / 0.03))
    assert mp.foreground.item() == pytest.approx(expected, abs=1e-15)
    assert expected == pytest.approx(0.9999914, abs=1e-7)


def test_mask_omega_validation():
    with pytest.raises(ValidationError):
        avmaps.masks(torch.zeros(2), omega=0.0)


def test_mask_monotone_random(rng):
    S = torch.tensor(rng.uniform(-1, 1, (8, 8)))
    base = avmaps.masks(S)
    for _ in range(200):
        i, j = rng.integers(0, 8, 2)
        bumped = S.clone()
        bumped[i, j] += rng.uniform(0, 0.5)
        m = avmaps.masks(bumped)
        assert m.foreground[i, j] >= base.foreground[i, j]
        assert m.background[i, j] <= base.background[i, j]


def test_pool_hand_case():
    F_v = torch.tensor([[[[1.0, 0.0]], [[0.0, 1.0]]]], dtype=torch.float64)  # (1, 2, 1, 2)
    fg = torch.tensor([[[1.0], [0.5]]], dtype=torch.float64)
    out = avmaps.pool(F_v, avmaps.MaskPair(fg, 1 - fg))
    np.testing.assert_allclose(out.foreground.numpy(), [[0.5, 0.25]])


def test_pool_full_and_empty_masks():
    F_v = torch.randn(2, 3, 3, 4, dtype=torch.float64)
    ones = torch.ones(2, 3, 3, dtype=torch.float64)
    out = avmaps.pool(F_v, avmaps.MaskPair(ones, ones * 0))
    torch.testing.assert_close(out.foreground, F_v.mean(dim=(1, 2)))
    assert torch.all(out.background == 0)


def test_pool_mask_shape_mismatch():
    with pytest.raises(DimensionError):
        avmaps.pool(torch.randn(1, 3, 3, 4), avmaps.MaskPair(torch.ones(1, 2, 2), torch.ones(1, 2, 2)))


def test_maps_gradcheck():
    F_v = torch.randn(1, 2, 2, 3, dtype=torch.float64, requires_grad=True)
    la = torch.randn(1, 3, dtype=torch.float64, requires_grad=True)

    def fn(F_v, la):
        mp = avmaps.masks(avmaps.cosine_map(F_v, la), omega=0.3)
        pooled = avmaps.pool(F_v, mp)
        return pooled.foreground, pooled.background

    assert torch.autograd.gradcheck(fn, (F_v, la), eps=1e-6, atol=1e-8, rtol=1e-4)


def test_reference_maps_k1_equals_cosine():
    F_v = torch.randn(1, 3, 3, 4, dtype=torch.float64)
    la = unit(torch.randn(1, 4))
    refs = ReferenceEmbeddings(la[:, None], unit(torch.randn(1, 4)))
    S = avmaps.reference_maps(F_v, refs)
    assert S.data.shape == (1, 2, 3, 3)
    torch.testing.assert_close(S.data[:, 0], avmaps.cosine_map(F_v, la))


def test_reference_maps_identical_refs():
    F_v = torch.randn(1, 3, 3, 4, dtype=torch.float64)
    r = unit(torch.randn(4))
    refs = ReferenceEmbeddings(r.expand(1, 2, 4).clone(), r[None].clone())
    S = avmaps.reference_maps(F_v, refs).data
    for k in (1, 2):
        torch.testing.assert_close(S[:, k], S[:, 0])


def test_reference_maps_row_major_flattening():
    S = avmaps.ReferenceAssociatedMaps(torch.arange(12.0).reshape(1, 1, 3, 4))
    flat = S.flattened
    assert flat[0, 0, 1 * 4 + 2] == S.data[0, 0, 1, 2]


def test_identify_k1_is_binarized_cosine():
    F_v = torch.randn(4, 4, 6, dtype=torch.float64)
    la = torch.randn(6, dtype=torch.float64)
    res = avmaps.iterative_identify(F_v, la, 1)
    S = avmaps.cosine_map(F_v[None], la[None])[0]
    expected = avmaps.masks(S).foreground >= 0.5
    if not expected.any():
        expected = torch.zeros_like(expected)
        expected.view(-1)[int(torch.argmax(S))] = True
    assert torch.equal(res.binarized_masks[0], expected)
    torch.testing.assert_close(res.per_source_maps[0], S)


def _two_blob_features():
    u = torch.tensor([1.0, 0, 0, 0], dtype=torch.float64)
    v = torch.tensor([0, 1.0, 0, 0], dtype=torch.float64)
    noise = torch.tensor([0, 0, 1.0, 0], dtype=torch.float64)
    F_v = noise.expand(6, 6, 4).clone()
    F_v[0:2, 0:2] = u
    F_v[4:6, 3:6] = v
    return F_v, u, v


def test_identify_two_blobs_disjoint():
    F_v, u, v = _two_blob_features()
    res = avmaps.iterative_identify(F_v, [u, v], 2)
    a, b = res.binarized_masks
    assert not (a & b).any()
    assert a[0:2, 0:2].all() and a.sum() == 4
    assert b[4:6, 3:6].all() and b.sum() == 6


def test_identify_mixed_embedding_disjoint():
    F_v, u, v = _two_blob_features()
    res = avmaps.iterative_identify(F_v, u + v, 2)
    assert not (res.binarized_masks[0] & res.binarized_masks[1]).any()


def test_identify_all_claimed_falls_back_to_argmax():
    la = torch.tensor([1.0, 0.0], dtype=torch.float64)
    F_v = la.expand(3, 3, 2).clone()
    F_v[1, 2] = torch.tensor([1.0, 0.01], dtype=torch.float64)
    res = avmaps.iterative_identify(F_v, la, 2)
    assert res.binarized_masks[0].all()
    second = res.binarized_masks[1]
    assert second.sum() == 1
    assert second.view(-1)[int(torch.argmax(res.per_source_maps[1]))]


def test_identify_component_count_mismatch():
    with pytest.raises(ValidationError):
        avmaps.iterative_identify(torch.randn(2, 2, 3), [torch.randn(3)], 2)
    with pytest.raises(ValidationError):
        avmaps.iterative_identify(torch.randn(2, 2, 3), torch.randn(3), 0)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 4))
def test_identify_masks_pairwise_disjoint(seed, K):
    g = torch.Generator().manual_seed(seed)
    res = avmaps.iterative_identify(torch.randn(5, 5, 4, generator=g), torch.randn(4, generator=g), K)
    claimed = torch.zeros(5, 5, dtype=torch.bool)
    for m in res.binarized_masks:
        assert m.any()
        if not claimed.all():
            # overlap is only possible once the whole grid has been claimed
            assert not (m & claimed).any()
        claimed |= m


def test_upsample_constant_and_shape():
    up = avmaps.upsample(torch.full((2, 7, 7), 0.3), (224, 224))
    assert up.shape == (2, 224, 224)
    torch.testing.assert_close(up, torch.full_like(up, 0.3))


def test_mask_bbox():
    m = np.zeros((5, 6), bool)
    m[1:3, 2:5] = True
    assert avmaps.mask_bbox(m) == [2, 1, 5, 3]
    assert avmaps.mask_bbox(np.zeros((2, 2), bool)) is None


def test_export_heatmaps(tmp_path):
    maps = torch.zeros(2, 7, 7)
    maps[0, 1, 1] = 1.0
    maps[1, 5, 5] = 0.8
    paths, side = avmaps.export_heatmaps(tmp_path, "clip", maps, (224, 224))
    assert len(paths) == 2
    for p in paths:
        im = Image.open(p)
        assert im.size == (224, 224) and im.mode == "L"
    meta = json.loads(side.read_text())
    assert meta["clip_id"] == "clip" and meta["K"] == 2 and meta["threshold"] == 0.5
    x0, y0, x1, y1 = meta["boxes"][0]
    assert x1 <= 112 and y1 <= 112
    x0, y0, x1, y1 = meta["boxes"][1]
    assert x0 >= 112 and y0 >= 112
