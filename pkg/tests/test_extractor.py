import numpy as np
import pytest

from ctreport.extractor import (VIEWS, ConfigError, CTViT, PatchConfig, VisualExtractor, patchify,
                                transpose_from_view, transpose_to_view, unpatchify)


@pytest.fixture
def volume(rng):
    return rng.uniform(0, 1, size=(8, 12, 16))


def test_view_permutations(volume):
    d, h, w = 3, 5, 7
    assert transpose_to_view(volume, "axial")[d, h, w] == volume[d, h, w]
    assert transpose_to_view(volume, "sagittal")[h, d, w] == volume[d, h, w]
    assert transpose_to_view(volume, "coronal")[h, w, d] == volume[d, h, w]
    assert transpose_to_view(volume, "coronal").shape == (12, 16, 8)


@pytest.mark.parametrize("view", VIEWS)
def test_view_round_trip(view, volume):
    np.testing.assert_array_equal(transpose_from_view(transpose_to_view(volume, view), view), volume)
    batched = np.stack([volume, volume + 1])
    np.testing.assert_array_equal(transpose_to_view(batched, view)[1], transpose_to_view(volume + 1, view))


def test_unknown_view(volume):
    with pytest.raises(ValueError, match="oblique"):
        transpose_to_view(volume, "oblique")


def test_patchify_loop_oracle(volume):
    cfg = PatchConfig(4, 4, 4, 8)
    patches = patchify(volume, cfg)
    n_t, n_h, n_w = 2, 3, 4
    assert patches.shape == (n_t * n_h * n_w, 64)
    for t in range(n_t):
        for i in range(n_h):
            for j in range(n_w):
                block = volume[4 * t:4 * t + 4, 4 * i:4 * i + 4, 4 * j:4 * j + 4].reshape(-1)
                np.testing.assert_array_equal(patches[t * n_h * n_w + i * n_w + j], block)
    np.testing.assert_array_equal(unpatchify(patches, cfg, volume.shape), volume)


def test_indivisible_dims_name_axis():
    with pytest.raises(ConfigError, match="'h'"):
        PatchConfig(4, 5, 4, 8).grid((8, 12, 16))


def test_token_counts():
    cfg = PatchConfig(8, 8, 8, 64)
    assert cfg.token_count((32, 32, 32)) == 64
    # the 224^3 volume with patch 28 gives an 8 x 8 x 8 token grid
    assert PatchConfig(28, 28, 28, 64).grid((224, 224, 224)) == (8, 8, 8)


def test_extractor_shapes_and_names(rng):
    ext = VisualExtractor((8, 12, 16), PatchConfig(4, 4, 4, 8), rng, spatial_layers=1, causal_layers=1)
    out = ext(rng.uniform(size=(8, 12, 16)))
    assert set(out) == set(VIEWS)
    for view, ts in out.items():
        assert ts.tokens.shape == (24, 8) and ts.view == view
    assert out["sagittal"].grid_shape == (3, 2, 4)
    names = [n for n, _ in ext.named_parameters()]
    assert any(n.startswith("views.coronal.") for n in names)


def test_causal_over_temporal_slots(f64, rng):
    vit = CTViT((8, 8, 8), PatchConfig(4, 4, 4, 8), rng, spatial_layers=1, causal_layers=2)
    vol = rng.uniform(size=(8, 8, 8))
    changed = vol.copy()
    changed[4:] += 0.5  # only the second temporal slot
    a, b = vit(vol).data, vit(changed).data
    np.testing.assert_allclose(a[:4], b[:4], atol=1e-12)
    assert not np.allclose(a[4:], b[4:])


def test_batch_matches_single(rng):
    vit = CTViT((8, 8, 8), PatchConfig(4, 4, 4, 8), rng, spatial_layers=1, causal_layers=1)
    vols = rng.uniform(size=(2, 8, 8, 8))
    batched = vit(vols).data
    np.testing.assert_allclose(batched[1], vit(vols[1]).data, atol=1e-6)


def test_wrong_volume_dims(rng):
    vit = CTViT((8, 8, 8), PatchConfig(4, 4, 4, 8), rng, 1, 1)
    with pytest.raises(ConfigError):
        vit(np.zeros((8, 8, 12)))
