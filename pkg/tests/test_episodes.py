import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sitemeta.data import (
    ConstantInputError,
    EpisodeError,
    SiteTable,
    load_table,
    mosaic_preprocess,
    resize_trilinear,
    sample_episode,
    save_table,
    synth_generate,
    zscore,
)
from sitemeta.models import SpecError
from sitemeta.tensor import ShapeError


def small_table(seed=0, n_sites=6, n_per_site=24, h=1.0, **kw):
    return synth_generate(n_sites, n_per_site, h, seed, split=(4, 1, 1), **kw)


# ---------------------------------------------------------------------------
# generation

def test_generation_is_deterministic():
    a = synth_generate(5, 16, 1.0, seed=42, split=(3, 1, 1))
    b = synth_generate(5, 16, 1.0, seed=42, split=(3, 1, 1))
    assert a.roles == b.roles
    for sa, sb in zip(a.sites, b.sites):
        assert sa.features.tobytes() == sb.features.tobytes()
        assert sa.labels.tobytes() == sb.labels.tobytes()


def test_zero_heterogeneity_means_identical_site_parameters():
    table = synth_generate(5, 16, 0.0, seed=3, split=(3, 1, 1))
    first = table.sites[0].site_meta
    for site in table.sites[1:]:
        np.testing.assert_array_equal(site.site_meta["site_direction"], first["site_direction"])
        np.testing.assert_array_equal(site.site_meta["noise_mix"], first["noise_mix"])
        np.testing.assert_array_equal(site.site_meta["class_means"][1], first["class_means"][1])
    np.testing.assert_array_equal(first["noise_mix"], np.eye(32))


def test_table_i_style_split():
    table = synth_generate(38, 16, 1.0, seed=0, split=(30, 7, 1))
    assert len(table.roles["meta_train"]) == 30
    assert len(table.roles["meta_test"]) == 7
    assert len(table.roles["zero_shot"]) == 1
    assert table.roles["meta_val"] == table.roles["meta_train"]
    claimed = set(table.roles["meta_train"]) | set(table.roles["meta_test"]) \
        | set(table.roles["zero_shot"])
    assert claimed == {s.site_id for s in table.sites}


def test_class_balance_within_one():
    for n in (16, 17):
        table = synth_generate(3, n, 0.5, seed=1, split=(1, 1, 1))
        for site in table.sites:
            ones = int(site.labels.sum())
            assert abs(ones - (site.n - ones)) <= 1


def test_generation_preconditions():
    with pytest.raises(SpecError):
        synth_generate(1, 16, 1.0, seed=0)
    with pytest.raises(SpecError):
        synth_generate(4, 4, 1.0, seed=0)
    with pytest.raises(SpecError):
        synth_generate(4, 16, -0.5, seed=0)
    with pytest.raises(SpecError):
        synth_generate(4, 16, 1.0, seed=0, split=(4, 1, 1))


def test_heterogeneity_increases_between_site_divergence():
    def divergence(table):
        # mean pairwise distance between per-site class-1 mean vectors
        means = []
        for site in table.sites:
            means.append(site.features[site.labels == 1.0].mean(axis=0))
        means = np.stack(means)
        dists = [np.linalg.norm(a - b) for i, a in enumerate(means) for b in means[i + 1:]]
        return float(np.mean(dists))

    low, high = [], []
    for seed in range(20):
        low.append(divergence(synth_generate(6, 24, 0.3, seed, split=(4, 1, 1))))
        high.append(divergence(synth_generate(6, 24, 1.5, seed, split=(4, 1, 1))))
    assert np.mean(low) < np.mean(high)


def test_volumetric_generation_shapes():
    table = synth_generate(3, 8, 1.0, seed=0, feature_shape=(6, 7, 8), split=(1, 1, 1))
    assert table.feature_shape() == (6, 7, 8)
    assert all(np.isfinite(s.features).all() for s in table.sites)


# ---------------------------------------------------------------------------
# z-scoring

def test_zscore_hand_example():
    out = zscore(np.array([1.0, 2.0, 3.0]))
    np.testing.assert_allclose(out, [-1.2247448, 0.0, 1.2247448], atol=1e-6)


def test_zscore_idempotent_on_normalized_input():
    rng = np.random.default_rng(0)
    x = zscore(rng.normal(size=(4, 10)))
    np.testing.assert_allclose(zscore(x), x, atol=1e-12)


def test_zscore_constant_input_raises():
    with pytest.raises(ConstantInputError):
        zscore(np.full(5, 3.0))
    with pytest.raises(ConstantInputError):
        zscore(np.stack([np.arange(4.0), np.full(4, 1.0)]))


@given(st.integers(0, 2**31 - 1))
@settings(max_examples=25)
def test_zscore_composition_property(seed):
    x = np.random.default_rng(seed).normal(size=(3, 6)) * 5 + 2
    once = zscore(x)
    np.testing.assert_allclose(zscore(once), once, atol=1e-12)
    flat = once.reshape(3, -1)
    np.testing.assert_allclose(flat.mean(axis=1), 0.0, atol=1e-12)
    np.testing.assert_allclose(flat.std(axis=1), 1.0, atol=1e-12)


# ---------------------------------------------------------------------------
# mosaic pipeline

@pytest.mark.parametrize("shape", [(32, 32, 32), (91, 91, 91), (128, 96, 80), (2, 5, 9)])
def test_mosaic_shape_is_constant(shape):
    vol = np.random.default_rng(1).normal(size=shape)
    assert mosaic_preprocess(vol).shape == (68, 432)


def test_mosaic_preserves_constants():
    out = mosaic_preprocess(np.full((33, 44, 55), -2.5))
    np.testing.assert_allclose(out, -2.5, atol=1e-9)


def test_resize_to_same_grid_is_identity():
    vol = np.random.default_rng(2).normal(size=(91, 91, 91))
    np.testing.assert_allclose(resize_trilinear(vol, (91, 91, 91)), vol, atol=1e-12)


def test_mosaic_rejects_bad_rank():
    with pytest.raises(ShapeError):
        mosaic_preprocess(np.zeros((4, 4)))
    with pytest.raises(ShapeError):
        mosaic_preprocess(np.zeros((4, 1, 4)))


# ---------------------------------------------------------------------------
# episode sampling

def test_episode_sizes_and_disjointness():
    table = small_table(n_per_site=64)
    rng = np.random.default_rng(0)
    ep = sample_episode(table, "meta_test", 1, 20, 10, rng)
    assert len(ep.support) == 20 and len(ep.target) == 10
    sid = ep.site_ids[0]
    assert not set(ep.support_indices[sid]) & set(ep.target_indices[sid])


def test_multi_site_episode_pools_batches():
    table = small_table(n_per_site=32)
    ep = sample_episode(table, "meta_train", 3, 4, 2, np.random.default_rng(1))
    assert len(ep.site_ids) == len(set(ep.site_ids)) == 3
    assert len(ep.support) == 12 and len(ep.target) == 6


def test_exhaustive_split_covers_site():
    table = small_table(n_per_site=24)
    ep = sample_episode(table, "meta_test", 1, 14, 10, np.random.default_rng(5))
    sid = ep.site_ids[0]
    union = set(ep.support_indices[sid]) | set(ep.target_indices[sid])
    assert union == set(range(24))


def test_sampling_is_deterministic_given_rng_state():
    table = small_table()
    a = sample_episode(table, "meta_train", 2, 4, 2, np.random.default_rng(9))
    b = sample_episode(table, "meta_train", 2, 4, 2, np.random.default_rng(9))
    assert a.site_ids == b.site_ids
    assert a.support.features.data.tobytes() == b.support.features.data.tobytes()
    assert a.target.labels.data.tobytes() == b.target.labels.data.tobytes()


def test_support_is_class_balanced():
    table = small_table(n_per_site=64)
    for seed in range(5):
        ep = sample_episode(table, "meta_train", 1, 10, 4, np.random.default_rng(seed))
        assert ep.support.labels.data.sum() == 5.0


def test_insufficient_examples_raise_episode_error():
    table = small_table(n_per_site=24)
    with pytest.raises(EpisodeError) as err:
        sample_episode(table, "meta_train", 1, 20, 10, np.random.default_rng(0))
    assert "site" in str(err.value)
    with pytest.raises(EpisodeError):
        sample_episode(table, "zero_shot", 2, 2, 2, np.random.default_rng(0))


@given(st.integers(0, 2**31 - 1), st.integers(1, 3), st.integers(2, 8), st.integers(1, 4))
@settings(max_examples=40)
def test_support_target_never_overlap(seed, n_sites, k, t):
    table = small_table(n_per_site=32)
    ep = sample_episode(table, "meta_train", n_sites, k, t, np.random.default_rng(seed))
    for sid in ep.site_ids:
        sup, tgt = set(ep.support_indices[sid]), set(ep.target_indices[sid])
        assert not sup & tgt
        assert len(sup) == k and len(tgt) == t


def test_train_and_val_pools_are_disjoint_slices():
    table = small_table(n_per_site=32)
    sid = table.roles["meta_train"][0]
    train = set(table.pool_indices(sid, "meta_train"))
    val = set(table.pool_indices(sid, "meta_val"))
    assert not train & val
    assert train | val == set(range(32))


# ---------------------------------------------------------------------------
# persistence

def test_table_round_trip(tmp_path):
    table = small_table(n_per_site=16)
    path = str(tmp_path / "data.bin")
    save_table(path, table)
    back = load_table(path)
    assert back.roles == table.roles
    assert back.val_fraction == table.val_fraction
    for a, b in zip(table.sites, back.sites):
        assert a.features.tobytes() == b.features.tobytes()
        assert a.labels.tobytes() == b.labels.tobytes()


def test_table_role_validation():
    table = small_table()
    with pytest.raises(ValueError):
        SiteTable(table.sites, {
            "meta_train": [0, 1],
            "meta_val": [0, 1],
            "meta_test": [1, 4],  # overlaps meta_train
            "zero_shot": [5],
        })
