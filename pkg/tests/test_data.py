from collections import Counter

import numpy as np
import pytest

from promptfed import data
from promptfed.data import ConfigError


@pytest.fixture(scope="module")
def pool():
    spec = data.make_mixture_spec(4, 8, 16, separation=6.0, n_per_cell=25, seed=0)
    return data.gen_mixture(spec, 1)


def test_sigma_to_zero():
    spec = data.make_mixture_spec(2, 3, 8, sigma=1e-9, n_per_cell=5, seed=0)
    p = data.gen_mixture(spec, 0)
    dev = np.abs(p.X - spec.means[p.group, p.y]).max()
    assert dev < 1e-6


def test_pool_size_and_separation():
    spec = data.make_mixture_spec(4, 3, 16, separation=6.0, n_per_cell=7, seed=2)
    assert len(data.gen_mixture(spec, 0)) == 4 * 3 * 7
    assert spec.separation() >= 6.0 - 1e-9


def test_cell_means_law_of_large_numbers():
    spec = data.make_mixture_spec(2, 2, 4, sigma=1.5, n_per_cell=500, seed=3)
    p = data.gen_mixture(spec, 4)
    for g in range(2):
        for c in range(2):
            m = p.X[(p.group == g) & (p.y == c)].mean(axis=0)
            assert np.all(np.abs(m - spec.means[g, c]) < 3 * 1.5 / np.sqrt(500))


def test_mixture_deterministic():
    spec = data.make_mixture_spec(3, 2, 6, seed=1)
    assert np.array_equal(data.gen_mixture(spec, 5).X, data.gen_mixture(spec, 5).X)


def test_bad_sigma():
    with pytest.raises(ConfigError):
        data.MixtureSpec(np.zeros((1, 1, 2)), 0.0, np.ones((1, 1)))


def test_nested_mixture_owners():
    spec = data.make_mixture_spec(4, 8, 16, nested=True, n_per_cell=5, seed=0)
    p = data.gen_mixture(spec, 0)
    for c in range(8):
        assert set(p.group[p.y == c].tolist()) == {c * 4 // 8}
    with pytest.raises(ConfigError):
        data.make_mixture_spec(3, 8, 16, nested=True)


def _multiset(shards, pool):
    return sorted(np.concatenate([s.indices for s in shards]).tolist()) == list(range(len(pool)))


# --- pathological -------------------------------------------------------------


def test_pathological_single_client_gets_everything(pool):
    sh = data.pathological_partition(pool, 1, 8, seed=0)
    assert len(sh[0]) == len(pool)


def test_pathological_exactly_s_labels_and_conservation(pool):
    for seed in range(5):
        shards = data.pathological_partition(pool, 20, 2, seed=seed)
        assert all(len(set(s.y.tolist())) == 2 for s in shards)
        assert _multiset(shards, pool)
        assert all(np.array_equal(s.X, pool.X[s.indices]) for s in shards)


def test_pathological_class_shares_in_range(pool):
    shards = data.pathological_partition(pool, 20, 2, seed=1)
    for c in range(8):
        holders = [np.sum(s.y == c) for s in shards if c in s.meta["classes"]]
        if len(holders) > 1:
            frac = np.array(holders) / sum(holders)
            lo, hi = 0.4 / (0.4 + 0.6 * (len(holders) - 1)), 0.6 / (0.6 + 0.4 * (len(holders) - 1))
            assert np.all(frac >= lo - 1.0 / sum(holders)) and np.all(frac <= hi + 1.0 / sum(holders))


def test_pathological_rejects_s_above_c(pool):
    with pytest.raises(ConfigError, match="s=9"):
        data.pathological_partition(pool, 4, 9, seed=0)


def test_pathological_deterministic(pool):
    a = data.pathological_partition(pool, 10, 3, seed=4)
    b = data.pathological_partition(pool, 10, 3, seed=4)
    assert all(np.array_equal(x.indices, y.indices) for x, y in zip(a, b))


def test_largest_remainder():
    parts = data.largest_remainder(10, [1, 1, 1])
    assert parts.sum() == 10 and parts.tolist() == [4, 3, 3]
    assert data.largest_remainder(7, [0.5, 0.5]).sum() == 7


# --- mixture ----------------------------------------------------------------


def test_mixture_partition_pi_exact(pool):
    shards = data.mixture_partition(pool, 8, 0.5, seed=0)
    for s in shards:
        np.testing.assert_array_equal(s.pi, np.bincount(s.group, minlength=4) / len(s))
        assert s.pi.min() >= 0 and abs(s.pi.sum() - 1) < 1e-12
    idx = np.concatenate([s.indices for s in shards])
    assert len(idx) == len(set(idx.tolist()))


def test_mixture_high_concentration_near_uniform():
    spec = data.make_mixture_spec(4, 2, 8, n_per_cell=2000, seed=0)
    p = data.gen_mixture(spec, 0)
    shards = data.mixture_partition(p, 10, 1e6, seed=0, samples_per_client=400)
    assert all(np.abs(s.pi - 0.25).max() <= 0.01 for s in shards)


def test_mixture_low_concentration_is_skewed():
    spec = data.make_mixture_spec(4, 2, 8, n_per_cell=500, seed=0)
    p = data.gen_mixture(spec, 0)
    fracs = []
    for seed in range(10):
        shards = data.mixture_partition(p, 20, 0.1, seed=seed, samples_per_client=40)
        fracs.append(np.mean([s.pi.max() >= 0.6 for s in shards]))
    assert np.mean(fracs) >= 0.5


def test_mixture_pool_too_small(pool):
    with pytest.raises(ConfigError, match="pool too small"):
        data.mixture_partition(pool, 10, 1.0, seed=0, samples_per_client=len(pool))


def test_mixture_bad_concentration(pool):
    with pytest.raises(ConfigError):
        data.mixture_partition(pool, 4, 0.0, seed=0)


# --- domain -----------------------------------------------------------------


def test_domain_identity_is_plain_split(pool):
    M = 4
    shards = data.domain_partition(pool, M, [data.DomainTransform.identity(16)] * M, seed=0)
    assert _multiset(shards, pool)
    for s in shards:
        np.testing.assert_array_equal(s.X, pool.X[s.indices])
        counts = np.bincount(s.y, minlength=8)
        assert counts.max() - counts.min() <= 1


def test_domain_every_class_and_group_is_client(pool):
    tf = data.make_domain_transforms(5, 16, seed=0)
    shards = data.domain_partition(pool, 5, tf, seed=0)
    for i, s in enumerate(shards):
        assert set(s.y.tolist()) == set(range(8))
        assert set(s.group.tolist()) == {i}


def test_domain_shift_visible_in_means():
    spec = data.make_mixture_spec(1, 2, 8, n_per_cell=1000, class_offset=0.0, seed=0)
    p = data.gen_mixture(spec, 0)
    tf = data.make_domain_transforms(2, 8, shift_scale=4.0, mix=0.0, seed=1)
    a, b = data.domain_partition(p, 2, tf, seed=0)
    gap = np.linalg.norm(a.X.mean(axis=0) - b.X.mean(axis=0))
    shift = np.linalg.norm(tf[0].shift - tf[1].shift)
    se = np.sqrt(2 * 8 / 1000)
    assert gap >= shift - 3 * se


def test_domain_wrong_transform_count(pool):
    with pytest.raises(ConfigError):
        data.domain_partition(pool, 3, [data.DomainTransform.identity(16)] * 2, seed=0)


# --- heterogeneity knobs ------------------------------------------------------


def test_label_tv_monotone_in_s(pool):
    tv = [np.mean([data.label_tv(data.pathological_partition(pool, 20, s, seed=k), 8) for k in range(5)])
          for s in (1, 2, 4, 8)]
    assert all(a >= b - 1e-12 for a, b in zip(tv, tv[1:]))


def test_group_tv_monotone_in_concentration():
    spec = data.make_mixture_spec(4, 2, 8, n_per_cell=500, seed=0)
    p = data.gen_mixture(spec, 0)
    tv = [np.mean([data.label_tv(data.mixture_partition(p, 20, a, seed=k, samples_per_client=40), 4, "group")
                   for k in range(5)]) for a in (0.1, 1.0, 10.0, 100.0)]
    assert all(a >= b - 1e-12 for a, b in zip(tv, tv[1:]))


# --- splitting and files --------------------------------------------------------


def test_train_test_shards_cover_shard(pool):
    shards = data.pathological_partition(pool, 10, 2, seed=0)
    tr, te = data.train_test_shards(shards, 0.25, seed=1)
    for s, a, b in zip(shards, tr, te):
        assert len(a) + len(b) == len(s) and len(b) > 0
        assert Counter(map(tuple, np.vstack([a.X, b.X]).round(12).tolist())) == Counter(
            map(tuple, s.X.round(12).tolist()))


def test_tiny_shard_still_gets_test_sample():
    p = data.Pool(np.arange(6.0).reshape(3, 2), np.array([0, 1, 2]), np.zeros(3, dtype=int))
    sh = data.ClientShard(0, p.X, p.y, p.group, np.ones(1), np.arange(3))
    tr, te = data.train_test_shards([sh], 0.25, seed=0)
    assert len(tr[0]) == 2 and len(te[0]) == 1


def test_shard_round_trip(pool, tmp_path):
    sh = data.pathological_partition(pool, 5, 2, seed=0)[3]
    data.write_shard(tmp_path / "s.shard", sh)
    back = data.read_shard(tmp_path / "s.shard")
    assert back.client_id == 3 and back.meta == sh.meta
    for k in ("X", "y", "group", "pi", "indices"):
        assert np.array_equal(getattr(back, k), getattr(sh, k))
    (tmp_path / "bad").write_bytes(b"nope")
    with pytest.raises(ValueError):
        data.read_shard(tmp_path / "bad")


def test_pretext_task():
    p = data.make_pretext(8, n_classes=4, n_samples=500, seed=0)
    assert p.X.shape == (500, 8) and set(p.y.tolist()) <= set(range(4))
    assert np.array_equal(p.X, data.make_pretext(8, n_classes=4, n_samples=500, seed=0).X)
    with pytest.raises(ConfigError):
        data.make_pretext(8, n_samples=0)
