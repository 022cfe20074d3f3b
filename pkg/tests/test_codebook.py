import numpy as np
import pytest
from hypothesis import given, strategies as st

from conftest import make_item
from dormantrec.codebook import (
    Codebook,
    Sid,
    SidVocabulary,
    assign_catalog,
    find_sids,
    nearest,
    read_sid_map,
    sids_to_items,
    train_codebook,
    write_sid_map,
)
from dormantrec.core import Catalog


def mixture(rng, n=5000, dim=16, k=24):
    centers = rng.normal(scale=4.0, size=(k, dim))
    return centers[rng.integers(k, size=n)] + rng.normal(size=(n, dim))


def argmin_scan(x, centroids):
    """Per point, first index of the smallest squared distance, by explicit loops."""
    out = []
    for p in x:
        best, best_d = 0, None
        for j, c in enumerate(centroids):
            d = float(((p - c) ** 2).sum())
            if best_d is None or d < best_d:
                best, best_d = j, d
        out.append(best)
    return np.array(out)


@pytest.fixture(scope="module")
def trained():
    x = mixture(np.random.default_rng(0))
    return x, train_codebook(x, L=3, K=16, iters=25, seed=0)


def test_separated_points_1d():
    cb = train_codebook(np.array([[0.0], [0.0], [10.0], [10.0]]), L=1, K=2, seed=0)
    assert sorted(cb.levels[0][:, 0].tolist()) == [0.0, 10.0]


def test_production_size_accepted():
    cb = Codebook([np.zeros((4096, 8)) for _ in range(3)])
    assert cb.sizes == (4096, 4096, 4096)
    assert cb.vocabulary.n_added_tokens == 12_290


def test_residual_energy_strictly_decreases_and_matches_recompute(trained):
    x, cb = trained
    residual = x.copy()
    energies = []
    for c in cb.levels:
        idx = np.argmin(((residual[:, None, :] - c[None]) ** 2).sum(-1), axis=1)
        residual = residual - c[idx]
        energies.append(float((residual ** 2).sum(1).mean()))
    assert np.allclose(energies, cb.residual_energy, rtol=1e-12)
    assert all(a > b for a, b in zip(energies, energies[1:]))


def test_encode_matches_exhaustive_scan(trained):
    _, cb = trained
    probes = np.random.default_rng(7).normal(scale=4.0, size=(1000, 16))
    codes = cb.encode_many(probes)
    residual = probes.copy()
    for l, c in enumerate(cb.levels):
        oracle = argmin_scan(residual, c)
        assert np.array_equal(codes[:, l], oracle)
        residual = residual - c[oracle]


def test_training_is_bit_deterministic():
    x = mixture(np.random.default_rng(3), n=600, dim=4, k=6)
    a = train_codebook(x, L=2, K=8, iters=10, seed=5)
    b = train_codebook(x, L=2, K=8, iters=10, seed=5)
    assert all(np.array_equal(p, q) for p, q in zip(a.levels, b.levels))


def test_too_few_points_names_level():
    with pytest.raises(ValueError, match="level 1"):
        train_codebook(np.zeros((3, 2)), L=1, K=4)
    # level 1 with K=2 leaves exactly zero residual for two distinct points
    with pytest.raises(ValueError, match="level 2"):
        train_codebook(np.array([[0.0], [1.0]]), L=2, K=2)


def test_nan_rejected():
    x = np.ones((10, 2))
    x[3, 1] = np.nan
    with pytest.raises(ValueError, match="NaN"):
        train_codebook(x, L=1, K=2)


def test_bad_iters_rejected():
    with pytest.raises(ValueError):
        train_codebook(np.eye(4), L=1, K=2, iters=0)


def hand_codebook():
    rng = np.random.default_rng(11)
    return Codebook([rng.normal(size=(4, 3)), rng.normal(size=(8, 3)) * 0.1, rng.normal(size=(2, 3)) * 0.01])


def test_centroid_sum_point_encodes_exactly():
    cb = hand_codebook()
    x = cb.levels[0][3] + cb.levels[1][7] + cb.levels[2][0]
    assert cb.encode(x) == Sid.of(3, 7, 0)
    assert np.array_equal(cb.decode(cb.encode(x)), x)


def test_nearest_1d():
    cb = Codebook([np.array([[0.0], [10.0]])])
    assert cb.encode([9.0]) == Sid.of(1)


def test_ties_go_to_lowest_index():
    c = np.array([[1.0], [-1.0], [1.0]])
    assert nearest(np.array([[0.0], [1.0]]), c).tolist() == [0, 0]


def test_zero_centroids_decode_to_zero():
    cb = Codebook([np.zeros((2, 3)), np.zeros((2, 3))])
    assert np.array_equal(cb.decode(Sid.of(1, 0)), np.zeros(3))


def test_decode_rejects_out_of_range():
    with pytest.raises(ValueError):
        hand_codebook().decode(Sid.of(4, 0, 0))


def test_dimension_mismatch():
    with pytest.raises(ValueError, match="dimension"):
        hand_codebook().encode([1.0, 2.0])


def test_full_decode_beats_level_one(trained):
    _, cb = trained
    for x in np.random.default_rng(5).normal(scale=4.0, size=(300, 16)):
        sid = cb.encode(x)
        full = np.linalg.norm(x - cb.decode(sid))
        coarse = np.linalg.norm(x - cb.decode(sid, levels=1))
        assert full <= coarse + 1e-12


def test_save_load_round_trip(tmp_path, trained):
    _, cb = trained
    cb.save(tmp_path / "cb.npz")
    back = Codebook.load(tmp_path / "cb.npz")
    assert back.sizes == cb.sizes and back.train_seed == cb.train_seed
    assert all(np.array_equal(a, b) for a, b in zip(back.levels, cb.levels))
    assert back.residual_energy == cb.residual_energy


def test_identical_embeddings_collide():
    cat = Catalog([make_item("a", emb=[1.0, 1.0]), make_item("b", emb=[1.0, 1.0]), make_item("c", emb=[-5.0, 0.0])])
    cb = Codebook([np.array([[1.0, 1.0], [-5.0, 0.0]])])
    mapping, report = assign_catalog(cb, cat)
    assert mapping["a"] == mapping["b"] != mapping["c"]
    assert report.n_collisions == 1 and report.shared == {mapping["a"]: 2}


def test_separated_clusters_do_not_collide():
    pts = np.array([[0.0, 0.0], [10.0, 0.0], [0.0, 10.0]])
    cat = Catalog(make_item(f"i{k}", emb=p) for k, p in enumerate(pts))
    _, report = assign_catalog(Codebook([pts.copy()]), cat)
    assert report.n_collisions == 0


def test_collision_histogram_matches_recount():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(400, 4))
    cat = Catalog(make_item(f"i{k}", emb=v) for k, v in enumerate(x))
    cb = train_codebook(x, L=2, K=4, iters=5, seed=0)
    mapping, report = assign_catalog(cb, cat)
    counts = {}
    for sid in mapping.values():
        counts[sid] = counts.get(sid, 0) + 1
    hist = {}
    for n in counts.values():
        if n > 1:
            hist[n] = hist.get(n, 0) + 1
    assert report.histogram() == dict(sorted(hist.items()))
    assert sum(len(v) for v in sids_to_items(mapping).values()) == len(cat)


def test_sid_map_lines_round_trip():
    m = {"a": Sid.of(1, 2, 3), "b": Sid.of(0, 0, 15)}
    assert read_sid_map(write_sid_map(m)) == m


# ---------------------------------------------------------------- text form and vocabulary

def test_sid_text_form():
    assert Sid.of(3, 7, 0).to_text() == "<sid_begin>s1_3 s2_7 s3_0<sid_end>"


@given(st.lists(st.integers(0, 5000), min_size=1, max_size=4))
def test_sid_text_round_trip(codes):
    sid = Sid(tuple(codes))
    assert Sid.parse(sid.to_text()) == sid


def test_find_sids_counts_malformed():
    text = "a <sid_begin>s1_1 s2_2 s3_3<sid_end> b <sid_begin>s2_1 s1_2<sid_end> c <sid_begin>oops"
    found, bad = find_sids(text)
    assert found == [Sid.of(1, 2, 3)] and bad == 2


@given(st.lists(st.integers(1, 50), min_size=1, max_size=4))
def test_vocabulary_ranges_disjoint(sizes):
    v = SidVocabulary(tuple(sizes))
    ids = [t for l in range(len(sizes)) for t in v.level_range(l)]
    assert len(ids) == len(set(ids)) == sum(sizes)
    assert {v.sid_begin, v.sid_end, v.bos}.isdisjoint(ids)
    assert len(v.token_strings()) == v.n_added_tokens == sum(sizes) + 2
