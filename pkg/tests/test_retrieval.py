import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import loop_euclidean, rerank_reference
from reidforge.featstore import FeatureMatrix, GalleryManifest, ManifestEntry
from reidforge.retrieval import (
    DistanceMatrix,
    FusionParams,
    RerankParams,
    ensemble_distances,
    fuse_distances,
    k_reciprocal_rerank,
    pairwise_distance,
    rank,
    tracklet_rerank,
)


def test_cosine_unit_vectors():
    q = FeatureMatrix(np.array([[1.0, 0.0]]), normalized=True)
    g = FeatureMatrix(np.eye(2), normalized=True)
    d = pairwise_distance(q, g, "cosine")
    assert d.data.tolist() == [[0.0, 1.0]]
    assert d.metric == "cosine"


def test_euclidean_three_four_five():
    assert pairwise_distance([[0.0, 0.0]], [[3.0, 4.0]]).data[0, 0] == 5.0


def test_euclidean_matches_loop_oracle():
    rng = np.random.default_rng(20)
    q, g = rng.normal(size=(20, 16)), rng.normal(size=(20, 16))
    np.testing.assert_allclose(pairwise_distance(q, g).data, loop_euclidean(q.tolist(), g.tolist()),
                               atol=1e-10, rtol=0)


def test_self_distance_symmetric_zero_diagonal(rng):
    x = rng.normal(size=(7, 5))
    d = pairwise_distance(x, x).data
    assert np.array_equal(d, d.T)
    assert not np.diag(d).any()


def test_pairwise_errors():
    with pytest.raises(ValueError):
        pairwise_distance(np.zeros((2, 3)), np.zeros((2, 4)))
    with pytest.raises(ValueError):
        pairwise_distance(np.full((1, 2), 3.0), np.eye(2), "cosine")


def test_distance_matrix_invariants():
    with pytest.raises(ValueError):
        DistanceMatrix([[np.nan]])
    with pytest.raises(ValueError):
        DistanceMatrix([[-0.1]], "euclidean")
    assert DistanceMatrix([[-0.1]], "jaccard-fused").data[0, 0] == -0.1


def test_param_validation():
    with pytest.raises(ValueError):
        RerankParams(k1=2, k2=3)
    with pytest.raises(ValueError):
        RerankParams(k2=0)
    with pytest.raises(ValueError):
        RerankParams(lambda_jaccard=1.5)
    with pytest.raises(ValueError):
        FusionParams(lambda1=-0.1)


def _blocks(x, q_count):
    q, g = x[:q_count], x[q_count:]
    return pairwise_distance(q, g).data, pairwise_distance(q, q).data, pairwise_distance(g, g).data


def test_rerank_lambda_one_is_identity(rng):
    qg, qq, gg = _blocks(rng.normal(size=(12, 4)), 3)
    out = k_reciprocal_rerank(qg, qq, gg, RerankParams(5, 2, 1.0))
    assert np.array_equal(out.data, qg)
    assert out.metric == "jaccard-fused"


def test_rerank_toy_matches_reference():
    rng = np.random.default_rng(6)
    qg, qq, gg = _blocks(rng.normal(size=(6, 3)), 2)
    out = k_reciprocal_rerank(qg, qq, gg, RerankParams(3, 2, 0.3)).data
    ref = rerank_reference(qg, qq, gg, 3, 2, 0.3)
    np.testing.assert_allclose(out, ref, atol=1e-9, rtol=0)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from([(3, 1), (4, 2), (6, 3), (8, 6)]),
       st.sampled_from([0.0, 0.3, 0.7]))
def test_rerank_matches_reference_property(seed, ks, lam):
    rng = np.random.default_rng(seed)
    n, q_count = int(rng.integers(10, 20)), int(rng.integers(1, 5))
    qg, qq, gg = _blocks(rng.normal(size=(n, 4)), q_count)
    out = k_reciprocal_rerank(qg, qq, gg, RerankParams(ks[0], ks[1], lam)).data
    np.testing.assert_allclose(out, rerank_reference(qg, qq, gg, ks[0], ks[1], lam), atol=1e-9, rtol=0)


def test_rerank_promotes_reciprocal_match_over_distractor():
    # the distractor sits closest to the query but belongs to its own tight cluster,
    # so the query is not among its nearest neighbours; the true match shares the
    # query's neighbourhood
    q = np.array([[0.0, 0.0]])
    g = np.array([[1.0, 0.0], [-0.9, 0.0],
                  [0.6, 0.75], [0.6, -0.75],
                  [-1.4, 0.3], [-1.4, -0.3], [-1.7, 0.0], [-1.3, 0.0]])
    qg, qq, gg = pairwise_distance(q, g).data, pairwise_distance(q, q).data, pairwise_distance(g, g).data
    assert rank(qg)[0, 0] == 1
    out = k_reciprocal_rerank(qg, qq, gg, RerankParams(4, 1, 0.3)).data
    assert out[0, 0] < out[0, 1]
    assert rank(out)[0, 0] == 0


def test_rerank_errors(rng):
    qg, qq, gg = _blocks(rng.normal(size=(6, 3)), 2)
    with pytest.raises(ValueError):
        k_reciprocal_rerank(qg, qq, gg, RerankParams(6, 2))
    with pytest.raises(ValueError):
        k_reciprocal_rerank(qg, qq[:1, :1], gg, RerankParams(3, 2))


def test_fusion_degenerate_and_arithmetic():
    dv = np.array([[1.0, 2.0]])
    assert np.array_equal(fuse_distances(dv, [[5.0, 1.0]], [[3.0, 3.0]], FusionParams(0, 0)).data, dv)
    out = fuse_distances([[1.0]], [[0.5]], [[0.2]], FusionParams(0.1, 0.1))
    assert out.data[0, 0] == pytest.approx(0.93, abs=1e-15)
    assert out.metric == "jaccard-fused"


def test_fusion_changes_ranking():
    # gallery 0 shares the query's orientation (D_o = 0) and is a confusable; the
    # other two get the full orientation term subtracted
    dv = np.array([[0.50, 0.55, 0.90]])
    do = np.array([[0.0, 1.0, 1.0]])
    dc = np.zeros((1, 3))
    assert rank(dv)[0].tolist() == [0, 1, 2]
    fused = fuse_distances(dv, do, dc, FusionParams(0.1, 0.0))
    np.testing.assert_allclose(fused.data, [[0.50, 0.45, 0.80]], atol=1e-15)
    assert rank(fused)[0].tolist() == [1, 0, 2]


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.floats(0, 2), st.floats(0, 2))
def test_fusion_is_linear(seed, l1, l2):
    rng = np.random.default_rng(seed)
    dv, do, dc = (rng.uniform(size=(3, 5)) for _ in range(3))
    out = fuse_distances(dv, do, dc, FusionParams(2 * l1, 2 * l2)).data
    np.testing.assert_allclose(out, dv - 2 * (l1 * do + l2 * dc), atol=1e-12, rtol=0)


def test_fusion_shape_mismatch():
    with pytest.raises(ValueError):
        fuse_distances(np.zeros((1, 2)), np.zeros((1, 3)), np.zeros((1, 2)))


def _manifest(tracklets, frames=None, cameras=None):
    n = len(tracklets)
    frames = frames if frames is not None else [-1 if t == -1 else i for i, t in enumerate(tracklets)]
    cameras = cameras if cameras is not None else [0] * n
    return GalleryManifest([ManifestEntry(f"i{i}", 0, cameras[i], tracklets[i], frames[i]) for i in range(n)])


def test_tracklet_window_one_is_identity(rng):
    x = FeatureMatrix(rng.normal(size=(4, 3)))
    out = tracklet_rerank(x, _manifest([0, 0, 0, -1]), window=1)
    assert np.array_equal(out.data, x.data)


def test_tracklet_orthonormal_triple():
    feats = FeatureMatrix(np.eye(3), normalized=True)
    out = tracklet_rerank(feats, _manifest([7, 7, 7]), window=3)
    expected = np.full(3, 1 / np.sqrt(3))
    for row in out.data:
        np.testing.assert_allclose(row, expected, atol=1e-15)
    assert out.normalized


def test_tracklet_unnormalized_mean_not_rescaled():
    out = tracklet_rerank(FeatureMatrix(np.eye(3)), _manifest([7, 7, 7]), window=3)
    np.testing.assert_allclose(out.data, np.full((3, 3), 1 / 3), atol=1e-15)


def test_tracklet_window_ordering_and_boundaries():
    # frames out of positional order; values equal the frame index
    frames = [2, 0, 4, 1, 3]
    feats = FeatureMatrix(np.array(frames, dtype=float)[:, None])
    out = tracklet_rerank(feats, _manifest([1] * 5, frames), window=3).data[:, 0]
    # frame 0 and 4 shift inward: means of {0,1,2} and {2,3,4}; interior frames centred
    by_frame = dict(zip(frames, out))
    assert by_frame == {0: 1.0, 1: 1.0, 2: 2.0, 3: 3.0, 4: 3.0}


def test_tracklet_leaves_untracked_items_exactly(rng):
    x = FeatureMatrix(rng.normal(size=(6, 4)))
    out = tracklet_rerank(x, _manifest([-1, 2, 2, -1, 3, 3]), window=3)
    for i in (0, 3):
        assert np.array_equal(out.data[i], x.data[i])
    np.testing.assert_allclose(out.data[1], x.data[1:3].mean(axis=0))


def test_tracklet_errors(rng):
    x = FeatureMatrix(rng.normal(size=(3, 2)))
    with pytest.raises(ValueError):
        tracklet_rerank(x, _manifest([0, 0, 0]), window=0)
    with pytest.raises(ValueError):
        tracklet_rerank(x, _manifest([0, 0]), window=3)


def loop_minmax_mean(members):
    rows, cols = len(members[0]), len(members[0][0])
    normed = []
    for m in members:
        flat = [v for row in m for v in row]
        lo, hi = min(flat), max(flat)
        normed.append([[(m[i][j] - lo) / (hi - lo) for j in range(cols)] for i in range(rows)])
    return [[sum(n[i][j] for n in normed) / len(normed) for j in range(cols)] for i in range(rows)]


def test_ensemble_single_member():
    d = np.array([[2.0, 4.0], [3.0, 6.0]])
    np.testing.assert_allclose(ensemble_distances([d]).data, [[0.0, 0.5], [0.25, 1.0]], atol=1e-15)


def test_ensemble_idempotent_normalization(rng):
    d = rng.uniform(1, 5, size=(3, 4))
    single = ensemble_distances([d]).data
    np.testing.assert_allclose(ensemble_distances([d, single]).data, single, atol=1e-15)


def test_ensemble_matches_loop_oracle():
    rng = np.random.default_rng(33)
    members = [rng.uniform(0, s, size=(4, 6)) for s in (1.0, 10.0, 0.1)]
    ref = loop_minmax_mean([m.tolist() for m in members])
    np.testing.assert_allclose(ensemble_distances(members).data, ref, atol=1e-12, rtol=0)


def test_ensemble_raw_mode(rng):
    a, b = rng.uniform(size=(2, 3)), rng.uniform(size=(2, 3))
    np.testing.assert_allclose(ensemble_distances([a, b], norm="raw").data, (a + b) / 2, atol=1e-15)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.permutations(range(4)))
def test_ensemble_permutation_invariant(seed, perm):
    rng = np.random.default_rng(seed)
    members = [rng.uniform(0, rng.uniform(0.1, 10), size=(3, 5)) for _ in range(4)]
    a = ensemble_distances(members).data
    b = ensemble_distances([members[i] for i in perm]).data
    assert np.abs(a - b).max() <= 1e-12


def test_ensemble_errors():
    with pytest.raises(ValueError):
        ensemble_distances([])
    with pytest.raises(ValueError):
        ensemble_distances([np.zeros((1, 2)), np.zeros((2, 1))])
    with pytest.raises(ValueError):
        ensemble_distances([np.zeros((1, 2))], norm="zscore")


def test_rank_examples():
    assert rank([[0.2, 0.1, 0.3]]).tolist() == [[1, 0, 2]]
    assert rank([[0.5] * 5]).tolist() == [[0, 1, 2, 3, 4]]


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000))
def test_rank_invariant_under_increasing_maps(seed):
    rng = np.random.default_rng(seed)
    d = rng.integers(0, 4, size=(3, 7)).astype(float)   # plenty of ties
    r = rank(d)
    assert np.array_equal(rank(2 * d + 1), r)
    assert np.array_equal(rank(np.exp(d)), r)
    for row in r:
        assert sorted(row.tolist()) == list(range(7))
