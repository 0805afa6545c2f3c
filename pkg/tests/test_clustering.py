import itertools
import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.cluster.hierarchy import fcluster, linkage

from ufc import clustering as cl
from ufc.clustering import ElbowCurve, FeatureSet, PseudoLabels


def blobs(seed=0, n=20, spacing=10.0):
    rng = np.random.default_rng(seed)
    centers = np.array([[0.0, 0.0], [spacing, 0.0], [spacing / 2, spacing * np.sqrt(3) / 2]])
    pts = np.concatenate([c + rng.normal(size=(n, 2)) for c in centers])
    truth = np.repeat(np.arange(3), n)
    return FeatureSet(np.arange(len(pts)) + 100, pts), truth, centers


def nearest_center(points, centers):
    return np.argmin(((points[:, None] - centers[None]) ** 2).sum(-1), axis=1)


def test_blob_oracle_is_membership():
    fs, truth, centers = blobs()
    assert np.array_equal(nearest_center(fs.vectors, centers), truth)


def test_agglomerative_blobs():
    fs, truth, centers = blobs()
    labels, dendro = cl.agglomerative(fs, 3)
    assert cl.ari(labels.labels, nearest_center(fs.vectors, centers)) == 1.0
    assert len(dendro.merges) == len(fs) - 1


def test_agglomerative_matches_scipy_average_linkage():
    rng = np.random.default_rng(9)
    x = rng.normal(size=(40, 3))
    fs = FeatureSet(np.arange(40), x)
    dendro = cl.build_dendrogram(fs)
    ref = linkage(x, method="average")
    assert np.allclose([m.distance for m in dendro.merges], ref[:, 2])
    for k in (2, 5, 9):
        ref_labels = fcluster(ref, k, criterion="maxclust")
        assert cl.ari(dendro.cut(k), ref_labels) == 1.0


def test_singleton_cut_and_identical_points():
    fs = FeatureSet([1, 2, 3], [[0.0], [1.0], [5.0]])
    labels, _ = cl.agglomerative(fs, 3)
    assert sorted(labels.labels.tolist()) == [0, 1, 2]
    fs2 = FeatureSet([1, 2], [[1.0, 1.0], [1.0, 1.0]])
    labels, dendro = cl.agglomerative(fs2, 1)
    assert labels.k == 1 and dendro.merges[0].distance == 0.0


def test_agglomerative_errors():
    fs = FeatureSet([1, 2], [[0.0], [1.0]])
    with pytest.raises(ValueError):
        cl.agglomerative(fs, 3)
    with pytest.raises(ValueError):
        cl.agglomerative(FeatureSet(np.zeros(0, int), np.zeros((0, 2))), 1)


def test_tie_break_lowest_pair_first():
    # equilateral-ish: pairs (0,1) and (2,3) tie; (0,1) must merge first
    fs = FeatureSet(np.arange(4), [[0.0], [1.0], [10.0], [11.0]])
    dendro = cl.build_dendrogram(fs)
    assert (dendro.merges[0].a, dendro.merges[0].b) == (0, 1)
    assert (dendro.merges[1].a, dendro.merges[1].b) == (2, 3)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), n=st.integers(3, 25))
def test_dendrogram_properties(seed, n):
    x = np.random.default_rng(seed).normal(size=(n, 2))
    fs = FeatureSet(np.arange(n), x)
    dendro = cl.build_dendrogram(fs)
    d = [m.distance for m in dendro.merges]
    assert all(b >= a - 1e-12 for a, b in zip(d, d[1:]))
    prev = dendro.cut(1)
    for k in range(2, n + 1):
        cur = dendro.cut(k)
        assert len(set(cur.tolist())) == k
        # nesting: exactly one cluster of the coarser cut splits in two
        parents = {}
        for a, b in zip(prev, cur):
            parents.setdefault(int(a), set()).add(int(b))
        assert sorted(len(v) for v in parents.values())[-1] == 2
        assert sum(len(v) for v in parents.values()) == k
        prev = cur


@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 1000))
def test_methods_permutation_invariant(seed):
    fs, truth, _ = blobs(seed % 7)
    perm = np.random.default_rng(seed).permutation(len(fs))
    fp = FeatureSet(fs.ids[perm], fs.vectors[perm])
    for fn in (lambda f: cl.agglomerative(f, 3)[0], lambda f: cl.kmeans(f, 3, seed=1),
               lambda f: cl.dbscan(f, 2.5, 4)):
        a, b = fn(fs).as_dict(), fn(fp).as_dict()
        ids = sorted(a)
        assert cl.ari([a[i] for i in ids], [b[i] for i in ids]) == 1.0


def test_kmeans_blobs_five_seeds():
    fs, truth, _ = blobs()
    for seed in range(5):
        assert cl.ari(cl.kmeans(fs, 3, seed=seed).labels, truth) == 1.0


def test_kmeans_degenerate_k():
    fs, _, _ = blobs()
    one = cl.kmeans(fs, 1)
    assert one.k == 1
    assert np.isclose(one.params["inertia"], ((fs.vectors - fs.vectors.mean(0)) ** 2).sum())
    alln = cl.kmeans(fs, len(fs))
    assert alln.k == len(fs) and alln.params["inertia"] == 0.0


def test_dbscan_cases():
    fs, truth, _ = blobs()
    assert cl.ari(cl.dbscan(fs, 2.5, 4).labels, truth) == 1.0
    dense = FeatureSet(np.arange(5), np.zeros((5, 2)) + np.arange(5)[:, None] * 0.01)
    assert cl.dbscan(dense, 1.0).k == 1
    assert cl.dbscan(fs, 1e-6).k == 1
    with pytest.raises(ValueError):
        cl.dbscan(fs, 0.0)


def test_dbscan_noise_joins_nearest_cluster():
    pts = np.array([[0, 0], [0, 0.1], [0.1, 0], [0.1, 0.1], [5, 5], [5, 5.1], [5.1, 5], [5.1, 5.1], [1.0, 1.0]])
    labels = cl.dbscan(FeatureSet(np.arange(9), pts), 0.5, 4).labels
    assert labels[8] == labels[0] != labels[4]


def test_elbow_endpoints_and_shape():
    fs, _, _ = blobs()
    curve = cl.elbow_curve(fs, range(1, 11))
    vals = dict(curve.points)
    x = fs.vectors
    allpairs = [np.linalg.norm(x[i] - x[j]) for i, j in itertools.combinations(range(len(x)), 2)]
    assert vals[1] == pytest.approx(np.mean(allpairs), rel=1e-12)
    assert cl.elbow_curve(fs, [len(fs)]).points[0][1] == 0.0
    assert vals[2] - vals[3] > 3 * (vals[3] - vals[4])
    assert cl.select_k(curve) == 3
    assert curve.to_csv().splitlines()[0] == "k,mean_intra_distance"


def test_elbow_errors():
    fs, _, _ = blobs()
    with pytest.raises(ValueError):
        cl.elbow_curve(fs, [])


def test_select_k_hand_cases():
    assert cl.select_k(ElbowCurve([(1, 10.0), (2, 2.0), (3, 1.9), (4, 1.8)])) == 2
    assert cl.select_k(ElbowCurve([(k, 10.0 - k) for k in range(1, 8)])) == 2
    with pytest.raises(ValueError):
        cl.select_k(ElbowCurve([(1, 1.0), (2, 0.0)]))


def test_pseudo_labels_json_round_trip(tmp_path):
    labels = PseudoLabels([5, 7, 9], [0, 1, 0], "agglomerative", {"k": 2})
    cl.save_labels(tmp_path / "labels.json", labels)
    data = json.loads((tmp_path / "labels.json").read_text())
    assert set(data) == {"method", "params", "k", "assignments"}
    back = cl.load_labels(tmp_path / "labels.json")
    assert back.as_dict() == labels.as_dict() and back.k == 2


def test_pseudo_labels_invariants():
    with pytest.raises(ValueError):
        PseudoLabels([1, 1], [0, 1], "x")
    with pytest.raises(ValueError):
        PseudoLabels([1, 2], [0, 2], "x")
    with pytest.raises(ValueError):
        FeatureSet([1, 2], [[np.nan], [0.0]])
