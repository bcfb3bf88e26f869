import numpy as np
import pytest

from ascn.cloudio import PointCloud
from ascn.errors import DimensionMismatch, InvalidParam
from ascn.spatial import FieldBatch, ReceptiveField, build_index, receptive_fields
from ascn import structconv as sc
from oracles import conv_dir_naive, conv_dist_naive, cos_naive, dot_naive, str_conv_naive


def random_fields(rng, n=40, m_max=10):
    pts = rng.standard_normal((n, 3))
    c = PointCloud(pts)
    m = rng.integers(1, m_max + 1, size=n)
    return c, receptive_fields(c, build_index(c), m, m_max)


def layer_dict(layer):
    return {k: getattr(layer, k) for k in ("center_w", "support_dirs", "support_w", "dist_w", "dist_b",
                                           "mlp_w1", "mlp_b1", "mlp_w2", "mlp_b2", "mode")}


# --- similarity ------------------------------------------------------------

def test_cosine_examples():
    assert sc.cosine_similarity([1, 0, 0], [1, 0, 0]) == 1.0
    assert sc.cosine_similarity([1, 0, 0], [0, 1, 0]) == 0.0
    assert sc.cosine_similarity([0, 0, 0], [0.3, 1, 2]) == 0.0


def test_sim_examples():
    assert sc.sim([1.0], [1.0], [0, 2, 0], [0, 1, 0]) == 1.0
    assert sc.sim([2.0], [3.0], [0, 0, -1], [0, 0, 4]) == -6.0
    with pytest.raises(DimensionMismatch):
        sc.sim([1.0, 2.0], [1.0], [1, 0, 0], [1, 0, 0])


def test_sim_random_two_step():
    rng = np.random.default_rng(0)
    for _ in range(50):
        f, w = rng.standard_normal(6), rng.standard_normal(6)
        d, k = rng.standard_normal(3), rng.standard_normal(3)
        want = dot_naive(f, w) * cos_naive(d, k)
        assert sc.sim(f, w, d, k) == pytest.approx(want, abs=1e-12)


# --- single-field convolutions ---------------------------------------------

def test_conv_dir_hand_value():
    rf = ReceptiveField(0, np.array([1]), np.array([[1.0, 0, 0]]), np.array([1.0]), 1)
    k = sc.DirectionKernel(np.array([1.0]), np.array([[1.0, 0, 0]]), np.array([[1.0]]))
    assert sc.conv_dir(rf, np.ones((2, 1)), k) == 2.0


def test_conv_dir_padding_wins_when_all_sims_negative():
    rf = ReceptiveField(0, np.array([1, 0]), np.array([[-1.0, 0, 0], [0, 0, 0]]), np.array([1.0, 0]), 1)
    k = sc.DirectionKernel(np.array([0.0]), np.array([[1.0, 0, 0]]), np.array([[1.0]]))
    assert sc.conv_dir(rf, np.ones((2, 1)), k) == 0.0


def test_conv_dist_hand_values():
    rf = ReceptiveField(0, np.array([1, 2, 0]), np.zeros((3, 3)), np.array([1.0, 3.0, 0.0]), 2)
    assert sc.conv_dist(rf, sc.DistanceKernel(np.array([1.0, 1.0]), 0.0)) == 6.0
    assert sc.conv_dist(rf, sc.DistanceKernel(np.zeros(2), 5.0)) == 5.0


def test_single_field_ops_match_loops():
    rng = np.random.default_rng(1)
    for _ in range(100):
        c, fields = random_fields(rng, n=12)
        feats = rng.standard_normal((12, 8))
        dirs = sc.random_unit_vectors(rng, (4,))
        kernel = sc.DirectionKernel(rng.standard_normal(8), dirs, rng.standard_normal((4, 8)))
        rf = fields.field(int(rng.integers(12)))
        want = conv_dir_naive(rf.center_index, rf.neighbor_indices, rf.directions, feats,
                              kernel.center_weight, kernel.directions, kernel.weights)
        assert sc.conv_dir(rf, feats, kernel) == pytest.approx(want, abs=1e-12)
        dk = sc.DistanceKernel(rng.standard_normal(4), float(rng.standard_normal()))
        want = conv_dist_naive(rf.distances, rf.valid_count, dk.support_weights, dk.center_weight)
        assert sc.conv_dist(rf, dk) == pytest.approx(want, abs=1e-12)


# --- whole layer -----------------------------------------------------------

@pytest.mark.parametrize("mode", ["str", "dir", "sum"])
def test_layer_matches_naive(mode):
    rng = np.random.default_rng(2)
    c, fields = random_fields(rng, n=30)
    feats = rng.standard_normal((30, 5))
    j = 6
    layer = sc.init_layer(j, 3, 5, j if mode == "sum" else 7, seed=3, mode=mode)
    if mode != "sum":
        layer.mlp_b1 = rng.standard_normal(layer.mlp_b1.shape)
        layer.mlp_b2 = rng.standard_normal(layer.mlp_b2.shape)
    got = sc.str_conv_layer(c, feats, fields, layer)
    want = str_conv_naive(feats, fields.neighbor_indices, fields.directions, fields.distances,
                          fields.valid_count, layer_dict(layer))
    assert np.allclose(got, want, atol=1e-10, rtol=0)


def test_layer_identity_mlp_exposes_kernel_outputs():
    rng = np.random.default_rng(4)
    c, fields = random_fields(rng, n=10)
    feats = rng.standard_normal((10, 2))
    layer = sc.init_layer(1, 2, 2, 2, seed=0)
    layer.mlp_w1, layer.mlp_b1 = np.eye(2), np.zeros(2)
    layer.mlp_w2, layer.mlp_b2 = np.eye(2), np.zeros(2)
    layer.hidden_activation = "identity"
    out = sc.str_conv_layer(c, feats, fields, layer)
    for n, rf in enumerate(fields):
        assert out[n, 0] == pytest.approx(sc.conv_dir(rf, feats, layer.dir_kernels[0]), abs=1e-12)
        assert out[n, 1] == pytest.approx(sc.conv_dist(rf, layer.dist_kernels[0]), abs=1e-12)


def test_layer_is_storage_equivariant():
    rng = np.random.default_rng(5)
    pts = rng.standard_normal((25, 3))
    feats = rng.standard_normal((25, 3))
    layer = sc.init_layer(4, 2, 3, 5, seed=1)
    c = PointCloud(pts)
    out = sc.str_conv_layer(c, feats, receptive_fields(c, build_index(c), 6, 10), layer)
    perm = rng.permutation(25)
    cp = PointCloud(pts[perm])
    outp = sc.str_conv_layer(cp, feats[perm], receptive_fields(cp, build_index(cp), 6, 10), layer)
    assert np.allclose(outp, out[perm], atol=1e-12, rtol=0)


def test_layer_shape_errors():
    rng = np.random.default_rng(6)
    c, fields = random_fields(rng, n=8)
    layer = sc.init_layer(2, 2, 3, 4, seed=0)
    with pytest.raises(DimensionMismatch):
        sc.str_conv_layer(c, np.ones((8, 2)), fields, layer)
    with pytest.raises(DimensionMismatch):
        sc.str_conv_layer(c, np.ones((7, 3)), fields, layer)
    layer.dist_b = np.zeros(3)
    with pytest.raises(DimensionMismatch):
        layer.check()


# --- pooling ---------------------------------------------------------------

def test_pool_rate_one_keeps_everything():
    rng = np.random.default_rng(7)
    c, fields = random_fields(rng, n=20)
    feats = rng.standard_normal((20, 3))
    sub, pooled, keep = sc.graph_max_pool(c, feats, fields, sc.PoolConfig(rate=1))
    assert keep.tolist() == list(range(20)) and sub == c
    assert np.all(pooled >= feats)


def test_pool_hand_example():
    # four points on a line; fields of size 1 pick the nearest neighbour
    c = PointCloud([[0, 0, 0], [1, 0, 0], [3, 0, 0], [7, 0, 0]])
    fields = receptive_fields(c, build_index(c), 1, 2)
    feats = np.arange(4.0)[:, None]
    _, pooled, _ = sc.graph_max_pool(c, feats, fields, sc.PoolConfig(rate=1))
    assert pooled[:, 0].tolist() == [1, 1, 2, 3]


def test_pool_count_and_determinism():
    rng = np.random.default_rng(8)
    c, fields = random_fields(rng, n=1000)
    feats = rng.standard_normal((1000, 2))
    _, p1, k1 = sc.graph_max_pool(c, feats, fields, sc.PoolConfig(4, seed=3))
    _, p2, k2 = sc.graph_max_pool(c, feats, fields, sc.PoolConfig(4, seed=3))
    assert len(k1) == 250 and np.array_equal(k1, k2) and np.array_equal(p1, p2)
    assert np.all(np.diff(k1) > 0)
    with pytest.raises(InvalidParam):
        sc.PoolConfig(rate=0)


def test_global_max():
    row = np.array([[1.0, -2.0]])
    assert sc.global_max_aggregate(row).tolist() == [1.0, -2.0]
    m = np.random.default_rng(9).standard_normal((30, 5))
    want = [max(m[i, j] for i in range(30)) for j in range(5)]
    assert sc.global_max_aggregate(m).tolist() == want
    assert np.array_equal(sc.global_max_aggregate(m[::-1]), sc.global_max_aggregate(m))


# --- initialisation --------------------------------------------------------

def test_init_layer_bounds_and_determinism():
    a = sc.init_layer(8, 4, 5, 6, seed=11)
    b = sc.init_layer(8, 4, 5, 6, seed=11)
    for k, v in layer_dict(a).items():
        if k != "mode":
            assert np.array_equal(v, getattr(b, k))
    assert np.allclose(np.linalg.norm(a.support_dirs, axis=-1), 1.0, atol=1e-12, rtol=0)
    assert np.abs(a.center_w).max() <= sc.glorot_bound(5, 1)
    assert np.abs(a.support_w).max() <= sc.glorot_bound(5, 1)
    assert np.abs(a.dist_w).max() <= sc.glorot_bound(4, 1)
    assert np.abs(a.mlp_w1).max() <= sc.glorot_bound(16, 16)
    assert np.abs(a.mlp_w2).max() <= sc.glorot_bound(16, 6)
    assert not np.any(a.mlp_b1) and not np.any(a.mlp_b2)


def test_init_layer_rejects():
    with pytest.raises(InvalidParam):
        sc.init_layer(0, 4, 1, 1, seed=0)
    with pytest.raises(InvalidParam):
        sc.init_layer(4, 4, 1, 5, seed=0, mode="sum")


def test_batch_field_access():
    rng = np.random.default_rng(10)
    c, fields = random_fields(rng, n=9)
    assert isinstance(fields, FieldBatch) and len(fields) == 9
    assert fields.valid_mask().sum() == fields.valid_count.sum()
