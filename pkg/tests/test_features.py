import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hcpose.features import (DIAGNOSTICS, HogConfig, HopConfig, PartFeatureExtractor,
                             activation_map, build_design_matrix, extract_features,
                             hog_descriptor, hop_features, layer_feature_vector,
                             normalized_laplacian, part_graph_weights, part_hog_features,
                             part_orientation, von_neumann_entropy)
from hcpose.types import ImageRecord, InputError, PartRealization


# ---------------------------------------------------------------------------
# independent oracles

def hop_oracle(positions, W, H, M, B):
    """Per-part bookkeeping with plain Python math."""
    out = [0.0] * (M * M * B)
    for x, y in positions:
        if not (-W / 2 <= x < W / 2 and -H / 2 <= y < H / 2):
            continue
        col = min(int(math.floor((x + W / 2) / (W / M))), M - 1)
        row = M - 1 - min(int(math.floor((y + H / 2) / (H / M))), M - 1)
        ang = math.degrees(math.atan2(y, x)) % 360.0
        b = min(int(ang // (360.0 / B)), B - 1)
        out[(row * M + col) * B + b] += 1
    return np.array(out)


def weights_oracle(positions):
    K = len(positions)
    W = np.zeros((K, K))
    for i in range(K):
        for j in range(K):
            if i == j:
                continue
            a, b = positions[i], positions[j]
            c = (a[0] * b[0] + a[1] * b[1]) / (math.hypot(*a) * math.hypot(*b))
            W[i, j] = math.acos(max(-1.0, min(1.0, c)))
    return W


def jacobi_eigenvalues(A, sweeps=100):
    """Cyclic Jacobi rotations for a small symmetric matrix."""
    A = np.array(A, dtype=float)
    n = A.shape[0]
    for _ in range(sweeps):
        off = np.sqrt(np.sum(A ** 2) - np.sum(np.diag(A) ** 2))
        if off < 1e-15:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                if abs(A[p, q]) < 1e-300:
                    continue
                theta = (A[q, q] - A[p, p]) / (2 * A[p, q])
                t = np.sign(theta) / (abs(theta) + np.sqrt(theta ** 2 + 1)) if theta else 1.0
                c = 1 / np.sqrt(t * t + 1)
                s = t * c
                J = np.eye(n)
                J[p, p] = J[q, q] = c
                J[p, q] = s
                J[q, p] = -s
                A = J.T @ A @ J
    return np.sort(np.diag(A))


# ---------------------------------------------------------------------------
# orientation and HOP

@pytest.mark.parametrize("x,y,deg", [(1, 1, 45.0), (0, 1, 90.0), (-1, -1, 225.0), (1, 0, 0.0),
                                     (1, -1e-300, 0.0)])
def test_part_orientation(x, y, deg):
    assert part_orientation(x, y) == pytest.approx(deg, abs=1e-12)


def test_orientation_at_origin_is_counted():
    before = DIAGNOSTICS["orientation_at_origin"]
    assert part_orientation(0.0, 0.0) == 0.0
    assert DIAGNOSTICS["orientation_at_origin"] == before + 1


def test_hop_single_part_example():
    cfg = HopConfig(M=2, b_size=45.0)
    v = hop_features([(1.0, 1.0)], 64, 64, cfg)
    assert v.shape == (2 * 2 * 8,)
    # upper-right cell is cell 1 in row-major order; 45 degrees opens bin 1
    expected = np.zeros(32)
    expected[(0 * 2 + 1) * 8 + 1] = 1
    np.testing.assert_array_equal(v, expected)


def test_hop_empty():
    assert np.array_equal(hop_features(np.zeros((0, 2)), 64, 64, HopConfig(M=4, b_size=45)),
                          np.zeros(4 * 4 * 8))


def test_hop_random_matches_oracle():
    rng = np.random.default_rng(7)
    pos = rng.uniform(-32, 32, size=(37, 2))
    cfg = HopConfig(M=4, b_size=32.0)
    v = hop_features(pos, 64, 64, cfg)
    assert v.sum() == 37
    np.testing.assert_array_equal(v, hop_oracle(pos, 64, 64, 4, cfg.n_bins))


def test_bin_count_rounding():
    assert HopConfig(b_size=45).n_bins == 8
    assert HopConfig(b_size=16).n_bins == 23
    assert HopConfig(b_size=64).n_bins == 6
    assert HopConfig(M=8, b_size=8).dim == 64 * 45


def test_hop_score_weighting():
    cfg = HopConfig(M=1, b_size=90, weight_by_score=True)
    v = hop_features([(1.0, 1.0), (-1.0, 1.0)], 8, 8, cfg, scores=[0.5, 2.0])
    np.testing.assert_array_equal(v, [0.5, 2.0, 0.0, 0.0])
    with pytest.raises(InputError):
        hop_features([(1.0, 1.0)], 8, 8, cfg)


@settings(max_examples=1000, deadline=None)
@given(st.lists(st.tuples(st.floats(-31.99, 31.99), st.floats(-31.99, 31.99)), max_size=60),
       st.sampled_from([1, 2, 4, 8]), st.sampled_from([8.0, 16.0, 32.0, 45.0, 64.0]))
def test_hop_mass_equals_part_count(pos, M, b):
    v = hop_features(np.array(pos, dtype=float).reshape(-1, 2), 64, 64, HopConfig(M=M, b_size=b))
    assert v.sum() == len(pos)
    assert np.all(v >= 0)


# ---------------------------------------------------------------------------
# HOG

def test_hog_blank_and_dimension():
    cfg = HogConfig(cell_size=8, n_bins=9)
    d = hog_descriptor(np.zeros((64, 64)), cfg)
    assert d.shape == (7 * 7 * 4 * 9,) == (cfg.dim(64, 64),)
    assert not d.any()


def test_hog_too_small():
    with pytest.raises(InputError):
        hog_descriptor(np.zeros((10, 10)), HogConfig(cell_size=8, n_bins=9))


def test_hog_nonnegative_and_normalized():
    rng = np.random.default_rng(3)
    d = hog_descriptor(rng.random((32, 32)), HogConfig(cell_size=8, n_bins=9)).reshape(-1, 36)
    assert np.all(d >= 0)
    np.testing.assert_allclose(np.linalg.norm(d, axis=1), 1.0, rtol=1e-12)
    assert d.max() <= 1.0


def test_hog_vertical_edge_orientation():
    img = np.zeros((32, 32))
    img[:, 16:] = 1.0
    cfg = HogConfig(cell_size=8, n_bins=9)
    hist_bins = hog_descriptor(img, cfg).reshape(3, 3, 4, 9).sum(axis=(0, 1, 2))
    # intensity grows along +x, so the gradient angle is 0: bin 0
    assert hist_bins.argmax() == 0
    assert np.count_nonzero(hist_bins) == 1


def test_hog_single_part_shift():
    W = H = 64
    cfg = HogConfig(cell_size=8, n_bins=9)
    a = part_hog_features([(-4.0, 3.5)], W, H, cfg).reshape(7, 7, 36)
    b = part_hog_features([(-4.0 + 8, 3.5 - 16)], W, H, cfg).reshape(7, 7, 36)
    # one cell right and two cells down: every block moves with the part
    np.testing.assert_allclose(b[2:, 1:], a[:-2, :-1], atol=1e-15)
    np.testing.assert_allclose(np.sort(a.ravel()), np.sort(b.ravel()), atol=1e-15)
    assert a.any()


def test_activation_map_triangle():
    m = activation_map([(0.0, 0.5)], 4, 4)
    # centered (0, 0.5) is pixel (col 2, row 1)
    expected = np.zeros((4, 4))
    k = np.outer([1, 2, 1], [1, 2, 1]) / 16
    expected[0:3, 1:4] = k
    np.testing.assert_allclose(m, expected)


# ---------------------------------------------------------------------------
# part graph and entropy

def test_weight_examples():
    assert part_graph_weights([(1, 0), (0, 1)]).W[0, 1] == pytest.approx(math.pi / 2, abs=1e-15)
    assert part_graph_weights([(1, 0), (2, 0)]).W[0, 1] == 0.0


def test_weights_match_double_loop():
    rng = np.random.default_rng(11)
    pos = rng.normal(size=(5, 2)) * 10
    g = part_graph_weights(pos)
    np.testing.assert_allclose(g.W, weights_oracle(pos.tolist()), atol=1e-12, rtol=0)
    assert np.array_equal(g.W, g.W.T)


def test_parts_at_origin_are_excluded():
    before = DIAGNOSTICS["graph_part_at_origin"]
    g = part_graph_weights([(0.0, 0.0), (1.0, 0.0), (0.0, 2.0)])
    assert g.K == 2 and g.n_excluded == 1
    assert DIAGNOSTICS["graph_part_at_origin"] == before + 1


def test_laplacian_example():
    lap = normalized_laplacian(part_graph_weights([(1, 0), (0, 1)]))
    h = math.pi / 2
    np.testing.assert_allclose(lap, 0.5 * np.array([[h, -h], [-h, h]]), atol=1e-15)


def test_laplacian_spectrum_matches_jacobi():
    rng = np.random.default_rng(5)
    lap = normalized_laplacian(part_graph_weights(rng.normal(size=(6, 2))))
    ours = np.linalg.eigvalsh(lap)
    np.testing.assert_allclose(ours, jacobi_eigenvalues(lap), atol=1e-10)
    assert abs(ours[0]) < 1e-12


def test_entropy_examples():
    assert von_neumann_entropy(part_graph_weights([(1.0, 2.0)])) == 0.0
    assert von_neumann_entropy(part_graph_weights(np.zeros((0, 2)))) == 0.0
    nu = math.pi / 2
    ent = von_neumann_entropy(part_graph_weights([(1, 0), (0, 1)]))
    assert ent == pytest.approx(-nu * math.log2(nu), abs=1e-12)


def test_entropy_rotation_30_degrees():
    rng = np.random.default_rng(2)
    pos = rng.normal(size=(12, 2)) * 20
    t = math.radians(30)
    R = np.array([[math.cos(t), -math.sin(t)], [math.sin(t), math.cos(t)]])
    a = von_neumann_entropy(part_graph_weights(pos))
    b = von_neumann_entropy(part_graph_weights(pos @ R.T))
    assert abs(a - b) < 1e-12


_point = st.tuples(st.floats(-100, 100), st.floats(-100, 100)).filter(
    lambda p: math.hypot(*p) > 1e-3)


@settings(max_examples=1000, deadline=None)
@given(st.lists(_point, min_size=2, max_size=15), st.floats(0, 2 * math.pi),
       st.floats(1e-2, 1e2))
def test_entropy_rotation_scale_invariance(pos, angle, scale):
    p = np.array(pos)
    R = np.array([[math.cos(angle), -math.sin(angle)], [math.sin(angle), math.cos(angle)]])
    base = von_neumann_entropy(part_graph_weights(p))
    assert abs(von_neumann_entropy(part_graph_weights(p @ R.T)) - base) <= 1e-10
    assert abs(von_neumann_entropy(part_graph_weights(scale * p)) - base) <= 1e-10


@settings(max_examples=1000, deadline=None)
@given(st.lists(_point, min_size=2, max_size=15))
def test_laplacian_psd(pos):
    g = part_graph_weights(pos)
    assert np.all((g.W >= 0) & (g.W <= math.pi))
    assert np.all(np.diag(g.W) == 0)
    assert np.linalg.eigvalsh(normalized_laplacian(g)).min() >= -1e-10


# ---------------------------------------------------------------------------
# assembly

def _rec(image_id, parts, pose=0.0, W=32, H=32):
    return ImageRecord(image_id=image_id, object_id="o", category=1, pose=pose,
                       parts=tuple(PartRealization(image_id, l, 0, x, y) for l, x, y in parts),
                       image_width=W, image_height=H)


def test_empty_layer_is_zero():
    r = _rec("a", [(1, 3.0, 4.0), (1, -2.0, 1.0)])
    lf = layer_feature_vector(r, 2, HopConfig(M=2, b_size=45))
    assert not lf.f_hop.any() and not lf.f_hog.any() and lf.f_ent == 0.0
    assert lf.concatenate().size == lf.dim


def test_design_matrix_shape_and_groups():
    rng = np.random.default_rng(0)
    raw = rng.normal(size=(10, 400))
    dm = build_design_matrix(raw, 4)
    assert dm.F.shape == (10, 400)
    assert dm.group_sizes == [100] * 4
    assert dm.group_index[3] == (200, 300)
    np.testing.assert_allclose(dm.F.mean(axis=0), 0, atol=1e-12)
    np.testing.assert_allclose(dm.unstandardize(dm.F), raw, rtol=1e-12, atol=1e-12)
    with pytest.raises(InputError):
        build_design_matrix(rng.normal(size=(10, 401)), 4)


def test_constant_columns_keep_scale_one():
    raw = np.array([[1.0, 2.0], [1.0, 4.0]])
    dm = build_design_matrix(raw, 1)
    assert dm.column_scales[0] == 1.0
    assert np.all(dm.F[:, 0] == 0)


def test_extractor_estimator_api():
    recs = [_rec(f"a{i}", [(1, 3.0 + i, 4.0), (1, -2.0, 1.0 + i), (2, 1.0, 1.0)])
            for i in range(3)]
    ext = PartFeatureExtractor(n_layers=2, grid_cells=2, bin_size=45.0)
    X = ext.fit_transform(recs)
    assert ext.get_params()["grid_cells"] == 2
    assert X.shape == (3, ext.n_features_out_)
    assert ext.group_sizes_ == [X.shape[1] // 2] * 2
    np.testing.assert_array_equal(X, extract_features(recs, 2, HopConfig(M=2, b_size=45.0)))
    with pytest.raises(InputError):
        ext.transform([_rec("b", [(1, 1.0, 1.0)], W=64, H=64)])
