import numpy as np
import pytest

from servokit.errors import DimensionMismatch, SchemaMismatch, ZeroConfidence
from servokit.matching import (
    ConfidenceMap,
    PatchFeatureMap,
    ScoreMatrix,
    bspline_kernel,
    dual_softmax_confidence,
    expected_match,
    gravity_centers,
    grid_coords,
    particles_to_grid,
    quadratic_bspline,
    read_probmatch,
    read_score_matrix,
    score_matrix,
    write_probmatch,
    write_score_matrix,
)
from servokit.selftest import p2g_reference, shifted_delta_scores


def uniform_scores(h, w):
    n = h * w
    return ScoreMatrix(np.full((n, n), 1.0 / n), (h, w), (h, w))


def random_scores(rng, h, w):
    raw = rng.uniform(0.0, 1.0, size=(h * w, h * w))
    raw /= raw.sum(axis=1, keepdims=True)
    return ScoreMatrix(raw, (h, w), (h, w))


class TestScoreMatrix:
    def test_diagonal_dominance_on_orthogonal_features(self):
        feats = 4.0 * np.eye(4)
        fmap = PatchFeatureMap(2, 2, feats)
        s = score_matrix(fmap, fmap).values
        for i in range(4):
            off = np.delete(s[i], i)
            assert s[i, i] > off.max()

    def test_equal_features_give_uniform_rows(self):
        fmap = PatchFeatureMap(2, 3, np.ones((6, 5)))
        s = score_matrix(fmap, fmap).values
        assert np.allclose(s, 1.0 / 6.0)

    def test_rows_stochastic(self):
        rng = np.random.default_rng(0)
        fa = PatchFeatureMap(3, 3, rng.normal(size=(9, 16)))
        fb = PatchFeatureMap(3, 3, rng.normal(size=(9, 16)))
        s = score_matrix(fa, fb).values
        assert np.max(np.abs(s.sum(axis=1) - 1.0)) < 1e-6
        assert np.all(s >= 0)

    def test_feature_dim_mismatch(self):
        with pytest.raises(DimensionMismatch):
            score_matrix(PatchFeatureMap(2, 2, np.ones((4, 3))),
                         PatchFeatureMap(2, 2, np.ones((4, 4))))

    def test_row_sum_validated(self):
        with pytest.raises(ValueError):
            ScoreMatrix(np.ones((4, 4)), (2, 2), (2, 2))


class TestExpectedMatch:
    def test_one_hot(self):
        n = 9
        values = np.zeros((n, n))
        values[:, 4] = 1.0
        em = expected_match(ScoreMatrix(values, (3, 3), (3, 3)))
        assert np.allclose(em.matched, grid_coords(3, 3)[4])

    def test_uniform_gives_centroid(self):
        em = expected_match(uniform_scores(4, 6))
        assert np.allclose(em.matched, [(6 - 1) / 2.0, (4 - 1) / 2.0])

    def test_bimodal_average_bias(self):
        # Half the mass two patches left of the true mode, half two right:
        # the reduction lands between the modes, away from both.
        h, w = 1, 8
        values = np.zeros((8, 8))
        values[:, 0] = 0.5
        values[:, 4] = 0.5
        em = expected_match(ScoreMatrix(values, (h, w), (h, w)))
        assert np.allclose(em.matched[:, 0], 2.0)
        assert np.allclose(em.matched[:, 1], 0.0)

    def test_convex_hull(self):
        rng = np.random.default_rng(1)
        em = expected_match(random_scores(rng, 4, 5))
        assert np.all(em.matched[:, 0] >= 0) and np.all(em.matched[:, 0] <= 4)
        assert np.all(em.matched[:, 1] >= 0) and np.all(em.matched[:, 1] <= 3)

    def test_flow_view(self):
        em = expected_match(uniform_scores(3, 3))
        assert np.allclose(em.flow, em.matched - em.source)


class TestDualSoftmax:
    def test_mutual_one_hot(self):
        n = 6
        perm = np.random.default_rng(2).permutation(n)
        fwd = np.zeros((n, n))
        fwd[np.arange(n), perm] = 1.0
        bwd = np.zeros((n, n))
        bwd[perm, np.arange(n)] = 1.0
        conf = dual_softmax_confidence(ScoreMatrix(fwd, (2, 3), (2, 3)),
                                       ScoreMatrix(bwd, (2, 3), (2, 3)))
        assert np.allclose(conf.values, 1.0)

    def test_uniform_both(self):
        conf = dual_softmax_confidence(uniform_scores(2, 3), uniform_scores(2, 3))
        assert np.allclose(conf.values, 1.0 / 6.0)

    def test_one_hot_forward_uniform_reverse(self):
        n = 6
        fwd = np.zeros((n, n))
        fwd[:, 2] = 1.0
        conf = dual_softmax_confidence(ScoreMatrix(fwd, (2, 3), (2, 3)),
                                       uniform_scores(2, 3))
        assert np.allclose(conf.values, 1.0 / 6.0)

    def test_bounded_by_row_maxima(self):
        rng = np.random.default_rng(3)
        s_cd = random_scores(rng, 3, 3)
        s_dc = random_scores(rng, 3, 3)
        conf = dual_softmax_confidence(s_cd, s_dc)
        bound = np.minimum(s_cd.values.max(axis=1), s_dc.values.T.max(axis=1))
        assert np.all(conf.values <= bound + 1e-12)
        assert np.all(conf.values <= 1.0)

    def test_shape_mismatch(self):
        with pytest.raises(DimensionMismatch):
            dual_softmax_confidence(uniform_scores(2, 3), uniform_scores(3, 3))


class TestGravityCenters:
    def test_uniform_zero_flow(self):
        conf = ConfidenceMap(np.ones(9), (3, 3))
        em = expected_match(ScoreMatrix(np.eye(9), (3, 3), (3, 3)))
        xg_c, xg_d = gravity_centers(conf, em)
        assert np.allclose(xg_c, [1.0, 1.0])
        assert np.allclose(xg_d - xg_c, 0.0)

    def test_constant_flow(self):
        n = 9
        values = np.zeros((n, n))
        # every patch matched two patches to the right (wrapping rows avoided)
        src = grid_coords(3, 3)
        em_matched = src + np.array([2.0, 0.0])
        conf = ConfidenceMap(np.ones(n), (3, 3))
        from servokit.matching import ExpectedMatch
        em = ExpectedMatch(source=src, matched=em_matched)
        xg_c, xg_d = gravity_centers(conf, em)
        assert np.allclose(xg_d - xg_c, [2.0, 0.0])

    def test_concentrated_confidence(self):
        n = 9
        conf_vals = np.zeros(n)
        conf_vals[5] = 0.7
        src = grid_coords(3, 3)
        from servokit.matching import ExpectedMatch
        em = ExpectedMatch(source=src, matched=src + np.array([1.0, -1.0]))
        xg_c, xg_d = gravity_centers(ConfidenceMap(conf_vals, (3, 3)), em)
        assert np.allclose(xg_c, src[5])
        assert np.allclose(xg_d, src[5] + [1.0, -1.0])

    def test_zero_confidence(self):
        em = expected_match(uniform_scores(2, 2))
        with pytest.raises(ZeroConfidence):
            gravity_centers(ConfidenceMap(np.zeros(4), (2, 2)), em)


class TestKernel:
    def test_values(self):
        assert quadratic_bspline(0.0) == 0.75
        assert abs(bspline_kernel(np.array([0.0, 0.0])) - 0.5625) < 1e-15
        assert abs(quadratic_bspline(0.5) - 0.5) < 1e-15  # continuous across pieces
        assert quadratic_bspline(1.5) == 0.0
        assert abs(quadratic_bspline(1.0) - 0.125) < 1e-15

    def test_three_anchor_partition(self):
        # unit-spaced anchors at -1, 0, 1 cover offsets within half a cell
        for f in np.linspace(-0.5, 0.5, 2001):
            total = quadratic_bspline(f - 1.0) + quadratic_bspline(f) + quadratic_bspline(f + 1.0)
            assert abs(total - 1.0) < 1e-12

    def test_lattice_partition_sweep(self):
        rng = np.random.default_rng(4)
        g = 1.7
        anchors = np.arange(-30, 31) * g
        for f in rng.uniform(-20.0, 20.0, size=10000):
            weights = quadratic_bspline((f - anchors) / g)
            assert abs(weights.sum() - 1.0) < 1e-12


class TestParticlesToGrid:
    def test_uniform_scores_constant_anchors(self):
        s = uniform_scores(6, 6)
        tensor = particles_to_grid(s, 5)
        vals = tensor.values
        nonzero = vals[vals > 0]
        assert np.allclose(nonzero, 1.0 / 36.0, atol=1e-12)

    def test_matches_bruteforce_gather(self):
        rng = np.random.default_rng(5)
        s = random_scores(rng, 8, 8)
        fast = particles_to_grid(s, 5).values
        slow = p2g_reference(s, 5)
        assert np.max(np.abs(fast - slow)) < 1e-12

    def test_one_hot_on_anchor(self):
        # mass exactly on an anchor: the value is the peak kernel weight over
        # the kernel-weight total of every in-radius particle, gathered by a
        # direct loop
        h = w = 8
        n = h * w
        k = 5
        values = np.full((n, n), 0.0)
        # patch (3, 3) one-hot matched to itself: displacement (0, 0) sits on
        # the middle anchor of the odd grid
        values[3 * w + 3, 3 * w + 3] = 1.0
        # other rows uniform to keep the matrix stochastic
        for i in range(n):
            if i != 3 * w + 3:
                values[i] = 1.0 / n
        s = ScoreMatrix(values, (h, w), (h, w))
        tensor = particles_to_grid(s, k)
        reference = p2g_reference(s, k)
        assert np.max(np.abs(tensor.values - reference)) < 1e-12
        gx = 2.0 * w / k
        coords = grid_coords(h, w)
        disp = coords - coords[3 * w + 3]
        weights = (quadratic_bspline(disp[:, 0] / gx)
                   * quadratic_bspline(disp[:, 1] / gx))
        expected = 0.5625 * 1.0 / weights.sum()
        middle = (k // 2) * k + (k // 2)
        assert abs(tensor.values[3, 3, middle] - expected) < 1e-12

    def test_channel_size_resolution_agnostic(self):
        for h, w in ((8, 8), (12, 12)):
            tensor = particles_to_grid(uniform_scores(h, w), 7)
            assert tensor.values.shape == (h, w, 49)

    def test_translation_equivariance_exact(self):
        base, moved = shifted_delta_scores(16, 16, (1, 1))
        p0 = particles_to_grid(base, 32).values
        p1 = particles_to_grid(moved, 32).values
        assert np.max(np.abs(p0[4:11, 4:11] - p1[5:12, 5:12])) < 1e-12

    def test_range_preservation(self):
        rng = np.random.default_rng(6)
        s = random_scores(rng, 6, 6)
        vals = particles_to_grid(s, 6).values
        lo, hi = s.values.min(), s.values.max()
        nonzero = vals[np.abs(vals) > 0]
        assert np.all(nonzero >= lo - 1e-12)
        assert np.all(nonzero <= hi + 1e-12)

    def test_requires_square_setup(self):
        rng = np.random.default_rng(7)
        raw = rng.uniform(size=(4, 6))
        raw /= raw.sum(axis=1, keepdims=True)
        s = ScoreMatrix(raw, (2, 2), (2, 3))
        with pytest.raises(DimensionMismatch):
            particles_to_grid(s, 4)
        with pytest.raises(ValueError):
            particles_to_grid(uniform_scores(2, 2), 1)


class TestSerialization:
    def test_score_roundtrip(self, tmp_path):
        rng = np.random.default_rng(8)
        s = random_scores(rng, 4, 4)
        path = tmp_path / "scores.bin"
        write_score_matrix(path, s)
        back = read_score_matrix(path)
        assert back.source_shape == s.source_shape
        assert np.max(np.abs(back.values - s.values)) < 1e-6  # float32 storage

    def test_probmatch_roundtrip(self, tmp_path):
        rng = np.random.default_rng(9)
        tensor = particles_to_grid(random_scores(rng, 6, 6), 5)
        path = tmp_path / "p2g.bin"
        write_probmatch(path, tensor)
        back = read_probmatch(path)
        assert back.anchors_per_axis == 5
        assert back.values.shape == tensor.values.shape
        assert np.max(np.abs(back.values - tensor.values)) < 1e-6

    def test_kind_mismatch(self, tmp_path):
        rng = np.random.default_rng(10)
        s = random_scores(rng, 4, 4)
        path = tmp_path / "scores.bin"
        write_score_matrix(path, s)
        with pytest.raises(SchemaMismatch):
            read_probmatch(path)

    def test_truncated_file(self, tmp_path):
        path = tmp_path / "bad.bin"
        path.write_bytes(b"XX")
        with pytest.raises(SchemaMismatch):
            read_score_matrix(path)
