import numpy as np
import pytest

from pcacgan import sparse
from pcacgan.errors import EmptyCloud, ShapeMismatch, StrideMismatch
from pcacgan.pointcloud import PointCloud
from pcacgan.selftest import adjoint_case, conv_oracle_case, random_tensor, transposed_oracle_case
from pcacgan.sparse import ConvSpec, SparseTensor


class TestKeys:
    def test_key_order_is_lexicographic(self):
        rng = np.random.default_rng(0)
        c = rng.integers(-50, 50, size=(500, 3))
        order_keys = np.argsort(sparse.coord_keys(c), kind="stable")
        order_lex = np.lexsort(c.T[::-1])
        np.testing.assert_array_equal(c[order_keys], c[order_lex])

    def test_round_trip(self):
        c = np.array([[0, 0, 0], [-3, 7, 1 << 16], [5, -1, -9]])
        np.testing.assert_array_equal(sparse.keys_to_coords(sparse.coord_keys(c)), c)

    def test_kernel_offsets_layout(self):
        offs = sparse.kernel_offsets(3)
        assert offs.shape == (27, 3)
        np.testing.assert_array_equal(offs[0], [-1, -1, -1])
        np.testing.assert_array_equal(offs[1], [0, -1, -1])  # dx varies fastest
        np.testing.assert_array_equal(offs[13], [0, 0, 0])


class TestSparseTensor:
    def test_canonical_order(self):
        t = SparseTensor([[2, 0, 0], [0, 1, 0], [0, 0, 5]], [[1.0], [2.0], [3.0]])
        np.testing.assert_array_equal(t.coords, [[0, 0, 5], [0, 1, 0], [2, 0, 0]])
        np.testing.assert_array_equal(t.feats[:, 0], [3.0, 2.0, 1.0])

    def test_rejects_bad_stride_and_duplicates(self):
        with pytest.raises(StrideMismatch):
            SparseTensor([[1, 0, 0]], [[1.0]], stride=2)
        with pytest.raises(StrideMismatch):
            SparseTensor([[0, 0, 0]], [[1.0]], stride=3)
        with pytest.raises(ValueError):
            SparseTensor([[0, 0, 0], [0, 0, 0]], [[1.0], [2.0]])
        with pytest.raises(ShapeMismatch):
            SparseTensor([[0, 0, 0]], [[1.0], [2.0]])

    def test_lookup(self):
        t = SparseTensor([[0, 0, 0], [1, 2, 3]], [[1.0], [2.0]])
        np.testing.assert_array_equal(t.lookup([[1, 2, 3], [9, 9, 9]]), [1, -1])

    def test_point_cloud_bridge(self):
        pc = PointCloud([[3, 3, 3], [1, 1, 1]], [[255, 0, 51], [0, 128, 255]])
        t = sparse.from_point_cloud(pc)
        np.testing.assert_allclose(t.feats[0], [0, 128 / 255, 1])
        back = sparse.to_point_cloud(t)
        np.testing.assert_allclose(back.colors, pc.sorted().colors)
        with pytest.raises(EmptyCloud):
            sparse.from_point_cloud(PointCloud(np.zeros((0, 3)), np.zeros((0, 3))))

    def test_prune(self):
        t = SparseTensor([[0, 0, 0], [1, 0, 0], [2, 0, 0]], [[1.0], [2.0], [3.0]])
        p = sparse.prune(t, [[2, 0, 0], [0, 0, 0], [7, 7, 7]])
        np.testing.assert_array_equal(p.feats[:, 0], [1.0, 3.0])


class TestKernelMap:
    @pytest.mark.parametrize("k,stride", [(3, 1), (3, 2), (5, 2), (9, 2), (1, 1)])
    def test_matches_brute_force(self, k, stride):
        rng = np.random.default_rng(k * 10 + stride)
        x = random_tensor(rng, 10, 1, 1, density=0.1)
        spec = ConvSpec(k, stride)
        out, out_stride = sparse.conv_output_coords(x, spec)
        kmap = sparse.build_kernel_map(x, out, spec, out_stride)
        assert kmap.triples() == sparse.brute_force_kernel_map(x, out, spec, out_stride)

    def test_transposed_matches_brute_force(self):
        rng = np.random.default_rng(5)
        coarse = random_tensor(rng, 12, 2, 1, density=0.3)
        fine = sparse.child_coords(coarse.coords, 2)
        spec = ConvSpec(5, 2, transposed=True)
        kmap = sparse.build_kernel_map(coarse, fine, spec, 1)
        assert kmap.triples() == sparse.brute_force_kernel_map(coarse, fine, spec, 1)

    def test_conv_and_transpose_share_triples(self):
        rng = np.random.default_rng(6)
        fine = random_tensor(rng, 12, 1, 1, density=0.1)
        coarse_coords = sparse.downsample_coords(fine.coords, 2)
        coarse = SparseTensor(coarse_coords, np.zeros((len(coarse_coords), 1)), 2)
        down = sparse.build_kernel_map(fine, coarse_coords, ConvSpec(3, 2))
        up = sparse.build_kernel_map(coarse, fine.coords, ConvSpec(3, 2, transposed=True), 1)
        assert down.triples() == {(d, o, i) for d, i, o in up.triples()}

    def test_stride_mismatch(self):
        x = SparseTensor([[0, 0, 0]], [[1.0]], 1)
        with pytest.raises(StrideMismatch):
            sparse.build_kernel_map(x, [[0, 0, 0]], ConvSpec(3, 2), out_stride=4)
        with pytest.raises(StrideMismatch):
            sparse.build_kernel_map(x, [[0, 0, 0]], ConvSpec(3, 2, transposed=True))

    def test_empty_sets(self):
        x = SparseTensor(np.zeros((0, 3)), np.zeros((0, 2)), 1)
        kmap = sparse.build_kernel_map(x, np.zeros((0, 3)), ConvSpec(3, 1))
        assert len(kmap) == 0
        out = sparse.apply_kernel_map(np.zeros((0, 2)), np.ones((27, 2, 4)), kmap)
        assert out.shape == (0, 4)


class TestConvolution:
    def test_single_point_identity_kernel(self):
        x = SparseTensor([[4, 4, 4]], [[2.0, -1.0]])
        spec = ConvSpec(3, 1, 2, 2)
        w = np.zeros(spec.weight_shape)
        w[13] = np.eye(2)
        out = sparse.sparse_conv(x, w, np.array([0.5, 0.5]), spec)
        np.testing.assert_allclose(out.feats, [[2.5, -0.5]])

    def test_stride_two_output_coords(self):
        x = SparseTensor([[1, 3, 5], [0, 2, 4], [7, 7, 7]], np.ones((3, 1)))
        out = sparse.sparse_conv(x, np.ones((27, 1, 1)), None, ConvSpec(3, 2))
        np.testing.assert_array_equal(out.coords, [[0, 2, 4], [6, 6, 6]])
        assert out.stride == 2

    @pytest.mark.parametrize("seed", range(12))
    def test_against_dense_oracle(self, seed):
        err, _ = conv_oracle_case(np.random.default_rng(seed))
        assert err <= 1e-10

    @pytest.mark.parametrize("seed", range(6))
    def test_transposed_against_dense_oracle(self, seed):
        err, _ = transposed_oracle_case(np.random.default_rng(100 + seed))
        assert err <= 1e-10

    @pytest.mark.parametrize("seed", range(6))
    def test_adjoint(self, seed):
        assert adjoint_case(np.random.default_rng(200 + seed)) <= 1e-10

    def test_shape_checks(self):
        x = SparseTensor([[0, 0, 0]], [[1.0, 2.0]])
        with pytest.raises(ShapeMismatch):
            sparse.sparse_conv(x, np.ones((27, 3, 1)), None, ConvSpec(3, 1, 3, 1))
        with pytest.raises(ShapeMismatch):
            sparse.sparse_conv(x, np.ones((27, 2, 2)), None, ConvSpec(3, 1, 2, 1))

    def test_invalid_spec(self):
        with pytest.raises(ValueError):
            ConvSpec(4)
        with pytest.raises(ValueError):
            ConvSpec(3, 3)

    def test_weight_grad_matches_finite_difference(self):
        rng = np.random.default_rng(9)
        x = random_tensor(rng, 8, 1, 2, density=0.2)
        spec = ConvSpec(3, 2, 2, 2)
        out, s = sparse.conv_output_coords(x, spec)
        kmap = sparse.build_kernel_map(x, out, spec, s)
        w = rng.standard_normal(spec.weight_shape)
        g = rng.standard_normal((len(out), 2))
        analytic = sparse.kernel_map_weight_grad(x.feats, g, kmap)
        # the conv is linear in w: <conv(w), g> has gradient exactly analytic
        probe = rng.standard_normal(w.shape)
        lhs = np.sum(sparse.apply_kernel_map(x.feats, probe, kmap) * g)
        assert lhs == pytest.approx(np.sum(analytic * probe), rel=1e-12)
