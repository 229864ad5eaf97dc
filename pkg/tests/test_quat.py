from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from quatfuse import numcore as nc
from quatfuse import quat as Q
from quatfuse.numcore import ShapeError, Tensor

finite = st.floats(-10, 10, allow_nan=False)
quats = st.builds(Q.Quaternion, finite, finite, finite, finite)


def close(p, q, tol):
    return np.abs(p.as_array() - q.as_array()).max() <= tol


def layer_from(ws, bias=None):
    return Q.QuaternionLinear(*(Tensor(np.asarray(w, dtype=float).reshape(1, 1)
                                       if np.ndim(w) == 0 else w) for w in ws), bias=bias)


class TestHamilton:
    def test_basis_relations(self):
        assert Q.I * Q.J == Q.K
        assert Q.J * Q.I == -Q.K
        assert Q.J * Q.K == Q.I and Q.K * Q.I == Q.J
        for u in (Q.I, Q.J, Q.K):
            assert u * u == -Q.ONE
        assert Q.I * Q.J * Q.K == -Q.ONE

    def test_identity(self):
        q = Q.Quaternion(0.3, -1.2, 2.5, 0.7)
        assert Q.ONE * q == q and q * Q.ONE == q

    @settings(max_examples=100)
    @given(quats, quats)
    def test_matrix_form_oracle(self, p, q):
        via_matrix = Q.matrix_form(p).data @ q.as_array()
        assert np.abs(Q.hamilton(p, q).as_array() - via_matrix).max() < 1e-14 * max(
            1.0, p.norm() * q.norm())

    @settings(max_examples=100)
    @given(quats, quats)
    def test_norm_multiplicative(self, p, q):
        scale = max(1.0, p.norm() * q.norm())
        assert abs((p * q).norm() - p.norm() * q.norm()) < 1e-10 * scale

    @settings(max_examples=100)
    @given(quats, quats, quats)
    def test_associative(self, p, q, r):
        scale = max(1.0, p.norm() * q.norm() * r.norm())
        assert close((p * q) * r, p * (q * r), 1e-10 * scale)

    def test_normalize(self):
        q = Q.Quaternion(3.0, -4.0, 12.0, 0.5).normalize()
        assert abs(q.norm() - 1.0) < 1e-12
        with pytest.raises(ZeroDivisionError):
            Q.Quaternion(0.0).normalize()


class TestMatrixForm:
    def test_one_is_identity(self):
        np.testing.assert_array_equal(Q.matrix_form(Q.ONE).data, np.eye(4))

    def test_i_pattern(self):
        expected = np.array([[0, -1, 0, 0], [1, 0, 0, 0], [0, 0, 0, -1], [0, 0, 1, 0]], float)
        np.testing.assert_array_equal(Q.matrix_form(Q.I).data, expected)

    @settings(max_examples=50)
    @given(quats)
    def test_determinant(self, q):
        det = np.linalg.det(Q.matrix_form(q).data)
        assert abs(det - q.norm() ** 4) <= 1e-10 * max(1.0, q.norm() ** 4)


class TestQuaternionLinear:
    def test_identity_weights(self):
        layer = layer_from([1.0, 0.0, 0.0, 0.0])
        x = Q.QuaternionTensor(Tensor(np.random.default_rng(0).normal(size=(4, 1, 3, 2))))
        np.testing.assert_array_equal(layer(x).inner.data, x.inner.data)

    @settings(max_examples=50)
    @given(quats, quats)
    def test_scalar_hamilton_oracle(self, w, v):
        layer = layer_from(w.as_array())
        x = Q.QuaternionTensor(Tensor(v.as_array().reshape(4, 1, 1, 1)))
        out = layer(x).inner.data.reshape(4)
        assert np.abs(out - (w * v).as_array()).max() < 1e-14 * max(1.0, w.norm() * v.norm())

    def test_matrix_equivalence_every_pixel(self):
        rng = np.random.default_rng(1)
        w = Q.Quaternion(*rng.normal(size=4))
        x = rng.normal(size=(4, 1, 5, 6))
        out = layer_from(w.as_array())(Q.QuaternionTensor(Tensor(x))).inner.data
        ref = np.einsum("ab,bchw->achw", Q.matrix_form(w).data, x)
        assert np.abs(out - ref).max() < 1e-12

    def test_component_formulas(self):
        rng = np.random.default_rng(2)
        layer = Q.suprasphere_init(3, 2, seed=5, bias=False)
        x = rng.normal(size=(4, 3, 2, 2))
        out = layer(Q.QuaternionTensor(Tensor(x))).inner.data
        Wr, Wi, Wj, Wk = (layer.wr.data, layer.wi.data, layer.wj.data, layer.wk.data)
        m = lambda W, k: np.einsum("oc,chw->ohw", W, x[k])  # noqa: E731
        ref = np.stack([
            m(Wr, 0) - m(Wi, 1) - m(Wj, 2) - m(Wk, 3),
            m(Wr, 1) + m(Wi, 0) + m(Wj, 3) - m(Wk, 2),
            m(Wr, 2) - m(Wi, 3) + m(Wj, 0) + m(Wk, 1),
            m(Wr, 3) + m(Wi, 2) - m(Wj, 1) + m(Wk, 0),
        ])
        assert np.abs(out - ref).max() < 1e-12

    def test_bias_added_per_component(self):
        layer = Q.suprasphere_init(2, 3, seed=1)
        layer.bias.data[...] = np.arange(12.0).reshape(4, 3)
        out = layer(Q.QuaternionTensor(Tensor(np.zeros((4, 2, 1, 1))))).inner.data
        np.testing.assert_array_equal(out[..., 0, 0], np.arange(12.0).reshape(4, 3))

    def test_eight_channels_count(self):
        layer = Q.suprasphere_init(8, 8, seed=0, bias=False)
        assert layer.param_count() == 256
        assert Q.dense_equivalent_weight_count(8, 8) == 1024

    @settings(max_examples=50)
    @given(st.integers(1, 64), st.integers(1, 64))
    def test_ratio_exactly_quarter(self, c_in, c_out):
        layer = Q.suprasphere_init(c_in, c_out, seed=0)
        assert layer.weight_count() / Q.dense_equivalent_weight_count(c_in, c_out) == 0.25
        assert Q.param_ratio(c_in, c_out) == Fraction(1, 4)
        assert layer.param_count() == 4 * c_in * c_out + 4 * c_out

    def test_shape_mismatch(self):
        layer = Q.suprasphere_init(3, 2, seed=0)
        with pytest.raises(ShapeError):
            layer(Q.QuaternionTensor(Tensor(np.zeros((4, 2, 2, 2)))))
        with pytest.raises(ShapeError):
            Q.QuaternionTensor(Tensor(np.zeros((3, 2, 2, 2))))

    def test_real_and_i_inputs_reach_j(self):
        layer = Q.suprasphere_init(4, 4, seed=3, bias=False)
        x = np.zeros((4, 4, 2, 2))
        x[:2] = np.random.default_rng(3).normal(size=(2, 4, 2, 2))
        out = layer(Q.QuaternionTensor(Tensor(x))).inner.data
        assert np.abs(out[2]).max() > 0

    @pytest.mark.parametrize("seed", range(3))
    def test_gradients(self, seed):
        rng = np.random.default_rng(seed)
        layer = Q.suprasphere_init(3, 2, seed=seed)
        layer.bias.data[...] = rng.normal(size=(4, 2))
        x = rng.normal(size=(4, 3, 3, 3))

        def f(t):
            return nc.sum_(nc.square(Q.split_activation(layer(Q.QuaternionTensor(t)),
                                                        "sigmoid").inner))
        assert nc.finite_diff_check(f, Tensor(x)) < 1e-6
        wr = layer.wr

        def g(t):
            layer.wr = t
            try:
                return nc.sum_(Q.split_activation(layer(Q.QuaternionTensor(Tensor(x))),
                                                  "relu").inner)
            finally:
                layer.wr = wr
        assert nc.finite_diff_check(g, Tensor(wr.data)) < 1e-6


class TestSplitActivation:
    def test_identity(self):
        x = Q.QuaternionTensor(Tensor(np.random.default_rng(0).normal(size=(4, 2, 2, 2))))
        np.testing.assert_array_equal(Q.split_activation(x, "identity").inner.data,
                                      x.inner.data)

    def test_relu_per_element(self):
        x = Q.QuaternionTensor(Tensor(np.array([-1.0, 2.0, -3.0, 4.0]).reshape(4, 1, 1, 1)))
        np.testing.assert_array_equal(Q.split_activation(x, "relu").inner.data.reshape(4),
                                      [0.0, 2.0, 0.0, 4.0])

    @pytest.mark.parametrize("f", ["relu", "sigmoid", "identity"])
    def test_componentwise_oracle(self, f):
        x = Q.QuaternionTensor(Tensor(np.random.default_rng(1).normal(size=(4, 3, 2, 2))))
        fn = {"relu": nc.relu, "sigmoid": nc.sigmoid, "identity": lambda t: t}[f]
        ref = np.stack([fn(x.component_view(k)).data for k in range(4)])
        np.testing.assert_array_equal(Q.split_activation(x, f).inner.data, ref)

    def test_component_views(self):
        data = np.random.default_rng(2).normal(size=(4, 2, 3, 3))
        x = Q.QuaternionTensor(Tensor(data))
        for k, view in enumerate((x.r, x.i, x.j, x.k)):
            np.testing.assert_array_equal(view.data, data[k])


class TestSuprasphere:
    def test_directions_unit(self):
        u = Q.sphere_directions(np.random.default_rng(0), (50, 40))
        assert np.abs(np.linalg.norm(u, axis=-1) - 1.0).max() < 1e-12

    def test_deterministic(self):
        a, b = Q.suprasphere_init(5, 3, seed=11), Q.suprasphere_init(5, 3, seed=11)
        for k in ("wr", "wi", "wj", "wk", "bias"):
            assert a.parameters()[k].data.tobytes() == b.parameters()[k].data.tobytes()
        c = Q.suprasphere_init(5, 3, seed=12)
        assert not np.array_equal(a.wr.data, c.wr.data)

    def test_magnitude_bound(self):
        c_in = 8
        layer = Q.suprasphere_init(c_in, 16, seed=4)
        w = np.stack([layer.wr.data, layer.wi.data, layer.wj.data, layer.wk.data], -1)
        assert np.linalg.norm(w, axis=-1).max() <= 1.0 / np.sqrt(2 * c_in) + 1e-15

    def test_monte_carlo_means(self):
        u = Q.sphere_directions(np.random.default_rng(7), (10_000,))
        mean = u.mean(axis=0)
        stderr = u.std(axis=0, ddof=1) / np.sqrt(len(u))
        assert np.all(np.abs(mean) < 3 * stderr)
        # uniform on S^3 puts a quarter of the squared norm on each axis
        np.testing.assert_allclose((u ** 2).mean(axis=0), 0.25, atol=0.01)

    def test_rejects_empty(self):
        with pytest.raises(ShapeError):
            Q.suprasphere_init(0, 3, seed=0)


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        layer = Q.suprasphere_init(3, 5, seed=9)
        layer.bias.data[...] = np.random.default_rng(9).normal(size=(4, 5))
        Q.save_qlinear(tmp_path / "q.bin", layer, "mixer")
        name, back = Q.load_qlinear(tmp_path / "q.bin")
        assert name == "mixer"
        for k, t in layer.parameters().items():
            assert back.parameters()[k].data.tobytes() == t.data.tobytes()

    def test_header_first(self, tmp_path):
        Q.save_qlinear(tmp_path / "q.bin", Q.suprasphere_init(2, 2, seed=0, bias=False), "m")
        raw = (tmp_path / "q.bin").read_bytes()
        assert raw.startswith(b"qlinear m 2 2 0\n")
        assert raw[len(b"qlinear m 2 2 0\n"):][:4] == b"QFT1"

    def test_rejects_other_files(self, tmp_path):
        (tmp_path / "x.bin").write_bytes(b"hello\n")
        with pytest.raises(ValueError):
            Q.load_qlinear(tmp_path / "x.bin")
