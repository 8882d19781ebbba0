import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from dpreg import autodiff as ad
from gradcases import PIPELINE_CASES, PRIMITIVE_CASES
from conftest import check_grad


@pytest.mark.parametrize("name", sorted(PRIMITIVE_CASES))
@pytest.mark.parametrize("seed", [0, 1, 2])
def test_primitive_gradients(name, seed):
    fn, inputs = PRIMITIVE_CASES[name](np.random.default_rng(seed))
    assert check_grad(fn, inputs) < 1e-4


@pytest.mark.parametrize("name", sorted(PIPELINE_CASES))
def test_pipeline_op_gradients(name):
    fn, inputs = PIPELINE_CASES[name](np.random.default_rng(100))
    assert check_grad(fn, inputs) < 1e-4


class TestTape:
    def test_docstring_example(self):
        tape = ad.Tape()
        x = tape.variable(np.array([1.0, 2.0]))
        np.testing.assert_array_equal(tape.backward(ad.sum_(x * x))[x], [2.0, 4.0])

    def test_non_scalar_loss_rejected(self):
        tape = ad.Tape()
        x = tape.variable(np.ones(3))
        with pytest.raises(ad.ShapeError, match="scalar"):
            tape.backward(x * 2.0)

    def test_untracked_inputs_are_constants(self):
        tape = ad.Tape()
        x = tape.variable(np.array(3.0))
        c = ad.Tensor(np.array(5.0))
        y = x * c + c
        assert not c.tracked and y.tracked
        assert tape.backward(y)[x] == pytest.approx(5.0)

    def test_reused_node_accumulates(self):
        tape = ad.Tape()
        x = tape.variable(np.array(2.0))
        y = x * x * x  # d/dx = 3x^2
        assert tape.backward(y)[x] == pytest.approx(12.0)

    def test_mixing_tapes_is_an_error(self):
        a = ad.Tape().variable(np.ones(2))
        b = ad.Tape().variable(np.ones(2))
        with pytest.raises(ValueError, match="different tapes"):
            ad.add(a, b)

    def test_unused_variable_gets_zero(self):
        tape = ad.Tape()
        x = tape.variable(np.ones(2))
        z = tape.variable(np.ones(3))
        grads = tape.backward(ad.sum_(x))
        np.testing.assert_array_equal(grads[z], np.zeros(3))

    def test_broadcast_error_names_shapes(self):
        with pytest.raises(ad.ShapeError, match=r"\(2, 3\).*\(4,\)"):
            ad.add(np.ones((2, 3)), np.ones(4))

    def test_custom_op(self):
        tape = ad.Tape()
        x = tape.variable(np.array([1.0, -2.0]))
        y = ad.custom_op(np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),))
        np.testing.assert_array_equal(tape.backward(ad.sum_(y))[x], [1.0, -1.0])


class TestConv:
    def test_impulse_response_is_flipped_kernel(self):
        # cross-correlation of a unit impulse reproduces the kernel reversed
        rng = np.random.default_rng(0)
        k = rng.standard_normal((1, 1, 3, 3, 3))
        x = np.zeros((1, 5, 5, 5))
        x[0, 2, 2, 2] = 1.0
        out = ad.conv3d(x, k, padding=1).data
        np.testing.assert_allclose(out[0, 1:4, 1:4, 1:4], k[0, 0, ::-1, ::-1, ::-1])

    def test_matches_direct_loop(self):
        rng = np.random.default_rng(1)
        x = rng.standard_normal((2, 5, 4, 6))
        w = rng.standard_normal((3, 2, 3, 3, 3))
        b = rng.standard_normal(3)
        out = ad.conv3d(x, w, b, stride=2, padding=1).data
        xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (1, 1)))
        for o in range(3):
            for i in range(out.shape[1]):
                for j in range(out.shape[2]):
                    for k in range(out.shape[3]):
                        patch = xp[:, 2 * i:2 * i + 3, 2 * j:2 * j + 3, 2 * k:2 * k + 3]
                        assert out[o, i, j, k] == pytest.approx((patch * w[o]).sum() + b[o])

    def test_output_size(self):
        out = ad.conv3d(np.ones((1, 32, 32, 32)), np.ones((1, 1, 3, 3, 3)), stride=2, padding=1)
        assert out.shape == (1, 16, 16, 16)

    def test_bad_kernel(self):
        with pytest.raises(ad.ShapeError):
            ad.conv3d(np.ones((2, 4, 4, 4)), np.ones((1, 3, 3, 3, 3)))

    def test_avg_pool(self):
        x = np.arange(16.0).reshape(1, 4, 2, 2)
        out = ad.avg_pool3d(x, 2).data
        np.testing.assert_allclose(out.ravel(), [x[0, :2].mean(), x[0, 2:].mean()])


class TestSoftmax:
    @settings(max_examples=40, deadline=None)
    @given(hnp.arrays(np.float64, (3, 5), elements=st.floats(-50, 50)), st.floats(0.05, 10))
    def test_rows_sum_to_one(self, a, temp):
        out = ad.softmax(a, axis=1, temperature=temp).data
        np.testing.assert_allclose(out.sum(axis=1), 1.0)
        assert np.all(out >= 0)

    def test_large_logits_stable(self):
        out = ad.softmax(np.array([[1e4, 0.0]]), axis=1).data
        np.testing.assert_allclose(out, [[1.0, 0.0]])


class TestAdam:
    def test_first_step_by_hand(self):
        # step 1: m_hat = g, v_hat = g^2, update = lr * g / (|g| + eps)
        p = ad.ParameterSet({"w": np.array([1.0, -2.0])})
        g = {"w": np.array([0.5, -4.0])}
        new, state = ad.adam_step(p, g, lr=0.1)
        np.testing.assert_allclose(new["w"], [1.0 - 0.1 * 0.5 / (0.5 + 1e-8), -2.0 + 0.1 * 4.0 / (4.0 + 1e-8)])
        assert state.step == 1
        np.testing.assert_array_equal(p["w"], [1.0, -2.0])  # inputs untouched

    def test_second_step_by_hand(self):
        p = ad.ParameterSet({"w": np.array([0.0])})
        p1, s1 = ad.adam_step(p, {"w": np.array([1.0])}, lr=0.01)
        p2, _ = ad.adam_step(p1, {"w": np.array([3.0])}, s1, lr=0.01)
        m = 0.9 * 0.1 * 1.0 + 0.1 * 3.0
        v = 0.999 * 0.001 * 1.0 + 0.001 * 9.0
        m_hat, v_hat = m / (1 - 0.9**2), v / (1 - 0.999**2)
        assert p2["w"][0] == pytest.approx(p1["w"][0] - 0.01 * m_hat / (np.sqrt(v_hat) + 1e-8), rel=1e-12)

    def test_missing_gradient_is_zero(self):
        p = ad.ParameterSet({"a": np.ones(2), "b": np.ones(2)})
        new, _ = ad.adam_step(p, {"a": np.ones(2)}, lr=0.1)
        np.testing.assert_array_equal(new["b"], p["b"])

    def test_shape_mismatch(self):
        with pytest.raises(ad.ShapeError):
            ad.adam_step(ad.ParameterSet({"a": np.ones(2)}), {"a": np.ones(3)})


class TestCheckpoint:
    @settings(max_examples=25, deadline=None)
    @given(st.dictionaries(
        st.text(st.characters(codec="utf-8", exclude_categories=("Cs",)), min_size=1, max_size=12),
        hnp.arrays(np.float64, hnp.array_shapes(min_dims=0, max_dims=5, max_side=3),
                   elements=st.floats(allow_nan=False)),
        max_size=5))
    def test_prm1_roundtrip_bit_exact(self, tmp_path_factory, d):
        path = tmp_path_factory.mktemp("c") / "p.prm"
        ad.save_params(ad.ParameterSet(d), path)
        back = ad.load_params(path)
        assert list(back) == list(d)
        for k in d:
            assert back[k].shape == d[k].shape
            assert back[k].tobytes() == d[k].astype("<f8").tobytes()

    def test_bad_magic(self, tmp_path):
        (tmp_path / "x").write_bytes(b"NOPE")
        with pytest.raises(ad.CheckpointError, match="magic"):
            ad.load_params(tmp_path / "x")

    def test_truncated(self, tmp_path):
        ad.save_params(ad.ParameterSet({"w": np.ones((2, 2))}), tmp_path / "p")
        raw = (tmp_path / "p").read_bytes()
        (tmp_path / "p").write_bytes(raw[:-3])
        with pytest.raises(ad.CheckpointError, match="truncated"):
            ad.load_params(tmp_path / "p")
        (tmp_path / "p").write_bytes(raw + b"x")
        with pytest.raises(ad.CheckpointError, match="trailing"):
            ad.load_params(tmp_path / "p")

    def test_init_conv_bounds(self):
        w, b = ad.init_conv(np.random.default_rng(0), 4, 2, 3)
        bound = 1 / np.sqrt(2 * 27)
        assert w.shape == (4, 2, 3, 3, 3) and np.abs(w).max() <= bound and np.abs(b).max() <= bound
