import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from openspectra import autodiff as ad
from openspectra.errors import ShapeMismatchError


def naive_conv1d(x, w, stride=1, padding=0):
    """Reference cross-correlation, written as plain loops."""
    n, cin, length = x.shape
    cout, _, k = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding)))
    l_out = (length + 2 * padding - k) // stride + 1
    out = np.zeros((n, cout, l_out))
    for b in range(n):
        for o in range(cout):
            for t in range(l_out):
                acc = 0.0
                for c in range(cin):
                    for j in range(k):
                        acc += xp[b, c, t * stride + j] * w[o, c, j]
                out[b, o, t] = acc
    return out


def make_rng(seed=0):
    return np.random.default_rng(seed)


def random_away_from_kinks(rng, shape, margin=0.05):
    """Sample values whose magnitude stays away from 0 (ReLU kink rejection)."""
    x = rng.normal(size=shape)
    while np.any(np.abs(x) < margin):
        resample = np.abs(x) < margin
        x[resample] = rng.normal(size=resample.sum())
    return x


class TestForward:
    def test_softmax_uniform_logits(self):
        s = ad.softmax(ad.Tensor([0.0, 0.0, 0.0, 0.0]))
        np.testing.assert_allclose(s.data, [0.25, 0.25, 0.25, 0.25], rtol=0, atol=0)

    @given(st.lists(st.floats(-50, 50), min_size=2, max_size=16))
    def test_softmax_sums_to_one(self, logits):
        s = ad.softmax(ad.Tensor(logits))
        assert abs(s.data.sum() - 1.0) < 1e-12
        assert np.all(s.data >= 0)

    @given(st.lists(st.floats(-50, 50), min_size=2, max_size=16), st.floats(-100, 100))
    def test_softmax_shift_invariance(self, logits, shift):
        base = ad.softmax(ad.Tensor(logits)).data
        shifted = ad.softmax(ad.Tensor(np.asarray(logits) + shift)).data
        assert np.max(np.abs(base - shifted)) <= 1e-12

    def test_softmax_overflow_safe(self):
        s = ad.softmax(ad.Tensor([1000.0, 0.0]))
        assert np.isfinite(s.data).all()
        np.testing.assert_allclose(s.data, [1.0, 0.0], atol=1e-12)

    def test_conv1d_hand_example(self):
        # kernel [1,0,-1] slid over [1,2,4,7] without flipping
        x = ad.Tensor(np.array([[[1.0, 2.0, 4.0, 7.0]]]))
        w = ad.Tensor(np.array([[[1.0, 0.0, -1.0]]]))
        out = ad.conv1d(x, w)
        np.testing.assert_array_equal(out.data, [[[-3.0, -5.0]]])

    @pytest.mark.parametrize("stride,padding", [(1, 0), (1, 1), (2, 0), (2, 3), (3, 2)])
    def test_conv1d_matches_naive(self, stride, padding):
        rng = make_rng(7)
        x = rng.normal(size=(2, 3, 17))
        w = rng.normal(size=(4, 3, 5))
        got = ad.conv1d(ad.Tensor(x), ad.Tensor(w), stride=stride, padding=padding)
        np.testing.assert_allclose(got.data, naive_conv1d(x, w, stride, padding), rtol=1e-12)

    def test_conv1d_channel_mismatch_names_shapes(self):
        x = ad.Tensor(np.zeros((1, 3, 8)))
        w = ad.Tensor(np.zeros((2, 4, 3)))
        with pytest.raises(ShapeMismatchError, match=r"conv1d.*\(1, 3, 8\).*\(2, 4, 3\)"):
            ad.conv1d(x, w)

    def test_matmul_shape_error(self):
        with pytest.raises(ShapeMismatchError, match="matmul"):
            ad.matmul(ad.Tensor(np.zeros((2, 3))), ad.Tensor(np.zeros((4, 5))))

    def test_global_average_pool(self):
        x = ad.Tensor(np.arange(12.0).reshape(1, 2, 6))
        out = ad.global_average_pool(x)
        np.testing.assert_allclose(out.data, [[2.5, 8.5]])

    def test_vector_norm(self):
        out = ad.vector_norm(ad.Tensor([[3.0, 4.0], [0.0, 0.0]]))
        np.testing.assert_array_equal(out.data, [5.0, 0.0])

    def test_batch_norm_eval_is_affine(self):
        rng = make_rng(3)
        state = ad.BatchNormState(running_mean=np.array([1.0, -2.0]), running_var=np.array([4.0, 0.25]))
        gamma, beta = ad.Tensor([2.0, 1.0]), ad.Tensor([0.5, -1.0])
        x = rng.normal(size=(3, 2, 5))
        y = ad.batch_norm(ad.Tensor(x), gamma, beta, state, training=False)
        inv = 1.0 / np.sqrt(state.running_var + 1e-5)
        expect = gamma.data[None, :, None] * (x - state.running_mean[None, :, None]) * inv[None, :, None] + beta.data[None, :, None]
        np.testing.assert_allclose(y.data, expect, rtol=1e-15)
        # eval mode never touches the buffers
        np.testing.assert_array_equal(state.running_mean, [1.0, -2.0])

    def test_batch_norm_training_normalizes(self):
        rng = make_rng(4)
        x = rng.normal(loc=3.0, scale=2.0, size=(8, 3, 10))
        state = ad.BatchNormState.initial(3)
        y = ad.batch_norm(ad.Tensor(x), ad.Tensor(np.ones(3)), ad.Tensor(np.zeros(3)), state, training=True)
        np.testing.assert_allclose(y.data.mean(axis=(0, 2)), 0.0, atol=1e-12)
        np.testing.assert_allclose(y.data.var(axis=(0, 2)), 1.0, atol=1e-3)


class TestBackward:
    def test_relu_subgradient_at_zero(self):
        x = ad.Tensor([0.0, -1.0, 2.0], requires_grad=True)
        with ad.Tape() as tape:
            tape.backward(ad.sum(ad.relu(x)))
        np.testing.assert_array_equal(x.grad, [0.0, 0.0, 1.0])

    def test_sum_of_squares_gradient(self):
        x = ad.Tensor([1.0, 2.0, 3.0])
        err = ad.grad_check(lambda t: ad.sum(ad.square(t)), x)
        assert err < 1e-6
        np.testing.assert_allclose(x.grad, [2.0, 4.0, 6.0], rtol=1e-12)

    def test_sum_gradient_exact_ones(self):
        x = ad.Tensor([0.3, -1.2, 4.0], requires_grad=True)
        with ad.Tape() as tape:
            tape.backward(ad.sum(x))
        np.testing.assert_array_equal(x.grad, [1.0, 1.0, 1.0])

    def test_gradient_accumulates_over_uses(self):
        x = ad.Tensor([2.0], requires_grad=True)
        with ad.Tape() as tape:
            y = ad.add(ad.mul(x, x), ad.mul(x, ad.Tensor([3.0])))  # x^2 + 3x
            tape.backward(ad.sum(y))
        np.testing.assert_allclose(x.grad, [7.0])

    def test_grad_check_epsilon_range(self):
        with pytest.raises(ValueError):
            ad.grad_check(lambda t: ad.sum(t), ad.Tensor([1.0]), epsilon=0.5)


GRADCHECK_CASES = {}


def gradcheck_case(name):
    def register(fn):
        GRADCHECK_CASES[name] = fn
        return fn
    return register


@gradcheck_case("add")
def _case_add(rng):
    a, b = ad.Tensor(rng.normal(size=(3, 4))), ad.Tensor(rng.normal(size=(3, 4)))
    return lambda a, b: ad.sum(ad.square(ad.add(a, b))), [a, b]


@gradcheck_case("add_broadcast")
def _case_add_broadcast(rng):
    a, b = ad.Tensor(rng.normal(size=(3, 4))), ad.Tensor(rng.normal(size=(4,)))
    return lambda a, b: ad.sum(ad.square(ad.add(a, b))), [a, b]


@gradcheck_case("sub")
def _case_sub(rng):
    a, b = ad.Tensor(rng.normal(size=(2, 5))), ad.Tensor(rng.normal(size=(2, 5)))
    return lambda a, b: ad.sum(ad.square(ad.sub(a, b))), [a, b]


@gradcheck_case("mul")
def _case_mul(rng):
    a, b = ad.Tensor(rng.normal(size=(4, 3))), ad.Tensor(rng.normal(size=(4, 3)))
    return lambda a, b: ad.sum(ad.mul(a, b)), [a, b]


@gradcheck_case("matmul")
def _case_matmul(rng):
    a, b = ad.Tensor(rng.normal(size=(3, 4))), ad.Tensor(rng.normal(size=(4, 2)))
    return lambda a, b: ad.sum(ad.square(ad.matmul(a, b))), [a, b]


@gradcheck_case("conv1d")
def _case_conv1d(rng):
    x, w = ad.Tensor(rng.normal(size=(2, 3, 11))), ad.Tensor(rng.normal(size=(4, 3, 3)))
    return lambda x, w: ad.sum(ad.square(ad.conv1d(x, w, stride=2, padding=1))), [x, w]


@gradcheck_case("relu")
def _case_relu(rng):
    x = ad.Tensor(random_away_from_kinks(rng, (3, 7)))
    return lambda x: ad.sum(ad.square(ad.relu(x))), [x]


@gradcheck_case("global_average_pool")
def _case_gap(rng):
    x = ad.Tensor(rng.normal(size=(2, 3, 6)))
    return lambda x: ad.sum(ad.square(ad.global_average_pool(x))), [x]


@gradcheck_case("batch_norm_train")
def _case_bn_train(rng):
    x = ad.Tensor(rng.normal(size=(4, 3, 5)))
    gamma = ad.Tensor(rng.uniform(0.5, 1.5, size=3))
    beta = ad.Tensor(rng.normal(size=3))
    state = ad.BatchNormState.initial(3)
    return lambda x, g, b: ad.sum(ad.square(ad.batch_norm(x, g, b, state, training=True))), [x, gamma, beta]


@gradcheck_case("batch_norm_eval")
def _case_bn_eval(rng):
    x = ad.Tensor(rng.normal(size=(4, 3, 5)))
    gamma = ad.Tensor(rng.uniform(0.5, 1.5, size=3))
    beta = ad.Tensor(rng.normal(size=3))
    state = ad.BatchNormState(rng.normal(size=3), rng.uniform(0.5, 2.0, size=3))
    return lambda x, g, b: ad.sum(ad.square(ad.batch_norm(x, g, b, state, training=False))), [x, gamma, beta]


@gradcheck_case("softmax")
def _case_softmax(rng):
    x = ad.Tensor(rng.normal(size=(3, 5)))
    w = ad.Tensor(rng.normal(size=(3, 5)))
    return lambda x: ad.sum(ad.mul(ad.softmax(x), ad.Tensor(w.data))), [x]


@gradcheck_case("log")
def _case_log(rng):
    x = ad.Tensor(rng.uniform(0.2, 3.0, size=(2, 6)))
    return lambda x: ad.sum(ad.log(x)), [x]


@gradcheck_case("square")
def _case_square(rng):
    x = ad.Tensor(rng.normal(size=(5,)))
    return lambda x: ad.sum(ad.square(x)), [x]


@gradcheck_case("sum_axis")
def _case_sum_axis(rng):
    x = ad.Tensor(rng.normal(size=(3, 4)))
    return lambda x: ad.sum(ad.square(ad.sum(x, axis=1))), [x]


@gradcheck_case("vector_norm")
def _case_vector_norm(rng):
    x = ad.Tensor(random_away_from_kinks(rng, (4, 3), margin=0.2))
    return lambda x: ad.sum(ad.vector_norm(x)), [x]


@gradcheck_case("take_rows")
def _case_take_rows(rng):
    x = ad.Tensor(rng.normal(size=(5, 3)))
    idx = np.array([0, 2, 2, 4])
    return lambda x: ad.sum(ad.square(ad.take_rows(x, idx))), [x]


@gradcheck_case("sum_all")
def _case_sum_all(rng):
    x = ad.Tensor(rng.normal(size=(3, 4)))
    return lambda x: ad.sum(ad.square(x)), [x]


@gradcheck_case("mean")
def _case_mean(rng):
    x = ad.Tensor(rng.normal(size=(2, 7)))
    return lambda x: ad.mean(ad.square(x)), [x]


@pytest.mark.parametrize("name", sorted(GRADCHECK_CASES))
def test_primitive_gradients_match_central_differences(name):
    fn, inputs = GRADCHECK_CASES[name](make_rng(hash(name) % 2**31))
    assert ad.grad_check(fn, inputs) < 1e-4


def test_checkpoint_round_trip(tmp_path):
    rng = make_rng(11)
    tensors = {
        "stem.w": rng.normal(size=(4, 1, 7)),
        "scalar": np.array(3.75),
        "bias": rng.normal(size=(9,)),
    }
    path = tmp_path / "weights.ckpt"
    ad.save_tensors(path, tensors)
    loaded = ad.load_tensors(path)
    assert set(loaded) == set(tensors)
    for name in tensors:
        np.testing.assert_array_equal(loaded[name], tensors[name])


def test_checkpoint_rejects_garbage(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(b"not a checkpoint at all")
    with pytest.raises(ValueError, match="magic"):
        ad.load_tensors(path)
