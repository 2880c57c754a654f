import numpy as np
import pytest

import tensor_core as tc
from tensor_core import Tape, backward, finite_diff_check
from rp_utils import ShapeMismatchError

SEEDS = range(20)


def away_from_zero(rng, shape, low=-2.0, high=2.0, margin=1e-2):
    """Uniform draw with every entry at least `margin` away from 0 (relu kink)"""
    x = rng.uniform(low, high, size=shape)
    while np.any(np.abs(x) < margin):
        near = np.abs(x) < margin
        x[near] = rng.uniform(low, high, size=int(near.sum()))
    return x


def weighted_sum(tape, t, rng):
    """sum(w * t) with fixed weights in [0.5, 1.5] so no gradient entry is tiny"""
    w = np.random.default_rng(99).uniform(0.5, 1.5, size=t.shape)
    return tc.sum(tc.mul(t, tape.constant(w)))


def test_matmul_shape():
    tape = Tape()
    out = tc.matmul(tape.leaf(np.ones((2, 3))), tape.leaf(np.ones((3, 4))))
    assert out.shape == (2, 4)
    assert np.all(out.value == 3)


def test_add_zero_scalar_is_identity(rng):
    tape = Tape()
    x = tape.leaf(rng.normal(size=(3, 5)))
    out = tc.add(x, tape.constant(np.float32(0)))
    assert np.array_equal(out.value, x.value)


def test_relu_definition():
    tape = Tape()
    assert tc.relu(tape.leaf([-1.0, 2.0])).value.tolist() == [0.0, 2.0]


@pytest.mark.parametrize("kind, a_shape, b_shape", [
    ('add', (2, 3), (3, 2)),
    ('mul', (4,), (5,)),
    ('matmul', (2, 3), (4, 2)),
])
def test_shape_mismatch_names_shapes_and_kind(kind, a_shape, b_shape):
    tape = Tape()
    a, b = tape.leaf(np.ones(a_shape)), tape.leaf(np.ones(b_shape))
    with pytest.raises(ShapeMismatchError, match=kind) as info:
        getattr(tc, kind)(a, b)
    assert str(list(a_shape)) in str(info.value)
    assert str(list(b_shape)) in str(info.value)


def test_conv2d_channel_mismatch():
    tape = Tape()
    with pytest.raises(ShapeMismatchError, match='conv2d'):
        tc.conv2d(tape.leaf(np.ones((1, 2, 5, 5))), tape.leaf(np.ones((3, 1, 3, 3))))


def test_square_gradient():
    tape = Tape()
    x = tape.leaf([3.0])
    grads = backward(tape, tc.sum(tc.mul(x, x)))
    assert grads.wrt(x).tolist() == [6.0]


def test_constant_loss_has_no_gradient():
    tape = Tape()
    x = tape.leaf([1.0, 2.0])
    c = tape.leaf([4.0, 5.0])
    grads = backward(tape, tc.sum(c))
    assert grads.wrt(x) is None
    assert grads.wrt(c).tolist() == [1.0, 1.0]


def test_non_scalar_loss_rejected():
    tape = Tape()
    x = tape.leaf(np.ones((2, 2)))
    with pytest.raises(ShapeMismatchError, match='scalar'):
        backward(tape, tc.relu(x))


def test_tape_ids_are_topological(rng):
    tape = Tape()
    x = tape.leaf(rng.normal(size=(2, 3)))
    w = tape.leaf(rng.normal(size=(3, 2)))
    tc.mean(tc.tanh(tc.matmul(x, w)))
    for node in tape.nodes:
        assert all(operand < node.id for operand in node.operands)


def test_constants_receive_no_gradient(rng):
    tape = Tape()
    x = tape.leaf(rng.normal(size=(2, 3)))
    w = tape.constant(rng.normal(size=(3, 2)))
    grads = backward(tape, tc.sum(tc.matmul(x, w)))
    assert grads.wrt(w) is None
    assert grads.wrt(x).shape == (2, 3)


def test_gradient_shapes_match_values(rng):
    tape = Tape()
    x = tape.leaf(rng.normal(size=(2, 1, 6, 6)))
    w = tape.leaf(rng.normal(size=(3, 1, 3, 3)))
    out = tc.mean(tc.maxpool2d(tc.relu(tc.conv2d(x, w))))
    grads = backward(tape, out)
    for node_id, grad in grads.items():
        assert grad.shape == tape.nodes[node_id].value.shape


def test_maxpool_tie_goes_to_first_element():
    tape = Tape()
    x = tape.leaf(np.ones((1, 1, 2, 2)))
    grads = backward(tape, tc.sum(tc.maxpool2d(x)))
    assert grads.wrt(x)[0, 0].tolist() == [[1.0, 0.0], [0.0, 0.0]]


def test_maxpool_drops_odd_border():
    tape = Tape()
    x = tape.leaf(np.arange(25, dtype=np.float32).reshape(1, 1, 5, 5))
    out = tc.maxpool2d(x)
    assert out.shape == (1, 1, 2, 2)
    assert out.value[0, 0].tolist() == [[6.0, 8.0], [16.0, 18.0]]


def test_conv2d_matches_direct_loop(rng):
    x = rng.normal(size=(2, 3, 6, 5)).astype(np.float32)
    w = rng.normal(size=(4, 3, 3, 2)).astype(np.float32)
    tape = Tape()
    out = tc.conv2d(tape.leaf(x), tape.leaf(w)).value
    expected = np.zeros((2, 4, 4, 4), dtype=np.float64)
    for b in range(2):
        for o in range(4):
            for i in range(4):
                for j in range(4):
                    expected[b, o, i, j] = np.sum(x[b, :, i:i + 3, j:j + 2] * w[o])
    np.testing.assert_allclose(out, expected, rtol=1e-5, atol=1e-5)


def test_masked_softmax_puts_no_mass_outside_mask(rng):
    tape = Tape()
    mask = np.array([[True, False, True], [False, True, False]])
    out = tc.softmax(tape.leaf(rng.normal(size=(2, 3))), axis=1, mask=mask).value
    assert np.all(out[~mask] == 0)
    np.testing.assert_allclose(out.sum(axis=1), 1.0, rtol=1e-6)
    assert out[1, 1] == pytest.approx(1.0)


def test_cumsum_forward():
    tape = Tape()
    out = tc.cumsum(tape.leaf([[0.2, 0.3, 0.5]]), axis=1)
    np.testing.assert_allclose(out.value, [[0.2, 0.5, 1.0]], rtol=1e-6)


def test_cross_entropy_sum_is_batch_times_mean(rng):
    logits = rng.normal(size=(4, 5))
    labels = np.array([0, 3, 4, 1])
    tape = Tape()
    t = tape.leaf(logits)
    mean = tc.softmax_cross_entropy(t, labels).value
    total = tc.softmax_cross_entropy(t, labels, reduction='sum').value
    assert float(total) == pytest.approx(4 * float(mean), rel=1e-6)


def test_tanh_and_sigmoid_properties(rng):
    x = rng.uniform(-88, 88, size=1000).astype(np.float32)
    t = tc.stable_tanh(x)
    s = tc.stable_sigmoid(x)
    assert np.all(np.isfinite(t)) and np.all(np.isfinite(s))
    np.testing.assert_allclose(tc.stable_tanh(-x), -t, atol=1e-6)
    assert np.all(np.abs(tc.stable_tanh(np.linspace(-5, 5, 101))) < 1)
    np.testing.assert_allclose(s + tc.stable_sigmoid(-x), 1.0, atol=1e-6)
    small = np.linspace(-3, 3, 13)
    np.testing.assert_allclose(tc.stable_tanh(small),
                               (np.exp(small) - np.exp(-small)) / (np.exp(small) + np.exp(-small)), atol=1e-12)
    np.testing.assert_allclose(tc.stable_sigmoid(small), 1 / (1 + np.exp(-small)), atol=1e-12)


def test_linearity_of_backward(rng):
    x0 = rng.normal(size=(3, 4))
    y0 = rng.normal(size=(3, 4))
    a, b = 1.7, -0.6

    def grad_of(build):
        tape = Tape()
        x = tape.leaf(x0)
        y = tape.constant(y0)
        return backward(tape, build(tape, x, y)).wrt(x)

    f = lambda tape, x, y: tc.sum(tc.mul(x, y))
    g = lambda tape, x, y: tc.sum(tc.mul(x, x))
    combined = lambda tape, x, y: tc.add(tc.scalar_mul(f(tape, x, y), a), tc.scalar_mul(g(tape, x, y), b))
    np.testing.assert_allclose(grad_of(combined), a * grad_of(f) + b * grad_of(g), atol=1e-5)


def test_finite_diff_of_sum_is_exact(rng):
    error = finite_diff_check(lambda tape, x: tc.sum(x), rng.uniform(-2, 2, size=(3, 4)))
    assert error <= 1e-6


@pytest.mark.parametrize("seed", SEEDS)
def test_finite_diff_cross_entropy(seed):
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 5, size=4)
    error = finite_diff_check(lambda tape, x: tc.softmax_cross_entropy(x, labels), rng.uniform(-2, 2, size=(4, 5)))
    assert error <= 1e-3


def _unary(name, **kwargs):
    return lambda tape, x, rng: weighted_sum(tape, getattr(tc, name)(x, **kwargs), rng)


CASES = {
    'add': ((3, 4), lambda tape, x, rng: weighted_sum(tape, tc.add(x, tape.constant(rng.normal(size=(3, 4)))), rng)),
    'sub': ((3, 4), lambda tape, x, rng: weighted_sum(tape, tc.sub(tape.constant(rng.normal(size=(3, 4))), x), rng)),
    'mul': ((3, 4), lambda tape, x, rng: weighted_sum(tape, tc.mul(x, tc.tanh(x)), rng)),
    'scalar_mul': ((3, 4), lambda tape, x, rng: weighted_sum(tape, tc.scalar_mul(x, -2.5), rng)),
    'matmul': ((3, 4), lambda tape, x, rng: weighted_sum(tape, tc.matmul(x, tape.constant(rng.uniform(0.5, 1.5, size=(4, 2)))), rng)),
    'bias_add': ((3,), lambda tape, x, rng: weighted_sum(tape, tc.bias_add(tape.constant(rng.normal(size=(2, 3, 2, 2))), x), rng)),
    'conv2d': ((2, 2, 5, 5), lambda tape, x, rng: weighted_sum(tape, tc.conv2d(x, tape.constant(rng.uniform(0.2, 1.0, size=(3, 2, 3, 3)))), rng)),
    'maxpool2d': ((2, 2, 4, 4), _unary('maxpool2d')),
    'relu': ((3, 4), _unary('relu')),
    'tanh': ((3, 4), _unary('tanh')),
    'sigmoid': ((3, 4), _unary('sigmoid')),
    'softmax': ((3, 4), _unary('softmax', axis=1)),
    'masked_softmax': ((2, 4), _unary('softmax', axis=1, mask=np.array([[True, True, False, True], [False, True, True, True]]))),
    'sum_axis': ((3, 4), lambda tape, x, rng: weighted_sum(tape, tc.sum(x, axis=0), rng)),
    'mean': ((3, 4), lambda tape, x, rng: tc.mean(tc.mul(x, x))),
    'reshape': ((3, 4), lambda tape, x, rng: weighted_sum(tape, tc.reshape(x, (2, 6)), rng)),
    'cumsum': ((2, 5), lambda tape, x, rng: weighted_sum(tape, tc.cumsum(x, axis=1), rng)),
}


@pytest.mark.parametrize("case", sorted(CASES))
@pytest.mark.parametrize("seed", SEEDS)
def test_primitive_gradients(case, seed):
    shape, build = CASES[case]
    rng = np.random.default_rng(seed)
    x = away_from_zero(rng, shape)
    error = finite_diff_check(lambda tape, t: build(tape, t, np.random.default_rng(seed + 1000)), x, h=1e-5)
    assert error <= 1e-3, f"{case} seed {seed}: relative error {error:.2e}"


def test_random_five_layer_graph():
    rng = np.random.default_rng(7)
    w1 = rng.normal(size=(4, 6))
    w2 = rng.normal(size=(6, 5))
    labels = np.array([1, 0, 4])

    def f(tape, x):
        h = tc.tanh(tc.matmul(x, tape.constant(w1)))
        h = tc.sigmoid(tc.scalar_mul(h, 1.5))
        logits = tc.matmul(h, tape.constant(w2))
        return tc.softmax_cross_entropy(logits, labels)

    assert finite_diff_check(f, rng.uniform(-2, 2, size=(3, 4)), h=1e-5) <= 1e-3


def test_float32_is_default_dtype(rng):
    tape = Tape()
    out = tc.relu(tape.leaf(rng.normal(size=3)))
    assert out.value.dtype == np.float32
