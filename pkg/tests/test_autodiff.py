import numpy as np
import pytest

from stackrecon import autodiff as ad
from stackrecon.errors import NumericalError

GRAD_TOL = 1e-5
FD_EPS = 1e-4


def check_gradients(build, arrays, tol=GRAD_TOL):
    """Compare tape gradients of a scalar graph against central differences.

    ``build(tape, tensors) -> loss DiffTensor``; every array in ``arrays``
    becomes a requires_grad leaf.
    """

    def f(arrs):
        tape = ad.Tape()
        ts = [tape.tensor(a, requires_grad=True) for a in arrs]
        return float(build(tape, ts).value)

    fd = ad.finite_difference_grad(f, arrays, eps=FD_EPS)
    tape = ad.Tape()
    ts = [tape.tensor(a, requires_grad=True) for a in arrays]
    loss = build(tape, ts)
    tape.backward(loss)
    for t, g_fd in zip(ts, fd):
        got = t.grad if t.grad is not None else np.zeros_like(t.value)
        denom = max(np.max(np.abs(g_fd)), 1.0)
        assert np.max(np.abs(got - g_fd)) / denom < tol


def _rand(shape, seed, lo=0.2, hi=1.8):
    return np.random.default_rng(seed).uniform(lo, hi, shape)


def _weighted_sum(tape, t):
    w = np.random.default_rng(99).standard_normal(t.value.shape)
    return ad.sum_(ad.mul(t, tape.constant(w)))


# one gradcheck case per primitive; the registry is asserted complete below
_VOL = _rand((4, 5, 6), 11)
_PTS = np.random.default_rng(12).uniform(0.3, 3.2, (40, 3)) + 0.137
_PLAN = ad.make_sample_plan(_VOL.shape, _PTS)
_CONVX = _rand((2, 5, 6, 7), 13)
_CONVW = np.random.default_rng(14).standard_normal((3, 2, 3, 3, 3)) * 0.3

PRIMITIVE_CASES = {
    "add": (lambda tp, ts: _weighted_sum(tp, ad.add(ts[0], ts[1])),
            [_rand((3, 4), 1), _rand((3, 4), 2)]),
    "sub": (lambda tp, ts: _weighted_sum(tp, ad.sub(ts[0], ts[1])),
            [_rand((3, 4), 3), _rand((3, 4), 4)]),
    "mul": (lambda tp, ts: _weighted_sum(tp, ad.mul(ts[0], ts[1])),
            [_rand((3, 4), 5), _rand((3, 4), 6)]),
    "div": (lambda tp, ts: _weighted_sum(tp, ad.div(ts[0], ts[1])),
            [_rand((3, 4), 7), _rand((3, 4), 8, lo=0.5, hi=2.0)]),
    "scalar_mul": (lambda tp, ts: _weighted_sum(tp, ad.scalar_mul(ts[0], 1.7)),
                   [_rand((3, 4), 9)]),
    "scalar_mul_tensor": (
        lambda tp, ts: _weighted_sum(tp, ad.scalar_mul(ts[0], ts[1])),
        [_rand((3, 4), 9), np.array(0.73)],
    ),
    "scalar_add": (
        lambda tp, ts: _weighted_sum(tp, ad.scalar_add(ts[0], ts[1])),
        [_rand((3, 4), 29), np.array(0.31)],
    ),
    "square": (lambda tp, ts: _weighted_sum(tp, ad.square(ts[0])), [_rand((3, 4), 10)]),
    "sqrt": (lambda tp, ts: _weighted_sum(tp, ad.sqrt(ts[0])), [_rand((3, 4), 15)]),
    "exp": (lambda tp, ts: _weighted_sum(tp, ad.exp(ts[0])), [_rand((3, 4), 16)]),
    "log": (lambda tp, ts: _weighted_sum(tp, ad.log(ts[0])), [_rand((3, 4), 17)]),
    "relu": (
        # inputs nudged away from the kink at 0
        lambda tp, ts: _weighted_sum(tp, ad.relu(ts[0])),
        [np.where(np.abs(_rand((4, 4), 18, -1, 1)) < 0.05, 0.3, _rand((4, 4), 18, -1, 1))],
    ),
    "sigmoid": (lambda tp, ts: _weighted_sum(tp, ad.sigmoid(ts[0])),
                [_rand((3, 4), 19, -2, 2)]),
    "sum": (lambda tp, ts: _weighted_sum(tp, ad.sum_(ts[0], axis=1, keepdims=True)),
            [_rand((3, 4), 20)]),
    "sum_all": (lambda tp, ts: ad.sum_(ts[0]), [_rand((3, 4), 30)]),
    "mean": (lambda tp, ts: _weighted_sum(tp, ad.mean(ts[0], axis=(1, 2), keepdims=True)),
             [_rand((2, 3, 4), 21)]),
    "reshape": (lambda tp, ts: _weighted_sum(tp, ad.reshape(ts[0], (4, 3))),
                [_rand((3, 4), 31)]),
    "concat": (
        lambda tp, ts: _weighted_sum(tp, ad.concat([ts[0], ts[1]], axis=0)),
        [_rand((2, 3), 22), _rand((3, 3), 23)],
    ),
    "channel_mix": (
        lambda tp, ts: _weighted_sum(tp, ad.channel_mix(ts[0], ts[1], ts[2])),
        [_rand((3, 2, 2, 2), 24), _rand((4, 3), 25, -1, 1), _rand((4,), 26, -1, 1)],
    ),
    "channel_norm": (
        lambda tp, ts: _weighted_sum(tp, ad.channel_norm(ts[0], ts[1], ts[2])),
        [_rand((3, 4, 2, 2), 27), _rand((3,), 28, 0.5, 1.5), _rand((3,), 32, -1, 1)],
    ),
    "upsample2x_trilinear": (
        lambda tp, ts: _weighted_sum(tp, ad.upsample2x_trilinear(ts[0])),
        [_rand((2, 3, 4, 2), 33)],
    ),
    "grid_sample_trilinear": (
        lambda tp, ts: _weighted_sum(tp, ad.grid_sample_trilinear(ts[0], ts[1])),
        [_VOL, _PTS],
    ),
    "sample_fixed": (
        lambda tp, ts: _weighted_sum(tp, ad.sample_fixed(ts[0], _PLAN)),
        [_VOL],
    ),
    "conv3d": (
        lambda tp, ts: _weighted_sum(
            tp, ad.conv3d(ts[0], ts[1], ts[2], stride=(2, 2, 2), padding=(1, 1, 1))
        ),
        [_CONVX, _CONVW, _rand((3,), 34, -1, 1)],
    ),
    "transform_points_rigid": (
        lambda tp, ts: _weighted_sum(
            tp, ad.transform_points_rigid(ts[0], ts[1], np.array([2.0, 2.5, 3.0]))
        ),
        [np.array([3.0, -7.0, 12.0, 0.5, -1.0, 2.0]), _PTS],
    ),
    "affine_map_points": (
        lambda tp, ts: _weighted_sum(
            tp, ad.affine_map_points(ts[0], np.diag([1.2, 0.8, 1.5]), np.array([1.0, -2.0, 0.5]))
        ),
        [_PTS],
    ),
    "total_variation": (
        lambda tp, ts: ad.total_variation(ts[0]),
        [_rand((4, 4, 4), 35)],
    ),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVE_CASES))
def test_primitive_gradients(name):
    build, arrays = PRIMITIVE_CASES[name]
    check_gradients(build, arrays)


def test_registry_covers_every_primitive():
    ops = {
        "add", "sub", "mul", "div", "scalar_mul", "scalar_add", "square", "sqrt",
        "exp", "log", "relu", "sigmoid", "sum", "mean", "reshape", "concat",
        "channel_mix", "channel_norm", "upsample2x_trilinear",
        "grid_sample_trilinear", "sample_fixed", "conv3d",
        "transform_points_rigid", "affine_map_points", "total_variation",
    }
    covered = {n.split("_tensor")[0] for n in PRIMITIVE_CASES} | {"sum"}
    assert ops <= covered


class TestTapeSemantics:
    def test_square_derivative(self):
        tape = ad.Tape()
        x = tape.tensor(3.0, requires_grad=True)
        tape.backward(ad.square(x))
        assert x.grad == pytest.approx(6.0)

    def test_relu_dead_region(self):
        tape = ad.Tape()
        x = tape.tensor(-1.0, requires_grad=True)
        tape.backward(ad.relu(x))
        assert x.grad == 0.0

    def test_grid_sample_ramp_point_gradient(self):
        # volume f(i, j, k) = i: the sample value changes at rate 1 per unit i
        tape = ad.Tape()
        vol = tape.constant(np.fromfunction(lambda i, j, k: i, (5, 5, 5)))
        pts = tape.tensor(np.array([[2.3, 2.1, 1.6]]), requires_grad=True)
        tape.backward(ad.sum_(ad.grid_sample_trilinear(vol, pts)))
        assert np.allclose(pts.grad, [[1.0, 0.0, 0.0]], atol=1e-12)

    def test_sum_gradient_is_ones(self):
        tape = ad.Tape()
        x = tape.tensor(np.random.default_rng(0).random((3, 5)), requires_grad=True)
        tape.backward(ad.sum_(x))
        assert np.array_equal(x.grad, np.ones((3, 5)))

    def test_mse_gradient_zero_at_minimum(self):
        tape = ad.Tape()
        v = np.random.default_rng(1).random((4, 4))
        x = tape.tensor(v, requires_grad=True)
        y = tape.constant(v)
        tape.backward(ad.mean(ad.square(ad.sub(x, y))))
        assert np.allclose(x.grad, 0.0)

    def test_backward_requires_scalar(self):
        tape = ad.Tape()
        x = tape.tensor(np.ones(3), requires_grad=True)
        with pytest.raises(ad.GraphError):
            tape.backward(ad.scalar_mul(x, 2.0))

    def test_backward_twice_without_reset(self):
        tape = ad.Tape()
        x = tape.tensor(2.0, requires_grad=True)
        loss = ad.square(x)
        tape.backward(loss)
        with pytest.raises(ad.GraphError):
            tape.backward(loss)
        tape.zero_grad()
        tape.backward(ad.square(x))  # re-armed

    def test_shape_mismatch_rejected(self):
        tape = ad.Tape()
        a = tape.tensor(np.ones((2, 3)))
        b = tape.tensor(np.ones((3, 2)))
        with pytest.raises(ad.GraphError):
            ad.add(a, b)

    def test_finite_check_hook(self):
        tape = ad.Tape(check_finite=True)
        x = tape.tensor(np.array([1.0, 0.0]))
        with pytest.raises(NumericalError):
            ad.log(x)  # log(0) = -inf trips the hook

    def test_backward_linearity(self):
        # grad of a*f + b*g equals a*grad(f) + b*grad(g)
        rng = np.random.default_rng(5)
        v = rng.random((3, 3)) + 0.5
        a, b = 1.7, -0.6

        def grad_of(scale_f, scale_g):
            tape = ad.Tape()
            x = tape.tensor(v, requires_grad=True)
            f = ad.sum_(ad.square(x))
            g = ad.sum_(ad.log(x))
            tape.backward(ad.add(ad.scalar_mul(f, scale_f), ad.scalar_mul(g, scale_g)))
            return x.grad.copy()

        combined = grad_of(a, b)
        expected = a * grad_of(1.0, 0.0) + b * grad_of(0.0, 1.0)
        assert np.allclose(combined, expected, atol=1e-12)

    def test_forward_determinism(self):
        def run():
            rng = np.random.default_rng(42)
            tape = ad.Tape()
            x = tape.tensor(rng.random((4, 4, 4)), requires_grad=True)
            y = ad.sigmoid(ad.scalar_mul(ad.sqrt(ad.scalar_add(x, 1.0)), 0.7))
            loss = ad.mean(ad.square(y))
            tape.backward(loss)
            return loss.value.copy(), x.grad.copy()

        l1, g1 = run()
        l2, g2 = run()
        assert np.array_equal(l1, l2) and np.array_equal(g1, g2)

    def test_fan_out_accumulation(self):
        # x used twice: d(x^2 + 3x)/dx = 2x + 3
        tape = ad.Tape()
        x = tape.tensor(2.0, requires_grad=True)
        tape.backward(ad.add(ad.square(x), ad.scalar_mul(x, 3.0)))
        assert x.grad == pytest.approx(7.0)


class TestSampleFixedEquivalence:
    def test_matches_grid_sample(self):
        rng = np.random.default_rng(8)
        vol = rng.random((6, 7, 5))
        pts = rng.uniform(-1.0, 7.5, (200, 3))  # includes out-of-bounds
        tape = ad.Tape()
        v1 = tape.tensor(vol, requires_grad=True)
        out1 = ad.grid_sample_trilinear(v1, tape.constant(pts))
        tape.backward(ad.sum_(out1))
        g1 = v1.grad.copy()

        plan = ad.make_sample_plan(vol.shape, pts)
        tape2 = ad.Tape()
        v2 = tape2.tensor(vol, requires_grad=True)
        out2 = ad.sample_fixed(v2, plan)
        tape2.backward(ad.sum_(out2))
        assert np.allclose(out1.value, out2.value, atol=1e-12)
        assert np.allclose(g1, v2.grad, atol=1e-12)


class TestAdam:
    def test_first_step_magnitude(self):
        # bias-corrected first step moves by ~lr in the gradient direction
        state = ad.AdamState.for_params([np.array([1.0])])
        (p,) = ad.adam_step([np.array([1.0])], [np.array([0.3])], state, lr=0.1)
        assert p[0] == pytest.approx(1.0 - 0.1, abs=1e-6)

    def test_zero_gradient_fixed_point(self):
        p0 = np.array([2.0, -1.0])
        state = ad.AdamState.for_params([p0])
        (p,) = ad.adam_step([p0], [np.zeros(2)], state, lr=0.1)
        assert np.array_equal(p, p0)

    def test_quadratic_convergence_matches_scalar_recurrence(self):
        # independent oracle: run the textbook scalar recurrence directly
        def oracle(p0, lr, steps):
            m = v = 0.0
            p = p0
            for t in range(1, steps + 1):
                g = 2.0 * (p - 2.0)
                m = 0.9 * m + 0.1 * g
                v = 0.999 * v + 0.001 * g * g
                p = p - lr * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
            return p

        expected = oracle(5.0, 0.1, 200)
        p = np.array([5.0])
        state = ad.AdamState.for_params([p])
        for _ in range(200):
            g = 2.0 * (p - 2.0)
            (p,) = ad.adam_step([p], [g], state, lr=0.1)
        assert p[0] == pytest.approx(expected, abs=1e-12)
        assert abs(p[0] - 2.0) < 1e-3

    def test_nonfinite_gradient_rejected_and_reported(self):
        p0 = np.array([1.0])
        state = ad.AdamState.for_params([p0])
        (p,) = ad.adam_step([p0], [np.array([np.nan])], state, lr=0.1)
        assert np.array_equal(p, p0)
        assert state.rejections == 1
        assert state.t == 0

    def test_optimizer_class_minimizes(self):
        tape = ad.Tape()
        x = tape.tensor(5.0, requires_grad=True)
        opt = ad.Adam([x], lr=0.1)
        for _ in range(200):
            tape.clear()
            opt.zero_grad()
            loss = ad.square(ad.scalar_add(x, -2.0))
            tape.backward(loss)
            assert opt.step()
        assert abs(float(x.value) - 2.0) < 1e-3
