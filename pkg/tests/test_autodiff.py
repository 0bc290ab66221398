import math

import numpy as np
import pytest

from raylens import autodiff as ad
from raylens.errors import DomainError, TapeStateError


def test_mul_product_rule():
    tape = ad.Tape()
    x = tape.leaf(3.0)
    y = tape.leaf(4.0)
    z = x * y
    assert z.val == 12.0
    tape.backward(z)
    assert tape.grad(x) == 4.0
    assert tape.grad(y) == 3.0


def test_detach_zero_adjoint():
    tape = ad.Tape()
    x = tape.leaf(5.0)
    d = ad.detach(x)
    assert d.val == 5.0
    assert d.is_constant
    y = d * tape.leaf(2.0)
    tape.backward(y)
    assert tape.grad(x) == 0.0


def test_sqrt_partial():
    tape = ad.Tape()
    x = tape.leaf(4.0)
    y = ad.sqrt(x)
    assert y.val == 2.0
    tape.backward(y)
    assert tape.grad(x) == 0.25


def test_square_gradient():
    tape = ad.Tape()
    x = tape.leaf(3.0)
    tape.backward(x * x)
    assert tape.grad(x) == 6.0


def test_detach_blocks_flow():
    tape = ad.Tape()
    x = tape.leaf(2.0)
    y = tape.leaf(5.0)
    tape.backward(ad.detach(x) * y)
    assert tape.grad(x) == 0.0
    assert tape.grad(y) == 2.0


def test_sin_square_matches_finite_difference():
    def f(v):
        return ad.sin(v[0] * v[0])

    assert ad.gradient_check(f, [1.2], h=1e-6) <= 1e-6


def test_gradient_check_sum_of_squares():
    def f(v):
        return ad.sum_vars([x * x for x in v])

    assert ad.gradient_check(f, [1.0, 2.0, 3.0], h=1e-6) <= 1e-8


def test_gradient_check_constant_function():
    def f(v):
        return ad.Variable(7.5)

    assert ad.gradient_check(f, [1.0, 2.0], h=1e-6) == 0.0


def _random_expression(rng):
    """A smooth, well-conditioned random composition of ~all primitives."""
    wrappers = [
        lambda t: ad.sin(t),
        lambda t: ad.cos(t),
        lambda t: ad.sqrt(t * t + 2.0),
        lambda t: ad.log(t * t + 3.0),
        lambda t: ad.exp(t * 0.3),
        lambda t: 1.0 / (t * t + 3.0),
        lambda t: ad.tan(t * 0.4),
        lambda t: ad.atan2(t, 2.5),
        lambda t: (t * t + 1.5) ** 0.7,
    ]
    combiners = [
        lambda a, b: a + b,
        lambda a, b: a - b,
        lambda a, b: a * b,
    ]
    picks = [rng.integers(0, len(wrappers)) for _ in range(6)]
    combos = [rng.integers(0, len(combiners)) for _ in range(3)]

    def f(v):
        a = wrappers[picks[0]](v[0])
        b = wrappers[picks[1]](v[1])
        c = wrappers[picks[2]](v[2])
        t1 = combiners[combos[0]](a, b)
        t2 = combiners[combos[1]](c, wrappers[picks[3]](t1))
        t3 = combiners[combos[2]](wrappers[picks[4]](t2), wrappers[picks[5]](v[0] * v[1]))
        return t3

    return f


def test_random_compositions_match_finite_differences():
    rng = np.random.default_rng(1234)
    for _ in range(25):
        f = _random_expression(rng)
        x = list(rng.uniform(0.3, 1.4, size=3))
        assert ad.gradient_check(f, x, h=1e-6) <= 1e-6


def test_linearity_of_gradients():
    a, b = 2.5, -1.25

    def grads(fn, xvals):
        tape = ad.Tape()
        leaves = [tape.leaf(v) for v in xvals]
        tape.backward(fn(leaves))
        return [tape.grad(v) for v in leaves]

    f = lambda v: ad.sin(v[0]) * v[1]
    g = lambda v: v[0] * v[0] + ad.exp(v[1])
    combo = lambda v: a * f(v) + b * g(v)

    x = [0.7, 1.1]
    gf = grads(f, x)
    gg = grads(g, x)
    gc = grads(combo, x)
    for i in range(2):
        assert gc[i] == pytest.approx(a * gf[i] + b * gg[i], rel=1e-15, abs=1e-15)


def test_detach_idempotent():
    tape = ad.Tape()
    x = tape.leaf(3.5)
    d1 = ad.detach(x)
    d2 = ad.detach(d1)
    assert d2.val == d1.val
    assert d2.is_constant


def test_tape_replay_determinism():
    def run():
        tape = ad.Tape()
        x = tape.leaf(0.8)
        y = tape.leaf(1.7)
        z = ad.exp(ad.sin(x * y) + ad.sqrt(y)) / (x + 2.0)
        tape.backward(z)
        return z.val, tape.grad(x), tape.grad(y)

    assert run() == run()


def test_double_backward_is_error():
    tape = ad.Tape()
    x = tape.leaf(1.0)
    y = x * x
    tape.backward(y)
    with pytest.raises(TapeStateError):
        tape.backward(y)


def test_record_after_backward_is_error():
    tape = ad.Tape()
    x = tape.leaf(1.0)
    tape.backward(x * x)
    with pytest.raises(TapeStateError):
        _ = x * 2.0


def test_stale_handle_after_reset():
    tape = ad.Tape()
    x = tape.leaf(1.0)
    tape.reset()
    with pytest.raises(TapeStateError):
        _ = x * 2.0
    with pytest.raises(TapeStateError):
        tape.grad(x)


def test_cross_tape_mixing_rejected():
    t1, t2 = ad.Tape(), ad.Tape()
    x = t1.leaf(1.0)
    y = t2.leaf(2.0)
    with pytest.raises(TapeStateError):
        _ = x + y


def test_domain_errors_identify_operation():
    tape = ad.Tape()
    x = tape.leaf(2.0)
    with pytest.raises(DomainError, match="div"):
        _ = x / 0.0
    with pytest.raises(DomainError, match="sqrt"):
        ad.sqrt(tape.leaf(-1.0))
    with pytest.raises(DomainError, match="log"):
        ad.log(tape.leaf(-0.5))
    with pytest.raises(DomainError, match="pow"):
        _ = tape.leaf(-2.0) ** 0.5


def test_kink_conventions():
    tape = ad.Tape()
    x = tape.leaf(0.0)
    tape.backward(ad.relu(x))
    assert tape.grad(x) == 0.0

    tape = ad.Tape()
    x = tape.leaf(0.0)
    tape.backward(abs(x))
    assert tape.grad(x) == 0.0

    tape = ad.Tape()
    x = tape.leaf(1.0)
    y = tape.leaf(1.0)
    tape.backward(ad.vmax(x, y))
    assert tape.grad(x) == 0.0
    assert tape.grad(y) == 0.0

    tape = ad.Tape()
    x = tape.leaf(2.0)
    y = tape.leaf(1.0)
    tape.backward(ad.vmin(x, y))
    assert tape.grad(x) == 0.0
    assert tape.grad(y) == 1.0


def test_min_max_values():
    assert ad.vmin(ad.Variable(2.0), 3.0).val == 2.0
    assert ad.vmax(ad.Variable(2.0), 3.0).val == 3.0


def test_atan2_gradient():
    def f(v):
        return ad.atan2(v[0], v[1])

    assert ad.gradient_check(f, [0.6, -1.3], h=1e-7) <= 1e-6


def test_sigma_values_and_kinks():
    assert ad.sigma(ad.Variable(0.0)).val == 1.0
    assert ad.sigma(ad.Variable(0.3)).val == pytest.approx(0.7)
    assert ad.sigma(ad.Variable(1.2)).val == 0.0

    for x0, expected in [(0.0, 0.0), (0.5, -1.0), (1.0, 0.0), (1.5, 0.0)]:
        tape = ad.Tape()
        x = tape.leaf(x0)
        tape.backward(ad.sigma(x))
        assert tape.grad(x) == expected


def test_sum_vars_mixes_constants_and_nodes():
    tape = ad.Tape()
    xs = [tape.leaf(float(i)) for i in range(5)]
    s = ad.sum_vars(xs + [2.5, ad.Variable(0.5)])
    assert s.val == pytest.approx(0 + 1 + 2 + 3 + 4 + 3.0)
    tape.backward(s)
    for x in xs:
        assert tape.grad(x) == 1.0


def test_sum_vars_with_repeated_variable():
    tape = ad.Tape()
    x = tape.leaf(1.5)
    s = ad.sum_vars([x, x, x])
    tape.backward(s)
    assert tape.grad(x) == 3.0


def test_seeded_backward():
    tape = ad.Tape()
    x = tape.leaf(2.0)
    y1 = x * x
    y2 = x * 3.0
    tape.backward(seeds=[(y1, 1.0), (y2, 0.5)])
    assert tape.grad(x) == pytest.approx(2 * 2.0 + 0.5 * 3.0)


def test_backward_requires_root_or_seed():
    tape = ad.Tape()
    tape.leaf(1.0)
    with pytest.raises(TapeStateError):
        tape.backward()
    with pytest.raises(TapeStateError):
        tape.backward(ad.Variable(1.0))


def test_constant_folding_keeps_tape_small():
    tape = ad.Tape()
    x = tape.leaf(1.0)
    n0 = tape.n_nodes
    _ = ad.Variable(2.0) * 3.0 + math.pi
    assert tape.n_nodes == n0
    _ = x * 2.0
    assert tape.n_nodes == n0 + 1


def test_independent_tapes_in_threads():
    """Per-field tapes may run concurrently; grads match the sequential sum."""
    from concurrent.futures import ThreadPoolExecutor

    def work(x0):
        tape = ad.Tape()
        x = tape.leaf(x0)
        y = ad.sin(x * x) + ad.exp(x * 0.5)
        tape.backward(y)
        return tape.grad(x)

    xs = [0.3, 0.7, 1.1, 1.9]
    seq = [work(v) for v in xs]
    with ThreadPoolExecutor(max_workers=4) as ex:
        par = list(ex.map(work, xs))
    assert par == seq
