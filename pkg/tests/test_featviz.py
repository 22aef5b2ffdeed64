import math

import numpy as np
import pytest

from segxray.autodiff import Graph
from segxray.featviz import (ActivationMaximizer, NonFiniteObjectiveError, RegConfig,
                             activation_maximize, extract_patches, gaussian_kernel,
                             gaussian_kernel_grad, jitter, jitter_transform, median_sigma,
                             sample_patch_positions, style_loss, style_loss_grad,
                             total_variation, total_variation_grad)
from segxray.zoo import ArchSpec, Network, build_model

TOL = 1e-5


def _fd(f, x, eps=1e-6, n=40, seed=0):
    """Central differences of scalar ``f`` at ``n`` random coordinates of ``x``."""
    gen = np.random.default_rng(seed)
    coords = [tuple(gen.integers(0, s) for s in x.shape) for _ in range(n)]
    out = []
    for c in coords:
        xp, xm = x.copy(), x.copy()
        xp[c] += eps
        xm[c] -= eps
        out.append((c, (f(xp) - f(xm)) / (2 * eps)))
    return out


def _rel(a, b):
    return abs(a - b) / max(1.0, abs(b))


# -- total variation -------------------------------------------------------------

def test_tv_examples():
    assert total_variation(np.full((3, 5, 5), 0.3)) == 0.0
    assert total_variation(np.array([[[0.0, 1.0], [0.0, 1.0]]])) == 2.0
    checker = (np.indices((6, 6)).sum(0) % 2).astype(float)[None]
    assert total_variation(checker) > total_variation(np.full((1, 6, 6), 0.5))
    with pytest.raises(ValueError):
        total_variation(np.ones((2, 1, 5)))


def test_tv_gradient():
    x = np.random.default_rng(0).random((3, 7, 6))
    _, g = total_variation_grad(x)
    for c, num in _fd(total_variation, x):
        assert _rel(g[c], num) <= TOL


# -- kernel and style --------------------------------------------------------------

def test_kernel_examples():
    gen = np.random.default_rng(1)
    x, y = gen.standard_normal(10), gen.standard_normal(10)
    assert gaussian_kernel(x, x, 0.7) == 1.0
    sigma = 0.8
    d = np.zeros(4)
    d[0] = math.sqrt(2) * sigma
    assert gaussian_kernel(d, np.zeros(4), sigma) == pytest.approx(math.exp(-1), rel=1e-12)
    assert gaussian_kernel(x, y, 2.0) == gaussian_kernel(y, x, 2.0)
    assert gaussian_kernel(x, y, 2.0) == pytest.approx(math.exp(-np.sum((x - y) ** 2) / 8.0), rel=1e-14)
    with pytest.raises(ValueError):
        gaussian_kernel(x, y, 0.0)


def test_kernel_gradient():
    gen = np.random.default_rng(2)
    x, y = gen.standard_normal(6), gen.standard_normal(6)
    g = gaussian_kernel_grad(x, y, 1.5)
    for c, num in _fd(lambda v: gaussian_kernel(v, y, 1.5), x, n=6):
        assert _rel(g[c], num) <= TOL


def _style_oracle(x, s, sigma, pos, size):
    total = 0.0
    for c in range(x.shape[0]):
        X, S = extract_patches(x[c], pos, size), extract_patches(s[c], pos, size)
        for i in range(len(pos)):
            for j in range(len(pos)):
                total += (gaussian_kernel(X[i], X[j], sigma) + gaussian_kernel(S[i], S[j], sigma)
                          - 2 * gaussian_kernel(X[i], S[j], sigma))
    return total


def test_style_loss_examples():
    gen = np.random.default_rng(3)
    x, s = gen.random((2, 12, 12)), gen.random((2, 12, 12))
    pos = sample_patch_positions(gen, 12, 12, n=9, size=5)
    assert style_loss(x, x, 0.9, pos, 5) == 0.0
    assert style_loss(x, s, 0.9, pos, 5) == pytest.approx(_style_oracle(x, s, 0.9, pos, 5), rel=1e-10)
    one = pos[:1]
    a, b = extract_patches(x[0], one, 5)[0], extract_patches(s[0], one, 5)[0]
    single = style_loss(x[:1], s[:1], 0.9, one, 5)
    assert single == pytest.approx(2 - 2 * gaussian_kernel(a, b, 0.9), abs=1e-12)
    assert single >= 0
    with pytest.raises(ValueError):
        style_loss(x, s[:1], 0.9, pos, 5)


def test_style_gradient():
    gen = np.random.default_rng(4)
    x, s = gen.random((2, 14, 14)), gen.random((2, 14, 14))
    pos = sample_patch_positions(gen, 14, 14, n=16, size=7)
    sigma = median_sigma(s, pos, 7)
    _, g = style_loss_grad(x, s, sigma, pos, 7)
    for c, num in _fd(lambda v: style_loss(v, s, sigma, pos, 7), x):
        assert _rel(g[c], num) <= TOL


# -- jitter ----------------------------------------------------------------------

def test_jitter_identity():
    img = np.random.default_rng(0).random((4, 16, 16))
    out, t = jitter(img, np.random.default_rng(0), 0, 0)
    assert np.array_equal(out, img) and np.array_equal(t.adjoint(img), img)


def test_shift_matches_hand_shifted_pattern():
    x = np.arange(16, dtype=float).reshape(1, 4, 4)
    out = jitter_transform(4, 4, shift=(1, 0)).apply(x)
    expected = x[:, [1, 2, 3, 2], :]   # reflect boundary: row 4 mirrors to row 2
    assert np.array_equal(out, expected)


def test_jitter_is_deterministic_and_adjoint_exact():
    img = np.random.default_rng(1).random((3, 20, 20))
    a, ta = jitter(img, np.random.default_rng(5), 3, 8.0)
    b, tb = jitter(img, np.random.default_rng(5), 3, 8.0)
    assert np.array_equal(a, b) and ta.shift == tb.shift and ta.angle == tb.angle
    y = np.random.default_rng(2).random(img.shape)
    assert np.sum(ta.apply(img) * y) == pytest.approx(np.sum(img * ta.adjoint(y)), rel=1e-12)
    with pytest.raises(ValueError):
        jitter(img, np.random.default_rng(0), 5, 0)


# -- ascent ------------------------------------------------------------------------

def _linear_net():
    g = Graph(np.float64)
    x = g.input("x")
    lin = g.conv2d(x, g.parameter("w", np.eye(4).reshape(4, 4, 1, 1)), name="lin")
    return Network(g, x, lin, {"lin": lin})


def test_zero_step_returns_init():
    net = build_model(ArchSpec("skip", depth=2, base_channels=2), 0, np.float64)
    init = np.random.default_rng(0).uniform(0.4, 0.6, (4, 16, 16))
    pre = activation_maximize(net, "enc0.conv0", 0, RegConfig(steps=1, step_size=0.0), init=init)
    assert np.array_equal(pre.x_star, init)


def test_monotone_ascent_on_linear_model():
    reg = RegConfig(lambda_l2=0, tv_weight=0, gamma_style=0, jitter_max_shift=0, jitter_max_rot=0,
                    steps=50, step_size=5.0)
    template = np.zeros((4, 16, 16))
    pre = activation_maximize(_linear_net(), "lin", 0, reg, template)
    acts = [row[1] for row in pre.trace]
    assert all(b >= a for a, b in zip(acts, acts[1:]))
    assert acts[-1] > acts[0]
    assert pre.x_star.min() >= 0 and pre.x_star.max() <= 1
    assert np.allclose(pre.x_star[1:], pre.x_star[1:].mean(), atol=0.1)


def test_default_run_stays_in_range_and_trace_finite():
    net = build_model(ArchSpec("skip", depth=2, base_channels=2), 0, np.float64)
    template = np.random.default_rng(1).random((4, 16, 16))
    pre = activation_maximize(net, "mid.conv0", 1, RegConfig(steps=6), template, seed=2)
    assert pre.x_star.min() >= 0 and pre.x_star.max() <= 1
    assert all(math.isfinite(v) for row in pre.trace for v in row[1:])
    assert pre.trace_csv().splitlines()[0] == "step,activation,tv,style,l2,total"
    again = activation_maximize(net, "mid.conv0", 1, RegConfig(steps=6), template, seed=2)
    assert np.array_equal(again.x_star, pre.x_star)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_objective_aborts_with_trace():
    net = _linear_net()
    net.graph.set_parameter("w", np.full((4, 4, 1, 1), np.inf))
    with pytest.raises(NonFiniteObjectiveError) as info:
        activation_maximize(net, "lin", 0, RegConfig(steps=3, gamma_style=0), np.zeros((4, 12, 12)))
    assert len(info.value.trace) == 1


def test_reg_config_validation():
    with pytest.raises(ValueError):
        RegConfig(tv_weight=-1).validate()
    with pytest.raises(ValueError):
        RegConfig(steps=0).validate()
    with pytest.raises(ValueError):
        RegConfig(sigma=0.0).validate()


def test_estimator():
    net = build_model(ArchSpec("plain", depth=2, base_channels=2), 0)
    X = np.random.default_rng(0).random((3, 4, 16, 16))
    est = ActivationMaximizer(net, "dec0.conv1", 0, steps=3).fit(X)
    assert est.x_star_.shape == (4, 16, 16) and len(est.trace_) == 3
