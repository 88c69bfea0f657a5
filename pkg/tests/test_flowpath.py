import numpy as np
import pytest

from afmflow.flowpath import (FlowPathConfig, OdeIntegrationError, OdeSamplerConfig,
                              interpolant_sample, ode_sample, velocity_target)


def test_interpolant_endpoints_without_noise():
    y0 = np.array([[1.0, -2.0]])
    y1 = np.array([[3.0, 4.0]])
    cfg = FlowPathConfig(0.0)
    assert np.array_equal(interpolant_sample(y0, y1, 0.0, cfg), y0)
    assert np.array_equal(interpolant_sample(y0, y1, 1.0, cfg), y1)
    np.testing.assert_allclose(interpolant_sample(y0, y1, 0.25, cfg), [[1.5, -0.5]])


def test_interpolant_per_row_s_and_noise_scale():
    rng = np.random.default_rng(0)
    y0 = np.zeros((20000, 1))
    y1 = np.ones((20000, 1))
    s = np.full(20000, 0.5)
    x = interpolant_sample(y0, y1, s, FlowPathConfig(0.1), rng)
    assert x.mean() == pytest.approx(0.5, abs=3e-3)
    assert x.std() == pytest.approx(0.1, rel=0.03)


def test_interpolant_needs_rng_for_noise():
    with pytest.raises(ValueError):
        interpolant_sample(np.zeros((1, 1)), np.ones((1, 1)), 0.5, FlowPathConfig(1e-4))


def test_target_and_validation():
    assert np.array_equal(velocity_target([[1.0]], [[4.0]]), [[3.0]])
    with pytest.raises(ValueError):
        velocity_target(np.zeros((1, 2)), np.zeros((1, 3)))
    with pytest.raises(ValueError):
        interpolant_sample(np.zeros((1, 1)), np.ones((1, 1)), 1.2, FlowPathConfig(0.0))
    with pytest.raises(ValueError):
        FlowPathConfig(-1.0)
    with pytest.raises(ValueError):
        OdeSamplerConfig("rk4")
    with pytest.raises(ValueError):
        OdeSamplerConfig(n_steps=0)


@pytest.mark.parametrize("method", ["euler", "midpoint"])
def test_constant_field_transports_exactly(method):
    y0 = np.array([[0.5, -1.0]])
    delta = np.array([[2.0, 3.0]])
    y = ode_sample(lambda y, s: np.broadcast_to(delta, y.shape), y0, OdeSamplerConfig(method, 3))
    np.testing.assert_allclose(y, y0 + delta)


def test_euler_on_exponential_is_compound_interest():
    y = ode_sample(lambda y, s: y, np.ones((1, 1)), OdeSamplerConfig("euler", 4))
    assert y[0, 0] == pytest.approx(1.25 ** 4)


def _order(method):
    errs = [abs(ode_sample(lambda y, s: y, np.ones((1, 1)), OdeSamplerConfig(method, k))[0, 0] - np.e)
            for k in (16, 32)]
    return np.log2(errs[0] / errs[1])


def test_sampler_orders():
    assert _order("euler") == pytest.approx(1.0, abs=0.3)
    assert _order("midpoint") == pytest.approx(2.0, abs=0.3)


def test_non_finite_raises_or_passes_through():
    def blowup(y, s):
        return np.full_like(y, np.inf)

    with pytest.raises(OdeIntegrationError, match="step 1"):
        ode_sample(blowup, np.zeros((1, 1)))
    out = ode_sample(blowup, np.zeros((1, 1)), strict=False)
    assert not np.isfinite(out).all()
