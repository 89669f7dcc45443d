import pytest
import torch

from hbridge.errors import DivergenceError, InputError
from hbridge.flowmatch import euler_sample, fm_loss, make_flow_batch

D = torch.float64


def test_interpolant_endpoints():
    x1 = torch.randn(4, 16, 48, dtype=D)
    x0 = torch.randn(4, 16, 48, dtype=D)
    assert torch.equal(make_flow_batch(x1, t=0.0, x0=x0).x_t, x0)
    assert torch.equal(make_flow_batch(x1, t=1.0, x0=x0).x_t, x1)
    half = make_flow_batch(x1, t=0.5, x0=torch.zeros_like(x1))
    assert torch.equal(half.x_t, x1 / 2)
    assert torch.equal(half.v_target, x1)


def test_per_sample_time():
    x1 = torch.ones(3, 2, dtype=D)
    fb = make_flow_batch(x1, t=torch.tensor([0.0, 0.5, 1.0], dtype=D), x0=torch.zeros_like(x1))
    assert fb.x_t[:, 0].tolist() == [0.0, 0.5, 1.0]


def test_draws_are_seeded_and_in_range():
    x1 = torch.zeros(64, 2, dtype=D)
    a = make_flow_batch(x1, torch.Generator().manual_seed(3))
    b = make_flow_batch(x1, torch.Generator().manual_seed(3))
    assert torch.equal(a.x_t, b.x_t) and torch.equal(a.t, b.t)
    assert ((a.t >= 0) & (a.t < 1)).all()


def test_fm_loss_cases():
    v = torch.tensor([[1.0, 2.0]], dtype=D)
    assert float(fm_loss(v, v)) == 0.0
    assert float(fm_loss(v, torch.zeros_like(v))) == 2.5
    with pytest.raises(InputError):
        fm_loss(v, torch.zeros(1, 3, dtype=D))


def test_nonfinite_target_rejected():
    with pytest.raises(InputError):
        make_flow_batch(torch.tensor([[float("inf")]]))


@pytest.mark.parametrize("steps", [1, 2, 7, 64])
def test_constant_field_is_exact(steps):
    x1 = torch.randn(2, 16, 48, dtype=D)
    x0 = torch.randn(2, 16, 48, dtype=D)
    out = euler_sample(lambda x, t, c: x1 - x0, None, steps, x0=x0)
    assert torch.allclose(out, x1, rtol=0, atol=1e-12)


def test_interpolant_velocity_reconstructs_target():
    """The oracle velocity (x1 - x_t)/(1 - t) of the linear interpolant is
    constant along the path, so Euler lands on x1."""
    x1 = torch.randn(3, 5, dtype=D)
    x0 = torch.randn(3, 5, dtype=D)
    out = euler_sample(lambda x, t, c: (x1 - x) / (1 - t), None, 10, x0=x0)
    assert torch.allclose(out, x1, rtol=0, atol=1e-12)


def test_first_order_convergence():
    """dx/dt = 2t has exact solution x0 + 1; Euler's error is 1/steps."""
    x0 = torch.zeros(1, dtype=D)
    field = lambda x, t, c: torch.full_like(x, 2 * t)
    err = {n: abs(float(euler_sample(field, None, n, x0=x0)) - 1.0) for n in (8, 16)}
    assert abs(err[8] - 1 / 8) < 1e-12
    assert err[8] / err[16] >= 1.8


def test_sampler_determinism_and_errors():
    g1, g2 = torch.Generator().manual_seed(5), torch.Generator().manual_seed(5)
    f = lambda x, t, c: -x
    a = euler_sample(f, None, 4, g1, shape=(2, 3))
    b = euler_sample(f, None, 4, g2, shape=(2, 3))
    assert torch.equal(a, b)
    with pytest.raises(InputError):
        euler_sample(f, None, 0, shape=(1,))
    with pytest.raises(InputError):
        euler_sample(f, None, 1)
    with pytest.raises(DivergenceError):
        euler_sample(lambda x, t, c: x * 1e308, None, 3, x0=torch.ones(1, dtype=D))
