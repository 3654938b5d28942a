import math

import pytest
import torch
from hypothesis import given, strategies as st

from oodaug.guidance import (GuidanceConfig, alpha_weights, guided_score, guided_score_three_term,
                             ood_tilt)
from oodaug.models import NumericError, ScoreEstimate
from oodaug.sde import DomainError

LAMBDAS = [round(0.1 * k, 1) for k in range(10)]


def _sym(a):
    a = 0.5 * (a + a.transpose(1, 2))
    n = a.shape[1]
    return a * (1 - torch.eye(n, dtype=a.dtype))[None, :, :, None]


def _inputs(seed, B=2, n=5, a=3, b=1):
    g = torch.Generator().manual_seed(seed)
    se = ScoreEstimate(torch.randn(B, n, a, generator=g, dtype=torch.float64),
                       _sym(torch.randn(B, n, n, b, generator=g, dtype=torch.float64)))
    grads = (torch.randn(B, n, a, generator=g, dtype=torch.float64),
             _sym(torch.randn(B, n, n, b, generator=g, dtype=torch.float64)))
    return se, grads


@pytest.mark.parametrize("lam,expected", [(0.0, 1.0), (0.25, 0.5), (0.81, 0.1)])
def test_tilt_values(lam, expected):
    assert abs(ood_tilt(lam) - expected) < 1e-12


def test_tilt_domain():
    with pytest.raises(DomainError):
        ood_tilt(1.0)
    with pytest.raises(DomainError):
        GuidanceConfig(lam=-0.1)


def test_alpha_examples():
    se, (gx, ga) = _inputs(0)
    scale = se.score_x.flatten(1).norm(dim=1) / gx.flatten(1).norm(dim=1)
    gx = gx * scale[:, None, None]  # now ||grad_x|| = ||score_x|| per sample
    a1, _ = alpha_weights(se, (gx, ga), 1.0, 0.5, 0.0)
    assert torch.allclose(a1, torch.ones(2, dtype=torch.float64))
    a1, _ = alpha_weights(se, (gx, ga), 1.0, 0.5, 1.0)
    assert torch.allclose(a1, torch.full((2,), 0.1, dtype=torch.float64))
    _, a2 = alpha_weights(se, (gx, torch.zeros_like(ga)), 1.0, 0.5, 0.3, alpha_cap=7.0)
    assert torch.all(a2 == 7.0)


def test_alpha_ignores_masked_entries():
    se, grads = _inputs(1, B=1)
    mask = torch.tensor([[True, True, True, False, False]])
    a = alpha_weights(se, grads, 0.5, 0.5, 0.2, mask=mask)
    junk_x = grads[0].clone()
    junk_x[:, 3:] = 1e6
    b = alpha_weights(se, (junk_x, grads[1]), 0.5, 0.5, 0.2, mask=mask)
    assert torch.allclose(a[0], b[0])


def test_lambda_zero_alpha_one():
    se, grads = _inputs(2)
    one = torch.ones(2, dtype=torch.float64)
    out = guided_score(se, grads, GuidanceConfig(0.0), 0.5, alphas=(one, one))
    assert torch.equal(out.score_x, se.score_x + grads[0])
    assert torch.equal(out.score_a, se.score_a + grads[1])


def test_tilt_limit_shrinks_output():
    se, grads = _inputs(3)
    big = guided_score(se, grads, GuidanceConfig(0.0), 0.5)
    small = guided_score(se, grads, GuidanceConfig(0.9999), 0.5)
    assert small.score_x.norm() < 0.011 * big.score_x.norm()


@pytest.mark.parametrize("lam", LAMBDAS)
def test_two_routes_agree(lam):
    for seed in range(100):
        se, grads = _inputs(seed)
        t = (seed % 10) / 10
        cfg = GuidanceConfig(lam, r1=0.3 + 0.01 * seed, r2=0.7)
        a = guided_score(se, grads, cfg, t)
        b = guided_score_three_term(se, grads, cfg, t)
        assert torch.allclose(a.score_x, b.score_x, rtol=0, atol=1e-12)
        assert torch.allclose(a.score_a, b.score_a, rtol=0, atol=1e-12)


@given(st.floats(0.0, 0.999), st.floats(0.0, 2.0), st.floats(0.0, 2.0), st.floats(0.0, 1.0),
       st.integers(0, 10_000))
def test_two_routes_agree_property(lam, r1, r2, t, seed):
    se, grads = _inputs(seed)
    cfg = GuidanceConfig(lam, r1=r1, r2=r2)
    a = guided_score(se, grads, cfg, t)
    b = guided_score_three_term(se, grads, cfg, t)
    assert torch.allclose(a.score_x, b.score_x, rtol=0, atol=1e-12)
    assert torch.allclose(a.score_a, b.score_a, rtol=0, atol=1e-12)


def test_guided_preserves_symmetry_and_mask():
    se, grads = _inputs(4)
    mask = torch.tensor([[True] * 4 + [False], [True] * 5])
    out = guided_score(se, grads, GuidanceConfig(0.3), 0.5, mask=mask)
    assert torch.equal(out.score_a, out.score_a.transpose(1, 2))
    assert torch.all(out.score_x[0, 4] == 0)
    assert torch.all(out.score_a[0, 4] == 0)


def test_nonfinite_rejected():
    se, grads = _inputs(5)
    bad = (grads[0].clone(), grads[1])
    bad[0][0, 0, 0] = math.nan
    with pytest.raises(NumericError):
        guided_score(se, bad, GuidanceConfig(0.1), 0.5)
