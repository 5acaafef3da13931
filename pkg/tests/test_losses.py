import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from weightgen.losses import (
    DegenerateTokenError,
    InsufficientNegativesError,
    NormalizationMode,
    masked_token_stats,
    normalized_reconstruction_loss,
    ntxent_loss,
    token_stats,
    total_loss,
)

MODES = list(NormalizationMode)
T = torch.tensor([2.0, 4.0, 0.0, 0.0], dtype=torch.float64)
M = torch.tensor([1.0, 1.0, 0.0, 0.0], dtype=torch.float64)


def test_masked_stats_worked_example():
    mu, sigma = masked_token_stats(T, M, 1e-6)
    assert float(mu) == 3.0
    assert float(sigma) == pytest.approx(1 + 1e-6, abs=1e-12)


def test_masked_stats_constant_token():
    mu, sigma = masked_token_stats(torch.full((5,), 2.5, dtype=torch.float64), torch.ones(5), 1e-6)
    assert float(mu) == 2.5 and float(sigma) == pytest.approx(1e-6)


def test_masked_stats_ignore_padding_values():
    a = masked_token_stats(T, M)
    b = masked_token_stats(torch.tensor([2.0, 4.0, 99.0, 99.0], dtype=torch.float64), M)
    assert torch.equal(a[0], b[0]) and torch.equal(a[1], b[1])


def test_masked_stats_batched_and_degenerate():
    x = torch.randn(7, 3, 5, dtype=torch.float64)
    m = (torch.rand(7, 3, 5) > 0.3).double()
    m[..., 0] = 1
    mu, sigma = masked_token_stats(x, m)
    assert mu.shape == (7, 3, 1)
    i, j = 4, 2
    sel = x[i, j][m[i, j] > 0]
    assert float(mu[i, j, 0]) == pytest.approx(float(sel.mean()), abs=1e-12)
    assert float(sigma[i, j, 0]) == pytest.approx(float(sel.std(unbiased=False)) + 1e-6, abs=1e-12)
    with pytest.raises(DegenerateTokenError):
        masked_token_stats(T, torch.zeros(4))


def test_loss_hand_oracle_masked_mode():
    pred = torch.tensor([3.0, 3.0, 99.0, 99.0], dtype=torch.float64)
    loss = normalized_reconstruction_loss(T, pred, M, "masked_per_token", eps=0.0)
    assert float(loss) == pytest.approx(1.0, abs=1e-12)


def test_per_token_differs_from_masked_on_padded_tokens():
    pred = torch.tensor([3.0, 3.0, 99.0, 99.0], dtype=torch.float64)
    per = normalized_reconstruction_loss(T, pred, M, "per_token", eps=0.0)
    sigma = math.sqrt(2.75)
    expected = ((2 - 3) ** 2 / sigma**2 + (4 - 3) ** 2 / sigma**2) / 2
    assert float(per) == pytest.approx(expected, abs=1e-12)
    assert float(per) != pytest.approx(1.0)


@pytest.mark.parametrize("mode", MODES)
def test_identity_prediction_is_zero(mode):
    x = torch.randn(3, 6, 8, dtype=torch.float64)
    m = torch.ones_like(x)
    m[:, :, 6:] = 0
    assert float(normalized_reconstruction_loss(x * m, x, m, mode)) == 0.0


@pytest.mark.parametrize("mode", MODES)
def test_padding_entries_never_change_the_loss(mode):
    g = torch.Generator().manual_seed(0)
    x = torch.randn(2, 5, 6, generator=g)
    m = (torch.rand(2, 5, 6, generator=g) > 0.4).float()
    m[..., 0] = 1
    x = x * m
    p = torch.randn(2, 5, 6, generator=g)
    base = normalized_reconstruction_loss(x, p, m, mode)
    noise = torch.randn(2, 5, 6, generator=g) * 50
    x2 = torch.where(m > 0, x, noise)
    p2 = torch.where(m > 0, p, -noise)
    assert torch.equal(normalized_reconstruction_loss(x2, p2, m, mode), base)


def test_all_padding_window_rows_are_skipped():
    x = torch.randn(1, 4, 3)
    m = torch.ones(1, 4, 3)
    m[0, 3] = 0
    x[0, 3] = 0
    p = torch.randn(1, 4, 3)
    full = normalized_reconstruction_loss(x[:, :3], p[:, :3], m[:, :3])
    assert torch.allclose(normalized_reconstruction_loss(x, p, m), full)


def test_scale_response():
    g = torch.Generator().manual_seed(1)
    x = torch.randn(4, 8, dtype=torch.float64, generator=g)
    p = torch.randn(4, 8, dtype=torch.float64, generator=g)
    m = torch.ones_like(x)
    c = 3.7
    masked = normalized_reconstruction_loss(x, p, m, "masked_per_token", eps=0.0)
    assert float(normalized_reconstruction_loss(c * x, c * p, m, "masked_per_token", eps=0.0)) == pytest.approx(float(masked), rel=1e-12)
    raw = normalized_reconstruction_loss(x, p, m, "none")
    assert float(normalized_reconstruction_loss(c * x, c * p, m, "none")) == pytest.approx(c * c * float(raw), rel=1e-12)


@pytest.mark.parametrize("mode", MODES)
def test_gradient_matches_finite_differences(mode):
    g = torch.Generator().manual_seed(2)
    x = torch.randn(2, 3, 5, dtype=torch.float64, generator=g)
    m = (torch.rand(2, 3, 5, generator=g) > 0.3).double()
    m[..., 0] = 1
    x = x * m
    p = torch.randn(2, 3, 5, dtype=torch.float64, generator=g)
    assert torch.autograd.gradcheck(lambda q: normalized_reconstruction_loss(x, q, m, mode), (p.requires_grad_(),))


def test_shape_mismatch_raises():
    with pytest.raises(ValueError):
        normalized_reconstruction_loss(torch.zeros(2, 3), torch.zeros(2, 4), torch.ones(2, 3))


def test_token_stats_use_every_entry():
    mu, sigma = token_stats(T[None])
    assert float(mu) == 1.5
    assert float(sigma) == pytest.approx(math.sqrt(2.75) + 1e-6)


def test_ntxent_closed_form():
    e = torch.eye(2, dtype=torch.float64)
    loss = ntxent_loss(e, e.clone(), temperature=1.0)
    assert float(loss) == pytest.approx(-math.log(math.e / (math.e + 2)), abs=1e-12)


def test_ntxent_symmetry_and_bounds():
    g = torch.Generator().manual_seed(3)
    a, b = torch.randn(6, 4, generator=g), torch.randn(6, 4, generator=g)
    assert torch.equal(ntxent_loss(a, b), ntxent_loss(b, a))
    assert float(ntxent_loss(a, b)) >= 0
    with pytest.raises(InsufficientNegativesError):
        ntxent_loss(a[:1], b[:1])
    with pytest.raises(ValueError):
        ntxent_loss(a, b[:, :3])
    with pytest.raises(ValueError):
        ntxent_loss(a, b, temperature=0.0)


@settings(max_examples=25, deadline=None)
@given(st.integers(2, 8), st.integers(2, 6), st.integers(0, 10_000))
def test_ntxent_rotation_invariance(b, d, seed):
    g = torch.Generator().manual_seed(seed)
    zi = torch.randn(b, d, dtype=torch.float64, generator=g)
    zj = torch.randn(b, d, dtype=torch.float64, generator=g)
    q, _ = torch.linalg.qr(torch.randn(d, d, dtype=torch.float64, generator=g))
    assert float(ntxent_loss(zi @ q, zj @ q)) == pytest.approx(float(ntxent_loss(zi, zj)), abs=1e-6)


def test_total_loss_mixing():
    x = torch.randn(3, 4)
    p = torch.randn(3, 4)
    m = torch.ones(3, 4)
    zi, zj = torch.randn(4, 2), torch.randn(4, 2)
    t0, rec, con = total_loss(x, p, m, zi, zj, gamma=0.0)
    assert torch.equal(t0, rec)
    t1, _, _ = total_loss(x, p, m, zi, zj, gamma=1.0)
    assert torch.equal(t1, con)
    th, rec, con = total_loss(x, p, m, zi, zj, gamma=0.5)
    assert float(th) == pytest.approx(0.5 * float(rec) + 0.5 * float(con))
    with pytest.raises(ValueError):
        total_loss(x, p, m, zi, zj, gamma=1.5)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 12), st.integers(0, 2**31 - 1))
def test_masked_stats_enumeration_property(d_t, seed):
    gen = np.random.default_rng(seed)
    tok = gen.normal(size=d_t)
    mask = (gen.random(d_t) > 0.5).astype(float)
    mask[gen.integers(d_t)] = 1
    mu, sigma = masked_token_stats(torch.tensor(tok), torch.tensor(mask))
    sel = tok[mask > 0]
    assert abs(float(mu) - sel.mean()) <= 1e-9
    assert abs(float(sigma) - (sel.std() + 1e-6)) <= 1e-9
