import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from cubespace import discrete as D


def kl_bern_ref(q, e):
    return q * math.log(q / e) + (1 - q) * math.log((1 - q) / (1 - e))


# -- annealing ----------------------------------------------------------------

def test_anneal_endpoints():
    s = D.AnnealSchedule()
    assert D.anneal_tau(s, 0) == pytest.approx(5.0)
    assert D.anneal_tau(s, 1000) == pytest.approx(0.5)
    assert D.anneal_tau(s, 5000) == pytest.approx(0.5)


def test_anneal_midpoint():
    assert D.anneal_tau(D.AnnealSchedule(), 500) == pytest.approx(5.0 * math.sqrt(0.1), abs=1e-5)


def test_anneal_monotone_and_clamped():
    s = D.AnnealSchedule(4.0, 0.25, 37)
    taus = [s(t) for t in range(100)]
    assert all(a >= b for a, b in zip(taus, taus[1:]))
    assert all(t == taus[37] for t in taus[37:])


@pytest.mark.parametrize("kw", [dict(tau_max=0.1, tau_min=0.5), dict(tau_min=0.0), dict(anneal_epochs=0)])
def test_anneal_rejects_bad_schedule(kw):
    with pytest.raises(ValueError):
        D.AnnealSchedule(**kw)


def test_anneal_rejects_negative_epoch():
    with pytest.raises(ValueError):
        D.anneal_tau(D.AnnealSchedule(), -1)


@pytest.mark.parametrize("kw", [dict(F=0), dict(epsilon=0.7), dict(epsilon=0.0), dict(sigma_rec=0), dict(beta3=0.5)])
def test_latent_config_validation(kw):
    with pytest.raises(ValueError):
        D.LatentConfig(**kw)


# -- sampling -----------------------------------------------------------------

def test_bc_median_noise_is_sigmoid_of_scaled_logit():
    l = torch.tensor([0.0, 1.0, -2.0])
    out = D.binary_concrete_sample(l, 2.0, stochastic=False)
    assert torch.allclose(out, torch.sigmoid(l / 2.0))
    assert out[0] == 0.5


def test_bc_sample_open_interval_and_seeded():
    l = torch.zeros(10000)
    a = D.binary_concrete_sample(l, 0.5, D.make_generator(3))
    b = D.binary_concrete_sample(l, 0.5, D.make_generator(3))
    assert torch.equal(a, b)
    assert bool(((a >= 0) & (a <= 1)).all())
    assert torch.isfinite(a).all()


def test_bc_noise_uses_machine_epsilon_guard():
    # extreme uniform draws must not produce infinities
    n = D.logistic_noise((100000,), torch.zeros(1), D.make_generator(0))
    assert torch.isfinite(n).all()


@pytest.mark.parametrize("logit", [-2.0, 0.0, 2.0])
def test_bc_monte_carlo_marginal(logit):
    n = 100000
    s = D.binary_concrete_sample(torch.full((n,), logit, dtype=torch.float64), 0.05, D.make_generator(11))
    p = 1 / (1 + math.exp(-logit))
    assert abs(float(s.round().mean()) - p) <= 3 * math.sqrt(p * (1 - p) / n)


def test_gs_sums_to_one_and_positive():
    for tau in (0.05, 1.0, 50.0):
        s = D.gumbel_softmax_sample(torch.randn(64, 7), tau, D.make_generator(0))
        assert torch.allclose(s.sum(-1), torch.ones(64), atol=1e-6)
        assert bool((s >= 0).all())


def test_gs_large_tau_is_uniform():
    s = D.gumbel_softmax_sample(torch.zeros(4, 5), 1e6, D.make_generator(0))
    assert torch.allclose(s, torch.full((4, 5), 0.2), atol=1e-4)


def test_gs_monte_carlo_argmax_frequencies():
    n = 100000
    logits = torch.tensor([1.0, 0.0, -1.0, 0.5], dtype=torch.float64)
    s = D.gumbel_softmax_sample(logits.expand(n, 4), 0.05, D.make_generator(5))
    freq = torch.bincount(s.argmax(-1), minlength=4).double() / n
    p = torch.softmax(logits, -1)
    bound = 3 * torch.sqrt(p * (1 - p) / n)
    assert bool(((freq - p).abs() <= bound).all())


def test_gs_noise_free_limit_is_onehot():
    s = D.gumbel_softmax_sample(torch.tensor([0.3, 2.0, -1.0]), 1e-3, stochastic=False)
    assert torch.allclose(s, torch.tensor([0.0, 1.0, 0.0]))


# -- determinization --------------------------------------------------------------

def test_determinize_bc_step_and_tie():
    out = D.determinize_bc(torch.tensor([-0.1, 0.0, 0.1]))
    assert out.tolist() == [0.0, 1.0, 1.0]


def test_determinize_gs_lowest_index_tie():
    assert D.determinize_gs(torch.tensor([2.0, 2.0, 1.0])).tolist() == [1.0, 0.0, 0.0]


@given(st.lists(st.floats(1e-2, 20) | st.floats(-20, -1e-2), min_size=1, max_size=8))
def test_determinize_bc_matches_median_noise_limit(ls):
    # the exact tie at 0 is pinned separately; away from it tau=1e-4 is deep in the limit
    l = torch.tensor(ls, dtype=torch.float64)
    lim = D.binary_concrete_sample(l, 1e-4, stochastic=False)
    assert torch.equal(D.determinize_bc(l), lim.round())


@given(st.lists(st.floats(-5, 5), min_size=1, max_size=6))
def test_determinize_idempotent(ls):
    l = torch.tensor(ls)
    oh = D.determinize_gs(l)
    assert torch.equal(D.determinize_gs(oh), oh)
    b = D.determinize_bc(l)
    assert torch.equal(D.determinize_bc(b), torch.ones_like(b))  # bits are >= 0, so step maps both to 1
    assert torch.equal(D.determinize_bc(2 * b - 1), b)


# -- KL terms --------------------------------------------------------------------------

def test_kl_bernoulli_closed_form():
    assert float(D.kl_bernoulli(0.9, 0.1)) == pytest.approx(kl_bern_ref(0.9, 0.1), abs=1e-6)
    assert float(D.kl_bernoulli(0.9, 0.1)) == pytest.approx(1.75778, abs=1e-4)
    assert float(D.kl_bernoulli(0.1, 0.1)) == pytest.approx(0.0, abs=1e-6)
    assert float(D.kl_bernoulli(0.5, 0.5)) == pytest.approx(0.0, abs=1e-6)


def test_kl_bernoulli_clamps_extremes():
    v = D.kl_bernoulli(torch.tensor([0.0, 1.0]), 0.1)
    assert torch.isfinite(v).all()
    assert float(v[1]) == pytest.approx(math.log(1 / 0.1), rel=1e-4)


def test_kl_categorical_uniform_values():
    assert float(D.kl_categorical_uniform(torch.eye(4)[0])) == pytest.approx(math.log(4), abs=1e-6)
    assert float(D.kl_categorical_uniform(torch.full((6,), 1 / 6))) == pytest.approx(0.0, abs=1e-6)


@given(st.lists(st.floats(0.01, 1.0), min_size=2, max_size=8))
def test_kl_categorical_uniform_termwise(ws):
    q = np.array(ws) / sum(ws)
    ref = sum(qk * math.log(qk * len(q)) for qk in q)
    assert float(D.kl_categorical_uniform(torch.tensor(q))) == pytest.approx(max(ref, 0.0), abs=1e-9)


def test_kl_categorical_values():
    assert float(D.kl_categorical(torch.tensor([1.0, 0.0]), torch.tensor([0.5, 0.5]))) == pytest.approx(math.log(2))
    q = torch.tensor([0.2, 0.3, 0.5])
    assert float(D.kl_categorical(q, q)) == pytest.approx(0.0, abs=1e-7)


def test_kl_categorical_gibbs_fuzz():
    g = D.make_generator(0)
    q = torch.softmax(3 * torch.randn(10000, 5, generator=g), -1)
    p = torch.softmax(3 * torch.randn(10000, 5, generator=g), -1)
    assert bool((D.kl_categorical(q, p) >= 0).all())


def test_kl_bernoulli_pair():
    assert float(D.kl_bernoulli_pair(torch.tensor([0.9]), torch.tensor([0.1]))) == pytest.approx(1.75778, abs=1e-4)
    q = torch.tensor([0.2, 0.7, 0.5])
    assert float(D.kl_bernoulli_pair(q, q)) == pytest.approx(0.0, abs=1e-6)


@settings(max_examples=50)
@given(st.lists(st.tuples(st.floats(0.001, 0.999), st.floats(0.001, 0.999)), min_size=1, max_size=6))
def test_kl_bernoulli_pair_is_sum_of_scalar_kls(pairs):
    q = torch.tensor([a for a, _ in pairs], dtype=torch.float64)
    p = torch.tensor([b for _, b in pairs], dtype=torch.float64)
    ref = sum(kl_bern_ref(a, b) for a, b in pairs)
    assert float(D.kl_bernoulli_pair(q, p)) == pytest.approx(ref, rel=1e-6, abs=1e-9)


def test_all_kls_nonnegative_fuzz():
    g = D.make_generator(1)
    q = torch.rand(5000, generator=g)
    p = torch.rand(5000, generator=g)
    assert bool((D.kl_bernoulli(q, 0.1) >= 0).all())
    assert bool((D.kl_bernoulli_pair(q[:, None], p[:, None]) >= 0).all())


# -- Gaussian NLL ------------------------------------------------------------------------

def test_gaussian_nll_values():
    x = torch.tensor([0.3])
    assert float(D.gaussian_nll(x, x, 0.1)) == 0.0
    assert float(D.gaussian_nll(torch.tensor([0.1]), torch.tensor([0.0]), 0.1)) == pytest.approx(0.5)


def test_gaussian_nll_sigma_scaling_and_constant():
    x, y = torch.randn(10), torch.randn(10)
    a = D.gaussian_nll(x, y, 0.1)
    assert float(D.gaussian_nll(x, y, 0.2)) == pytest.approx(float(a) / 4, rel=1e-5)
    c = D.gaussian_nll(x, y, 0.1, include_constant=True)
    assert float(c - a) == pytest.approx(10 * 0.5 * math.log(2 * math.pi * 0.01), rel=1e-5)


def test_gaussian_nll_start_dim_keeps_batch():
    x = torch.zeros(3, 2, 2)
    assert D.gaussian_nll(x, x + 0.1, 0.1, start_dim=1).shape == (3,)


def test_gaussian_nll_rejects_bad_sigma():
    with pytest.raises(ValueError):
        D.gaussian_nll(torch.zeros(1), torch.zeros(1), 0.0)
