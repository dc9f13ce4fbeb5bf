import copy
import math

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from latentnav.config import LossWeights
from latentnav.model import NavModel
from latentnav.worldmodel import (
    BeliefState,
    NonFiniteError,
    WorldModel,
    gaussian_kl,
    kl_balanced_loss,
    pyramid_levels,
    semantic_loss,
    world_model_loss,
)

from helpers import fixed_noise, gradient_check, micro_config, random_batch, surrogate_loss


@pytest.fixture
def wm(tiny_cfg):
    torch.manual_seed(0)
    return WorldModel(tiny_cfg.model, tiny_cfg.camera.n_rows, tiny_cfg.camera.n_rays).eval()


def img(cfg, seed=0, lead=(2,)):
    g = torch.Generator().manual_seed(seed)
    return torch.rand(*lead, cfg.camera.n_rows, cfg.camera.n_rays, 3, generator=g)


# -- encoders ---------------------------------------------------------------------


def test_image_encoder_contract(wm, tiny_cfg):
    x = img(tiny_cfg)
    u = wm.encode_image(x)
    assert u.shape == (2, tiny_cfg.model.image_embed) and torch.isfinite(u).all()
    assert torch.equal(u, wm.encode_image(x.clone()))
    y = x.clone()
    y[0, 3, 5, 1] += 0.5
    assert not torch.allclose(wm.encode_image(y)[0], u[0])
    with pytest.raises(ValueError):
        wm.encode_image(torch.zeros(2, 5, 5, 3))


def test_speed_encoder(wm, tiny_cfg):
    m0 = wm.encode_speed(torch.tensor([0.0]))
    m1 = wm.encode_speed(torch.tensor([1.0]))
    assert m0.shape == (1, tiny_cfg.model.speed_embed) and torch.isfinite(m0).all()
    assert torch.equal(m0, wm.encode_speed(torch.tensor([0.0])))
    assert not torch.allclose(m0, m1)
    with pytest.raises(NonFiniteError):
        wm.encode_speed(torch.tensor([float("nan")]))


def test_action_encoder(wm, tiny_cfg):
    z = wm.encode_action(torch.zeros(1, 6))
    assert z.shape == (1, tiny_cfg.model.action_embed) and torch.isfinite(z).all()
    a = torch.tensor([[0.5, 0, 0, 0, 0, 0.3]])
    assert torch.equal(wm.encode_action(a), wm.encode_action(a.clone()))
    assert not torch.allclose(wm.encode_action(a), z)
    with pytest.raises(ValueError):
        wm.encode_action(torch.zeros(1, 5))


# -- belief heads -----------------------------------------------------------------


def _inputs(wm, cfg, B=3, seed=0):
    g = torch.Generator().manual_seed(seed)
    h = torch.randn(B, cfg.model.history_dim, generator=g)
    a = torch.randn(B, 6, generator=g)
    o = wm.observe(img(cfg, seed, (B,)), torch.rand(B, generator=g))
    return h, a, o


def test_sigma_floor_and_eval_mean(wm, tiny_cfg):
    h, a, o = _inputs(wm, tiny_cfg)
    for b in (wm.estimate_state(h, a, o), wm.predict_state(h, a)):
        assert (b.sigma > tiny_cfg.model.sigma_min).all()
        assert torch.equal(b.sample, b.mu)


@pytest.mark.parametrize("head", ["estimate", "predict"])
def test_monte_carlo_mean(wm, tiny_cfg, head):
    h, a, o = _inputs(wm, tiny_cfg, B=1)
    h, a, o = (t.expand(10_000, -1) for t in (h, a, o))
    wm.sample_in_eval = True
    torch.manual_seed(1)
    with torch.no_grad():
        b = wm.estimate_state(h, a, o) if head == "estimate" else wm.predict_state(h, a)
    wm.sample_in_eval = False
    n = b.sample.shape[0]
    err = (b.sample.mean(0) - b.mu[0]).abs()
    assert (err < 4 * b.sigma[0] / math.sqrt(n)).all()
    assert torch.allclose(b.sample.std(0), b.sigma[0], rtol=0.05)


def test_reparameterization_is_differentiable(wm, tiny_cfg):
    wm.train()
    h, a, o = _inputs(wm, tiny_cfg)
    b = wm.estimate_state(h, a, o, noise=torch.ones(3, tiny_cfg.model.state_dim))
    assert torch.allclose(b.sample, b.mu + b.sigma)
    b.sample.sum().backward()
    assert wm.estimator.net[0].weight.grad.abs().sum() > 0


def test_estimator_and_predictor_have_separate_parameters(wm):
    ids = {id(p) for p in wm.estimator.parameters()}
    assert not ids & {id(p) for p in wm.predictor.parameters()}


def test_gru_zero_weights_halves_history(tiny_cfg):
    wm = WorldModel(tiny_cfg.model, tiny_cfg.camera.n_rows, tiny_cfg.camera.n_rays)
    for p in wm.gru.parameters():
        p.data.zero_()
    h = torch.randn(2, tiny_cfg.model.history_dim)
    s = torch.randn(2, tiny_cfg.model.state_dim)
    # r = z = sigmoid(0) = 1/2, n = tanh(0) = 0, h' = (1 - z) n + z h
    assert torch.allclose(wm.advance_history(h, s), 0.5 * h)


def test_gru_matches_hand_equations(wm, tiny_cfg):
    h = torch.randn(2, tiny_cfg.model.history_dim)
    s = torch.randn(2, tiny_cfg.model.state_dim)
    g = wm.gru
    gi = s @ g.weight_ih.T + g.bias_ih
    gh = h @ g.weight_hh.T + g.bias_hh
    ir, iz, inn = gi.chunk(3, -1)
    hr, hz, hn = gh.chunk(3, -1)
    r, z = torch.sigmoid(ir + hr), torch.sigmoid(iz + hz)
    n = torch.tanh(inn + r * hn)
    assert torch.allclose(wm.advance_history(h, s), (1 - z) * n + z * h, atol=1e-6)


def test_form_latent_history_first():
    h = torch.full((1, 3), 7.0)
    s = torch.full((1, 2), -1.0)
    z = WorldModel.form_latent(h, s)
    assert z.shape == (1, 5)
    assert torch.equal(z[:, :3], h) and torch.equal(z[:, 3:], s)


# -- rollout ----------------------------------------------------------------------


def _seq(wm, cfg, B=2, T=5, seed=0):
    g = torch.Generator().manual_seed(seed)
    o = wm.observe(img(cfg, seed, (B, T)), torch.rand(B, T, generator=g))
    a = torch.randn(B, T, 6, generator=g)
    return a, o


def test_rollout_shapes(wm, tiny_cfg):
    a, o = _seq(wm, tiny_cfg)
    r = wm.rollout(wm.initial_history(2), a, o, "estimate")
    D = tiny_cfg.model
    assert r.posterior.mu.shape == r.prior.mu.shape == (2, 5, D.state_dim)
    assert r.latent.shape == (2, 5, D.history_dim + D.state_dim)
    assert len(r) == 5


def test_predict_mode_ignores_observations(wm, tiny_cfg):
    a, o = _seq(wm, tiny_cfg)
    r1 = wm.rollout(wm.initial_history(2), a, o, "predict")
    r2 = wm.rollout(wm.initial_history(2), a, None, "predict")
    assert r1.posterior is None
    assert torch.equal(r1.latent, r2.latent)


def test_estimate_needs_observations(wm, tiny_cfg):
    a, _ = _seq(wm, tiny_cfg)
    with pytest.raises(ValueError):
        wm.rollout(wm.initial_history(2), a, None, "estimate")


def test_mixed_one_observed_four_imagined(wm, tiny_cfg):
    a, o = _seq(wm, tiny_cfg)
    r = wm.rollout(wm.initial_history(2), a, o[:, :1], "mixed", n_observed=1)
    assert r.posterior.mu.shape[1] == 1 and r.prior.mu.shape[1] == 5
    # imagined steps are driven by the prior mean in eval mode
    assert torch.equal(r.latent[:, 1, -tiny_cfg.model.state_dim:], r.prior.mu[:, 1])


def test_rollout_causality(wm, tiny_cfg):
    a, o = _seq(wm, tiny_cfg)
    base = wm.rollout(wm.initial_history(2), a, o, "estimate")
    o2 = o.clone()
    o2[:, 2] += 1.0
    pert = wm.rollout(wm.initial_history(2), a, o2, "estimate")
    assert torch.equal(base.posterior.mu[:, :2], pert.posterior.mu[:, :2])
    assert not torch.allclose(base.posterior.mu[:, 2], pert.posterior.mu[:, 2])
    assert not torch.allclose(base.posterior.mu[:, 3], pert.posterior.mu[:, 3])


# -- decoders ---------------------------------------------------------------------


def test_semantic_pyramid(wm, tiny_cfg):
    z = torch.randn(3, wm.latent_dim)
    pyr = wm.decode_semantic(z)
    H, W = tiny_cfg.camera.n_rows, tiny_cfg.camera.n_rays
    assert len(pyr) == pyramid_levels(H, W, (4, 6)) + 1
    for k, lv in enumerate(pyr):
        assert lv.shape == (3, 7, 4 * 2**k, 6 * 2**k)
    assert pyr[-1].shape[-2:] == (H, W)
    assert not torch.allclose(pyr[-1][0], pyr[-1][1])


def test_pyramid_levels_rejects_bad_size():
    with pytest.raises(ValueError):
        pyramid_levels(30, 48, (4, 6))


def test_rgb_decoder_range(wm, tiny_cfg):
    out = wm.decode_rgb(torch.randn(2, 4, wm.latent_dim) * 10)
    assert out.shape == (2, 4, tiny_cfg.camera.n_rows, tiny_cfg.camera.n_rays, 3)
    assert out.min() >= 0 and out.max() <= 1


# -- KL ---------------------------------------------------------------------------


def _belief(mu, sigma):
    mu, sigma = torch.as_tensor(mu, dtype=torch.float64), torch.as_tensor(sigma, dtype=torch.float64)
    return BeliefState(mu, sigma, mu)


def test_kl_identity_and_unit_shift():
    p = _belief(torch.zeros(1, 4), torch.ones(1, 4))
    assert float(kl_balanced_loss(p, p)) == 0.0
    for alpha in (0.0, 0.3, 1.0):
        v = kl_balanced_loss(_belief([[1.0]], [[1.0]]), _belief([[0.0]], [[1.0]]), alpha)
        assert float(v) == 0.5


@given(st.integers(0, 10_000))
def test_kl_nonnegative_and_zero_on_self(seed):
    g = torch.Generator().manual_seed(seed)
    mu1, mu2 = torch.randn(8, generator=g, dtype=torch.float64), torch.randn(8, generator=g, dtype=torch.float64)
    s1 = torch.rand(8, generator=g, dtype=torch.float64) + 0.1
    s2 = torch.rand(8, generator=g, dtype=torch.float64) + 0.1
    assert float(gaussian_kl(mu1, s1, mu2, s2)) >= 0
    assert abs(float(gaussian_kl(mu1, s1, mu1, s1))) < 1e-12


def test_kl_matches_scipy_per_dimension():
    from scipy import integrate, stats

    m1, s1, m2, s2 = 0.3, 0.7, -0.4, 1.3
    f = lambda x: stats.norm.pdf(x, m1, s1) * (stats.norm.logpdf(x, m1, s1) - stats.norm.logpdf(x, m2, s2))
    ref, _ = integrate.quad(f, -20, 20)
    got = gaussian_kl(*(torch.tensor([v], dtype=torch.float64) for v in (m1, s1, m2, s2)))
    assert float(got) == pytest.approx(ref, rel=1e-8)


def test_kl_rejects_nonpositive_sigma():
    with pytest.raises(ValueError):
        kl_balanced_loss(_belief([[0.0]], [[0.0]]), _belief([[0.0]], [[1.0]]))


@pytest.mark.parametrize("alpha", [0.0, 0.5, 0.75, 1.0])
def test_kl_gradient_split(alpha):
    mu_q = torch.tensor([[0.8, -0.2]], dtype=torch.float64, requires_grad=True)
    mu_p = torch.tensor([[0.1, 0.4]], dtype=torch.float64, requires_grad=True)
    s_q = torch.tensor([[0.9, 1.2]], dtype=torch.float64)
    s_p = torch.tensor([[1.1, 0.7]], dtype=torch.float64)
    loss = kl_balanced_loss(BeliefState(mu_q, s_q, mu_q), BeliefState(mu_p, s_p, mu_p), alpha)
    gq, gp = torch.autograd.grad(loss, [mu_q, mu_p])
    # plain KL gradient by central differences
    eps = 1e-6

    def fd(which, i):
        out = []
        for sgn in (1, -1):
            q, p = mu_q.detach().clone(), mu_p.detach().clone()
            (q if which == "q" else p)[0, i] += sgn * eps
            out.append(float(gaussian_kl(q, s_q, p, s_p).mean()))
        return (out[0] - out[1]) / (2 * eps)

    for i in range(2):
        assert float(gp[0, i]) == pytest.approx(alpha * fd("p", i), abs=1e-8)
        assert float(gq[0, i]) == pytest.approx((1 - alpha) * fd("q", i), abs=1e-8)


def test_kl_side_switch():
    mu_p = torch.tensor([[0.1]], dtype=torch.float64, requires_grad=True)
    q = _belief([[1.0]], [[1.0]])
    p = BeliefState(mu_p, torch.ones(1, 1, dtype=torch.float64), mu_p)
    (g_prior,) = torch.autograd.grad(kl_balanced_loss(q, p, 0.75, "prior"), [mu_p])
    (g_post,) = torch.autograd.grad(kl_balanced_loss(q, p, 0.75, "posterior"), [mu_p])
    assert float(g_prior) == pytest.approx(3 * float(g_post))


# -- semantic loss ----------------------------------------------------------------


def _pyramid(B, levels, logits_fn):
    return [logits_fn(B, 4 * 2**k, 6 * 2**k) for k in range(levels)]


def test_uniform_logits_give_log7_per_level():
    label = torch.randint(0, 7, (2, 16, 24))
    pyr = _pyramid(2, 3, lambda B, h, w: torch.zeros(B, 7, h, w))
    assert float(semantic_loss(pyr, label)) == pytest.approx(3 * math.log(7), rel=1e-6)


def test_confident_correct_logits_give_zero():
    label = torch.randint(0, 7, (2, 16, 24))
    pyr = []
    for k in range(3):
        h, w = 4 * 2**k, 6 * 2**k
        lab = label[:, :: 16 // h, :: 24 // w]
        pyr.append(torch.nn.functional.one_hot(lab, 7).permute(0, 3, 1, 2).float() * 50)
    assert float(semantic_loss(pyr, label)) < 1e-6


def test_class_permutation_symmetry():
    g = torch.Generator().manual_seed(0)
    label = torch.randint(0, 7, (2, 8, 12), generator=g)
    pyr = [torch.randn(2, 7, 4, 6, generator=g), torch.randn(2, 7, 8, 12, generator=g)]
    perm = torch.randperm(7, generator=g)
    inv = torch.argsort(perm)
    pyr_p = [lv[:, perm] for lv in pyr]
    label_p = inv[label]
    assert float(semantic_loss(pyr, label)) == pytest.approx(float(semantic_loss(pyr_p, label_p)), rel=1e-6)


def test_full_level_alone_is_plain_cross_entropy():
    g = torch.Generator().manual_seed(1)
    label = torch.randint(0, 7, (3, 8, 12), generator=g)
    logits = torch.randn(3, 7, 8, 12, generator=g)
    ref = -torch.log_softmax(logits, 1).gather(1, label[:, None]).mean()
    assert float(semantic_loss([logits], label)) == pytest.approx(float(ref), rel=1e-6)


def test_invalid_class_id():
    with pytest.raises(ValueError):
        semantic_loss([torch.zeros(1, 7, 4, 6)], torch.full((1, 4, 6), 7))


# -- composite loss ---------------------------------------------------------------


def _micro(seed=0):
    cfg = micro_config()
    torch.manual_seed(seed)
    return cfg, NavModel(cfg).double().train()


def test_all_zero_weights_give_zero():
    cfg, m = _micro()
    b, nz = random_batch(cfg), fixed_noise(cfg)
    out = m(b, 2, nz)
    w = LossWeights(0, 0, 0, 0, 0)
    total, parts = world_model_loss(out, b, w, 2)
    assert float(total) == 0.0 and parts == {"total": 0.0}


def test_kl_isolation():
    cfg, m = _micro()
    b, nz = random_batch(cfg), fixed_noise(cfg)
    out = m(b, 1, nz)
    total, _ = world_model_loss(out, b, LossWeights(0, 0, 0, 0, 0.001), 1)
    r = out["rollout"]
    expect = 0.001 * float(kl_balanced_loss(r.posterior, r.prior).detach())
    assert float(total.detach()) == pytest.approx(expect, rel=1e-12)


def test_stage_terms():
    cfg, m = _micro()
    b, nz = random_batch(cfg), fixed_noise(cfg)
    _, p1 = m.loss(b, 1, nz)
    _, p2 = m.loss(b, 2, nz)
    assert set(p1) == {"semantic", "rgb", "kl", "total"}
    assert set(p2) == {"semantic", "kl", "action", "path", "total"}


def test_nonfinite_term_is_named():
    cfg, m = _micro()
    b, nz = random_batch(cfg), fixed_noise(cfg)
    b["image"] = b["image"].clone()
    out = m(b, 1, nz)
    out["rgb"] = out["rgb"] * float("nan")
    with pytest.raises(NonFiniteError, match="rgb"):
        world_model_loss(out, b, cfg.loss, 1)


def test_stage2_gradient_matches_finite_differences():
    cfg, m = _micro(3)
    b, nz = random_batch(cfg, seed=3), fixed_noise(cfg)
    frozen = copy.deepcopy(m)
    worst, n = gradient_check(
        lambda: m.loss(b, 2, nz)[0],
        [p for name, p in m.named_parameters() if "rgb_decoder" not in name],
        per_tensor=2,
        numeric_fn=lambda: surrogate_loss(m, frozen, b, 2, nz),
    )
    assert n > 50 and worst < 1e-3
