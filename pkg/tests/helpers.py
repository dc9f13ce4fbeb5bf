"""Oracles shared by unit and acceptance tests."""

import numpy as np
import torch

from latentnav.config import load_config
from latentnav.policy import stored_route_tensors

MICRO = [
    "camera.n_rows=8",
    "camera.n_rays=12",
    "model.image_embed=6",
    "model.speed_embed=3",
    "model.action_embed=5",
    "model.history_dim=8",
    "model.state_dim=4",
    "model.hidden_dim=10",
    "model.policy_dim=6",
    "model.token_dim=4",
    "model.n_heads=2",
    "model.route_embed=64",
    "model.encoder_channels=[3,3]",
    "model.decoder_channels=3",
    "model.semantic_base=[4,6]",
]


def micro_config(extra=()):
    return load_config(overrides=MICRO + list(extra)).config


def random_batch(cfg, B=2, T=2, seed=0, dtype=torch.float64):
    g = np.random.default_rng(seed)
    H, W = cfg.camera.n_rows, cfg.camera.n_rays
    valid = g.integers(3, 21, size=(B, T))

    rt = stored_route_tensors(g.normal(size=(B, T, 20, 2)), valid, g.integers(0, 3, size=(B, T)), dtype)
    return {
        "image": torch.as_tensor(g.random((B, T, H, W, 3)), dtype=dtype),
        "speed": torch.as_tensor(g.random((B, T)), dtype=dtype),
        "semantic_label": torch.as_tensor(g.integers(0, 7, (B, T, H, W))),
        "action": torch.as_tensor(g.normal(size=(B, T, 6)), dtype=dtype),
        "prev_action": torch.as_tensor(g.normal(size=(B, T, 6)), dtype=dtype),
        "path": torch.as_tensor(g.normal(size=(B, T, 5, 2)), dtype=dtype),
        **rt,
    }


def fixed_noise(cfg, B=2, T=2, seed=1, dtype=torch.float64):
    g = torch.Generator().manual_seed(seed)
    D = cfg.model.state_dim
    return {"post": torch.randn(B, T, D, generator=g, dtype=dtype), "prior": torch.randn(B, T, D, generator=g, dtype=dtype)}


def gradient_check(loss_fn, params, per_tensor=4, eps=1e-5, seed=0, floor=1e-7, numeric_fn=None):
    """Max relative error between autograd and central differences.

    Autograd runs on ``loss_fn``; differences on ``numeric_fn`` (default the
    same function).  ``per_tensor`` coordinates are probed in every tensor.
    Coordinates where both gradients are below ``floor`` in magnitude are skipped.
    """
    loss = loss_fn()
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    numeric_fn = numeric_fn or loss_fn
    rng = np.random.default_rng(seed)
    worst, n = 0.0, 0
    for p, gp in zip(params, grads):
        gp = torch.zeros_like(p) if gp is None else gp
        flat = p.data.view(-1)
        idx = rng.choice(flat.numel(), min(per_tensor, flat.numel()), replace=False)
        for i in idx:
            old = flat[i].item()
            with torch.no_grad():
                flat[i] = old + eps
                up = numeric_fn().item()
                flat[i] = old - eps
                dn = numeric_fn().item()
                flat[i] = old
            num = (up - dn) / (2 * eps)
            ana = gp.reshape(-1)[i].item()
            scale = max(abs(num), abs(ana))
            if scale < floor:
                continue
            worst = max(worst, abs(num - ana) / scale)
            n += 1
    return worst, n


def surrogate_loss(model, frozen, batch, stage, noise):
    """Loss whose plain derivative equals the stop-gradient construction.

    KL sides that are detached in training are evaluated with ``frozen`` (a
    parameter snapshot), so central differences see only the live side.
    """
    from dataclasses import replace

    from latentnav.worldmodel import gaussian_kl

    cfg = model.cfg
    w = cfg.loss
    m = cfg.model
    no_kl = replace(w, kl=0.0)
    out = model(batch, stage, noise)
    from latentnav.worldmodel import world_model_loss

    rest, _ = world_model_loss(out, batch, no_kl, stage, m.kl_alpha, m.kl_alpha_side)
    with torch.no_grad():
        r0 = frozen(batch, stage, noise)["rollout"]
    r = out["rollout"]
    a = m.kl_alpha if m.kl_alpha_side == "prior" else 1.0 - m.kl_alpha
    kl_prior_side = gaussian_kl(r0.posterior.mu, r0.posterior.sigma, r.prior.mu, r.prior.sigma).mean()
    kl_post_side = gaussian_kl(r.posterior.mu, r.posterior.sigma, r0.prior.mu, r0.prior.sigma).mean()
    return rest + w.kl * (a * kl_prior_side + (1 - a) * kl_post_side)
