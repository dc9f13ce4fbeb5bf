"""Full navigation model (world model + policy), the stateless behaviour-cloning
baseline, and helpers to feed dataset batches and closed-loop observations.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .config import Config
from .policy import PolicyNet, RouteEncoder, Fuser, imitation_loss, route_tensors, stored_route_tensors
from .sim.route import RouteSegment
from .worldmodel import ImageEncoder, VectorEncoder, WorldModel, mlp, world_model_loss


def batch_to_tensors(batch: dict, dtype=torch.float32) -> dict:
    out = {
        "image": torch.as_tensor(batch["image"], dtype=dtype),
        "speed": torch.as_tensor(batch["speed"], dtype=dtype),
        "semantic_label": torch.as_tensor(batch["semantic_label"]).long(),
        "action": torch.as_tensor(batch["action"], dtype=dtype),
        "prev_action": torch.as_tensor(batch["prev_action"], dtype=dtype),
    }
    if "route" in batch:
        out.update(stored_route_tensors(batch["route"], batch["route_valid"], batch["route_dest"], dtype))
        out["path"] = torch.as_tensor(batch["path"], dtype=dtype)
    return out


@dataclass
class AgentState:
    h: torch.Tensor
    prev_action: torch.Tensor


class NavModel(nn.Module):
    def __init__(self, cfg: Config):
        super().__init__()
        self.cfg = cfg
        cam = cfg.camera
        self.world = WorldModel(cfg.model, cam.n_rows, cam.n_rays)
        self.policy = PolicyNet(cfg.model, self.world.latent_dim)

    def forward(self, batch: dict, stage: int = 1, noise=None, decode_semantic: bool | None = None) -> dict:
        wm = self.world
        B = batch["prev_action"].shape[0]
        o = wm.observe(batch["image"], batch["speed"])
        r = wm.rollout(wm.initial_history(B), batch["prev_action"], o, "estimate", noise=noise)
        out = {"rollout": r}
        if decode_semantic is None:
            decode_semantic = bool(self.cfg.loss.semantic) and not self.cfg.train.no_semantic
        if decode_semantic:
            out["semantic"] = wm.decode_semantic(r.latent)
        if stage == 1:
            out["rgb"] = wm.decode_rgb(r.latent)
        if stage == 2:
            out["action"], out["path"] = self.policy(r.latent, batch["route"], batch["route_mask"], batch["route_dest"])
        return out

    def loss(self, batch: dict, stage: int = 1, noise=None):
        weights = self.cfg.loss
        if self.cfg.train.no_semantic:
            weights = type(weights)(**{**weights.__dict__, "semantic": 0.0})
        out = self(batch, stage, noise)
        m = self.cfg.model
        return world_model_loss(out, batch, weights, stage, m.kl_alpha, m.kl_alpha_side)

    # -- closed-loop interface --------------------------------------------------

    def initial_state(self) -> AgentState:
        p = next(self.parameters())
        return AgentState(self.world.initial_history(1), torch.zeros(1, 6, dtype=p.dtype))

    @torch.no_grad()
    def step(self, image: np.ndarray, speed: float, segment: RouteSegment, state: AgentState, reset: bool = False):
        """One control cycle.  Returns ``(action (6,), path (5, 2), new_state, latent)``.

        With ``reset`` the history is re-initialised before estimating, so
        nothing from earlier cycles is carried except the previous command.
        """
        wm = self.world
        p = next(self.parameters())
        img = torch.as_tensor(image, dtype=p.dtype)[None]
        spd = torch.tensor([float(speed)], dtype=p.dtype)
        h = wm.initial_history(1) if reset else state.h
        o = wm.observe(img, spd)
        post = wm.estimate_state(h, state.prev_action, o)
        z = wm.form_latent(h, post.sample)
        rt = route_tensors([segment], p.dtype)
        action, path = self.policy(z, rt["route"], rt["route_mask"], rt["route_dest"])
        new_h = wm.advance_history(h, post.sample)
        return action[0].numpy().astype(np.float64), path[0].numpy(), AgentState(new_h, action.clone()), z

    @torch.no_grad()
    def predict_open_loop(self, episode) -> tuple[np.ndarray, np.ndarray]:
        """Estimate-mode rollout over frames 1..N-1 with logged previous actions."""
        p = next(self.parameters())
        a = episode.arrays
        sl = slice(1, len(episode))
        image = torch.as_tensor(a["image"][sl], dtype=p.dtype)[None]
        speed = torch.as_tensor(a["speed"][sl], dtype=p.dtype)[None]
        prev = torch.as_tensor(a["action_command"][:-1], dtype=p.dtype)[None]
        wm = self.world
        r = wm.rollout(wm.initial_history(1), prev, wm.observe(image, speed), "estimate")
        rt = stored_route_tensors(a["route"][sl], episode.route_valid[sl], episode.route_dest[sl], p.dtype)
        action, path = self.policy(r.latent, rt["route"][None], rt["route_mask"][None], rt["route_dest"][None])
        return action[0].numpy(), path[0].numpy()

    @torch.no_grad()
    def reconstruct_semantics(self, episode) -> np.ndarray:
        """Class maps decoded from estimated latents for frames 1..N-1."""
        p = next(self.parameters())
        a = episode.arrays
        wm = self.world
        image = torch.as_tensor(a["image"][1:], dtype=p.dtype)[None]
        speed = torch.as_tensor(a["speed"][1:], dtype=p.dtype)[None]
        prev = torch.as_tensor(a["action_command"][:-1], dtype=p.dtype)[None]
        r = wm.rollout(wm.initial_history(1), prev, wm.observe(image, speed), "estimate")
        return wm.decode_semantic(r.latent)[-1].argmax(-3)[0].numpy().astype(np.uint8)

    @torch.no_grad()
    def predict_semantics(self, episode, start: int, horizon: int, use_policy: bool = False) -> np.ndarray:
        """Observe frame ``start`` then imagine ``horizon`` steps; returns (horizon, H, W) class maps.

        Imagined steps use the logged actions, or the learned policy's own
        commands (with the logged route) when ``use_policy`` is set.
        """
        p = next(self.parameters())
        wm = self.world
        a = episode.arrays
        img = torch.as_tensor(a["image"][start], dtype=p.dtype)[None]
        spd = torch.as_tensor(a["speed"][start : start + 1], dtype=p.dtype)
        prev = torch.as_tensor(a["action_command"][start - 1], dtype=p.dtype)[None]
        h = wm.initial_history(1)
        post = wm.estimate_state(h, prev, wm.observe(img, spd))
        s = post.sample
        preds = []
        for k in range(horizon):
            t = start + k
            if use_policy:
                z = wm.form_latent(h, s)
                rt = stored_route_tensors(a["route"][t], episode.route_valid[t], episode.route_dest[t], p.dtype)
                act, _ = self.policy(z, rt["route"][None], rt["route_mask"][None], rt["route_dest"][None])
            else:
                act = torch.as_tensor(a["action_command"][t], dtype=p.dtype)[None]
            h = wm.advance_history(h, s)
            prior = wm.predict_state(h, act)
            s = prior.sample
            logits = wm.decode_semantic(wm.form_latent(h, s))[-1]
            preds.append(logits.argmax(1)[0].numpy().astype(np.uint8))
        return np.stack(preds)


class BCModel(nn.Module):
    """Stateless baseline: observation and route straight to action and path."""

    def __init__(self, cfg: Config):
        super().__init__()
        self.cfg = cfg
        m, cam = cfg.model, cfg.camera
        self.image_encoder = ImageEncoder(cam.n_rows, cam.n_rays, list(m.encoder_channels), m.image_embed)
        self.speed_encoder = VectorEncoder(1, m.speed_embed, "speed")
        self.route_encoder = RouteEncoder(m.route_embed, m.route_layers)
        self.fuser = Fuser(m.image_embed + m.speed_embed, m.route_embed, m.token_dim, m.n_heads, m.policy_dim)
        self.action_head = mlp([m.policy_dim, m.hidden_dim, 6])
        self.path_head = mlp([m.policy_dim, m.hidden_dim, 2 * m.path_len])

    def forward(self, image, speed, route, mask, dest):
        o = torch.cat([self.image_encoder(image), self.speed_encoder(speed)], dim=-1)
        p = self.fuser(o, self.route_encoder(route, mask, dest))
        return self.action_head(p), self.path_head(p).reshape(*p.shape[:-1], self.cfg.model.path_len, 2)

    def loss(self, batch: dict, stage: int = 2, noise=None):
        action, path = self(batch["image"], batch["speed"], batch["route"], batch["route_mask"], batch["route_dest"])
        total, parts = imitation_loss(action, path, batch["action"], batch["path"], self.cfg.loss)
        breakdown = {k: float(v.detach()) for k, v in parts.items()}
        breakdown["total"] = float(total.detach())
        return total, breakdown

    def initial_state(self):
        return None

    @torch.no_grad()
    def step(self, image, speed, segment: RouteSegment, state=None, reset: bool = False):
        p = next(self.parameters())
        img = torch.as_tensor(image, dtype=p.dtype)[None]
        spd = torch.tensor([float(speed)], dtype=p.dtype)
        rt = route_tensors([segment], p.dtype)
        action, path = self(img, spd, rt["route"], rt["route_mask"], rt["route_dest"])
        return action[0].numpy().astype(np.float64), path[0].numpy(), None, None

    @torch.no_grad()
    def predict_open_loop(self, episode) -> tuple[np.ndarray, np.ndarray]:
        p = next(self.parameters())
        a = episode.arrays
        sl = slice(1, len(episode))
        rt = stored_route_tensors(a["route"][sl], episode.route_valid[sl], episode.route_dest[sl], p.dtype)
        action, path = self(
            torch.as_tensor(a["image"][sl], dtype=p.dtype),
            torch.as_tensor(a["speed"][sl], dtype=p.dtype),
            rt["route"], rt["route_mask"], rt["route_dest"],
        )
        return action.numpy(), path.numpy()


def build_model(cfg: Config, kind: str = "world") -> nn.Module:
    if kind == "world":
        return NavModel(cfg)
    if kind == "bc":
        return BCModel(cfg)
    raise ValueError(f"unknown model kind {kind!r}")


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())
