"""Route-conditioned action policy: polyline route encoder, self-attention
fusion with the latent state, action and path heads, and the imitation loss.
"""

from __future__ import annotations

import numpy as np
import torch
import torch.nn as nn

from .config import LossWeights, ModelConfig
from .sim.route import RouteSegment, localize_route, segment_from_stored, to_robot_frame, to_world_frame
from .worldmodel import mlp

__all__ = [
    "RouteSegment",
    "localize_route",
    "segment_from_stored",
    "to_robot_frame",
    "to_world_frame",
    "RouteEncoder",
    "Fuser",
    "PolicyNet",
    "imitation_loss",
    "route_tensors",
]


def route_tensors(segments: list[RouteSegment], dtype=torch.float32) -> dict:
    """Stack route segments into ``route`` (B,n,2), ``route_mask`` (B,n), ``route_dest`` (B,n)."""
    return {
        "route": torch.as_tensor(np.stack([s.poses for s in segments]), dtype=dtype),
        "route_mask": torch.as_tensor(np.stack([s.valid for s in segments])),
        "route_dest": torch.as_tensor(np.stack([s.destination for s in segments]), dtype=dtype),
    }


def stored_route_tensors(route: np.ndarray, valid: np.ndarray, dest_code: np.ndarray, dtype=torch.float32) -> dict:
    """Route tensors from dataset arrays of shape (..., n, 2), (...), (...)."""
    n = route.shape[-2]
    mask = np.arange(n) < valid[..., None]
    dest = np.zeros(mask.shape)
    last = np.clip(valid - 1, 0, n - 1)
    one_hot = np.arange(n) == last[..., None]
    dest = np.where((dest_code == 1)[..., None] & one_hot, 1.0, dest)
    dest = np.where((dest_code == 2)[..., None], 1.0, dest)
    return {
        "route": torch.as_tensor(np.where(mask[..., None], route, 0.0), dtype=dtype),
        "route_mask": torch.as_tensor(mask),
        "route_dest": torch.as_tensor(dest, dtype=dtype),
    }


class _SubgraphLayer(nn.Module):
    def __init__(self, in_dim: int, hidden: int):
        super().__init__()
        self.fc = nn.Linear(in_dim, hidden)
        self.norm = nn.LayerNorm(hidden)

    def forward(self, x, mask):
        x = torch.nn.functional.silu(self.norm(self.fc(x)))
        pooled = x.masked_fill(~mask[..., None], float("-inf")).amax(dim=-2, keepdim=True)
        return torch.cat([x, pooled.expand_as(x)], dim=-1)


class RouteEncoder(nn.Module):
    """Polyline subgraph encoder over route vectors.

    Vector ``k`` runs from pose ``k-1`` (the robot origin for ``k = 0``) to pose
    ``k`` and carries the destination flag of pose ``k``.  Masked vectors are
    excluded from every max-pool.
    """

    def __init__(self, out_dim: int = 64, n_layers: int = 4, hidden: int = 32):
        super().__init__()
        dims = [5] + [2 * hidden] * n_layers
        self.layers = nn.ModuleList(_SubgraphLayer(dims[i], hidden) for i in range(n_layers))
        self.out = nn.Linear(2 * hidden, out_dim)

    def forward(self, route: torch.Tensor, mask: torch.Tensor, dest: torch.Tensor) -> torch.Tensor:
        mask = mask.bool()
        if not mask.any(dim=-1).all():
            raise ValueError("route segment has no valid rows")
        pts = torch.where(mask[..., None], route, torch.zeros_like(route))
        start = torch.cat([torch.zeros_like(pts[..., :1, :]), pts[..., :-1, :]], dim=-2)
        x = torch.cat([start, pts, dest[..., None]], dim=-1)
        x = torch.where(mask[..., None], x, torch.zeros_like(x))
        for layer in self.layers:
            x = layer(x, mask)
        pooled = x.masked_fill(~mask[..., None], float("-inf")).amax(dim=-2)
        return self.out(pooled)


class Fuser(nn.Module):
    """One pre-norm self-attention block over the two tokens [latent, route]."""

    def __init__(self, latent_dim: int, route_dim: int, token_dim: int, n_heads: int, out_dim: int):
        super().__init__()
        self.proj_z = nn.Linear(latent_dim, token_dim)
        self.proj_g = nn.Linear(route_dim, token_dim)
        self.norm1 = nn.LayerNorm(token_dim)
        self.attn = nn.MultiheadAttention(token_dim, n_heads, batch_first=True)
        self.norm2 = nn.LayerNorm(token_dim)
        self.ff = mlp([token_dim, 2 * token_dim, token_dim])
        self.out = nn.Linear(2 * token_dim, out_dim)

    def forward(self, z: torch.Tensor, g: torch.Tensor) -> torch.Tensor:
        lead = z.shape[:-1]
        x = torch.stack([self.proj_z(z.reshape(-1, z.shape[-1])), self.proj_g(g.reshape(-1, g.shape[-1]))], dim=1)
        y = self.norm1(x)
        x = x + self.attn(y, y, y, need_weights=False)[0]
        x = x + self.ff(self.norm2(x))
        return self.out(x.flatten(1)).reshape(*lead, -1)


class PolicyNet(nn.Module):
    def __init__(self, cfg: ModelConfig, latent_dim: int):
        super().__init__()
        self.cfg = cfg
        self.route_encoder = RouteEncoder(cfg.route_embed, cfg.route_layers)
        self.fuser = Fuser(latent_dim, cfg.route_embed, cfg.token_dim, cfg.n_heads, cfg.policy_dim)
        self.action_head = mlp([cfg.policy_dim, cfg.hidden_dim, 6])
        self.path_head = mlp([cfg.policy_dim, cfg.hidden_dim, 2 * cfg.path_len])

    def encode_route(self, route, mask, dest) -> torch.Tensor:
        return self.route_encoder(route, mask, dest)

    def fuse(self, z, g) -> torch.Tensor:
        return self.fuser(z, g)

    def decode_action(self, p) -> torch.Tensor:
        return self.action_head(p)

    def decode_path(self, p) -> torch.Tensor:
        return self.path_head(p).reshape(*p.shape[:-1], self.cfg.path_len, 2)

    def forward(self, z, route, mask, dest):
        p = self.fuse(z, self.encode_route(route, mask, dest))
        return self.decode_action(p), self.decode_path(p)


def imitation_loss(pred_action, pred_path, target_action, target_path, weights: LossWeights | None = None):
    """Weighted L1 imitation loss; returns ``(total, {"action": ..., "path": ...})``.

    The breakdown holds the unweighted mean absolute errors.
    """
    if target_action is None or target_path is None:
        raise ValueError("imitation loss needs action and path targets (teacher data only)")
    weights = weights or LossWeights()
    la = (pred_action - target_action).abs().mean()
    lp = (pred_path - target_path).abs().mean()
    return weights.action * la + weights.path * lp, {"action": la, "path": lp}
