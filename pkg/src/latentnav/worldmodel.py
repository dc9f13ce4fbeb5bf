"""Latent world model: observation encoders, recurrent Gaussian state-space
core (posterior estimator, prior predictor, GRU history) and decoders.

Shapes follow (batch, time, feature).  The latent consumed by decoders and the
policy is ``z_t = [h_{t-1}, s_t]``, history first.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import LossWeights, ModelConfig


class NonFiniteError(FloatingPointError):
    pass


def _check_finite(name: str, *ts: torch.Tensor) -> None:
    for t in ts:
        if not torch.isfinite(t).all():
            raise NonFiniteError(f"{name}: non-finite values")


def mlp(sizes: list[int], act=nn.SiLU) -> nn.Sequential:
    layers: list[nn.Module] = []
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        layers.append(nn.Linear(a, b))
        if i < len(sizes) - 2:
            layers.append(act())
    return nn.Sequential(*layers)


@dataclass
class BeliefState:
    mu: torch.Tensor
    sigma: torch.Tensor
    sample: torch.Tensor

    def detach(self) -> "BeliefState":
        return BeliefState(self.mu.detach(), self.sigma.detach(), self.sample.detach())


# -- encoders -----------------------------------------------------------------


class ImageEncoder(nn.Module):
    """Strided conv stack; images arrive channel-last in [0, 1]."""

    def __init__(self, height: int, width: int, channels: list[int], embed: int):
        super().__init__()
        self.height, self.width = height, width
        blocks = []
        c_in = 3
        for c in channels:
            blocks += [nn.Conv2d(c_in, c, 3, stride=2, padding=1), nn.SiLU()]
            c_in = c
        self.conv = nn.Sequential(*blocks)
        with torch.no_grad():
            n_flat = self.conv(torch.zeros(1, 3, height, width)).numel()
        self.fc = nn.Linear(n_flat, embed)

    def forward(self, image: torch.Tensor) -> torch.Tensor:
        if image.shape[-3:] != (self.height, self.width, 3):
            raise ValueError(f"image shape {tuple(image.shape)} does not end in {(self.height, self.width, 3)}")
        lead = image.shape[:-3]
        x = image.reshape(-1, self.height, self.width, 3).permute(0, 3, 1, 2)
        x = self.conv(x - 0.5)
        return self.fc(x.flatten(1)).reshape(*lead, -1)


class VectorEncoder(nn.Module):
    """Two-layer MLP for low-dimensional robot inputs (speed, action)."""

    def __init__(self, in_dim: int, out_dim: int, name: str):
        super().__init__()
        self.in_dim = in_dim
        self.name = name
        self.net = mlp([in_dim, out_dim, out_dim])

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if self.in_dim == 1:
            # scalar inputs arrive without a feature axis: (...,) -> (..., 1)
            x = x.unsqueeze(-1)
        _check_finite(self.name, x)
        return self.net(x)


class NormalHead(nn.Module):
    """Maps features to a diagonal Gaussian with ``sigma = softplus(raw) + sigma_min``."""

    def __init__(self, in_dim: int, hidden: int, out_dim: int, sigma_min: float):
        super().__init__()
        self.net = mlp([in_dim, hidden, 2 * out_dim])
        self.sigma_min = sigma_min

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        mu, raw = self.net(x).chunk(2, dim=-1)
        return mu, F.softplus(raw) + self.sigma_min


# -- decoders -----------------------------------------------------------------


def pyramid_levels(height: int, width: int, base: tuple[int, int]) -> int:
    """Number of x2 upsamplings from ``base`` to (height, width)."""
    bh, bw = base
    n = 0
    h, w = bh, bw
    while h < height:
        h, w = 2 * h, 2 * w
        n += 1
    if (h, w) != (height, width):
        raise ValueError(f"image {height}x{width} is not base {bh}x{bw} times a power of two")
    return n


class SemanticDecoder(nn.Module):
    """Style-modulated progressive decoder from a learned constant.

    Emits class logits at the base resolution and after every x2 upsample.
    """

    def __init__(self, latent_dim: int, height: int, width: int, base, channels: int, n_classes: int):
        super().__init__()
        self.n_up = pyramid_levels(height, width, tuple(base))
        self.const = nn.Parameter(torch.randn(1, channels, *base) * 0.5)
        n_blocks = self.n_up + 1
        self.style = nn.Linear(latent_dim, n_blocks * 2 * channels)
        self.convs = nn.ModuleList(nn.Conv2d(channels, channels, 3, padding=1) for _ in range(n_blocks))
        self.to_logits = nn.ModuleList(nn.Conv2d(channels, n_classes, 1) for _ in range(n_blocks))
        self.channels = channels

    def forward(self, z: torch.Tensor) -> list[torch.Tensor]:
        lead = z.shape[:-1]
        z = z.reshape(-1, z.shape[-1])
        styles = self.style(z).reshape(z.shape[0], -1, 2, self.channels)
        x = self.const.expand(z.shape[0], -1, -1, -1)
        out = []
        for i, (conv, head) in enumerate(zip(self.convs, self.to_logits)):
            if i > 0:
                x = F.interpolate(x, scale_factor=2, mode="nearest")
            x = conv(x)
            scale, bias = styles[:, i, 0, :, None, None], styles[:, i, 1, :, None, None]
            x = F.silu(x * (1 + scale) + bias)
            logits = head(x)
            out.append(logits.reshape(*lead, *logits.shape[1:]))
        return out


class RGBDecoder(nn.Module):
    def __init__(self, latent_dim: int, height: int, width: int, base, channels: int):
        super().__init__()
        self.n_up = pyramid_levels(height, width, tuple(base))
        self.base = tuple(base)
        self.channels = channels
        self.fc = nn.Linear(latent_dim, channels * base[0] * base[1])
        self.convs = nn.ModuleList(nn.Conv2d(channels, channels, 3, padding=1) for _ in range(self.n_up))
        self.out = nn.Conv2d(channels, 3, 3, padding=1)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        lead = z.shape[:-1]
        x = self.fc(z.reshape(-1, z.shape[-1])).reshape(-1, self.channels, *self.base)
        for conv in self.convs:
            x = F.silu(conv(F.interpolate(x, scale_factor=2, mode="nearest")))
        img = torch.sigmoid(self.out(x)).permute(0, 2, 3, 1)
        return img.reshape(*lead, *img.shape[1:])


# -- recurrent state-space core ----------------------------------------------


@dataclass
class Rollout:
    """Stacked per-step outputs; ``posterior`` covers only observed steps."""

    posterior: BeliefState | None
    prior: BeliefState
    latent: torch.Tensor
    history: torch.Tensor

    def __len__(self) -> int:
        return self.latent.shape[1]


class WorldModel(nn.Module):
    def __init__(self, cfg: ModelConfig, height: int, width: int):
        super().__init__()
        self.cfg = cfg
        self.image_encoder = ImageEncoder(height, width, list(cfg.encoder_channels), cfg.image_embed)
        self.speed_encoder = VectorEncoder(1, cfg.speed_embed, "speed")
        self.action_encoder = VectorEncoder(6, cfg.action_embed, "action")
        if not cfg.share_action_encoder:
            self.prior_action_encoder = VectorEncoder(6, cfg.action_embed, "action")
        obs_dim = cfg.image_embed + cfg.speed_embed
        self.estimator = NormalHead(cfg.action_embed + cfg.history_dim + obs_dim, cfg.hidden_dim, cfg.state_dim, cfg.sigma_min)
        self.predictor = NormalHead(cfg.action_embed + cfg.history_dim, cfg.hidden_dim, cfg.state_dim, cfg.sigma_min)
        self.gru = nn.GRUCell(cfg.state_dim, cfg.history_dim)
        zdim = cfg.history_dim + cfg.state_dim
        self.semantic_decoder = SemanticDecoder(zdim, height, width, cfg.semantic_base, cfg.decoder_channels, cfg.n_classes)
        self.rgb_decoder = RGBDecoder(zdim, height, width, cfg.semantic_base, cfg.decoder_channels)
        # draw samples in eval mode too (Monte-Carlo probes); default: eval uses the mean
        self.sample_in_eval = False

    @property
    def latent_dim(self) -> int:
        return self.cfg.history_dim + self.cfg.state_dim

    def initial_history(self, batch: int, like: torch.Tensor | None = None) -> torch.Tensor:
        p = next(self.parameters())
        return torch.zeros(batch, self.cfg.history_dim, dtype=p.dtype, device=p.device)

    def encode_image(self, image: torch.Tensor) -> torch.Tensor:
        return self.image_encoder(image)

    def encode_speed(self, speed: torch.Tensor) -> torch.Tensor:
        return self.speed_encoder(speed)

    def encode_action(self, action: torch.Tensor) -> torch.Tensor:
        if action.shape[-1] != 6:
            raise ValueError("action must be a 6-vector")
        return self.action_encoder(action)

    def observe(self, image: torch.Tensor, speed: torch.Tensor) -> torch.Tensor:
        """Observation embedding ``o = [u, m]``."""
        return torch.cat([self.encode_image(image), self.encode_speed(speed)], dim=-1)

    def _sample(self, mu, sigma, noise):
        if noise is None:
            if not (self.training or self.sample_in_eval):
                return mu
            noise = torch.randn_like(mu)
        return mu + sigma * noise

    def estimate_state(self, h_prev, a_prev, o, noise=None) -> BeliefState:
        x = torch.cat([self.encode_action(a_prev), h_prev, o], dim=-1)
        mu, sigma = self.estimator(x)
        _check_finite("estimator", mu, sigma)
        return BeliefState(mu, sigma, self._sample(mu, sigma, noise))

    def predict_state(self, h_prev, a_prev, noise=None) -> BeliefState:
        enc = self.action_encoder if self.cfg.share_action_encoder else self.prior_action_encoder
        if a_prev.shape[-1] != 6:
            raise ValueError("action must be a 6-vector")
        x = torch.cat([enc(a_prev), h_prev], dim=-1)
        mu, sigma = self.predictor(x)
        _check_finite("predictor", mu, sigma)
        return BeliefState(mu, sigma, self._sample(mu, sigma, noise))

    def advance_history(self, h_prev, s) -> torch.Tensor:
        return self.gru(s, h_prev)

    @staticmethod
    def form_latent(h_prev, s) -> torch.Tensor:
        return torch.cat([h_prev, s], dim=-1)

    def rollout(self, h0, prev_actions, obs=None, mode="estimate", n_observed=None, noise=None) -> Rollout:
        """Run the core over ``T = prev_actions.shape[1]`` steps.

        ``mode``: ``"estimate"`` (posterior drives the history), ``"predict"``
        (prior only; observations are ignored) or ``"mixed"`` (the first
        ``n_observed`` steps estimate, the rest imagine).  ``noise`` may hold
        fixed standard-normal draws ``{"post": (B,T,Ds), "prior": (B,T,Ds)}``.
        """
        T = prev_actions.shape[1]
        if mode == "estimate":
            k = T
        elif mode == "predict":
            k = 0
        elif mode == "mixed":
            if n_observed is None:
                raise ValueError("mixed mode needs n_observed")
            k = int(n_observed)
        else:
            raise ValueError(f"unknown rollout mode {mode!r}")
        if k > 0 and (obs is None or obs.shape[1] < k):
            raise ValueError(f"{mode} rollout needs observations for the first {k} steps")
        h = h0
        posts, priors, latents, hist = [], [], [], []
        for t in range(T):
            a = prev_actions[:, t]
            prior = self.predict_state(h, a, None if noise is None else noise["prior"][:, t])
            priors.append(prior)
            if t < k:
                post = self.estimate_state(h, a, obs[:, t], None if noise is None else noise["post"][:, t])
                posts.append(post)
                s = post.sample
            else:
                s = prior.sample
            latents.append(self.form_latent(h, s))
            h = self.advance_history(h, s)
            hist.append(h)

        def stack(bs):
            return BeliefState(*(torch.stack([getattr(b, f) for b in bs], 1) for f in ("mu", "sigma", "sample")))

        return Rollout(stack(posts) if posts else None, stack(priors), torch.stack(latents, 1), torch.stack(hist, 1))

    def decode_semantic(self, z) -> list[torch.Tensor]:
        return self.semantic_decoder(z)

    def decode_rgb(self, z) -> torch.Tensor:
        return self.rgb_decoder(z)


# -- losses -------------------------------------------------------------------


def gaussian_kl(mu1, sigma1, mu2, sigma2) -> torch.Tensor:
    """KL(N(mu1, sigma1^2) || N(mu2, sigma2^2)) for diagonal Gaussians, summed over the last dim."""
    if (sigma1 <= 0).any() or (sigma2 <= 0).any():
        raise ValueError("sigma must be positive")
    var1, var2 = sigma1**2, sigma2**2
    kl = torch.log(sigma2 / sigma1) + (var1 + (mu1 - mu2) ** 2) / (2 * var2) - 0.5
    return kl.sum(-1)


def kl_balanced_loss(posterior: BeliefState, prior: BeliefState, alpha: float = 0.75, side: str = "prior") -> torch.Tensor:
    """Balanced KL(posterior || prior), mean over leading dims.

    The forward value equals the plain KL; ``alpha`` sets the share of the
    gradient reaching the prior (``side="prior"``) or the posterior
    (``side="posterior"``).
    """
    if side not in ("prior", "posterior"):
        raise ValueError(f"unknown KL balancing side {side!r}")
    w_prior = alpha if side == "prior" else 1.0 - alpha
    train_prior = gaussian_kl(posterior.mu.detach(), posterior.sigma.detach(), prior.mu, prior.sigma)
    train_post = gaussian_kl(posterior.mu, posterior.sigma, prior.mu.detach(), prior.sigma.detach())
    return (w_prior * train_prior + (1.0 - w_prior) * train_post).mean()


def downsample_labels(label: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    """Nearest-neighbour downsampling of integer labels (..., H, W)."""
    H, W = label.shape[-2:]
    h, w = size
    if (h, w) == (H, W):
        return label
    return label[..., :: H // h, :: W // w]


def semantic_loss(pyramid: list[torch.Tensor], label: torch.Tensor, n_classes: int = 7) -> torch.Tensor:
    """Sum over levels of pixel-mean cross-entropy against downsampled labels.

    ``pyramid[i]`` has shape (..., C, h_i, w_i); ``label`` has shape (..., H, W).
    """
    label = label.long()
    if label.min() < 0 or label.max() >= n_classes:
        raise ValueError(f"label ids must lie in [0, {n_classes})")
    total = 0.0
    for logits in pyramid:
        h, w = logits.shape[-2:]
        lab = downsample_labels(label, (h, w)).reshape(-1, h, w)
        total = total + F.cross_entropy(logits.reshape(-1, logits.shape[-3], h, w), lab)
    return total


def world_model_loss(out: dict, batch: dict, weights: LossWeights, stage: int = 1, alpha: float = 0.75, side: str = "prior"):
    """Weighted sum of time-averaged loss terms plus a per-term breakdown.

    Stage 1: semantic + rgb + KL.  Stage 2 adds the imitation terms and drops
    rgb.  Terms with zero weight are skipped entirely.
    """
    from .policy import imitation_loss

    terms: dict[str, torch.Tensor] = {}
    if weights.semantic and "semantic" in out:
        terms["semantic"] = semantic_loss(out["semantic"], batch["semantic_label"])
    if weights.rgb and stage == 1 and "rgb" in out:
        terms["rgb"] = F.mse_loss(out["rgb"], batch["image"])
    if weights.kl:
        r: Rollout = out["rollout"]
        terms["kl"] = kl_balanced_loss(r.posterior, r.prior, alpha, side)
    if stage == 2 and (weights.action or weights.path):
        _, parts = imitation_loss(out["action"], out["path"], batch.get("action"), batch.get("path"), weights)
        terms.update(parts)
    scale = {"semantic": weights.semantic, "rgb": weights.rgb, "kl": weights.kl, "action": weights.action, "path": weights.path}
    total = torch.zeros((), dtype=out["rollout"].latent.dtype)
    for name, value in terms.items():
        if not torch.isfinite(value):
            raise NonFiniteError(f"loss term {name!r} is not finite")
        total = total + scale[name] * value
    breakdown = {k: float(v.detach()) for k, v in terms.items()}
    breakdown["total"] = float(total.detach())
    return total, breakdown
