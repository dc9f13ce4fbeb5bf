"""Two-stage training: world-model pretraining on logged actions, then joint
policy + world-model training on teacher demonstrations.
"""

from __future__ import annotations

import csv
import hashlib
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import torch

from .config import Config, config_hash, config_to_dict, _from_dict
from .data import Episode, count_windows, make_training_samples
from .model import NavModel, BCModel, batch_to_tensors, build_model

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


class InvariantViolation(RuntimeError):
    pass


class CheckpointError(RuntimeError):
    pass


def lr_schedule(step: int, total_steps: int, peak: float, pct_start: float = 0.2) -> float:
    """Single-cycle schedule: linear warm-up from peak/25 to peak over the
    first ``pct_start`` of steps, then cosine decay to peak/100."""
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    start, end = peak / 25.0, peak / 100.0
    warm = pct_start * total_steps
    if step <= warm:
        return start + (peak - start) * (step / warm if warm > 0 else 1.0)
    frac = (step - warm) / (total_steps - warm)
    return end + (peak - end) * 0.5 * (1.0 + math.cos(math.pi * frac))


def parameter_hash(module: torch.nn.Module) -> str:
    h = hashlib.sha256()
    for name, p in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(p.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


@dataclass
class TrainResult:
    model: torch.nn.Module
    curves: list = field(default_factory=list)  # (stage, epoch, term, value)
    checkpoint: Path | None = None
    epochs_done: int = 0
    grad_seen: dict = field(default_factory=dict)
    seconds: float = 0.0

    def final(self, term: str = "total") -> float:
        return [v for _, _, t, v in self.curves if t == term][-1]

    def series(self, term: str = "total") -> list[float]:
        return [v for _, _, t, v in self.curves if t == term]


def _param_groups(model: torch.nn.Module) -> dict[str, list[torch.nn.Parameter]]:
    groups: dict[str, list] = {}
    for name, p in model.named_parameters():
        parts = name.split(".")
        key = ".".join(parts[:2]) if parts[0] in ("world", "policy") else parts[0]
        groups.setdefault(key, []).append(p)
    return groups


def _set_trainable(model: torch.nn.Module, stage: int) -> None:
    for p in model.parameters():
        p.requires_grad_(True)
    if isinstance(model, NavModel):
        if stage == 1:
            for p in model.policy.parameters():
                p.requires_grad_(False)
        else:
            for p in model.world.rgb_decoder.parameters():
                p.requires_grad_(False)


def save_checkpoint(path: Path, model, cfg: Config, stage: int, epoch: int, optimizer=None, step: int = 0, curves=None, kind="world") -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(
        {
            "version": CHECKPOINT_VERSION,
            "kind": kind,
            "config": config_to_dict(cfg),
            "config_hash": config_hash(cfg),
            "stage": stage,
            "epoch": epoch,
            "step": step,
            "model": model.state_dict(),
            "optimizer": None if optimizer is None else optimizer.state_dict(),
            "curves": curves or [],
        },
        path,
    )
    return path


def load_checkpoint(path: str | Path, cfg: Config | None = None):
    """Load ``(model, checkpoint_dict)``.

    If ``cfg`` is given its model/camera dimensions must match the stored ones.
    """
    ckpt = torch.load(Path(path), map_location="cpu", weights_only=False)
    if ckpt.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: checkpoint version {ckpt.get('version')} != {CHECKPOINT_VERSION}")
    stored = _from_dict(ckpt["config"])
    if cfg is not None:
        for section in ("model", "camera"):
            a, b = config_to_dict(cfg)[section], ckpt["config"][section]
            diff = sorted(k for k in a if a[k] != b.get(k))
            if diff:
                raise CheckpointError(f"{path}: {section} config mismatch in {diff}")
    model = build_model(cfg or stored, ckpt.get("kind", "world"))
    try:
        model.load_state_dict(ckpt["model"], strict=True)
    except RuntimeError as exc:
        raise CheckpointError(f"{path}: {exc}") from exc
    return model, ckpt


def train(
    model: torch.nn.Module,
    episodes: list[Episode],
    cfg: Config,
    stage: int,
    epochs: int | None = None,
    out_dir: str | Path | None = None,
    resume: str | Path | None = None,
    stop_after: int | None = None,
    on_epoch: Callable[[int, torch.nn.Module], dict] | None = None,
    dtype=torch.float32,
) -> TrainResult:
    """Generic loop shared by both stages and the BC baseline.

    ``epochs`` fixes the schedule length; ``stop_after`` ends early (for
    resume tests) without changing the schedule.
    """
    tc = cfg.train
    epochs = epochs or tc.epochs
    if stage == 2 and not all(ep.has_route for ep in episodes):
        raise ValueError("stage 2 needs teacher episodes with route and path")
    _set_trainable(model, stage)
    params = [p for p in model.parameters() if p.requires_grad]
    opt = torch.optim.AdamW(params, lr=tc.lr, weight_decay=tc.weight_decay)
    n_windows = count_windows(episodes, cfg.data.seq_len)
    if n_windows == 0:
        raise ValueError("no training windows in dataset")
    per_epoch = math.ceil(n_windows / tc.batch_size)
    if tc.max_batches_per_epoch:
        per_epoch = min(per_epoch, tc.max_batches_per_epoch)
    total_steps = epochs * per_epoch
    start_epoch, step = 0, 0
    curves: list = []
    if resume is not None:
        ckpt = torch.load(Path(resume), map_location="cpu", weights_only=False)
        model.load_state_dict(ckpt["model"])
        if ckpt["optimizer"] is not None and ckpt["stage"] == stage:
            opt.load_state_dict(ckpt["optimizer"])
            start_epoch, step = ckpt["epoch"], ckpt["step"]
            curves = list(ckpt["curves"])
    frozen = model.policy if (stage == 1 and isinstance(model, NavModel)) else None
    frozen_hash = parameter_hash(frozen) if frozen is not None else None
    groups = _param_groups(model)
    grad_seen = {k: False for k in groups}

    t0 = time.time()
    model.train()
    last = start_epoch
    for epoch in range(start_epoch, epochs):
        if stop_after is not None and epoch >= stop_after:
            break
        torch.manual_seed(hash((tc.seed, stage, epoch)) & 0x7FFFFFFF)
        sums: dict[str, float] = {}
        n = 0
        for batch in make_training_samples(
            episodes, cfg.data.seq_len, tc.batch_size, seed=tc.seed * 1000 + stage, epoch=epoch,
            max_batches=tc.max_batches_per_epoch,
        ):
            for g in opt.param_groups:
                g["lr"] = lr_schedule(min(step, total_steps), total_steps, tc.lr, tc.pct_start)
            tb = batch_to_tensors(batch, dtype)
            loss, parts = model.loss(tb, stage)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            if frozen is not None:
                for p in frozen.parameters():
                    if p.grad is not None and p.grad.abs().max() > 0:
                        raise InvariantViolation("policy parameter received a gradient during stage 1")
            for k, ps in groups.items():
                if not grad_seen[k] and any(p.grad is not None and p.grad.abs().max() > 0 for p in ps):
                    grad_seen[k] = True
            if tc.grad_clip:
                torch.nn.utils.clip_grad_norm_(params, tc.grad_clip)
            opt.step()
            step += 1
            n += 1
            for k, v in parts.items():
                sums[k] = sums.get(k, 0.0) + v
        for k, v in sums.items():
            curves.append((stage, epoch + 1, k, v / max(n, 1)))
        if on_epoch is not None:
            for k, v in (on_epoch(epoch + 1, model) or {}).items():
                curves.append((stage, epoch + 1, k, float(v)))
            model.train()
        log.info("stage %d epoch %d/%d %s", stage, epoch + 1, epochs, {k: round(v / max(n, 1), 4) for k, v in sums.items()})
        last = epoch + 1
    model.eval()
    if frozen is not None and parameter_hash(frozen) != frozen_hash:
        raise InvariantViolation("policy parameters changed during stage 1")
    result = TrainResult(model, curves, None, last, grad_seen, time.time() - t0)
    if out_dir is not None:
        out_dir = Path(out_dir)
        kind = "bc" if isinstance(model, BCModel) else "world"
        result.checkpoint = save_checkpoint(out_dir / f"stage{stage}.pt", model, cfg, stage, last, opt, step, curves, kind)
        write_curves(out_dir / f"stage{stage}_curves.csv", curves)
    return result


def write_curves(path: Path, curves: list) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["stage", "epoch", "term", "value"])
        w.writerows(curves)


def train_stage1(episodes: list[Episode], cfg: Config, model: NavModel | None = None, **kw) -> TrainResult:
    """World-model pretraining with the policy deactivated."""
    if model is None:
        torch.manual_seed(cfg.train.seed)
        model = NavModel(cfg)
    return train(model, episodes, cfg, stage=1, **kw)


def train_stage2(episodes: list[Episode], cfg: Config, checkpoint: str | Path | NavModel | None = None, **kw) -> TrainResult:
    """Joint policy + world-model training on teacher data (RGB head frozen)."""
    if isinstance(checkpoint, NavModel):
        model = checkpoint
    elif checkpoint is not None:
        model, _ = load_checkpoint(checkpoint, cfg)
    elif cfg.train.no_pretrain:
        torch.manual_seed(cfg.train.seed)
        model = NavModel(cfg)
    else:
        raise ValueError("stage 2 needs a stage-1 checkpoint unless train.no_pretrain is set")
    return train(model, episodes, cfg, stage=2, **kw)


def train_bc(episodes: list[Episode], cfg: Config, **kw) -> TrainResult:
    torch.manual_seed(cfg.train.seed)
    return train(BCModel(cfg), episodes, cfg, stage=2, **kw)
