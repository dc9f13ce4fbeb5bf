import numpy as np
import pytest
import torch
from hypothesis import settings

from latentnav.config import load_config

settings.register_profile("default", deadline=None, max_examples=50)
settings.load_profile("default")

torch.set_num_threads(1)

TINY = [
    "camera.n_rows=16",
    "camera.n_rays=24",
    "model.image_embed=16",
    "model.speed_embed=4",
    "model.action_embed=8",
    "model.history_dim=8",
    "model.state_dim=4",
    "model.hidden_dim=16",
    "model.policy_dim=16",
    "model.token_dim=8",
    "model.n_heads=2",
    "model.route_embed=64",
    "model.encoder_channels=[4,4,4,4]",
    "model.decoder_channels=4",
    "model.semantic_base=[4,6]",
    "train.batch_size=4",
    "train.max_batches_per_epoch=3",
    "train.epochs=2",
]


@pytest.fixture
def tiny_cfg():
    return load_config(overrides=TINY).config


@pytest.fixture(scope="session")
def tiny_data():
    from latentnav.data import generate_dataset

    cfg = load_config(overrides=TINY).config
    rnd = generate_dataset("random", 60, ["open", "clutter"], cfg.sim, cfg.camera, seed=3, max_steps=30)
    tea = generate_dataset("teacher", 60, ["open", "corridor"], cfg.sim, cfg.camera, seed=3, max_steps=30)
    return rnd, tea


@pytest.fixture
def rng():
    return np.random.default_rng(0)


# -- acceptance reporting -------------------------------------------------------------

ACCEPTANCE_TITLES = {
    1: "KL math oracles",
    2: "stage-2 gradient vs finite differences",
    3: "stop-gradient split across alpha",
    4: "teacher and random baselines",
    5: "end-to-end learning (IOU, A-MAE)",
    6: "closed-loop imitation on easy suite",
    7: "pretraining ablation trend",
    8: "prediction-horizon IOU trend",
    9: "history ablation AA trend",
    10: "reproducibility and CLI smoke",
}


@pytest.fixture
def criterion(request):
    """Record ``(ok, detail)`` for an acceptance criterion, then assert it."""
    store = request.config.__dict__.setdefault("_acceptance", {})

    def record(n: int, ok: bool, detail: str):
        store[n] = (bool(ok), detail)
        assert ok, f"criterion {n} ({ACCEPTANCE_TITLES[n]}): {detail}"

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    store = config.__dict__.get("_acceptance")
    if not store:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n, title in ACCEPTANCE_TITLES.items():
        if n in store:
            ok, detail = store[n]
            tr.write_line(f"[{'PASS' if ok else 'FAIL'}] {n:2d}. {title}: {detail}")
        else:
            tr.write_line(f"[----] {n:2d}. {title}: not run or errored before reporting")
