"""``latentnav`` command-line entry point.

Every command resolves a config (defaults <- profile <- file <- --set), then
writes its artifacts into a fresh run directory ``<out>/<command>-<time>-<hash8>``
together with the resolved config and its hash.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from .config import ConfigError, ResolvedConfig, config_to_dict, load_config

log = logging.getLogger("latentnav")

COMMANDS = ("gen-data", "train-world", "train-policy", "eval-open", "eval-closed", "eval-predict", "rollout", "plot")


class PrerequisiteError(RuntimeError):
    """A required input artifact is missing; the message says how to make it."""


def _run_dir(args, rc: ResolvedConfig) -> Path:
    root = Path(args.out or os.environ.get("LATENTNAV_OUT", "runs"))
    stamp = time.strftime("%Y%m%d-%H%M%S")
    d = root / f"{args.command}-{stamp}-{rc.hash[:8]}"
    n = 1
    while d.exists():
        d = root / f"{args.command}-{stamp}-{rc.hash[:8]}-{n}"
        n += 1
    d.mkdir(parents=True)
    (d / "config.json").write_text(json.dumps({"hash": rc.hash, "config": rc.to_dict()}, indent=2, sort_keys=True))
    return d


def _need(path: str | None, what: str, hint: str) -> Path:
    if not path:
        raise PrerequisiteError(f"{what} is required: {hint}")
    p = Path(path)
    if not p.exists():
        raise PrerequisiteError(f"{what} not found at {p}: {hint}")
    return p


def _dataset(args, kind: str):
    from .data import read_dataset

    root = _need(args.data, "--data", "run `latentnav gen-data` first and pass its run directory")
    d = root / kind
    if not (d / "index.json").exists():
        raise PrerequisiteError(f"no {kind} dataset under {root}: run `latentnav gen-data --kind {kind}` (or both)")
    return read_dataset(d)


def _teacher_split(args, cfg):
    from .data import split_dataset

    return split_dataset(_dataset(args, "teacher"), cfg.data.seed, (cfg.data.train_ratio, 1 - cfg.data.train_ratio))


def _model(args, cfg):
    from .trainer import load_checkpoint, parameter_hash

    ckpt = _need(args.checkpoint, "--checkpoint", "train one with `latentnav train-policy` (or train-world)")
    model, _ = load_checkpoint(ckpt, cfg)
    return model.eval(), parameter_hash(model)


# -- commands -----------------------------------------------------------------


def cmd_gen_data(args, cfg, out: Path) -> dict:
    from .data import generate_dataset, read_dataset, write_dataset

    dc = cfg.data
    summary = {}
    kinds = ("random", "teacher") if args.kind == "both" else (args.kind,)
    for kind in kinds:
        n = dc.random_frames if kind == "random" else dc.teacher_frames
        fams = dc.random_families if kind == "random" else dc.teacher_families
        steps = dc.random_max_steps if kind == "random" else dc.teacher_max_steps
        eps = generate_dataset(kind, n, fams, cfg.sim, cfg.camera, dc.seed, steps)
        write_dataset(eps, out / kind)
        read_dataset(out / kind)  # verify what was written
        summary[kind] = {"episodes": len(eps), "frames": int(sum(len(e) for e in eps))}
    return summary


def cmd_train_world(args, cfg, out: Path) -> dict:
    from .trainer import train_stage1

    eps = _dataset(args, "random")
    if (Path(args.data) / "teacher" / "index.json").exists():
        eps = eps + _teacher_split(args, cfg)[0]
    res = train_stage1(eps, cfg, out_dir=out, epochs=args.epochs)
    return {"checkpoint": str(res.checkpoint), "final_total": res.final(), "seconds": res.seconds}


def cmd_train_policy(args, cfg, out: Path) -> dict:
    from .trainer import train_bc, train_stage2

    train, _ = _teacher_split(args, cfg)
    if args.bc:
        res = train_bc(train, cfg, out_dir=out, epochs=args.epochs)
    else:
        ckpt = None
        if not cfg.train.no_pretrain:
            ckpt = _need(args.checkpoint, "--checkpoint", "run `latentnav train-world` first, or pass --set train.no_pretrain=true")
        res = train_stage2(train, cfg, ckpt, out_dir=out, epochs=args.epochs)
    return {"checkpoint": str(res.checkpoint), "final_total": res.final(), "seconds": res.seconds}


def cmd_eval_open(args, cfg, out: Path) -> dict:
    from .evalbench import ZeroPredictor, eval_open_loop

    model, h = _model(args, cfg)
    _, test = _teacher_split(args, cfg)
    res = {"model": eval_open_loop(model, test), "zero": eval_open_loop(ZeroPredictor(), test), "checkpoint_hash": h}
    (out / "open_loop.json").write_text(json.dumps(res, indent=2))
    return res


def cmd_eval_closed(args, cfg, out: Path) -> dict:
    from .evalbench import benchmark, make_agent, write_report

    model, h = (None, "")
    if args.agent in ("model", "bc"):
        model, h = _model(args, cfg)
    agent = make_agent(args.agent, model, cfg.sim, args.mode or cfg.eval.mode)
    rep, trials = benchmark(agent, args.suite, cfg, args.trials, checkpoint_hash=h, n=args.n)
    write_report(rep, trials, out)
    return {"sr": rep.sr, "wtt": rep.to_dict()["wtt"], "aa": rep.aa, "trials": rep.n_trials}


def cmd_eval_predict(args, cfg, out: Path) -> dict:
    from .evalbench import eval_prediction_iou

    model, h = _model(args, cfg)
    _, test = _teacher_split(args, cfg)
    iou = eval_prediction_iou(model, test, cfg.eval.horizon, use_policy=args.use_policy)
    np.savetxt(out / "prediction_iou.csv", iou, delimiter=",", fmt="%.6f")
    return {"navigable_iou_per_step": [float(x) for x in iou[:, 0]], "checkpoint_hash": h}


def cmd_rollout(args, cfg, out: Path) -> dict:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    from .evalbench import build_suite, make_agent, run_trial

    model = None
    if args.agent in ("model", "bc"):
        model, _ = _model(args, cfg)
    agent = make_agent(args.agent, model, cfg.sim, args.mode or cfg.eval.mode)
    suite = build_suite(args.suite, cfg.sim, args.n)
    if not 0 <= args.index < len(suite):
        raise PrerequisiteError(f"--index must be in [0, {len(suite)})")
    entry = suite[args.index]
    res, poses = run_trial(agent, entry, cfg, 0, record=True)
    np.save(out / "poses.npy", poses)
    w = entry.scenario.world
    fig, ax = plt.subplots(figsize=(5, 5))
    ax.imshow(w.grid != 0, origin="lower", cmap="Greys", extent=(0, w.bounds[0], 0, w.bounds[1]))
    ax.plot(poses[:, 0], poses[:, 1], "b-")
    ax.plot(*entry.scenario.goal, "r*", ms=12)
    ax.set_title(f"{entry.scenario_id}: {res.outcome}")
    fig.savefig(out / "rollout.png")
    plt.close(fig)
    return {"scenario": entry.scenario_id, "outcome": res.outcome, "steps": res.steps}


def cmd_plot(args, cfg, out: Path) -> dict:
    from .evalbench import plot_curves, plot_iou, plot_scenarios

    run = _need(args.run, "--run", "point at a run directory produced by another command")
    made = []
    curves = sorted(run.glob("*_curves.csv"))
    if curves:
        made.append(plot_curves(curves, out / "loss_curves.png"))
    if (run / "prediction_iou.csv").exists():
        iou = np.loadtxt(run / "prediction_iou.csv", delimiter=",", ndmin=2)
        made.append(plot_iou(iou, out / "iou_vs_step.png"))
    if (run / "closed_loop.json").exists():
        made.append(plot_scenarios(json.loads((run / "closed_loop.json").read_text()), out / "scenarios.png"))
    if not made:
        raise PrerequisiteError(f"nothing to plot in {run}")
    return {"plots": [str(p) for p in made]}


HANDLERS = {
    "gen-data": cmd_gen_data,
    "train-world": cmd_train_world,
    "train-policy": cmd_train_policy,
    "eval-open": cmd_eval_open,
    "eval-closed": cmd_eval_closed,
    "eval-predict": cmd_eval_predict,
    "rollout": cmd_rollout,
    "plot": cmd_plot,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML config file")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override, repeatable")
    common.add_argument("--seed", type=int, help="sets data.seed and train.seed")
    common.add_argument("--profile", default="desk", choices=["desk", "paper"])
    common.add_argument("--out", help="output root (default: $LATENTNAV_OUT or ./runs)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="latentnav", description="World-model navigation: data, training, evaluation.")
    sub = p.add_subparsers(dest="command", required=True)
    s = sub.add_parser("gen-data", parents=[common])
    s.add_argument("--kind", choices=["random", "teacher", "both"], default="both")
    for name in ("train-world", "train-policy"):
        s = sub.add_parser(name, parents=[common])
        s.add_argument("--data")
        s.add_argument("--checkpoint")
        s.add_argument("--epochs", type=int)
        if name == "train-policy":
            s.add_argument("--bc", action="store_true", help="train the stateless baseline instead")
    for name in ("eval-open", "eval-predict"):
        s = sub.add_parser(name, parents=[common])
        s.add_argument("--data")
        s.add_argument("--checkpoint")
        if name == "eval-predict":
            s.add_argument("--use-policy", action="store_true")
    for name in ("eval-closed", "rollout"):
        s = sub.add_parser(name, parents=[common])
        s.add_argument("--checkpoint")
        s.add_argument("--agent", choices=["model", "bc", "teacher", "random"], default="model")
        s.add_argument("--suite", choices=["easy", "designed", "narrow"], default="easy")
        s.add_argument("--mode", choices=["recurrent", "resetting"])
        s.add_argument("--n", type=int, help="suite size override")
        if name == "eval-closed":
            s.add_argument("--trials", type=int)
        else:
            s.add_argument("--index", type=int, default=0)
    s = sub.add_parser("plot", parents=[common])
    s.add_argument("--run", help="run directory to plot from")
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        overrides = list(args.set)
        if args.seed is not None:
            overrides += [f"data.seed={args.seed}", f"train.seed={args.seed}"]
        rc = load_config(args.config, overrides, args.profile)
        out = _run_dir(args, rc)
        summary = HANDLERS[args.command](args, rc.config, out)
    except (ConfigError, PrerequisiteError) as exc:
        print(f"latentnav {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # invariant violations, corrupt data, bad checkpoints
        from .data import DatasetError
        from .trainer import CheckpointError, InvariantViolation

        if isinstance(exc, (DatasetError, CheckpointError, InvariantViolation, ValueError)):
            print(f"latentnav {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
            return 3
        raise
    summary = {"run_dir": str(out), "config_hash": rc.hash, **summary}
    (out / "summary.json").write_text(json.dumps(summary, indent=2, default=str))
    print(json.dumps(summary, indent=2, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
