"""Ablation study at reduced scale: full model vs no-pretrain vs no-semantic,
each evaluated in recurrent and resetting modes.

    python3 scripts/ablations.py --config configs/acceptance.yaml --seeds 0 1 2 --out runs/ablations

Writes ``results.json`` (one record per seed x arm) and prints a summary table.
The no-pretrain arm gets the same stage-2 budget as the others and no stage 1.
"""

import argparse
import json
import logging
import time
from pathlib import Path

import numpy as np
import torch

from latentnav import evalbench as eb
from latentnav.config import load_config
from latentnav.data import generate_dataset, split_dataset
from latentnav.sim import NAVIGABLE
from latentnav.trainer import save_checkpoint, train_stage1, train_stage2


def run_seed(cfg, seed, arms, out: Path) -> list[dict]:
    dc = cfg.data
    rnd = generate_dataset("random", dc.random_frames, dc.random_families, cfg.sim, cfg.camera, dc.seed, dc.random_max_steps)
    tea = generate_dataset("teacher", dc.teacher_frames, dc.teacher_families, cfg.sim, cfg.camera, dc.seed, dc.teacher_max_steps)
    train, test = split_dataset(tea, dc.seed, (dc.train_ratio, 1 - dc.train_ratio))
    zero = eb.eval_open_loop(eb.ZeroPredictor(), test)
    rows = []
    for arm, acfg in eb.ablation_arms(cfg, arms).items():
        t0 = time.time()
        if acfg.train.no_pretrain:
            model = train_stage2(train, acfg, None).model
        else:
            model = train_stage2(train, acfg, train_stage1(rnd + train, acfg).model).model
        secs = time.time() - t0
        save_checkpoint(out / f"seed{seed}-{arm}.pt", model, acfg, 2, acfg.train.epochs)
        row = {"seed": seed, "arm": arm, "train_seconds": secs, "zero_A-MAE": zero["A-MAE"]}
        row.update(eb.eval_open_loop(model, test))
        row["navigable_iou"] = float(eb.eval_semantic_iou(model, test)[NAVIGABLE])
        row["prediction_iou"] = eb.eval_prediction_iou(model, test)[:, NAVIGABLE].tolist()
        for suite in ("easy", "narrow", "designed"):
            for mode in ("recurrent", "resetting"):
                rep, _ = eb.benchmark(eb.make_agent("model", model, acfg.sim, mode), suite, acfg)
                row[f"{suite}/{mode}"] = {"sr": rep.sr, "wtt": rep.to_dict()["wtt"], "aa": rep.aa}
        rows.append(row)
        logging.info("seed %d %s done in %.0fs", seed, arm, secs)
    return rows


def summarize(rows: list[dict]) -> str:
    lines = ["| arm | nav IOU | A-MAE | easy SR | narrow SR | designed SR | designed AA rec / reset |", "|---|---|---|---|---|---|---|"]
    for arm in dict.fromkeys(r["arm"] for r in rows):
        rs = [r for r in rows if r["arm"] == arm]
        m = lambda f: float(np.mean([f(r) for r in rs]))
        lines.append(
            f"| {arm} | {m(lambda r: r['navigable_iou']):.3f} | {m(lambda r: r['A-MAE']):.4f} "
            f"| {m(lambda r: r['easy/recurrent']['sr']):.2f} | {m(lambda r: r['narrow/recurrent']['sr']):.2f} "
            f"| {m(lambda r: r['designed/recurrent']['sr']):.2f} "
            f"| {m(lambda r: r['designed/recurrent']['aa']):.4f} / {m(lambda r: r['designed/resetting']['aa']):.4f} |"
        )
    return "\n".join(lines)


def main():
    ap = argparse.ArgumentParser(description="train and evaluate ablation arms")
    ap.add_argument("--config", default="configs/acceptance.yaml")
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--arms", nargs="+", default=list(eb.ABLATIONS))
    ap.add_argument("--out", default="runs/ablations")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    torch.set_num_threads(1)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for seed in args.seeds:
        cfg = load_config(args.config, [f"data.seed={seed}", f"train.seed={seed}"]).config
        rows += run_seed(cfg, seed, args.arms, out)
        (out / "results.json").write_text(json.dumps(rows, indent=2))
    table = summarize(rows)
    (out / "summary.md").write_text(table + "\n")
    print(table)


if __name__ == "__main__":
    main()
