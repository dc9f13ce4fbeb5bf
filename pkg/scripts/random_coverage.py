"""Effect of collision-biased resampling in the random data policy.

Records random-policy episodes with and without the rejection step and
reports episode length, collision terminations and command coverage.

    python3 scripts/random_coverage.py --episodes 60
"""

import argparse
import json

import numpy as np

from latentnav.config import load_config
from latentnav.data import EpisodeRejected, _random_start, record_episode
from latentnav.sim import RandomPolicy, default_spec, generate_scenario


def collect(avoid: bool, n: int, cfg, families):
    sim = cfg.sim
    lengths, collided, vx, wz = [], 0, [], []
    k = 0
    while len(lengths) < n:
        seed = 3_000_000 + k
        fam = families[k % len(families)]
        k += 1
        sc = generate_scenario(seed, default_spec(fam, cell_size=sim.cell_size), sim.robot_radius, sim.plan_margin)
        start = _random_start(np.random.default_rng([seed, 1]), sc.world, sim)
        if start is None:
            continue
        try:
            ep = record_episode(sc.world, start, RandomPolicy(seed, sim, avoid_collisions=avoid), 150, None, sim, cfg.camera, seed)
        except EpisodeRejected:
            continue
        lengths.append(len(ep))
        collided += ep.termination == "collision"
        vx.append(ep.arrays["action_command"][:, 0])
        wz.append(ep.arrays["action_command"][:, 5])
    vx, wz = np.concatenate(vx), np.concatenate(wz)
    hist, _, _ = np.histogram2d(vx, wz, bins=8, range=[[0, sim.v_max], [-sim.w_max, sim.w_max]])
    return {
        "episodes": n,
        "mean_length": float(np.mean(lengths)),
        "collision_fraction": collided / n,
        "frames": int(len(vx)),
        "mean_vx": float(vx.mean()),
        "mean_abs_wz": float(np.abs(wz).mean()),
        "occupied_bins_of_64": int((hist > 0).sum()),
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--episodes", type=int, default=60)
    ap.add_argument("--config")
    args = ap.parse_args()
    cfg = load_config(args.config, ["camera.n_rows=16", "camera.n_rays=24"]).config
    fams = cfg.data.random_families
    res = {"with_rejection": collect(True, args.episodes, cfg, fams), "without_rejection": collect(False, args.episodes, cfg, fams)}
    print(json.dumps(res, indent=2))


if __name__ == "__main__":
    main()
