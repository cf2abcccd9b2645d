"""Desk-scale learning check shared by the script and the acceptance test."""
from __future__ import annotations

import numpy as np

from . import rules as R
from . import training as T


def desk_config(seed: int, algorithm: str = "reinforce", epochs: int = 60) -> T.TrainConfig:
    """6 jobs x 3 machines SD1, L=1, d=32, H=4, B=32, N=128, lr 5e-5, gamma 0.99."""
    return T.TrainConfig(algorithm=algorithm, epochs=epochs, instances_per_epoch=128, batch_size=32,
                         lr=5e-5, gamma=0.99, seed=seed, variant="SD1", num_jobs=6, num_machines=3,
                         validation_size=100, policy=T.desk_policy_config())


def baseline_means(config: T.TrainConfig, test_set) -> dict[str, float]:
    out = {}
    rng = T.stream_rng(config.seed, T.TEST_STREAM, 7)
    out["random"] = float(np.mean([R.pdr_rollout(i, R.Rule.RANDOM, rng)[0] for i in test_set]))
    for rule in R.PDR_RULES:
        out[rule.value] = float(np.mean([R.pdr_rollout(i, rule)[0] for i in test_set]))
    return out


def run_desk_check(seed: int, epochs: int = 60, algorithms=("reinforce", "ppo"), out_dir=None,
                   test_size: int = 100, log=None) -> dict:
    base_cfg = desk_config(seed, epochs=epochs)
    test_set = T.make_instances(base_cfg, T.TEST_STREAM, test_size)
    base = baseline_means(base_cfg, test_set)
    best_pdr = min(base[r.value] for r in R.PDR_RULES)
    res = {"seed": seed, "epochs": epochs, "baselines": base, "best_pdr": best_pdr}
    for algo in algorithms:
        cfg = desk_config(seed, algo, epochs)
        report = T.train(cfg, out_dir=None if out_dir is None else f"{out_dir}/{algo}", log=log)
        test_mean = T.validate(report.best_params, cfg.policy, test_set)
        res[algo] = {
            "test_greedy_mean": test_mean,
            "initial_val": report.initial_val,
            "best_val": report.best_val,
            "best_epoch": report.best_epoch,
            "final_val": report.rows[-1].val_mean_makespan,
            "train_time": sum(r.wall_time for r in report.rows),
            "beats_random_by_5pct": test_mean <= 0.95 * base["random"],
            "within_5pct_of_best_pdr": test_mean <= 1.05 * best_pdr,
        }
    return res
