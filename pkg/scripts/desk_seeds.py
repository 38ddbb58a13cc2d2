"""Teacher/student test accuracy on the bundled desk scenarios over several seeds.

    python scripts/desk_seeds.py --seeds 0 1 2 --epochs 30

Each seed retrains both models (a few minutes per seed on one core) and prints
one row; the last row is the mean.
"""
import argparse
import dataclasses
import time

import numpy as np

from kdgat.config import bundled_config, load_config
from kdgat.evaluate import evaluate_model
from kdgat.graph_builder import build_windows
from kdgat.model import parameter_count
from kdgat.synth_can import bundled_scenario, load_scenario
from kdgat.train import distill_student, train_teacher


def graphs_for(name, window, stride):
    return build_windows(load_scenario(bundled_scenario(name)).generate(), window, stride)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--epochs", type=int, default=None, help="override the quickstart epoch count")
    args = ap.parse_args()

    cfg = load_config(bundled_config("quickstart"))
    if args.epochs is not None:
        cfg = cfg.with_overrides({"train.epochs": args.epochs})
    tc = cfg.train
    train = graphs_for("desk_train", tc.window, tc.stride)
    test = graphs_for("desk_test", tc.window, tc.stride)
    print(f"{len(train)} train / {len(test)} test windows; "
          f"params teacher {parameter_count(cfg.teacher)} student {parameter_count(cfg.student)}")
    print(f"{'seed':>4}  {'teacher':>8}  {'student':>8}  {'gap':>6}  {'secs':>6}")
    rows = []
    for seed in args.seeds:
        t0 = time.process_time()
        run = dataclasses.replace(tc, seed=seed)
        teacher, _ = train_teacher(train, run, cfg.teacher)
        student, _ = distill_student(teacher, train, run, cfg.student)
        t_acc = evaluate_model(teacher, test).metrics.accuracy
        s_acc = evaluate_model(student, test).metrics.accuracy
        rows.append((t_acc, s_acc))
        print(f"{seed:>4}  {t_acc:8.4f}  {s_acc:8.4f}  {100 * (t_acc - s_acc):6.2f}  {time.process_time() - t0:6.0f}")
    t_mean, s_mean = np.mean(rows, axis=0)
    print(f"{'mean':>4}  {t_mean:8.4f}  {s_mean:8.4f}  {100 * (t_mean - s_mean):6.2f}")


if __name__ == "__main__":
    main()
