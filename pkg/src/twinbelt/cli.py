"""Command-line entry points.

Subcommands cover the full pipeline in dependency order:

    calibrate        build the control-to-force map on a known uniform box
    gen-data         run the exploration on random boxes, save the dataset
    train-estimator  fit the mass-distribution estimator
    train-baseline   fit the black-box one-step dynamics model
    run-episode      rotate one box with either method, export the trace
    bench            run both methods over the fixed roster plus a random batch

Every command accepts --config (INI file, defaults apply for missing keys),
--seed (overrides the command's own seed), --out (artifact directory), and
--workers (parallel episodes; only the bench uses it).  Binary artifacts get a
JSON sidecar recording the configuration hash and seeds; text outputs embed
them as comment lines.
"""

import argparse
from dataclasses import replace
import hashlib
import json
import os
import sys

import numpy as np

from . import baseline, calibration, controller, estimator, harness, massmodel, sim

EPISODE_METHODS = ("physics", "blackbox")
EPISODE_DISTRIBUTIONS = harness.FIXED_DISTRIBUTIONS + ("uniform",)


def _resolved_config(args) -> harness.ExperimentConfig:
    cfg = harness.load_config(args.config)
    if args.out is not None:
        cfg = replace(cfg, paths=replace(cfg.paths, out=args.out))
    os.makedirs(cfg.paths.out, exist_ok=True)
    return cfg


def _fail(message) -> int:
    print(f"error: {message}", file=sys.stderr)
    return 1


def _require_artifact(cfg, name, what, producer):
    path = cfg.artifact(name)
    if not os.path.exists(path):
        raise FileNotFoundError(
            f"missing {what}: {path} (run `twinbelt {producer}` first)")
    return path


def _write_sidecar(path, payload) -> None:
    with open(path + ".meta.json", "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _dataset_hash(cfg: harness.ExperimentConfig, seed) -> str:
    """Hash over exactly the settings that determine the exploration dataset."""
    key = repr((cfg.sim, cfg.massmodel, cfg.estimator.n_boxes, seed,
                cfg.estimator.slab_mix))
    return hashlib.sha256(key.encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_calibrate(args) -> int:
    cfg = _resolved_config(args)
    cal = cfg.calibration
    seed = cal.seed if args.seed is None else args.seed
    try:
        fmap, samples = calibration.run_calibration(
            cfg.sim, n_transitions=cal.n_transitions, seed=seed,
            bin_count=cal.bin_count, mass=cal.mass)
    except ValueError as exc:
        return _fail(str(exc))
    print(f"{len(samples)} usable transitions "
          f"(requested {cal.n_transitions}, seed {seed})")
    print(f"{'channel':<9}{'populated bins':>15}{'samples':>9}")
    for channel in calibration.CHANNELS:
        rows = fmap.bins[channel]
        count = sum(r[2] for r in rows)
        print(f"{channel:<9}{len(rows):>15}{count:>9}")
    path = cfg.artifact("force_map")
    calibration.save_force_map(path, fmap, metadata=(
        f"config_hash={cfg.config_hash()}", f"seed={seed}"))
    print(f"wrote {path}")
    return 0


def cmd_gen_data(args) -> int:
    cfg = _resolved_config(args)
    est = cfg.estimator
    seed = est.dataset_seed if args.seed is None else args.seed
    dataset = estimator.generate_dataset(
        est.n_boxes, seed, cfg=cfg.sim,
        mass_range=cfg.massmodel.mass_range, slab_mix=est.slab_mix)
    n = dataset.features.shape[0]
    path = cfg.artifact("estimator_dataset")
    estimator.save_dataset(path, dataset)
    _write_sidecar(path, {
        "config_hash": cfg.config_hash(),
        "dataset_hash": _dataset_hash(cfg, seed),
        "seed": seed, "n_boxes": n,
        "transitions": n * sim.EXPLORATION_STEPS})
    print(f"{n} boxes explored, {n * sim.EXPLORATION_STEPS} transitions "
          f"consumed (seed {seed})")
    print(f"wrote {path}")
    return 0


def _load_or_generate_dataset(cfg, dataset_seed):
    """Reuse the cached exploration dataset when its hash matches the
    current configuration; regenerate (and refresh the cache) otherwise."""
    path = cfg.artifact("estimator_dataset")
    want = _dataset_hash(cfg, dataset_seed)
    sidecar = path + ".meta.json"
    if os.path.exists(path) and os.path.exists(sidecar):
        with open(sidecar) as fh:
            meta = json.load(fh)
        if meta.get("dataset_hash") == want:
            print(f"reusing cached dataset {path} (hash {want})")
            return estimator.load_dataset(path)
        print(f"cached dataset hash {meta.get('dataset_hash')} != {want}, "
              "regenerating")
    else:
        print("no cached dataset, generating")
    dataset = estimator.generate_dataset(
        cfg.estimator.n_boxes, dataset_seed, cfg=cfg.sim,
        mass_range=cfg.massmodel.mass_range, slab_mix=cfg.estimator.slab_mix)
    estimator.save_dataset(path, dataset)
    _write_sidecar(path, {
        "config_hash": cfg.config_hash(), "dataset_hash": want,
        "seed": dataset_seed, "n_boxes": dataset.features.shape[0],
        "transitions": dataset.features.shape[0] * sim.EXPLORATION_STEPS})
    return dataset


def cmd_train_estimator(args) -> int:
    cfg = _resolved_config(args)
    est = cfg.estimator
    train_cfg = est.training_config()
    if args.seed is not None:
        train_cfg = replace(train_cfg, seed=args.seed)
    dataset = _load_or_generate_dataset(cfg, est.dataset_seed)
    model, report = estimator.train(dataset, train_cfg)
    if not (np.isfinite(report.train_losses[-1])
            and np.isfinite(report.val_losses[-1])):
        return _fail("training diverged: non-finite loss")
    path = cfg.artifact("estimator_model")
    estimator.save_model(path, model)
    _write_sidecar(path, {
        "config_hash": cfg.config_hash(), "seed": train_cfg.seed,
        "dataset_seed": est.dataset_seed})
    print(json.dumps({
        "train_loss": report.train_losses[-1],
        "val_loss": report.val_losses[-1],
        "val_median_iou": report.val_median_iou,
        "parameters": report.parameter_count,
        "n_train": report.n_train, "n_val": report.n_val}))
    print(f"wrote {path}")
    return 0


def cmd_train_baseline(args) -> int:
    cfg = _resolved_config(args)
    bl = cfg.baseline
    try:
        fmap_path = _require_artifact(cfg, "force_map", "force map",
                                      "calibrate")
        est_path = _require_artifact(cfg, "estimator_model",
                                     "estimator model", "train-estimator")
    except FileNotFoundError as exc:
        return _fail(str(exc))
    fmap = calibration.load_force_map(fmap_path)
    est_model = estimator.load_model(est_path)
    random_seed, collect_seed, train_cfg = (
        bl.random_seed, bl.collect_seed, bl.training_config())
    if args.seed is not None:
        random_seed, collect_seed = args.seed, args.seed + 1
        train_cfg = replace(train_cfg, seed=args.seed + 2)

    box_a = harness.make_roster(cfg)["A"]
    random_data = baseline.collect_random_transitions(
        box_a, bl.random_transitions, random_seed,
        cfg=cfg.sim, ctrl_cfg=cfg.controller)
    controller_data, successes = baseline.collect_controller_transitions(
        box_a, est_model, fmap, bl.controller_episodes, collect_seed,
        ctrl_cfg=cfg.controller, cfg=cfg.sim)
    dataset = random_data.concat(controller_data)
    model, report = baseline.train_blackbox(dataset, train_cfg)
    if not (np.isfinite(report.train_losses[-1])
            and np.isfinite(report.val_mse)):
        return _fail("training diverged: non-finite loss")

    data_path = cfg.artifact("baseline_dataset")
    baseline.save_dataset(data_path, dataset)
    model_path = cfg.artifact("baseline_model")
    baseline.save_model(model_path, model)
    for path in (data_path, model_path):
        _write_sidecar(path, {
            "config_hash": cfg.config_hash(), "random_seed": random_seed,
            "collect_seed": collect_seed, "train_seed": train_cfg.seed})
    print(json.dumps({
        "random_transitions": len(random_data),
        "controller_transitions": len(controller_data),
        "controller_successes": successes,
        "train_loss": report.train_losses[-1],
        "val_mse": report.val_mse,
        "parameters": report.parameter_count}))
    print(f"wrote {model_path}")
    return 0


def cmd_run_episode(args) -> int:
    cfg = _resolved_config(args)
    if args.distribution == "uniform":
        dist = massmodel.uniform_distribution(cfg.calibration.mass)
    else:
        dist = harness.make_roster(cfg)[args.distribution]
    seed = cfg.controller.seed if args.seed is None else args.seed
    ctrl_cfg = replace(cfg.controller, seed=seed)
    try:
        if args.method == "physics":
            fmap = calibration.load_force_map(_require_artifact(
                cfg, "force_map", "force map", "calibrate"))
            est_model = estimator.load_model(_require_artifact(
                cfg, "estimator_model", "estimator model", "train-estimator"))
            result = controller.run_episode(dist, est_model, fmap,
                                            ctrl_cfg=ctrl_cfg,
                                            sim_cfg=cfg.sim)
        else:
            w_model = baseline.load_model(_require_artifact(
                cfg, "baseline_model", "black-box model", "train-baseline"))
            result = baseline.run_episode_blackbox(dist, w_model,
                                                   ctrl_cfg=ctrl_cfg,
                                                   sim_cfg=cfg.sim)
    except FileNotFoundError as exc:
        return _fail(str(exc))
    path = os.path.join(cfg.paths.out,
                        f"episode_{args.method}_{args.distribution}.csv")
    controller.export_episode(path, result, metadata=(
        f"config_hash={cfg.config_hash()}", f"seed={seed}",
        f"method={args.method}", f"distribution={args.distribution}"))
    line = f"{result.outcome} in {result.steps} steps"
    if result.reason:
        line += f" ({result.reason})"
    print(line)
    print(f"wrote {path}")
    return 0


def cmd_bench(args) -> int:
    cfg = _resolved_config(args)
    if args.seed is not None:
        cfg = replace(cfg, roster=replace(cfg.roster, bench_seed=args.seed))
    try:
        fmap = calibration.load_force_map(_require_artifact(
            cfg, "force_map", "force map", "calibrate"))
        est_model = estimator.load_model(_require_artifact(
            cfg, "estimator_model", "estimator model", "train-estimator"))
        w_model = baseline.load_model(_require_artifact(
            cfg, "baseline_model", "black-box model", "train-baseline"))
    except FileNotFoundError as exc:
        return _fail(str(exc))

    total = (2 * len(harness.FIXED_DISTRIBUTIONS) * cfg.roster.repetitions
             + cfg.roster.random_batch)
    done = [0]

    def progress(task, record):
        done[0] += 1
        print(f"[{done[0]}/{total}] {record.method} {record.distribution} "
              f"rep {record.repetition}: {record.outcome} "
              f"({record.steps} steps)", file=sys.stderr)

    report = harness.run_bench(cfg, est_model, fmap, w_model,
                               workers=args.workers, progress=progress)
    paths = {}
    for name, writer in (("bench_episodes.csv", harness.write_episode_csv),
                         ("bench_summary.csv", harness.write_summary_csv),
                         ("balance_band.csv", harness.write_balance_band_csv)):
        paths[name] = os.path.join(cfg.paths.out, name)
        writer(paths[name], report)
    print(harness.format_bench_table(report), end="")
    batch = [c for c in report.cells
             if c.distribution == harness.RANDOM_BATCH]
    if batch:
        print(f"random batch: {batch[0].success_ratio * 100.0:.2f}% success "
              f"over {batch[0].episodes} boxes (reference 83.33%)")
    for flag in harness.ordering_flags(report):
        print(f"FLAG: {flag}")
    for path in paths.values():
        print(f"wrote {path}")
    return 0


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH",
                        help="INI configuration file (defaults if omitted)")
    common.add_argument("--seed", type=int, metavar="N",
                        help="override the command's primary seed")
    common.add_argument("--out", metavar="DIR",
                        help="artifact directory (default from config)")
    common.add_argument("--workers", type=int, default=1, metavar="N",
                        help="worker processes (used by bench)")

    parser = argparse.ArgumentParser(
        prog="twinbelt",
        description="Rotate boxes of unknown mass distribution on two "
                    "conveyor belts; calibrate, train, and benchmark the "
                    "physics-prior and black-box controllers.")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("calibrate", parents=[common],
                   help="build the control-to-force map").set_defaults(
        func=cmd_calibrate)
    sub.add_parser("gen-data", parents=[common],
                   help="generate the exploration dataset").set_defaults(
        func=cmd_gen_data)
    sub.add_parser("train-estimator", parents=[common],
                   help="train the mass-distribution estimator").set_defaults(
        func=cmd_train_estimator)
    sub.add_parser("train-baseline", parents=[common],
                   help="train the black-box dynamics model").set_defaults(
        func=cmd_train_baseline)
    episode = sub.add_parser("run-episode", parents=[common],
                             help="rotate one box and export the trace")
    episode.add_argument("--method", choices=EPISODE_METHODS, required=True)
    episode.add_argument("--distribution", choices=EPISODE_DISTRIBUTIONS,
                         default="A")
    episode.set_defaults(func=cmd_run_episode)
    sub.add_parser("bench", parents=[common],
                   help="run the full benchmark").set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (FileNotFoundError, ValueError) as exc:
        return _fail(str(exc))


if __name__ == "__main__":
    sys.exit(main())
