"""Experiment configuration, the benchmark roster, and bench orchestration.

Configuration is a sectioned INI file; every key defaults to the module
defaults, so an empty file (or none at all) reproduces the desk-scale
benchmark.  A short hash over the fully resolved configuration is embedded in
every output file together with the seeds, and all randomness is derived from
per-episode seed sequences, so reruns with an identical hash produce identical
decision-bearing output (wall-time columns are measured, not reproducible).

The bench runs R repetitions of both methods over four fixed distributions —
A: randomly generated, also the black-box training environment; B: A's mass
rolled one voxel layer (hand-shifted, similar); C: an independent draw with a
distinct mode placement (dissimilar); D: a quarter-slab concentration
(hazardous) — plus a batch of random non-hazardous boxes for the physics-prior
method, whose per-step balance traces feed a median/one-standard-deviation
band file.
"""

import concurrent.futures
import configparser
import copy
from dataclasses import dataclass, fields, replace
import csv
import hashlib
import os

import numpy as np

from . import baseline, calibration, controller, estimator, massmodel, sim

METHOD_PHYSICS = "physics-prior"
METHOD_BLACKBOX = "black-box"
FIXED_DISTRIBUTIONS = ("A", "B", "C", "D")
RANDOM_BATCH = "random"

_METHOD_IDS = {METHOD_PHYSICS: 0, METHOD_BLACKBOX: 1}
_DIST_IDS = {"A": 0, "B": 1, "C": 2, "D": 3, RANDOM_BATCH: 4}


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PathsConfig:
    out: str = "artifacts"
    force_map: str = "force_map.csv"
    estimator_dataset: str = "estimator_dataset.bin"
    estimator_model: str = "estimator_model.bin"
    baseline_dataset: str = "baseline_transitions.bin"
    baseline_model: str = "baseline_model.bin"


@dataclass(frozen=True)
class MassModelConfig:
    mass_range: tuple = massmodel.DEFAULT_MASS_RANGE

    def __post_init__(self):
        lo, hi = self.mass_range
        if lo <= 0 or hi < lo:
            raise ValueError("mass_range must be positive and ordered")


@dataclass(frozen=True)
class CalibrationSettings:
    n_transitions: int = 400
    seed: int = 3
    mass: float = 2.0
    bin_count: int = calibration.DEFAULT_BIN_COUNT

    def __post_init__(self):
        if self.n_transitions < 1 or self.bin_count < 3 or self.mass <= 0:
            raise ValueError("invalid calibration settings")


@dataclass(frozen=True)
class EstimatorSettings:
    n_boxes: int = 500
    dataset_seed: int = 0
    slab_mix: float = 0.2
    learning_rate: float = 1e-3
    batch_size: int = 32
    epochs: int = 150
    lambda_mass: float = 1.0
    train_seed: int = 0
    val_split: float = 0.2
    hidden: tuple = (512, 512)

    def training_config(self) -> estimator.TrainingConfig:
        return estimator.TrainingConfig(
            learning_rate=self.learning_rate, batch_size=self.batch_size,
            epochs=self.epochs, lambda_mass=self.lambda_mass,
            seed=self.train_seed, val_split=self.val_split,
            hidden=tuple(int(h) for h in self.hidden))


@dataclass(frozen=True)
class BaselineSettings:
    random_transitions: int = 2400
    random_seed: int = 1
    controller_episodes: int = 10
    collect_seed: int = 100
    learning_rate: float = 1e-3
    batch_size: int = 64
    epochs: int = 80
    train_seed: int = 0
    val_split: float = 0.1
    hidden: tuple = (256, 256)

    def training_config(self) -> baseline.BaselineTrainingConfig:
        return baseline.BaselineTrainingConfig(
            learning_rate=self.learning_rate, batch_size=self.batch_size,
            epochs=self.epochs, seed=self.train_seed,
            val_split=self.val_split,
            hidden=tuple(int(h) for h in self.hidden))


@dataclass(frozen=True)
class RosterConfig:
    seed_a: int = 48
    seed_c: int = 45
    hazard_payload: float = 4.0
    repetitions: int = 5
    random_batch: int = 20
    random_batch_seed: int = 7
    bench_seed: int = 0

    def __post_init__(self):
        if self.repetitions < 1 or self.random_batch < 0:
            raise ValueError("invalid roster settings")
        if self.hazard_payload <= 0:
            raise ValueError("hazard_payload must be positive")


# aliases: the field names below shadow the module names inside the class body
_BeltConfig = sim.BeltConfig
_ControllerConfig = controller.ControllerConfig


@dataclass(frozen=True)
class ExperimentConfig:
    paths: PathsConfig = PathsConfig()
    sim: _BeltConfig = sim.DEFAULT_CONFIG
    massmodel: MassModelConfig = MassModelConfig()
    calibration: CalibrationSettings = CalibrationSettings()
    estimator: EstimatorSettings = EstimatorSettings()
    baseline: BaselineSettings = BaselineSettings()
    controller: _ControllerConfig = _ControllerConfig()
    roster: RosterConfig = RosterConfig()

    def config_hash(self) -> str:
        # paths are deliberately left out: where artifacts land must not
        # change what identifies the experiment
        key = repr((self.sim, self.massmodel, self.calibration,
                    self.estimator, self.baseline, self.controller,
                    self.roster))
        return hashlib.sha256(key.encode()).hexdigest()[:16]

    def artifact(self, name) -> str:
        return os.path.join(self.paths.out, getattr(self.paths, name))


_SECTIONS = {
    "paths": PathsConfig,
    "sim": sim.BeltConfig,
    "massmodel": MassModelConfig,
    "calibration": CalibrationSettings,
    "estimator": EstimatorSettings,
    "baseline": BaselineSettings,
    "controller": controller.ControllerConfig,
    "roster": RosterConfig,
}


def _coerce(text, default):
    if isinstance(default, bool):
        return text.strip().lower() in ("1", "true", "yes", "on")
    if isinstance(default, int):
        return int(text)
    if isinstance(default, (float, np.floating)):
        return float(text)
    if isinstance(default, tuple):
        tokens = [tok.strip() for tok in text.split(",") if tok.strip()]
        if default and all(isinstance(v, int) for v in default):
            return tuple(int(tok) for tok in tokens)
        return tuple(float(tok) for tok in tokens)
    return text


def load_config(path=None) -> ExperimentConfig:
    """ExperimentConfig from an INI file; every key falls back to defaults.

    Unknown sections or keys raise ValueError so typos cannot silently
    deconfigure a run.
    """
    parser = configparser.ConfigParser()
    if path is not None:
        if not parser.read(path):
            raise FileNotFoundError(f"config file not found: {path}")
    built = {}
    known = {name: {f.name for f in fields(cls)}
             for name, cls in _SECTIONS.items()}
    for section in parser.sections():
        if section not in _SECTIONS:
            raise ValueError(f"unknown config section [{section}]")
        cls = _SECTIONS[section]
        defaults = cls()
        kwargs = {}
        for key, text in parser.items(section):
            if key not in known[section]:
                raise ValueError(f"unknown key {key!r} in section [{section}]")
            kwargs[key] = _coerce(text, getattr(defaults, key))
        built[section] = cls(**kwargs)
    return ExperimentConfig(**built)


def default_config_text() -> str:
    """The full default configuration, serialized as an INI document."""
    lines = ["# Desk-scale benchmark defaults; every key may be omitted."]
    for name, cls in _SECTIONS.items():
        lines.append(f"\n[{name}]")
        defaults = cls()
        for f in fields(cls):
            value = getattr(defaults, f.name)
            if isinstance(value, tuple):
                value = ", ".join(repr(float(v)) if isinstance(
                    v, (float, np.floating)) else str(v) for v in value)
            lines.append(f"{f.name} = {value}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# the distribution roster
# ---------------------------------------------------------------------------

def make_roster(cfg: ExperimentConfig) -> dict:
    """The four fixed benchmark distributions, keyed "A" through "D"."""
    mass_range = cfg.massmodel.mass_range
    a = massmodel.sample_gaussian_distribution(cfg.roster.seed_a,
                                               mass_range=mass_range)
    b = massmodel.make_distribution(np.roll(a.voxel_mass, 1, axis=0),
                                    box_dims=a.box_dims)
    c = massmodel.sample_gaussian_distribution(cfg.roster.seed_c,
                                               mass_range=mass_range)
    l, w, h = massmodel.DEFAULT_BOX_DIMS
    centers = massmodel.voxel_centers(massmodel.DEFAULT_GRID_DIMS) + \
        np.array([l, w, h]) / 2.0
    d = massmodel.distribution_from_occupancy(centers[..., 0] <= l / 4.0,
                                              cfg.roster.hazard_payload)
    roster = {"A": a, "B": b, "C": c, "D": d}
    for name in ("A", "B", "C"):
        if massmodel.classify_hazard(roster[name]).hazardous:
            raise ValueError(f"roster distribution {name} must not be "
                             "hazardous; pick a different seed")
    if not massmodel.classify_hazard(d).hazardous:
        raise ValueError("roster distribution D must be hazardous")
    return roster


def random_nonhazardous_batch(n, seed, mass_range=massmodel.DEFAULT_MASS_RANGE):
    """n random Gaussian-blob boxes, resampling any hazardous draw."""
    rng = np.random.default_rng(seed)
    boxes = []
    while len(boxes) < n:
        child = int(rng.integers(2 ** 63))
        dist = massmodel.sample_gaussian_distribution(child,
                                                      mass_range=mass_range)
        if not massmodel.classify_hazard(dist).hazardous:
            boxes.append(dist)
    return boxes


# ---------------------------------------------------------------------------
# bench records and aggregation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EpisodeRecord:
    method: str
    distribution: str
    repetition: int
    seed: int
    outcome: str
    steps: int
    max_balance_error: float
    reason: str
    wall_time: float
    adapt_time: float


@dataclass(frozen=True)
class BenchCell:
    method: str
    distribution: str
    episodes: int
    success_ratio: float
    abort_count: int
    avg_steps: float
    max_balance_error: float
    avg_wall_time: float
    avg_adapt_time: float

    def __post_init__(self):
        if not 0.0 <= self.success_ratio <= 1.0:
            raise ValueError("success_ratio must lie in [0, 1]")


@dataclass(frozen=True)
class BenchReport:
    cells: tuple                # one BenchCell per (method, distribution)
    records: tuple              # every EpisodeRecord the cells aggregate
    balance_traces: tuple       # per-step balance errors, random batch only
    config_hash: str
    bench_seed: int


def _episode_setup(bench_seed, method, dist_name, rep):
    """Per-episode control seed and starting-pose jitter, stable under
    concurrency because they derive only from the episode's identity."""
    ss = np.random.SeedSequence(
        [bench_seed, _METHOD_IDS[method], _DIST_IDS[dist_name], rep])
    ctrl_seed = int(ss.generate_state(1)[0])
    rng = np.random.default_rng(ss.spawn(1)[0])
    init_pose = (float(rng.uniform(-0.02, 0.02)),
                 float(rng.uniform(-0.01, 0.01)), 0.0)
    return ctrl_seed, init_pose


def _run_bench_episode(task):
    (method, dist_name, rep, dist, est_model, force_map, w_model,
     ctrl_cfg, sim_cfg, bench_seed) = task
    seed, init_pose = _episode_setup(bench_seed, method, dist_name, rep)
    cfg = replace(ctrl_cfg, seed=seed)
    if method == METHOD_PHYSICS:
        result = controller.run_episode(dist, est_model, force_map,
                                        ctrl_cfg=cfg, sim_cfg=sim_cfg,
                                        init_pose=init_pose)
    else:
        # each episode adapts a fresh copy: adaptation must not leak between
        # environments
        result = baseline.run_episode_blackbox(dist, copy.deepcopy(w_model),
                                               ctrl_cfg=cfg, sim_cfg=sim_cfg,
                                               init_pose=init_pose)
    record = EpisodeRecord(
        method=method, distribution=dist_name, repetition=rep, seed=seed,
        outcome=result.outcome, steps=result.steps,
        max_balance_error=result.max_balance_error, reason=result.reason,
        wall_time=result.wall_time, adapt_time=result.adapt_time)
    return record, result.balance_errors


def _aggregate(method, dist_name, records) -> BenchCell:
    n = len(records)
    return BenchCell(
        method=method, distribution=dist_name, episodes=n,
        success_ratio=sum(r.outcome == controller.OUTCOME_SUCCESS
                          for r in records) / n,
        abort_count=sum(r.outcome == controller.OUTCOME_ABORTED
                        for r in records),
        avg_steps=sum(r.steps for r in records) / n,
        max_balance_error=max(r.max_balance_error for r in records),
        avg_wall_time=sum(r.wall_time for r in records) / n,
        avg_adapt_time=sum(r.adapt_time for r in records) / n)


def run_bench(cfg: ExperimentConfig, est_model, force_map, w_model,
              workers=1, progress=None) -> BenchReport:
    """The full benchmark: R repetitions x both methods x A-D, plus the
    random non-hazardous batch under the physics-prior method."""
    roster = make_roster(cfg)
    tasks = []
    for dist_name in FIXED_DISTRIBUTIONS:
        for method in (METHOD_PHYSICS, METHOD_BLACKBOX):
            for rep in range(cfg.roster.repetitions):
                tasks.append((method, dist_name, rep, roster[dist_name],
                              est_model, force_map, w_model, cfg.controller,
                              cfg.sim, cfg.roster.bench_seed))
    batch = random_nonhazardous_batch(cfg.roster.random_batch,
                                     cfg.roster.random_batch_seed,
                                     cfg.massmodel.mass_range)
    for i, dist in enumerate(batch):
        tasks.append((METHOD_PHYSICS, RANDOM_BATCH, i, dist, est_model,
                      force_map, w_model, cfg.controller, cfg.sim,
                      cfg.roster.bench_seed))

    if workers > 1:
        with concurrent.futures.ProcessPoolExecutor(workers) as pool:
            outcomes = list(pool.map(_run_bench_episode, tasks))
    else:
        outcomes = []
        for task in tasks:
            outcomes.append(_run_bench_episode(task))
            if progress is not None:
                progress(task, outcomes[-1][0])

    records = tuple(rec for rec, _ in outcomes)
    balance_traces = tuple(trace for rec, trace in outcomes
                           if rec.distribution == RANDOM_BATCH)
    cells = []
    for dist_name in FIXED_DISTRIBUTIONS:
        for method in (METHOD_PHYSICS, METHOD_BLACKBOX):
            group = [r for r in records
                     if r.method == method and r.distribution == dist_name]
            cells.append(_aggregate(method, dist_name, group))
    batch_records = [r for r in records if r.distribution == RANDOM_BATCH]
    if batch_records:
        cells.append(_aggregate(METHOD_PHYSICS, RANDOM_BATCH, batch_records))
    return BenchReport(cells=tuple(cells), records=records,
                       balance_traces=balance_traces,
                       config_hash=cfg.config_hash(),
                       bench_seed=cfg.roster.bench_seed)


def ordering_flags(report: BenchReport) -> tuple:
    """Soft expectations on the summary; violations are reported, not fatal.

    The physics-prior method is expected to match or beat the black box on
    the dissimilar distribution C, and every physics-prior D episode is
    expected to end in an abort.
    """
    by_key = {(c.method, c.distribution): c for c in report.cells}
    flags = []
    phys_c = by_key.get((METHOD_PHYSICS, "C"))
    black_c = by_key.get((METHOD_BLACKBOX, "C"))
    if phys_c and black_c and phys_c.success_ratio < black_c.success_ratio:
        flags.append(
            f"expected physics-prior success on C >= black-box, got "
            f"{phys_c.success_ratio:.2f} < {black_c.success_ratio:.2f}")
    phys_d = by_key.get((METHOD_PHYSICS, "D"))
    if phys_d and phys_d.abort_count < phys_d.episodes:
        flags.append(
            f"expected every physics-prior episode on D to abort, got "
            f"{phys_d.abort_count}/{phys_d.episodes}")
    return tuple(flags)


# ---------------------------------------------------------------------------
# report files
# ---------------------------------------------------------------------------

def _metadata_lines(report: BenchReport):
    return (f"config_hash={report.config_hash}",
            f"bench_seed={report.bench_seed}")


def write_episode_csv(path, report: BenchReport) -> None:
    """One row per episode; wall-time columns last (measured, not seeded)."""
    with open(path, "w", newline="") as fh:
        for line in _metadata_lines(report):
            fh.write(f"# {line}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(("method", "distribution", "repetition", "seed",
                         "outcome", "steps", "max_balance_error", "reason",
                         "wall_time", "adapt_time"))
        for r in report.records:
            writer.writerow((r.method, r.distribution, r.repetition, r.seed,
                             r.outcome, r.steps, repr(r.max_balance_error),
                             r.reason, repr(r.wall_time),
                             repr(r.adapt_time)))


def write_summary_csv(path, report: BenchReport) -> None:
    """The method-comparison table, one row per (method, distribution)."""
    with open(path, "w", newline="") as fh:
        for line in _metadata_lines(report):
            fh.write(f"# {line}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(("method", "distribution", "episodes",
                         "success_ratio", "abort_count", "avg_steps",
                         "max_balance_error", "online_adaptation",
                         "avg_wall_time", "avg_adapt_time"))
        for c in report.cells:
            writer.writerow((c.method, c.distribution, c.episodes,
                             repr(c.success_ratio), c.abort_count,
                             repr(c.avg_steps), repr(c.max_balance_error),
                             "yes" if c.method == METHOD_BLACKBOX else "no",
                             repr(c.avg_wall_time), repr(c.avg_adapt_time)))


def balance_band(traces):
    """Per-step median and one-standard-deviation band over the episodes
    still running at each step.  Returns (steps, n_alive, median, lo, hi)."""
    if not traces:
        return (), (), (), (), ()
    longest = max(len(t) for t in traces)
    steps, alive, med, lo, hi = [], [], [], [], []
    for i in range(longest):
        values = np.array([t[i] for t in traces if len(t) > i])
        steps.append(i)
        alive.append(len(values))
        m = float(np.median(values))
        s = float(values.std())
        med.append(m)
        lo.append(m - s)
        hi.append(m + s)
    return tuple(steps), tuple(alive), tuple(med), tuple(lo), tuple(hi)


def write_balance_band_csv(path, report: BenchReport) -> None:
    steps, alive, med, lo, hi = balance_band(report.balance_traces)
    with open(path, "w", newline="") as fh:
        for line in _metadata_lines(report):
            fh.write(f"# {line}\n")
        fh.write(f"# episodes={len(report.balance_traces)}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(("step", "episodes_running", "median_balance_error",
                         "band_lo", "band_hi"))
        for row in zip(steps, alive, med, lo, hi):
            writer.writerow((row[0], row[1], repr(row[2]), repr(row[3]),
                             repr(row[4])))


def format_bench_table(report: BenchReport) -> str:
    """Fixed-width text rendering of the summary cells."""
    header = (f"{'distribution':<14}{'method':<16}{'success':>9}"
              f"{'aborts':>8}{'avg steps':>11}{'max bal [mm]':>14}"
              f"{'wall [s]':>10}{'adapt [s]':>11}")
    rows = [f"config {report.config_hash}  bench seed {report.bench_seed}",
            header, "-" * len(header)]
    for c in report.cells:
        rows.append(
            f"{c.distribution:<14}{c.method:<16}"
            f"{c.success_ratio * 100.0:>8.1f}%{c.abort_count:>8}"
            f"{c.avg_steps:>11.1f}{c.max_balance_error * 1000.0:>14.1f}"
            f"{c.avg_wall_time:>10.2f}{c.avg_adapt_time:>11.2f}")
    return "\n".join(rows) + "\n"
