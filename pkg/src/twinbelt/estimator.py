"""Mass-distribution estimation from the fixed exploratory trajectory.

A shared ReLU backbone feeds two heads: occupancy logits (one per voxel of the
default grid) and a scalar total mass.  Features are the 45 exploration
transitions flattened to (state 5, action 4, next state 5) per step, with all
poses expressed relative to the episode's initial pose, so the encoding is
invariant to where on the belts the episode happened to start.

Training minimizes BCE(occupancy) + lambda_mass * MSE(standardized mass) with
the adaptive-moment optimizer; features are standardized per dimension over
the training split (choice logged in the training report).
"""

from dataclasses import dataclass, field
import math

import numpy as np
from sklearn.base import BaseEstimator

from . import arrayio, massmodel, nn, sim

STATE_DIM = 5                   # pose (3) + belt positions (2)
ACTION_DIM = 4                  # (v1, v2, p1, p2)
TRANSITION_DIM = 2 * STATE_DIM + ACTION_DIM
FEATURE_DIM = sim.EXPLORATION_STEPS * TRANSITION_DIM
N_VOXELS = int(np.prod(massmodel.DEFAULT_GRID_DIMS))
MODEL_VERSION = 1

_STD_FLOOR = 1e-8               # degenerate feature dimensions divide by 1


@dataclass(frozen=True)
class TrainingConfig:
    learning_rate: float = 1e-3
    batch_size: int = 32
    epochs: int = 60
    lambda_mass: float = 1.0
    seed: int = 0
    val_split: float = 0.2
    hidden: tuple = (512, 512)

    def __post_init__(self):
        if self.lambda_mass < 0.0:
            raise ValueError("lambda_mass must be >= 0")
        if not 0.0 < self.val_split < 1.0:
            raise ValueError("val_split must lie in (0, 1)")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")


@dataclass(frozen=True, eq=False)
class Dataset:
    """Featurized exploration episodes with ground-truth labels."""

    features: np.ndarray        # (n, FEATURE_DIM)
    occupancy: np.ndarray       # (n, N_VOXELS), binary floats
    mass: np.ndarray            # (n,), total mass in kg
    grid_dims: tuple = massmodel.DEFAULT_GRID_DIMS
    box_dims: tuple = massmodel.DEFAULT_BOX_DIMS

    def __post_init__(self):
        n = self.features.shape[0]
        if self.occupancy.shape[0] != n or self.mass.shape[0] != n:
            raise ValueError("dataset arrays disagree on length")

    def __len__(self):
        return self.features.shape[0]


@dataclass(eq=False)
class EstimatorModel:
    backbone: nn.DenseNet
    occ_head: nn.DenseNet
    mass_head: nn.DenseNet
    feat_mean: np.ndarray
    feat_std: np.ndarray
    mass_mean: float
    mass_std: float
    optimizer: nn.Adam = None
    version: int = MODEL_VERSION

    @property
    def params(self):
        return self.backbone.params + self.occ_head.params + \
            self.mass_head.params

    @property
    def parameter_count(self) -> int:
        return sum(p.size for p in self.params)

    def assert_finite(self):
        if not all(np.all(np.isfinite(p)) for p in self.params):
            raise ValueError("model weights are not finite")


@dataclass(frozen=True)
class TrainingReport:
    train_losses: tuple         # per-epoch mean training loss
    val_losses: tuple           # per-epoch validation loss
    val_median_iou: float
    parameter_count: int
    n_train: int
    n_val: int
    notes: tuple                # logged modeling choices


@dataclass(frozen=True)
class EstimateResult:
    dist: massmodel.MassDistribution
    fallback_full_occupancy: bool
    raw_mass: float             # mass-head output before clamping, kg
    probabilities: np.ndarray   # sigmoid occupancy probabilities, flat


# ---------------------------------------------------------------------------
# featurization and dataset generation
# ---------------------------------------------------------------------------

def _state_vector(obs, origin):
    x0, y0, theta0 = origin
    x, y, theta = obs.geom_pose
    return (x - x0, y - y0, theta - theta0,
            obs.belt_y[0] - y0, obs.belt_y[1] - y0)


def featurize_trajectory(traj: sim.Trajectory) -> np.ndarray:
    """Fixed-length feature vector for one full exploration episode."""
    if len(traj) != sim.EXPLORATION_STEPS:
        raise ValueError(
            f"expected {sim.EXPLORATION_STEPS} transitions, got {len(traj)}")
    origin = traj.transitions[0].obs.geom_pose
    out = np.empty(FEATURE_DIM)
    for i, tr in enumerate(traj.transitions):
        a = tr.action
        out[i * TRANSITION_DIM:(i + 1) * TRANSITION_DIM] = (
            *_state_vector(tr.obs, origin),
            a.v1, a.v2, a.p1, a.p2,
            *_state_vector(tr.next_obs, origin))
    return out


def generate_dataset(n_boxes, seed, cfg: sim.BeltConfig = sim.DEFAULT_CONFIG,
                     mass_range=massmodel.DEFAULT_MASS_RANGE,
                     slab_mix=0.2) -> Dataset:
    """Sample boxes, run the exploration on each, and featurize.

    A slab_mix fraction of the boxes are edge-slab concentrated (the shapes
    the hazard gate must recognize); the rest are random Gaussian blobs.
    Starting poses are jittered per episode so the learned mapping tolerates
    imperfectly placed boxes instead of overfitting one geometry.  Boxes whose
    exploration loses support are resampled, so the dataset always contains
    n_boxes complete episodes.
    """
    if n_boxes < 1:
        raise ValueError("need n_boxes >= 1")
    if not 0.0 <= slab_mix <= 1.0:
        raise ValueError("slab_mix must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    features = np.empty((n_boxes, FEATURE_DIM))
    occupancy = np.empty((n_boxes, N_VOXELS))
    mass = np.empty(n_boxes)
    filled = 0
    while filled < n_boxes:
        child = int(rng.integers(2 ** 63))
        sample = massmodel.sample_slab_distribution \
            if rng.uniform() < slab_mix \
            else massmodel.sample_gaussian_distribution
        dist = sample(child, mass_range=mass_range)
        init_pose = (rng.uniform(-0.03, 0.03), rng.uniform(-0.015, 0.015),
                     rng.uniform(-0.1, 0.1))
        try:
            state, _ = sim.reset(dist, init_pose, cfg=cfg)
        except sim.UnsupportedPoseError:
            continue
        traj, _ = sim.run_exploratory_sequence(state, dist, cfg)
        if traj.support_lost or len(traj) != sim.EXPLORATION_STEPS:
            continue
        features[filled] = featurize_trajectory(traj)
        occupancy[filled] = \
            massmodel.occupancy_from_distribution(dist).occupancy.reshape(-1)
        mass[filled] = dist.total_mass
        filled += 1
    return Dataset(features=features, occupancy=occupancy, mass=mass)


def save_dataset(path, dataset: Dataset) -> None:
    arrayio.save_arrays(path, {
        "features": dataset.features,
        "occupancy": dataset.occupancy,
        "mass": dataset.mass,
        "grid_dims": np.array(dataset.grid_dims, dtype=float),
        "box_dims": np.array(dataset.box_dims, dtype=float),
    })


def load_dataset(path) -> Dataset:
    arrays = arrayio.load_arrays(path)
    return Dataset(features=arrays["features"],
                   occupancy=arrays["occupancy"],
                   mass=arrays["mass"],
                   grid_dims=tuple(int(d) for d in arrays["grid_dims"]),
                   box_dims=tuple(arrays["box_dims"]))


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

def _forward(model: EstimatorModel, x):
    h, cb = model.backbone.forward(x)
    logits, co = model.occ_head.forward(h)
    mass_std, cm = model.mass_head.forward(h)
    return logits, mass_std, (cb, co, cm)


def _combined_loss(model, x, y_occ, y_mass_std, lam):
    logits, mass_std, caches = _forward(model, x)
    bce, g_occ = nn.bce_with_logits(logits, y_occ)
    mse, g_mass = nn.mse_loss(mass_std, y_mass_std)
    return bce + lam * mse, (g_occ, lam * g_mass), caches


def train(dataset: Dataset, cfg: TrainingConfig = TrainingConfig()):
    """Train the two-headed estimator.  Returns (model, report)."""
    n = len(dataset)
    if n < 10:
        raise ValueError("need at least 10 items to train")
    rng = np.random.default_rng(cfg.seed)
    perm = rng.permutation(n)
    n_val = max(1, int(round(cfg.val_split * n)))
    if n_val >= n:
        raise ValueError("validation split leaves no training data")
    val_idx, train_idx = perm[:n_val], perm[n_val:]

    x_all = dataset.features
    feat_mean = x_all[train_idx].mean(axis=0)
    feat_std = np.maximum(x_all[train_idx].std(axis=0), _STD_FLOOR)
    mass_mean = float(dataset.mass[train_idx].mean())
    mass_std = float(max(dataset.mass[train_idx].std(), _STD_FLOOR))

    x = (x_all - feat_mean) / feat_std
    y_occ = dataset.occupancy
    y_mass = ((dataset.mass - mass_mean) / mass_std)[:, None]

    dims = (FEATURE_DIM, *cfg.hidden)
    model = EstimatorModel(
        backbone=nn.DenseNet(dims, seed=cfg.seed, final_activation=True),
        occ_head=nn.DenseNet((cfg.hidden[-1], N_VOXELS), seed=cfg.seed + 1),
        mass_head=nn.DenseNet((cfg.hidden[-1], 1), seed=cfg.seed + 2),
        feat_mean=feat_mean, feat_std=feat_std,
        mass_mean=mass_mean, mass_std=mass_std)
    model.optimizer = nn.Adam(model.params, lr=cfg.learning_rate)

    train_losses, val_losses = [], []
    for epoch in range(1, cfg.epochs + 1):
        total, seen = 0.0, 0
        for idx in nn.minibatches(len(train_idx), cfg.batch_size, rng):
            batch = train_idx[idx]
            loss, (g_occ, g_mass), (cb, co, cm) = _combined_loss(
                model, x[batch], y_occ[batch], y_mass[batch], cfg.lambda_mass)
            if not math.isfinite(loss):
                raise nn.TrainingDiverged(epoch)
            occ_grads, gh_occ = model.occ_head.backward(co, g_occ)
            mass_grads, gh_mass = model.mass_head.backward(cm, g_mass)
            back_grads, _ = model.backbone.backward(cb, gh_occ + gh_mass)
            model.optimizer.step(back_grads + occ_grads + mass_grads)
            total += loss * len(batch)
            seen += len(batch)
        train_losses.append(total / seen)
        val_loss, _, _ = _combined_loss(model, x[val_idx], y_occ[val_idx],
                                        y_mass[val_idx], cfg.lambda_mass)
        if not math.isfinite(val_loss):
            raise nn.TrainingDiverged(epoch)
        val_losses.append(val_loss)

    model.assert_finite()
    ious = []
    probs, _, _ = _forward(model, x[val_idx])
    probs = nn.sigmoid(probs)
    for row, truth in zip(probs, y_occ[val_idx]):
        pred_grid = massmodel.OccupancyGrid(
            grid_dims=dataset.grid_dims,
            occupancy=row.reshape(dataset.grid_dims))
        true_grid = massmodel.OccupancyGrid(
            grid_dims=dataset.grid_dims,
            occupancy=truth.reshape(dataset.grid_dims))
        ious.append(massmodel.iou(pred_grid, true_grid))
    report = TrainingReport(
        train_losses=tuple(train_losses), val_losses=tuple(val_losses),
        val_median_iou=float(np.median(ious)),
        parameter_count=model.parameter_count,
        n_train=len(train_idx), n_val=n_val,
        notes=("features standardized per dimension over the training split",
               "mass targets standardized to zero mean, unit variance",
               f"architecture {dims} -> heads ({N_VOXELS}, 1)"))
    return model, report


# ---------------------------------------------------------------------------
# inference
# ---------------------------------------------------------------------------

def predict_raw(model: EstimatorModel, features):
    """Occupancy probabilities and unstandardized mass for a feature batch."""
    x = (np.atleast_2d(features) - model.feat_mean) / model.feat_std
    logits, mass_std, _ = _forward(model, x)
    probs = nn.sigmoid(logits)
    mass = mass_std[:, 0] * model.mass_std + model.mass_mean
    return probs, mass


def predict(model: EstimatorModel, traj: sim.Trajectory,
            grid_dims=massmodel.DEFAULT_GRID_DIMS,
            box_dims=massmodel.DEFAULT_BOX_DIMS) -> EstimateResult:
    """Estimated MassDistribution for one exploration trajectory.

    Occupancy = probabilities thresholded at 0.5; the predicted total mass
    (minus the grid's mass floor, clamped positive) is split equally over the
    predicted-occupied voxels.  An empty predicted occupancy falls back to
    full occupancy and flags it.
    """
    probs, mass = predict_raw(model, featurize_trajectory(traj))
    probs, raw_mass = probs[0], float(mass[0])
    occupied = (probs > 0.5).reshape(grid_dims)
    fallback = not occupied.any()
    if fallback:
        occupied = np.ones(grid_dims, dtype=bool)
    floor_total = massmodel.mass_floor_for(grid_dims) * np.prod(grid_dims)
    payload = max(raw_mass - floor_total, 1e-3)
    dist = massmodel.distribution_from_occupancy(occupied, payload, box_dims)
    return EstimateResult(dist=dist, fallback_full_occupancy=fallback,
                          raw_mass=raw_mass, probabilities=probs)


# ---------------------------------------------------------------------------
# persistence (shared container; layer dims first, then weights in order)
# ---------------------------------------------------------------------------

def save_model(path, model: EstimatorModel) -> None:
    arrays = {"version": np.array(float(model.version))}
    arrays.update(nn.net_to_arrays("backbone", model.backbone))
    arrays.update(nn.net_to_arrays("occ", model.occ_head))
    arrays.update(nn.net_to_arrays("mass", model.mass_head))
    arrays["feat_mean"] = model.feat_mean
    arrays["feat_std"] = model.feat_std
    arrays["mass_norm"] = np.array([model.mass_mean, model.mass_std])
    if model.optimizer is not None:
        arrays.update(nn.adam_to_arrays("adam", model.optimizer))
    arrayio.save_arrays(path, arrays)


def load_model(path) -> EstimatorModel:
    arrays = arrayio.load_arrays(path)
    version = int(arrays["version"])
    if version != MODEL_VERSION:
        raise ValueError(f"unsupported estimator model version {version}")
    model = EstimatorModel(
        backbone=nn.net_from_arrays("backbone", arrays, final_activation=True),
        occ_head=nn.net_from_arrays("occ", arrays),
        mass_head=nn.net_from_arrays("mass", arrays),
        feat_mean=arrays["feat_mean"], feat_std=arrays["feat_std"],
        mass_mean=float(arrays["mass_norm"][0]),
        mass_std=float(arrays["mass_norm"][1]))
    if "adam_state" in arrays:
        model.optimizer = nn.adam_from_arrays("adam", arrays, model.params)
    model.assert_finite()
    return model


# ---------------------------------------------------------------------------
# scikit-learn style wrapper over the learned mapping
# ---------------------------------------------------------------------------

class TrajectoryMassEstimator(BaseEstimator):
    """Estimator over featurized trajectories.

    fit(X, y): X is (n, FEATURE_DIM); y is (n, N_VOXELS + 1) with binary
    occupancy columns first and total mass last.  predict(X) returns the same
    layout with occupancy probabilities and unstandardized mass.
    """

    def __init__(self, hidden=(512, 512), learning_rate=1e-3, batch_size=32,
                 epochs=60, lambda_mass=1.0, seed=0, val_split=0.2):
        self.hidden = hidden
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.epochs = epochs
        self.lambda_mass = lambda_mass
        self.seed = seed
        self.val_split = val_split

    def _config(self) -> TrainingConfig:
        return TrainingConfig(learning_rate=self.learning_rate,
                              batch_size=self.batch_size, epochs=self.epochs,
                              lambda_mass=self.lambda_mass, seed=self.seed,
                              val_split=self.val_split,
                              hidden=tuple(self.hidden))

    def fit(self, X, y):
        X = np.asarray(X, dtype=float)
        y = np.asarray(y, dtype=float)
        if y.shape != (X.shape[0], N_VOXELS + 1):
            raise ValueError(f"y must have shape (n, {N_VOXELS + 1})")
        dataset = Dataset(features=X, occupancy=y[:, :N_VOXELS],
                          mass=y[:, N_VOXELS])
        self.model_, self.report_ = train(dataset, self._config())
        return self

    def predict(self, X):
        probs, mass = predict_raw(self.model_, np.asarray(X, dtype=float))
        return np.column_stack((probs, mass))

    def predict_distribution(self, traj) -> EstimateResult:
        return predict(self.model_, traj)
