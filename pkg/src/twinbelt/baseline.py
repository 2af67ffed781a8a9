"""Black-box MPC baseline: a learned one-step model s' = W(s, a).

W is a dense network over the raw 9-dimensional (state, action) input,
predicting the standardized state change (the classical choice for one-step
shooting models: the per-period change is small against the state range, so
regressing it directly is far better conditioned than regressing s').  The
composed predict_next still maps (state 5, action 4) -> next state 5.

The baseline shares the physics-prior controller's candidate set, scoring,
Pareto selection, and termination by calling the same control loop; only the
predictor differs.  There is no exploratory phase, no hazard gate, and no
admissibility screening — the model is opaque, so there is nothing
interpretable to screen on.  During an episode the model is re-fit for one
epoch on all transitions observed so far, every ADAPT_EVERY control steps,
against the frozen training-time normalization.
"""

from dataclasses import dataclass, replace
import math
import time

import numpy as np
from sklearn.base import BaseEstimator

from . import arrayio, controller, nn, sim

STATE_DIM = 5                   # pose (3) + belt positions (2)
ACTION_DIM = 4                  # (v1, v2, p1, p2)
INPUT_DIM = STATE_DIM + ACTION_DIM
MODEL_VERSION = 1
ADAPT_EVERY = 20                # control steps between adaptation epochs

_STD_FLOOR = 1e-8               # degenerate dimensions divide by 1


@dataclass(frozen=True)
class BaselineTrainingConfig:
    learning_rate: float = 1e-3
    batch_size: int = 64
    epochs: int = 40
    seed: int = 0
    val_split: float = 0.1
    hidden: tuple = (256, 256)

    def __post_init__(self):
        if not 0.0 < self.val_split < 1.0:
            raise ValueError("val_split must lie in (0, 1)")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")


@dataclass(frozen=True, eq=False)
class TransitionDataset:
    """Aligned (s, a, s') arrays from one distribution's environment."""

    states: np.ndarray          # (n, STATE_DIM)
    actions: np.ndarray         # (n, ACTION_DIM)
    next_states: np.ndarray     # (n, STATE_DIM)

    def __post_init__(self):
        n = self.states.shape[0]
        if (self.states.shape != (n, STATE_DIM) or
                self.actions.shape != (n, ACTION_DIM) or
                self.next_states.shape != (n, STATE_DIM)):
            raise ValueError("dataset arrays disagree on shape")

    def __len__(self):
        return self.states.shape[0]

    def concat(self, other: "TransitionDataset") -> "TransitionDataset":
        return TransitionDataset(
            states=np.concatenate((self.states, other.states)),
            actions=np.concatenate((self.actions, other.actions)),
            next_states=np.concatenate((self.next_states,
                                        other.next_states)))


@dataclass(eq=False)
class BlackboxModel:
    net: nn.DenseNet            # INPUT_DIM -> hidden -> STATE_DIM
    in_mean: np.ndarray
    in_std: np.ndarray
    delta_mean: np.ndarray
    delta_std: np.ndarray
    optimizer: nn.Adam = None
    version: int = MODEL_VERSION

    def __post_init__(self):
        if self.net.dims[0] != INPUT_DIM or self.net.dims[-1] != STATE_DIM:
            raise ValueError(
                f"model must map {INPUT_DIM} -> {STATE_DIM}, got "
                f"{self.net.dims[0]} -> {self.net.dims[-1]}")

    @property
    def parameter_count(self) -> int:
        return self.net.parameter_count

    def assert_finite(self):
        if not all(np.all(np.isfinite(p)) for p in self.net.params):
            raise ValueError("model weights are not finite")


@dataclass(frozen=True)
class BaselineTrainingReport:
    train_losses: tuple         # per-epoch mean training loss (standardized)
    val_losses: tuple           # per-epoch validation loss (standardized)
    val_mse: float              # final next-state MSE in raw units
    parameter_count: int
    n_train: int
    n_val: int
    notes: tuple


# ---------------------------------------------------------------------------
# transition collection
# ---------------------------------------------------------------------------

def state_vector(obs: sim.Observation) -> np.ndarray:
    return np.array([*obs.geom_pose, *obs.belt_y])


def action_vector(action: sim.Action) -> np.ndarray:
    return np.array([action.v1, action.v2, action.p1, action.p2])


def _random_init_pose(rng, cfg: sim.BeltConfig):
    """A supported starting pose spread over the reachable episode regime."""
    return (rng.uniform(-0.1, 0.1), rng.uniform(-0.02, 0.02),
            rng.uniform(-0.1, math.pi / 2 + 0.1))


def collect_random_transitions(dist, n_transitions, seed,
                               cfg: sim.BeltConfig = sim.DEFAULT_CONFIG,
                               ctrl_cfg=controller.ControllerConfig(),
                               max_episode_steps=200) -> TransitionDataset:
    """Random-policy rollouts: uniform draws from the discrete action set,
    restarting from a fresh random pose whenever support is lost or the
    episode step cap is reached."""
    if n_transitions < 1:
        raise ValueError("need n_transitions >= 1")
    rng = np.random.default_rng(seed)
    action_set = controller.discrete_action_set(ctrl_cfg)
    states = np.empty((n_transitions, STATE_DIM))
    actions = np.empty((n_transitions, ACTION_DIM))
    next_states = np.empty((n_transitions, STATE_DIM))
    filled = 0
    while filled < n_transitions:
        try:
            state, obs = sim.reset(dist, _random_init_pose(rng, cfg), cfg)
        except sim.UnsupportedPoseError:
            continue
        for _ in range(max_episode_steps):
            action = action_set[int(rng.integers(len(action_set)))]
            state, next_obs, flags = sim.step(state, action, dist, cfg)
            states[filled] = state_vector(obs)
            actions[filled] = action_vector(action)
            next_states[filled] = state_vector(next_obs)
            obs = next_obs
            filled += 1
            if filled == n_transitions or flags.support_lost:
                break
    return TransitionDataset(states=states, actions=actions,
                             next_states=next_states)


def collect_controller_transitions(dist, est_model, force_map, n_episodes,
                                   seed,
                                   ctrl_cfg=controller.ControllerConfig(),
                                   cfg: sim.BeltConfig = sim.DEFAULT_CONFIG):
    """Transitions from successful physics-prior episodes on the same box.

    Random policies alone rarely visit the controlled mid-rotation regime, so
    the one-step model is additionally fed trajectories from a policy that is
    already able to solve the task.  Episodes that do not end in Success are
    discarded.  Returns (dataset, n_successes).
    """
    if n_episodes < 1:
        raise ValueError("need n_episodes >= 1")
    chunks, successes = [], 0
    for k in range(n_episodes):
        rows = []

        def on_step(_, tr):
            rows.append((state_vector(tr.obs), action_vector(tr.action),
                         state_vector(tr.next_obs)))

        result = controller.run_episode(
            dist, est_model, force_map,
            ctrl_cfg=replace(ctrl_cfg, seed=seed + k),
            sim_cfg=cfg, on_step=on_step)
        if result.outcome == controller.OUTCOME_SUCCESS and rows:
            chunks.append(rows)
            successes += 1
    if not chunks:
        empty = np.empty((0, STATE_DIM))
        return TransitionDataset(states=empty,
                                 actions=np.empty((0, ACTION_DIM)),
                                 next_states=empty.copy()), 0
    flat = [row for rows in chunks for row in rows]
    s, a, ns = (np.array([r[i] for r in flat]) for i in range(3))
    return TransitionDataset(states=s, actions=a, next_states=ns), successes


def save_dataset(path, dataset: TransitionDataset) -> None:
    arrayio.save_arrays(path, {"states": dataset.states,
                               "actions": dataset.actions,
                               "next_states": dataset.next_states})


def load_dataset(path) -> TransitionDataset:
    arrays = arrayio.load_arrays(path)
    return TransitionDataset(states=arrays["states"],
                             actions=arrays["actions"],
                             next_states=arrays["next_states"])


# ---------------------------------------------------------------------------
# training and inference
# ---------------------------------------------------------------------------

def _inputs(states, actions):
    return np.concatenate((np.atleast_2d(states), np.atleast_2d(actions)),
                          axis=1)


def train_blackbox(dataset: TransitionDataset,
                   cfg: BaselineTrainingConfig = BaselineTrainingConfig()):
    """Fit W by minibatch MSE on standardized state changes.

    Returns (model, report); raises nn.TrainingDiverged on non-finite loss.
    """
    n = len(dataset)
    if n < 10:
        raise ValueError("need at least 10 transitions to train")
    rng = np.random.default_rng(cfg.seed)
    perm = rng.permutation(n)
    n_val = max(1, int(round(cfg.val_split * n)))
    if n_val >= n:
        raise ValueError("validation split leaves no training data")
    val_idx, train_idx = perm[:n_val], perm[n_val:]

    x_all = _inputs(dataset.states, dataset.actions)
    delta_all = dataset.next_states - dataset.states
    in_mean = x_all[train_idx].mean(axis=0)
    in_std = np.maximum(x_all[train_idx].std(axis=0), _STD_FLOOR)
    delta_mean = delta_all[train_idx].mean(axis=0)
    delta_std = np.maximum(delta_all[train_idx].std(axis=0), _STD_FLOOR)
    x = (x_all - in_mean) / in_std
    y = (delta_all - delta_mean) / delta_std

    model = BlackboxModel(
        net=nn.DenseNet((INPUT_DIM, *cfg.hidden, STATE_DIM), seed=cfg.seed),
        in_mean=in_mean, in_std=in_std,
        delta_mean=delta_mean, delta_std=delta_std)
    model.optimizer = nn.Adam(model.net.params, lr=cfg.learning_rate)

    train_losses, val_losses = [], []
    for epoch in range(1, cfg.epochs + 1):
        total, seen = 0.0, 0
        for idx in nn.minibatches(len(train_idx), cfg.batch_size, rng):
            batch = train_idx[idx]
            pred, cache = model.net.forward(x[batch])
            loss, grad = nn.mse_loss(pred, y[batch])
            if not math.isfinite(loss):
                raise nn.TrainingDiverged(epoch)
            grads, _ = model.net.backward(cache, grad)
            model.optimizer.step(grads)
            total += loss * len(batch)
            seen += len(batch)
        train_losses.append(total / seen)
        pred, _ = model.net.forward(x[val_idx])
        val_loss, _ = nn.mse_loss(pred, y[val_idx])
        if not math.isfinite(val_loss):
            raise nn.TrainingDiverged(epoch)
        val_losses.append(val_loss)

    model.assert_finite()
    raw_pred = predict_next(model, dataset.states[val_idx],
                            dataset.actions[val_idx])
    val_mse = float(np.mean((raw_pred - dataset.next_states[val_idx]) ** 2))
    report = BaselineTrainingReport(
        train_losses=tuple(train_losses), val_losses=tuple(val_losses),
        val_mse=val_mse, parameter_count=model.parameter_count,
        n_train=len(train_idx), n_val=n_val,
        notes=("inputs and state changes standardized per dimension over "
               "the training split",
               f"architecture ({INPUT_DIM}, "
               f"{', '.join(str(h) for h in cfg.hidden)}, {STATE_DIM})"))
    return model, report


def predict_next(model: BlackboxModel, states, actions) -> np.ndarray:
    """Predicted next states for a batch (or single pair) of (s, a)."""
    states = np.atleast_2d(states)
    x = (_inputs(states, actions) - model.in_mean) / model.in_std
    out, _ = model.net.forward(x)
    return states + out * model.delta_std + model.delta_mean


def online_adapt(model: BlackboxModel, dataset: TransitionDataset,
                 batch_size=64, rng=None) -> float:
    """One optimization epoch over an episode buffer, in place.

    The training-time normalization stays frozen.  An empty buffer leaves the
    model unchanged.  Returns the wall time spent, in seconds.
    """
    t0 = time.perf_counter()
    if len(dataset) == 0:
        return 0.0
    if model.optimizer is None:
        raise ValueError("model has no optimizer state to adapt with")
    if rng is None:
        rng = np.random.default_rng(0)
    x = (_inputs(dataset.states, dataset.actions) - model.in_mean) / \
        model.in_std
    y = (dataset.next_states - dataset.states - model.delta_mean) / \
        model.delta_std
    for idx in nn.minibatches(len(dataset), batch_size, rng):
        pred, cache = model.net.forward(x[idx])
        loss, grad = nn.mse_loss(pred, y[idx])
        if not math.isfinite(loss):
            raise nn.TrainingDiverged(0)
        grads, _ = model.net.backward(cache, grad)
        model.optimizer.step(grads)
    return time.perf_counter() - t0


# ---------------------------------------------------------------------------
# the black-box episode
# ---------------------------------------------------------------------------

def run_episode_blackbox(dist, model: BlackboxModel,
                         ctrl_cfg=controller.ControllerConfig(),
                         sim_cfg: sim.BeltConfig = sim.DEFAULT_CONFIG,
                         init_pose=(0.0, 0.0, 0.0)) -> controller.EpisodeResult:
    """Same loop as the physics-prior episode with W as the predictor.

    No exploratory phase and no hazard gate: control starts immediately and
    runs on every box, however its mass is distributed.  Every ADAPT_EVERY
    steps the model takes one adaptation epoch on the episode's transitions.
    """
    t_start = time.perf_counter()
    rng = np.random.default_rng(ctrl_cfg.seed)
    empty = {"balance_errors": (), "r1": (), "r2": (), "theta": (),
             "actions": (), "steps": 0}
    if ctrl_cfg.max_steps == 0:
        return controller._finish(controller.OUTCOME_FAILURE,
                                  "step limit reached", empty, t_start,
                                  ctrl_cfg)

    state, obs = sim.reset(dist, init_pose=init_pose, cfg=sim_cfg)
    buffer = {"s": [], "a": [], "ns": []}
    adapt_time = [0.0]

    def predict_fn(win, action):
        s_next = predict_next(model, state_vector(win[-1][1]),
                              action_vector(action))[0]
        return s_next[1], s_next[2], (s_next[3], s_next[4])

    def on_step(step, tr):
        buffer["s"].append(state_vector(tr.obs))
        buffer["a"].append(action_vector(tr.action))
        buffer["ns"].append(state_vector(tr.next_obs))
        if (step + 1) % ADAPT_EVERY == 0:
            episode_data = TransitionDataset(
                states=np.array(buffer["s"]), actions=np.array(buffer["a"]),
                next_states=np.array(buffer["ns"]))
            adapt_time[0] += online_adapt(model, episode_data, rng=rng)

    window = ((state.time, obs),)
    outcome, reason, traces, _, _ = controller.run_control_loop(
        state, obs, dist, ctrl_cfg, sim_cfg, rng, predict_fn, window,
        on_step=on_step)
    return controller._finish(outcome, reason, traces, t_start, ctrl_cfg,
                              adapt_time=adapt_time[0])


# ---------------------------------------------------------------------------
# persistence (same container and layout as the estimator model file)
# ---------------------------------------------------------------------------

def save_model(path, model: BlackboxModel) -> None:
    arrays = {"version": np.array(float(model.version))}
    arrays.update(nn.net_to_arrays("net", model.net))
    arrays["in_mean"] = model.in_mean
    arrays["in_std"] = model.in_std
    arrays["delta_mean"] = model.delta_mean
    arrays["delta_std"] = model.delta_std
    if model.optimizer is not None:
        arrays.update(nn.adam_to_arrays("adam", model.optimizer))
    arrayio.save_arrays(path, arrays)


def load_model(path) -> BlackboxModel:
    arrays = arrayio.load_arrays(path)
    version = int(arrays["version"])
    if version != MODEL_VERSION:
        raise ValueError(f"unsupported baseline model version {version}")
    model = BlackboxModel(
        net=nn.net_from_arrays("net", arrays),
        in_mean=arrays["in_mean"], in_std=arrays["in_std"],
        delta_mean=arrays["delta_mean"], delta_std=arrays["delta_std"])
    if "adam_state" in arrays:
        model.optimizer = nn.adam_from_arrays("adam", arrays,
                                              model.net.params)
    model.assert_finite()
    return model


# ---------------------------------------------------------------------------
# scikit-learn style wrapper over the learned mapping
# ---------------------------------------------------------------------------

class OneStepDynamicsModel(BaseEstimator):
    """Estimator over single transitions.

    fit(X, y): X is (n, INPUT_DIM) with state columns first, then action
    columns; y is (n, STATE_DIM) next states.  predict(X) returns predicted
    next states in the same layout.
    """

    def __init__(self, hidden=(256, 256), learning_rate=1e-3, batch_size=64,
                 epochs=40, seed=0, val_split=0.1):
        self.hidden = hidden
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.epochs = epochs
        self.seed = seed
        self.val_split = val_split

    def _config(self) -> BaselineTrainingConfig:
        return BaselineTrainingConfig(
            learning_rate=self.learning_rate, batch_size=self.batch_size,
            epochs=self.epochs, seed=self.seed, val_split=self.val_split,
            hidden=tuple(self.hidden))

    def fit(self, X, y):
        X = np.asarray(X, dtype=float)
        y = np.asarray(y, dtype=float)
        if X.ndim != 2 or X.shape[1] != INPUT_DIM:
            raise ValueError(f"X must have shape (n, {INPUT_DIM})")
        if y.shape != (X.shape[0], STATE_DIM):
            raise ValueError(f"y must have shape (n, {STATE_DIM})")
        dataset = TransitionDataset(states=X[:, :STATE_DIM],
                                    actions=X[:, STATE_DIM:],
                                    next_states=y)
        self.model_, self.report_ = train_blackbox(dataset, self._config())
        return self

    def predict(self, X):
        X = np.asarray(X, dtype=float)
        return predict_next(self.model_, X[:, :STATE_DIM], X[:, STATE_DIM:])
