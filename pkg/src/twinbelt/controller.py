"""Physics-prior MPC: discrete action set, random shooting, dual rewards,
Pareto-front selection, hazard gate, and the episode loop.

The control loop itself (candidate sampling, scoring, Pareto selection,
termination) is method-agnostic: it consumes a strategy callable that maps
(observation window, action) to a predicted (y_geom, theta, belts).  The
gray-box episode wires the physics predictor into that loop after running the
exploratory phase and the hazard gate; the black-box baseline reuses the same
loop with its learned one-step model, so both methods share candidate sets,
scoring, and termination by construction.
"""

from dataclasses import dataclass
import csv
import math
import time

import numpy as np

from . import estimator, massmodel, predictor, sim

OUTCOME_SUCCESS = "Success"
OUTCOME_FAILURE = "Failure"
OUTCOME_ABORTED = "AbortedHazard"

# 9 symmetric surface-velocity levels per belt; the full 9x9 grid including
# the null pair gives 81 velocity actions.
VELOCITY_LEVELS = tuple(float(v) for v in np.linspace(-0.3, 0.3, 9))
# 7 nonzero lateral position deltas per belt: three symmetric magnitude pairs
# plus one small gap-closing nudge (+y for the left belt, -y for the right),
# so the full action set maps onto itself under the left/right mirror.
_POSITION_MAGS = (0.02, 0.02 * 2 / 3, 0.02 / 3)
POSITION_LEVELS_LEFT = tuple(sorted(
    [m for m in _POSITION_MAGS] + [-m for m in _POSITION_MAGS] + [0.02 / 6]))
POSITION_LEVELS_RIGHT = tuple(sorted(-float(p) for p in POSITION_LEVELS_LEFT))


@dataclass(frozen=True)
class RewardPair:
    r1: float       # pose reward: 1 / (angle error^2 + epsilon)
    r2: float       # balance reward: 1 / (centering error^2 + epsilon)

    def __post_init__(self):
        if not (self.r1 > 0.0 and self.r2 > 0.0 and
                math.isfinite(self.r1) and math.isfinite(self.r2)):
            raise ValueError("rewards must be positive finite")


@dataclass(frozen=True)
class ControllerConfig:
    epsilon: float = 1e-6
    z_target: float = math.pi / 2
    n_candidates: int = 50
    velocity_levels: tuple = VELOCITY_LEVELS
    position_levels_left: tuple = POSITION_LEVELS_LEFT
    position_levels_right: tuple = POSITION_LEVELS_RIGHT
    max_steps: int = 1000
    balance_threshold: float = 0.04     # m, 0.1 x box length
    balance_margin: float = 0.03        # m, candidate admissibility bound
    travel_margin: float = 0.30         # m, |x| admissibility bound
    angle_tol: float = 0.05             # rad
    seed: int = 0

    def __post_init__(self):
        if self.epsilon <= 0.0:
            raise ValueError("epsilon must be positive")
        if self.balance_threshold <= 0.0 or self.angle_tol <= 0.0:
            raise ValueError("thresholds must be positive")
        if not 0.0 < self.balance_margin <= self.balance_threshold:
            raise ValueError(
                "balance_margin must lie in (0, balance_threshold]")
        if self.travel_margin <= 0.0:
            raise ValueError("travel_margin must be positive")
        if self.max_steps < 0:
            raise ValueError("max_steps must be nonnegative")
        n_total = (len(self.velocity_levels) ** 2 +
                   len(self.position_levels_left) +
                   len(self.position_levels_right))
        if not 1 <= self.n_candidates <= n_total:
            raise ValueError("n_candidates must lie in [1, |action set|]")


@dataclass(frozen=True)
class EpisodeResult:
    outcome: str
    steps: int
    balance_errors: tuple       # m, one per control step
    r1_trace: tuple             # predicted rewards of the chosen actions
    r2_trace: tuple
    theta_trace: tuple          # rad, observed after each control step
    max_balance_error: float
    wall_time: float            # s
    reason: str = ""            # non-empty for AbortedHazard / Failure
    action_trace: tuple = ()    # (v1, v2, p1, p2) per applied action
    adapt_time: float = 0.0     # s spent in online model adaptation

    def __post_init__(self):
        if self.outcome not in (OUTCOME_SUCCESS, OUTCOME_FAILURE,
                                OUTCOME_ABORTED):
            raise ValueError(f"unknown outcome {self.outcome!r}")


# ---------------------------------------------------------------------------
# action set, sampling, scoring, Pareto selection
# ---------------------------------------------------------------------------

def discrete_action_set(cfg: ControllerConfig = ControllerConfig()):
    """All discrete actions: the velocity-pair grid (velocity and position
    channels never mix) plus single-belt position deltas."""
    actions = [sim.Action.velocity(v1, v2)
               for v1 in cfg.velocity_levels for v2 in cfg.velocity_levels]
    actions += [sim.Action.left_position(p) for p in cfg.position_levels_left]
    actions += [sim.Action.right_position(p)
                for p in cfg.position_levels_right]
    return actions


def sample_candidates(action_set, n_candidates, rng):
    """Uniform subset of size n_candidates, without replacement."""
    if not 1 <= n_candidates <= len(action_set):
        raise ValueError("n_candidates must lie in [1, |action set|]")
    idx = rng.choice(len(action_set), size=n_candidates, replace=False)
    return [action_set[i] for i in idx]


def score_action(theta_hat, y_geom_hat, belts_after,
                 cfg: ControllerConfig) -> RewardPair:
    """Dual rewards of a predicted outcome.

    r1 rewards reaching the target planar angle; r2 rewards keeping the
    geometric center over the middle of the (post-action) belt positions.
    """
    angle_err = theta_hat - cfg.z_target
    center = 0.5 * (belts_after[0] + belts_after[1])
    balance_err = y_geom_hat - center
    return RewardPair(r1=1.0 / (angle_err ** 2 + cfg.epsilon),
                      r2=1.0 / (balance_err ** 2 + cfg.epsilon))


def pareto_front(scored):
    """Non-dominated subset of (action, RewardPair) entries, skyline scan.

    Dominance: >= on both rewards and > on at least one.  Exactly equal
    reward pairs do not dominate each other, so ties survive together.
    """
    if not scored:
        raise ValueError("need at least one scored action")
    order = sorted(scored, key=lambda e: (-e[1].r1, -e[1].r2))
    front = []
    best_r2 = -math.inf
    i = 0
    while i < len(order):
        # a block of equal r1: its sub-maximal r2 entries are dominated by
        # the block maximum, and the block maximum survives only if no
        # higher-r1 entry already reached its r2
        j = i
        while j < len(order) and order[j][1].r1 == order[i][1].r1:
            j += 1
        block_max = order[i][1].r2
        if block_max > best_r2:
            front.extend(e for e in order[i:j] if e[1].r2 == block_max)
            best_r2 = block_max
        i = j
    return front


def select_action(front, rng):
    """Uniform random member of the front."""
    if not front:
        raise ValueError("empty front")
    return front[int(rng.integers(len(front)))][0]


# ---------------------------------------------------------------------------
# the method-agnostic control loop
# ---------------------------------------------------------------------------

class _Abort(Exception):
    """Internal: a strategy declared the episode unsalvageable."""

    def __init__(self, reason):
        super().__init__(reason)
        self.reason = reason


def run_control_loop(state, obs, dist, ctrl_cfg: ControllerConfig,
                     sim_cfg: sim.BeltConfig, rng, predict_fn, window,
                     on_step=None):
    """Shared MPC loop.  predict_fn(window, action) -> (y_geom, theta,
    (P1, P2)), or None when that action cannot be evaluated (it is then
    dropped from the candidate pool; the null action must always evaluate);
    on_step(step_index, transition) runs after each applied action.

    Returns (outcome, reason, traces dict, final state, final obs).
    """
    action_set = discrete_action_set(ctrl_cfg)
    balance_errors, r1s, r2s, thetas, actions = [], [], [], [], []
    outcome, reason = OUTCOME_FAILURE, "step limit reached"
    steps = 0
    for step in range(ctrl_cfg.max_steps):
        candidates = sample_candidates(action_set, ctrl_cfg.n_candidates, rng)
        try:
            scored = []
            for action in candidates:
                prediction = predict_fn(window, action)
                if prediction is None:
                    continue
                y_hat, theta_hat, belts = prediction
                scored.append((action,
                               score_action(theta_hat, y_hat, belts,
                                            ctrl_cfg)))
            if not scored:
                # Every sampled candidate drove a belt the box has left.
                # The null action always evaluates; fall back to it.
                null = sim.Action.null()
                y_hat, theta_hat, belts = predict_fn(window, null)
                scored.append((null,
                               score_action(theta_hat, y_hat, belts,
                                            ctrl_cfg)))
        except _Abort as abort:
            outcome, reason = OUTCOME_ABORTED, abort.reason
            break
        front = pareto_front(scored)
        chosen = select_action(front, rng)
        pair = next(p for a, p in scored if a is chosen)

        prev_obs = obs
        state, obs, flags = sim.step(state, chosen, dist, sim_cfg)
        steps += 1
        window = (window + ((state.time, obs),))[-3:]
        if on_step is not None:
            on_step(step, sim.Transition(time=state.time - sim_cfg.control_dt,
                                         obs=prev_obs, action=chosen,
                                         next_obs=obs))

        x, y, theta = obs.geom_pose
        balance = abs(y - 0.5 * (obs.belt_y[0] + obs.belt_y[1]))
        balance_errors.append(balance)
        r1s.append(pair.r1)
        r2s.append(pair.r2)
        thetas.append(theta)
        actions.append((chosen.v1, chosen.v2, chosen.p1, chosen.p2))

        if flags.support_lost:
            outcome, reason = OUTCOME_FAILURE, "support lost"
            break
        if balance > ctrl_cfg.balance_threshold:
            outcome, reason = OUTCOME_FAILURE, "balance threshold breached"
            break
        if abs(theta - ctrl_cfg.z_target) <= ctrl_cfg.angle_tol:
            outcome, reason = OUTCOME_SUCCESS, ""
            break
    traces = {"balance_errors": tuple(balance_errors),
              "r1": tuple(r1s), "r2": tuple(r2s), "theta": tuple(thetas),
              "actions": tuple(actions), "steps": steps}
    return outcome, reason, traces, state, obs


def _finish(outcome, reason, traces, t_start, ctrl_cfg,
            adapt_time=0.0) -> EpisodeResult:
    result = EpisodeResult(
        outcome=outcome, steps=traces["steps"],
        balance_errors=traces["balance_errors"],
        r1_trace=traces["r1"], r2_trace=traces["r2"],
        theta_trace=traces["theta"],
        max_balance_error=max(traces["balance_errors"], default=0.0),
        wall_time=time.perf_counter() - t_start, reason=reason,
        action_trace=traces["actions"], adapt_time=adapt_time)
    if result.outcome == OUTCOME_SUCCESS:
        # assert, don't trust: Success must satisfy its own invariant
        assert result.theta_trace and \
            abs(result.theta_trace[-1] - ctrl_cfg.z_target) <= \
            ctrl_cfg.angle_tol
        assert all(b <= ctrl_cfg.balance_threshold
                   for b in result.balance_errors)
    return result


# ---------------------------------------------------------------------------
# the gray-box episode
# ---------------------------------------------------------------------------

def _window_from_exploration(traj: sim.Trajectory):
    tr = traj.transitions
    return ((tr[-2].time, tr[-2].obs), (tr[-1].time, tr[-1].obs),
            (tr[-1].time + traj.dt, tr[-1].next_obs))


def run_episode(dist, est_model, force_map,
                ctrl_cfg: ControllerConfig = ControllerConfig(),
                sim_cfg: sim.BeltConfig = sim.DEFAULT_CONFIG,
                init_pose=(0.0, 0.0, 0.0), on_step=None) -> EpisodeResult:
    """Full physics-prior pipeline on one box: exploration, distribution
    estimate, hazard gate, then the MPC loop with the gray-box predictor."""
    t_start = time.perf_counter()
    rng = np.random.default_rng(ctrl_cfg.seed)
    empty = {"balance_errors": (), "r1": (), "r2": (), "theta": (),
             "actions": (), "steps": 0}
    if ctrl_cfg.max_steps == 0:
        return _finish(OUTCOME_FAILURE, "step limit reached", empty, t_start,
                       ctrl_cfg)

    state, obs = sim.reset(dist, init_pose=init_pose, cfg=sim_cfg)
    traj, state = sim.run_exploratory_sequence(state, dist, sim_cfg)
    if traj.support_lost or len(traj) != sim.EXPLORATION_STEPS:
        return _finish(OUTCOME_FAILURE, "support lost during exploration",
                       empty, t_start, ctrl_cfg)

    estimate = estimator.predict(est_model, traj)
    hazard = massmodel.classify_hazard(estimate.dist)
    if hazard.hazardous:
        return _finish(
            OUTCOME_ABORTED,
            f"estimated distribution hazardous ({hazard.triggering_volume})",
            empty, t_start, ctrl_cfg)

    dist_hat = estimate.dist
    obs = traj.transitions[-1].next_obs
    window = _window_from_exploration(traj)

    def predict_fn(win, action):
        try:
            pred = predictor.predict_next_pose(win, action, dist_hat,
                                               force_map, sim_cfg)
        except predictor.UnsupportedForceError:
            # the action drives a belt with no contact under it; not an
            # episode-level problem, just an inadmissible candidate
            return None
        except predictor.DegenerateInertiaError as err:
            raise _Abort(f"degenerate inertia in prediction: {err}") from err
        obs_now = win[-1][1]
        belt_y = obs_now.belt_y
        p1, p2, _ = sim._clip_position_deltas(action, belt_y, sim_cfg)
        belts = (belt_y[0] + p1, belt_y[1] + p2)
        y_hat = pred.r_hat[1]
        # Interpretable-prediction safety protocol.  The rewards see neither
        # bound guarded here: balance only fails at the hard threshold, and
        # the belt-axis excursion |x| is invisible to them, so an unguarded
        # random walk breaches the threshold or rides off the belt ends.
        # Inside the soft margins, candidates must stay inside them (and not
        # regress the rotation while the box is comfortably centered).  Once
        # a margin is exceeded, the admissible set switches to recovery.
        # Balance recovery trusts the predicted balance; travel recovery is
        # structural -- belt friction always pushes the box toward the belt
        # surface motion, so an inward common-mode velocity recovers |x|
        # even where the map extrapolates poorly.  The null action is always
        # admissible so the candidate pool cannot empty out.
        if (action.v1, action.v2, action.p1, action.p2) != (0, 0, 0, 0):
            bal_hat = abs(y_hat - 0.5 * (belts[0] + belts[1]))
            bal_now = abs(obs_now.geom_pose[1] - 0.5 * (belt_y[0] + belt_y[1]))
            x_now = obs_now.geom_pose[0]
            if bal_hat >= 0.75 * ctrl_cfg.balance_threshold:
                return None
            bal_bad = bal_now > ctrl_cfg.balance_margin
            x_bad = abs(x_now) > ctrl_cfg.travel_margin
            if bal_bad or x_bad:
                inward = (x_bad and
                          (action.v1 + action.v2) * np.sign(x_now) < -0.05)
                recovers = (bal_bad and bal_hat <= bal_now - 0.001)
                if not (inward or recovers):
                    return None
            else:
                if bal_hat > ctrl_cfg.balance_margin:
                    return None
                if abs(pred.r_hat[0]) > ctrl_cfg.travel_margin:
                    return None
                # a rotation-regressing candidate only burns step budget
                # when no balance-recovery detour is needed
                if bal_now <= 0.5 * ctrl_cfg.balance_margin:
                    err_now = abs(obs_now.geom_pose[2] - ctrl_cfg.z_target)
                    if abs(pred.theta_hat - ctrl_cfg.z_target) > \
                            err_now + 0.005:
                        return None
        return y_hat, pred.theta_hat, belts

    outcome, reason, traces, _, _ = run_control_loop(
        state, obs, dist, ctrl_cfg, sim_cfg, rng, predict_fn, window,
        on_step=on_step)
    return _finish(outcome, reason, traces, t_start, ctrl_cfg)


# ---------------------------------------------------------------------------
# trace export
# ---------------------------------------------------------------------------

def export_episode(path, result: EpisodeResult, metadata=()) -> None:
    """CSV per-step trace plus a trailing summary row.

    Wall time is deliberately left out so files from identically seeded runs
    are byte-identical.
    """
    with open(path, "w", newline="") as fh:
        for line in metadata:
            fh.write(f"# {line}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(("step", "theta", "balance_err", "r1", "r2",
                         "v1", "v2", "p1", "p2"))
        rows = zip(result.theta_trace, result.balance_errors,
                   result.r1_trace, result.r2_trace, result.action_trace)
        for i, (theta, balance, r1, r2, act) in enumerate(rows):
            writer.writerow((i, repr(theta), repr(balance), repr(r1),
                             repr(r2)) + tuple(repr(v) for v in act))
        writer.writerow(("summary", result.outcome, result.steps,
                         repr(result.max_balance_error), result.reason))
