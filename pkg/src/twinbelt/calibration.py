"""Control-to-force calibration.

Builds the per-channel mapping command -> force (v1 -> F1, v2 -> F2,
p1 -> F3, p2 -> F4) by applying randomly sampled single-channel actions to a
uniform-mass box at rest and inverting the predictor's one-step model:

    F(a) = M * ddot_r - F_f,

where ddot_r = 2 (r_after - 2 r_at + r_before) / dt^2 is the
displacement-consistent acceleration (the finite difference that makes the
one-step Taylor step r + v dt + 1/2 a dt^2 reproduce the observed displacement
exactly when starting from rest) and F_f is the friction force estimated by
the predictor's machinery from the observed displacement direction.  Because
prediction later applies the same machinery in reverse, calibration and
prediction are exact inverses of each other for a resting box.

Null actions are interleaved between calibration actions so that each change
of motion is unambiguously attributable to the most recent action; the box and
belts settle back to rest in a couple of control periods.
"""

from dataclasses import dataclass
import csv
import io

import numpy as np

from . import massmodel, predictor, sim

CHANNELS = ("v1", "v2", "p1", "p2")
VELOCITY_RANGE = 0.3        # m/s, |command| bound for velocity channels
POSITION_RANGE = 0.02       # m, |command| bound for position channels
DEFAULT_BIN_COUNT = 9
CALIBRATION_MASS = 2.0      # kg, uniform calibration box
SETTLE_STEPS = 6            # Null steps after each action: the loaded belt
                            # drive needs ~5 periods to ramp 0.3 m/s back to
                            # zero, after which the rest rule freezes the box

# Episodes end when the rig drifts outside this window around the reset
# configuration.  Keeping every sample near the canonical pose means the force
# attributed to a command is not confounded by which columns happen to be
# supported; without this the per-bin spread is dominated by support changes
# rather than by the drive response being calibrated.
DRIFT_ANGLE_TOL = 0.02      # rad
DRIFT_GAP_TOL = 0.005       # m, change of belt gap from reset
DRIFT_XY_TOL = 0.05         # m, |x| or |y| excursion of the box center

MAP_FILE_VERSION = 1


@dataclass(frozen=True)
class ForceSample:
    channel: str
    command: float
    force: float


@dataclass(frozen=True, eq=False)
class ControlForceMap:
    """Binned per-channel force means with an odd-symmetric interpolant.

    ``bins`` maps channel -> tuple of (bin_center, mean, count, std), sorted
    by center, populated bins only.  ``lookup`` interpolates linearly between
    odd-symmetrized node values and is pinned to (0, 0), so commands of equal
    magnitude and opposite sign map to opposite forces.
    """

    bins: dict

    def __post_init__(self):
        for channel in CHANNELS:
            if channel not in self.bins:
                raise ValueError(f"channel {channel} missing from map")
        nodes = {}
        for channel, rows in self.bins.items():
            centers = [r[0] for r in rows]
            if centers != sorted(centers):
                raise ValueError("bins must be sorted by center")
            by_mag = {}
            for center, mean, count, _ in rows:
                if count < 1:
                    raise ValueError("bin recorded without samples")
                if abs(center) < 1e-12:
                    continue          # the zero command is pinned, not fitted
                # odd extension: a bin at -c contributes -mean at +c
                by_mag.setdefault(abs(center), []).append(
                    mean if center > 0 else -mean)
            mags = sorted(by_mag)
            values = [float(np.mean(by_mag[m])) for m in mags]
            cmds = np.array([-m for m in reversed(mags)] + [0.0] + mags)
            forces = np.array([-v for v in reversed(values)] + [0.0] + values)
            nodes[channel] = (cmds, forces)
        object.__setattr__(self, "_nodes", nodes)

    def lookup(self, channel: str, command: float) -> float:
        """Force for a command: linear interpolation, clamped at the extreme
        calibrated commands, exactly zero at zero."""
        cmds, forces = self._nodes[channel]
        if command == 0.0 or cmds.size == 1:
            return 0.0
        return float(np.interp(command, cmds, forces))


# ---------------------------------------------------------------------------
# sampling and per-transition force estimation
# ---------------------------------------------------------------------------

def sample_disjoint_actions(n, seed, velocity_range=VELOCITY_RANGE,
                            position_range=POSITION_RANGE):
    """n single-channel actions: channel and magnitude uniform, sign random."""
    if n < 1:
        raise ValueError("need n >= 1")
    rng = np.random.default_rng(seed)
    actions = []
    for _ in range(n):
        channel = CHANNELS[rng.integers(4)]
        bound = velocity_range if channel.startswith("v") else position_range
        magnitude = 0.0
        while magnitude == 0.0:
            magnitude = rng.uniform(0.0, bound)
        value = magnitude * (1.0 if rng.random() < 0.5 else -1.0)
        if channel == "v1":
            actions.append(sim.Action.velocity(value, 0.0))
        elif channel == "v2":
            actions.append(sim.Action.velocity(0.0, value))
        elif channel == "p1":
            actions.append(sim.Action.left_position(value))
        else:
            actions.append(sim.Action.right_position(value))
    return actions


def _active_channel(action: sim.Action):
    active = [(ch, v) for ch, v in zip(CHANNELS, (action.v1, action.v2,
                                                  action.p1, action.p2))
              if v != 0.0]
    if len(active) > 1:
        raise ValueError("calibration window has more than one active channel")
    return active[0] if active else None


def estimate_force_for_transition(window, dist, mu_k, g):
    """Force sample from one action application.

    ``window`` is a pair of consecutive transitions (pre, applied): the first
    supplies the observation before the action, the second spans it.  Returns
    a ForceSample for the single active channel, or None for a Null action
    (the zero command is pinned and contributes no sample).
    """
    pre, applied = window
    active = _active_channel(applied.action)
    if active is None:
        return None
    channel, command = active

    dt = applied.time - pre.time
    if dt <= 0.0:
        raise ValueError("window transitions out of order")
    com_xy = massmodel.center_of_mass(dist)[:2]

    def com_pos(obs):
        x, y, theta = obs.geom_pose
        return np.array((x, y)) + predictor._rotation(theta) @ com_xy

    r_before = com_pos(pre.obs)
    r_at = com_pos(applied.obs)
    r_after = com_pos(applied.next_obs)
    ddot = 2.0 * (r_after - 2.0 * r_at + r_before) / dt**2

    theta_at = applied.obs.geom_pose[2]
    omega = (theta_at - pre.obs.geom_pose[2]) / dt
    r_dot = (r_at - r_before) / dt
    v1, v2 = predictor.support_volumes(applied.obs.s1_voxels,
                                       applied.obs.s2_voxels, dist)
    friction, _ = predictor.friction_correction(
        r_after - r_at, r_dot, v1, v2, dist, mu_k, g,
        omega=omega, theta=theta_at)

    force_vec = dist.total_mass * ddot - friction
    axis = 0 if channel.startswith("v") else 1
    return ForceSample(channel=channel, command=float(command),
                       force=float(force_vec[axis]))


# ---------------------------------------------------------------------------
# map construction
# ---------------------------------------------------------------------------

def build_mapping(samples, bin_count=DEFAULT_BIN_COUNT,
                  velocity_range=VELOCITY_RANGE,
                  position_range=POSITION_RANGE) -> ControlForceMap:
    """Bucket force samples into uniform command bins per channel."""
    by_channel = {ch: [] for ch in CHANNELS}
    for s in samples:
        if s is not None:
            by_channel[s.channel].append(s)
    bins = {}
    for channel, rows in by_channel.items():
        if not rows:
            raise ValueError(f"no calibration samples for channel {channel}")
        bound = velocity_range if channel.startswith("v") else position_range
        edges = np.linspace(-bound, bound, bin_count + 1)
        centers = 0.5 * (edges[:-1] + edges[1:])
        commands = np.array([r.command for r in rows])
        forces = np.array([r.force for r in rows])
        idx = np.clip(np.digitize(commands, edges) - 1, 0, bin_count - 1)
        channel_bins = []
        for b in range(bin_count):
            mask = idx == b
            count = int(mask.sum())
            if count == 0:
                continue
            channel_bins.append((float(centers[b]), float(forces[mask].mean()),
                                 count, float(forces[mask].std())))
        bins[channel] = tuple(channel_bins)
    return ControlForceMap(bins=bins)


# ---------------------------------------------------------------------------
# full calibration run against the simulator
# ---------------------------------------------------------------------------

def run_calibration(cfg: sim.BeltConfig = sim.DEFAULT_CONFIG,
                    n_transitions=400, seed=0, bin_count=DEFAULT_BIN_COUNT,
                    mass=CALIBRATION_MASS):
    """Collect ~n_transitions single-action windows and build the force map.

    Episodes use a uniform box of ``mass`` kg; a Null step precedes every
    action (providing the at-rest pre-observation) and SETTLE_STEPS Null steps
    follow it.  Returns (ControlForceMap, samples).
    """
    dist = massmodel.uniform_distribution(mass)
    actions = sample_disjoint_actions(n_transitions, seed)
    samples = []
    consumed = 0
    while consumed < len(actions):
        state, obs = sim.reset(dist, cfg=cfg)
        gap0 = obs.belt_y[1] - obs.belt_y[0]
        for action in actions[consumed:]:
            t0, o0 = state.time, obs
            state, obs, flags = sim.step(state, sim.Action.null(), dist, cfg)
            pre = sim.Transition(time=t0, obs=o0, action=sim.Action.null(),
                                 next_obs=obs)
            if flags.support_lost:
                break
            t1, o1 = state.time, obs
            state, obs, flags = sim.step(state, action, dist, cfg)
            applied = sim.Transition(time=t1, obs=o1, action=action,
                                     next_obs=obs)
            consumed += 1
            samples.append(estimate_force_for_transition(
                (pre, applied), dist, cfg.kinetic_friction_mu, cfg.gravity))
            if flags.support_lost:
                break
            for _ in range(SETTLE_STEPS):
                state, obs, flags = sim.step(state, sim.Action.null(), dist, cfg)
                if flags.support_lost:
                    break
            x, y, theta = obs.geom_pose
            gap = obs.belt_y[1] - obs.belt_y[0]
            if (flags.support_lost or abs(theta) > DRIFT_ANGLE_TOL
                    or abs(gap - gap0) > DRIFT_GAP_TOL
                    or max(abs(x), abs(y)) > DRIFT_XY_TOL):
                break
    return build_mapping(samples, bin_count), samples


# ---------------------------------------------------------------------------
# persistence: versioned CSV
# ---------------------------------------------------------------------------

def dump_force_map(fmap: ControlForceMap, metadata=()) -> str:
    """Render the map as versioned CSV text (deterministic)."""
    out = io.StringIO()
    out.write(f"# twinbelt force map v{MAP_FILE_VERSION}\n")
    for line in metadata:
        out.write(f"# {line}\n")
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(("channel", "bin_center", "mean", "std", "count"))
    for channel in CHANNELS:
        for center, mean, count, std in fmap.bins[channel]:
            # repr round-trips doubles exactly, so load == save bit for bit
            writer.writerow((channel, repr(center), repr(mean),
                             repr(std), count))
    return out.getvalue()


def save_force_map(path, fmap: ControlForceMap, metadata=()) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(dump_force_map(fmap, metadata))


def load_force_map(path) -> ControlForceMap:
    bins = {ch: [] for ch in CHANNELS}
    with open(path) as fh:
        lines = [ln for ln in fh if ln.strip()]
    if not lines or not lines[0].startswith("# twinbelt force map v"):
        raise ValueError("not a force map file")
    version = int(lines[0].rsplit("v", 1)[1])
    if version != MAP_FILE_VERSION:
        raise ValueError(f"unsupported force map version {version}")
    rows = [ln for ln in lines if not ln.startswith("#")]
    for record in csv.DictReader(rows):
        bins[record["channel"]].append(
            (float(record["bin_center"]), float(record["mean"]),
             int(record["count"]), float(record["std"])))
    return ControlForceMap(bins={ch: tuple(v) for ch, v in bins.items()})
