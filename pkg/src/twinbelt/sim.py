"""Planar twin-belt simulator: the ground-truth environment.

A box (a voxelized mass distribution) rests on two parallel conveyor belts
separated by an adjustable gap.  The world frame has x along the belt rolling
direction and y across it; the left belt occupies y in [P_y1 - belt_width,
P_y1] and the right belt y in [P_y2, P_y2 + belt_width], so P_y1 and P_y2 are
the inner edges and P_y2 - P_y1 is the gap.

Ground-truth dynamics are planar (x, y, theta) about the true center of mass.
Every bottom-layer voxel column whose center projects onto a belt is a contact;
the column's full mass presses on the belt, and it experiences Coulomb
friction mu_k * g * m_col opposing its slip velocity relative to the belt
surface.  The friction magnitude is additionally clamped to the value that
would cancel the column's slip within one substep, which keeps friction purely
dissipative (no chatter, kinetic energy non-increasing under idle belts).

Belt surface speed is driven toward its command at a load-dependent rate
(heavier boxes spin the belts up more slowly), and belt position commands move
the belts laterally at constant speed over the control period; both interact
with the box only through contact friction.
"""

from dataclasses import dataclass, replace
from functools import lru_cache
import csv
import math

import numpy as np

from . import massmodel

# ---------------------------------------------------------------------------
# constants
# ---------------------------------------------------------------------------

TAG_VELOCITY = "VelocityPair"
TAG_LEFT_POS = "LeftPosition"
TAG_RIGHT_POS = "RightPosition"
TAG_NULL = "Null"

SLIP_FLOOR = 1e-6          # m/s; below this with idle belts, force is zeroed
ROTATION_TARGET = math.pi / 2.0
ROTATION_TOL = 0.05        # rad, for the rotation_reached event flag


class SimulationDiverged(RuntimeError):
    """NaN or infinity appeared during integration."""


class UnsupportedPoseError(ValueError):
    """Initial pose leaves one of the contact sets empty."""


# ---------------------------------------------------------------------------
# domain types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BeltConfig:
    """Geometry, friction, and command limits of the twin-belt rig."""

    belt_length: float = 1.2            # m, extent along x (centered at 0)
    belt_width: float = 0.25            # m, extent of each belt along y
    gap_range: tuple = (0.04, 0.18)     # m, allowed inner-edge distance
    initial_gap: float = 0.10           # m, gap set at reset
    surface_speed_limit: float = 0.5    # m/s, |belt surface velocity| bound
    position_step_limit: float = 0.02   # m, |belt position delta| per step
    kinetic_friction_mu: float = 0.4    # dimensionless mu_k
    gravity: float = 9.8                # m/s^2
    control_dt: float = 0.05            # s, one control period
    substeps: int = 10                  # physics substeps per control period
    drive_accel: float = 4.0            # m/s^2, unloaded belt drive ramp
    drive_ref_mass: float = 1.0         # kg, load scale halving the ramp

    def __post_init__(self):
        positive = (self.belt_length, self.belt_width, self.surface_speed_limit,
                    self.position_step_limit, self.gravity, self.control_dt,
                    self.drive_accel, self.drive_ref_mass)
        if any(v <= 0 for v in positive) or self.substeps < 1:
            raise ValueError("belt config limits must be positive")
        if not 0.0 < self.kinetic_friction_mu <= 2.0:
            raise ValueError("kinetic_friction_mu must lie in (0, 2]")
        lo, hi = self.gap_range
        if not 0.0 <= lo < hi:
            raise ValueError("gap_range must be ordered and nonnegative")
        if not lo <= self.initial_gap <= hi:
            raise ValueError("initial_gap outside gap_range")

    @property
    def substep_dt(self) -> float:
        return self.control_dt / self.substeps


@dataclass(frozen=True)
class Action:
    """One control-period command.  Velocity and position channels never mix."""

    v1: float = 0.0     # left belt surface velocity command, m/s
    v2: float = 0.0     # right belt surface velocity command, m/s
    p1: float = 0.0     # left belt lateral position delta, m
    p2: float = 0.0     # right belt lateral position delta, m
    tag: str = TAG_NULL

    def __post_init__(self):
        zero = {
            TAG_VELOCITY: (self.p1, self.p2),
            TAG_LEFT_POS: (self.v1, self.v2, self.p2),
            TAG_RIGHT_POS: (self.v1, self.v2, self.p1),
            TAG_NULL: (self.v1, self.v2, self.p1, self.p2),
        }
        if self.tag not in zero:
            raise ValueError(f"unknown action tag {self.tag!r}")
        if any(v != 0.0 for v in zero[self.tag]):
            raise ValueError(f"{self.tag} action sets a disallowed component")
        if self.tag == TAG_VELOCITY and self.v1 == 0.0 and self.v2 == 0.0:
            raise ValueError("zero velocity pair must use the Null tag")
        if self.tag == TAG_LEFT_POS and self.p1 == 0.0:
            raise ValueError("LeftPosition action needs nonzero p1")
        if self.tag == TAG_RIGHT_POS and self.p2 == 0.0:
            raise ValueError("RightPosition action needs nonzero p2")

    @staticmethod
    def velocity(v1, v2) -> "Action":
        if v1 == 0.0 and v2 == 0.0:
            return Action()
        return Action(v1=float(v1), v2=float(v2), tag=TAG_VELOCITY)

    @staticmethod
    def left_position(p1) -> "Action":
        return Action(p1=float(p1), tag=TAG_LEFT_POS)

    @staticmethod
    def right_position(p2) -> "Action":
        return Action(p2=float(p2), tag=TAG_RIGHT_POS)

    @staticmethod
    def null() -> "Action":
        return Action()


@dataclass(frozen=True)
class SimState:
    """Ground-truth state.  pose is the geometric center; lin_vel is the COM
    velocity (the dynamics integrate about the true center of mass)."""

    pose: tuple                 # (x, y, theta) of the geometric center
    lin_vel: tuple              # (vx, vy) of the COM, m/s
    ang_vel: float              # rad/s about the vertical axis
    belt_y: tuple               # (P_y1, P_y2) inner edges, m
    belt_surface_vel: tuple     # actual surface speeds (s1, s2), m/s
    time: float                 # s

    def __post_init__(self):
        if not self.belt_y[0] < self.belt_y[1]:
            raise ValueError("belt_y must be ordered (left < right)")


@dataclass(frozen=True)
class Observation:
    """What the controller sees: geometric-center pose, contact sets, belts."""

    geom_pose: tuple            # (x, y, theta)
    s1_voxels: frozenset        # flat bottom-layer indices on the left belt
    s2_voxels: frozenset        # flat bottom-layer indices on the right belt
    belt_y: tuple               # (P_y1, P_y2)


@dataclass(frozen=True)
class EventFlags:
    support_lost: bool = False      # COM y outside the contact span
    rotation_reached: bool = False  # |theta - pi/2| <= ROTATION_TOL
    step_limit: bool = False        # a command was clipped by config limits


@dataclass(frozen=True)
class Transition:
    time: float                 # timestamp of obs
    obs: Observation
    action: Action
    next_obs: Observation


@dataclass(frozen=True, eq=False)
class Trajectory:
    """Transitions at a constant control period; truncated if support failed."""

    transitions: tuple
    dt: float
    support_lost: bool = False

    def __post_init__(self):
        times = [tr.time for tr in self.transitions]
        for a, b in zip(times, times[1:]):
            if not b > a or abs((b - a) - self.dt) > 1e-9:
                raise ValueError("timestamps must increase by the control period")

    def __len__(self):
        return len(self.transitions)


DEFAULT_CONFIG = BeltConfig()


# ---------------------------------------------------------------------------
# cached per-distribution geometry
# ---------------------------------------------------------------------------

@lru_cache(maxsize=128)
def body_properties(dist: massmodel.MassDistribution):
    """(total mass, COM xy in box frame, I_zz about COM) for the dynamics."""
    com = massmodel.center_of_mass(dist)
    izz = massmodel.inertia_tensor(dist, com)[2, 2]
    return dist.total_mass, (float(com[0]), float(com[1])), float(izz)


@lru_cache(maxsize=128)
def bottom_geometry(dist: massmodel.MassDistribution):
    """Bottom-layer column centers (box frame xy) and full column masses.

    Columns are indexed flat as i * N_w + j; the xy center is shared by the
    whole vertical column, so each column moves rigidly with the planar body.
    """
    centers = dist.voxel_centers()[:, :, 0, :2].reshape(-1, 2).copy()
    col_mass = dist.voxel_mass.sum(axis=2).reshape(-1).copy()
    centers.setflags(write=False)
    col_mass.setflags(write=False)
    return centers, col_mass


def _rotation(theta):
    c, s = math.cos(theta), math.sin(theta)
    return np.array(((c, -s), (s, c)))


def _contact_masks(com_world, theta, centers, com_xy, belt_y, cfg):
    """Boolean masks of columns on the left/right belt plus world offsets
    of the columns from the COM."""
    off = (centers - com_xy) @ _rotation(theta).T
    pos = com_world + off
    p1, p2 = belt_y
    in_x = np.abs(pos[:, 0]) <= cfg.belt_length / 2.0
    on1 = in_x & (pos[:, 1] <= p1) & (pos[:, 1] >= p1 - cfg.belt_width)
    on2 = in_x & (pos[:, 1] >= p2) & (pos[:, 1] <= p2 + cfg.belt_width)
    return on1, on2, off


def _com_world(state: SimState, dist) -> np.ndarray:
    _, com_xy, _ = body_properties(dist)
    x, y, theta = state.pose
    return np.array((x, y)) + _rotation(theta) @ np.asarray(com_xy)


def contact_sets(state: SimState, dist, cfg: BeltConfig = DEFAULT_CONFIG):
    """Bottom-layer voxels (flat i*N_w+j indices) over each belt."""
    centers, _ = bottom_geometry(dist)
    _, com_xy, _ = body_properties(dist)
    on1, on2, _ = _contact_masks(_com_world(state, dist), state.pose[2],
                                 centers, np.asarray(com_xy), state.belt_y, cfg)
    return (frozenset(np.flatnonzero(on1).tolist()),
            frozenset(np.flatnonzero(on2).tolist()))


def observe(state: SimState, dist, cfg: BeltConfig = DEFAULT_CONFIG) -> Observation:
    s1, s2 = contact_sets(state, dist, cfg)
    return Observation(geom_pose=state.pose, s1_voxels=s1, s2_voxels=s2,
                       belt_y=state.belt_y)


# ---------------------------------------------------------------------------
# reset / step
# ---------------------------------------------------------------------------

def reset(dist, init_pose=(0.0, 0.0, 0.0), cfg: BeltConfig = DEFAULT_CONFIG,
          seed=None):
    """Place the box at init_pose over belts at the configured initial gap.

    Deterministic regardless of seed (kept for API symmetry).  Raises
    UnsupportedPoseError when either contact set is empty.
    """
    del seed
    gap = cfg.initial_gap
    state = SimState(pose=tuple(float(v) for v in init_pose),
                     lin_vel=(0.0, 0.0), ang_vel=0.0,
                     belt_y=(-gap / 2.0, gap / 2.0),
                     belt_surface_vel=(0.0, 0.0), time=0.0)
    obs = observe(state, dist, cfg)
    if not obs.s1_voxels or not obs.s2_voxels:
        raise UnsupportedPoseError("unsupported initial pose")
    return state, obs


def _clip_position_deltas(action, belt_y, cfg):
    """Apply per-step and gap-range limits to belt position commands."""
    limit = cfg.position_step_limit
    p1 = min(max(action.p1, -limit), limit)
    p2 = min(max(action.p2, -limit), limit)
    gmin, gmax = cfg.gap_range
    y1, y2 = belt_y
    p1 = min(max(p1, (y2 - gmax) - y1), (y2 - gmin) - y1)
    p2 = min(max(p2, (y1 + gmin) - y2), (y1 + gmax) - y2)
    clipped = abs(p1 - action.p1) > 1e-12 or abs(p2 - action.p2) > 1e-12
    return p1, p2, clipped


def step(state: SimState, action: Action, dist, cfg: BeltConfig = DEFAULT_CONFIG):
    """Advance one control period (cfg.substeps fixed physics substeps)."""
    mass, com_xy, izz = body_properties(dist)
    com_xy = np.asarray(com_xy)
    centers, col_mass = bottom_geometry(dist)
    h = cfg.substep_dt
    mu_g = cfg.kinetic_friction_mu * cfg.gravity

    v_lim = cfg.surface_speed_limit
    cmd1 = min(max(action.v1, -v_lim), v_lim)
    cmd2 = min(max(action.v2, -v_lim), v_lim)
    p1, p2, pos_clipped = _clip_position_deltas(action, state.belt_y, cfg)
    vel_clipped = abs(cmd1 - action.v1) > 1e-12 or abs(cmd2 - action.v2) > 1e-12
    u1 = p1 / cfg.control_dt     # belt lateral speed during this period
    u2 = p2 / cfg.control_dt

    x, y, theta = state.pose
    r_com = np.array((x, y)) + _rotation(theta) @ com_xy
    vel = np.array(state.lin_vel, dtype=float)
    omega = float(state.ang_vel)
    s1, s2 = state.belt_surface_vel
    y1, y2 = state.belt_y
    idle1 = cmd1 == 0.0 and u1 == 0.0
    idle2 = cmd2 == 0.0 and u2 == 0.0

    for _ in range(cfg.substeps):
        on1, on2, off = _contact_masks(r_com, theta, centers, com_xy,
                                       (y1, y2), cfg)
        # belt drive: surface speed ramps toward the command at a rate that
        # drops with the mass loaded on that belt
        for_belt = ((cmd1, float(col_mass[on1].sum())),
                    (cmd2, float(col_mass[on2].sum())))
        ramped = []
        for (cmd, load), s in zip(for_belt, (s1, s2)):
            a_eff = cfg.drive_accel / (1.0 + load / cfg.drive_ref_mass)
            ds = min(max(cmd - s, -a_eff * h), a_eff * h)
            ramped.append(s + ds)
        s1, s2 = ramped

        contact = on1 | on2
        slip_x = (vel[0] - omega * off[:, 1]) - np.where(on1, s1, 0.0) \
            - np.where(on2, s2, 0.0)
        slip_y = (vel[1] + omega * off[:, 0]) - np.where(on1, u1, 0.0) \
            - np.where(on2, u2, 0.0)
        speed = np.hypot(slip_x, slip_y)
        # Coulomb cap, clamped so one substep never reverses a column's slip
        accel = np.minimum(mu_g, speed / h)
        rest = ((on1 & idle1 & (abs(s1) < 1e-9))
                | (on2 & idle2 & (abs(s2) < 1e-9))) & (speed < SLIP_FLOOR)
        scale = np.where(contact & ~rest, col_mass * accel / np.maximum(speed, 1e-30), 0.0)
        fx = -scale * slip_x
        fy = -scale * slip_y

        force = np.array((fx.sum(), fy.sum()))
        torque = float(np.sum(off[:, 0] * fy - off[:, 1] * fx))

        vel = vel + force / mass * h
        omega = omega + torque / izz * h
        r_com = r_com + vel * h
        theta = theta + omega * h
        y1 += u1 * h
        y2 += u2 * h

    if not (np.all(np.isfinite(r_com)) and np.all(np.isfinite(vel))
            and math.isfinite(theta) and math.isfinite(omega)):
        raise SimulationDiverged("simulation diverged")

    geom = r_com - _rotation(theta) @ com_xy
    new_state = SimState(pose=(float(geom[0]), float(geom[1]), float(theta)),
                         lin_vel=(float(vel[0]), float(vel[1])),
                         ang_vel=omega,
                         belt_y=(float(y1), float(y2)),
                         belt_surface_vel=(float(s1), float(s2)),
                         time=state.time + cfg.control_dt)
    obs = observe(new_state, dist, cfg)

    contacts = obs.s1_voxels | obs.s2_voxels
    if contacts:
        centers_all, _ = bottom_geometry(dist)
        idx = np.fromiter(contacts, dtype=int)
        world_y = (r_com + ((centers_all[idx] - com_xy)
                            @ _rotation(theta).T))[:, 1]
        lost = not (world_y.min() - 1e-12 <= r_com[1] <= world_y.max() + 1e-12)
    else:
        lost = True
    flags = EventFlags(
        support_lost=lost,
        rotation_reached=abs(theta - ROTATION_TARGET) <= ROTATION_TOL,
        step_limit=pos_clipped or vel_clipped,
    )
    return new_state, obs, flags


# ---------------------------------------------------------------------------
# fixed exploratory sequence
# ---------------------------------------------------------------------------

# Seven signed excitation pairs (translations, twists, single-belt pulls and
# belt-gap nudges), each alternated with its negation for three cycles, then
# three rest periods: 7 * 6 + 3 = 45 transitions.  Alternating at every
# control period keeps the box close to its initial pose throughout (each
# pulse is undone before friction hysteresis can accumulate), which matters
# because the balance margin available to the controller afterwards is
# whatever exploration has not already spent.  The concrete levels are a
# documented constant of this module; they are chosen to excite every channel
# the estimator must identify.
_EXPLORATION_PAIRS = (
    (Action.velocity(0.25, 0.25), Action.velocity(-0.25, -0.25)),
    (Action.velocity(0.15, -0.15), Action.velocity(-0.15, 0.15)),
    (Action.left_position(0.008), Action.left_position(-0.008)),
    (Action.right_position(-0.008), Action.right_position(0.008)),
    (Action.velocity(0.20, 0.0), Action.velocity(-0.20, 0.0)),
    (Action.velocity(0.0, 0.20), Action.velocity(0.0, -0.20)),
    (Action.velocity(0.30, -0.30), Action.velocity(-0.30, 0.30)),
)
EXPLORATION_VECTORS = tuple(
    vec for pair in _EXPLORATION_PAIRS for _ in range(3) for vec in pair
) + (Action.null(),) * 3
EXPLORATION_STEPS = len(EXPLORATION_VECTORS)


def run_exploratory_sequence(state: SimState, dist,
                             cfg: BeltConfig = DEFAULT_CONFIG):
    """Run the fixed 45-step exploration from a freshly reset state.

    Returns (Trajectory, final SimState).  The trajectory is truncated with
    its support_lost flag set if the box leaves its support.
    """
    obs = observe(state, dist, cfg)
    transitions = []
    lost = False
    for vec in EXPLORATION_VECTORS:
        new_state, new_obs, flags = step(state, vec, dist, cfg)
        transitions.append(Transition(time=state.time, obs=obs,
                                      action=vec, next_obs=new_obs))
        state, obs = new_state, new_obs
        if flags.support_lost:
            lost = True
            break
    traj = Trajectory(transitions=tuple(transitions), dt=cfg.control_dt,
                      support_lost=lost)
    return traj, state


# ---------------------------------------------------------------------------
# trajectory export
# ---------------------------------------------------------------------------

TRAJECTORY_COLUMNS = ("t", "x", "y", "theta", "Py1", "Py2",
                      "v1", "v2", "p1", "p2", "S1", "S2")


def export_trajectory(path, traj: Trajectory) -> None:
    """CSV export: one row per observation; action columns describe the
    command taken from that observation (zeros on the final row)."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(TRAJECTORY_COLUMNS)

        def row(t, obs, action):
            x, y, theta = obs.geom_pose
            writer.writerow([f"{t:.6f}", f"{x:.9f}", f"{y:.9f}", f"{theta:.9f}",
                             f"{obs.belt_y[0]:.9f}", f"{obs.belt_y[1]:.9f}",
                             f"{action.v1:.4f}", f"{action.v2:.4f}",
                             f"{action.p1:.4f}", f"{action.p2:.4f}",
                             len(obs.s1_voxels), len(obs.s2_voxels)])

        for tr in traj.transitions:
            row(tr.time, tr.obs, tr.action)
        if traj.transitions:
            last = traj.transitions[-1]
            row(last.time + traj.dt, last.next_obs, Action.null())
