"""Gray-box one-step pose predictor.

Predicts the next geometric-center pose from a short observation window, a
candidate action, an estimated mass distribution, and the calibrated
control-to-force map.  The chain per control period dt:

  1. kinematics: COM position r_c (geometric pose plus the estimated COM
     offset), velocity, pre-action acceleration, and angular rate from finite
     differences over the window;
  2. force decomposition F1..F4 of the action through the calibrated map
     (F1/F2 along x applied over the contact sets S1/S2, F3/F4 along y);
  3. frictionless Taylor step r = r_c + v dt + 1/2 (a_free + F/M) dt^2
     (super-particle: the net force accelerates the COM);
  4. friction correction: for every voxel of the support volumes V1, V2 the
     friction direction is the component of the attempted displacement
     orthogonal to that voxel's velocity, opposing it; the summed friction
     force yields beta = F_f / M, applied as 1/2 beta dt^2 and clamped so
     friction never pushes the box beyond cancelling its attempted motion;
  5. angle: theta + omega dt + 1/2 (tau_z / I_zz) dt^2, with tau_z the
     per-voxel action torque over S1/S2 plus the friction torque over V1/V2.

Finite-difference conventions (window points r[-3], r[-2], r[-1] at spacing
dt): velocity uses the second-order one-sided stencil
(3 r[-1] - 4 r[-2] + r[-3]) / (2 dt), the pre-action acceleration the central
stencil (r[-1] - 2 r[-2] + r[-3]) / dt^2, and omega the backward difference of
theta.  With these choices the Taylor step above reproduces
constant-acceleration motion exactly.
"""

from dataclasses import dataclass
import math

import numpy as np

from . import massmodel


VELOCITY_FLOOR = 1e-6   # m/s; below this a voxel counts as at rest, matching
                        # the simulator's slip-velocity regularization


class DegenerateInertiaError(RuntimeError):
    """Estimated I_zz is numerically zero; angular update undefined."""


class UnsupportedForceError(ValueError):
    """A nonzero force was attributed to an empty contact set."""


# ---------------------------------------------------------------------------
# domain types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class KinematicEstimate:
    r_c: tuple              # COM position at the newest observation, m
    r_c_dot: tuple          # COM velocity, m/s
    r_c_ddot_free: tuple    # pre-action COM acceleration, m/s^2
    omega: float            # rad/s
    theta_geom: float       # rad, newest observed angle

    def __post_init__(self):
        values = (*self.r_c, *self.r_c_dot, *self.r_c_ddot_free,
                  self.omega, self.theta_geom)
        if not all(math.isfinite(v) for v in values):
            raise ValueError("non-finite kinematic estimate")


@dataclass(frozen=True)
class ForceDecomposition:
    """F1/F2 act along x on S1/S2; F3/F4 along y on S1/S2 (newtons)."""

    f1: float = 0.0
    f2: float = 0.0
    f3: float = 0.0
    f4: float = 0.0


@dataclass(frozen=True)
class PosePrediction:
    r_hat: tuple                # predicted geometric-center position, m
    theta_hat: float            # rad
    r_hat_frictionless: tuple   # geometric-center position before friction
    friction_force: tuple       # summed friction force F_f, N
    beta: tuple                 # F_f / M, m/s^2 (before the no-reversal clamp)


# ---------------------------------------------------------------------------
# kinematics from an observation window
# ---------------------------------------------------------------------------

def _rotation(theta):
    c, s = math.cos(theta), math.sin(theta)
    return np.array(((c, -s), (s, c)))


def _com_positions(window, com_xy):
    out = []
    for _, obs in window:
        x, y, theta = obs.geom_pose
        out.append(np.array((x, y)) + _rotation(theta) @ com_xy)
    return out


def estimate_kinematics(window, dist_hat) -> KinematicEstimate:
    """Kinematics of the estimated COM from >= 3 uniformly spaced observations.

    `window` is a sequence of (time, Observation), oldest first.
    """
    if len(window) < 3:
        raise ValueError("kinematics needs at least 3 observations")
    times = [t for t, _ in window]
    dt = times[1] - times[0]
    if dt <= 0.0 or any(abs((b - a) - dt) > 1e-9
                        for a, b in zip(times, times[1:])):
        raise ValueError("observation window is not uniformly spaced")

    com_xy = massmodel.center_of_mass(dist_hat)[:2]
    r = _com_positions(window[-3:], com_xy)
    vel = (3.0 * r[2] - 4.0 * r[1] + r[0]) / (2.0 * dt)
    acc = (r[2] - 2.0 * r[1] + r[0]) / dt**2
    theta_prev = window[-2][1].geom_pose[2]
    theta_now = window[-1][1].geom_pose[2]
    return KinematicEstimate(
        r_c=(float(r[2][0]), float(r[2][1])),
        r_c_dot=(float(vel[0]), float(vel[1])),
        r_c_ddot_free=(float(acc[0]), float(acc[1])),
        omega=(theta_now - theta_prev) / dt,
        theta_geom=theta_now,
    )


# ---------------------------------------------------------------------------
# forces, torque, support volumes
# ---------------------------------------------------------------------------

def force_decomposition(action, force_map) -> ForceDecomposition:
    """Decompose an action into F1..F4 via the calibrated map."""
    return ForceDecomposition(
        f1=force_map.lookup("v1", action.v1),
        f2=force_map.lookup("v2", action.v2),
        f3=force_map.lookup("p1", action.p1),
        f4=force_map.lookup("p2", action.p2),
    )


def _lever_arms(indices, dist_hat, theta, com_xy):
    """World-frame offsets of bottom-layer columns from the COM."""
    centers = dist_hat.voxel_centers()[:, :, 0, :2].reshape(-1, 2)
    idx = np.fromiter(sorted(indices), dtype=int, count=len(indices))
    return (centers[idx] - com_xy) @ _rotation(theta).T


def torque(forces: ForceDecomposition, s1, s2, dist_hat,
           kin: KinematicEstimate) -> float:
    """Vertical torque of the action forces split evenly over the contacts."""
    com_xy = massmodel.center_of_mass(dist_hat)[:2]
    tau = 0.0
    for voxels, fx, fy in ((s1, forces.f1, forces.f3),
                           (s2, forces.f2, forces.f4)):
        if not voxels:
            if fx != 0.0 or fy != 0.0:
                raise UnsupportedForceError("unsupported force application")
            continue
        arms = _lever_arms(voxels, dist_hat, kin.theta_geom, com_xy)
        # per-voxel share delta F = F / |S|; cross product r x F, z component
        tau += float(np.sum(arms[:, 0] * (fy / len(voxels))
                            - arms[:, 1] * (fx / len(voxels))))
    return tau


def support_volumes(s1, s2, dist_hat):
    """Full vertical columns above each contact set, as 3-d voxel index sets."""
    n_h = dist_hat.grid_dims[2]

    def column(bottom_indices):
        return frozenset(int(c) * n_h + k
                         for c in bottom_indices for k in range(n_h))

    return column(s1), column(s2)


# ---------------------------------------------------------------------------
# friction correction
# ---------------------------------------------------------------------------

def friction_direction(delta_r_hat, r_dot) -> np.ndarray:
    """Unit friction direction: opposes the part of the attempted displacement
    orthogonal to the current velocity; zero when they are parallel."""
    d = np.asarray(delta_r_hat, dtype=float)
    v = np.asarray(r_dot, dtype=float)
    eta = -d
    vv = float(v @ v)
    if vv > VELOCITY_FLOOR**2:
        eta = eta - (float(v @ -d) / vv) * v
    norm = float(np.hypot(eta[0], eta[1]))
    if norm < 1e-12:
        return np.zeros(2)
    return eta / norm


def _column_friction_forces(delta, r_dot, omega, theta, voxels, dist_hat,
                            mu_k, g):
    """Per-contact-column friction forces and lever arms.

    Voxels of one vertical column share their planar velocity, so the per-voxel
    sum over a support volume collapses to contact columns carrying the full
    column mass.  Returns (forces (n,2), arms (n,2)) in the world frame.
    """
    n_h = dist_hat.grid_dims[2]
    cols = np.fromiter(sorted({v // n_h for v in voxels}), dtype=int)
    col_mass = dist_hat.voxel_mass.sum(axis=2).reshape(-1)[cols]
    com_xy = massmodel.center_of_mass(dist_hat)[:2]
    centers = dist_hat.voxel_centers()[:, :, 0, :2].reshape(-1, 2)
    arms = (centers[cols] - com_xy) @ _rotation(theta).T

    d = np.asarray(delta, dtype=float)
    vx = r_dot[0] - omega * arms[:, 1]
    vy = r_dot[1] + omega * arms[:, 0]
    # eta_Q = -d + proj(d, v_Q), normalized (projection is even in v's sign);
    # voxels moving slower than the slip floor count as at rest
    vv = vx * vx + vy * vy
    moving = vv > VELOCITY_FLOOR**2
    safe_vv = np.where(moving, vv, 1.0)
    coef = np.where(moving, (vx * d[0] + vy * d[1]) / safe_vv, 0.0)
    ex = -d[0] + coef * vx
    ey = -d[1] + coef * vy
    norm = np.hypot(ex, ey)
    keep = norm > 1e-12
    scale = np.where(keep, mu_k * g * col_mass / np.where(keep, norm, 1.0), 0.0)
    return np.column_stack((scale * ex, scale * ey)), arms


def friction_correction(delta_r_hat, r_dot, v1_voxels, v2_voxels, dist_hat,
                        mu_k, g, omega=0.0, theta=0.0):
    """Summed friction force over the support volumes and beta = F_f / M.

    Returns (F_f, beta) as 2-vectors.
    """
    if dist_hat.total_mass <= 0.0:
        raise massmodel.EmptyDistributionError("empty distribution")
    voxels = frozenset(v1_voxels) | frozenset(v2_voxels)
    if not voxels:
        return np.zeros(2), np.zeros(2)
    forces, _ = _column_friction_forces(delta_r_hat, r_dot, omega, theta,
                                        voxels, dist_hat, mu_k, g)
    force = forces.sum(axis=0)
    return force, force / dist_hat.total_mass


# ---------------------------------------------------------------------------
# one-step prediction
# ---------------------------------------------------------------------------

def predict_next_pose(window, action, dist_hat, force_map, cfg) -> PosePrediction:
    """One-step gray-box prediction of the geometric-center pose."""
    kin = estimate_kinematics(window, dist_hat)
    obs = window[-1][1]
    dt = cfg.control_dt
    mass = dist_hat.total_mass
    com = massmodel.center_of_mass(dist_hat)
    com_xy = com[:2]
    izz = massmodel.inertia_tensor(dist_hat, com)[2, 2]
    if izz <= 1e-12:
        raise DegenerateInertiaError("degenerate inertia")

    forces = force_decomposition(action, force_map)
    net = np.array((forces.f1 + forces.f2, forces.f3 + forces.f4))
    r_c = np.asarray(kin.r_c)
    vel = np.asarray(kin.r_c_dot)
    acc = np.asarray(kin.r_c_ddot_free) + net / mass
    r_free = r_c + vel * dt + 0.5 * acc * dt**2
    delta = r_free - r_c

    v1, v2 = support_volumes(obs.s1_voxels, obs.s2_voxels, dist_hat)
    friction, beta = friction_correction(
        delta, kin.r_c_dot, v1, v2, dist_hat,
        cfg.kinetic_friction_mu, cfg.gravity,
        omega=kin.omega, theta=kin.theta_geom)

    # friction may cancel the attempted displacement but never reverse it
    corr = 0.5 * beta * dt**2
    corr_norm = float(np.hypot(corr[0], corr[1]))
    delta_norm = float(np.hypot(delta[0], delta[1]))
    clamp = 1.0 if corr_norm <= delta_norm else \
        (delta_norm / corr_norm if corr_norm > 0.0 else 0.0)
    r_hat_com = r_free + clamp * corr

    tau = torque(forces, obs.s1_voxels, obs.s2_voxels, dist_hat, kin)
    tau += clamp * _friction_torque(delta, kin, v1, v2, dist_hat, cfg)
    omega_dot = tau / izz
    theta_hat = kin.theta_geom + kin.omega * dt + 0.5 * omega_dot * dt**2

    rot = _rotation(theta_hat)
    r_hat = r_hat_com - rot @ com_xy
    r_free_geom = r_free - rot @ com_xy
    return PosePrediction(
        r_hat=(float(r_hat[0]), float(r_hat[1])),
        theta_hat=float(theta_hat),
        r_hat_frictionless=(float(r_free_geom[0]), float(r_free_geom[1])),
        friction_force=(float(friction[0]), float(friction[1])),
        beta=(float(beta[0]), float(beta[1])),
    )


def _friction_torque(delta, kin, v1, v2, dist_hat, cfg) -> float:
    """Torque of the per-voxel friction forces about the COM (the same eta
    field used for beta, summed with lever arms)."""
    voxels = v1 | v2
    if not voxels:
        return 0.0
    forces, arms = _column_friction_forces(
        delta, kin.r_c_dot, kin.omega, kin.theta_geom, voxels, dist_hat,
        cfg.kinetic_friction_mu, cfg.gravity)
    return float(np.sum(arms[:, 0] * forces[:, 1] - arms[:, 1] * forces[:, 0]))
