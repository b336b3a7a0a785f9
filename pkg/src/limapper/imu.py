"""IMU state propagation, preintegration, and the preintegrated-motion factor.

Preintegrated deltas accumulate body motion between two stamps in the frame
of the first stamp, with the linearization-point bias subtracted and gravity
excluded; gravity re-enters when composing onto a state or evaluating the
factor residual.  The 9x9 covariance and the 9x6 bias Jacobian are ordered
(rotation, velocity, position) x (accel bias, gyro bias).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ImuCoverageGap, InvalidInterval, RequiresReintegration
from .geometry import (
    Rotation,
    SensorState,
    Se3Pose,
    so3_exp,
    so3_hat,
    so3_log,
    so3_right_jacobian,
    so3_right_jacobian_inv,
)

GRAVITY = np.array([0.0, 0.0, -9.80665])


@dataclass(frozen=True)
class ImuSample:
    stamp: float
    accel: np.ndarray  # specific force, body frame [m/s^2]
    gyro: np.ndarray  # angular rate, body frame [rad/s]


@dataclass(frozen=True)
class ImuNoiseParams:
    """Continuous-time noise densities and the gravity vector."""

    accel_noise_density: float = 0.02  # m/s^2/sqrt(Hz)
    gyro_noise_density: float = 0.002  # rad/s/sqrt(Hz)
    accel_bias_walk: float = 2e-4  # m/s^3/sqrt(Hz)
    gyro_bias_walk: float = 2e-5  # rad/s^2/sqrt(Hz)
    gravity: np.ndarray = field(default_factory=lambda: GRAVITY.copy())

    def __post_init__(self):
        for name in ("accel_noise_density", "gyro_noise_density",
                     "accel_bias_walk", "gyro_bias_walk"):
            if getattr(self, name) <= 0.0:
                raise ValueError(f"{name} must be positive")


@dataclass(frozen=True)
class PreintegratedImu:
    delta_r: Rotation
    delta_v: np.ndarray
    delta_p: np.ndarray
    dt_total: float
    cov: np.ndarray  # 9x9, (rot, vel, pos)
    bias_lin: np.ndarray  # 6, (ba, bg) at the linearization point
    jac_bias: np.ndarray  # 9x6, d(deltas)/d(bias)
    t_i: float = 0.0
    t_j: float = 0.0


def samples_to_arrays(samples) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    stamps = np.array([s.stamp for s in samples], dtype=float)
    accel = np.array([s.accel for s in samples], dtype=float).reshape(-1, 3)
    gyro = np.array([s.gyro for s in samples], dtype=float).reshape(-1, 3)
    return stamps, accel, gyro


def propagate_state(state: SensorState, sample: ImuSample, dt: float,
                    gravity=GRAVITY) -> SensorState:
    """Single Euler step of the IMU state evolution.

    The rotation and velocity on the right-hand sides are the pre-update
    values, so repeated calls reproduce the discrete evolution exactly.
    """
    if dt <= 0.0:
        raise InvalidInterval(f"dt must be positive, got {dt}")
    gravity = np.asarray(gravity, dtype=float)
    r = state.pose.rotation
    omega = np.asarray(sample.gyro, dtype=float) - state.bias_gyro
    accel = np.asarray(sample.accel, dtype=float) - state.bias_accel
    acc_world = r.apply(accel)
    new_r = r * so3_exp(omega * dt)
    new_v = state.velocity + gravity * dt + acc_world * dt
    new_t = (state.pose.translation + state.velocity * dt
             + 0.5 * gravity * dt * dt + 0.5 * acc_world * dt * dt)
    return SensorState(
        pose=Se3Pose(new_r, new_t),
        velocity=new_v,
        bias_accel=state.bias_accel,
        bias_gyro=state.bias_gyro,
        stamp=state.stamp + dt,
    )


def integration_nodes(samples, t0: float, t1: float, max_gap: float = 0.02):
    """Sub-interval boundaries and measurements covering [t0, t1].

    Returns (stamps, accel, gyro) where stamps has m+1 entries and the i-th
    measurement row applies over [stamps[i], stamps[i+1]].  Measurements at
    the window edges are linearly interpolated between bracketing samples.
    """
    if t1 <= t0:
        raise InvalidInterval(f"window [{t0}, {t1}] is empty")
    stamps, accel, gyro = (samples if isinstance(samples, tuple)
                           else samples_to_arrays(samples))
    if stamps.size == 0:
        raise ImuCoverageGap("no IMU samples supplied")
    if stamps[0] - t0 > max_gap or t1 - stamps[-1] > max_gap:
        raise ImuCoverageGap(
            f"samples span [{stamps[0]:.4f}, {stamps[-1]:.4f}], "
            f"window is [{t0:.4f}, {t1:.4f}]")
    inside = (stamps > t0) & (stamps < t1)
    node_t = np.concatenate([[t0], stamps[inside], [t1]])
    gaps = np.diff(node_t)
    # every integration sub-interval must stay below the configured gap
    if gaps.size and np.max(gaps) > max_gap:
        raise ImuCoverageGap(
            f"IMU gap of {np.max(gaps):.4f}s inside [{t0:.4f}, {t1:.4f}]")

    def measure_at(t):
        i = int(np.searchsorted(stamps, t, side="right")) - 1
        if i < 0:
            return accel[0], gyro[0]
        if i >= stamps.size - 1:
            return accel[-1], gyro[-1]
        span = stamps[i + 1] - stamps[i]
        w = 0.0 if span <= 0.0 else (t - stamps[i]) / span
        return (accel[i] + w * (accel[i + 1] - accel[i]),
                gyro[i] + w * (gyro[i + 1] - gyro[i]))

    m = node_t.size - 1
    node_a = np.empty((m, 3))
    node_g = np.empty((m, 3))
    idx = np.searchsorted(stamps, node_t[:-1])
    for k in range(m):
        t = node_t[k]
        j = idx[k]
        if j < stamps.size and stamps[j] == t:
            node_a[k] = accel[j]
            node_g[k] = gyro[j]
        else:
            node_a[k], node_g[k] = measure_at(t)
    return node_t, node_a, node_g


def preintegrate(samples, t_i: float, t_j: float, bias_lin,
                 noise: ImuNoiseParams, max_gap: float = 0.02) -> PreintegratedImu:
    """Accumulate relative-motion deltas over [t_i, t_j].

    Per-sample Euler integration matching propagate_state step for step;
    first-order covariance propagation and bias Jacobians are accumulated
    alongside.
    """
    bias_lin = np.asarray(bias_lin, dtype=float)
    node_t, node_a, node_g = integration_nodes(samples, t_i, t_j, max_gap)
    ba, bg = bias_lin[:3], bias_lin[3:]

    delta_r = Rotation.identity()
    delta_v = np.zeros(3)
    delta_p = np.zeros(3)
    cov = np.zeros((9, 9))
    jac = np.zeros((9, 6))
    sg2 = noise.gyro_noise_density**2
    sa2 = noise.accel_noise_density**2

    for k in range(node_t.size - 1):
        dt = float(node_t[k + 1] - node_t[k])
        if dt <= 0.0:
            continue
        omega = node_g[k] - bg
        acc = node_a[k] - ba
        rmat = delta_r.matrix()
        acc_hat = so3_hat(acc)
        step = so3_exp(omega * dt)
        jr = so3_right_jacobian(omega * dt)
        emat_t = step.matrix().T
        r_acc_hat = rmat @ acc_hat

        # covariance: P <- A P A^T + B Q B^T, Q the discretized densities
        a_mat = np.eye(9)
        a_mat[0:3, 0:3] = emat_t
        a_mat[3:6, 0:3] = -r_acc_hat * dt
        a_mat[6:9, 0:3] = -0.5 * r_acc_hat * dt * dt
        a_mat[6:9, 3:6] = np.eye(3) * dt
        cov = a_mat @ cov @ a_mat.T
        cov[0:3, 0:3] += (jr @ jr.T) * (sg2 * dt)
        rrt = rmat @ rmat.T
        cov[3:6, 3:6] += rrt * (sa2 * dt)
        cov[6:9, 6:9] += rrt * (0.25 * sa2 * dt**3)
        cov[3:6, 6:9] += rrt * (0.5 * sa2 * dt**2)
        cov[6:9, 3:6] += rrt * (0.5 * sa2 * dt**2)

        # bias Jacobians; position first so the velocity rows are pre-update
        j_phi_g = jac[0:3, 3:6]
        jac[6:9, 0:3] = jac[6:9, 0:3] + jac[3:6, 0:3] * dt - 0.5 * rmat * dt * dt
        jac[6:9, 3:6] = (jac[6:9, 3:6] + jac[3:6, 3:6] * dt
                         - 0.5 * r_acc_hat @ j_phi_g * dt * dt)
        jac[3:6, 0:3] = jac[3:6, 0:3] - rmat * dt
        jac[3:6, 3:6] = jac[3:6, 3:6] - r_acc_hat @ j_phi_g * dt
        jac[0:3, 3:6] = emat_t @ j_phi_g - jr * dt

        # deltas, pre-update rotation and velocity on the right-hand sides
        acc_rot = rmat @ acc
        delta_p = delta_p + delta_v * dt + 0.5 * acc_rot * dt * dt
        delta_v = delta_v + acc_rot * dt
        delta_r = delta_r * step

    cov = 0.5 * (cov + cov.T)
    return PreintegratedImu(
        delta_r=delta_r,
        delta_v=delta_v,
        delta_p=delta_p,
        dt_total=float(t_j - t_i),
        cov=cov,
        bias_lin=bias_lin,
        jac_bias=jac,
        t_i=float(t_i),
        t_j=float(t_j),
    )


def correct_for_bias(pre: PreintegratedImu, new_bias,
                     threshold: float = 0.1):
    """First-order update of the deltas for a bias away from bias_lin.

    Returns (delta_r, delta_v, delta_p).  Raises RequiresReintegration when
    the bias change exceeds the configured threshold; callers should then
    re-run preintegrate at the new bias.
    """
    new_bias = np.asarray(new_bias, dtype=float)
    db = new_bias - pre.bias_lin
    norm = float(np.linalg.norm(db))
    if norm > threshold:
        raise RequiresReintegration(
            f"bias moved {norm:.3f} from the linearization point (> {threshold})")
    delta_r = pre.delta_r * so3_exp(pre.jac_bias[0:3, 3:6] @ db[3:])
    delta_v = pre.delta_v + pre.jac_bias[3:6, :] @ db
    delta_p = pre.delta_p + pre.jac_bias[6:9, :] @ db
    return delta_r, delta_v, delta_p


def predict_state(state: SensorState, pre: PreintegratedImu,
                  gravity=GRAVITY) -> SensorState:
    """Compose preintegrated deltas onto a state, re-injecting gravity."""
    gravity = np.asarray(gravity, dtype=float)
    try:
        dr, dv, dp = correct_for_bias(pre, state.bias)
    except RequiresReintegration:
        dr, dv, dp = pre.delta_r, pre.delta_v, pre.delta_p
    dt = pre.dt_total
    r_i = state.pose.rotation
    return SensorState(
        pose=Se3Pose(r_i * dr,
                     state.pose.translation + state.velocity * dt
                     + 0.5 * gravity * dt * dt + r_i.apply(dp)),
        velocity=state.velocity + gravity * dt + r_i.apply(dv),
        bias_accel=state.bias_accel,
        bias_gyro=state.bias_gyro,
        stamp=state.stamp + dt,
    )


def imu_factor_residual(state_i: SensorState, state_j: SensorState,
                        pre: PreintegratedImu, gravity=GRAVITY,
                        with_jacobians: bool = True):
    """15-dof residual (rot, vel, pos, accel-bias walk, gyro-bias walk).

    The motion rows compare the preintegrated deltas (corrected to state_i's
    bias) against the state pair; the bias rows are the random-walk residual
    b_j - b_i.  Jacobians are with respect to the right-multiplicative state
    retraction of both states.
    """
    gravity = np.asarray(gravity, dtype=float)
    dt = pre.dt_total
    db = state_i.bias - pre.bias_lin
    j_phi_g = pre.jac_bias[0:3, 3:6]
    theta = j_phi_g @ db[3:]
    delta_r = pre.delta_r * so3_exp(theta)
    delta_v = pre.delta_v + pre.jac_bias[3:6, :] @ db
    delta_p = pre.delta_p + pre.jac_bias[6:9, :] @ db

    r_i = state_i.pose.rotation
    r_j = state_j.pose.rotation
    ri_t = r_i.matrix().T
    err_rot = delta_r.inverse() * (r_i.inverse() * r_j)
    r_r = so3_log(err_rot)
    u_v = state_j.velocity - state_i.velocity - gravity * dt
    u_p = (state_j.pose.translation - state_i.pose.translation
           - state_i.velocity * dt - 0.5 * gravity * dt * dt)
    r_v = ri_t @ u_v - delta_v
    r_p = ri_t @ u_p - delta_p

    residual = np.concatenate([
        r_r, r_v, r_p,
        state_j.bias_accel - state_i.bias_accel,
        state_j.bias_gyro - state_i.bias_gyro,
    ])
    if not with_jacobians:
        return residual, None, None

    jr_inv = so3_right_jacobian_inv(r_r)
    e_mat = err_rot.matrix()
    j_i = np.zeros((15, 15))
    j_j = np.zeros((15, 15))

    # rotation rows
    j_i[0:3, 0:3] = -jr_inv @ (r_j.matrix().T @ r_i.matrix())
    j_i[0:3, 12:15] = -jr_inv @ e_mat.T @ so3_right_jacobian(theta) @ j_phi_g
    j_j[0:3, 0:3] = jr_inv
    # velocity rows
    j_i[3:6, 0:3] = so3_hat(ri_t @ u_v)
    j_i[3:6, 6:9] = -ri_t
    j_i[3:6, 9:12] = -pre.jac_bias[3:6, 0:3]
    j_i[3:6, 12:15] = -pre.jac_bias[3:6, 3:6]
    j_j[3:6, 6:9] = ri_t
    # position rows
    j_i[6:9, 0:3] = so3_hat(ri_t @ u_p)
    j_i[6:9, 3:6] = -np.eye(3)
    j_i[6:9, 6:9] = -ri_t * dt
    j_i[6:9, 9:12] = -pre.jac_bias[6:9, 0:3]
    j_i[6:9, 12:15] = -pre.jac_bias[6:9, 3:6]
    j_j[6:9, 3:6] = ri_t @ r_j.matrix()
    # bias random-walk rows
    j_i[9:15, 9:15] = -np.eye(6)
    j_j[9:15, 9:15] = np.eye(6)
    return residual, j_i, j_j
