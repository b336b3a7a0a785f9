"""Synthetic scenes: analytic trajectories through plane worlds, with scans
ray-cast from the instantaneous pose at every ray stamp and IMU streams from
the exact trajectory derivatives.

Because each ray is cast from the pose at its own stamp, the generated scans
carry true motion distortion and deskewing against the ground truth is a
nontrivial check.  Everything is deterministic under the seed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import GenerationError
from .dataset_io import TrajectoryRecord, record_from_pose
from .geometry import Rotation, Se3Pose, so3_exp
from .imu import GRAVITY, ImuSample
from .preprocess import RawScan

# -- world --------------------------------------------------------------------


@dataclass(frozen=True)
class AxisRect:
    """Axis-aligned rectangle: fixed coordinate on one axis, bounded on the
    other two (in ascending axis order)."""

    axis: int
    value: float
    lo: tuple[float, float]
    hi: tuple[float, float]


@dataclass(frozen=True)
class World:
    rects: tuple
    # hull the trajectory must stay inside; None disables the check
    hull_min: np.ndarray | None = None
    hull_max: np.ndarray | None = None


def box_room(center=(0.0, 0.0, 0.0), size=(10.0, 8.0, 3.0)) -> World:
    """Closed rectangular room; the sensor flies inside."""
    c = np.asarray(center, float)
    s = np.asarray(size, float) / 2.0
    lo = c - s
    hi = c + s
    rects = []
    for axis in range(3):
        others = [a for a in range(3) if a != axis]
        bounds_lo = (lo[others[0]], lo[others[1]])
        bounds_hi = (hi[others[0]], hi[others[1]])
        rects.append(AxisRect(axis, lo[axis], bounds_lo, bounds_hi))
        rects.append(AxisRect(axis, hi[axis], bounds_lo, bounds_hi))
    return World(tuple(rects), lo, hi)


def two_room_world(room_size=(8.0, 6.0, 3.0), gap: float = 22.0) -> World:
    """Two closed rooms separated along x by an empty stretch.

    Open faces toward the gap let the trajectory pass through; in the middle
    of the gap nothing lies within typical sensor range, which starves the
    registration of geometry there.
    """
    sx, sy, sz = room_size
    rects = []

    def room(x0):
        lo = np.array([x0, -sy / 2, -sz / 2])
        hi = np.array([x0 + sx, sy / 2, sz / 2])
        out = [
            AxisRect(2, lo[2], (lo[0], lo[1]), (hi[0], hi[1])),
            AxisRect(2, hi[2], (lo[0], lo[1]), (hi[0], hi[1])),
            AxisRect(1, lo[1], (lo[0], lo[2]), (hi[0], hi[2])),
            AxisRect(1, hi[1], (lo[0], lo[2]), (hi[0], hi[2])),
        ]
        # end walls only on the outer faces
        if x0 == 0.0:
            out.append(AxisRect(0, lo[0], (lo[1], lo[2]), (hi[1], hi[2])))
        else:
            out.append(AxisRect(0, hi[0], (lo[1], lo[2]), (hi[1], hi[2])))
        return out

    rects += room(0.0)
    rects += room(sx + gap)
    hull_min = np.array([-0.5, -sy / 2, -sz / 2])
    hull_max = np.array([2 * sx + gap + 0.5, sy / 2, sz / 2])
    return World(tuple(rects), hull_min, hull_max)


def cast_rays(world: World, origins: np.ndarray, dirs: np.ndarray,
              min_range: float, max_range: float):
    """Nearest hit per ray against every rectangle; NaN rows on misses."""
    n = origins.shape[0]
    best_t = np.full(n, np.inf)
    for rect in world.rects:
        d_axis = dirs[:, rect.axis]
        safe = np.abs(d_axis) > 1e-12
        t = np.where(safe, (rect.value - origins[:, rect.axis])
                     / np.where(safe, d_axis, 1.0), np.inf)
        others = [a for a in range(3) if a != rect.axis]
        finite = np.isfinite(t)
        tt = np.where(finite, t, 0.0)
        p0 = origins[:, others[0]] + tt * dirs[:, others[0]]
        p1 = origins[:, others[1]] + tt * dirs[:, others[1]]
        ok = (finite & (t >= min_range) & (t <= max_range)
              & (p0 >= rect.lo[0]) & (p0 <= rect.hi[0])
              & (p1 >= rect.lo[1]) & (p1 <= rect.hi[1]))
        best_t = np.where(ok & (t < best_t), t, best_t)
    hit = np.isfinite(best_t)
    points = origins + np.where(hit, best_t, 0.0)[:, None] * dirs
    return points, hit


# -- trajectories ---------------------------------------------------------------


class Trajectory:
    """Analytic trajectory: pose, world velocity/acceleration, body rates."""

    def pose(self, t: float) -> Se3Pose:
        raise NotImplementedError

    def velocity(self, t: float) -> np.ndarray:
        raise NotImplementedError

    def accel(self, t: float) -> np.ndarray:
        raise NotImplementedError

    def omega_body(self, t: float) -> np.ndarray:
        raise NotImplementedError


class StationaryTrajectory(Trajectory):
    def __init__(self, pose: Se3Pose | None = None):
        self._pose = pose or Se3Pose.identity()

    def pose(self, t):
        return self._pose

    def velocity(self, t):
        return np.zeros(3)

    def accel(self, t):
        return np.zeros(3)

    def omega_body(self, t):
        return np.zeros(3)


class Path:
    """Arc-length parameterized planar path at a fixed height."""

    length: float

    def eval(self, s: float):
        """(position, yaw, curvature) at arc length s."""
        raise NotImplementedError


class LinePath(Path):
    def __init__(self, start, direction, length: float):
        self.start = np.asarray(start, float)
        d = np.asarray(direction, float)
        self.direction = d / np.linalg.norm(d)
        self.length = float(length)
        self.yaw = math.atan2(self.direction[1], self.direction[0])

    def eval(self, s):
        return self.start + s * self.direction, self.yaw, 0.0


class CirclePath(Path):
    """Counterclockwise circle starting at the origin heading +x."""

    def __init__(self, radius: float, laps: float = 1.0, height: float = 0.0):
        self.radius = float(radius)
        self.center = np.array([0.0, radius, height])
        self.length = float(2 * math.pi * radius * laps)

    def eval(self, s):
        theta = -math.pi / 2 + s / self.radius
        pos = self.center + self.radius * np.array(
            [math.cos(theta), math.sin(theta), 0.0])
        return pos, theta + math.pi / 2, 1.0 / self.radius


class SquareLoopPath(Path):
    """Counterclockwise rounded square centered at the origin.

    half_side is the distance from the center to an edge; corners are
    quarter arcs of corner_radius.  The path starts at the left end of the
    bottom edge, heading +x.
    """

    def __init__(self, half_side: float, corner_radius: float, height: float = 0.0):
        if corner_radius >= half_side:
            raise ValueError("corner radius must be below half_side")
        h, r = float(half_side), float(corner_radius)
        self.height = float(height)
        edge = 2 * (h - r)
        arc = math.pi * r / 2
        self.length = 4 * edge + 4 * arc
        self._segments = []
        # (kind, seg_length, data); straights carry (start2d, dir2d, yaw),
        # arcs carry (center2d, start_angle)
        e = h - r
        corners = [(e, -e), (e, e), (-e, e), (-e, -e)]
        starts = [(-e, -h), (h, -e), (e, h), (-h, e)]
        dirs = [(1, 0), (0, 1), (-1, 0), (0, -1)]
        angles = [-math.pi / 2, 0.0, math.pi / 2, math.pi]
        for k in range(4):
            self._segments.append(
                ("straight", edge, (np.array(starts[k], float),
                                    np.array(dirs[k], float),
                                    math.atan2(dirs[k][1], dirs[k][0]))))
            self._segments.append(("arc", arc, (np.array(corners[k], float), angles[k])))
        self.corner_radius = r

    def eval(self, s):
        s = s % self.length
        for kind, seg_len, data in self._segments:
            if s <= seg_len:
                if kind == "straight":
                    start, d, yaw = data
                    p = start + s * d
                    return np.array([p[0], p[1], self.height]), yaw, 0.0
                center, a0 = data
                r = self.corner_radius
                theta = a0 + s / r
                p = center + r * np.array([math.cos(theta), math.sin(theta)])
                return (np.array([p[0], p[1], self.height]),
                        theta + math.pi / 2, 1.0 / r)
            s -= seg_len
        # numerical wrap past the last segment
        start, d, yaw = self._segments[0][2]
        return np.array([start[0], start[1], self.height]), yaw, 0.0


class PathTrajectory(Trajectory):
    """Constant-speed traversal of a path with a smooth spin-up.

    The speed profile is zero during the settle period, follows a smoothstep
    ramp of ramp_time, then holds cruise speed; acceleration stays bounded.
    """

    def __init__(self, path: Path, speed: float, settle: float = 0.0,
                 ramp_time: float = 0.5):
        self.path = path
        self.speed = float(speed)
        self.settle = float(settle)
        self.ramp_time = float(ramp_time)

    def _profile(self, t: float):
        """(arc length, speed, tangential acceleration) at time t."""
        if t <= self.settle:
            return 0.0, 0.0, 0.0
        tau = t - self.settle
        if tau < self.ramp_time:
            u = tau / self.ramp_time
            v = self.speed * (3 * u**2 - 2 * u**3)
            a = self.speed * (6 * u - 6 * u**2) / self.ramp_time
            s = self.speed * self.ramp_time * (u**3 - u**4 / 2)
            return s, v, a
        s_ramp = self.speed * self.ramp_time / 2
        return s_ramp + self.speed * (tau - self.ramp_time), self.speed, 0.0

    def pose(self, t):
        s, _, _ = self._profile(t)
        pos, yaw, _ = self.path.eval(s)
        return Se3Pose(so3_exp([0.0, 0.0, yaw]), pos)

    def velocity(self, t):
        s, v, _ = self._profile(t)
        _, yaw, _ = self.path.eval(s)
        return v * np.array([math.cos(yaw), math.sin(yaw), 0.0])

    def accel(self, t):
        s, v, a = self._profile(t)
        _, yaw, kappa = self.path.eval(s)
        tangent = np.array([math.cos(yaw), math.sin(yaw), 0.0])
        normal = np.array([-math.sin(yaw), math.cos(yaw), 0.0])
        return a * tangent + kappa * v**2 * normal

    def omega_body(self, t):
        s, v, _ = self._profile(t)
        _, _, kappa = self.path.eval(s)
        return np.array([0.0, 0.0, kappa * v])


# -- scene generation -------------------------------------------------------------


@dataclass
class SceneSpec:
    world: World
    trajectory: Trajectory
    duration: float
    scan_rate: float = 10.0
    scan_duration: float = 0.095
    imu_rate: float = 200.0
    n_azimuth: int = 64
    n_elevation: int = 12
    elevation_span: tuple[float, float] = (-0.45, 0.45)
    min_range: float = 0.3
    max_range: float = 20.0
    accel_noise_density: float = 0.0
    gyro_noise_density: float = 0.0
    range_noise: float = 0.0
    accel_bias: np.ndarray = field(default_factory=lambda: np.zeros(3))
    gyro_bias: np.ndarray = field(default_factory=lambda: np.zeros(3))
    gravity: np.ndarray = field(default_factory=lambda: GRAVITY.copy())
    seed: int = 0


@dataclass
class SyntheticScene:
    scans: list
    imu: list
    ground_truth: list
    spec: SceneSpec


def generate_synthetic_scene(spec: SceneSpec) -> SyntheticScene:
    rng = np.random.default_rng(spec.seed)
    traj = spec.trajectory
    gravity = np.asarray(spec.gravity, float)

    # IMU stream from the analytic derivatives, plus bias and white noise
    imu = []
    n_imu = int(round(spec.duration * spec.imu_rate)) + 1
    sqrt_rate = math.sqrt(spec.imu_rate)
    for k in range(n_imu):
        t = k / spec.imu_rate
        rot = traj.pose(t).rotation
        accel = rot.inverse().apply(traj.accel(t) - gravity) + spec.accel_bias
        gyro = traj.omega_body(t) + spec.gyro_bias
        if spec.accel_noise_density > 0:
            accel = accel + rng.normal(scale=spec.accel_noise_density * sqrt_rate, size=3)
        if spec.gyro_noise_density > 0:
            gyro = gyro + rng.normal(scale=spec.gyro_noise_density * sqrt_rate, size=3)
        imu.append(ImuSample(t, accel, gyro))

    # ray table shared by every scan
    az = np.linspace(0.0, 2 * math.pi, spec.n_azimuth, endpoint=False)
    el = np.linspace(spec.elevation_span[0], spec.elevation_span[1], spec.n_elevation)
    az_grid, el_grid = np.meshgrid(az, el, indexing="ij")
    dirs_body = np.column_stack([
        (np.cos(el_grid) * np.cos(az_grid)).ravel(),
        (np.cos(el_grid) * np.sin(az_grid)).ravel(),
        np.sin(el_grid).ravel(),
    ])
    ray_frac = np.repeat(np.arange(spec.n_azimuth) / spec.n_azimuth, spec.n_elevation)

    scans = []
    ground_truth = []
    n_scans = int(spec.duration * spec.scan_rate)
    for k in range(n_scans):
        t_start = k / spec.scan_rate
        if t_start + spec.scan_duration > spec.duration:
            break
        stamps = t_start + ray_frac * spec.scan_duration
        uniq = t_start + (np.arange(spec.n_azimuth) / spec.n_azimuth) * spec.scan_duration
        origins = np.empty((len(stamps), 3))
        dirs = np.empty_like(origins)
        for a, t_ray in enumerate(uniq):
            pose = traj.pose(float(t_ray))
            if spec.world.hull_min is not None:
                p = pose.translation
                if np.any(p < spec.world.hull_min) or np.any(p > spec.world.hull_max):
                    raise GenerationError(
                        f"trajectory leaves the world at t={t_ray:.3f}: {p}")
            sl = slice(a * spec.n_elevation, (a + 1) * spec.n_elevation)
            origins[sl] = pose.translation
            dirs[sl] = dirs_body[sl] @ pose.rotation.matrix().T
        points_w, hit = cast_rays(spec.world, origins, dirs,
                                  spec.min_range, spec.max_range)
        if spec.range_noise > 0:
            ranges = np.linalg.norm(points_w - origins, axis=1)
            noisy = ranges + rng.normal(scale=spec.range_noise, size=len(ranges))
            points_w = origins + (points_w - origins) * (
                noisy / np.where(ranges == 0, 1.0, ranges))[:, None]
        # express each hit in the sensor frame at its own capture time
        pts = []
        ts = []
        for a, t_ray in enumerate(uniq):
            sl = slice(a * spec.n_elevation, (a + 1) * spec.n_elevation)
            sel = hit[sl]
            if not np.any(sel):
                continue
            pose = traj.pose(float(t_ray))
            local = (points_w[sl][sel] - pose.translation) @ pose.rotation.matrix()
            pts.append(local)
            ts.append(np.full(int(sel.sum()), t_ray))
        if pts:
            points = np.concatenate(pts)
            stamps_out = np.concatenate(ts)
        else:
            points = np.zeros((0, 3))
            stamps_out = np.zeros(0)
        scans.append(RawScan(points, stamps_out, t_start,
                             t_start + spec.scan_duration))
        ground_truth.append(record_from_pose(t_start, traj.pose(t_start)))
    return SyntheticScene(scans, imu, ground_truth, spec)


def square_loop_scene(perimeter: float = 40.0, n_frames: int = 200,
                      settle: float = 1.0, speed: float | None = None,
                      room_margin: float = 3.0, seed: int = 0,
                      **spec_kwargs) -> SceneSpec:
    """Square-loop trajectory inside a box room sized to fit it."""
    corner_radius = 1.5
    # perimeter = 8 (h - r) + 2 pi r  =>  h
    h = (perimeter - 2 * math.pi * corner_radius) / 8.0 + corner_radius
    path = SquareLoopPath(h, corner_radius)
    scan_rate = spec_kwargs.get("scan_rate", 10.0)
    travel_time = n_frames / scan_rate - settle
    if speed is None:
        ramp = 1.0
        speed = path.length / (travel_time - ramp / 2)
        spec_kwargs.setdefault("ramp_time", ramp)
    ramp_time = spec_kwargs.pop("ramp_time", 1.0)
    traj = PathTrajectory(path, speed, settle=settle, ramp_time=ramp_time)
    world = box_room(center=(0.11, 0.13, 0.53),
                     size=(2 * h + 2 * room_margin, 2 * h + 2 * room_margin, 4.0))
    return SceneSpec(world=world, trajectory=traj,
                     duration=n_frames / scan_rate + 0.2, seed=seed, **spec_kwargs)
