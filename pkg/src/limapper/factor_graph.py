"""Factor graph container, on-manifold Levenberg-Marquardt, and fixed-lag
marginalization.

Every factor contributes a scalar cost plus, on linearization, the gradient
and Gauss-Newton Hessian blocks of that cost with respect to the connected
variables' tangent perturbations.  The optimizer assembles damped normal
equations from all factors at the current estimate each iteration, so
matching-cost factors are re-linearized (correspondences re-looked-up) every
iteration, while priors and relative-state factors are fixed-form quadratics.

Variable kinds and tangent layouts:

* ``frame-state`` / ``endpoint-state``: SensorState, 15 dof
  (rot, trans, vel, accel bias, gyro bias)
* ``submap-pose``: Se3Pose, 6 dof (rot, trans)
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg
import scipy.sparse
import scipy.sparse.linalg

from .errors import (
    DegenerateConstraint,
    DisconnectedGraph,
    DuplicateVariable,
    NotConverged,
    UnderConstrainedGraph,
    UnknownVariable,
)
from .geometry import (
    Se3Pose,
    SensorState,
    pose_compose,
    pose_inverse,
    pose_local,
    pose_retract,
    so3_hat,
    so3_log,
    so3_right_jacobian_inv,
    state_local,
    state_retract,
)
from .imu import GRAVITY, PreintegratedImu, imu_factor_residual
from .registration import (
    GaussianVoxelMap,
    linearize_from_terms,
    match_terms,
    skew_batch,
)
from .preprocess import Frame

VARIABLE_DIMS = {"frame-state": 15, "submap-pose": 6, "endpoint-state": 15}


@dataclass(frozen=True, order=True)
class Key:
    kind: str
    index: int

    @property
    def dim(self) -> int:
        return VARIABLE_DIMS[self.kind]

    def __repr__(self) -> str:
        return f"{self.kind}:{self.index}"


def frame_key(index: int) -> Key:
    return Key("frame-state", index)


def submap_key(index: int) -> Key:
    return Key("submap-pose", index)


def endpoint_key(submap_index: int, side: str) -> Key:
    offset = 0 if side == "left" else 1
    return Key("endpoint-state", 2 * submap_index + offset)


def retract_value(kind: str, value, delta):
    if kind == "submap-pose":
        return pose_retract(value, delta)
    return state_retract(value, delta)


def local_value(kind: str, value, ref) -> np.ndarray:
    if kind == "submap-pose":
        return pose_local(value, ref)
    return state_local(value, ref)


def _pose_of(kind: str, value) -> Se3Pose:
    return value if kind == "submap-pose" else value.pose


class FactorLinearization:
    """Gradient/Hessian blocks of one factor's cost contribution."""

    __slots__ = ("keys", "g", "h", "cost")

    def __init__(self, keys, g, h, cost):
        self.keys = keys
        self.g = g  # list of per-key gradient blocks
        self.h = h  # dict (a, b) with a <= b -> block
        self.cost = cost


class Factor:
    keys: tuple
    grounding = False  # anchors its component absolutely

    def cost(self, values) -> float:
        raise NotImplementedError

    def linearize(self, values) -> FactorLinearization:
        raise NotImplementedError

    @property
    def kind(self) -> str:
        raise NotImplementedError


class PriorFactor(Factor):
    """Quadratic prior on a variable's tangent offset from a fixed value.

    ``information`` is a per-dimension diagonal; zero entries leave the
    corresponding dimension unconstrained (partial priors on velocity or
    bias only).
    """

    grounding = True
    kind = "prior"

    def __init__(self, key: Key, prior_value, information):
        self.keys = (key,)
        self.prior = prior_value
        info = np.asarray(information, dtype=float)
        if info.ndim == 1:
            info = np.diag(info)
        self.information = info

    def _residual(self, values):
        return local_value(self.keys[0].kind, values[self.keys[0]], self.prior)

    def cost(self, values) -> float:
        r = self._residual(values)
        return float(r @ self.information @ r)

    def linearize(self, values) -> FactorLinearization:
        key = self.keys[0]
        r = self._residual(values)
        d = key.dim
        jac = np.eye(d)
        ref_r = self.prior if key.kind == "submap-pose" else self.prior.pose
        cur_r = _pose_of(key.kind, values[key])
        jac[0:3, 0:3] = so3_right_jacobian_inv(r[:3])
        jac[3:6, 3:6] = ref_r.rotation.matrix().T @ cur_r.rotation.matrix()
        jtw = 2.0 * jac.T @ self.information
        return FactorLinearization(
            self.keys, [jtw @ r], {(0, 0): jtw @ jac},
            float(r @ self.information @ r))


class ImuFactor(Factor):
    """Preintegrated relative-motion constraint plus bias random walk."""

    kind = "imu-preintegration"

    def __init__(self, key_i: Key, key_j: Key, pre: PreintegratedImu,
                 gravity=GRAVITY, walk_information=None):
        self.keys = (key_i, key_j)
        self.pre = pre
        self.gravity = np.asarray(gravity, dtype=float)
        info9 = np.linalg.inv(pre.cov)
        info9 = 0.5 * (info9 + info9.T)
        walk = (np.full(6, 1e4) if walk_information is None
                else np.asarray(walk_information, dtype=float))
        self.information = np.zeros((15, 15))
        self.information[:9, :9] = info9
        self.information[9:, 9:] = np.diag(walk)

    def _states(self, values):
        return values[self.keys[0]], values[self.keys[1]]

    def cost(self, values) -> float:
        si, sj = self._states(values)
        r, _, _ = imu_factor_residual(si, sj, self.pre, self.gravity,
                                      with_jacobians=False)
        return float(r @ self.information @ r)

    def linearize(self, values) -> FactorLinearization:
        si, sj = self._states(values)
        r, j_i, j_j = imu_factor_residual(si, sj, self.pre, self.gravity)
        wi = 2.0 * j_i.T @ self.information
        wj = 2.0 * j_j.T @ self.information
        return FactorLinearization(
            self.keys,
            [wi @ r, wj @ r],
            {(0, 0): wi @ j_i, (0, 1): wi @ j_j, (1, 1): wj @ j_j},
            float(r @ self.information @ r))


class MatchingCostFactor(Factor):
    """Voxelized registration constraint between a source frame and a
    target voxel map; unary when the target pose is fixed.

    The source/target poses are read from the connected variables (the pose
    component for state variables).  If the correspondence count drops below
    the minimum at the current estimate, the factor contributes nothing for
    that iteration.
    """

    def __init__(self, key_source: Key, source: Frame, target_map: GaussianVoxelMap,
                 key_target: Key | None = None,
                 fixed_target_pose: Se3Pose | None = None,
                 min_inliers: int = 10):
        if (key_target is None) == (fixed_target_pose is None):
            raise ValueError("exactly one of key_target / fixed_target_pose")
        self.keys = (key_source,) if key_target is None else (key_source, key_target)
        self.source = source
        self.target_map = target_map
        self.fixed_target_pose = fixed_target_pose
        self.min_inliers = min_inliers
        self._hats = None  # skew matrices of the source points, built lazily
        # correspondences of the last evaluated value pair; values are
        # immutable, so identity comparison is a safe cache key
        self._terms_cache = None

    @property
    def unary(self) -> bool:
        return self.fixed_target_pose is not None

    @property
    def grounding(self) -> bool:
        return self.unary

    @property
    def kind(self) -> str:
        return "matching-cost-unary" if self.unary else "matching-cost-binary"

    def _poses(self, values):
        t_i = _pose_of(self.keys[0].kind, values[self.keys[0]])
        if self.unary:
            return t_i, self.fixed_target_pose
        return t_i, _pose_of(self.keys[1].kind, values[self.keys[1]])

    def _terms(self, values):
        """Correspondences at the given values, reusing the previous lookup
        when the connected values are the same objects."""
        v_i = values[self.keys[0]]
        v_j = None if self.unary else values[self.keys[1]]
        cached = self._terms_cache
        if cached is not None and cached[0] is v_i and cached[1] is v_j:
            return cached[2], cached[3]
        t_i, t_j = self._poses(values)
        t_ij = pose_compose(pose_inverse(t_j), t_i)
        if len(self.source) == 0 or len(self.target_map) == 0 \
                or self.source.covs is None:
            terms = None
        else:
            terms = match_terms(self.source, self.target_map, t_ij)
        self._terms_cache = (v_i, v_j, terms, t_ij)
        return terms, t_ij

    def cost(self, values) -> float:
        terms, _ = self._terms(values)
        if terms is None or terms.inliers < self.min_inliers:
            return 0.0
        return terms.cost

    def linearize(self, values) -> FactorLinearization:
        zeros = [np.zeros(k.dim) for k in self.keys]
        if self._hats is None and len(self.source):
            self._hats = skew_batch(self.source.points)
        terms, t_ij = self._terms(values)
        try:
            if terms is None:
                raise DegenerateConstraint("no points to match")
            lin = linearize_from_terms(self.source, terms, t_ij,
                                       target_fixed=self.unary,
                                       min_inliers=self.min_inliers,
                                       source_hats=self._hats)
        except DegenerateConstraint:
            h = {(a, a): np.zeros((k.dim, k.dim)) for a, k in enumerate(self.keys)}
            return FactorLinearization(self.keys, zeros, h, 0.0)
        di = self.keys[0].dim
        g_i = np.zeros(di)
        g_i[:6] = lin.b_i
        h_ii = np.zeros((di, di))
        h_ii[:6, :6] = lin.h_ii
        if self.unary:
            return FactorLinearization(self.keys, [g_i], {(0, 0): h_ii}, lin.cost)
        dj = self.keys[1].dim
        g_j = np.zeros(dj)
        g_j[:6] = lin.b_j
        h_jj = np.zeros((dj, dj))
        h_jj[:6, :6] = lin.h_jj
        h_ij = np.zeros((di, dj))
        h_ij[:6, :6] = lin.h_ij
        return FactorLinearization(
            self.keys, [g_i, g_j],
            {(0, 0): h_ii, (0, 1): h_ij, (1, 1): h_jj}, lin.cost)


class RelativeStateFactor(Factor):
    """Ties an endpoint state to its submap pose through stored relatives.

    The residual vanishes when the endpoint equals the submap pose composed
    with the stored relative pose, the rotated stored velocity, and the
    stored bias.  Weighted near-rigid by default.
    """

    kind = "relative-state"

    def __init__(self, key_submap: Key, key_endpoint: Key, rel_pose: Se3Pose,
                 rel_velocity, rel_bias, sigma: float = 1e-3):
        self.keys = (key_submap, key_endpoint)
        self.rel_pose = rel_pose
        self.rel_velocity = np.asarray(rel_velocity, dtype=float)
        self.rel_bias = np.asarray(rel_bias, dtype=float)
        self.information = np.full(15, 1.0 / sigma**2)

    def _residual(self, values):
        t_s: Se3Pose = values[self.keys[0]]
        state: SensorState = values[self.keys[1]]
        err = pose_compose(pose_inverse(self.rel_pose),
                           pose_compose(pose_inverse(t_s), state.pose))
        r = np.empty(15)
        r[0:3] = so3_log(err.rotation)
        r[3:6] = err.translation
        r[6:9] = t_s.rotation.inverse().apply(state.velocity) - self.rel_velocity
        r[9:15] = state.bias - self.rel_bias
        return r, err, t_s, state

    def cost(self, values) -> float:
        r, _, _, _ = self._residual(values)
        return float(r @ (self.information * r))

    def linearize(self, values) -> FactorLinearization:
        r, err, t_s, state = self._residual(values)
        jr_inv = so3_right_jacobian_inv(r[0:3])
        e_rot = err.rotation.matrix()
        rs_t = t_s.rotation.matrix().T

        # C = (T_s)^-1 T_endpoint enters the submap-side chain rule
        c = pose_compose(pose_inverse(t_s), state.pose)
        rc_t = c.rotation.matrix().T
        rb = self.rel_pose.rotation.matrix().T  # rotation of rel_pose^-1

        j_s = np.zeros((15, 6))
        j_s[0:3, 0:3] = -jr_inv @ rc_t
        j_s[3:6, 0:3] = rb @ so3_hat(c.translation)
        j_s[3:6, 3:6] = -rb
        j_s[6:9, 0:3] = so3_hat(rs_t @ state.velocity)

        j_e = np.zeros((15, 15))
        j_e[0:3, 0:3] = jr_inv
        j_e[3:6, 3:6] = e_rot
        j_e[6:9, 6:9] = rs_t
        j_e[9:15, 9:15] = np.eye(6)

        wr = self.information * r
        ws = 2.0 * j_s.T
        we = 2.0 * j_e.T
        lam = self.information[:, None]
        return FactorLinearization(
            self.keys,
            [ws @ wr, we @ wr],
            {(0, 0): ws @ (lam * j_s), (0, 1): ws @ (lam * j_e),
             (1, 1): we @ (lam * j_e)},
            float(r @ wr))


class MarginalPriorFactor(Factor):
    """Dense Gaussian prior left behind by marginalized variables.

    Stores the Schur-complement gradient and Hessian at a frozen
    linearization point; evaluation treats the local-coordinate map as
    identity (first-order consistent at the linearization point).
    """

    grounding = True
    kind = "marginal-prior"

    def __init__(self, keys, lin_values: dict, hessian: np.ndarray,
                 gradient: np.ndarray):
        self.keys = tuple(keys)
        self.lin_values = dict(lin_values)
        self.hessian = 0.5 * (hessian + hessian.T)
        self.gradient = gradient
        self._slices = []
        off = 0
        for k in self.keys:
            self._slices.append(slice(off, off + k.dim))
            off += k.dim
        self.dim = off

    def _delta(self, values) -> np.ndarray:
        delta = np.empty(self.dim)
        for k, sl in zip(self.keys, self._slices):
            delta[sl] = local_value(k.kind, values[k], self.lin_values[k])
        return delta

    def cost(self, values) -> float:
        d = self._delta(values)
        return float(self.gradient @ d + 0.5 * d @ self.hessian @ d)

    def linearize(self, values) -> FactorLinearization:
        d = self._delta(values)
        g_full = self.gradient + self.hessian @ d
        g = [g_full[sl] for sl in self._slices]
        h = {}
        for a in range(len(self.keys)):
            for b in range(a, len(self.keys)):
                h[(a, b)] = self.hessian[self._slices[a], self._slices[b]]
        return FactorLinearization(self.keys, g, h, self.cost(values))


@dataclass
class LmSettings:
    max_iterations: int = 64
    rel_cost_tol: float = 1e-9
    update_tol: float = 1e-9
    lambda_init: float = 1e-6
    lambda_down: float = 0.5
    lambda_up: float = 4.0
    lambda_max: float = 1e12
    dense_threshold: int = 600  # tangent dims; sparse solve above


@dataclass
class OptimizeResult:
    estimates: dict
    final_cost: float
    iterations: int
    converged: bool = True


class FactorGraph:
    """Variables plus factors; a multigraph (parallel factors allowed)."""

    def __init__(self):
        self.values: dict[Key, object] = {}
        self.factors: list[Factor] = []
        self._cached_normal = None  # (H, slices, dim) at current values

    def add_variable(self, key: Key, initial_value) -> None:
        if key in self.values:
            raise DuplicateVariable(f"{key} already in graph")
        self.values[key] = initial_value
        self._cached_normal = None

    def add_factor(self, factor: Factor) -> None:
        if not factor.keys:
            return  # fully folded (e.g. empty marginal prior)
        for k in factor.keys:
            if k not in self.values:
                raise UnknownVariable(f"factor references missing {k}")
        self.factors.append(factor)
        self._cached_normal = None

    def remove_variable(self, key: Key) -> None:
        del self.values[key]
        self._cached_normal = None

    def total_cost(self, values=None) -> float:
        values = self.values if values is None else values
        return float(sum(f.cost(values) for f in self.factors))

    # -- structural checks -------------------------------------------------

    def check_structure(self) -> None:
        """Every variable must sit in a component that owns an anchoring
        (prior-like) factor; lone variables are rejected outright."""
        touched = {k: False for k in self.values}
        parent = {k: k for k in self.values}

        def find(k):
            while parent[k] is not k:
                parent[k] = parent[parent[k]]
                k = parent[k]
            return k

        def union(a, b):
            ra, rb = find(a), find(b)
            if ra is not rb:
                parent[ra] = rb

        for f in self.factors:
            for k in f.keys:
                touched[k] = True
            for a, b in zip(f.keys, f.keys[1:]):
                union(a, b)
        loose = [k for k, t in touched.items() if not t]
        if loose:
            raise UnderConstrainedGraph(f"variables without factors: {loose}")
        grounded = set()
        for f in self.factors:
            if f.grounding:
                grounded.add(find(f.keys[0]))
        for k in self.values:
            if find(k) not in grounded:
                raise UnderConstrainedGraph(
                    f"component containing {k} has no anchoring factor")

    # -- assembly ----------------------------------------------------------

    def _slices(self):
        slices = {}
        off = 0
        for k in self.values:
            slices[k] = slice(off, off + k.dim)
            off += k.dim
        return slices, off

    def _assemble_dense(self, values, slices, dim):
        h = np.zeros((dim, dim))
        g = np.zeros(dim)
        cost = 0.0
        for f in self.factors:
            lin = f.linearize(values)
            cost += lin.cost
            sls = [slices[k] for k in lin.keys]
            for a, ga in enumerate(lin.g):
                g[sls[a]] += ga
            for (a, b), blk in lin.h.items():
                h[sls[a], sls[b]] += blk
                if a != b:
                    h[sls[b], sls[a]] += blk.T
        return h, g, cost

    def _retract_all(self, values, slices, delta):
        out = {}
        for k, v in values.items():
            out[k] = retract_value(k.kind, v, delta[slices[k]])
        return out

    # -- optimization --------------------------------------------------------

    def optimize_lm(self, settings: LmSettings | None = None) -> OptimizeResult:
        """Damped Gauss-Newton with multiplicative trust-region control.

        The damping term is lambda * diag(H); accepted steps halve lambda,
        rejected steps quadruple it, and the best estimate so far rides
        along in case damping tops out.
        """
        settings = settings or LmSettings()
        self.check_structure()
        slices, dim = self._slices()
        values = dict(self.values)
        cost = self.total_cost(values)
        lam = settings.lambda_init
        iterations = 0
        dense = dim <= settings.dense_threshold

        for _ in range(settings.max_iterations):
            h, g, cost = self._assemble_dense(values, slices, dim)
            iterations += 1
            diag = np.diag(h).copy()
            accepted = False
            converged = False
            while True:
                try:
                    if dense:
                        factorized = scipy.linalg.cho_factor(
                            h + np.diag(lam * diag), lower=True)
                        delta = scipy.linalg.cho_solve(factorized, -g)
                    else:
                        sp = scipy.sparse.csc_matrix(h + np.diag(lam * diag))
                        delta = scipy.sparse.linalg.splu(sp).solve(-g)
                    if not np.all(np.isfinite(delta)):
                        raise np.linalg.LinAlgError("non-finite update")
                except (np.linalg.LinAlgError, RuntimeError, ValueError):
                    lam *= settings.lambda_up
                    if lam > settings.lambda_max:
                        self.values = values
                        self._cached_normal = None
                        raise NotConverged("damping exhausted on singular system",
                                           estimates=values, cost=cost)
                    continue
                if np.max(np.abs(delta)) < settings.update_tol:
                    converged = True
                    break
                candidate = self._retract_all(values, slices, delta)
                new_cost = self.total_cost(candidate)
                if np.isfinite(new_cost) and new_cost < cost:
                    values = candidate
                    accepted = True
                    lam = max(lam * settings.lambda_down, 1e-12)
                    break
                lam *= settings.lambda_up
                if lam > settings.lambda_max:
                    self.values = values
                    self._cached_normal = None
                    raise NotConverged("no cost-reducing step found",
                                       estimates=values, cost=cost)
            if converged:
                break
            if accepted and (cost - new_cost) <= settings.rel_cost_tol * max(cost, 1e-30):
                cost = new_cost
                break
            cost = new_cost
        self.values = values
        h, _, final = self._assemble_dense(values, slices, dim)
        self._cached_normal = (h, slices, dim)
        return OptimizeResult(values, final, iterations)

    def warm_restart_optimize(self, previous_estimates: dict,
                              settings: LmSettings | None = None) -> OptimizeResult:
        """Re-optimize after seeding existing variables from a prior solve.

        Variables absent from previous_estimates keep their insertion-time
        initials, which is what makes repeated batch solves cheap as the
        graph grows.
        """
        for k, v in previous_estimates.items():
            if k in self.values:
                self.values[k] = v
        return self.optimize_lm(settings)

    # -- marginalization -----------------------------------------------------

    def marginalize(self, keys_to_remove) -> MarginalPriorFactor:
        """Schur-complement removed variables into a dense Gaussian prior.

        All factors touching a removed key are linearized at the current
        estimate, consumed, and replaced by one MarginalPriorFactor over the
        retained keys they touched.
        """
        removed = list(keys_to_remove)
        for k in removed:
            if k not in self.values:
                raise UnknownVariable(f"{k} not in graph")
        removed_set = set(removed)
        involved = [f for f in self.factors if any(k in removed_set for k in f.keys)]
        retained = []
        for f in involved:
            for k in f.keys:
                if k not in removed_set and k not in retained:
                    retained.append(k)

        # validate connectivity of the remaining graph before mutating
        remaining = [f for f in self.factors if f not in involved]
        probe = FactorGraph()
        for k, v in self.values.items():
            if k not in removed_set:
                probe.values[k] = v
        probe.factors = remaining
        if retained:
            probe.factors = remaining + [
                MarginalPriorFactor(retained, {k: self.values[k] for k in retained},
                                    np.zeros((sum(k.dim for k in retained),) * 2),
                                    np.zeros(sum(k.dim for k in retained)))]
        try:
            if probe.values:
                probe.check_structure()
        except UnderConstrainedGraph as exc:
            raise DisconnectedGraph(str(exc)) from exc

        # local ordering: removed first, then retained
        order = removed + retained
        slices = {}
        off = 0
        for k in order:
            slices[k] = slice(off, off + k.dim)
            off += k.dim
        h = np.zeros((off, off))
        g = np.zeros(off)
        for f in involved:
            lin = f.linearize(self.values)
            sls = [slices[k] for k in lin.keys]
            for a, ga in enumerate(lin.g):
                g[sls[a]] += ga
            for (a, b), blk in lin.h.items():
                h[sls[a], sls[b]] += blk
                if a != b:
                    h[sls[b], sls[a]] += blk.T

        r_dim = sum(k.dim for k in removed)
        h_rr = h[:r_dim, :r_dim]
        h_rk = h[:r_dim, r_dim:]
        g_r = g[:r_dim]
        try:
            chol = scipy.linalg.cho_factor(h_rr, lower=True)
            x_rk = scipy.linalg.cho_solve(chol, h_rk)
            x_r = scipy.linalg.cho_solve(chol, g_r)
        except np.linalg.LinAlgError:
            jitter = 1e-10 * max(1.0, float(np.max(np.abs(np.diag(h_rr)))))
            chol = scipy.linalg.cho_factor(h_rr + jitter * np.eye(r_dim), lower=True)
            x_rk = scipy.linalg.cho_solve(chol, h_rk)
            x_r = scipy.linalg.cho_solve(chol, g_r)
        h_marg = h[r_dim:, r_dim:] - h_rk.T @ x_rk
        g_marg = g[r_dim:] - h_rk.T @ x_r

        self.factors = remaining
        for k in removed:
            del self.values[k]
        self._cached_normal = None
        prior = MarginalPriorFactor(retained,
                                    {k: self.values[k] for k in retained},
                                    h_marg, g_marg)
        if retained:
            self.add_factor(prior)
        return prior

    def marginal_covariance(self, key: Key) -> np.ndarray:
        """Covariance block of one variable from the full normal equations."""
        if self._cached_normal is not None:
            h, slices, dim = self._cached_normal
        else:
            slices, dim = self._slices()
            h, _, _ = self._assemble_dense(self.values, slices, dim)
        sl = slices[key]
        rhs = np.zeros((dim, key.dim))
        rhs[sl] = np.eye(key.dim)
        try:
            sol = scipy.linalg.cho_solve(scipy.linalg.cho_factor(h, lower=True), rhs)
        except np.linalg.LinAlgError:
            jitter = 1e-9 * max(1.0, float(np.max(np.abs(np.diag(h)))))
            sol = scipy.linalg.cho_solve(
                scipy.linalg.cho_factor(h + jitter * np.eye(dim), lower=True), rhs)
        return sol[sl]

    def dump(self, stream) -> None:
        """Line-delimited structure and per-factor cost listing."""
        for k, v in self.values.items():
            stream.write(f"variable {k} dim={k.dim}\n")
        for i, f in enumerate(self.factors):
            keys = ",".join(str(k) for k in f.keys)
            stream.write(f"factor {i} kind={f.kind} keys=[{keys}] "
                         f"cost={f.cost(self.values):.9g}\n")
