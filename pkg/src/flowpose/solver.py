"""Linearized weighted least-squares body fitting.

Recovers per-joint rotation corrections, shape coefficients and a
global translation from pixel anchors.  Depth is eliminated with DLT
cross-product rows, each joint's world rotation is corrected by
I + [delta]x about the current estimate, and the resulting linear
system is solved by Cholesky on the normal equations, optionally
relinearizing.  Multi-view simply stacks rows with per-view extrinsics
and initializes from the chordal mean of the per-view poses.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ag
from .body import BodyModelDef, BodyState, forward_kinematics, shape_blend
from .rotation import Rotation, axis_angle_exp, rotation_mean


class UnderdeterminedError(ValueError):
    pass


class SolverFailure(RuntimeError):
    pass


class DivergenceError(SolverFailure):
    pass


WEIGHT_FLOOR = 1e-6
JITTER = 1e-10


@dataclass
class Observation:
    """One calibrated view of the anchor set.

    anchors_2d: (N_s,2) pixels; laplace_scale: (N_s,) predicted pixel
    uncertainty; aux_weight: (N_s,) extra factor (0 masks an anchor);
    intrinsics: 3x4; extrinsics_r/t: world-to-camera rigid transform
    (identity / zero for a single uncalibrated view).
    """

    anchors_2d: np.ndarray
    laplace_scale: np.ndarray
    aux_weight: np.ndarray
    intrinsics: np.ndarray
    extrinsics_r: np.ndarray = field(default_factory=lambda: np.eye(3))
    extrinsics_t: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.anchors_2d = np.asarray(self.anchors_2d, float)
        self.laplace_scale = np.asarray(self.laplace_scale, float)
        self.aux_weight = np.asarray(self.aux_weight, float)
        self.intrinsics = np.asarray(self.intrinsics, float)
        self.extrinsics_r = np.asarray(self.extrinsics_r, float)
        self.extrinsics_t = np.asarray(self.extrinsics_t, float)
        if self.intrinsics.shape != (3, 4):
            raise ValueError("intrinsics must be 3x4")
        if not np.allclose(self.intrinsics[2], [0.0, 0.0, 1.0, 0.0]):
            raise ValueError("intrinsics row 3 must be (0,0,1,0)")
        if (self.laplace_scale <= 0).any():
            raise ValueError("laplace_scale must be positive")
        if (self.aux_weight < 0).any():
            raise ValueError("aux_weight must be nonnegative")


@dataclass
class SolveConfig:
    omega_beta: float = 0.0
    gamma: float = 0.0
    beta_prior: np.ndarray | None = None
    pose_prior: list | None = None
    max_relinearizations: int = 0

    def __post_init__(self):
        if self.omega_beta < 0 or self.gamma < 0:
            raise ValueError("regularizer weights must be nonnegative")


@dataclass
class SolveResult:
    delta_vectors: np.ndarray       # (K,3) small-rotation updates, radians
    delta_rotations: list           # K Rotations, exp of the above
    rotations: list                 # corrected per-joint world rotations
    pose: list                      # corrected per-joint relative rotations
    beta: np.ndarray
    translation: np.ndarray
    weighted_rms_residual: float
    per_anchor_residuals: np.ndarray
    n_relinearizations: int = 0


def anchor_weights(laplace_scale, aux_weight):
    """w = aux / (scale + floor); a zero aux weight removes the anchor."""
    laplace_scale = np.asarray(laplace_scale, float)
    aux_weight = np.asarray(aux_weight, float)
    if (laplace_scale <= 0).any():
        raise ValueError("laplace_scale must be positive")
    return aux_weight / (laplace_scale + WEIGHT_FLOOR)


def _skew(v):
    return np.array([[0.0, -v[2], v[1]],
                     [v[2], 0.0, -v[0]],
                     [-v[1], v[0], 0.0]])


def _world_rotations(model, pose):
    wr = []
    for j in range(model.n_joints):
        r = pose[j].matrix()
        p = int(model.parents[j])
        wr.append(r if p < 0 else wr[p] @ r)
    return np.stack(wr)


def _relative_from_world(model, world):
    pose = []
    for j in range(model.n_joints):
        p = int(model.parents[j])
        rel = world[j] if p < 0 else world[p].T @ world[j]
        pose.append(Rotation.from_matrix(rel))
    return pose


def _chain_positions(model, wr, jr):
    """Joint world positions for fixed world rotations wr and rest joints jr."""
    k = model.n_joints
    wp = np.zeros((k, 3))
    for j in range(k):
        p = int(model.parents[j])
        if p >= 0:
            wp[j] = wp[p] + wr[p] @ (jr[j] - jr[p])
        else:
            wp[j] = jr[j]
    return wp


def _chain_directions(model, wr, djr):
    """d(world joint positions)/d(beta_s) for rest-joint direction djr."""
    k = model.n_joints
    d = np.zeros((k, 3))
    for j in range(k):
        p = int(model.parents[j])
        d[j] = djr[j] if p < 0 else d[p] + wr[p] @ (djr[j] - djr[p])
    return d


def _linearized_anchors(model, world_rot, beta_lin):
    """Anchor positions as an affine map of the unknowns.

    Returns (p0 (A,3), d_delta (A,K,3,3), d_beta (A,S,3)) so that
        P = p0 + sum_k d_delta[:,k] @ delta_k + d_beta . (beta - beta_lin) + t
    for anchors A = model.anchor_indices.
    """
    idx = model.anchor_indices
    verts = shape_blend(model, beta_lin)
    jr = model.joint_regressor @ verts
    wp = _chain_positions(model, world_rot, jr)
    w = model.blend_weights[:, idx]                       # (K,A)
    local = verts[idx][None, :, :] - jr[:, None, :]       # (K,A,3)
    rot_local = np.einsum("kij,kaj->kai", world_rot, local)
    p0 = np.einsum("ka,kai->ai", w, rot_local) + w.T @ wp

    n_a = len(idx)
    k = model.n_joints
    d_delta = np.zeros((n_a, k, 3, 3))
    for kk in range(k):
        for a in range(n_a):
            # (I + [d]x) r = r - [r]x d
            d_delta[a, kk] = -w[kk, a] * _skew(rot_local[kk, a])
    # joint positions also move when an ancestor's rotation is corrected:
    # wp_j = wp_par + dR_par W_par (jr_j - jr_par), so each parent delta
    # contributes -[W_par (jr_j - jr_par)]x down its whole subtree
    dwp = np.zeros((k, k, 3, 3))        # d wp_j / d delta_a
    for j in range(k):
        p = int(model.parents[j])
        if p >= 0:
            dwp[j] = dwp[p]
            dwp[j, p] += -_skew(world_rot[p] @ (jr[j] - jr[p]))
    d_delta += np.einsum("ja,jkim->akim", w, dwp)

    s = model.n_shape
    d_beta = np.zeros((n_a, s, 3))
    for ss in range(s):
        dv = model.shape_basis[ss].reshape(-1, 3)
        djr = model.joint_regressor @ dv
        dwp = _chain_directions(model, world_rot, djr)
        dlocal = dv[idx][None, :, :] - djr[:, None, :]
        drot = np.einsum("kij,kaj->kai", world_rot, dlocal)
        d_beta[:, ss, :] = np.einsum("ka,kai->ai", w, drot) + w.T @ dwp
    return p0, d_delta, d_beta


def _dlt_rows(obs: Observation, p0, d_delta, d_beta, beta_lin, weights):
    """Weighted DLT rows for one view: returns (J (2A,D), r (2A,))."""
    n_a, k = d_delta.shape[:2]
    s = d_beta.shape[1]
    dim = 3 * k + s + 3
    kk = obs.intrinsics
    re, te = obs.extrinsics_r, obs.extrinsics_t

    # camera-frame affine pieces: Q = re P + te
    q0 = p0 @ re.T + te
    qd = np.einsum("ij,akjl->akil", re, d_delta).reshape(n_a, k, 3, 3)
    qb = d_beta @ re.T
    qt = re                                              # dQ/dt

    jrows = np.zeros((2 * n_a, dim))
    rrows = np.zeros(2 * n_a)
    for a in range(n_a):
        u, v = obs.anchors_2d[a]
        for c, row in enumerate((u * kk[2] - kk[0], v * kk[2] - kk[1])):
            m, const = row[:3], row[3]
            jr_ = np.zeros(dim)
            for j in range(k):
                jr_[3 * j:3 * j + 3] = m @ qd[a, j]
            jr_[3 * k:3 * k + s] = m @ qb[a].T
            jr_[3 * k + s:] = m @ qt
            # residual convention: J x = r at the solution, with beta
            # measured absolutely (fold the lin point into the rhs)
            rhs = -(m @ q0[a] + const) + jr_[3 * k:3 * k + s] @ beta_lin
            wgt = weights[a]
            jrows[2 * a + c] = wgt * jr_
            rrows[2 * a + c] = wgt * rhs
    return jrows, rrows


def assemble_system(model, pose_init, beta_lin_point, observations, cfg: SolveConfig):
    """Normal equations for the stacked weighted system.

    Unknown layout: (delta_1..delta_K, beta, t).  Returns (A, b, layout)
    with A = J^T J and b = J^T r.
    """
    if not observations:
        raise ValueError("need at least one observation")
    k, s = model.n_joints, model.n_shape
    dim = 3 * k + s + 3
    beta_lin = np.asarray(beta_lin_point, float)
    world = _world_rotations(model, pose_init)
    p0, d_delta, d_beta = _linearized_anchors(model, world, beta_lin)

    blocks_j, blocks_r = [], []
    n_data_rows = 0
    for obs in observations:
        wts = anchor_weights(obs.laplace_scale, obs.aux_weight)
        j, r = _dlt_rows(obs, p0, d_delta, d_beta, beta_lin, wts)
        keep = np.repeat(wts > 0, 2)
        blocks_j.append(j[keep])
        blocks_r.append(r[keep])
        n_data_rows += int(keep.sum())

    n_reg = (s if cfg.omega_beta > 0 else 0) + (3 * k if cfg.gamma > 0 else 0)
    if n_data_rows + n_reg < dim:
        raise UnderdeterminedError(
            f"{n_data_rows + n_reg} rows for {dim} unknowns")

    if cfg.omega_beta > 0:
        prior = np.zeros(s) if cfg.beta_prior is None else np.asarray(cfg.beta_prior, float)
        jb = np.zeros((s, dim))
        jb[:, 3 * k:3 * k + s] = np.sqrt(cfg.omega_beta) * np.eye(s)
        blocks_j.append(jb)
        blocks_r.append(np.sqrt(cfg.omega_beta) * prior)
    if cfg.gamma > 0:
        jg = np.zeros((3 * k, dim))
        jg[:, :3 * k] = np.sqrt(cfg.gamma) * np.eye(3 * k)
        blocks_j.append(jg)
        blocks_r.append(np.zeros(3 * k))

    jmat = np.vstack(blocks_j)
    rvec = np.concatenate(blocks_r)
    layout = {"delta": (0, 3 * k), "beta": (3 * k, 3 * k + s),
              "t": (3 * k + s, dim)}
    return jmat.T @ jmat, jmat.T @ rvec, layout


def _chol_solve(a, b):
    try:
        c = np.linalg.cholesky(a)
    except np.linalg.LinAlgError:
        try:
            c = np.linalg.cholesky(a + JITTER * np.eye(len(a)))
        except np.linalg.LinAlgError:
            raise SolverFailure("normal equations not SPD even with jitter")
    y = np.linalg.solve(c, b)
    return np.linalg.solve(c.T, y)


def reproject(model, world_rot, beta, translation, obs: Observation):
    """Pixel positions of the anchors under the given state (exact FK)."""
    verts = shape_blend(model, beta)
    jr = model.joint_regressor @ verts
    wp = _chain_positions(model, world_rot, jr)
    idx = model.anchor_indices
    w = model.blend_weights[:, idx]
    local = verts[idx][None, :, :] - jr[:, None, :]
    moved = np.einsum("kij,kaj->kai", world_rot, local) + wp[:, None, :]
    pts = np.einsum("ka,kai->ai", w, moved) + translation
    cam = pts @ obs.extrinsics_r.T + obs.extrinsics_t
    hom = np.concatenate([cam, np.ones((len(cam), 1))], axis=1)
    proj = hom @ obs.intrinsics.T
    return proj[:, :2] / proj[:, 2:3]


def _residual_report(model, world_rot, beta, t, observations):
    per = []
    wacc, sqacc = 0.0, 0.0
    for obs in observations:
        wts = anchor_weights(obs.laplace_scale, obs.aux_weight)
        px = reproject(model, world_rot, beta, t, obs)
        err = np.linalg.norm(px - obs.anchors_2d, axis=1)
        per.append(err)
        sqacc += float((wts * err ** 2).sum())
        wacc += float(wts.sum())
    rms = np.sqrt(sqacc / max(wacc, 1e-30))
    return rms, np.concatenate(per)


def _solve(model, pose_init, observations, cfg):
    k, s = model.n_joints, model.n_shape
    beta_lin = (np.zeros(s) if cfg.beta_prior is None
                else np.asarray(cfg.beta_prior, float))
    world = _world_rotations(model, pose_init)
    prev_rms = np.inf
    increases = 0
    total_delta = np.zeros((k, 3))
    n_lin = 0
    while True:
        pose_cur = _relative_from_world(model, world)
        a, b, layout = assemble_system(model, pose_cur, beta_lin, observations, cfg)
        x = _chol_solve(a, b)
        delta = x[:3 * k].reshape(k, 3)
        beta = x[3 * k:3 * k + s]
        t = x[3 * k + s:]
        world_new = np.stack([axis_angle_exp(delta[j]).matrix() @ world[j]
                              for j in range(k)])
        rms, per = _residual_report(model, world_new, beta, t, observations)
        total_delta += delta
        world = world_new
        if rms > prev_rms:
            increases += 1
            if increases >= 2:
                raise DivergenceError("residual increased on two consecutive relinearizations")
        else:
            increases = 0
        prev_rms = rms
        if n_lin >= cfg.max_relinearizations or np.abs(delta).max() < 1e-6:
            break
        n_lin += 1
        beta_lin = beta
    pose = _relative_from_world(model, world)
    return SolveResult(
        delta_vectors=total_delta,
        delta_rotations=[axis_angle_exp(total_delta[j]) for j in range(k)],
        rotations=[Rotation.from_matrix(world[j]) for j in range(k)],
        pose=pose,
        beta=beta,
        translation=t,
        weighted_rms_residual=rms,
        per_anchor_residuals=per,
        n_relinearizations=n_lin,
    )


def solve_single_view(model, pose_init, obs: Observation, cfg: SolveConfig) -> SolveResult:
    return _solve(model, pose_init, [obs], cfg)


def solve_multi_view(model, per_view_poses, views, cfg: SolveConfig) -> SolveResult:
    """Shared (delta, beta, t) over stacked views.

    The initial pose is the per-joint chordal mean of the per-view
    estimates after each view's root rotation is carried into the common
    frame by the transposed extrinsic rotation; non-root joints are
    parent-relative and need no mapping.
    """
    if not views:
        raise ValueError("need at least one view")
    if len(per_view_poses) != len(views):
        raise ValueError("one pose set per view required")
    if len(views) == 1:
        return _solve(model, per_view_poses[0], views, cfg)
    k = model.n_joints
    pose_init = []
    for j in range(k):
        if j == 0:
            cands = [Rotation.from_matrix(v.extrinsics_r.T @ p[0].matrix())
                     for p, v in zip(per_view_poses, views)]
        else:
            cands = [p[j] for p in per_view_poses]
        pose_init.append(rotation_mean(cands))
    return _solve(model, pose_init, views, cfg)


def laplacian_nll(pred, scale, gt):
    """Mean Laplace negative log-likelihood, log(2w) + |err|_1 / w.

    Accepts tape nodes for pred/scale; gt is plain data.
    """
    gt = np.asarray(gt, float)
    sval = ag.as_array(scale)
    if (sval <= 0).any():
        raise ValueError("scale must be positive")
    l1 = ag.reduce_sum(ag.absolute(pred - gt), axis=1)
    per = ag.log(2.0 * scale) + l1 / scale
    return ag.mean(per)
