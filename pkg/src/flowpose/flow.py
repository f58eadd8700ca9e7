"""Conditional normalizing flow on SO(3)^K built from Möbius couplings and
conditioner-driven rotation layers.

Direction convention: the analytic Möbius maps run pose -> base, which is the
direction log-probabilities (and therefore training gradients) need. Sampling
runs base -> pose by numerically inverting each coupling with bisection; no
gradient flows through the bisection.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ag
from .distributions import (DiagGaussian, ProjectedIsoGaussian,
                            pig_logpdf_from_qdot, pig_sample_batch)
from .nets import ParamStore, mlp_apply, mlp_init
from .rotation import InvalidFrameError, Rotation, matrix_to_quat

__all__ = [
    "FlowConfig", "FlowModel", "PoseSample", "NonConvergenceError",
    "constrain_omega", "mobius_map", "mobius_forward", "mobius_inverse",
]

OMEGA_MARGIN = 1e-3
BISECT_EPS = 1e-4
BISECT_MAX_ITER = 64


class NonConvergenceError(RuntimeError):
    pass


def constrain_omega(raw):
    """Map an unconstrained 3-vector into the open unit ball, radius <= 1-1e-3."""
    raw = np.asarray(raw, dtype=np.float64)
    n = np.linalg.norm(raw)
    if n == 0.0:
        return np.zeros(3)
    return raw * (np.tanh(n) * (1.0 - OMEGA_MARGIN) / n)


def _constrain_omega_batch(ox, oy, oz):
    n = ag.sqrt(ox * ox + oy * oy + oz * oz + 1e-30)
    s = ag.tanh(n) * ((1.0 - OMEGA_MARGIN) / n)
    return ox * s, oy * s, oz * s


def mobius_map(c: complex, omega: complex) -> complex:
    """The unit-circle Möbius transform (c + w) / (w* c + 1)."""
    return (c + omega) / (np.conj(omega) * c + 1.0)


def _project(vx_cols, u):
    """<omega_j, u> for omega components (B,k) and unit vectors u (B,3)."""
    ox, oy, oz = vx_cols
    return (ox * u[:, 0:1] + oy * u[:, 1:2] + oz * u[:, 2:3]
            if not isinstance(u, ag.Node)
            else ox * ag.take(u, (slice(None), slice(0, 1)))
            + oy * ag.take(u, (slice(None), slice(1, 2)))
            + oz * ag.take(u, (slice(None), slice(2, 3))))


def _col(u, j):
    if isinstance(u, ag.Node):
        return ag.take(u, (slice(None), slice(j, j + 1)))
    return u[:, j:j + 1]


def _mobius_fwd_batch(held, moving, ox, oy, oz, w):
    """Convex-combination Möbius step. All rows independent.

    held, moving: (B,3) orthonormal pairs; o*: (B,k) constrained omegas;
    w: (B,k) simplex weights. Returns (moved (B,3), logdet (B,)).

    theta_j = 2*arg(1 + c_j) with c_j the omega projection onto the
    (moving, u3) plane, and the angle derivative of the full map is
    (1-|c_j|^2)/|1+c_j|^2, both evaluated at the input point.
    """
    u3 = ag.cross(moving, held)
    cre = _project((ox, oy, oz), moving)
    cim = _project((ox, oy, oz), u3)
    one_re = 1.0 + cre
    theta_j = 2.0 * ag.atan2(cim, one_re)
    denom = one_re * one_re + cim * cim
    d_j = (1.0 - (cre * cre + cim * cim)) / denom
    theta = ag.reduce_sum(w * theta_j, axis=1, keepdims=True)
    logdet = ag.log(ag.reduce_sum(w * d_j, axis=1))
    moved = ag.cos(theta) * moving + ag.sin(theta) * u3
    return moved, logdet


def _mobius_inv_batch(moved, held, ox, oy, oz, w,
                      eps=BISECT_EPS, max_iter=BISECT_MAX_ITER):
    """Bisection inverse of the convex Möbius step (numpy arrays only).

    Returns (moving, per-row iteration counts)."""
    moved = np.asarray(moved, float)
    held = np.asarray(held, float)
    u3 = np.cross(moved, held)
    c0re = ox * moved[:, 0:1] + oy * moved[:, 1:2] + oz * moved[:, 2:3]
    c0im = ox * u3[:, 0:1] + oy * u3[:, 1:2] + oz * u3[:, 2:3]
    n = moved.shape[0]
    lo = np.full(n, -np.pi)
    hi = np.full(n, np.pi)
    iters = np.zeros(n, dtype=int)
    done = np.zeros(n, dtype=bool)
    root = np.zeros(n)
    for it in range(1, max_iter + 1):
        mid = 0.5 * (lo + hi)
        cm, sm = np.cos(mid)[:, None], np.sin(mid)[:, None]
        cre = c0re * cm + c0im * sm      # c0 * exp(-i M)
        cim = c0im * cm - c0re * sm
        tau = (w * 2.0 * np.arctan2(cim, 1.0 + cre)).sum(axis=1)
        h = tau + mid
        newly = (np.abs(h) < eps) & ~done
        iters[newly] = it
        root[newly] = mid[newly]
        done |= newly
        if done.all():
            break
        neg = h < 0
        lo = np.where(neg, mid, lo)
        hi = np.where(neg, hi, mid)
    if not done.all():
        raise NonConvergenceError("bisection failed to reach tolerance")
    moving = moved * np.cos(root)[:, None] + u3 * np.sin(root)[:, None]
    return moving, iters


def _check_frame(held, moving):
    held = np.asarray(held, float)
    moving = np.asarray(moving, float)
    if (abs(np.linalg.norm(held) - 1) > 1e-8 or abs(np.linalg.norm(moving) - 1) > 1e-8
            or abs(float(held @ moving)) > 1e-8):
        raise InvalidFrameError("held/moving must be orthonormal")
    return held, moving


def mobius_forward(held, moving, omegas, weights):
    """Single-sample spec entry point; see _mobius_fwd_batch."""
    held, moving = _check_frame(held, moving)
    omegas = np.asarray(omegas, float).reshape(-1, 3)
    w = np.asarray(weights, float).reshape(1, -1)
    moved, logdet = _mobius_fwd_batch(
        held[None, :], moving[None, :],
        omegas[None, :, 0], omegas[None, :, 1], omegas[None, :, 2], w)
    return moved[0], float(logdet[0])


def mobius_inverse(moved, held, omegas, weights):
    held, moved = _check_frame(held, moved)
    omegas = np.asarray(omegas, float).reshape(-1, 3)
    w = np.asarray(weights, float).reshape(1, -1)
    moving, _ = _mobius_inv_batch(
        moved[None, :], held[None, :],
        omegas[None, :, 0], omegas[None, :, 1], omegas[None, :, 2], w)
    return moving[0]


@dataclass
class FlowConfig:
    n_joints: int
    context_dim: int
    shape_dim: int
    k_transforms: int = 16
    n_sets: int = 4          # coupling set + rotation layer pairs
    channels: int = 256
    blocks: int = 2
    embed_dim: int = 8
    kappa: float = 2.0

    def to_json(self):
        return dict(self.__dict__)

    @staticmethod
    def from_json(d):
        return FlowConfig(**d)


@dataclass
class PoseSample:
    joint_rotations: list
    global_rotation: Rotation
    shape: np.ndarray
    log_prob: float


_EYE9 = np.eye(3).ravel()


class FlowModel:
    """All learnable parameters of the conditional flow plus its heads.

    Conditioners are shared across joints; joint identity enters through a
    learned per-joint embedding concatenated to the context vector.
    """

    def __init__(self, cfg: FlowConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.params = ParamStore()
        ctx_e = cfg.context_dim + cfg.embed_dim
        self.params.add("embed", 0.1 * rng.normal(size=(cfg.n_joints, cfg.embed_dim)))
        d_out = 4 * cfg.k_transforms
        for i in range(cfg.n_sets):
            mlp_init(self.params, f"cpl{i}a", 3 + ctx_e, d_out, cfg.channels, cfg.blocks, rng)
            mlp_init(self.params, f"cpl{i}b", 3 + ctx_e, d_out, cfg.channels, cfg.blocks, rng)
            mlp_init(self.params, f"rot{i}", ctx_e, 9, cfg.channels, cfg.blocks, rng,
                     final_bias=_EYE9)
        mlp_init(self.params, "head_rot", cfg.context_dim, 9, cfg.channels, cfg.blocks,
                 rng, final_bias=_EYE9)
        mlp_init(self.params, "head_shape", cfg.context_dim, 2 * cfg.shape_dim,
                 cfg.channels, cfg.blocks, rng)
        self.base = ProjectedIsoGaussian(Rotation.identity(), cfg.kappa)

    # ---- parameter access -------------------------------------------------
    def param_values(self):
        return self.params.values()

    def leaves(self):
        return self.params.leaves()

    # ---- conditioners ------------------------------------------------------
    def _coupling_cond(self, p, name, held, ctx):
        k = self.cfg.k_transforms
        x = ag.concat([held, ctx], axis=1)
        out = mlp_apply(p, name, x, self.cfg.blocks)
        ox = _col_range(out, 0, k)
        oy = _col_range(out, k, 2 * k)
        oz = _col_range(out, 2 * k, 3 * k)
        ox, oy, oz = _constrain_omega_batch(ox, oy, oz)
        w = ag.softmax(_col_range(out, 3 * k, 4 * k), axis=1)
        return ox, oy, oz, w

    def _rotation_q(self, p, i, ctx):
        out = mlp_apply(p, f"rot{i}", ctx, self.cfg.blocks)
        return ag.special_orthogonalize_op(out)  # (B,9) rows of rotations

    # ---- layer maps (pose -> base is "forward") ----------------------------
    def _coupling_forward(self, p, i, u1, u2, ctx):
        ox, oy, oz, w = self._coupling_cond(p, f"cpl{i}a", u1, ctx)
        u2n, ld_a = _mobius_fwd_batch(u1, u2, ox, oy, oz, w)
        ox, oy, oz, w = self._coupling_cond(p, f"cpl{i}b", u2n, ctx)
        u1n, ld_b = _mobius_fwd_batch(u2n, u1, ox, oy, oz, w)
        return u1n, u2n, ld_a + ld_b

    def _coupling_inverse(self, p, i, u1, u2, ctx):
        ox, oy, oz, w = self._coupling_cond(p, f"cpl{i}b", u2, ctx)
        u1p, it1 = _mobius_inv_batch(u1, u2, ag.as_array(ox), ag.as_array(oy),
                                     ag.as_array(oz), ag.as_array(w))
        ox, oy, oz, w = self._coupling_cond(p, f"cpl{i}a", u1p, ctx)
        u2p, it2 = _mobius_inv_batch(u2, u1p, ag.as_array(ox), ag.as_array(oy),
                                     ag.as_array(oz), ag.as_array(w))
        return u1p, u2p, np.maximum(it1, it2)

    @staticmethod
    def _apply_q(q9, u, transpose=False):
        cols = []
        for i in range(3):
            acc = None
            for j in range(3):
                idx = j * 3 + i if transpose else i * 3 + j
                term = _col(q9, idx) * _col(u, j) if isinstance(q9, ag.Node) or isinstance(u, ag.Node) \
                    else q9[:, idx:idx + 1] * u[:, j:j + 1]
                acc = term if acc is None else acc + term
            cols.append(acc)
        return ag.concat(cols, axis=1) if any(isinstance(c, ag.Node) for c in cols) \
            else np.concatenate(cols, axis=1)

    def _to_base(self, p, u1, u2, ctx, ctx_constant=False):
        """Analytic normalizing pass over all layers; returns (u1, u2, logdet)."""
        logdet = None
        for i in range(self.cfg.n_sets):
            u1, u2, ld = self._coupling_forward(p, i, u1, u2, ctx)
            logdet = ld if logdet is None else logdet + ld
            q9 = self._rotation_q(p, i, _first_row(ctx) if ctx_constant else ctx)
            u1 = self._apply_q(q9, u1)
            u2 = self._apply_q(q9, u2)
        return u1, u2, logdet

    def _from_base(self, pv, u1, u2, ctx, ctx_constant=False):
        """Numeric generative pass (bisection); returns (u1, u2, max iterations)."""
        worst = np.zeros(u1.shape[0], dtype=int)
        for i in reversed(range(self.cfg.n_sets)):
            q9 = ag.as_array(self._rotation_q(pv, i, ctx[0:1] if ctx_constant else ctx))
            u1 = self._apply_q(q9, u1, transpose=True)
            u2 = self._apply_q(q9, u2, transpose=True)
            u1, u2, its = self._coupling_inverse(pv, i, u1, u2, ctx)
            worst = np.maximum(worst, its)
        return u1, u2, worst

    # ---- public spec operations --------------------------------------------
    def _ctx_row(self, pv, context, joint=0):
        ctx = np.asarray(context, float)
        return np.concatenate([ctx, ag.as_array(pv["embed"])[joint]])[None, :]

    def coupling_block(self, r: Rotation, context, set_index=0, joint=0):
        """(r_out, logdet) for one coupling set, single sample, numpy path."""
        pv = self.param_values()
        m = r.matrix()
        u1, u2, ld = self._coupling_forward(
            pv, set_index, m[:, 0][None, :], m[:, 1][None, :],
            self._ctx_row(pv, context, joint))
        return _rotation_from_cols(u1[0], u2[0]), float(ld[0])

    def coupling_block_inverse(self, r: Rotation, context, set_index=0, joint=0):
        pv = self.param_values()
        m = r.matrix()
        u1, u2, _ = self._coupling_inverse(
            pv, set_index, m[:, 0][None, :], m[:, 1][None, :],
            self._ctx_row(pv, context, joint))
        return _rotation_from_cols(u1[0], u2[0])

    def rotation_layer(self, r: Rotation, context, set_index=0, joint=0):
        """(Q r, logdet = 0) with Q produced by the rotation conditioner."""
        pv = self.param_values()
        q9 = ag.as_array(self._rotation_q(pv, set_index,
                                          self._ctx_row(pv, context, joint)))
        return matrix_to_quat(q9[0].reshape(3, 3) @ r.matrix()), 0.0

    def _joint_rows(self, p, context_rows):
        """Tile per-scene contexts into per-(scene, joint) conditioner rows."""
        K = self.cfg.n_joints
        ctx = np.asarray(context_rows, float)
        if ctx.ndim == 1:
            ctx = ctx[None, :]
        B = ctx.shape[0]
        ctx_rep = np.repeat(ctx, K, axis=0)
        emb = p["embed"]
        if isinstance(emb, ag.Node):
            reps = [emb] * B
            emb_rep = ag.concat(reps, axis=0) if B > 1 else emb
            return ag.concat([ag.leaf(ctx_rep), emb_rep], axis=1)
        return np.concatenate([ctx_rep, np.tile(emb, (B, 1))], axis=1)

    def log_prob_rows(self, p, u1, u2, ctx_rows, ctx_constant=False):
        """Per-row joint log-density: base log-pdf at the image plus logdet."""
        u1b, u2b, logdet = self._to_base(p, u1, u2, ctx_rows, ctx_constant)
        u3b = ag.cross(u1b, u2b)
        tr = (_col(u1b, 0) + _col(u2b, 1) + _col(u3b, 2))
        qdot2 = ag.clip((tr + 1.0) * 0.25, 0.0, 1.0)
        qdot = ag.sqrt(qdot2 + 1e-18)
        lp = pig_logpdf_from_qdot(qdot, self.cfg.kappa)
        lp = ag.reshape(lp, (-1,)) if isinstance(lp, ag.Node) else lp.reshape(-1)
        return lp + logdet

    def flow_log_prob(self, pose_rotations, context):
        """Total log-density (nats) of K joint rotations given one context."""
        pv = self.param_values()
        u1, u2 = _pose_cols(pose_rotations)
        ctx = self._joint_rows(pv, context)
        lp = self.log_prob_rows(pv, u1, u2, ctx, ctx_constant=True)
        return float(np.sum(ag.as_array(lp)))

    def flow_sample(self, context, n, rng, include_mode=False):
        """Draw n PoseSamples for one context (optionally prepend the mode)."""
        pv = self.param_values()
        K = self.cfg.n_joints
        base = ProjectedIsoGaussian(Rotation.identity(), self.cfg.kappa)
        quats = pig_sample_batch(base, n * K, rng)
        if include_mode:
            quats = np.concatenate([np.tile([1.0, 0, 0, 0], (K, 1)), quats], axis=0)
        total = quats.shape[0] // K
        mats = _quat_to_matrix_batch(quats)
        u1, u2 = mats[:, :, 0], mats[:, :, 1]
        ctx = self._joint_rows(pv, np.tile(np.asarray(context, float), (total, 1)))
        u1, u2, _ = self._from_base(pv, u1, u2, ctx, ctx_constant=True)
        lp_rows = ag.as_array(self.log_prob_rows(pv, u1, u2, ctx, ctx_constant=True))
        lp = lp_rows.reshape(total, K).sum(axis=1)
        g = self.global_rotation_head(context)
        shape_dist = self.shape_head(context)
        samples = []
        for s in range(total):
            rots = [_rotation_from_cols(u1[s * K + j], u2[s * K + j]) for j in range(K)]
            beta = shape_dist.mean if (include_mode and s == 0) \
                else shape_dist.mean + np.exp(shape_dist.log_std) * rng.normal(size=self.cfg.shape_dim)
            samples.append(PoseSample(rots, g, beta, float(lp[s])))
        return samples

    def mode_sample(self, context):
        return self.flow_sample(context, 0, np.random.default_rng(0), include_mode=True)[0]

    def global_rotation_head(self, context, p=None):
        p = p or self.param_values()
        ctx = np.asarray(context, float)[None, :]
        out = ag.as_array(mlp_apply(p, "head_rot", ctx, self.cfg.blocks))
        return matrix_to_quat(ag._special_orthogonalize_value(out[0].reshape(3, 3)))

    def shape_head(self, context, p=None):
        p = p or self.param_values()
        ctx = np.asarray(context, float)[None, :]
        out = ag.as_array(mlp_apply(p, "head_shape", ctx, self.cfg.blocks))[0]
        d = self.cfg.shape_dim
        return DiagGaussian(out[:d], out[d:])


def _col_range(x, a, b):
    if isinstance(x, ag.Node):
        return ag.take(x, (slice(None), slice(a, b)))
    return x[:, a:b]


def _first_row(ctx):
    if isinstance(ctx, ag.Node):
        return ag.take(ctx, (slice(0, 1), slice(None)))
    return ctx[0:1]


def _rotation_from_cols(u1, u2):
    u1 = u1 / np.linalg.norm(u1)
    u2 = u2 - (u2 @ u1) * u1
    u2 = u2 / np.linalg.norm(u2)
    return matrix_to_quat(np.column_stack([u1, u2, np.cross(u1, u2)]))


def _pose_cols(rotations):
    mats = np.stack([r.matrix() for r in rotations])
    return mats[:, :, 0], mats[:, :, 1]


def _quat_to_matrix_batch(q):
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    m = np.empty((q.shape[0], 3, 3))
    m[:, 0, 0] = 1 - 2 * (y * y + z * z)
    m[:, 0, 1] = 2 * (x * y - w * z)
    m[:, 0, 2] = 2 * (x * z + w * y)
    m[:, 1, 0] = 2 * (x * y + w * z)
    m[:, 1, 1] = 1 - 2 * (x * x + z * z)
    m[:, 1, 2] = 2 * (y * z - w * x)
    m[:, 2, 0] = 2 * (x * z - w * y)
    m[:, 2, 1] = 2 * (y * z + w * x)
    m[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return m
