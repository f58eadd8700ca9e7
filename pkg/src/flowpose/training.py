"""Two-phase training of the conditional flow on synthetic scenes,
plus the fixed-context multimodal toy fit.

Phase 1 trains by likelihood: pose NLL through the flow, shape NLL
through the diagonal-Gaussian head, squared geodesic error of the
global-rotation head, and the Laplace observation loss of the
anchor/uncertainty head.  Phase 2 adds L1 losses on the mode sample's
3D joints and projected anchors; the mode pose itself is obtained by
bisection and is treated as a constant, so these terms steer the shape
head.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ag
from .body import BodyModelDef
from .distributions import ProjectedIsoGaussian, pig_sample_batch
from .flow import FlowConfig, FlowModel, _pose_cols, _quat_to_matrix_batch
from .nets import Adam, GradientDescent, ParamStore, mlp_apply, mlp_init
from .rotation import Rotation, geodesic_distance
from .solver import _world_rotations, _linearized_anchors, _chain_positions, _chain_directions
from .body import shape_blend
from .synth import context_feature_dim


class TrainingAborted(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lambda1: float = 0.01      # Laplace observation loss
    lambda2: float = 0.001     # pose NLL
    lambda3: float = 0.0001    # shape NLL
    lambda4: float = 1.0       # global-rotation geodesic^2
    lambda5: float = 0.1       # phase-2 projected-anchor L1
    lambda6: float = 0.1       # phase-2 mode 3D joint L1
    phase1_epochs: int = 20
    phase2_epochs: int = 5
    lr: float = 1e-3
    batch_size: int = 8
    kappa: float = 2.0
    seed: int = 0
    optimizer: str = "sgd"     # "sgd" (default, clipped) or "adam"
    context_dim: int = 16
    enc_channels: int = 64
    flow_channels: int = 32
    flow_sets: int = 2
    k_transforms: int = 8
    blocks: int = 2

    def __post_init__(self):
        for name in ("lambda1", "lambda2", "lambda3", "lambda4", "lambda5", "lambda6"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if self.kappa <= 0:
            raise ValueError("kappa must be positive")

    def to_json(self):
        return dict(self.__dict__)

    @staticmethod
    def from_json(d):
        return TrainConfig(**d)


def _tile_rows(x, reps):
    """Repeat each row of x `reps` times (works on the tape)."""
    b = ag.as_array(x).shape[0]
    sel = np.zeros((b * reps, b))
    sel[np.arange(b * reps), np.repeat(np.arange(b), reps)] = 1.0
    return ag.matmul(sel, x) if isinstance(x, ag.Node) else sel @ x


def _tile_block(x, times):
    """Stack `times` copies of x (tape-friendly np.tile along rows)."""
    k = ag.as_array(x).shape[0]
    sel = np.zeros((k * times, k))
    sel[np.arange(k * times), np.tile(np.arange(k), times)] = 1.0
    return ag.matmul(sel, x) if isinstance(x, ag.Node) else sel @ x


def joint_context_rows(flow, pdict, ctx):
    """Per-(scene, joint) conditioner rows from per-scene contexts."""
    k = flow.cfg.n_joints
    b = ag.as_array(ctx).shape[0]
    return ag.concat([_tile_rows(ctx, k), _tile_block(pdict["embed"], b)], axis=1)


def _gauss_nll(out, beta_gt, s):
    """Mean diagonal-Gaussian NLL; out is (B, 2S) = (mean, log_std)."""
    mu = ag.take(out, (slice(None), slice(0, s)))
    log_std = ag.clip(ag.take(out, (slice(None), slice(s, 2 * s))), -6.0, 6.0)
    z = (beta_gt - mu) * ag.exp(-log_std)
    per = ag.reduce_sum(log_std + 0.5 * z * z, axis=1) + 0.5 * s * np.log(2 * np.pi)
    return ag.mean(per)


def _geodesic_sq(out9_so3, gt9):
    """Mean squared geodesic distance from (B,9) rotations to GT rows."""
    tr = ag.reduce_sum(out9_so3 * gt9, axis=1)
    c = ag.clip((tr - 1.0) * 0.5, -1.0 + 1e-7, 1.0 - 1e-7)
    th = ag.acos(c)
    return ag.mean(th * th)


def _laplace_obs_loss(pdict, blocks, feats, gt_norm, n_s):
    """Laplace NLL of the anchor/uncertainty head in normalized units."""
    out = mlp_apply(pdict, "obs", feats, blocks)
    pred = ag.take(out, (slice(None), slice(0, 2 * n_s)))
    logw = ag.clip(ag.take(out, (slice(None), slice(2 * n_s, 3 * n_s))), -7.0, 3.0)
    w = ag.exp(logw)
    err = ag.absolute(pred - gt_norm)
    b = ag.as_array(feats).shape[0]
    r = ag.matmul(ag.reshape(err, (b * n_s, 2)), np.ones((2, 1)))
    r = ag.reshape(r, (b, n_s))
    return ag.mean(np.log(2.0) + logw + r / w)


def _scene_tensors(model, dataset):
    """Precompute per-scene GT arrays used every step."""
    feats = np.stack([rec.context_features for rec in dataset])
    u1s, u2s, root9, betas = [], [], [], []
    gt_j = []
    for rec in dataset:
        u1, u2 = _pose_cols(rec.gt_state.pose)
        u1s.append(u1)
        u2s.append(u2)
        root9.append(rec.gt_state.pose[0].matrix().reshape(-1))
        betas.append(rec.gt_state.shape)
    return feats, np.stack(u1s), np.stack(u2s), np.stack(root9), np.stack(betas)


def _mode_shape_losses(flow, model, pdict, dataset, idx, ctx_val, mu_node, rng):
    """Phase-2 terms: L1 of mode-pose 3D joints and projected anchors,
    differentiable in the shape-head mean only (mode pose is constant)."""
    terms_3d, terms_2d = [], []
    for row, i in enumerate(idx):
        rec = dataset[i]
        mode = flow.mode_sample(ctx_val[row])
        world = _world_rotations(model, mode.joint_rotations)
        jr0 = model.joint_regressor @ model.template
        base_j = _chain_positions(model, world, jr0)
        djs = np.stack([_chain_directions(model, world,
                                          model.joint_regressor @ model.shape_basis[s].reshape(-1, 3))
                        for s in range(model.n_shape)])       # (S,K,3)
        mu_i = ag.take(mu_node, (slice(row, row + 1), slice(None)))
        j3d = base_j.reshape(1, -1) + ag.matmul(mu_i, djs.reshape(model.n_shape, -1))
        gt_j = _chain_positions(model, _world_rotations(model, rec.gt_state.pose),
                                model.joint_regressor @ shape_blend(model, rec.gt_state.shape))
        terms_3d.append(ag.mean(ag.absolute(j3d - gt_j.reshape(1, -1))))

        p0, _, d_beta = _linearized_anchors(model, world, np.zeros(model.n_shape))
        pts = p0.reshape(1, -1) + ag.matmul(
            mu_i, np.transpose(d_beta, (1, 0, 2)).reshape(model.n_shape, -1))
        obs = rec.views[0]
        n_a = p0.shape[0]
        pts = ag.reshape(pts, (n_a, 3))
        cam = ag.matmul(pts, obs.extrinsics_r.T) + (obs.extrinsics_t
                                                    + rec.gt_state.translation @ obs.extrinsics_r.T)
        x = ag.take(cam, (slice(None), slice(0, 1)))
        y = ag.take(cam, (slice(None), slice(1, 2)))
        z = ag.take(cam, (slice(None), slice(2, 3)))
        kk = obs.intrinsics
        u = (kk[0, 0] * x) / z + kk[0, 2]
        v = (kk[1, 1] * y) / z + kk[1, 2]
        px = ag.concat([u, v], axis=1)
        terms_2d.append(ag.mean(ag.absolute(px - rec.gt_anchors[0])))
    n = float(len(idx))
    sum3 = terms_3d[0]
    sum2 = terms_2d[0]
    for t3, t2 in zip(terms_3d[1:], terms_2d[1:]):
        sum3 = sum3 + t3
        sum2 = sum2 + t2
    return sum2 / n, sum3 / n


def train(model: BodyModelDef, dataset, cfg: TrainConfig):
    """Returns (flow, extra ParamStore with encoder+obs head, log rows).

    The log is a list of dicts (one per epoch) with every loss term;
    callers serialize it as CSV.
    """
    rng = np.random.default_rng(cfg.seed)
    n_s = len(model.anchor_indices)
    feat_dim = context_feature_dim(n_s)
    fcfg = FlowConfig(n_joints=model.n_joints, context_dim=cfg.context_dim,
                      shape_dim=model.n_shape, k_transforms=cfg.k_transforms,
                      n_sets=cfg.flow_sets, channels=cfg.flow_channels,
                      blocks=cfg.blocks, kappa=cfg.kappa)
    flow = FlowModel(fcfg, rng)
    extra = ParamStore()
    mlp_init(extra, "enc", feat_dim, cfg.context_dim, cfg.enc_channels,
             cfg.blocks, rng, zero_final=False)
    mlp_init(extra, "obs", feat_dim, 3 * n_s, cfg.enc_channels, cfg.blocks, rng)

    leaves = flow.params.leaves() + extra.leaves()
    names = flow.params.names() + extra.names()
    pdict = dict(zip(names, leaves))
    opt = (Adam if cfg.optimizer == "adam" else GradientDescent)(leaves, cfg.lr)

    feats_all, u1_all, u2_all, root9_all, beta_all = _scene_tensors(model, dataset)
    # normalized GT (noise-free) anchors for the observation head
    gt_norm_all = []
    for rec in dataset:
        obs = rec.views[0]
        f, c = obs.intrinsics[0, 0], obs.intrinsics[:2, 2]
        gt_norm_all.append(((rec.gt_anchors[0] - c) / f).reshape(-1))
    gt_norm_all = np.stack(gt_norm_all)

    n = len(dataset)
    k = model.n_joints
    log_rows = []
    total_epochs = cfg.phase1_epochs + cfg.phase2_epochs
    for epoch in range(total_epochs):
        phase2 = epoch >= cfg.phase1_epochs
        order = rng.permutation(n)
        sums = {"lnll": 0.0, "pose_nll": 0.0, "shape_nll": 0.0,
                "geo": 0.0, "l2d": 0.0, "l3d": 0.0, "total": 0.0}
        n_batches = 0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            b = len(idx)
            for l in leaves:
                l.grad = None
            ctx = mlp_apply(pdict, "enc", feats_all[idx], cfg.blocks)
            ctx_rows = joint_context_rows(flow, pdict, ctx)
            u1 = u1_all[idx].reshape(b * k, 3)
            u2 = u2_all[idx].reshape(b * k, 3)
            lp = flow.log_prob_rows(pdict, u1, u2, ctx_rows)
            pose_nll = -ag.reduce_sum(lp) / float(b)
            shape_out = mlp_apply(pdict, "head_shape", ctx, cfg.blocks)
            shape_nll = _gauss_nll(shape_out, beta_all[idx], model.n_shape)
            rot_out = ag.special_orthogonalize_op(
                mlp_apply(pdict, "head_rot", ctx, cfg.blocks))
            geo = _geodesic_sq(rot_out, root9_all[idx])
            lnll = _laplace_obs_loss(pdict, cfg.blocks, feats_all[idx],
                                     gt_norm_all[idx], n_s)
            loss = (cfg.lambda1 * lnll + cfg.lambda2 * pose_nll
                    + cfg.lambda3 * shape_nll + cfg.lambda4 * geo)
            l2d_v = l3d_v = 0.0
            if phase2 and (cfg.lambda5 > 0 or cfg.lambda6 > 0):
                mu = ag.take(shape_out, (slice(None), slice(0, model.n_shape)))
                l2d, l3d = _mode_shape_losses(flow, model, pdict, dataset, idx,
                                              ag.as_array(ctx), mu, rng)
                loss = loss + cfg.lambda5 * l2d + cfg.lambda6 * l3d
                l2d_v, l3d_v = float(ag.as_array(l2d)), float(ag.as_array(l3d))
            lv = float(ag.as_array(loss))
            if not np.isfinite(lv):
                raise TrainingAborted(
                    f"non-finite loss at epoch {epoch} (pose_nll="
                    f"{float(ag.as_array(pose_nll)):.3f})")
            ag.backward(loss)
            opt.step()
            sums["lnll"] += float(ag.as_array(lnll))
            sums["pose_nll"] += float(ag.as_array(pose_nll))
            sums["shape_nll"] += float(ag.as_array(shape_nll))
            sums["geo"] += float(ag.as_array(geo))
            sums["l2d"] += l2d_v
            sums["l3d"] += l3d_v
            sums["total"] += lv
            n_batches += 1
        row = {"epoch": epoch, "phase": 2 if phase2 else 1}
        row.update({kk: vv / n_batches for kk, vv in sums.items()})
        log_rows.append(row)
    return flow, extra, log_rows


def log_to_csv(log_rows):
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(log_rows[0].keys()))
    writer.writeheader()
    for row in log_rows:
        writer.writerow(row)
    return buf.getvalue()


def make_encoder(extra: ParamStore, blocks):
    """Closure mapping raw context features to the flow's context vector."""
    def encode(feat):
        vals = extra.values()
        out = mlp_apply(vals, "enc", np.asarray(feat, float)[None, :], blocks)
        return np.asarray(out)[0]
    return encode


# ---------------------------------------------------------------------------
# fixed-context toy distribution fit

def _quat_mul_batch(a, b):
    w1, x1, y1, z1 = a[:, 0], a[:, 1], a[:, 2], a[:, 3]
    w2, x2, y2, z2 = b[:, 0], b[:, 1], b[:, 2], b[:, 3]
    return np.stack([w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
                     w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
                     w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
                     w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2], axis=1)


def sample_targets(targets, n, noise_kappa, rng):
    """Rotations near the target modes: mode composed with pig noise."""
    base = ProjectedIsoGaussian(Rotation.identity(), noise_kappa)
    noise = pig_sample_batch(base, n, rng)
    which = rng.integers(len(targets), size=n)
    modes = np.stack([t.q for t in targets])[which]
    return _quat_mul_batch(modes, noise)


def fit_toy_distribution(targets, flow_cfg=None, steps=4000, batch=128,
                         lr=1e-3, noise_kappa=24.0, seed=0,
                         report_samples=10000, capture_deg=20.0,
                         callback=None):
    """Fit a fixed-context flow to a small multimodal rotation mixture.

    Returns (flow, report) where the report carries per-mode captured
    mass among report_samples draws, the fraction near any mode, and
    mean NLL before/after.
    """
    rng = np.random.default_rng(seed)
    cfg = flow_cfg or FlowConfig(n_joints=1, context_dim=1, shape_dim=1,
                                 k_transforms=16, n_sets=4, channels=64,
                                 blocks=2, embed_dim=4, kappa=1.0)
    flow = FlowModel(cfg, rng)
    leaves = flow.params.leaves()
    pdict = dict(zip(flow.params.names(), leaves))
    opt = Adam(leaves, lr)
    context = np.zeros(cfg.context_dim)

    def nll_of(quats, p):
        mats = _quat_to_matrix_batch(quats)
        rows = joint_context_rows(flow, p, np.tile(context, (len(quats), 1)))
        # the context is one fixed vector, so the rotation layers need a
        # single conditioner row rather than one SVD per sample
        lp = flow.log_prob_rows(p, mats[:, :, 0], mats[:, :, 1], rows,
                                ctx_constant=True)
        return -ag.mean(lp) if isinstance(lp, ag.Node) else -float(np.mean(lp))

    probe = sample_targets(targets, 1024, noise_kappa, np.random.default_rng(seed + 1))
    nll_before = float(ag.as_array(nll_of(probe, flow.param_values())))
    for step in range(steps):
        quats = sample_targets(targets, batch, noise_kappa, rng)
        for l in leaves:
            l.grad = None
        loss = nll_of(quats, pdict)
        lv = float(ag.as_array(loss))
        if not np.isfinite(lv):
            raise TrainingAborted(f"non-finite toy-fit loss at step {step}")
        ag.backward(loss)
        opt.step()
        if callback is not None and step % 200 == 0:
            callback(step, lv)
    nll_after = float(ag.as_array(nll_of(probe, flow.param_values())))

    draws = flow.flow_sample(context, report_samples, rng)
    rots = [s.joint_rotations[0] for s in draws]
    thresh = np.deg2rad(capture_deg)
    counts = np.zeros(len(targets), dtype=int)
    outside = 0
    for r in rots:
        d = [geodesic_distance(r, t) for t in targets]
        j = int(np.argmin(d))
        if d[j] <= thresh:
            counts[j] += 1
        else:
            outside += 1
    report = {
        "nll_before": nll_before,
        "nll_after": nll_after,
        "captured_fraction": 1.0 - outside / len(rots),
        "per_mode_mass": (counts / len(rots)).tolist(),
        "n_samples": len(rots),
        "capture_deg": capture_deg,
        "steps": steps,
    }
    return flow, report
