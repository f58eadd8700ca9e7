"""Toy linear-blend-skinned parametric body.

Shape blending, forward kinematics over a kinematic tree, joint
regression and anchor-vertex selection.  The bundled model is a small
generated fixture (8 joints, 96 vertices, 4 shape coefficients) --
structurally identical to the usual parametric body models but with no
licensed assets involved.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .rotation import Rotation


class ModelLoadError(ValueError):
    pass


class QuotaError(ValueError):
    pass


CONVEXITY_TOL = 1e-8


@dataclass(frozen=True)
class BodyModelDef:
    """Immutable model definition.

    template        (N,3) mean vertices, meters
    shape_basis     (S,3N) linear shape displacements
    joint_regressor (K,N), rows convex
    blend_weights   (K,N), columns convex, entries >= 0
    parents         (K,) kinematic parent indices, root = -1
    anchor_indices  (N_s,) default anchor vertex subset
    """

    template: np.ndarray
    shape_basis: np.ndarray
    joint_regressor: np.ndarray
    blend_weights: np.ndarray
    parents: np.ndarray
    anchor_indices: np.ndarray

    @property
    def n_vertices(self):
        return self.template.shape[0]

    @property
    def n_joints(self):
        return self.joint_regressor.shape[0]

    @property
    def n_shape(self):
        return self.shape_basis.shape[0]


@dataclass
class BodyState:
    pose: list          # K Rotations, relative to parent
    shape: np.ndarray   # (S,)
    translation: np.ndarray  # (3,) meters

    def __post_init__(self):
        self.shape = np.asarray(self.shape, float)
        self.translation = np.asarray(self.translation, float)


def _validate(template, shape_basis, joint_regressor, blend_weights,
              parents, anchor_indices):
    n = template.shape[0]
    k = joint_regressor.shape[0]
    if template.ndim != 2 or template.shape[1] != 3:
        raise ModelLoadError("template must be (N,3)")
    if shape_basis.ndim != 2 or shape_basis.shape[1] != 3 * n:
        raise ModelLoadError("shape_basis must be (S,3N)")
    if joint_regressor.shape != (k, n):
        raise ModelLoadError("joint_regressor must be (K,N)")
    if blend_weights.shape != (k, n):
        raise ModelLoadError("blend_weights must match joint_regressor")
    rows = joint_regressor.sum(axis=1)
    if np.abs(rows - 1.0).max() > CONVEXITY_TOL or joint_regressor.min() < -CONVEXITY_TOL:
        raise ModelLoadError("joint regressor rows must be convex combinations")
    cols = blend_weights.sum(axis=0)
    if np.abs(cols - 1.0).max() > CONVEXITY_TOL or blend_weights.min() < -CONVEXITY_TOL:
        raise ModelLoadError("blend weight columns must be convex combinations")
    if parents.shape != (k,) or parents[0] != -1:
        raise ModelLoadError("parents must be length K with root (-1) at joint 0")
    # walk every joint to the root; a cycle never terminates within K hops
    for j in range(1, k):
        cur, hops = j, 0
        while cur != 0:
            cur = int(parents[cur])
            hops += 1
            if cur < 0 or cur >= k or hops > k:
                raise ModelLoadError("parents do not form a tree rooted at joint 0")
    if anchor_indices.size and (anchor_indices.min() < 0 or anchor_indices.max() >= n):
        raise ModelLoadError("anchor indices out of range")


def load_model(path) -> BodyModelDef:
    """Read a model JSON file and validate every structural invariant."""
    with open(path) as f:
        try:
            doc = json.load(f)
        except json.JSONDecodeError as e:
            raise ModelLoadError(f"malformed model file: {e}")
    if doc.get("format_version") != 1:
        raise ModelLoadError("unsupported or missing format_version")
    try:
        template = np.asarray(doc["template"], float)
        shape_basis = np.asarray(doc["shape_basis"], float)
        joint_regressor = np.asarray(doc["joint_regressor"], float)
        blend_weights = np.asarray(doc["blend_weights"], float)
        parents = np.asarray(doc["parents"], int)
        anchor_indices = np.asarray(doc["anchor_indices"], int)
    except KeyError as e:
        raise ModelLoadError(f"missing model key {e}")
    _validate(template, shape_basis, joint_regressor, blend_weights,
              parents, anchor_indices)
    return BodyModelDef(template, shape_basis, joint_regressor,
                        blend_weights, parents, anchor_indices)


def save_model(model: BodyModelDef, path):
    doc = {
        "format_version": 1,
        "template": model.template.tolist(),
        "shape_basis": model.shape_basis.tolist(),
        "joint_regressor": model.joint_regressor.tolist(),
        "blend_weights": model.blend_weights.tolist(),
        "parents": model.parents.tolist(),
        "anchor_indices": model.anchor_indices.tolist(),
    }
    with open(path, "w") as f:
        json.dump(doc, f)


def shape_blend(model: BodyModelDef, beta) -> np.ndarray:
    """x = template + beta . basis, reshaped to (N,3)."""
    beta = np.asarray(beta, float)
    if beta.shape != (model.n_shape,):
        raise ValueError(f"beta must have length {model.n_shape}")
    return model.template + (beta @ model.shape_basis).reshape(-1, 3)


def rest_joints(model: BodyModelDef, beta) -> np.ndarray:
    return model.joint_regressor @ shape_blend(model, beta)


def _world_transforms(model, rotations, joints_rest):
    """Per-joint world rotation (K,3,3) and joint world position (K,3)."""
    k = model.n_joints
    wr = np.zeros((k, 3, 3))
    wp = np.zeros((k, 3))
    for j in range(k):
        r = rotations[j].matrix() if isinstance(rotations[j], Rotation) else np.asarray(rotations[j])
        p = int(model.parents[j])
        if p < 0:
            wr[j] = r
            wp[j] = joints_rest[j]
        else:
            wr[j] = wr[p] @ r
            wp[j] = wp[p] + wr[p] @ (joints_rest[j] - joints_rest[p])
    return wr, wp


def forward_kinematics(model: BodyModelDef, state: BodyState):
    """Pose the body.  Returns (vertices (N,3), joints (K,3)) in world space.

    Standard LBS: each joint's world transform is composed along the
    parent chain, vertices are blended with the rest pose subtracted
    out (inverse bind), translation applied last.
    """
    if len(state.pose) != model.n_joints:
        raise ValueError("pose must supply one rotation per joint")
    verts = shape_blend(model, state.shape)
    jr = model.joint_regressor @ verts
    wr, wp = _world_transforms(model, state.pose, jr)
    # skinned vertex: sum_k W[k,p] * (R_k (v - j_k) + j_k^world)
    local = verts[None, :, :] - jr[:, None, :]           # (K,N,3)
    moved = np.einsum("kij,knj->kni", wr, local) + wp[:, None, :]
    posed = np.einsum("kn,kni->ni", model.blend_weights, moved)
    return posed + state.translation, wp + state.translation


def segment_of_vertex(model: BodyModelDef) -> np.ndarray:
    """Argmax-weight segment id per vertex; -1 where no weight exceeds 0.5."""
    top = model.blend_weights.argmax(axis=0)
    strong = model.blend_weights.max(axis=0) > 0.5
    return np.where(strong, top, -1)


def _fps(points, start, count):
    chosen = [start]
    d = np.linalg.norm(points - points[start], axis=1)
    while len(chosen) < count:
        nxt = int(d.argmax())
        chosen.append(nxt)
        d = np.minimum(d, np.linalg.norm(points - points[nxt], axis=1))
    return chosen


def select_anchors(model: BodyModelDef, per_segment_min=2, total=48) -> np.ndarray:
    """Deterministic anchor subset: farthest-point sampling per segment.

    Vertices are assigned to the joint holding >0.5 of their blend
    weight; quotas are proportional to each segment's spatial extent
    (bounding-box diagonal of its template vertices) with a floor of
    per_segment_min; FPS inside each segment starts from its lowest
    vertex index.
    """
    n = model.n_vertices
    if total > n:
        raise ValueError("cannot select more anchors than vertices")
    if total == n:
        return np.arange(n)
    seg = segment_of_vertex(model)
    seg_ids = [s for s in range(model.n_joints) if (seg == s).any()]
    if total < len(seg_ids) * per_segment_min:
        raise QuotaError(
            f"total {total} below {len(seg_ids)} segments x minimum {per_segment_min}")
    extents = []
    for s in seg_ids:
        pts = model.template[seg == s]
        extents.append(float(np.linalg.norm(pts.max(axis=0) - pts.min(axis=0))))
    extents = np.asarray(extents)
    raw = total * extents / extents.sum()
    quota = np.maximum(per_segment_min, np.floor(raw).astype(int))
    quota = np.minimum(quota, [int((seg == s).sum()) for s in seg_ids])
    # hand out the remainder by largest fractional part, deterministically
    order = np.argsort(-(raw - np.floor(raw)), kind="stable")
    i = 0
    while quota.sum() < total and i < 10 * len(seg_ids):
        s = order[i % len(seg_ids)]
        if quota[s] < (seg == seg_ids[s]).sum():
            quota[s] += 1
        i += 1
    while quota.sum() > total:
        s = int(quota.argmax())
        if quota[s] > per_segment_min:
            quota[s] -= 1
        else:
            break
    out = []
    for s, q in zip(seg_ids, quota):
        idx = np.flatnonzero(seg == s)
        picked = _fps(model.template[idx], 0, int(q))
        out.extend(int(idx[p]) for p in picked)
    return np.array(sorted(out))


# ---------------------------------------------------------------------------
# toy fixture generator

_TOY_PARENTS = np.array([-1, 0, 1, 1, 1, 0, 0, 1])
_TOY_NAMES = ["pelvis", "spine", "head", "l_arm", "r_arm", "l_leg", "r_leg", "chest"]
# bone direction and length per joint in the rest pose, meters
_TOY_OFFSETS = np.array([
    [0.00, 0.00, 0.00],
    [0.00, 0.25, 0.00],
    [0.00, 0.30, 0.00],
    [-0.28, 0.18, 0.00],
    [0.28, 0.18, 0.00],
    [-0.12, -0.40, 0.00],
    [0.12, -0.40, 0.00],
    [0.00, 0.12, 0.08],
])


def make_toy_model(n_per_joint=12, n_shape=4, seed=20240214) -> BodyModelDef:
    """Procedural 8-joint / 96-vertex body used by every synthetic experiment.

    Vertices sit on small rings around each bone; blend weights are a
    sharpened soft assignment by distance to the owning joint so most
    vertices are dominated (>0.5) by one joint but boundaries stay
    smooth.  The shape basis mixes global scale, height, limb length
    and girth directions.
    """
    rng = np.random.default_rng(seed)
    k = len(_TOY_PARENTS)
    joints = np.zeros((k, 3))
    for j in range(1, k):
        joints[j] = joints[_TOY_PARENTS[j]] + _TOY_OFFSETS[j]
    verts = []
    owner = []
    for j in range(k):
        p = _TOY_PARENTS[j]
        a = joints[p] if p >= 0 else joints[j] - np.array([0, 0.12, 0])
        b = joints[j]
        axis = b - a
        ln = np.linalg.norm(axis)
        axis = axis / ln if ln > 0 else np.array([0.0, 1.0, 0.0])
        # two orthogonal ring directions
        ref = np.array([1.0, 0.0, 0.0]) if abs(axis[0]) < 0.9 else np.array([0.0, 0.0, 1.0])
        e1 = np.cross(axis, ref)
        e1 /= np.linalg.norm(e1)
        e2 = np.cross(axis, e1)
        for i in range(n_per_joint):
            t = (i % 4) / 3.0            # 4 stations along the bone
            ang = 2 * np.pi * (i // 4) / (n_per_joint // 4)
            r = 0.05 + 0.01 * np.sin(3 * ang)
            verts.append(a + t * (b - a) + r * (np.cos(ang) * e1 + np.sin(ang) * e2)
                         + 0.003 * rng.normal(size=3))
            owner.append(j)
    verts = np.asarray(verts)
    owner = np.asarray(owner)
    n = len(verts)

    # blend weights: sharpened inverse-distance to each joint position,
    # biased strongly toward the generating bone
    d = np.linalg.norm(verts[None, :, :] - joints[:, None, :], axis=-1)
    w = np.exp(-(d / 0.09) ** 2)
    w[owner, np.arange(n)] += 3.0 * w.max(axis=0)
    w = w / w.sum(axis=0, keepdims=True)
    # regressor: convex average over the vertices each joint owns
    regr = np.zeros((k, n))
    for j in range(k):
        idx = np.flatnonzero(owner == j)
        regr[j, idx] = 1.0 / len(idx)
    # the ring construction centers each ring on the bone, so the owned
    # average sits near the bone midpoint; shift rows toward the joint by
    # mixing in the 4 nearest vertices to the joint itself
    for j in range(k):
        near = np.argsort(np.linalg.norm(verts - joints[j], axis=1))[:4]
        regr[j] *= 0.3
        regr[j, near] += 0.7 / 4.0

    # note: no global-scale direction -- under perspective projection a
    # uniform scale trades off against depth translation and would make
    # (beta, t) unidentifiable; all directions here are localized
    basis = np.zeros((n_shape, 3 * n))
    head = np.zeros_like(verts)
    head_mask = owner == 2
    head[head_mask] = 0.07 * (verts[head_mask] - joints[2])
    basis[0] = head.reshape(-1)
    height = np.zeros_like(verts)
    height[:, 1] = 0.06 * (verts[:, 1] - verts[:, 1].min())
    basis[1] = height.reshape(-1)
    limb = np.zeros_like(verts)
    limb_mask = np.isin(owner, [3, 4, 5, 6])
    limb[limb_mask] = 0.05 * (verts[limb_mask] - joints[0])
    basis[2] = limb.reshape(-1)
    shoulders = np.zeros_like(verts)
    arm_mask = np.isin(owner, [3, 4])
    shoulders[arm_mask, 0] = 0.05 * (verts[arm_mask, 0] - joints[1][0])
    basis[3] = shoulders.reshape(-1)

    model = BodyModelDef(verts, basis, regr, w, _TOY_PARENTS.copy(),
                         np.arange(0))
    anchors = select_anchors(model, per_segment_min=4, total=48)
    return BodyModelDef(verts, basis, regr, w, _TOY_PARENTS.copy(), anchors)
