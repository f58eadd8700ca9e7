"""Synthetic scene generation and the pinhole camera.

A scene is a body state drawn from a configurable prior, observed by a
camera rig as noisy 2D anchor positions.  Records are written as JSON
lines so datasets diff cleanly and regenerate byte-identically from a
seed.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .body import BodyModelDef, BodyState
from .rotation import Rotation, axis_angle_exp
from .solver import Observation, reproject, _world_rotations


class BehindCameraError(ValueError):
    pass


class RigError(ValueError):
    pass


def project(intrinsics, extrinsics_r, extrinsics_t, points3d):
    """Pinhole projection of (N,3) world points to (N,2) pixels."""
    pts = np.asarray(points3d, float)
    cam = pts @ np.asarray(extrinsics_r, float).T + np.asarray(extrinsics_t, float)
    if (cam[:, 2] <= 1e-6).any():
        raise BehindCameraError("point at or behind the camera plane")
    hom = np.concatenate([cam, np.ones((len(cam), 1))], axis=1)
    uvw = hom @ np.asarray(intrinsics, float).T
    return uvw[:, :2] / uvw[:, 2:3]


def back_project(intrinsics, pixel, depth):
    """Inverse of project for identity extrinsics and known depth."""
    fx, fy = intrinsics[0, 0], intrinsics[1, 1]
    cx, cy = intrinsics[0, 2], intrinsics[1, 2]
    u, v = pixel
    return np.array([(u - cx) * depth / fx, (v - cy) * depth / fy, depth])


@dataclass
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    rot: np.ndarray = field(default_factory=lambda: np.eye(3))
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def intrinsics(self):
        return np.array([[self.fx, 0.0, self.cx, 0.0],
                         [0.0, self.fy, self.cy, 0.0],
                         [0.0, 0.0, 1.0, 0.0]])

    def to_json(self):
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "rot": np.asarray(self.rot).tolist(),
                "t": np.asarray(self.t).tolist()}

    @staticmethod
    def from_json(d):
        return Camera(d["fx"], d["fy"], d["cx"], d["cy"],
                      np.asarray(d["rot"], float), np.asarray(d["t"], float))


@dataclass
class RigSpec:
    """Camera rig plus the scene prior it observes."""

    cameras: list
    translation_lo: np.ndarray
    translation_hi: np.ndarray
    pose_sigma: float = 0.3      # per-joint axis-angle std, radians
    shape_sigma: float = 0.5

    def __post_init__(self):
        if not self.cameras:
            raise RigError("rig needs at least one camera")
        self.translation_lo = np.asarray(self.translation_lo, float)
        self.translation_hi = np.asarray(self.translation_hi, float)
        if (self.translation_hi < self.translation_lo).any():
            raise RigError("translation box is inverted")

    def to_json(self):
        return {"cameras": [c.to_json() for c in self.cameras],
                "translation_lo": self.translation_lo.tolist(),
                "translation_hi": self.translation_hi.tolist(),
                "pose_sigma": self.pose_sigma, "shape_sigma": self.shape_sigma}

    @staticmethod
    def from_json(d):
        return RigSpec([Camera.from_json(c) for c in d["cameras"]],
                       np.asarray(d["translation_lo"], float),
                       np.asarray(d["translation_hi"], float),
                       d.get("pose_sigma", 0.3), d.get("shape_sigma", 0.5))


@dataclass
class NoiseSpec:
    pixel_scale: float = 1.0     # Laplace scale, pixels
    occlusion_prob: float = 0.0  # chance an anchor's aux weight is zeroed

    def to_json(self):
        return {"pixel_scale": self.pixel_scale,
                "occlusion_prob": self.occlusion_prob}

    @staticmethod
    def from_json(d):
        return NoiseSpec(d.get("pixel_scale", 1.0), d.get("occlusion_prob", 0.0))


def standard_rig(n_views=1):
    """Subject ~3 m in front of a 800 px focal camera; second view at 90 deg."""
    cams = [Camera(800.0, 800.0, 320.0, 240.0)]
    if n_views >= 2:
        cams.append(_orbit_camera(800.0, np.array([0.0, 0.0, 3.0]), 3.0))
    if n_views > 2:
        raise RigError("standard rig defines at most two views")
    return RigSpec(cams, [-0.2, -0.2, 2.8], [0.2, 0.2, 3.2])


def depth_ambiguous_rig(n_views=2):
    """Long focal length, distant subject: single-view depth is nearly
    unobservable; the orthogonal second view restores it."""
    cams = [Camera(4000.0, 4000.0, 320.0, 240.0)]
    if n_views >= 2:
        cams.append(_orbit_camera(4000.0, np.array([0.0, 0.0, 8.0]), 8.0))
    return RigSpec(cams, [-0.1, -0.1, 7.6], [0.1, 0.1, 8.4])


def _orbit_camera(f, target, radius):
    """A camera on the +x side of the target, looking back at it."""
    pos = target + np.array([radius, 0.0, 0.0])
    z = target - pos
    z /= np.linalg.norm(z)
    y = np.array([0.0, 1.0, 0.0])
    x = np.cross(y, z)
    x /= np.linalg.norm(x)
    rot = np.stack([x, np.cross(z, x), z])
    return Camera(f, f, 320.0, 240.0, rot, -rot @ pos)


@dataclass
class SceneRecord:
    gt_state: BodyState
    views: list                  # Observations (noisy anchors)
    gt_anchors: list             # per view, noise-free (N_s,2)
    context_features: np.ndarray
    rng_seed: int


def context_features(obs: Observation):
    """Flattened normalized noisy anchors + visibility flags (view 0)."""
    f = obs.intrinsics[0, 0]
    c = obs.intrinsics[:2, 2]
    norm = (obs.anchors_2d - c) / f
    vis = (obs.aux_weight > 0).astype(float)
    return np.concatenate([norm.reshape(-1), vis])


def context_feature_dim(n_anchors):
    return 3 * n_anchors


def sample_state(model: BodyModelDef, rig: RigSpec, rng) -> BodyState:
    pose = [axis_angle_exp(rng.normal(scale=rig.pose_sigma, size=3))
            for _ in range(model.n_joints)]
    shape = rng.normal(scale=rig.shape_sigma, size=model.n_shape)
    t = rng.uniform(rig.translation_lo, rig.translation_hi)
    return BodyState(pose, shape, t)


def make_scene(model, rig: RigSpec, noise: NoiseSpec, seed) -> SceneRecord:
    rng = np.random.default_rng(seed)
    state = sample_state(model, rig, rng)
    world = _world_rotations(model, state.pose)
    n_s = len(model.anchor_indices)
    views, gts = [], []
    for cam in rig.cameras:
        obs = Observation(np.zeros((n_s, 2)), np.ones(n_s), np.ones(n_s),
                          cam.intrinsics(), cam.rot, cam.t)
        clean = reproject(model, world, state.shape, state.translation, obs)
        noisy = clean + rng.laplace(scale=noise.pixel_scale, size=clean.shape) \
            if noise.pixel_scale > 0 else clean.copy()
        aux = np.ones(n_s)
        if noise.occlusion_prob > 0:
            aux[rng.random(n_s) < noise.occlusion_prob] = 0.0
        obs.anchors_2d = noisy
        obs.laplace_scale = np.full(n_s, max(noise.pixel_scale, 1e-3))
        obs.aux_weight = aux
        views.append(obs)
        gts.append(clean)
    feats = context_features(views[0])
    return SceneRecord(state, views, gts, feats, int(seed))


def _obs_to_json(obs: Observation, gt):
    return {"anchors": obs.anchors_2d.tolist(),
            "gt_anchors": np.asarray(gt).tolist(),
            "scale": obs.laplace_scale.tolist(),
            "aux": obs.aux_weight.tolist(),
            "intrinsics": obs.intrinsics.tolist(),
            "extr_r": obs.extrinsics_r.tolist(),
            "extr_t": obs.extrinsics_t.tolist()}


def scene_to_json(rec: SceneRecord):
    return {"seed": rec.rng_seed,
            "gt": {"pose": [r.to_json() for r in rec.gt_state.pose],
                   "shape": rec.gt_state.shape.tolist(),
                   "translation": rec.gt_state.translation.tolist()},
            "views": [_obs_to_json(o, g) for o, g in zip(rec.views, rec.gt_anchors)],
            "context": rec.context_features.tolist()}


def scene_from_json(d) -> SceneRecord:
    pose = [Rotation(np.asarray(q, float)) for q in d["gt"]["pose"]]
    state = BodyState(pose, d["gt"]["shape"], d["gt"]["translation"])
    views, gts = [], []
    for v in d["views"]:
        views.append(Observation(np.asarray(v["anchors"], float),
                                 np.asarray(v["scale"], float),
                                 np.asarray(v["aux"], float),
                                 np.asarray(v["intrinsics"], float),
                                 np.asarray(v["extr_r"], float),
                                 np.asarray(v["extr_t"], float)))
        gts.append(np.asarray(v["gt_anchors"], float))
    return SceneRecord(state, views, gts, np.asarray(d["context"], float),
                       int(d["seed"]))


def gen_dataset(model, n_scenes, rig: RigSpec, noise: NoiseSpec, seed,
                path=None):
    """Generate scenes with per-scene RNG streams spawned from the seed."""
    seeds = np.random.SeedSequence(seed).generate_state(n_scenes)
    records = [make_scene(model, rig, noise, int(s)) for s in seeds]
    if path is not None:
        with open(path, "w") as f:
            for rec in records:
                f.write(json.dumps(scene_to_json(rec)) + "\n")
    return records


def load_dataset(path):
    with open(path) as f:
        return [scene_from_json(json.loads(line)) for line in f if line.strip()]
