"""Base probability distributions on SO(3) and on Euclidean shape vectors.

Measure convention: rotation log-densities are taken w.r.t. the normalized
Haar probability measure, so the uniform distribution has log-density 0.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ag
from .rotation import Rotation

__all__ = [
    "ProjectedIsoGaussian", "DiagGaussian",
    "pig_sample", "pig_logpdf", "pig_logpdf_from_qdot",
    "igso3_logpdf", "uniform_sample", "uniform_quaternions",
    "diag_gaussian_sample", "diag_gaussian_logpdf",
]

# hemisphere surface area of S^3 is pi^2; uniform-on-SO(3) surface density
# is 1/pi^2, so multiplying a folded S^3 density by pi^2 yields the density
# w.r.t. normalized Haar.
_HAAR_SCALE = np.pi ** 2
_LOG_FLOOR = 1e-300


@dataclass(frozen=True)
class ProjectedIsoGaussian:
    """Radial projection of N(kappa * q_mode, I_4) onto the quaternion sphere."""

    mode: Rotation
    kappa: float

    def __post_init__(self):
        if not self.kappa > 0:
            raise ValueError("kappa must be positive")


@dataclass(frozen=True)
class DiagGaussian:
    mean: np.ndarray
    log_std: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64)
        log_std = np.asarray(self.log_std, dtype=np.float64)
        if mean.shape != log_std.shape:
            raise ValueError("mean and log_std must have the same shape")
        if not (np.all(np.isfinite(mean)) and np.all(np.isfinite(log_std))):
            raise ValueError("DiagGaussian parameters must be finite")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "log_std", log_std)


def pig_sample(d: ProjectedIsoGaussian, rng: np.random.Generator) -> Rotation:
    v = rng.normal(size=4) + d.kappa * d.mode.q
    return Rotation(v)  # constructor normalizes and folds to w >= 0


def pig_sample_batch(d: ProjectedIsoGaussian, n: int, rng: np.random.Generator):
    """(n, 4) canonical quaternions; vectorized variant of pig_sample."""
    v = rng.normal(size=(n, 4)) + d.kappa * d.mode.q
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    flip = v[:, 0] < 0
    v[flip] = -v[flip]
    return v


def _projected_density_s3(t, kappa):
    """Density on S^3 (surface measure) of the projected 4D Gaussian, as a
    function of t = kappa * <u, mode>. Uses truncated-moment identities:
    integral_0^inf r^3 phi(r - t) dr = (t^3 + 3t) Phi(t) + (t^2 + 2) phi(t).
    """
    phi = ag.normal_pdf(t)
    Phi = ag.normal_cdf(t)
    t2 = t * t
    bracket = (t * t2 + 3.0 * t) * Phi + (t2 + 2.0) * phi
    scale = np.sqrt(2.0 * np.pi) / (2.0 * np.pi) ** 2
    return scale * ag.exp(0.5 * (t2 - kappa ** 2)) * bracket


def pig_logpdf_from_qdot(qdot, kappa):
    """Log-density (normalized Haar) from the quaternion dot with the mode.

    Works on plain arrays or autodiff nodes; folding over antipodes makes the
    result a genuine SO(3) density regardless of hemisphere.
    """
    t = kappa * qdot
    dens = _projected_density_s3(t, kappa) + _projected_density_s3(-t, kappa)
    dens = dens + _LOG_FLOOR
    return ag.log(_HAAR_SCALE * dens)


def pig_logpdf(d: ProjectedIsoGaussian, r: Rotation) -> float:
    return float(pig_logpdf_from_qdot(float(d.mode.q @ r.q), d.kappa))


def pig_logpdf_batch(d: ProjectedIsoGaussian, quats) -> np.ndarray:
    quats = np.asarray(quats, dtype=np.float64)
    return pig_logpdf_from_qdot(quats @ d.mode.q, d.kappa)


def _igso3_terms(eps, tail=1e-12, lmax=2000):
    ls = np.arange(lmax + 1)
    w = (2 * ls + 1) * np.exp(-ls * (ls + 1) * eps)
    # |sin((l+1/2)x)/sin(x/2)| <= 2l+1, so (2l+1)*w bounds each term
    bound = (2 * ls + 1) * w
    keep = np.nonzero(bound >= tail)[0]
    top = int(keep[-1]) + 1 if keep.size else 1
    return ls[:top], w[:top]


def igso3_logpdf(r_or_angle, eps: float) -> float:
    """Heat-kernel (true isotropic Gaussian) log-density on SO(3), normalized
    Haar convention, by truncated character series over the rotation angle."""
    if not eps > 0:
        raise ValueError("eps must be positive")
    if isinstance(r_or_angle, Rotation):
        theta = 2.0 * np.arccos(min(abs(float(r_or_angle.q[0])), 1.0))
    else:
        theta = float(r_or_angle)
    ls, w = _igso3_terms(eps)
    half = 0.5 * theta
    if abs(np.sin(half)) < 1e-8:
        # removable singularity: sin((l+1/2)t)/sin(t/2) -> 2l+1 as t -> 0
        dens = float(np.sum(w * (2 * ls + 1)))
    else:
        dens = float(np.sum(w * np.sin((ls + 0.5) * theta) / np.sin(half)))
    return float(np.log(max(dens, _LOG_FLOOR)))


def uniform_quaternions(n: int, rng: np.random.Generator) -> np.ndarray:
    """(n, 4) Haar-uniform canonical quaternions."""
    v = rng.normal(size=(n, 4))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    flip = v[:, 0] < 0
    v[flip] = -v[flip]
    return v


def uniform_sample(rng: np.random.Generator) -> Rotation:
    return Rotation(rng.normal(size=4))


def diag_gaussian_sample(d: DiagGaussian, rng: np.random.Generator) -> np.ndarray:
    return d.mean + np.exp(d.log_std) * rng.normal(size=d.mean.shape)


def diag_gaussian_logpdf(d: DiagGaussian, x):
    """Exact log-density; accepts arrays or autodiff nodes for x."""
    xv = ag.as_array(x)
    if xv.shape != d.mean.shape:
        raise ag.ShapeError("dimension mismatch in diag_gaussian_logpdf")
    z = (x - d.mean) * np.exp(-d.log_std)
    quad = ag.reduce_sum(z * z)
    const = d.mean.size * np.log(2.0 * np.pi) + 2.0 * float(np.sum(d.log_std))
    return -0.5 * (quad + const)
