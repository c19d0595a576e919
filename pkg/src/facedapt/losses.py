"""Training objectives and their analytic gradients.

Pretraining: latent regression, landmark reprojection under the predicted
pose, and cross-view latent agreement.  Adaptation: consecutive-frame texture
consistency, model-to-observation texture consistency through a 3x3 colour
matrix, and landmark reprojection against detections.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .facemodel import DecoderModel
from .geomcore import HeadPose, PoseGrad, pose_project, pose_project_vjp
from .raster import DEFAULT_TAU, Unwrapped, unwrap_vjp


@dataclass
class LossWeights:
    lambda_z: float = 1.0
    lambda_H: float = 0.01
    lambda_view: float = 10.0
    lambda_cftc: float = 100.0
    lambda_motc: float = 100.0
    lambda_flrc: float = 1.0

    def __post_init__(self):
        for k, v in vars(self).items():
            if not v >= 0:
                raise ValueError(f"{k} must be nonnegative")


@dataclass
class ColorCorrection:
    """A 1x1 convolution over RGB, i.e. a 3x3 matrix applied per texel."""

    matrix: np.ndarray = field(default_factory=lambda: np.eye(3))
    degenerate: bool = False   # set when a fit fell back to identity

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=np.float64).reshape(3, 3)
        if not np.all(np.isfinite(self.matrix)):
            raise ValueError("colour matrix must be finite")

    def __call__(self, tex):
        return apply_color_correction(self, tex)


def apply_color_correction(cc: ColorCorrection, tex) -> np.ndarray:
    """``matrix @ colour`` at every texel; values are not clamped."""
    return np.asarray(tex) @ cc.matrix.T


def _same_shape(a, b, what):
    if np.shape(a) != np.shape(b):
        raise ValueError(f"{what}: shape mismatch {np.shape(a)} vs {np.shape(b)}")


# ---------------------------------------------------------------------------
# pretraining

def loss_z(z_pred, z_gt) -> float:
    """Squared distance, summed over every row when given a batch."""
    _same_shape(z_pred, z_gt, "loss_z")
    return float(np.sum((np.asarray(z_pred) - np.asarray(z_gt)) ** 2))


def loss_z_grad(z_pred, z_gt) -> np.ndarray:
    return 2.0 * (np.asarray(z_pred, dtype=np.float64) - np.asarray(z_gt))


def loss_view(z_a, z_b) -> float:
    _same_shape(z_a, z_b, "loss_view")
    return float(np.sum((np.asarray(z_a) - np.asarray(z_b)) ** 2))


def loss_view_grad(z_a, z_b):
    g = 2.0 * (np.asarray(z_a, dtype=np.float64) - np.asarray(z_b))
    return g, -g


def reprojection_loss(pose: HeadPose, geom, k2d, indices) -> float:
    """``(1/K) sum_k |Pi H K^k(G) - k2d_k|^2``."""
    indices = np.asarray(indices, dtype=np.int64)
    k2d = np.asarray(k2d, dtype=np.float64)
    if k2d.shape != (len(indices), 2):
        raise ValueError(f"expected {len(indices)} 2D landmarks, got shape {k2d.shape}")
    res = pose_project(np.asarray(geom)[indices], pose) - k2d
    return float(np.sum(res ** 2) / len(indices))


def reprojection_loss_vjp(pose: HeadPose, geom, k2d, indices, scale: float = 1.0) -> PoseGrad:
    """Gradient of ``scale * reprojection_loss``; ``points`` are per-landmark (K, 3)."""
    indices = np.asarray(indices, dtype=np.int64)
    pts = np.asarray(geom)[indices]
    res = pose_project(pts, pose) - np.asarray(k2d)
    return pose_project_vjp(pts, pose, scale * 2.0 * res / len(indices))


def loss_H(pose_pred: HeadPose, geom_pred, k2d_gt, indices) -> float:
    return reprojection_loss(pose_pred, geom_pred, k2d_gt, indices)


def loss_flrc(k2d_detected, pose_pred: HeadPose, geom_pred, indices) -> float:
    return reprojection_loss(pose_pred, geom_pred, k2d_detected, indices)


# ---------------------------------------------------------------------------
# adaptation

def _masked_sq(weights, diff):
    n = int(np.count_nonzero(weights))
    if n == 0:
        return 0.0, np.zeros_like(diff), 0
    w2 = (weights ** 2)[..., None]
    return float(np.sum(w2 * diff ** 2) / n), 2.0 * w2 * diff / n, n


def cftc_weights(conf_t, conf_prev, tau: float = DEFAULT_TAU) -> np.ndarray:
    w = np.asarray(conf_t) * np.asarray(conf_prev)
    return np.where(w < tau, 0.0, w)


def loss_cftc(obs_t, conf_t, obs_prev, conf_prev, tau: float = DEFAULT_TAU) -> float:
    """Mean over co-confident texels of ``|w_t w_prev (obs_t - obs_prev)|^2``.

    Confidences (T, T) broadcast over colour channels; returns 0 when no
    texel is confident in both frames.
    """
    _same_shape(obs_t, obs_prev, "loss_cftc")
    _same_shape(conf_t, conf_prev, "loss_cftc")
    w = cftc_weights(conf_t, conf_prev, tau)
    return _masked_sq(w, np.asarray(obs_t) - np.asarray(obs_prev))[0]


def loss_cftc_grad(obs_t, conf_t, obs_prev, conf_prev, tau: float = DEFAULT_TAU):
    """``(dL/d obs_t, dL/d obs_prev)`` with confidences held fixed."""
    w = cftc_weights(conf_t, conf_prev, tau)
    _, g, _ = _masked_sq(w, np.asarray(obs_t) - np.asarray(obs_prev))
    return g, -g


@dataclass
class MOTCTerms:
    value: float
    grad_obs: np.ndarray
    grad_model_tex: np.ndarray
    grad_matrix: np.ndarray
    empty: bool


def motc_terms(obs, conf, model_tex, cc: ColorCorrection) -> MOTCTerms:
    _same_shape(obs, model_tex, "loss_motc")
    model_tex = np.asarray(model_tex, dtype=np.float64)
    diff = np.asarray(obs) - apply_color_correction(cc, model_tex)
    value, g, n = _masked_sq(np.asarray(conf), diff)
    g_model = -(g @ cc.matrix)
    g_matrix = -np.einsum("ijc,ijk->ck", g, model_tex)
    return MOTCTerms(value, g, g_model, g_matrix, n == 0)


def loss_motc(obs, conf, model_tex, cc: ColorCorrection) -> float:
    """Mean over confident texels of ``|w (obs - C(model_tex))|^2``; 0 if none are confident."""
    return motc_terms(obs, conf, model_tex, cc).value


@dataclass
class FrameState:
    """One frame pushed through encoder -> decoder -> pose -> unwrap."""

    z: np.ndarray
    pose: HeadPose
    geom: np.ndarray
    unwrapped: Unwrapped
    tex_raw: np.ndarray          # decoder texture before clamping
    k2d: np.ndarray | None = None

    @property
    def model_tex(self) -> np.ndarray:
        return np.clip(self.tex_raw, 0.0, 1.0)


@dataclass
class DALoss:
    total: float
    cftc: float
    motc: float
    flrc: float
    motc_empty: bool
    # gradients of ``total`` w.r.t. each frame's latent code and pose vector
    # (scale, euler x3, trans x2), and w.r.t. the colour matrix
    grad_z_prev: np.ndarray
    grad_pose_prev: np.ndarray
    grad_z: np.ndarray
    grad_pose: np.ndarray
    grad_matrix: np.ndarray

    def breakdown(self) -> dict:
        return {"L_CFTC": self.cftc, "L_MOTC": self.motc, "L_FLRC": self.flrc, "total": self.total}


def _obs_to_latent(decoder: DecoderModel, frame: FrameState, grad_obs):
    pg = unwrap_vjp(frame.unwrapped, grad_obs)
    gz = np.einsum("nc,ncd->d", pg.points, decoder.texel_position_basis)
    return gz, pg.pose_vector()


def loss_da(prev: FrameState, cur: FrameState, decoder: DecoderModel, cc: ColorCorrection,
            weights: LossWeights, tau: float = DEFAULT_TAU) -> DALoss:
    """Weighted adaptation loss for the pair (t-1, t) and its gradients.

    MOTC and FLRC are evaluated on frame t only.  Every term is reported;
    terms with zero weight contribute nothing to the gradients.
    """
    d = len(cur.z)
    gz_prev, gp_prev = np.zeros(d), np.zeros(6)
    gz, gp = np.zeros(d), np.zeros(6)
    g_matrix = np.zeros((3, 3))
    flrc = 0.0

    u_t, u_p = cur.unwrapped, prev.unwrapped
    cftc = loss_cftc(u_t.obs, u_t.conf, u_p.obs, u_p.conf, tau)
    terms = motc_terms(u_t.obs, u_t.conf, cur.model_tex, cc)
    motc, motc_empty = terms.value, terms.empty
    idx = decoder.landmark_indices
    if cur.k2d is not None:
        flrc = reprojection_loss(cur.pose, cur.geom, cur.k2d, idx)
    elif weights.lambda_flrc > 0:
        raise ValueError("landmark reprojection needs detected landmarks for frame t")

    if weights.lambda_cftc > 0:
        g_t, g_p = loss_cftc_grad(u_t.obs, u_t.conf, u_p.obs, u_p.conf, tau)
        a, b = _obs_to_latent(decoder, cur, weights.lambda_cftc * g_t)
        gz += a
        gp += b
        a, b = _obs_to_latent(decoder, prev, weights.lambda_cftc * g_p)
        gz_prev += a
        gp_prev += b

    if weights.lambda_motc > 0:
        a, b = _obs_to_latent(decoder, cur, weights.lambda_motc * terms.grad_obs)
        gz += a
        gp += b
        # clamp passes gradient only strictly inside (0, 1)
        live = (cur.tex_raw > 0.0) & (cur.tex_raw < 1.0)
        gz += np.einsum("ijc,ijcd->d", weights.lambda_motc * terms.grad_model_tex * live, decoder.tex_basis)
        g_matrix += weights.lambda_motc * terms.grad_matrix

    if weights.lambda_flrc > 0:
        pg = reprojection_loss_vjp(cur.pose, cur.geom, cur.k2d, idx, scale=weights.lambda_flrc)
        gz += np.einsum("kc,kcd->d", pg.points, decoder.geom_basis[idx])
        gp += pg.pose_vector()

    total = weights.lambda_cftc * cftc + weights.lambda_motc * motc + weights.lambda_flrc * flrc
    return DALoss(total, cftc, motc, flrc, motc_empty, gz_prev, gp_prev, gz, gp, g_matrix)


def combine_da(terms: tuple[float, float, float], weights: LossWeights) -> float:
    """``lambda_cftc * L_CFTC + lambda_motc * L_MOTC + lambda_flrc * L_FLRC``."""
    c, m, f = terms
    return weights.lambda_cftc * c + weights.lambda_motc * m + weights.lambda_flrc * f


def append_loss_csv(path, step: int, loss: DALoss) -> None:
    """Append ``step,L_CFTC,L_MOTC,L_FLRC,total``; writes the header on first use."""
    import os

    new = not os.path.exists(path) or os.path.getsize(path) == 0
    with open(path, "a") as fh:
        if new:
            fh.write("step,L_CFTC,L_MOTC,L_FLRC,total\n")
        fh.write(f"{step},{float(loss.cftc)!r},{float(loss.motc)!r},{float(loss.flrc)!r},{float(loss.total)!r}\n")
