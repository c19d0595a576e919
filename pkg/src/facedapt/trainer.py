"""Optimisation loops: supervised lab pretraining and self-supervised adaptation.

Only the encoder's MLP stage is trained (plain SGD with momentum and global
norm clipping).  The colour correction is refit in closed form at every
adaptation step.
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .encoder import TRAINABLE, EncoderModel, save_encoder
from .facemodel import DecoderModel
from .geomcore import HeadPose
from .losses import (ColorCorrection, DALoss, FrameState, LossWeights, apply_color_correction, loss_da,
                     loss_view, loss_view_grad, loss_z, loss_z_grad, reprojection_loss,
                     reprojection_loss_vjp)
from .raster import DEFAULT_TAU, render, unwrap
from .synthdata import LabDataset, WildSequence

log = logging.getLogger(__name__)

COND_LIMIT = 1e12


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    momentum: float = 0.9
    epochs: int = 300
    batch_size: int = 8
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)
    tau: float = DEFAULT_TAU
    deterministic: bool = True
    landmark_dropout: float = 0.1
    grad_clip: float = 10.0
    online: bool = False
    checkpoint_every: int = 0
    checkpoint_dir: str | None = None

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if not 0 <= self.landmark_dropout <= 1:
            raise ValueError("landmark_dropout must lie in [0, 1]")
        if not self.grad_clip > 0:
            raise ValueError("grad_clip must be positive")

    @classmethod
    def for_adaptation(cls, **kw) -> "TrainConfig":
        base = dict(learning_rate=1e-4, epochs=30)
        base.update(kw)
        return cls(**base)


ARMS = {
    "none": dict(lambda_cftc=0.0, lambda_motc=0.0, lambda_flrc=0.0),
    "flrc": dict(lambda_cftc=0.0, lambda_motc=0.0),
    "full": {},
}


def arm_weights(arm: str, base: LossWeights | None = None) -> LossWeights:
    """Loss weights of an ablation arm: ``none`` (no adaptation), ``flrc`` (landmarks only), ``full``."""
    if arm not in ARMS:
        raise ValueError(f"unknown arm {arm!r}; choose from {sorted(ARMS)}")
    return replace(base or LossWeights(), **ARMS[arm])


class SGD:
    """Momentum SGD with global-norm gradient clipping."""

    def __init__(self, params: dict, lr: float, momentum: float, clip: float):
        self.params, self.lr, self.momentum, self.clip = params, lr, momentum, clip
        self.velocity = {k: np.zeros_like(params[k]) for k in TRAINABLE}

    def step(self, grads: dict, lr: float | None = None) -> float:
        norm = float(np.sqrt(sum(np.sum(grads[k] ** 2) for k in TRAINABLE)))
        factor = self.clip / norm if norm > self.clip else 1.0
        lr = self.lr if lr is None else lr
        for k in TRAINABLE:
            v = self.velocity[k]
            v *= self.momentum
            v -= lr * factor * grads[k]
            self.params[k] += v
        return norm


def _check_finite(step: int, parts: dict) -> None:
    if not all(np.isfinite(v) for v in parts.values()):
        detail = ", ".join(f"{k}={v!r}" for k, v in parts.items())
        raise FloatingPointError(f"non-finite loss at step {step}: {detail}")


DA_COLUMNS = ("step", "L_CFTC", "L_MOTC", "L_FLRC", "total")
PRETRAIN_COLUMNS = ("step", "L_z", "L_H", "L_view", "total")


def _write_history(path, rows: list[dict], keys) -> None:
    """CSV with a header row; written even when there are no rows."""
    if path is None:
        return
    with open(path, "w") as fh:
        fh.write(",".join(keys) + "\n")
        for r in rows:
            fh.write(",".join(repr(float(r[k])) if isinstance(r[k], float) else str(r[k]) for k in keys) + "\n")


def _checkpoint(encoder, config: TrainConfig, epoch: int, tag: str) -> None:
    if config.checkpoint_every and config.checkpoint_dir and epoch % config.checkpoint_every == 0:
        d = Path(config.checkpoint_dir)
        d.mkdir(parents=True, exist_ok=True)
        save_encoder(encoder, d / f"{tag}_epoch{epoch:04d}.bin")


# ---------------------------------------------------------------------------
# pretraining

def pretrain_batch_loss(encoder: EncoderModel, decoder: DecoderModel, feats, lm_in, z_gt, k2d_gt,
                        weights: LossWeights, want_grads: bool = True):
    """Loss and parameter gradients for a batch of view pairs.

    Rows ``2b`` and ``2b+1`` of every input are two views of one time instant.
    The batch loss is the mean over instants of
    ``lambda_z (L_z^a + L_z^b) + lambda_H (L_H^a + L_H^b) + lambda_view |z^a - z^b|^2``.
    """
    z, pose, state = encoder.forward(feats, lm_in)
    n = len(z)
    B = n // 2
    idx = decoder.landmark_indices
    basis = decoder.geom_basis[idx]
    lz = lh = lv = 0.0
    gz = np.zeros_like(z)
    gp = np.zeros_like(pose)
    for i in range(n):
        geom_lm = decoder.geom_mean[idx] + basis @ z[i]
        hp = HeadPose.from_vector(pose[i])
        lz += loss_z(z[i], z_gt[i])
        lh += reprojection_loss(hp, geom_lm, k2d_gt[i], np.arange(len(idx)))
        if want_grads:
            gz[i] += weights.lambda_z * loss_z_grad(z[i], z_gt[i])
            pg = reprojection_loss_vjp(hp, geom_lm, k2d_gt[i], np.arange(len(idx)), scale=weights.lambda_H)
            gz[i] += np.einsum("kc,kcd->d", pg.points, basis)
            gp[i] += pg.pose_vector()
    for b in range(B):
        lv += loss_view(z[2 * b], z[2 * b + 1])
        if want_grads:
            ga, gb = loss_view_grad(z[2 * b], z[2 * b + 1])
            gz[2 * b] += weights.lambda_view * ga
            gz[2 * b + 1] += weights.lambda_view * gb
    parts = {"L_z": lz / B, "L_H": lh / B, "L_view": lv / B}
    parts["total"] = weights.lambda_z * parts["L_z"] + weights.lambda_H * parts["L_H"] + weights.lambda_view * parts["L_view"]
    if not want_grads:
        return parts, None
    grads = encoder.backward(state, gz / B, gp / B)
    return parts, grads


def _dropout_mask(rng, n: int, rate: float) -> np.ndarray:
    return rng.random(n) >= rate


def pretrain(encoder: EncoderModel, decoder: DecoderModel, lab: LabDataset, config: TrainConfig,
             history_csv=None):
    """Supervised multiview pretraining.  Returns ``(trained encoder copy, history rows)``."""
    if lab.frames == 0:
        raise ValueError("empty lab dataset")
    if lab.views < 2 and config.weights.lambda_view > 0:
        raise ValueError("cross-view loss needs at least two views")
    enc = encoder.copy()
    rng = np.random.default_rng(config.seed)
    N, V = lab.frames, lab.views
    feats = enc.features(lab.images.reshape(N * V, *lab.images.shape[2:])).reshape(N, V, -1)
    opt = SGD(enc.params, config.learning_rate, config.momentum, config.grad_clip)
    history = []
    step = 0
    for epoch in range(config.epochs):
        order = rng.permutation(N)
        for s in range(0, N, config.batch_size):
            ts = order[s:s + config.batch_size]
            views = np.array([rng.choice(V, 2, replace=False) if V > 1 else [0, 0] for _ in ts])
            tt = np.repeat(ts, 2)
            vv = views.reshape(-1)
            present = _dropout_mask(rng, len(tt), config.landmark_dropout)
            lm_in = enc.landmark_input(lab.k2d[tt, vv], present)
            parts, grads = pretrain_batch_loss(enc, decoder, feats[tt, vv], lm_in, lab.z_gt[tt],
                                               lab.k2d[tt, vv], config.weights)
            _check_finite(step, parts)
            norm = opt.step(grads)
            history.append({"step": step, "epoch": epoch, **parts, "grad_norm": norm})
            step += 1
        _checkpoint(enc, config, epoch + 1, "pretrain")
    _write_history(history_csv, history, PRETRAIN_COLUMNS)
    return enc, history


# ---------------------------------------------------------------------------
# colour correction

def color_normal_equations(obs, conf, model_tex):
    """``(sum w o m^T, sum w m m^T)`` with ``w = conf^2`` over texels with nonzero confidence."""
    w = np.asarray(conf, dtype=np.float64).reshape(-1)
    o = np.asarray(obs, dtype=np.float64).reshape(-1, 3)
    m = np.asarray(model_tex, dtype=np.float64).reshape(-1, 3)
    keep = w > 0
    w2 = (w[keep] ** 2)[:, None]
    return (w2 * o[keep]).T @ m[keep], (w2 * m[keep]).T @ m[keep], int(keep.sum())


def solve_color(cross, normal, count: int = 3) -> ColorCorrection:
    if count < 3 or not np.all(np.isfinite(normal)) or np.linalg.cond(normal) > COND_LIMIT:
        warnings.warn("colour correction is degenerate; using identity", RuntimeWarning, stacklevel=3)
        return ColorCorrection(np.eye(3), degenerate=True)
    return ColorCorrection(np.linalg.solve(normal.T, cross.T).T)


def fit_color_correction(obs, conf, model_tex) -> ColorCorrection:
    """Weighted least-squares colour matrix; exact minimiser of the model-to-observation loss.

    Texels are weighted by ``conf**2``, matching the squared confidence
    weighting of that loss.  Falls back to identity (``degenerate=True``)
    when the normal matrix is singular.
    """
    cross, normal, n = color_normal_equations(obs, conf, model_tex)
    return solve_color(cross, normal, n)


# ---------------------------------------------------------------------------
# adaptation

@dataclass
class AdaptResult:
    encoder: EncoderModel
    color: ColorCorrection
    history: list


def frame_state(encoder_out, decoder: DecoderModel, image, k2d, tau: float, frozen=None) -> FrameState:
    z, pose_vec = encoder_out
    pose = HeadPose.from_vector(pose_vec)
    geom = decoder.decode_geometry(z)
    unw = unwrap(image, geom, pose, decoder.topology, tau, frozen=frozen, texel_pos=decoder.texel_positions(z))
    return FrameState(z, pose, geom, unw, decoder.decode_texture_raw(z), k2d)


def pair_loss(encoder: EncoderModel, decoder: DecoderModel, feats, lm_in, images, k2d, weights: LossWeights,
              tau: float, frozen=(None, None)):
    """Forward frames (t-1, t), refit the colour matrix on frame t and evaluate the adaptation loss.

    Returns ``(DALoss, ColorCorrection, encoder state)``.  ``frozen`` optionally
    pins both confidence maps (useful for finite-difference checks).
    """
    z, pose, state = encoder.forward(feats, lm_in)
    prev = frame_state((z[0], pose[0]), decoder, images[0], k2d[0], tau, frozen[0])
    cur = frame_state((z[1], pose[1]), decoder, images[1], k2d[1], tau, frozen[1])
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        cc = fit_color_correction(cur.unwrapped.obs, cur.unwrapped.conf, cur.model_tex)
    return loss_da(prev, cur, decoder, cc, weights, tau), cc, state


def adapt(encoder: EncoderModel, decoder: DecoderModel, wild: WildSequence, config: TrainConfig,
          history_csv=None) -> AdaptResult:
    """Self-supervised fine-tuning on an unlabeled sequence.

    Offline mode shuffles consecutive pairs every epoch; ``config.online``
    walks them once in temporal order.  The returned colour matrix is a
    pooled closed-form fit over the whole sequence tracked by the adapted
    encoder.
    """
    N = wild.frames
    if N < 2:
        raise ValueError("adaptation needs a sequence of at least 2 frames")
    if wild.k2d is None or len(wild.k2d) != N:
        raise ValueError("adaptation needs detected landmarks for every frame")
    enc = encoder.copy()
    w = config.weights
    active = w.lambda_cftc > 0 or w.lambda_motc > 0 or w.lambda_flrc > 0
    rng = np.random.default_rng(config.seed)
    feats = enc.features(wild.images)
    opt = SGD(enc.params, config.learning_rate, config.momentum, config.grad_clip)
    history = []
    step = 0
    epochs = 1 if config.online else config.epochs
    if active:
        for epoch in range(epochs):
            pairs = np.arange(1, N) if config.online else rng.permutation(np.arange(1, N))
            for t in pairs:
                idx = np.array([t - 1, t])
                lm_in = enc.landmark_input(wild.k2d[idx], _dropout_mask(rng, 2, config.landmark_dropout))
                da, cc, state = pair_loss(enc, decoder, feats[idx], lm_in, wild.images[idx], wild.k2d[idx], w, config.tau)
                parts = da.breakdown()
                _check_finite(step, parts)
                grads = enc.backward(state, np.stack([da.grad_z_prev, da.grad_z]),
                                     np.stack([da.grad_pose_prev, da.grad_pose]))
                norm = opt.step(grads)
                history.append({"step": step, "epoch": epoch, "pair": int(t), **parts,
                                "motc_empty": int(da.motc_empty), "grad_norm": norm})
                step += 1
            _checkpoint(enc, config, epoch + 1, "adapt")
            log.info("adapt epoch %d: mean L_CFTC %.6g", epoch,
                     np.mean([h["L_CFTC"] for h in history if h["epoch"] == epoch]))
    _write_history(history_csv, history, DA_COLUMNS)
    return AdaptResult(enc, sequence_color_correction(enc, decoder, wild.images, config.tau), history)


def sequence_color_correction(encoder: EncoderModel, decoder: DecoderModel, images, tau: float = DEFAULT_TAU,
                              stride: int = 1) -> ColorCorrection:
    """Pool the closed-form fit over frames tracked without landmark input."""
    feats = encoder.features(images[::stride])
    z, pose, _ = encoder.forward(feats, encoder.landmark_input(None, n=len(feats)))
    cross, normal, count = np.zeros((3, 3)), np.zeros((3, 3)), 0
    for i, img in enumerate(images[::stride]):
        fs = frame_state((z[i], pose[i]), decoder, img, None, tau)
        c, m, n = color_normal_equations(fs.unwrapped.obs, fs.unwrapped.conf, fs.model_tex)
        cross += c
        normal += m
        count += n
    return solve_color(cross, normal, count)


# ---------------------------------------------------------------------------
# tracking

@dataclass
class TrackFrame:
    z: np.ndarray
    pose: HeadPose
    geometry: np.ndarray      # posed vertices (G, 3), image frame
    texture: np.ndarray       # colour-corrected decoder texture
    overlay: np.ndarray | None


@dataclass
class Track:
    z: np.ndarray             # (N, d)
    poses: np.ndarray         # (N, 6)
    geometry: np.ndarray      # (N, G, 3) posed
    textures: np.ndarray      # (N, T, T, 3)
    overlays: np.ndarray | None

    def __len__(self) -> int:
        return len(self.z)

    def __getitem__(self, i) -> TrackFrame:
        return TrackFrame(self.z[i], HeadPose.from_vector(self.poses[i]), self.geometry[i], self.textures[i],
                          None if self.overlays is None else self.overlays[i])

    def projected(self) -> np.ndarray:
        return self.geometry[..., :2]


def overlay_frame(image, geom, texture, pose: HeadPose, decoder: DecoderModel, alpha: float = 0.5):
    """Blend a render of the tracked face into the input frame."""
    rendered = render(geom, np.clip(texture, 0.0, 1.0), pose, decoder.topology, image)
    return (1.0 - alpha) * image + alpha * rendered


def track(encoder: EncoderModel, decoder: DecoderModel, cc: ColorCorrection, images,
          overlays: bool = True) -> Track:
    """Feed-forward tracking; the landmark input is zeroed so no detector is needed."""
    from .geomcore import apply_pose

    images = np.asarray(images, dtype=np.float64)
    feats = encoder.features(images)
    z, pose, _ = encoder.forward(feats, encoder.landmark_input(None, n=len(feats)))
    geoms = np.empty((len(z), decoder.num_vertices, 3))
    texs = np.empty((len(z), decoder.tex_size, decoder.tex_size, 3))
    ovl = np.empty_like(images) if overlays else None
    for i in range(len(z)):
        hp = HeadPose.from_vector(pose[i])
        g = decoder.decode_geometry(z[i])
        geoms[i] = apply_pose(g, hp)
        texs[i] = apply_color_correction(cc, decoder.decode_texture(z[i]))
        if overlays:
            ovl[i] = overlay_frame(images[i], g, texs[i], hp, decoder)
    return Track(z, pose, geoms, texs, ovl)
