"""Image (+ landmark) encoder regressing latent code and head pose.

A frozen random affine feature stage on a 32x32 downsample of the image feeds
a small tanh MLP together with normalised 2D landmarks.  Only the MLP is ever
trained.  Backpropagation is written out by hand.
"""
from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .facemodel import NOMINAL_SCALE
from .geomcore import HeadPose

ENCODER_MAGIC = b"FDAPTENC"
ENCODER_VERSION = 1
TRAINABLE = ("W1", "b1", "W2", "b2", "W3", "b3")


@dataclass(eq=False)
class EncoderModel:
    image_size: int
    feat_res: int
    latent_dim: int
    num_landmarks: int
    frozen: dict            # "A": (F, feat_res*feat_res*3), "a": (F,)
    params: dict            # W1, b1, W2, b2, W3, b3
    scale_ref: float = NOMINAL_SCALE
    trans_ref: np.ndarray = field(default_factory=lambda: np.array([64.0, 64.0]))
    trans_span: float = 32.0

    def __post_init__(self):
        self.trans_ref = np.asarray(self.trans_ref, dtype=np.float64).reshape(2)

    @property
    def num_features(self) -> int:
        return self.frozen["A"].shape[0]

    @property
    def hidden(self) -> tuple[int, int]:
        return self.params["W1"].shape[1], self.params["W2"].shape[1]

    def copy(self) -> "EncoderModel":
        return EncoderModel(self.image_size, self.feat_res, self.latent_dim, self.num_landmarks,
                            {k: v.copy() for k, v in self.frozen.items()},
                            {k: v.copy() for k, v in self.params.items()},
                            self.scale_ref, self.trans_ref.copy(), self.trans_span)

    # -- forward -----------------------------------------------------------
    def features(self, images) -> np.ndarray:
        """Frozen features for a batch of images (N, H, W, 3) or a single image."""
        images = np.asarray(images, dtype=np.float64)
        if images.ndim == 3:
            images = images[None]
        n, h, w = images.shape[:3]
        if h != self.image_size or w != self.image_size:
            raise ValueError(f"encoder expects {self.image_size}x{self.image_size} images, got {h}x{w}")
        f = self.image_size // self.feat_res
        small = images.reshape(n, self.feat_res, f, self.feat_res, f, 3).mean(axis=(2, 4))
        return (small.reshape(n, -1) - 0.5) @ self.frozen["A"].T + self.frozen["a"]

    def landmark_input(self, k2d, present=None, n: int | None = None) -> np.ndarray:
        """Normalise pixel landmarks to [-1, 1]; rows where ``present`` is False become zero."""
        K = self.num_landmarks
        if k2d is None:
            return np.zeros((n or 1, 2 * K))
        k2d = np.asarray(k2d, dtype=np.float64).reshape(-1, K, 2)
        x = (k2d / (self.image_size - 1)) * 2.0 - 1.0
        x = x.reshape(len(k2d), 2 * K)
        if present is not None:
            x = x * np.asarray(present, dtype=np.float64).reshape(-1, 1)
        return x

    def forward_raw(self, feats, lm_in):
        """MLP output before pose decoding, plus the activation cache."""
        p = self.params
        x = np.concatenate([np.atleast_2d(feats), np.atleast_2d(lm_in)], axis=1)
        h1 = np.tanh(x @ p["W1"] + p["b1"])
        h2 = np.tanh(h1 @ p["W2"] + p["b2"])
        out = h2 @ p["W3"] + p["b3"]
        return out, (x, h1, h2)

    def decode_output(self, out):
        """Split raw outputs (N, d+6) into latent codes (N, d) and pose vectors (N, 6)."""
        d = self.latent_dim
        z = out[:, :d]
        scale = np.exp(out[:, d] + np.log(self.scale_ref))
        euler = out[:, d + 1:d + 4]
        trans = self.trans_ref + self.trans_span * out[:, d + 4:d + 6]
        return z, np.concatenate([scale[:, None], euler, trans], axis=1)

    def forward(self, feats, lm_in):
        out, cache = self.forward_raw(feats, lm_in)
        z, pose = self.decode_output(out)
        return z, pose, (out, pose, cache)

    def encode(self, image, k2d_detected=None):
        """``(z, HeadPose)`` for one image; ``k2d_detected=None`` feeds zeros."""
        feats = self.features(image)
        z, pose, _ = self.forward(feats, self.landmark_input(k2d_detected, n=1))
        return z[0], HeadPose.from_vector(pose[0])

    # -- backward ----------------------------------------------------------
    def backward(self, state, grad_z, grad_pose, want_input: bool = False):
        """Reverse-mode gradients of the trainable stage.

        ``state`` is the third value returned by :meth:`forward`; ``grad_z``
        (N, d) and ``grad_pose`` (N, 6; scale, euler, trans) are upstream
        gradients.  Returns a dict keyed like ``params`` and, with
        ``want_input``, also the gradient w.r.t. the normalised landmark input.
        """
        if state is None:
            raise RuntimeError("backward called without a recorded forward pass")
        out, pose, (x, h1, h2) = state
        grad_z = np.atleast_2d(grad_z)
        grad_pose = np.atleast_2d(grad_pose)
        g_out = np.concatenate([grad_z, grad_pose[:, :1] * pose[:, :1], grad_pose[:, 1:4],
                                grad_pose[:, 4:6] * self.trans_span], axis=1)
        p = self.params
        grads = {"W3": h2.T @ g_out, "b3": g_out.sum(axis=0)}
        g_h2 = (g_out @ p["W3"].T) * (1.0 - h2 ** 2)
        grads["W2"] = h1.T @ g_h2
        grads["b2"] = g_h2.sum(axis=0)
        g_h1 = (g_h2 @ p["W2"].T) * (1.0 - h1 ** 2)
        grads["W1"] = x.T @ g_h1
        grads["b1"] = g_h1.sum(axis=0)
        if want_input:
            g_x = g_h1 @ p["W1"].T
            return grads, g_x[:, self.num_features:]
        return grads


def init_encoder(latent_dim: int, num_landmarks: int = 8, seed: int = 0, image_size: int = 128,
                 feat_res: int = 32, num_features: int = 256, hidden=(128, 64),
                 scale_ref: float | None = None, trans_span: float | None = None) -> EncoderModel:
    """Randomly initialised encoder; pose references default to the synthetic face size at ``image_size``."""
    if image_size % feat_res:
        raise ValueError("image_size must be a multiple of feat_res")
    if scale_ref is None:
        scale_ref = NOMINAL_SCALE * image_size / 128.0
    if trans_span is None:
        trans_span = image_size / 4.0
    rng = np.random.default_rng(seed)
    n_in = feat_res * feat_res * 3
    frozen = {"A": rng.standard_normal((num_features, n_in)) * (3.0 / np.sqrt(n_in)),
              "a": rng.standard_normal(num_features) * 0.1}
    sizes = [num_features + 2 * num_landmarks, hidden[0], hidden[1], latent_dim + 6]
    params = {}
    for k in range(3):
        w = rng.standard_normal((sizes[k], sizes[k + 1])) / np.sqrt(sizes[k])
        if k == 2:
            w *= 0.1
        params[f"W{k + 1}"] = w
        params[f"b{k + 1}"] = np.zeros(sizes[k + 1])
    centre = (image_size - 1) / 2.0
    return EncoderModel(image_size, feat_res, latent_dim, num_landmarks, frozen, params,
                        scale_ref, np.array([centre, centre]), trans_span)


def save_encoder(model: EncoderModel, path) -> None:
    """Binary layout (little-endian):

    magic ``FDAPTENC`` | u32 version | u32 image_size, feat_res, F, K, d, h1, h2
    | f64 scale_ref, trans_ref_x, trans_ref_y, trans_span
    | f64 A (F, feat_res^2*3) | a (F) | W1 | b1 | W2 | b2 | W3 | b3   (C-order)
    | 32-byte SHA-256 of everything before it.
    """
    h1, h2 = model.hidden
    body = bytearray(ENCODER_MAGIC)
    body += struct.pack("<8I", ENCODER_VERSION, model.image_size, model.feat_res, model.num_features,
                        model.num_landmarks, model.latent_dim, h1, h2)
    body += struct.pack("<4d", model.scale_ref, *model.trans_ref, model.trans_span)
    for arr in (model.frozen["A"], model.frozen["a"], *(model.params[k] for k in TRAINABLE)):
        body += np.ascontiguousarray(arr, dtype="<f8").tobytes()
    body += hashlib.sha256(body).digest()
    Path(path).write_bytes(bytes(body))


def load_encoder(path) -> EncoderModel:
    raw = Path(path).read_bytes()
    if len(raw) < 8 + 32 + 32 + 32 or raw[:8] != ENCODER_MAGIC:
        raise ValueError(f"{path}: not an encoder file")
    body, digest = raw[:-32], raw[-32:]
    version, size, res, F, K, d, h1, h2 = struct.unpack_from("<8I", body, 8)
    if version != ENCODER_VERSION:
        raise ValueError(f"{path}: unsupported encoder version {version}")
    n_in = res * res * 3
    shapes = [(F, n_in), (F,), (F + 2 * K, h1), (h1,), (h1, h2), (h2,), (h2, d + 6), (d + 6,)]
    expected = 8 + 32 + 32 + 8 * sum(int(np.prod(s)) for s in shapes)
    if len(body) != expected:
        raise ValueError(f"{path}: truncated or oversized encoder file")
    if hashlib.sha256(body).digest() != digest:
        raise ValueError(f"{path}: checksum mismatch")
    scale_ref, tx, ty, span = struct.unpack_from("<4d", body, 40)
    off = 72
    arrays = []
    for s in shapes:
        cnt = int(np.prod(s))
        arrays.append(np.frombuffer(body, dtype="<f8", count=cnt, offset=off).reshape(s).astype(np.float64))
        off += 8 * cnt
    frozen = {"A": arrays[0], "a": arrays[1]}
    params = dict(zip(TRAINABLE, arrays[2:]))
    return EncoderModel(size, res, d, K, frozen, params, scale_ref, np.array([tx, ty]), span)
