"""Shared tiny configuration: T=16, 5x5 grid, 32x32 images, d=4."""
import numpy as np

from facedapt.encoder import init_encoder
from facedapt.facemodel import FACE_EXTENT, synth_identity
from facedapt.geomcore import HeadPose, pose_project
from facedapt.losses import ColorCorrection, LossWeights, loss_da
from facedapt.raster import render
from facedapt.synthdata import clutter_background
from facedapt.trainer import frame_state

SIZE = 32
SCALE = 0.6 * SIZE / FACE_EXTENT


def tiny_decoder(seed=3):
    return synth_identity(seed=seed, d=4, T=16, grid_n=5, speckles=12)


def tiny_encoder(decoder, seed=0, hidden=(128, 64), num_features=256):
    return init_encoder(decoder.latent_dim, len(decoder.landmark_indices), seed=seed, image_size=SIZE,
                        feat_res=32, num_features=num_features, hidden=hidden, scale_ref=SCALE, trans_span=8.0)


def tiny_frames(decoder, n=2, seed=0):
    """Rendered frames, detected landmarks and the true (z, pose) for a slow random motion."""
    rng = np.random.default_rng(seed)
    bg = clutter_background(SIZE, seed)
    z = np.cumsum(rng.uniform(-0.15, 0.15, (n, decoder.latent_dim)), axis=0)
    imgs, k2d, poses = [], [], []
    for t in range(n):
        pose = HeadPose(SCALE * (1 + 0.03 * t), rng.uniform(-0.15, 0.15, 3), [15.5 + 0.4 * t, 15.5 - 0.3 * t])
        g, tex = decoder.decode(z[t])
        imgs.append(render(g, tex, pose, decoder.topology, bg))
        k2d.append(pose_project(g[decoder.landmark_indices], pose) + rng.normal(0, 0.5, (len(decoder.landmark_indices), 2)))
        poses.append(pose.as_vector())
    return np.array(imgs), np.array(k2d), z, np.array(poses)


class PairOracle:
    """loss_da of a frame pair as a function of encoder parameters and colour matrix.

    Confidences come from the starting point and are then frozen, and the
    colour matrix is held at ``matrix`` instead of being refit.
    """

    def __init__(self, encoder, decoder, images, k2d, weights=None, matrix=None, tau=0.2):
        self.enc, self.dec = encoder, decoder
        self.images, self.k2d = images, k2d
        self.weights = weights or LossWeights()
        self.matrix = np.eye(3) if matrix is None else np.asarray(matrix, dtype=float)
        self.tau = tau
        self.feats = encoder.features(images)
        self.lm_in = encoder.landmark_input(k2d)
        z, pose, _ = encoder.forward(self.feats, self.lm_in)
        self.frozen = tuple(frame_state((z[i], pose[i]), decoder, images[i], k2d[i], tau).unwrapped for i in range(2))

    def evaluate(self, matrix=None):
        z, pose, state = self.enc.forward(self.feats, self.lm_in)
        fs = [frame_state((z[i], pose[i]), self.dec, self.images[i], self.k2d[i], self.tau, self.frozen[i])
              for i in range(2)]
        cc = ColorCorrection(self.matrix if matrix is None else matrix)
        return loss_da(fs[0], fs[1], self.dec, cc, self.weights, self.tau), state

    def analytic(self):
        da, state = self.evaluate()
        grads = self.enc.backward(state, np.stack([da.grad_z_prev, da.grad_z]),
                                  np.stack([da.grad_pose_prev, da.grad_pose]))
        return da, grads

    def numeric(self, h=1e-5):
        grads = {}
        for name, p in self.enc.params.items():
            g = np.zeros_like(p)
            flat, gf = p.reshape(-1), g.reshape(-1)
            for k in range(flat.size):
                old = flat[k]
                flat[k] = old + h
                up = self.evaluate()[0].total
                flat[k] = old - h
                dn = self.evaluate()[0].total
                flat[k] = old
                gf[k] = (up - dn) / (2 * h)
            grads[name] = g
        gm = np.zeros((3, 3))
        for i in range(3):
            for j in range(3):
                m = self.matrix.copy()
                m[i, j] += h
                up = self.evaluate(m)[0].total
                m[i, j] -= 2 * h
                gm[i, j] = (up - self.evaluate(m)[0].total) / (2 * h)
        return grads, gm


def rel_err(a, b):
    a, b = np.ravel(a), np.ravel(b)
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-300)
    return float(np.linalg.norm(a - b) / scale)
