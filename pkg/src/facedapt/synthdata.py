"""Synthetic two-domain corpus.

*Lab* data: several fixed camera views per time step, neutral colour, plain
background, exact ground truth.  *Wild* data: one camera, global colour cast,
brightness change, static clutter, sensor noise, noisy landmark detections,
and held-out marker annotations for evaluation.

Dataset directory layout (all CSVs have a header row, values written with
``repr`` so they round-trip exactly)::

    dataset.txt              key=value: kind, frames, views, image_size, latent_dim, landmarks
    decoder.bin              face model (see facemodel.save_decoder), marker indices stripped
    frames/000000.ppm        wild frames (P6, 8-bit)
    frames/000000_v0.ppm     lab frames, one file per view
    landmarks.csv            frame,view,k,x,y      (detections for wild, exact for lab)
    markers.csv              frame,m,vertex,x,y    (wild only; evaluation only)
    lab_gt.csv               frame,view,z0..z{d-1},scale,ex,ey,ez,tx,ty   (lab only)
    sidecar_gt.bin           optional wild ground truth, see save_sidecar
"""
from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .facemodel import NOMINAL_SCALE, DecoderModel, load_decoder, save_decoder
from .geomcore import HeadPose, apply_pose, pose_project
from .raster import read_ppm, render, write_ppm

SIDECAR_MAGIC = b"FDAPTGT\x00"


@dataclass
class DomainSpec:
    color_matrix: np.ndarray = field(default_factory=lambda: np.array(
        [[0.92, 0.10, 0.00], [0.06, 0.80, 0.08], [0.00, 0.12, 0.68]]))
    brightness: float = 0.9
    clutter_seed: int | None = 11     # None: plain background
    noise_sigma: float = 0.02
    detect_sigma: float = 1.0
    z_step: float = 0.06              # trajectory speed in latent space
    pose_step: float = 1.0            # trajectory speed multiplier for the head pose

    def __post_init__(self):
        self.color_matrix = np.asarray(self.color_matrix, dtype=np.float64).reshape(3, 3)
        if np.linalg.cond(self.color_matrix) >= 20:
            raise ValueError("colour matrix must have condition number < 20")

    @classmethod
    def identity(cls, **kw) -> "DomainSpec":
        base = dict(color_matrix=np.eye(3), brightness=1.0, clutter_seed=None, noise_sigma=0.0)
        base.update(kw)
        return cls(**base)


def read_domain_spec(path) -> DomainSpec:
    """``key = value`` lines; ``color_matrix`` takes 9 numbers (row-major), ``clutter_seed = none`` disables clutter."""
    kw = {}
    for line in Path(path).read_text().splitlines():
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, _, val = line.partition("=")
        key, val = key.strip(), val.strip()
        if key == "color_matrix":
            kw[key] = np.array([float(v) for v in val.replace(",", " ").split()])
        elif key == "clutter_seed":
            kw[key] = None if val.lower() == "none" else int(val)
        elif key in ("brightness", "noise_sigma", "detect_sigma", "z_step", "pose_step"):
            kw[key] = float(val)
        else:
            raise ValueError(f"{path}: unknown domain key {key!r}")
    return DomainSpec(**kw)


# ---------------------------------------------------------------------------
# trajectories and backgrounds

def smooth_walk(rng, n: int, dim: int, step: float, rho: float = 0.9, pull: float = 0.02, x0=None):
    """Mean-reverting random walk on the velocity, clipped to [-1, 1].

    Positions integrate an Ornstein-Uhlenbeck velocity, so motion over a few
    frames is close to straight.
    """
    x = np.zeros(dim) if x0 is None else np.array(x0, dtype=np.float64)
    v = np.zeros(dim)
    out = np.empty((n, dim))
    for t in range(n):
        out[t] = x
        v = rho * v + step * np.sqrt(1 - rho ** 2) * rng.standard_normal(dim) - pull * x
        x = np.clip(x + v, -1.0, 1.0)
        v = np.where(np.abs(x) >= 1.0, -0.5 * v, v)
    return out


POSE_RANGE = np.array([0.08, 0.15, 0.25, 0.10, 10.0, 10.0])  # log-scale, ex, ey, ez, tx, ty


REFERENCE_SIZE = 128


def pose_from_walk(w, image_size: int = REFERENCE_SIZE, offset=None) -> HeadPose:
    """Map a unit-range walk sample to a pose; pixel quantities scale with ``image_size``."""
    k = image_size / REFERENCE_SIZE
    p = w * POSE_RANGE
    if offset is not None:
        p = p + offset
    centre = (image_size - 1) / 2.0
    return HeadPose(NOMINAL_SCALE * k * np.exp(p[0]), p[1:4], centre + k * p[4:6])


def clutter_background(size: int, seed: int | None) -> np.ndarray:
    if seed is None:
        return np.full((size, size, 3), 0.5)
    from scipy.ndimage import gaussian_filter

    rng = np.random.default_rng(seed)
    bg = gaussian_filter(rng.uniform(0.1, 0.9, (size, size, 3)), sigma=(6, 6, 0))
    bg = (bg - bg.mean()) * 4.0 + 0.45
    yy, xx = np.mgrid[:size, :size]
    for _ in range(14):
        x0, y0 = rng.integers(0, size, 2)
        w, h = rng.integers(6, size // 3, 2)
        color = rng.uniform(0.05, 0.95, 3)
        bg[(xx >= x0) & (xx < x0 + w) & (yy >= y0) & (yy < y0 + h)] = color
    for _ in range(10):
        cx, cy = rng.uniform(0, size, 2)
        r = rng.uniform(3, 12)
        bg[(xx - cx) ** 2 + (yy - cy) ** 2 < r * r] = rng.uniform(0.05, 0.95, 3)
    return np.clip(bg, 0.0, 1.0)


def quantize(img) -> np.ndarray:
    """Snap to the 8-bit grid so PPM storage is lossless."""
    return np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0


# ---------------------------------------------------------------------------
# datasets

@dataclass
class LabDataset:
    images: np.ndarray    # (N, V, H, W, 3)
    z_gt: np.ndarray      # (N, d)
    poses: np.ndarray     # (N, V, 6)
    k2d: np.ndarray       # (N, V, K, 2)
    decoder: DecoderModel | None = None

    @property
    def frames(self) -> int:
        return self.images.shape[0]

    @property
    def views(self) -> int:
        return self.images.shape[1]

    def subset(self, idx) -> "LabDataset":
        return replace(self, images=self.images[idx], z_gt=self.z_gt[idx], poses=self.poses[idx], k2d=self.k2d[idx])


@dataclass
class WildSequence:
    images: np.ndarray              # (N, H, W, 3)
    k2d: np.ndarray                 # (N, K, 2) detections
    markers_gt: np.ndarray | None = None      # (N, M, 2)
    marker_vertices: np.ndarray | None = None  # (M,)
    z_gt: np.ndarray | None = None             # (N, d), sidecar
    pose_gt: np.ndarray | None = None          # (N, 6), sidecar
    decoder: DecoderModel | None = None

    @property
    def frames(self) -> int:
        return self.images.shape[0]

    def with_images(self, images) -> "WildSequence":
        return replace(self, images=np.asarray(images))


def view_offsets(views: int, spread: float = 0.3) -> np.ndarray:
    """Per-camera pose offsets (log-scale, ex, ey, ez, tx, ty) standing in for fixed lab cameras."""
    off = np.zeros((views, 6))
    if views > 1:
        off[:, 2] = np.linspace(-spread, spread, views)
        off[:, 1] = 0.06 * np.cos(np.arange(views) * np.pi)
        off[:, 4] = np.linspace(-4.0, 4.0, views)
    return off


def generate_lab(decoder: DecoderModel, frames: int = 200, views: int = 3, seed: int = 0,
                 image_size: int = 128, z_step: float = 0.5, pose_step: float = 0.3, z_rho: float = 0.5,
                 z_pull: float = 0.3, view_spread: float = 0.3) -> LabDataset:
    rng = np.random.default_rng(seed)
    d, K = decoder.latent_dim, len(decoder.landmark_indices)
    z = smooth_walk(rng, frames, d, step=z_step, rho=z_rho, pull=z_pull, x0=rng.uniform(-0.5, 0.5, d))
    head = smooth_walk(rng, frames, 6, step=pose_step)
    offsets = view_offsets(views, view_spread)
    bg = clutter_background(image_size, None)
    images = np.empty((frames, views, image_size, image_size, 3))
    poses = np.empty((frames, views, 6))
    k2d = np.empty((frames, views, K, 2))
    for t in range(frames):
        geom, tex = decoder.decode(z[t])
        for v in range(views):
            pose = pose_from_walk(head[t], image_size, offsets[v])
            images[t, v] = quantize(render(geom, tex, pose, decoder.topology, bg))
            poses[t, v] = pose.as_vector()
            k2d[t, v] = pose_project(geom[decoder.landmark_indices], pose)
    return LabDataset(images, z, poses, k2d, decoder)


def apply_domain(image, domain: DomainSpec, rng) -> np.ndarray:
    out = image @ domain.color_matrix.T
    if domain.noise_sigma > 0:
        out = out + domain.noise_sigma * rng.standard_normal(out.shape)
    return quantize(out)


def generate_wild(decoder: DecoderModel, domain: DomainSpec | None = None, frames: int = 150,
                  seed: int = 1, image_size: int = 128) -> WildSequence:
    domain = DomainSpec() if domain is None else domain
    rng = np.random.default_rng(seed)
    d, K = decoder.latent_dim, len(decoder.landmark_indices)
    z = smooth_walk(rng, frames, d, step=domain.z_step, x0=rng.uniform(-0.4, 0.4, d))
    head = smooth_walk(rng, frames, 6, step=0.3 * domain.pose_step)
    noise_rng = np.random.default_rng([seed, 1])
    detect_rng = np.random.default_rng([seed, 2])
    bg = clutter_background(image_size, domain.clutter_seed)
    images = np.empty((frames, image_size, image_size, 3))
    poses = np.empty((frames, 6))
    k2d = np.empty((frames, K, 2))
    markers = np.empty((frames, len(decoder.marker_indices), 2))
    for t in range(frames):
        geom, tex = decoder.decode(z[t])
        pose = pose_from_walk(head[t], image_size)
        img = render(geom, tex, pose, decoder.topology, bg, brightness=domain.brightness)
        images[t] = apply_domain(img, domain, noise_rng)
        poses[t] = pose.as_vector()
        k2d[t] = pose_project(geom[decoder.landmark_indices], pose)
        markers[t] = pose_project(geom[decoder.marker_indices], pose)
    if domain.detect_sigma > 0:
        k2d = k2d + domain.detect_sigma * detect_rng.standard_normal(k2d.shape)
    return WildSequence(images, k2d, markers, decoder.marker_indices.copy(), z, poses, decoder)


# ---------------------------------------------------------------------------
# storage

def _write_meta(path: Path, meta: dict) -> None:
    (path / "dataset.txt").write_text("".join(f"{k}={v}\n" for k, v in meta.items()))


def _read_meta(path: Path) -> dict:
    f = path / "dataset.txt"
    if not f.exists():
        raise FileNotFoundError(f"missing dataset.txt in {path}")
    meta = {}
    for line in f.read_text().splitlines():
        if "=" in line:
            k, v = line.split("=", 1)
            meta[k.strip()] = v.strip()
    return meta


def _training_decoder(decoder: DecoderModel) -> DecoderModel:
    return replace(decoder, marker_indices=np.zeros(0, dtype=np.int64), _cache={})


def save_sidecar(path, z_gt, pose_gt) -> None:
    """``FDAPTGT\\0`` | u32 version=1 | u32 N | u32 d | f64 z (N, d) | f64 pose (N, 6)."""
    z_gt = np.asarray(z_gt, dtype="<f8")
    with open(path, "wb") as fh:
        fh.write(SIDECAR_MAGIC)
        fh.write(struct.pack("<3I", 1, *z_gt.shape))
        fh.write(np.ascontiguousarray(z_gt).tobytes())
        fh.write(np.ascontiguousarray(pose_gt, dtype="<f8").tobytes())


def load_sidecar(path):
    raw = Path(path).read_bytes()
    if raw[:8] != SIDECAR_MAGIC:
        raise ValueError(f"{path}: not a sidecar file")
    _, n, d = struct.unpack_from("<3I", raw, 8)
    if len(raw) != 20 + 8 * n * (d + 6):
        raise ValueError(f"{path}: size does not match header")
    z = np.frombuffer(raw, "<f8", n * d, 20).reshape(n, d).astype(np.float64)
    pose = np.frombuffer(raw, "<f8", n * 6, 20 + 8 * n * d).reshape(n, 6).astype(np.float64)
    return z, pose


def save_dataset(ds, path, with_sidecar: bool = True) -> None:
    path = Path(path)
    (path / "frames").mkdir(parents=True, exist_ok=True)
    if isinstance(ds, LabDataset):
        N, V = ds.frames, ds.views
        _write_meta(path, dict(kind="lab", frames=N, views=V, image_size=ds.images.shape[2],
                               latent_dim=ds.z_gt.shape[1], landmarks=ds.k2d.shape[2]))
        for t in range(N):
            for v in range(V):
                write_ppm(path / "frames" / f"{t:06d}_v{v}.ppm", ds.images[t, v])
        with open(path / "landmarks.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["frame", "view", "k", "x", "y"])
            for t in range(N):
                for v in range(V):
                    for k, (x, y) in enumerate(ds.k2d[t, v]):
                        w.writerow([t, v, k, repr(float(x)), repr(float(y))])
        d = ds.z_gt.shape[1]
        with open(path / "lab_gt.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["frame", "view"] + [f"z{i}" for i in range(d)] + ["scale", "ex", "ey", "ez", "tx", "ty"])
            for t in range(N):
                for v in range(V):
                    w.writerow([t, v] + [repr(float(x)) for x in ds.z_gt[t]] + [repr(float(x)) for x in ds.poses[t, v]])
    elif isinstance(ds, WildSequence):
        N = ds.frames
        _write_meta(path, dict(kind="wild", frames=N, views=1, image_size=ds.images.shape[1],
                               latent_dim=ds.decoder.latent_dim if ds.decoder is not None else 0,
                               landmarks=ds.k2d.shape[1]))
        for t in range(N):
            write_ppm(path / "frames" / f"{t:06d}.ppm", ds.images[t])
        with open(path / "landmarks.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["frame", "view", "k", "x", "y"])
            for t in range(N):
                for k, (x, y) in enumerate(ds.k2d[t]):
                    w.writerow([t, 0, k, repr(float(x)), repr(float(y))])
        if ds.markers_gt is not None:
            with open(path / "markers.csv", "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["frame", "m", "vertex", "x", "y"])
                for t in range(N):
                    for m, (x, y) in enumerate(ds.markers_gt[t]):
                        w.writerow([t, m, int(ds.marker_vertices[m]), repr(float(x)), repr(float(y))])
        if with_sidecar and ds.z_gt is not None:
            save_sidecar(path / "sidecar_gt.bin", ds.z_gt, ds.pose_gt)
    else:
        raise TypeError(f"cannot save {type(ds).__name__}")
    if ds.decoder is not None:
        save_decoder(_training_decoder(ds.decoder), path / "decoder.bin")


def _read_rows(path: Path, name: str):
    f = path / name
    if not f.exists():
        raise FileNotFoundError(f"missing {name} in {path}")
    with open(f, newline="") as fh:
        rows = list(csv.reader(fh))
    return rows[0], rows[1:]


def load_markers(path):
    """``(markers_gt (N, M, 2), marker_vertices (M,))`` from ``markers.csv``."""
    path = Path(path)
    _, rows = _read_rows(path, "markers.csv")
    N = max(int(r[0]) for r in rows) + 1
    M = max(int(r[1]) for r in rows) + 1
    markers = np.empty((N, M, 2))
    verts = np.empty(M, dtype=np.int64)
    for r in rows:
        t, m = int(r[0]), int(r[1])
        verts[m] = int(r[2])
        markers[t, m] = float(r[3]), float(r[4])
    return markers, verts


def load_dataset(path):
    """Load a lab or wild dataset directory written by :func:`save_dataset`."""
    path = Path(path)
    meta = _read_meta(path)
    N, V, K = int(meta["frames"]), int(meta["views"]), int(meta["landmarks"])
    decoder = load_decoder(path / "decoder.bin") if (path / "decoder.bin").exists() else None
    _, rows = _read_rows(path, "landmarks.csv")
    k2d = np.empty((N, V, K, 2))
    for r in rows:
        k2d[int(r[0]), int(r[1]), int(r[2])] = float(r[3]), float(r[4])
    if meta["kind"] == "lab":
        images = np.stack([np.stack([read_ppm(path / "frames" / f"{t:06d}_v{v}.ppm") for v in range(V)])
                           for t in range(N)])
        d = int(meta["latent_dim"])
        _, gt = _read_rows(path, "lab_gt.csv")
        z = np.empty((N, d))
        poses = np.empty((N, V, 6))
        for r in gt:
            t, v = int(r[0]), int(r[1])
            z[t] = [float(x) for x in r[2:2 + d]]
            poses[t, v] = [float(x) for x in r[2 + d:]]
        return LabDataset(images, z, poses, k2d, decoder)
    if meta["kind"] != "wild":
        raise ValueError(f"{path}: unknown dataset kind {meta['kind']!r}")
    images = np.stack([read_ppm(path / "frames" / f"{t:06d}.ppm") for t in range(N)])
    markers = verts = z = pose = None
    if (path / "markers.csv").exists():
        markers, verts = load_markers(path)
    if (path / "sidecar_gt.bin").exists():
        z, pose = load_sidecar(path / "sidecar_gt.bin")
    return WildSequence(images, k2d[:, 0], markers, verts, z, pose, decoder)
