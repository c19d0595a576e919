"""Linear latent face model: z -> (geometry, texture), plus a synthetic identity generator."""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .geomcore import MeshTopology

DECODER_MAGIC = b"FDAPTDEC"
DECODER_VERSION = 1

# Face proxy layout on a unit square (x right, y down, camera looks along +z).
# Mean geometry is then stretched by FACE_EXTENT, so a unit-norm basis column
# is a few-pixel expression change rather than a mesh fold.
HALF_WIDTH = 0.5
FACE_EXTENT = 4.0
# pixels per model unit that make the face about 80 px wide
NOMINAL_SCALE = 80.0 / FACE_EXTENT
UV_MARGIN = 0.03
LANDMARK_SITES = [
    (-0.25, -0.08), (-0.10, -0.08), (0.10, -0.08), (0.25, -0.08),  # eye corners
    (0.0, 0.05),                                                   # nose tip
    (-0.14, 0.25), (0.14, 0.25),                                   # mouth corners
    (0.0, 0.38),                                                   # chin
]
MARKER_SITES = [(-0.30, 0.12), (0.32, 0.14), (0.05, -0.30), (-0.20, 0.34), (0.22, -0.26)]


@dataclass(eq=False)
class DecoderModel:
    geom_mean: np.ndarray      # (G, 3)
    geom_basis: np.ndarray     # (G, 3, d)
    tex_mean: np.ndarray       # (T, T, 3)
    tex_basis: np.ndarray      # (T, T, 3, d)
    topology: MeshTopology
    landmark_indices: np.ndarray
    marker_indices: np.ndarray
    _cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self.landmark_indices = np.asarray(self.landmark_indices, dtype=np.int64)
        self.marker_indices = np.asarray(self.marker_indices, dtype=np.int64)
        if set(self.landmark_indices) & set(self.marker_indices):
            raise ValueError("landmark and marker vertices must be disjoint")
        G = len(self.geom_mean)
        for idx in (self.landmark_indices, self.marker_indices):
            if np.any(idx < 0) or np.any(idx >= G):
                raise IndexError("vertex index out of range")
        if np.any(self.topology.triangles >= G):
            raise IndexError("triangle references a missing vertex")

    @property
    def latent_dim(self) -> int:
        return self.geom_basis.shape[2]

    @property
    def tex_size(self) -> int:
        return self.tex_mean.shape[0]

    @property
    def num_vertices(self) -> int:
        return self.geom_mean.shape[0]

    def _check(self, z) -> np.ndarray:
        z = np.asarray(z, dtype=np.float64)
        if z.shape != (self.latent_dim,):
            raise ValueError(f"latent code must have shape ({self.latent_dim},), got {z.shape}")
        return z

    def decode_geometry(self, z) -> np.ndarray:
        return self.geom_mean + self.geom_basis @ self._check(z)

    def decode_texture_raw(self, z) -> np.ndarray:
        return self.tex_mean + self.tex_basis @ self._check(z)

    def decode_texture(self, z) -> np.ndarray:
        return np.clip(self.decode_texture_raw(z), 0.0, 1.0)

    def decode(self, z):
        """Geometry (G, 3) and clamped texture (T, T, 3) for latent code ``z``."""
        return self.decode_geometry(z), self.decode_texture(z)

    # Per-texel views used by the unwrap/loss path; computed once.
    @cached_property
    def texel_vertex_ids(self):
        return self.topology.texel_weights()

    @cached_property
    def texel_mean_position(self) -> np.ndarray:
        vid, w = self.texel_vertex_ids
        return np.einsum("nk,nkc->nc", w, self.geom_mean[vid])

    @cached_property
    def texel_position_basis(self) -> np.ndarray:
        vid, w = self.texel_vertex_ids
        return np.einsum("nk,nkcd->ncd", w, self.geom_basis[vid])

    def texel_positions(self, z) -> np.ndarray:
        """3D positions of the charted texels, linear in ``z``."""
        return self.texel_mean_position + self.texel_position_basis @ self._check(z)


def landmark_positions(geom, indices) -> np.ndarray:
    geom = np.asarray(geom)
    indices = np.asarray(indices, dtype=np.int64)
    if np.any(indices < 0) or np.any(indices >= len(geom)):
        raise IndexError("landmark index out of range")
    return geom[indices]


def landmark_positions_vjp(grad, indices, num_vertices: int) -> np.ndarray:
    """Scatter ``dL/d(landmarks)`` back onto the full vertex array."""
    out = np.zeros((num_vertices, 3))
    np.add.at(out, np.asarray(indices, dtype=np.int64), grad)
    return out


def _smooth_field(rng, n, sigma, channels=1):
    f = rng.standard_normal((n, n, channels))
    f = gaussian_filter(f, sigma=(sigma, sigma, 0), mode="reflect")
    return f / (np.abs(f).max() + 1e-12)


def _height(x, y):
    dome = 0.12 * (1.0 - (x ** 2 + y ** 2) / (2 * HALF_WIDTH ** 2))
    nose = 0.16 * np.exp(-(x ** 2 / (2 * 0.06 ** 2) + (y - 0.02) ** 2 / (2 * 0.12 ** 2)))
    brows = sum(0.035 * np.exp(-((x - sx) ** 2 / (2 * 0.09 ** 2) + (y + 0.17) ** 2 / (2 * 0.03 ** 2)))
                for sx in (-0.18, 0.18))
    chin = 0.04 * np.exp(-(x ** 2 / (2 * 0.1 ** 2) + (y - 0.38) ** 2 / (2 * 0.06 ** 2)))
    return dome + nose + brows + chin


def _nearest_vertex(xy, site, taken):
    d = np.sum((xy - np.asarray(site)) ** 2, axis=1)
    for v in np.argsort(d):
        if int(v) not in taken:
            return int(v)
    raise RuntimeError("no free vertex")


def _uv_of(x, y):
    s = 1.0 - 2 * UV_MARGIN
    return UV_MARGIN + s * (x / (2 * HALF_WIDTH) + 0.5), UV_MARGIN + s * (y / (2 * HALF_WIDTH) + 0.5)


def _blob(u, v, cu, cv, su, sv):
    return np.exp(-((u - cu) ** 2 / (2 * su ** 2) + (v - cv) ** 2 / (2 * sv ** 2)))


def synth_identity(seed: int = 0, d: int = 16, T: int = 64, grid_n: int = 21, speckles: int = 150) -> DecoderModel:
    """Deterministic synthetic identity on a ``grid_n x grid_n`` heightfield face proxy.

    Geometry bases are smooth random fields over the whole face; texture bases
    are smooth fields under a Gaussian window at a random site.  Every latent
    column has unit Frobenius norm.
    """
    if grid_n < 5:
        raise ValueError("grid_n must be at least 5")
    rng = np.random.default_rng(seed)
    n = grid_n
    lin = np.linspace(-HALF_WIDTH, HALF_WIDTH, n)
    gx, gy = np.meshgrid(lin, lin)  # rows follow y
    x, y = gx.ravel(), gy.ravel()
    geom_mean = np.stack([x, y, -_height(x, y)], axis=1)

    tris = []
    for r in range(n - 1):
        for c in range(n - 1):
            v00, v01 = r * n + c, r * n + c + 1
            v10, v11 = (r + 1) * n + c, (r + 1) * n + c + 1
            tris.append((v00, v10, v01))
            tris.append((v01, v10, v11))
    tris = np.array(tris, dtype=np.int64)
    # wind so the unposed face points at the camera (negative signed area in image space)
    a, b, c = (geom_mean[tris[:, k], :2] for k in range(3))
    area = (b[:, 0] - a[:, 0]) * (c[:, 1] - a[:, 1]) - (b[:, 1] - a[:, 1]) * (c[:, 0] - a[:, 0])
    flip = area > 0
    tris[flip] = tris[flip][:, [0, 2, 1]]

    u, v = _uv_of(x, y)
    topology = MeshTopology(tris, np.stack([u, v], axis=1), T)

    # geometry basis: smooth fields on the vertex grid, faded towards the border
    # with a smoothstep ramp (a linear ramp folds triangles at the corners)
    fade = np.clip((HALF_WIDTH - np.maximum(np.abs(gx), np.abs(gy))) / 0.4, 0.0, 1.0)
    fade = fade * fade * (3.0 - 2.0 * fade)
    geom_basis = np.zeros((n * n, 3, d))
    for k in range(d):
        fld = _smooth_field(rng, n, sigma=n / 6.0, channels=3) * fld_weights(rng)
        fld = fld * fade[..., None]
        col = fld.reshape(n * n, 3)
        geom_basis[:, :, k] = col / np.linalg.norm(col)

    # texture: skin base, eyes, brows, mouth, freckles; all smooth at texel scale
    ti = (np.arange(T) + 0.5) / T
    tu, tv = np.meshgrid(ti, ti)
    base = np.array([0.72, 0.52, 0.42])
    shade = 0.08 * _smooth_field(rng, T, sigma=T / 8.0)
    tex = np.broadcast_to(base, (T, T, 3)) + shade
    for ex in (-0.175, 0.175):
        cu, cv = _uv_of(ex, -0.08)
        tex = tex - 0.35 * _blob(tu, tv, cu, cv, 0.035, 0.018)[..., None] * np.array([1.0, 1.0, 0.9])
        bu, bv = _uv_of(ex, -0.17)
        tex = tex - 0.25 * _blob(tu, tv, bu, bv, 0.06, 0.012)[..., None]
    mu, mv = _uv_of(0.0, 0.25)
    tex = tex + 0.22 * _blob(tu, tv, mu, mv, 0.09, 0.02)[..., None] * np.array([0.3, -0.6, -0.5])
    for _ in range(40):
        cu, cv = rng.uniform(0.1, 0.9, size=2)
        s = rng.uniform(1.4, 2.2) / T
        tex = tex + rng.uniform(-0.12, 0.12) * _blob(tu, tv, cu, cv, s, s)[..., None] * np.array([1.0, 0.9, 0.8])
    # dense multicolour speckle: gives every patch trackable detail and spreads colours over all three axes
    for _ in range(speckles):
        cu, cv = rng.uniform(0.05, 0.95, size=2)
        s = rng.uniform(0.8, 1.6) / T
        tex = tex + rng.uniform(-0.3, 0.3, size=3) * _blob(tu, tv, cu, cv, s, s)[..., None]
    tex_mean = np.clip(tex, 0.05, 0.95)

    tex_basis = np.zeros((T, T, 3, d))
    for k in range(d):
        fld = _smooth_field(rng, T, sigma=T / 10.0, channels=3)
        cu, cv = rng.uniform(0.2, 0.8, size=2)
        fld = fld * np.exp(-((tu - cu) ** 2 + (tv - cv) ** 2) / (2 * 0.12 ** 2))[..., None]
        tex_basis[..., k] = fld / np.linalg.norm(fld)

    xy = geom_mean[:, :2]
    taken: set[int] = set()
    landmarks = []
    for site in LANDMARK_SITES:
        landmarks.append(_nearest_vertex(xy, site, taken))
        taken.add(landmarks[-1])
    markers = []
    for site in MARKER_SITES:
        markers.append(_nearest_vertex(xy, site, taken))
        taken.add(markers[-1])

    return DecoderModel(geom_mean * FACE_EXTENT, geom_basis, tex_mean, tex_basis, topology,
                        np.array(landmarks), np.array(markers))


def fld_weights(rng) -> np.ndarray:
    # expressions move mostly in the image plane, with some depth
    return np.array([1.0, 1.0, 0.5]) * rng.uniform(0.5, 1.0, size=3)


def save_decoder(model: DecoderModel, path) -> None:
    """Binary layout (little-endian):

    magic ``FDAPTDEC`` | u32 version | u32 d, G, T, K, M, F | f64 geom_mean (G,3)
    | f64 geom_basis (G,3,d) | f64 tex_mean (T,T,3) | f64 tex_basis (T,T,3,d)
    | f64 uv (G,2) | i64 triangles (F,3) | i64 landmarks (K) | i64 markers (M)

    All arrays are C-order.  The texel table is rebuilt from uv on load.
    """
    d, G, T = model.latent_dim, model.num_vertices, model.tex_size
    K, M, F = len(model.landmark_indices), len(model.marker_indices), len(model.topology.triangles)
    with open(path, "wb") as fh:
        fh.write(DECODER_MAGIC)
        fh.write(struct.pack("<7I", DECODER_VERSION, d, G, T, K, M, F))
        for arr, dt in ((model.geom_mean, "<f8"), (model.geom_basis, "<f8"), (model.tex_mean, "<f8"),
                        (model.tex_basis, "<f8"), (model.topology.uv, "<f8"),
                        (model.topology.triangles, "<i8"), (model.landmark_indices, "<i8"),
                        (model.marker_indices, "<i8")):
            fh.write(np.ascontiguousarray(arr, dtype=dt).tobytes())


def load_decoder(path) -> DecoderModel:
    raw = Path(path).read_bytes()
    if raw[:8] != DECODER_MAGIC:
        raise ValueError(f"{path}: not a decoder file")
    version, d, G, T, K, M, F = struct.unpack_from("<7I", raw, 8)
    if version != DECODER_VERSION:
        raise ValueError(f"{path}: unsupported decoder version {version}")
    off = 8 + 28
    shapes = [((G, 3), "<f8"), ((G, 3, d), "<f8"), ((T, T, 3), "<f8"), ((T, T, 3, d), "<f8"),
              ((G, 2), "<f8"), ((F, 3), "<i8"), ((K,), "<i8"), ((M,), "<i8")]
    arrays = []
    for shape, dt in shapes:
        nbytes = int(np.prod(shape)) * 8
        if off + nbytes > len(raw):
            raise ValueError(f"{path}: truncated decoder file")
        arrays.append(np.frombuffer(raw, dtype=dt, count=int(np.prod(shape)), offset=off).reshape(shape).copy())
        off += nbytes
    gm, gb, tm, tb, uv, tris, lm, mk = arrays
    return DecoderModel(gm, gb, tm, tb, MeshTopology(tris, uv, T), lm, mk)
