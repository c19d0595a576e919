"""Software z-buffer rasterizer, renderer and texture unwrapping.

Gradients flow through projected texel coordinates only.  Visibility,
z-buffer outcome and confidence are constants inside a differentiation pass;
pass a previous :class:`Unwrapped` as ``frozen`` to reuse them exactly.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .geomcore import HeadPose, MeshTopology, PoseGrad, apply_pose, cover_triangles, pose_project_vjp

DEFAULT_TAU = 0.2
DEPTH_TOL = 0.5  # posed-depth slack when testing a texel against the z-buffer


def sample_bilinear(image, x, y):
    """Bilinear lookup with clamp-to-edge.

    ``image`` is (H, W, C); ``x``/``y`` are arrays of pixel coordinates (pixel
    ``(r, c)`` sits at ``x=c, y=r``).  Returns ``(values, d/dx, d/dy)``, each
    (N, C).  Derivatives are zero where a coordinate is clamped.
    """
    image = np.asarray(image, dtype=np.float64)
    H, W = image.shape[:2]
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    xc = np.clip(x, 0.0, W - 1)
    yc = np.clip(y, 0.0, H - 1)
    x0 = np.minimum(np.floor(xc).astype(np.int64), max(W - 2, 0))
    y0 = np.minimum(np.floor(yc).astype(np.int64), max(H - 2, 0))
    x1 = np.minimum(x0 + 1, W - 1)
    y1 = np.minimum(y0 + 1, H - 1)
    fx = (xc - x0)[:, None]
    fy = (yc - y0)[:, None]
    i00, i01 = image[y0, x0], image[y0, x1]
    i10, i11 = image[y1, x0], image[y1, x1]
    top = i00 + fx * (i01 - i00)
    bot = i10 + fx * (i11 - i10)
    val = top + fy * (bot - top)
    inx = ((x >= 0) & (x <= W - 1))[:, None]
    iny = ((y >= 0) & (y <= H - 1))[:, None]
    gx = np.where(inx, (1 - fy) * (i01 - i00) + fy * (i11 - i10), 0.0)
    gy = np.where(iny, bot - top, 0.0)
    return val, gx, gy


@dataclass
class Raster:
    tri_id: np.ndarray   # (H, W), -1 where empty
    bary: np.ndarray     # (H, W, 3)
    depth: np.ndarray    # (H, W), +inf where empty


def rasterize(posed, triangles, height: int, width: int) -> Raster:
    """Z-buffer the posed mesh; smaller z is nearer the camera."""
    posed = np.asarray(posed, dtype=np.float64)
    rows, cols, tri_ids, bary = cover_triangles(posed[:, :2], triangles, width, height)
    tri_id = np.full((height, width), -1, dtype=np.int64)
    out_bary = np.zeros((height, width, 3))
    depth = np.full((height, width), np.inf)
    if len(rows):
        z = np.einsum("nk,nk->n", bary, posed[np.asarray(triangles)[tri_ids], 2])
        flat = rows * width + cols
        order = np.lexsort((tri_ids, z, flat))
        flat, z, tri_ids, bary = flat[order], z[order], tri_ids[order], bary[order]
        first = np.r_[True, flat[1:] != flat[:-1]]
        tri_id.ravel()[flat[first]] = tri_ids[first]
        out_bary.reshape(-1, 3)[flat[first]] = bary[first]
        depth.ravel()[flat[first]] = z[first]
    return Raster(tri_id, out_bary, depth)


def render(geom, tex, pose: HeadPose, topology: MeshTopology, background, brightness: float = 1.0):
    """Render the textured face over ``background`` (H, W, 3)."""
    background = np.asarray(background, dtype=np.float64)
    H, W = background.shape[:2]
    posed = apply_pose(geom, pose)
    ras = rasterize(posed, topology.triangles, H, W)
    img = background.copy()
    mask = ras.tri_id >= 0
    if mask.any():
        T = tex.shape[0]
        verts = topology.triangles[ras.tri_id[mask]]
        uv = np.einsum("nk,nkc->nc", ras.bary[mask], topology.uv[verts])
        col, _, _ = sample_bilinear(tex, uv[:, 0] * T - 0.5, uv[:, 1] * T - 0.5)
        img[mask] = brightness * col
    return np.clip(img, 0.0, 1.0)


def texel_world_position(geom, topology: MeshTopology, i: int, j: int):
    """3D point of texel (i, j) on ``geom``; ``None`` if the texel is outside the chart."""
    k = i * topology.tex_size + j
    tri = topology.texel_tri[k]
    if tri < 0:
        return None
    return topology.texel_bary[k] @ np.asarray(geom)[topology.triangles[tri]]


@dataclass
class Unwrapped:
    """Observed texture and confidence plus what the backward pass needs."""

    obs: np.ndarray          # (T, T, 3)
    conf: np.ndarray         # (T, T)
    charted: np.ndarray      # flat texel ids of the chart
    texel_pos: np.ndarray    # (n, 3) unposed texel positions
    proj: np.ndarray         # (n, 2) projected coordinates
    grad_x: np.ndarray       # (n, 3) image derivative at proj
    grad_y: np.ndarray
    pose: HeadPose

    @property
    def nonzero_count(self) -> int:
        return int(np.count_nonzero(self.conf > 0))


def _texel_visibility(posed, topology, ras, proj, tri, H, W):
    """Cosine confidence (before thresholding) of each charted texel."""
    tris = topology.triangles[tri]
    p0, p1, p2 = posed[tris[:, 0]], posed[tris[:, 1]], posed[tris[:, 2]]
    normal = np.cross(p1 - p0, p2 - p0)
    norm = np.linalg.norm(normal, axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        cosine = np.where(norm > 0, -normal[:, 2] / norm, 0.0)
    ok = (cosine > 0) & (proj[:, 0] >= 0) & (proj[:, 0] <= W - 1) & (proj[:, 1] >= 0) & (proj[:, 1] <= H - 1)
    ok &= np.all(np.isfinite(proj), axis=1)
    x0 = np.clip(np.floor(np.nan_to_num(proj[:, 0])).astype(np.int64), 0, max(W - 2, 0))
    y0 = np.clip(np.floor(np.nan_to_num(proj[:, 1])).astype(np.int64), 0, max(H - 2, 0))
    # every pixel of the bilinear footprint must show this surface
    a, b, c = p0[:, :2], p1[:, :2], p2[:, :2]
    area = (b[:, 0] - a[:, 0]) * (c[:, 1] - a[:, 1]) - (b[:, 1] - a[:, 1]) * (c[:, 0] - a[:, 0])
    safe = np.where(np.abs(area) > 1e-12, area, 1.0)
    for dy in (0, 1):
        for dx in (0, 1):
            px = np.minimum(x0 + dx, W - 1)
            py = np.minimum(y0 + dy, H - 1)
            w0 = ((b[:, 0] - px) * (c[:, 1] - py) - (b[:, 1] - py) * (c[:, 0] - px)) / safe
            w1 = ((c[:, 0] - px) * (a[:, 1] - py) - (c[:, 1] - py) * (a[:, 0] - px)) / safe
            plane_z = w0 * p0[:, 2] + w1 * p1[:, 2] + (1 - w0 - w1) * p2[:, 2]
            ok &= (ras.tri_id[py, px] >= 0) & (plane_z <= ras.depth[py, px] + DEPTH_TOL)
    return np.where(ok, cosine, 0.0)


def unwrap(image, geom, pose: HeadPose, topology: MeshTopology, tau: float = DEFAULT_TAU,
           frozen: Unwrapped | None = None, texel_pos=None) -> Unwrapped:
    """Resample ``image`` into UV space through ``geom`` placed by ``pose``.

    ``texel_pos`` may supply precomputed unposed texel positions for the
    charted texels (the decoder caches a basis for them).
    """
    if not 0.0 <= tau < 1.0:
        raise ValueError("tau must lie in [0, 1)")
    image = np.asarray(image, dtype=np.float64)
    geom = np.asarray(geom, dtype=np.float64)
    H, W = image.shape[:2]
    T = topology.tex_size
    charted = topology.charted
    tri = topology.texel_tri[charted]
    if texel_pos is None:
        verts = topology.triangles[tri]
        texel_pos = np.einsum("nk,nkc->nc", topology.texel_bary[charted], geom[verts])
    proj = apply_pose(texel_pos, pose)[:, :2]

    if frozen is None:
        posed = apply_pose(geom, pose)
        ras = rasterize(posed, topology.triangles, H, W)
        conf_c = _texel_visibility(posed, topology, ras, proj, tri, H, W)
        conf_c[conf_c < tau] = 0.0
        conf = np.zeros(T * T)
        conf[charted] = conf_c
        conf = conf.reshape(T, T)
    else:
        conf = frozen.conf
        conf_c = conf.ravel()[charted]

    val, gx, gy = sample_bilinear(image, proj[:, 0], proj[:, 1])
    live = (conf_c > 0)[:, None]
    obs = np.zeros((T * T, 3))
    obs[charted] = np.where(live, val, 0.0)
    return Unwrapped(obs.reshape(T, T, 3), conf, charted, texel_pos, proj,
                     np.where(live, gx, 0.0), np.where(live, gy, 0.0), pose)


def unwrap_vjp(unw: Unwrapped, grad_obs) -> PoseGrad:
    """Pull ``dL/d obs`` (T, T, 3) back to charted texel positions and the pose."""
    g = np.asarray(grad_obs).reshape(-1, 3)[unw.charted]
    grad_proj = np.stack([np.sum(g * unw.grad_x, axis=1), np.sum(g * unw.grad_y, axis=1)], axis=1)
    return pose_project_vjp(unw.texel_pos, unw.pose, grad_proj)


# ---------------------------------------------------------------------------
# image files

FLOAT_IMAGE_MAGIC = b"FDAPTIMG"


def write_ppm(path, image) -> None:
    """8-bit binary PPM (P6): header ``P6\\n<W> <H>\\n255\\n`` then RGB bytes row-major."""
    img = np.asarray(image, dtype=np.float64)
    H, W = img.shape[:2]
    data = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{W} {H}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def read_ppm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError(f"{path}: truncated PPM header")
        tokens.append(raw[start:pos])
    if tokens[0] != b"P6" or int(tokens[3]) != 255:
        raise ValueError(f"{path}: only 8-bit P6 images are supported")
    W, H = int(tokens[1]), int(tokens[2])
    pos += 1
    data = np.frombuffer(raw, dtype=np.uint8, count=W * H * 3, offset=pos) if len(raw) - pos >= W * H * 3 else None
    if data is None:
        raise ValueError(f"{path}: truncated PPM data")
    return data.reshape(H, W, 3).astype(np.float64) / 255.0


def save_float_image(path, image) -> None:
    """``FDAPTIMG`` | u32 H | u32 W | u32 C | f64 pixels, C-order, little-endian."""
    img = np.asarray(image, dtype="<f8")
    if img.ndim == 2:
        img = img[..., None]
    with open(path, "wb") as fh:
        fh.write(FLOAT_IMAGE_MAGIC)
        fh.write(struct.pack("<3I", *img.shape))
        fh.write(np.ascontiguousarray(img).tobytes())


def load_float_image(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:8] != FLOAT_IMAGE_MAGIC:
        raise ValueError(f"{path}: not a float image")
    H, W, C = struct.unpack_from("<3I", raw, 8)
    if len(raw) != 20 + H * W * C * 8:
        raise ValueError(f"{path}: size does not match header")
    return np.frombuffer(raw, dtype="<f8", offset=20).reshape(H, W, C).astype(np.float64)
