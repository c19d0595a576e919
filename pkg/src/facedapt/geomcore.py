"""Rotations, rigid head pose and weak-perspective projection.

Conventions used everywhere in the package:

* Euler angles are applied X first, then Y, then Z, so ``R = Rz @ Ry @ Rx``.
* Image coordinates have the origin at the top-left pixel centre, x to the
  right, y down, in pixels.  The camera looks along +z, so smaller posed z is
  nearer to the camera.
* Projection is weak perspective: scale, rotate, translate in x/y, then drop z.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class HeadPose:
    """Six-parameter rigid pose: scale (pixels per model unit), Euler angles, 2D translation."""

    scale: float = 1.0
    euler: np.ndarray = field(default_factory=lambda: np.zeros(3))
    trans: np.ndarray = field(default_factory=lambda: np.zeros(2))

    def __post_init__(self):
        self.scale = float(self.scale)
        self.euler = np.asarray(self.euler, dtype=np.float64).reshape(3)
        self.trans = np.asarray(self.trans, dtype=np.float64).reshape(2)
        if not self.scale > 0:
            raise ValueError(f"scale must be positive, got {self.scale}")
        if not (np.all(np.isfinite(self.euler)) and np.all(np.isfinite(self.trans))):
            raise ValueError("pose parameters must be finite")

    def as_vector(self) -> np.ndarray:
        return np.concatenate([[self.scale], self.euler, self.trans])

    @classmethod
    def from_vector(cls, v) -> "HeadPose":
        v = np.asarray(v, dtype=np.float64)
        return cls(v[0], v[1:4], v[4:6])


def _axis_rotations(euler):
    ax, ay, az = euler
    cx, sx = np.cos(ax), np.sin(ax)
    cy, sy = np.cos(ay), np.sin(ay)
    cz, sz = np.cos(az), np.sin(az)
    rx = np.array([[1.0, 0.0, 0.0], [0.0, cx, -sx], [0.0, sx, cx]])
    ry = np.array([[cy, 0.0, sy], [0.0, 1.0, 0.0], [-sy, 0.0, cy]])
    rz = np.array([[cz, -sz, 0.0], [sz, cz, 0.0], [0.0, 0.0, 1.0]])
    drx = np.array([[0.0, 0.0, 0.0], [0.0, -sx, -cx], [0.0, cx, -sx]])
    dry = np.array([[-sy, 0.0, cy], [0.0, 0.0, 0.0], [-cy, 0.0, -sy]])
    drz = np.array([[-sz, -cz, 0.0], [cz, -sz, 0.0], [0.0, 0.0, 0.0]])
    return (rx, ry, rz), (drx, dry, drz)


def euler_to_rotation(euler) -> np.ndarray:
    """Rotation matrix for X-then-Y-then-Z Euler angles (radians)."""
    (rx, ry, rz), _ = _axis_rotations(np.asarray(euler, dtype=np.float64))
    return rz @ ry @ rx


def euler_rotation_derivatives(euler) -> np.ndarray:
    """Partial derivatives dR/d(euler_k), stacked as a (3, 3, 3) array indexed [k]."""
    (rx, ry, rz), (drx, dry, drz) = _axis_rotations(np.asarray(euler, dtype=np.float64))
    return np.stack([rz @ ry @ drx, rz @ dry @ rx, drz @ ry @ rx])


def apply_pose(points, pose: HeadPose) -> np.ndarray:
    """``scale * R @ p + (tx, ty, 0)`` for every row of ``points`` (N, 3)."""
    points = np.asarray(points, dtype=np.float64)
    rot = euler_to_rotation(pose.euler)
    out = pose.scale * points @ rot.T
    out[..., 0] += pose.trans[0]
    out[..., 1] += pose.trans[1]
    return out


def weak_project(points) -> np.ndarray:
    """Drop the z coordinate: the projection matrix [[1,0,0],[0,1,0]]."""
    return np.asarray(points)[..., :2].copy()


def pose_project(points, pose: HeadPose) -> np.ndarray:
    return weak_project(apply_pose(points, pose))


@dataclass
class PoseGrad:
    """Gradient of a scalar w.r.t. the inputs of :func:`pose_project`."""

    points: np.ndarray
    scale: float
    euler: np.ndarray
    trans: np.ndarray

    def pose_vector(self) -> np.ndarray:
        return np.concatenate([[self.scale], self.euler, self.trans])


def pose_project_vjp(points, pose: HeadPose, grad_2d) -> PoseGrad:
    """Pull back ``dL/d(projected points)`` (N, 2) onto points and pose parameters."""
    points = np.asarray(points, dtype=np.float64)
    grad_2d = np.asarray(grad_2d, dtype=np.float64)
    rot = euler_to_rotation(pose.euler)
    drot = euler_rotation_derivatives(pose.euler)
    # only the first two rows of R reach the image
    g_pts = pose.scale * grad_2d @ rot[:2]
    rotated = points @ rot[:2].T
    g_scale = float(np.sum(grad_2d * rotated))
    # dL/dR[:2] = s * grad^T @ points
    g_rot = pose.scale * grad_2d.T @ points
    g_euler = np.einsum("ij,kij->k", g_rot, drot[:, :2, :])
    g_trans = grad_2d.sum(axis=0)
    return PoseGrad(g_pts, g_scale, g_euler, g_trans)


def cover_triangles(xy, tris, width: int, height: int, eps: float = 1e-9, max_candidates: int = 2_000_000):
    """Enumerate integer lattice points covered by 2D triangles.

    ``xy`` holds vertex positions in lattice units (lattice point ``(c, r)`` is
    column c, row r).  Returns ``(rows, cols, tri_ids, bary)`` for every
    (lattice point, triangle) pair where the point lies inside or on the
    triangle.  Zero-area triangles are skipped.
    """
    xy = np.asarray(xy, dtype=np.float64)
    tris = np.asarray(tris, dtype=np.int64)
    a, b, c = xy[tris[:, 0]], xy[tris[:, 1]], xy[tris[:, 2]]
    area = (b[:, 0] - a[:, 0]) * (c[:, 1] - a[:, 1]) - (b[:, 1] - a[:, 1]) * (c[:, 0] - a[:, 0])
    corners = np.stack([a, b, c], axis=1)
    with np.errstate(invalid="ignore"):
        lo = np.ceil(corners.min(axis=1) - eps)
        hi = np.floor(corners.max(axis=1) + eps)
    lo = np.clip(lo, 0, [width - 1, height - 1]).astype(np.int64)
    hi = np.clip(hi, -1, [width - 1, height - 1]).astype(np.int64)
    nx = hi[:, 0] - lo[:, 0] + 1
    ny = hi[:, 1] - lo[:, 1] + 1
    ok = (np.abs(area) > 1e-12) & (nx > 0) & (ny > 0) & np.all(np.isfinite(corners), axis=(1, 2))
    idx = np.flatnonzero(ok)
    counts = (nx * ny)[idx]

    out = ([], [], [], [])
    start = 0
    while start < len(idx):
        # chunk so a runaway pose cannot exhaust memory
        csum = np.cumsum(counts[start:])
        stop = start + max(1, int(np.searchsorted(csum, max_candidates, side="right")))
        sel = idx[start:stop]
        cnt = counts[start:stop]
        tri_ids = np.repeat(sel, cnt)
        offs = np.repeat(np.cumsum(cnt) - cnt, cnt)
        local = np.arange(int(cnt.sum())) - offs
        px = lo[tri_ids, 0] + local % nx[tri_ids]
        py = lo[tri_ids, 1] + local // nx[tri_ids]
        pa, pb, pc = a[tri_ids], b[tri_ids], c[tri_ids]
        ar = area[tri_ids]
        w0 = ((pb[:, 0] - px) * (pc[:, 1] - py) - (pb[:, 1] - py) * (pc[:, 0] - px)) / ar
        w1 = ((pc[:, 0] - px) * (pa[:, 1] - py) - (pc[:, 1] - py) * (pa[:, 0] - px)) / ar
        w2 = 1.0 - w0 - w1
        inside = (w0 >= -eps) & (w1 >= -eps) & (w2 >= -eps)
        out[0].append(py[inside])
        out[1].append(px[inside])
        out[2].append(tri_ids[inside])
        out[3].append(np.stack([w0[inside], w1[inside], w2[inside]], axis=1))
        start = stop
    if not out[0]:
        return (np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros((0, 3)))
    rows, cols, tri_ids, bary = (np.concatenate(o) for o in out)
    bary = np.clip(bary, 0.0, None)
    bary /= bary.sum(axis=1, keepdims=True)
    return rows, cols, tri_ids, bary


@dataclass
class MeshTopology:
    """Triangles, per-vertex UVs and the texel -> (triangle, barycentric) table.

    Texel ``(i, j)`` of a ``T x T`` texture has its centre at
    ``uv = ((j + 0.5) / T, (i + 0.5) / T)``.  ``texel_tri`` is -1 for texels
    outside the UV chart.
    """

    triangles: np.ndarray
    uv: np.ndarray
    tex_size: int
    texel_tri: np.ndarray = field(init=False, repr=False)
    texel_bary: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.triangles = np.asarray(self.triangles, dtype=np.int64)
        self.uv = np.asarray(self.uv, dtype=np.float64)
        self.texel_tri, self.texel_bary = build_texel_table(self.uv, self.triangles, self.tex_size)

    @property
    def num_vertices(self) -> int:
        return len(self.uv)

    @property
    def charted(self) -> np.ndarray:
        """Flat indices (row-major over T x T) of texels inside the chart."""
        return np.flatnonzero(self.texel_tri >= 0)

    def texel_weights(self) -> tuple[np.ndarray, np.ndarray]:
        """Vertex ids (n, 3) and barycentric weights (n, 3) of the charted texels."""
        ch = self.charted
        return self.triangles[self.texel_tri[ch]], self.texel_bary[ch]


def build_texel_table(uv, triangles, tex_size: int):
    T = int(tex_size)
    lattice = np.asarray(uv) * T - 0.5
    rows, cols, tri_ids, bary = cover_triangles(lattice, triangles, T, T)
    flat = rows * T + cols
    texel_tri = np.full(T * T, -1, dtype=np.int64)
    texel_bary = np.zeros((T * T, 3))
    if len(flat):
        # texels on shared edges: keep the triangle containing them most deeply
        order = np.lexsort((-bary.min(axis=1), flat))
        flat, tri_ids, bary = flat[order], tri_ids[order], bary[order]
        first = np.r_[True, flat[1:] != flat[:-1]]
        texel_tri[flat[first]] = tri_ids[first]
        texel_bary[flat[first]] = bary[first]
    return texel_tri, texel_bary
