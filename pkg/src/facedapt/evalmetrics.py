"""Evaluation: temporal stability, marker reprojection error, resolution sweep, arm comparison."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

EPS = 1e-8
DEGENERATE_CAP = 100.0


@dataclass
class StabilityResult:
    per_frame: np.ndarray   # (N-2,) one value per interior frame
    mean: float


def stability(geoms, eps: float = EPS) -> StabilityResult:
    """Temporal smoothness of a vertex trajectory (N, G, D); 1 is the best score.

    Per vertex and interior frame t: ``(|G^{t+1}-G^t| + |G^t-G^{t-1}|) / |G^{t+1}-G^{t-1}|``,
    averaged over vertices.  A vertex whose two steps are both below ``eps``
    scores 1; one whose endpoints coincide but which moved in between
    scores ``numerator / eps`` capped at 100.
    """
    g = np.asarray(geoms, dtype=np.float64)
    if g.ndim == 2:
        g = g[..., None]
    if g.ndim != 3 or len(g) < 3:
        raise ValueError("stability needs at least 3 frames of shape (N, G, D)")
    fwd = np.linalg.norm(g[2:] - g[1:-1], axis=-1)
    bwd = np.linalg.norm(g[1:-1] - g[:-2], axis=-1)
    span = np.linalg.norm(g[2:] - g[:-2], axis=-1)
    num = fwd + bwd
    still = (fwd < eps) & (bwd < eps)
    ratio = np.where(span >= eps, num / np.maximum(span, eps), np.minimum(num / eps, DEGENERATE_CAP))
    ratio = np.where(still, 1.0, ratio)
    per_frame = ratio.mean(axis=1)
    return StabilityResult(per_frame, float(per_frame.mean()))


def marker_reprojection_error(pred_2d, marker_gt) -> float:
    """Mean Euclidean distance (pixels) between predicted and annotated 2D markers.

    ``pred_2d`` may carry a third (depth) coordinate; it is ignored.
    """
    p = np.asarray(pred_2d, dtype=np.float64)[..., :2]
    q = np.asarray(marker_gt, dtype=np.float64)
    if p.shape != q.shape:
        raise ValueError(f"marker arrays differ in shape: {p.shape} vs {q.shape}")
    return float(np.linalg.norm(p - q, axis=-1).mean())


def track_marker_error(track, marker_vertices, marker_gt) -> float:
    """Marker error of a :class:`trainer.Track` given evaluator-only vertex ids."""
    return marker_reprojection_error(track.geometry[:, np.asarray(marker_vertices)], marker_gt)


def relative_reprojection_error(geom_r, geom_max) -> float:
    """Mean 2D distance over vertices and frames between two tracks of the same sequence."""
    a = np.asarray(geom_r, dtype=np.float64)[..., :2]
    b = np.asarray(geom_max, dtype=np.float64)[..., :2]
    if a.shape != b.shape:
        raise ValueError(f"tracks differ in shape: {a.shape} vs {b.shape}")
    return float(np.linalg.norm(a - b, axis=-1).mean())


def degrade_resolution(images, r: int) -> np.ndarray:
    """Anti-aliased downsample to ``r x r``, then bilinear upsample back to the input size."""
    from skimage.transform import resize

    images = np.asarray(images, dtype=np.float64)
    size = images.shape[-3:-1]
    if (r, r) == tuple(size):
        return images.copy()
    out = np.empty_like(images)
    flat_in = images.reshape(-1, *images.shape[-3:])
    flat_out = out.reshape(-1, *images.shape[-3:])
    for i, img in enumerate(flat_in):
        small = resize(img, (r, r), order=1, anti_aliasing=True, mode="edge")
        flat_out[i] = resize(small, size, order=1, anti_aliasing=False, mode="edge")
    return out


def resolution_sweep(encoder, decoder, cc, images, resolutions=(128, 96, 64, 48, 32)) -> dict:
    """Relative reprojection error of tracks on degraded input against the full-resolution track."""
    from .trainer import track

    full = track(encoder, decoder, cc, images, overlays=False)
    out = {}
    for r in resolutions:
        tr = track(encoder, decoder, cc, degrade_resolution(images, r), overlays=False)
        out[r] = relative_reprojection_error(tr.geometry, full.geometry)
    return out


# ---------------------------------------------------------------------------
# comparison report

@dataclass
class ReportRow:
    arm: str
    stability: float
    reprojection: float


def evaluate_track(track, marker_vertices=None, marker_gt=None) -> tuple[float, float]:
    stab = stability(track.geometry).mean
    rep = float("nan")
    if marker_gt is not None and marker_vertices is not None:
        rep = track_marker_error(track, marker_vertices, marker_gt)
    return stab, rep


def overlay_strip(overlays, count: int = 6) -> np.ndarray:
    """Evenly spaced overlay frames side by side."""
    idx = np.linspace(0, len(overlays) - 1, min(count, len(overlays))).round().astype(int)
    return np.concatenate([overlays[i] for i in idx], axis=1)


def write_report(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["arm", "stability", "reprojection"])
        for r in rows:
            w.writerow([r.arm, repr(float(r.stability)), repr(float(r.reprojection))])


def read_report(path) -> list[ReportRow]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))[1:]
    return [ReportRow(r[0], float(r[1]), float(r[2])) for r in rows]


def comparison_report(encoder, decoder, wild, arms: dict, out_dir=None, history_dir=None) -> list[ReportRow]:
    """Adapt once per arm from the same checkpoint, track, and score.

    ``arms`` maps an arm name to a :class:`trainer.TrainConfig`.  With
    ``out_dir`` set, writes ``report.csv`` and one ``strip_<arm>.ppm`` each.
    """
    from .raster import write_ppm
    from .trainer import adapt, track

    rows = []
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    for name, config in arms.items():
        hist = None if history_dir is None else Path(history_dir) / f"history_{name}.csv"
        res = adapt(encoder, decoder, wild, config, history_csv=hist)
        tr = track(res.encoder, decoder, res.color, wild.images, overlays=out is not None)
        stab, rep = evaluate_track(tr, wild.marker_vertices, wild.markers_gt)
        rows.append(ReportRow(name, stab, rep))
        if out is not None:
            write_ppm(out / f"strip_{name}.ppm", overlay_strip(tr.overlays))
    if out is not None:
        write_report(out / "report.csv", rows)
    return rows
