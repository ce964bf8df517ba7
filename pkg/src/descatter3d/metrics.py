"""Spine-visibility scoring, intensity profiles, fidelity metrics and timing arithmetic."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .errors import DegenerateReference, InvalidAnnotation, InvalidProfile, ShapeError
from .phantom import (
    CSV_HEADER,
    AnnotationSet,
    SpineRecord,
    annotation_rows,
    polyline_distance2,
    segment_distance2,
    protrusion_samples,
    sample_planes,
    voxel_coords,
)
from .volume import Volume

PSNR_SENTINEL = 999.0


@dataclass(frozen=True)
class SpineCriteria:
    min_protrusion: float = 0.75
    min_consecutive_planes: int = 2
    contrast_ratio: float = 2.0
    annulus_inner: float = 1.5
    annulus_outer: float = 3.0
    # scoring starts this fraction of min_protrusion beyond the shaft surface
    protrusion_fraction: float = 0.5
    # background never drops below this fraction of the volume's 99.9th percentile
    background_floor: float = 0.05
    shaft_margin: float = 0.5
    spine_margin: float = 0.25
    max_protrusion: float = 3.0
    min_candidate_voxels: int = 4

    def __post_init__(self):
        if self.min_protrusion <= 0:
            raise ValueError("min_protrusion must be > 0")
        if self.min_consecutive_planes < 1:
            raise ValueError("min_consecutive_planes must be >= 1")
        if self.contrast_ratio <= 1:
            raise ValueError("contrast_ratio must be > 1")
        if not 0 <= self.annulus_inner < self.annulus_outer:
            raise ValueError("annulus radii must satisfy 0 <= inner < outer")

    @property
    def scoring_offset(self) -> float:
        return self.protrusion_fraction * self.min_protrusion


@dataclass(frozen=True)
class SpineVerdict:
    id: int
    visible: bool
    contrast: float
    planes_passed: int


@dataclass
class RecallReport:
    total: int
    visible: int
    verdicts: list[SpineVerdict] = field(default_factory=list)

    @property
    def recall(self) -> float:
        return self.visible / self.total if self.total else 0.0

    def summary(self) -> str:
        return f"{self.visible} ({percent_string(self.visible, self.total)})"

    def write_csv(self, path) -> None:
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["id", "visible", "contrast", "planes_passed"])
            for v in self.verdicts:
                w.writerow([v.id, int(v.visible), f"{v.contrast:.6f}", v.planes_passed])


def percent_string(count: int, total: int) -> str:
    return f"{100.0 * count / total:.1f}%"


def _reference_level(data: np.ndarray) -> float:
    pos = data[data > 0]
    return float(np.percentile(pos.astype(np.float64), 99.9)) if pos.size else 0.0


def _check_inside(vol: Volume, ann: AnnotationSet, tol: float = 1e-6) -> None:
    ext = np.asarray(vol.extent)
    for r in ann.spines:
        for p in (r.attachment, r.tip):
            if np.any(np.asarray(p) < -tol) or np.any(np.asarray(p) > ext + tol):
                raise InvalidAnnotation(f"spine {r.id} point {p} lies outside the volume extent {tuple(ext)}")


class _Geometry:
    """Distance queries against annotated shafts and spines."""

    STEP_UM = 0.02  # centerline resampling step; distances are overestimated by at most half of it

    def __init__(self, ann: AnnotationSet):
        self.ann = ann
        self.dendrites = list(ann.dendrites)
        self.trees = {d.id: cKDTree(_dense(d.points, self.STEP_UM)) for d in ann.dendrites}
        by_id = {d.id: d for d in ann.dendrites}
        self.spine_segs = []
        for s in ann.spines:
            seg = np.stack([np.asarray(s.attachment, dtype=float), np.asarray(s.tip, dtype=float)])
            if s.parent in by_id:
                seg[0] = seg[0] - by_id[s.parent].radius * s.direction  # start inside the shaft
            self.spine_segs.append((s, seg))

    def shaft_distance(self, coords: np.ndarray, d, upper: float = np.inf) -> np.ndarray:
        dist, _ = self.trees[d.id].query(coords.reshape(-1, 3), distance_upper_bound=upper)
        return dist.reshape(coords.shape[:-1])

    def spine_mask(self, coords: np.ndarray, margin: float) -> np.ndarray:
        mask = np.zeros(coords.shape[:-1], dtype=bool)
        for s, seg in self.spine_segs:
            reach = s.radius + margin
            lo, hi = seg.min(axis=0) - reach, seg.max(axis=0) + reach
            near = np.all((coords >= lo) & (coords <= hi), axis=-1)
            if near.any():
                mask[near] |= segment_distance2(coords[near], seg[0], seg[1]) <= reach ** 2
        return mask

    def structure_mask(self, coords: np.ndarray, crit: SpineCriteria) -> np.ndarray:
        """True where a voxel belongs to a shaft or an annotated spine (with margins)."""
        mask = self.spine_mask(coords, crit.spine_margin)
        for d in self.dendrites:
            reach = d.radius + crit.shaft_margin
            mask |= self.shaft_distance(coords, d, reach + 1e-9) <= reach
        return mask


def _dense(path: np.ndarray, step: float) -> np.ndarray:
    path = np.atleast_2d(np.asarray(path, dtype=float))
    out = [path[:1]]
    for a, b in zip(path[:-1], path[1:]):
        n = max(1, int(np.ceil(np.linalg.norm(b - a) / step)))
        t = np.arange(1, n + 1)[:, None] / n
        out.append(a + t * (b - a))
    return np.concatenate(out)


def _plane_values(plane: np.ndarray, pts: np.ndarray, pitch) -> np.ndarray:
    xy = np.stack([pts[:, 0] / pitch[0], pts[:, 1] / pitch[1]])
    return ndimage.map_coordinates(plane.astype(np.float64), xy, order=1, mode="nearest")


def _annulus_box(pts: np.ndarray, outer: float, vol: Volume, k: int):
    dx, dy = vol.pitch[:2]
    lo = np.floor((pts[:, :2].min(axis=0) - outer) / (dx, dy)).astype(int)
    hi = np.ceil((pts[:, :2].max(axis=0) + outer) / (dx, dy)).astype(int) + 1
    lo = np.clip(lo, 0, vol.dims[:2])
    hi = np.clip(hi, 0, vol.dims[:2])
    return [(lo[0], hi[0]), (lo[1], hi[1]), (k, k + 1)]


def _longest_run(flags: list[tuple[int, bool]]) -> int:
    best = run = 0
    prev = None
    for k, ok in flags:
        run = run + 1 if ok and prev is not None and k == prev + 1 and run > 0 else (1 if ok else 0)
        prev = k
        best = max(best, run)
    return best


def score_spine(vol: Volume, rec: SpineRecord, ann: AnnotationSet, crit: SpineCriteria,
                ref_level: float | None = None, geom: _Geometry | None = None) -> SpineVerdict:
    geom = geom or _Geometry(ann)
    if ref_level is None:
        ref_level = _reference_level(vol.data)
    floor = crit.background_floor * ref_level
    pts = protrusion_samples(rec, crit.scoring_offset)
    planes = sample_planes(pts, vol.pitch[2])
    seg2d = pts[[0, -1]].copy()
    flags, best_contrast = [], 0.0
    for k in sorted(set(planes.tolist())):
        if not 0 <= k < vol.dims[2]:
            continue
        plane = vol.data[:, :, k]
        signal = float(_plane_values(plane, pts[planes == k], vol.pitch).mean())
        box = _annulus_box(pts, crit.annulus_outer, vol, k)
        coords = voxel_coords(box, vol.pitch)[:, :, 0]
        seg = seg2d.copy()
        seg[:, 2] = k * vol.pitch[2]
        dist2 = polyline_distance2(coords, seg)
        ring = (dist2 >= crit.annulus_inner ** 2) & (dist2 <= crit.annulus_outer ** 2)
        ring &= ~geom.structure_mask(coords, crit)
        vals = plane[box[0][0]:box[0][1], box[1][0]:box[1][1]][ring]
        median = float(np.median(vals.astype(np.float64))) if vals.size else 0.0
        background = max(median, floor)
        ok = signal > crit.contrast_ratio * background
        contrast = signal / background if background > 0 else (math.inf if signal > 0 else 0.0)
        best_contrast = max(best_contrast, contrast)
        flags.append((k, ok))
    run = _longest_run(flags)
    return SpineVerdict(rec.id, run >= crit.min_consecutive_planes, best_contrast, sum(ok for _, ok in flags))


def spine_visibility(vol: Volume, ann: AnnotationSet, crit: SpineCriteria | None = None) -> RecallReport:
    """Score every annotated spine as visible/absent in ``vol``.

    A spine counts as visible when, in at least ``min_consecutive_planes``
    consecutive z-planes, the mean intensity along its scored portion exceeds
    ``contrast_ratio`` times the local background: the median of an in-plane
    annulus around the spine with shafts and spines masked out, floored at a
    fixed fraction of the volume's 99.9th percentile.
    """
    crit = crit or SpineCriteria()
    _check_inside(vol, ann)
    ref = _reference_level(vol.data)
    geom = _Geometry(ann)
    verdicts = [score_spine(vol, r, ann, crit, ref, geom) for r in ann.spines]
    return RecallReport(len(verdicts), sum(v.visible for v in verdicts), verdicts)


# --- off-annotation candidates ------------------------------------------------

def detect_candidates(vol: Volume, ann: AnnotationSet, crit: SpineCriteria | None = None) -> list[SpineRecord]:
    """Supra-threshold protrusions next to a shaft that match no annotated spine.

    Voxels within ``max_protrusion`` of a shaft surface (but outside the shaft
    mask and away from annotated spines) are thresholded per plane at
    ``contrast_ratio`` times that plane's background; 3D components spanning
    enough consecutive planes and reaching ``min_protrusion`` beyond the
    surface are reported.
    """
    crit = crit or SpineCriteria()
    if not ann.dendrites:
        return []
    coords = voxel_coords([(0, n) for n in vol.dims], vol.pitch)
    geom = _Geometry(ann)
    # distance beyond the nearest shaft surface, and which shaft
    beyond = np.full(vol.dims, np.inf)
    nearest = np.full(vol.dims, -1, dtype=int)
    for d in geom.dendrites:
        b = geom.shaft_distance(coords, d, d.radius + crit.max_protrusion + 1e-9) - d.radius
        closer = b < beyond
        beyond[closer] = b[closer]
        nearest[closer] = d.id
    structure = geom.structure_mask(coords, crit)
    near_spine = geom.spine_mask(coords, 1.0)
    zone = (beyond > crit.shaft_margin) & (beyond <= crit.max_protrusion) & ~near_spine
    floor = crit.background_floor * _reference_level(vol.data)
    data = vol.data.astype(np.float64)
    hot = np.zeros(vol.dims, dtype=bool)
    for k in range(vol.dims[2]):
        free = data[:, :, k][~structure[:, :, k]]
        bg = max(float(np.median(free)) if free.size else 0.0, floor)
        hot[:, :, k] = data[:, :, k] > crit.contrast_ratio * bg
    hot &= zone
    labels, n = ndimage.label(hot)
    out = []
    for lab in range(1, n + 1):
        idx = np.argwhere(labels == lab)
        if len(idx) < crit.min_candidate_voxels:
            continue
        zs = np.unique(idx[:, 2])
        if _longest_run([(int(z), True) for z in zs]) < crit.min_consecutive_planes:
            continue
        b = beyond[tuple(idx.T)]
        if b.max() < crit.min_protrusion:
            continue
        near = idx[b.argmin()]
        far = idx[b.argmax()]
        att = tuple(float(v) for v in near * vol.pitch)
        tip = tuple(float(v) for v in far * vol.pitch)
        length = float(np.linalg.norm(np.subtract(tip, att)))
        out.append(SpineRecord(len(out), att, tip, length, 0.0, int(nearest[tuple(near)])))
    return out


def write_candidates_csv(groups: dict[str, list[SpineRecord]], path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER + ["source"])
        for source, recs in groups.items():
            w.writerows(annotation_rows(recs, source))


# --- profiles, fidelity, timing -------------------------------------------------

def intensity_profile(vol: Volume, polyline, half_width: float, n_samples: int) -> np.ndarray:
    """Band-averaged intensity along a polyline (um), normalized to its maximum."""
    pts = np.asarray(polyline, dtype=np.float64).reshape(-1, 3)
    if n_samples < 2:
        raise InvalidProfile("n_samples must be >= 2")
    keep = np.concatenate([[True], np.any(np.diff(pts, axis=0) != 0, axis=1)])
    pts = pts[keep]
    if len(pts) < 2:
        raise InvalidProfile("profile needs at least two distinct points")
    ext = np.asarray(vol.extent)
    if np.any(pts < -1e-9) or np.any(pts > ext + 1e-9):
        raise InvalidProfile("profile leaves the volume")
    seg_len = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    cum = np.concatenate([[0.0], np.cumsum(seg_len)])
    s = np.linspace(0.0, cum[-1], n_samples)
    seg = np.clip(np.searchsorted(cum, s, side="right") - 1, 0, len(seg_len) - 1)
    t = (s - cum[seg]) / seg_len[seg]
    centers = pts[seg] + t[:, None] * (pts[seg + 1] - pts[seg])
    tang = (pts[seg + 1] - pts[seg]) / seg_len[seg][:, None]
    perp = np.stack([-tang[:, 1], tang[:, 0], np.zeros(len(tang))], axis=1)
    norms = np.linalg.norm(perp, axis=1)
    perp[norms < 1e-12] = (1.0, 0.0, 0.0)
    perp /= np.linalg.norm(perp, axis=1)[:, None]
    n_band = 2 * int(math.ceil(half_width / vol.pitch[0])) + 1 if half_width > 0 else 1
    offsets = np.linspace(-half_width, half_width, n_band) if n_band > 1 else np.zeros(1)
    samples = centers[:, None, :] + offsets[None, :, None] * perp[:, None, :]
    idx = (samples / np.asarray(vol.pitch)).reshape(-1, 3).T
    vals = ndimage.map_coordinates(vol.data.astype(np.float64), idx, order=1, mode="nearest")
    prof = vals.reshape(n_samples, n_band).mean(axis=1)
    peak = prof.max()
    return prof / peak if peak > 0 else prof


def fidelity(pred: Volume, ref: Volume) -> dict[str, float]:
    if pred.dims != ref.dims:
        raise ShapeError(f"dims differ: {pred.dims} vs {ref.dims}")
    p = pred.data.astype(np.float64)
    r = ref.data.astype(np.float64)
    rms = math.sqrt(float(np.mean((p - r) ** 2)))
    span = float(r.max() - r.min())
    if span == 0:
        raise DegenerateReference("reference volume is constant")
    psnr = PSNR_SENTINEL if rms == 0 else 20.0 * math.log10(float(r.max()) / rms)
    return {"nrmse": rms / span, "psnr": psnr}


def acquisition_time(mode: str, dims, dwell_s: float | None = None, exposure_s: float | None = None) -> float:
    """Seconds to acquire a stack: point scanning visits every voxel, TFM exposes once per plane."""
    nx, ny, nz = (int(d) for d in dims)
    if min(nx, ny, nz) < 1:
        raise ValueError("dims must be >= 1")
    mode = mode.lower()
    if mode == "pstpm":
        if not dwell_s or dwell_s <= 0:
            raise ValueError("PSTPM needs a positive dwell time")
        return nx * ny * nz * dwell_s
    if mode == "tfm":
        if not exposure_s or exposure_s <= 0:
            raise ValueError("TFM needs a positive exposure time")
        return nz * exposure_s
    raise ValueError(f"unknown mode {mode!r}")


# --- false-positive cross-check ------------------------------------------------

def false_positive_check(truth: Volume, measured_input: Volume, net, scatter, noise, ann: AnnotationSet,
                         crit: SpineCriteria | None = None, plan=None, percentile: float = 99.9,
                         threads: int = 1) -> dict:
    """Run the network on a measured stack and on a stack simulated from ``truth``.

    Both reconstructions are scored against ``ann``; candidate protrusions
    absent from the annotations are listed per branch ("measured",
    "synthetic"). ``noise=None`` simulates the synthetic branch without
    shot noise.
    """
    from .scatter import apply_forward_model, noiseless_forward
    from .tiling import plan_tiles, reconstruct

    if truth.dims != measured_input.dims or truth.pitch != measured_input.pitch:
        raise ShapeError("truth and measured input are not on the same grid")
    crit = crit or SpineCriteria()
    if noise is None:
        synthetic = truth.with_data(np.maximum(noiseless_forward(truth, scatter, threads=threads), 0).astype(np.float32))
    else:
        synthetic = apply_forward_model(truth, scatter, noise, threads=threads)
    if plan is None:
        plan = plan_tiles(truth.dims, net.config.input_dims)
    report = {}
    for name, inp in (("measured", measured_input), ("synthetic", synthetic)):
        out = reconstruct(inp, net, plan, percentile, threads)
        report[name] = {
            "recall": spine_visibility(out, ann, crit),
            "candidates": detect_candidates(out, ann, crit),
            "output": out,
        }
    return report
