"""Procedural dendrite/spine phantoms with ground-truth spine annotations.

Coordinates are in um relative to voxel (0, 0, 0); voxel (i, j, k) sits at
(i * dx, j * dy, k * dz).
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import PlacementFailure
from .volume import Volume

MAX_ATTEMPTS = 1000
MAX_VERIFY_ROUNDS = 20
MIN_SPINE_ANGLE_DEG = 30.0
PROFILE_CUTOFF_SIGMAS = 5.0
SAMPLE_STEP_UM = 0.02
DENDRITE_SEPARATION_UM = 2.0
MAX_SHARED_RUN_UM = 10.0
CSV_HEADER = ["id", "ax", "ay", "az", "tx", "ty", "tz", "length_um", "radius_um", "parent"]


@dataclass(frozen=True)
class PhantomSpec:
    dims: tuple[int, int, int] = (128, 128, 16)
    pitch: tuple[float, float, float] = (0.25, 0.25, 0.5)
    depth_offset: float = 0.0
    n_dendrites: int = 3
    dendrite_radius: tuple[float, float] = (0.5, 0.9)
    n_spines: int = 12
    spine_length: tuple[float, float] = (0.9, 2.0)
    spine_radius: tuple[float, float] = (0.25, 0.4)
    shaft_intensity: float = 1.0
    spine_intensity: tuple[float, float] = (0.4, 1.0)
    seed: int = 0

    def __post_init__(self):
        if min(self.dims) < 1 or min(self.pitch) <= 0:
            raise ValueError("dims must be >= 1 and pitch > 0")
        if self.n_dendrites < 0 or self.n_spines < 0:
            raise ValueError("counts must be >= 0")
        if self.n_spines > 0 and self.n_dendrites == 0:
            raise ValueError("spines need at least one dendrite")
        for name in ("dendrite_radius", "spine_length", "spine_radius", "spine_intensity"):
            lo, hi = getattr(self, name)
            if not 0 < lo <= hi:
                raise ValueError(f"{name} must be a nonempty positive range, got {(lo, hi)}")
        if self.spine_length[0] < 0.75:
            raise ValueError("spine_length minimum must be >= 0.75 um")
        if self.shaft_intensity <= 0:
            raise ValueError("shaft_intensity must be > 0")


@dataclass(frozen=True)
class Dendrite:
    id: int
    points: np.ndarray  # (n, 3) um
    radius: float


@dataclass(frozen=True)
class SpineRecord:
    id: int
    attachment: tuple[float, float, float]
    tip: tuple[float, float, float]
    length: float
    radius: float
    parent: int

    @property
    def direction(self) -> np.ndarray:
        d = np.subtract(self.tip, self.attachment)
        return d / np.linalg.norm(d)


@dataclass
class AnnotationSet:
    spines: list[SpineRecord] = field(default_factory=list)
    dendrites: list[Dendrite] = field(default_factory=list)

    def __len__(self):
        return len(self.spines)

    def dendrite(self, did: int) -> Dendrite:
        for d in self.dendrites:
            if d.id == did:
                return d
        raise KeyError(did)


# --- geometry helpers -------------------------------------------------------

def segment_distance2(pts: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Squared distance from each row of ``pts`` to the segment a-b."""
    ab = b - a
    denom = float(ab @ ab)
    ap = pts - a
    if denom == 0.0:
        return np.einsum("...i,...i->...", ap, ap)
    t = np.clip((ap @ ab) / denom, 0.0, 1.0)
    diff = ap - t[..., None] * ab
    return np.einsum("...i,...i->...", diff, diff)


def polyline_distance2(pts: np.ndarray, path: np.ndarray) -> np.ndarray:
    path = np.atleast_2d(path)
    if len(path) == 1:
        d = pts - path[0]
        return np.einsum("...i,...i->...", d, d)
    out = np.full(pts.shape[:-1], np.inf)
    for a, b in zip(path[:-1], path[1:]):
        np.minimum(out, segment_distance2(pts, a, b), out=out)
    return out


def bezier(ctrl: np.ndarray, n: int) -> np.ndarray:
    t = np.linspace(0.0, 1.0, n)[:, None]
    p0, p1, p2, p3 = ctrl
    return (1 - t) ** 3 * p0 + 3 * (1 - t) ** 2 * t * p1 + 3 * (1 - t) * t ** 2 * p2 + t ** 3 * p3


def voxel_coords(idx_ranges, pitch) -> np.ndarray:
    """Physical coordinates (um) for a box of voxel index ranges, shape (nx, ny, nz, 3)."""
    axes = [np.arange(lo, hi) * p for (lo, hi), p in zip(idx_ranges, pitch)]
    return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)


def _bbox(points: np.ndarray, pad: float, dims, pitch):
    lo = np.floor((points.min(axis=0) - pad) / pitch).astype(int)
    hi = np.ceil((points.max(axis=0) + pad) / pitch).astype(int) + 1
    lo = np.clip(lo, 0, dims)
    hi = np.clip(hi, 0, dims)
    return list(zip(lo.tolist(), hi.tolist()))


def _render_inplace(arr: np.ndarray, pitch, path: np.ndarray, radius: float, peak: float) -> None:
    path = np.atleast_2d(np.asarray(path, dtype=np.float64))
    if path.size == 0:
        return
    pitch = np.asarray(pitch, dtype=np.float64)
    sigma = radius / 2.0
    cutoff = PROFILE_CUTOFF_SIGMAS * sigma
    box = _bbox(path, cutoff, arr.shape, pitch)
    if any(lo >= hi for lo, hi in box):
        return
    coords = voxel_coords(box, pitch)
    d2 = np.full(coords.shape[:-1], np.inf)
    segs = zip(path[:-1], path[1:]) if len(path) > 1 else [(path[0], path[0])]
    for a, b in segs:
        sub = _bbox(np.stack([a, b]), cutoff, arr.shape, pitch)
        sl = tuple(slice(max(s_lo, b_lo) - b_lo, min(s_hi, b_hi) - b_lo) for (s_lo, s_hi), (b_lo, b_hi) in zip(sub, box))
        if any(s.start >= s.stop for s in sl):
            continue
        np.minimum(d2[sl], segment_distance2(coords[sl], a, b), out=d2[sl])
    add = np.where(d2 <= cutoff * cutoff, peak * np.exp(-d2 / (2.0 * sigma * sigma)), 0.0)
    view = arr[tuple(slice(lo, hi) for lo, hi in box)]
    view[...] = np.maximum(view, np.minimum(view + add, 2.0 * peak))


def render_tube(vol: Volume, path, radius: float, peak: float) -> Volume:
    """Add a Gaussian-profile tube (sigma = radius / 2) along ``path`` (um points)."""
    if radius <= 0:
        raise ValueError("radius must be > 0")
    arr = vol.data.astype(np.float64)
    path = np.asarray(path, dtype=np.float64).reshape(-1, 3)
    if len(path):
        _render_inplace(arr, vol.pitch, path, radius, peak)
    return vol.with_data(arr.astype(np.float32))


# --- scoring geometry shared with the evaluator ------------------------------

def protrusion_samples(rec: SpineRecord, offset: float) -> np.ndarray:
    """Points on the annotated segment at least ``offset`` um beyond the shaft surface."""
    a = np.asarray(rec.attachment)
    start = min(offset, rec.length)
    n = max(2, int(math.ceil((rec.length - start) / SAMPLE_STEP_UM)) + 1)
    s = np.linspace(start, rec.length, n)
    return a + s[:, None] * rec.direction


def sample_planes(points: np.ndarray, dz: float) -> np.ndarray:
    return np.rint(points[:, 2] / dz).astype(int)


def spanned_planes(rec: SpineRecord, dz: float, offset: float) -> list[int]:
    return sorted(set(sample_planes(protrusion_samples(rec, offset), dz).tolist()))


# --- generation ---------------------------------------------------------------

def _make_dendrite(rng, did, extent, spec) -> Dendrite:
    ext = np.asarray(extent)
    axis = rng.integers(2)  # run roughly along x or y
    other = 1 - axis
    ctrl = np.empty((4, 3))
    ctrl[:, axis] = [-0.1 * ext[axis], 0.3 * ext[axis], 0.7 * ext[axis], 1.1 * ext[axis]]
    ctrl[:, other] = rng.uniform(0.15, 0.85, 4) * ext[other]
    ctrl[:, 2] = rng.uniform(0.3, 0.7, 4) * ext[2]
    if rng.random() < 0.5:
        ctrl = ctrl[::-1]
    n = max(16, int(np.linalg.norm(ext) / 0.25))
    radius = rng.uniform(*spec.dendrite_radius)
    return Dendrite(did, bezier(ctrl, n), float(radius))


def _separated(den: Dendrite, others: list[Dendrite]) -> bool:
    """Crossings are fine; running alongside another shaft for long stretches is not."""
    for o in others:
        near = polyline_distance2(den.points, o.points) < (DENDRITE_SEPARATION_UM + den.radius + o.radius) ** 2
        seg = np.linalg.norm(np.diff(den.points, axis=0), axis=1)
        run = longest = 0.0
        for close, length in zip(near[1:] & near[:-1], seg):
            run = run + length if close else 0.0
            longest = max(longest, run)
        if longest > MAX_SHARED_RUN_UM:
            return False
    return True


def _tangent(path: np.ndarray, i: int) -> np.ndarray:
    j0, j1 = max(i - 1, 0), min(i + 1, len(path) - 1)
    t = path[j1] - path[j0]
    return t / np.linalg.norm(t)


def _inside(p: np.ndarray, extent: np.ndarray, margin: float) -> bool:
    lat = np.all(p[:2] >= margin) and np.all(p[:2] <= extent[:2] - margin)
    return bool(lat and 0.0 <= p[2] <= extent[2])


def _try_spine(rng, sid, spec, dendrites, placed, extent, offset) -> SpineRecord | None:
    lengths = np.array([np.linalg.norm(np.diff(d.points, axis=0), axis=1).sum() for d in dendrites])
    parent = dendrites[rng.choice(len(dendrites), p=lengths / lengths.sum())]
    i = int(rng.integers(int(0.1 * len(parent.points)), int(0.9 * len(parent.points))))
    c = parent.points[i]
    t = _tangent(parent.points, i)
    d = rng.normal(size=3)
    d /= np.linalg.norm(d)
    if abs(d @ t) > math.cos(math.radians(MIN_SPINE_ANGLE_DEG)):
        return None
    d_perp = d - (d @ t) * t
    att = c + parent.radius / np.linalg.norm(d_perp) * d
    length = float(rng.uniform(*spec.spine_length))
    tip = att + length * d
    radius = float(rng.uniform(*spec.spine_radius))
    margin = 0.5
    if not (_inside(att, extent, margin) and _inside(tip, extent, margin)):
        return None
    rec = SpineRecord(sid, tuple(att.tolist()), tuple(tip.tolist()), length, radius, parent.id)
    if len(spanned_planes(rec, spec.pitch[2], offset)) < 2:
        return None
    pts = protrusion_samples(rec, 0.0)
    for den in dendrites:
        clearance = den.radius + (0.1 if den.id == parent.id else 1.0)
        if den.id == parent.id:
            check = protrusion_samples(rec, 0.25)
        else:
            check = pts
        if polyline_distance2(check, den.points).min() < clearance ** 2:
            return None
    for other in placed:
        seg = np.stack([other.attachment, other.tip])
        if polyline_distance2(pts, seg).min() < (1.0 + radius + other.radius) ** 2:
            return None
    return rec


def _render_all(spec: PhantomSpec, dendrites, spines, peaks) -> np.ndarray:
    arr = np.zeros(spec.dims, dtype=np.float64)
    for den in dendrites:
        _render_inplace(arr, spec.pitch, den.points, den.radius, spec.shaft_intensity)
    for rec, peak in zip(spines, peaks):
        parent = dendrites[rec.parent]
        base = np.asarray(rec.attachment) - parent.radius * rec.direction
        _render_inplace(arr, spec.pitch, np.stack([base, np.asarray(rec.tip)]), rec.radius, peak)
    peak = arr.max()
    if peak > 0:
        arr /= peak
    return arr


def generate_phantom(spec: PhantomSpec, scoring_offset: float = 0.375) -> tuple[Volume, AnnotationSet]:
    """Render dendrites and spines; returns a peak-normalized volume and its annotations.

    ``scoring_offset`` is the distance beyond the shaft surface from which a
    spine is scored; placement rejects spines whose scored portion touches
    fewer than two z-planes, and spines that default visibility scoring
    misses on the clean render are re-drawn.
    """
    rng = np.random.default_rng(spec.seed)
    extent = np.array([(n - 1) * p for n, p in zip(spec.dims, spec.pitch)])
    dendrites: list[Dendrite] = []
    for did in range(spec.n_dendrites):
        for _ in range(MAX_ATTEMPTS):
            den = _make_dendrite(rng, did, extent, spec)
            if _separated(den, dendrites):
                dendrites.append(den)
                break
        else:
            raise PlacementFailure(f"could not place dendrite {did} in {MAX_ATTEMPTS} attempts")
    # spines that the scorer rejects on the clean render (e.g. grazing a plane
    # only at the Gaussian flank) are replaced, so clean recall is exactly 1
    from .metrics import SpineCriteria, spine_visibility

    crit = SpineCriteria(min_protrusion=2 * scoring_offset)
    spines: list[SpineRecord | None] = [None] * spec.n_spines
    peaks: list[float] = [0.0] * spec.n_spines
    for _ in range(MAX_VERIFY_ROUNDS):
        for sid in range(spec.n_spines):
            if spines[sid] is not None:
                continue
            placed = [r for r in spines if r is not None]
            for _ in range(MAX_ATTEMPTS):
                rec = _try_spine(rng, sid, spec, dendrites, placed, extent, scoring_offset)
                if rec is not None:
                    spines[sid] = rec
                    peaks[sid] = float(rng.uniform(*spec.spine_intensity)) * spec.shaft_intensity
                    break
            else:
                raise PlacementFailure(f"could not place spine {sid} in {MAX_ATTEMPTS} attempts")
        arr = _render_all(spec, dendrites, spines, peaks)
        ann = AnnotationSet(list(spines), dendrites)
        if not spines:
            break
        report = spine_visibility(Volume(arr.astype(np.float32), spec.pitch, spec.depth_offset), ann, crit)
        failed = [i for i, v in enumerate(report.verdicts) if not v.visible]
        if not failed:
            break
        for i in failed:
            spines[i] = None
    else:
        raise PlacementFailure(f"spines still invisible on the clean render after {MAX_VERIFY_ROUNDS} rounds")

    vol = Volume(arr.astype(np.float32), spec.pitch, spec.depth_offset)
    return vol, ann


# --- serialization ----------------------------------------------------------

def annotation_rows(spines, extra: dict | None = None):
    for r in spines:
        row = [r.id, *(f"{v:.6f}" for v in r.attachment), *(f"{v:.6f}" for v in r.tip),
               f"{r.length:.6f}", f"{r.radius:.6f}", r.parent]
        if extra is not None:
            row.append(extra[r.id] if isinstance(extra, dict) else extra)
        yield row


def save_annotations(ann: AnnotationSet, path) -> None:
    """CSV of spines plus a ``.dendrites.json`` sidecar carrying shaft geometry."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        w.writerows(annotation_rows(ann.spines))
    side = [{"id": d.id, "radius": d.radius, "points": np.round(d.points, 6).tolist()} for d in ann.dendrites]
    path.with_suffix(".dendrites.json").write_text(json.dumps(side))


def load_annotations(path) -> AnnotationSet:
    path = Path(path)
    spines = []
    with path.open(newline="") as fh:
        for row in csv.DictReader(fh):
            att = (float(row["ax"]), float(row["ay"]), float(row["az"]))
            tip = (float(row["tx"]), float(row["ty"]), float(row["tz"]))
            spines.append(SpineRecord(int(row["id"]), att, tip, float(row["length_um"]),
                                      float(row["radius_um"]), int(row["parent"])))
    dendrites = []
    side = path.with_suffix(".dendrites.json")
    if side.exists():
        for d in json.loads(side.read_text()):
            dendrites.append(Dendrite(d["id"], np.asarray(d["points"], dtype=np.float64), d["radius"]))
    return AnnotationSet(spines, dendrites)
