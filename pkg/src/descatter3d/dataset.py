"""Paired training cubes cut from (simulated measurement, ground truth) volumes."""
from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigurationWarning, EmptyDataset, InvalidDims
from .volume import Volume, load_volume, normalize_volume, save_volume

FULL_CUBE_DIMS = (128, 128, 64)
FULL_CUBES_PER_STACK = 134


@dataclass(frozen=True, eq=False)
class CubePair:
    input: np.ndarray
    target: np.ndarray
    source_id: str
    corner: tuple[int, int, int]
    seed: int

    def __post_init__(self):
        if self.input.shape != self.target.shape:
            raise InvalidDims("input and target cubes differ in shape")


@dataclass(frozen=True)
class CubeRecord:
    source: str
    corner: tuple[int, int, int]
    split: str


@dataclass
class DatasetManifest:
    """Cube list with train/val tags. Cube arrays live either in memory
    (``pairs``) or as ``cube_<idx>_in.dvol`` / ``cube_<idx>_gt.dvol`` under ``root``."""

    cube_dims: tuple[int, int, int]
    seed: int
    percentile: float
    records: list[CubeRecord]
    pairs: list[CubePair] | None = None
    root: Path | None = None
    _cache: dict = field(default_factory=dict, repr=False)

    def indices(self, split: str) -> list[int]:
        return [i for i, r in enumerate(self.records) if r.split == split]

    def get_pair(self, idx: int) -> tuple[np.ndarray, np.ndarray]:
        if self.pairs is not None:
            p = self.pairs[idx]
            return p.input, p.target
        if idx not in self._cache:
            if self.root is None:
                raise EmptyDataset("manifest has neither in-memory cubes nor a root directory")
            x = load_volume(self.root / f"cube_{idx}_in.dvol").data
            y = load_volume(self.root / f"cube_{idx}_gt.dvol").data
            self._cache[idx] = (x, y)
        return self._cache[idx]

    def batch(self, idxs) -> tuple[np.ndarray, np.ndarray]:
        xs, ys = zip(*(self.get_pair(int(i)) for i in idxs))
        return np.stack(xs)[:, None], np.stack(ys)[:, None]

    def to_json(self) -> str:
        doc = {
            "cube_dims": list(self.cube_dims),
            "seed": self.seed,
            "percentile": self.percentile,
            "records": [{"source": r.source, "corner": list(r.corner), "split": r.split} for r in self.records],
        }
        return json.dumps(doc, indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text: str, root=None) -> "DatasetManifest":
        doc = json.loads(text)
        recs = [CubeRecord(r["source"], tuple(r["corner"]), r["split"]) for r in doc["records"]]
        return cls(tuple(doc["cube_dims"]), doc["seed"], doc["percentile"], recs,
                   root=Path(root) if root is not None else None)


def sample_corners(vol_dims, n: int, cube_dims, seed: int = 0) -> np.ndarray:
    """``n`` uniformly random corners (n, 3) for cubes lying fully inside ``vol_dims``."""
    cube_dims = tuple(int(c) for c in cube_dims)
    if any(c < 1 or c > d for c, d in zip(cube_dims, vol_dims)):
        raise InvalidDims(f"cube {cube_dims} does not fit in volume {tuple(vol_dims)}")
    rng = np.random.default_rng(seed)
    return np.stack([rng.integers(0, d - c + 1, size=n) for d, c in zip(vol_dims, cube_dims)], axis=1)


def extract_cubes(pair: tuple[Volume, Volume], n: int = FULL_CUBES_PER_STACK, cube_dims=FULL_CUBE_DIMS,
                  seed: int = 0, source_id: str = "0") -> list[CubePair]:
    """Cut ``n`` co-located cubes at uniformly random corners from (input, target)."""
    inp, tgt = pair
    if inp.dims != tgt.dims:
        raise InvalidDims(f"input dims {inp.dims} != target dims {tgt.dims}")
    cube_dims = tuple(int(c) for c in cube_dims)
    corners = sample_corners(inp.dims, n, cube_dims, seed)
    out = []
    for c in corners:
        sl = tuple(slice(int(o), int(o) + s) for o, s in zip(c, cube_dims))
        out.append(CubePair(inp.data[sl].copy(), tgt.data[sl].copy(), source_id, tuple(int(v) for v in c), seed))
    return out


def split_dataset(cubes: list[CubePair], train_fraction: float = 0.95, seed: int = 0,
                  percentile: float = 99.9) -> DatasetManifest:
    """Shuffle deterministically; the first floor(fraction * N) become train, the rest val."""
    if not 0 < train_fraction < 1:
        raise ValueError("train_fraction must be in (0, 1)")
    if not cubes:
        raise EmptyDataset("no cubes to split")
    order = np.random.default_rng(seed).permutation(len(cubes))
    n_train = math.floor(train_fraction * len(cubes))
    if n_train == 0:
        warnings.warn("train split is empty", ConfigurationWarning, stacklevel=2)
    pairs = [cubes[i] for i in order]
    recs = [CubeRecord(p.source_id, p.corner, "train" if k < n_train else "val") for k, p in enumerate(pairs)]
    return DatasetManifest(tuple(cubes[0].input.shape), seed, percentile, recs, pairs=pairs)


def normalize_pair(measured: Volume, truth: Volume, percentile: float = 99.9) -> tuple[Volume, Volume, float]:
    """Scale both volumes by the measured volume's percentile (clamped to [0, 2])."""
    norm_in, scale = normalize_volume(measured, percentile)
    tgt = np.clip(truth.data.astype(np.float64) / scale, 0.0, 2.0).astype(np.float32)
    return norm_in, truth.with_data(tgt), scale


def build_dataset(sources, n_per_source: int, cube_dims, seed: int = 0, train_fraction: float = 0.95,
                  percentile: float = 99.9) -> DatasetManifest:
    """Normalize each (source_id, measured, truth) pair, cut cubes, split.

    Measurements must be simulated on the full volume before this call so that
    scattering from outside each cube is present in its input.
    """
    cubes: list[CubePair] = []
    for k, (sid, measured, truth) in enumerate(sources):
        norm_in, norm_gt, _ = normalize_pair(measured, truth, percentile)
        cubes += extract_cubes((norm_in, norm_gt), n_per_source, cube_dims, seed=seed + 7919 * k, source_id=str(sid))
    return split_dataset(cubes, train_fraction, seed, percentile)


def save_dataset(manifest: DatasetManifest, root, pitch=(1.0, 1.0, 1.0)) -> None:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    for i in range(len(manifest.records)):
        x, y = manifest.get_pair(i)
        save_volume(Volume(x, pitch), root / f"cube_{i}_in.dvol")
        save_volume(Volume(y, pitch), root / f"cube_{i}_gt.dvol")
    (root / "manifest.json").write_text(manifest.to_json(), encoding="utf-8")


def load_dataset(root) -> DatasetManifest:
    root = Path(root)
    return DatasetManifest.from_json((root / "manifest.json").read_text(encoding="utf-8"), root)
