"""Tiled inference for volumes larger than the network input."""
from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .errors import InvalidPlan
from .neural3d import Network
from .volume import Volume, normalize_volume


@dataclass(frozen=True)
class Tile:
    corner: tuple[int, int, int]          # source corner in the (padded) volume
    dest_lo: tuple[int, int, int]         # destination window, absolute coordinates
    dest_hi: tuple[int, int, int]


@dataclass(frozen=True)
class TilingPlan:
    vol_dims: tuple[int, int, int]        # padded dims the tiles cover
    tile_dims: tuple[int, int, int]
    overlap: tuple[int, int, int]
    blend: str
    tiles: tuple[Tile, ...]
    grid: tuple[int, int, int]

    def to_json(self) -> str:
        return json.dumps({
            "vol_dims": self.vol_dims, "tile_dims": self.tile_dims, "overlap": self.overlap,
            "blend": self.blend, "grid": self.grid,
            "tiles": [{"corner": t.corner, "dest_lo": t.dest_lo, "dest_hi": t.dest_hi} for t in self.tiles],
        }, indent=1)


def _axis_starts(n: int, t: int, overlap: int) -> list[int]:
    if n <= t:
        return [0]
    step = t - overlap
    starts = list(range(0, n - t, step))
    starts.append(n - t)
    return starts


def _axis_cuts(starts: list[int], t: int, n: int, shift: int) -> list[tuple[int, int]]:
    """Destination windows: cut each overlap at its midpoint (plus ``shift``)."""
    bounds = [0]
    for a, b in zip(starts[:-1], starts[1:]):
        lo, hi = b, a + t  # overlap region [lo, hi)
        cut = (lo + hi) // 2 + shift
        bounds.append(min(max(cut, lo), hi))
    bounds.append(n)
    return list(zip(bounds[:-1], bounds[1:]))


def plan_tiles(vol_dims, tile_dims, overlap=(16, 16, 8), blend: str = "center_crop",
               seam_shift=(0, 0, 0)) -> TilingPlan:
    """Lay tiles at stride (tile - overlap), the last one flush with the border.

    ``vol_dims`` smaller than a tile on some axis means the caller pads that
    axis up to the tile size (see :func:`reconstruct`). ``seam_shift`` moves
    every interior cut inside its overlap region, for seam self-consistency
    checks.
    """
    vol_dims = tuple(int(v) for v in vol_dims)
    tile_dims = tuple(int(t) for t in tile_dims)
    overlap = tuple(int(o) for o in overlap)
    if blend not in ("center_crop", "hann"):
        raise InvalidPlan(f"unknown blend mode {blend!r}")
    if any(o < 0 or 2 * o > t for o, t in zip(overlap, tile_dims)):
        raise InvalidPlan(f"overlap {overlap} must be within [0, tile/2] for tile {tile_dims}")
    padded = tuple(max(v, t) for v, t in zip(vol_dims, tile_dims))
    starts = [_axis_starts(n, t, o) for n, t, o in zip(padded, tile_dims, overlap)]
    cuts = [_axis_cuts(s, t, n, sh) for s, t, n, sh in zip(starts, tile_dims, padded, seam_shift)]
    tiles = []
    for i, (sx, cx) in enumerate(zip(starts[0], cuts[0])):
        for j, (sy, cy) in enumerate(zip(starts[1], cuts[1])):
            for k, (sz, cz) in enumerate(zip(starts[2], cuts[2])):
                tiles.append(Tile((sx, sy, sz), (cx[0], cy[0], cz[0]), (cx[1], cy[1], cz[1])))
    return TilingPlan(padded, tile_dims, overlap, blend, tuple(tiles), tuple(len(s) for s in starts))


def blend_window(tile_dims) -> np.ndarray:
    """Strictly positive separable sin^2 window."""
    ws = [np.sin(np.pi * (np.arange(t) + 0.5) / t) ** 2 for t in tile_dims]
    return ws[0][:, None, None] * ws[1][None, :, None] * ws[2][None, None, :]


def blend_weight_sum(plan: TilingPlan) -> np.ndarray:
    """Per-voxel sum of normalized blend weights (all ones for a valid plan)."""
    w = blend_window(plan.tile_dims)
    acc = np.zeros(plan.vol_dims)
    for t in plan.tiles:
        acc[_src(t, plan)] += w
    out = np.zeros(plan.vol_dims)
    for t in plan.tiles:
        out[_src(t, plan)] += w / acc[_src(t, plan)]
    return out


def _src(tile: Tile, plan: TilingPlan):
    return tuple(slice(c, c + s) for c, s in zip(tile.corner, plan.tile_dims))


def _pad_reflect(a: np.ndarray, dims) -> np.ndarray:
    """Reflect-pad at the high end of each axis up to ``dims``."""
    while any(n < d for n, d in zip(a.shape, dims)):
        for ax, (n, d) in enumerate(zip(a.shape, dims)):
            if n < d:
                # reflect can add at most n - 1 voxels per call
                pad = [(0, 0)] * 3
                pad[ax] = (0, min(d - n, n - 1) if n > 1 else d - n)
                a = np.pad(a, pad, mode="reflect" if n > 1 else "edge")
    return a


def run_tiles(data: np.ndarray, net: Network, plan: TilingPlan, threads: int = 1) -> np.ndarray:
    """Apply ``net`` (eval mode) per tile and stitch; ``data`` is already normalized."""
    orig = data.shape
    padded = _pad_reflect(data, plan.vol_dims)

    def infer(tile: Tile) -> np.ndarray:
        x = padded[_src(tile, plan)][None, None]
        return net.forward(np.ascontiguousarray(x), train=False)[0, 0]

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            outs = list(pool.map(infer, plan.tiles))
    else:
        outs = [infer(t) for t in plan.tiles]

    if plan.blend == "center_crop":
        out = np.empty(plan.vol_dims, dtype=np.float32)
        for tile, y in zip(plan.tiles, outs):
            dst = tuple(slice(lo, hi) for lo, hi in zip(tile.dest_lo, tile.dest_hi))
            loc = tuple(slice(lo - c, hi - c) for lo, hi, c in zip(tile.dest_lo, tile.dest_hi, tile.corner))
            out[dst] = y[loc]
    else:
        w = blend_window(plan.tile_dims)
        acc = np.zeros(plan.vol_dims)
        num = np.zeros(plan.vol_dims)
        for tile, y in zip(plan.tiles, outs):
            acc[_src(tile, plan)] += w
            num[_src(tile, plan)] += w * y
        out = (num / acc).astype(np.float32)
    return out[tuple(slice(0, n) for n in orig)]


def reconstruct(vol: Volume, net: Network, plan: TilingPlan | None = None, percentile: float | None = 99.9,
                threads: int = 1) -> Volume:
    """De-scatter a whole volume by tiling.

    The input is normalized once with a single whole-volume percentile scale
    (skip with ``percentile=None`` when it is already normalized); the result
    is in those normalized units, clamped at zero.
    """
    if plan is None:
        plan = plan_tiles(vol.dims, net.config.input_dims)
    if tuple(plan.tile_dims) != tuple(net.config.input_dims):
        raise InvalidPlan(f"tile dims {plan.tile_dims} != network input {net.config.input_dims}")
    if tuple(plan.vol_dims) != tuple(max(v, t) for v, t in zip(vol.dims, plan.tile_dims)):
        raise InvalidPlan(f"plan covers {plan.vol_dims}, volume is {vol.dims}")
    if percentile is not None:
        vol, _ = normalize_volume(vol, percentile)
    out = run_tiles(vol.data, net, plan, threads)
    return vol.with_data(np.maximum(out, 0.0))


def seam_band(plan: TilingPlan, width: int = 2) -> np.ndarray:
    """Boolean mask of voxels within ``width`` of an interior destination cut."""
    mask = np.zeros(plan.vol_dims, dtype=bool)
    for t in plan.tiles:
        for ax in range(3):
            for edge in (t.dest_lo[ax], t.dest_hi[ax]):
                if 0 < edge < plan.vol_dims[ax]:
                    sl = [slice(lo, hi) for lo, hi in zip(t.dest_lo, t.dest_hi)]
                    sl[ax] = slice(max(edge - width, 0), min(edge + width, plan.vol_dims[ax]))
                    mask[tuple(sl)] = True
    return mask
