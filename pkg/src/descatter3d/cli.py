"""``descatter3d`` command-line front end.

Every subcommand reads ``--config`` plus ``--set section.field=value``
overrides and writes into ``--out`` together with a ``run.json`` provenance
record. Exit codes: 0 success, 1 usage error, 2 data or validation error.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import platform
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import PipelineConfig, load_config
from .errors import Descatter3DError, InvalidDims
from .volume import Volume, load_volume, save_volume

log = logging.getLogger("descatter3d")

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}\n\n{self.format_usage()}")


# --- rendering ------------------------------------------------------------------

def quantize_slice(plane: np.ndarray, lo_pct: float = 0.1, hi_pct: float = 99.9) -> np.ndarray:
    """Map a 2D (x, y) plane to uint8 rows=y, cols=x, linear between two percentiles."""
    p = plane.astype(np.float64)
    lo, hi = np.percentile(p, [lo_pct, hi_pct])
    if hi <= lo:
        # degenerate range: everything at or above the level is white
        img = np.where(p >= hi, 255, 0)
    else:
        img = np.round(np.clip((p - lo) / (hi - lo), 0.0, 1.0) * 255.0)
    return img.astype(np.uint8).T


def render_slice(vol: Volume, z_index: int, out_path, lo_pct: float = 0.1, hi_pct: float = 99.9) -> np.ndarray:
    """Write plane ``z_index`` as an 8-bit grayscale PNG (width nx, height ny)."""
    from PIL import Image

    if not 0 <= z_index < vol.dims[2]:
        raise InvalidDims(f"z index {z_index} outside [0, {vol.dims[2]})")
    img = quantize_slice(vol.data[:, :, z_index], lo_pct, hi_pct)
    Image.fromarray(img, mode="L").save(out_path, format="PNG")
    return img


# --- helpers --------------------------------------------------------------------

def parse_dims(text: str) -> tuple[int, int, int]:
    try:
        dims = tuple(int(v) for v in text.lower().split("x"))
    except ValueError:
        raise UsageError(f"bad dims {text!r}; expected NXxNYxNZ") from None
    if len(dims) != 3:
        raise UsageError(f"bad dims {text!r}; expected NXxNYxNZ")
    return dims


def parse_points(text: str) -> np.ndarray:
    try:
        pts = [[float(v) for v in p.split(",")] for p in text.split(";") if p.strip()]
    except ValueError:
        raise UsageError(f"bad points {text!r}; expected x,y,z;x,y,z") from None
    if any(len(p) != 3 for p in pts):
        raise UsageError(f"bad points {text!r}; expected x,y,z;x,y,z")
    return np.asarray(pts)


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _threads(args) -> int:
    if args.threads is not None:
        return args.threads
    env = os.environ.get("DESCATTER3D_THREADS")
    try:
        return max(1, int(env)) if env else 1
    except ValueError:
        raise UsageError(f"DESCATTER3D_THREADS must be an integer, got {env!r}") from None


def _write_run(out: Path, args, cfg: PipelineConfig, files: list[Path]) -> None:
    import scipy

    record = {
        "command": args.command,
        "argv": args.argv,
        "config": cfg.to_dict(),
        "seeds": {
            "phantom": cfg.phantom.seed,
            "noise": cfg.noise.seed,
            "dataset": cfg.dataset.seed,
            "network_init": cfg.network.init_seed,
            "train": cfg.train.seed,
        },
        "threads": _threads(args),
        "versions": {
            "descatter3d": __version__,
            "python": platform.python_version(),
            "numpy": np.__version__,
            "scipy": scipy.__version__,
        },
        "files": {str(p.relative_to(out)): _sha256(p) for p in sorted(files)},
    }
    (out / "run.json").write_text(json.dumps(record, indent=2, sort_keys=True) + "\n", encoding="utf-8")


# --- subcommands ----------------------------------------------------------------

def cmd_phantom(args, cfg, out):
    from .phantom import generate_phantom, save_annotations

    truth, ann = generate_phantom(cfg.phantom, cfg.eval.scoring_offset)
    save_volume(truth, out / "truth.dvol")
    save_annotations(ann, out / "annotations.csv")
    print(f"{len(ann.spines)} spines, {len(ann.dendrites)} dendrites -> {out}")
    return [out / "truth.dvol", out / "annotations.csv", out / "annotations.dendrites.json"]


def cmd_simulate(args, cfg, out):
    from .scatter import apply_forward_model

    truth = load_volume(args.input)
    measured = apply_forward_model(truth, cfg.scatter, cfg.noise, threads=_threads(args))
    save_volume(measured, out / "measured.dvol")
    return [out / "measured.dvol"]


def cmd_dataset(args, cfg, out):
    from .dataset import build_dataset, save_dataset

    if len(args.measured) != len(args.truth):
        raise UsageError("--measured and --truth must be given the same number of times")
    sources, pitch = [], None
    for i, (m, t) in enumerate(zip(args.measured, args.truth)):
        mv, tv = load_volume(m), load_volume(t)
        pitch = pitch or tv.pitch
        sources.append((str(i), mv, tv))
    d = cfg.dataset
    if tuple(d.cube_dims) != tuple(cfg.network.input_dims):
        log.warning("dataset.cube_dims %s differs from network.input_dims %s", d.cube_dims, cfg.network.input_dims)
    manifest = build_dataset(sources, d.cubes_per_source, d.cube_dims, d.seed, d.train_fraction, d.percentile)
    root = out / "dataset"
    save_dataset(manifest, root, pitch)
    print(f"{len(manifest.indices('train'))} train / {len(manifest.indices('val'))} val cubes -> {root}")
    return sorted(root.iterdir())


def cmd_train(args, cfg, out):
    from dataclasses import replace

    from .dataset import load_dataset
    from .neural3d import build_network, save_checkpoint
    from .trainer import train

    manifest = load_dataset(args.dataset)
    net = build_network(cfg.network.build_config(), cfg.network.init_seed)
    tcfg = replace(cfg.train, checkpoint_dir=str(out / "checkpoints"))
    net, tlog = train(manifest, net, tcfg, resume=args.resume)
    save_checkpoint(out / "model.dnet", net, seed=cfg.train.seed)
    tlog.write_csv(out / "train_log.csv")
    print(f"stopped: {tlog.stop_reason}; best val {tlog.best_val:.6g} at epoch {tlog.best_epoch}")
    ck = out / "checkpoints"
    return [out / "model.dnet", out / "train_log.csv"] + sorted(ck.glob("*.dnet"))


def cmd_infer(args, cfg, out):
    from .neural3d import load_checkpoint
    from .tiling import plan_tiles, reconstruct

    net, _, _ = load_checkpoint(args.model)
    vol = load_volume(args.input)
    t = cfg.tiling
    plan = plan_tiles(vol.dims, net.config.input_dims, t.overlap, t.blend, t.seam_shift)
    result = reconstruct(vol, net, plan, t.percentile, _threads(args))
    save_volume(result, out / "output.dvol")
    (out / "plan.json").write_text(plan.to_json() + "\n", encoding="utf-8")
    return [out / "output.dvol", out / "plan.json"]


def cmd_eval(args, cfg, out):
    from .metrics import detect_candidates, fidelity, spine_visibility, write_candidates_csv
    from .phantom import load_annotations

    vol = load_volume(args.volume)
    ann = load_annotations(args.annotations)
    report = spine_visibility(vol, ann, cfg.eval)
    report.write_csv(out / "recall.csv")
    files = [out / "recall.csv"]
    print(f"visible: {report.summary()} of {report.total}")
    cands = detect_candidates(vol, ann, cfg.eval)
    write_candidates_csv({"volume": cands}, out / "candidates.csv")
    files.append(out / "candidates.csv")
    print(f"off-annotation candidates: {len(cands)}")
    if args.reference:
        ref = load_volume(args.reference)
        f = fidelity(vol, ref)
        with (out / "fidelity.csv").open("w") as fh:
            fh.write("nrmse,psnr\n")
            fh.write(f"{f['nrmse']!r},{f['psnr']!r}\n")
        files.append(out / "fidelity.csv")
        print(f"nrmse {f['nrmse']:.6f}, psnr {f['psnr']:.3f} dB")
    return files


def cmd_profile(args, cfg, out):
    from .metrics import intensity_profile

    vol = load_volume(args.volume)
    pts = parse_points(args.points)
    prof = intensity_profile(vol, pts, args.half_width, args.n_samples)
    seg = np.linalg.norm(np.diff(pts, axis=0), axis=1).sum()
    arc = np.linspace(0.0, seg, args.n_samples)
    with (out / "profile.csv").open("w") as fh:
        fh.write("index,arc_um,value\n")
        for i, (a, v) in enumerate(zip(arc, prof)):
            fh.write(f"{i},{a:.6f},{v:.9g}\n")
    return [out / "profile.csv"]


def cmd_time(args, cfg, out):
    from .metrics import acquisition_time

    dims = parse_dims(args.dims)
    if args.mode == "pstpm":
        if args.dwell_us is None:
            raise UsageError("--mode pstpm needs --dwell-us")
        seconds = acquisition_time("pstpm", dims, dwell_s=args.dwell_us * 1e-6)
    else:
        if args.exposure_ms is None:
            raise UsageError("--mode tfm needs --exposure-ms")
        seconds = acquisition_time("tfm", dims, exposure_s=args.exposure_ms * 1e-3)
    print(f"{seconds:.3f} s")
    return None


def cmd_render(args, cfg, out):
    vol = load_volume(args.volume)
    path = out / (args.name or f"slice_z{args.z:03d}.png")
    render_slice(vol, args.z, path, args.lo_pct, args.hi_pct)
    return [path]


COMMANDS = {
    "phantom": cmd_phantom,
    "simulate": cmd_simulate,
    "dataset": cmd_dataset,
    "train": cmd_train,
    "infer": cmd_infer,
    "eval": cmd_eval,
    "profile": cmd_profile,
    "time": cmd_time,
    "render": cmd_render,
}


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="JSON pipeline config")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY.PATH=VALUE",
                        help="override one config field (repeatable)")
    common.add_argument("--out", default=".", help="run directory (created if missing)")
    common.add_argument("--threads", type=int, default=None,
                        help="worker threads (default: $DESCATTER3D_THREADS or 1)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="descatter3d", description="Synthetic de-scattering pipeline for 3D fluorescence stacks.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    sub.add_parser("phantom", parents=[common], help="generate a ground-truth phantom and its annotations")
    s = sub.add_parser("simulate", parents=[common], help="forward-simulate a scattered measurement")
    s.add_argument("--input", required=True)
    s = sub.add_parser("dataset", parents=[common], help="cut paired training cubes")
    s.add_argument("--measured", action="append", required=True)
    s.add_argument("--truth", action="append", required=True)
    s = sub.add_parser("train", parents=[common], help="train the network")
    s.add_argument("--dataset", required=True)
    s.add_argument("--resume")
    s = sub.add_parser("infer", parents=[common], help="tiled reconstruction of a volume")
    s.add_argument("--model", required=True)
    s.add_argument("--input", required=True)
    s = sub.add_parser("eval", parents=[common], help="spine recall, candidates and fidelity")
    s.add_argument("--volume", required=True)
    s.add_argument("--annotations", required=True)
    s.add_argument("--reference")
    s = sub.add_parser("profile", parents=[common], help="normalized intensity profile along a polyline")
    s.add_argument("--volume", required=True)
    s.add_argument("--points", required=True, help="x,y,z;x,y,z;... in um")
    s.add_argument("--half-width", type=float, default=0.0)
    s.add_argument("--n-samples", type=int, default=100)
    s = sub.add_parser("time", parents=[common], help="acquisition time of a stack")
    s.add_argument("--mode", choices=["pstpm", "tfm"], required=True)
    s.add_argument("--dims", required=True, help="NXxNYxNZ")
    s.add_argument("--dwell-us", type=float)
    s.add_argument("--exposure-ms", type=float)
    s = sub.add_parser("render", parents=[common], help="write one z-plane as PNG")
    s.add_argument("--volume", required=True)
    s.add_argument("--z", type=int, required=True)
    s.add_argument("--name")
    s.add_argument("--lo-pct", type=float, default=0.1)
    s.add_argument("--hi-pct", type=float, default=99.9)
    return p


def dispatch(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_help())
        args.argv = argv
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        cfg = load_config(args.config, args.overrides)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        files = COMMANDS[args.command](args, cfg, out)
        if files is not None:
            _write_run(out, args, cfg, files)
        return EXIT_OK
    except UsageError as exc:
        print(str(exc).rstrip(), file=sys.stderr)
        return EXIT_USAGE
    except (Descatter3DError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
