"""Command-line driver: simulate, reconstruct, analyse and emit figure data.

Exit status is 0 on success, 2 for configuration or usage errors, 3 for I/O
and file-format errors and 4 for numerical failures (fits, quadrature,
degenerate estimates).
"""

from __future__ import annotations

import argparse
import csv
import itertools
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from . import io
from .analysis import (DipModel, Edge, EstimationError, FitError, IllPosedError,
                       combine_channels, fit_dip, invert_depth, raster_superresolve)
from .jpd import (CoincidenceTensor, accumulate_blocks, antibunch_map, bunch_map_adjacent,
                  load_checkpoint, merge, project, save_checkpoint)
from .model import GeometryError
from .scan import ESTIMATORS, analyze_scan
from .simulate import FormatError, FrameHeader, iter_frame_blocks, iter_homf, write_homf
from .theory import QuadratureError, TheoryParams, visibility_curve

log = logging.getLogger("homimaging")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4
PRODUCTS = ("sum", "minus", "antibunch", "bunch")
THROUGHPUT_TARGET_FPS = 1e5


class UsageError(ValueError):
    pass


def _floats(text: str) -> List[float]:
    return [float(x) for x in text.replace(",", " ").split()]


def _out(args) -> Path:
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _need_config(args):
    if not args.config:
        raise io.ConfigError(f"{args.command} needs --config")
    return io.load_config(args.config, seed=args.seed)


# --- simulate ------------------------------------------------------------------

def cmd_simulate(args) -> int:
    cfg = _need_config(args)
    if cfg.plan is None:
        raise io.ConfigError("config has no [scan] section")
    out = _out(args)
    cam, plan = cfg.camera, cfg.plan
    for k, delay in enumerate(plan.delays_um):
        scene = cfg.scene.with_stage_delay(delay)
        header = FrameHeader(cam.width_px, cam.height_px, plan.frames_per_delay, plan.seed, delay)
        clicks = [0]

        def counted(blocks):
            for b in blocks:
                clicks[0] += int(np.unpackbits(b).sum())
                yield b

        path = out / f"delay_{k:03d}.homf"
        write_homf(path, header, counted(iter_frame_blocks(scene, cfg.source, cam,
                                                           plan.frames_per_delay, plan.seed, k)))
        print(f"delay {k:3d}  {delay:9.3f} um  {plan.frames_per_delay} frames  "
              f"{clicks[0] / plan.frames_per_delay:.4f} clicks/frame  -> {path}")
    return EXIT_OK


# --- reconstruct ---------------------------------------------------------------

def _accumulate_file(source, threads: int) -> CoincidenceTensor:
    chunks = iter_homf(source)
    header, first = next(chunks)
    if header.n_frames == 0:
        raise ValueError("frame file holds no frames")
    blocks = itertools.chain([first], (c for _, c in chunks))
    return accumulate_blocks(blocks, header.width_px, header.height_px, threads=threads,
                             stage_delay_um=header.stage_delay_um)


def _pair_detections(t: CoincidenceTensor) -> float:
    g = t.gamma
    return float((g.sum() - np.trace(g)) / 2.0 * t.n_frames)


def write_products(t: CoincidenceTensor, stem: Path, products: Sequence[str],
                   radius: float = 1.0) -> List[Path]:
    written = []
    for name in products:
        path = stem.with_name(f"{stem.name}_{name}.csv")
        if name in ("sum", "minus"):
            pairs = "cross" if name == "sum" else "same"
            proj = project(t, name, pairs=pairs)
            io.write_csv_grid(path, np.where(proj.valid, proj.values, np.nan),
                              f"{name}_projection center_row={proj.center[0]} "
                              f"center_col={proj.center[1]}", "pairs_per_frame")
        elif name == "antibunch":
            io.write_csv_grid(path, antibunch_map(t, radius), "antibunch_coincidences", "counts")
        elif name == "bunch":
            io.write_csv_grid(path, bunch_map_adjacent(t), "bunch_adjacent_coincidences",
                              "counts")
        else:
            raise UsageError(f"unknown product {name!r}; choose from {', '.join(PRODUCTS)}")
        written.append(path)
    return written


def cmd_reconstruct(args) -> int:
    out = _out(args)
    products = [p for p in args.products.split(",") if p] if args.products else []
    for p in products:
        if p not in PRODUCTS:
            raise UsageError(f"unknown product {p!r}; choose from {', '.join(PRODUCTS)}")
    if args.resume and len(args.frames) != 1:
        raise UsageError("--resume takes exactly one frame file")
    # compile the kernel outside the timed region
    accumulate_blocks([np.zeros((1, 2, 1), np.uint8)], 2, 2)
    for name in args.frames:
        start = time.perf_counter()
        if name == "-":
            t = _accumulate_file(sys.stdin.buffer, args.threads)
            stem = out / "stdin"
        else:
            t = _accumulate_file(name, args.threads)
            stem = out / Path(name).stem
        elapsed = max(time.perf_counter() - start, 1e-9)
        fps = t.n_frames / elapsed
        if args.resume:
            prev = load_checkpoint(args.resume)
            if not prev.same_geometry(t):
                raise GeometryError("resume checkpoint has a different sensor geometry")
            t = merge(prev, t)
        ckpt = stem.with_suffix(".homc")
        save_checkpoint(t, ckpt)
        write_products(t, stem, products, args.radius)
        print(f"{name}: {t.n_frames} frames, {fps:,.0f} frames/s, "
              f"{_pair_detections(t) / elapsed:,.1f} pair detections/s -> {ckpt}")
        if fps < THROUGHPUT_TARGET_FPS:
            log.warning("throughput %.0f frames/s is below the %.0f frames/s target",
                        fps, THROUGHPUT_TARGET_FPS)
    return EXIT_OK


# --- scan-analyze --------------------------------------------------------------

def cmd_scan_analyze(args) -> int:
    tensors = [load_checkpoint(p) for p in args.checkpoints]
    if args.delays:
        delays = _floats(args.delays)
    else:
        delays = [t.stage_delay_um for t in tensors]
    if len(delays) != len(tensors):
        raise UsageError(f"{len(delays)} delays for {len(tensors)} checkpoints")
    if any(not np.isfinite(d) for d in delays):
        raise UsageError("checkpoints lack stage delays; pass --delays")
    if len(tensors) < 5:
        raise IllPosedError(f"need at least 5 delays, got {len(tensors)}")
    result = analyze_scan(delays, tensors, shared_shape=not args.independent)
    # per-pixel calibration for depth: mean of the antibunch map as reconstruct writes it
    pixel_counts = np.array([antibunch_map(t, args.radius).mean() for t in tensors])
    try:
        pixel_fit, pixel_error = fit_dip(delays, pixel_counts), ""
    except (FitError, IllPosedError) as exc:
        pixel_fit, pixel_error = None, str(exc)
    out = _out(args)
    order = np.argsort(result.delays_um)
    with open(out / "scan_curves.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["delay_um"] + [f"{e}_counts" for e in ESTIMATORS]
                   + [f"{e}_residual_counts" for e in ESTIMATORS]
                   + ["antibunch_pixel_counts"])
        for i in order:
            row = [result.delays_um[i]] + [result[e].counts[i] for e in ESTIMATORS]
            row += [result[e].fit.residuals[i] if result[e].fit else float("nan")
                    for e in ESTIMATORS]
            row.append(pixel_counts[i])
            w.writerow([f"{v:.10g}" for v in row])
    rows = [(e, result[e].fit, result[e].visibility, result[e].relative_visibility,
             result[e].error) for e in ESTIMATORS]
    rows.append(("antibunch_pixel", pixel_fit,
                 pixel_fit.visibility if pixel_fit else float("nan"),
                 pixel_fit.relative_visibility if pixel_fit else float("nan"), pixel_error))
    with open(out / "scan_fits.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["estimator", "visibility", "visibility_se", "relative_visibility",
                    "relative_visibility_se", "baseline_counts", "width_um", "center_um",
                    "error"])
        for e, fit, vis, rel, error in rows:
            if fit is None:
                w.writerow([e, f"{vis:.10g}", "nan", f"{rel:.10g}", "nan", "nan", "nan", "nan",
                            error])
                print(f"{e:15s} fit failed: {error}")
                continue
            m = fit.model
            w.writerow([e] + [f"{v:.10g}" for v in (vis, fit.visibility_se, rel,
                                                     fit.relative_visibility_se, m.baseline,
                                                     m.width, m.center)] + [""])
            print(f"{e:15s} V = {vis:.4f} +/- {fit.visibility_se:.4f}  "
                  f"(relative {rel:.4f}, width {m.width:.2f} um, centre {m.center:.2f} um)")
    return EXIT_OK


# --- depth / combine / raster ----------------------------------------------------

def _dip_from_args(args) -> DipModel:
    if args.fits:
        with open(args.fits) as fh:
            rows = {row["estimator"]: row for row in csv.DictReader(fh)}
        row = rows.get("antibunch_pixel")
        if row is None:
            raise io.ConfigError(f"{args.fits} has no antibunch_pixel row; rerun scan-analyze")
        if row["error"]:
            raise FitError(f"per-pixel anti-bunching fit in {args.fits} failed: {row['error']}")
        return DipModel(float(row["baseline_counts"]) * args.baseline_scale,
                        float(row["relative_visibility"]), float(row["width_um"]),
                        float(row["center_um"]))
    missing = [n for n in ("baseline", "visibility", "width_um", "center_um")
               if getattr(args, n) is None]
    if missing:
        raise UsageError("give --fits or all of --baseline --visibility --width-um --center-um")
    return DipModel(args.baseline * args.baseline_scale, args.visibility, args.width_um,
                    args.center_um)


def _read_mask(path: str) -> np.ndarray:
    return io.read_grid(path) != 0


def cmd_depth(args) -> int:
    image = io.read_grid(args.image)
    dip = _dip_from_args(args)
    edge = Edge.RISING if args.edge == "rising" else Edge.FALLING
    result = invert_depth(image, dip, args.operating_delay_um, edge)
    out = _out(args)
    io.write_csv_grid(out / "depth.csv", result.depth, "depth", "um")
    io.write_csv_grid(out / "depth_stderr.csv", result.stderr, "depth_stderr", "um")
    io.write_pgm(out / "depth.pgm", result.depth, unit="um",
                 masks={"invalid": ~result.valid})
    v = result.depth[result.valid]
    print(f"depth: {v.size}/{result.depth.size} pixels valid, "
          f"mean {np.mean(v) if v.size else float('nan'):.3f} um")
    return EXIT_OK


def cmd_combine(args) -> int:
    a = io.read_grid(args.antibunch)
    b = io.read_grid(args.bunch)
    masks = [_read_mask(m) for m in args.mask]
    comb = combine_channels(a, b, masks, details=True)
    out = _out(args)
    io.write_csv_grid(out / "combined.csv", comb.image, "combined_coincidences", "counts")
    io.write_pgm(out / "combined.pgm", comb.image, unit="counts",
                 masks={f"region{i}": m for i, m in enumerate(masks)})
    print(f"weights antibunch {comb.weights[0]:.4f} bunch {comb.weights[1]:.4f}; "
          f"sigma antibunch {comb.sigmas[0]:.4g} bunch {comb.sigmas[1]:.4g} counts")
    return EXIT_OK


def cmd_theory(args) -> int:
    base = TheoryParams()
    if args.config:
        cfg = io.load_config(args.config)
        base = TheoryParams(pixel_size=cfg.camera.pixel_pitch_um,
                            array_width=cfg.camera.half_width * cfg.camera.pixel_pitch_um,
                            loss_rate=1.0 - cfg.camera.detection_efficiency,
                            dip_width=cfg.source.dip_width_um)
    if args.loss_rate is not None:
        base = replace(base, loss_rate=args.loss_rate)
    if args.focal_lengths:
        curve = visibility_curve(base, focal_lengths_mm=_floats(args.focal_lengths))
    else:
        ratios = _floats(args.ratios) if args.ratios else np.geomspace(0.2, 4.0, 25)
        curve = visibility_curve(base, ratios=ratios)
    out = _out(args)
    with open(out / "theory.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["ratio", "visibility", "focal_length_mm", "sigma_corr_um"])
        for pt in curve:
            w.writerow([f"{pt.ratio:.10g}", f"{pt.visibility:.10g}",
                        f"{pt.focal_length_mm:.10g}", f"{pt.sigma_corr_um:.10g}"])
    best = max(curve, key=lambda p: p.visibility)
    print(f"{len(curve)} points; maximum visibility {best.visibility:.4f} at R = {best.ratio:.3f}")
    return EXIT_OK


def cmd_raster(args) -> int:
    imgs = [io.read_grid(p) for p in args.images]
    sr = raster_superresolve([[imgs[0], imgs[1]], [imgs[2], imgs[3]]])
    out = _out(args)
    io.write_csv_grid(out / "superresolved.csv", sr, "superresolved", args.unit)
    io.write_pgm(out / "superresolved.pgm", sr, unit=args.unit)
    print(f"super-resolved image {sr.shape[0]}x{sr.shape[1]}")
    return EXIT_OK


# --- entry point ---------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="homimaging", description=__doc__.splitlines()[0])
    p.add_argument("--config", help="INI run configuration")
    p.add_argument("--seed", type=int, help="override the scan seed (unsigned 64-bit)")
    p.add_argument("--threads", type=int, default=1, help="accumulation worker threads")
    p.add_argument("--output", default=".", help="output directory")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    sub.add_parser("simulate", help="write one HOMF frame file per scan delay")

    r = sub.add_parser("reconstruct", help="accumulate frame files into checkpoints")
    r.add_argument("frames", nargs="+", help="HOMF files, or - for standard input")
    r.add_argument("--resume", help="checkpoint to merge with the new frames")
    r.add_argument("--products", default="sum,minus,antibunch,bunch",
                   help="comma-separated subset of " + ",".join(PRODUCTS))
    r.add_argument("--radius", type=float, default=1.0,
                   help="anti-bunching neighbourhood radius in pixels")

    s = sub.add_parser("scan-analyze", help="fit dips/peaks to per-delay checkpoints")
    s.add_argument("checkpoints", nargs="+")
    s.add_argument("--delays", help="delays in um, overriding checkpoint headers")
    s.add_argument("--independent", action="store_true",
                   help="fit bunching peaks without borrowing the dip width and centre")
    s.add_argument("--radius", type=float, default=1.0,
                   help="antibunch-map radius used by reconstruct, for the per-pixel calibration")

    d = sub.add_parser("depth", help="convert a coincidence image to depth")
    d.add_argument("--image", required=True)
    d.add_argument("--fits", help="scan_fits.csv from scan-analyze (uses the antibunch_pixel row)")
    d.add_argument("--baseline", type=float)
    d.add_argument("--visibility", type=float, help="dip depth relative to the baseline")
    d.add_argument("--width-um", type=float)
    d.add_argument("--center-um", type=float)
    d.add_argument("--baseline-scale", type=float, default=1.0,
                   help="image frames over calibration frames")
    d.add_argument("--operating-delay-um", type=float, required=True)
    d.add_argument("--edge", choices=("rising", "falling"), default="rising")

    c = sub.add_parser("combine", help="inverse-variance combination of the two channels")
    c.add_argument("--antibunch", required=True)
    c.add_argument("--bunch", required=True)
    c.add_argument("--mask", action="append", required=True,
                   help="constant-signal region (nonzero cells); repeat for more regions")

    t = sub.add_parser("theory", help="visibility versus pixel/correlation width ratio")
    t.add_argument("--ratios", help="list of R values")
    t.add_argument("--focal-lengths", help="list of pump focal lengths in mm")
    t.add_argument("--loss-rate", type=float)

    rs = sub.add_parser("raster", help="interleave a 2x2 half-pixel raster")
    rs.add_argument("images", nargs=4, help="images at offsets (0,0) (0,1/2) (1/2,0) (1/2,1/2)")
    rs.add_argument("--unit", default="counts")
    return p


COMMANDS = {
    "simulate": cmd_simulate, "reconstruct": cmd_reconstruct, "scan-analyze": cmd_scan_analyze,
    "depth": cmd_depth, "combine": cmd_combine, "theory": cmd_theory, "raster": cmd_raster,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s: %(message)s")
    if args.seed is not None and not 0 <= args.seed < 2 ** 64:
        print("error: --seed must fit in an unsigned 64-bit integer", file=sys.stderr)
        return EXIT_CONFIG
    if args.threads < 1:
        print("error: --threads must be at least 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return COMMANDS[args.command](args)
    except (FitError, IllPosedError, EstimationError, QuadratureError, ArithmeticError) as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FormatError, OSError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (io.ConfigError, UsageError, GeometryError, ValueError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
