"""Command-line entry point.

Subcommands cover the full pipeline: ``simulate`` an acquisition stack from
a complex object, ``reconstruct`` it, ``train`` the unpaired translator,
``stain`` reconstructed tiles, ``evaluate`` SSIM reports, ``tile`` and
``stitch`` images, and ``demo`` for the seeded end-to-end closed loop on
procedural data.

Exit codes: 0 success, 1 validation/usage error (single-line diagnostic on
stderr), 2 runtime or numeric failure.  A config file of ``key = value``
lines (flag names with dashes or underscores) supplies defaults that
explicit flags override.  Output files are written atomically.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from . import metrics, pipeline, recovery, textures, translate
from .errors import ValidationError
from .optics import (
    DEFAULT_CHANNEL_WAVELENGTHS_UM,
    IlluminationGeometry,
    defocus_pupil,
    grid_geometry,
    ideal_pupil,
    simulate_stack,
)


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """Argument parser that raises instead of exiting on bad input."""

    def error(self, message):
        raise _UsageError(f"{message}\n{self.format_usage()}".rstrip())


def _parse_config_file(path: str) -> Dict[str, str]:
    values: Dict[str, str] = {}
    text = Path(path).read_text(encoding="utf-8")
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValidationError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
        key, value = line.split("=", 1)
        values[key.strip().replace("-", "_")] = value.strip()
    return values


def _parse_leds(text: str) -> tuple[int, int]:
    try:
        rows, cols = text.lower().split("x")
        return int(rows), int(cols)
    except ValueError as exc:
        raise ValidationError(f"--leds expects ROWSxCOLS (e.g. 15x15), got {text!r}") from exc


def _parse_dz_range(text: str) -> tuple[float, float, float]:
    try:
        lo, hi, step = (float(v) for v in text.split(":"))
        return lo, hi, step
    except ValueError as exc:
        raise ValidationError(f"--refocus expects MIN:MAX:STEP in um, got {text!r}") from exc


def _geometry_from_args(args) -> IlluminationGeometry:
    rows, cols = _parse_leds(args.leds)
    wavelengths = {
        "R": args.wavelength_r / 1000.0,
        "G": args.wavelength_g / 1000.0,
        "B": args.wavelength_b / 1000.0,
    }
    return grid_geometry(rows, cols, args.pitch, args.height, wavelengths)


def _add_geometry_flags(parser) -> None:
    parser.add_argument("--leds", default="15x15", help="LED grid as ROWSxCOLS (default 15x15)")
    parser.add_argument("--pitch", type=float, default=4.0, help="LED pitch in mm (default 4)")
    parser.add_argument("--height", type=float, default=80.0,
                        help="sample-to-array distance in mm (default 80)")
    parser.add_argument("--wavelength-r", type=float, default=632.0,
                        help="red wavelength in nm (default 632)")
    parser.add_argument("--wavelength-g", type=float, default=532.0,
                        help="green wavelength in nm (default 532)")
    parser.add_argument("--wavelength-b", type=float, default=472.0,
                        help="blue wavelength in nm (default 472)")


def _load_domain_tiles(entries: List[Path], channels: int) -> np.ndarray:
    tiles = []
    for path in entries:
        img = pipeline.load_image(path)
        if channels == 1 and img.ndim == 3:
            raise ValidationError(f"{path}: expected grayscale, got color")
        tiles.append(pipeline.normalize_for_network(img.astype(np.float64), "intensity8"))
    return np.stack(tiles)


def _set_threads(args) -> None:
    n = args.threads
    if n is None:
        env = os.environ.get("FPSTAIN_THREADS")
        n = int(env) if env else None
    if n is not None:
        if n < 1:
            raise ValidationError(f"--threads must be >= 1, got {n}")
        import torch

        torch.set_num_threads(n)


# ---------------------------------------------------------------------------
# Subcommand handlers


def _cmd_simulate(args) -> int:
    geometry = _geometry_from_args(args)
    channels = [c.upper() for c in args.channels]
    for c in channels:
        if c not in "RGB":
            raise ValidationError(f"--channels must use letters r, g, b, got {args.channels!r}")
    obj = pipeline.read_cfld(args.object)
    objects = {}
    for ch in channels:
        override = getattr(args, f"object_{ch.lower()}")
        objects[ch] = pipeline.read_cfld(override) if override else obj
    if obj.height % args.upsample or obj.width % args.upsample:
        raise ValidationError(
            f"object {obj.height}x{obj.width} not divisible by upsample {args.upsample}"
        )
    cap_shape = (obj.height // args.upsample, obj.width // args.upsample)
    cap_pitch = obj.pixel_pitch * args.upsample
    pupil = ideal_pupil(cap_shape, cap_pitch, args.na, geometry.channel_wavelengths[channels[0]])
    if args.defocus:
        pupil = defocus_pupil(pupil, args.defocus)
    stack = simulate_stack(objects, geometry, pupil, channels)
    pipeline.save_stack(stack, args.out, geometry.channel_wavelengths)
    print(f"wrote {len(stack.captures)} captures to {args.out}")
    return 0


def _cmd_reconstruct(args) -> int:
    stack, wavelengths = pipeline.load_stack(args.stack)
    geometry = _geometry_from_args(args)
    config = recovery.ReconstructionConfig(
        iterations=args.iterations,
        pupil_recovery=args.pupil_recovery,
        init_mode=args.init,
        upsample=args.upsample,
    )
    cap_shape = stack.captures[0].intensity.shape
    results = {}
    prefix = Path(args.out_prefix)
    for ch in stack.channels:
        wl = wavelengths.get(ch, DEFAULT_CHANNEL_WAVELENGTHS_UM[ch])
        pupil = ideal_pupil(cap_shape, stack.capture_pitch, stack.objective_na, wl)
        sub = stack.for_channel(ch)
        if args.refocus:
            best_dz, result = recovery.digital_refocus(
                sub, geometry, pupil, config, _parse_dz_range(args.refocus)
            )
            print(f"channel {ch}: best defocus {best_dz:g} um")
        else:
            result = recovery.reconstruct(sub, geometry, pupil, config)
        results[ch] = result
        tag = f"_{ch.lower()}" if len(stack.channels) > 1 else ""
        pipeline.write_cfld(result.object, prefix.with_name(prefix.name + tag + ".cfld"))
        pipeline.save_image(
            pipeline.amplitude_to_uint8(result.object.amplitude()),
            prefix.with_name(prefix.name + tag + "_amplitude.png"),
        )
        pipeline.save_image(
            pipeline.phase_to_uint8(result.object.phase()),
            prefix.with_name(prefix.name + tag + "_phase.png"),
        )
        print(f"channel {ch}: final residual {result.residual_history[-1]:.3e}")
    if all(c in results for c in "RGB"):
        color = recovery.compose_color(results)
        pipeline.save_image(color, prefix.with_name(prefix.name + "_color.png"))
        print(f"wrote color composite {prefix.name}_color.png")
    return 0


def _cmd_train(args) -> int:
    manifest = pipeline.build_dataset(args.domain_a, args.domain_b)
    tiles_a = _load_domain_tiles(manifest.domain_a_entries, manifest.domain_a_channels)
    tiles_b = _load_domain_tiles(manifest.domain_b_entries, manifest.domain_b_channels)
    config = translate.TrainConfig(
        epochs=args.epochs,
        batch_size=args.batch,
        learning_rate=args.lr,
        cycle_weight=args.cycle_weight,
        seed=args.seed,
        base_width=args.base_width,
        n_res_blocks=args.res_blocks,
    )
    model = translate.train(tiles_a, tiles_b, config)
    translate.save_model(model, args.out)
    loss_csv = args.loss_csv or str(Path(args.out).with_suffix("")) + "_loss.csv"
    pipeline.atomic_write_text(loss_csv, translate.loss_history_csv(model.loss_history))
    if model.loss_history:
        last = model.loss_history[-1]
        print(f"trained {args.epochs} epochs; final total loss {last.total:.4f}")
    print(f"wrote {args.out} and {loss_csv}")
    return 0


def _cmd_stain(args) -> int:
    model = translate.load_model(args.model)
    image = pipeline.load_image(args.input)
    stained = translate.virtual_stain(model, image.astype(np.float64))
    pipeline.save_image(stained, args.out)
    print(f"wrote {args.out}")
    return 0


def _cmd_evaluate(args) -> int:
    pred_dir, truth_dir = Path(args.pred), Path(args.truth)
    preds = sorted(p for p in pred_dir.iterdir() if p.suffix.lower() in pipeline.IMAGE_EXTENSIONS)
    truths = sorted(p for p in truth_dir.iterdir() if p.suffix.lower() in pipeline.IMAGE_EXTENSIONS)
    if len(preds) != len(truths):
        raise ValidationError(
            f"prediction count {len(preds)} does not match truth count {len(truths)}"
        )
    pairs = [
        (pipeline.load_image(p).astype(np.float64), pipeline.load_image(t).astype(np.float64))
        for p, t in zip(preds, truths)
    ]
    report = metrics.tile_report([(args.label, pairs)], metrics.SsimParams())
    pipeline.atomic_write_text(args.out, metrics.report_to_csv(report))
    row = report.rows[0]
    print(f"{row.sample_type}: n={row.n_tiles} ssim={row.mean:.4f}+/-{row.std:.4f}")
    return 0


def _cmd_tile(args) -> int:
    image = pipeline.load_image(args.input)
    tileset = pipeline.tile_image(image, args.tile_size, Path(args.input).name)
    pipeline.save_tileset(tileset, args.out)
    print(f"wrote {len(tileset.tiles)} tiles to {args.out}")
    return 0


def _cmd_stitch(args) -> int:
    tileset = pipeline.load_tileset(args.tiles)
    image = pipeline.stitch_tiles(tileset)
    pipeline.save_image(image, args.out)
    print(f"wrote {args.out} ({image.shape[1]}x{image.shape[0]})")
    return 0


def _cmd_demo(args) -> int:
    workdir = Path(args.workdir)
    domain_a, domain_b, holdout_in, holdout_truth = textures.build_demo_tiles(
        args.train_tiles, args.holdout, args.tile_size, args.seed
    )
    for name, tiles in (
        ("domain_a", domain_a),
        ("domain_b", domain_b),
        ("holdout_input", holdout_in),
        ("holdout_truth", holdout_truth),
    ):
        for i, tile in enumerate(tiles):
            pipeline.save_image(tile, workdir / name / f"tile_{i:04d}.png")

    config = translate.TrainConfig(
        epochs=args.epochs,
        batch_size=args.batch,
        seed=args.seed,
        base_width=args.base_width,
        n_res_blocks=args.res_blocks,
    )
    norm_a = pipeline.normalize_for_network(domain_a.astype(np.float64), "intensity8")
    norm_b = pipeline.normalize_for_network(domain_b.astype(np.float64), "intensity8")
    model = translate.train(norm_a, norm_b, config)
    translate.save_model(model, workdir / "model.fpsm")
    pipeline.atomic_write_text(workdir / "loss.csv", translate.loss_history_csv(model.loss_history))

    stained_pairs = []
    baseline_pairs = []
    for i in range(holdout_in.shape[0]):
        stained = translate.virtual_stain(model, holdout_in[i].astype(np.float64))
        pipeline.save_image(stained, workdir / "stained" / f"tile_{i:04d}.png")
        truth = holdout_truth[i].astype(np.float64)
        stained_pairs.append((stained.astype(np.float64), truth))
        replicated = np.repeat(holdout_in[i][:, :, np.newaxis], 3, axis=2).astype(np.float64)
        baseline_pairs.append((replicated, truth))
    report = metrics.tile_report(
        [("input_vs_truth", baseline_pairs), ("output_vs_truth", stained_pairs)],
        metrics.SsimParams(),
    )
    pipeline.atomic_write_text(workdir / "report.csv", metrics.report_to_csv(report))
    for row in report.rows:
        print(f"{row.sample_type}: n={row.n_tiles} ssim={row.mean:.4f}+/-{row.std:.4f}")
    return 0


# ---------------------------------------------------------------------------
# Parser assembly and dispatch


def _build_parser() -> _Parser:
    parser = _Parser(prog="fpstain", description=__doc__.splitlines()[0])
    common = _Parser(add_help=False)
    common.add_argument("--config", help="config file of 'key = value' flag defaults")
    common.add_argument("--threads", type=int, default=None,
                        help="worker thread cap (default: FPSTAIN_THREADS or machine)")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    parser._fpstain_subparsers = sub.choices
    parser._fpstain_common = [common]

    p = sub.add_parser("simulate", help="simulate an FPM acquisition stack", parents=parser._fpstain_common)
    p.add_argument("--object", required=True, help="high-resolution complex object (CFLD)")
    for ch in "rgb":
        p.add_argument(f"--object-{ch}", default=None,
                       help=f"per-channel object override for channel {ch.upper()} (CFLD)")
    _add_geometry_flags(p)
    p.add_argument("--na", type=float, default=0.1, help="objective NA (default 0.1)")
    p.add_argument("--channels", default="g", help="channels to acquire, e.g. g or rgb")
    p.add_argument("--upsample", type=int, default=4,
                   help="object-to-capture grid ratio (default 4)")
    p.add_argument("--defocus", type=float, default=0.0, help="sample defocus in um")
    p.add_argument("--out", required=True, help="output stack directory")
    p.set_defaults(func=_cmd_simulate)

    p = sub.add_parser("reconstruct", help="reconstruct a stack directory", parents=parser._fpstain_common)
    p.add_argument("--stack", required=True, help="stack directory from simulate")
    _add_geometry_flags(p)
    p.add_argument("--iterations", type=int, default=10)
    p.add_argument("--pupil-recovery", action="store_true", help="recover pupil aberrations")
    p.add_argument("--init", default="mean-brightfield", choices=recovery.INIT_MODES)
    p.add_argument("--upsample", type=int, default=4)
    p.add_argument("--refocus", default=None, help="defocus search MIN:MAX:STEP in um")
    p.add_argument("--out-prefix", required=True, help="output path prefix")
    p.set_defaults(func=_cmd_reconstruct)

    p = sub.add_parser("train", help="train the unpaired translator", parents=parser._fpstain_common)
    p.add_argument("--domain-a", required=True, help="directory of monochrome FPM tiles")
    p.add_argument("--domain-b", required=True, help="directory of incoherent target tiles")
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--batch", type=int, default=4)
    p.add_argument("--lr", type=float, default=2e-4)
    p.add_argument("--cycle-weight", type=float, default=10.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--base-width", type=int, default=32, help="generator stem width")
    p.add_argument("--res-blocks", type=int, default=4)
    p.add_argument("--out", required=True, help="output model file (.fpsm)")
    p.add_argument("--loss-csv", default=None, help="loss curve CSV (default <out>_loss.csv)")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("stain", help="virtually stain one image", parents=parser._fpstain_common)
    p.add_argument("--model", required=True, help="trained model file (.fpsm)")
    p.add_argument("--input", required=True, help="input 8-bit image")
    p.add_argument("--out", required=True, help="output stained PNG")
    p.set_defaults(func=_cmd_stain)

    p = sub.add_parser("evaluate", help="SSIM report between two tile directories", parents=parser._fpstain_common)
    p.add_argument("--pred", required=True, help="prediction tile directory")
    p.add_argument("--truth", required=True, help="ground-truth tile directory")
    p.add_argument("--label", default="sample", help="sample-type label for the report row")
    p.add_argument("--out", required=True, help="output CSV path")
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("tile", help="cut an image into tiles", parents=parser._fpstain_common)
    p.add_argument("--input", required=True)
    p.add_argument("--tile-size", type=int, default=512)
    p.add_argument("--out", required=True, help="output tile directory")
    p.set_defaults(func=_cmd_tile)

    p = sub.add_parser("stitch", help="reassemble tiles into an image", parents=parser._fpstain_common)
    p.add_argument("--tiles", required=True, help="tile directory from tile")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_stitch)

    p = sub.add_parser("demo", help="seeded end-to-end closed loop on procedural data", parents=parser._fpstain_common)
    p.add_argument("--workdir", required=True, help="output directory for all demo artifacts")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--train-tiles", type=int, default=200,
                   help="clean tiles generated for the two training domains (default 200)")
    p.add_argument("--holdout", type=int, default=50, help="held-out evaluation tiles")
    p.add_argument("--tile-size", type=int, default=64)
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--batch", type=int, default=4)
    p.add_argument("--base-width", type=int, default=16)
    p.add_argument("--res-blocks", type=int, default=2)
    p.set_defaults(func=_cmd_demo)

    return parser


def dispatch(argv: Optional[List[str]] = None) -> int:
    """Parse arguments and run one subcommand, mapping errors to exit codes."""
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = _build_parser()
    try:
        # Apply config-file values as defaults before the real parse.
        if "--config" in argv:
            if argv.index("--config") + 1 >= len(argv):
                raise _UsageError("--config requires a file path")
            values = _parse_config_file(argv[argv.index("--config") + 1])
            for subparser in parser._fpstain_subparsers.values():
                known = {a.dest for a in subparser._actions}
                subparser.set_defaults(**{k: _coerce(subparser, k, v)
                                          for k, v in values.items() if k in known})
        args = parser.parse_args(argv)
        if not getattr(args, "command", None):
            parser.print_usage(sys.stderr)
            return 1
        _set_threads(args)
        return args.func(args)
    except SystemExit as exc:  # argparse --help
        return int(exc.code or 0)
    except _UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (ValidationError, IndexError, FileNotFoundError, NotADirectoryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime/numeric failures
        print(f"failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


def _coerce(subparser, dest: str, value: str):
    """Convert a config-file string to the type of the matching flag."""
    for action in subparser._actions:
        if action.dest == dest:
            if isinstance(action, argparse._StoreTrueAction):
                return value.lower() in ("1", "true", "yes", "on")
            if action.type is not None:
                return action.type(value)
            return value
    return value


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
