import argparse
import io
import json
import logging
import sys
from typing import Any, Dict, List, Optional

import numpy as np

from . import __version__
from .bspline import load_field, save_field, warp_stack
from .config import Config
from .errors import ConvergenceError, QmrError, ValidationError
from .export import flatten_report, save_map_images, write_csv, write_pixel_csv
from .logging_config import setup_logging
from .metrics import cyclic_loss, d_pca, ncc_to_mean, pairwise_nmi_matrix
from .phantom import generate_phantom, save_truth
from .register import rpca_register
from .rpca import godec_decompose
from .stack import load_mask, load_stack, normalize_stack, save_stack, write_container
from .t1fit import T1MapResult, fit_map, roi_stats

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILED = 1


def _emit(payload: Dict[str, Any], path: Optional[str] = None):
    """Writes a JSON report to `path`, or to stdout when no path is given."""
    text = json.dumps(payload, indent=2, sort_keys=True)
    if path:
        with open(path, "w", encoding="utf-8") as f:
            f.write(text + "\n")
    else:
        sys.stdout.write(text + "\n")


def _load_config(args, overrides: Dict[str, Any]) -> Config:
    config = Config(custom_config_path=args.config) if args.config else Config()
    cleaned = {section: {k: v for k, v in values.items() if v is not None} for section, values in overrides.items()}
    return config.override(cleaned)


# --- Subcommands ---

def cmd_phantom(args) -> int:
    mode = {"pre-gd": "pre_gd", "post-gd": "post_gd"}[args.preset] if args.preset else None
    config = _load_config(args, {"phantom": {
        "contrast_mode": mode, "amplitude": args.amplitude, "noise_sigma": args.noise, "seed": args.seed,
        "height": args.size, "width": args.size, "n_frames": args.frames,
    }})
    phantom_config = config.phantom_config()
    truth = generate_phantom(phantom_config)
    save_stack(truth.observed_stack, args.out)
    manifest: Dict[str, Any] = {"observed": args.out}
    if args.out_truth:
        manifest.update(save_truth(truth, args.out_truth, phantom_config))
    _emit(manifest)
    return EXIT_OK


def cmd_decompose(args) -> int:
    config = _load_config(args, {"rpca": {
        "rank": args.rank, "sparse_fraction": args.sparse_fraction, "max_iterations": args.max_iterations,
    }})
    stack = load_stack(args.input)
    normalized, _ = normalize_stack(stack)
    decomposition = godec_decompose(normalized, config.rpca_config())
    if args.out_low:
        save_stack(decomposition.low_rank, args.out_low)
    if args.out_sparse:
        save_stack(decomposition.sparse, args.out_sparse)
    _emit(decomposition.to_report(), args.report)
    return EXIT_OK


def cmd_register(args) -> int:
    config = _load_config(args, {"registration": {
        "rounds": args.rounds, "similarity": args.similarity, "lambda_smooth": args.lambda_smooth,
        "lambda_cyclic": args.lambda_cyclic, "steps_per_round": args.steps,
        "use_rpca": False if args.no_rpca else None,
    }})
    stack = load_stack(args.input)
    result = rpca_register(stack, config.registration_config())
    if args.out_warped:
        save_stack(result.warped, args.out_warped)
    if args.out_field:
        save_field(result.fields, args.out_field)
    _emit(result.to_report(), args.report)
    if result.aborted:
        raise ConvergenceError(result.abort_reason or "registration aborted")
    return EXIT_OK


def cmd_warp(args) -> int:
    stack = load_stack(args.input)
    field = load_field(args.field)
    if field.u.shape[:3] != stack.frames.shape:
        raise ValidationError(f"field {field.u.shape[:3]} does not match stack {stack.frames.shape}")
    save_stack(stack.with_frames(warp_stack(stack.frames, field)), args.out)
    return EXIT_OK


def cmd_fit_t1(args) -> int:
    config = _load_config(args, {"t1fit": {
        "look_locker": True if args.look_locker else None,
        "polarity_restore": False if args.no_polarity_restore else None,
    }})
    stack = load_stack(args.input)
    mask = load_mask(args.mask, args.label) if args.mask else None
    maps = fit_map(stack, mask, config.t1fit_config())
    if args.out_maps:
        write_container(args.out_maps, maps.as_frames(), "f32le", {"maps": list(T1MapResult.MAP_NAMES)})
    stats: Dict[str, Any] = {"converged_pixels": int(maps.converged.sum()), "look_locker": maps.look_locker}
    if mask is not None:
        stats["roi"] = mask.label
        for name, values in maps.named_maps().items():
            mean, std, count = roi_stats(values, mask, maps.converged)
            stats[name] = {"mean": mean, "std": std, "count": count}
    if args.png_dir:
        save_map_images(maps.named_maps(), args.png_dir, None if mask is None else mask.mask, args.image_format)
    if args.pixel_csv:
        selected = maps.converged if mask is None else (mask.mask & maps.converged)
        write_pixel_csv(args.pixel_csv, maps.named_maps(), selected)
    _emit(stats, args.out_stats)
    return EXIT_OK


def cmd_evaluate(args) -> int:
    stack = load_stack(args.input)
    mask = load_mask(args.mask, args.label) if args.mask else None
    normalized, _ = normalize_stack(stack)
    nmi_matrix = pairwise_nmi_matrix(normalized.frames, args.bins)
    ncc = ncc_to_mean(normalized.frames, args.window)
    report: Dict[str, Any] = {
        "d_pca": d_pca(stack.frames, args.topk, None if mask is None else mask.mask),
        "top_k": args.topk,
        "nmi_matrix": nmi_matrix.round(12).tolist(),
        "ncc_to_mean": ncc.tolist(),
    }
    if args.field:
        report["cyclic_loss"] = cyclic_loss(load_field(args.field).u)

    if args.format == "csv":
        rows: List[Dict[str, Any]] = []
        for k in range(stack.n_frames):
            row = {"frame": k, "ncc_to_mean": float(ncc[k]), "mean_nmi": float(np.delete(nmi_matrix[k], k).mean())}
            if stack.inversion_times is not None:
                row["inversion_time_ms"] = float(stack.inversion_times[k])
            row.update({key: value for key, value in flatten_report(report).items()
                        if key in ("d_pca", "top_k", "cyclic_loss")})
            rows.append(row)
        if args.out:
            write_csv(rows, args.out)
        else:
            buffer = io.StringIO()
            write_csv(rows, buffer)
            sys.stdout.write(buffer.getvalue())
    else:
        _emit(report, args.out)
    return EXIT_OK


def cmd_run(args) -> int:
    from qmr_experiment.main_loop import run_experiment, run_many

    if len(args.configs) == 1:
        report = run_experiment(args.configs[0], args.output_dir)
        _emit(report, args.report)
        return EXIT_OK if report["evaluation"]["passed"] else EXIT_FAILED

    results = run_many(args.configs, args.jobs)
    summary = {path: {"exit_code": code, "passed": report.get("evaluation", {}).get("passed", False),
                      "error": report.get("error")} for path, code, report in results}
    _emit(summary, args.report)
    codes = [code for _, code, _ in results if code != EXIT_OK]
    return codes[0] if codes else EXIT_OK


# --- Parser ---

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="qmr-motion",
                                     description="Groupwise motion correction for quantitative MRI sequences.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--log-level", default=None, help="error, warn, info or debug (default: $QMR_LOG_LEVEL or info)")
    parser.add_argument("--log-file", default=None, help="Also write DEBUG logs to this file.")
    subparsers = parser.add_subparsers(dest="command", required=True)

    def add(name, handler, help_text):
        sub = subparsers.add_parser(name, help=help_text, description=help_text)
        sub.add_argument("--version", action="version", version=f"qmr-motion {__version__}")
        sub.add_argument("--config", default=None, help="JSON, YAML or TOML config merged over the defaults.")
        sub.set_defaults(handler=handler)
        return sub

    p = add("phantom", cmd_phantom, "Generate a synthetic MOLLI phantom with planted motion.")
    p.add_argument("--preset", choices=["pre-gd", "post-gd"], default=None)
    p.add_argument("--amplitude", type=float, default=None, help="Peak planted displacement in pixels.")
    p.add_argument("--noise", type=float, default=None, help="Noise SD in signal units (the phantom signal spans about 0 to 1).")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--size", type=int, default=None, help="Image height and width.")
    p.add_argument("--frames", type=int, default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--out-truth", default=None, help="Directory for truth fields, masks and maps.")

    p = add("decompose", cmd_decompose, "Low-rank plus sparse decomposition of a stack.")
    p.add_argument("--input", required=True)
    p.add_argument("--rank", type=int, default=None)
    p.add_argument("--sparse-fraction", type=float, default=None)
    p.add_argument("--max-iterations", type=int, default=None)
    p.add_argument("--out-low", default=None)
    p.add_argument("--out-sparse", default=None)
    p.add_argument("--report", default=None)

    p = add("register", cmd_register, "Groupwise registration with the iterative low-rank round loop.")
    p.add_argument("--input", required=True)
    p.add_argument("--rounds", type=int, default=None)
    p.add_argument("--similarity", choices=["nmi", "ncc"], default=None)
    p.add_argument("--lambda-smooth", type=float, default=None)
    p.add_argument("--lambda-cyclic", type=float, default=None)
    p.add_argument("--steps", type=int, default=None, help="Optimizer steps per round.")
    p.add_argument("--no-rpca", action="store_true", help="Register the original intensities in every round.")
    p.add_argument("--out-warped", default=None)
    p.add_argument("--out-field", default=None)
    p.add_argument("--report", default=None)

    p = add("warp", cmd_warp, "Warp a stack by a displacement field.")
    p.add_argument("--input", required=True)
    p.add_argument("--field", required=True)
    p.add_argument("--out", required=True)

    p = add("fit-t1", cmd_fit_t1, "Per-pixel T1 fitting with SD error maps.")
    p.add_argument("--input", required=True)
    p.add_argument("--mask", default=None)
    p.add_argument("--label", default=None, help="Mask label to use when the mask file holds several.")
    p.add_argument("--out-maps", default=None)
    p.add_argument("--out-stats", default=None)
    p.add_argument("--look-locker", action="store_true")
    p.add_argument("--no-polarity-restore", action="store_true")
    p.add_argument("--png-dir", default=None)
    p.add_argument("--image-format", choices=["png", "pgm"], default="png")
    p.add_argument("--pixel-csv", default=None, help="Per-pixel map values as CSV.")

    p = add("evaluate", cmd_evaluate, "Alignment metrics of a stack.")
    p.add_argument("--input", required=True)
    p.add_argument("--mask", default=None)
    p.add_argument("--label", default=None)
    p.add_argument("--topk", type=int, default=1)
    p.add_argument("--bins", type=int, default=32)
    p.add_argument("--window", type=int, default=9)
    p.add_argument("--field", default=None)
    p.add_argument("--format", choices=["json", "csv"], default="json")
    p.add_argument("--out", default=None)

    p = add("run", cmd_run, "Run experiment configs end to end.")
    p.add_argument("configs", nargs="+")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--output-dir", default=None)
    p.add_argument("--report", default=None)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        setup_logging(args.log_level, args.log_file)
    except ValueError as e:
        parser.error(str(e))

    try:
        return args.handler(args)
    except QmrError as e:
        logger.error("%s: %s", type(e).__name__, e)
        return e.exit_code
    except (FileNotFoundError, IsADirectoryError) as e:
        logger.error("%s", e)
        return 3
    except Exception as e:
        logger.exception("Unexpected error: %s", e)
        return EXIT_FAILED


if __name__ == "__main__":
    sys.exit(main())
