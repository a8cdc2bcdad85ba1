"""Command-line front end: synthesize, fit, evaluate, detloss, gradcheck.

Machine-readable results (images, JSON, CSV) are written to files,
atomically (temp file + rename); human-oriented summaries go to
standard error, never standard output.  Every subcommand is
deterministic given its inputs, config, and seed.

Exit codes are a stable contract:

* 0 -- success
* 1 -- a requested check failed (e.g. a gradient exceeded tolerance)
* 2 -- I/O error (missing/unreadable file, unsupported format, empty
  input directory)
* 3 -- validation error (malformed JSON, bad option values, mismatched
  shapes or counts)
* 4 -- numeric abort (non-finite loss or gradient during fitting)

Options may come from a JSON config file (``--config``) or from flags;
flags override config values.  Each subcommand accepts only its own
documented keys and rejects unknown ones.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import dataclass, field
from typing import Callable

from .detloss import (
    PatchGridConfig,
    generate_default_patches,
    load_scene,
    match_patches,
    object_focused_loss,
    patch_perceptual_loss,
)
from .fitting import (
    FitConfig,
    FitDivergenceError,
    finite_diff_check,
    fit,
    load_manifest,
    write_loss_trace,
)
from .imaging import ImageFormatError, load_depth, load_rgb, save_rgb
from .metrics import MetricConfig, evaluate, write_metrics_csv
from .physics import PhysicalParams, load_params, synthesize

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_IO = 2
EXIT_VALIDATION = 3
EXIT_NUMERIC = 4

GRADCHECK_THRESHOLD = 1e-4

_IMAGE_EXTENSIONS = (".ppm", ".png")

# Option keys each subcommand accepts, from config JSON or flags.
_ALLOWED_KEYS = {
    "synthesize": frozenset({"rgb", "depth", "params", "aux", "seed", "out"}),
    "fit": frozenset(
        {
            "manifest",
            "init",
            "trace",
            "seed",
            "out",
            "learning_rate",
            "epochs",
            "decay_start",
            "w1",
            "w2",
            "saturation_mask",
            "fit_theta_f",
        }
    ),
    "evaluate": frozenset(
        {
            "images",
            "refs",
            "seed",
            "out",
            "ssim_window",
            "ssim_sigma",
            "k1",
            "k2",
            "dynamic_range",
            "pcqi_window",
            "pcqi_sigma",
            "block_size",
            "trim_fraction",
            "uiqm_coeffs",
            "uciqe_coeffs",
            "plip_gamma",
        }
    ),
    "detloss": frozenset(
        {
            "scene",
            "variant",
            "iou_threshold",
            "grids",
            "scales",
            "aspect_ratios",
            "seed",
            "out",
        }
    ),
    "gradcheck": frozenset({"rgb", "depth", "target", "params", "step", "seed", "out"}),
}

_FIT_FIELD_TYPES: dict[str, Callable] = {
    "learning_rate": float,
    "epochs": int,
    "decay_start": int,
    "w1": float,
    "w2": float,
    "saturation_mask": bool,
    "fit_theta_f": bool,
}

_METRIC_FIELD_TYPES: dict[str, Callable] = {
    "ssim_window": int,
    "ssim_sigma": float,
    "k1": float,
    "k2": float,
    "dynamic_range": float,
    "pcqi_window": int,
    "pcqi_sigma": float,
    "block_size": int,
    "trim_fraction": float,
    "plip_gamma": float,
}


@dataclass(frozen=True)
class RunConfig:
    """One subcommand invocation: merged options plus the global knobs."""

    command: str
    options: dict = field(default_factory=dict)
    seed: int = 0
    out: str | None = None


# ---------------------------------------------------------------------------
# option plumbing
# ---------------------------------------------------------------------------

def _note(message: str) -> None:
    """Human summary line; standard output stays machine-readable only."""
    print(message, file=sys.stderr)


def _load_config(path: str | None) -> dict:
    if path is None:
        return {}
    if not os.path.isfile(path):
        raise FileNotFoundError(f"no such config file: {path}")
    with open(path, "r", encoding="utf-8") as fh:
        text = fh.read()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ValueError(f"malformed config JSON in {path}: {exc}") from exc
    if not isinstance(doc, dict):
        raise ValueError(f"config JSON in {path} must be an object")
    return doc


def _run_config(args: argparse.Namespace) -> RunConfig:
    """Merge the config file with flag overrides into one option dict."""
    options = _load_config(args.config)
    allowed = _ALLOWED_KEYS[args.command]
    unknown = sorted(set(options) - allowed)
    if unknown:
        raise ValueError(f"unknown config keys for {args.command}: {unknown}")
    for key in allowed:
        value = getattr(args, key, None)
        if value is not None:
            options[key] = value
    seed = int(options.pop("seed", 0))
    if not 0 <= seed < 2**64:
        raise ValueError(f"seed must be an unsigned 64-bit integer, got {seed}")
    out = options.pop("out", None)
    return RunConfig(command=args.command, options=options, seed=seed, out=out)


def _require(run: RunConfig, key: str) -> str:
    value = run.options.get(key)
    if value is None:
        raise ValueError(
            f"{run.command} requires {key!r} (flag --{key} or config key)"
        )
    return value


def _require_out(run: RunConfig) -> str:
    if run.out is None:
        raise ValueError(f"{run.command} requires an output path (--out)")
    return run.out


def _coerce_fields(options: dict, types: dict[str, Callable]) -> dict:
    return {key: cast(options[key]) for key, cast in types.items() if key in options}


def _resolve_params(value, default: PhysicalParams) -> PhysicalParams:
    """Accept a params file path (flag) or an inline object (config)."""
    if value is None:
        return default
    if isinstance(value, str):
        return load_params(value)
    if isinstance(value, dict):
        return PhysicalParams.from_json(json.dumps(value))
    raise ValueError("params must be a file path or an inline JSON object")


# ---------------------------------------------------------------------------
# atomic output
# ---------------------------------------------------------------------------

def _temp_sibling(path: str) -> str:
    """Temp path in the same directory, keeping the extension last so
    format dispatch on the temp name matches the final name."""
    parent, name = os.path.split(os.path.abspath(path))
    stem, ext = os.path.splitext(name)
    return os.path.join(parent, f".{stem}.{os.getpid()}.tmp{ext}")


def _atomic_via(path: str, writer: Callable[[str], None]) -> None:
    """Run a path-taking writer against a temp file, then rename over."""
    tmp = _temp_sibling(path)
    try:
        writer(tmp)
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)


def _atomic_write_text(path: str, text: str) -> None:
    def writer(tmp: str) -> None:
        with open(tmp, "w", encoding="utf-8") as fh:
            fh.write(text)

    _atomic_via(path, writer)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_synthesize(run: RunConfig) -> int:
    """Render an underwater image from a clean RGB image and a depth map."""
    out = _require_out(run)
    image = load_rgb(_require(run, "rgb"))
    depth = load_depth(_require(run, "depth"))
    params = _resolve_params(
        run.options.get("params"),
        default=PhysicalParams(beta=0.0, alpha=0.0, big_b=0.0, kernel_size=1),
    )
    aux_path = run.options.get("aux")
    aux = load_rgb(aux_path) if aux_path is not None else None
    result = synthesize(image, depth, params, aux)
    _atomic_via(out, lambda tmp: save_rgb(result, tmp))
    for name, vec in (("beta", params.beta), ("alpha", params.alpha), ("B", params.big_b)):
        _note(f"{name} = [{float(vec[0])!r}, {float(vec[1])!r}, {float(vec[2])!r}]")
    _note(f"wrote {out}")
    return EXIT_OK


def cmd_fit(run: RunConfig) -> int:
    """Recover physical parameters from (rgb, depth, target) triples."""
    out = _require_out(run)
    pairs = load_manifest(_require(run, "manifest"))
    init = _resolve_params(
        run.options.get("init"),
        default=PhysicalParams(beta=0.5, alpha=0.5, big_b=0.5),
    )
    cfg = FitConfig(seed=run.seed, **_coerce_fields(run.options, _FIT_FIELD_TYPES))
    trace = fit(pairs, init, cfg)
    _atomic_write_text(out, trace.final_params.to_json() + "\n")
    trace_path = run.options.get("trace") or os.path.splitext(out)[0] + "_trace.csv"
    _atomic_via(trace_path, lambda tmp: write_loss_trace(trace, tmp))
    _note(f"final loss = {trace.final_loss!r} after {cfg.epochs} epochs")
    _note(f"wrote {out} and {trace_path}")
    return EXIT_OK


def _list_images(directory: str) -> list[str]:
    names = sorted(
        name
        for name in os.listdir(directory)
        if os.path.splitext(name)[1].lower() in _IMAGE_EXTENSIONS
    )
    if not names:
        raise OSError(f"{directory}: no supported images ({'/'.join(_IMAGE_EXTENSIONS)})")
    return names


def cmd_evaluate(run: RunConfig) -> int:
    """Score a directory of images, optionally against references."""
    out = _require_out(run)
    images_dir = _require(run, "images")
    names = _list_images(images_dir)
    images = [load_rgb(os.path.join(images_dir, name)) for name in names]
    refs = None
    refs_dir = run.options.get("refs")
    if refs_dir is not None:
        ref_names = _list_images(refs_dir)
        refs = [load_rgb(os.path.join(refs_dir, name)) for name in ref_names]
    kwargs = _coerce_fields(run.options, _METRIC_FIELD_TYPES)
    for key in ("uiqm_coeffs", "uciqe_coeffs"):
        if key in run.options:
            kwargs[key] = tuple(float(v) for v in run.options[key])
    cfg = MetricConfig(**kwargs)
    reports, mean_report = evaluate(images, refs, cfg, names=names)
    _atomic_via(out, lambda tmp: write_metrics_csv(reports, mean_report, tmp))
    _note(f"scored {len(reports)} image(s); wrote {out}")
    return EXIT_OK


def cmd_detloss(run: RunConfig) -> int:
    """Match a scene's predictions to its ground truth and report the loss."""
    out = _require_out(run)
    gts, preds = load_scene(_require(run, "scene"))
    grid_kwargs = {}
    if "grids" in run.options:
        grid_kwargs["grids"] = tuple(int(g) for g in run.options["grids"])
    if "scales" in run.options:
        grid_kwargs["scales"] = tuple(float(s) for s in run.options["scales"])
    if "aspect_ratios" in run.options:
        grid_kwargs["aspect_ratios"] = tuple(
            float(a) for a in run.options["aspect_ratios"]
        )
    patches = generate_default_patches(PatchGridConfig(**grid_kwargs))
    if len(preds) != len(patches):
        raise ValueError(
            f"scene provides {len(preds)} predictions but the grid defines "
            f"{len(patches)} patches"
        )
    assignments = match_patches(
        patches, gts, threshold=float(run.options.get("iou_threshold", 0.5))
    )
    variant = run.options.get("variant", "patch")
    if variant == "patch":
        report = patch_perceptual_loss(preds, assignments)
    elif variant == "object_focused":
        report = object_focused_loss(preds, assignments)
    else:
        raise ValueError(f"variant must be 'patch' or 'object_focused', got {variant!r}")
    _atomic_write_text(out, report.to_json() + "\n")
    _note(
        f"{variant}: total = {report.total!r} "
        f"(N = {report.n}, N_bar = {report.n_bar}); wrote {out}"
    )
    return EXIT_OK


def cmd_gradcheck(run: RunConfig) -> int:
    """Compare analytic gradients against finite differences."""
    pair = (
        load_rgb(_require(run, "rgb")),
        load_depth(_require(run, "depth")),
        load_rgb(_require(run, "target")),
    )
    params = _resolve_params(
        run.options.get("params"),
        default=PhysicalParams(beta=0.5, alpha=0.5, big_b=0.5),
    )
    step = float(run.options.get("step", 1e-4))
    report = finite_diff_check(pair, params, h=step)
    _note(f"{'parameter':<22} {'analytic':>17} {'finite diff':>17} {'rel error':>12}")
    for entry in report.entries:
        _note(
            f"{entry.name:<22} {entry.analytic:>17.9e} "
            f"{entry.finite_diff:>17.9e} {entry.rel_error:>12.3e}"
        )
    passed = report.passed(GRADCHECK_THRESHOLD)
    if run.out is not None:
        doc = {
            "entries": [
                {
                    "name": entry.name,
                    "analytic": entry.analytic,
                    "finite_diff": entry.finite_diff,
                    "rel_error": entry.rel_error,
                }
                for entry in report.entries
            ],
            "max_rel_error": report.max_rel_error,
            "passed": passed,
        }
        _atomic_write_text(run.out, json.dumps(doc, indent=2) + "\n")
        _note(f"wrote {run.out}")
    verdict = "passed" if passed else "FAILED"
    _note(
        f"gradcheck {verdict}: max rel error {report.max_rel_error!r} "
        f"(threshold {GRADCHECK_THRESHOLD!r})"
    )
    return EXIT_OK if passed else EXIT_CHECK_FAILED


_COMMANDS: dict[str, Callable[[RunConfig], int]] = {
    "synthesize": cmd_synthesize,
    "fit": cmd_fit,
    "evaluate": cmd_evaluate,
    "detloss": cmd_detloss,
    "gradcheck": cmd_gradcheck,
}


# ---------------------------------------------------------------------------
# parser and entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="uwsim",
        description=(
            "Underwater image synthesis, physical-parameter fitting, quality "
            "metrics, and detection-perceptual losses."
        ),
    )
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", help="JSON file with options for this subcommand")
        p.add_argument("--seed", type=int, help="seed for all randomness (default 0)")
        p.add_argument("--out", help="output path")

    syn = sub.add_parser("synthesize", help="render an underwater image from RGB + depth")
    syn.add_argument("--rgb", help="clean RGB input (.ppm/.png)")
    syn.add_argument("--depth", help="depth map (.pgm/.pfm/.png)")
    syn.add_argument("--params", help="physical-parameter JSON (default: identity)")
    syn.add_argument("--aux", help="optional auxiliary RGB fused alongside the render")
    common(syn)

    fit_p = sub.add_parser("fit", help="fit physical parameters to image triples")
    fit_p.add_argument("--manifest", help="JSON manifest of rgb/depth/target triples")
    fit_p.add_argument("--init", help="initial parameter JSON (default: mid-range)")
    fit_p.add_argument("--trace", help="loss CSV path (default: <out>_trace.csv)")
    common(fit_p)

    ev = sub.add_parser("evaluate", help="score a directory of images")
    ev.add_argument("--images", help="directory of images to score")
    ev.add_argument("--refs", help="directory of reference images, aligned by sort order")
    common(ev)

    det = sub.add_parser("detloss", help="detection-perceptual loss for a scene")
    det.add_argument("--scene", help="scene JSON with gt boxes and patch predictions")
    det.add_argument(
        "--variant",
        choices=("patch", "object_focused"),
        help="loss variant (default: patch)",
    )
    common(det)

    gc = sub.add_parser("gradcheck", help="verify analytic gradients by finite differences")
    gc.add_argument("--rgb", help="clean RGB input (.ppm/.png)")
    gc.add_argument("--depth", help="depth map (.pgm/.pfm/.png)")
    gc.add_argument("--target", help="target underwater image (.ppm/.png)")
    gc.add_argument("--params", help="parameter JSON at which to check (default: mid-range)")
    gc.add_argument("--step", type=float, help="finite-difference step (default 1e-4)")
    common(gc)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 0 for --help and 2 for usage errors; usage
        # errors are validation failures under the exit-code contract.
        return EXIT_OK if exc.code == 0 else EXIT_VALIDATION
    try:
        run = _run_config(args)
        return _COMMANDS[run.command](run)
    except ImageFormatError as exc:
        return _fail(EXIT_IO, exc)
    except (FileNotFoundError, OSError) as exc:
        return _fail(EXIT_IO, exc)
    except FitDivergenceError as exc:
        return _fail(EXIT_NUMERIC, exc)
    except ValueError as exc:
        return _fail(EXIT_VALIDATION, exc)


def _fail(code: int, exc: Exception) -> int:
    _note(f"uwsim: error: {exc}")
    return code


if __name__ == "__main__":
    sys.exit(main())
