"""Command-line pipeline driver with manifest-based reproducibility.

Subcommands: ``psf`` (render a dictionary), ``simulate`` (synthetic
dataset), ``reconstruct`` (per-image variational solve), ``refine``
(ground-truth-aided composite descent), ``evaluate`` (match, score,
report).  Every run writes a ``run_manifest.json`` capturing the
command, full parameter set, input hashes, and output hashes; running
``rpsfloc --from-manifest <path>`` re-executes it and reproduces the
outputs byte for byte.

Exit codes: 0 success, 1 usage/configuration errors, 2 data/domain
errors (bad files, shape or value violations, infeasible scenes),
3 numerical divergence.
"""

from __future__ import annotations

import argparse
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__, io
from .errors import (
    CapacityError,
    ConfigurationError,
    DataError,
    DivergenceError,
    DomainError,
    RpsflocError,
    ShapeError,
)
from .evaluate import (
    aggregate_report,
    match_points,
    plot_sweep,
    precision_recall,
    write_report_csv,
)
from .forward import NoiseModel
from .losses import LossConfig, default_weights
from .optics import OpticalConfig, PsfDictionary, build_dictionary
from .postproc import extract_points
from .scene import DatasetSpec, generate_dataset, rasterize
from .solvers import SolverParams, refine_with_composite, solve_kl_nc, solve_l2_cel0

RUN_MANIFEST_NAME = "run_manifest.json"


class _Parser(argparse.ArgumentParser):
    """Argument parser whose usage failures map to exit code 1."""

    def error(self, message):
        raise ConfigurationError(message)


def _parse_size(text: str) -> tuple[int, int]:
    parts = text.lower().split("x")
    try:
        if len(parts) == 1:
            h = w = int(parts[0])
        elif len(parts) == 2:
            h, w = int(parts[0]), int(parts[1])
        else:
            raise ValueError
    except ValueError:
        raise ConfigurationError(f"cannot parse --size {text!r} (use N or HxW)")
    return h, w


def _write_run_manifest(out_dir: Path, command: str, ns, inputs: dict, outputs: dict):
    params = {
        k: v
        for k, v in vars(ns).items()
        if k not in ("func", "from_manifest") and not k.startswith("_")
    }
    manifest = {
        "format": "rpsfloc-run-manifest",
        "version": 1,
        "tool_version": __version__,
        "command": command,
        "parameters": params,
        "inputs": inputs,
        "outputs": outputs,
    }
    io.save_json(out_dir / RUN_MANIFEST_NAME, manifest)


def _hash_outputs(out_dir: Path, names) -> dict:
    return {name: io.sha256_file(out_dir / name) for name in sorted(names)}


# ---------------------------------------------------------------- psf


def cmd_psf(ns) -> int:
    config = OpticalConfig(
        num_zones=ns.zones,
        num_planes=ns.depths,
        image_shape=_parse_size(ns.size),
        pixel_pitch=ns.pitch,
        pupil_samples=ns.pupil,
    )
    out = Path(ns.out)
    out.mkdir(parents=True, exist_ok=True)
    dictionary = build_dictionary(config)
    name = "psf_dictionary.rpsf"
    io.save_dictionary(out / name, dictionary)
    _write_run_manifest(out, "psf", ns, {}, _hash_outputs(out, [name]))
    return 0


# ----------------------------------------------------------- simulate


def _noise_from_flags(ns) -> NoiseModel:
    if ns.noise == "gaussian":
        if (ns.sigma is None) == (ns.sigma_frac is None):
            raise ConfigurationError(
                "gaussian noise needs exactly one of --sigma or --sigma-frac"
            )
        return NoiseModel(
            "gaussian", sigma=ns.sigma, sigma_frac=ns.sigma_frac, background=ns.b
        )
    if ns.sigma is not None or ns.sigma_frac is not None:
        raise ConfigurationError("--sigma/--sigma-frac apply only to gaussian noise")
    return NoiseModel("poisson", background=ns.b)


def cmd_simulate(ns) -> int:
    dictionary = io.load_dictionary(ns.dict)
    noise = _noise_from_flags(ns)

    density: int | tuple[int, int] = ns.density
    schedule = None
    num_images = ns.images
    if ns.densities is not None:
        if ns.images_per_density is None:
            raise ConfigurationError("--densities requires --images-per-density")
        levels = [int(v) for v in ns.densities.split(",") if v.strip()]
        if not levels:
            raise ConfigurationError("--densities is empty")
        schedule = tuple(d for d in levels for _ in range(ns.images_per_density))
        num_images = len(schedule)
        density = levels[0]
    elif ns.density_range is not None:
        density = (ns.density_range[0], ns.density_range[1])
    if num_images is None:
        raise ConfigurationError("--images is required (or use --densities)")

    cfg = dictionary.config
    spec = DatasetSpec(
        num_images=num_images,
        image_size=cfg.image_shape,
        num_planes=cfg.num_planes,
        density=density,
        density_schedule=schedule,
        flux_mean=ns.flux_mean,
        min_separation=ns.min_sep,
        margin=ns.margin,
        seed=ns.seed,
    )
    out = Path(ns.out)
    manifest = generate_dataset(spec, dictionary, noise, out)
    names = ["dataset_manifest.json"]
    for entry in manifest["images"]:
        names += [entry["scene"], entry["clean"], entry["observed"]]
    _write_run_manifest(
        out, "simulate", ns, {ns.dict: io.sha256_file(ns.dict)}, _hash_outputs(out, names)
    )
    return 0


# -------------------------------------------------------- reconstruct


def _load_dataset(dataset_dir) -> tuple[dict, Path]:
    root = Path(dataset_dir)
    manifest = io.load_json(root / "dataset_manifest.json")
    if manifest.get("format") != "rpsfloc-dataset":
        raise DataError(f"{root}: not a dataset directory")
    return manifest, root

_dictionary_cache: dict[tuple, PsfDictionary] = {}


def _dictionary_from_config(cfg_dict: dict) -> PsfDictionary:
    key = (
        int(cfg_dict["num_zones"]),
        int(cfg_dict["num_planes"]),
        tuple(int(v) for v in cfg_dict["image_shape"]),
        float(cfg_dict["pixel_pitch"]),
        int(cfg_dict["pupil_samples"]),
    )
    if key not in _dictionary_cache:
        _dictionary_cache[key] = build_dictionary(
            OpticalConfig(
                num_zones=key[0],
                num_planes=key[1],
                image_shape=key[2],
                pixel_pitch=key[3],
                pupil_samples=key[4],
            )
        )
    return _dictionary_cache[key]


def _solver_params(ns, background: float) -> SolverParams:
    return SolverParams(
        max_outer=ns.max_outer,
        max_inner=ns.max_inner,
        step_rule=ns.step_rule,
        step_init=ns.step,
        shrink=ns.shrink,
        tolerance=ns.tol,
        mu=ns.mu,
        a=ns.a,
        b=background,
        init=ns.init,
    )


def _reconstruct_one(task) -> list[str]:
    """Worker for one image; standalone so process pools can pickle it."""
    (kind, dict_cfg, method, params, loss_cfg, dataset_dir, entry, out_dir) = task
    dictionary = _dictionary_from_config(dict_cfg)
    root = Path(dataset_dir)
    out = Path(out_dir)
    observed, _ = io.load_image(root / entry["observed"])
    if kind == "refine":
        sources = io.load_scene(root / entry["scene"])
        gt = rasterize(sources, dictionary.volume_shape)
        report = refine_with_composite(
            observed, gt, dictionary, LossConfig.from_dict(loss_cfg), params
        )
    elif method == "l2-cel0":
        report = solve_l2_cel0(observed, dictionary, params)
    else:
        report = solve_kl_nc(observed, dictionary, params)

    stem = f"img_{entry['index']:04d}"
    vol_name = f"{stem}.volume.rvol"
    rep_name = f"{stem}.solve.json"
    io.save_volume(
        out / vol_name,
        report.volume,
        {"image_index": entry["index"], "method": report.method},
    )
    io.save_json(out / rep_name, report.to_json())
    return [vol_name, rep_name]


def _run_image_tasks(tasks, jobs: int) -> list[str]:
    names: list[str] = []
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            for result in pool.map(_reconstruct_one, tasks):
                names += result
    else:
        for task in tasks:
            names += _reconstruct_one(task)
    return names


def cmd_reconstruct(ns) -> int:
    manifest, root = _load_dataset(ns.dataset)
    noise = NoiseModel.from_dict(manifest["noise"])
    background = ns.b if ns.b is not None else noise.background
    expected = "kl-nc" if noise.variant == "poisson" else "l2-cel0"
    if ns.method != expected:
        print(
            f"warning: method {ns.method} on a {noise.variant}-noise dataset",
            file=sys.stderr,
        )
    params = _solver_params(ns, background)
    out = Path(ns.out)
    out.mkdir(parents=True, exist_ok=True)

    tasks = [
        ("solve", manifest["dictionary"], ns.method, params, None, str(root), e, str(out))
        for e in manifest["images"]
    ]
    names = _run_image_tasks(tasks, ns.jobs)
    inputs = {str(root / "dataset_manifest.json"): io.sha256_file(root / "dataset_manifest.json")}
    _write_run_manifest(out, "reconstruct", ns, inputs, _hash_outputs(out, names))
    return 0


def cmd_refine(ns) -> int:
    manifest, root = _load_dataset(ns.dataset)
    noise = NoiseModel.from_dict(manifest["noise"])
    background = ns.b if ns.b is not None else noise.background
    weights = default_weights(noise.variant)
    w1 = ns.w1 if ns.w1 is not None else weights[0]
    w2 = ns.w2 if ns.w2 is not None else weights[1]
    w3 = ns.w3 if ns.w3 is not None else weights[2]
    loss_cfg = LossConfig(
        noise=noise.variant,
        w1=w1,
        w2=w2,
        w3=w3,
        mu=ns.mu if ns.mu is not None else 1.0,
        a=ns.a,
        b=background,
        kernel_sigma=ns.kernel_sigma,
        kernel_radius=ns.kernel_radius,
    )
    params = _solver_params(ns, background)
    out = Path(ns.out)
    out.mkdir(parents=True, exist_ok=True)

    tasks = [
        (
            "refine",
            manifest["dictionary"],
            "refine",
            params,
            loss_cfg.describe(),
            str(root),
            e,
            str(out),
        )
        for e in manifest["images"]
    ]
    names = _run_image_tasks(tasks, ns.jobs)
    inputs = {str(root / "dataset_manifest.json"): io.sha256_file(root / "dataset_manifest.json")}
    _write_run_manifest(out, "refine", ns, inputs, _hash_outputs(out, names))
    return 0


# ----------------------------------------------------------- evaluate


def _volumes_context(volumes_dir: Path, fallback_dataset) -> tuple[str, Path]:
    """(method label, dataset path) for a reconstruction directory."""
    run_path = volumes_dir / RUN_MANIFEST_NAME
    if run_path.is_file():
        run = io.load_json(run_path)
        method = run.get("parameters", {}).get("method") or run.get("command", "")
        dataset = run.get("parameters", {}).get("dataset")
        if dataset is not None:
            return method or volumes_dir.name, Path(dataset)
    if fallback_dataset is None:
        raise DataError(
            f"{volumes_dir}: no run manifest with a dataset path; pass --dataset"
        )
    return volumes_dir.name, Path(fallback_dataset)


def cmd_evaluate(ns) -> int:
    out = Path(ns.out)
    out.mkdir(parents=True, exist_ok=True)
    rows_by_method: dict[str, list] = {}
    metrics_by_method: dict[str, list] = {}
    inputs = {}
    for volumes in ns.volumes:
        vol_dir = Path(volumes)
        method, dataset_dir = _volumes_context(vol_dir, ns.dataset)
        manifest, root = _load_dataset(dataset_dir)
        noise = NoiseModel.from_dict(manifest["noise"])
        level = noise.noise_level()
        for entry in manifest["images"]:
            vol_path = vol_dir / f"img_{entry['index']:04d}.volume.rvol"
            if not vol_path.is_file():
                raise DataError(f"missing reconstruction: {vol_path}")
            scene_path = root / entry["scene"]
            sources = io.load_scene(scene_path)
            volume, _ = io.load_volume(vol_path)
            points = extract_points(volume, ns.threshold_frac, ns.cluster_radius)
            matching = match_points(sources, points, ns.threshold)
            metrics = precision_recall(matching, sources.shape[0], points.shape[0])
            metrics.density = int(entry["density"])
            metrics.noise_model = noise.variant
            metrics.noise_level = level
            metrics_by_method.setdefault(method, []).append(metrics)
        inputs[str(root / "dataset_manifest.json")] = io.sha256_file(
            root / "dataset_manifest.json"
        )

    names = []
    for method, metrics in sorted(metrics_by_method.items()):
        rows = aggregate_report(metrics, ns.threshold)
        rows_by_method[method] = rows
        csv_name = f"report_{method}.csv"
        write_report_csv(out / csv_name, rows)
        names.append(csv_name)

    x_key = (ns.sweep or "density").replace("-", "_")
    plot_sweep(rows_by_method, x_key, out / "report.png")
    names.append("report.png")
    _write_run_manifest(out, "evaluate", ns, inputs, _hash_outputs(out, names))
    return 0


# --------------------------------------------------------------- main


def build_parser() -> _Parser:
    parser = _Parser(prog="rpsfloc", description=__doc__)
    parser.add_argument("--version", action="version", version=f"rpsfloc {__version__}")
    parser.add_argument(
        "--from-manifest",
        metavar="PATH",
        help="re-execute a previous run from its run_manifest.json",
    )
    parser.add_argument(
        "--out",
        help="output directory override when using --from-manifest",
    )
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("psf", help="render a PSF dictionary")
    p.add_argument("--zones", type=int, default=7)
    p.add_argument("--depths", type=int, default=21)
    p.add_argument("--size", default="96", help="image size, N or HxW")
    p.add_argument("--pitch", type=float, default=0.5)
    p.add_argument("--pupil", type=int, default=256)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_psf)

    p = sub.add_parser("simulate", help="generate a synthetic dataset")
    p.add_argument("--dict", required=True, help="dictionary file from `psf`")
    p.add_argument("--out", required=True)
    p.add_argument("--images", type=int)
    p.add_argument("--density", type=int, default=10)
    p.add_argument("--density-range", type=int, nargs=2, metavar=("LO", "HI"))
    p.add_argument("--densities", help="comma list for a multi-density protocol")
    p.add_argument("--images-per-density", type=int)
    p.add_argument("--flux-mean", type=float, default=2000.0)
    p.add_argument("--min-sep", type=float, default=0.0)
    p.add_argument("--margin", type=float, default=4.0)
    p.add_argument("--noise", choices=("gaussian", "poisson"), required=True)
    p.add_argument("--sigma", type=float)
    p.add_argument("--sigma-frac", type=float)
    p.add_argument("--b", type=float, default=0.0, help="constant background")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_simulate)

    def add_solver_flags(p):
        p.add_argument("--mu", type=float)
        p.add_argument("--a", type=float, default=100.0)
        p.add_argument("--b", type=float, help="background override")
        p.add_argument("--max-outer", type=int, default=10)
        p.add_argument("--max-inner", type=int, default=50)
        p.add_argument("--step-rule", choices=("backtracking", "fixed"), default="backtracking")
        p.add_argument("--step", type=float, help="initial/fixed step size")
        p.add_argument("--shrink", type=float, default=0.5)
        p.add_argument("--tol", type=float, default=1e-6)
        p.add_argument("--init", choices=("adjoint", "zeros"), default="adjoint")
        p.add_argument("--jobs", type=int, default=1)

    p = sub.add_parser("reconstruct", help="variational solve per image")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--method", choices=("l2-cel0", "kl-nc"), required=True)
    add_solver_flags(p)
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("refine", help="composite-loss refinement with ground truth")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--w1", type=float)
    p.add_argument("--w2", type=float)
    p.add_argument("--w3", type=float)
    p.add_argument("--kernel-sigma", type=float, default=1.0)
    p.add_argument("--kernel-radius", type=int, default=3)
    add_solver_flags(p)
    p.set_defaults(func=cmd_refine)

    p = sub.add_parser("evaluate", help="score reconstructions against scenes")
    p.add_argument("--volumes", action="append", required=True)
    p.add_argument("--dataset", help="dataset override for unmanifested volumes")
    p.add_argument("--out", required=True)
    p.add_argument("--threshold", type=float, default=2.0)
    p.add_argument("--threshold-frac", type=float, default=0.05)
    p.add_argument("--cluster-radius", type=float, default=2.0)
    p.add_argument("--sweep", choices=("noise-level", "density"))
    p.set_defaults(func=cmd_evaluate)

    return parser


_HANDLERS = {
    "psf": cmd_psf,
    "simulate": cmd_simulate,
    "reconstruct": cmd_reconstruct,
    "refine": cmd_refine,
    "evaluate": cmd_evaluate,
}


def _namespace_from_manifest(path: str, out_override) -> tuple[str, argparse.Namespace]:
    manifest = io.load_json(path)
    if manifest.get("format") != "rpsfloc-run-manifest":
        raise DataError(f"{path}: not a run manifest")
    command = manifest.get("command")
    if command not in _HANDLERS:
        raise DataError(f"{path}: unknown command {command!r}")
    params = dict(manifest.get("parameters", {}))
    for key, value in params.items():
        if isinstance(value, list) and key in ("density_range",):
            params[key] = value
    if out_override:
        params["out"] = out_override
    ns = argparse.Namespace(**params)
    return command, ns


def main(argv=None) -> int:
    try:
        parser = build_parser()
        ns = parser.parse_args(argv)
        if ns.from_manifest:
            command, run_ns = _namespace_from_manifest(ns.from_manifest, ns.out)
            return _HANDLERS[command](run_ns)
        if not ns.command:
            parser.print_help(sys.stderr)
            return 1
        return ns.func(ns)
    except ConfigurationError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except (DataError, DomainError, ShapeError, CapacityError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except DivergenceError as exc:
        print(f"divergence: {exc}", file=sys.stderr)
        return 3
    except RpsflocError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
