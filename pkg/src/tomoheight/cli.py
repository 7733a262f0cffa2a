"""Command line front end for the full pipeline.

Subcommands: simulate, build-dataset, baseline, train, finetune,
predict, evaluate, experiment.  Exit codes: 0 success, 1 invalid
configuration or usage (message names the offending field), 2 runtime
failure.  Every run writes a ``run-manifest.json`` with the fully
resolved configuration and seeds; stdout carries the human log, files
carry the data.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import tenio
from .config import (
    ConfigError,
    RunConfig,
    apply_overrides,
    config_from_dict,
    config_to_dict,
)
from .covariance import features_from_stack, select_polarizations
from .dataset import average_reference, build_dataset, load_dataset, save_dataset
from .experiment import run_experiment
from .geometry import AcquisitionGeometry
from .network import load_checkpoint, save_checkpoint
from .simulate import make_scene
from .spectral import baseline_height_maps
from .covariance import TomoStack
from .training import (
    TrainingDiverged,
    evaluate_prediction,
    fine_tune,
    predict_map,
    train,
)

log = logging.getLogger("tomoheight")

THREADS_ENV = "TOMOHEIGHT_THREADS"
_thread_limiter = None  # keeps the threadpoolctl controller alive


class _UsageError(Exception):
    pass


class CliParser(argparse.ArgumentParser):
    """argparse that exits 1 (not 2) on usage errors, per the exit-code taxonomy."""

    def error(self, message):
        self.print_usage(sys.stderr)
        raise _UsageError(message)


def set_thread_limit(n: int) -> None:
    """Bound BLAS/worker parallelism; 1 (the default) is fully deterministic."""
    global _thread_limiter
    os.environ["OMP_NUM_THREADS"] = str(n)
    os.environ["OPENBLAS_NUM_THREADS"] = str(n)
    try:
        import threadpoolctl

        _thread_limiter = threadpoolctl.threadpool_limits(limits=n)
    except ImportError:  # pragma: no cover - dependency is declared
        pass


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _load_config(args) -> RunConfig:
    doc = {}
    if args.config:
        with open(args.config) as f:
            doc = json.load(f)
    overrides = {}
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, _, value = item.partition("=")
        overrides[key] = _parse_value(value)
    if overrides:
        doc = apply_overrides(doc, overrides)
    return config_from_dict(doc)


def _out_dir(args) -> Path:
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_manifest(out: Path, subcommand: str, cfg: RunConfig, seed: int, extra=None):
    manifest = {
        "subcommand": subcommand,
        "seed": int(seed),
        "threads": int(os.environ.get(THREADS_ENV, "1")),
        "config": config_to_dict(cfg),
    }
    if extra:
        manifest.update(extra)
    (out / "run-manifest.json").write_text(json.dumps(manifest, indent=1) + "\n")


def _geometry_dict(geom: AcquisitionGeometry) -> dict:
    return {
        "baselines_m": list(geom.baselines),
        "wavelength_m": geom.wavelength,
        "incidence_rad": geom.incidence,
        "slant_range_m": geom.slant_range,
    }


# ---------------------------------------------------------------------------
# subcommands

def cmd_simulate(args, cfg: RunConfig) -> int:
    out = _out_dir(args)
    seed = args.seed if args.seed is not None else cfg.training.seed
    stack, truth = make_scene(args.profile, args.size, seed)
    tenio.write_tensor(stack.data, out / "stack.ten", name="slc-stack", units="amplitude")
    tenio.write_tensor(truth.ground, out / "ground.ten", name="ground-elevation", units="m")
    tenio.write_tensor(truth.canopy, out / "canopy.ten", name="canopy-height", units="m")
    scene = {
        "profile": args.profile,
        "size": args.size,
        "seed": seed,
        "mode": stack.mode,
        "geometry": _geometry_dict(stack.geometry),
        "extinction_1_per_m": truth.extinction,
        "noise_power": truth.noise_power,
    }
    (out / "scene.json").write_text(json.dumps(scene, indent=1) + "\n")
    _write_manifest(out, "simulate", cfg, seed, {"profile": args.profile, "size": args.size})
    log.info("scene written to %s", out)
    return 0


def _load_stack(scene_dir: Path) -> TomoStack:
    scene = json.loads((scene_dir / "scene.json").read_text())
    g = scene["geometry"]
    geom = AcquisitionGeometry(
        baselines=tuple(g["baselines_m"]),
        wavelength=g["wavelength_m"],
        incidence=g["incidence_rad"],
        slant_range=g["slant_range_m"],
    )
    data = tenio.read_tensor(scene_dir / "stack.ten")
    return TomoStack(data=data, mode=scene["mode"], geometry=geom)


def cmd_build_dataset(args, cfg: RunConfig) -> int:
    out = _out_dir(args)
    seed = args.seed if args.seed is not None else cfg.training.seed
    scene_dir = Path(args.scene)
    stack = _load_stack(scene_dir)
    ground = tenio.read_tensor(scene_dir / "ground.ten")
    canopy = tenio.read_tensor(scene_dir / "canopy.ten")

    sub = select_polarizations(stack, cfg.mode)
    feats = features_from_stack(sub.data, cfg.window).data.astype(np.float32)
    rect = tuple(args.test_rect)
    ds = build_dataset(
        feats,
        {"chm": canopy, "dtm": ground},
        window=cfg.window,
        w=cfg.patch,
        test_rect=rect,
        seed=seed,
        stride=cfg.tile_stride,
        step=cfg.quantizer.step,
        mode=cfg.mode,
    )
    save_dataset(ds, out)
    tenio.write_tensor(feats, out / "features_full.ten", name="features")
    _write_manifest(out, "build-dataset", cfg, seed, {
        "scene": str(scene_dir),
        "test_rect": list(rect),
        "feature_dim": int(feats.shape[2]),
        "patches": {s: len(ps) for s, ps in ds.splits.items()},
    })
    log.info("dataset written to %s", out)
    return 0


def cmd_baseline(args, cfg: RunConfig) -> int:
    out = _out_dir(args)
    seed = args.seed if args.seed is not None else cfg.training.seed
    stack = _load_stack(Path(args.scene))
    sub = select_polarizations(stack, cfg.mode)
    bl = cfg.baseline
    z_grid = np.arange(bl.z_min, bl.z_max + bl.z_step / 2, bl.z_step)
    ground, canopy_top = baseline_height_maps(
        sub.data, sub.geometry, cfg.mode, cfg.window, method=args.method,
        z_grid=z_grid, alpha=args.alpha if args.alpha is not None else bl.alpha,
        beta=args.beta if args.beta is not None else bl.beta, loading=bl.loading,
    )
    tenio.write_tensor(ground, out / f"{args.method}_ground.ten",
                       name="ground-height", units="m")
    tenio.write_tensor(np.maximum(canopy_top - ground, 0.0),
                       out / f"{args.method}_canopy.ten",
                       name="canopy-height", units="m")
    _write_manifest(out, "baseline", cfg, seed, {"method": args.method})
    log.info("%s maps written to %s", args.method, out)
    return 0


def _train_common(args, cfg: RunConfig, pretrained=None) -> int:
    out = _out_dir(args)
    seed = args.seed if args.seed is not None else cfg.training.seed
    ds = load_dataset(args.dataset)
    targets = tuple(args.target) if args.target else None
    try:
        if pretrained is None:
            state, report = train(ds, cfg, seed=seed, targets=targets)
        else:
            state, report = fine_tune(pretrained, ds, cfg, seed=seed)
    except TrainingDiverged as exc:
        save_checkpoint(exc.state, out / "checkpoint")
        (out / "train-report.csv").write_text(exc.report.to_csv())
        log.error("training diverged: %s (last good checkpoint saved)", exc)
        return 2
    save_checkpoint(state, out / "checkpoint")
    (out / "train-report.csv").write_text(report.to_csv())
    _write_manifest(out, "finetune" if pretrained else "train", cfg, seed, {
        "dataset": str(args.dataset),
        "targets": list(state.targets),
        "best_epoch": report.best_epoch,
        "best_val_loss": report.best_val_loss if report.rows else None,
    })
    log.info("checkpoint written to %s", out / "checkpoint")
    return 0


def cmd_train(args, cfg: RunConfig) -> int:
    return _train_common(args, cfg)


def cmd_finetune(args, cfg: RunConfig) -> int:
    pretrained = load_checkpoint(Path(args.pretrained))
    return _train_common(args, cfg, pretrained=pretrained)


def cmd_predict(args, cfg: RunConfig) -> int:
    out = _out_dir(args)
    seed = args.seed if args.seed is not None else cfg.training.seed
    state = load_checkpoint(Path(args.checkpoint))
    arr = tenio.read_tensor(args.features)
    if np.iscomplexobj(arr):  # a raw stack: reduce and featurize first
        stack = _load_stack(Path(args.features).parent)
        sub = select_polarizations(stack, state.mode)
        arr = features_from_stack(sub.data, cfg.window).data.astype(np.float32)
    preds = predict_map(state, arr, tile=cfg.patch, overlap=args.overlap)
    for target, pred in preds.items():
        tenio.write_tensor(pred, out / f"pred_{target}.ten",
                           name=f"predicted-{target}", units="m")
    _write_manifest(out, "predict", cfg, seed, {"checkpoint": str(args.checkpoint)})
    log.info("predictions written to %s", out)
    return 0


def cmd_evaluate(args, cfg: RunConfig) -> int:
    out = _out_dir(args)
    seed = args.seed if args.seed is not None else cfg.training.seed
    pred = tenio.read_tensor(args.prediction)
    ref = tenio.read_tensor(args.reference)
    if args.average_reference:
        ref = average_reference(ref, cfg.window)
    state = load_checkpoint(Path(args.checkpoint)) if args.checkpoint else None
    if state is not None and args.target in state.quantizers:
        quant = state.quantizers[args.target]
    else:
        from .dataset import HeightQuantizer

        finite = ref[np.isfinite(ref)]
        quant = HeightQuantizer.from_range(
            float(finite.min()), float(finite.max()), cfg.quantizer.step
        )
    report = evaluate_prediction(pred, ref, quant)
    (out / "metrics.csv").write_text(
        "target,rmse_m,bias_m,n_pixels\n"
        f"{args.target},{report.rmse_m:.6f},{report.bias_m:.6f},{report.n_pixels}\n"
    )
    np.savetxt(out / "joint_hist.csv", report.histogram, fmt="%d", delimiter=",")
    _write_manifest(out, "evaluate", cfg, seed, {"target": args.target})
    log.info("rmse=%.4f m bias=%+.4f m over %d px", report.rmse_m,
             report.bias_m, report.n_pixels)
    return 0


def cmd_experiment(args, cfg: RunConfig) -> int:
    out = _out_dir(args)
    seed = args.seed if args.seed is not None else cfg.training.seed
    if args.profile:
        cfg.experiment.profile = args.profile
        cfg.validate()
    if args.size:
        cfg.experiment.size = args.size
        cfg.validate()
    rows = run_experiment(cfg, out, seed)
    log.info("wrote %d metric rows to %s", len(rows), out / "metrics.csv")
    return 0


# ---------------------------------------------------------------------------

def build_parser() -> CliParser:
    parser = CliParser(prog="tomoheight", description=__doc__)
    sub = parser.add_subparsers(dest="subcommand", metavar="subcommand")

    def common(p):
        p.add_argument("--config", help="JSON run configuration")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="dotted-key config override, repeatable")
        p.add_argument("-o", "--output", required=True, help="output directory")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--threads", type=int, default=None,
                       help=f"worker/BLAS threads (default 1 or ${THREADS_ENV})")
        p.add_argument("-v", "--verbose", action="store_true")

    p = sub.add_parser("simulate", help="generate a synthetic scene")
    common(p)
    p.add_argument("--profile", default="paracou-like")
    p.add_argument("--size", type=int, default=256)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("build-dataset", help="features + labels + splits from a scene")
    common(p)
    p.add_argument("--scene", required=True, help="directory written by simulate")
    p.add_argument("--test-rect", type=int, nargs=4, default=(0, 0, 128, 128),
                   metavar=("ROW0", "COL0", "HEIGHT", "WIDTH"))
    p.set_defaults(func=cmd_build_dataset)

    p = sub.add_parser("baseline", help="beamforming/capon height maps")
    common(p)
    p.add_argument("--scene", required=True)
    p.add_argument("--method", choices=("beamforming", "capon"), default="beamforming")
    p.add_argument("--alpha", type=float, default=None, help="ground peak threshold")
    p.add_argument("--beta", type=float, default=None, help="canopy power threshold")
    p.set_defaults(func=cmd_baseline)

    p = sub.add_parser("train", help="train the classifier on a dataset")
    common(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--target", action="append", choices=("chm", "dtm"),
                   help="restrict to one target (repeatable); default: all")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("finetune", help="continue training from a checkpoint")
    common(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--pretrained", required=True, help="checkpoint directory")
    p.add_argument("--target", action="append", choices=("chm", "dtm"))
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("predict", help="full-scene height map from a checkpoint")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--features", required=True, help="feature cube .ten")
    p.add_argument("--overlap", type=int, default=None)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", help="RMSE/bias/joint histogram of a map")
    common(p)
    p.add_argument("--prediction", required=True)
    p.add_argument("--reference", required=True)
    p.add_argument("--target", default="chm")
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--average-reference", action="store_true",
                   help="box-average the reference with the config window first")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("experiment", help="simulate, train and compare methods")
    common(p)
    p.add_argument("--profile", default=None)
    p.add_argument("--size", type=int, default=None)
    p.set_defaults(func=cmd_experiment)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    if not getattr(args, "subcommand", None):
        parser.print_usage(sys.stderr)
        return 1

    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(message)s",
        stream=sys.stdout,
        force=True,
    )

    threads = args.threads
    if threads is None:
        threads = int(os.environ.get(THREADS_ENV, "1"))
    os.environ[THREADS_ENV] = str(threads)
    set_thread_limit(threads)

    try:
        cfg = _load_config(args)
    except (ConfigError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1

    try:
        return args.func(args, cfg)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failure
        if args.verbose:
            raise
        print(f"error: {exc}", file=sys.stderr)
        return 2


def entrypoint():  # console_scripts hook
    raise SystemExit(main())
