"""Command-line interface: ``sdndti <command> [options]``.

Every command writes its outputs, a snapshot of its resolved settings
(``config.yaml``), package versions (``versions.json``) and a log
(``run.log``) into ``--out``. Exit status is 0 on success, 1 on a
runtime or data error and 2 on a usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import platform
import sys
import time
from contextlib import nullcontext
from pathlib import Path

import numpy as np

from . import __version__
from .denoiser import TrainConfig, best_epoch, build_model, train, write_history_csv
from .exceptions import InsufficientCandidatesError, SDnDTIError
from .gradient_design import (
    SubsetPlan,
    design_scheme,
    electrostatic_energy,
    select_subsets_from_fixed,
)
from .pipeline import ConfigError, dump_config, phantom_acquisition, resolve_config, run_pipeline
from .quality_metrics import MetricReport, dti_errors, image_errors
from .selfsup import (
    TrainingPair,
    average_denoised,
    build_selfsup_pairs,
    pair_scheme,
    standardization_params,
)
from .tensor_model import TensorField, dti_metrics, fit_tensor
from .estimator import SDnDTIDenoiser
from .volume_io import (
    GradientScheme,
    Volume4D,
    load_model,
    read_gradients,
    read_mask,
    read_nifti,
    save_model,
    write_gradients,
    write_mask,
    write_nifti,
)

log = logging.getLogger("sdndti")


class UsageError(Exception):
    pass


# ---------------------------------------------------------------- run directory


def versions():
    import scipy
    import sklearn
    import yaml

    return {
        "sdndti": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "scikit-learn": sklearn.__version__,
        "pyyaml": yaml.__version__,
    }


def _setup_run(out, settings):
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    handler = logging.FileHandler(out / "run.log", mode="w")
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
    logging.getLogger("sdndti").addHandler(handler)
    with open(out / "config.yaml", "w") as fh:
        fh.write(dump_config(settings))
    with open(out / "versions.json", "w") as fh:
        json.dump(versions(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    return out, handler


def _args_snapshot(args):
    skip = {"func", "command"}
    snap = {}
    for key, val in vars(args).items():
        if key in skip:
            continue
        snap[key] = list(val) if isinstance(val, tuple) else val
    return {"command": args.command, "args": snap}


def _load_dwi(args):
    vol = read_nifti(args.dwi)
    scheme = read_gradients(args.bvals, args.bvecs, scale=1e-3 if args.bvals_smm else 1.0)
    if scheme.n_volumes != vol.dims[3]:
        raise UsageError(f"{args.bvals} lists {scheme.n_volumes} volumes, {args.dwi} has {vol.dims[3]}")
    return Volume4D(vol.data, scheme, vol.voxel_size_mm)


def _write_report(report, out):
    report.to_json(out / "report.json")
    with open(out / "report.txt", "w") as fh:
        fh.write(report.to_table())


def _write_dti(metrics, out, prefix="dti_"):
    for name in ("FA", "MD", "AD", "RD"):
        write_nifti(Volume4D(getattr(metrics, name)[..., None]), out / f"{prefix}{name}.nii")
    write_nifti(Volume4D(metrics.V1), out / f"{prefix}V1.nii")
    write_nifti(Volume4D(metrics.evals), out / f"{prefix}evals.nii")


# ---------------------------------------------------------------- commands


def cmd_design(args):
    if args.acquired:
        if args.bvals:
            acq = read_gradients(args.bvals, args.acquired)
            dirs = acq.bvecs[acq.dwi_indices]
        else:
            dirs = np.atleast_2d(np.loadtxt(args.acquired)).T
        plan = select_subsets_from_fixed(dirs, args.subsets, args.cond_threshold, args.trials, args.seed)
        chosen = dirs[[i for s in plan.subsets for i in s]]
        print(f"candidate subsets: {plan.n_candidates}")
    else:
        dirs, plan = design_scheme(args.subsets, args.seed, args.trials, cond_threshold=args.cond_threshold)
        chosen = dirs
        scheme = GradientScheme.from_directions(dirs, bval=args.bval, n_b0=args.n_b0)
        write_gradients(scheme, args.out / "bvals", args.out / "bvecs")
    plan.to_json(args.out / "plan.json")
    for k, c in enumerate(plan.cond_numbers):
        print(f"subset {k + 1}: cond {c:.4f}")
    energy = electrostatic_energy(chosen)
    print(f"electrostatic energy: {energy:.6f}")
    log.info("design: conds %s energy %.6f", plan.cond_numbers, energy)


def cmd_phantom(args):
    acq = phantom_acquisition(
        args.shape, args.seed, args.snr, args.n_b0, args.subsets, args.design_seed, args.trials
    )
    out = args.out
    write_nifti(acq.data, out / "dwi.nii")
    write_gradients(acq.scheme, out / "bvals", out / "bvecs")
    write_mask(acq.mask, out / "mask.nii")
    clean = np.zeros_like(acq.data.data)
    clean[..., acq.scheme.b0_indices] = acq.truth_image[..., :1]
    clean[..., acq.scheme.dwi_indices] = acq.truth_image[..., 1:]
    write_nifti(Volume4D(clean), out / "truth.nii")
    write_nifti(Volume4D(acq.truth_tensor.tensor), out / "truth_tensor.nii")
    write_nifti(Volume4D(acq.scene.labels[..., None].astype(np.float64)), out / "labels.nii")
    acq.plan.to_json(out / "plan.json")
    with open(out / "phantom.json", "w") as fh:
        json.dump(acq.scene.description, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"phantom {tuple(args.shape)} with {acq.scheme.n_volumes} volumes written to {out}")


def cmd_fit(args):
    vol = _load_dwi(args)
    mask = read_mask(args.mask)
    tf = fit_tensor(vol, mask=mask)
    write_nifti(Volume4D(tf.tensor), args.out / "tensor.nii")
    _write_dti(dti_metrics(tf, mask), args.out)
    print(f"tensor and DTI maps written to {args.out}")


def cmd_synth(args):
    vol = _load_dwi(args)
    mask = read_mask(args.mask)
    plan = SubsetPlan.from_json(args.plan)
    pairs = build_selfsup_pairs(vol, vol.scheme, plan, mask)
    ps = pair_scheme(vol.scheme)
    for p in pairs:
        write_nifti(Volume4D(p.input, ps), args.out / f"input_{p.subset_id + 1}.nii")
    write_nifti(Volume4D(pairs[0].target, ps), args.out / "target.nii")
    write_gradients(ps, args.out / "pair.bvals", args.out / "pair.bvecs")
    print(f"{len(pairs)} input volumes and one target with {ps.n_volumes} channels written")


def cmd_prep(args):
    vol = _load_dwi(args)
    mask = read_mask(args.mask)
    plan = SubsetPlan.from_json(args.plan)
    est = SDnDTIDenoiser(
        block_size=args.block, n_blocks=args.n_blocks, flip=not args.no_flip, random_state=args.seed
    )
    blocks = est.make_blocks(build_selfsup_pairs(vol, vol.scheme, plan, mask))
    np.savez(
        args.out / "blocks.npz",
        input=np.stack([b.input for b in blocks]),
        target=np.stack([b.target for b in blocks]),
        mask=np.stack([b.mask for b in blocks]),
        subset=np.array([b.subset_id for b in blocks]),
    )
    print(f"{len(blocks)} blocks of shape {blocks[0].mask.shape} written to {args.out / 'blocks.npz'}")


def _read_blocks(path):
    with np.load(path) as z:
        return [
            TrainingPair(z["input"][i], z["target"][i], z["mask"][i].astype(bool), "0", int(z["subset"][i]))
            for i in range(len(z["input"]))
        ]


def cmd_train(args):
    blocks = _read_blocks(args.blocks)
    c = blocks[0].n_channels
    init = load_model(args.init) if args.init else None
    model = init.copy() if init is not None else build_model(c, args.k, args.d, seed=args.seed)
    cfg = TrainConfig(learning_rate=args.lr, epochs=args.epochs, val_fraction=args.val_fraction, seed=args.seed)
    best, history = train(model, blocks, cfg)
    save_model(best, args.out / "model.sdnd")
    write_history_csv(history, args.out / "history.csv")
    ep = best_epoch(history)
    print(f"best epoch {ep}, validation loss {history[ep - 1]['val_loss']:.6f}")


def cmd_denoise(args):
    vol = _load_dwi(args)
    mask = read_mask(args.mask)
    plan = SubsetPlan.from_json(args.plan)
    est = SDnDTIDenoiser(tile=args.tile, overlap=args.overlap)
    est.model_ = load_model(args.model)
    est.n_channels_ = est.model_.c
    outs = est.denoise_pairs(build_selfsup_pairs(vol, vol.scheme, plan, mask))
    ps = pair_scheme(vol.scheme)
    for k, o in enumerate(outs):
        write_nifti(Volume4D(o, ps), args.out / f"denoised_{k + 1}.nii")
    write_nifti(Volume4D(average_denoised(outs), ps), args.out / "denoised.nii")
    write_gradients(ps, args.out / "denoised.bvals", args.out / "denoised.bvecs")
    print(f"denoised volume written to {args.out / 'denoised.nii'}")


def cmd_eval(args):
    mask = read_mask(args.mask)
    values = {}
    if args.tensor:
        est = TensorField(read_nifti(args.tensor).data)
        ref = TensorField(read_nifti(args.truth_tensor).data)
        values["dti"] = dti_errors(dti_metrics(est, mask), dti_metrics(ref, mask), mask)
    if args.dwi:
        vol = _load_dwi(args)
        truth = read_nifti(args.truth).data
        if truth.shape != vol.data.shape:
            raise UsageError("--truth must match --dwi in shape")
        params = standardization_params(vol.data, mask)
        summary, _ = image_errors(vol.data, truth, mask, params)
        ref = dti_metrics(
            TensorField(read_nifti(args.truth_tensor).data)
            if args.truth_tensor
            else fit_tensor(truth, vol.scheme, mask),
            mask,
        )
        values["image"] = {**summary, **dti_errors(dti_metrics(fit_tensor(vol, mask=mask), mask), ref, mask)}
    if not values:
        raise UsageError("eval needs --tensor/--truth-tensor or --dwi/--truth")
    report = MetricReport(values)
    _write_report(report, args.out)
    print(report.to_table(), end="")


def cmd_pipeline(args):
    config = args.resolved
    result = run_pipeline(config)
    out = args.out
    write_nifti(result.denoised, out / "denoised.nii")
    write_gradients(result.denoised.scheme, out / "denoised.bvals", out / "denoised.bvecs")
    result.plan.to_json(out / "plan.json")
    if config["train"]["enabled"]:
        save_model(result.model, out / "model.sdnd")
        write_history_csv(result.history, out / "history.csv")
    _write_dti(result.metrics, out)
    for name, secs in result.timings.items():
        log.info("wall time %s: %.2f s", name, secs)
    if result.report is not None:
        _write_report(result.report, out)
        print(result.report.to_table(), end="")
    print(f"outputs written to {out}")


# ---------------------------------------------------------------- parser


def _positive_int(text):
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid int value: '{text}'")
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {v}")
    return v


def _add_dwi(p, required=True):
    p.add_argument("--dwi", required=required, help="4D NIfTI with b0 and DWI volumes")
    p.add_argument("--bvals", required=required)
    p.add_argument("--bvecs", required=required)
    p.add_argument("--bvals-smm", action="store_true", help="b-values are in s/mm^2 (divided by 1000)")


def build_parser():
    parser = argparse.ArgumentParser(prog="sdndti", description="Self-supervised DTI denoising.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--threads", type=_positive_int, default=None, help="BLAS threads (default: all cores)")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("design", help="design a scheme of rotated optimal six-direction subsets")
    p.add_argument("--subsets", type=_positive_int, default=3)
    p.add_argument("--trials", type=_positive_int, default=2000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--cond-threshold", type=float, default=1.6)
    p.add_argument("--bval", type=float, default=1.0)
    p.add_argument("--n-b0", type=int, default=3)
    p.add_argument("--acquired", help="select subsets from this fixed bvecs table instead")
    p.add_argument("--bvals", help="b-values matching --acquired (b0 rows are skipped)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_design)

    p = sub.add_parser("phantom", help="simulate a phantom acquisition with ground truth")
    p.add_argument("--shape", type=_positive_int, nargs=3, default=[32, 32, 32])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--design-seed", type=int, default=0)
    p.add_argument("--snr", type=float, default=30.0)
    p.add_argument("--n-b0", type=_positive_int, default=3)
    p.add_argument("--subsets", type=_positive_int, default=3)
    p.add_argument("--trials", type=_positive_int, default=2000)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("fit", help="fit tensors and write DTI maps")
    _add_dwi(p)
    p.add_argument("--mask", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("synth", help="write self-supervised inputs and target")
    _add_dwi(p)
    p.add_argument("--mask", required=True)
    p.add_argument("--plan", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("prep", help="standardize pairs and extract training blocks")
    _add_dwi(p)
    p.add_argument("--mask", required=True)
    p.add_argument("--plan", required=True)
    p.add_argument("--block", type=_positive_int, default=64)
    p.add_argument("--n-blocks", type=_positive_int, default=8)
    p.add_argument("--no-flip", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_prep)

    p = sub.add_parser("train", help="train the denoising network on prepared blocks")
    p.add_argument("--blocks", required=True)
    p.add_argument("--k", type=_positive_int, default=192)
    p.add_argument("--d", type=_positive_int, default=3)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--epochs", type=_positive_int, default=40)
    p.add_argument("--val-fraction", type=float, default=0.2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--init", help="start from this model (fine-tuning)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("denoise", help="denoise all subsets with a trained model and average")
    _add_dwi(p)
    p.add_argument("--mask", required=True)
    p.add_argument("--plan", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--tile", type=_positive_int, default=None)
    p.add_argument("--overlap", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_denoise)

    p = sub.add_parser("eval", help="compare images or tensors with ground truth")
    _add_dwi(p, required=False)
    p.add_argument("--truth", help="noiseless image in the layout of --dwi")
    p.add_argument("--tensor", help="6-channel tensor NIfTI to evaluate")
    p.add_argument("--truth-tensor", help="6-channel ground-truth tensor NIfTI")
    p.add_argument("--mask", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("pipeline", help="run every stage from a config file")
    p.add_argument("--config", help="YAML run configuration")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config entry")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_pipeline)
    return parser


def _check_args(args):
    if args.command == "design" and args.acquired is None and args.n_b0 < 0:
        raise UsageError("--n-b0 must be >= 0")
    if args.command == "eval":
        if bool(args.tensor) != bool(args.truth_tensor) and not args.dwi:
            raise UsageError("--tensor and --truth-tensor go together")
        if args.dwi and not args.truth:
            raise UsageError("--dwi needs --truth")
    if args.command == "denoise" and args.tile is not None and args.overlap is not None:
        if args.tile <= 2 * args.overlap:
            raise UsageError("--tile must exceed twice --overlap")


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.DEBUG if args.verbose else logging.INFO
    root = logging.getLogger("sdndti")
    root.setLevel(level)
    handler = None
    try:
        _check_args(args)
        if args.command == "pipeline":
            args.resolved = resolve_config(args.config, args.set)
            settings = args.resolved
        else:
            settings = _args_snapshot(args)
        out, handler = _setup_run(args.out, settings)
        args.out = out
        limits = nullcontext()
        if args.threads:
            from threadpoolctl import threadpool_limits

            limits = threadpool_limits(args.threads)
        t0 = time.perf_counter()
        with limits:
            args.func(args)
        log.info("%s finished in %.2f s", args.command, time.perf_counter() - t0)
        return 0
    except (UsageError, ConfigError) as exc:
        parser.print_usage(sys.stderr)
        print(f"sdndti: error: {exc}", file=sys.stderr)
        return 2
    except InsufficientCandidatesError as exc:
        log.error("%s", exc)
        print(f"sdndti: error: {exc} (candidates: {exc.n_candidates})", file=sys.stderr)
        return 1
    except (SDnDTIError, OSError, ValueError) as exc:
        log.error("%s", exc)
        print(f"sdndti: error: {exc}", file=sys.stderr)
        return 1
    finally:
        if handler is not None:
            logging.getLogger("sdndti").removeHandler(handler)
            handler.close()


if __name__ == "__main__":
    sys.exit(main())
