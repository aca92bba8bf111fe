"""Configuration-driven end-to-end denoising runs.

A run configuration is a nested mapping (usually read from YAML)::

    seed: 0
    data:
      source: phantom          # or "files"
      phantom: {shape: [32, 32, 32], seed: 0, snr: 30.0, n_b0: 3}
      dwi: null                # files: 4D NIfTI, bvals, bvecs, mask
      bvals: null
      bvecs: null
      bval_scale: 1.0
      mask: null
      truth: null              # optional noiseless counterpart of dwi
    plan:
      n_subsets: 3
      path: null               # load a plan JSON instead of designing one
      cond_threshold: 1.6
      rotation_trials: 2000
      trials: 20000
    blocks: {size: 64, n_blocks: 8, min_coverage: 0.25, flip: true}
    model: {k: 192, d: 3, path: null, init: null}
    train: {enabled: true, learning_rate: 1.0e-4, epochs: 40, val_fraction: 0.2}
    inference: {tile: null, overlap: null}

Missing keys take the defaults above. :func:`run_pipeline` raises
:class:`~sdndti.exceptions.StageError` naming the module that failed.
"""

from __future__ import annotations

import copy
import logging
import time
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np
import yaml

from .denoiser import MUNet
from .estimator import SDnDTIDenoiser
from .exceptions import SDnDTIError, StageError
from .gradient_design import SubsetPlan, design_scheme, select_subsets_from_fixed
from .phantom import clean_signal, hcp_like_sigma, make_phantom, simulate_acquisition
from .quality_metrics import MetricReport, dti_errors, image_errors
from .selfsup import average_denoised, build_selfsup_pairs, pair_scheme, standardization_params
from .tensor_model import dti_metrics, fit_tensor
from .volume_io import (
    BrainMask,
    GradientScheme,
    Volume4D,
    load_model,
    read_gradients,
    read_mask,
    read_nifti,
)

log = logging.getLogger(__name__)

DEFAULT_CONFIG = {
    "seed": 0,
    "data": {
        "source": "phantom",
        "phantom": {"shape": [32, 32, 32], "seed": 0, "snr": 30.0, "n_b0": 3},
        "dwi": None,
        "bvals": None,
        "bvecs": None,
        "bval_scale": 1.0,
        "mask": None,
        "truth": None,
    },
    "plan": {
        "n_subsets": 3,
        "path": None,
        "cond_threshold": 1.6,
        "rotation_trials": 2000,
        "trials": 20000,
    },
    "blocks": {"size": 64, "n_blocks": 8, "min_coverage": 0.25, "flip": True},
    "model": {"k": 192, "d": 3, "path": None, "init": None},
    "train": {"enabled": True, "learning_rate": 1e-4, "epochs": 40, "val_fraction": 0.2},
    "inference": {"tile": None, "overlap": None},
}


class ConfigError(SDnDTIError, ValueError):
    """Unknown key or malformed value in a run configuration."""


def _merge(base, update, path=""):
    for key, val in update.items():
        if key not in base:
            raise ConfigError(f"unknown config key '{path}{key}'")
        if isinstance(base[key], dict):
            if not isinstance(val, dict):
                raise ConfigError(f"config key '{path}{key}' must be a mapping")
            _merge(base[key], val, f"{path}{key}.")
        else:
            base[key] = val
    return base


def set_override(config, assignment):
    """Apply one ``dotted.key=value`` override; the value is parsed as YAML."""
    if "=" not in assignment:
        raise ConfigError(f"override '{assignment}' is not of the form key=value")
    key, raw = assignment.split("=", 1)
    parts = key.strip().split(".")
    value = yaml.safe_load(raw)
    update = value
    for p in reversed(parts):
        update = {p: update}
    return _merge(config, update)


def resolve_config(path=None, overrides=(), base=None):
    """Defaults, then the YAML file at ``path``, then ``key=value`` overrides."""
    config = copy.deepcopy(base if base is not None else DEFAULT_CONFIG)
    if path is not None:
        with open(path) as fh:
            doc = yaml.safe_load(fh) or {}
        if not isinstance(doc, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        _merge(config, doc)
    for item in overrides:
        set_override(config, item)
    return config


def dump_config(config):
    return yaml.safe_dump(config, sort_keys=True, default_flow_style=False)


@contextmanager
def stage(name, timings=None):
    """Run a block as a named stage; failures become :class:`StageError`."""
    t0 = time.perf_counter()
    log.info("stage %s: start", name)
    try:
        yield
    except StageError:
        raise
    except Exception as exc:
        raise StageError(name, f"{type(exc).__name__}: {exc}") from exc
    dt = time.perf_counter() - t0
    if timings is not None:
        timings[name] = timings.get(name, 0.0) + dt
    log.info("stage %s: done in %.2f s", name, dt)


@dataclass
class Acquisition:
    """Raw data with optional ground truth for evaluation."""

    data: Volume4D
    scheme: GradientScheme
    mask: BrainMask
    plan: SubsetPlan | None = None
    truth_image: np.ndarray | None = None  # pair layout: [S0, DWI_1..N]
    truth_tensor: object = None  # TensorField
    scene: object = None


@dataclass
class PipelineResult:
    denoised: Volume4D
    metrics: object
    report: MetricReport | None
    acquisition: Acquisition
    plan: SubsetPlan
    estimator: SDnDTIDenoiser
    subset_outputs: list = field(default_factory=list)
    timings: dict = field(default_factory=dict)

    @property
    def model(self) -> MUNet:
        return self.estimator.model_

    @property
    def history(self):
        return getattr(self.estimator, "history_", [])


def phantom_acquisition(
    shape=(32, 32, 32),
    seed=0,
    snr=30.0,
    n_b0=3,
    n_subsets=3,
    design_seed=0,
    rotation_trials=2000,
    cond_threshold=1.6,
):
    """Simulated scene, designed scheme and Rician-noise acquisition.

    ``seed`` drives the scene and the noise; ``design_seed`` the scheme.
    """
    dirs, plan = design_scheme(
        n_subsets, seed=design_seed, rotation_trials=rotation_trials, cond_threshold=cond_threshold
    )
    if n_b0 < n_subsets:
        raise ValueError(f"need at least {n_subsets} b0 volumes, got {n_b0}")
    scheme = GradientScheme(
        np.concatenate([np.zeros(n_b0), np.ones(len(dirs))]),
        np.concatenate([np.zeros((n_b0, 3)), dirs]),
    )
    scene = make_phantom(tuple(shape), seed=seed)
    sigma = hcp_like_sigma(scene, snr) if snr else 0.0
    data = simulate_acquisition(scene, scheme, sigma, seed=seed)
    clean = clean_signal(scene, scheme).data
    truth = np.concatenate([scene.S0[..., None] * scene.head[..., None], clean[..., scheme.dwi_indices]], axis=-1)
    return Acquisition(data, scheme, scene.mask, plan, truth, scene.tensor_field, scene)


def load_acquisition(cfg):
    """Read DWI data, gradients, mask and optional truth from files."""
    for key in ("dwi", "bvals", "bvecs", "mask"):
        if not cfg.get(key):
            raise ConfigError(f"data.{key} is required when data.source is 'files'")
    vol = read_nifti(cfg["dwi"])
    scheme = read_gradients(cfg["bvals"], cfg["bvecs"], scale=cfg.get("bval_scale", 1.0))
    data = Volume4D(vol.data, scheme, vol.voxel_size_mm)
    mask = read_mask(cfg["mask"])
    mask.check_matches(data.spatial_shape)
    truth_image = truth_tensor = None
    if cfg.get("truth"):
        t = read_nifti(cfg["truth"]).data
        if t.shape != data.data.shape:
            raise ConfigError("truth volume must match the raw data shape")
        truth_image = np.concatenate(
            [t[..., scheme.b0_indices].mean(axis=-1, keepdims=True), t[..., scheme.dwi_indices]], axis=-1
        )
        truth_tensor = fit_tensor(t, scheme, mask)
    return Acquisition(data, scheme, mask, None, truth_image, truth_tensor)


def raw_image(acq):
    """Raw data in pair layout: first b0 followed by every DWI."""
    arr = acq.data.data
    return np.concatenate([arr[..., acq.scheme.b0_indices[:1]], arr[..., acq.scheme.dwi_indices]], axis=-1)


def evaluate(acq, pairs, subset_outputs, denoised, denoised_metrics):
    """Image and DTI errors of every stage against the acquisition's truth."""
    m = acq.mask.data
    pscheme = pair_scheme(acq.scheme)
    raw = raw_image(acq)
    params = standardization_params(raw, m)
    truth = dti_metrics(acq.truth_tensor, m)
    values, per_volume = {}, {}

    def add(name, image, metrics):
        summary, per = image_errors(image, acq.truth_image, m, params)
        values[name] = {**summary, **dti_errors(metrics, truth, m)}
        per_volume[name] = per

    add("raw", raw, dti_metrics(fit_tensor(acq.data.data, acq.scheme, m), m))
    for k, (pair, out) in enumerate(zip(pairs, subset_outputs)):
        add(f"input_{k + 1}", pair.input, dti_metrics(fit_tensor(pair.input, pscheme, m), m))
        add(f"denoised_{k + 1}", out, dti_metrics(fit_tensor(out, pscheme, m), m))
    add("sdndti", denoised, denoised_metrics)
    return MetricReport(values, per_volume=per_volume)


def estimator_from_config(config):
    b, t, mdl, inf = config["blocks"], config["train"], config["model"], config["inference"]
    return SDnDTIDenoiser(
        k=mdl["k"],
        d=mdl["d"],
        block_size=b["size"],
        n_blocks=b["n_blocks"],
        min_coverage=b["min_coverage"],
        flip=b["flip"],
        learning_rate=t["learning_rate"],
        epochs=t["epochs"],
        val_fraction=t["val_fraction"],
        random_state=config["seed"],
        tile=inf["tile"],
        overlap=inf["overlap"],
    )


def run_pipeline(config, acquisition=None, callback=None) -> PipelineResult:
    """Plan, build pairs, train (or load), denoise, average, fit and evaluate.

    ``acquisition`` bypasses data loading. Returns a :class:`PipelineResult`.
    """
    config = _merge(copy.deepcopy(DEFAULT_CONFIG), copy.deepcopy(config or {}))
    timings = {}
    dcfg, pcfg = config["data"], config["plan"]
    acq = acquisition
    if acq is None:
        if dcfg["source"] == "phantom":
            ph = dcfg["phantom"]
            with stage("phantom", timings):
                acq = phantom_acquisition(
                    ph["shape"],
                    ph["seed"],
                    ph["snr"],
                    ph["n_b0"],
                    pcfg["n_subsets"],
                    config["seed"],
                    pcfg["rotation_trials"],
                    pcfg["cond_threshold"],
                )
        elif dcfg["source"] == "files":
            with stage("volume_io", timings):
                acq = load_acquisition(dcfg)
        else:
            raise StageError("volume_io", f"unknown data.source '{dcfg['source']}'")

    with stage("gradient_design", timings):
        if pcfg["path"]:
            plan = SubsetPlan.from_json(pcfg["path"])
        elif acq.plan is not None:
            plan = acq.plan
        else:
            plan = select_subsets_from_fixed(
                acq.scheme.bvecs[acq.scheme.dwi_indices],
                pcfg["n_subsets"],
                pcfg["cond_threshold"],
                pcfg["trials"],
                config["seed"],
            )
        log.info("plan: %s, cond %s", plan.subsets, [round(c, 4) for c in plan.cond_numbers])

    with stage("selfsup_pipeline", timings):
        pairs = build_selfsup_pairs(acq.data, acq.scheme, plan, acq.mask)

    est = estimator_from_config(config)
    with stage("neural_denoiser", timings):
        mcfg = config["model"]
        init = load_model(mcfg["init"]) if mcfg["init"] else None
        if config["train"]["enabled"]:
            est.fit_pairs(pairs, init_model=init, callback=callback)
        else:
            if not mcfg["path"]:
                raise ValueError("training is disabled and no model.path was given")
            est.model_ = load_model(mcfg["path"])
            est.n_channels_ = est.model_.c
            est.history_ = []
        outputs = est.denoise_pairs(pairs)

    with stage("selfsup_pipeline", timings):
        denoised = Volume4D(average_denoised(outputs), pair_scheme(acq.scheme), acq.data.voxel_size_mm)

    with stage("tensor_model", timings):
        metrics = dti_metrics(fit_tensor(denoised, mask=acq.mask), acq.mask)

    report = None
    if acq.truth_image is not None and acq.truth_tensor is not None:
        with stage("quality_metrics", timings):
            report = evaluate(acq, pairs, outputs, denoised.data, metrics)
    return PipelineResult(denoised, metrics, report, acq, plan, est, outputs, timings)
