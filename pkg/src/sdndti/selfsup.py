"""Training-pair construction for self-supervised DTI denoising.

For an acquisition with at least K b0 volumes and K six-direction subsets
of DWIs, each subset k gives one pair:

input
    the k-th raw b0 volume, followed by DWIs along every acquired direction
    synthesized from the tensor fitted on subset k (with the averaged b0
    as S0);
target
    the averaged b0 volume, followed by DWIs along every acquired direction
    synthesized from the tensor fitted on all b0 and DWI volumes.

Inputs and targets share the layout ``[b0, DWI_1, ..., DWI_N]`` so a
network can map one onto the other channel by channel. All arrays are
``(X, Y, Z, channels)``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace

import numpy as np

from .exceptions import DegenerateInputError, InvalidPlanError, ShapeError
from .tensor_model import CLAMPED_SIGNAL, fit_tensor, synthesize_dwis
from .volume_io import GradientScheme, Volume4D, as_mask_array

log = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class TrainingPair:
    input: np.ndarray
    target: np.ndarray
    mask: np.ndarray
    subject_id: str = "0"
    subset_id: int = 0

    def __post_init__(self):
        if self.input.shape != self.target.shape:
            raise ShapeError(f"input {self.input.shape} and target {self.target.shape} differ")
        if self.mask.shape != self.input.shape[:3]:
            raise ShapeError("mask does not match pair spatial dims")

    @property
    def n_channels(self):
        return self.input.shape[-1]


@dataclass(frozen=True)
class StandardizationParams:
    mean: float
    std: float

    def __post_init__(self):
        if not self.std > 0:
            raise DegenerateInputError("standard deviation must be positive")


def pair_scheme(scheme: GradientScheme) -> GradientScheme:
    """Channel layout of pairs: one b0 followed by every acquired DWI."""
    dwi = scheme.dwi_indices
    return GradientScheme(
        np.concatenate([[0.0], scheme.bvals[dwi]]),
        np.concatenate([np.zeros((1, 3)), scheme.bvecs[dwi]]),
        scheme.b0_threshold,
    )


def _check_plan(scheme, plan):
    dwi = scheme.dwi_indices
    b0 = scheme.b0_indices
    K = plan.n_subsets
    if len(b0) < K:
        raise InvalidPlanError(f"plan has {K} subsets but data has only {len(b0)} b0 volumes")
    flat = [i for s in plan.subsets for i in s]
    if flat and (min(flat) < 0 or max(flat) >= len(dwi)):
        raise InvalidPlanError(
            f"plan indexes DWI {max(flat)} but the scheme has {len(dwi)} diffusion-weighted volumes"
        )
    return dwi, b0


def _full_data(data, scheme):
    arr = data.data if isinstance(data, Volume4D) else np.asarray(data, dtype=np.float64)
    if scheme.n_volumes != arr.shape[3]:
        raise ShapeError("scheme does not match the number of volumes")
    return arr


def build_selfsup_pairs(data, scheme, plan, mask, subject_id="0"):
    """One full-volume :class:`TrainingPair` per subset of ``plan``."""
    arr = _full_data(data, scheme)
    dwi, b0 = _check_plan(scheme, plan)
    m = as_mask_array(mask, arr.shape)
    target_scheme = pair_scheme(scheme)
    s0 = arr[..., b0].mean(axis=-1)
    full = fit_tensor(arr, scheme, m, s0=s0)
    target = synthesize_dwis(full, s0, target_scheme, m).data
    pairs = []
    for k, subset in enumerate(plan.subsets):
        tf = fit_tensor(arr, scheme, m, s0=s0, dwi_indices=dwi[list(subset)])
        inp = synthesize_dwis(tf, s0, target_scheme, m).data
        inp[..., 0] = arr[..., b0[k]] * m
        pairs.append(TrainingPair(inp, target.copy(), m.copy(), str(subject_id), k))
    return pairs


def subset_flags(data, scheme, plan, mask):
    """Per-subset boolean maps of voxels whose subset fit clamped a signal."""
    arr = _full_data(data, scheme)
    dwi, b0 = _check_plan(scheme, plan)
    m = as_mask_array(mask, arr.shape)
    s0 = arr[..., b0].mean(axis=-1)
    return [
        (fit_tensor(arr, scheme, m, s0=s0, dwi_indices=dwi[list(s)]).flags & CLAMPED_SIGNAL) > 0
        for s in plan.subsets
    ]


def build_supervised_pairs(data, scheme, mask, clean_target=None, subject_id="0"):
    """Raw acquisition as input, a high-SNR counterpart as target.

    Without ``clean_target`` the target puts the averaged b0 on every b0
    channel and DWIs synthesized from the all-data tensor on every DWI
    channel. A provided ``clean_target`` must match the input layout.
    """
    arr = _full_data(data, scheme)
    m = as_mask_array(mask, arr.shape)
    inp = arr * m[..., None]
    if clean_target is None:
        b0 = scheme.b0_indices
        s0 = arr[..., b0].mean(axis=-1)
        tf = fit_tensor(arr, scheme, m, s0=s0)
        tgt = synthesize_dwis(tf, s0, scheme, m).data
    else:
        tgt = clean_target.data if isinstance(clean_target, Volume4D) else np.asarray(clean_target)
        if tgt.shape != arr.shape:
            raise ShapeError(f"clean target {tgt.shape} does not match input layout {arr.shape}")
        tgt = tgt * m[..., None]
    return TrainingPair(inp, np.asarray(tgt, dtype=np.float64), m.copy(), str(subject_id), 0)


def standardization_params(vol, mask) -> StandardizationParams:
    """Mean and standard deviation of all channels over brain voxels."""
    arr = np.asarray(vol, dtype=np.float64)
    m = as_mask_array(mask, arr.shape)
    vals = arr[m]
    if vals.size == 0:
        raise DegenerateInputError("empty mask")
    sd = float(vals.std())
    if not sd > 1e-12:
        raise DegenerateInputError("input has zero variance inside the mask")
    return StandardizationParams(float(vals.mean()), sd)


def standardize(vol, mask, params=None):
    """``(x - mean) / std`` inside the mask, zero outside.

    Returns ``(standardized, params)``; ``params`` are computed from ``vol``
    unless given.
    """
    arr = np.asarray(vol, dtype=np.float64)
    params = params or standardization_params(arr, mask)
    m = as_mask_array(mask, arr.shape)
    m = m[..., None] if arr.ndim == 4 else m
    return (arr - params.mean) / params.std * m, params


def destandardize(vol, params, mask=None):
    """Inverse of :func:`standardize`: ``x * std + mean`` (masked if given)."""
    out = np.asarray(vol, dtype=np.float64) * params.std + params.mean
    if mask is not None:
        m = as_mask_array(mask, out.shape)
        out = out * (m[..., None] if out.ndim == 4 else m)
    return out


def standardize_pair(pair: TrainingPair):
    """Standardize input and target with the input's brain statistics."""
    inp, params = standardize(pair.input, pair.mask)
    tgt, _ = standardize(pair.target, pair.mask, params)
    return replace(pair, input=inp, target=tgt), params


def extract_blocks(pair, block=(64, 64, 64), n_blocks=8, seed=0, min_coverage=0.25, max_tries=1000):
    """Random sub-blocks of a pair.

    Each corner is rejection-sampled until the block has at least
    ``min_coverage`` brain voxels; after ``max_tries`` the best corner seen
    is used.
    """
    block = tuple(int(b) for b in np.broadcast_to(block, (3,)))
    dims = pair.mask.shape
    if any(b > n for b, n in zip(block, dims)):
        raise ShapeError(f"block {block} larger than volume {dims}")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 606, int(pair.subset_id)]))
    total = float(np.prod(block))
    out = []
    for _ in range(n_blocks):
        best, best_cov = None, -1.0
        for _ in range(max_tries):
            corner = tuple(int(rng.integers(0, n - b + 1)) for b, n in zip(block, dims))
            sl = tuple(slice(c, c + b) for c, b in zip(corner, block))
            cov = pair.mask[sl].sum() / total
            if cov > best_cov:
                best, best_cov = sl, cov
            if cov >= min_coverage:
                break
        out.append(
            TrainingPair(
                pair.input[best].copy(),
                pair.target[best].copy(),
                pair.mask[best].copy(),
                pair.subject_id,
                pair.subset_id,
            )
        )
    return out


def flip_x(pair: TrainingPair) -> TrainingPair:
    """Mirror a pair along x; channel order is left unchanged."""
    return replace(
        pair,
        input=pair.input[::-1].copy(),
        target=pair.target[::-1].copy(),
        mask=pair.mask[::-1].copy(),
    )


def augment_flip(blocks):
    """Original blocks followed by their x-mirrored copies."""
    blocks = list(blocks)
    return blocks + [flip_x(b) for b in blocks]


def average_denoised(volumes):
    """Voxelwise mean of K denoised volumes of identical shape."""
    vols = [v.data if isinstance(v, Volume4D) else np.asarray(v, dtype=np.float64) for v in volumes]
    if not vols:
        raise ValueError("need at least one volume")
    shape = vols[0].shape
    if any(v.shape != shape for v in vols):
        raise ShapeError("denoised volumes differ in shape")
    out = np.mean(np.stack(vols), axis=0)
    first = volumes[0]
    if isinstance(first, Volume4D):
        return first.with_data(out)
    return out
