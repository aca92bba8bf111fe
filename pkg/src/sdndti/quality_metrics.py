"""Image-similarity and DTI-metric error measures.

Image metrics (MAE, PSNR, SSIM) are computed on intensities that were
standardized with the input data's brain statistics, clipped to [-3, 3]
and mapped to [0, 1]. DTI metric errors are mean absolute differences in
each metric's own units, with V1 compared by the sign-blind angle.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import correlate1d

from .exceptions import DegenerateInputError, InvalidInputError, ShapeError, WindowError
from .volume_io import as_mask_array

SSIM_SIGMA = 1.5
SSIM_RADIUS = 5  # 11-voxel support
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def rescale_for_metrics(vol, params):
    """``clip((x - mean) / std, -3, 3)`` mapped linearly onto [0, 1]."""
    z = (np.asarray(vol, dtype=np.float64) - params.mean) / params.std
    return (np.clip(z, -3.0, 3.0) + 3.0) / 6.0


def _masked(a, b, mask):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"shapes differ: {a.shape} vs {b.shape}")
    if mask is None:
        return a.reshape(-1), b.reshape(-1)
    m = np.asarray(mask.data if hasattr(mask, "data") else mask, dtype=bool)
    if m.shape != a.shape[: m.ndim]:
        raise ShapeError(f"mask {m.shape} does not match data {a.shape}")
    if not m.any():
        raise DegenerateInputError("empty mask")
    return a[m], b[m]


def mae(a, b, mask=None):
    """Mean absolute difference over masked voxels (all trailing channels)."""
    x, y = _masked(a, b, mask)
    if x.size == 0:
        raise DegenerateInputError("no voxels to compare")
    return float(np.mean(np.abs(x - y)))


def psnr(a, b, mask=None, peak=1.0):
    """``-10 log10(MSE / peak^2)`` over masked voxels; ``inf`` when MSE < 1e-20."""
    x, y = _masked(a, b, mask)
    if x.size == 0:
        raise DegenerateInputError("no voxels to compare")
    mse = float(np.mean((x - y) ** 2))
    if mse < 1e-20:
        return math.inf
    return float(-10.0 * np.log10(mse / peak**2))


def gaussian_window_1d(sigma=SSIM_SIGMA, radius=SSIM_RADIUS):
    t = np.arange(-radius, radius + 1, dtype=np.float64)
    w = np.exp(-0.5 * (t / sigma) ** 2)
    return w / w.sum()


def ssim_map(a, b, data_range=1.0, sigma=SSIM_SIGMA, radius=SSIM_RADIUS):
    """Local SSIM at every voxel whose full window lies inside the volume.

    Returns an array of shape ``(X - 2r, Y - 2r, Z - 2r)`` for window
    radius ``r``; entry ``[i, j, k]`` belongs to voxel ``(i+r, j+r, k+r)``.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 3:
        raise ShapeError("ssim needs two 3D volumes of equal shape")
    if min(a.shape) < 2 * radius + 1:
        raise WindowError(f"volume {a.shape} smaller than the {2 * radius + 1}^3 window")
    w = gaussian_window_1d(sigma, radius)

    def blur(v):
        for ax in range(3):
            v = correlate1d(v, w, axis=ax, mode="constant")
        return v[radius:-radius, radius:-radius, radius:-radius]

    mu_a, mu_b = blur(a), blur(b)
    saa = blur(a * a) - mu_a**2
    sbb = blur(b * b) - mu_b**2
    sab = blur(a * b) - mu_a * mu_b
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    return ((2 * mu_a * mu_b + c1) * (2 * sab + c2)) / (
        (mu_a**2 + mu_b**2 + c1) * (saa + sbb + c2)
    )


def ssim(a, b, mask=None, data_range=1.0):
    """Mean local SSIM (Gaussian window, sigma 1.5, 11^3 support).

    The average runs over window centers that fit inside the volume and,
    when ``mask`` is given, lie inside the mask.
    """
    smap = ssim_map(a, b, data_range)
    if mask is None:
        return float(smap.mean())
    r = SSIM_RADIUS
    m = as_mask_array(mask, np.shape(a))[r:-r, r:-r, r:-r]
    if not m.any():
        raise DegenerateInputError("no mask voxel has a full SSIM window")
    return float(smap[m].mean())


def angular_mad(v1a, v1b, mask=None):
    """Mean angle in degrees between primary eigenvectors, sign ignored (0..90)."""
    a = np.asarray(v1a, dtype=np.float64)
    b = np.asarray(v1b, dtype=np.float64)
    if a.shape != b.shape or a.shape[-1] != 3:
        raise ShapeError("V1 fields must be (..., 3) arrays of equal shape")
    if mask is not None:
        m = as_mask_array(mask, a.shape[:-1]) if a.ndim == 4 else np.asarray(mask, bool)
        if not m.any():
            raise DegenerateInputError("empty mask")
        a, b = a[m], b[m]
    a = a.reshape(-1, 3)
    b = b.reshape(-1, 3)
    for v in (a, b):
        if np.any(np.abs(np.linalg.norm(v, axis=1) - 1) > 1e-6):
            raise InvalidInputError("V1 vectors must have unit length inside the mask")
    cos = np.minimum(1.0, np.abs(np.sum(a * b, axis=1)))
    return float(np.degrees(np.arccos(cos)).mean())


def scalar_mad(a, b, mask=None):
    """Masked mean absolute difference in the metric's native units."""
    return mae(a, b, mask)


def defined_v1(evals, rel_tol=1e-6):
    """True where the largest eigenvalue is distinct, so V1 has a direction."""
    ev = np.asarray(evals, dtype=np.float64)
    scale = np.maximum(np.abs(ev[..., 0]), 1e-12)
    return (ev[..., 0] - ev[..., 1]) > rel_tol * scale


def dti_errors(metrics, truth, mask):
    """MAD of V1 (degrees), FA, MD, AD and RD between two DtiMetrics.

    V1 is compared only where the reference has a distinct largest
    eigenvalue; elsewhere (isotropic or planar tensors) its direction is
    arbitrary. V1 is NaN when no such voxel exists.
    """
    m = as_mask_array(mask, np.shape(truth.FA))
    v1_mask = m & defined_v1(truth.evals)
    return {
        "V1": angular_mad(metrics.V1, truth.V1, v1_mask) if v1_mask.any() else float("nan"),
        "FA": scalar_mad(metrics.FA, truth.FA, m),
        "MD": scalar_mad(metrics.MD, truth.MD, m),
        "AD": scalar_mad(metrics.AD, truth.AD, m),
        "RD": scalar_mad(metrics.RD, truth.RD, m),
    }


def image_errors(image, truth, mask, params):
    """Per-volume and volume-averaged MAE/PSNR/SSIM after rescaling.

    ``image`` and ``truth`` are ``(X, Y, Z, V)``.
    """
    a = rescale_for_metrics(image, params)
    b = rescale_for_metrics(truth, params)
    m = as_mask_array(mask, a.shape)
    per = {"MAE": [], "PSNR": [], "SSIM": []}
    for v in range(a.shape[3]):
        per["MAE"].append(mae(a[..., v], b[..., v], m))
        per["PSNR"].append(psnr(a[..., v], b[..., v], m))
        per["SSIM"].append(ssim(a[..., v], b[..., v], m))
    summary = {key: float(np.mean(vals)) for key, vals in per.items()}
    return summary, per


@dataclass
class MetricReport:
    """Stage -> metric -> value table, optionally with group statistics.

    ``std`` mirrors ``values`` when the report aggregates several subjects;
    ``n`` is the number of subjects.
    """

    values: dict
    std: dict | None = None
    n: int = 1
    per_volume: dict = field(default_factory=dict)

    def to_dict(self):
        out = {"n_subjects": self.n, "values": self.values}
        if self.std is not None:
            out["std"] = self.std
        if self.per_volume:
            out["per_volume"] = self.per_volume
        return out

    def to_json(self, path=None):
        text = json.dumps(_jsonable(self.to_dict()), indent=2, sort_keys=True)
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text + "\n")
        return text

    @classmethod
    def from_dict(cls, doc):
        return cls(doc["values"], doc.get("std"), doc.get("n_subjects", 1), doc.get("per_volume", {}))

    def to_table(self):
        """Aligned text table, one row per stage, ``mean (± std)`` cells."""
        stages = list(self.values)
        cols = []
        for st in stages:
            for key in self.values[st]:
                if key not in cols:
                    cols.append(key)
        header = ["stage"] + cols
        rows = [header]
        for st in stages:
            row = [st]
            for key in cols:
                v = self.values[st].get(key)
                if v is None:
                    row.append("-")
                    continue
                cell = _fmt(v)
                if self.std is not None and self.n > 1:
                    cell += f" ± {_fmt(self.std[st][key])}"
                row.append(cell)
            rows.append(row)
        widths = [max(len(r[i]) for r in rows) for i in range(len(header))]
        lines = ["  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(r, widths))) for r in rows]
        lines.insert(1, "  ".join("-" * w for w in widths))
        return "\n".join(lines) + "\n"


def _fmt(v):
    if v is None:
        return "-"
    if math.isinf(v):
        return "inf"
    if abs(v) >= 100:
        return f"{v:.2f}"
    if abs(v) >= 1:
        return f"{v:.3f}"
    return f"{v:.4g}"


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else ("inf" if v > 0 else "-inf" if v < 0 else "nan")
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def aggregate(reports):
    """Group mean and sample standard deviation (n - 1) across subjects.

    With a single report the standard deviations are 0 and ``n`` is 1.
    """
    reports = list(reports)
    if not reports:
        raise ValueError("aggregate needs at least one report")
    n = len(reports)
    values, std = {}, {}
    for st in reports[0].values:
        values[st], std[st] = {}, {}
        for key in reports[0].values[st]:
            xs = [float(r.values[st][key]) for r in reports]
            # fsum is exactly rounded, so the result ignores subject order
            mean = math.fsum(xs) / n
            values[st][key] = mean
            std[st][key] = math.sqrt(math.fsum((x - mean) ** 2 for x in xs) / (n - 1)) if n > 1 else 0.0
    return MetricReport(values, std, n)
