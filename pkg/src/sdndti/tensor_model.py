"""Diffusion tensor fitting, DWI synthesis and scalar/orientation metrics.

Tensors are stored as 6-vectors ``[Dxx, Dyy, Dzz, Dxy, Dxz, Dyz]`` in
um^2/ms, matching the column order of
:func:`sdndti.gradient_design.design_matrix`.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .exceptions import InvalidSignalError, ShapeError, SingularSchemeError
from .gradient_design import design_matrix
from .volume_io import GradientScheme, Volume4D, as_mask_array

SIGNAL_FLOOR = 1e-6  # fraction of S0 below which the log argument is clamped

OUTSIDE_MASK = 1
CLAMPED_SIGNAL = 2
NEGATIVE_EIGENVALUE = 4


@dataclass(frozen=True, eq=False)
class TensorField:
    """Per-voxel tensors ``(nx, ny, nz, 6)`` with fit flags ``(nx, ny, nz)``."""

    tensor: np.ndarray
    flags: np.ndarray | None = None

    def __post_init__(self):
        t = np.asarray(self.tensor, dtype=np.float64)
        if t.ndim != 4 or t.shape[3] != 6:
            raise ShapeError(f"tensor field must be (nx, ny, nz, 6), got {t.shape}")
        flags = (
            np.zeros(t.shape[:3], dtype=np.uint8)
            if self.flags is None
            else np.asarray(self.flags, dtype=np.uint8)
        )
        if flags.shape != t.shape[:3]:
            raise ShapeError("flag array does not match tensor dims")
        object.__setattr__(self, "tensor", t)
        object.__setattr__(self, "flags", flags)

    @property
    def dims(self):
        return self.tensor.shape[:3]


@dataclass(frozen=True, eq=False)
class DtiMetrics:
    """Eigen-decomposition derived maps.

    ``evals`` is ``(..., 3)`` in descending order, ``V1`` is ``(..., 3)``.
    ``FA`` is clipped to [0, 1]; voxels with a negative eigenvalue keep the
    ``NEGATIVE_EIGENVALUE`` bit in ``flags``.
    """

    evals: np.ndarray
    V1: np.ndarray
    FA: np.ndarray
    MD: np.ndarray
    AD: np.ndarray
    RD: np.ndarray
    flags: np.ndarray

    def as_dict(self):
        return {"V1": self.V1, "FA": self.FA, "MD": self.MD, "AD": self.AD, "RD": self.RD}


def adc(S, S0, b):
    """Apparent diffusion coefficient ``-ln(S/S0)/b`` with a low-signal clamp.

    Returns ``(c, clamped)``; signals below ``1e-6 * S0`` are raised to that
    floor and reported in ``clamped``. ``S > S0`` gives a negative ADC.
    """
    S = np.asarray(S, dtype=np.float64)
    S0 = np.asarray(S0, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if np.any(S0 <= 0):
        raise InvalidSignalError("S0 must be positive")
    if np.any(b <= 0):
        raise InvalidSignalError("b-value must be positive")
    floor = SIGNAL_FLOOR * S0
    clamped = S < floor
    c = -np.log(np.maximum(S, floor) / S0) / b
    return c, clamped


def tensor_to_matrix(D):
    """``(..., 6)`` tensor vectors to ``(..., 3, 3)`` symmetric matrices."""
    D = np.asarray(D, dtype=np.float64)
    M = np.empty(D.shape[:-1] + (3, 3))
    M[..., 0, 0], M[..., 1, 1], M[..., 2, 2] = D[..., 0], D[..., 1], D[..., 2]
    M[..., 0, 1] = M[..., 1, 0] = D[..., 3]
    M[..., 0, 2] = M[..., 2, 0] = D[..., 4]
    M[..., 1, 2] = M[..., 2, 1] = D[..., 5]
    return M


def matrix_to_tensor(M):
    M = np.asarray(M, dtype=np.float64)
    return np.stack(
        [M[..., 0, 0], M[..., 1, 1], M[..., 2, 2], M[..., 0, 1], M[..., 0, 2], M[..., 1, 2]],
        axis=-1,
    )


def _solver(A):
    """Left inverse of the design matrix: exact inverse when square."""
    if A.shape[0] < 6 or np.linalg.matrix_rank(A, tol=1e-12 * np.linalg.norm(A, 2)) < 6:
        raise SingularSchemeError("diffusion directions do not span the 6 tensor elements")
    if A.shape[0] == 6:
        return np.linalg.inv(A)
    return np.linalg.pinv(A)


def fit_tensor(vol, scheme=None, mask=None, s0=None, dwi_indices=None, b0_indices=None):
    """Linear least-squares tensor fit on log signals.

    Parameters
    ----------
    vol : Volume4D or ndarray (nx, ny, nz, nv)
    scheme : GradientScheme, optional
        Defaults to ``vol.scheme``.
    mask : BrainMask or bool array, optional
    s0 : ndarray (nx, ny, nz), optional
        Non-weighted reference; default is the mean of the b0 volumes
        selected by ``b0_indices`` (all b0 volumes when omitted).
    dwi_indices : sequence of int, optional
        Volume indices of the diffusion-weighted volumes to use; default all.

    With exactly six directions the solution is ``A^-1 C``; otherwise it is
    the pseudo-inverse solution minimizing ``||A D - C||``.
    """
    data = vol.data if isinstance(vol, Volume4D) else np.asarray(vol, dtype=np.float64)
    if scheme is None:
        scheme = getattr(vol, "scheme", None)
    if scheme is None:
        raise ValueError("a gradient scheme is required")
    if scheme.n_volumes != data.shape[3]:
        raise ShapeError("scheme does not match volume count")
    m = as_mask_array(mask, data.shape)
    dwi = scheme.dwi_indices if dwi_indices is None else np.asarray(dwi_indices, dtype=int)
    if np.any(scheme.is_b0[dwi]):
        raise ValueError("dwi_indices must select diffusion-weighted volumes")
    if s0 is None:
        b0 = scheme.b0_indices if b0_indices is None else np.asarray(b0_indices, dtype=int)
        if len(b0) == 0:
            raise ValueError("no b0 volume available for S0")
        s0 = data[..., b0].mean(axis=-1)
    s0 = np.asarray(s0, dtype=np.float64)
    if s0.shape != data.shape[:3]:
        raise ShapeError("S0 map does not match volume dims")
    A = design_matrix(scheme.bvecs[dwi])
    solver = _solver(A)
    c, clamped = adc(data[m][:, dwi], s0[m][:, None], scheme.bvals[dwi][None])
    tensor = np.zeros(data.shape[:3] + (6,))
    tensor[m] = c @ solver.T
    flags = np.where(m, 0, OUTSIDE_MASK).astype(np.uint8)
    flags[m] |= np.where(clamped.any(axis=1), CLAMPED_SIGNAL, 0).astype(np.uint8)
    return TensorField(tensor, flags)


def synthesize_dwis(tf, s0, target: GradientScheme, mask=None, voxel_size_mm=(1.0, 1.0, 1.0)):
    """Signals ``S0 exp(-b (alpha . D))`` along every volume of ``target``.

    b0 volumes of ``target`` receive S0. Voxels outside ``mask`` are zero.
    """
    tensor = tf.tensor if isinstance(tf, TensorField) else np.asarray(tf, dtype=np.float64)
    s0 = np.asarray(s0, dtype=np.float64)
    if s0.ndim == 4 and s0.shape[3] == 1:
        s0 = s0[..., 0]
    if s0.shape != tensor.shape[:3]:
        raise ShapeError("S0 map does not match tensor dims")
    m = as_mask_array(mask, tensor.shape)
    out = np.zeros(tensor.shape[:3] + (target.n_volumes,))
    dwi = target.dwi_indices
    vals = np.repeat(s0[m][:, None], target.n_volumes, axis=1)
    if len(dwi):
        A = design_matrix(target.bvecs[dwi])
        vals[:, dwi] *= np.exp(-target.bvals[dwi][None] * (tensor[m] @ A.T))
    out[m] = vals
    return Volume4D(out, target, voxel_size_mm)


def eigen_sym3(D, tol=1e-14, max_sweeps=50):
    """Eigen-decomposition of symmetric 3x3 tensors by cyclic Jacobi rotations.

    Works on any leading shape: ``D`` is ``(..., 6)``. Returns
    ``(evals, evecs)`` with ``evals`` ``(..., 3)`` sorted descending and
    ``evecs`` ``(..., 3, 3)`` holding eigenvectors as columns. Each
    eigenvector is signed so that its largest-magnitude component is
    positive (ties go to the first such component).
    """
    D = np.asarray(D, dtype=np.float64)
    lead = D.shape[:-1]
    A = tensor_to_matrix(D.reshape(-1, 6))
    n = A.shape[0]
    V = np.broadcast_to(np.eye(3), (n, 3, 3)).copy()
    scale = np.sqrt(np.sum(A * A, axis=(1, 2)))
    for _ in range(max_sweeps):
        off = np.sqrt(2 * (A[:, 0, 1] ** 2 + A[:, 0, 2] ** 2 + A[:, 1, 2] ** 2))
        active = off > tol * scale
        if not active.any():
            break
        for p, q in ((0, 1), (0, 2), (1, 2)):
            apq = A[:, p, q]
            rot = active & (apq != 0)
            if not rot.any():
                continue
            idx = np.flatnonzero(rot)
            a = A[idx]
            theta = (a[:, q, q] - a[:, p, p]) / (2 * a[:, p, q])
            t = np.sign(theta) / (np.abs(theta) + np.sqrt(theta * theta + 1))
            t[theta == 0] = 1.0
            c = 1 / np.sqrt(t * t + 1)
            s = t * c
            J = np.broadcast_to(np.eye(3), (len(idx), 3, 3)).copy()
            J[:, p, p] = c
            J[:, q, q] = c
            J[:, p, q] = s
            J[:, q, p] = -s
            a = np.swapaxes(J, 1, 2) @ a @ J
            a[:, p, q] = a[:, q, p] = 0.0
            A[idx] = a
            V[idx] = V[idx] @ J
    evals = np.diagonal(A, axis1=1, axis2=2).copy()
    order = np.argsort(-evals, axis=1, kind="stable")
    evals = np.take_along_axis(evals, order, axis=1)
    V = np.take_along_axis(V, order[:, None, :], axis=2)
    absV = np.abs(V)
    big = np.max(absV, axis=1, keepdims=True)
    # first component within rounding of the maximum decides the sign
    lead_idx = np.argmax(absV >= big * (1 - 1e-12), axis=1)
    sign = np.take_along_axis(V, lead_idx[:, None, :], axis=1)[:, 0, :]
    V = V * np.where(sign < 0, -1.0, 1.0)[:, None, :]
    return evals.reshape(lead + (3,)), V.reshape(lead + (3, 3))


def fractional_anisotropy(evals):
    """FA from ``(..., 3)`` eigenvalues, 0 where the tensor norm vanishes."""
    evals = np.asarray(evals, dtype=np.float64)
    md = evals.mean(axis=-1, keepdims=True)
    num = np.sqrt(np.sum((evals - md) ** 2, axis=-1))
    den = np.sqrt(np.sum(evals**2, axis=-1))
    fa = np.zeros(evals.shape[:-1])
    ok = den >= 1e-12
    fa[ok] = np.sqrt(1.5) * num[ok] / den[ok]
    return fa


def dti_metrics(tf, mask=None) -> DtiMetrics:
    """V1, FA, MD, AD and RD per voxel; zero outside ``mask``."""
    tensor = tf.tensor if isinstance(tf, TensorField) else np.asarray(tf, dtype=np.float64)
    base_flags = tf.flags.copy() if isinstance(tf, TensorField) else np.zeros(tensor.shape[:-1], np.uint8)
    m = as_mask_array(mask, tensor.shape[:3]) if tensor.ndim == 4 else np.ones(tensor.shape[:-1], bool)
    evals = np.zeros(tensor.shape[:-1] + (3,))
    v1 = np.zeros(tensor.shape[:-1] + (3,))
    lam, vec = eigen_sym3(tensor[m])
    evals[m] = lam
    v1[m] = vec[..., :, 0]
    md = evals.mean(axis=-1)
    fa = np.clip(fractional_anisotropy(evals), 0.0, 1.0)
    flags = base_flags
    flags[m] |= np.where(lam[:, 2] < 0, NEGATIVE_EIGENVALUE, 0).astype(np.uint8)
    return DtiMetrics(
        evals=evals,
        V1=v1,
        FA=fa,
        MD=md,
        AD=evals[..., 0].copy(),
        RD=0.5 * (evals[..., 1] + evals[..., 2]),
        flags=flags,
    )
