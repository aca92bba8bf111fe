"""Synthetic DTI scenes and Rician-noise acquisitions.

A scene is an ellipsoidal "brain" with

* background tissue, isotropic by default (with ``background_fa > 0`` its
  fibers follow a smooth swirl),
* two crossing curved tracts whose primary direction follows the curve,
* a block of thin alternating-anisotropy stripes,
* a CSF-like shell of high diffusivity just outside the brain mask,

and an S0 map with a smooth spatial modulation.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .tensor_model import TensorField, matrix_to_tensor, synthesize_dwis
from .volume_io import BrainMask, GradientScheme, Volume4D

LABEL_OUTSIDE = 0
LABEL_BACKGROUND = 1
LABEL_TRACT_A = 2
LABEL_TRACT_B = 3
LABEL_CROSSING = 4
LABEL_STRIPE_HIGH = 5
LABEL_STRIPE_LOW = 6
LABEL_CSF = 7

LABEL_NAMES = {
    LABEL_OUTSIDE: "outside",
    LABEL_BACKGROUND: "background",
    LABEL_TRACT_A: "tract_a",
    LABEL_TRACT_B: "tract_b",
    LABEL_CROSSING: "crossing",
    LABEL_STRIPE_HIGH: "stripe_high",
    LABEL_STRIPE_LOW: "stripe_low",
    LABEL_CSF: "csf",
}


@dataclass
class PhantomSpec:
    """Region parameters; diffusivities in um^2/ms."""

    background_md: float = 0.8
    background_fa: float = 0.0
    tract_md: float = 0.75
    tract_fa: float = 0.8
    tract_width: float = 0.14  # fraction of the smallest dimension
    stripe_fa_high: float = 0.85
    stripe_fa_low: float = 0.2
    stripe_md: float = 0.75
    stripe_period: int = 4  # voxels; half high, half low
    csf_md: float = 3.0
    s0_mean: float = 100.0
    s0_modulation: float = 0.2

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True, eq=False)
class PhantomScene:
    tensor_field: TensorField
    S0: np.ndarray
    mask: BrainMask
    head: np.ndarray
    labels: np.ndarray
    spec: PhantomSpec = field(default_factory=PhantomSpec)
    seed: int = 0

    @property
    def shape(self):
        return self.S0.shape

    @property
    def description(self):
        counts = {LABEL_NAMES[k]: int(np.sum(self.labels == k)) for k in LABEL_NAMES}
        return {"labels": LABEL_NAMES, "voxel_counts": counts, "spec": self.spec.to_dict()}


def axisymmetric_eigenvalues(md, fa):
    """``(l1, l2, l2)`` with the given mean diffusivity and FA (0 <= FA < 1)."""
    if fa <= 0:
        return np.array([md, md, md])
    # l1 = md(1 + 2u), l2 = md(1 - u)  =>  FA = 3u / sqrt(3 + 6u^2)
    u = fa * np.sqrt(3.0) / np.sqrt(9.0 - 6.0 * fa * fa)
    return np.array([md * (1 + 2 * u), md * (1 - u), md * (1 - u)])


def stick_tensor(evals, direction):
    """Axisymmetric tensors ``l2 I + (l1 - l2) v v^T`` for ``(..., 3)`` directions."""
    v = np.asarray(direction, dtype=np.float64)
    v = v / np.linalg.norm(v, axis=-1, keepdims=True)
    l1, l2 = evals[0], evals[1]
    M = l2 * np.eye(3) + (l1 - l2) * v[..., :, None] * v[..., None, :]
    return matrix_to_tensor(M)


def make_phantom(shape=(32, 32, 32), seed=0, spec: PhantomSpec | None = None) -> PhantomScene:
    """Build a deterministic phantom scene.

    ``seed`` sets a random global orientation of the tract geometry and the
    phase of the S0 modulation, so different seeds give different but
    statistically similar subjects.
    """
    spec = spec or PhantomSpec()
    shape = tuple(int(n) for n in shape)
    if len(shape) != 3 or min(shape) < 16:
        raise ValueError("phantom dims must be three values >= 16")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 101]))
    nx, ny, nz = shape
    grid = np.stack(
        np.meshgrid(*[np.arange(n) - (n - 1) / 2 for n in shape], indexing="ij"), axis=-1
    )
    semi = np.array(shape, dtype=np.float64) / 2
    rho = np.sqrt(np.sum((grid / semi) ** 2, axis=-1))
    rim = 1.8 / min(shape) * 2  # ~1.8 voxel CSF shell
    brain = rho <= 0.9 - rim
    head = rho <= 0.9

    labels = np.zeros(shape, dtype=np.uint8)
    labels[head] = LABEL_CSF
    labels[brain] = LABEL_BACKGROUND

    tensor = np.zeros(shape + (6,))
    tensor[head] = [spec.csf_md, spec.csf_md, spec.csf_md, 0, 0, 0]
    # only matters when background_fa > 0; otherwise stick_tensor gives md * I
    bg_ev = axisymmetric_eigenvalues(spec.background_md, spec.background_fa)
    swirl = 2 * np.pi * grid / np.array(shape, dtype=np.float64)
    bg_dir = np.stack(
        [
            1.0 + 0.0 * swirl[..., 0],
            np.sin(swirl[..., 2] + swirl[..., 0]),
            np.cos(swirl[..., 1]),
        ],
        axis=-1,
    )
    tensor[brain] = stick_tensor(bg_ev, bg_dir[brain])

    smin = min(shape)
    width = spec.tract_width * smin
    radius = 0.3 * smin
    tract_ev = axisymmetric_eigenvalues(spec.tract_md, spec.tract_fa)

    # tract A: arc in the x-y plane through the center, running along x there
    ca = np.array([0.0, -radius, 0.0])
    da = grid - ca
    ra = np.hypot(da[..., 0], da[..., 1])
    in_a = brain & (np.abs(ra - radius) < width / 2) & (np.abs(da[..., 2]) < width / 2)
    tang_a = np.stack([-da[..., 1], da[..., 0], np.zeros(shape)], axis=-1)
    tang_a[ra == 0] = [1, 0, 0]

    # tract B: arc in the y-z plane through the center, crossing tract A at 90 degrees
    cb = np.array([0.0, 0.0, -radius])
    db = grid - cb
    rb = np.hypot(db[..., 1], db[..., 2])
    in_b = brain & (np.abs(rb - radius) < width / 2) & (np.abs(db[..., 0]) < width / 2)
    tang_b = np.stack([np.zeros(shape), -db[..., 2], db[..., 1]], axis=-1)
    tang_b[rb == 0] = [0, 1, 0]

    # a random tilt of both tracts per seed, applied to the fiber directions only
    tilt = _small_rotation(rng, 0.25)
    tang_a = tang_a @ tilt.T
    tang_b = tang_b @ tilt.T

    ta = stick_tensor(tract_ev, tang_a[in_a])
    tb = stick_tensor(tract_ev, tang_b[in_b])
    tensor[in_a] = ta
    tensor[in_b] = tb
    both = in_a & in_b
    tensor[both] = 0.5 * (
        stick_tensor(tract_ev, tang_a[both]) + stick_tensor(tract_ev, tang_b[both])
    )
    labels[in_a] = LABEL_TRACT_A
    labels[in_b] = LABEL_TRACT_B
    labels[both] = LABEL_CROSSING

    # stripe block: slabs normal to x alternating in FA, fibers along y
    lo = np.array([0.08 * nx, 0.1 * ny, -0.3 * nz])
    hi = np.array([0.4 * nx, 0.4 * ny, -0.08 * nz])
    box = brain & np.all((grid >= lo) & (grid <= hi), axis=-1) & ~in_a & ~in_b
    ix = np.indices(shape)[0]
    high = (ix // max(spec.stripe_period // 2, 1)) % 2 == 0
    ev_hi = axisymmetric_eigenvalues(spec.stripe_md, spec.stripe_fa_high)
    ev_lo = axisymmetric_eigenvalues(spec.stripe_md, spec.stripe_fa_low)
    ydir = np.array([0.0, 1.0, 0.0]) @ tilt.T
    tensor[box & high] = stick_tensor(ev_hi, ydir)
    tensor[box & ~high] = stick_tensor(ev_lo, ydir)
    labels[box & high] = LABEL_STRIPE_HIGH
    labels[box & ~high] = LABEL_STRIPE_LOW

    phase = rng.uniform(0, 2 * np.pi, 3)
    freq = 2 * np.pi / np.array(shape, dtype=np.float64)
    mod = np.prod(np.cos(freq * grid * 0.8 + phase), axis=-1)
    s0 = np.where(head, spec.s0_mean * (1 + spec.s0_modulation * mod), 0.0)

    tensor[~head] = 0.0
    return PhantomScene(
        tensor_field=TensorField(tensor),
        S0=s0,
        mask=BrainMask(brain),
        head=head,
        labels=labels,
        spec=spec,
        seed=int(seed),
    )


def _small_rotation(rng, max_angle):
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    ang = rng.uniform(-max_angle, max_angle)
    K = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    return np.eye(3) + np.sin(ang) * K + (1 - np.cos(ang)) * K @ K


def hcp_like_sigma(scene: PhantomScene, snr=30.0):
    """Noise level giving ``snr`` on the mean in-brain b0 signal."""
    return float(scene.S0[scene.mask.data].mean() / snr)


def add_rician_noise(signal, sigma, rng):
    """``sqrt((S + n1)^2 + n2^2)`` with i.i.d. ``N(0, sigma^2)`` n1, n2."""
    signal = np.asarray(signal, dtype=np.float64)
    if sigma == 0:
        return signal.copy()
    n1 = rng.normal(0.0, sigma, signal.shape)
    n2 = rng.normal(0.0, sigma, signal.shape)
    return np.sqrt((signal + n1) ** 2 + n2**2)


def clean_signal(scene: PhantomScene, scheme: GradientScheme) -> Volume4D:
    """Noiseless acquisition over the whole head (brain and CSF shell)."""
    return synthesize_dwis(scene.tensor_field, scene.S0, scheme, scene.head)


def simulate_acquisition(scene: PhantomScene, scheme: GradientScheme, sigma, seed=0) -> Volume4D:
    """Noiseless synthesis plus Rician noise, one RNG stream per volume."""
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    clean = clean_signal(scene, scheme).data
    out = np.empty_like(clean)
    for v in range(clean.shape[3]):
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), 202, v]))
        out[..., v] = add_rician_noise(clean[..., v], sigma, rng)
    return Volume4D(out, scheme)
