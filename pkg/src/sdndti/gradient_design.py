"""Design and scoring of diffusion-encoding direction schemes.

A six-direction set is scored by the condition number of its tensor design
matrix; larger sets are scored by the electrostatic energy of antipodally
symmetric unit charges. :func:`design_scheme` builds ``6K`` directions from
rotated copies of a condition-optimal six-set, while
:func:`select_subsets_from_fixed` picks well-conditioned six-subsets out of
a fixed acquired table.

All random searches derive one generator per trial from ``(seed, stream,
trial)`` so a trial's outcome does not depend on which trials ran before it.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize
from scipy.spatial.transform import Rotation

from .exceptions import (
    InsufficientCandidatesError,
    InvalidSchemeError,
    SingularSchemeError,
)

SINGULAR_RTOL = 1e-12
DSM_CONDITION = 1.3228

_STREAM_DSM = 1
_STREAM_ROTATE = 2
_STREAM_SNAP = 3
_STREAM_COMBINE = 4
_STREAM_UNIFORM = 5


def _rng(seed, stream, trial=0):
    return np.random.default_rng(np.random.SeedSequence([int(seed), stream, int(trial)]))


def as_directions(dirs, tol=1e-9) -> np.ndarray:
    """Validate an ``(N, 3)`` array of unit vectors."""
    dirs = np.asarray(dirs, dtype=np.float64)
    if dirs.ndim == 1 and dirs.size == 3:
        dirs = dirs[None]
    if dirs.ndim != 2 or dirs.shape[1] != 3:
        raise InvalidSchemeError(f"directions must be (N, 3), got {dirs.shape}")
    norms = np.linalg.norm(dirs, axis=1)
    if np.any(np.abs(norms - 1) > tol):
        raise InvalidSchemeError("direction vectors must have unit length")
    return dirs


def design_matrix(dirs) -> np.ndarray:
    """Rows ``[gx^2, gy^2, gz^2, 2gxgy, 2gxgz, 2gygz]`` for each direction."""
    g = as_directions(dirs, tol=1e-6)
    x, y, z = g.T
    return np.stack([x * x, y * y, z * z, 2 * x * y, 2 * x * z, 2 * y * z], axis=1)


def condition_number(dirs6) -> float:
    """Ratio of extreme singular values of the 6x6 design matrix."""
    g = as_directions(dirs6, tol=1e-6)
    if len(g) != 6:
        raise InvalidSchemeError(f"condition_number needs exactly 6 directions, got {len(g)}")
    sv = np.linalg.svd(design_matrix(g), compute_uv=False)
    if sv[-1] < SINGULAR_RTOL * sv[0]:
        raise SingularSchemeError("direction set is degenerate (rank < 6)")
    return float(sv[0] / sv[-1])


def _cond_or_inf(g):
    x, y, z = g.T
    A = np.stack([x * x, y * y, z * z, 2 * x * y, 2 * x * z, 2 * y * z], axis=1)
    sv = np.linalg.svd(A, compute_uv=False)
    if sv[-1] < SINGULAR_RTOL * sv[0]:
        return np.inf
    return sv[0] / sv[-1]


def electrostatic_energy(dirs) -> float:
    """Sum over pairs of ``1/|u_i - u_j| + 1/|u_i + u_j|``.

    Each direction is treated as a pair of opposite charges, so the energy is
    blind to the sign of any vector.
    """
    g = as_directions(dirs)
    if len(g) < 2:
        raise InvalidSchemeError("electrostatic energy needs at least two directions")
    iu = np.triu_indices(len(g), k=1)
    diff = np.linalg.norm(g[:, None] - g[None], axis=-1)[iu]
    summ = np.linalg.norm(g[:, None] + g[None], axis=-1)[iu]
    if min(diff.min(), summ.min()) < 1e-9:
        raise SingularSchemeError("coincident or antipodal directions")
    return float(np.sum(1.0 / diff) + np.sum(1.0 / summ))


def _to_cartesian(theta, phi):
    st = np.sin(theta)
    return np.stack([st * np.cos(phi), st * np.sin(phi), np.cos(theta)], axis=-1)


def optimize_dsm6(
    seed=0, restarts=20, iters=5000, step=0.3, cooling=0.95, patience=30, polish=3
):
    """Search for six directions with minimal design-matrix condition number.

    Random-restart hill climbing on spherical coordinates: all twelve angles
    receive a Gaussian perturbation per iteration, the move is kept if the
    condition number drops, and the step shrinks by ``cooling`` after every
    ``patience`` consecutive rejections. The condition number is a max/min
    ratio and so has ridges where singular values tie; the ``polish`` best
    restarts are refined with Nelder-Mead to settle onto those ridges.

    Returns the best ``(6, 3)`` set found.
    """
    if restarts < 1:
        raise ValueError("restarts must be >= 1")

    def cost(x):
        return _cond_or_inf(_to_cartesian(x[:6], x[6:]))

    finals = []
    for r in range(restarts):
        rng = _rng(seed, _STREAM_DSM, r)
        x = np.concatenate([np.arccos(rng.uniform(-1, 1, 6)), rng.uniform(0, 2 * np.pi, 6)])
        cur = cost(x)
        sigma, stale = step, 0
        for _ in range(iters):
            x2 = x + rng.normal(0.0, sigma, 12)
            c = cost(x2)
            if c < cur:
                x, cur, stale = x2, c, 0
            else:
                stale += 1
                if stale >= patience:
                    sigma *= cooling
                    stale = 0
        finals.append((cur, r, x))
    finals.sort(key=lambda item: (item[0], item[1]))
    best_cond, _, best = finals[0]
    for cur, _, x in finals[:polish]:
        for _ in range(3):
            res = minimize(
                cost,
                x,
                method="Nelder-Mead",
                options={"maxiter": 4000, "xatol": 1e-10, "fatol": 1e-13, "adaptive": True},
            )
            if res.fun < cur:
                x, cur = res.x, float(res.fun)
        if cur < best_cond:
            best_cond, best = cur, x
    return _canonical_signs(_to_cartesian(best[:6], best[6:]))


def _canonical_signs(dirs):
    dirs = np.array(dirs, dtype=np.float64)
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    idx = np.argmax(np.abs(dirs), axis=1)
    flip = dirs[np.arange(len(dirs)), idx] < 0
    dirs[flip] *= -1
    return dirs


_DSM_CACHE: dict = {}


def dsm6(seed=0, restarts=20, iters=5000):
    """Cached :func:`optimize_dsm6` result for the given budget."""
    key = (seed, restarts, iters)
    if key not in _DSM_CACHE:
        _DSM_CACHE[key] = optimize_dsm6(seed, restarts, iters)
    return _DSM_CACHE[key].copy()


@dataclass
class SubsetPlan:
    """K disjoint six-direction subsets of an acquired direction table.

    Indices refer to the diffusion-weighted volumes in acquisition order
    (b0 volumes are not counted).
    """

    subsets: list
    cond_numbers: list
    threshold: float = 1.6
    n_candidates: int | None = field(default=None, compare=False)

    def __post_init__(self):
        self.subsets = [[int(i) for i in s] for s in self.subsets]
        self.cond_numbers = [float(c) for c in self.cond_numbers]
        flat = [i for s in self.subsets for i in s]
        if any(len(s) != 6 for s in self.subsets):
            raise InvalidSchemeError("every subset must contain 6 indices")
        if len(set(flat)) != len(flat):
            raise InvalidSchemeError("subsets are not disjoint")
        if len(self.cond_numbers) != len(self.subsets):
            raise InvalidSchemeError("one condition number per subset required")
        if any(c >= self.threshold for c in self.cond_numbers):
            raise InvalidSchemeError(
                f"subset condition numbers {self.cond_numbers} exceed threshold {self.threshold}"
            )

    @property
    def n_subsets(self) -> int:
        return len(self.subsets)

    def to_dict(self):
        return {
            "threshold": self.threshold,
            "subsets": self.subsets,
            "cond_numbers": self.cond_numbers,
        }

    def to_json(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)
            fh.write("\n")

    @classmethod
    def from_json(cls, path):
        with open(path) as fh:
            doc = json.load(fh)
        return cls(doc["subsets"], doc["cond_numbers"], doc.get("threshold", 1.6))


def design_scheme(n_subsets, seed=0, rotation_trials=2000, dsm=None, cond_threshold=1.6, max_draws=1000):
    """Stack ``n_subsets`` rotated copies of a condition-optimal six-set.

    The first copy stays fixed (energy is invariant to a global rotation).
    The condition number of the design matrix is not invariant under
    rotation, so each further copy is drawn from random rotations whose
    rotated set still has a condition number below ``cond_threshold``.
    Over ``rotation_trials`` such rotation tuples, the one whose union has
    the lowest electrostatic energy wins.

    Returns ``(dirs, plan)`` with ``dirs`` of shape ``(6K, 3)``.
    """
    if n_subsets < 1:
        raise ValueError("n_subsets must be >= 1")
    base = as_directions(dsm if dsm is not None else dsm6(seed))
    base_cond = condition_number(base)
    if base_cond >= cond_threshold:
        raise InvalidSchemeError(f"base set condition number {base_cond:.4f} exceeds threshold")
    if n_subsets == 1:
        dirs = base.copy()
    else:
        best, best_e = None, np.inf
        for t in range(rotation_trials):
            rng = _rng(seed, _STREAM_ROTATE, t)
            copies = [base]
            for _ in range(n_subsets - 1):
                for _ in range(max_draws):
                    cand = Rotation.random(random_state=rng).apply(base)
                    if _cond_or_inf(cand) < cond_threshold:
                        copies.append(cand)
                        break
                else:
                    break
            if len(copies) < n_subsets:
                continue
            union = np.concatenate(copies)
            try:
                e = electrostatic_energy(union)
            except SingularSchemeError:
                continue
            if e < best_e:
                best, best_e = union, e
        if best is None:
            raise SingularSchemeError("no admissible rotation tuple found")
        dirs = best
    dirs = _canonical_signs(dirs)
    subsets = [list(range(6 * k, 6 * k + 6)) for k in range(n_subsets)]
    conds = [condition_number(dirs[s]) for s in subsets]
    return dirs, SubsetPlan(subsets, conds, threshold=cond_threshold)


def uniform_directions(n, seed=0, iters=2000, lr=0.05):
    """``n`` antipodally uniform directions by electrostatic repulsion.

    Projected gradient descent on the antipodally symmetric energy, starting
    from random points; the step is normalized by the largest tangential
    force so the iteration is scale-free.
    """
    rng = _rng(seed, _STREAM_UNIFORM)
    g = rng.normal(size=(n, 3))
    g /= np.linalg.norm(g, axis=1, keepdims=True)
    for it in range(iters):
        force = np.zeros_like(g)
        for sgn in (1.0, -1.0):
            d = g[:, None] - sgn * g[None]
            r = np.linalg.norm(d, axis=-1)
            np.fill_diagonal(r, np.inf)
            force += np.sum(d / r[..., None] ** 3, axis=1)
        force -= np.sum(force * g, axis=1, keepdims=True) * g
        fmax = np.max(np.linalg.norm(force, axis=1))
        step = lr * (1 - it / iters) + 1e-3
        g = g + step * force / fmax
        g /= np.linalg.norm(g, axis=1, keepdims=True)
    return _canonical_signs(g)


def _snap(rotated, acquired):
    # |cos| is monotone in the antipodal-aware angle
    cos = np.abs(rotated @ acquired.T)
    return np.argmax(cos, axis=1)


def select_subsets_from_fixed(
    acquired, n_subsets, cond_threshold=1.6, trials=20000, seed=0, combine_trials=None, dsm=None
):
    """Choose K disjoint well-conditioned six-subsets from a fixed direction table.

    Stage 1 rotates the optimal six-set at random, snaps each rotated vector
    to its nearest acquired direction (sign ignored) and keeps distinct
    index sets with condition number below ``cond_threshold``. Stage 2 draws
    random disjoint K-combinations of these candidates and keeps the one
    whose union has the lowest electrostatic energy.
    """
    acq = as_directions(acquired, tol=1e-6)
    if len(acq) < 6 * n_subsets:
        raise InvalidSchemeError(f"need at least {6 * n_subsets} directions, have {len(acq)}")
    base = as_directions(dsm if dsm is not None else dsm6(seed))
    candidates = {}
    for t in range(trials):
        rot = Rotation.random(random_state=_rng(seed, _STREAM_SNAP, t))
        idx = _snap(rot.apply(base), acq)
        key = tuple(sorted(int(i) for i in idx))
        if len(set(key)) < 6 or key in candidates:
            continue
        c = _cond_or_inf(acq[list(key)])
        if c < cond_threshold:
            candidates[key] = float(c)
    keys = sorted(candidates)
    n_cand = len(keys)
    if combine_trials is None:
        combine_trials = max(2000, 20 * n_cand)
    best, best_e = None, np.inf
    for t in range(combine_trials if n_cand else 0):
        rng = _rng(seed, _STREAM_COMBINE, t)
        chosen, used = [], set()
        for j in rng.permutation(n_cand):
            if used.isdisjoint(keys[j]):
                chosen.append(keys[j])
                used.update(keys[j])
                if len(chosen) == n_subsets:
                    break
        if len(chosen) < n_subsets:
            continue
        union = np.concatenate([acq[list(s)] for s in chosen])
        try:
            e = electrostatic_energy(union)
        except SingularSchemeError:
            continue
        if e < best_e:
            best, best_e = chosen, e
    if best is None:
        raise InsufficientCandidatesError(
            f"found {n_cand} candidate subsets with cond < {cond_threshold}, "
            f"but no {n_subsets} of them are disjoint",
            n_cand,
        )
    best = sorted(best)
    return SubsetPlan(
        [list(s) for s in best],
        [candidates[s] for s in best],
        threshold=cond_threshold,
        n_candidates=n_cand,
    )
