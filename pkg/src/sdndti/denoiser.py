"""A 3D residual convolutional denoiser written directly in NumPy.

The network has ten 3D convolution layers at constant width ``k`` and
stride 1 with "same" zero padding. Layers 1-9 are conv -> batch norm ->
ReLU; layer 10 is a plain convolution back to ``c`` channels whose output is
added to the input (residual learning). Four concatenation skips carry
early features forward::

    L6 input = [out(L5), out(L4)]
    L7 input = [out(L6), out(L3)]
    L8 input = [out(L7), out(L2)]
    L9 input = [out(L8), out(L1)]

Arrays are channels-last, ``(batch, X, Y, Z, channels)``, so a block is a
plain slice of an ``(nx, ny, nz, nv)`` image stack. Every layer
works in the dtype of its input, so the same code runs float32 for
training and float64 for gradient checks.
"""

from __future__ import annotations

import copy
import logging
import time
import warnings
from dataclasses import asdict, dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .exceptions import DivergenceError, ShapeError

log = logging.getLogger(__name__)

N_LAYERS = 10
SKIPS = {6: 4, 7: 3, 8: 2, 9: 1}  # layer -> layer whose output is concatenated in
TOPOLOGY_ID = 1
BN_EPS = 1e-5
BN_MOMENTUM = 0.99


# ---------------------------------------------------------------- layers


def _pad(x, p):
    return np.pad(x, ((0, 0), (p, p), (p, p), (p, p), (0, 0))) if p else x


def _im2col(xp, d):
    """``(B, X+2p, Y+2p, Z+2p, C)`` -> ``(B*X*Y*Z, d*d*d*C)`` patch matrix."""
    win = sliding_window_view(xp, (d, d, d), axis=(1, 2, 3))
    out_sp = win.shape[1:4]
    cols = win.transpose(0, 1, 2, 3, 5, 6, 7, 4).reshape(-1, d**3 * xp.shape[-1])
    return cols, out_sp


def conv3d_forward(x, w, b, padding=None):
    """Stride-1 3D cross-correlation with zero padding.

    ``x`` is ``(B, X, Y, Z, Cin)`` and ``w`` is ``(Cout, Cin, d, d, d)``;
    ``padding`` defaults to ``(d - 1) // 2`` ("same" output size).
    Returns ``(y, cache)`` with ``y`` of shape ``(B, X', Y', Z', Cout)``.
    """
    if x.ndim != 5 or w.ndim != 5 or x.shape[-1] != w.shape[1]:
        raise ShapeError(f"conv3d: input {x.shape} incompatible with weights {w.shape}")
    cout, d = w.shape[0], w.shape[2]
    p = (d - 1) // 2 if padding is None else int(padding)
    cols, out_sp = _im2col(_pad(x, p), d)
    wm = w.transpose(2, 3, 4, 1, 0).reshape(-1, cout)
    y = cols @ wm
    y += b
    y = y.reshape((x.shape[0],) + out_sp + (cout,))
    return y, (cols, w, p)


def conv3d_backward(dy, cache, need_dx=True):
    """Gradients ``(dx, dw, db)`` of :func:`conv3d_forward`.

    The input gradient is a correlation of ``dy`` with the spatially
    flipped, channel-transposed kernel.
    """
    cols, w, p = cache
    cout, cin, d = w.shape[0], w.shape[1], w.shape[2]
    dy2 = dy.reshape(-1, cout)
    dw = (cols.T @ dy2).reshape(d, d, d, cin, cout).transpose(4, 3, 0, 1, 2)
    db = dy2.sum(axis=0)
    dx = None
    if need_dx:
        wf = w[:, :, ::-1, ::-1, ::-1].transpose(2, 3, 4, 0, 1).reshape(-1, cin)
        dcols, out_sp = _im2col(_pad(dy, d - 1 - p), d)
        dx = (dcols @ wf).reshape((dy.shape[0],) + out_sp + (cin,))
    return dx, dw, db


def batchnorm_forward(x, gamma, beta, running_mean, running_var, training, momentum=BN_MOMENTUM, eps=BN_EPS):
    """Per-channel batch normalization over batch and spatial axes.

    ``x`` is channels-last. In training mode batch statistics are used and
    the running statistics (updated in place) move towards them with
    weight ``1 - momentum``.
    """
    axes = (0, 1, 2, 3)
    if training:
        mu = x.mean(axis=axes)
        var = x.var(axis=axes)
        running_mean *= momentum
        running_mean += (1 - momentum) * mu
        running_var *= momentum
        running_var += (1 - momentum) * var
    else:
        mu, var = running_mean, running_var
    inv = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = (x - mu.astype(x.dtype)) * inv
    y = xhat * gamma + beta
    return y, (xhat, inv, gamma, training)


def batchnorm_backward(dy, cache):
    """Gradients ``(dx, dgamma, dbeta)``; exact for both modes."""
    xhat, inv, gamma, training = cache
    axes = (0, 1, 2, 3)
    dgamma = np.sum(dy * xhat, axis=axes)
    dbeta = np.sum(dy, axis=axes)
    g = gamma * inv
    if not training:
        return dy * g, dgamma, dbeta
    n = dy.size // dy.shape[-1]
    dx = g / n * (n * dy - dbeta - xhat * dgamma)
    return dx, dgamma, dbeta


def relu_forward(x):
    return np.maximum(x, 0), x > 0


def relu_backward(dy, cache):
    return dy * cache


def l1_loss_masked(pred, target, mask):
    """Mean absolute error over masked voxels and all channels.

    Arrays are channels-last; ``mask`` is ``(B, X, Y, Z)`` or ``(X, Y, Z)``
    and broadcasts over channels.
    Returns ``(loss, dloss/dpred)``; the subgradient at ties is 0.
    Returns ``(None, None)`` when the mask is empty.
    """
    if pred.shape != target.shape:
        raise ShapeError(f"pred {pred.shape} and target {target.shape} differ")
    m = np.asarray(mask, dtype=bool)
    if m.ndim == 3:
        m = m[None]
    m = np.broadcast_to(m[..., None], pred.shape)
    n = int(m.sum())
    if n == 0:
        return None, None
    diff = pred - target
    loss = float(np.sum(np.abs(diff[m]), dtype=np.float64) / n)
    grad = np.where(m, np.sign(diff), 0).astype(pred.dtype) / pred.dtype.type(n)
    return loss, grad


# ---------------------------------------------------------------- model


def conv_weight_count(c, k, d=3):
    """Closed-form number of convolution weights (biases excluded)."""
    d3 = d**3
    return 2 * c * k * d3 + 4 * k * k * d3 + 4 * 2 * k * k * d3


class MUNet:
    """Ten-layer residual 3D CNN with concatenation skips.

    Parameters live in ``self.params`` (trainable) and ``self.buffers``
    (batch-norm running statistics), keyed ``L{i}.weight``, ``L{i}.bias``,
    ``L{i}.bn_gamma``, ``L{i}.bn_beta``, ``L{i}.bn_running_mean``,
    ``L{i}.bn_running_var``.
    """

    def __init__(self, c, k=192, d=3, seed=0, dtype=np.float32, topology=TOPOLOGY_ID):
        if c < 1 or k < 1 or d < 1 or d % 2 == 0:
            raise ValueError("need c >= 1, k >= 1 and odd d")
        if topology != TOPOLOGY_ID:
            raise ShapeError(f"unknown skip topology id {topology}")
        self.c, self.k, self.d = int(c), int(k), int(d)
        self.dtype = np.dtype(dtype)
        self.training = False
        self.params = {}
        self.buffers = {}
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), 303]))
        for i in range(1, N_LAYERS + 1):
            cin, cout = self.layer_channels(i)
            fan_in = cin * d**3
            w = rng.normal(0.0, np.sqrt(2.0 / fan_in), (cout, cin, d, d, d))
            self.params[f"L{i}.weight"] = w.astype(self.dtype)
            self.params[f"L{i}.bias"] = np.zeros(cout, self.dtype)
            if i < N_LAYERS:
                self.params[f"L{i}.bn_gamma"] = np.ones(cout, self.dtype)
                self.params[f"L{i}.bn_beta"] = np.zeros(cout, self.dtype)
                self.buffers[f"L{i}.bn_running_mean"] = np.zeros(cout, self.dtype)
                self.buffers[f"L{i}.bn_running_var"] = np.ones(cout, self.dtype)

    def layer_channels(self, i):
        if i == 1:
            return self.c, self.k
        if i == N_LAYERS:
            return self.k, self.c
        if i in SKIPS:
            return 2 * self.k, self.k
        return self.k, self.k

    @property
    def architecture(self):
        return {"c": self.c, "k": self.k, "d": self.d, "topology": TOPOLOGY_ID}

    @property
    def n_conv_weights(self):
        return sum(self.params[f"L{i}.weight"].size for i in range(1, N_LAYERS + 1))

    @property
    def n_parameters(self):
        return sum(p.size for p in self.params.values())

    @property
    def receptive_radius(self):
        return N_LAYERS * (self.d - 1) // 2

    def state_items(self):
        """Tensors in container order: per layer weight, bias, then BN entries."""
        items = []
        for i in range(1, N_LAYERS + 1):
            names = ["weight", "bias"]
            if i < N_LAYERS:
                names += ["bn_gamma", "bn_beta", "bn_running_mean", "bn_running_var"]
            for n in names:
                key = f"L{i}.{n}"
                items.append((key, self.params.get(key, self.buffers.get(key))))
        return items

    def load_state(self, state):
        for key, cur in self.state_items():
            if key not in state:
                raise ShapeError(f"missing tensor {key}")
            arr = np.asarray(state[key])
            if arr.shape != cur.shape:
                raise ShapeError(f"{key}: shape {arr.shape} does not match {cur.shape}")
            target = self.params if key in self.params else self.buffers
            target[key] = arr.astype(self.dtype).copy()
        extra = set(state) - {k for k, _ in self.state_items()}
        if extra:
            raise ShapeError(f"unexpected tensors {sorted(extra)}")

    def copy(self):
        return copy.deepcopy(self)

    def astype(self, dtype):
        out = self.copy()
        out.dtype = np.dtype(dtype)
        out.params = {k: v.astype(dtype) for k, v in out.params.items()}
        out.buffers = {k: v.astype(dtype) for k, v in out.buffers.items()}
        return out

    # ------------------------------------------------------------ passes

    def forward(self, x, training=None, return_cache=False):
        """Denoised output ``x + residual(x)`` for a ``(B, X, Y, Z, c)`` batch."""
        training = self.training if training is None else training
        x = np.asarray(x)
        if x.ndim == 4:
            x = x[None]
        if x.ndim != 5 or x.shape[-1] != self.c:
            raise ShapeError(f"expected (B, X, Y, Z, {self.c}) input, got {x.shape}")
        x = x.astype(self.dtype, copy=False)
        acts = {0: x}
        caches = {}
        h = x
        for i in range(1, N_LAYERS):
            if i in SKIPS:
                h = np.concatenate([acts[i - 1], acts[SKIPS[i]]], axis=-1)
            else:
                h = acts[i - 1]
            z, cc = conv3d_forward(h, self.params[f"L{i}.weight"], self.params[f"L{i}.bias"])
            z, bc = batchnorm_forward(
                z,
                self.params[f"L{i}.bn_gamma"],
                self.params[f"L{i}.bn_beta"],
                self.buffers[f"L{i}.bn_running_mean"],
                self.buffers[f"L{i}.bn_running_var"],
                training,
            )
            a, rc = relu_forward(z)
            acts[i] = a
            caches[i] = (cc, bc, rc)
        r, cc = conv3d_forward(acts[N_LAYERS - 1], self.params["L10.weight"], self.params["L10.bias"])
        caches[N_LAYERS] = cc
        out = x + r
        if return_cache:
            return out, caches
        return out

    def backward(self, dout, caches, need_dx=False):
        """Parameter gradients (and optionally the input gradient) for ``dout``."""
        grads = {}
        dx, dw, db = conv3d_backward(dout, caches[N_LAYERS])
        grads["L10.weight"], grads["L10.bias"] = dw, db
        dacts = {i: None for i in range(N_LAYERS)}
        dacts[N_LAYERS - 1] = dx
        for i in range(N_LAYERS - 1, 0, -1):
            cc, bc, rc = caches[i]
            g = relu_backward(dacts[i], rc)
            g, dgamma, dbeta = batchnorm_backward(g, bc)
            grads[f"L{i}.bn_gamma"], grads[f"L{i}.bn_beta"] = dgamma, dbeta
            dh, dw, db = conv3d_backward(g, cc, need_dx=(i > 1 or need_dx))
            grads[f"L{i}.weight"], grads[f"L{i}.bias"] = dw, db
            if dh is None:
                continue
            if i in SKIPS:
                _acc(dacts, i - 1, dh[..., : self.k])
                _acc(dacts, SKIPS[i], dh[..., self.k :])
            else:
                _acc(dacts, i - 1, dh)
        if need_dx:
            return grads, dout + dacts[0]
        return grads


def _acc(store, key, value):
    store[key] = value if store[key] is None else store[key] + value


def build_model(c, k=192, d=3, seed=0, dtype=np.float32):
    return MUNet(c, k, d, seed=seed, dtype=dtype)


# ---------------------------------------------------------------- optimizer


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    epochs: int = 40
    batch_size: int = 1
    val_fraction: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.val_fraction < 1:
            raise ValueError("val_fraction must lie in (0, 1)")
        if self.batch_size != 1:
            raise ValueError("only batch_size=1 is supported")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")

    def to_dict(self):
        return asdict(self)


class AdamState:
    def __init__(self):
        self.m = {}
        self.v = {}
        self.t = 0


def adam_step(params, grads, state, t, config):
    """One in-place Adam update of every entry of ``params`` with a gradient.

    ``t`` is the 1-based step count used for bias correction.
    """
    if t < 1:
        raise ValueError("Adam step count starts at 1")
    lr, b1, b2, eps = config.learning_rate, config.beta1, config.beta2, config.eps
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for key, g in grads.items():
        p = params[key]
        m = state.m.get(key)
        if m is None:
            m = state.m[key] = np.zeros_like(p)
            state.v[key] = np.zeros_like(p)
        v = state.v[key]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        mhat = m / c1
        vhat = v / c2
        p -= (lr * mhat / (np.sqrt(vhat) + eps)).astype(p.dtype, copy=False)
    state.t = t
    return params


# ---------------------------------------------------------------- training


def split_blocks(n, val_fraction, seed):
    """Seeded permutation split into (train indices, validation indices)."""
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 404]))
    perm = rng.permutation(n)
    n_val = min(max(1, int(round(val_fraction * n))), n - 1)
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


def _block_loss(model, pair, training):
    x = pair.input[None].astype(model.dtype, copy=False)
    y = pair.target[None].astype(model.dtype, copy=False)
    if training:
        out, caches = model.forward(x, training=True, return_cache=True)
    else:
        out, caches = model.forward(x, training=False), None
    loss, grad = l1_loss_masked(out, y, pair.mask)
    return loss, grad, caches


def evaluate_loss(model, blocks):
    losses = []
    for pair in blocks:
        loss, _, _ = _block_loss(model, pair, training=False)
        if loss is not None:
            losses.append(loss)
    return float(np.mean(losses)) if losses else float("nan")


def train(model, blocks, config: TrainConfig | None = None, initial_weights=None, callback=None):
    """Train on ``blocks`` (TrainingPair-like objects) with masked L1 and Adam.

    Blocks are split once into training and validation sets. Each epoch is a
    shuffled pass over the training blocks with batch size one, followed by
    a validation pass in inference mode. The returned model is a snapshot
    from the epoch with the lowest validation loss.

    ``initial_weights`` (a model or state mapping) starts training from
    existing weights instead of the model's current ones. ``callback`` is
    called with each epoch record; a true return value ends training after
    that epoch.

    Returns ``(best_model, history)`` where ``history`` is a list of dicts
    with ``epoch``, ``train_loss``, ``val_loss`` and ``wall_seconds``.
    """
    config = config or TrainConfig()
    blocks = list(blocks)
    if len(blocks) < 2:
        raise ValueError("training needs at least two blocks")
    if initial_weights is not None:
        state = initial_weights.state_items() if isinstance(initial_weights, MUNet) else initial_weights
        model.load_state(dict(state))
    tr_idx, va_idx = split_blocks(len(blocks), config.val_fraction, config.seed)
    val_blocks = [blocks[i] for i in va_idx]
    adam = AdamState()
    history = []
    best, best_val = model.copy(), np.inf
    t0 = time.perf_counter()
    for epoch in range(1, config.epochs + 1):
        rng = np.random.default_rng(np.random.SeedSequence([int(config.seed), 505, epoch]))
        losses = []
        for bi in rng.permutation(tr_idx):
            loss, grad, caches = _block_loss(model, blocks[bi], training=True)
            if loss is None:
                warnings.warn(f"block {bi} has an empty mask; skipped", RuntimeWarning)
                continue
            if not np.isfinite(loss):
                raise DivergenceError(f"non-finite loss at epoch {epoch}, block {bi}")
            grads = model.backward(grad, caches)
            adam_step(model.params, grads, adam, adam.t + 1, config)
            losses.append(loss)
        val = evaluate_loss(model, val_blocks)
        if not np.isfinite(val):
            raise DivergenceError(f"non-finite validation loss at epoch {epoch}")
        rec = {
            "epoch": epoch,
            "train_loss": float(np.mean(losses)) if losses else float("nan"),
            "val_loss": val,
            "wall_seconds": time.perf_counter() - t0,
        }
        history.append(rec)
        log.info("epoch %d train %.5f val %.5f", epoch, rec["train_loss"], val)
        stop = bool(callback(rec)) if callback is not None else False
        if val < best_val:
            best_val, best = val, model.copy()
        if stop:
            break
    return best, history


def best_epoch(history):
    vals = [h["val_loss"] for h in history]
    return int(history[int(np.argmin(vals))]["epoch"])


def write_history_csv(history, path):
    with open(path, "w") as fh:
        fh.write("epoch,train_loss,val_loss,wall_seconds\n")
        for h in history:
            fh.write(f"{h['epoch']},{h['train_loss']:.9g},{h['val_loss']:.9g},{h['wall_seconds']:.3f}\n")


# ---------------------------------------------------------------- inference


def _tile_starts(n, tile, core):
    if tile >= n:
        return [0]
    starts = list(range(0, n - tile, core))
    starts.append(n - tile)
    return sorted(set(starts))


def predict(model, volume, tile=None, overlap=None):
    """Inference-mode forward on an ``(X, Y, Z, c)`` volume.

    With ``tile`` set, the volume is processed in overlapping cubes and
    only the central part of each cube (``overlap`` voxels trimmed from
    interior faces) is kept. With ``overlap`` at least the receptive radius
    the stitched result equals the whole-volume pass up to rounding.
    """
    vol = np.asarray(volume)
    if vol.ndim != 4 or vol.shape[-1] != model.c:
        raise ShapeError(f"expected (X, Y, Z, {model.c}) volume, got {vol.shape}")
    dims = vol.shape[:3]
    if tile is None or all(tile >= n for n in dims):
        return model.forward(vol[None], training=False)[0]
    overlap = model.receptive_radius if overlap is None else overlap
    core = tile - 2 * overlap
    if core < 1:
        raise ValueError("tile must exceed twice the overlap")
    out = np.zeros(vol.shape, dtype=model.dtype)
    starts = [_tile_starts(n, tile, core) for n in dims]
    for sx in starts[0]:
        for sy in starts[1]:
            for sz in starts[2]:
                lo = (sx, sy, sz)
                hi = tuple(min(s + tile, n) for s, n in zip(lo, dims))
                sub = vol[lo[0] : hi[0], lo[1] : hi[1], lo[2] : hi[2]]
                pred = model.forward(sub[None], training=False)[0]
                # keep the central region; faces on the volume boundary are kept whole
                keep_lo = [0 if s == 0 else overlap for s in lo]
                keep_hi = [h - l if h == n else h - l - overlap for l, h, n in zip(lo, hi, dims)]
                src = tuple(slice(a, b) for a, b in zip(keep_lo, keep_hi))
                dst = tuple(slice(l + a, l + b) for l, a, b in zip(lo, keep_lo, keep_hi))
                out[dst] = pred[src]
    return out


def denoise_volume(model, volume, mask, params, tile=None, overlap=None):
    """Denoise a standardized ``(X, Y, Z, c)`` volume and undo the standardization.

    Output is float64 and zero outside ``mask``.
    """
    m = np.asarray(mask, dtype=bool)[..., None]
    std = np.asarray(volume, dtype=np.float64) * m
    pred = predict(model, std.astype(model.dtype), tile=tile, overlap=overlap).astype(np.float64)
    return (pred * params.std + params.mean) * m
