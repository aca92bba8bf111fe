"""Scikit-learn style front end for self-supervised DTI denoising."""

from __future__ import annotations

import logging

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .denoiser import MUNet, TrainConfig, best_epoch, build_model, denoise_volume, train
from .exceptions import ShapeError
from .selfsup import (
    augment_flip,
    average_denoised,
    build_selfsup_pairs,
    extract_blocks,
    standardize_pair,
)
from .volume_io import GradientScheme, Volume4D

log = logging.getLogger(__name__)


def _check_volume(X, scheme):
    if isinstance(X, Volume4D):
        X = X.data
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 4:
        raise ShapeError(f"expected a 4D (X, Y, Z, volumes) array, got {X.ndim}D")
    if not np.all(np.isfinite(X)):
        raise ValueError("input contains non-finite values")
    if not isinstance(scheme, GradientScheme):
        raise TypeError("scheme must be a GradientScheme")
    if scheme.n_volumes != X.shape[3]:
        raise ShapeError(f"scheme has {scheme.n_volumes} volumes, data has {X.shape[3]}")
    return X


class SDnDTIDenoiser(TransformerMixin, BaseEstimator):
    """Denoise a single-shell DTI acquisition without external training data.

    ``fit`` builds one training pair per direction subset of ``plan``
    (subset-fit synthesis as input, all-data synthesis as target), trains a
    residual network on random blocks of the standardized pairs and keeps
    the weights with the lowest validation loss. ``transform`` denoises
    every subset input with the trained network and averages the results.

    The output has one b0 channel followed by one channel per acquired
    diffusion-weighted volume.

    Parameters
    ----------
    k : int
        Feature channels per hidden layer.
    d : int
        Convolution kernel extent.
    block_size : int or tuple of int
        Training block shape; clipped to the volume when larger.
    n_blocks : int
        Blocks drawn from each training pair.
    min_coverage : float
        Minimum brain fraction of a block before relaxing.
    flip : bool
        Append left-right mirrored copies of all blocks.
    learning_rate, epochs, val_fraction : see :class:`~sdndti.denoiser.TrainConfig`.
    random_state : int
        Seed for weights, block sampling and the train/validation split.
    tile, overlap : int or None
        Tiled inference settings; ``None`` runs whole volumes.

    Attributes
    ----------
    model_ : MUNet
        Weights from the epoch with the lowest validation loss.
    history_ : list of dict
        Per-epoch ``train_loss``, ``val_loss`` and ``wall_seconds``.
    best_epoch_ : int
    n_channels_ : int
    """

    def __init__(
        self,
        k=192,
        d=3,
        block_size=64,
        n_blocks=8,
        min_coverage=0.25,
        flip=True,
        learning_rate=1e-4,
        epochs=40,
        val_fraction=0.2,
        random_state=0,
        tile=None,
        overlap=None,
    ):
        self.k = k
        self.d = d
        self.block_size = block_size
        self.n_blocks = n_blocks
        self.min_coverage = min_coverage
        self.flip = flip
        self.learning_rate = learning_rate
        self.epochs = epochs
        self.val_fraction = val_fraction
        self.random_state = random_state
        self.tile = tile
        self.overlap = overlap

    def _train_config(self):
        return TrainConfig(
            learning_rate=self.learning_rate,
            epochs=self.epochs,
            val_fraction=self.val_fraction,
            seed=self.random_state,
        )

    def make_blocks(self, pairs):
        """Standardize each pair and draw (optionally flipped) training blocks."""
        blocks = []
        for pair in pairs:
            sp, _ = standardize_pair(pair)
            dims = sp.mask.shape
            size = tuple(min(int(b), n) for b, n in zip(np.broadcast_to(self.block_size, (3,)), dims))
            blocks += extract_blocks(sp, size, self.n_blocks, self.random_state, self.min_coverage)
        return augment_flip(blocks) if self.flip else blocks

    def fit(self, X, y=None, *, scheme, plan, mask, init_model=None, callback=None):
        """Train on one acquisition.

        Parameters
        ----------
        X : Volume4D or ndarray, shape (X, Y, Z, volumes)
        y : ignored
        scheme : GradientScheme
        plan : SubsetPlan
        mask : BrainMask or bool ndarray
        init_model : MUNet, optional
            Start from these weights (fine-tuning) instead of a fresh model.
        """
        X = _check_volume(X, scheme)
        pairs = build_selfsup_pairs(X, scheme, plan, mask)
        return self.fit_pairs(pairs, init_model=init_model, callback=callback)

    def fit_pairs(self, pairs, init_model=None, callback=None):
        """Train on prebuilt full-volume :class:`~sdndti.selfsup.TrainingPair` objects."""
        pairs = list(pairs)
        if not pairs:
            raise ValueError("no training pairs")
        c = pairs[0].n_channels
        if init_model is not None and not isinstance(init_model, MUNet):
            raise TypeError("init_model must be an MUNet")
        if init_model is not None and init_model.c != c:
            raise ShapeError(f"init_model expects {init_model.c} channels, data has {c}")
        blocks = self.make_blocks(pairs)
        if init_model is not None:
            model = init_model.copy()
        else:
            model = build_model(c, self.k, self.d, seed=self.random_state)
        log.info("training on %d blocks of shape %s", len(blocks), blocks[0].mask.shape)
        self.model_, self.history_ = train(model, blocks, self._train_config(), callback=callback)
        self.best_epoch_ = best_epoch(self.history_)
        self.n_channels_ = c
        return self

    def denoise_pairs(self, pairs):
        """Network output for every pair input, in signal units (one array per pair)."""
        check_is_fitted(self, "model_")
        outs = []
        for pair in pairs:
            if pair.n_channels != self.n_channels_:
                raise ShapeError(f"model expects {self.n_channels_} channels, pair has {pair.n_channels}")
            sp, params = standardize_pair(pair)
            outs.append(denoise_volume(self.model_, sp.input, sp.mask, params, self.tile, self.overlap))
        return outs

    def transform(self, X, *, scheme, plan, mask):
        """Denoise every subset of ``X`` and return their voxelwise average."""
        check_is_fitted(self, "model_")
        X = _check_volume(X, scheme)
        pairs = build_selfsup_pairs(X, scheme, plan, mask)
        return average_denoised(self.denoise_pairs(pairs))

    def fit_transform(self, X, y=None, *, scheme, plan, mask, init_model=None):
        X = _check_volume(X, scheme)
        pairs = build_selfsup_pairs(X, scheme, plan, mask)
        self.fit_pairs(pairs, init_model=init_model)
        return average_denoised(self.denoise_pairs(pairs))
