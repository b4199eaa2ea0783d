"""Estimator-style wrappers so the fitters compose with sklearn tooling.

These are thin adapters: hyperparameters live as constructor attributes (so
get_params/set_params/clone work), fit() runs the underlying optimization,
and fitted state lands in trailing-underscore attributes.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator

from .image_io import psnr
from .losses import LossConfig
from .ratecodec import RdConfig, fit_rd
from .splat_render import render
from .trainer import TrainConfig, fit
from .validation import as_image_array
from .elo import elo_fit


class SplatImageFitter(BaseEstimator):
    """Fit a 2D Gaussian splat model to one image.

    Parameters mirror LossConfig/TrainConfig; predict() renders at the
    fitted size, score() returns PSNR against a reference image.
    """

    def __init__(self, loss="original", gamma=0.025, beta=1.0 / 0.09,
                 sigma=4.0, iterations=2000, seed_count=64,
                 warmup_fraction=0.15, densify_interval=100,
                 densify_grad_threshold=2e-4, max_splats=4000,
                 background=(0.0, 0.0, 0.0), random_state=0):
        self.loss = loss
        self.gamma = gamma
        self.beta = beta
        self.sigma = sigma
        self.iterations = iterations
        self.seed_count = seed_count
        self.warmup_fraction = warmup_fraction
        self.densify_interval = densify_interval
        self.densify_grad_threshold = densify_grad_threshold
        self.max_splats = max_splats
        self.background = background
        self.random_state = random_state

    def _configs(self):
        loss_cfg = LossConfig(kind=self.loss, gamma=self.gamma,
                              beta=self.beta, sigma=self.sigma)
        train_cfg = TrainConfig(
            iterations=self.iterations,
            warmup_fraction=self.warmup_fraction,
            densify_interval=self.densify_interval,
            densify_grad_threshold=self.densify_grad_threshold,
            max_splats=self.max_splats,
            background=tuple(self.background),
        )
        return loss_cfg, train_cfg

    def fit(self, X, y=None):
        arr = as_image_array(X)
        loss_cfg, train_cfg = self._configs()
        self.splats_, self.report_ = fit(arr, self.seed_count, loss_cfg,
                                         train_cfg, self.random_state)
        self.image_shape_ = arr.shape
        return self

    def predict(self, X=None):
        h, w = self.image_shape_[:2]
        return render(self.splats_, w, h, tuple(self.background)).image.data

    transform = predict

    def score(self, X, y=None):
        return psnr(as_image_array(X), self.predict())


class RateDistortionFitter(BaseEstimator):
    """Joint splat + entropy-model optimization at one rate weight."""

    def __init__(self, loss="wd_r", gamma=0.025, lam=3.0**-3, iterations=2000,
                 seed_count=64, random_state=0):
        self.loss = loss
        self.gamma = gamma
        self.lam = lam
        self.iterations = iterations
        self.seed_count = seed_count
        self.random_state = random_state

    def fit(self, X, y=None):
        arr = as_image_array(X)
        rd = RdConfig(lam=self.lam,
                      train=TrainConfig(iterations=self.iterations))
        loss_cfg = LossConfig(kind=self.loss, gamma=self.gamma)
        self.splats_, self.rate_model_, self.report_ = fit_rd(
            arr, loss_cfg, rd, self.random_state, init=self.seed_count)
        self.image_shape_ = arr.shape
        return self

    def predict(self, X=None):
        h, w = self.image_shape_[:2]
        return render(self.splats_, w, h).image.data

    transform = predict


class BradleyTerryRating(BaseEstimator):
    """Rating-table estimator over VoteRecord sequences."""

    def __init__(self, prior_scale=2.0):
        self.prior_scale = prior_scale

    def fit(self, X, y=None):
        self.table_ = elo_fit(list(X), self.prior_scale)
        return self

    def predict(self, X):
        """Win probability of method_a over method_b per (a, b) pair."""
        t = self.table_
        out = []
        for a, b in X:
            d = (t.elo_of(a) - t.elo_of(b)) / (400.0 / np.log(10.0))
            out.append(1.0 / (1.0 + np.exp(-d)))
        return np.asarray(out)
