"""Scikit-learn style wrappers around the EM separator and the trainer.

Both estimators follow the BaseEstimator conventions (constructor stores
hyperparameters untouched, fitted state carries a trailing underscore) so
they compose with pipelines, cloning, and grid search.
"""

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from . import avi, em
from .errors import DimensionError
from .spatial import ArrayGeometry, DirectionGrid, build_templates
from .validation import check_spectrogram


def _default_geometry(geometry):
    return geometry if geometry is not None else ArrayGeometry.uniform_circular()


class CgmmSeparator(BaseEstimator):
    """EM separation of a multichannel complex spectrogram.

    This is a transductive estimator in the spirit of the clustering API:
    fit(X) estimates masks and direction posteriors for the given mixture,
    fit_predict(X) returns the masks, and transform(X) applies the fitted
    masks to the reference channel.

    Parameters mirror the EM configuration; X is a complex array of shape
    (frames, bins, channels).
    """

    def __init__(
        self,
        n_sources=2,
        n_iters=50,
        directional_classes=None,
        grid_size=72,
        diag_loading=1e-2,
        dof=None,
        sample_rate=8000,
        geometry=None,
        init="directional",
        power_floor=1e-8,
        posterior_floor=1e-12,
        convergence_tol=None,
        prior_scale_numerator="template",
        reference_channel=0,
    ):
        self.n_sources = n_sources
        self.n_iters = n_iters
        self.directional_classes = directional_classes
        self.grid_size = grid_size
        self.diag_loading = diag_loading
        self.dof = dof
        self.sample_rate = sample_rate
        self.geometry = geometry
        self.init = init
        self.power_floor = power_floor
        self.posterior_floor = posterior_floor
        self.convergence_tol = convergence_tol
        self.prior_scale_numerator = prior_scale_numerator
        self.reference_channel = reference_channel

    def fit(self, X, y=None):
        geom = _default_geometry(self.geometry)
        X = check_spectrogram(X, n_channels=geom.n_mics)
        grid = DirectionGrid(0.0, 360.0 / self.grid_size, self.grid_size)
        tpl = build_templates(
            geom, grid, X.shape[1], self.sample_rate, self.diag_loading
        )
        cfg = em.EmConfig(
            n_iters=self.n_iters,
            power_floor=self.power_floor,
            posterior_floor=self.posterior_floor,
            convergence_tol=self.convergence_tol,
        )
        if isinstance(self.init, str):
            n_classes = self.directional_classes or self.n_sources
            init = self.init
        else:
            init = np.asarray(self.init)
            n_classes = init.shape[2]
        result = em.run_em(
            X,
            tpl,
            cfg,
            init=init,
            n_classes=n_classes,
            dof=self.dof,
            prior_scale_numerator=self.prior_scale_numerator,
        )
        masks, kept = em.select_top_sources(
            result.masks, X, self.n_sources, self.reference_channel
        )
        self.template_ = tpl
        self.result_ = result
        self.masks_ = masks
        self.selected_classes_ = kept
        self.doa_posterior_ = result.doa_posterior[kept]
        self.elbo_trace_ = result.elbo_trace
        self.params_ = result.params
        self.n_bins_ = X.shape[1]
        return self

    def _check_fitted(self):
        if not hasattr(self, "masks_"):
            raise NotFittedError("call fit before using this estimator")

    def fit_predict(self, X, y=None):
        return self.fit(X).masks_

    def predict(self, X):
        self._check_fitted()
        return self.masks_

    def transform(self, X):
        """Apply the fitted masks to the reference channel of X."""
        self._check_fitted()
        X = check_spectrogram(X)
        if X.shape[:2] != self.masks_.shape[:2]:
            raise DimensionError(
                f"X frame/bin shape {X.shape[:2]} does not match the fitted "
                f"masks {self.masks_.shape[:2]}"
            )
        ref = X[:, :, self.reference_channel]
        return np.transpose(self.masks_, (2, 0, 1)) * ref[None, :, :]

    def fit_transform(self, X, y=None):
        return self.fit(X).transform(X)

    @property
    def doa_degrees_(self):
        self._check_fitted()
        azimuths = self.template_.grid.azimuths_deg
        return azimuths[np.argmax(self.doa_posterior_, axis=1)]


class AviMaskEstimator(BaseEstimator):
    """Amortized mask estimator trained on a corpus of mixtures.

    fit(X) takes a list of multichannel complex spectrogram arrays and
    trains the reference mask network and localizer by maximizing the
    fixed-parameter ELBO; predict(X) evaluates the trained network on the
    reference channel's log magnitude (no EM involved).
    """

    def __init__(
        self,
        n_sources=2,
        hidden=128,
        context=2,
        lr=1e-3,
        batch_size=8,
        epochs=20,
        seed=0,
        omega_stop_gradient=False,
        grid_size=72,
        diag_loading=1e-2,
        sample_rate=8000,
        geometry=None,
    ):
        self.n_sources = n_sources
        self.hidden = hidden
        self.context = context
        self.lr = lr
        self.batch_size = batch_size
        self.epochs = epochs
        self.seed = seed
        self.omega_stop_gradient = omega_stop_gradient
        self.grid_size = grid_size
        self.diag_loading = diag_loading
        self.sample_rate = sample_rate
        self.geometry = geometry

    def fit(self, X, y=None):
        if not isinstance(X, (list, tuple)) or not X:
            raise DimensionError("fit expects a non-empty list of spectrogram arrays")
        geom = _default_geometry(self.geometry)
        mixtures = [check_spectrogram(x, n_channels=geom.n_mics) for x in X]
        n_bins = mixtures[0].shape[1]
        if any(m.shape[1] != n_bins for m in mixtures):
            raise DimensionError("all training mixtures must share the bin count")
        grid = DirectionGrid(0.0, 360.0 / self.grid_size, self.grid_size)
        tpl = build_templates(geom, grid, n_bins, self.sample_rate, self.diag_loading)
        g = avi.ReferenceMaskNet(
            n_bins, self.n_sources, context=self.context, hidden=self.hidden,
            seed=self.seed,
        )
        h = avi.SoftmaxLocalizer(grid.n_directions)
        ctx = avi.TrainingContext(
            tpl=tpl,
            optimizer=avi.Adam(g.n_parameters + h.n_parameters, lr=self.lr),
            omega_stop_gradient=self.omega_stop_gradient,
        )
        history = avi.fit_mask_network(
            mixtures, g, h, ctx,
            epochs=self.epochs, batch_size=self.batch_size, seed=self.seed,
        )
        self.mask_net_ = g
        self.localizer_ = h
        self.template_ = tpl
        self.history_ = np.asarray(history)
        self.n_bins_ = n_bins
        return self

    def predict(self, X):
        if not hasattr(self, "mask_net_"):
            raise NotFittedError("call fit before predict")
        X = np.asarray(X)
        feats = avi.log_magnitude_features(X)
        if feats.shape[1] != self.n_bins_:
            raise DimensionError(
                f"X has {feats.shape[1]} bins, the network expects {self.n_bins_}"
            )
        return self.mask_net_.forward(feats)
