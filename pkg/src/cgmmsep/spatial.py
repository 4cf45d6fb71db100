"""Array geometry, plane-wave steering templates, and complex Gaussian densities.

The template spatial covariance for grid direction d at bin f is
rank-one-plus-loading:

    template_scm = v v^H + eps * I,   |v_m| = 1,

so its inverse and log-determinant have closed forms (Sherman-Morrison,
eigenvalues {n_mics + eps, eps, ..., eps}) and are cached for the whole
(bin, direction) grid.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, NumericError
from .validation import check_finite, check_masks, check_spectrogram


@dataclass(frozen=True)
class ArrayGeometry:
    """Microphone positions in meters, (n_mics, 3), plus speed of sound."""

    mic_positions: np.ndarray
    speed_of_sound: float = 343.0

    def __post_init__(self):
        pos = np.atleast_2d(np.asarray(self.mic_positions, dtype=np.float64))
        if pos.ndim != 2 or pos.shape[1] != 3:
            raise DimensionError("mic_positions must be (n_mics, 3) meter triples")
        if not np.all(np.isfinite(pos)):
            raise NumericError("mic_positions contain non-finite values")
        if self.speed_of_sound <= 0:
            raise DimensionError("speed_of_sound must be positive")
        object.__setattr__(self, "mic_positions", pos)

    @property
    def n_mics(self):
        return self.mic_positions.shape[0]

    @classmethod
    def uniform_circular(cls, n_mics=4, diameter=0.08, speed_of_sound=343.0):
        """n_mics on a horizontal circle; azimuth 0 points along +x."""
        angles = 2.0 * np.pi * np.arange(n_mics) / n_mics
        radius = diameter / 2.0
        pos = np.stack(
            [radius * np.cos(angles), radius * np.sin(angles), np.zeros(n_mics)],
            axis=1,
        )
        return cls(pos, speed_of_sound)


@dataclass(frozen=True)
class DirectionGrid:
    """Uniformly spaced azimuth candidates on the horizontal plane."""

    start_deg: float = 0.0
    step_deg: float = 5.0
    count: int = 72

    def __post_init__(self):
        if self.count < 1 or self.step_deg <= 0:
            raise DimensionError("grid needs count >= 1 and positive step")
        last = self.start_deg + self.step_deg * (self.count - 1)
        if not (0.0 <= self.start_deg and last < 360.0):
            raise DimensionError("grid azimuths must stay inside [0, 360) degrees")

    @property
    def azimuths_deg(self):
        return self.start_deg + self.step_deg * np.arange(self.count)

    @property
    def n_directions(self):
        return self.count


@dataclass(frozen=True)
class Hyperparams:
    """Inverse-Wishart degrees of freedom and template diagonal loading."""

    dof: float
    diag_loading: float = 1e-2

    def __post_init__(self):
        if self.diag_loading <= 0:
            raise DimensionError("diag_loading must be positive")

    def validate(self, n_mics):
        if self.dof <= n_mics:
            raise DimensionError(
                f"inverse-Wishart dof must exceed n_mics ({self.dof} <= {n_mics})"
            )
        return self

    @classmethod
    def default_for(cls, n_mics, diag_loading=1e-2):
        return cls(dof=n_mics + 5.0, diag_loading=diag_loading)


def _unit_vectors(azimuths_deg):
    rad = np.deg2rad(np.asarray(azimuths_deg, dtype=np.float64))
    return np.stack([np.cos(rad), np.sin(rad), np.zeros_like(rad)], axis=-1)


def steering_vector(geom: ArrayGeometry, azimuth_deg, freq_hz):
    """Unit-modulus plane-wave steering vector for one direction and frequency.

    Element m is exp(-2j*pi*f*tau_m) with tau_m = -(r_m . u)/c, u the unit
    vector pointing toward the source.
    """
    if freq_hz < 0:
        raise DimensionError("frequency must be non-negative")
    u = _unit_vectors(azimuth_deg)
    tau = -(geom.mic_positions @ u) / geom.speed_of_sound
    return np.exp(-2j * np.pi * freq_hz * tau)


@dataclass
class SteeringTemplate:
    """Per-(bin, direction) steering vectors, template SCMs, and caches.

    Immutable after construction; meant to be shared read-only by the EM
    loop, the trainer, and the simulator.
    """

    vectors: np.ndarray  # (n_bins, n_directions, n_mics) complex
    scms: np.ndarray  # (n_bins, n_directions, n_mics, n_mics) complex
    inv_scms: np.ndarray  # cached inverses, same shape as scms
    logdets: np.ndarray  # (n_bins, n_directions) real
    diag_loading: float
    grid: DirectionGrid
    geometry: ArrayGeometry
    freqs_hz: np.ndarray = field(repr=False, default=None)

    @property
    def n_bins(self):
        return self.vectors.shape[0]

    @property
    def n_directions(self):
        return self.vectors.shape[1]

    @property
    def n_mics(self):
        return self.vectors.shape[2]


def bin_frequencies(n_bins, sample_rate):
    """Center frequency of each rFFT bin for window_len = 2*(n_bins-1)."""
    window_len = 2 * (n_bins - 1)
    return np.arange(n_bins) * sample_rate / window_len


def build_templates(
    geom: ArrayGeometry,
    grid: DirectionGrid,
    n_bins,
    sample_rate,
    diag_loading=1e-2,
) -> SteeringTemplate:
    """Precompute steering vectors and loaded template SCMs on the grid."""
    if diag_loading <= 0:
        raise DimensionError("diag_loading must be positive")
    n_mics = geom.n_mics
    freqs = bin_frequencies(n_bins, sample_rate)
    u = _unit_vectors(grid.azimuths_deg)  # (D, 3)
    tau = -(u @ geom.mic_positions.T) / geom.speed_of_sound  # (D, M)
    vectors = np.exp(-2j * np.pi * freqs[:, None, None] * tau[None, :, :])
    outer = vectors[..., :, None] * vectors[..., None, :].conj()
    eye = np.eye(n_mics)
    scms = outer + diag_loading * eye
    # Sherman-Morrison: (vv^H + eps I)^-1 = (I - vv^H / (n_mics + eps)) / eps
    inv_scms = (eye - outer / (n_mics + diag_loading)) / diag_loading
    # eigenvalues are {n_mics + eps, eps, ...}: log-determinant is constant
    logdet = math.log(n_mics + diag_loading) + (n_mics - 1) * math.log(diag_loading)
    logdets = np.full((n_bins, grid.n_directions), logdet)
    return SteeringTemplate(
        vectors=vectors,
        scms=scms,
        inv_scms=inv_scms,
        logdets=logdets,
        diag_loading=diag_loading,
        grid=grid,
        geometry=geom,
        freqs_hz=freqs,
    )


def log_cgauss(x, inv_cov, logdet):
    """Zero-mean circular complex Gaussian log density of one observation.

    Returns -n_mics*log(pi) - logdet - x^H inv_cov x; the quadratic form of
    a Hermitian matrix is real, so any rounding-level imaginary part is
    discarded.
    """
    x = np.asarray(x, dtype=np.complex128)
    if not np.all(np.isfinite(x)):
        raise NumericError("observation contains non-finite values")
    quad = x.conj() @ inv_cov @ x
    if abs(quad.imag) > 1e-12 * max(1.0, abs(quad.real)):
        raise NumericError("quadratic form is not numerically real")
    return float(-x.size * np.log(np.pi) - logdet - quad.real)


def quadratic_forms(inv_covs, x):
    """x^H inv_cov x for every (frame, bin, direction).

    inv_covs: (n_bins, n_directions, n_mics, n_mics) Hermitian
    x: (n_frames, n_bins, n_mics) complex
    returns: (n_frames, n_bins, n_directions) float64

    Contracted as batched real GEMMs over the flattened mic-pair axis; this
    is the hot path shared by the EM loop and the trainer.
    """
    n_frames, n_bins, n_mics = x.shape
    pairs = x[:, :, :, None].conj() * x[:, :, None, :]  # conj(x_m) x_n
    pf = pairs.reshape(n_frames, n_bins, n_mics * n_mics).transpose(1, 0, 2)
    hf = inv_covs.reshape(n_bins, -1, n_mics * n_mics).transpose(0, 2, 1)
    # both factors Hermitian-symmetric in (m, n): the product is real
    out = np.matmul(pf.real, hf.real) - np.matmul(pf.imag, hf.imag)
    return out.transpose(1, 0, 2)


def template_log_likelihoods(x, tpl: SteeringTemplate):
    """log N_c(x_tf; 0, template_scm_fd) for every (frame, bin, direction)."""
    x = check_spectrogram(x, n_channels=tpl.n_mics)
    qf = quadratic_forms(tpl.inv_scms, x)
    return -(tpl.n_mics * np.log(np.pi) + tpl.logdets[None, :, :] + qf)


def spatial_features(x, masks, tpl: SteeringTemplate):
    """Mask-weighted template log-likelihood per (source, direction).

    feature[k, d] = sum_{t,f} masks[t,f,k] * log N_c(x_tf; 0, template_fd);
    the input feature of the localization network.  Masks are only
    shape-checked here so partially assigned (even all-zero) weights are
    usable.
    """
    x = check_spectrogram(x, n_channels=tpl.n_mics)
    z = np.asarray(masks, dtype=np.float64)
    if z.ndim != 3 or z.shape[:2] != x.shape[:2]:
        raise DimensionError(
            f"mask shape {z.shape} does not match spectrogram {x.shape[:2]}"
        )
    check_finite(z, "masks")
    ll = template_log_likelihoods(x, tpl)
    n_tf = x.shape[0] * x.shape[1]
    return z.reshape(n_tf, -1).T @ ll.reshape(n_tf, tpl.n_directions)
