"""Variational EM for the complex Gaussian mixture spatial model.

Latent structure: every TF bin carries a categorical source assignment
(posterior ``masks``, shape (frames, bins, sources)) and every source
carries a categorical direction assignment (posterior ``doa``, shape
(sources, directions)).  The model parameters are per-direction SCMs,
per-bin source powers, a frame-wise activation prior, and a direction
prior.

All posterior computations run in the log domain with a max-shift before
exponentiation: the direction update multiplies one likelihood per TF bin,
which underflows immediately as a naive product.
"""

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.special import xlogy

from .errors import ConfigError, DimensionError, NumericError
from .spatial import Hyperparams, SteeringTemplate, quadratic_forms
from .validation import check_doa_posterior, check_masks, check_spectrogram

logger = logging.getLogger(__name__)

LOG_PI = float(np.log(np.pi))


@dataclass
class EmConfig:
    """Iteration count, numeric floors, and the optional early stop.

    power_floor is relative to the mean mixture power; posterior_floor is
    applied to posterior weights before normalization.  convergence_tol,
    when set, stops early once the relative ELBO change drops below it
    (the default runs the fixed iteration count).
    """

    n_iters: int = 50
    power_floor: float = 1e-8
    posterior_floor: float = 1e-12
    convergence_tol: float = None

    def __post_init__(self):
        if self.n_iters < 1:
            raise ConfigError("n_iters must be at least 1")
        if self.power_floor <= 0 or self.posterior_floor <= 0:
            raise ConfigError("floors must be positive")


@dataclass
class ModelParams:
    """Point-estimated model parameters plus cached SCM inverses."""

    scms: np.ndarray  # (bins, directions, mics, mics) Hermitian PD
    power: np.ndarray  # (frames, bins, sources) > 0
    frame_prior: np.ndarray  # (frames, sources), rows sum to 1
    direction_prior: np.ndarray  # (directions,), sums to 1
    hyper: Hyperparams
    inv_scms: np.ndarray = field(default=None, repr=False)
    logdets: np.ndarray = field(default=None, repr=False)

    @classmethod
    def create(cls, scms, power, frame_prior, direction_prior, hyper):
        scms = np.asarray(scms, dtype=np.complex128)
        inv_scms, logdets = scm_cache(scms)
        power = np.asarray(power, dtype=np.float64)
        if np.any(power <= 0):
            raise NumericError("source powers must be strictly positive")
        return cls(
            scms=scms,
            power=power,
            frame_prior=np.asarray(frame_prior, dtype=np.float64),
            direction_prior=np.asarray(direction_prior, dtype=np.float64),
            hyper=hyper,
            inv_scms=inv_scms,
            logdets=logdets,
        )

    @property
    def n_sources(self):
        return self.power.shape[2]

    @property
    def n_directions(self):
        return self.scms.shape[1]


@dataclass
class EmResult:
    masks: np.ndarray
    doa_posterior: np.ndarray
    params: ModelParams
    elbo_trace: np.ndarray
    diagnostics: dict
    template: SteeringTemplate

    @property
    def doa_degrees(self):
        """Grid azimuth of the posterior mode, per source."""
        azimuths = self.template.grid.azimuths_deg
        return azimuths[np.argmax(self.doa_posterior, axis=1)]


def scm_cache(scms):
    """Batched inverse and log-determinant of Hermitian PD matrices.

    Cholesky doubles as the positive-definiteness check.
    """
    try:
        chol = np.linalg.cholesky(scms)
    except np.linalg.LinAlgError as exc:
        raise NumericError(f"SCM is not positive definite: {exc}") from exc
    diag = np.diagonal(chol, axis1=-2, axis2=-1).real
    logdets = 2.0 * np.log(diag).sum(axis=-1)
    inv = np.linalg.inv(scms)
    inv = 0.5 * (inv + inv.conj().swapaxes(-1, -2))
    return inv, logdets


def _packed_pairs(x):
    """conj(x_m) x_n pair products packed for batched real GEMMs.

    Returns (real, imag), each (bins, frames, mics*mics).
    """
    n_frames, n_bins, n_mics = x.shape
    pairs = x[:, :, :, None].conj() * x[:, :, None, :]
    pf = pairs.reshape(n_frames, n_bins, n_mics * n_mics).transpose(1, 0, 2)
    return np.ascontiguousarray(pf.real), np.ascontiguousarray(pf.imag)


def _quadratic_forms_packed(pf_real, pf_imag, inv_covs):
    n_bins, n_frames, n_pair = pf_real.shape
    hf = inv_covs.reshape(n_bins, -1, n_pair).transpose(0, 2, 1)
    out = np.matmul(pf_real, np.ascontiguousarray(hf.real))
    out -= np.matmul(pf_imag, np.ascontiguousarray(hf.imag))
    return out.transpose(1, 0, 2)


def _posteriors_from_log(logw, axis, floor):
    """Normalize log-weights into a floored categorical posterior.

    Rows whose weights are all non-finite are flagged (count returned) and
    left uniform; the caller decides the fallback.
    """
    mx = np.max(logw, axis=axis, keepdims=True)
    bad = ~np.isfinite(mx)
    w = np.exp(logw - np.where(bad, 0.0, mx))
    w = np.where(np.isfinite(w), w, 0.0)
    w = np.maximum(w, floor)
    w /= w.sum(axis=axis, keepdims=True)
    return w, bad[..., 0] if axis == logw.ndim - 1 else bad


def _mask_update(qf, logdets, power, frame_prior, doa, floor, n_mics):
    """Source posterior per TF bin given the direction posterior.

    log weight[t,f,k] = log frame_prior[t,k] - n_mics*log power[t,f,k]
                        - sum_d doa[k,d]*logdet[f,d]
                        - (sum_d doa[k,d]*qf[t,f,d]) / power[t,f,k]
    (terms constant in k are dropped; they cancel in the normalization).
    """
    n_frames, n_bins, n_dirs = qf.shape
    n_src = doa.shape[0]
    mix_q = (qf.reshape(-1, n_dirs) @ doa.T).reshape(n_frames, n_bins, n_src)
    mix_logdet = logdets @ doa.T  # (bins, sources)
    with np.errstate(divide="ignore"):
        logw = (
            np.log(frame_prior)[:, None, :]
            - n_mics * np.log(power)
            - mix_logdet[None, :, :]
            - mix_q / power
        )
    masks, bad = _posteriors_from_log(logw, axis=2, floor=floor)
    n_bad = int(bad.sum())
    if n_bad:
        # degenerate bins carry no likelihood information: fall back to the prior
        prior = frame_prior / frame_prior.sum(axis=1, keepdims=True)
        tt, ff = np.nonzero(bad)
        masks[tt, ff, :] = prior[tt, :]
    return masks, n_bad


def _doa_update(qf, logdets, power, masks, dir_prior, floor):
    """Direction posterior per source given the TF masks.

    log weight[k,d] = log dir_prior[d]
                      - sum_f (sum_t masks[t,f,k]) * logdet[f,d]
                      - sum_{t,f} (masks[t,f,k]/power[t,f,k]) * qf[t,f,d]
    (d-constant terms dropped).  Sums run over every TF bin, hence the
    log-domain treatment.
    """
    n_frames, n_bins, n_dirs = qf.shape
    n_src = masks.shape[2]
    n_tf = n_frames * n_bins
    ratio = (masks / power).reshape(n_tf, n_src)
    quad_kd = ratio.T @ qf.reshape(n_tf, n_dirs)
    mass_fk = masks.sum(axis=0)  # (bins, sources)
    logdet_kd = mass_fk.T @ logdets
    with np.errstate(divide="ignore"):
        logw = np.log(dir_prior)[None, :] - logdet_kd - quad_kd
    doa, _ = _posteriors_from_log(logw, axis=1, floor=floor)
    return doa


def _power_update(qf, doa, floor, n_mics):
    """Per-bin source power: (1/n_mics) * sum_d doa[k,d] * qf[t,f,d], floored."""
    n_frames, n_bins, n_dirs = qf.shape
    lam = (qf.reshape(-1, n_dirs) @ doa.T).reshape(n_frames, n_bins, -1) / n_mics
    return np.maximum(lam, floor)


def _scm_update(pf_real, pf_imag, masks, doa, power, tpl, dof, prior_scale):
    """MAP update of the per-direction SCMs.

    scm[f,d] <- (prior[f,d] + sum_{t,k} masks*doa*(1/power) x x^H)
                / (dof + sum_{t,k} masks*doa + n_mics)

    prior is the template SCM, optionally scaled by (dof - n_mics) when
    prior_scale == "scaled_template".  The result is hermitized to kill
    rounding drift.
    """
    n_frames, n_bins, n_src = masks.shape
    n_mics = tpl.n_mics
    n_tf = n_frames * n_bins
    ratio = (masks / power).reshape(n_tf, n_src)
    u = (ratio @ doa).reshape(n_frames, n_bins, -1)
    uf = np.ascontiguousarray(u.transpose(1, 2, 0))  # (bins, dirs, frames)
    num = np.matmul(uf, pf_real) - 1j * np.matmul(uf, pf_imag)
    num = num.reshape(n_bins, tpl.n_directions, n_mics, n_mics)
    wgt = (masks.reshape(n_tf, n_src) @ doa).reshape(n_frames, n_bins, -1).sum(axis=0)
    prior = tpl.scms if prior_scale == "template" else (dof - n_mics) * tpl.scms
    scms = (prior + num) / (dof + n_mics + wgt)[:, :, None, None]
    return 0.5 * (scms + scms.conj().swapaxes(-1, -2))


def _scm_log_prior(inv_scms, logdets, tpl, dof, prior_scale):
    """Unnormalized inverse-Wishart log density of the direction SCMs.

    Per (bin, direction): -(dof + n_mics) * log|scm| - tr(scale * scm^-1),
    with scale the template SCM (optionally multiplied by dof - n_mics).
    The MAP SCM update maximizes the ELBO plus exactly this term.
    """
    scale = tpl.scms if prior_scale == "template" else (dof - tpl.n_mics) * tpl.scms
    trace = np.einsum("fdmn,fdnm->fd", scale, inv_scms).real
    return float(np.sum(-(dof + tpl.n_mics) * logdets - trace))


def _elbo_value(qf, logdets, power, frame_prior, dir_prior, masks, doa, n_mics):
    """ELBO = E_q[log likelihood] - KL(masks||frame prior) - KL(doa||dir prior)."""
    n_frames, n_bins, n_dirs = qf.shape
    n_src = masks.shape[2]
    n_tf = n_frames * n_bins
    ratio = (masks / power).reshape(n_tf, n_src)
    quad = float(np.sum((ratio.T @ qf.reshape(n_tf, n_dirs)) * doa))
    mass_fk = masks.sum(axis=0)
    logdet_term = float(np.sum((mass_fk.T @ logdets) * doa))
    loglik = (
        -n_tf * n_mics * LOG_PI
        - n_mics * float(np.sum(masks * np.log(power)))
        - logdet_term
        - quad
    )
    kl_masks = float(
        np.sum(xlogy(masks, masks) - xlogy(masks, frame_prior[:, None, :]))
    )
    kl_doa = float(np.sum(xlogy(doa, doa) - xlogy(doa, dir_prior[None, :])))
    pieces = {"loglik": loglik, "kl_masks": kl_masks, "kl_doa": kl_doa}
    for name, value in pieces.items():
        if not np.isfinite(value):
            raise NumericError(f"ELBO term {name} is non-finite")
    return loglik - kl_masks - kl_doa


# ---------------------------------------------------------------------------
# Public operations


def e_step_masks(x, params: ModelParams, doa_posterior, posterior_floor=1e-12):
    """Update the TF-mask posterior given the direction posterior."""
    x = check_spectrogram(x)
    doa = check_doa_posterior(doa_posterior, n_directions=params.n_directions)
    qf = quadratic_forms(params.inv_scms, x)
    masks, n_bad = _mask_update(
        qf,
        params.logdets,
        params.power,
        params.frame_prior,
        doa,
        posterior_floor,
        x.shape[2],
    )
    if n_bad:
        logger.warning("mask update fell back to the prior on %d bins", n_bad)
    return masks


def e_step_doa(x, params: ModelParams, masks, posterior_floor=1e-12):
    """Update the direction posterior given the TF masks."""
    x = check_spectrogram(x)
    z = check_masks(masks, shape_tf=x.shape[:2])
    qf = quadratic_forms(params.inv_scms, x)
    return _doa_update(
        qf, params.logdets, params.power, z, params.direction_prior, posterior_floor
    )


def m_step_scm(x, masks, doa_posterior, power, tpl: SteeringTemplate, dof=None,
               prior_scale_numerator="template"):
    """MAP update of the direction SCMs (see _scm_update for the formula)."""
    x = check_spectrogram(x, n_channels=tpl.n_mics)
    z = check_masks(masks, shape_tf=x.shape[:2])
    doa = check_doa_posterior(doa_posterior, n_directions=tpl.n_directions)
    if prior_scale_numerator not in ("template", "scaled_template"):
        raise ConfigError(
            f"unknown prior_scale_numerator {prior_scale_numerator!r}"
        )
    dof = float(dof) if dof is not None else tpl.n_mics + 5.0
    pf_real, pf_imag = _packed_pairs(x)
    return _scm_update(
        pf_real, pf_imag, z, doa, np.asarray(power, dtype=np.float64), tpl, dof,
        prior_scale_numerator,
    )


def m_step_psd(x, doa_posterior, scms, power_floor=None):
    """Maximum-likelihood update of the per-bin source powers."""
    x = check_spectrogram(x)
    doa = check_doa_posterior(doa_posterior, n_directions=scms.shape[1])
    inv_scms, _ = scm_cache(scms)
    qf = quadratic_forms(inv_scms, x)
    if power_floor is None:
        power_floor = 1e-8 * float(np.mean(np.abs(x) ** 2))
    return _power_update(qf, doa, power_floor, x.shape[2])


def m_step_priors(masks, doa_posterior):
    """Frame-activation prior (mean over bins) and direction prior (mean over sources)."""
    z = np.asarray(masks, dtype=np.float64)
    doa = np.asarray(doa_posterior, dtype=np.float64)
    return z.mean(axis=1), doa.mean(axis=0)


def elbo(x, params: ModelParams, masks, doa_posterior):
    """Evidence lower bound of the current posteriors and parameters."""
    x = check_spectrogram(x)
    z = check_masks(masks, shape_tf=x.shape[:2])
    doa = check_doa_posterior(doa_posterior, n_directions=params.n_directions)
    qf = quadratic_forms(params.inv_scms, x)
    return _elbo_value(
        qf,
        params.logdets,
        params.power,
        params.frame_prior,
        params.direction_prior,
        z,
        doa,
        x.shape[2],
    )


def init_directional(x, tpl: SteeringTemplate, n_classes, posterior_floor=1e-12):
    """Conventional initialization: split the grid into contiguous blocks.

    Each class gets a uniform direction posterior over its block (the last
    block absorbs any remainder) and the initial masks score each TF bin by
    the block-averaged template quadratic form.
    """
    x = check_spectrogram(x, n_channels=tpl.n_mics)
    n_dirs = tpl.n_directions
    if n_classes < 1 or n_classes > n_dirs:
        raise ConfigError(
            f"need 1 <= classes <= grid size, got {n_classes} classes "
            f"for {n_dirs} directions"
        )
    block = n_dirs // n_classes
    doa = np.zeros((n_classes, n_dirs))
    for k in range(n_classes):
        start = k * block
        end = (k + 1) * block if k < n_classes - 1 else n_dirs
        doa[k, start:end] = 1.0 / (end - start)
    qf = quadratic_forms(tpl.inv_scms, x)
    n_frames, n_bins, _ = qf.shape
    logw = -(qf.reshape(-1, n_dirs) @ doa.T).reshape(n_frames, n_bins, n_classes)
    masks, _ = _posteriors_from_log(logw, axis=2, floor=posterior_floor)
    return masks, doa


def init_doa_from_masks(x, masks, tpl: SteeringTemplate, posterior_floor=1e-12):
    """Direction posterior from externally supplied masks.

    doa[k, d] is proportional to exp(-sum_{t,f} masks[t,f,k] * quad[t,f,d])
    with the template quadratic forms; used when masks come from a network
    whose localization head may not transfer across rooms.
    """
    x = check_spectrogram(x, n_channels=tpl.n_mics)
    z = np.asarray(masks, dtype=np.float64)
    if z.ndim != 3 or z.shape[:2] != x.shape[:2]:
        raise DimensionError(
            f"mask shape {z.shape} does not match spectrogram {x.shape[:2]}"
        )
    qf = quadratic_forms(tpl.inv_scms, x)
    n_tf = qf.shape[0] * qf.shape[1]
    logw = -(z.reshape(n_tf, -1).T @ qf.reshape(n_tf, tpl.n_directions))
    doa, _ = _posteriors_from_log(logw, axis=1, floor=posterior_floor)
    return doa


def _bootstrap_params(x, tpl, masks, doa, cfg, dof, prior_scale, power_floor):
    """Point-estimate the parameters once from the initial posteriors."""
    n_mics = x.shape[2]
    power0 = np.maximum(
        np.sum(np.abs(x) ** 2, axis=2) / n_mics, power_floor
    )[:, :, None].repeat(masks.shape[2], axis=2)
    pf_real, pf_imag = _packed_pairs(x)
    scms = _scm_update(pf_real, pf_imag, masks, doa, power0, tpl, dof, prior_scale)
    inv_scms, logdets = scm_cache(scms)
    qf = _quadratic_forms_packed(pf_real, pf_imag, inv_scms)
    power = _power_update(qf, doa, power_floor, n_mics)
    frame_prior, dir_prior = m_step_priors(masks, doa)
    hyper = Hyperparams(dof=dof, diag_loading=tpl.diag_loading).validate(n_mics)
    params = ModelParams(
        scms=scms,
        power=power,
        frame_prior=frame_prior,
        direction_prior=dir_prior,
        hyper=hyper,
        inv_scms=inv_scms,
        logdets=logdets,
    )
    return params, qf, (pf_real, pf_imag)


def run_em(
    x,
    tpl: SteeringTemplate,
    cfg: EmConfig = None,
    init="directional",
    n_classes=None,
    dof=None,
    prior_scale_numerator="template",
) -> EmResult:
    """Run the full EM separation.

    init is either the string "directional" (conventional grid-block
    initialization; n_classes defaults to 2) or an externally supplied mask
    tensor (e.g. a network output), in which case the direction posterior
    is initialized from those masks.

    Each iteration applies the two posterior updates and then the three
    parameter updates (SCMs, powers, priors, in that order).  elbo_trace
    records, after every full iteration, the objective this EM actually
    ascends: the ELBO plus the SCM log-prior (the SCM update is MAP, so the
    ELBO alone is not monotone).  The plain ELBO values are available in
    diagnostics["elbo_likelihood_trace"].
    """
    cfg = cfg or EmConfig()
    x = check_spectrogram(x, n_channels=tpl.n_mics)
    if x.shape[1] != tpl.n_bins:
        raise DimensionError(
            f"spectrogram has {x.shape[1]} bins but templates were built "
            f"for {tpl.n_bins}"
        )
    n_frames, n_bins, n_mics = x.shape
    mean_power = float(np.mean(np.abs(x) ** 2))
    if mean_power <= 0.0:
        raise NumericError("all-zero spectrogram: nothing to separate")
    power_floor = cfg.power_floor * mean_power
    dof = float(dof) if dof is not None else n_mics + 5.0
    if prior_scale_numerator not in ("template", "scaled_template"):
        raise ConfigError(f"unknown prior_scale_numerator {prior_scale_numerator!r}")

    if isinstance(init, str):
        if init != "directional":
            raise ConfigError(f"unknown init scheme {init!r}")
        masks, doa = init_directional(
            x, tpl, n_classes or 2, posterior_floor=cfg.posterior_floor
        )
    else:
        masks = check_masks(init, shape_tf=(n_frames, n_bins))
        masks = np.maximum(masks, cfg.posterior_floor)
        masks /= masks.sum(axis=2, keepdims=True)
        doa = init_doa_from_masks(x, masks, tpl, posterior_floor=cfg.posterior_floor)

    params, qf, (pf_real, pf_imag) = _bootstrap_params(
        x, tpl, masks, doa, cfg, dof, prior_scale_numerator, power_floor
    )

    trace = []
    likelihood_trace = []
    total_fallback = 0
    for it in range(cfg.n_iters):
        try:
            masks, n_bad = _mask_update(
                qf, params.logdets, params.power, params.frame_prior, doa,
                cfg.posterior_floor, n_mics,
            )
            total_fallback += n_bad
            doa = _doa_update(
                qf, params.logdets, params.power, masks,
                params.direction_prior, cfg.posterior_floor,
            )
            scms = _scm_update(
                pf_real, pf_imag, masks, doa, params.power, tpl, dof,
                prior_scale_numerator,
            )
            inv_scms, logdets = scm_cache(scms)
            qf = _quadratic_forms_packed(pf_real, pf_imag, inv_scms)
            power = _power_update(qf, doa, power_floor, n_mics)
            frame_prior, dir_prior = m_step_priors(masks, doa)
            params = ModelParams(
                scms=scms,
                power=power,
                frame_prior=frame_prior,
                direction_prior=dir_prior,
                hyper=params.hyper,
                inv_scms=inv_scms,
                logdets=logdets,
            )
            elbo_value = _elbo_value(
                qf, logdets, power, frame_prior, dir_prior, masks, doa, n_mics
            )
            value = elbo_value + _scm_log_prior(
                inv_scms, logdets, tpl, dof, prior_scale_numerator
            )
        except NumericError as exc:
            raise NumericError(f"EM iteration {it}: {exc}") from exc
        if not np.isfinite(value):
            raise NumericError(f"EM iteration {it}: ELBO is non-finite")
        trace.append(value)
        likelihood_trace.append(elbo_value)
        if (
            cfg.convergence_tol
            and it > 0
            and abs(trace[-1] - trace[-2]) <= cfg.convergence_tol * abs(trace[-2])
        ):
            break

    trace = np.asarray(trace)
    drops = np.nonzero(np.diff(trace) < -1e-6 * np.abs(trace[:-1]))[0]
    if drops.size:
        logger.warning(
            "objective decreased beyond tolerance at iterations %s", drops.tolist()
        )
    if total_fallback:
        logger.warning(
            "mask update fell back to the prior on %d bins in total", total_fallback
        )
    diagnostics = {
        "mask_fallback_bins": total_fallback,
        "elbo_drop_iterations": drops.tolist(),
        "elbo_likelihood_trace": np.asarray(likelihood_trace),
    }
    return EmResult(
        masks=masks,
        doa_posterior=doa,
        params=params,
        elbo_trace=trace,
        diagnostics=diagnostics,
        template=tpl,
    )


def select_top_sources(masks, x, n_keep, reference_channel=0):
    """Keep the n_keep classes with the most masked reference-channel energy.

    Used when the EM runs with more classes than wanted output sources
    (e.g. the 6-block directional initialization on a 2-source mixture).
    Returns (selected masks, selected class indices).
    """
    x = check_spectrogram(x)
    z = np.asarray(masks, dtype=np.float64)
    if n_keep > z.shape[2]:
        raise DimensionError(
            f"cannot keep {n_keep} sources out of {z.shape[2]} classes"
        )
    energy = np.abs(x[:, :, reference_channel]) ** 2
    scores = np.einsum("tfk,tf->k", z, energy)
    order = np.argsort(-scores, kind="stable")[:n_keep]
    return z[:, :, order], order
