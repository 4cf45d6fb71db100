"""Unsupervised training of a pluggable mask estimator.

The trainer maximizes the spatial-model ELBO with the per-direction SCMs
frozen at their templates and the source powers frozen at the average
mixture power, so the only free quantities are the two network outputs
(TF masks and the direction posterior).  Gradients are derived by hand and
validated against central finite differences (see gradcheck).
"""

import json
import logging
import struct
from dataclasses import dataclass, field

import numpy as np
from scipy.special import xlogy

from .em import m_step_priors
from .errors import CheckpointError, DimensionError, NumericError
from .spatial import SteeringTemplate, quadratic_forms
from .validation import check_doa_posterior, check_masks, check_spectrogram

logger = logging.getLogger(__name__)

LOG_PI = float(np.log(np.pi))
_LOG_MAG_EPS = 1e-10


def avg_power(x):
    """Mean per-bin mixture power: mean over (t, f) of ||x_tf||^2 / n_mics."""
    x = check_spectrogram(x)
    value = float(np.mean(np.abs(x) ** 2))
    if value <= 0.0:
        raise NumericError("all-zero spectrogram has no average power")
    return value


def log_magnitude_features(x, reference_channel=0):
    """Mean-shifted log magnitude of the reference channel, (frames, bins)."""
    x = np.asarray(x)
    if x.ndim == 3:
        x = x[:, :, reference_channel]
    feats = np.log(np.abs(x) + _LOG_MAG_EPS)
    return feats - feats.mean()


def training_elbo(
    x,
    masks,
    doa_posterior,
    frame_prior,
    dir_prior,
    tpl: SteeringTemplate,
    mixture_power,
    posterior_floor=1e-12,
    template_quads=None,
):
    """Fixed-parameter ELBO of one mixture and its posterior gradients.

    value = [ -sum_{tfkd} masks*doa*(logdet_fd + quad_tfd/mixture_power)
              - KL(masks||frame_prior) - KL(doa||dir_prior)
              - n_tf*n_mics*(log pi + log mixture_power) ] / n_tf

    The constant keeps the value equal to the EM objective evaluated at
    (power = mixture_power, scm = template) divided by the bin count.
    Gradients are the exact derivatives of this expression with the priors
    held fixed; posteriors with exact zeros get their entropy-gradient logs
    floored at posterior_floor (counted and logged).
    """
    x = check_spectrogram(x, n_channels=tpl.n_mics)
    z = check_masks(masks, shape_tf=x.shape[:2])
    doa = check_doa_posterior(doa_posterior, n_directions=tpl.n_directions)
    n_frames, n_bins, n_mics = x.shape
    n_src = z.shape[2]
    n_tf = n_frames * n_bins
    if template_quads is None:
        template_quads = quadratic_forms(tpl.inv_scms, x)
    cost_tfd = tpl.logdets[None, :, :] + template_quads / mixture_power

    mix_cost = (cost_tfd.reshape(n_tf, -1) @ doa.T).reshape(n_frames, n_bins, n_src)
    spatial = -float(np.sum(z * mix_cost))
    kl_masks = float(np.sum(xlogy(z, z) - xlogy(z, frame_prior[:, None, :])))
    kl_doa = float(np.sum(xlogy(doa, doa) - xlogy(doa, dir_prior[None, :])))
    tol = 1e-9 * (1.0 + n_tf)
    if kl_masks < -tol or kl_doa < -tol:
        raise NumericError(
            f"KL terms must be non-negative (got {kl_masks:.3e}, {kl_doa:.3e})"
        )
    const = -n_tf * n_mics * (LOG_PI + np.log(mixture_power))
    value = (spatial - kl_masks - kl_doa + const) / n_tf

    n_floored = int(np.sum(z <= 0.0) + np.sum(doa <= 0.0))
    if n_floored:
        logger.warning(
            "flooring %d zero posterior entries for the entropy gradient",
            n_floored,
        )
    with np.errstate(divide="ignore"):
        log_z = np.log(np.maximum(z, posterior_floor))
        log_doa = np.log(np.maximum(doa, posterior_floor))
        log_frame = np.log(frame_prior)[:, None, :]
        log_dir = np.log(dir_prior)[None, :]
    grad_masks = (-mix_cost + log_frame - log_z - 1.0) / n_tf
    quad_kd = z.reshape(n_tf, n_src).T @ cost_tfd.reshape(n_tf, -1)
    grad_doa = (-quad_kd + log_dir - log_doa - 1.0) / n_tf
    if not (np.isfinite(value) and np.all(np.isfinite(grad_masks))
            and np.all(np.isfinite(grad_doa))):
        raise NumericError("training ELBO produced non-finite values")
    return value, grad_masks, grad_doa


# ---------------------------------------------------------------------------
# Networks: plain numpy with hand-written backward passes.


class MaskNetwork:
    """Differentiable map from a log-magnitude spectrogram to TF masks.

    Implementations expose a flat float64 parameter vector, a forward pass
    (frames, bins) -> (frames, bins, sources) normalized over sources, and
    a backward pass taking the upstream mask gradient and returning the
    parameter gradient.  backward() uses caches from the latest forward().
    """

    @property
    def parameters(self):
        raise NotImplementedError

    @parameters.setter
    def parameters(self, flat):
        raise NotImplementedError

    @property
    def n_parameters(self):
        return self.parameters.size

    def forward(self, log_magnitude):
        raise NotImplementedError

    def backward(self, grad_masks):
        raise NotImplementedError


class LocalizationMap:
    """Differentiable map from spatial features to a direction posterior.

    backward() returns (parameter gradient, feature gradient) so the
    feature path can stay differentiable end to end.
    """

    @property
    def parameters(self):
        raise NotImplementedError

    @parameters.setter
    def parameters(self, flat):
        raise NotImplementedError

    @property
    def n_parameters(self):
        return self.parameters.size

    def forward(self, features, n_bins):
        raise NotImplementedError

    def backward(self, grad_doa):
        raise NotImplementedError


def _softmax_backward(prob, grad):
    inner = np.sum(grad * prob, axis=-1, keepdims=True)
    return prob * (grad - inner)


class ReferenceMaskNet(MaskNetwork):
    """Small two-layer reference mask estimator.

    Input per frame: the log-magnitude vector with +-context neighbor
    frames stacked (edge-replicated at the boundaries).  Two affine layers
    with a tanh in between produce bins*sources logits, softmaxed over the
    source axis.
    """

    def __init__(self, n_bins, n_sources, context=2, hidden=128, seed=0):
        if n_bins < 1 or n_sources < 1 or hidden < 1 or context < 0:
            raise DimensionError("invalid mask-network topology")
        self.n_bins = n_bins
        self.n_sources = n_sources
        self.context = context
        self.hidden = hidden
        n_in = (2 * context + 1) * n_bins
        rng = np.random.default_rng(seed)
        self.w1 = rng.standard_normal((n_in, hidden)) / np.sqrt(n_in)
        self.b1 = np.zeros(hidden)
        self.w2 = rng.standard_normal((hidden, n_bins * n_sources)) / np.sqrt(hidden)
        self.b2 = np.zeros(n_bins * n_sources)
        self._cache = None

    @property
    def parameters(self):
        return np.concatenate(
            [self.w1.ravel(), self.b1, self.w2.ravel(), self.b2]
        )

    @parameters.setter
    def parameters(self, flat):
        flat = np.asarray(flat, dtype=np.float64)
        sizes = [self.w1.size, self.b1.size, self.w2.size, self.b2.size]
        if flat.size != sum(sizes):
            raise DimensionError(
                f"expected {sum(sizes)} parameters, got {flat.size}"
            )
        o = 0
        self.w1 = flat[o:o + sizes[0]].reshape(self.w1.shape).copy(); o += sizes[0]
        self.b1 = flat[o:o + sizes[1]].copy(); o += sizes[1]
        self.w2 = flat[o:o + sizes[2]].reshape(self.w2.shape).copy(); o += sizes[2]
        self.b2 = flat[o:o + sizes[3]].copy()

    def _stack_context(self, feats):
        c = self.context
        padded = np.pad(feats, ((c, c), (0, 0)), mode="edge")
        win = np.lib.stride_tricks.sliding_window_view(padded, 2 * c + 1, axis=0)
        return win.transpose(0, 2, 1).reshape(feats.shape[0], -1)

    def forward(self, log_magnitude):
        feats = np.asarray(log_magnitude, dtype=np.float64)
        if feats.ndim != 2 or feats.shape[1] != self.n_bins:
            raise DimensionError(
                f"expected (frames, {self.n_bins}) features, got {feats.shape}"
            )
        stacked = self._stack_context(feats)
        pre = stacked @ self.w1 + self.b1
        hidden = np.tanh(pre)
        logits = (hidden @ self.w2 + self.b2).reshape(
            feats.shape[0], self.n_bins, self.n_sources
        )
        shifted = logits - logits.max(axis=2, keepdims=True)
        expd = np.exp(shifted)
        masks = expd / expd.sum(axis=2, keepdims=True)
        self._cache = (stacked, hidden, masks)
        return masks

    def backward(self, grad_masks):
        if self._cache is None:
            raise NumericError("backward called before forward")
        stacked, hidden, masks = self._cache
        n_frames = masks.shape[0]
        grad_logits = _softmax_backward(masks, grad_masks).reshape(n_frames, -1)
        grad_w2 = hidden.T @ grad_logits
        grad_b2 = grad_logits.sum(axis=0)
        grad_hidden = grad_logits @ self.w2.T
        grad_pre = grad_hidden * (1.0 - hidden**2)
        grad_w1 = stacked.T @ grad_pre
        grad_b1 = grad_pre.sum(axis=0)
        return np.concatenate(
            [grad_w1.ravel(), grad_b1, grad_w2.ravel(), grad_b2]
        )


class SoftmaxLocalizer(LocalizationMap):
    """Per-direction affine transform with a learned temperature.

    With unit gain, zero bias, and unit temperature the output is
    softmax(features / n_bins), i.e. a direction posterior driven directly
    by the per-bin average spatial log-likelihood.
    """

    def __init__(self, n_directions):
        self.n_directions = n_directions
        self.gain = np.ones(n_directions)
        self.bias = np.zeros(n_directions)
        self.log_temp = np.zeros(1)
        self._cache = None

    @property
    def parameters(self):
        return np.concatenate([self.gain, self.bias, self.log_temp])

    @parameters.setter
    def parameters(self, flat):
        flat = np.asarray(flat, dtype=np.float64)
        if flat.size != 2 * self.n_directions + 1:
            raise DimensionError(
                f"expected {2 * self.n_directions + 1} parameters, got {flat.size}"
            )
        d = self.n_directions
        self.gain = flat[:d].copy()
        self.bias = flat[d:2 * d].copy()
        self.log_temp = flat[2 * d:].copy()

    def forward(self, features, n_bins):
        feats = np.asarray(features, dtype=np.float64)
        if feats.ndim != 2 or feats.shape[1] != self.n_directions:
            raise DimensionError(
                f"expected (sources, {self.n_directions}) features, got {feats.shape}"
            )
        scaled = feats / float(n_bins)
        inv_temp = np.exp(-self.log_temp[0])
        pre = (scaled * self.gain + self.bias) * inv_temp
        shifted = pre - pre.max(axis=1, keepdims=True)
        expd = np.exp(shifted)
        doa = expd / expd.sum(axis=1, keepdims=True)
        self._cache = (scaled, pre, doa, inv_temp, float(n_bins))
        return doa

    def backward(self, grad_doa):
        if self._cache is None:
            raise NumericError("backward called before forward")
        scaled, pre, doa, inv_temp, n_bins = self._cache
        grad_pre = _softmax_backward(doa, grad_doa)
        grad_gain = (grad_pre * scaled).sum(axis=0) * inv_temp
        grad_bias = grad_pre.sum(axis=0) * inv_temp
        grad_log_temp = np.array([-np.sum(grad_pre * pre)])
        grad_features = grad_pre * self.gain[None, :] * inv_temp / n_bins
        grads = np.concatenate([grad_gain, grad_bias, grad_log_temp])
        return grads, grad_features


class Adam:
    """Standard first/second-moment adaptive update with bias correction."""

    def __init__(self, n_params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = np.zeros(n_params)
        self.v = np.zeros(n_params)
        self.t = 0

    def step(self, params, grads):
        params = np.asarray(params, dtype=np.float64)
        grads = np.asarray(grads, dtype=np.float64)
        if params.shape != grads.shape or params.shape != self.m.shape:
            raise DimensionError("optimizer state and gradients disagree in shape")
        self.t += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grads
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * grads**2
        m_hat = self.m / (1.0 - self.beta1**self.t)
        v_hat = self.v / (1.0 - self.beta2**self.t)
        return params - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def state_dict(self):
        return {"m": self.m, "v": self.v, "t": self.t, "lr": self.lr}

    def load_state(self, state):
        self.m = np.asarray(state["m"], dtype=np.float64).copy()
        self.v = np.asarray(state["v"], dtype=np.float64).copy()
        self.t = int(state["t"])
        self.lr = float(state["lr"])


@dataclass
class TrainingContext:
    """Shared training state: templates, one optimizer over both networks.

    The per-mixture average power and the local priors are re-estimated at
    every visit and never persist across steps.
    """

    tpl: SteeringTemplate
    optimizer: Adam
    omega_stop_gradient: bool = False
    posterior_floor: float = 1e-12


@dataclass
class TrainStepResult:
    loss: float
    grad_norm: float
    lr: float
    skipped: bool = False


def _mixture_loss_and_grads(
    x, g: MaskNetwork, h: LocalizationMap, tpl, stop_gradient, floor,
    frame_prior=None, dir_prior=None,
):
    """ELBO of one mixture plus parameter gradients for both networks.

    When the priors are not supplied they are point-estimated from the
    current posteriors first and then held fixed for the gradient, matching
    the alternating parameter/network update of the training loop.
    """
    x = check_spectrogram(x, n_channels=tpl.n_mics)
    n_frames, n_bins, n_mics = x.shape
    n_tf = n_frames * n_bins
    feats = log_magnitude_features(x)
    masks = g.forward(feats)
    quads = quadratic_forms(tpl.inv_scms, x)
    loglik_tfd = -(n_mics * LOG_PI + tpl.logdets[None, :, :] + quads)
    omega = masks.reshape(n_tf, -1).T @ loglik_tfd.reshape(n_tf, -1)
    doa = h.forward(omega, n_tf)
    if frame_prior is None:
        frame_prior, dir_prior = m_step_priors(masks, doa)
    power = avg_power(x)
    value, grad_masks, grad_doa = training_elbo(
        x, masks, doa, frame_prior, dir_prior, tpl, power,
        posterior_floor=floor, template_quads=quads,
    )
    h_grads, grad_omega = h.backward(grad_doa)
    if not stop_gradient:
        n_dirs = tpl.n_directions
        grad_masks = grad_masks + (
            loglik_tfd.reshape(n_tf, n_dirs) @ grad_omega.T
        ).reshape(masks.shape)
    g_grads = g.backward(grad_masks)
    return value, g_grads, h_grads


def train_step(batch, g: MaskNetwork, h: LocalizationMap, ctx: TrainingContext):
    """One optimizer step on a mini-batch of mixtures.

    Per mixture: forward both networks, update the local priors, then
    backpropagate the fixed-parameter ELBO into both networks.  The batch
    loss is the mean negated ELBO; one Adam step descends it.  A non-finite
    gradient skips the step and reduces the learning rate.
    """
    if not batch:
        raise DimensionError("empty training batch")
    losses = []
    grad_sum = None
    for x in batch:
        value, g_grads, h_grads = _mixture_loss_and_grads(
            x, g, h, ctx.tpl, ctx.omega_stop_gradient, ctx.posterior_floor
        )
        grads = np.concatenate([g_grads, h_grads])
        grad_sum = grads if grad_sum is None else grad_sum + grads
        losses.append(-value)
    loss = float(np.mean(losses))
    grad = -grad_sum / len(batch)  # gradient of the mean loss
    grad_norm = float(np.linalg.norm(grad))
    if not np.isfinite(grad_norm) or not np.isfinite(loss):
        ctx.optimizer.lr *= 0.7
        logger.warning(
            "skipping step with non-finite gradient; lr reduced to %.3e",
            ctx.optimizer.lr,
        )
        return TrainStepResult(loss, grad_norm, ctx.optimizer.lr, skipped=True)
    params = np.concatenate([g.parameters, h.parameters])
    new_params = ctx.optimizer.step(params, grad)
    n_g = g.n_parameters
    g.parameters = new_params[:n_g]
    h.parameters = new_params[n_g:]
    return TrainStepResult(loss, grad_norm, ctx.optimizer.lr)


def fit_mask_network(
    mixtures,
    g: MaskNetwork,
    h: LocalizationMap,
    ctx: TrainingContext,
    epochs=20,
    batch_size=8,
    seed=0,
    on_step=None,
    on_epoch_end=None,
):
    """Epoch loop with shuffled mini-batches and the 0.7x lr backoff.

    The learning rate is multiplied by 0.7 whenever an epoch's mean loss
    exceeds the previous epoch's.  Returns the per-epoch mean losses.
    """
    if not mixtures:
        raise DimensionError("no training mixtures")
    rng = np.random.default_rng(seed)
    history = []
    for epoch in range(epochs):
        order = rng.permutation(len(mixtures))
        step_losses = []
        for lo in range(0, len(order), batch_size):
            batch = [mixtures[i] for i in order[lo:lo + batch_size]]
            result = train_step(batch, g, h, ctx)
            step_losses.append(result.loss)
            if on_step is not None:
                on_step(epoch, lo // batch_size, result)
        epoch_loss = float(np.mean(step_losses))
        if history and epoch_loss > history[-1]:
            ctx.optimizer.lr *= 0.7
            logger.info(
                "epoch %d loss increased (%.6f > %.6f); lr scaled down to %.3e",
                epoch, epoch_loss, history[-1], ctx.optimizer.lr,
            )
        history.append(epoch_loss)
        if on_epoch_end is not None:
            on_epoch_end(epoch, epoch_loss, ctx.optimizer.lr)
    return history


# ---------------------------------------------------------------------------
# Gradient verification


@dataclass
class GradcheckReport:
    max_rel_error_mask_net: float
    max_rel_error_localizer: float
    tolerance: float
    step: float

    @property
    def passed(self):
        return (
            self.max_rel_error_mask_net <= self.tolerance
            and self.max_rel_error_localizer <= self.tolerance
        )


def _max_rel_error(analytic, numeric):
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-6)
    return float(np.max(np.abs(analytic - numeric) / denom))


def gradcheck(
    g: MaskNetwork,
    h: LocalizationMap,
    x,
    tpl: SteeringTemplate,
    step=1e-5,
    tolerance=1e-4,
    omega_stop_gradient=False,
    posterior_floor=1e-12,
) -> GradcheckReport:
    """Compare analytic pipeline gradients against central differences.

    The local priors are point-estimated once at the base point and held
    fixed, mirroring what one training step differentiates.  Intended for
    small instances (a few frames/bins); cost is two pipeline evaluations
    per parameter.
    """
    x = check_spectrogram(x, n_channels=tpl.n_mics)
    feats = log_magnitude_features(x)
    masks0 = g.forward(feats)
    n_tf = x.shape[0] * x.shape[1]
    quads = quadratic_forms(tpl.inv_scms, x)
    loglik = -(tpl.n_mics * LOG_PI + tpl.logdets[None, :, :] + quads)
    omega0 = masks0.reshape(n_tf, -1).T @ loglik.reshape(n_tf, -1)
    doa0 = h.forward(omega0, n_tf)
    frame_prior, dir_prior = m_step_priors(masks0, doa0)

    value, g_grads, h_grads = _mixture_loss_and_grads(
        x, g, h, tpl, omega_stop_gradient, posterior_floor,
        frame_prior=frame_prior, dir_prior=dir_prior,
    )
    analytic = {"mask_net": -g_grads, "localizer": -h_grads}  # grads of the loss

    def loss_now():
        z = g.forward(feats)
        om = z.reshape(n_tf, -1).T @ loglik.reshape(n_tf, -1)
        w = h.forward(om, n_tf)
        val, _, _ = training_elbo(
            x, z, w, frame_prior, dir_prior, tpl, avg_power(x),
            posterior_floor=posterior_floor, template_quads=quads,
        )
        return -val

    errors = {}
    for name, net in (("mask_net", g), ("localizer", h)):
        base = net.parameters
        numeric = np.empty_like(base)
        perturbed = base.copy()
        for i in range(base.size):
            perturbed[i] = base[i] + step
            net.parameters = perturbed
            upper = loss_now()
            perturbed[i] = base[i] - step
            net.parameters = perturbed
            lower = loss_now()
            perturbed[i] = base[i]
            numeric[i] = (upper - lower) / (2.0 * step)
        net.parameters = base
        errors[name] = _max_rel_error(analytic[name], numeric)
    return GradcheckReport(
        max_rel_error_mask_net=errors["mask_net"],
        max_rel_error_localizer=errors["localizer"],
        tolerance=tolerance,
        step=step,
    )


# ---------------------------------------------------------------------------
# Checkpoints: magic, version, JSON topology descriptor, flat parameter
# vectors, optimizer state, epoch counter.  Little-endian throughout.

CHECKPOINT_MAGIC = b"CGCK"
CHECKPOINT_VERSION = 1


def _write_array(fh, arr):
    arr = np.ascontiguousarray(arr, dtype="<f8")
    fh.write(struct.pack("<Q", arr.size))
    fh.write(arr.tobytes())


def _read_array(fh):
    (size,) = struct.unpack("<Q", fh.read(8))
    return np.frombuffer(fh.read(8 * size), dtype="<f8").copy()


def save_checkpoint(path, g: ReferenceMaskNet, h: SoftmaxLocalizer,
                    optimizer: Adam = None, epoch=0):
    topology = {
        "mask_net": {
            "type": "reference",
            "n_bins": g.n_bins,
            "n_sources": g.n_sources,
            "context": g.context,
            "hidden": g.hidden,
        },
        "localizer": {"type": "softmax", "n_directions": h.n_directions},
    }
    blob = json.dumps(topology).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        _write_array(fh, g.parameters)
        _write_array(fh, h.parameters)
        fh.write(struct.pack("<B", 1 if optimizer is not None else 0))
        if optimizer is not None:
            state = optimizer.state_dict()
            fh.write(struct.pack("<Qd", state["t"], state["lr"]))
            _write_array(fh, state["m"])
            _write_array(fh, state["v"])
        fh.write(struct.pack("<I", epoch))


def load_checkpoint(path):
    """Rebuild the networks (and optimizer, if stored) from a checkpoint."""
    try:
        with open(path, "rb") as fh:
            if fh.read(4) != CHECKPOINT_MAGIC:
                raise CheckpointError(f"{path} is not a checkpoint file")
            (version,) = struct.unpack("<I", fh.read(4))
            if version != CHECKPOINT_VERSION:
                raise CheckpointError(f"unsupported checkpoint version {version}")
            (blob_len,) = struct.unpack("<I", fh.read(4))
            topology = json.loads(fh.read(blob_len).decode())
            g_params = _read_array(fh)
            h_params = _read_array(fh)
            (has_opt,) = struct.unpack("<B", fh.read(1))
            optimizer = None
            if has_opt:
                t, lr = struct.unpack("<Qd", fh.read(16))
                m = _read_array(fh)
                v = _read_array(fh)
                optimizer = Adam(m.size, lr=lr)
                optimizer.load_state({"m": m, "v": v, "t": t, "lr": lr})
            (epoch,) = struct.unpack("<I", fh.read(4))
    except (OSError, struct.error, json.JSONDecodeError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc

    mask_spec = topology.get("mask_net", {})
    loc_spec = topology.get("localizer", {})
    if mask_spec.get("type") != "reference" or loc_spec.get("type") != "softmax":
        raise CheckpointError(
            f"unknown network topology in {path}: {topology}"
        )
    g = ReferenceMaskNet(
        n_bins=mask_spec["n_bins"],
        n_sources=mask_spec["n_sources"],
        context=mask_spec["context"],
        hidden=mask_spec["hidden"],
    )
    h = SoftmaxLocalizer(n_directions=loc_spec["n_directions"])
    try:
        g.parameters = g_params
        h.parameters = h_params
    except DimensionError as exc:
        raise CheckpointError(f"parameter vector mismatch in {path}: {exc}") from exc
    return g, h, optimizer, epoch
