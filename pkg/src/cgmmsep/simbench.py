"""Synthetic scenes and evaluation metrics.

Scenes are built from seeded synthetic sources (band-limited noise, AM
tones, speech-shaped noise) so every claim is testable without external
datasets.  Plane-wave mixing happens in the STFT domain and is therefore
exactly consistent with the steering templates; reverberant mixing goes
through the image-method impulse responses.
"""

import itertools
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.signal import fftconvolve

from .errors import DimensionError, NumericError
from .signal import Spectrogram, StftConfig, Waveform, istft, stft
from .spatial import ArrayGeometry, bin_frequencies, steering_vector
from .validation import check_doa_posterior

SI_SDR_CAP_DB = 60.0


# ---------------------------------------------------------------------------
# Synthetic sources


def bandlimited_noise(rng, n_samples, sample_rate, low_hz, high_hz):
    """White noise restricted to [low_hz, high_hz] via FFT masking."""
    noise = rng.standard_normal(n_samples)
    spec = np.fft.rfft(noise)
    freqs = np.fft.rfftfreq(n_samples, 1.0 / sample_rate)
    spec[(freqs < low_hz) | (freqs > high_hz)] = 0.0
    out = np.fft.irfft(spec, n=n_samples)
    return out / (np.std(out) + 1e-12)


def am_tone(rng, n_samples, sample_rate, carrier_hz=None, rate_hz=None):
    """Amplitude-modulated tone with random phases."""
    if carrier_hz is None:
        carrier_hz = rng.uniform(300.0, 3000.0)
    if rate_hz is None:
        rate_hz = rng.uniform(2.0, 8.0)
    t = np.arange(n_samples) / sample_rate
    carrier = np.sin(2 * np.pi * carrier_hz * t + rng.uniform(0, 2 * np.pi))
    envelope = 0.55 + 0.45 * np.sin(2 * np.pi * rate_hz * t + rng.uniform(0, 2 * np.pi))
    out = carrier * envelope
    return out / (np.std(out) + 1e-12)


def speech_shaped_noise(rng, n_samples, sample_rate, tilt_hz=500.0,
                        syllable_rate_hz=None):
    """1/f-tilted noise with a slow syllabic amplitude envelope."""
    if syllable_rate_hz is None:
        syllable_rate_hz = rng.uniform(2.0, 6.0)
    noise = rng.standard_normal(n_samples)
    spec = np.fft.rfft(noise)
    freqs = np.fft.rfftfreq(n_samples, 1.0 / sample_rate)
    spec *= 1.0 / (1.0 + freqs / tilt_hz)
    shaped = np.fft.irfft(spec, n=n_samples)
    t = np.arange(n_samples) / sample_rate
    envelope = 0.5 + 0.5 * np.sin(2 * np.pi * syllable_rate_hz * t
                                  + rng.uniform(0, 2 * np.pi))
    out = shaped * (0.2 + envelope)
    return out / (np.std(out) + 1e-12)


SOURCE_KINDS = ("bandnoise", "am_tone", "speech_noise")


def random_source(rng, n_samples, sample_rate, kind=None, band=None):
    if kind is None:
        kind = SOURCE_KINDS[rng.integers(len(SOURCE_KINDS))]
    if kind == "bandnoise":
        if band is None:
            lo = rng.uniform(100.0, 1500.0)
            band = (lo, lo + rng.uniform(500.0, 2000.0))
        sig = bandlimited_noise(rng, n_samples, sample_rate, *band)
        t = np.arange(n_samples) / sample_rate
        env = 0.55 + 0.45 * np.sin(2 * np.pi * rng.uniform(2.0, 7.0) * t
                                   + rng.uniform(0, 2 * np.pi))
        return sig * env / (np.std(sig * env) + 1e-12)
    if kind == "am_tone":
        return am_tone(rng, n_samples, sample_rate)
    if kind == "speech_noise":
        return speech_shaped_noise(rng, n_samples, sample_rate)
    raise DimensionError(f"unknown source kind {kind!r}")


# ---------------------------------------------------------------------------
# Scenes


@dataclass
class Scene:
    """Scene description: source signals, their azimuths, and mixing options."""

    sources: np.ndarray  # (n_sources, n_samples)
    azimuths_deg: np.ndarray  # (n_sources,)
    sample_rate: int
    geometry: ArrayGeometry
    snr_db: float = 30.0
    source_gains_db: np.ndarray = None  # level offsets, first source = 0 dB
    noise_seed: int = 0

    def __post_init__(self):
        self.sources = np.atleast_2d(np.asarray(self.sources, dtype=np.float64))
        self.azimuths_deg = np.asarray(self.azimuths_deg, dtype=np.float64)
        if self.sources.shape[0] != self.azimuths_deg.size:
            raise DimensionError("one azimuth per source required")
        if np.any(self.azimuths_deg < 0) or np.any(self.azimuths_deg >= 360):
            raise DimensionError("azimuths must lie in [0, 360) degrees")
        if self.source_gains_db is None:
            self.source_gains_db = np.zeros(self.sources.shape[0])
        self.source_gains_db = np.asarray(self.source_gains_db, dtype=np.float64)

    @property
    def n_sources(self):
        return self.sources.shape[0]


@dataclass
class GroundTruth:
    """Per-source references at the reference mic plus oracle ratio masks."""

    reference_images: np.ndarray  # (n_sources, n_samples) time domain
    azimuths_deg: np.ndarray
    oracle_masks: np.ndarray  # (frames, bins, sources), rows sum to 1
    image_spectrograms: np.ndarray = field(default=None, repr=False)


def _fade_envelope(n_samples, fade_len):
    env = np.ones(n_samples)
    if fade_len > 0:
        ramp = 0.5 - 0.5 * np.cos(np.pi * np.arange(fade_len) / fade_len)
        env[:fade_len] = ramp
        env[-fade_len:] = ramp[::-1]
    return env


def mix_planewave(scene: Scene, stft_cfg: StftConfig = None,
                  reference_channel=0, fade_len=None):
    """Far-field mixing: each source's STFT is steered per bin and summed.

    Sources are faded in/out over one window (fade_len samples) so the
    partial-overlap edge frames carry no signal energy; sensor noise is
    white Gaussian per channel in the time domain at scene.snr_db below
    the noise-free mixture.  Returns the multichannel Waveform and the
    GroundTruth (reference images, azimuths, oracle ratio masks from the
    pre-mix spectrograms).
    """
    stft_cfg = stft_cfg or StftConfig()
    if fade_len is None:
        fade_len = stft_cfg.window_len
    rng = np.random.default_rng(scene.noise_seed)
    freqs = bin_frequencies(stft_cfg.window_len // 2 + 1, scene.sample_rate)
    gains = 10.0 ** (scene.source_gains_db / 20.0)
    envelope = _fade_envelope(scene.sources.shape[1], fade_len)

    images = []
    ref_specs = []
    for k in range(scene.n_sources):
        mono = stft(
            Waveform(scene.sources[k] * envelope * gains[k], scene.sample_rate),
            stft_cfg,
        )
        steer = np.stack(
            [steering_vector(scene.geometry, scene.azimuths_deg[k], f) for f in freqs]
        )  # (bins, mics)
        img = mono.values[:, :, 0][:, :, None] * steer[None, :, :]
        images.append(img)
        ref_specs.append(img[:, :, reference_channel])
    images = np.stack(images)  # (sources, frames, bins, mics)
    mix = images.sum(axis=0)

    mix_spec = Spectrogram(
        values=mix,
        frame_hop=stft_cfg.hop,
        window_len=stft_cfg.window_len,
        sample_rate=scene.sample_rate,
        window=stft_cfg.window,
    )
    waveform = istft(mix_spec)
    if np.isfinite(scene.snr_db):
        signal_power = np.mean(waveform.samples**2)
        noise_power = signal_power * 10.0 ** (-scene.snr_db / 10.0)
        noise = rng.standard_normal(waveform.samples.shape)
        waveform = Waveform(
            waveform.samples + noise * np.sqrt(noise_power), scene.sample_rate
        )

    power = np.abs(np.stack(ref_specs, axis=-1)) ** 2  # (frames, bins, sources)
    total = power.sum(axis=2, keepdims=True)
    oracle = np.where(total > 0, power / np.maximum(total, 1e-300),
                      1.0 / scene.n_sources)

    ref_images = np.stack(
        [
            istft(
                Spectrogram(
                    values=ref_specs[k][:, :, None],
                    frame_hop=stft_cfg.hop,
                    window_len=stft_cfg.window_len,
                    sample_rate=scene.sample_rate,
                    window=stft_cfg.window,
                )
            ).samples[0]
            for k in range(scene.n_sources)
        ]
    )
    truth = GroundTruth(
        reference_images=ref_images,
        azimuths_deg=scene.azimuths_deg.copy(),
        oracle_masks=oracle,
        image_spectrograms=images,
    )
    return waveform, truth


# ---------------------------------------------------------------------------
# Image-method room impulse responses


def image_method_rir(room_dim, src_pos, mic_pos, absorption, max_order,
                     sample_rate=8000, speed_of_sound=343.0, n_taps=81,
                     rir_length=None):
    """Specular image-method impulse response with windowed-sinc taps.

    Every image source up to the given total reflection order contributes
    an impulse at delay distance/c with gain r^order / (4 pi distance),
    r = sqrt(1 - absorption).  Fractional delays are spread over n_taps of
    a Hann-windowed sinc, which reduces to a single exact tap when the
    delay is integer.
    """
    room = np.asarray(room_dim, dtype=np.float64)
    src = np.asarray(src_pos, dtype=np.float64)
    mic = np.asarray(mic_pos, dtype=np.float64)
    if room.shape != (3,) or src.shape != (3,) or mic.shape != (3,):
        raise DimensionError("room_dim, src_pos, mic_pos must be 3-vectors")
    if np.any(src <= 0) or np.any(src >= room) or np.any(mic <= 0) or np.any(mic >= room):
        raise DimensionError("source and mic must lie strictly inside the room")
    if not 0.0 < absorption <= 1.0:
        raise DimensionError("absorption must be in (0, 1]")
    if max_order < 0:
        raise DimensionError("max_order must be non-negative")
    if np.allclose(src, mic):
        raise NumericError("source coincides with the microphone")

    refl = math.sqrt(1.0 - absorption)
    half = n_taps // 2

    # collect (distance, order) over the image lattice
    entries = []
    n_max = (max_order + 1) // 2 + 1
    axis_images = []
    for axis in range(3):
        cands = []
        for n in range(-n_max, n_max + 1):
            for flip in (0, 1):
                # image coordinate: (1 - 2*flip)*src + 2*n*L; order |n - ... |
                coord = (1 - 2 * flip) * src[axis] + 2 * n * room[axis]
                order = abs(n) + abs(n - flip)
                if order <= max_order:
                    cands.append((coord, order))
        axis_images.append(cands)
    for (cx, ox), (cy, oy), (cz, oz) in itertools.product(*axis_images):
        order = ox + oy + oz
        if order > max_order:
            continue
        dist = math.sqrt(
            (cx - mic[0]) ** 2 + (cy - mic[1]) ** 2 + (cz - mic[2]) ** 2
        )
        entries.append((dist, order))

    max_delay = max(d for d, _ in entries) / speed_of_sound
    if rir_length is None:
        rir_length = int(math.ceil(max_delay * sample_rate)) + half + 2
    rir = np.zeros(rir_length)
    for dist, order in entries:
        delay = dist / speed_of_sound * sample_rate  # in samples
        gain = refl**order / (4.0 * math.pi * dist)
        center = int(round(delay))
        lo = max(center - half, 0)
        hi = min(center + half + 1, rir_length)
        if lo >= hi:
            continue
        n = np.arange(lo, hi)
        t = n - delay
        kernel = 0.5 * (1.0 + np.cos(np.pi * t / (half + 1))) * np.sinc(t)
        rir[lo:hi] += gain * kernel
    return rir


def mix_reverberant(scene: Scene, room_dim, positions, mic_center=None,
                    absorption=0.7, max_order=2, stft_cfg: StftConfig = None,
                    reference_channel=0):
    """Image-method mixing for sources at explicit 3D positions.

    Azimuth ground truth is taken from the source position relative to the
    array center.  Oracle masks come from the per-source reference-channel
    spectrograms, like the plane-wave path.
    """
    stft_cfg = stft_cfg or StftConfig()
    room = np.asarray(room_dim, dtype=np.float64)
    positions = np.atleast_2d(np.asarray(positions, dtype=np.float64))
    if mic_center is None:
        mic_center = room / 2.0
    mic_center = np.asarray(mic_center, dtype=np.float64)
    mics = scene.geometry.mic_positions + mic_center
    gains = 10.0 ** (scene.source_gains_db / 20.0)
    rng = np.random.default_rng(scene.noise_seed)

    n_samples = scene.sources.shape[1]
    channels = np.zeros((mics.shape[0], n_samples))
    ref_images = np.zeros((scene.n_sources, n_samples))
    azimuths = np.zeros(scene.n_sources)
    for k in range(scene.n_sources):
        offset = positions[k] - mic_center
        azimuths[k] = math.degrees(math.atan2(offset[1], offset[0])) % 360.0
        for m in range(mics.shape[0]):
            rir = image_method_rir(
                room, positions[k], mics[m], absorption, max_order,
                sample_rate=scene.sample_rate,
                speed_of_sound=scene.geometry.speed_of_sound,
            )
            img = fftconvolve(scene.sources[k] * gains[k], rir)[:n_samples]
            channels[m] += img
            if m == reference_channel:
                ref_images[k] = img

    if np.isfinite(scene.snr_db):
        signal_power = np.mean(channels**2)
        noise_power = signal_power * 10.0 ** (-scene.snr_db / 10.0)
        channels = channels + rng.standard_normal(channels.shape) * np.sqrt(noise_power)

    waveform = Waveform(channels, scene.sample_rate)
    ref_specs = [
        stft(Waveform(ref_images[k], scene.sample_rate), stft_cfg).values[:, :, 0]
        for k in range(scene.n_sources)
    ]
    power = np.abs(np.stack(ref_specs, axis=-1)) ** 2
    total = power.sum(axis=2, keepdims=True)
    oracle = np.where(total > 0, power / np.maximum(total, 1e-300),
                      1.0 / scene.n_sources)
    truth = GroundTruth(
        reference_images=ref_images,
        azimuths_deg=azimuths,
        oracle_masks=oracle,
    )
    return waveform, truth


# ---------------------------------------------------------------------------
# Metrics


def si_sdr(estimate, reference, cap_db=SI_SDR_CAP_DB):
    """Scale-invariant signal-to-distortion ratio in dB, capped at +cap_db.

    The reference is rescaled by its least-squares gain before the
    distortion energy is measured, so any nonzero scaling of the estimate
    scores identically.
    """
    est = np.asarray(estimate, dtype=np.float64).ravel()
    ref = np.asarray(reference, dtype=np.float64).ravel()
    if est.shape != ref.shape:
        raise DimensionError(
            f"estimate and reference lengths differ: {est.size} vs {ref.size}"
        )
    ref_energy = float(ref @ ref)
    if ref_energy <= 0.0:
        raise NumericError("reference signal is all zeros")
    alpha = float(est @ ref) / ref_energy
    target = alpha * ref
    noise_energy = float(np.sum((est - target) ** 2))
    target_energy = float(target @ target)
    if noise_energy <= 0.0 or target_energy / noise_energy > 10.0 ** (cap_db / 10.0):
        return cap_db
    return 10.0 * math.log10(target_energy / noise_energy)


@dataclass
class AlignmentResult:
    permutation: tuple  # estimate index assigned to each reference
    per_source_si_sdr: np.ndarray
    mean_si_sdr: float


def permutation_align(estimates, references, cap_db=SI_SDR_CAP_DB):
    """Best source-to-reference assignment by mean SI-SDR.

    Brute force over permutations (limited to 6 sources); ties keep the
    lexicographically first permutation.
    """
    est = np.atleast_2d(np.asarray(estimates, dtype=np.float64))
    ref = np.atleast_2d(np.asarray(references, dtype=np.float64))
    if est.shape != ref.shape:
        raise DimensionError(
            f"estimates {est.shape} and references {ref.shape} must match"
        )
    n = est.shape[0]
    if n > 6:
        raise DimensionError("brute-force alignment is limited to 6 sources")
    pairwise = np.array(
        [[si_sdr(est[i], ref[j], cap_db) for j in range(n)] for i in range(n)]
    )
    best = None
    for perm in itertools.permutations(range(n)):
        mean = float(np.mean([pairwise[perm[j], j] for j in range(n)]))
        if best is None or mean > best[1]:
            best = (perm, mean)
    perm, mean = best
    per_source = np.array([pairwise[perm[j], j] for j in range(n)])
    return AlignmentResult(perm, per_source, mean)


def circular_distance_deg(a, b):
    return abs((float(a) - float(b) + 180.0) % 360.0 - 180.0)


def doa_error(doa_posterior, true_azimuths_deg, grid):
    """Circular DoA error per source after best permutation alignment.

    The posterior mode of each source is matched to the true azimuths by
    the permutation minimizing the total circular error; errors are
    returned in the order of the true sources.
    """
    doa = check_doa_posterior(doa_posterior)
    truths = np.atleast_1d(np.asarray(true_azimuths_deg, dtype=np.float64))
    if doa.shape[0] != truths.size:
        raise DimensionError(
            f"{doa.shape[0]} posterior rows vs {truths.size} true azimuths"
        )
    if doa.shape[0] > 6:
        raise DimensionError("brute-force alignment is limited to 6 sources")
    modes = grid.azimuths_deg[np.argmax(doa, axis=1)]
    best = None
    for perm in itertools.permutations(range(truths.size)):
        errs = [circular_distance_deg(modes[perm[j]], truths[j])
                for j in range(truths.size)]
        total = sum(errs)
        if best is None or total < best[0]:
            best = (total, errs)
    return np.asarray(best[1])
