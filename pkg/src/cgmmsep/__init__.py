"""Multichannel blind source separation with a complex Gaussian mixture
spatial model: variational EM with joint DoA estimation, unsupervised
training of a pluggable mask estimator, and a synthetic benchmark."""

from .em import (
    EmConfig,
    EmResult,
    ModelParams,
    e_step_doa,
    e_step_masks,
    elbo,
    init_directional,
    init_doa_from_masks,
    m_step_priors,
    m_step_psd,
    m_step_scm,
    run_em,
    select_top_sources,
)
from .avi import (
    Adam,
    GradcheckReport,
    LocalizationMap,
    MaskNetwork,
    ReferenceMaskNet,
    SoftmaxLocalizer,
    TrainingContext,
    avg_power,
    fit_mask_network,
    gradcheck,
    load_checkpoint,
    log_magnitude_features,
    save_checkpoint,
    train_step,
    training_elbo,
)
from .errors import (
    AudioIOError,
    CgmmsepError,
    CheckpointError,
    ConfigError,
    ConfigMismatchError,
    DimensionError,
    InputTooShortError,
    NumericError,
)
from .estimators import AviMaskEstimator, CgmmSeparator
from .signal import (
    Spectrogram,
    StftConfig,
    Waveform,
    apply_masks,
    istft,
    load_spectrogram,
    load_tensor,
    read_wav,
    save_spectrogram,
    save_tensor,
    stft,
    write_wav,
)
from .simbench import (
    GroundTruth,
    Scene,
    doa_error,
    image_method_rir,
    mix_planewave,
    mix_reverberant,
    permutation_align,
    si_sdr,
)
from .spatial import (
    ArrayGeometry,
    DirectionGrid,
    Hyperparams,
    SteeringTemplate,
    build_templates,
    log_cgauss,
    quadratic_forms,
    spatial_features,
    steering_vector,
)

__version__ = "0.1.0"
