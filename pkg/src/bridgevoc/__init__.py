"""Schrodinger-bridge neural vocoder: range-space spectral surrogate to waveform."""

from .bcd import BCD, BCDConfig
from .bridge import (
    BridgeSchedule,
    DiffusionState,
    SamplerConfig,
    make_schedule,
    marginal,
    reverse_ode_step,
    reverse_sde_step,
    sample,
    sample_xt,
    timestep_grid,
)
from .distill import DistillConfig, DistillWeights, omni_distill_loss, teacher_reverse
from .melrnd import (
    MelFilterbank,
    MelSpectrum,
    build_mel_filterbank,
    matrix_rank,
    mel_spectrum,
    rank_difference,
    rss_surrogate,
)
from .metrics import multi_resolution_stft
from .objectives import DiscriminatorBank, LossWeights, data_loss, mel_loss, total_gen_loss
from .spectral import (
    ComplexSpectrum,
    CompressionConfig,
    StftConfig,
    compress,
    decompress,
    istft,
    load_wav,
    save_wav,
    stft,
)
from .training import DatasetManifest, TrainConfig, build_train_state, train_loop, train_step

__version__ = "0.1.0"
