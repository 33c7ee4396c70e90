"""opushield: desk-scale lab for an optical random-projection defense.

A simulated photonic co-processor (fixed complex Gaussian projection behind
a sealed interface, 1-bit in / 8-bit out), a feedback-alignment-trained
classifier head for frozen robust features, a white/black-box adversarial
attack suite with surrogate backward passes, and a matrix-retrieval attack
sweep quantifying what partial knowledge of the projection buys an attacker.
"""

__version__ = "0.1.0"

from .errors import (
    CalibrationError,
    CapabilityDisabledError,
    ConfigError,
    DataError,
    DimensionError,
    IdxParseError,
    InvalidArgumentError,
    OpushieldError,
    ReportSchemaError,
    StateError,
    TrainingDivergedError,
)
from .opu import OpuHandle, QuantizationSpec, TransmissionMatrix, opu_new
from .model import (
    AblationFlags,
    ClassifierParams,
    ForwardTrace,
    accuracy,
    bpda_input_gradient,
    classifier_forward,
    init_params,
    predict,
)
from .dfa import TrainConfig, TrainResult, bp_step, dfa_step, train
from .base import (
    AdvTrainConfig,
    BaseNet,
    adv_train,
    extract_features,
    freeze,
    init_base,
    retrain_plain_classifier,
)
from .attacks import (
    AttackConfig,
    AttackOutcome,
    apgd,
    apgd_targeted,
    auto_cascade,
    fgsm,
    pgd,
    square_attack,
    transfer_attack,
)
from .retrieval import RetrievalModel, SweepGrid, build_retrieved, retrieval_gradient, sweep
from .data import Dataset, load_idx, make_two_blobs
from .config import ExperimentConfig, load_config, preset_config, save_config
from .report import EvalRow, EvalTable, load_report, save_report
