"""EEG sequence classifier: downsampling projector, dual-stream
temporal-spatial blocks (causal TCN + stabilized transformer), parallel
dropout branches, and a self-contained autodiff engine."""

from .attention import AttentionLayer, StableTransformer, TransformerBlock, attend, block_forward, stack_forward
from .data import (
    Scaler,
    Trial,
    TrialSet,
    apply_scaler,
    fit_scaler,
    load_trialset,
    save_trialset,
    synth_trials,
)
from .model import (
    DownsamplingProjector,
    DstsBlock,
    EEGEncoder,
    ModelConfig,
    dsts_forward,
    load_checkpoint,
    model_forward,
    projector_forward,
    save_checkpoint,
)
from .nn import LinearLayer, RmsNormLayer, cross_entropy_smoothed, elu, rms_norm, swiglu
from .tcn import TcnBlock, TcnStack, causal_conv1d, tcn_forward
from .tensor import (
    ContractError,
    DimensionError,
    NonFiniteError,
    StateError,
    Tape,
    Tensor,
    backward,
    no_grad,
    set_debug_checks,
)
from .training import AdamState, EvalReport, ModelState, TrainConfig, adam_step, evaluate, train

__version__ = "0.1.0"
