"""framegate: multi-label frame-sequence classification at desk scale.

Three classifiers over per-frame feature sequences (bag-of-frames max
pooling, stacked LSTM with time-weighted output aggregation, LSTM with a
sparsely-gated mixture-of-experts layer), built on a small float64 layer
library with hand-written backprop, plus exact ranking metrics, an
imbalance-penalized loss, synthetic corpus generation, and a reproducible
experiment CLI.
"""

from .dataio import (Batch, FrameRecord, LabelStats, RecordCorpus,
                     SyntheticSpec, generate_synthetic, label_stats,
                     make_batches, read_records, write_records)
from .metrics import EvalResult, PredictionSet, evaluate, gap, hit_at_1
from .models import (BoFConfig, BoFModel, LSTMMoEConfig, LSTMMoEModel,
                     SimpleLSTMConfig, SimpleLSTMModel, build_model,
                     evaluate_model, load_checkpoint, predict,
                     save_checkpoint, train_step)
from .moe import MoEConfig
from .nn_core import (Parameter, RMSProp, grad_check, penalty_from_counts,
                      sigmoid_cross_entropy)

__version__ = "0.1.0"

__all__ = [
    "Batch", "FrameRecord", "LabelStats", "RecordCorpus", "SyntheticSpec",
    "generate_synthetic", "label_stats", "make_batches", "read_records",
    "write_records",
    "EvalResult", "PredictionSet", "evaluate", "gap", "hit_at_1",
    "BoFConfig", "BoFModel", "LSTMMoEConfig", "LSTMMoEModel",
    "SimpleLSTMConfig", "SimpleLSTMModel", "build_model", "evaluate_model",
    "load_checkpoint", "predict", "save_checkpoint", "train_step",
    "MoEConfig",
    "Parameter", "RMSProp", "grad_check", "penalty_from_counts",
    "sigmoid_cross_entropy",
    "__version__",
]
