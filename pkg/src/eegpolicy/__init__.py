"""EEG band-power features to individualized treatment rules.

Modules, in pipeline order: ``eeg_io`` (recordings, feature tables),
``preprocess`` (filters, bad channels, epoch rejection), ``spectral``
(multitaper band power), ``causal_forest`` (honest CATE forest),
``effects`` (doubly robust ATE, BLP calibration test), ``policy``
(tree/Q/O treatment rules), ``sim`` (synthetic benchmark), ``cli``
(staged pipeline with a cached manifest).
"""

from eegpolicy.causal_forest import (
    ForestParams,
    fit_causal_forest,
    load_model,
    predict_cate,
    save_model,
    variable_importance,
)
from eegpolicy.effects import ate, blp_from_model, blp_test, doubly_robust_scores
from eegpolicy.policy import (
    estimate_value,
    o_learning_fit,
    q_learning_fit,
    search_policy_tree,
)
from eegpolicy.sim import default_spec, generate_dataset, run_benchmark

__version__ = "0.1.0"

__all__ = [
    "ForestParams",
    "fit_causal_forest",
    "predict_cate",
    "save_model",
    "load_model",
    "variable_importance",
    "doubly_robust_scores",
    "ate",
    "blp_test",
    "blp_from_model",
    "search_policy_tree",
    "q_learning_fit",
    "o_learning_fit",
    "estimate_value",
    "default_spec",
    "generate_dataset",
    "run_benchmark",
    "__version__",
]
