"""Named hyperparameter presets.

Each preset is ``(model kind, {"gbdt": {...}} or {"dnn": {...}})`` holding
the tuned values reported for one dataset. Values printed as ``0.000`` are
stored as 0 (regulariser switched off). Two LPMC network learning rates
printed as ``0.000`` sit below the tuned range and are stored at its lower
end, ``1e-4``. GBDT learning rates are omitted because the default rule
``min(0.1, 1 / min_i M_i)`` reproduces them.
"""

from __future__ import annotations

import copy

from .errors import ConfigError


def _g(num_leaves, ff, bf, freq, min_data, max_bin, min_hess, min_gain, l1=0.0, l2=0.0):
    return {"gbdt": {
        "num_leaves": num_leaves, "feature_fraction": ff, "bagging_fraction": bf,
        "bagging_freq": freq, "min_data_in_leaf": min_data, "max_bin": max_bin,
        "min_sum_hessian_in_leaf": min_hess, "min_gain_to_split": min_gain,
        "lambda_l1": l1, "lambda_l2": l2,
    }}


def _d(layers, act, bn, dropout, batch, lr, l1=0.0, l2=0.0):
    return {"dnn": {
        "layer_sizes": layers, "activation": act, "batch_norm": bn, "dropout": dropout,
        "batch_size": batch, "learning_rate": lr, "lambda_l1": l1, "lambda_l2": l2,
    }}


PRESETS = {
    # synthetic benchmark
    "synthetic/FI-RUMBoost": ("FI-RUMBoost", _g(94, 0.437, 0.491, 1, 57, 85, 0.108, 6.118)),
    "synthetic/FI-DNN": ("FI-DNN", _d([128, 64], "sigmoid", True, 0.193, 512, 0.002289,
                                      l1=0.012898, l2=0.000004)),
    # swissmetro
    "swissmetro/FIS-GBDT": ("FIS-GBDT", _g(150, 0.892, 1.0, 4, 62, 426, 0.258, 0.003)),
    "swissmetro/FS-GBDT": ("FS-GBDT", _g(77, 0.768, 0.879, 6, 108, 270, 0.0, 0.002, l2=0.003)),
    "swissmetro/FI-RUMBoost": ("FI-RUMBoost", _g(244, 0.677, 0.443, 7, 39, 272, 0.0, 0.0, l1=0.053)),
    "swissmetro/RUMBoost": ("RUMBoost", _g(165, 0.403, 0.999, 2, 32, 282, 0.0, 0.001)),
    "swissmetro/FIS-DNN": ("FIS-DNN", _d([64, 128], "tanh", False, 0.449, 256, 0.005, l1=0.002, l2=0.005)),
    "swissmetro/FS-DNN": ("FS-DNN", _d([64, 128, 64], "relu", True, 0.679, 512, 0.006)),
    "swissmetro/FI-DNN": ("FI-DNN", _d([64, 128], "sigmoid", True, 0.892, 256, 0.006)),
    # lpmc
    "lpmc/FIS-GBDT": ("FIS-GBDT", _g(3, 0.583, 0.759, 4, 87, 470, 0.0, 0.0, l2=0.001)),
    "lpmc/FS-GBDT": ("FS-GBDT", _g(3, 0.860, 0.720, 7, 37, 152, 0.0, 0.870)),
    "lpmc/FI-RUMBoost": ("FI-RUMBoost", _g(73, 0.960, 0.592, 2, 124, 85, 0.0, 2.373, l1=0.591, l2=0.076)),
    "lpmc/RUMBoost": ("RUMBoost", _g(236, 0.978, 0.634, 2, 61, 474, 3.083, 0.001)),
    "lpmc/FIS-DNN": ("FIS-DNN", _d([32, 32], "tanh", True, 0.224, 256, 1e-4, l2=0.001)),
    "lpmc/FS-DNN": ("FS-DNN", _d([64, 64], "tanh", True, 0.739, 256, 1e-4, l2=0.068)),
    "lpmc/FI-DNN": ("FI-DNN", _d([32], "tanh", False, 0.533, 256, 0.010)),
    # easySHARE (ordinal)
    "easyshare/FIS-GBDT": ("FIS-GBDT", _g(3, 0.788, 0.998, 2, 159, 209, 0.0, 0.0, l1=0.521)),
    "easyshare/FS-GBDT": ("FS-GBDT", _g(3, 0.708, 0.998, 1, 173, 363, 0.098, 3.631)),
    "easyshare/FI-RUMBoost": ("FI-RUMBoost", _g(11, 0.492, 0.879, 1, 194, 95, 2.234, 5.169, l2=0.001)),
    "easyshare/RUMBoost": ("RUMBoost", _g(74, 0.720, 0.863, 3, 127, 219, 0.0, 0.0)),
    "easyshare/FIS-DNN": ("FIS-DNN", _d([128, 64], "sigmoid", True, 0.659, 256, 0.001)),
    "easyshare/FS-DNN": ("FS-DNN", _d([32, 32], "sigmoid", False, 0.003, 256, 0.002)),
    "easyshare/FI-DNN": ("FI-DNN", _d([32, 32], "sigmoid", False, 0.553, 256, 0.004, l2=0.036)),
}


def get_preset(name: str):
    """Return ``(kind, settings)`` for ``name``; settings are a fresh copy."""
    try:
        kind, settings = PRESETS[name]
    except KeyError:
        raise ConfigError(f"preset: unknown preset {name!r}; available: {sorted(PRESETS)}") from None
    return kind, copy.deepcopy(settings)
