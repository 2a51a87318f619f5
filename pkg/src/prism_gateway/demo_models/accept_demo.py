"""Stand-in COPD exacerbation risk calculator plugin.

A shape-faithful demo of a clinical prediction model: 21 input fields, two
predicted outputs, strict domain checks. The coefficients are invented and
centered on the default patient, so the default linear predictor is exactly
zero and the default severe-exacerbation probability is exactly 0.5 — this
model makes no clinical claims.
"""

from __future__ import annotations

import math
import sys
from typing import Optional

from ..plugin import PluginInputError, run_plugin
from .. import wire

DEFAULT_INPUT = {
    "ID": 10001,
    "male": 1,
    "age": 70,
    "smoker": 1,
    "oxygen": 1,
    "statin": 1,
    "LAMA": 1,
    "LABA": 1,
    "ICS": 1,
    "FEV1": 33,
    "BMI": 25,
    "SGRQ": 50,
    "LastYrExacCount": 2,
    "LastYrSevExacCount": 1,
    "randomized_azithromycin": 1,
    "randomized_statin": 0,
    "randomized_LAMA": 0,
    "randomized_LABA": 0,
    "randomized_ICS": 0,
    "random_sampling_N": 100,
    "calculate_CIs": False,
}

_BINARY_FIELDS = (
    "male",
    "smoker",
    "oxygen",
    "statin",
    "LAMA",
    "LABA",
    "ICS",
    "randomized_azithromycin",
    "randomized_statin",
    "randomized_LAMA",
    "randomized_LABA",
    "randomized_ICS",
)


def _number(params: dict, name: str) -> float:
    v = params[name]
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise PluginInputError(f"field {name!r} must be a number")
    return float(v)


def validate(params: dict) -> dict:
    merged = dict(DEFAULT_INPUT)
    merged.update(params or {})
    for name in _BINARY_FIELDS:
        if _number(merged, name) not in (0.0, 1.0):
            raise PluginInputError(f"field {name!r} must be 0 or 1")
    age = _number(merged, "age")
    if not 40 <= age <= 110:
        raise PluginInputError("field 'age' must be in [40, 110]")
    fev1 = _number(merged, "FEV1")
    if not 0 < fev1 <= 150:
        raise PluginInputError("field 'FEV1' must be in (0, 150]")
    for name in ("LastYrExacCount", "LastYrSevExacCount"):
        if _number(merged, name) < 0:
            raise PluginInputError(f"field {name!r} must be non-negative")
    if not isinstance(merged["calculate_CIs"], bool) and _number(
        merged, "calculate_CIs"
    ) not in (0.0, 1.0):
        raise PluginInputError("field 'calculate_CIs' must be a boolean")
    return merged


def linear_predictor(params: dict) -> float:
    """Centered so every default term vanishes."""
    return (
        0.03 * (_number(params, "age") - 70)
        + 0.15 * (_number(params, "male") - 1)
        + 0.4 * (_number(params, "LastYrSevExacCount") - 1)
        + 0.25 * (_number(params, "LastYrExacCount") - 2)
        - 0.02 * (_number(params, "FEV1") - 33)
        + 0.01 * (_number(params, "SGRQ") - 50)
        + 0.3 * (_number(params, "oxygen") - 1)
    )


def predict(params: Optional[dict]) -> dict:
    merged = validate(params or {})
    lp = linear_predictor(merged)
    probability = 1.0 / (1.0 + math.exp(-lp))
    rate = math.exp(0.3 * lp) * 1.5
    return {
        "ID": merged["ID"],
        "predicted_severe_exac_probability": probability,
        "predicted_exac_rate": rate,
    }


def handle(func: str, model_input: Optional[dict], seed: Optional[int]) -> dict:
    if func == wire.FUNC_GET_DEFAULT_INPUT:
        return dict(DEFAULT_INPUT)
    return predict(model_input)


if __name__ == "__main__":
    sys.exit(run_plugin(handle))
