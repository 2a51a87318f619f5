"""Stand-in stochastic COPD cohort simulation plugin.

Simulates independent agents over whole years with three hazards (death,
disease onset, exacerbations) and reports aggregate person-time, event, and
discounted cost/QALY totals. Runs are deterministic given (input, seed)
via the counter-based generator in ``_rng``; without a seed the plugin
picks one at random.

Per-year dynamics for an agent alive at the start of year t (t = 1..H,
age = age0 + t - 1):

1. dies with probability 1 - exp(-death_base * 1.06^(age - 40)); a death
   year contributes no person-time,
2. otherwise contributes one person-year; a non-diseased agent acquires
   the disease with probability 1 - exp(-copd_incidence),
3. a diseased agent (including newly diseased) draws that year's
   exacerbations from Poisson(exac_rate).

Costs are 100 per exacerbation and QALYs 0.8 per person-year, each
discounted by 1/(1+rate)^t at the end of year t.

Counter paths: uniform(seed, purpose, agent, year) with purpose 1 = death,
2 = disease onset, 3 = exacerbation count.
"""

from __future__ import annotations

import math
import os
import sys
from typing import Optional

from ..plugin import PluginInputError, run_plugin
from .. import wire
from ._rng import poisson, uniform

_DEATH, _ONSET, _EXAC = 1, 2, 3

DEFAULT_INPUT = {
    "global_parameters.age0": 40,
    "global_parameters.time_horizon": 20,
    "global_parameters.discount_cost": 0.03,
    "global_parameters.discount_qaly": 0.03,
    "agent.p_female": 0.5,
    "agent.n_agents": 1000,
    "agent.height_0_betas": wire.Matrix(((1.8266, -0.1309, -0.0012, 2.31e-06, -2e-04),)),
    "hazards.death_base": 0.01,
    "hazards.copd_incidence": 0.02,
    "hazards.exac_rate": 0.5,
}

COST_PER_EXAC = 100.0
QALY_PER_YEAR = 0.8


def _number(params: dict, name: str) -> float:
    v = params[name]
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise PluginInputError(f"parameter {name!r} must be a number")
    return float(v)


def validate(params: Optional[dict]) -> dict:
    merged = dict(DEFAULT_INPUT)
    merged.update(params or {})
    if not 0.0 <= _number(merged, "agent.p_female") <= 1.0:
        raise PluginInputError("'agent.p_female' must be a probability in [0, 1]")
    horizon = _number(merged, "global_parameters.time_horizon")
    if horizon < 0 or horizon != int(horizon):
        raise PluginInputError("'global_parameters.time_horizon' must be a whole number of years >= 0")
    n_agents = _number(merged, "agent.n_agents")
    if n_agents < 0 or n_agents != int(n_agents):
        raise PluginInputError("'agent.n_agents' must be a whole number >= 0")
    for name in ("hazards.death_base", "hazards.copd_incidence", "hazards.exac_rate"):
        if _number(merged, name) < 0:
            raise PluginInputError(f"{name!r} must be a non-negative rate")
    for name in ("global_parameters.discount_cost", "global_parameters.discount_qaly"):
        if _number(merged, name) < 0:
            raise PluginInputError(f"{name!r} must be non-negative")
    return merged


def simulate(params: Optional[dict], seed: int) -> dict:
    merged = validate(params)
    age0 = _number(merged, "global_parameters.age0")
    horizon = int(_number(merged, "global_parameters.time_horizon"))
    discount_cost = _number(merged, "global_parameters.discount_cost")
    discount_qaly = _number(merged, "global_parameters.discount_qaly")
    n_agents = int(_number(merged, "agent.n_agents"))
    death_base = _number(merged, "hazards.death_base")
    copd_incidence = _number(merged, "hazards.copd_incidence")
    exac_rate = _number(merged, "hazards.exac_rate")

    p_onset = 1.0 - math.exp(-copd_incidence)
    p_death_by_year = [
        1.0 - math.exp(-death_base * 1.06 ** (age0 + t - 1 - 40))
        for t in range(1, horizon + 1)
    ]

    cumul_time = 0
    n_deaths = 0
    n_copd = 0
    total_exac = 0
    exac_by_year = [0] * (horizon + 1)
    time_by_year = [0] * (horizon + 1)

    for agent in range(n_agents):
        has_copd = False
        for t in range(1, horizon + 1):
            if uniform(seed, _DEATH, agent, t) < p_death_by_year[t - 1]:
                n_deaths += 1
                break
            cumul_time += 1
            time_by_year[t] += 1
            if not has_copd and uniform(seed, _ONSET, agent, t) < p_onset:
                has_copd = True
                n_copd += 1
            if has_copd:
                k = poisson(uniform(seed, _EXAC, agent, t), exac_rate)
                total_exac += k
                exac_by_year[t] += k

    total_cost = sum(
        COST_PER_EXAC * exac_by_year[t] / (1.0 + discount_cost) ** t
        for t in range(1, horizon + 1)
    )
    total_qaly = sum(
        QALY_PER_YEAR * time_by_year[t] / (1.0 + discount_qaly) ** t
        for t in range(1, horizon + 1)
    )

    return {
        "n_agents": n_agents,
        "cumul_time": cumul_time,
        "n_deaths": n_deaths,
        "n_COPD": n_copd,
        "total_exac": total_exac,
        "total_cost": total_cost,
        "total_qaly": total_qaly,
    }


def handle(func: str, model_input: Optional[dict], seed: Optional[int]) -> dict:
    if func == wire.FUNC_GET_DEFAULT_INPUT:
        return dict(DEFAULT_INPUT)
    if seed is None:
        seed = int.from_bytes(os.urandom(8), "big") >> 11
    return simulate(model_input, seed)


if __name__ == "__main__":
    sys.exit(run_plugin(handle))
