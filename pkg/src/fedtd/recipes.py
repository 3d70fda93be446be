"""The five standard experiments, at desk scale and at full scale.

Desk scale (|S| = 10, |A| = 5, d = 3, 100 runs) finishes in seconds to
minutes. Full scale (|S| = |A| = 100, d = 21, T = 1e4, 300 runs) is what
``--paper-scale`` selects.
"""

from __future__ import annotations

from .errors import ConfigError
from .experiments import ExperimentConfig

PAPER_SCALE = {"n_states": 100, "n_actions": 100, "d": 21, "T": 10_000, "n_runs": 300}
DESK_SCALE = {"n_states": 10, "n_actions": 5, "d": 3, "T": 10_000, "n_runs": 100}

_COMMON = {"eps_p": [0.5], "eps_r": [0.5], "beta": [0.6], "r_max": 1.0, "gamma": 0.3}

_RECIPES = {
    # error vs t for several N
    "rate": [dict(n_agents=[2, 5, 10, 20])],
    "beta": [dict(n_agents=[10], beta=[0.2, 0.4, 0.6, 0.8])],
    "eps_r": [dict(n_agents=[10], eps_r=[0.5, 1.0, 5.0, 10.0], r_max="auto")],
    "eps_p": [dict(n_agents=[10], eps_p=[0.2, 0.4, 0.6, 0.8])],
    "iid": [dict(n_agents=[10], mode="markovian"), dict(n_agents=[10], mode="iid")],
}

RECIPE_NAMES = tuple(_RECIPES)


def recipe(name: str, algorithm: str = "avg", paper_scale: bool = False, **overrides) -> list[ExperimentConfig]:
    """Configs for one named experiment; ``overrides`` apply last."""
    if name not in _RECIPES:
        raise ConfigError(f"unknown recipe {name!r}; choose from {RECIPE_NAMES}", "recipe")
    scale = PAPER_SCALE if paper_scale else DESK_SCALE
    out = []
    for part in _RECIPES[name]:
        tag = f"{name}_{algorithm}" + (f"_{part['mode']}" if "mode" in part else "")
        obj = {"name": tag, "algorithm": algorithm, **scale, **_COMMON, **part, **overrides}
        out.append(ExperimentConfig.from_dict(obj))
    return out
