"""Default Alzheimer's-style causal graph and the calibrated ground-truth
mechanism set used to bootstrap synthetic cohorts.

Variables: age (a), sex (s), cognitive score (m), brain volume (b),
ventricle volume (v), grey-matter volume (g); the three volumes feed the
image generator. Edge set: a,s -> m and a,s,m -> each volume. Coefficients
are chosen so population means land near (1354, 527, 41) ml for brain, GM
and ventricle, the score declines with age and the score-ventricle
correlation is clearly negative.
"""

from __future__ import annotations

from .mechanisms import linear_gaussian_mechanism
from .scm import CausalGraph, VariableSpec

__all__ = [
    "default_ad_graph",
    "ground_truth_mechanisms",
    "GROUND_TRUTH_MEANS",
    "SCORE_CENTER",
]

# population means the decoder calibration also targets (ml)
GROUND_TRUTH_MEANS = {"b": 1354.0, "g": 527.0, "v": 41.0}

# cohort-average cognitive score the volume mechanisms are centered on
SCORE_CENTER = 24.0
AGE_CENTER = 72.0


def default_ad_graph() -> CausalGraph:
    """The default graph over a, s, m, b, v, g with volume image parents."""
    variables = [
        VariableSpec("a", "continuous", None),
        VariableSpec("s", "binary"),
        VariableSpec("m", "continuous", (0.0, 30.0)),
        VariableSpec("b", "continuous", (600.0, 2400.0)),
        VariableSpec("v", "continuous", (5.0, 250.0)),
        VariableSpec("g", "continuous", (150.0, 1200.0)),
    ]
    edges = [
        ("a", "m"), ("s", "m"),
        ("a", "b"), ("s", "b"), ("m", "b"),
        ("a", "v"), ("s", "v"), ("m", "v"),
        ("a", "g"), ("s", "g"), ("m", "g"),
    ]
    priors = {
        "a": {"type": "truncated_normal", "mean": AGE_CENTER, "std": 8.0, "bounds": [50.0, 95.0]},
        "s": {"type": "bernoulli", "p": 0.5},
    }
    return CausalGraph(variables, edges, image_parents=("b", "v", "g"), priors=priors)


def ground_truth_mechanisms() -> dict:
    """Closed-form linear-Gaussian mechanisms calibrated to the target means.

    Score worsens with age; a lower score shrinks brain and grey matter and
    enlarges the ventricle. Sex (1 = male) scales all volumes up.
    """
    return {
        # m = 26 - 0.08 (a - 50) - 0.4 s + 2 u      (clamped to [0, 30] downstream)
        "m": linear_gaussian_mechanism(
            "m", ["a", "s"], [-0.08, -0.4], 26.0 + 0.08 * 50.0, 2.0
        ),
        # volumes: mean + age/sex/score effects around cohort centers
        "b": _centered_volume_mechanism("b", 1354.0, age=-2.2, sex=130.0, score=3.5, sigma=40.0),
        "v": _centered_volume_mechanism("v", 41.0, age=0.5, sex=4.0, score=-2.0, sigma=5.0),
        "g": _centered_volume_mechanism("g", 527.0, age=-1.4, sex=40.0, score=5.0, sigma=25.0),
    }


def _centered_volume_mechanism(target, mean, age, sex, score, sigma):
    intercept = mean - age * AGE_CENTER - sex * 0.5 - score * SCORE_CENTER
    return linear_gaussian_mechanism(target, ["a", "s", "m"], [age, sex, score], intercept, sigma)
