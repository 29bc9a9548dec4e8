"""Post-hoc tuning of frozen trading policies with a parameterised program sketch."""

__version__ = "0.1.0"

from .sketch import Mode, SketchParams, SketchTemplate, TrendLabel, default_template, interpret, parse_sketch  # noqa: E402
from .policy import EnsemblePolicy, TunedPolicy, temperature_tune, tuned_policy  # noqa: E402

__all__ = [
    "__version__",
    "Mode",
    "SketchParams",
    "SketchTemplate",
    "TrendLabel",
    "default_template",
    "interpret",
    "parse_sketch",
    "EnsemblePolicy",
    "TunedPolicy",
    "temperature_tune",
    "tuned_policy",
]
