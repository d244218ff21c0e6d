"""Generate realistic, extreme grid samples at a user-chosen extremeness probability.

Modules: :mod:`exgen.evt` (GPD tail math), :mod:`exgen.dataset`,
:mod:`exgen.substrate` (tensors, layers, Adam), :mod:`exgen.gan`,
:mod:`exgen.pipeline` (distribution shifting, conditional generation,
rejection baseline), :mod:`exgen.metrics` and :mod:`exgen.cli`.
"""

from .evt import GpdParams, adjust_probability, extremeness_level, fit_gpd, gpd_cdf, gpd_quantile

__version__ = "0.1.0"

__all__ = [
    "GpdParams",
    "adjust_probability",
    "extremeness_level",
    "fit_gpd",
    "gpd_cdf",
    "gpd_quantile",
    "__version__",
]
