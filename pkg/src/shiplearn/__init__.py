"""Bayesian spillover learning and shipping-choice estimation.

Shipment records become a half-week choice panel; per-customer quality
beliefs evolve under one of six learning rules; a demand-arrival +
binary-logit purchase model is estimated by simulated maximum
likelihood; counterfactual quality scenarios are simulated with shared
random streams for exact revenue-loss accounting.
"""

__version__ = "0.1.0"

from shiplearn.errors import InputError, NumericalError  # noqa: F401
