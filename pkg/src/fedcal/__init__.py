"""One-shot federated Bayesian ensembles with calibrated aggregation."""

__version__ = "0.1.0"
