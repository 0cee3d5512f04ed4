"""Joint predictive distributions: metrics, agents, approximate Thompson sampling and information-theoretic checks."""

__version__ = "0.1.0"
