"""G-estimation of decay structural mean models for trials with non-adherence."""

__version__ = "0.1.0"
