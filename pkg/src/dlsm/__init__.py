"""Bayesian inference for dynamic zero-inflated Poisson latent-space
eigenmodels on series of undirected count networks."""
from .model_core import (AugmentedState, ConfigError, GlobalParams,
                         LatentState, ModelConfig, NetworkSeries,
                         log_intensity, zero_inflation_probability)

__version__ = '0.1.0'

__all__ = ['AugmentedState', 'ConfigError', 'GlobalParams', 'LatentState',
           'ModelConfig', 'NetworkSeries', 'log_intensity',
           'zero_inflation_probability', '__version__']
