"""Mel-conditioned waveform flow with mixture-of-logistics CDF couplings."""
from .config import Config
from .errors import ConfigurationError, FlowVocoderError, InputError, NumericFailure
from .estimator import FlowVocoder
from .flowstack import FlowModel, flow_forward, flow_reverse, log_likelihood
from .synthesis import synthesize

__all__ = ["Config", "ConfigurationError", "FlowModel", "FlowVocoder", "FlowVocoderError",
           "InputError", "NumericFailure", "flow_forward", "flow_reverse", "log_likelihood",
           "synthesize"]
