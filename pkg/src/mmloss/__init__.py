"""Minimum-margin joint supervision for embedding learning, with a numpy trainer and evaluation kit."""

from .centres import CentreBank, apply_update, centre_delta, init_centres
from .errors import ConfigError, DataError, DivergenceError, LabelError, MMLossError, ProtocolError, ShapeError
from .losses import ClassifierHead, MmlConfig, centre_loss, marginal_loss, mml, range_loss, softmax_ce, total_loss

__version__ = "0.1.0"
