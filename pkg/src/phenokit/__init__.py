"""Phenotypic profiling from multi-channel cell images.

Modules: ``tensor`` (autodiff arrays), ``model`` (network), ``objectives``
(losses), ``train``, ``dataio``, ``profiles`` (aggregation and batch
correction), ``evaluation`` (retrieval metrics) and ``cli``.
"""
from .errors import CheckpointError, InputError, InvariantError, NonFiniteError, PhenokitError

__version__ = "0.1.0"

__all__ = ["CheckpointError", "InputError", "InvariantError", "NonFiniteError", "PhenokitError", "__version__"]
