"""
Utility modules for the segmentation toolkit.

Provides config validation, data validation and thread helpers.
"""

from . import config_validator
from . import validation
from . import threads

__all__ = [
    "config_validator",
    "validation",
    "threads",
]
