"""Tactile-vision-language contrastive learning with sensor decoupling and shared adapters."""

from .errors import TLVCoreError

__version__ = "0.1.0"

__all__ = ["TLVCoreError", "__version__"]
