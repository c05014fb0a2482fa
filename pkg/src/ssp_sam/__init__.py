"""Semantic-spatial prompt encoder bridging toy CLIP and toy SAM for referring segmentation."""

from ssp_sam.errors import ConfigError, DataError, InvalidInputError, NumericalError

__version__ = "0.1.0"

__all__ = ["ConfigError", "DataError", "InvalidInputError", "NumericalError", "__version__"]
