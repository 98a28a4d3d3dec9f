"""
Exception hierarchy shared by every subpackage
The CLI maps these onto process exit codes
"""

from typing import Optional


class LocalizerError(Exception):
    """Base class for all uncertainty-localizer errors"""


class ShapeError(LocalizerError, ValueError):
    """Array dimensions do not agree with what an operation expects"""


class ConfigError(LocalizerError, ValueError):
    """Invalid or inconsistent configuration"""


class CorruptFileError(LocalizerError):
    """A binary file is truncated or its payload disagrees with its header"""


class FormatVersionError(LocalizerError):
    """Wrong magic bytes or unsupported format version"""


class DatasetError(LocalizerError):
    """Manifest, GT file or video records are inconsistent"""


class VocabularyError(LocalizerError):
    """A label is not part of the class vocabulary"""


class GenerationError(LocalizerError):
    """Synthetic data could not be generated for the requested spec"""


class NumericalError(LocalizerError):
    """NaN or Inf appeared during optimization"""

    def __init__(self, message: str, block: Optional[str] = None, step: Optional[int] = None):
        super().__init__(message)
        self.block = block
        self.step = step
