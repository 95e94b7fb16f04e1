"""Export image-folder datasets to EBNK embedding banks with a frozen encoder."""

__version__ = "0.1.0"

from .errors import DatasetError, SpecError                     # noqa: F401
from .export import (DEFAULT_TEMPLATE, ExportReport, ExportSpec,  # noqa: F401
                     alignment_fraction, export_pair, export_textual,
                     export_visual)
