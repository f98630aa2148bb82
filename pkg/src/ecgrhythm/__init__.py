"""Rhythm classification of short single-lead ECG records.

The pipeline interprets each record as a sequence of delineated beats and
rhythm episodes, summarizes it into clinically meaningful global and per-beat
features, and classifies with gradient-boosted trees, an LSTM sequence model,
and a linear-discriminant stacker.
"""

__version__ = "0.1.0"

from .config import CLASSES, PipelineConfig
from .signal_io import Record, load_record, resample, synth_record, write_record

__all__ = [
    "CLASSES",
    "PipelineConfig",
    "Record",
    "load_record",
    "resample",
    "synth_record",
    "write_record",
    "__version__",
]
