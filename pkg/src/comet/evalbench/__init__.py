from comet.evalbench.metrics import EvalResult, aggregate, attribute_breakdown, ope_metrics
from comet.evalbench.report import REPORT_FILES, emit_report
from comet.evalbench.sequences import (SequenceFormatError, SequenceRecord, load_sequence, parse_boxes,
                                       write_boxes, write_sequence)
from comet.evalbench.synth import PRESETS, SynthConfig, synth_sequence

__all__ = [
    "EvalResult", "PRESETS", "REPORT_FILES", "SequenceFormatError", "SequenceRecord", "SynthConfig",
    "aggregate", "attribute_breakdown", "emit_report", "load_sequence", "ope_metrics", "parse_boxes",
    "synth_sequence", "write_boxes", "write_sequence",
]
