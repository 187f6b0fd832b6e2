"""I/O 與外部儲存：feature file codec、trace / sidecar、results ledger"""

from emtrack.infrastructure.feature_file import (
    FeatureFileError, FeatureSequence, read_features, write_features, write_sequence,
)
from emtrack.infrastructure.results_db import ResultsDB
from emtrack.infrastructure.trace_io import (
    TRACE_COLUMNS, TraceFile, read_ground_truth, read_reference, read_trace,
    write_ground_truth, write_reference, write_trace,
)

__all__ = [
    'FeatureFileError', 'FeatureSequence', 'read_features', 'write_features', 'write_sequence',
    'ResultsDB',
    'TRACE_COLUMNS', 'TraceFile', 'read_ground_truth', 'read_reference', 'read_trace',
    'write_ground_truth', 'write_reference', 'write_trace',
]
