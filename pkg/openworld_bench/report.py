"""
Evaluation report rows, CSV/JSON emission and replay of stored attack artifacts.
"""

import csv
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .metrics import DATA_KINDS
from .models import Classifier, predict_batch
from .utils import BenchError

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
CSV_COLUMNS = ('model', 'data_source', 'data_kind', 'attack', 'defense',
               'tsr', 'accuracy', 'mean_conf', 'det_rate', 'fpr', 'queries')
KEY_COLUMNS = CSV_COLUMNS[:5]
VALUE_COLUMNS = CSV_COLUMNS[5:]
RATE_COLUMNS = ('tsr', 'accuracy', 'det_rate', 'fpr')
NONE_LABEL = 'none'
DECIMALS = 4
FORMATS = ('csv', 'json')

# Published numbers on models this bench does not train; carried for context only.
LITERATURE_ROWS: Tuple[Dict[str, Any], ...] = (
    {'setting': 'CIFAR-10 WRN-28-10, OOD-adv from ImageNet, undefended',
     'metric': 'tsr / mean_conf', 'value': '100.0 / 1.00'},
    {'setting': 'CIFAR-10 WRN-28-10, OOD-adv from ImageNet, adversarially trained',
     'metric': 'tsr / mean_conf', 'value': '22.9 / 0.81'},
    {'setting': 'MNIST-as-OOD on CIFAR-10 WRN, unmodified',
     'metric': 'min / max expected confidence', 'value': '0.00 / 0.62'},
    {'setting': 'MNIST-as-OOD on CIFAR-10 WRN, adversarial',
     'metric': 'min / max expected confidence', 'value': '0.99 / 1.00'},
    {'setting': 'feature squeezing, adaptive OOD-adv attack',
     'metric': 'tsr', 'value': '100.0'},
    {'setting': 'MagNet on MNIST, adaptive OOD-adv attack',
     'metric': 'tsr', 'value': '32.3'},
    {'setting': 'OOD detectors on unmodified OOD inputs',
     'metric': 'detection rate', 'value': 'close to 85'},
)


class ReportError(BenchError):
    pass


def _rounded(value: Optional[float], column: str) -> Optional[float]:
    if value is None:
        return None
    value = float(value)
    if math.isnan(value) or math.isinf(value):
        raise ReportError(f"Column '{column}' got non-finite value {value}")
    if column in RATE_COLUMNS and not -1e-9 <= value <= 100.0 + 1e-9:
        raise ReportError(f"Column '{column}' is a percentage, got {value}")
    if column == 'mean_conf' and not -1e-9 <= value <= 1.0 + 1e-9:
        raise ReportError(f"Column 'mean_conf' is a confidence, got {value}")
    return round(value, DECIMALS)


def _plain(value: Any) -> Any:
    """JSON-safe copy of an extras value with floats rounded."""
    if isinstance(value, (bool, np.bool_)):
        return bool(value)
    if isinstance(value, (int, np.integer)):
        return int(value)
    if isinstance(value, (float, np.floating)):
        return _rounded(value, 'extra')
    if isinstance(value, dict):
        return {str(k): _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    return value


@dataclass
class ReportRow:
    """
    One cell of the evaluation matrix.

    Values are rounded to four decimals on construction so that a row read back
    from JSON compares equal to the row that was written. ``accuracy`` is only
    set for in-distribution rows; ``extras`` go to JSON only.
    """
    model: str
    data_source: str
    data_kind: str
    attack: str = NONE_LABEL
    defense: str = NONE_LABEL
    tsr: Optional[float] = None
    accuracy: Optional[float] = None
    mean_conf: Optional[float] = None
    det_rate: Optional[float] = None
    fpr: Optional[float] = None
    queries: Optional[float] = None
    extras: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if self.data_kind not in DATA_KINDS:
            raise ReportError(f"Unknown data kind '{self.data_kind}'")
        if self.accuracy is not None and not self.data_kind.startswith('in-'):
            raise ReportError(f"Accuracy is not reported for OOD rows ({self.data_source}/{self.data_kind})")
        for column in VALUE_COLUMNS:
            setattr(self, column, _rounded(getattr(self, column), column))
        self.extras = _plain(self.extras)

    @property
    def key(self) -> Tuple[str, ...]:
        return tuple(getattr(self, column) for column in KEY_COLUMNS)

    def csv_cells(self) -> List[str]:
        cells = [getattr(self, column) for column in KEY_COLUMNS]
        for column in VALUE_COLUMNS:
            value = getattr(self, column)
            cells.append('' if value is None else f"{value:.{DECIMALS}f}")
        return cells


@dataclass
class EvalReport:
    rows: List[ReportRow] = field(default_factory=list)
    partial: bool = False
    meta: Dict[str, Any] = field(default_factory=dict)
    literature: List[Dict[str, Any]] = field(default_factory=lambda: [dict(r) for r in LITERATURE_ROWS])

    def add(self, row: ReportRow) -> ReportRow:
        self.rows.append(row)
        return row

    def sorted_rows(self) -> List[ReportRow]:
        """Rows in lexicographic key order; duplicate keys keep insertion order."""
        return sorted(self.rows, key=lambda r: r.key)

    def find(self, **key: str) -> List[ReportRow]:
        return [r for r in self.rows if all(getattr(r, k) == v for k, v in key.items())]

    def to_csv(self) -> str:
        buffer = io.StringIO()
        writer = csv.writer(buffer, lineterminator='\n')
        writer.writerow(CSV_COLUMNS)
        for row in self.sorted_rows():
            writer.writerow(row.csv_cells())
        return buffer.getvalue()

    def to_dict(self) -> Dict[str, Any]:
        return {
            'schema_version': SCHEMA_VERSION,
            'partial': self.partial,
            'columns': list(CSV_COLUMNS),
            'meta': _plain(self.meta),
            'rows': [asdict(row) for row in self.sorted_rows()],
            'literature': self.literature,
        }

    @classmethod
    def from_dict(cls, record: Dict[str, Any]) -> 'EvalReport':
        version = record.get('schema_version')
        if version != SCHEMA_VERSION:
            raise ReportError(f"Unsupported report schema version {version}")
        names = {f.name for f in fields(ReportRow)}
        rows = [ReportRow(**{k: v for k, v in row.items() if k in names}) for row in record.get('rows', [])]
        return cls(rows=rows, partial=bool(record.get('partial', False)), meta=record.get('meta', {}),
                   literature=record.get('literature', []))


def emit_report(report: EvalReport, out_dir: Union[str, Path],
                formats: Sequence[str] = FORMATS) -> List[Path]:
    """
    Write ``report.csv`` and/or ``report.json`` into ``out_dir``.

    Returns:
        Paths written, in ``formats`` order

    Raises:
        ReportError: Unknown format or unwritable location
    """
    unknown = set(formats) - set(FORMATS)
    if unknown:
        raise ReportError(f"Unknown report formats: {sorted(unknown)}")
    out = Path(out_dir)
    written = []
    try:
        out.mkdir(parents=True, exist_ok=True)
        for fmt in formats:
            path = out / f"report.{fmt}"
            if fmt == 'csv':
                path.write_text(report.to_csv(), encoding='utf-8')
            else:
                path.write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + '\n', encoding='utf-8')
            written.append(path)
    except OSError as e:
        raise ReportError(f"Cannot write report to {out}: {e}") from e
    logger.info("Report written to %s%s", out, ' (partial)' if report.partial else '')
    return written


def load_report_json(path: Union[str, Path]) -> EvalReport:
    try:
        record = json.loads(Path(path).read_text(encoding='utf-8'))
    except (OSError, json.JSONDecodeError) as e:
        raise ReportError(f"Cannot read report {path}: {e}") from e
    return EvalReport.from_dict(record)


def load_artifact(path: Union[str, Path]) -> Dict[str, np.ndarray]:
    try:
        with np.load(path, allow_pickle=False) as archive:
            return {name: archive[name] for name in archive.files}
    except (OSError, ValueError) as e:
        raise ReportError(f"Cannot read artifact {path}: {e}") from e


def replay_success_rate(model: Classifier, artifact: Union[str, Path, Dict[str, np.ndarray]]) -> float:
    """
    Target success rate recomputed by classifying stored adversarial examples.

    Only valid for undefended cells; protected cells also need the detector verdict.
    """
    arrays = artifact if isinstance(artifact, dict) else load_artifact(artifact)
    adv, targets = arrays['adv_examples'], arrays['targets']
    if len(adv) == 0:
        raise ReportError("Artifact holds no adversarial examples")
    predicted, _ = predict_batch(model, adv)
    return round(100.0 * float(np.mean(predicted == targets)), DECIMALS)
