"""
Delimited-text ingestion and emission

Every table is UTF-8, comma separated, with a mandatory header row. Parse
errors carry the 1-based line number (the header is line 1) and the column.
"""

import io
import re
import math
import logging
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import pandas as pd

from .exceptions import TableParseError
from .geometry import Box3, Geometry, Point3, Sphere

logger = logging.getLogger(__name__)

MISSING = "(missing)"

# LUNA16 challenge headers mapped onto the canonical names
DEFAULT_ALIASES = {
    'seriesuid': 'scan_id',
    'coordX': 'x',
    'coordY': 'y',
    'coordZ': 'z',
    'diameter_mm': 'diameter',
}

DIAMETER_COLUMNS = ('scan_id', 'x', 'y', 'z', 'diameter')
BOX_COLUMNS = ('scan_id', 'x', 'y', 'z', 'w', 'h', 'd')
CANDIDATE_COLUMNS = ('scan_id', 'x', 'y', 'z', 'probability')
SLICE_BOX_COLUMNS = ('scan_id', 'slice', 'x_min', 'y_min', 'x_max', 'y_max')
SCORE_COLUMNS = ('record_id', 'scan_id', 'score', 'label')
PATCH_COLUMNS = ('path', 'scan_id', 'x', 'y', 'z', 'class', 'probability')

TextSource = Union[str, Path, io.IOBase]

_RAGGED_ROW = re.compile(r'Expected (\d+) fields in line (\d+), saw (\d+)')


class Label(Enum):
    MALIGNANT = "malignant"
    BENIGN = "benign"


class AnnotationSchema(Enum):
    DIAMETER = "diameter"
    BOX = "box"


class SliceUnit(Enum):
    INDEX = "index"
    MM = "mm"


@dataclass(frozen=True)
class Annotation:
    """A reference lesion (or exclusion entry) in one scan"""
    scan_id: str
    geometry: Geometry
    nodule_id: str
    label: Optional[Label] = None

    @property
    def center(self) -> Point3:
        return self.geometry.center


@dataclass(frozen=True)
class Candidate:
    """A detector output point with its confidence"""
    scan_id: str
    location: Point3
    probability: float

    def __post_init__(self):
        if not (math.isfinite(self.probability) and 0.0 <= self.probability <= 1.0):
            raise ValueError(f"probability must be within [0, 1], got {self.probability}")

    def sort_key(self) -> Tuple:
        """Descending probability, then scan_id and coordinates"""
        return (-self.probability, self.scan_id, *self.location.as_tuple())


@dataclass(frozen=True)
class SliceBox2D:
    """In-plane box annotated on one slice"""
    scan_id: str
    slice_position: float
    x_min: float
    y_min: float
    x_max: float
    y_max: float
    unit: SliceUnit = SliceUnit.INDEX

    def __post_init__(self):
        if not self.x_max > self.x_min:
            raise ValueError(f"x_max ({self.x_max}) must exceed x_min ({self.x_min})")
        if not self.y_max > self.y_min:
            raise ValueError(f"y_max ({self.y_max}) must exceed y_min ({self.y_min})")

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min


@dataclass(frozen=True)
class SubjectMeta:
    """Free-form attributes of one scan, in header order"""
    scan_id: str
    attributes: Dict[str, str] = field(default_factory=dict)

    def group_value(self, name: str) -> str:
        value = self.attributes.get(name, "")
        return value if value != "" else MISSING


@dataclass(frozen=True)
class ScoredRecord:
    """One classification sample"""
    record_id: str
    scan_id: str
    score: float
    label: int

    def __post_init__(self):
        if self.label not in (0, 1):
            raise ValueError(f"label must be 0 or 1, got {self.label}")
        if not math.isfinite(self.score):
            raise ValueError(f"score must be finite, got {self.score}")


@dataclass(frozen=True)
class PatchRow:
    """One row of a patch manifest"""
    path: str
    scan_id: str
    center: Point3
    patch_class: str
    probability: Optional[float] = None


# ---------------------------------------------------------------------------
# Reading helpers
# ---------------------------------------------------------------------------

def _decode(raw: bytes, name: str) -> str:
    try:
        return raw.decode('utf-8-sig')
    except UnicodeDecodeError as e:
        line = raw[:e.start].count(b'\n') + 1
        raise TableParseError(f"Invalid UTF-8 byte 0x{raw[e.start]:02x}", line=line,
                              source=name) from None


def _read_text(source: TextSource) -> Tuple[str, str]:
    """Return (text, source name) for a path, file object or literal CSV text

    Strings containing a newline are CSV text; other strings are paths.
    A leading byte order mark is dropped.
    """
    if isinstance(source, io.IOBase):
        name = getattr(source, 'name', '<stream>')
        content = source.read()
        if isinstance(content, bytes):
            return _decode(content, name), name
        return content.lstrip('\ufeff'), name
    if isinstance(source, str) and '\n' in source:
        return source.lstrip('\ufeff'), '<text>'
    path = Path(source)
    if not path.is_file():
        raise TableParseError(f"File not found: {path}", source=str(path))
    return _decode(path.read_bytes(), str(path)), str(path)


def _read_frame(source: TextSource, column_map: Optional[Mapping[str, str]] = None
                ) -> Tuple[pd.DataFrame, str]:
    text, name = _read_text(source)
    if not text.strip():
        raise TableParseError("Missing header row", line=1, source=name)

    try:
        frame = pd.read_csv(io.StringIO(text), dtype=str, keep_default_na=False,
                            skipinitialspace=True, skip_blank_lines=True)
    except pd.errors.ParserError as e:
        found = _RAGGED_ROW.search(str(e))
        if found is None:
            raise TableParseError(f"Malformed table: {str(e).strip()}", source=name) from None
        expected, line, seen = (int(g) for g in found.groups())
        raise TableParseError(f"Expected {expected} fields, saw {seen}", line=line,
                              source=name) from None
    frame = frame.fillna('')
    frame.columns = [c.strip() for c in frame.columns]

    aliases = dict(DEFAULT_ALIASES)
    aliases.update(column_map or {})
    renamed = {c: aliases[c] for c in frame.columns if c in aliases}
    if renamed:
        logger.debug(f"{name}: renamed columns {renamed}")
        frame = frame.rename(columns=renamed)

    # Line numbers survive blank-line skipping through the original row order
    frame['__line__'] = _data_line_numbers(text, len(frame))
    return frame, name


def _data_line_numbers(text: str, n_rows: int) -> List[int]:
    numbers = [i + 1 for i, line in enumerate(text.splitlines()) if line.strip()][1:]
    if len(numbers) != n_rows:
        # quoted multi-line fields; fall back to row order
        return list(range(2, n_rows + 2))
    return numbers


def _require_columns(frame: pd.DataFrame, required: Sequence[str], name: str):
    missing = [c for c in required if c not in frame.columns]
    if missing:
        raise TableParseError(f"Missing required columns {missing}", line=1,
                              column=missing[0], source=name)


def _number(row: pd.Series, column: str, name: str) -> float:
    raw = row[column].strip()
    try:
        value = float(raw)
    except ValueError:
        raise TableParseError(f"Non-numeric value '{raw}'", line=int(row['__line__']),
                              column=column, source=name)
    if not math.isfinite(value):
        raise TableParseError(f"Non-finite value '{raw}'", line=int(row['__line__']),
                              column=column, source=name)
    return value


def _positive(row: pd.Series, column: str, name: str) -> float:
    value = _number(row, column, name)
    if value <= 0:
        raise TableParseError(f"Size must be positive, got {value}",
                              line=int(row['__line__']), column=column, source=name)
    return value


def _text(row: pd.Series, column: str, name: str) -> str:
    value = row[column].strip()
    if not value:
        raise TableParseError("Empty value", line=int(row['__line__']), column=column,
                              source=name)
    return value


def _parse_label(row: pd.Series, name: str) -> Optional[Label]:
    raw = row.get('label', '').strip().lower()
    if raw == '':
        return None
    if raw in ('malignant', '1', 'cancer'):
        return Label.MALIGNANT
    if raw in ('benign', '0', 'no-cancer'):
        return Label.BENIGN
    raise TableParseError(f"Unknown label '{raw}'", line=int(row['__line__']),
                          column='label', source=name)


# ---------------------------------------------------------------------------
# Parsers
# ---------------------------------------------------------------------------

def detect_annotation_schema(columns: Iterable[str]) -> AnnotationSchema:
    columns = set(columns)
    if set(BOX_COLUMNS) <= columns:
        return AnnotationSchema.BOX
    if set(DIAMETER_COLUMNS) <= columns:
        return AnnotationSchema.DIAMETER
    raise TableParseError(
        f"Header matches neither {list(DIAMETER_COLUMNS)} nor {list(BOX_COLUMNS)}", line=1)


def parse_annotations(source: TextSource, column_map: Optional[Mapping[str, str]] = None,
                      keep_labels: bool = True) -> List[Annotation]:
    """Parse a lesion table in the diameter or the box schema

    The schema is detected from the header. Rows keep file order; a
    missing nodule_id column yields ids "<scan_id>#<k>" numbered per scan.

    Args:
        source: Path, file object or CSV text
        column_map: Extra header renames (source name -> canonical name)
        keep_labels: Parse the optional label column

    Returns:
        List of Annotation
    """
    frame, name = _read_frame(source, column_map)
    try:
        schema = detect_annotation_schema(frame.columns)
    except TableParseError as e:
        raise e.with_source(name)
    logger.info(f"{name}: {schema.value} annotation schema, {len(frame)} rows")

    annotations = []
    per_scan_count: Dict[str, int] = {}
    seen_ids = {}
    for _, row in frame.iterrows():
        line = int(row['__line__'])
        scan_id = _text(row, 'scan_id', name)
        center = Point3(_number(row, 'x', name), _number(row, 'y', name),
                        _number(row, 'z', name))
        if schema is AnnotationSchema.DIAMETER:
            geometry: Geometry = Sphere(center, _positive(row, 'diameter', name))
        else:
            geometry = Box3(center, _positive(row, 'w', name), _positive(row, 'h', name),
                            _positive(row, 'd', name))

        per_scan_count[scan_id] = per_scan_count.get(scan_id, 0) + 1
        if 'nodule_id' in frame.columns:
            nodule_id = _text(row, 'nodule_id', name)
        else:
            nodule_id = f"{scan_id}#{per_scan_count[scan_id]}"
        if (scan_id, nodule_id) in seen_ids:
            raise TableParseError(
                f"Duplicate nodule_id '{nodule_id}' (first seen on line {seen_ids[(scan_id, nodule_id)]})",
                line=line, column='nodule_id', source=name)
        seen_ids[(scan_id, nodule_id)] = line

        label = _parse_label(row, name) if keep_labels and 'label' in frame.columns else None
        annotations.append(Annotation(scan_id, geometry, nodule_id, label))

    return annotations


def parse_exclusions(source: TextSource,
                     column_map: Optional[Mapping[str, str]] = None) -> List[Annotation]:
    """Parse an exclusion list; same schemas as annotations, labels ignored"""
    return parse_annotations(source, column_map, keep_labels=False)


def parse_candidates(source: TextSource,
                     column_map: Optional[Mapping[str, str]] = None) -> List[Candidate]:
    """Parse detector outputs (scan_id, x, y, z, probability)"""
    frame, name = _read_frame(source, column_map)
    _require_columns(frame, CANDIDATE_COLUMNS, name)

    candidates = []
    for _, row in frame.iterrows():
        probability = _number(row, 'probability', name)
        if not 0.0 <= probability <= 1.0:
            raise TableParseError(f"Probability {probability} outside [0, 1]",
                                  line=int(row['__line__']), column='probability',
                                  source=name)
        candidates.append(Candidate(
            _text(row, 'scan_id', name),
            Point3(_number(row, 'x', name), _number(row, 'y', name), _number(row, 'z', name)),
            probability
        ))
    logger.info(f"{name}: {len(candidates)} candidates")
    return candidates


def parse_slice_boxes(source: TextSource, unit: Union[str, SliceUnit] = SliceUnit.INDEX,
                      column_map: Optional[Mapping[str, str]] = None) -> List[SliceBox2D]:
    """Parse per-slice 2D boxes; unit says whether "slice" is an index or mm"""
    try:
        unit = SliceUnit(unit)
    except ValueError:
        raise TableParseError(f"Unknown slice unit '{unit}' (index or mm)")

    frame, name = _read_frame(source, column_map)
    _require_columns(frame, SLICE_BOX_COLUMNS, name)

    boxes = []
    for _, row in frame.iterrows():
        line = int(row['__line__'])
        position = _number(row, 'slice', name)
        if unit is SliceUnit.INDEX and position != int(position):
            raise TableParseError(f"Slice index must be an integer, got {position}",
                                  line=line, column='slice', source=name)
        x_min, x_max = _number(row, 'x_min', name), _number(row, 'x_max', name)
        y_min, y_max = _number(row, 'y_min', name), _number(row, 'y_max', name)
        if x_max <= x_min:
            raise TableParseError(f"x_max ({x_max}) must exceed x_min ({x_min})",
                                  line=line, column='x_max', source=name)
        if y_max <= y_min:
            raise TableParseError(f"y_max ({y_max}) must exceed y_min ({y_min})",
                                  line=line, column='y_max', source=name)
        boxes.append(SliceBox2D(_text(row, 'scan_id', name), position,
                                x_min, y_min, x_max, y_max, unit))
    return boxes


def parse_metadata(source: TextSource,
                   column_map: Optional[Mapping[str, str]] = None) -> List[SubjectMeta]:
    """Parse subject metadata: scan_id first, free-form attribute columns after"""
    frame, name = _read_frame(source, column_map)
    columns = [c for c in frame.columns if c != '__line__']
    if not columns or columns[0] != 'scan_id':
        raise TableParseError("First column must be scan_id", line=1,
                              column=columns[0] if columns else None, source=name)

    records = []
    first_line: Dict[str, int] = {}
    for _, row in frame.iterrows():
        line = int(row['__line__'])
        scan_id = _text(row, 'scan_id', name)
        if scan_id in first_line:
            raise TableParseError(
                f"Duplicate scan_id '{scan_id}' on lines {first_line[scan_id]} and {line}",
                line=line, column='scan_id', source=name)
        first_line[scan_id] = line
        attributes = {c: row[c].strip() for c in columns[1:]}
        records.append(SubjectMeta(scan_id, attributes))
    return records


def parse_manifest(source: TextSource,
                   column_map: Optional[Mapping[str, str]] = None) -> List[str]:
    """Parse the scan manifest: the ordered, duplicate-free evaluation denominator"""
    frame, name = _read_frame(source, column_map)
    _require_columns(frame, ('scan_id',), name)

    scans = []
    first_line: Dict[str, int] = {}
    for _, row in frame.iterrows():
        line = int(row['__line__'])
        scan_id = _text(row, 'scan_id', name)
        if scan_id in first_line:
            raise TableParseError(
                f"Duplicate scan_id '{scan_id}' on lines {first_line[scan_id]} and {line}",
                line=line, column='scan_id', source=name)
        first_line[scan_id] = line
        scans.append(scan_id)
    return scans


def parse_scores(source: TextSource,
                 column_map: Optional[Mapping[str, str]] = None) -> List[ScoredRecord]:
    """Parse classification scores (record_id, scan_id, score, label)"""
    frame, name = _read_frame(source, column_map)
    _require_columns(frame, SCORE_COLUMNS, name)

    records = []
    for _, row in frame.iterrows():
        line = int(row['__line__'])
        label_raw = row['label'].strip()
        if label_raw not in ('0', '1'):
            raise TableParseError(f"Label must be 0 or 1, got '{label_raw}'", line=line,
                                  column='label', source=name)
        score = _number(row, 'score', name)
        if not 0.0 <= score <= 1.0:
            raise TableParseError(f"Score {score} outside [0, 1]", line=line,
                                  column='score', source=name)
        records.append(ScoredRecord(_text(row, 'record_id', name),
                                    _text(row, 'scan_id', name), score, int(label_raw)))
    return records


def parse_patch_manifest(source: TextSource) -> List[PatchRow]:
    frame, name = _read_frame(source)
    _require_columns(frame, PATCH_COLUMNS, name)

    rows = []
    for _, row in frame.iterrows():
        probability = row['probability'].strip()
        rows.append(PatchRow(
            _text(row, 'path', name),
            _text(row, 'scan_id', name),
            Point3(_number(row, 'x', name), _number(row, 'y', name), _number(row, 'z', name)),
            _text(row, 'class', name),
            float(probability) if probability else None
        ))
    return rows


def parse_column_map(pairs: Optional[Iterable[str]]) -> Dict[str, str]:
    """Turn ["old=new", ...] flags into a rename mapping"""
    mapping = {}
    for pair in pairs or []:
        if '=' not in pair:
            raise TableParseError(f"Column mapping '{pair}' must look like source=canonical")
        source, target = pair.split('=', 1)
        mapping[source.strip()] = target.strip()
    return mapping


# ---------------------------------------------------------------------------
# Emitters
# ---------------------------------------------------------------------------

def _emit(rows: List[Dict], columns: Sequence[str]) -> str:
    frame = pd.DataFrame(rows, columns=list(columns))
    return frame.to_csv(index=False, lineterminator='\n')


def emit_annotations(annotations: Sequence[Annotation]) -> str:
    """Emit annotations in the schema of the first row (all rows must agree)"""
    if annotations and any(isinstance(a.geometry, Box3) != isinstance(annotations[0].geometry, Box3)
                           for a in annotations):
        raise TableParseError("Cannot emit a mix of box and diameter annotations")
    is_box = bool(annotations) and isinstance(annotations[0].geometry, Box3)
    columns = list(BOX_COLUMNS if is_box else DIAMETER_COLUMNS) + ['nodule_id', 'label']

    rows = []
    for a in annotations:
        row = {'scan_id': a.scan_id, 'x': a.center.x, 'y': a.center.y, 'z': a.center.z,
               'nodule_id': a.nodule_id, 'label': a.label.value if a.label else ''}
        if is_box:
            row.update(w=a.geometry.size_x, h=a.geometry.size_y, d=a.geometry.size_z)
        else:
            row['diameter'] = a.geometry.diameter
        rows.append(row)
    return _emit(rows, columns)


def emit_candidates(candidates: Sequence[Candidate]) -> str:
    rows = [{'scan_id': c.scan_id, 'x': c.location.x, 'y': c.location.y, 'z': c.location.z,
             'probability': c.probability} for c in candidates]
    return _emit(rows, CANDIDATE_COLUMNS)


def emit_slice_boxes(boxes: Sequence[SliceBox2D]) -> str:
    rows = [{'scan_id': b.scan_id, 'slice': b.slice_position, 'x_min': b.x_min,
             'y_min': b.y_min, 'x_max': b.x_max, 'y_max': b.y_max} for b in boxes]
    return _emit(rows, SLICE_BOX_COLUMNS)


def emit_metadata(records: Sequence[SubjectMeta]) -> str:
    columns = ['scan_id']
    for record in records:
        columns.extend(c for c in record.attributes if c not in columns)
    rows = [{'scan_id': r.scan_id, **r.attributes} for r in records]
    return _emit(rows, columns)


def emit_manifest(scans: Sequence[str]) -> str:
    return _emit([{'scan_id': s} for s in scans], ('scan_id',))


def emit_scores(records: Sequence[ScoredRecord]) -> str:
    rows = [{'record_id': r.record_id, 'scan_id': r.scan_id, 'score': r.score,
             'label': r.label} for r in records]
    return _emit(rows, SCORE_COLUMNS)


def emit_patch_manifest(rows: Sequence[PatchRow]) -> str:
    data = [{'path': r.path, 'scan_id': r.scan_id, 'x': r.center.x, 'y': r.center.y,
             'z': r.center.z, 'class': r.patch_class,
             'probability': '' if r.probability is None else r.probability} for r in rows]
    return _emit(data, PATCH_COLUMNS)


__all__ = [
    'Annotation',
    'Candidate',
    'SliceBox2D',
    'SubjectMeta',
    'ScoredRecord',
    'PatchRow',
    'Label',
    'AnnotationSchema',
    'SliceUnit',
    'MISSING',
    'detect_annotation_schema',
    'parse_annotations',
    'parse_exclusions',
    'parse_candidates',
    'parse_slice_boxes',
    'parse_metadata',
    'parse_manifest',
    'parse_scores',
    'parse_patch_manifest',
    'parse_column_map',
    'emit_annotations',
    'emit_candidates',
    'emit_slice_boxes',
    'emit_metadata',
    'emit_manifest',
    'emit_scores',
    'emit_patch_manifest'
]
