"""
Run reports: canonical JSON plus plain-text table projections
"""

import json
import logging
import math
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Union

from .exceptions import InputValidationError
from .utils import file_digest

logger = logging.getLogger(__name__)

REPORT_SCHEMA_VERSION = 1


@dataclass
class RunReport:
    """Everything needed to reproduce and audit one run

    inputs maps a role (candidates, annotations, ...) to its path and
    sha256; config is the echo that replay re-executes from.
    """
    tool_version: str
    command: str
    argv: List[str]
    inputs: Dict[str, Dict[str, str]] = field(default_factory=dict)
    config: Dict[str, Any] = field(default_factory=dict)
    results: Dict[str, Any] = field(default_factory=dict)
    timestamp: Optional[str] = None

    def add_input(self, role: str, path: Optional[Union[str, Path]]):
        if path is None:
            return
        self.inputs[role] = {'path': str(path), 'sha256': file_digest(str(path))}

    def stamp(self):
        self.timestamp = datetime.now(timezone.utc).strftime('%Y-%m-%dT%H:%M:%SZ')

    def to_dict(self) -> Dict[str, Any]:
        return {
            'schema_version': REPORT_SCHEMA_VERSION,
            'tool_version': self.tool_version,
            'command': self.command,
            'argv': list(self.argv),
            'inputs': self.inputs,
            'config': self.config,
            'results': self.results,
            'timestamp': self.timestamp
        }

    def to_json(self) -> str:
        return to_json(self.to_dict())

    def save(self, path: Union[str, Path]) -> str:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_json(), encoding='utf-8')
        logger.info(f"Report written to {path}")
        return str(path)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'RunReport':
        version = data.get('schema_version')
        if version != REPORT_SCHEMA_VERSION:
            raise InputValidationError(f"Unsupported report schema version: {version}")
        try:
            return cls(
                tool_version=data['tool_version'],
                command=data['command'],
                argv=list(data.get('argv', [])),
                inputs=data.get('inputs', {}),
                config=data.get('config', {}),
                results=data.get('results', {}),
                timestamp=data.get('timestamp')
            )
        except KeyError as e:
            raise InputValidationError(f"Report is missing field {e}")

    @classmethod
    def load(cls, path: Union[str, Path]) -> 'RunReport':
        try:
            with open(path, 'r', encoding='utf-8') as f:
                return cls.from_dict(json.load(f))
        except FileNotFoundError:
            raise InputValidationError(f"Report not found: {path}")
        except json.JSONDecodeError as e:
            raise InputValidationError(f"{path}:{e.lineno}: invalid JSON: {e.msg}")


def _clean(value: Any) -> Any:
    """Replace non-finite floats with None so the JSON stays standard"""
    if isinstance(value, float) and not math.isfinite(value):
        return None
    if isinstance(value, dict):
        return {k: _clean(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_clean(v) for v in value]
    return value


def to_json(payload: Dict[str, Any]) -> str:
    """Stable JSON text: sorted keys, two-space indent, trailing newline"""
    return json.dumps(_clean(payload), sort_keys=True, indent=2, allow_nan=False) + "\n"


def compare_numbers(expected: Any, actual: Any, path: str = "results",
                    tol: float = 1e-12) -> List[str]:
    """Paths where two result payloads disagree"""
    if isinstance(expected, bool) or isinstance(actual, bool):
        return [] if expected == actual else [path]
    if isinstance(expected, (int, float)) and isinstance(actual, (int, float)):
        return [] if math.isclose(expected, actual, rel_tol=0.0, abs_tol=tol) else [path]
    if isinstance(expected, dict) and isinstance(actual, dict):
        diffs = []
        for key in sorted(set(expected) | set(actual)):
            if key not in expected or key not in actual:
                diffs.append(f"{path}.{key}")
            else:
                diffs.extend(compare_numbers(expected[key], actual[key], f"{path}.{key}", tol))
        return diffs
    if isinstance(expected, list) and isinstance(actual, list):
        if len(expected) != len(actual):
            return [path]
        diffs = []
        for i, (e, a) in enumerate(zip(expected, actual)):
            diffs.extend(compare_numbers(e, a, f"{path}[{i}]", tol))
        return diffs
    return [] if expected == actual else [path]


# ---------------------------------------------------------------------------
# Plain-text tables
# ---------------------------------------------------------------------------

def _cell(value: Any) -> str:
    if value is None:
        return "-"
    if isinstance(value, float):
        return f"{value:.4f}"
    return str(value)


def format_table(headers: Sequence[str], rows: Sequence[Sequence[Any]]) -> str:
    """Left-aligned text columns separated by two spaces"""
    cells = [[_cell(v) for v in row] for row in rows]
    widths = [len(h) for h in headers]
    for row in cells:
        widths = [max(w, len(c)) for w, c in zip(widths, row)]

    lines = ["  ".join(h.ljust(w) for h, w in zip(headers, widths)).rstrip(),
             "  ".join("-" * w for w in widths)]
    for row in cells:
        lines.append("  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip())
    return "\n".join(lines) + "\n"


def froc_table(froc: Dict[str, Any], bootstrap: Optional[Dict[str, Any]] = None) -> str:
    """FP-per-scan rates against sensitivity, with CIs when bootstrapped"""
    headers = ["fp/scan", "sensitivity"]
    rows = []
    for i, (rate, sens) in enumerate(zip(froc['fp_rates'], froc['sensitivities'])):
        row = [f"{rate:g}", sens]
        if bootstrap:
            lo, hi = bootstrap['rate_ci'][i]
            row.append(f"{lo:.4f}-{hi:.4f}")
        rows.append(row)
    cpm_row = ["CPM", froc['cpm']]
    if bootstrap:
        headers.append("ci")
        lo, hi = bootstrap['cpm_ci']
        cpm_row.append(f"{lo:.4f}-{hi:.4f}")
    rows.append(cpm_row)
    return format_table(headers, rows)


def subgroup_froc_table(rows: Sequence[Dict[str, Any]]) -> str:
    return format_table(["group", "scans", "lesions", "cpm", "status"],
                        [[r['group'], r['n_scans'], r['n_annotations'], r['cpm'], r['status']]
                         for r in rows])


def auc_table(rows: Sequence[Dict[str, Any]]) -> str:
    """One row per group: n, AUC, CI and the CI method"""
    body = []
    for r in rows:
        if r.get('auc') is None:
            body.append([r['group'], r['n_records'], None, None, None, r['status']])
        else:
            body.append([r['group'], r['n_records'], r['auc'],
                         f"{r['ci_low']:.4f}-{r['ci_high']:.4f}", r['method'], r['status']])
    return format_table(["group", "n", "auc", "ci", "method", "status"], body)


__all__ = [
    'REPORT_SCHEMA_VERSION',
    'RunReport',
    'to_json',
    'compare_numbers',
    'format_table',
    'froc_table',
    'subgroup_froc_table',
    'auc_table'
]
