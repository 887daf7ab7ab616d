"""
Versioned CSV and JSON emission for analysis results.

CSV files start with `# key=value` metadata lines (schema version, toolkit
version, manifest digest, chart hint) followed by a header row and data rows.
"""

import io
import csv
import logging
from dataclasses import dataclass, field

import numpy as np

from library.config import CSV_SCHEMA_VERSION, JSON_SCHEMA_VERSION, TOOLKIT_VERSION
from library.errors import InputError
from library.manifest import atomic_write, canonical_json

logger = logging.getLogger(__name__)

CHART_KINDS = ("line", "histogram")


def format_value(value):
    if isinstance(value, (bool, np.bool_)):
        return "1" if value else "0"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


@dataclass
class Table:
    columns: list
    rows: list = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.columns = list(self.columns)
        for row in self.rows:
            self._check(row)

    def _check(self, row):
        if len(row) != len(self.columns):
            raise InputError(f"row has {len(row)} values for {len(self.columns)} columns")

    def append(self, *row):
        self._check(row)
        self.rows.append(tuple(row))

    def column(self, name):
        if name not in self.columns:
            raise InputError(f"no column {name!r}; columns are {self.columns}")
        k = self.columns.index(name)
        return [row[k] for row in self.rows]

    def to_csv(self):
        buffer = io.StringIO()
        meta = {"schema_version": CSV_SCHEMA_VERSION, "toolkit_version": TOOLKIT_VERSION}
        meta.update(self.metadata)
        for key, value in meta.items():
            buffer.write(f"# {key}={value}\n")
        writer = csv.writer(buffer, lineterminator="\n")
        writer.writerow(self.columns)
        for row in self.rows:
            writer.writerow([format_value(v) for v in row])
        return buffer.getvalue()


def table(columns, rows=(), chart=None, **metadata):
    """Build a Table; `chart` is the plot hint (line or histogram) for the plot command."""
    if chart is not None:
        if chart not in CHART_KINDS:
            raise InputError(f"chart hint must be one of {CHART_KINDS}")
        metadata = {"chart": chart, **metadata}
    return Table(columns, [tuple(r) for r in rows], metadata)


def write_csv(path, tab):
    atomic_write(path, tab.to_csv())
    logger.debug("Wrote %d rows to %s", len(tab.rows), path)
    return path


def parse_csv(text):
    """Parse a CSV emitted by Table.to_csv; numeric cells become floats."""
    metadata, body = {}, []
    for line in text.splitlines():
        if line.startswith("#"):
            key, sep, value = line[1:].strip().partition("=")
            if sep:
                metadata[key.strip()] = value.strip()
        elif line.strip():
            body.append(line)
    if not body:
        raise InputError("CSV has no header row")
    reader = csv.reader(body)
    columns = next(reader)
    rows = []
    for raw in reader:
        if len(raw) != len(columns):
            raise InputError(f"CSV row has {len(raw)} cells for {len(columns)} columns")
        rows.append(tuple(_parse_cell(cell) for cell in raw))
    return Table(columns, rows, metadata)


def _parse_cell(cell):
    try:
        return float(cell)
    except ValueError:
        return cell


def read_csv(path):
    try:
        with open(path, "r", encoding="utf-8") as f:
            return parse_csv(f.read())
    except FileNotFoundError as e:
        raise InputError(f"CSV file not found: {path}") from e


def json_document(payload, **metadata):
    document = {"schema_version": JSON_SCHEMA_VERSION, "toolkit_version": TOOLKIT_VERSION}
    document.update(metadata)
    document.update(payload)
    return document


def write_json(path, payload, **metadata):
    atomic_write(path, canonical_json(json_document(payload, **metadata)))
    return path
