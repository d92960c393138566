"""Report documents shared by the Monte Carlo studies and the CLI.

A report serializes to ``report.json`` with the layout::

    {"kind": str, "config": {...}, "records": [{...}, ...],
     "aggregates": {...}, "verdicts": {name: bool}}

and its records to a flat CSV whose columns are the record keys in first-seen
order. Floats are written with ``repr`` so that both files round-trip exactly.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path


@dataclass
class McReport:
    kind: str
    config: dict = field(default_factory=dict)
    records: list[dict] = field(default_factory=list)
    aggregates: dict = field(default_factory=dict)
    verdicts: dict[str, bool] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> McReport:
        return cls(kind=data["kind"], config=data.get("config", {}),
                   records=data.get("records", []), aggregates=data.get("aggregates", {}),
                   verdicts=data.get("verdicts", {}))

    @property
    def passed(self) -> bool:
        return all(self.verdicts.values())


def _plain(obj):
    """Convert numpy scalars and tuples into JSON-native values."""
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if hasattr(obj, "item") and not isinstance(obj, (str, bytes)):
        return obj.item()
    return obj


def dumps(report: McReport) -> str:
    return json.dumps(_plain(report.to_dict()), indent=2, sort_keys=False, ensure_ascii=False)


def loads(text: str) -> McReport:
    return McReport.from_dict(json.loads(text))


def read_report(file) -> McReport:
    return loads(Path(file).read_text(encoding="utf-8"))


def _cell(v) -> str:
    v = _plain(v)
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v) if math.isfinite(v) else {math.inf: "inf", -math.inf: "-inf"}.get(v, "nan")
    if v is None:
        return ""
    return str(v)


def write_csv(file, header: list[str], rows) -> Path:
    file = Path(file)
    with open(file, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_cell(v) for v in row])
    return file


def write_records_csv(records: list[dict], file) -> Path:
    header: list[str] = []
    for r in records:
        header += [k for k in r if k not in header]
    return write_csv(file, header, ([r.get(k) for k in header] for r in records))


def write_report(report: McReport, out_dir, tables: dict | None = None) -> list[Path]:
    """Write ``report.json``, ``records.csv`` and any extra ``tables``.

    ``tables`` maps a file name to ``(header, rows)``. Existing files are
    overwritten. Returns the written paths.
    """
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        files = [out / "report.json"]
        files[0].write_text(dumps(report) + "\n", encoding="utf-8")
        files.append(write_records_csv(report.records, out / "records.csv"))
        for name, (header, rows) in (tables or {}).items():
            target = (out / name).resolve()
            if out.resolve() not in target.parents:
                raise ValueError(f"table {name!r} would be written outside {out}")
            files.append(write_csv(target, header, rows))
    except OSError as exc:
        raise OSError(f"cannot write report to {out}: {exc}") from exc
    return files
