"""
CSV report writer. Every row carries the config hash and the seed of the run that
produced it; column order follows report_schema.json.
"""
import csv
import json
import logging
from pathlib import Path
from typing import Any, Iterable

logger = logging.getLogger("lic-quant.storage.reports")

SCHEMA_PATH = Path(__file__).resolve().parent.parent / "report_schema.json"
METADATA_COLUMNS = ["config_hash", "seed"]


class ReportError(Exception):
    """Raised when a report does not match its documented columns."""
    pass


def load_schema(path: str | Path = SCHEMA_PATH) -> dict[str, list[str]]:
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)["reports"]


def _format(value: Any) -> Any:
    # repr round-trips floats exactly, so reruns produce identical bytes
    if isinstance(value, float):
        return repr(float(value))
    return value


def write_report(
        path: str | Path,
        report: str,
        rows: Iterable[dict[str, Any]],
        config_hash: str,
        seed: int,
        schema: dict[str, list[str]] | None = None,
) -> Path:
    """
    Write one CSV report.

    :param path: Output file.
    :param str report: Report name in the schema (e.g. "msqe").
    :param rows: Rows keyed by the report's columns.
    :param str config_hash: Hash of the run configuration.
    :param int seed: Run seed.
    :param schema: Column schema; report_schema.json by default.
    :return: The written path.
    :rtype: Path

    :raises: ReportError on an unknown report or a row with missing or extra columns.
    """
    schema = schema if schema is not None else load_schema()
    if report not in schema:
        raise ReportError(f"unknown report {report!r}")
    columns = schema[report]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=columns + METADATA_COLUMNS, lineterminator="\n")
        writer.writeheader()
        count = 0
        for row in rows:
            if set(row) != set(columns):
                raise ReportError(f"{report} row has columns {sorted(row)}, expected {sorted(columns)}")
            writer.writerow({**{key: _format(value) for key, value in row.items()},
                             "config_hash": config_hash, "seed": seed})
            count += 1
    logger.info(f"Wrote {count} rows to {path}")
    return path


def read_report(path: str | Path) -> list[dict[str, str]]:
    with open(path, "r", encoding="utf-8", newline="") as f:
        return list(csv.DictReader(f))
