"""
Result files. JSON carries the whole record; CSV carries one table (the study
rows, or the time series when there is no table) with RFC-4180 quoting.
"""

import csv
import io
import logging
from pathlib import Path
from typing import Dict, List, Union

import orjson

from ..model.errors import InvalidArgumentError
from ..model.schemas import RESULT_VERSION, ResultRecord


logger = logging.getLogger(__name__)


def to_json(record: ResultRecord) -> bytes:
    return orjson.dumps(record.model_dump(mode="json"), option=orjson.OPT_INDENT_2 | orjson.OPT_SERIALIZE_NUMPY)


def _csv_rows(record: ResultRecord) -> List[Dict[str, float]]:
    if record.table:
        return record.table
    if not record.series:
        return [{name: s.value for name, s in record.scalars.items()}]
    length = max(len(v) for v in record.series.values())
    return [
        {name: values[i] for name, values in record.series.items() if i < len(values)}
        for i in range(length)
    ]


def to_csv(record: ResultRecord) -> str:
    rows = _csv_rows(record)
    columns: List[str] = []
    for row in rows:
        columns.extend(key for key in row if key not in columns)
    buffer = io.StringIO()
    writer = csv.DictWriter(buffer, fieldnames=columns, quoting=csv.QUOTE_MINIMAL, lineterminator="\r\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({key: repr(float(value)) for key, value in row.items()})
    return buffer.getvalue()


def write_result(record: ResultRecord, path: Union[str, Path], fmt: str = "json") -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if fmt == "json":
        path.write_bytes(to_json(record))
    elif fmt == "csv":
        with open(path, "w", newline="") as f:
            f.write(to_csv(record))
    else:
        raise InvalidArgumentError(f"unknown output format {fmt!r}")
    logger.info(f"Wrote {fmt} result to {path}")
    return path


def load_result(path: Union[str, Path]) -> Union[ResultRecord, List[Dict[str, float]]]:
    """A ResultRecord for JSON files, the list of rows for CSV files"""
    path = Path(path)
    if path.suffix == ".csv":
        with open(path, newline="") as f:
            return [{key: float(value) for key, value in row.items() if value != ""} for row in csv.DictReader(f)]
    try:
        data = orjson.loads(path.read_bytes())
    except orjson.JSONDecodeError as e:
        raise InvalidArgumentError(f"{path} is not a result file: {e}")
    if data.get("version") != RESULT_VERSION:
        raise InvalidArgumentError(f"{path} has result version {data.get('version')!r}, expected {RESULT_VERSION}")
    return ResultRecord.model_validate(data)
