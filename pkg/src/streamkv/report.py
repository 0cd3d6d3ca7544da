"""Run reports (JSON and CSV) and the survivor log behind their digests.

A report has three parts:

* ``config``: the echoed run settings,
* ``results``: one row of deterministic metrics per policy,
* ``timings``: wall-clock numbers per policy, kept apart because they are
  the only fields that differ between identical runs.

JSON layout::

    {"schema_version": 1,
     "config": {...},
     "results": [{"policy": ..., "peak_tokens": ..., ...}, ...],
     "timings": {"<policy>": {"time_append": ..., "time_compress": ...,
                              "overhead_ratio": ...}}}

The CSV form has one row per policy with ``RESULT_COLUMNS`` followed by
``TIMING_COLUMNS``; the schema version and config echo ride along as leading
``# key = value`` comment lines so the file parses back without loss.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import struct
from dataclasses import asdict, dataclass, fields
from typing import IO, Any

import numpy as np

from .errors import ConfigError
from .scoring import SelectionResult

SCHEMA_VERSION = 1


@dataclass
class PolicyResult:
    policy: str
    memory_budget: int
    target_size: int
    recent_frames: int
    frames: int
    tokens_appended: int
    tokens_evicted: int
    final_tokens: int
    peak_tokens: int
    compressions: int
    needles_planted: int | None = None
    needles_retained: int | None = None
    needle_retention: float | None = None
    needle_mass: float | None = None
    static_eviction_precision: float | None = None
    static_eviction_recall: float | None = None
    selection_digest: str = ""


@dataclass
class Timing:
    time_append: float
    time_compress: float

    @property
    def overhead_ratio(self) -> float:
        total = self.time_append + self.time_compress
        return self.time_compress / total if total > 0 else 0.0

    def as_dict(self) -> dict[str, float]:
        return {
            "time_append": self.time_append,
            "time_compress": self.time_compress,
            "overhead_ratio": self.overhead_ratio,
        }


RESULT_COLUMNS = tuple(f.name for f in fields(PolicyResult))
TIMING_COLUMNS = ("time_append", "time_compress", "overhead_ratio")
_INT_COLUMNS = frozenset(
    f.name for f in fields(PolicyResult) if f.type in ("int", "int | None")
)
_FLOAT_COLUMNS = frozenset(
    f.name for f in fields(PolicyResult) if f.type in ("float", "float | None")
)


@dataclass
class RunReport:
    config: dict[str, Any]
    results: list[PolicyResult]
    timings: dict[str, Timing]
    schema_version: int = SCHEMA_VERSION

    def body(self) -> dict[str, Any]:
        """Everything except timings: the part covered by the determinism contract."""
        return {
            "schema_version": self.schema_version,
            "config": self.config,
            "results": [asdict(r) for r in self.results],
        }

    def body_json(self) -> str:
        return json.dumps(self.body(), sort_keys=True, indent=2)

    def to_dict(self) -> dict[str, Any]:
        out = self.body()
        out["timings"] = {k: t.as_dict() for k, t in self.timings.items()}
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "RunReport":
        data = json.loads(text)
        _check_schema(data.get("schema_version"))
        results = [PolicyResult(**row) for row in data["results"]]
        timings = {
            k: Timing(v["time_append"], v["time_compress"]) for k, v in data.get("timings", {}).items()
        }
        return cls(data["config"], results, timings, data["schema_version"])

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(f"# schema_version = {self.schema_version}\n")
        for key in sorted(self.config):
            buf.write(f"# {key} = {json.dumps(self.config[key])}\n")
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(RESULT_COLUMNS + TIMING_COLUMNS)
        for res in self.results:
            row = [_csv_cell(getattr(res, c)) for c in RESULT_COLUMNS]
            timing = self.timings.get(res.policy)
            row += [_csv_cell(timing.as_dict()[c]) if timing else "" for c in TIMING_COLUMNS]
            writer.writerow(row)
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "RunReport":
        config: dict[str, Any] = {}
        schema = None
        lines = text.splitlines()
        body_start = 0
        for i, line in enumerate(lines):
            if not line.startswith("# "):
                body_start = i
                break
            key, _, value = line[2:].partition(" = ")
            if key == "schema_version":
                schema = int(value)
            else:
                config[key] = json.loads(value)
        _check_schema(schema)
        reader = csv.DictReader(lines[body_start:])
        results = []
        timings = {}
        for row in reader:
            res = PolicyResult(**{c: _parse_cell(c, row[c]) for c in RESULT_COLUMNS})
            results.append(res)
            if row["time_append"] != "":
                timings[res.policy] = Timing(float(row["time_append"]), float(row["time_compress"]))
        return cls(config, results, timings, schema)

    def write(self, path: str, fmt: str = "json") -> None:
        text = self.to_json() if fmt == "json" else self.to_csv()
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)


def _check_schema(version: Any) -> None:
    if version != SCHEMA_VERSION:
        raise ConfigError(f"unsupported report schema_version {version!r}")


def _csv_cell(value: Any) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse_cell(column: str, raw: str) -> Any:
    if raw == "" and column != "selection_digest":
        return None
    if column in _INT_COLUMNS:
        return int(raw)
    if column in _FLOAT_COLUMNS:
        return float(raw)
    return raw


class SurvivorLog:
    """Running SHA-256 over every compression's survivors, optionally teed to a file.

    Each record is the compression count, then per layer the layer index, the
    survivor count and the survivors' original stream positions, all as
    little-endian 64-bit integers.
    """

    def __init__(self, sink: IO[bytes] | None = None) -> None:
        self._hash = hashlib.sha256()
        self._sink = sink
        self.records = 0

    def __call__(self, count: int, selections: list[SelectionResult], survivors: list[np.ndarray]) -> None:
        parts = [struct.pack("<q", count)]
        for layer, positions in enumerate(survivors):
            parts.append(struct.pack("<qq", layer, positions.size))
            parts.append(np.ascontiguousarray(positions, dtype="<i8").tobytes())
        record = b"".join(parts)
        self._hash.update(record)
        if self._sink is not None:
            self._sink.write(record)
        self.records += 1

    def hexdigest(self) -> str:
        return self._hash.hexdigest()
