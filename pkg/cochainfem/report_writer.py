#!/usr/bin/env python3
"""
CochainFEM - Run Reports
========================
Structured command results (checks, results, tables) and atomic JSON/CSV
output.
"""

import csv
import json
import logging
import math
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence

import numpy as np

from cochainfem.utils import CheckError

logger = logging.getLogger(__name__)


class CheckFailed(CheckError):
    """A selected check measured outside its tolerance."""

    def __init__(self, name: str, measured: float, tolerance: float):
        super().__init__(f"check {name!r} failed: measured {measured:.3e}, tolerance {tolerance:.1e}")
        self.name = name
        self.measured = measured
        self.tolerance = tolerance


def _plain(value: Any) -> Any:
    """Convert numpy scalars and arrays into JSON-native values."""
    if isinstance(value, dict):
        return {str(k): _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    if isinstance(value, np.ndarray):
        return [_plain(v) for v in value.tolist()]
    if isinstance(value, np.bool_):
        return bool(value)
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, np.floating):
        return float(value)
    return value


@dataclass
class RunReport:
    """Results of one command."""
    command: str
    config: Dict[str, Any] = field(default_factory=dict)
    checks: List[Dict[str, Any]] = field(default_factory=list)
    results: Dict[str, Any] = field(default_factory=dict)
    tables: Dict[str, List[Dict[str, Any]]] = field(default_factory=dict)

    def add_check(self, name: str, measured: float, tolerance: float,
                  passed: Optional[bool] = None) -> bool:
        """
        Record a check; by default it passes when measured <= tolerance.

        Raises:
            ValueError: if the check is already recorded
        """
        if any(c["name"] == name for c in self.checks):
            raise ValueError(f"check {name!r} recorded twice")
        measured = float(measured)
        if passed is None:
            passed = bool(math.isfinite(measured) and measured <= tolerance)
        self.checks.append({"name": name, "measured": measured,
                            "tolerance": float(tolerance), "passed": bool(passed)})
        tag = "[OK]" if passed else "[FAIL]"
        log = logger.info if passed else logger.warning
        log(f"{tag} {name}: {measured:.3e} (tol {tolerance:.1e})")
        return bool(passed)

    @property
    def all_passed(self) -> bool:
        return all(c["passed"] for c in self.checks)

    def failures(self) -> List[Dict[str, Any]]:
        return [c for c in self.checks if not c["passed"]]

    def require_all(self):
        """Raise CheckFailed for the first failed check."""
        for check in self.failures():
            raise CheckFailed(check["name"], check["measured"], check["tolerance"])

    def to_dict(self) -> Dict[str, Any]:
        return _plain({
            "command": self.command,
            "config": self.config,
            "checks": self.checks,
            "passed": self.all_passed,
            "results": self.results,
            "tables": self.tables,
        })


# =============================================================================
# ATOMIC WRITERS
# =============================================================================

def _atomic_write(path: Path, write):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as f:
            write(f)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.remove(tmp)
        raise
    return path


def write_json(path, data: Dict[str, Any]) -> Path:
    """JSON with sorted keys; floats keep their shortest exact repr."""
    return _atomic_write(path, lambda f: json.dump(_plain(data), f, indent=2, sort_keys=True))


def _cell(value: Any) -> str:
    value = _plain(value)
    if value is None:
        return ""
    if isinstance(value, float):
        return format(value, ".17g")
    return str(value)


def write_csv(path, rows: Sequence[Dict[str, Any]], columns: Optional[Iterable[str]] = None) -> Path:
    """CSV with a header row and 17 significant digits."""
    rows = list(rows)
    if columns is None:
        columns = []
        for row in rows:
            columns.extend(k for k in row if k not in columns)
    columns = list(columns)

    def write(f):
        writer = csv.writer(f, lineterminator="\r\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_cell(row.get(c)) for c in columns])
    return _atomic_write(path, write)


def write_report(out_dir, report: RunReport) -> Path:
    path = write_json(Path(out_dir) / "report.json", report.to_dict())
    logger.info(f"[OK] Report written: {path}")
    return path
