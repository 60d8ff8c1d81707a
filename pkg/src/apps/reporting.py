"""
Report objects and the file writers behind scenario output.

CSV values use repr(float), which round-trips IEEE-754 doubles exactly, and
report JSON is written with sorted keys, so identical runs give
byte-identical files.
"""
import csv
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List

from src.core.fields import Trajectory
from src.utils.settings import APP_VERSION


@dataclass(frozen=True)
class CheckResult:
    case: str
    name: str
    value: float
    limit: float
    mode: str  # "max": value <= limit, "min": value >= limit

    @property
    def passed(self) -> bool:
        if math.isnan(self.value):
            return False
        return self.value <= self.limit if self.mode == "max" else self.value >= self.limit

    @property
    def label(self) -> str:
        return self.name if not self.case else f"{self.case}.{self.name}"

    def to_dict(self) -> Dict[str, Any]:
        return {
            "case": self.case,
            "name": self.name,
            "value": json_number(self.value),
            "limit": json_number(self.limit),
            "mode": self.mode,
            "passed": self.passed,
        }


@dataclass
class Report:
    scenario: str
    kind: str
    seed: int
    checks: List[CheckResult] = field(default_factory=list)
    stats: Dict[str, Dict[str, int]] = field(default_factory=dict)
    files: Dict[str, str] = field(default_factory=dict)
    runtime: float = 0.0

    @property
    def passed(self) -> bool:
        return all(check.passed for check in self.checks)

    @property
    def failures(self) -> List[CheckResult]:
        return [check for check in self.checks if not check.passed]

    def to_dict(self, with_runtime: bool = False) -> Dict[str, Any]:
        data = {
            "scenario": self.scenario,
            "kind": self.kind,
            "seed": self.seed,
            "version": APP_VERSION,
            "passed": self.passed,
            "checks": [check.to_dict() for check in self.checks],
            "stats": self.stats,
            "files": dict(sorted(self.files.items())),
        }
        if with_runtime:
            data["runtime_seconds"] = round(self.runtime, 3)
        return data


def json_number(value: float):
    """Finite floats as numbers, the rest as strings, keeping the output strict JSON."""
    value = float(value)
    if math.isfinite(value):
        return value
    return "nan" if math.isnan(value) else ("inf" if value > 0 else "-inf")


def sha256_file(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as handle:
        for chunk in iter(lambda: handle.read(65536), b""):
            digest.update(chunk)
    return "sha256:" + digest.hexdigest()


def write_trajectory_csv(traj: Trajectory, path: Path) -> str:
    """Write `param,q1..qn[,v1..vn]` rows and return the file digest."""
    n = traj.config_dim
    header = ["param"] + [f"q{i + 1}" for i in range(n)]
    if traj.order == 2:
        header += [f"v{i + 1}" for i in range(n)]
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(header)
        for param, state in zip(traj.params, traj.states):
            writer.writerow([repr(float(param))] + [repr(float(x)) for x in state])
    return sha256_file(path)


def write_json(data: Dict[str, Any], path: Path) -> str:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as handle:
        handle.write(json.dumps(data, indent=2, sort_keys=True, allow_nan=False))
        handle.write("\n")
    return sha256_file(path)


def summary_line(report: Report) -> str:
    if report.passed:
        return f"✅ {report.scenario}: PASS ({len(report.checks)} checks)"
    worst = report.failures[0]
    relation = ">" if worst.mode == "max" else "<"
    return f"❌ {report.scenario}: FAIL {worst.label} = {worst.value:.3e} {relation} {worst.limit:.1e}"
