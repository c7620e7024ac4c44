"""Evaluation metrics and reports for imitations of demonstrations."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .envs import TARGET_SPEEDS, Trajectory


def _kind(traj: Trajectory):
    return traj.meta.get("env")


def _require(kind: str, *trajs: Trajectory):
    for t in trajs:
        k = _kind(t)
        if k is not None and k != kind:
            raise ValueError(f"metric expects {kind} trajectories, got '{k}'")
        width = 4 if kind == "walker" else 6
        if t.states.shape[1] != width:
            raise ValueError(f"metric expects {kind} trajectories (state width {width}), "
                             f"got width {t.states.shape[1]}")


def mean_speed(traj: Trajectory) -> float:
    _require("walker", traj)
    return float(np.mean(traj.states[:, 1]))


def speed_diff(demo: Trajectory, imitation: Trajectory) -> float:
    """|mean velocity(demo) - mean velocity(imitation)| over the recorded states."""
    return abs(mean_speed(demo) - mean_speed(imitation))


def endpoint_error(demo: Trajectory, imitation: Trajectory) -> float:
    _require("reacher", demo, imitation)
    return float(np.linalg.norm(demo.states[-1, :2] - imitation.states[-1, :2]))


def mode_coverage(imitations: Sequence[Trajectory], targets=TARGET_SPEEDS, tol: float = 0.5) -> float:
    """Fraction of target speeds matched (within ``tol``) by at least one imitation."""
    if not imitations:
        raise ValueError("mode_coverage: no imitations")
    return coverage_of_speeds([mean_speed(t) for t in imitations], targets, tol)


def coverage_of_speeds(speeds, targets=TARGET_SPEEDS, tol: float = 0.5) -> float:
    speeds = np.asarray(speeds, dtype=np.float64)
    if speeds.size == 0:
        raise ValueError("mode_coverage: no imitations")
    hit = [bool(np.any(np.abs(speeds - s) <= tol)) for s in targets]
    return sum(hit) / len(targets)


@dataclass
class EvalReport:
    metric: str
    tolerance: float
    records: list = field(default_factory=list)

    def add(self, ident, task, value: float, **extra):
        self.records.append({"id": ident, "task": task, self.metric: float(value), **extra})

    @property
    def values(self) -> np.ndarray:
        return np.array([r[self.metric] for r in self.records], dtype=np.float64)

    def aggregates(self) -> dict:
        v = self.values
        if v.size == 0:
            return {"count": 0}
        return {"count": int(v.size), "mean": float(v.mean()), "median": float(np.median(v)),
                "fraction_within_tolerance": float(np.mean(v <= self.tolerance))}

    def to_json(self) -> str:
        return json.dumps({"metric": self.metric, "tolerance": self.tolerance,
                           "records": self.records, "aggregates": self.aggregates()},
                          indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        d = json.loads(text)
        return cls(d["metric"], d["tolerance"], d["records"])
