"""Solver telemetry shared by all methods."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field


@dataclass
class SolveReport:
    """Per-iteration history of a solve.

    ``residuals[i]`` and ``ranks[i]`` describe the iterate after iteration
    ``i + 1``; the starting point is kept in ``initial_residual``.
    """

    method: str
    residuals: list = field(default_factory=list)
    ranks: list = field(default_factory=list)
    iterations: int = 0
    wall_time: float = 0.0
    status: str = "not_run"
    initial_residual: float | None = None
    reference_residual: float | None = None
    target: float | None = None
    config: dict = field(default_factory=dict)
    checksum: str | None = None
    telemetry: dict = field(default_factory=dict)

    @property
    def converged(self):
        return self.status == "converged"

    @property
    def final_residual(self):
        return self.residuals[-1] if self.residuals else self.initial_residual

    @property
    def max_rank(self):
        return max(self.ranks) if self.ranks else None

    def record(self, residual, rank):
        self.residuals.append(float(residual))
        self.ranks.append(int(rank))
        self.iterations = len(self.residuals)

    def to_dict(self):
        out = asdict(self)
        out["converged"] = self.converged
        out["max_rank"] = self.max_rank
        return out

    def to_json(self, **kw):
        return json.dumps(self.to_dict(), default=_jsonable, **kw)


def _jsonable(obj):
    if hasattr(obj, "tolist"):
        return obj.tolist()
    if hasattr(obj, "item"):
        return obj.item()
    if hasattr(obj, "__dict__"):
        return obj.__dict__
    return str(obj)


def tensor_checksum(x):
    from .tt import dumps_ttf1

    return hashlib.sha256(dumps_ttf1(x)).hexdigest()
