"""Pass/fail records emitted by every diagnostic."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Any

import numpy as np


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if np.isfinite(v) else str(v)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, complex):
        return [obj.real, obj.imag]
    return obj


@dataclass
class CheckReport:
    """One property evaluation: ``value`` compared against ``tolerance``.

    Failing checks are reported, never raised; the caller decides what a
    failure means (exit code, test assertion, ...).
    """

    check: str
    value: float
    tolerance: float | None
    passed: bool
    params: dict[str, Any] = field(default_factory=dict)
    details: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        self.value = float(self.value)
        self.passed = bool(self.passed)
        if self.tolerance is not None:
            self.tolerance = float(self.tolerance)

    def __bool__(self) -> bool:
        return bool(self.passed)

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["pass"] = bool(d.pop("passed"))
        return _plain(d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def plain(obj):
    """JSON-ready copy of nested numpy/python containers."""
    return _plain(obj)
