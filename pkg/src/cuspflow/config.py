"""JSON run configuration."""
from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .conical import DEFAULT_LADDER
from .errors import InvalidSpecError
from .flow import DEFAULT_CHECKPOINTS, TimeSchedule
from .limits import LadderSpec
from .solvers import NewtonConfig
from .torus import TorusSpec

THREADS_ENV = "CUSPFLOW_THREADS"


@dataclass(frozen=True)
class RunConfig:
    torus: TorusSpec = field(default_factory=TorusSpec)
    ladder: LadderSpec = field(default_factory=LadderSpec)
    newton: NewtonConfig = field(default_factory=NewtonConfig)
    output_dir: str = "cuspflow-run"
    threads: int = 0
    raw: dict = field(default_factory=dict, compare=False)

    @property
    def schedule(self) -> TimeSchedule:
        return self.ladder.schedule

    def worker_count(self) -> int:
        """Pool size: ``CUSPFLOW_THREADS`` if set, else ``threads``, with 0 meaning one per CPU."""
        env = os.environ.get(THREADS_ENV)
        n = self.threads
        if env not in (None, ""):
            try:
                n = int(env)
            except ValueError as exc:
                raise InvalidSpecError(f"{THREADS_ENV} must be an integer, got {env!r}") from exc
            if n < 0:
                raise InvalidSpecError(f"{THREADS_ENV} must be >= 0")
        return n if n > 0 else (os.cpu_count() or 1)

    def snapshot(self) -> dict:
        """The config as given, completed with defaults."""
        t = self.torus
        s = self.schedule
        return {
            "torus": {"tau_re": t.tau.real, "tau_im": t.tau.imag, "nx": t.nx, "ny": t.ny, "offset": t.offset,
                      "delta0": t.delta0, "puncture": list(t.puncture), "stencil": t.stencil},
            "ladder": {"betas": list(self.ladder.betas), "epsilons": list(self.ladder.epsilons),
                       "alt_ladder": self.ladder.alt_ladder},
            "schedule": {"dt0": s.dt0, "growth": s.growth, "dt_max": s.dt_max, "t_end": s.t_end,
                         "checkpoints": list(s.checkpoints)},
            "newton": asdict(self.newton),
            "output_dir": self.output_dir,
            "threads": self.threads,
        }


_SECTIONS = {
    "torus": {"tau_re", "tau_im", "nx", "ny", "offset", "delta0", "puncture", "stencil"},
    "ladder": {"betas", "epsilons", "alt_ladder"},
    "schedule": {"dt0", "growth", "dt_max", "t_end", "checkpoints"},
    "newton": {"tol", "max_iter", "damping_min", "positivity_margin", "cg_max_iter"},
}


def _section(d: dict, name: str) -> dict:
    sec = d.get(name, {})
    if not isinstance(sec, dict):
        raise InvalidSpecError(f"'{name}' must be an object")
    unknown = set(sec) - _SECTIONS[name]
    if unknown:
        raise InvalidSpecError(f"unknown keys in '{name}': {sorted(unknown)}")
    return sec


def config_from_dict(d: dict[str, Any]) -> RunConfig:
    """Build and validate a RunConfig; every problem surfaces as InvalidSpecError."""
    if not isinstance(d, dict):
        raise InvalidSpecError("config must be a JSON object")
    unknown = set(d) - set(_SECTIONS) - {"output_dir", "threads"}
    if unknown:
        raise InvalidSpecError(f"unknown top-level keys: {sorted(unknown)}")
    try:
        t = _section(d, "torus")
        torus = TorusSpec(
            tau=complex(float(t.get("tau_re", 0.0)), float(t.get("tau_im", 1.0))),
            nx=t.get("nx", 128), ny=t.get("ny", 128), offset=float(t.get("offset", 0.5)),
            delta0=float(t.get("delta0", np.exp(-4.0))), puncture=tuple(t.get("puncture", (0.0, 0.0))),
            stencil=t.get("stencil", "fd"),
        )
        s = _section(d, "schedule")
        sched = TimeSchedule(
            t_end=float(s.get("t_end", 20.0)), dt0=float(s.get("dt0", 1e-3)),
            growth=float(s.get("growth", 1.1)), dt_max=float(s.get("dt_max", 0.1)),
            checkpoints=tuple(float(c) for c in s.get("checkpoints", DEFAULT_CHECKPOINTS)),
        )
        lad = _section(d, "ladder")
        ladder = LadderSpec(
            betas=tuple(lad.get("betas", DEFAULT_LADDER)),
            epsilons=None if lad.get("epsilons") is None else tuple(lad["epsilons"]),
            schedule=sched, alt_ladder=bool(lad.get("alt_ladder", False)),
        )
        newton = NewtonConfig(**{k: (int(v) if k in ("max_iter", "cg_max_iter") else float(v))
                                 for k, v in _section(d, "newton").items()})
        threads = d.get("threads", 0)
        if int(threads) != threads or threads < 0:
            raise InvalidSpecError("threads must be a non-negative integer")
        out = str(d.get("output_dir", "cuspflow-run"))
    except InvalidSpecError:
        raise
    except (TypeError, ValueError) as exc:
        raise InvalidSpecError(f"malformed config: {exc}") from exc
    return RunConfig(torus, ladder, newton, out, int(threads), raw=d)


def load_config(path) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise InvalidSpecError(f"cannot read config {path}: {exc}") from exc
    try:
        d = json.loads(text)
    except json.JSONDecodeError as exc:
        raise InvalidSpecError(f"config {path} is not valid JSON: {exc}") from exc
    return config_from_dict(d)
