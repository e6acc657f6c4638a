"""Keep-ratio schedules and forward-sample accounting."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

KINDS = ("rollercoaster", "linear", "cosine", "fixed")


class ScheduleError(ValueError):
    pass


@dataclass(frozen=True)
class ScheduleSpec:
    kind: str = "rollercoaster"
    prune_ratio: float = 0.0
    beta: float = 0.25
    anneal: float = 0.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ScheduleError(f"unknown schedule kind {self.kind!r}")
        if not 0.0 <= self.prune_ratio < 1.0:
            raise ScheduleError("prune ratio must lie in [0, 1)")
        if not self.beta > 0:
            raise ScheduleError("beta must be positive")
        if not 0.0 <= self.anneal < 1.0:
            raise ScheduleError("annealing fraction must lie in [0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)


def annealing_epochs(spec: ScheduleSpec, T: int) -> int:
    """Number of trailing full-data epochs, ``ceil(anneal * T)``."""
    # guard against 0.1 * 30 == 3.0000000000000004
    return int(math.ceil(spec.anneal * T - 1e-9)) if spec.anneal > 0 else 0


def in_annealing(spec: ScheduleSpec, t: float, T: int) -> bool:
    return t >= T - annealing_epochs(spec, T)


def rollercoaster_ratio(t: float, T: int, s: float, beta: float) -> float:
    if t <= 0 or s == 0.0:
        return 1.0
    if t >= T:
        return 1.0 - s
    return math.exp((t / T) ** beta * math.log(1.0 - s))


def comparison_ratio(kind: str, t: float, T: int, s: float) -> float:
    if kind == "fixed":
        return 1.0 - s
    if kind not in ("linear", "cosine"):
        raise ScheduleError(f"no comparison schedule {kind!r}")
    if T <= 1:
        return 1.0
    frac = min(max(t / (T - 1), 0.0), 1.0)
    if kind == "linear":
        r = 1.0 - s * frac
    else:
        r = 1.0 - s * (1.0 - math.cos(math.pi * frac)) / 2.0
    return min(max(r, 1.0 - s), 1.0)


def keep_ratio(spec: ScheduleSpec, t: float, T: int) -> float:
    """Retained fraction r_t for epoch ``t`` of ``T``; 1.0 inside the annealing window."""
    if T < 1:
        raise ScheduleError("T must be at least 1")
    if not 0 <= t <= T:
        raise ScheduleError(f"epoch {t} outside [0, {T}]")
    if spec.anneal > 0 and in_annealing(spec, t, T):
        return 1.0
    if spec.kind == "rollercoaster":
        return rollercoaster_ratio(t, T, spec.prune_ratio, spec.beta)
    return comparison_ratio(spec.kind, t, T, spec.prune_ratio)


def ratio_table(spec: ScheduleSpec, T: int) -> list[tuple[int, float]]:
    return [(t, keep_ratio(spec, t, T)) for t in range(T)]


@dataclass
class ForwardAccounting:
    """Forward-sample counters; ``rfs`` includes score-refresh passes."""

    tfs: int = 0
    rfs: int = 0
    rfs_refresh: int = 0

    @property
    def rfs_without_refresh(self) -> int:
        return self.rfs - self.rfs_refresh

    def add_training(self, count: int) -> None:
        self.rfs += int(count)

    def add_refresh(self, count: int) -> None:
        self.rfs += int(count)
        self.rfs_refresh += int(count)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["rfs_without_refresh"] = self.rfs_without_refresh
        d["sr"] = save_ratio(self) if self.tfs > 0 else None
        return d


def save_ratio(acct: ForwardAccounting) -> float:
    if acct.tfs <= 0:
        raise ScheduleError("TFS must be positive")
    return (acct.tfs - acct.rfs) / acct.tfs
