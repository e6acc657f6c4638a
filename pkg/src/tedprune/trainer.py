"""Dynamic-pruning training loop and its baselines.

Every mode goes through :func:`_run`, so the degenerate settings (no pruning,
full keep ratio) follow bit-for-bit the same arithmetic as the full-data run.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, replace
from typing import Callable

import numpy as np

from .data import Dataset, PruneState, epoch_batches
from .model import (DivergenceError, ModelSpec, OptState, accuracy, grad_batch, init_model,
                    loss_and_grad, mean_loss, per_sample_grads, sgd_step)
from .schedule import ForwardAccounting, ScheduleSpec, in_annealing, keep_ratio, save_ratio
from .scoring import ScoreTable, random_state, select_retained, ted_instant_scores

log = logging.getLogger(__name__)

MODES = ("ted", "loss", "random", "none")
REFERENCES = ("batch", "full-periodic")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Seeds:
    init: int = 0
    shuffle: int = 0
    scoring: int = 0

    def offset(self, k: int) -> "Seeds":
        return Seeds(self.init + k, self.shuffle + k, self.scoring + k)


@dataclass(frozen=True)
class TrainConfig:
    model: ModelSpec
    schedule: ScheduleSpec = field(default_factory=ScheduleSpec)
    mode: str = "ted"
    epochs: int = 40
    batch_size: int = 32
    lr: float = 0.1
    momentum: float = 0.9
    seeds: Seeds = field(default_factory=Seeds)
    correction: bool = True
    refresh: bool = False
    alpha: float = 0.9
    reference: str = "batch"
    reverse: bool = False
    track_pcc: bool = False

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"unknown scoring mode {self.mode!r}")
        if self.reference not in REFERENCES:
            raise ConfigError(f"unknown reference {self.reference!r}")
        if self.epochs < 1:
            raise ConfigError("epochs must be at least 1")
        if self.batch_size < 1:
            raise ConfigError("batch size must be at least 1")
        if not self.lr > 0:
            raise ConfigError("learning rate must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError("momentum must lie in [0, 1)")
        if not 0.0 <= self.alpha < 1.0:
            raise ConfigError("alpha must lie in [0, 1)")
        if self.mode == "none" and self.schedule.prune_ratio != 0.0:
            raise ConfigError("mode 'none' requires prune ratio 0")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["model"] = self.model.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["model"] = ModelSpec.from_dict(d["model"])
        d["schedule"] = ScheduleSpec(**d.get("schedule", {}))
        d["seeds"] = Seeds(**d.get("seeds", {}))
        return cls(**d)

    def with_(self, **changes) -> "TrainConfig":
        return replace(self, **changes)


@dataclass
class EpochRecord:
    epoch: int
    r_t: float
    retained: int
    train_loss: float
    full_train_loss: float
    test_acc: float | None
    rfs_cum: int
    grad_pcc: float | None = None

    def to_dict(self) -> dict:
        d = asdict(self)
        if d["grad_pcc"] is None:
            del d["grad_pcc"]
        return d


@dataclass
class RunResult:
    config: TrainConfig
    records: list[EpochRecord]
    accounting: ForwardAccounting
    theta_1: np.ndarray | None
    theta_T: np.ndarray
    scores: ScoreTable
    retained_history: list[np.ndarray] = field(default_factory=list, repr=False)

    @property
    def final_test_acc(self) -> float | None:
        return self.records[-1].test_acc

    @property
    def sr(self) -> float:
        return save_ratio(self.accounting)


class _FixedSelector:
    def __init__(self, state: PruneState):
        self.state = state

    def __call__(self, t, r_t, table, rng):
        return self.state


def _dynamic_selector(cfg: TrainConfig, train: Dataset):
    def select(t, r_t, table, rng):
        if r_t >= 1.0:
            return PruneState.full(train)
        if cfg.mode == "random":
            return random_state(train.ids, r_t, rng)
        return select_retained(table, r_t, reverse=cfg.reverse)
    return select


def _pcc(a: np.ndarray, b: np.ndarray) -> float:
    from .oracle import grad_pcc
    return grad_pcc(a, b)


def _run(cfg: TrainConfig, train: Dataset, test: Dataset | None, selector, *,
         score_kind: str | None, static_ratio: float | None = None,
         on_batch: Callable | None = None, on_epoch: Callable | None = None,
         init_params: np.ndarray | None = None) -> RunResult:
    spec, T, n = cfg.model, cfg.epochs, train.n
    params = init_model(spec, cfg.seeds.init) if init_params is None else np.array(init_params, dtype=np.float64)
    opt = OptState(cfg.lr, cfg.momentum)
    table = ScoreTable.fresh(train.ids, cfg.alpha)
    acct = ForwardAccounting(tfs=n * T)
    score_rng = np.random.default_rng(cfg.seeds.scoring)
    X, y = train.X, train.y
    records: list[EpochRecord] = []
    history: list[np.ndarray] = []
    theta_1 = None

    def divergence(msg, epoch):
        raise DivergenceError(f"{msg} at epoch {epoch}", {
            "epoch": epoch, "records": [r.to_dict() for r in records]})

    for t in range(T):
        if static_ratio is not None:
            annealing, r_t = False, static_ratio
        else:
            annealing = cfg.schedule.anneal > 0 and in_annealing(cfg.schedule, t, T)
            r_t = keep_ratio(cfg.schedule, t, T)

        if cfg.refresh and t > 0 and score_kind is not None and static_ratio is None:
            prev = history[-1] if history else None
            pruned = np.setdiff1d(train.ids, prev) if prev is not None else np.empty(0, np.int64)
            if pruned.size:
                _refresh(cfg, train, table, params, pruned, score_kind, t)
                acct.add_refresh(pruned.size)

        state = selector(t, r_t, table, score_rng)
        history.append(state.retained)
        correction = r_t if (cfg.correction and not annealing) else 1.0

        reference = None
        if score_kind == "ted" and cfg.reference == "full-periodic":
            reference = grad_batch(spec, params, X, y)
            acct.add_refresh(n)

        seed = np.random.SeedSequence([cfg.seeds.shuffle, t])
        loss_sum, seen = 0.0, 0
        for batch_ids in epoch_batches(train, state, cfg.batch_size, seed):
            if on_batch is not None:
                on_batch(t, batch_ids, state)
            pos = train.positions(batch_ids)
            losses, grad = loss_and_grad(spec, params, X[pos], y[pos])
            if not np.all(np.isfinite(losses)):
                divergence("non-finite loss", t)
            loss_sum += float(losses.sum())
            seen += pos.size
            if score_kind == "ted":
                G = per_sample_grads(spec, params, X[pos], y[pos])
                ref = grad if reference is None else reference
                table.update(pos, ted_instant_scores(G, ref, cfg.lr), t)
            elif score_kind == "loss":
                table.update(pos, losses, t)
            params = sgd_step(params, grad / correction, opt)
            if not np.all(np.isfinite(params)):
                divergence("non-finite parameters", t)
        acct.add_training(seen)

        full_loss = mean_loss(spec, params, X, y)
        if not np.isfinite(full_loss):
            divergence("non-finite full-data loss", t)
        rec = EpochRecord(
            epoch=t, r_t=r_t, retained=int(state.retained.size),
            train_loss=loss_sum / seen, full_train_loss=full_loss,
            test_acc=accuracy(spec, params, test.X, test.y) if test is not None else None,
            rfs_cum=acct.rfs,
        )
        if cfg.track_pcc:
            rpos = train.positions(state.retained)
            rec.grad_pcc = _pcc(grad_batch(spec, params, X[rpos], y[rpos]), grad_batch(spec, params, X, y))
        records.append(rec)
        if t == 0:
            theta_1 = params.copy()
        if on_epoch is not None:
            on_epoch(t, params, state)
        log.debug("epoch %d r=%.3f kept=%d loss=%.4f", t, r_t, rec.retained, full_loss)

    return RunResult(cfg, records, acct, theta_1, params, table, history)


def _refresh(cfg, train, table, params, pruned_ids, score_kind, t):
    """Score pruned samples without updating weights, in batch-sized chunks."""
    spec = cfg.model
    for i in range(0, pruned_ids.size, cfg.batch_size):
        pos = train.positions(pruned_ids[i:i + cfg.batch_size])
        if score_kind == "ted":
            G = per_sample_grads(spec, params, train.X[pos], train.y[pos])
            table.update(pos, ted_instant_scores(G, G.mean(axis=0), cfg.lr), t)
        else:
            losses, _ = loss_and_grad(spec, params, train.X[pos], train.y[pos])
            table.update(pos, losses, t)


def correct_loss(batch_loss: float, r_t: float) -> float:
    """Rescale a retained-batch loss by the keep ratio."""
    if not r_t > 0:
        raise ValueError("keep ratio must be positive")
    return batch_loss / r_t


def train_dynamic(cfg: TrainConfig, train: Dataset, test: Dataset | None = None, **hooks) -> RunResult:
    if cfg.mode == "none":
        return train_full(cfg, train, test, **hooks)
    score_kind = cfg.mode if cfg.mode in ("ted", "loss") else None
    return _run(cfg, train, test, _dynamic_selector(cfg, train), score_kind=score_kind, **hooks)


def train_full(cfg: TrainConfig, train: Dataset, test: Dataset | None = None,
               record_scores: str | None = None, **hooks) -> RunResult:
    """Plain training on every sample; ``record_scores`` ('ted'/'loss') fills the score table."""
    cfg = cfg.with_(schedule=replace(cfg.schedule, prune_ratio=0.0))
    return _run(cfg, train, test, _FixedSelector(PruneState.full(train)), score_kind=record_scores, **hooks)


def train_random_dynamic(cfg: TrainConfig, train: Dataset, test: Dataset | None = None, **hooks) -> RunResult:
    return train_dynamic(cfg.with_(mode="random"), train, test, **hooks)


def train_static(cfg: TrainConfig, train: Dataset, test: Dataset | None = None,
                 frozen_scores: ScoreTable | None = None, reverse: bool = False, **hooks) -> RunResult:
    """One subset chosen up front from ``frozen_scores`` at the target ratio, kept all run."""
    if frozen_scores is None:
        raise ConfigError("static training needs frozen scores")
    if not np.array_equal(np.sort(frozen_scores.ids), np.sort(train.ids)):
        raise ConfigError("frozen scores must cover every training id")
    r = 1.0 - cfg.schedule.prune_ratio
    state = select_retained(frozen_scores, r, reverse=reverse)
    return train_subset(cfg, train, test, state, **hooks)


def train_subset(cfg: TrainConfig, train: Dataset, test: Dataset | None, state: PruneState,
                 **hooks) -> RunResult:
    """Train on a fixed retained set for every epoch (no schedule, no annealing)."""
    return _run(cfg, train, test, _FixedSelector(state), score_kind=None,
                static_ratio=state.keep_ratio, **hooks)


def surrogate_scores(cfg: TrainConfig, train: Dataset, kind: str = "ted") -> ScoreTable:
    """Scores recorded during a completed full-data run (the static TEDS protocol)."""
    return train_full(cfg.with_(mode="none", schedule=replace(cfg.schedule, prune_ratio=0.0)),
                      train, record_scores=kind).scores
