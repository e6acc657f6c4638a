"""Brute-force ground truth for the pruning approximations.

Everything here retrains to (near) exact optima, so it is only meant for tiny
problems: tens of samples and convex models. For MLPs :func:`fit` keeps the
best of several restarts and flags the result as non-convex.
"""
from __future__ import annotations

import itertools
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize, stats

from .data import Dataset, PruneState
from .model import (ModelSpec, accuracy, grad_batch, init_model, mean_loss, per_sample_grads,
                    unpack)
from .scoring import expected_batch_reference, one_step_scores, mask_gradient_direct, ted_instant_score
from .trainer import TrainConfig, train_subset


class ConvergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class FitProtocol:
    tol: float = 1e-8
    max_iter: int = 50_000
    restarts: int = 5
    seed: int = 0


@dataclass
class FitResult:
    params: np.ndarray
    loss: float
    grad_norm: float
    iterations: int
    converged: bool


def _is_convex(spec: ModelSpec) -> bool:
    return spec.architecture != "mlp"


def _fd_hessian(spec, params, X, y, eps=1e-5):
    P = params.size
    H = np.empty((P, P))
    for j in range(P):
        e = np.zeros(P)
        e[j] = eps
        H[:, j] = (grad_batch(spec, params + e, X, y) - grad_batch(spec, params - e, X, y)) / (2 * eps)
    return 0.5 * (H + H.T)


def _least_squares(spec: ModelSpec, X, y) -> np.ndarray:
    """Closed-form minimiser of mean squared error plus the folded-in ridge term."""
    n = X.shape[0]
    A = np.hstack([X, np.ones((n, 1))]) if spec.bias else X
    Y = np.asarray(y, dtype=np.float64).reshape(n, -1)
    lhs = (2.0 / n) * A.T @ A + spec.l2 * np.eye(A.shape[1])
    rhs = (2.0 / n) * A.T @ Y
    coef = np.linalg.lstsq(lhs, rhs, rcond=None)[0]
    W = coef[:X.shape[1]]
    parts = [W.ravel()]
    if spec.bias:
        parts.append(coef[X.shape[1]])
    return np.concatenate(parts)


def fit(spec: ModelSpec, X, y, protocol: FitProtocol = FitProtocol(), init=None,
        strict: bool | None = None) -> FitResult:
    """Minimise the mean loss to gradient norm ``protocol.tol``.

    Convex models use one trust-region Newton run (Hessian by differencing the
    analytic gradient); MLPs use ``protocol.restarts`` seeded starts and keep
    the lowest loss. ``strict`` (default: convex) raises on non-convergence.
    """
    X = np.asarray(X, dtype=np.float64)
    strict = _is_convex(spec) if strict is None else strict
    if spec.architecture == "linear-regression" and spec.loss == "squared-error":
        p = _least_squares(spec, X, y)
        gn = float(np.linalg.norm(grad_batch(spec, p, X, y)))
        return FitResult(p, mean_loss(spec, p, X, y), gn, 0, gn <= max(protocol.tol, 1e-10))

    def f(p):
        return mean_loss(spec, p, X, y)

    def g(p):
        return grad_batch(spec, p, X, y)

    def h(p):
        return _fd_hessian(spec, p, X, y)

    if _is_convex(spec):
        starts = [np.zeros(spec.dim) if init is None else np.asarray(init, dtype=np.float64)]
    else:
        starts = [init_model(spec, protocol.seed + k) for k in range(protocol.restarts)]
        if init is not None:
            starts[0] = np.asarray(init, dtype=np.float64)
    best = None
    for x0 in starts:
        gn0 = float(np.linalg.norm(g(x0)))
        if gn0 <= protocol.tol:
            res = FitResult(x0.copy(), f(x0), gn0, 0, True)
        else:
            out = optimize.minimize(f, x0, jac=g, hess=h, method="trust-exact",
                                    options={"gtol": protocol.tol * 0.1, "maxiter": protocol.max_iter})
            gn = float(np.linalg.norm(g(out.x)))
            res = FitResult(out.x, float(out.fun), gn, int(out.nit), gn <= protocol.tol)
        if best is None or res.loss < best.loss:
            best = res
    if strict and not best.converged:
        raise ConvergenceError(f"gradient norm {best.grad_norm:.3g} above {protocol.tol:g} "
                               f"after {best.iterations} iterations")
    return best


# --- internal generalisation distance ----------------------------------------

@dataclass
class IGDReport:
    subset: tuple[int, ...]
    loss_at_pruned_optimum: float
    loss_at_full_optimum: float
    igd: float
    grad_norm: float
    tol: float

    def to_dict(self) -> dict:
        return {"subset": " ".join(map(str, self.subset)),
                "loss_at_pruned_optimum": self.loss_at_pruned_optimum,
                "loss_at_full_optimum": self.loss_at_full_optimum,
                "igd": self.igd, "grad_norm": self.grad_norm, "tol": self.tol}


def igd_exact(spec: ModelSpec, data: Dataset, subset, protocol: FitProtocol = FitProtocol(),
              full_fit: FitResult | None = None) -> IGDReport:
    """``L(D, argmin L(D - S)) - L(D, argmin L(D))`` by retraining."""
    subset = tuple(sorted(int(i) for i in subset))
    if len(subset) >= data.n:
        raise ValueError("the removed subset must be a proper subset")
    full = full_fit or fit(spec, data.X, data.y, protocol)
    if not subset:
        pruned_params, gn = full.params, full.grad_norm
    else:
        rest = data.without(subset)
        res = fit(spec, rest.X, rest.y, protocol, init=full.params)
        pruned_params, gn = res.params, res.grad_norm
    l_pruned = mean_loss(spec, pruned_params, data.X, data.y)
    l_full = mean_loss(spec, full.params, data.X, data.y)
    return IGDReport(subset, l_pruned, l_full, l_pruned - l_full, gn, protocol.tol)


def _loo_job(args):
    spec, data, sid, protocol, full = args
    return igd_exact(spec, data, [sid], protocol, full).igd


def loo_igd(spec: ModelSpec, data: Dataset, protocol: FitProtocol = FitProtocol(),
            workers: int = 1, full_fit: FitResult | None = None) -> np.ndarray:
    """Exact leave-one-out IGD for every sample, in the dataset's id order."""
    full = full_fit or fit(spec, data.X, data.y, protocol)
    jobs = [(spec, data, int(i), protocol, full) for i in data.ids]
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            return np.array(list(pool.map(_loo_job, jobs)))
    return np.array([_loo_job(j) for j in jobs])


def redundant_sample_exact(spec: ModelSpec, data: Dataset, protocol: FitProtocol = FitProtocol(),
                           workers: int = 1) -> int:
    """The sample whose removal moves the full-data loss least (lowest id on ties)."""
    igd = loo_igd(spec, data, protocol, workers)
    order = np.lexsort((data.ids, igd))
    return int(data.ids[order[0]])


# --- subset ranking and IGD velocity ----------------------------------------------

@dataclass
class Lemma1Report:
    m: int
    rows: list[dict]
    rank_identical: bool
    argmax_igd: tuple[int, ...]
    argmin_risk: tuple[int, ...] | None
    agree: bool


def lemma1_check(spec: ModelSpec, data: Dataset, m: int,
                 protocol: FitProtocol = FitProtocol()) -> Lemma1Report:
    """Enumerate every size-``m`` subset S and compare two rankings.

    Per subset: ``igd`` is the loss gap after removing S, ``loss_removed`` the
    full-data loss at the optimum without S, and ``risk_trained`` the
    full-data loss of a model fit on S alone. ``rank_identical`` checks that
    sorting by ``igd`` and by ``loss_removed`` coincide; ``agree`` reports
    whether the subset with the largest ``igd`` is also the one with the
    smallest ``risk_trained``.
    """
    if not 0 <= m < data.n:
        raise ValueError("m must lie in [0, n)")
    full = fit(spec, data.X, data.y, protocol)
    rows = []
    for combo in itertools.combinations(data.ids.tolist(), m):
        rep = igd_exact(spec, data, combo, protocol, full)
        row = {"subset": combo, "igd": rep.igd, "loss_removed": rep.loss_at_pruned_optimum,
               "risk_trained": math.nan}
        if m > 0:
            only = data.subset(combo)
            row["risk_trained"] = mean_loss(spec, fit(spec, only.X, only.y, protocol).params,
                                            data.X, data.y)
        rows.append(row)
    igd = np.array([r["igd"] for r in rows])
    removed = np.array([r["loss_removed"] for r in rows])
    by_igd = np.argsort(igd, kind="stable")
    by_loss = np.argsort(removed, kind="stable")
    # float ties after subtracting the constant may reorder equal keys only
    rank_identical = bool(np.array_equal(by_igd, by_loss) or np.array_equal(igd[by_igd], igd[by_loss]))
    argmax_igd = rows[int(np.argmax(igd))]["subset"]
    if m == 0:
        return Lemma1Report(m, rows, rank_identical, argmax_igd, None, True)
    risk = np.array([r["risk_trained"] for r in rows])
    argmin_risk = rows[int(np.argmin(risk))]["subset"]
    return Lemma1Report(m, rows, rank_identical, argmax_igd, argmin_risk, argmax_igd == argmin_risk)


@dataclass
class VelocityTrace:
    t: np.ndarray
    igd: np.ndarray
    velocity: np.ndarray
    grad_norm: np.ndarray
    C: np.ndarray
    bound: np.ndarray
    slack: np.ndarray
    slack_unscaled: np.ndarray = field(repr=False, default=None)

    def rows(self) -> list[dict]:
        return [{"t": int(t), "igd": a, "velocity": v, "grad_norm": g, "C": c, "bound": b,
                 "slack": s, "slack_unscaled": su}
                for t, a, v, g, c, b, s, su in zip(self.t, self.igd, self.velocity, self.grad_norm,
                                                   self.C, self.bound, self.slack, self.slack_unscaled)]


def lemma2_constant(trajectory: np.ndarray, eta: float) -> np.ndarray:
    """``eta * |d theta / dt|`` by centred differences over a (T, P) trajectory."""
    speed = np.gradient(np.asarray(trajectory, dtype=np.float64), axis=0)
    return eta * np.linalg.norm(speed, axis=1)


def lemma2_residuals(spec: ModelSpec, data: Dataset, sample_id: int, eta: float = 1.0,
                     steps: int = 200, protocol: FitProtocol = FitProtocol(), init=None) -> VelocityTrace:
    """Full-batch GD on D minus one sample; checks ``|V_t - V_T| <= |grad L(D)| * C``.

    ``slack`` uses ``C = eta * |d theta/dt|``. ``slack_unscaled`` drops the
    ``eta`` factor, which is the Cauchy-Schwarz form of the same bound.
    """
    full = fit(spec, data.X, data.y, protocol)
    rest = data.without([sample_id])
    params = np.zeros(spec.dim) if init is None else np.asarray(init, dtype=np.float64)
    traj = [params]
    for _ in range(steps):
        params = params - eta * grad_batch(spec, params, rest.X, rest.y)
        traj.append(params)
    traj = np.array(traj)
    igd = np.array([mean_loss(spec, p, data.X, data.y) for p in traj]) - full.loss
    velocity = np.gradient(igd)
    grad_norm = np.array([np.linalg.norm(grad_batch(spec, p, data.X, data.y)) for p in traj])
    C = lemma2_constant(traj, eta)
    gap = np.abs(velocity - velocity[-1])
    bound = grad_norm * C
    unscaled = grad_norm * lemma2_constant(traj, 1.0)
    return VelocityTrace(np.arange(len(traj)), igd, velocity, grad_norm, C, bound,
                         bound - gap, unscaled - gap)


# --- gradient agreement and landscape -------------------------------------------

def grad_pcc(a, b) -> float:
    """Pearson correlation between the coordinates of two gradient vectors."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("gradient dimensions differ")
    if np.ptp(a) == 0 or np.ptp(b) == 0:
        raise ValueError("correlation undefined for a constant vector")
    a = a - a.mean()
    b = b - b.mean()
    r = float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))
    return max(-1.0, min(1.0, r))


def interpolation_landscape(spec: ModelSpec, theta_1, theta_T, train: Dataset,
                            test: Dataset | None = None, num_points: int = 21) -> list[dict]:
    """Loss and accuracy along ``(1 - a) * theta_1 + a * theta_T`` for a in [0, 1]."""
    theta_1 = np.asarray(theta_1, dtype=np.float64)
    theta_T = np.asarray(theta_T, dtype=np.float64)
    if theta_1.shape != theta_T.shape:
        raise ValueError("endpoint dimensions differ")
    if num_points < 2:
        raise ValueError("need at least two points")
    rows = []
    for a in np.linspace(0.0, 1.0, num_points):
        if a == 0.0:
            p = theta_1.copy()
        elif a == 1.0:
            p = theta_T.copy()
        else:
            p = (1.0 - a) * theta_1 + a * theta_T
        rows.append({
            "alpha": float(a),
            "train_loss": mean_loss(spec, p, train.X, train.y),
            "test_acc": accuracy(spec, p, test.X, test.y) if test is not None else None,
        })
    return rows


# --- IG curve -------------------------------------------------------------------

@dataclass
class IGCurve:
    epochs: list[int]
    full_loss: list[float]
    pruned_loss: list[float]
    retained_loss: list[float]

    @property
    def ig(self) -> float:
        return self.full_loss[-1] - self.full_loss[0]

    def rows(self) -> list[dict]:
        return [{"epoch": e, "full_loss": f, "pruned_loss": p, "retained_loss": r}
                for e, f, p, r in zip(self.epochs, self.full_loss, self.pruned_loss, self.retained_loss)]


def ig_curve(cfg: TrainConfig, train: Dataset, pruned_ids) -> IGCurve:
    """Train on the retained part only and watch the loss of the part left out."""
    pruned_ids = np.unique(np.asarray(list(pruned_ids), dtype=np.int64))
    if pruned_ids.size >= train.n:
        raise ValueError("pruned set must be a proper subset")
    retained = np.setdiff1d(train.ids, pruned_ids)
    state = PruneState.from_retained(train.ids, retained, retained.size / train.n)
    spec = cfg.model
    ppos = train.positions(pruned_ids)
    rpos = train.positions(retained)
    curve = IGCurve([], [], [], [])

    def watch(t, params, _state):
        curve.epochs.append(t)
        curve.full_loss.append(mean_loss(spec, params, train.X, train.y))
        curve.pruned_loss.append(mean_loss(spec, params, train.X[ppos], train.y[ppos]) if ppos.size else math.nan)
        curve.retained_loss.append(mean_loss(spec, params, train.X[rpos], train.y[rpos]))

    train_subset(cfg, train, None, state, on_epoch=watch)
    return curve


# --- Taylor fidelity --------------------------------------------------------------

@dataclass
class FidelityReport:
    spearman: float
    kendall: float
    rows: list[dict]
    degenerate: bool


def _rank_corr(a, b):
    a, b = np.asarray(a), np.asarray(b)
    if np.ptp(a) <= 1e-15 * max(1.0, np.abs(a).max()) or np.ptp(b) <= 1e-15 * max(1.0, np.abs(b).max()):
        return math.nan, math.nan, True
    return float(stats.spearmanr(a, b)[0]), float(stats.kendalltau(a, b)[0]), False


def taylor_fidelity(spec: ModelSpec, data: Dataset, batch_size: int = 8, eta: float = 0.1,
                    protocol: FitProtocol = FitProtocol(), workers: int = 1) -> FidelityReport:
    """Instant scores at the full-data optimum against exact leave-one-out IGD.

    At the optimum the full-data gradient vanishes, so each sample is scored
    against the expected gradient of a size-``batch_size`` minibatch that
    contains it, the reference the trainer actually uses.
    """
    full = fit(spec, data.X, data.y, protocol)
    G = per_sample_grads(spec, full.params, data.X, data.y)
    scores = np.array([ted_instant_score(G[k], expected_batch_reference(G, k, batch_size), eta)
                       for k in range(data.n)])
    igd = loo_igd(spec, data, protocol, workers, full)
    rho, tau, degenerate = _rank_corr(scores, igd)
    rows = [{"id": int(i), "ted_score": float(s), "igd_exact": float(g)}
            for i, s, g in zip(data.ids, scores, igd)]
    return FidelityReport(rho, tau, rows, degenerate)


def one_step_fidelity(spec: ModelSpec, data: Dataset, params, eta: float = 0.1,
                      lam: float = 1e-4, batch_ids=None) -> dict:
    """Rank agreement of the analytic one-step score with its direct counterparts."""
    res = one_step_scores(spec, data, params, eta, batch_ids)
    direct = np.array([mask_gradient_direct(spec, data, int(i), params, lam, eta, batch_ids)
                       for i in res["ids"]])
    rho_direct = float(stats.spearmanr(res["score"], direct)[0])
    rho_change = float(stats.spearmanr(res["score"], np.abs(res["loss_change"]))[0])
    return {"ids": res["ids"], "score": res["score"], "direct": direct,
            "loss_change": res["loss_change"], "spearman_direct": rho_direct,
            "spearman_change": rho_change}


__all__ = [
    "ConvergenceError", "FitProtocol", "FitResult", "fit", "IGDReport", "igd_exact", "loo_igd",
    "redundant_sample_exact", "Lemma1Report", "lemma1_check", "VelocityTrace", "lemma2_constant",
    "lemma2_residuals", "grad_pcc", "interpolation_landscape", "IGCurve", "ig_curve",
    "FidelityReport", "taylor_fidelity", "one_step_fidelity", "unpack",
]
