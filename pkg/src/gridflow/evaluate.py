"""Statistical similarity, balance mismatch statistics, and warm-start utility."""

from __future__ import annotations

import csv
from collections.abc import Callable, Mapping
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial.distance import cdist

from . import acpf
from .datagen import Dataset
from .grid import GridCase
from .neural import MLP, Adam

__all__ = [
    "TransportPlan",
    "wasserstein1",
    "MismatchReport",
    "mismatch_report",
    "histogram_counts",
    "histogram_export",
    "known_mask",
    "WarmStartPredictor",
    "WarmStartScore",
    "DownstreamResult",
    "fit_warmstart",
    "evaluate_warmstart",
    "downstream_warmstart",
    "write_w1",
    "write_mismatch_csv",
    "write_downstream_csv",
]


def _rows(d) -> np.ndarray:
    return d.data if isinstance(d, Dataset) else np.atleast_2d(np.asarray(d, dtype=float))


@dataclass(frozen=True)
class TransportPlan:
    """Optimal matching ``rows[k] -> cols[k]``, each pair carrying mass ``1/N``."""

    rows: np.ndarray
    cols: np.ndarray
    costs: np.ndarray

    @property
    def weight(self) -> float:
        return 1.0 / len(self.rows)

    @property
    def total_cost(self) -> float:
        return float(self.costs.mean())

    def as_matrix(self) -> np.ndarray:
        n = len(self.rows)
        gamma = np.zeros((n, n))
        gamma[self.rows, self.cols] = self.weight
        return gamma


def wasserstein1(real, synthetic) -> tuple[float, TransportPlan]:
    """Exact W1 between two equal-size empirical distributions (Euclidean ground cost)."""
    a, b = _rows(real), _rows(synthetic)
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"record widths differ: {a.shape[1]} vs {b.shape[1]}")
    if a.shape[0] != b.shape[0]:
        raise ValueError(f"sizes differ: {a.shape[0]} vs {b.shape[0]}; subsample explicitly")
    if a.shape[0] == 0:
        raise ValueError("empty datasets")
    cost = cdist(a, b)
    r, c = linear_sum_assignment(cost)
    plan = TransportPlan(r, c, cost[r, c])
    return plan.total_cost, plan


@dataclass
class MismatchReport:
    """Per-bus moments of the balance residuals (p.u.; scaled by ``base_mva`` for MW/MVar)."""

    dp: np.ndarray
    dq: np.ndarray
    base_mva: float = 100.0
    mean_dp: np.ndarray = field(init=False)
    std_dp: np.ndarray = field(init=False)
    mean_dq: np.ndarray = field(init=False)
    std_dq: np.ndarray = field(init=False)

    def __post_init__(self):
        self.mean_dp, self.std_dp = self.dp.mean(axis=0), self.dp.std(axis=0)
        self.mean_dq, self.std_dq = self.dq.mean(axis=0), self.dq.std(axis=0)

    @property
    def n_bus(self) -> int:
        return self.dp.shape[1]

    def magnitudes(self, kind: str) -> np.ndarray:
        if kind not in ("dp", "dq"):
            raise ValueError("kind must be 'dp' or 'dq'")
        return np.abs(getattr(self, kind))

    def histogram(self, bus: int, kind: str, bins: int = 50):
        """Counts of violation magnitudes ``|d|`` at a 1-based bus."""
        return histogram_counts(self.magnitudes(kind)[:, bus - 1], bins)


def mismatch_report(dataset, case: GridCase) -> MismatchReport:
    x = _rows(dataset)
    if x.shape[1] != 4 * case.n_bus:
        raise ValueError(f"record width {x.shape[1]} does not match a {case.n_bus}-bus case")
    h = acpf.equality_residual(x, case)
    b = case.n_bus
    return MismatchReport(h[:, :b], h[:, b:], case.base_mva)


def histogram_counts(values, bins: int = 50) -> tuple[np.ndarray, np.ndarray]:
    """Equal-width bins over the data range; left-closed except the last bin."""
    if bins < 1:
        raise ValueError("bins must be at least 1")
    counts, edges = np.histogram(np.asarray(values, dtype=float).ravel(), bins=bins)
    return counts, edges


def histogram_export(values, bins: int, path) -> None:
    counts, edges = histogram_counts(values, bins)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["left", "right", "count"])
        for lo, hi, c in zip(edges[:-1], edges[1:], counts):
            w.writerow([format(lo, ".17g"), format(hi, ".17g"), int(c)])


def known_mask(case: GridCase) -> np.ndarray:
    """Boolean mask over the ``4B`` layout: the variables a bus type fixes.

    PQ buses fix ``(p, q)``, PV buses ``(p, v)``, the slack ``(v, theta)``.
    """
    b = case.n_bus
    mask = np.zeros(4 * b, dtype=bool)
    p, q, v, th = 0, b, 2 * b, 3 * b
    for i in case.pq_idx:
        mask[[p + i, q + i]] = True
    for i in case.pv_idx:
        mask[[p + i, v + i]] = True
    mask[[v + case.slack_idx, th + case.slack_idx]] = True
    return mask


def _minmax(a: np.ndarray):
    lo, hi = a.min(axis=0), a.max(axis=0)
    span = np.where(hi > lo, hi - lo, 1.0)
    return lo, span


@dataclass
class WarmStartPredictor:
    """Regressor from a record's known variables to the complementary ones."""

    net: MLP
    mask: np.ndarray
    in_lo: np.ndarray
    in_span: np.ndarray
    out_lo: np.ndarray
    out_span: np.ndarray
    loss_trace: np.ndarray = field(default_factory=lambda: np.zeros(0), repr=False)

    def predict(self, known: np.ndarray) -> np.ndarray:
        z = 2.0 * (np.atleast_2d(known) - self.in_lo) / self.in_span - 1.0
        return (self.net(z) + 1.0) / 2.0 * self.out_span + self.out_lo

    __call__ = predict


def fit_warmstart(train, case: GridCase, seed: int = 0, steps: int = 3000, batch_size: int = 128,
                  lr: float = 1e-3, hidden: tuple[int, ...] | None = None) -> WarmStartPredictor:
    """Train the predictor; ``steps=0`` leaves it at its random initialisation."""
    x = _rows(train)
    mask = known_mask(case)
    xin, xout = x[:, mask], x[:, ~mask]
    in_lo, in_span = _minmax(xin)
    out_lo, out_span = _minmax(xout)
    zin = 2.0 * (xin - in_lo) / in_span - 1.0
    zout = 2.0 * (xout - out_lo) / out_span - 1.0
    width = max(128, 4 * case.n_bus)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 7]))
    net = MLP(zin.shape[1], hidden or (width, width), out_dim=zout.shape[1], embed_dim=0, rng=rng)
    opt = Adam(lr=lr)
    n = len(zin)
    bs = min(batch_size, n)
    trace = np.empty(steps)
    for step in range(steps):
        idx = rng.integers(0, n, size=bs)
        loss, grads = net.param_gradients(zin[idx], None, zout[idx])
        opt.step(net, grads)
        trace[step] = loss
    return WarmStartPredictor(net, mask, in_lo, in_span, out_lo, out_span, trace)


@dataclass(frozen=True)
class WarmStartScore:
    """Mean and std over test records of ``sum_b |dp_b|`` and ``sum_b |dq_b|`` (p.u.)."""

    mean_dp: float
    std_dp: float
    mean_dq: float
    std_dq: float


def evaluate_warmstart(predictor: Callable[[np.ndarray], np.ndarray], test, case: GridCase) -> WarmStartScore:
    """Fill in predicted unknowns on each test record and score the resulting balance residual."""
    x = _rows(test)
    mask = known_mask(case)
    state = x.copy()
    state[:, ~mask] = predictor(x[:, mask])
    h = np.abs(acpf.equality_residual(state, case))
    b = case.n_bus
    tp, tq = h[:, :b].sum(axis=1), h[:, b:].sum(axis=1)
    return WarmStartScore(float(tp.mean()), float(tp.std()), float(tq.mean()), float(tq.std()))


@dataclass
class DownstreamResult:
    scores: dict[str, WarmStartScore]

    def best(self, kind: str = "dp") -> str:
        return min(self.scores, key=lambda k: getattr(self.scores[k], f"mean_{kind}"))


def downstream_warmstart(train: Dataset | Mapping[str, Dataset], test, case: GridCase, seed: int = 0,
                         steps: int = 3000) -> DownstreamResult:
    """Train one predictor per training source with the same budget and seed; score on ``test``."""
    sources = dict(train) if isinstance(train, Mapping) else {"train": train}
    scores = {}
    for name, data in sources.items():
        pred = fit_warmstart(data, case, seed=seed, steps=steps)
        scores[name] = evaluate_warmstart(pred, test, case)
    return DownstreamResult(scores)


def write_w1(path, value: float, meta: Mapping[str, object] | None = None) -> None:
    lines = [format(value, ".17g")]
    for k, v in sorted((meta or {}).items()):
        lines.append(f"{k}={v}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_mismatch_csv(report: MismatchReport, path) -> None:
    s = report.base_mva
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["bus", "mean_dp", "std_dp", "mean_dq", "std_dq",
                    "mean_dp_mw", "std_dp_mw", "mean_dq_mvar", "std_dq_mvar"])
        for i in range(report.n_bus):
            vals = [report.mean_dp[i], report.std_dp[i], report.mean_dq[i], report.std_dq[i]]
            vals += [s * report.mean_dp[i], s * report.std_dp[i], s * report.mean_dq[i], s * report.std_dq[i]]
            w.writerow([i + 1, *(format(float(v), ".17g") for v in vals)])


def write_downstream_csv(result: DownstreamResult, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["source", "mean_total_dp", "std_total_dp", "mean_total_dq", "std_total_dq"])
        for name, sc in result.scores.items():
            w.writerow([name, *(format(v, ".17g") for v in (sc.mean_dp, sc.std_dp, sc.mean_dq, sc.std_dq))])
