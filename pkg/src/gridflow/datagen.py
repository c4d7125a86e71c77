"""Ground-truth dataset generation and min-max normalisation."""

from __future__ import annotations

import csv
import io
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import acpf
from .grid import GridCase

log = logging.getLogger(__name__)

__all__ = [
    "Dataset",
    "NormStats",
    "GenerationError",
    "LOAD_LOW",
    "sample_loads",
    "generate_dataset",
    "fit_norm",
    "normalize",
    "denormalize",
    "denorm_jacobian_diag",
    "column_names",
    "write_dataset_csv",
    "read_dataset_csv",
    "write_norm_csv",
    "read_norm_csv",
]

# demands are drawn from Uniform(LOAD_LOW * nominal, nominal)
LOAD_LOW = 0.8


class GenerationError(RuntimeError):
    pass


@dataclass
class Dataset:
    """Records stacked row-wise in the flat ``(p, q, v, theta)`` layout."""

    data: np.ndarray
    case_name: str = ""
    seed: int | None = None
    divergences: int = 0

    def __post_init__(self):
        self.data = np.atleast_2d(np.asarray(self.data, dtype=float))
        if self.data.shape[1] % 4:
            raise ValueError(f"dataset width {self.data.shape[1]} is not a multiple of 4")

    def __len__(self):
        return self.data.shape[0]

    @property
    def n_bus(self) -> int:
        return self.data.shape[1] // 4

    @property
    def records(self) -> list[acpf.PowerFlowRecord]:
        return [acpf.PowerFlowRecord.from_vector(row) for row in self.data]


@dataclass
class NormStats:
    x_min: np.ndarray
    x_max: np.ndarray
    degenerate: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.x_min = np.asarray(self.x_min, dtype=float)
        self.x_max = np.asarray(self.x_max, dtype=float)
        if self.x_min.shape != self.x_max.shape:
            raise ValueError("x_min and x_max differ in shape")
        if np.any(self.x_min > self.x_max):
            raise ValueError("x_min exceeds x_max")
        self.degenerate = self.x_min == self.x_max


def record_rng(seed: int, index: int, attempt: int = 0) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, index, attempt]))


def sample_loads(case: GridCase, rng_seed) -> tuple[np.ndarray, np.ndarray]:
    """Per-bus ``(p_load, q_load)``, each drawn independently from ``U(0.8 nom, nom)``."""
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    p = rng.uniform(LOAD_LOW * case.p_load_nom, case.p_load_nom)
    q = rng.uniform(LOAD_LOW * case.q_load_nom, case.q_load_nom)
    return p, q


def _solve_record(case: GridCase, seed: int, index: int, max_attempts: int):
    """Returns ``(state vector, failed attempts)``; ``None`` state when all attempts diverge."""
    for attempt in range(max_attempts):
        p_load, q_load = sample_loads(case, record_rng(seed, index, attempt))
        try:
            rec = acpf.newton_solve(case, p_load, q_load, acpf.dispatch(case, p_load))
        except acpf.DivergenceError:
            continue
        return rec.to_vector(), attempt
    return None, max_attempts


def generate_dataset(case: GridCase, n: int, seed: int, threads: int = 1,
                     window: int = 20, max_attempts: int = 8) -> Dataset:
    """Sample loads, dispatch, solve; diverged draws are discarded and redrawn.

    Record ``i`` only ever uses the RNG streams ``(seed, i, attempt)``, so the
    output does not depend on ``threads``.  Generation aborts once more than half
    of the attempts in any ``window``-record stretch diverge.
    """
    if n < 1:
        raise ValueError("n must be at least 1")
    rows = np.empty((n, 4 * case.n_bus))
    failures = 0
    attempts = 0
    chunk = max(window, 1)
    with ThreadPoolExecutor(max_workers=max(threads, 1)) as pool:
        for start in range(0, n, chunk):
            idx = range(start, min(start + chunk, n))
            results = list(pool.map(lambda i: _solve_record(case, seed, i, max_attempts), idx))
            w_fail = sum(r[1] for r in results)
            w_attempts = w_fail + sum(r[0] is not None for r in results)
            failures += w_fail
            attempts += w_attempts
            if w_fail > 0.5 * w_attempts or any(r[0] is None for r in results):
                raise GenerationError(
                    f"{case.name}: {w_fail} of {w_attempts} power-flow solves diverged in records "
                    f"{idx.start}..{idx.stop - 1}; check the case data")
            for i, (row, _) in zip(idx, results):
                rows[i] = row
    if failures:
        log.info("%s: %d diverged solves resampled", case.name, failures)
    return Dataset(rows, case.name, seed, failures)


def fit_norm(dataset: Dataset | np.ndarray) -> NormStats:
    data = dataset.data if isinstance(dataset, Dataset) else np.atleast_2d(np.asarray(dataset, dtype=float))
    if data.shape[0] == 0:
        raise ValueError("cannot fit normalisation on an empty dataset")
    return NormStats(data.min(axis=0), data.max(axis=0))


def normalize(x, stats: NormStats) -> np.ndarray:
    """Map to ``[-1, 1]`` coordinatewise; constant coordinates map to 0."""
    x = np.asarray(x, dtype=float)
    span = np.where(stats.degenerate, 1.0, stats.x_max - stats.x_min)
    out = 2.0 * (x - stats.x_min) / span - 1.0
    return np.where(stats.degenerate, 0.0, out)


def denormalize(z, stats: NormStats) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    out = (z + 1.0) / 2.0 * (stats.x_max - stats.x_min) + stats.x_min
    return np.where(stats.degenerate, stats.x_min, out)


def denorm_jacobian_diag(stats: NormStats) -> np.ndarray:
    return np.where(stats.degenerate, 0.0, (stats.x_max - stats.x_min) / 2.0)


def column_names(n_bus: int) -> list[str]:
    return [f"{k}_{b}" for k in ("p", "q", "v", "theta") for b in range(1, n_bus + 1)]


def _format_rows(rows: np.ndarray, n_bus: int) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(column_names(n_bus))
    for row in rows:
        w.writerow([format(float(v), ".17g") for v in row])
    return buf.getvalue()


def write_dataset_csv(dataset: Dataset | np.ndarray, path) -> None:
    data = dataset.data if isinstance(dataset, Dataset) else np.atleast_2d(dataset)
    Path(path).write_text(_format_rows(data, data.shape[1] // 4), encoding="utf-8")


def _read_rows(path) -> np.ndarray:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError(f"{path}: empty file") from None
        if len(header) % 4 or header != column_names(len(header) // 4):
            raise ValueError(f"{path}: header does not follow p_1..theta_B layout")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise ValueError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            try:
                rows.append([float(v) for v in row])
            except ValueError:
                raise ValueError(f"{path}:{lineno}: non-numeric field") from None
    return np.array(rows, dtype=float).reshape(-1, len(header))


def read_dataset_csv(path, case_name: str = "") -> Dataset:
    return Dataset(_read_rows(path), case_name)


def write_norm_csv(stats: NormStats, path) -> None:
    Path(path).write_text(_format_rows(np.vstack([stats.x_min, stats.x_max]), stats.x_min.size // 4),
                          encoding="utf-8")


def read_norm_csv(path) -> NormStats:
    rows = _read_rows(path)
    if rows.shape[0] != 2:
        raise ValueError(f"{path}: expected two rows (min, max)")
    return NormStats(rows[0], rows[1])
