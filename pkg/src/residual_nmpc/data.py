"""Residual datasets from closed-loop logs, splitting, and RMSE evaluation.

Each applied control yields one row: the commanded world velocity ``vbar``,
the plant velocity ``vhat`` at the end of the interval, the interval length
``delta`` and the residual rate ``y = (vhat - vbar) / delta``.
"""

from __future__ import annotations

import csv
import hashlib
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from numpy.typing import NDArray

from residual_nmpc.errors import DataError
from residual_nmpc.gp.exact import GpDataset
from residual_nmpc.gp.kernels import KernelHyperparams
from residual_nmpc.gp.sparse import ElboReport, SgpModelSet, train_sgp
from residual_nmpc.planner.closed_loop import RunLog, commanded_world_velocity

log = logging.getLogger(__name__)

CSV_HEADER = ["vbar_x", "vbar_y", "vbar_z", "vhat_x", "vhat_y", "vhat_z", "delta", "y_x", "y_y", "y_z"]
AXES = ("x", "y", "z")


def _row_hash(row: NDArray) -> str:
    return hashlib.sha256(np.ascontiguousarray(row[:7], dtype="<f8").tobytes()).hexdigest()[:32]


@dataclass
class ResidualDataset:
    """Residual rows; ``traj_id`` tags the run each row came from (not persisted)."""

    vbar: NDArray[np.float64]
    vhat: NDArray[np.float64]
    delta: NDArray[np.float64]
    y: NDArray[np.float64]
    traj_id: NDArray[np.int64] = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        self.vbar = np.asarray(self.vbar, dtype=float).reshape(-1, 3)
        self.vhat = np.asarray(self.vhat, dtype=float).reshape(-1, 3)
        self.delta = np.asarray(self.delta, dtype=float).reshape(-1)
        self.y = np.asarray(self.y, dtype=float).reshape(-1, 3)
        n = len(self.delta)
        if not (len(self.vbar) == len(self.vhat) == len(self.y) == n):
            raise DataError("residual dataset columns have different lengths")
        if self.traj_id is None:
            self.traj_id = np.zeros(n, dtype=np.int64)
        self.traj_id = np.asarray(self.traj_id, dtype=np.int64).reshape(-1)
        if n and not np.all(self.delta > 0):
            raise DataError("delta must be positive on every row")
        for name in ("vbar", "vhat", "y"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise DataError(f"non-finite values in column group {name}")

    @classmethod
    def from_velocities(cls, vbar, vhat, delta, traj_id=None) -> ResidualDataset:
        vbar = np.asarray(vbar, dtype=float).reshape(-1, 3)
        vhat = np.asarray(vhat, dtype=float).reshape(-1, 3)
        delta = np.broadcast_to(np.asarray(delta, dtype=float), (len(vbar),)).copy()
        if not np.all(delta > 0):
            raise DataError("delta must be positive on every row")
        return cls(vbar=vbar, vhat=vhat, delta=delta, y=(vhat - vbar) / delta[:, None], traj_id=traj_id)

    @property
    def n(self) -> int:
        return len(self.delta)

    def __len__(self) -> int:
        return self.n

    @property
    def delta_v(self) -> float:
        """The common interval length (rows from mixed intervals are rejected)."""
        if self.n == 0:
            raise DataError("empty dataset")
        if np.ptp(self.delta) > 1e-12 * self.delta.max():
            raise DataError("dataset mixes different interval lengths")
        return float(self.delta[0])

    def axis(self, j: int, center: bool = True) -> GpDataset:
        """Scalar regression data for world axis ``j``: input vbar_j, target y_j."""
        return GpDataset.from_raw(self.vbar[:, j], self.y[:, j], center=center)

    def as_matrix(self) -> NDArray:
        return np.column_stack([self.vbar, self.vhat, self.delta, self.y])

    def row_hashes(self) -> list[str]:
        return [_row_hash(r) for r in self.as_matrix()]

    def subset(self, mask) -> ResidualDataset:
        return ResidualDataset(self.vbar[mask], self.vhat[mask], self.delta[mask], self.y[mask], self.traj_id[mask])

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(CSV_HEADER)
            for r in self.as_matrix():
                w.writerow([repr(float(v)) for v in r])

    @classmethod
    def from_csv(cls, path) -> ResidualDataset:
        path = Path(path)
        if not path.exists():
            raise DataError(f"dataset file not found: {path}")
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header != CSV_HEADER:
                raise DataError(f"{path}: expected header {','.join(CSV_HEADER)}, got {header}")
            try:
                arr = np.array([[float(v) for v in row] for row in reader], dtype=float).reshape(-1, 10)
            except ValueError as exc:
                raise DataError(f"{path}: malformed row ({exc})") from None
        ds = cls(vbar=arr[:, 0:3], vhat=arr[:, 3:6], delta=arr[:, 6], y=arr[:, 7:10])
        expect = (ds.vhat - ds.vbar) / ds.delta[:, None]
        if ds.n and np.max(np.abs(expect - ds.y) / np.maximum(np.abs(expect), 1.0)) > 1e-9:
            raise DataError(f"{path}: y column does not equal (vhat - vbar) / delta")
        return ds

    @staticmethod
    def concat(parts: Sequence[ResidualDataset]) -> ResidualDataset:
        parts = list(parts)
        if not parts:
            raise DataError("nothing to concatenate")
        return ResidualDataset(
            np.vstack([p.vbar for p in parts]),
            np.vstack([p.vhat for p in parts]),
            np.concatenate([p.delta for p in parts]),
            np.vstack([p.y for p in parts]),
            np.concatenate([p.traj_id for p in parts]),
        )


def collect(run_logs: Sequence[RunLog]) -> ResidualDataset:
    """One row per applied control across all logs; rows keep their log index."""
    parts = []
    for i, lg in enumerate(run_logs):
        if len(lg) == 0:
            continue
        if lg.vhat is None or lg.xbar is None:
            raise DataError(f"run log {i} lacks predicted or actual next-state data")
        vbar = commanded_world_velocity(lg)
        parts.append(ResidualDataset.from_velocities(vbar, lg.vhat, lg.dt, traj_id=np.full(len(lg), i)))
    if not parts:
        raise DataError("no rows in the given run logs")
    return ResidualDataset.concat(parts)


def split(dataset: ResidualDataset, train_fraction: float = 0.8, seed: int = 0) -> tuple[ResidualDataset, ResidualDataset]:
    """Trajectory-level split: every trajectory lands wholly on one side."""
    ids = np.unique(dataset.traj_id)
    if len(ids) < 2:
        raise DataError("need at least two trajectories for a train/test split")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(ids)
    n_train = int(np.clip(round(train_fraction * len(ids)), 1, len(ids) - 1))
    train_ids = np.sort(perm[:n_train])
    mask = np.isin(dataset.traj_id, train_ids)
    return dataset.subset(mask), dataset.subset(~mask)


@dataclass
class RmseReport:
    nominal_rmse: float
    augmented_rmse: float
    nominal_axis: list[float]
    augmented_axis: list[float]
    n_points: int
    scenario: str = "without_obstacles"

    def to_dict(self) -> dict:
        return {
            "scenario": self.scenario,
            "n_points": self.n_points,
            "nominal_rmse": self.nominal_rmse,
            "augmented_rmse": self.augmented_rmse,
            "nominal_rmse_axis": dict(zip(AXES, self.nominal_axis)),
            "augmented_rmse_axis": dict(zip(AXES, self.augmented_axis)),
        }


def _rmse(E: NDArray) -> tuple[float, list[float]]:
    pooled = float(np.sqrt(np.mean(np.sum(E * E, axis=1))))
    return pooled, [float(v) for v in np.sqrt(np.mean(E * E, axis=0))]


def nominal_and_augmented_errors(dataset: ResidualDataset, model, scenario: str = "without_obstacles") -> RmseReport:
    """Velocity-error RMSE without and with the learned correction.

    ``nominal = RMSE(y * delta)``, ``augmented = RMSE((y - g(vbar)) * delta)``.
    The pooled value is the RMS of the per-row error vector norm.
    """
    if dataset.n == 0:
        raise DataError("cannot evaluate on an empty dataset")
    hashes = getattr(model, "training_hashes", frozenset())
    if hashes:
        overlap = hashes.intersection(dataset.row_hashes())
        if overlap:
            raise DataError(f"{len(overlap)} evaluation rows also appear in the model's training data")
    d = dataset.delta[:, None]
    g = model.mean(dataset.vbar)
    nom, nom_ax = _rmse(dataset.y * d)
    aug, aug_ax = _rmse((dataset.y - g) * d)
    return RmseReport(nom, aug, nom_ax, aug_ax, dataset.n, scenario)


def train_models(
    dataset: ResidualDataset,
    m: int,
    bias: float,
    hyp_init: KernelHyperparams,
    seed: int = 0,
    max_iter: int = 1000,
) -> tuple[SgpModelSet, list[ElboReport]]:
    """One sparse GP per world axis on (vbar_j, y_j)."""
    axes, reports = [], []
    dv = dataset.delta_v
    for j in range(3):
        model, rep = train_sgp(dataset.axis(j), m, bias, hyp_init, delta_v=dv, seed=seed, max_iter=max_iter)
        log.info("axis %s: elbo %.4g after %d iterations", AXES[j], rep.elbo, rep.iterations)
        axes.append(model)
        reports.append(rep)
    return SgpModelSet(axes=tuple(axes), delta_v=dv, training_hashes=frozenset(dataset.row_hashes())), reports


def sweep_inducing_points(
    train: ResidualDataset,
    test: ResidualDataset,
    m_values: Sequence[int],
    hyp_init: KernelHyperparams,
    bias: float,
    timing: Callable[[list[SgpModelSet]], Sequence[Sequence[float]]],
    seeds: Sequence[int] = (0,),
) -> list[dict]:
    """Per ``m``: train, evaluate RMSE on ``test``, and time NMPC solves.

    ``timing`` receives one model per ``m`` (trained with the first seed) and
    returns per-solve times on a fixed closed-loop scenario for each; the
    table reports their median. Timing all models in one call lets the
    caller interleave them. RMSE is the mean and sample standard deviation
    over ``seeds``, which drive the inducing point initialisation.
    """
    m_values = list(m_values)
    if m_values != sorted(m_values):
        raise DataError(f"m_values must be sorted ascending, got {m_values}")
    rmses: dict[int, list[float]] = {}
    first: list[SgpModelSet] = []
    for m in m_values:
        rmses[m] = []
        for k, s in enumerate(seeds):
            model, _ = train_models(train, m, bias, hyp_init, seed=s)
            rmses[m].append(nominal_and_augmented_errors(test, model).augmented_rmse)
            if k == 0:
                first.append(model)
    times = [np.asarray(t, dtype=float) for t in timing(first)]
    if len(times) != len(m_values) or any(t.size == 0 for t in times):
        raise DataError("timing scenario must return solve times for every model")
    table = []
    for m, t in zip(m_values, times):
        r = rmses[m]
        table.append(
            {
                "m": m,
                "augmented_rmse": float(np.mean(r)),
                "augmented_rmse_std": float(np.std(r, ddof=1)) if len(r) > 1 else 0.0,
                "median_solve_time": float(np.median(t)),
                "n_solves": int(t.size),
                "rmse_per_seed": r,
            }
        )
        log.info("m=%d: rmse %.4g, median solve %.4g s", m, table[-1]["augmented_rmse"], table[-1]["median_solve_time"])
    return table


def write_sweep_csv(table: list[dict], path) -> None:
    cols = ["m", "augmented_rmse", "augmented_rmse_std", "median_solve_time", "n_solves"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for row in table:
            w.writerow([row[c] for c in cols])
