"""Report figures written to files with the Agg backend."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

AXES = ("x", "y", "z")


def _save(fig, path) -> None:
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def plot_training(dataset, model, reports, path) -> None:
    """Residual targets against commanded velocity with the learned mean, per axis."""
    fig, ax = plt.subplots(2, 3, figsize=(13, 7))
    for j in range(3):
        a = ax[0, j]
        v, y = dataset.vbar[:, j], dataset.y[:, j]
        a.scatter(v, y, s=2, alpha=0.25, color="0.5", label="targets")
        grid = np.linspace(v.min(), v.max(), 200)
        g, var = model.axes[j].predict(grid)
        sd = np.sqrt(var)
        a.plot(grid, g, color="C0", label="SGP mean")
        a.fill_between(grid, g - 2 * sd, g + 2 * sd, color="C0", alpha=0.2)
        zm = model.axes[j].x_m[:, 0]
        a.plot(zm, model.axes[j].predict(zm)[0], "k|", ms=10, label="inducing inputs")
        a.set_xlabel(f"commanded v_{AXES[j]} [m/s]")
        a.set_ylabel(f"y_{AXES[j]} [m/s^2]")
        if j == 0:
            a.legend(loc="best", fontsize=8)
        b = ax[1, j]
        b.plot(reports[j].trace)
        b.set_xlabel("iteration")
        b.set_ylabel("ELBO")
        b.set_title(f"axis {AXES[j]}: m={model.axes[j].m}")
    _save(fig, path)


def plot_evaluation(dataset, model, report, path) -> None:
    """Velocity errors with and without the learned correction."""
    d = dataset.delta[:, None]
    e_nom = dataset.y * d
    e_aug = (dataset.y - model.mean(dataset.vbar)) * d
    fig, ax = plt.subplots(1, 3, figsize=(13, 4))
    for j in range(3):
        a = ax[j]
        hi = np.percentile(np.abs(e_nom[:, j]), 99.5) + 1e-9
        bins = np.linspace(-hi, hi, 60)
        a.hist(e_nom[:, j], bins=bins, alpha=0.5, label=f"nominal {report.nominal_axis[j]:.4f}")
        a.hist(e_aug[:, j], bins=bins, alpha=0.5, label=f"augmented {report.augmented_axis[j]:.4f}")
        a.set_xlabel(f"velocity error {AXES[j]} [m/s]")
        a.legend(fontsize=8)
    fig.suptitle(
        f"{report.scenario}: RMSE nominal {report.nominal_rmse:.4f} / augmented {report.augmented_rmse:.4f} m/s"
    )
    _save(fig, path)


def plot_run(run_log, world, ref, path, d_o: float = 1.0) -> None:
    """Top view of the flight, reference tracking error and solver timing."""
    fig, ax = plt.subplots(1, 3, figsize=(14, 4.5))
    a = ax[0]
    a.plot(ref.x[:, 0], ref.x[:, 1], "--", color="0.6", label="initial reference")
    P = np.vstack([run_log.x[:1, :3], run_log.xhat[:, :3]]) if len(run_log) else np.zeros((0, 3))
    a.plot(P[:, 0], P[:, 1], color="C0", label="flown")
    for c in world.obstacles:
        a.add_patch(plt.Circle(c[:2], d_o, color="C3", alpha=0.25))
        a.plot(c[0], c[1], "x", color="C3")
    for k in np.flatnonzero(run_log.regenerated):
        a.plot(run_log.xhat[k, 0], run_log.xhat[k, 1], "o", color="C2")
    a.plot(*world.goal[:2], "*", color="k", ms=12)
    a.set_aspect("equal")
    a.set_xlabel("x [m]")
    a.set_ylabel("y [m]")
    a.legend(fontsize=8)
    b = ax[1]
    err = np.linalg.norm(run_log.xhat[:, :3] - run_log.ref_pos, axis=1) if len(run_log) else []
    b.plot(run_log.t, err)
    b.set_xlabel("t [s]")
    b.set_ylabel("distance to reference [m]")
    c = ax[2]
    c.plot(run_log.t, 1e3 * run_log.solve_time)
    c.set_xlabel("t [s]")
    c.set_ylabel("NMPC solve time [ms]")
    _save(fig, path)


def plot_sweep(table, path) -> None:
    """RMSE and median solve time against the number of inducing points."""
    m = [r["m"] for r in table]
    fig, a = plt.subplots(figsize=(6, 4))
    a.errorbar(m, [r["augmented_rmse"] for r in table], yerr=[r["augmented_rmse_std"] for r in table], marker="o", color="C0")
    a.set_xlabel("inducing points m")
    a.set_ylabel("augmented RMSE [m/s]", color="C0")
    b = a.twinx()
    b.plot(m, [1e3 * r["median_solve_time"] for r in table], "s-", color="C1")
    b.set_ylabel("median solve time [ms]", color="C1")
    _save(fig, path)
