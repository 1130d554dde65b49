"""CSV tables and SVG figures for metric reports."""
from __future__ import annotations

import csv
import os
from pathlib import Path

import numpy as np

from .metrics import MetricReport

REPORT_FIELDS = ["arm", "scope", "tau_hi_s", "tau_lo_s", "n", "median_ttc_pct_error",
                 "mean_theta_error_deg", "mean_radius_error_mm", "mean_theta_error_sq",
                 "mean_radius_error_sq"]


def _f(v):
    return repr(float(v)) if isinstance(v, (float, np.floating)) else v


def report_rows(report: MetricReport, arm: str = "main") -> list[dict]:
    rows = [{"arm": arm, "scope": "all", "tau_hi_s": "", "tau_lo_s": "", "n": report.n,
             "median_ttc_pct_error": report.median_ttc_pct_error,
             "mean_theta_error_deg": report.mean_theta_error_deg,
             "mean_radius_error_mm": report.mean_radius_error_mm,
             "mean_theta_error_sq": report.mean_theta_error_sq,
             "mean_radius_error_sq": report.mean_radius_error_sq}]
    for k, iv in enumerate(report.intervals):
        rows.append({"arm": arm, "scope": f"interval{k}", "tau_hi_s": iv.tau_hi, "tau_lo_s": iv.tau_lo,
                     "n": iv.n, "median_ttc_pct_error": iv.median_ttc_pct_error,
                     "mean_theta_error_deg": iv.mean_theta_error_deg,
                     "mean_radius_error_mm": iv.mean_radius_error_mm,
                     "mean_theta_error_sq": iv.mean_theta_error_sq,
                     "mean_radius_error_sq": iv.mean_radius_error_sq})
    return rows


def write_report(reports: dict[str, MetricReport] | MetricReport, path: str | os.PathLike) -> None:
    if isinstance(reports, MetricReport):
        reports = {"main": reports}
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, REPORT_FIELDS)
        w.writeheader()
        for arm, rep in reports.items():
            for row in report_rows(rep, arm):
                w.writerow({k: _f(v) for k, v in row.items()})


def read_report(path: str | os.PathLike) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def write_correlation(report: MetricReport, path: str | os.PathLike) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["tau_s", "tau_hat_s"])
        for t, th in report.pairs:
            w.writerow([repr(float(t)), repr(float(th))])


def _pyplot():
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    plt.rcParams["svg.hashsalt"] = "evflight"   # stable ids, so reruns give identical files
    return plt


def plot_correlation(report: MetricReport, path: str | os.PathLike, title: str = "") -> None:
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(4, 4))
    if len(report.pairs):
        ax.scatter(report.pairs[:, 0], report.pairs[:, 1], s=3, alpha=0.4)
        hi = float(max(report.pairs.max(), 1e-3))
        ax.plot([0, hi], [0, hi], "k--", lw=1)
    ax.set_xlabel("true time to collision (s)")
    ax.set_ylabel("predicted time to collision (s)")
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def plot_intervals(report: MetricReport, path: str | os.PathLike, title: str = "") -> None:
    plt = _pyplot()
    labels = [f"{iv.tau_hi:g}-{iv.tau_lo:g}" for iv in report.intervals]
    fig, axes = plt.subplots(1, 3, figsize=(10, 3))
    for ax, key, name in zip(axes, ("mean_theta_error_deg", "mean_radius_error_mm", "median_ttc_pct_error"),
                             ("theta error (deg)", "radius error (mm)", "median TTC error (%)")):
        ax.bar(labels, [getattr(iv, key) for iv in report.intervals])
        ax.set_xlabel("time to collision interval (s)")
        ax.set_ylabel(name)
    fig.suptitle(title)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def plot_arms(reports: dict[str, MetricReport], path: str | os.PathLike, title: str = "") -> None:
    plt = _pyplot()
    arms = list(reports)
    fig, axes = plt.subplots(1, 3, figsize=(10, 3))
    for ax, key, name in zip(axes, ("mean_theta_error_deg", "mean_radius_error_mm", "median_ttc_pct_error"),
                             ("theta error (deg)", "radius error (mm)", "median TTC error (%)")):
        ax.bar(arms, [getattr(reports[a], key) for a in arms])
        ax.set_ylabel(name)
    fig.suptitle(title)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def write_all(reports: dict[str, MetricReport], out_dir: str | os.PathLike, title: str = "") -> list[Path]:
    """``report.csv``, ``correlation.csv`` and figures for the first arm (plus an arm comparison)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    main = next(iter(reports.values()))
    paths = [out / "report.csv", out / "correlation.csv", out / "ttc_correlation.svg", out / "intervals.svg"]
    write_report(reports, paths[0])
    write_correlation(main, paths[1])
    plot_correlation(main, paths[2], title)
    plot_intervals(main, paths[3], title)
    if len(reports) > 1:
        paths.append(out / "arms.svg")
        plot_arms(reports, paths[-1], title)
    return paths
