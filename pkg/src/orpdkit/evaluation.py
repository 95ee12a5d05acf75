"""Metric suite over a test split: prediction errors, loss gap, feasibility.

Per instance the predicted controls are denormalized (never projected into
their boxes: violations must surface), a power flow computes the implicit
variables, and every constraint is checked at zero and at the configured
relaxation. The loss gap compares realized losses against the oracle's.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .datagen import LabeledDataset, _output_columns
from .grid import Grid
from .nn.models import Model, forward
from .nn.training import denormalize_predictions
from .powerflow import (
    COL_QR,
    COL_VSET,
    ControlVector,
    InputVector,
    PFOptions,
    check_constraints,
    control_mask,
    solve_pf,
)


@dataclass
class InstanceDetail:
    timestamp: str
    y_true: list[float]  # masked entries, canonical element order
    y_pred: list[float]
    loss_oracle: float
    loss_pred: float  # nan when the power flow failed
    gap_pct: float  # nan when excluded from gap statistics
    feasible0: bool
    feasible_relaxed: bool
    pf_converged: bool


@dataclass
class Metrics:
    mae_v: float  # per-unit
    mae_q: float  # MVar
    loss_gap_mean: float  # percent relative to the oracle
    loss_gap_std: float
    feas_pct: float
    feas_relaxed_pct: float
    rho: float
    n_instances: int
    n_pf_failed: int
    element_names: list[str] = field(default_factory=list)
    detail: list[InstanceDetail] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "mae_v": self.mae_v,
            "mae_q": self.mae_q,
            "loss_gap_mean": self.loss_gap_mean,
            "loss_gap_std": self.loss_gap_std,
            "feas_pct": self.feas_pct,
            "feas_relaxed_pct": self.feas_relaxed_pct,
            "rho": self.rho,
            "n_instances": self.n_instances,
            "n_pf_failed": self.n_pf_failed,
            "element_names": self.element_names,
            "detail": [vars(d) for d in self.detail],
        }


def _predict_controls(model: Model, grid: Grid, x: np.ndarray) -> ControlVector:
    mask = control_mask(grid)
    z = forward(model, x, mode="eval").value
    values = denormalize_predictions(z, mask, model.norm_stats)
    return ControlVector(values, mask)


def replay_predictor(dataset: LabeledDataset):
    """Oracle-replay stand-in for a model: predicts the stored labels."""
    by_stamp = {r.timestamp: r for r in dataset.rows}

    def predict(grid: Grid, x: np.ndarray, timestamp: str) -> ControlVector:
        return ControlVector(by_stamp[timestamp].y_star, control_mask(grid))

    return predict


def evaluate(
    model,
    grid: Grid,
    dataset: LabeledDataset,
    rho: float = 0.018,
    split: str = "test",
    pf_options: Optional[PFOptions] = None,
) -> Metrics:
    """Evaluate a model (or a predictor callable) on a dataset split.

    Power-flow failures under predicted controls count as infeasible and are
    excluded from loss-gap statistics only.
    """
    rows = dataset.by_split(split)
    if not rows:
        raise ValueError(f"dataset has no converged rows tagged {split!r}")
    if isinstance(model, Model):
        if model.norm_stats is None:
            raise ValueError("model checkpoint carries no normalization statistics")
        predict = lambda g, x, t: _predict_controls(model, g, x)
    else:
        predict = model

    names, coords = _output_columns(grid)
    mask = control_mask(grid)
    base = grid.base_mva
    options = pf_options or PFOptions()
    detail: list[InstanceDetail] = []
    abs_v, abs_q = [], []

    for row in rows:
        y_pred = predict(grid, row.x, row.timestamp)
        y_true = row.y_star
        true_vec = [float(y_true[b, c]) for b, c in coords]
        pred_vec = [float(y_pred.values[b, c]) for b, c in coords]
        for (b, c), t, p in zip(coords, true_vec, pred_vec):
            if c == COL_VSET:
                abs_v.append(abs(t - p))
            else:
                abs_q.append(abs(t - p))
        x = InputVector(row.x, timestamp=row.timestamp)
        sol = solve_pf(grid, x, y_pred, options)
        if sol.converged:
            rep0 = check_constraints(grid, x, y_pred, sol, relaxation=0.0)
            rep_r = check_constraints(grid, x, y_pred, sol, relaxation=rho)
            gap = 100.0 * (sol.p_loss - row.p_loss_star) / row.p_loss_star
            detail.append(
                InstanceDetail(
                    timestamp=row.timestamp,
                    y_true=true_vec,
                    y_pred=pred_vec,
                    loss_oracle=row.p_loss_star,
                    loss_pred=sol.p_loss,
                    gap_pct=gap,
                    feasible0=rep0.feasible,
                    feasible_relaxed=rep_r.feasible,
                    pf_converged=True,
                )
            )
        else:
            detail.append(
                InstanceDetail(
                    timestamp=row.timestamp,
                    y_true=true_vec,
                    y_pred=pred_vec,
                    loss_oracle=row.p_loss_star,
                    loss_pred=float("nan"),
                    gap_pct=float("nan"),
                    feasible0=False,
                    feasible_relaxed=False,
                    pf_converged=False,
                )
            )

    gaps = np.array([d.gap_pct for d in detail if d.pf_converged])
    n = len(detail)
    return Metrics(
        mae_v=float(np.mean(abs_v)) if abs_v else 0.0,
        mae_q=float(np.mean(abs_q)) * base if abs_q else 0.0,
        loss_gap_mean=float(gaps.mean()) if len(gaps) else float("nan"),
        loss_gap_std=float(gaps.std()) if len(gaps) else float("nan"),
        feas_pct=100.0 * sum(d.feasible0 for d in detail) / n,
        feas_relaxed_pct=100.0 * sum(d.feasible_relaxed for d in detail) / n,
        rho=rho,
        n_instances=n,
        n_pf_failed=sum(not d.pf_converged for d in detail),
        element_names=names,
        detail=detail,
    )


def feasibility_sweep(metrics_fn, rhos: Sequence[float]) -> list[tuple[float, float]]:
    """Evaluate feasibility percentage across a relaxation sweep."""
    return [(rho, metrics_fn(rho).feas_relaxed_pct) for rho in rhos]


def save_metrics(metrics: Metrics, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(metrics.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")


def _fmt_mae(value: float) -> str:
    return f"{value:.1e}"


def _fmt_q(value: float) -> str:
    return f"{value:.3g}"


def report_table(sections: list[tuple[str, list[tuple[str, Optional[Metrics]]]]]) -> tuple[str, dict]:
    """Render the comparison table and its machine-readable twin.

    Each section is (regime name, [(model name, Metrics or None for the
    oracle row)]). Columns: Losses [% rel], Feas. [%], Feas.* [%],
    MAE_v [p.u.], MAE_q [MVar].
    """
    header = f"{'':24s}{'Losses':>16s}{'Feas.':>8s}{'Feas.*':>8s}{'MAE_v':>10s}{'MAE_q':>8s}"
    units = f"{'':24s}{'[% rel oracle]':>16s}{'[%]':>8s}{'[%]':>8s}{'[p.u.]':>10s}{'[MVar]':>8s}"
    lines = [header, units]
    twin: dict = {}
    for regime, rows in sections:
        lines.append(regime)
        twin[regime] = {}
        for name, metrics in rows:
            if metrics is None:
                lines.append(f"  {name:22s}{'0.00±0.00':>16s}{'100.0':>8s}{'100.0':>8s}{'--':>10s}{'--':>8s}")
                twin[regime][name] = {"losses": "0.00±0.00", "feas": 100.0, "feas_relaxed": 100.0}
                continue
            losses = f"{metrics.loss_gap_mean:.2f}±{metrics.loss_gap_std:.2f}"
            lines.append(
                f"  {name:22s}{losses:>16s}{metrics.feas_pct:>8.1f}{metrics.feas_relaxed_pct:>8.1f}"
                f"{_fmt_mae(metrics.mae_v):>10s}{_fmt_q(metrics.mae_q):>8s}"
            )
            twin[regime][name] = {
                "losses": losses,
                "loss_gap_mean": metrics.loss_gap_mean,
                "loss_gap_std": metrics.loss_gap_std,
                "feas": metrics.feas_pct,
                "feas_relaxed": metrics.feas_relaxed_pct,
                "mae_v": metrics.mae_v,
                "mae_q": metrics.mae_q,
            }
    return "\n".join(lines) + "\n", twin


_SVG_W, _SVG_H, _SVG_PAD = 640, 360, 46


def _svg_path(xs: np.ndarray, ys: np.ndarray, lo: float, hi: float, color: str) -> str:
    if hi - lo <= 0:
        hi = lo + 1.0
    span_x = max(len(xs) - 1, 1)
    pts = []
    for k, (xv, yv) in enumerate(zip(xs, ys)):
        px = _SVG_PAD + (_SVG_W - 2 * _SVG_PAD) * (xv / span_x)
        py = _SVG_H - _SVG_PAD - (_SVG_H - 2 * _SVG_PAD) * ((yv - lo) / (hi - lo))
        pts.append(f"{px:.2f},{py:.2f}")
    return f'<polyline fill="none" stroke="{color}" stroke-width="1.2" points="{" ".join(pts)}"/>'


def _svg_chart(title: str, truth: np.ndarray, pred: np.ndarray) -> str:
    lo = float(min(truth.min(), pred.min()))
    hi = float(max(truth.max(), pred.max()))
    xs = np.arange(len(truth), dtype=float)
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_SVG_W}" height="{_SVG_H}" '
        f'viewBox="0 0 {_SVG_W} {_SVG_H}">',
        f'<rect width="{_SVG_W}" height="{_SVG_H}" fill="white"/>',
        f'<text x="{_SVG_W / 2:.0f}" y="20" text-anchor="middle" font-family="monospace" '
        f'font-size="13">{title}</text>',
        f'<line x1="{_SVG_PAD}" y1="{_SVG_H - _SVG_PAD}" x2="{_SVG_W - _SVG_PAD}" '
        f'y2="{_SVG_H - _SVG_PAD}" stroke="black" stroke-width="0.8"/>',
        f'<line x1="{_SVG_PAD}" y1="{_SVG_PAD}" x2="{_SVG_PAD}" y2="{_SVG_H - _SVG_PAD}" '
        f'stroke="black" stroke-width="0.8"/>',
        f'<text x="{_SVG_PAD}" y="{_SVG_H - 12}" font-family="monospace" font-size="11">'
        f"index (sorted by ground truth)</text>",
        f'<text x="{_SVG_W - _SVG_PAD - 150}" y="{_SVG_PAD}" font-family="monospace" '
        f'font-size="11" fill="#1f77b4">ground truth</text>',
        f'<text x="{_SVG_W - _SVG_PAD - 150}" y="{_SVG_PAD + 14}" font-family="monospace" '
        f'font-size="11" fill="#d62728">prediction</text>',
        _svg_path(xs, truth, lo, hi, "#1f77b4"),
        _svg_path(xs, pred, lo, hi, "#d62728"),
        "</svg>",
    ]
    return "\n".join(parts) + "\n"


def emit_comparison_plots(metrics: Metrics, elements: Sequence[str], outdir) -> list[str]:
    """Per element: write (index, truth, prediction) rows sorted by ground
    truth ascending, plus a minimal SVG line chart."""
    os.makedirs(outdir, exist_ok=True)
    written = []
    for element in elements:
        if element not in metrics.element_names:
            raise KeyError(f"unknown element {element!r}; have {metrics.element_names}")
        ei = metrics.element_names.index(element)
        truth = np.array([d.y_true[ei] for d in metrics.detail])
        pred = np.array([d.y_pred[ei] for d in metrics.detail])
        order = np.argsort(truth, kind="stable")
        truth, pred = truth[order], pred[order]
        csv_path = os.path.join(str(outdir), f"compare_{element}.csv")
        with open(csv_path, "w", encoding="utf-8") as fh:
            fh.write("index,ground_truth,prediction\n")
            for k in range(len(truth)):
                fh.write(f"{k},{float(truth[k])!r},{float(pred[k])!r}\n")
        written.append(csv_path)
        svg_path = os.path.join(str(outdir), f"compare_{element}.svg")
        with open(svg_path, "w", encoding="utf-8") as fh:
            fh.write(_svg_chart(element, truth, pred))
        written.append(svg_path)
    return written
