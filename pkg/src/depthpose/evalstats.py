"""Evaluation metrics (per-joint error, mAP curve, AUC) and the
Mann-Whitney U-test harness used to pick hyperparameters.

The exact U-test path enumerates the null distribution by the classic
counting recursion and applies when the groups are small (n1+n2 <= 20)
and tie-free; otherwise a tie-corrected normal approximation with
continuity correction is used. The two-sided p-value is twice the upper
tail of max(U1, U2), capped at 1.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Sequence

import numpy as np

from .core import Pose

EXACT_MAX_N = 20

# joint-group keywords; names are matched lowercase
_UPPER_WORDS = ("head", "neck", "shoulder", "elbow", "hand", "wrist")
_TORSO_WORDS = ("torso", "spine")


def joint_errors(pred: Pose, gt: Pose) -> np.ndarray:
    """Per-joint Euclidean distance in centimeters."""
    if pred.skeleton.joints != gt.skeleton.joints:
        raise ValueError("poses must share one skeleton")
    if pred.frame != gt.frame:
        raise ValueError(f"poses in different frames: {pred.frame!r} vs {gt.frame!r}")
    return np.linalg.norm(pred.coords - gt.coords, axis=1) * 100.0


def map_at_threshold(distances_cm: np.ndarray, t_cm: float) -> float:
    """Fraction of joint distances <= t_cm (a distance equal to the
    threshold counts as correct)."""
    if t_cm < 0:
        raise ValueError("threshold must be >= 0")
    d = np.asarray(distances_cm, dtype=np.float64).reshape(-1)
    if d.size == 0:
        raise ValueError("no distances given")
    return float((d <= t_cm).mean())


def map_curve_and_auc(distances_cm: np.ndarray, t_max_cm: float = 20.0,
                      step_cm: float = 0.5) -> tuple[np.ndarray, np.ndarray, float]:
    """Precision-vs-threshold curve sampled at 0, step, ..., t_max, and its
    normalized trapezoidal area (AUC in [0, 1])."""
    if t_max_cm <= 0 or step_cm <= 0:
        raise ValueError("t_max and step must be > 0")
    thresholds = np.arange(0.0, t_max_cm + step_cm / 2, step_cm)
    d = np.sort(np.asarray(distances_cm, dtype=np.float64).reshape(-1))
    if d.size == 0:
        raise ValueError("no distances given")
    curve = np.searchsorted(d, thresholds, side="right") / d.size
    auc = float(np.trapezoid(curve, thresholds) / t_max_cm)
    return thresholds, curve, auc


@dataclass(frozen=True)
class EvalReport:
    """Aggregated metrics for a prediction set."""

    joint_names: tuple[str, ...]
    per_joint_mean_cm: np.ndarray
    per_joint_std_cm: np.ndarray
    average_error_cm: float
    thresholds_cm: np.ndarray
    precision_curve: np.ndarray
    auc: float
    precision_at_10cm: float
    sample_count: int
    groups: dict
    t_max_cm: float
    step_cm: float

    def to_json_dict(self) -> dict:
        return {
            "joint_names": list(self.joint_names),
            "per_joint_mean_cm": self.per_joint_mean_cm.tolist(),
            "per_joint_std_cm": self.per_joint_std_cm.tolist(),
            "average_error_cm": self.average_error_cm,
            "thresholds_cm": self.thresholds_cm.tolist(),
            "precision_curve": self.precision_curve.tolist(),
            "auc": self.auc,
            "precision_at_10cm": self.precision_at_10cm,
            "sample_count": self.sample_count,
            "groups": self.groups,
            "t_max_cm": self.t_max_cm,
            "step_cm": self.step_cm,
        }


def _group_indices(joint_names: Sequence[str]) -> dict[str, list[int]]:
    upper, lower = [], []
    for i, name in enumerate(joint_names):
        low = name.lower()
        if any(w in low for w in _UPPER_WORDS):
            upper.append(i)
        elif not any(w in low for w in _TORSO_WORDS):
            lower.append(i)  # complement minus torso
    return {"upper": upper, "lower": lower}


def evaluate_poses(preds: Sequence[Pose], gts: Sequence[Pose],
                   t_max_cm: float = 20.0, step_cm: float = 0.5) -> EvalReport:
    """Build the full report for matched prediction/ground-truth lists."""
    if len(preds) != len(gts) or not preds:
        raise ValueError("need equal-length nonempty prediction and truth lists")
    dist = np.stack([joint_errors(p, g) for p, g in zip(preds, gts)])  # (N, J)
    thresholds, curve, auc = map_curve_and_auc(dist, t_max_cm, step_cm)
    names = preds[0].skeleton.joints
    groups = {}
    for label, idx in _group_indices(names).items():
        if idx:
            sub = dist[:, idx]
            groups[label] = {
                "joints": [names[i] for i in idx],
                "average_error_cm": float(sub.mean()),
                "precision_at_10cm": map_at_threshold(sub, 10.0),
            }
    return EvalReport(
        joint_names=tuple(names),
        per_joint_mean_cm=dist.mean(axis=0),
        per_joint_std_cm=dist.std(axis=0),
        average_error_cm=float(dist.mean()),
        thresholds_cm=thresholds,
        precision_curve=curve,
        auc=auc,
        precision_at_10cm=map_at_threshold(dist, 10.0),
        sample_count=len(preds),
        groups=groups,
        t_max_cm=t_max_cm,
        step_cm=step_cm,
    )


def write_report_json(report: EvalReport, path: str, extra: dict | None = None) -> None:
    d = report.to_json_dict()
    if extra:
        d.update(extra)
    with open(path, "w") as f:
        json.dump(d, f, indent=2, sort_keys=True)
        f.write("\n")


def write_curve_csv(report: EvalReport, path: str) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["threshold_cm", "precision"])
        for t, p in zip(report.thresholds_cm, report.precision_curve):
            writer.writerow([f"{t:.6g}", f"{p:.9f}"])


def write_curve_svg(report: EvalReport, path: str, title: str = "precision vs threshold") -> None:
    """Minimal hand-rolled SVG line plot of the mAP curve."""
    width, height, margin = 480, 320, 45
    xs = report.thresholds_cm
    ys = report.precision_curve
    span = max(float(xs[-1]), 1e-9)

    def px(t):
        return margin + (width - 2 * margin) * (t / span)

    def py(p):
        return height - margin - (height - 2 * margin) * p

    points = " ".join(f"{px(t):.2f},{py(p):.2f}" for t, p in zip(xs, ys))
    grid = []
    for frac in (0.0, 0.25, 0.5, 0.75, 1.0):
        y = py(frac)
        grid.append(f'<line x1="{margin}" y1="{y:.2f}" x2="{width - margin}" y2="{y:.2f}" '
                    f'stroke="#ddd"/><text x="4" y="{y + 4:.2f}" font-size="10">{frac:.2f}</text>')
    for t in np.linspace(0, span, 5):
        x = px(t)
        grid.append(f'<text x="{x - 8:.2f}" y="{height - margin + 14}" font-size="10">{t:.0f}</text>')
    svg = (
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">'
        f'<text x="{margin}" y="18" font-size="12">{title} (AUC={report.auc:.3f})</text>'
        + "".join(grid)
        + f'<polyline fill="none" stroke="#1f6fb2" stroke-width="1.5" points="{points}"/>'
        + f'<rect x="{margin}" y="{margin}" width="{width - 2 * margin}" '
          f'height="{height - 2 * margin}" fill="none" stroke="#888"/></svg>\n'
    )
    with open(path, "w") as f:
        f.write(svg)


# ---------------------------------------------------------------------------
# Mann-Whitney U-test


@dataclass(frozen=True)
class UTestResult:
    u: float          # min(U1, U2)
    p: float          # two-sided
    method: str       # "exact" or "normal-approx"
    n1: int
    n2: int


@lru_cache(maxsize=None)
def _u_counts(n1: int, n2: int) -> tuple[int, ...]:
    """Null distribution of U1: counts[u] over u = 0 .. n1*n2.

    Counting recursion: f(u; n1, n2) = f(u - n2; n1-1, n2) + f(u; n1, n2-1).
    """
    if n1 == 0 or n2 == 0:
        return (1,)
    a = _u_counts(n1 - 1, n2)
    b = _u_counts(n1, n2 - 1)
    out = [0] * (n1 * n2 + 1)
    for u, c in enumerate(a):
        out[u + n2] += c
    for u, c in enumerate(b):
        out[u] += c
    return tuple(out)


def _rankdata(values: np.ndarray) -> np.ndarray:
    # mid-ranks on ties
    order = np.argsort(values, kind="stable")
    ranks = np.empty(len(values), dtype=np.float64)
    sorted_vals = values[order]
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def mann_whitney_u(a: Sequence[float], b: Sequence[float]) -> UTestResult:
    """Two-sided Mann-Whitney U-test.

    Reports U = min(U1, U2). Uses the exact null distribution when
    n1 + n2 <= 20 and the pooled values are tie-free; otherwise the normal
    approximation with tie correction and continuity correction.
    """
    x = np.asarray(a, dtype=np.float64)
    y = np.asarray(b, dtype=np.float64)
    if x.size == 0 or y.size == 0:
        raise ValueError("both groups must be nonempty")
    n1, n2 = x.size, y.size
    pooled = np.concatenate([x, y])
    ranks = _rankdata(pooled)
    r1 = ranks[:n1].sum()
    u1 = r1 - n1 * (n1 + 1) / 2.0
    u2 = n1 * n2 - u1
    u_big = max(u1, u2)

    no_ties = np.unique(pooled).size == pooled.size
    if no_ties and n1 + n2 <= EXACT_MAX_N:
        counts = _u_counts(n1, n2)
        total = sum(counts)
        tail = sum(c for u, c in enumerate(counts) if u >= u_big)
        p = min(1.0, 2.0 * tail / total)
        method = "exact"
    else:
        # tie-corrected variance; sd == 0 means all values identical
        n = n1 + n2
        _, tie_counts = np.unique(pooled, return_counts=True)
        tie_term = (tie_counts ** 3 - tie_counts).sum()
        var = n1 * n2 / 12.0 * ((n + 1) - tie_term / (n * (n - 1)))
        if var <= 0:
            p = 1.0
        else:
            z = (u_big - n1 * n2 / 2.0 - 0.5) / math.sqrt(var)
            p = min(1.0, 2.0 * 0.5 * math.erfc(z / math.sqrt(2.0)))
        method = "normal-approx"
    return UTestResult(u=min(u1, u2), p=max(p, np.nextafter(0, 1)), method=method, n1=n1, n2=n2)


@dataclass(frozen=True)
class SelectionResult:
    """Outcome of comparing score sets across configurations."""

    order: tuple[str, ...]
    means: dict
    p_matrix: np.ndarray        # symmetric, NaN diagonal
    chosen: str
    tied_with_chosen: tuple[str, ...]


def select_hyperparameter(runs: dict[str, Sequence[float]],
                          significance: float = 0.05) -> SelectionResult:
    """Pick the config with the lowest mean score and report the pairwise
    two-sided p-value matrix.

    Configs whose scores are not significantly different from the chosen
    one (p >= significance) are listed as statistically tied: their medians
    cannot be asserted to differ.
    """
    if len(runs) < 2:
        raise ValueError("need at least two configurations")
    order = tuple(runs.keys())
    scores = {k: np.asarray(v, dtype=np.float64) for k, v in runs.items()}
    for k, v in scores.items():
        if v.size < 2:
            raise ValueError(f"config {k!r} needs at least 2 scores")
    m = len(order)
    p = np.full((m, m), np.nan)
    for i in range(m):
        for j in range(i + 1, m):
            p[i, j] = p[j, i] = mann_whitney_u(scores[order[i]], scores[order[j]]).p
    means = {k: float(v.mean()) for k, v in scores.items()}
    chosen = min(order, key=lambda k: means[k])
    ci = order.index(chosen)
    tied = tuple(order[j] for j in range(m) if j != ci and p[ci, j] >= significance)
    return SelectionResult(order, means, p, chosen, tied)


def write_p_matrix_csv(result: SelectionResult, path: str) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow([""] + list(result.order))
        for i, name in enumerate(result.order):
            row = [name]
            for j in range(len(result.order)):
                row.append("-" if i == j else f"{result.p_matrix[i, j]:.4f}")
            writer.writerow(row)
