"""Contour evaluation: surface distances, Wilcoxon tests, and report emission.

Surfaces are the centers of foreground voxels with at least one 6-connected
background (or out-of-grid) neighbor, expressed in millimeters.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree
from scipy.stats import rankdata

from .volgrid import Segmentation
from .warpfield import DVF, jacobian_determinant

EXACT_WILCOXON_MAX_N = 12
SIGNIFICANCE_MARKS = "†‡§¶"  # dagger, double dagger, ...


def extract_surface(mask, spacing=(1.0, 1.0, 1.0), origin=(0.0, 0.0, 0.0)) -> np.ndarray:
    """Surface point set (n, 3) in mm of a boolean 3D mask."""
    mask = np.asarray(mask).astype(bool)
    if not mask.any():
        raise ValueError("cannot extract a surface from an empty mask")
    structure = ndimage.generate_binary_structure(3, 1)
    interior = ndimage.binary_erosion(mask, structure=structure, border_value=0)
    boundary = mask & ~interior
    pts = np.argwhere(boundary).astype(np.float64)
    return pts * np.asarray(spacing) + np.asarray(origin)


def _directed_nn(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return cKDTree(b).query(a)[0]


def msd(a: np.ndarray, b: np.ndarray) -> float:
    """Symmetric mean surface distance between two point sets (mm)."""
    if len(a) == 0 or len(b) == 0:
        raise ValueError("surface point sets must be non-empty")
    return 0.5 * (float(_directed_nn(a, b).mean()) + float(_directed_nn(b, a).mean()))


def hd95(a: np.ndarray, b: np.ndarray) -> float:
    """Max of the two directed 95th-percentile nearest-neighbor distances (mm)."""
    if len(a) == 0 or len(b) == 0:
        raise ValueError("surface point sets must be non-empty")
    return max(
        float(np.percentile(_directed_nn(a, b), 95)),
        float(np.percentile(_directed_nn(b, a), 95)),
    )


def jacobian_std(dvf: DVF) -> float:
    """Population standard deviation of the Jacobian determinant over all voxels."""
    return float(np.std(jacobian_determinant(dvf).data))


# ---------------------------------------------------------------------------
# Wilcoxon signed-rank test


def _exact_signed_rank_p(doubled_ranks, w2) -> float:
    """Two-sided p from the exact W+ distribution (doubled midranks, DP over sums)."""
    total = doubled_ranks.sum()
    counts = np.zeros(total + 1, dtype=np.float64)
    counts[0] = 1.0
    for r in doubled_ranks:
        shifted = np.zeros_like(counts)
        shifted[r:] = counts[: counts.size - r]
        counts = counts + shifted
    denom = counts.sum()
    p_le = counts[: w2 + 1].sum() / denom
    p_ge = counts[w2:].sum() / denom
    return min(1.0, 2.0 * min(p_le, p_ge))


def wilcoxon_signed_rank(x, y) -> float:
    """Two-sided Wilcoxon signed-rank p-value for paired samples.

    Zero differences are dropped (all-zero pairs give p = 1 by convention).
    Exact distribution for n <= 12, normal approximation with tie correction
    beyond that.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("x and y must be 1D arrays of equal length")
    d = x - y
    d = d[d != 0]
    n = d.size
    if n == 0:
        return 1.0
    if n < 5:
        raise ValueError(f"need >= 5 nonzero differences, got {n}")
    ranks = rankdata(np.abs(d))
    w_plus = float(ranks[d > 0].sum())
    if n <= EXACT_WILCOXON_MAX_N:
        doubled = np.rint(2.0 * ranks).astype(np.int64)
        return _exact_signed_rank_p(doubled, int(round(2.0 * w_plus)))
    mu = n * (n + 1) / 4.0
    var = n * (n + 1) * (2 * n + 1) / 24.0
    _, tie_counts = np.unique(np.abs(d), return_counts=True)
    var -= (tie_counts.astype(np.float64) ** 3 - tie_counts).sum() / 48.0
    z = (w_plus - mu) / math.sqrt(var)
    return math.erfc(abs(z) / math.sqrt(2.0))


# ---------------------------------------------------------------------------
# Per-case evaluation


@dataclass
class OrganMetrics:
    msd_mm: float
    hd95_mm: float
    dice: float


@dataclass
class CaseResult:
    """Geometric scores of one propagated case."""

    case_id: str
    organ_metrics: dict = field(default_factory=dict)
    dvf_jac_std: float = float("nan")
    runtime_s: float = float("nan")


def hard_dice(a, b) -> float:
    a = np.asarray(a).astype(bool)
    b = np.asarray(b).astype(bool)
    denom = a.sum() + b.sum()
    if denom == 0:
        return float("nan")
    return 2.0 * float((a & b).sum()) / float(denom)


def evaluate_case(case_id, reference_seg: Segmentation, predicted_seg: Segmentation,
                  dvf: DVF | None = None, runtime_s: float = float("nan")) -> CaseResult:
    """Score a propagated segmentation against the reference, per organ.

    An organ missing from either segmentation gets dice 0 and NaN distances.
    """
    if reference_seg.dims != predicted_seg.dims:
        raise ValueError(
            f"grid mismatch: reference {reference_seg.dims} vs predicted {predicted_seg.dims}"
        )
    result = CaseResult(case_id=str(case_id))
    if dvf is not None:
        result.dvf_jac_std = jacobian_std(dvf)
    result.runtime_s = float(runtime_s)
    for label_id, name in sorted(reference_seg.label_names.items()):
        if label_id == 0:
            continue
        ref = reference_seg.labels == label_id
        pred = predicted_seg.labels == label_id
        if ref.any() and pred.any():
            a = extract_surface(ref, reference_seg.spacing)
            b = extract_surface(pred, reference_seg.spacing)
            metrics = OrganMetrics(msd(a, b), hd95(a, b), hard_dice(ref, pred))
        else:
            metrics = OrganMetrics(float("nan"), float("nan"),
                                   0.0 if (ref.any() or pred.any()) else float("nan"))
        result.organ_metrics[name] = metrics
    return result


# ---------------------------------------------------------------------------
# Report formatting

_METRIC_TITLES = (("msd_mm", "MSD (mm)", min),
                  ("hd95_mm", "95% HD (mm)", min),
                  ("dice", "Dice", max))


def format_mean_std(values) -> str:
    """Render "mean ± std" in the reporting convention (sample std, e.g. "1.73 ± 0.7")."""
    values = np.asarray(values, dtype=np.float64)
    mean = values.mean()
    std = values.std(ddof=1) if values.size > 1 else 0.0
    std_text = f"{std:.2f}" if std < 0.095 else f"{std:.1f}"
    return f"{mean:.2f} ± {std_text}"


def _metric_values(results, organ, metric):
    return np.array([getattr(r.organ_metrics[organ], metric) for r in results])


def _check_matched_cases(results_by_method):
    ids = None
    for method, results in results_by_method.items():
        this = [r.case_id for r in results]
        if ids is None:
            ids = this
        elif this != ids:
            raise ValueError(f"mismatched case sets: method {method!r} differs")


def report_tables(results_by_method: dict, baseline_ids=()) -> str:
    """Plain-text tables (one per metric) of per-organ "mean ± std" cells.

    Cells gain a dagger per baseline with Wilcoxon p < 0.05 against it, and
    the best cell per column (smallest distance, largest Dice) is starred.
    """
    _check_matched_cases(results_by_method)
    methods = list(results_by_method)
    baselines = [b for b in baseline_ids if b in results_by_method]
    first = next(iter(results_by_method.values()))[0]
    organs = list(first.organ_metrics)
    blocks = []
    for metric, title, best_fn in _METRIC_TITLES:
        cells = {}
        means = {}
        for m in methods:
            for organ in organs:
                vals = _metric_values(results_by_method[m], organ, metric)
                means[m, organ] = float(np.mean(vals))
                marks = ""
                for b_idx, b in enumerate(baselines):
                    if b == m:
                        continue
                    base_vals = _metric_values(results_by_method[b], organ, metric)
                    try:
                        p = wilcoxon_signed_rank(vals, base_vals)
                    except ValueError:
                        continue
                    if p < 0.05:
                        marks += SIGNIFICANCE_MARKS[b_idx % len(SIGNIFICANCE_MARKS)]
                cells[m, organ] = format_mean_std(vals) + marks
        for organ in organs:
            col = {m: means[m, organ] for m in methods}
            best = best_fn(col.values())
            for m in methods:
                if col[m] == best:
                    cells[m, organ] = f"*{cells[m, organ]}*"
        width = max(12, max(len(c) for c in cells.values()) + 2)
        name_w = max(len("Method"), max(len(m) for m in methods)) + 2
        lines = [title, "-" * len(title)]
        lines.append("Method".ljust(name_w) + "".join(o.ljust(width) for o in organs))
        for m in methods:
            lines.append(m.ljust(name_w) + "".join(cells[m, o].ljust(width) for o in organs))
        blocks.append("\n".join(lines))
    return "\n\n".join(blocks) + "\n"


def report_csv_rows(results_by_method: dict, baseline_ids=()) -> list:
    """Tidy rows (metric, method, organ, mean, std, n) backing the text tables."""
    _check_matched_cases(results_by_method)
    first = next(iter(results_by_method.values()))[0]
    organs = list(first.organ_metrics)
    rows = []
    for metric, _, _ in _METRIC_TITLES:
        for method, results in results_by_method.items():
            for organ in organs:
                vals = _metric_values(results, organ, metric)
                rows.append({
                    "metric": metric,
                    "method": method,
                    "organ": organ,
                    "mean": float(np.mean(vals)),
                    "std": float(np.std(vals, ddof=1)) if vals.size > 1 else 0.0,
                    "n": int(vals.size),
                })
    return rows


# ---------------------------------------------------------------------------
# Case-result CSV (columns: case_id, organ, metric, value)


def write_case_results_csv(results, path) -> None:
    """One row per (case, organ, metric); case-level metrics use an empty organ."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["case_id", "organ", "metric", "value"])
        for r in results:
            for organ, m in r.organ_metrics.items():
                writer.writerow([r.case_id, organ, "msd_mm", repr(m.msd_mm)])
                writer.writerow([r.case_id, organ, "hd95_mm", repr(m.hd95_mm)])
                writer.writerow([r.case_id, organ, "dice", repr(m.dice)])
            writer.writerow([r.case_id, "", "dvf_jac_std", repr(r.dvf_jac_std)])
            writer.writerow([r.case_id, "", "runtime_s", repr(r.runtime_s)])


def read_case_results_csv(path) -> list:
    by_case: dict = {}
    order = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            cid = row["case_id"]
            if cid not in by_case:
                by_case[cid] = CaseResult(case_id=cid)
                order.append(cid)
            value = float(row["value"])
            organ = row["organ"]
            if organ:
                m = by_case[cid].organ_metrics.setdefault(
                    organ, OrganMetrics(float("nan"), float("nan"), float("nan")))
                setattr(m, row["metric"], value)
            elif row["metric"] == "dvf_jac_std":
                by_case[cid].dvf_jac_std = value
            elif row["metric"] == "runtime_s":
                by_case[cid].runtime_s = value
    return [by_case[cid] for cid in order]


# ---------------------------------------------------------------------------
# Plots


def heatmap_slice(fixed, warped, axis: int = 2, index: int | None = None) -> np.ndarray:
    """Absolute-difference slice |fixed - warped| used for the heatmap figures."""
    f = np.asarray(fixed.data if hasattr(fixed, "data") else fixed)
    w = np.asarray(warped.data if hasattr(warped, "data") else warped)
    if f.shape != w.shape:
        raise ValueError(f"shape mismatch {f.shape} vs {w.shape}")
    if index is None:
        index = f.shape[axis] // 2
    return np.abs(np.take(f, index, axis=axis) - np.take(w, index, axis=axis))


def emit_plots(results_by_method: dict, out_dir, heatmap_pairs: dict | None = None) -> list:
    """Write per-organ MSD boxplots and optional per-case |difference| heatmaps.

    Returns the written paths; filenames are deterministic.
    """
    import os

    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    os.makedirs(out_dir, exist_ok=True)
    first = next(iter(results_by_method.values()))[0]
    organs = list(first.organ_metrics)
    methods = list(results_by_method)
    written = []
    for organ in organs:
        fig, ax = plt.subplots(figsize=(1.5 + 1.2 * len(methods), 4))
        data = [_metric_values(results_by_method[m], organ, "msd_mm") for m in methods]
        ax.boxplot(data, tick_labels=methods)
        ax.set_ylabel("MSD (mm)")
        ax.set_title(organ)
        path = os.path.join(out_dir, f"boxplot_msd_{organ}.png")
        fig.savefig(path, dpi=110, bbox_inches="tight")
        plt.close(fig)
        written.append(path)
    for case_id, (fixed, warped) in (heatmap_pairs or {}).items():
        img = heatmap_slice(fixed, warped)
        fig, ax = plt.subplots(figsize=(4, 4))
        im = ax.imshow(img.T, origin="lower", cmap="magma")
        fig.colorbar(im, ax=ax, shrink=0.8)
        ax.set_title(f"abs difference {case_id}")
        path = os.path.join(out_dir, f"absdiff_{case_id}.png")
        fig.savefig(path, dpi=110, bbox_inches="tight")
        plt.close(fig)
        written.append(path)
    return written
