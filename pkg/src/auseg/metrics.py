"""Evaluation metrics and statistics for binary segmentation.

Per-image scores (Dice coefficient, sensitivity, relative area difference,
symmetric Hausdorff distance) are computed from thresholded masks, grouped
along category axes, aggregated as mean over per-run means with a sample
standard deviation across runs, and compared between methods with a paired
Wilcoxon signed-rank test (exact for small n, normal approximation with tie
and continuity corrections otherwise).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict
from typing import Optional, Sequence

import numpy as np
from scipy.spatial import cKDTree


class EmptyGroundTruthError(ValueError):
    """Ground-truth mask has no foreground pixels."""


CATEGORY_AXES = ("subtlety", "birads", "shape", "margin", "pathology")
METRIC_NAMES = ("dsc", "sen", "delta_a", "hau")


def binarize(prob, threshold=0.5):
    """Threshold a probability map: foreground where prob >= threshold."""
    if not (0.0 < threshold < 1.0):
        raise ValueError(f"threshold must be in (0, 1), got {threshold}")
    arr = np.asarray(prob)
    return arr >= threshold


def _as_bool_mask(mask, what):
    arr = np.asarray(mask)
    if arr.dtype != bool:
        vals = np.unique(arr)
        if not np.all(np.isin(vals, (0, 1))):
            raise ValueError(f"{what} must be binary, found values {vals[:8]}")
        arr = arr.astype(bool)
    return arr


def confusion_counts(pred, gt):
    """Pixel confusion counts (tp, fp, fn, tn) for two binary masks."""
    p = _as_bool_mask(pred, "prediction")
    g = _as_bool_mask(gt, "ground truth")
    if p.shape != g.shape:
        raise ValueError(f"mask shapes differ: {p.shape} vs {g.shape}")
    tp = int(np.sum(p & g))
    fp = int(np.sum(p & ~g))
    fn = int(np.sum(~p & g))
    tn = int(np.sum(~p & ~g))
    return tp, fp, fn, tn


def _require_gt(tp, fn):
    if tp + fn == 0:
        raise EmptyGroundTruthError("ground truth contains no foreground pixels")


def dsc(pred, gt, allow_empty=False):
    """Dice similarity coefficient 2TP / (2TP + FP + FN).

    An empty ground truth raises by default; with allow_empty=True an empty
    ground truth scores 1.0 against an empty prediction (both agree there is
    nothing) and 0.0 against any false positive.
    """
    tp, fp, fn, _ = confusion_counts(pred, gt)
    if tp + fn == 0 and allow_empty:
        return 1.0 if fp == 0 else 0.0
    _require_gt(tp, fn)
    return 2.0 * tp / (2.0 * tp + fp + fn)


def sen(pred, gt):
    """Sensitivity (recall) TP / (TP + FN)."""
    tp, _, fn, _ = confusion_counts(pred, gt)
    _require_gt(tp, fn)
    return tp / (tp + fn)


def delta_a(pred, gt):
    """Relative area difference |A_pred - A_gt| / A_gt."""
    tp, fp, fn, _ = confusion_counts(pred, gt)
    _require_gt(tp, fn)
    a_pred = tp + fp
    a_gt = tp + fn
    return abs(a_pred - a_gt) / a_gt


def hausdorff(pred, gt):
    """Symmetric Hausdorff distance between foreground point sets.

    Pixels are points at their integer coordinates; distances are Euclidean.
    All foreground pixels participate (not just boundaries). If either mask
    is empty the image diagonal (the largest realizable pixel distance) is
    returned as a sentinel; is_hausdorff_sentinel() detects that case.
    """
    p = _as_bool_mask(pred, "prediction")
    g = _as_bool_mask(gt, "ground truth")
    if p.shape != g.shape:
        raise ValueError(f"mask shapes differ: {p.shape} vs {g.shape}")
    if not p.any() or not g.any():
        return _diagonal(p.shape)
    pa = np.argwhere(p).astype(np.float64)
    ga = np.argwhere(g).astype(np.float64)
    d_pg = cKDTree(ga).query(pa, k=1)[0].max()
    d_gp = cKDTree(pa).query(ga, k=1)[0].max()
    return float(max(d_pg, d_gp))


def _diagonal(shape):
    h, w = shape
    return float(math.hypot(h - 1, w - 1))


def is_hausdorff_sentinel(pred, gt):
    p = _as_bool_mask(pred, "prediction")
    g = _as_bool_mask(gt, "ground truth")
    return not p.any() or not g.any()


@dataclass
class MetricRecord:
    """Per-image metric row plus optional category tags."""

    image_id: str
    dsc: float
    sen: float
    delta_a: float
    hau: float
    hau_sentinel: bool = False
    subtlety: Optional[str] = None
    birads: Optional[str] = None
    shape: Optional[str] = None
    margin: Optional[str] = None
    pathology: Optional[str] = None

    def __post_init__(self):
        if not (0.0 <= self.dsc <= 1.0):
            raise ValueError(f"dsc out of range: {self.dsc}")
        if not (0.0 <= self.sen <= 1.0):
            raise ValueError(f"sen out of range: {self.sen}")
        if self.delta_a < 0 or self.hau < 0:
            raise ValueError("delta_a and hau must be non-negative")

    def value(self, metric):
        return getattr(self, metric)

    def category(self, axis):
        if axis == "overall":
            return "all"
        v = getattr(self, axis)
        return "unknown" if v is None else str(v)


def evaluate_masks(pred, gt, image_id, tags=None):
    """Build a MetricRecord from one predicted/ground-truth mask pair."""
    tags = dict(tags or {})
    return MetricRecord(
        image_id=str(image_id),
        dsc=dsc(pred, gt),
        sen=sen(pred, gt),
        delta_a=delta_a(pred, gt),
        hau=hausdorff(pred, gt),
        hau_sentinel=is_hausdorff_sentinel(pred, gt),
        **{axis: (str(tags[axis]) if tags.get(axis) is not None else None)
           for axis in CATEGORY_AXES},
    )


# ---------------------------------------------------------------------------
# aggregation
# ---------------------------------------------------------------------------

@dataclass
class AggregateCell:
    mean: float
    sd: float
    count: int  # records per run in this category


@dataclass
class MetricReport:
    """Per-record values of one or more runs plus grouped aggregates.

    aggregates[axis][category][metric] is an AggregateCell whose mean is the
    mean over runs of the per-run record means, and whose sd is the sample
    (n-1) standard deviation of those per-run means (0.0 for a single run).
    """

    runs: list  # list of list of MetricRecord
    aggregates: dict
    axes: tuple

    @property
    def records(self):
        return [r for run in self.runs for r in run]


def _sample_sd(values):
    if len(values) <= 1:
        return 0.0
    return float(np.std(values, ddof=1))


def aggregate(runs: Sequence[Sequence[MetricRecord]], axes=("overall",)):
    """Aggregate metric records over category axes and repeated runs.

    Every run must cover the same image set. Within each run the records of
    one category are averaged; the reported mean/sd are then taken across
    the per-run means.
    """
    runs = [list(r) for r in runs]
    if not runs or not runs[0]:
        raise ValueError("aggregate: need at least one non-empty run")
    id_set = {tuple(sorted(r.image_id for r in run)) for run in runs}
    if len(id_set) != 1:
        raise ValueError("aggregate: runs cover different image sets")
    for axis in axes:
        if axis != "overall" and axis not in CATEGORY_AXES:
            raise ValueError(f"unknown aggregation axis {axis!r}")

    aggregates = {}
    for axis in axes:
        categories = sorted({rec.category(axis) for rec in runs[0]})
        table = {}
        for cat in categories:
            cell = {}
            counts = None
            for metric in METRIC_NAMES:
                per_run = []
                for run in runs:
                    vals = [rec.value(metric) for rec in run if rec.category(axis) == cat]
                    if not vals:
                        raise ValueError(
                            f"aggregate: category {cat!r} missing from one run on axis {axis!r}")
                    per_run.append(float(np.mean(vals)))
                    counts = len(vals)
                cell[metric] = AggregateCell(mean=float(np.mean(per_run)),
                                             sd=_sample_sd(per_run), count=counts)
            table[cat] = cell
        aggregates[axis] = table
    return MetricReport(runs=runs, aggregates=aggregates, axes=tuple(axes))


def ecdf(values):
    """Empirical CDF as (value, fraction <= value) pairs.

    One point per distinct sorted value; right-continuous by construction;
    the final fraction is exactly 1.0.
    """
    vals = np.asarray(list(values), dtype=float)
    if vals.size == 0:
        raise ValueError("ecdf: empty input")
    uniq, counts = np.unique(vals, return_counts=True)
    fractions = np.cumsum(counts) / vals.size
    fractions[-1] = 1.0
    return [(float(v), float(f)) for v, f in zip(uniq, fractions)]


# ---------------------------------------------------------------------------
# Wilcoxon signed-rank test
# ---------------------------------------------------------------------------

@dataclass
class WilcoxonResult:
    statistic: float   # sum of ranks of positive differences
    p_value: float
    n_effective: int   # pairs left after dropping zero differences
    method: str        # "exact" | "approx" | "degenerate"

    @property
    def degenerate(self):
        return self.method == "degenerate"


def _rank_average(values):
    """Average ranks (1-based) with ties sharing their mean rank."""
    order = np.argsort(values, kind="stable")
    ranks = np.empty(len(values), dtype=np.float64)
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and values[order[j + 1]] == values[order[i]]:
            j += 1
        avg = (i + j) / 2.0 + 1.0
        for k in range(i, j + 1):
            ranks[order[k]] = avg
        i = j + 1
    return ranks


def _exact_p(ranks2, w2):
    """Two-sided exact p for doubled integer ranks via sign enumeration.

    Dynamic-programming convolution over the 2^n equally likely sign
    assignments; counts are exact integers.
    """
    total = int(sum(ranks2))
    counts = np.zeros(total + 1, dtype=object)
    counts[0] = 1
    for r in ranks2:
        shifted = np.zeros(total + 1, dtype=object)
        shifted[r:] = counts[:total + 1 - r]
        counts = counts + shifted
    n_assign = 1 << len(ranks2)
    lower = int(np.sum(counts[:w2 + 1]))
    upper = int(np.sum(counts[w2:]))
    return min(1.0, 2.0 * min(lower, upper) / n_assign)


def wilcoxon_signed_rank(a, b, exact_limit=20):
    """Paired two-sided Wilcoxon signed-rank test of a vs b.

    Zero differences are dropped. Ties among |differences| get averaged
    ranks. With n <= exact_limit effective pairs the p-value enumerates the
    exact sign distribution (ties included); larger n uses the normal
    approximation with tie and continuity corrections. All differences zero
    degenerates to p = 1.0.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError(f"wilcoxon: need two equal-length 1-D arrays, got {a.shape}, {b.shape}")
    d = a - b
    d = d[d != 0]
    n = d.size
    if n == 0:
        return WilcoxonResult(statistic=0.0, p_value=1.0, n_effective=0, method="degenerate")
    ranks = _rank_average(np.abs(d))
    w_pos = float(np.sum(ranks[d > 0]))
    if n <= exact_limit:
        ranks2 = [int(round(2 * r)) for r in ranks]
        w2 = int(round(2 * w_pos))
        p = _exact_p(ranks2, w2)
        return WilcoxonResult(statistic=w_pos, p_value=p, n_effective=n, method="exact")
    mu = n * (n + 1) / 4.0
    var = n * (n + 1) * (2 * n + 1) / 24.0
    _, tie_counts = np.unique(np.abs(d), return_counts=True)
    var -= float(np.sum(tie_counts.astype(np.float64) ** 3 - tie_counts)) / 48.0
    if var <= 0:
        return WilcoxonResult(statistic=w_pos, p_value=1.0, n_effective=n, method="degenerate")
    diff = w_pos - mu
    correction = 0.5 * np.sign(diff)
    z = (diff - correction) / math.sqrt(var)
    p = min(1.0, math.erfc(abs(z) / math.sqrt(2.0)))
    return WilcoxonResult(statistic=w_pos, p_value=p, n_effective=n, method="approx")


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

REPORT_FORMAT_VERSION = 1


def report_to_json(report: MetricReport, extra=None):
    """Serialize a MetricReport to a JSON-ready dict (versioned)."""
    doc = {
        "format_version": REPORT_FORMAT_VERSION,
        "axes": list(report.axes),
        "runs": [[asdict(rec) for rec in run] for run in report.runs],
        "aggregates": {
            axis: {cat: {m: asdict(cell) for m, cell in cells.items()}
                   for cat, cells in table.items()}
            for axis, table in report.aggregates.items()
        },
    }
    if extra:
        doc.update(extra)
    return doc


def report_from_json(doc):
    if doc.get("format_version") != REPORT_FORMAT_VERSION:
        raise ValueError(f"unsupported report format version {doc.get('format_version')!r}")
    runs = [[MetricRecord(**rec) for rec in run] for run in doc["runs"]]
    return aggregate(runs, axes=tuple(doc["axes"]))


def report_rows(report: MetricReport):
    """Flatten a report into CSV rows: per-record rows, then aggregates.

    Aggregate rows are flagged in the first column and leave image-specific
    fields empty.
    """
    header = ["row_type", "run", "image_id", "axis", "category",
              "dsc", "sen", "delta_a", "hau", "hau_sentinel",
              "dsc_sd", "sen_sd", "delta_a_sd", "hau_sd", "count"]
    rows = [header]
    for run_idx, run in enumerate(report.runs):
        for rec in run:
            rows.append(["record", str(run_idx), rec.image_id, "", "",
                         repr(rec.dsc), repr(rec.sen), repr(rec.delta_a), repr(rec.hau),
                         str(int(rec.hau_sentinel)), "", "", "", "", ""])
    for axis, table in report.aggregates.items():
        for cat, cells in table.items():
            rows.append(["aggregate", "", "", axis, cat,
                         repr(cells["dsc"].mean), repr(cells["sen"].mean),
                         repr(cells["delta_a"].mean), repr(cells["hau"].mean), "",
                         repr(cells["dsc"].sd), repr(cells["sen"].sd),
                         repr(cells["delta_a"].sd), repr(cells["hau"].sd),
                         str(cells["dsc"].count)])
    return rows
