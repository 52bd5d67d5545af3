from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Any, Dict, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy import stats
from skimage.measure import label, regionprops_table

from .errors import DataError


logger = logging.getLogger(__name__)

EXACT_MAX_N = 25


# -----------------------------
# Overlap scores
# -----------------------------

@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


def confusion(pred: np.ndarray, target: np.ndarray) -> ConfusionCounts:
    pred = np.asarray(pred, dtype=bool)
    target = np.asarray(target, dtype=bool)
    if pred.shape != target.shape:
        raise DataError(f"Prediction shape {pred.shape} does not match target shape {target.shape}")
    tp = int(np.count_nonzero(pred & target))
    fp = int(np.count_nonzero(pred & ~target))
    fn = int(np.count_nonzero(~pred & target))
    return ConfusionCounts(tp=tp, fp=fp, fn=fn, tn=int(pred.size) - tp - fp - fn)


def dice_coefficient(c: ConfusionCounts) -> float:
    """2TP / (2TP + FP + FN); two empty masks agree perfectly (1.0)."""
    denom = 2 * c.tp + c.fp + c.fn
    return 1.0 if denom == 0 else 2.0 * c.tp / denom


def dice(pred: np.ndarray, target: np.ndarray) -> float:
    return dice_coefficient(confusion(pred, target))


@dataclass(frozen=True)
class DiceSummary:
    values: Tuple[float, ...]
    median: float
    q1: float
    q3: float

    @property
    def n(self) -> int:
        return len(self.values)

    def to_dict(self) -> Dict[str, Any]:
        return {"n": self.n, "median": self.median, "q1": self.q1, "q3": self.q3}


def summarize(dices: Sequence[float]) -> DiceSummary:
    """Median and quartiles by linear interpolation between order statistics."""
    values = np.asarray(list(dices), dtype=np.float64)
    if values.size == 0:
        raise DataError("Cannot summarize an empty list of Dice values")
    if np.any(~np.isfinite(values)) or np.any((values < 0) | (values > 1)):
        raise DataError("Dice values must be finite and lie in [0, 1]")
    q1, med, q3 = np.percentile(values, [25, 50, 75], method="linear")
    return DiceSummary(values=tuple(float(v) for v in values), median=float(med), q1=float(q1), q3=float(q3))


# -----------------------------
# Wilcoxon signed-rank test
# -----------------------------

@dataclass(frozen=True)
class WilcoxonResult:
    n_effective: int
    statistic: float        # min(W+, W-)
    w_plus: float
    w_minus: float
    p_value: float          # two-sided
    method: str             # "exact" | "normal"
    alpha: float
    reject: bool
    zeros_dropped: int

    def to_dict(self) -> Dict[str, Any]:
        return {
            "n_effective": self.n_effective,
            "statistic": self.statistic,
            "w_plus": self.w_plus,
            "w_minus": self.w_minus,
            "p_value": self.p_value,
            "method": self.method,
            "alpha": self.alpha,
            "reject": self.reject,
            "zeros_dropped": self.zeros_dropped,
            "zero_handling": "wilcox",
        }


def signed_rank_null_counts(doubled_ranks: Sequence[int]) -> np.ndarray:
    """
    counts[s] = number of the 2**n sign assignments whose positive ranks sum
    to s/2. Ranks are passed doubled so tied (half-integer) averages stay integral.
    """
    total = int(sum(doubled_ranks))
    counts = np.zeros(total + 1, dtype=np.int64)
    counts[0] = 1
    for r in doubled_ranks:
        shifted = np.zeros_like(counts)
        shifted[r:] = counts[:total + 1 - r]
        counts = counts + shifted
    return counts


def _exact_p(doubled_ranks: Sequence[int], w: float) -> float:
    counts = signed_rank_null_counts(doubled_ranks)
    lower = int(counts[: int(round(2 * w)) + 1].sum())
    return min(1.0, 2.0 * lower / float(2 ** len(doubled_ranks)))


def _normal_p(ranks: np.ndarray, w: float) -> float:
    n = ranks.size
    mean = n * (n + 1) / 4.0
    _, tie_counts = np.unique(ranks, return_counts=True)
    var = n * (n + 1) * (2 * n + 1) / 24.0 - float(np.sum(tie_counts ** 3 - tie_counts)) / 48.0
    if var <= 0:
        return 1.0
    z = max(abs(w - mean) - 0.5, 0.0) / math.sqrt(var)
    return float(min(1.0, 2.0 * stats.norm.sf(z)))


def wilcoxon_signed_rank(
    a: Sequence[float],
    b: Sequence[float],
    alpha: float = 0.001,
    method: str = "auto",
    exact_max_n: int = EXACT_MAX_N,
) -> WilcoxonResult:
    """
    Paired two-sided test on d = a - b. Zero differences are dropped, |d| is
    ranked with average ranks for ties. Exact null distribution up to
    `exact_max_n` pairs, normal approximation with tie correction and
    continuity correction above.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise DataError(f"Paired samples must be 1-D with equal lengths, got {a.shape} and {b.shape}")
    if a.size < 2:
        raise DataError(f"Need at least 2 pairs, got {a.size}")
    if method not in ("auto", "exact", "normal"):
        raise DataError(f"method must be auto, exact or normal, got {method!r}")

    d = a - b
    nonzero = d != 0
    d = d[nonzero]
    n = int(d.size)
    if n == 0:
        raise DataError("All paired differences are zero; the signed-rank test is undefined")

    ranks = stats.rankdata(np.abs(d), method="average")
    w_plus = float(ranks[d > 0].sum())
    w_minus = float(ranks[d < 0].sum())
    w = min(w_plus, w_minus)

    use_exact = method == "exact" or (method == "auto" and n <= exact_max_n)
    if use_exact:
        p = _exact_p([int(round(2 * r)) for r in ranks], w)
    else:
        p = _normal_p(ranks, w)
    return WilcoxonResult(
        n_effective=n,
        statistic=w,
        w_plus=w_plus,
        w_minus=w_minus,
        p_value=p,
        method="exact" if use_exact else "normal",
        alpha=alpha,
        reject=p < alpha,
        zeros_dropped=int(a.size - n),
    )


@dataclass
class ComparisonReport:
    summary_a: DiceSummary
    summary_b: DiceSummary
    wilcoxon: Optional[WilcoxonResult]
    error: Optional[str]
    table: pd.DataFrame
    labels: Tuple[str, str] = ("a", "b")

    def to_dict(self) -> Dict[str, Any]:
        return {
            "labels": list(self.labels),
            "summary_a": self.summary_a.to_dict(),
            "summary_b": self.summary_b.to_dict(),
            "wilcoxon": self.wilcoxon.to_dict() if self.wilcoxon else None,
            "error": self.error,
        }


def compare_methods(
    dices_a: Sequence[float],
    dices_b: Sequence[float],
    alpha: float = 0.001,
    labels: Tuple[str, str] = ("a", "b"),
    tile_ids: Optional[Sequence[str]] = None,
    exact_max_n: int = EXACT_MAX_N,
) -> ComparisonReport:
    """Paired per-tile comparison. A degenerate test is reported, not raised."""
    if len(dices_a) != len(dices_b):
        raise DataError(f"Paired Dice lists differ in length: {len(dices_a)} vs {len(dices_b)}")
    ids = list(tile_ids) if tile_ids is not None else [str(i) for i in range(len(dices_a))]
    table = pd.DataFrame({"tile": ids, labels[0]: list(dices_a), labels[1]: list(dices_b)})
    table["difference"] = table[labels[0]] - table[labels[1]]

    result: Optional[WilcoxonResult] = None
    error: Optional[str] = None
    try:
        result = wilcoxon_signed_rank(dices_a, dices_b, alpha, exact_max_n=exact_max_n)
    except DataError as e:
        error = str(e)
        logger.warning("Wilcoxon test not computed: %s", e)
    return ComparisonReport(
        summary_a=summarize(dices_a),
        summary_b=summarize(dices_b),
        wilcoxon=result,
        error=error,
        table=table,
        labels=labels,
    )


# -----------------------------
# Morphometrics
# -----------------------------

@dataclass(frozen=True, eq=False)
class Morphometrics:
    components: pd.DataFrame          # label, area_px, area_nm2, ecd_nm, centroid_row, centroid_col, large
    count: int
    image_area_nm2: float
    number_density_per_nm2: float
    area_fraction: float
    histogram_edges_nm: np.ndarray
    histogram_counts: np.ndarray
    large_count: int
    large_ecd_nm: float

    @property
    def number_density_per_um2(self) -> float:
        return self.number_density_per_nm2 * 1e6

    def histogram_frame(self) -> pd.DataFrame:
        return pd.DataFrame({
            "ecd_lo_nm": self.histogram_edges_nm[:-1],
            "ecd_hi_nm": self.histogram_edges_nm[1:],
            "count": self.histogram_counts,
        })

    def summary(self) -> Dict[str, Any]:
        return {
            "count": self.count,
            "image_area_nm2": self.image_area_nm2,
            "number_density_per_nm2": self.number_density_per_nm2,
            "number_density_per_um2": self.number_density_per_um2,
            "area_fraction": self.area_fraction,
            "large_count": self.large_count,
            "large_ecd_nm": self.large_ecd_nm,
            "median_ecd_nm": float(self.components["ecd_nm"].median()) if self.count else None,
        }


def morphometrics(
    mask: np.ndarray,
    pixel_size_nm: float,
    connectivity: int = 8,
    ecd_bin_nm: float = 50.0,
    large_ecd_nm: float = 500.0,
) -> Morphometrics:
    """Per-carbide area, equivalent circle diameter and centroid, plus field aggregates."""
    if not pixel_size_nm > 0:
        raise DataError(f"pixel_size_nm must be > 0, got {pixel_size_nm}")
    if connectivity not in (4, 8):
        raise DataError(f"connectivity must be 4 or 8, got {connectivity}")
    if not ecd_bin_nm > 0:
        raise DataError(f"ecd_bin_nm must be > 0, got {ecd_bin_nm}")
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim != 2:
        raise DataError(f"Mask must be 2-D, got shape {mask.shape}")
    if mask.size == 0:
        raise DataError(f"Mask has no pixels, shape {mask.shape}")

    labels = label(mask, connectivity=2 if connectivity == 8 else 1)
    props = pd.DataFrame(regionprops_table(labels, properties=("label", "area", "centroid")))
    px2 = pixel_size_nm ** 2
    comps = pd.DataFrame({
        "label": props.get("label", pd.Series(dtype=np.int64)).astype(np.int64),
        "area_px": props.get("area", pd.Series(dtype=np.float64)).astype(np.int64),
    })
    comps["area_nm2"] = comps["area_px"] * px2
    comps["ecd_nm"] = 2.0 * np.sqrt(comps["area_nm2"] / np.pi)
    comps["centroid_row"] = props.get("centroid-0", pd.Series(dtype=np.float64)).astype(np.float64)
    comps["centroid_col"] = props.get("centroid-1", pd.Series(dtype=np.float64)).astype(np.float64)
    comps["large"] = comps["ecd_nm"] >= large_ecd_nm

    count = int(len(comps))
    image_area = float(mask.size) * px2
    top = float(comps["ecd_nm"].max()) if count else 0.0
    n_bins = max(1, int(math.floor(top / ecd_bin_nm)) + 1)
    edges = np.arange(n_bins + 1, dtype=np.float64) * ecd_bin_nm
    hist, _ = np.histogram(comps["ecd_nm"].to_numpy(), bins=edges)
    return Morphometrics(
        components=comps,
        count=count,
        image_area_nm2=image_area,
        number_density_per_nm2=count / image_area,
        area_fraction=float(np.count_nonzero(mask)) / mask.size,
        histogram_edges_nm=edges,
        histogram_counts=hist.astype(np.int64),
        large_count=int(comps["large"].sum()),
        large_ecd_nm=large_ecd_nm,
    )
