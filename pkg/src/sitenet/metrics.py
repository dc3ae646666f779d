"""Classification metrics, ROC/AUC, paired t-tests, and report aggregation.

AUC uses the Mann-Whitney statistic (ties credited 0.5) computed from tied
ranks, which equals the trapezoidal area under the emitted ROC curve. The
paired t-test converts the t statistic through a Student-t survival function
built on a continued-fraction regularized incomplete beta (Lentz's method),
accurate to well below 1e-6 absolute in the p-value.
"""

import math
from dataclasses import dataclass

import numpy as np

METRIC_NAMES = ("accuracy", "f1", "recall", "precision", "auc")
METHOD_ORDER = ("single", "joint", "sepnorm", "contrastive")


class DegenerateDataError(ValueError):
    """Inputs make the requested statistic undefined."""


@dataclass
class MetricsReport:
    """Per-site metric (mean, std) pairs, values in percent."""

    per_site: dict

    def sites(self):
        return sorted(self.per_site)


def confusion_metrics(labels, scores, threshold=0.5):
    """Accuracy, precision, recall, f1 (percent) at a score threshold.

    Positive class is 1. Zero predicted positives make precision undefined:
    it is reported as 0 with ``precision_defined`` False. Zero actual
    positives leave recall undefined and are rejected.
    """
    labels = np.asarray(labels)
    scores = np.asarray(scores, dtype=np.float64)
    if labels.size == 0:
        raise DegenerateDataError("need at least one sample")
    preds = (scores >= threshold).astype(np.int64)
    tp = int(((preds == 1) & (labels == 1)).sum())
    fp = int(((preds == 1) & (labels == 0)).sum())
    fn = int(((preds == 0) & (labels == 1)).sum())
    tn = int(((preds == 0) & (labels == 0)).sum())
    if tp + fn == 0:
        raise DegenerateDataError("no positive samples; recall undefined")
    precision_defined = (tp + fp) > 0
    precision = tp / (tp + fp) if precision_defined else 0.0
    recall = tp / (tp + fn)
    f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    accuracy = (tp + tn) / labels.size
    return {
        "accuracy": 100.0 * accuracy,
        "precision": 100.0 * precision,
        "recall": 100.0 * recall,
        "f1": 100.0 * f1,
        "precision_defined": precision_defined,
    }


def roc_auc(labels, scores):
    """AUC in [0, 1] plus ROC points [(fpr, tpr, threshold), ...].

    AUC is the fraction of (positive, negative) pairs ranked correctly, ties
    counting half, computed via tied ranks. The curve sweeps thresholds over
    the distinct scores in descending order, starting from (0, 0).
    """
    labels = np.asarray(labels)
    scores = np.asarray(scores, dtype=np.float64)
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise DegenerateDataError(
            f"AUC needs both classes, got {n_pos} positive / {n_neg} negative"
        )
    order = np.argsort(scores, kind="stable")
    ranks = np.empty(labels.size, dtype=np.float64)
    sorted_scores = scores[order]
    i = 0
    while i < labels.size:
        j = i
        while j + 1 < labels.size and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0  # average 1-based rank
        i = j + 1
    rank_sum = ranks[labels == 1].sum()
    auc = (rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)

    curve = [(0.0, 0.0, math.inf)]
    for th in np.unique(scores)[::-1]:
        tpr = float(((scores >= th) & (labels == 1)).sum()) / n_pos
        fpr = float(((scores >= th) & (labels == 0)).sum()) / n_neg
        curve.append((fpr, tpr, float(th)))
    return float(auc), curve


def write_roc_csv(curve, path):
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write("fpr,tpr,threshold\n")
        for fpr, tpr, th in curve:
            f.write(f"{fpr!r},{tpr!r},{th!r}\n")


def _betacf(a, b, x, max_iter=300, eps=3e-14):
    """Continued fraction for the regularized incomplete beta (Lentz)."""
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < tiny:
        d = tiny
    d = 1.0 / d
    h = d
    for m in range(1, max_iter + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < eps:
            return h
    raise RuntimeError(f"incomplete beta did not converge for a={a}, b={b}, x={x}")


def betainc_reg(a, b, x):
    """Regularized incomplete beta I_x(a, b) for a, b > 0 and x in [0, 1]."""
    if x < 0.0 or x > 1.0:
        raise ValueError(f"x must be in [0, 1], got {x}")
    if x == 0.0 or x == 1.0:
        return float(x)
    ln_front = (
        math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
        + a * math.log(x) + b * math.log1p(-x)
    )
    front = math.exp(ln_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def student_t_sf_two_sided(t, df):
    """Two-sided tail probability of Student's t with df degrees of freedom."""
    if df < 1:
        raise ValueError(f"df must be >= 1, got {df}")
    return betainc_reg(df / 2.0, 0.5, df / (df + t * t))


def paired_t_test(a, b):
    """Two-sided p-value that paired samples a and b share a mean."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError(f"need equal-length 1-D samples, got {a.shape} and {b.shape}")
    n = a.size
    if n < 2:
        raise ValueError(f"need at least 2 pairs, got {n}")
    d = a - b
    sd = d.std(ddof=1)
    if sd == 0.0:
        raise DegenerateDataError("paired differences have zero variance")
    t = d.mean() / (sd / math.sqrt(n))
    return student_t_sf_two_sided(t, n - 1)


def aggregate(reports):
    """Mean and sample std (percent) per site and metric over a list of runs.

    Each report is {site: {metric: value}}. Site sets must agree across
    reports; a single report aggregates with std 0.
    """
    if not reports:
        raise ValueError("need at least one report")
    site_set = set(reports[0])
    for r in reports[1:]:
        if set(r) != site_set:
            raise ValueError(
                f"inconsistent site sets across reports: {sorted(site_set)} vs {sorted(r)}"
            )
    per_site = {}
    for site in sorted(site_set):
        per_site[site] = {}
        for metric in METRIC_NAMES:
            vals = np.array([r[site][metric] for r in reports], dtype=np.float64)
            std = vals.std(ddof=1) if vals.size > 1 else 0.0
            per_site[site][metric] = (float(vals.mean()), float(std))
    return MetricsReport(per_site)


def _method_label(method):
    return {
        "single": "Single",
        "joint": "Joint",
        "sepnorm": "SepNorm",
        "contrastive": "+Contrastive",
    }.get(method, method)


def render_comparison(method_reports, site_names=None):
    """Render {method: MetricsReport} as aligned text and CSV rows.

    Rows follow METHOD_ORDER; columns are accuracy, f1, recall, precision,
    auc per site, each cell ``mean+-std`` with two decimals. Methods mapped
    to None (failed cells) render as ``FAILED``.
    """
    methods = [m for m in METHOD_ORDER if m in method_reports]
    methods += [m for m in method_reports if m not in METHOD_ORDER]
    sites = None
    for rep in method_reports.values():
        if rep is not None:
            sites = rep.sites()
            break
    if sites is None:
        raise ValueError("no successful method to render")
    if site_names is None:
        site_names = {s: f"site{s}" for s in sites}

    header = ["method"]
    for s in sites:
        header += [f"{site_names[s]}_{m}" for m in METRIC_NAMES]
    csv_rows = [header]
    for method in methods:
        rep = method_reports[method]
        row = [_method_label(method)]
        if rep is None:
            row += ["FAILED"] * (len(header) - 1)
        else:
            for s in sites:
                for m in METRIC_NAMES:
                    mean, std = rep.per_site[s][m]
                    row.append(f"{mean:.2f}+-{std:.2f}")
        csv_rows.append(row)

    widths = [max(len(r[i]) for r in csv_rows) for i in range(len(header))]
    lines = []
    for i, row in enumerate(csv_rows):
        lines.append("  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip())
        if i == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n", csv_rows


def write_csv_rows(rows, path):
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for row in rows:
            f.write(",".join(row) + "\n")
