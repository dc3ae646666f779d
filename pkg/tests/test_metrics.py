"""Classification metrics, AUC, the t-test, and comparison rendering."""

import math

import numpy as np
import pytest

from sitenet.metrics import (
    DegenerateDataError,
    MetricsReport,
    aggregate,
    betainc_reg,
    confusion_metrics,
    paired_t_test,
    render_comparison,
    roc_auc,
    student_t_sf_two_sided,
    write_roc_csv,
)

scipy_stats = pytest.importorskip("scipy.stats")
scipy_special = pytest.importorskip("scipy.special")


def test_confusion_metrics_hand_case():
    labels = np.array([1, 1, 1, 0, 0, 0, 0, 1])
    scores = np.array([0.9, 0.8, 0.3, 0.2, 0.6, 0.1, 0.4, 0.7])
    # preds: 1,1,0,0,1,0,0,1 -> tp=3 fp=1 fn=1 tn=3
    out = confusion_metrics(labels, scores)
    assert out["accuracy"] == pytest.approx(75.0)
    assert out["precision"] == pytest.approx(75.0)
    assert out["recall"] == pytest.approx(75.0)
    assert out["f1"] == pytest.approx(75.0)
    assert out["precision_defined"]


def test_confusion_metrics_undefined_precision():
    labels = np.array([1, 0])
    scores = np.array([0.1, 0.2])
    out = confusion_metrics(labels, scores)
    assert not out["precision_defined"]
    assert out["precision"] == 0.0 and out["f1"] == 0.0
    with pytest.raises(DegenerateDataError):
        confusion_metrics(np.array([0, 0]), scores)
    with pytest.raises(DegenerateDataError):
        confusion_metrics(np.array([]), np.array([]))


def brute_force_auc(labels, scores):
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    total = 0.0
    for p in pos:
        for n in neg:
            total += 1.0 if p > n else (0.5 if p == n else 0.0)
    return total / (len(pos) * len(neg))


def test_auc_matches_pair_counting_with_ties():
    rng = np.random.default_rng(0)
    for trial in range(60):
        n = int(rng.integers(4, 40))
        labels = rng.integers(0, 2, size=n)
        if labels.min() == labels.max():
            labels[0] = 1 - labels[0]
        # quantized scores force plenty of ties
        scores = np.round(rng.random(n), 1)
        auc, curve = roc_auc(labels, scores)
        assert auc == pytest.approx(brute_force_auc(labels, scores), abs=1e-12), trial
        # trapezoid area under the emitted curve equals the rank AUC
        pts = sorted((f, t) for f, t, _ in curve)
        area = sum(
            (f1 - f0) * (t0 + t1) / 2.0
            for (f0, t0), (f1, t1) in zip(pts, pts[1:])
        )
        assert area == pytest.approx(auc, abs=1e-12)


def test_auc_edge_values():
    labels = np.array([1, 1, 0, 0])
    auc, curve = roc_auc(labels, np.array([0.9, 0.8, 0.2, 0.1]))
    assert auc == 1.0
    auc, _ = roc_auc(labels, np.array([0.1, 0.2, 0.8, 0.9]))
    assert auc == 0.0
    auc, _ = roc_auc(labels, np.full(4, 0.5))
    assert auc == 0.5
    assert curve[0] == (0.0, 0.0, math.inf)
    assert curve[-1][:2] == (1.0, 1.0)
    with pytest.raises(DegenerateDataError):
        roc_auc(np.array([1, 1]), np.array([0.1, 0.2]))


def test_roc_csv(tmp_path):
    _, curve = roc_auc(np.array([1, 0]), np.array([0.8, 0.2]))
    p = tmp_path / "roc.csv"
    write_roc_csv(curve, p)
    lines = p.read_text().splitlines()
    assert lines[0] == "fpr,tpr,threshold"
    assert len(lines) == len(curve) + 1


def test_incomplete_beta_matches_scipy():
    rng = np.random.default_rng(1)
    for _ in range(40):
        a = float(rng.uniform(0.5, 20))
        b = float(rng.uniform(0.5, 20))
        x = float(rng.uniform(0, 1))
        want = scipy_special.betainc(a, b, x)
        assert betainc_reg(a, b, x) == pytest.approx(want, abs=1e-13)


def test_t_tail_matches_scipy():
    rng = np.random.default_rng(2)
    for _ in range(40):
        t = float(rng.normal(0, 3))
        df = int(rng.integers(1, 60))
        want = 2.0 * scipy_stats.t.sf(abs(t), df)
        assert student_t_sf_two_sided(t, df) == pytest.approx(want, abs=1e-12)


def test_paired_t_test_matches_scipy():
    rng = np.random.default_rng(3)
    for _ in range(20):
        n = int(rng.integers(3, 15))
        a = rng.normal(0, 1, size=n)
        b = a + rng.normal(0.3, 0.5, size=n)
        want = scipy_stats.ttest_rel(a, b).pvalue
        assert paired_t_test(a, b) == pytest.approx(want, abs=1e-12)
    with pytest.raises(ValueError):
        paired_t_test([1.0], [2.0])
    with pytest.raises(DegenerateDataError):
        paired_t_test([1.0, 2.0], [2.0, 3.0])  # constant difference


def _report(val):
    return {0: {m: val for m in ("accuracy", "f1", "recall", "precision", "auc")}}


def test_aggregate_mean_and_sample_std():
    reports = [_report(70.0), _report(80.0), _report(90.0)]
    agg = aggregate(reports)
    mean, std = agg.per_site[0]["auc"]
    assert mean == pytest.approx(80.0)
    assert std == pytest.approx(10.0)  # ddof=1
    single = aggregate([_report(75.0)])
    assert single.per_site[0]["f1"] == (75.0, 0.0)
    with pytest.raises(ValueError):
        aggregate([])
    with pytest.raises(ValueError):
        aggregate([_report(1.0), {1: _report(1.0)[0]}])


def test_render_comparison_layout():
    rep = aggregate([_report(72.345), _report(74.0)])
    text, rows = render_comparison(
        {"single": rep, "joint": None, "sepnorm": rep, "contrastive": rep},
        site_names={0: "siteA"},
    )
    lines = text.splitlines()
    assert lines[0].startswith("method")
    assert "siteA_auc" in lines[0]
    assert set(lines[1]) <= {"-", " "}
    joint_line = next(l for l in lines if l.startswith("Joint"))
    assert "FAILED" in joint_line
    contrast_line = next(l for l in lines if l.startswith("+Contrastive"))
    assert "73.17+-1.17" in contrast_line
    # csv rows align with the header width
    assert all(len(r) == len(rows[0]) for r in rows)
    with pytest.raises(ValueError):
        render_comparison({"single": None})


def test_metrics_report_sites():
    rep = MetricsReport({2: {}, 0: {}})
    assert rep.sites() == [0, 2]
