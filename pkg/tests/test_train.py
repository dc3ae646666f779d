"""Training harness: determinism, checkpoints, folds, and the comparison."""

import dataclasses
import json

import numpy as np
import pytest

from sitenet.model import ModelConfig, build
from sitenet.train import (
    CheckpointError,
    ConfigError,
    NanLossError,
    RunRecord,
    TrainConfig,
    _mode_config,
    compare,
    evaluate,
    load_checkpoint,
    make_fold_splits,
    restore,
    run_cross_validation,
    save_checkpoint,
    stratified_fold_ids,
    train,
    write_comparison,
)


def tiny_model(norm_mode):
    return ModelConfig(stem_channels=2, upper_channels=(2, 2, 2, 4),
                       lower_blocks=2, block_layers=1, growth=2,
                       head_dims=(8, 4), norm_mode=norm_mode)


def tiny_config(mode="sepnorm", **overrides):
    norm = "per_site_dsbn" if mode in ("sepnorm", "contrastive") else "shared_bn"
    kw = dict(mode=mode, epochs=2, batch_size=4, lr=1e-3, seeds=(0,), folds=2,
              model=tiny_model(norm))
    kw.update(overrides)
    return TrainConfig(**kw)


@pytest.fixture(scope="module")
def split(two_site_datasets):
    train_map, val_map = make_fold_splits(two_site_datasets, 2, fold_seed=17)[0]
    return {"train": train_map, "val": val_map}


def test_config_mode_norm_coupling():
    with pytest.raises(ConfigError):
        TrainConfig(mode="sepnorm", model=tiny_model("shared_bn"))
    with pytest.raises(ConfigError):
        TrainConfig(mode="contrastive", model=tiny_model("none"))
    with pytest.raises(ConfigError):
        TrainConfig(mode="joint", model=tiny_model("per_site_dsbn"))
    with pytest.raises(ConfigError):
        tiny_config(mode="warmup")
    with pytest.raises(ConfigError):
        tiny_config(folds=1)
    with pytest.raises(ConfigError):
        tiny_config(seeds=())
    with pytest.raises(ValueError):
        tiny_config(tau=0.0)
    # defaults are self-consistent
    TrainConfig()


def test_required_sites():
    assert tiny_config("single_a").required_sites() == [0]
    assert tiny_config("single_b").required_sites() == [1]
    assert tiny_config("joint").required_sites() == [0, 1]


def test_train_returns_full_record(split):
    cfg = tiny_config("sepnorm")
    ck, record = train(cfg, split, seed=0)
    assert len(record.rows) == cfg.epochs
    row = record.rows[-1]
    assert row["loss_con"] is None
    assert set(row["metrics"]) == {0, 1}
    assert 0.0 <= row["metrics"][0]["auc"] <= 100.0
    assert ck.epoch == cfg.epochs
    assert ck.rng["seed"] == 0
    # csv has the documented header and one line per epoch
    text = record.to_csv_text()
    lines = text.splitlines()
    assert lines[0].startswith("epoch,lr,loss_ce,loss_con,loss_overall,auc_siteA,auc_siteB")
    assert len(lines) == 1 + cfg.epochs
    assert lines[1].split(",")[3] == ""  # loss_con empty outside contrastive


def test_reruns_are_bit_identical(split, tmp_path):
    cfg = tiny_config("contrastive", alpha=0.7)
    outs = []
    for d in ("a", "b"):
        out = tmp_path / d
        train(cfg, split, seed=3, out_dir=out)
        outs.append(out)
    ck_a = (outs[0] / "checkpoint.json").read_bytes()
    ck_b = (outs[1] / "checkpoint.json").read_bytes()
    assert ck_a == ck_b
    assert (outs[0] / "runrecord.csv").read_bytes() == (outs[1] / "runrecord.csv").read_bytes()
    # a different seed changes the outcome
    out_c = tmp_path / "c"
    train(cfg, split, seed=4, out_dir=out_c)
    assert (out_c / "checkpoint.json").read_bytes() != ck_a


def test_alpha_zero_equals_sepnorm_bit_exact(split):
    ck_sep, _ = train(tiny_config("sepnorm"), split, seed=1)
    ck_con, _ = train(tiny_config("contrastive", alpha=0.0), split, seed=1)
    model_keys = [k for k in ck_con.params if k.startswith("model.")]
    assert set(model_keys) == set(ck_sep.params)
    for k in model_keys:
        assert np.array_equal(ck_sep.params[k], ck_con.params[k]), k
    for k in ck_sep.stats:
        assert np.array_equal(ck_sep.stats[k], ck_con.stats[k]), k


def test_joint_and_single_modes_run(split):
    for mode in ("joint", "single_a", "single_b"):
        cfg = tiny_config(mode)
        ck, record = train(cfg, split, seed=0)
        sites = set(record.rows[-1]["metrics"])
        if mode == "joint":
            assert sites == {0, 1}
        else:
            assert sites == {0 if mode == "single_a" else 1}


def test_missing_site_data_rejected(split):
    cfg = tiny_config("joint")
    only_a = {"train": {0: split["train"][0]}, "val": {}}
    with pytest.raises(ConfigError):
        train(cfg, only_a, seed=0)
    with pytest.raises(ConfigError):
        train(tiny_config("sepnorm", batch_size=5), split, seed=0)  # odd batch


@pytest.mark.filterwarnings("ignore:invalid value encountered")
def test_nan_loss_aborts_with_location(split):
    from sitenet.data import Dataset

    src = split["train"][0]
    bad = Dataset(src.images.copy(), src.raw, src.labels, src.sites,
                  src.paths, src.mask_paths)
    bad.images[:] = np.inf  # poisoned activations reach the loss as NaN
    data = {"train": {0: bad, 1: split["train"][1]}, "val": {}}
    with pytest.raises(NanLossError) as exc:
        train(tiny_config("sepnorm", epochs=1), data, seed=0)
    assert exc.value.epoch == 0 and exc.value.step == 0
    assert "epoch 0" in str(exc.value) and "step 0" in str(exc.value)


def test_checkpoint_round_trip_is_byte_identical(split, tmp_path):
    cfg = tiny_config("contrastive")
    train(cfg, split, seed=2, out_dir=tmp_path)
    p1 = tmp_path / "checkpoint.json"
    ck = load_checkpoint(p1)
    p2 = tmp_path / "again.json"
    save_checkpoint(ck, p2)
    assert p1.read_bytes() == p2.read_bytes()
    # config snapshot embeds the full model config
    assert ck.config["model"]["norm_mode"] == "per_site_dsbn"
    assert ck.config["alpha"] == 1.0


def test_restore_reproduces_outputs(split, tmp_path):
    cfg = tiny_config("sepnorm")
    train(cfg, split, seed=5, out_dir=tmp_path)
    ck = load_checkpoint(tmp_path / "checkpoint.json")
    m1 = build(cfg.model, seed=5)
    m2 = build(cfg.model, seed=99)  # different init, then overwritten
    restore(m1, None, ck)
    restore(m2, None, ck)
    val = split["val"][0]
    e1 = evaluate(m1, val, 0)
    e2 = evaluate(m2, val, 0)
    assert e1 == e2


def test_restore_rejects_mismatched_shapes(split):
    cfg = tiny_config("sepnorm")
    ck, _ = train(cfg, split, seed=0)
    other = build(tiny_model("per_site_dsbn"), seed=0)
    other.classifier_w.data = np.zeros((3, 2))
    with pytest.raises(CheckpointError, match="classifier"):
        restore(other, None, ck)
    wrong_arch = build(ModelConfig(norm_mode="per_site_dsbn"), seed=0)
    with pytest.raises(CheckpointError):
        restore(wrong_arch, None, ck)


def test_load_checkpoint_rejects_garbage(tmp_path):
    p = tmp_path / "ck.json"
    p.write_text("not json")
    with pytest.raises(CheckpointError):
        load_checkpoint(p)
    p.write_text(json.dumps({"format": "other"}))
    with pytest.raises(CheckpointError):
        load_checkpoint(p)
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "missing.json")


def test_stratified_folds_are_balanced():
    rng = np.random.default_rng(0)
    labels = np.array([0] * 10 + [1] * 14)
    ids = stratified_fold_ids(labels, 4, rng)
    for f in range(4):
        per_class = [(ids[labels == c] == f).sum() for c in (0, 1)]
        assert per_class[0] in (2, 3) and per_class[1] in (3, 4)


def test_make_fold_splits_deterministic(two_site_datasets):
    s1 = make_fold_splits(two_site_datasets, 2, fold_seed=7)
    s2 = make_fold_splits(two_site_datasets, 2, fold_seed=7)
    for (t1, v1), (t2, v2) in zip(s1, s2):
        for site in (0, 1):
            assert t1[site].paths == t2[site].paths
            assert v1[site].paths == v2[site].paths
    # folds partition each site's data
    t1, v1 = s1[0]
    assert len(t1[0]) + len(v1[0]) == len(two_site_datasets[0])


def test_mode_config_derives_norm():
    base = tiny_config("sepnorm")
    assert _mode_config(base, "joint").model.norm_mode == "shared_bn"
    assert _mode_config(base, "contrastive").model.norm_mode == "per_site_dsbn"
    assert _mode_config(base, "single_a").mode == "single_a"


def test_run_cross_validation_cells(two_site_datasets):
    cfg = tiny_config("sepnorm", epochs=1)
    cells = run_cross_validation(cfg, two_site_datasets)
    assert len(cells) == 2  # 2 folds x 1 seed
    assert all(c.method == "sepnorm" and not c.error for c in cells)
    assert all(set(c.metrics) == {0, 1} for c in cells)


def test_compare_runs_all_methods(two_site_datasets, tmp_path):
    cfg = tiny_config("sepnorm", epochs=1, seeds=(0,))
    result = compare(cfg, two_site_datasets)
    assert set(result.reports) == {"single", "joint", "sepnorm", "contrastive"}
    assert all(rep is not None for rep in result.reports.values())
    # 4 methods x 2 folds x 1 seed
    assert len(result.cells) == 8
    assert set(result.pvalues) == {
        (b, s) for b in ("single", "joint", "sepnorm") for s in (0, 1)
    }
    assert "method" in result.table_text
    assert "+Contrastive" in result.table_text

    written = write_comparison(result, tmp_path)
    names = {p.name for p in written}
    assert {"comparison.txt", "comparison.csv", "pvalues.csv"} <= names
    # per-cell records include both single-site trainings
    rec_names = {p.name for p in written if p.parent.name == "records"}
    assert "single_a_fold0_seed0.csv" in rec_names
    assert "contrastive_fold1_seed0.csv" in rec_names
    assert (tmp_path / "comparison.txt").read_text().startswith("method")


def test_evaluate_metrics_are_percent(split):
    model = build(tiny_model("per_site_dsbn"), seed=0)
    out = evaluate(model, split["val"][0], 0)
    assert set(out) == {"accuracy", "precision", "recall", "f1", "precision_defined", "auc"}
    assert 0.0 <= out["auc"] <= 100.0
