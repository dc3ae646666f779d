"""Experiment harness: four training modes, cross-validation, checkpoints.

Modes: ``single_a``/``single_b`` train on one site with shared normalization;
``joint`` mixes both sites into each batch and shares one set of BN statistics
(deliberately keeping the estimation problem that motivates per-site norms);
``sepnorm`` feeds per-site sub-batches through per-site BN states; and
``contrastive`` adds the projected-embedding contrastive loss over the union
of both sub-batches, with gradients routed so the projection head is optimized
by the contrastive term alone.

All randomness derives from one run seed: model init uses the seed itself,
batch order uses SeedSequence([seed, 1, epoch]), augmentation a stream from
SeedSequence([seed, 2]), and the head (contrastive only) an integer drawn from
SeedSequence([seed, 3]). Reruns are therefore bit-identical, and sepnorm and
contrastive runs with the same seed see identical batches and augmentation.
"""

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import augment, make_balanced_batches, make_single_batches
from .losses import ContrastiveParams, contrastive_loss, overall_loss
from .metrics import (
    DegenerateDataError,
    METRIC_NAMES,
    MetricsReport,
    aggregate,
    confusion_metrics,
    paired_t_test,
    render_comparison,
    roc_auc,
    write_csv_rows,
)
from .model import ModelConfig, ProjectionHead, build, gradient_partition
from .optim import Adam, ScheduleParams, cosine_annealing

MODES = ("single_a", "single_b", "joint", "sepnorm", "contrastive")
COMPARE_METHODS = ("single", "joint", "sepnorm", "contrastive")


class ConfigError(ValueError):
    """Configuration inconsistent with the requested mode or data."""


class NanLossError(RuntimeError):
    """Training loss became non-finite."""

    def __init__(self, epoch, step, value):
        super().__init__(
            f"non-finite loss {value!r} at epoch {epoch}, step {step}; aborting"
        )
        self.epoch = epoch
        self.step = step


class CheckpointError(ValueError):
    """Checkpoint file malformed or incompatible with the target model."""


@dataclass
class TrainConfig:
    mode: str = "sepnorm"
    epochs: int = 100
    batch_size: int = 32
    lr: float = 1e-4
    lr_min: float = 0.0
    alpha: float = 1.0
    tau: float = 0.05
    denominator_mode: str = "negatives_only"
    seeds: tuple = (0, 1, 2)
    folds: int = 4
    oversample_factor: int = 4
    fold_seed: int = 17
    # default model matches the default sepnorm mode
    model: ModelConfig = field(
        default_factory=lambda: ModelConfig(norm_mode="per_site_dsbn")
    )

    def __post_init__(self):
        self.seeds = tuple(self.seeds)
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if self.folds < 2:
            raise ConfigError(f"folds must be >= 2, got {self.folds}")
        if not self.seeds:
            raise ConfigError("seeds must be non-empty")
        if self.mode in ("sepnorm", "contrastive"):
            if self.model.norm_mode != "per_site_dsbn":
                raise ConfigError(
                    f"{self.mode} mode requires norm_mode=per_site_dsbn, "
                    f"got {self.model.norm_mode!r}"
                )
        elif self.model.norm_mode == "per_site_dsbn":
            raise ConfigError(
                f"{self.mode} mode requires a shared or absent norm, got per_site_dsbn"
            )
        ContrastiveParams(tau=self.tau, denominator_mode=self.denominator_mode)
        ScheduleParams(eta=self.lr, total_epochs=self.epochs, eta_min=self.lr_min)

    def required_sites(self):
        sites = sorted(self.model.sites)
        if self.mode == "single_a":
            return [sites[0]]
        if self.mode == "single_b":
            if len(sites) < 2:
                raise ConfigError("single_b needs a second site in model.sites")
            return [sites[1]]
        if len(sites) < 2:
            raise ConfigError(f"{self.mode} mode needs two sites in model.sites")
        return sites[:2]


def config_snapshot(config):
    snap = dataclasses.asdict(config)
    snap["model"] = dataclasses.asdict(config.model)
    return snap


@dataclass
class RunRecord:
    site_ids: list
    rows: list = field(default_factory=list)

    def site_letter(self, site):
        return chr(ord("A") + self.site_ids.index(site))

    def header(self):
        cols = ["epoch", "lr", "loss_ce", "loss_con", "loss_overall"]
        letters = [self.site_letter(s) for s in self.site_ids]
        cols += [f"auc_site{x}" for x in letters]
        for x in letters:
            cols += [f"{m}_site{x}" for m in ("accuracy", "f1", "recall", "precision")]
        return cols

    def to_csv_text(self):
        def fmt(v):
            return "" if v is None else repr(float(v))

        lines = [",".join(self.header())]
        for row in self.rows:
            cells = [str(row["epoch"]), fmt(row["lr"]), fmt(row["loss_ce"]),
                     fmt(row["loss_con"]), fmt(row["loss_overall"])]
            mets = row["metrics"]
            cells += [fmt(mets.get(s, {}).get("auc")) for s in self.site_ids]
            for s in self.site_ids:
                cells += [
                    fmt(mets.get(s, {}).get(m))
                    for m in ("accuracy", "f1", "recall", "precision")
                ]
            lines.append(",".join(cells))
        return "\n".join(lines) + "\n"

    def save(self, path):
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            f.write(self.to_csv_text())

    def final_metrics(self):
        return self.rows[-1]["metrics"] if self.rows else {}


def _onehot(labels, num_classes):
    return np.eye(num_classes)[labels]


def _augment_batch(x, rng):
    out = np.empty_like(x)
    for i in range(x.shape[0]):
        out[i, 0] = augment(x[i, 0], rng)
    return out


def evaluate(model, ds, site, batch_size=64):
    """Eval-mode metrics (percent) of a model on one site's dataset."""
    scores = []
    labels = []
    with ad.no_grad():
        for i in range(0, len(ds), batch_size):
            x, y = ds.batch(np.arange(i, min(i + batch_size, len(ds))))
            logits, _ = model.forward(Tensor(x), site=site, training=False)
            probs = ad.softmax(logits).data
            scores.append(probs[:, 1])
            labels.append(y)
    scores = np.concatenate(scores)
    labels = np.concatenate(labels)
    out = confusion_metrics(labels, scores)
    auc, _ = roc_auc(labels, scores)
    out["auc"] = 100.0 * auc
    return out


def train(config, datasets, seed=0, out_dir=None):
    """Run one training according to config; returns (Checkpoint, RunRecord).

    ``datasets`` maps "train" (required) and "val" (optional) to {site:
    Dataset}. Sites not required by the mode are never touched. When out_dir
    is given, ``checkpoint.json`` and ``runrecord.csv`` are written there.
    """
    required = config.required_sites()
    train_sets = datasets.get("train", {})
    for s in required:
        if s not in train_sets or len(train_sets[s]) == 0:
            raise ConfigError(f"mode {config.mode} needs non-empty training data for site {s}")
    val_sets = {s: d for s, d in datasets.get("val", {}).items() if s in required and len(d)}

    seed = int(seed)
    model = build(config.model, seed)
    head = None
    if config.mode == "contrastive":
        head_seed = int(np.random.SeedSequence([seed, 3]).generate_state(1)[0])
        head = ProjectionHead(config.model.embedding_dim, config.model.head_dims, head_seed)
    named_params = [("model." + n, p) for n, p in model.parameters()]
    if head is not None:
        named_params += [("head." + n, p) for n, p in head.parameters()]
    opt = Adam(named_params)
    sched = ScheduleParams(eta=config.lr, total_epochs=config.epochs, eta_min=config.lr_min)
    con_params = ContrastiveParams(tau=config.tau, denominator_mode=config.denominator_mode)
    aug_rng = np.random.default_rng(np.random.SeedSequence([seed, 2]))
    record = RunRecord(site_ids=sorted(config.model.sites))
    nc = config.model.num_classes
    two_site = config.mode in ("joint", "sepnorm", "contrastive")
    if two_site and config.batch_size % 2:
        raise ConfigError(f"{config.mode} mode needs an even batch size")

    for epoch in range(config.epochs):
        lr_t = cosine_annealing(epoch, sched)
        epoch_seed = np.random.SeedSequence([seed, 1, epoch])
        if two_site:
            sa, sb = required
            batches = make_balanced_batches(
                train_sets[sa], train_sets[sb], config.batch_size,
                epoch_seed, config.oversample_factor,
            )
        else:
            batches = make_single_batches(train_sets[required[0]], config.batch_size, epoch_seed)
        ce_sum = con_sum = overall_sum = 0.0
        for step, batch in enumerate(batches):
            opt.zero_grad()
            if config.mode in ("single_a", "single_b", "joint"):
                if config.mode == "joint":
                    ia, ib = batch
                    xa, ya = train_sets[sa].batch(ia)
                    xb, yb = train_sets[sb].batch(ib)
                    x = np.concatenate([xa, xb])
                    y = np.concatenate([ya, yb])
                else:
                    x, y = train_sets[required[0]].batch(batch)
                x = _augment_batch(x, aug_rng)
                logits, _ = model.forward(Tensor(x), training=True)
                loss_ce = ad.softmax_cross_entropy(logits, _onehot(y, nc))
                loss_con = None
                overall = loss_ce
                _check_finite(overall, epoch, step)
                overall.backward()
            else:
                ia, ib = batch
                xa, ya = train_sets[sa].batch(ia)
                xb, yb = train_sets[sb].batch(ib)
                xa = _augment_batch(xa, aug_rng)
                xb = _augment_batch(xb, aug_rng)
                logits_a, ea = model.forward(Tensor(xa), site=sa, training=True)
                logits_b, eb = model.forward(Tensor(xb), site=sb, training=True)
                na, nb = len(ya), len(yb)
                loss_ce = (
                    ad.softmax_cross_entropy(logits_a, _onehot(ya, nc)) * float(na)
                    + ad.softmax_cross_entropy(logits_b, _onehot(yb, nc)) * float(nb)
                ) * (1.0 / (na + nb))
                if config.mode == "contrastive":
                    z = head.project(ad.concat_rows([ea, eb]))
                    loss_con = contrastive_loss(z, np.concatenate([ya, yb]), con_params)
                    overall = overall_loss(loss_ce, loss_con, config.alpha)
                    _check_finite(overall, epoch, step)
                    gradient_partition(model, head, loss_ce, loss_con, config.alpha)
                else:
                    loss_con = None
                    overall = loss_ce
                    _check_finite(overall, epoch, step)
                    loss_ce.backward()
            opt.step(lr_t)
            ce_sum += float(loss_ce.data)
            overall_sum += float(overall.data)
            if loss_con is not None:
                con_sum += float(loss_con.data)
        n_steps = len(batches)
        mets = {s: evaluate(model, d, s if config.model.norm_mode == "per_site_dsbn" else None)
                for s, d in val_sets.items()}
        record.rows.append({
            "epoch": epoch,
            "lr": lr_t,
            "loss_ce": ce_sum / n_steps,
            "loss_con": (con_sum / n_steps) if config.mode == "contrastive" else None,
            "loss_overall": overall_sum / n_steps,
            "metrics": mets,
        })

    ck = build_checkpoint(
        model, head, opt, config.epochs, config_snapshot(config),
        {"seed": seed, "augment_state": aug_rng.bit_generator.state},
    )
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        save_checkpoint(ck, out_dir / "checkpoint.json")
        record.save(out_dir / "runrecord.csv")
    return ck, record


def _check_finite(loss, epoch, step):
    v = float(loss.data)
    if not math.isfinite(v):
        raise NanLossError(epoch, step, v)


# -- checkpointing ------------------------------------------------------------

CHECKPOINT_FORMAT = "sitenet-checkpoint-v1"


@dataclass
class Checkpoint:
    epoch: int
    config: dict
    params: dict
    stats: dict
    optimizer: dict
    rng: dict


def _entry(arr):
    return {"shape": list(arr.shape), "values": arr.ravel().tolist()}


def _from_entry(name, entry):
    try:
        shape = tuple(int(s) for s in entry["shape"])
        values = entry["values"]
    except (KeyError, TypeError, ValueError):
        raise CheckpointError(f"entry {name!r} is malformed") from None
    n = int(np.prod(shape)) if shape else 1
    if len(values) != n:
        raise CheckpointError(
            f"entry {name!r}: shape {list(shape)} wants {n} values, got {len(values)}"
        )
    return np.array(values, dtype=np.float64).reshape(shape)


def build_checkpoint(model, head, opt, epoch, config_snap, rng_payload):
    params = {"model." + n: p.data.copy() for n, p in model.parameters()}
    if head is not None:
        params.update({"head." + n: p.data.copy() for n, p in head.parameters()})
    stats = {}
    for name, st in model.norm_states():
        stats[f"model.{name}.running_mean"] = st.running_mean.copy()
        stats[f"model.{name}.running_var"] = st.running_var.copy()
    optimizer = {
        "t": opt.t,
        "m": {n: a.copy() for n, a in opt.m.items()},
        "v": {n: a.copy() for n, a in opt.v.items()},
    }
    return Checkpoint(epoch=int(epoch), config=config_snap, params=params,
                      stats=stats, optimizer=optimizer, rng=rng_payload)


def save_checkpoint(ck, path):
    doc = {
        "format": CHECKPOINT_FORMAT,
        "epoch": ck.epoch,
        "config": ck.config,
        "params": {n: _entry(a) for n, a in ck.params.items()},
        "stats": {n: _entry(a) for n, a in ck.stats.items()},
        "optimizer": {
            "t": ck.optimizer["t"],
            "m": {n: _entry(a) for n, a in ck.optimizer["m"].items()},
            "v": {n: _entry(a) for n, a in ck.optimizer["v"].items()},
        },
        "rng": ck.rng,
    }
    text = json.dumps(doc, sort_keys=True, separators=(",", ":"))
    try:
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            f.write(text + "\n")
    except OSError as exc:
        raise OSError(f"failed writing checkpoint {path}: {exc}") from exc


def load_checkpoint(path):
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    with open(path, encoding="utf-8") as f:
        try:
            doc = json.load(f)
        except json.JSONDecodeError as exc:
            raise CheckpointError(f"{path}: not valid JSON: {exc}") from None
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(
            f"{path}: unknown checkpoint format {doc.get('format')!r}"
        )
    params = {n: _from_entry(n, e) for n, e in doc["params"].items()}
    stats = {n: _from_entry(n, e) for n, e in doc["stats"].items()}
    optimizer = {
        "t": int(doc["optimizer"]["t"]),
        "m": {n: _from_entry(n, e) for n, e in doc["optimizer"]["m"].items()},
        "v": {n: _from_entry(n, e) for n, e in doc["optimizer"]["v"].items()},
    }
    return Checkpoint(epoch=int(doc["epoch"]), config=doc["config"], params=params,
                      stats=stats, optimizer=optimizer, rng=doc.get("rng", {}))


def restore(model, head, ck):
    """Load checkpoint arrays into a built model (and head, when given).

    Every name/shape mismatch is collected and reported together.
    """
    problems = []
    targets = {"model." + n: p for n, p in model.parameters()}
    if head is not None:
        targets.update({"head." + n: p for n, p in head.parameters()})
    for name, p in targets.items():
        if name not in ck.params:
            problems.append(f"missing parameter {name}")
        elif ck.params[name].shape != p.data.shape:
            problems.append(
                f"parameter {name}: checkpoint {ck.params[name].shape} vs model {p.data.shape}"
            )
    for name in ck.params:
        if name not in targets:
            problems.append(f"unexpected parameter {name}")
    stat_targets = {}
    for name, st in model.norm_states():
        stat_targets[f"model.{name}.running_mean"] = st
        stat_targets[f"model.{name}.running_var"] = st
    for name in stat_targets:
        if name not in ck.stats:
            problems.append(f"missing statistic {name}")
        elif ck.stats[name].shape != (stat_targets[name].num_channels,):
            problems.append(f"statistic {name}: bad shape {ck.stats[name].shape}")
    for name in ck.stats:
        if name not in stat_targets:
            problems.append(f"unexpected statistic {name}")
    if problems:
        raise CheckpointError("checkpoint incompatible: " + "; ".join(sorted(problems)))
    for name, p in targets.items():
        p.data = ck.params[name].copy()
    for name, st in model.norm_states():
        st.running_mean = ck.stats[f"model.{name}.running_mean"].copy()
        st.running_var = ck.stats[f"model.{name}.running_var"].copy()


# -- cross-validation and comparison ------------------------------------------

def stratified_fold_ids(labels, n_folds, rng):
    """Per-sample fold ids, class-stratified; sizes differ by <= 1 per class."""
    fold_of = np.empty(len(labels), dtype=np.int64)
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        idx = idx[rng.permutation(len(idx))]
        fold_of[idx] = np.arange(len(idx)) % n_folds
    return fold_of


def make_fold_splits(datasets, n_folds, fold_seed):
    """Deterministic per-site stratified folds over {site: Dataset}.

    Returns [(train_map, val_map), ...] of {site: Dataset} pairs, rejecting any
    fold that leaves a single class on either side for any site.
    """
    fold_ids = {}
    for site in sorted(datasets):
        rng = np.random.default_rng(np.random.SeedSequence([int(fold_seed), int(site)]))
        fold_ids[site] = stratified_fold_ids(datasets[site].labels, n_folds, rng)
    splits = []
    for f in range(n_folds):
        train_map, val_map = {}, {}
        for site, ds in datasets.items():
            val_idx = np.flatnonzero(fold_ids[site] == f)
            train_idx = np.flatnonzero(fold_ids[site] != f)
            for name, idx in (("training", train_idx), ("validation", val_idx)):
                classes = np.unique(ds.labels[idx])
                if len(classes) < 2:
                    raise DegenerateDataError(
                        f"fold {f}, site {site}: {name} split has a single class"
                    )
            train_map[site] = ds.select(train_idx)
            val_map[site] = ds.select(val_idx)
        splits.append((train_map, val_map))
    return splits


@dataclass
class CellResult:
    method: str
    fold: int
    seed: int
    metrics: dict  # {site: {metric: value}}, final epoch
    records: dict  # {label: RunRecord}
    error: str = ""


def _mode_config(config, mode):
    norm = "per_site_dsbn" if mode in ("sepnorm", "contrastive") else "shared_bn"
    model = dataclasses.replace(config.model, norm_mode=norm)
    return dataclasses.replace(config, mode=mode, model=model)


def run_cross_validation(config, datasets):
    """Train config.mode on every (fold, seed) cell; returns CellResults.

    ``datasets`` is {site: Dataset} over the full data; folds are stratified
    per site with the config's fold_seed, so every mode sees the same splits.
    """
    splits = make_fold_splits(datasets, config.folds, config.fold_seed)
    method = "single" if config.mode.startswith("single_") else config.mode
    results = []
    for fold, (train_map, val_map) in enumerate(splits):
        for seed in config.seeds:
            cell = {"train": train_map, "val": val_map}
            try:
                _, record = train(config, cell, seed=seed)
                results.append(CellResult(
                    method=method, fold=fold, seed=seed,
                    metrics=record.final_metrics(), records={config.mode: record},
                ))
            except (NanLossError,) as exc:
                results.append(CellResult(
                    method=method, fold=fold, seed=seed, metrics={},
                    records={}, error=str(exc),
                ))
    return results


@dataclass
class ComparisonResult:
    reports: dict  # method -> MetricsReport or None
    pvalues: dict  # (baseline, site) -> p or None
    cells: list
    table_text: str
    table_rows: list


def compare(config, datasets):
    """Run all four methods over shared folds/seeds and aggregate a comparison.

    The single-site method trains one model per site and merges their per-site
    metrics into one row. Failed cells are recorded and skipped; a method with
    no finished cell renders as FAILED. The contrastive method is paired
    against each baseline per (fold, seed) cell with a t-test on site AUC.
    """
    splits = make_fold_splits(datasets, config.folds, config.fold_seed)
    sites = sorted(datasets)
    cells = []
    for method in COMPARE_METHODS:
        for fold, (train_map, val_map) in enumerate(splits):
            for seed in config.seeds:
                data_maps = {"train": train_map, "val": val_map}
                try:
                    if method == "single":
                        merged, records = {}, {}
                        for mode in ("single_a", "single_b"):
                            cfg = _mode_config(config, mode)
                            _, rec = train(cfg, data_maps, seed=seed)
                            merged.update(rec.final_metrics())
                            records[mode] = rec
                        cells.append(CellResult(method, fold, seed, merged, records))
                    else:
                        cfg = _mode_config(config, method)
                        _, rec = train(cfg, data_maps, seed=seed)
                        cells.append(CellResult(
                            method, fold, seed, rec.final_metrics(), {method: rec},
                        ))
                except NanLossError as exc:
                    cells.append(CellResult(method, fold, seed, {}, {}, error=str(exc)))

    reports = {}
    for method in COMPARE_METHODS:
        done = [c.metrics for c in cells if c.method == method and not c.error]
        reports[method] = aggregate(done) if done else None

    pvalues = {}
    by_cell = {(c.method, c.fold, c.seed): c for c in cells}
    for baseline in ("single", "joint", "sepnorm"):
        for site in sites:
            ours, theirs = [], []
            for fold in range(config.folds):
                for seed in config.seeds:
                    c = by_cell.get(("contrastive", fold, seed))
                    b = by_cell.get((baseline, fold, seed))
                    if c and b and not c.error and not b.error:
                        ours.append(c.metrics[site]["auc"])
                        theirs.append(b.metrics[site]["auc"])
            if len(ours) >= 2:
                try:
                    pvalues[(baseline, site)] = paired_t_test(ours, theirs)
                except DegenerateDataError:
                    pvalues[(baseline, site)] = None
            else:
                pvalues[(baseline, site)] = None

    site_names = {s: f"site{chr(ord('A') + i)}" for i, s in enumerate(sites)}
    table_text, table_rows = render_comparison(reports, site_names)
    return ComparisonResult(reports, pvalues, cells, table_text, table_rows)


def write_comparison(result, out_dir):
    """Write comparison tables, p-values, and per-cell records; returns paths."""
    out_dir = Path(out_dir)
    records_dir = out_dir / "records"
    records_dir.mkdir(parents=True, exist_ok=True)
    written = []

    path = out_dir / "comparison.txt"
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(result.table_text)
        f.write("\npaired t-test on AUC, contrastive vs baseline:\n")
        for (baseline, site), p in sorted(result.pvalues.items()):
            shown = "n/a" if p is None else f"{p:.4g}"
            f.write(f"  {baseline} @ site{site}: p = {shown}\n")
        failed = [c for c in result.cells if c.error]
        if failed:
            f.write("\nfailed cells:\n")
            for c in failed:
                f.write(f"  {c.method} fold {c.fold} seed {c.seed}: {c.error}\n")
    written.append(path)

    path = out_dir / "comparison.csv"
    write_csv_rows(result.table_rows, path)
    written.append(path)

    path = out_dir / "pvalues.csv"
    rows = [["baseline", "site", "p_value"]]
    for (baseline, site), p in sorted(result.pvalues.items()):
        rows.append([baseline, str(site), "" if p is None else repr(p)])
    write_csv_rows(rows, path)
    written.append(path)

    for c in result.cells:
        for label, rec in c.records.items():
            path = records_dir / f"{label}_fold{c.fold}_seed{c.seed}.csv"
            rec.save(path)
            written.append(path)
    return written
