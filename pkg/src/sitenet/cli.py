"""Command line entry point.

Subcommands: ``gen-data`` renders synthetic sites from a spec file, ``train``
runs one configured training, ``compare`` runs the four-method cross-validated
comparison, and ``cam`` writes saliency overlays for a trained checkpoint.
Exit codes: 0 success, 2 config or usage error, 3 I/O error, 4 numerical
failure. Each command writes an ``artifacts.json`` listing the files it
produced, relative to its output directory.
"""

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .config import parse_experiment_config, parse_gen_spec
from .data import (
    ManifestError,
    generate_site,
    load_manifest,
    read_pgm,
    resize_bilinear,
    write_manifest,
)
from .metrics import DegenerateDataError
from .model import BuildError, ModelConfig, ProjectionHead, build
from .optim import OptimError
from .saliency import export_overlay, grad_cam, lesion_mass_ratio
from .train import (
    CheckpointError,
    ConfigError,
    NanLossError,
    compare,
    load_checkpoint,
    make_fold_splits,
    restore,
    train,
    write_comparison,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_NUMERIC = 4


def _write_artifacts(out_dir, command, files):
    out_dir = Path(out_dir)
    rel = sorted(
        str(Path(f).resolve().relative_to(out_dir.resolve())) for f in files
    )
    path = out_dir / "artifacts.json"
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        json.dump({"command": command, "files": rel}, f, indent=2, sort_keys=True)
        f.write("\n")
    return path


def _generate_sites(recipes, out_dir, seed_override=None):
    """Render every site recipe into out_dir; returns (rows, written files)."""
    out_dir = Path(out_dir)
    all_rows = []
    files = []
    for r in recipes:
        seed = r.seed if seed_override is None else int(seed_override) + r.site_id
        rows = generate_site(
            r.spec, r.n_per_class, seed, out_dir,
            site_id=r.site_id, write_manifest_file=False,
        )
        all_rows.extend(rows)
        for p, label, _ in rows:
            files.append(out_dir / p)
            if label == 1:
                files.append(out_dir / p.replace("images/", "masks/", 1))
    manifest = out_dir / "manifest.csv"
    write_manifest(manifest, all_rows)
    files.append(manifest)
    return all_rows, files


def _ensure_data(cfg):
    """Return (data root, files generated now). Reuses an existing manifest."""
    if cfg.data_dir is not None:
        manifest = Path(cfg.data_dir) / "manifest.csv"
        if not manifest.is_file():
            raise ConfigError(f"data.dir has no manifest.csv: {cfg.data_dir}")
        return Path(cfg.data_dir), []
    data_dir = cfg.out / "data"
    if (data_dir / "manifest.csv").is_file():
        return data_dir, []
    data_dir.mkdir(parents=True, exist_ok=True)
    _, files = _generate_sites(cfg.recipes, data_dir)
    return data_dir, files


def _site_datasets(data_root, input_size):
    ds = load_manifest(Path(data_root) / "manifest.csv", input_size=input_size)
    return ds.split_by_site()


def cmd_gen_data(args):
    recipes = parse_gen_spec(args.spec)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows, files = _generate_sites(recipes, out, seed_override=args.seed)
    for r in recipes:
        n = sum(1 for _, _, s in rows if s == r.site_id)
        print(f"site {r.site_id}: {n} images ({r.n_per_class} per class)")
    print(f"wrote {len(rows)} manifest rows to {out / 'manifest.csv'}")
    _write_artifacts(out, "gen-data", files)
    return EXIT_OK


def cmd_train(args):
    cfg = parse_experiment_config(args.config)
    tc = cfg.make_train_config(mode=args.mode, seed=args.seed)
    cfg.out.mkdir(parents=True, exist_ok=True)
    data_root, gen_files = _ensure_data(cfg)
    per_site = _site_datasets(data_root, tc.model.input_size)

    # fold 0 of the configured split is held out so final metrics are honest
    train_map, val_map = make_fold_splits(per_site, tc.folds, tc.fold_seed)[0]
    seed = tc.seeds[0]
    _, record = train(tc, {"train": train_map, "val": val_map}, seed=seed, out_dir=cfg.out)

    final = record.final_metrics()
    parts = [
        f"site{s} auc={m['auc']:.2f} acc={m['accuracy']:.2f} f1={m['f1']:.2f}"
        for s, m in sorted(final.items())
    ]
    print(f"final mode={tc.mode} seed={seed}: " + " | ".join(parts))
    files = gen_files + [cfg.out / "checkpoint.json", cfg.out / "runrecord.csv"]
    _write_artifacts(cfg.out, "train", files)
    return EXIT_OK


def cmd_compare(args):
    cfg = parse_experiment_config(args.config)
    base = cfg.make_train_config()
    if args.seed is not None:
        base = dataclasses.replace(
            base, seeds=tuple(int(args.seed) + i for i in range(len(base.seeds)))
        )
    cfg.out.mkdir(parents=True, exist_ok=True)
    data_root, gen_files = _ensure_data(cfg)
    per_site = _site_datasets(data_root, base.model.input_size)

    result = compare(base, per_site)
    written = write_comparison(result, cfg.out)
    print(result.table_text, end="")
    for (baseline, site), p in sorted(result.pvalues.items()):
        shown = "n/a" if p is None else f"{p:.4g}"
        print(f"p(auc, contrastive vs {baseline}) @ site{site}: {shown}")
    failed = [c for c in result.cells if c.error]
    if failed:
        print(f"{len(failed)} of {len(result.cells)} cells failed", file=sys.stderr)
    _write_artifacts(cfg.out, "compare", gen_files + written)
    return EXIT_NUMERIC if len(failed) == len(result.cells) else EXIT_OK


def _model_from_checkpoint(ck):
    mc_dict = ck.config.get("model") if isinstance(ck.config, dict) else None
    if not isinstance(mc_dict, dict):
        raise CheckpointError("checkpoint config has no model section")
    try:
        mc = ModelConfig(**mc_dict)
    except TypeError as exc:
        raise CheckpointError(f"checkpoint model config is malformed: {exc}") from None
    model = build(mc, seed=0)
    head = None
    if any(name.startswith("head.") for name in ck.params):
        head = ProjectionHead(mc.embedding_dim, mc.head_dims, seed=0)
    restore(model, head, ck)
    return mc, model


def cmd_cam(args):
    ck = load_checkpoint(args.checkpoint)
    mc, model = _model_from_checkpoint(ck)
    ds = load_manifest(args.images, input_size=mc.input_size)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    files = []
    lines = []
    ratios = []  # (ratio, correct positive?) for images with usable masks
    h, w = mc.input_size
    for i in range(len(ds)):
        site = int(ds.sites[i]) if mc.norm_mode == "per_site_dsbn" else None
        img = ds.images[i]
        with ad.no_grad():
            logits, _ = model.forward(Tensor(img[None, None]), site=site, training=False)
        pred = int(np.argmax(logits.data[0]))
        smap = grad_cam(model, img, site, pred)
        ppm = out / f"cam_{Path(ds.paths[i]).stem}.ppm"
        export_overlay(smap, ds.raw[i], ppm)
        files.append(ppm)
        label = int(ds.labels[i])
        line = f"{ds.paths[i].name} label={label} pred={pred} degenerate={smap.degenerate}"
        if ds.mask_paths[i] is not None:
            mask = resize_bilinear(read_pgm(ds.mask_paths[i]), h, w) > 0.5
            if mask.any() and not mask.all():
                ratio = lesion_mass_ratio(smap.overlay, mask)
                ratios.append((ratio, label == 1 and pred == 1))
                line += f" mass_ratio={ratio:.4f}"
        lines.append(line)

    summary = out / "summary.txt"
    with open(summary, "w", encoding="utf-8", newline="\n") as f:
        f.write("\n".join(lines) + "\n")
        if ratios:
            hits = [r for r, ok in ratios if ok]
            focused = sum(1 for r in hits if r >= 2.0)
            f.write(
                f"\ncorrectly classified positives with masks: {len(hits)}\n"
            )
            if hits:
                finite = [r for r in hits if np.isfinite(r)]
                mean = sum(finite) / len(finite) if finite else float("nan")
                f.write(f"mass ratio >= 2.0: {focused}/{len(hits)}\n")
                f.write(f"mean finite mass ratio: {mean:.4f}\n")
    files.append(summary)
    print(f"wrote {len(files) - 1} overlays and summary.txt to {out}")
    _write_artifacts(out, "cam", files)
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(
        prog="sitenet",
        description="two-site training experiments on synthetic imaging data",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="render synthetic site images from a spec")
    g.add_argument("--spec", required=True, help="key=value site spec file")
    g.add_argument("--out", required=True, help="output directory")
    g.add_argument("--seed", type=int, default=None,
                   help="override spec seeds (site i uses seed + i)")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="run one training from an experiment config")
    t.add_argument("--config", required=True, help="experiment config file")
    t.add_argument("--mode", default=None,
                   choices=["single-a", "single-b", "joint", "sepnorm", "contrastive"],
                   help="override the configured training mode")
    t.add_argument("--seed", type=int, default=None, help="override the run seed")
    t.set_defaults(func=cmd_train)

    c = sub.add_parser("compare", help="cross-validated four-method comparison")
    c.add_argument("--config", required=True, help="experiment config file")
    c.add_argument("--seed", type=int, default=None,
                   help="rebase the seed list (seed, seed+1, ...)")
    c.set_defaults(func=cmd_compare)

    m = sub.add_parser("cam", help="saliency overlays for a trained checkpoint")
    m.add_argument("--checkpoint", required=True, help="checkpoint.json path")
    m.add_argument("--images", required=True, help="manifest CSV of images to explain")
    m.add_argument("--out", required=True, help="output directory")
    m.set_defaults(func=cmd_cam)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code else EXIT_OK
    try:
        return args.func(args)
    except (ConfigError, CheckpointError, ManifestError, BuildError,
            DegenerateDataError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NanLossError, OptimError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
