"""Command-line entry point: prepare, train, evaluate, sweep, crossval, plot."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import build_model_configs, config_hash, dump_config, load_config, sweep_config
from .data import (
    DatasetManifest, ManifestRecord, MnistBagsSpec, PatchSpec, fold_split, generate_mnist_bags,
    image_to_bag, load_digit_pool, make_folds, read_centers, save_bag, scan_colon_directory,
)
from .experiments import evaluate_model, render_table, results_table, run_cross_validation, run_vat_sweep, table_to_tsv
from .model import load_checkpoint, parameter_digest, save_checkpoint
from .plotting import SeriesParseError, plot_loss_curves, plot_sweep, read_loss_log, read_sweep_series
from .training import TrainingError, train_student, train_teacher
from .types import ConfigError

log = logging.getLogger("distill_mil")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_TRAINING, EXIT_EXISTS, EXIT_INTERRUPTED = 0, 2, 3, 4, 5, 130


class OutputExists(Exception):
    pass


# --------------------------------------------------------------------------- helpers


def _out_dir(cfg, args) -> Path:
    return Path(args.out or cfg["output_dir"])


def _provenance(cfg, seed=None) -> dict:
    return {"config_hash": config_hash(cfg), "seed": seed, "version": __version__}


def _header(prov: dict) -> str:
    return "# " + " ".join(f"{k}={v}" for k, v in prov.items()) + "\n"


def _seeds(cfg, args) -> list:
    if getattr(args, "seed", None):
        try:
            return [int(s) for s in args.seed.split(",")]
        except ValueError:
            raise ConfigError(f"--seed expects comma-separated integers, got {args.seed!r}") from None
    return list(cfg["training"]["seeds"])


def _manifest_path(out: Path) -> Path:
    return out / "data" / "manifest.jsonl"


def _load_dataset(out: Path):
    path = _manifest_path(out)
    if not path.exists():
        raise FileNotFoundError(f"{path} not found; run `distill-mil prepare` first")
    manifest = DatasetManifest.load(path)
    return manifest, manifest.load_bags(path.parent)


def _split(cfg, manifest, seed):
    labels = manifest.labels
    folds = np.array([r.fold for r in manifest.records])
    return fold_split(labels, folds, cfg["training"]["test_fold"], seed, manifest.split)


def _read_image(path):
    from PIL import Image

    return np.asarray(Image.open(path).convert("RGB"))


# --------------------------------------------------------------------------- commands


def cmd_prepare(cfg, args) -> int:
    out = _out_dir(cfg, args)
    mpath = _manifest_path(out)
    if mpath.exists() and not args.force:
        raise OutputExists(f"{mpath} exists; pass --force to overwrite")
    ds = cfg["dataset"]
    k = cfg["training"]["folds"]
    bags = []
    if ds["kind"] == "mnist_bags":
        pool = load_digit_pool(ds["digit_source"], ds["digit_path"])
        spec = MnistBagsSpec(ds["num_bags"], ds["mean_bag_size"], ds["bag_size_variance"],
                             ds["positive_digit"], ds["seed"])
        bags = generate_mnist_bags(spec, pool)
        sources = [f"{ds['digit_source']}:seed={ds['seed']}"] * len(bags)
        centers_src = [None] * len(bags)
    elif ds["kind"] in ("colon_dir", "manifest"):
        if ds["kind"] == "colon_dir":
            if not ds["root"]:
                raise ConfigError("dataset.root is required for colon_dir")
            records = scan_colon_directory(ds["root"])
        else:
            if not ds["manifest"]:
                raise ConfigError("dataset.manifest is required for kind 'manifest'")
            records = DatasetManifest.load(ds["manifest"]).records
        pspec = PatchSpec(ds["patch_size"], ds["stride"], ds["white_threshold"], ds["white_fraction_cutoff"])
        sources, centers_src = [], []
        for r in records:
            centers = read_centers(r.instance_labels) if r.instance_labels else None
            bags.append(image_to_bag(_read_image(r.source), r.label, pspec, r.bag_id, centers))
            sources.append(r.source)
            centers_src.append(r.instance_labels)
    else:
        raise ConfigError(f"unknown dataset.kind {ds['kind']!r}")

    folds = make_folds([b.label for b in bags], k, ds["seed"])
    records = []
    for b, src, cen, f in zip(bags, sources, centers_src, folds):
        archive = f"bags/{b.bag_id}.npz"
        save_bag(mpath.parent / archive, b)
        records.append(ManifestRecord(b.bag_id, src, b.label, cen, int(f), archive))
    manifest = DatasetManifest(records, {"dataset": ds, "folds": k})
    manifest.save(mpath)
    sizes = [len(b) for b in bags]
    print(f"{len(bags)} bags, positive fraction {np.mean([b.label for b in bags]):.3f}, "
          f"mean bag size {np.mean(sizes):.2f} -> {mpath}")
    return EXIT_OK


def _write_log(path: Path):
    path.parent.mkdir(parents=True, exist_ok=True)
    fh = path.open("w")

    def on_epoch(rec):
        fh.write(json.dumps(rec, sort_keys=True) + "\n")
        fh.flush()

    return fh, on_epoch


def cmd_train(cfg, args) -> int:
    out = _out_dir(cfg, args)
    manifest, bags = _load_dataset(out)
    stages = {"both": ("teacher", "student"), "teacher": ("teacher",), "student": ("student",),
              "baseline": ("baseline",)}[args.stage]
    for seed in _seeds(cfg, args):
        mc = build_model_configs(cfg, seed)
        run = out / "runs" / f"seed{seed}"
        run.mkdir(parents=True, exist_ok=True)
        (run / "config.yaml").write_text(dump_config(cfg))
        tr, va, _ = _split(cfg, manifest, seed)
        train, valid = [bags[i] for i in tr], [bags[i] for i in va]
        prov = _provenance(cfg, seed)
        for stage in stages:
            if stage in ("teacher", "baseline"):
                vat = mc.vat if stage == "teacher" else mc.baseline_vat
                fh, cb = _write_log(run / f"{stage}_log.jsonl")
                with fh:
                    model, hist = train_teacher(train, vat, mc.teacher_train, mc.spec, mc.attention_dim,
                                                valid=valid or None, on_epoch=cb)
                save_checkpoint(run / f"{stage}.npz", model, {**prov, "stage": stage, "epochs": len(hist)})
            else:
                tpath = run / "teacher.npz"
                if not tpath.exists():
                    raise FileNotFoundError(f"student stage needs a teacher checkpoint at {tpath}")
                teacher, _ = load_checkpoint(tpath)
                fh, cb = _write_log(run / "student_log.jsonl")
                with fh:
                    student, hist = train_student(teacher, train, mc.distill, mc.student_train,
                                                  valid=valid or None, on_epoch=cb)
                save_checkpoint(run / "student.npz", student,
                                {**prov, "stage": "student", "epochs": len(hist),
                                 "teacher_hash": parameter_digest(teacher)})
            print(f"seed {seed}: {stage} -> {run / (stage + '.npz')}")
    return EXIT_OK


def cmd_evaluate(cfg, args) -> int:
    out = _out_dir(cfg, args)
    manifest, bags = _load_dataset(out)
    model, meta = load_checkpoint(args.checkpoint)
    seed = meta.get("seed", _seeds(cfg, args)[0])
    _, _, te = _split(cfg, manifest, seed)
    test = [bags[i] for i in te]
    levels = ("bag", "instance") if args.level == "both" else (args.level,)
    if "instance" in levels and any(getattr(b, "instance_labels", None) is None for b in test):
        raise ConfigError("instance-level evaluation needs instance labels, and this dataset has none "
                          "for some test bags; use --level bag")
    name = meta.get("stage", Path(args.checkpoint).stem)
    reports = evaluate_model(model, test, name, seed=seed, levels=levels)
    dest = Path(args.checkpoint).parent
    dest.mkdir(parents=True, exist_ok=True)
    prov = {**_provenance(cfg, seed), "checkpoint_config_hash": meta.get("config_hash")}
    rows = [r.to_dict() for r in reports]
    (dest / f"metrics_{name}.tsv").write_text(_header(prov) + table_to_tsv(rows))
    (dest / f"metrics_{name}.json").write_text(json.dumps({**prov, "reports": rows}, indent=1, sort_keys=True))
    text = "\n".join(f"{r.level:>8} {r.model}: accuracy {r.accuracy:.4f}  F1 {r.f1:.4f}  AUROC {r.auroc:.4f}"
                     for r in reports)
    (dest / f"metrics_{name}.txt").write_text(_header(prov) + text + "\n")
    print(text)
    return EXIT_OK


def cmd_sweep(cfg, args) -> int:
    out = _out_dir(cfg, args) / "sweep"
    ds = cfg["dataset"]
    pool = load_digit_pool(ds["digit_source"], ds["digit_path"])
    train_pool, val_pool = pool.split(0.2, ds["seed"])
    result = run_vat_sweep(train_pool, val_pool, build_model_configs(cfg), sweep_config(cfg), args.workers)
    out.mkdir(parents=True, exist_ok=True)
    prov = _provenance(cfg)
    (out / "sweep.tsv").write_text(_header(prov) + table_to_tsv(result.rows))
    (out / "series.json").write_text(json.dumps({**prov, "series": result.series()}, indent=1, sort_keys=True))
    for kk, conds in result.series().items():
        for cond, s in conds.items():
            print(f"K={kk} {cond:>6}: " + "  ".join(f"N={n}:{m:.3f}" for n, m in zip(s["N"], s["mean"])))
    return EXIT_OK


def cmd_crossval(cfg, args) -> int:
    out = _out_dir(cfg, args)
    manifest, bags = _load_dataset(out)
    has_inst = all(getattr(b, "instance_labels", None) is not None for b in bags)
    levels = ("bag", "instance") if has_inst else ("bag",)
    seeds = _seeds(cfg, args)
    result = run_cross_validation(bags, build_model_configs(cfg), cfg["training"]["folds"], seeds,
                                  out_dir=out / "crossval", workers=args.workers, levels=levels)
    dest = out / "crossval"
    prov = _provenance(cfg, ",".join(map(str, seeds)))
    (dest / "reports.tsv").write_text(_header(prov) + table_to_tsv([r.to_dict() for r in result.reports]))
    for level in levels:
        rows = results_table(result.reports, level)
        (dest / f"table_{level}.tsv").write_text(_header(prov) + table_to_tsv(rows))
        text = render_table(rows, level)
        (dest / f"table_{level}.txt").write_text(_header(prov) + text + "\n")
        print(text)
    return EXIT_OK


def cmd_plot(cfg, args) -> int:
    out = Path(args.out) if args.out else _out_dir(cfg, args) / "plots"
    parsed = []
    for f in map(Path, args.files):
        parsed.append((f, read_sweep_series(f) if f.suffix == ".json" else read_loss_log(f)))
    written = []
    for f, data in parsed:
        if f.suffix == ".json":
            written += plot_sweep(data, out, args.format)
        else:
            written.append(plot_loss_curves(data, out / f"{f.stem}.{args.format}", f.stem))
    for p in written:
        print(p)
    return EXIT_OK


COMMANDS = {"prepare": cmd_prepare, "train": cmd_train, "evaluate": cmd_evaluate,
            "sweep": cmd_sweep, "crossval": cmd_crossval, "plot": cmd_plot}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="distill-mil", description=__doc__)
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    p.add_argument("--config", help="YAML experiment config")
    p.add_argument("--out", help="output directory (overrides output_dir)")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, help):
        sp = sub.add_parser(name, help=help)
        sp.add_argument("--config", default=argparse.SUPPRESS, help="YAML experiment config")
        sp.add_argument("--out", default=argparse.SUPPRESS, help="output directory (overrides output_dir)")
        return sp

    sp = add("prepare", "build bags and the dataset manifest")
    sp.add_argument("--force", action="store_true", help="overwrite an existing manifest")
    sp = add("train", "train teacher and/or student")
    sp.add_argument("--stage", choices=["teacher", "student", "both", "baseline"], default="both")
    sp.add_argument("--seed", help="comma-separated seeds, e.g. 1,2,3")
    sp = add("evaluate", "score a checkpoint on the test split")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--level", choices=["bag", "instance", "both"], default="both")
    sp.add_argument("--seed")
    sp = add("sweep", "VAT vs. no-VAT teacher over a grid of bag counts and sizes")
    sp.add_argument("--workers", type=int, default=1)
    sp = add("crossval", "k-fold baseline / teacher / student comparison")
    sp.add_argument("--workers", type=int, default=1)
    sp.add_argument("--seed")
    sp = add("plot", "render loss curves (.jsonl) and sweep series (.json)")
    sp.add_argument("files", nargs="+")
    sp.add_argument("--format", default="png", choices=["png", "pdf", "svg"])
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        cfg = load_config(args.config)
        return COMMANDS[args.command](cfg, args)
    except OutputExists as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_EXISTS
    except (ConfigError, SeriesParseError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingError as e:
        print(f"training failed: {e}", file=sys.stderr)
        return EXIT_TRAINING
    except OSError as e:
        print(f"I/O error: {e}", file=sys.stderr)
        return EXIT_IO
    except KeyboardInterrupt:
        print("interrupted; finished folds are saved", file=sys.stderr)
        return EXIT_INTERRUPTED


if __name__ == "__main__":
    sys.exit(main())
