"""Command-line entry point: ``dgc generate|train|eval|sample|plot|sweep``.

Flags override values from ``--config``; the resolved config is echoed next
to every artifact so it can be re-run as is.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from . import datasets, evaluation, plotting
from .config import ConfigError, RunConfig, load_config
from .training import load_checkpoint, read_log, train

log = logging.getLogger("dgc")


class CLIError(Exception):
    pass


# ---------------------------------------------------------------------------
# data


def _overrides(args) -> dict:
    out = {}
    if getattr(args, "seed", None) is not None:
        out["dataset.seed"] = args.seed
        out["training.seed"] = args.seed
    if getattr(args, "out", None) is not None:
        out["output.dir"] = str(args.out)
    if getattr(args, "k", None) is not None:
        out["model.n_clusters"] = args.k
    if getattr(args, "no_regularizer", False):
        out["training.regularizer"] = False
    if getattr(args, "ablation", False):
        out["training.objective"] = "ablation"
    if getattr(args, "preset", None) is not None:
        out["model.preset"] = args.preset
    return out


def load_splits(cfg: RunConfig) -> tuple:
    """(train, test) TaskData for a run config: read from ``dataset.path``
    when given, generated from the dataset name and seed otherwise."""
    ds = cfg.dataset
    if ds.path is not None:
        path = Path(ds.path)
        if path.is_dir():
            parts = datasets.read_image_archive(path)
            return parts["train"].task_data(), parts["test"].task_data()
        data = datasets.read_pacman_csv(path)
        return data.part("train"), data.part("test")
    if ds.name == "pacman":
        data = datasets.generate_pacman(ds.n_per_annulus, seed=ds.seed)
        return data.part("train"), data.part("test")
    train_set, test_set = datasets.build_noisy_digits(
        ds.seed, digits=ds.digits, n_train=ds.n_train, n_test=ds.n_test,
        background_source=ds.background_source)
    return train_set.task_data(), test_set.task_data()


def _write_json(path: Path, payload) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# commands


def cmd_generate(args) -> int:
    cfg = load_config(args.config, {**_overrides(args), "dataset.name": args.dataset})
    out = Path(args.out or cfg.output.dir)
    out.mkdir(parents=True, exist_ok=True)
    ds = cfg.dataset
    if ds.name == "pacman":
        data = datasets.generate_pacman(ds.n_per_annulus, seed=ds.seed)
        datasets.write_pacman_csv(data, out / "pacman.csv")
        manifest = {"dataset": "pacman", "format": "pacman-csv", "file": "pacman.csv",
                    "seed": ds.seed, "n_per_annulus": ds.n_per_annulus, "rows": len(data),
                    "clusters": list(datasets.PACMAN_CLUSTERS)}
    else:
        train_set, test_set = datasets.build_noisy_digits(
            ds.seed, digits=ds.digits, n_train=ds.n_train, n_test=ds.n_test,
            background_source=ds.background_source)
        datasets.write_image_archive(out / "images", {"train": train_set, "test": test_set})
        manifest = {"dataset": "noisy-digits", "format": "image-archive", "file": "images",
                    "seed": ds.seed, "digits": list(ds.digits),
                    "n_train": len(train_set), "n_test": len(test_set),
                    "clusters": list(train_set.cluster_names)}
    _write_json(out / "manifest.json", manifest)
    print(f"wrote {manifest['dataset']} data to {out}")
    return 0


def cmd_train(args) -> int:
    cfg = load_config(args.config, _overrides(args))
    out = Path(cfg.output.dir)
    train_set, test_set = load_splits(cfg)
    out.mkdir(parents=True, exist_ok=True)
    cfg.dump(out / "config.yaml")
    model, records = train(train_set, cfg.training, cfg.model.build_spec(), test_data=test_set,
                           out_dir=out, resume=args.checkpoint,
                           header={"run": cfg.to_dict()})
    last = records[-1] if records else None
    if last is not None:
        print(f"epoch {last.epoch}: loss {last.loss:.4f} train accuracy {last.train_accuracy}")
    return 0


def _run_config_from_checkpoint(payload, args) -> RunConfig:
    if args.config is not None:
        return load_config(args.config, _overrides(args))
    run = payload.get("extra", {}).get("run")
    if run is None:
        raise CLIError("checkpoint carries no run config; pass --config")
    return RunConfig.from_dict(run, _overrides(args))


def cmd_eval(args) -> int:
    model, _, epoch, payload = load_checkpoint(args.checkpoint)
    cfg = _run_config_from_checkpoint(payload, args)
    train_set, test_set = load_splits(cfg)
    data = test_set if args.split == "test" else train_set
    n_true = len(np.unique(data.cluster)) if data.cluster is not None else None
    if n_true is not None and n_true != model.n_clusters:
        log.warning("model has %d clusters, data has %d", model.n_clusters, n_true)
    report = evaluation.evaluate(model, data, hide_labels=args.hide_labels)
    report.update({"split": args.split, "checkpoint_epoch": epoch})
    out = Path(args.out) if args.out else Path(args.checkpoint).with_name(
        f"report_{args.split}_{report['mode']}.json")
    evaluation.write_report(report, out)
    print(f"{report['mode']} clustering accuracy {report.get('cluster_accuracy')} -> {out}")
    return 0


def cmd_sample(args) -> int:
    if args.n <= 0:
        raise CLIError("--n must be positive")
    model, _, _, payload = load_checkpoint(args.checkpoint)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    g = torch.Generator().manual_seed(args.seed)
    samples = model.generate(args.n, g)
    c = samples["c"].numpy()
    x = samples["x"].numpy()
    y = samples["y"].numpy()
    if model.spec.name.startswith("pacman"):
        with open(out / "samples.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("x1", "x2", "y", "component"))
            for (a, b), yy, cc in zip(x, y.reshape(len(x)), c):
                w.writerow((repr(float(a)), repr(float(b)), repr(float(yy)), int(cc)))
        plotting.plot_pacman(x, y, c, out / "samples_2d.png", out / "samples_3d.png")
    else:
        side = int(round(np.sqrt(x.shape[1])))
        np.savez(out / "samples.npz", x=x.reshape(len(x), side, side), y=y, component=c)
        order = np.argsort(c, kind="stable")
        plotting.plot_image_grid(x[order], out / "samples.png",
                                 labels=[f"c{k}" for k in c[order]])
    print(f"wrote {args.n} samples to {out}")
    return 0


def cmd_plot(args) -> int:
    src = Path(args.input)
    out = Path(args.out) if args.out else src.parent
    if args.kind == "curves":
        _, records = read_log(src)
        written = [plotting.plot_training_curves(records, out / "training_curves.png")]
    elif args.kind == "confusion":
        report = evaluation.read_report(src)
        if "confusion" not in report:
            raise CLIError(f"{src} has no confusion matrix")
        written = [plotting.plot_confusion(evaluation.ConfusionMatrix.from_dict(report["confusion"]),
                                           out / "confusion.png",
                                           title=f"{report.get('mode', '')} assignment")]
    elif args.kind == "pacman":
        with open(src, newline="") as fh:
            rows = list(csv.DictReader(fh))
        if not rows:
            raise CLIError(f"{src} holds no points")
        x = np.array([[float(r["x1"]), float(r["x2"])] for r in rows])
        y = np.array([float(r["y"]) for r in rows])
        key = "cluster" if "cluster" in rows[0] else "component"
        names = sorted({r[key] for r in rows})
        c = np.array([names.index(r[key]) for r in rows])
        written = plotting.plot_pacman(x, y, c, out / "pacman_2d.png", out / "pacman_3d.png")
    else:  # argparse restricts the choices
        raise CLIError(f"unknown plot kind {args.kind!r}")
    for path in written:
        print(path)
    return 0


def cmd_sweep(args) -> int:
    """Train and evaluate one model per cluster count; one report per K."""
    base = load_config(args.config, _overrides(args))
    out = Path(base.output.dir)
    summary = []
    for k in args.ks:
        cfg = load_config(args.config, {**_overrides(args), "model.n_clusters": k,
                                        "output.dir": str(out / f"k{k}")})
        train_set, test_set = load_splits(cfg)
        run_dir = Path(cfg.output.dir)
        run_dir.mkdir(parents=True, exist_ok=True)
        cfg.dump(run_dir / "config.yaml")
        model, _ = train(train_set, cfg.training, cfg.model.build_spec(), test_data=test_set,
                         out_dir=run_dir, header={"run": cfg.to_dict()})
        report = evaluation.evaluate(model, test_set, hide_labels=args.hide_labels)
        report["k"] = k
        evaluation.write_report(report, run_dir / "report.json")
        summary.append({"k": k, "cluster_accuracy": report.get("cluster_accuracy"),
                        "classification_accuracy": report.get("classification_accuracy")})
        print(f"K={k}: clustering {report.get('cluster_accuracy')}")
    _write_json(out / "sweep.json", summary)
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dgc", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log every epoch")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, *, out_help="output directory"):
        p.add_argument("--config", help="YAML run config")
        p.add_argument("--seed", type=int, help="overrides dataset.seed and training.seed")
        p.add_argument("--out", help=out_help)
        return p

    p = common(sub.add_parser("generate", help="write a dataset to disk"))
    p.add_argument("dataset", choices=("pacman", "noisy-digits"))
    p.set_defaults(func=cmd_generate)

    p = common(sub.add_parser("train", help="train a model"), out_help="run directory")
    p.add_argument("--preset", help="model preset (pacman-mlp, mnist-mlp, svhn-conv)")
    p.add_argument("--k", type=int, help="number of clusters")
    p.add_argument("--no-regularizer", action="store_true", help="drop the entropy penalty")
    p.add_argument("--ablation", action="store_true", help="train without the decoder")
    p.add_argument("--checkpoint", help="resume from this checkpoint")
    p.set_defaults(func=cmd_train)

    p = common(sub.add_parser("eval", help="score a checkpoint"), out_help="report path")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--hide-labels", action="store_true",
                   help="assign clusters without the responses")
    p.add_argument("--split", choices=("train", "test"), default="test")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sample", help="draw samples from a trained model")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--n", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("plot", help="render figures from a log, report or point file")
    p.add_argument("kind", choices=("curves", "confusion", "pacman"))
    p.add_argument("input", help="train_log.jsonl, report JSON or Pacman CSV")
    p.add_argument("--out", help="output directory (default: next to the input)")
    p.set_defaults(func=cmd_plot)

    p = common(sub.add_parser("sweep", help="train/evaluate over several cluster counts"),
               out_help="sweep directory")
    p.add_argument("--ks", type=int, nargs="+", default=[1, 5, 10, 15, 20, 50, 100])
    p.add_argument("--preset")
    p.add_argument("--no-regularizer", action="store_true")
    p.add_argument("--hide-labels", action="store_true")
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(exc, file=sys.stderr)
        return 2
    except (CLIError, datasets.DatasetFormatError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
