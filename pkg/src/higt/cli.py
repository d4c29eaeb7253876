"""Command-line entry point: ``higt {synth,build-graph,train,eval,ablate,plot}``.

Exit codes: 0 success, 1 runtime failure, 2 usage error.  Every command
writes a ``manifest.json`` describing its inputs, config and outputs.
"""
from __future__ import annotations

import argparse
import csv
import datetime as _dt
import glob
import hashlib
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .config import ModelConfig, SynthSpec, dump_config, load_model_config
from .data import load_dataset, synth_graph
from .graph import build_hierarchical_graph, save, validate
from .model import load_checkpoint, save_checkpoint
from .tiles import (EmptySlideError, RandomProjectionExtractor, attach_features, extract_features,
                    filter_background, load_raster_dir, otsu_mask, save_raster_dir, synth_slide,
                    tile_pyramid)
from .train import (ABLATIONS, EvalReport, ablation_table, cross_validate, evaluate, kfold_split,
                    peak_rss_mb, run_ablation, train)

log = logging.getLogger("higt")


class UsageError(Exception):
    pass


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _hash_inputs(paths) -> dict[str, str]:
    out = {}
    for p in paths:
        p = Path(p)
        files = sorted(q for q in p.rglob("*") if q.is_file()) if p.is_dir() else [p]
        for f in files:
            if f.name != "manifest.json":
                out[str(f)] = _sha256(f)
    return out


def write_manifest(out_dir: Path, command: str, args: argparse.Namespace, inputs, outputs,
                   config: dict | None, started: str, name: str = "manifest.json") -> Path:
    manifest = {
        "command": command,
        "argv": {k: v for k, v in vars(args).items() if k != "func"},
        "config": config,
        "input_hashes": _hash_inputs(inputs),
        "seed": getattr(args, "seed", None) if config is None else config.get("seed"),
        "code_version": __version__,
        "started": started,
        "finished": _dt.datetime.now(_dt.timezone.utc).isoformat(),
        "peak_rss_mb": peak_rss_mb(),
        "outputs": sorted(str(o) for o in outputs),
    }
    path = out_dir / name
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str))
    return path


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat()


def _read_labels(path: Path) -> dict[str, int]:
    with path.open(newline="") as fh:
        return {row["slide_id"]: int(row["label"]) for row in csv.DictReader(fh)}


def _write_labels(path: Path, rows) -> None:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["slide_id", "label"])
        w.writerows(rows)


def _config(args) -> ModelConfig:
    path = Path(args.config)
    if not path.is_file():
        raise UsageError(f"config file not found: {path}")
    try:
        return load_model_config(path)
    except (ValueError, TypeError) as exc:
        raise UsageError(f"{path}: {exc}") from exc


# --------------------------------------------------------------------------- commands

def cmd_synth(args) -> int:
    if args.slides < 1:
        raise UsageError("--slides must be >= 1")
    if args.classes < 1:
        raise UsageError("--classes must be >= 1")
    if args.signal < 0:
        raise UsageError("--signal must be >= 0")
    started = _now()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    spec = SynthSpec(region_rows=args.grid, region_cols=args.grid, patch_size=args.patch_size,
                     num_classes=args.classes, signal_strength=args.signal, noise=args.noise)
    extractor = RandomProjectionExtractor(args.feature_dim, args.extractor_seed)
    rows, outputs = [], []
    base = args.seed * 100_000
    for i in range(args.slides):
        seed = base + i
        slide_id = f"synth_{seed:07d}"
        if args.rasters:
            raster, label = synth_slide(seed, spec)
            save_raster_dir(raster, out / slide_id)
            outputs.append(out / slide_id)
        else:
            g = synth_graph(seed, spec, extractor, slide_id)
            label = g.label
            save(g, out / f"{slide_id}.hg1")
            outputs.append(out / f"{slide_id}.hg1")
        rows.append((slide_id, label))
    _write_labels(out / "labels.csv", rows)
    dump_config(spec, out / "synth.yaml")
    outputs += [out / "labels.csv", out / "synth.yaml"]
    write_manifest(out, "synth", args, [], outputs, None, started)
    print(f"wrote {args.slides} {'raster pyramids' if args.rasters else 'graphs'} to {out}")
    return 0


def _load_precomputed(path: Path, slide_id: str) -> dict:
    with np.load(path / f"{slide_id}.npz") as data:
        coords, feats = data["coords"], data["features"]
    names = ("thumbnail", "region", "patch")
    return {(names[int(lv)], int(r), int(c)): f for (lv, r, c), f in zip(coords, feats)}


def _build_one(job):
    slide_dir, out_dir, features, feature_dim, patch_size, label, extractor_seed = job
    slide_id = Path(slide_dir).name
    try:
        raster = load_raster_dir(slide_dir)
        grids = tile_pyramid(raster, patch_size, slide_id)
        mask, _ = otsu_mask(raster["thumbnail"], grids["region"].shape)
        grids = filter_background(grids, mask)
        if features == "builtin":
            grids = extract_features(grids, RandomProjectionExtractor(feature_dim, extractor_seed),
                                     feature_dim)
        else:
            table = _load_precomputed(Path(features.split(":", 1)[1]), slide_id)
            grids = attach_features(grids, table, feature_dim)
        g = build_hierarchical_graph(grids, label, slide_id)
        problems = validate(g)
        if problems:
            return slide_id, "failed", "; ".join(problems)
        target = Path(out_dir) / f"{slide_id}.hg1"
        save(g, target)
        return slide_id, "ok", str(target)
    except EmptySlideError as exc:
        return slide_id, "skipped", str(exc)
    except Exception as exc:  # per-slide isolation
        return slide_id, "failed", f"{type(exc).__name__}: {exc}"


def cmd_build_graph(args) -> int:
    src = Path(args.slides)
    if not src.is_dir():
        raise UsageError(f"--slides {src} is not a directory")
    if args.features != "builtin" and not args.features.startswith("precomputed:"):
        raise UsageError("--features must be 'builtin' or 'precomputed:PATH'")
    started = _now()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    labels = _read_labels(src / "labels.csv") if (src / "labels.csv").exists() else {}
    slide_dirs = sorted(p for p in src.iterdir() if p.is_dir())
    jobs = [(str(d), str(out), args.features, args.feature_dim, args.patch_size,
             labels.get(d.name, -1), args.extractor_seed) for d in slide_dirs]
    if args.jobs > 1:
        with ProcessPoolExecutor(args.jobs) as pool:
            results = list(pool.map(_build_one, jobs))
    else:
        results = [_build_one(j) for j in jobs]
    summary = {"ok": [], "skipped": [], "failed": []}
    for slide_id, status, detail in results:
        summary[status].append({"slide_id": slide_id, "detail": detail})
    (out / "build_summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    _write_labels(out / "labels.csv",
                  [(r["slide_id"], labels.get(r["slide_id"], -1)) for r in summary["ok"]])
    outputs = [Path(r["detail"]) for r in summary["ok"]] + [out / "build_summary.json"]
    write_manifest(out, "build-graph", args, [src], outputs, None, started)
    for status in ("skipped", "failed"):
        for r in summary[status]:
            print(f"{status}: {r['slide_id']}: {r['detail']}", file=sys.stderr)
    print(f"built {len(summary['ok'])} graphs, skipped {len(summary['skipped'])}, "
          f"failed {len(summary['failed'])}")
    if results and not summary["ok"]:
        return 1
    return 0


def cmd_train(args) -> int:
    config = _config(args)
    started = _now()
    graphs = load_dataset(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    labels = [g.label for g in graphs]
    tr, va = kfold_split(labels, config.folds, config.seed)[0]
    model, history = train([graphs[i] for i in tr], config, val_graphs=[graphs[i] for i in va])
    save_checkpoint(model, out / "model.ck1", extra={"best_epoch": history.best_epoch})
    (out / "history.json").write_text(json.dumps(history.to_dict(), indent=2, sort_keys=True))
    dump_config(config, out / "config.yaml")
    write_manifest(out, "train", args, [args.config, args.data],
                   [out / "model.ck1", out / "history.json", out / "config.yaml"],
                   config.to_dict(), started)
    print(f"trained on {len(tr)} slides, best epoch {history.best_epoch}; checkpoint {out / 'model.ck1'}")
    return 0


def cmd_eval(args) -> int:
    config = _config(args)
    started = _now()
    graphs = load_dataset(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    inputs = [args.config, args.data]
    if args.checkpoint:
        model, _ = load_checkpoint(args.checkpoint)
        report = evaluate(model, graphs, label="checkpoint")
        inputs.append(args.checkpoint)
    else:
        report = cross_validate(graphs, config, label="Ours", progress=log.info)
    (out / "report.json").write_text(report.to_json())
    write_manifest(out, "eval", args, inputs, [out / "report.json"], config.to_dict(), started)
    print(report.summary())
    return 0


def cmd_ablate(args) -> int:
    config = _config(args)
    started = _now()
    graphs = load_dataset(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ablations = args.ablate or ["ssa", "bi", "fusion"]
    reports = run_ablation(graphs, config, ablations, args.seeds or [config.seed], progress=log.info)
    outputs = []
    for key, rep in reports.items():
        path = out / f"report_{key}.json"
        path.write_text(rep.to_json())
        outputs.append(path)
    table = ablation_table(reports)
    (out / "ablation.md").write_text(table + "\n")
    outputs.append(out / "ablation.md")
    write_manifest(out, "ablate", args, [args.config, args.data], outputs, config.to_dict(), started)
    print(table)
    return 0


def _manifest_rss(path: Path) -> float | None:
    """Peak RSS recorded by the command that wrote a report, when its manifest sits beside it."""
    try:
        return float(json.loads(path.read_text())["peak_rss_mb"])
    except (OSError, ValueError, KeyError, TypeError):
        return None


def cmd_plot(args) -> int:
    paths = sorted(glob.glob(args.reports))
    if not paths:
        raise UsageError(f"no reports match {args.reports!r}")
    started = _now()
    reports = []
    for p in paths:
        try:
            reports.append((Path(p), EvalReport.from_json(Path(p).read_text())))
        except (json.JSONDecodeError, TypeError, KeyError) as exc:
            print(f"malformed report {p}: {exc}", file=sys.stderr)
            return 1
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    fig, (ax_cost, ax_mem, ax_loss) = plt.subplots(1, 3, figsize=(14, 4))
    for path, rep in reports:
        name = rep.label or path.stem
        ax_cost.errorbar([rep.param_count], [rep.auc_mean], yerr=[rep.auc_std], fmt="o", capsize=3,
                         label=name)
        rss = _manifest_rss(path.parent / "manifest.json")
        if rss is not None:
            ax_mem.errorbar([rss], [rep.auc_mean], yerr=[rep.auc_std], fmt="o", capsize=3, label=name)
        if rep.loss_curves:
            n = min(len(c) for c in rep.loss_curves)
            if n:
                curve = np.mean([c[:n] for c in rep.loss_curves], axis=0)
                ax_loss.plot(np.arange(n), curve, label=name)
    ax_cost.set_xlabel("parameters")
    ax_cost.set_ylabel("AUC (%)")
    ax_cost.set_title("AUC vs model size")
    ax_mem.set_xlabel("peak resident memory (MB)")
    ax_mem.set_ylabel("AUC (%)")
    ax_mem.set_title("AUC vs memory")
    ax_loss.set_xlabel("optimizer step")
    ax_loss.set_ylabel("training loss")
    ax_loss.set_title("mean loss curve")
    ax_cost.legend(fontsize=7)
    for ax in (ax_mem, ax_loss):
        if ax.has_data():
            ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(out, format=out.suffix.lstrip(".") or "png", dpi=100, metadata={"Software": None})
    plt.close(fig)
    write_manifest(out.parent, "plot", args, paths, [out], None, started,
                   name=f"{out.stem}.manifest.json")
    print(f"wrote {out}")
    return 0


# --------------------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="higt", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate synthetic slides (graphs or raster pyramids)")
    p.add_argument("--out", required=True)
    p.add_argument("--slides", type=int, required=True)
    p.add_argument("--classes", type=int, default=2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--signal", type=float, default=1.0)
    p.add_argument("--noise", type=float, default=0.08)
    p.add_argument("--grid", type=int, default=3, help="region grid side length")
    p.add_argument("--patch-size", type=int, default=32)
    p.add_argument("--feature-dim", type=int, default=32)
    p.add_argument("--extractor-seed", type=int, default=0)
    p.add_argument("--rasters", action="store_true", help="write level_{0,1,2}.png pyramids instead of graphs")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("build-graph", help="tile, filter and featurise raster pyramids into HG1 graphs")
    p.add_argument("--slides", required=True)
    p.add_argument("--features", default="builtin", help="builtin | precomputed:PATH")
    p.add_argument("--out", required=True)
    p.add_argument("--feature-dim", type=int, default=ModelConfig.feature_dim)
    p.add_argument("--patch-size", type=int, default=512)
    p.add_argument("--extractor-seed", type=int, default=0)
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_build_graph)

    for name, func, text in (("train", cmd_train, "train one model (fold 0 held out for selection)"),
                             ("eval", cmd_eval, "k-fold cross-validation, or score --checkpoint"),
                             ("ablate", cmd_ablate, "full model vs single-switch ablations")):
        p = sub.add_parser(name, help=text)
        p.add_argument("--config", required=True)
        p.add_argument("--data", required=True)
        p.add_argument("--out", required=True)
        if name == "eval":
            p.add_argument("--checkpoint")
        if name == "ablate":
            p.add_argument("--ablate", action="append", choices=sorted(ABLATIONS))
            p.add_argument("--seeds", type=int, nargs="+")
        p.set_defaults(func=func)

    p = sub.add_parser("plot", help="AUC-vs-size scatter and loss curves from report JSON files")
    p.add_argument("--reports", required=True, help="glob of report JSON files")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"higt: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:
        print(f"higt {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
