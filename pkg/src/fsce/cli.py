"""Command-line pipeline: data generation, two-stage training, evaluation and ablations.

Every command writes its artifacts plus a ``manifest.json`` (command, merged
config, seed, content hashes of the inputs) under ``--out``. Relative output
paths are resolved against ``$FSCE_OUTPUT_ROOT`` when it is set. Options can
also come from a flat ``key = value`` file given with ``--config``; keys are
the option names without the leading dashes, and command-line flags win.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import io
import json
import logging
import os
import statistics
import sys
from pathlib import Path
from typing import Optional, Sequence

import torch

from .cpe import CpeConfig
from .data import (ANNOTATION_FILE, CLASSES_FILE, DEFAULT_NOVEL, KSHOT_MENU, SHAPES, build_kshot_split,
                   class_ids, generate_synthetic, load_dataset, save_dataset)
from .detector import (COMPONENTS, DetectorConfig, collect_stats, fine_tune, frozen_baseline_config,
                       load_checkpoint, save_checkpoint, strong_baseline_config, train_base)
from .evaluation import COCO_THRESHOLDS, evaluate, export_embeddings, match_detections, run_detector

log = logging.getLogger("fsce")

OUTPUT_ROOT_ENV = "FSCE_OUTPUT_ROOT"
FINETUNE_STEPS = 400

# dotted flag -> CpeConfig field
CPE_KEYS = {"cpe.lambda": "loss_weight", "cpe.temperature": "temperature", "cpe.phi": "phi",
            "cpe.reweight": "reweight"}

# named ablation grids: (temperatures, embedding dims, consistency options)
TAU_DIM_GRID = ((0.07, 0.2, 0.5), (128, 256), ((0.7, "one"),))
REWEIGHT_GRID = ((0.2,), (128,), ((0.7, "one"), (0.5, "one"), (0.0, "linear"), (0.0, "expm1")))


class CliError(Exception):
    """A user-facing failure: reported on one line with a nonzero exit."""


# ---------------------------------------------------------------- helpers

def _csv(kind):
    def parse(text: str):
        text = text.strip()
        return [kind(t) for t in text.split(",") if t.strip()] if text else []
    return parse


def _bool(text: str) -> bool:
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def read_config_file(path: Path) -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    if not path.is_file():
        raise CliError(f"config file not found: {path}")
    out = {}
    for n, raw in enumerate(path.read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise CliError(f"{path}:{n}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.lstrip("-")] = value
    return out


def output_dir(path: str) -> Path:
    p = Path(path)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not p.is_absolute():
        p = Path(root) / p
    p.mkdir(parents=True, exist_ok=True)
    return p


def git_blob_hash(data: bytes) -> str:
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def content_hash(path: Path) -> str:
    """Git-style hash of a file, or of a directory tree (sorted paths and blob hashes)."""
    if path.is_file():
        return git_blob_hash(path.read_bytes())
    h = hashlib.sha1()
    for f in sorted(p for p in path.rglob("*") if p.is_file()):
        h.update(f"{f.relative_to(path).as_posix()} {git_blob_hash(f.read_bytes())}\n".encode())
    return h.hexdigest()


def write_manifest(out: Path, command: str, seed: Optional[int], config: dict, inputs: dict[str, Path],
                   outputs: Sequence[Path], **extra) -> Path:
    manifest = {
        "command": command,
        "seed": seed,
        "config": config,
        "inputs": {k: {"path": str(v), "content_hash": content_hash(v)} for k, v in sorted(inputs.items())},
        "outputs": sorted(str(Path(p).relative_to(out)) if Path(p).is_relative_to(out) else str(p)
                          for p in outputs),
    }
    manifest.update(extra)
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def require_dataset(path: str) -> Path:
    p = Path(path)
    for f in (p / ANNOTATION_FILE, p / CLASSES_FILE):
        if not f.is_file():
            raise CliError(f"dataset not found: {f}")
    return p


def require_file(path: str, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise CliError(f"{what} not found: {p}")
    return p


def _detector_overrides(args) -> dict:
    out = {}
    for f in dataclasses.fields(DetectorConfig):
        if f.name == "freeze":
            continue
        v = getattr(args, f.name, None)
        if v is not None:
            out[f.name] = tuple(v) if isinstance(v, list) else v
    freeze = {c: getattr(args, f"freeze.{c}") for c in COMPONENTS if getattr(args, f"freeze.{c}", None) is not None}
    if freeze:
        out["freeze"] = freeze
    return out


def _apply_overrides(cfg: DetectorConfig, overrides: dict) -> DetectorConfig:
    if "freeze" in overrides:
        overrides = dict(overrides, freeze={**cfg.freeze, **overrides["freeze"]})
    try:
        return cfg.replace(**overrides)
    except ValueError as e:
        raise CliError(f"invalid detector config: {e}") from None


def _cpe_config(args) -> CpeConfig:
    kw = {field: getattr(args, key) for key, field in CPE_KEYS.items() if getattr(args, key, None) is not None}
    try:
        return CpeConfig(**kw)
    except ValueError as e:
        raise CliError(f"invalid CPE config: {e}") from None


def _thresholds(text: str) -> list[float]:
    if text.strip().lower() == "coco":
        return list(COCO_THRESHOLDS)
    vals = _csv(float)(text)
    if not vals or any(not 0.0 < t < 1.0 for t in vals):
        raise argparse.ArgumentTypeError(f"thresholds must lie in (0, 1): {text!r}")
    return vals


def variant_name(preset: str, cpe: CpeConfig) -> str:
    if preset == "frozen":
        return "frozen-baseline"
    return "strong-baseline" if cpe.loss_weight == 0.0 else "fsce"


# ---------------------------------------------------------------- commands

def cmd_generate(args) -> int:
    if not 2 <= args.classes <= len(SHAPES):
        raise CliError(f"--classes must be between 2 and {len(SHAPES)}")
    shapes = SHAPES[:args.classes]
    novel = args.novel if args.novel is not None else [n for n in DEFAULT_NOVEL if n in shapes]
    try:
        novel_ids = class_ids(novel, shapes)
    except ValueError as e:
        raise CliError(str(e)) from None
    draw = [c for c in range(len(shapes)) if c not in novel_ids] if args.base_only else None
    out = output_dir(args.out)
    ds = generate_synthetic(args.images, shapes, args.image_size, args.seed, novel, draw)
    ann = save_dataset(ds, out)
    counts = ds.instance_counts()
    print(" ".join(f"{shapes[c]}={n}" for c, n in counts.items()))
    write_manifest(out, "generate", args.seed,
                   {"images": args.images, "classes": list(shapes), "novel": novel,
                    "image_size": args.image_size, "base_only": args.base_only},
                   {}, [ann, out / CLASSES_FILE], dataset_digest=ds.digest())
    return 0


def cmd_split(args) -> int:
    src = require_dataset(args.data)
    if args.k not in KSHOT_MENU:
        log.warning("K=%d is outside the usual menu %s", args.k, KSHOT_MENU)
    ds = load_dataset(src)
    novel = sorted(ds.novel_ids) if args.novel is None else _names_to_ids(args.novel, ds.class_names)
    try:
        split = build_kshot_split(ds, novel, args.k, args.seed)
    except ValueError as e:
        raise CliError(str(e)) from None
    out = output_dir(args.out)
    ann = save_dataset(split.dataset, out)
    print(" ".join(f"{ds.class_names[c]}={n}" for c, n in split.counts.items()))
    write_manifest(out, "split", args.seed, {"k": args.k, "novel": [ds.class_names[c] for c in novel]},
                   {"data": src}, [ann], counts={ds.class_names[c]: n for c, n in split.counts.items()},
                   image_indices=split.image_indices)
    return 0


def _names_to_ids(names: Sequence[str], registry: Sequence[str]) -> list[int]:
    try:
        return sorted(class_ids(names, registry))
    except ValueError as e:
        raise CliError(str(e)) from None


def cmd_train_base(args) -> int:
    src = require_dataset(args.data)
    ds = load_dataset(src)
    n_novel = sum(1 for r in ds.records for c in r.labels if int(c) in ds.novel_ids)
    if n_novel:
        # novel objects stay in the pixels but lose their labels, as in the standard protocol
        log.info("dropping %d novel-class annotations for base training", n_novel)
        ds = ds.restrict(ds.base_ids)
    cfg = _apply_overrides(DetectorConfig(), _detector_overrides(args))
    out = output_dir(args.out)
    try:
        state = train_base(ds, cfg, seed=args.seed, log_every=args.log_every)
    except ValueError as e:
        raise CliError(str(e)) from None
    ckpt = out / "base.ckpt"
    digest = save_checkpoint(state, ckpt)
    _write_history(state.history, out / "history.csv")
    write_manifest(out, "train-base", args.seed, {"detector": state.cfg.to_dict()}, {"data": src},
                   [ckpt, out / "history.csv"], stage="base", checkpoint_sha256=digest)
    print(f"wrote {ckpt}")
    return 0


def _write_history(history: list[dict], path: Path) -> None:
    if not history:
        path.write_text("")
        return
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=["step"] + list(history[0]), lineterminator="\n")
    w.writeheader()
    for i, h in enumerate(history):
        w.writerow({"step": i, **{k: repr(float(v)) for k, v in h.items()}})
    path.write_text(buf.getvalue())


def _finetune_config(base_cfg: DetectorConfig, preset: str, steps: Optional[int], overrides: dict) -> DetectorConfig:
    make = frozen_baseline_config if preset == "frozen" else strong_baseline_config
    cfg = make(base_cfg, steps if steps is not None else FINETUNE_STEPS)
    return _apply_overrides(cfg, {k: v for k, v in overrides.items() if k != "steps"})


def cmd_finetune(args) -> int:
    ckpt = require_file(args.checkpoint, "checkpoint")
    src = require_dataset(args.data)
    base = _load_state(ckpt)
    ds = load_dataset(src)
    cpe = _cpe_config(args)
    if args.preset == "frozen" and cpe.loss_weight != 0.0:
        log.info("frozen preset trains only the box predictors; CPE weight forced to 0")
        cpe = dataclasses.replace(cpe, loss_weight=0.0)
    overrides = _detector_overrides(args)
    cfg = _finetune_config(base.cfg, args.preset, overrides.get("steps"), overrides)
    out = output_dir(args.out)
    try:
        state = fine_tune(base, ds, cfg, cpe, seed=args.seed, log_every=args.log_every)
    except ValueError as e:
        raise CliError(str(e)) from None
    path = out / "finetune.ckpt"
    digest = save_checkpoint(state, path)
    _write_history(state.history, out / "history.csv")
    variant = variant_name(args.preset, cpe)
    write_manifest(out, "finetune", state.seed,
                   {"detector": state.cfg.to_dict(), "cpe": dataclasses.asdict(cpe), "preset": args.preset},
                   {"checkpoint": ckpt, "data": src}, [path, out / "history.csv"],
                   stage="finetune", variant=variant, checkpoint_sha256=digest)
    print(f"wrote {path} ({variant})")
    return 0


def _load_state(path: Path):
    try:
        return load_checkpoint(path)
    except (ValueError, KeyError, json.JSONDecodeError) as e:
        raise CliError(f"cannot read checkpoint {path}: {e}") from None


def pr_curves(state, ds, iou_threshold: float = 0.5) -> dict:
    dets = run_detector(state, ds)
    curves = {}
    present = sorted({int(c) for r in ds.records for c in r.labels})
    for c in present:
        scores, is_tp, num_gt = match_detections(dets, ds.records, c, iou_threshold)
        tp = fp = 0
        rec, prec = [], []
        for hit in is_tp:
            tp += bool(hit)
            fp += not hit
            rec.append(tp / num_gt)
            prec.append(tp / (tp + fp))
        curves[ds.class_names[c]] = {"recall": rec, "precision": prec, "scores": scores.tolist()}
    return curves


def cmd_evaluate(args) -> int:
    ckpt = require_file(args.checkpoint, "checkpoint")
    src = require_dataset(args.data)
    state = _load_state(ckpt)
    ds = load_dataset(src)
    out = output_dir(args.out)
    try:
        report = evaluate(state, ds, args.thresholds, args.mode)
    except ValueError as e:
        raise CliError(str(e)) from None
    txt, js = report.write(out, "eval")
    outputs = [txt, js]
    if args.pr_curves:
        pr = out / "pr_curves.json"
        pr.write_text(json.dumps(pr_curves(state, ds), sort_keys=True) + "\n")
        outputs.append(pr)
    write_manifest(out, "evaluate", state.seed, {"thresholds": args.thresholds, "mode": args.mode},
                   {"checkpoint": ckpt, "data": src}, outputs)
    sys.stdout.write(report.to_text())
    return 0


def cmd_stats(args) -> int:
    ckpt = require_file(args.checkpoint, "checkpoint")
    src = require_dataset(args.data)
    state = _load_state(ckpt)
    ds = load_dataset(src)
    out = output_dir(args.out)
    rows = []
    for cap in args.caps:
        s = collect_stats(state, ds, state.cfg.replace(rpn_post_nms_cap=cap))
        rows.append({"rpn_post_nms_cap": cap, "mean_positive_anchors": s.mean_positive_anchors,
                     "mean_foreground_proposals": s.mean_foreground_proposals, "num_images": s.num_images})
    lines = [f"{'cap':>6} {'pos_anchors':>12} {'fg_proposals':>13}"]
    lines += [f"{r['rpn_post_nms_cap']:>6} {r['mean_positive_anchors']:>12.3f} {r['mean_foreground_proposals']:>13.3f}"
              for r in rows]
    text = "\n".join(lines) + "\n"
    (out / "stats.txt").write_text(text)
    (out / "stats.json").write_text(json.dumps(rows, indent=2) + "\n")
    write_manifest(out, "stats", state.seed, {"caps": args.caps}, {"checkpoint": ckpt, "data": src},
                   [out / "stats.txt", out / "stats.json"])
    sys.stdout.write(text)
    return 0


def cmd_export_embeddings(args) -> int:
    ckpt = require_file(args.checkpoint, "checkpoint")
    src = require_dataset(args.data)
    state = _load_state(ckpt)
    ds = load_dataset(src)
    out = output_dir(args.out)
    path = out / "embeddings.csv"
    rows = export_embeddings(state, ds, args.max_images, path, seed=args.seed)
    write_manifest(out, "export-embeddings", args.seed, {"max_images": args.max_images},
                   {"checkpoint": ckpt, "data": src}, [path], rows=len(rows))
    print(f"wrote {len(rows)} embeddings to {path}")
    return 0


def ablation_cells(grid: str, temperatures, dims, consistency) -> list[dict]:
    if grid == "tau-dim":
        temperatures, dims, consistency = TAU_DIM_GRID
    elif grid == "reweight":
        temperatures, dims, consistency = REWEIGHT_GRID
    elif grid == "empty":
        return []
    return [{"temperature": t, "embed_dim": d, "phi": phi, "reweight": g}
            for t in temperatures for d in dims for phi, g in consistency]


def _consistency(text: str) -> list[tuple[float, str]]:
    out = []
    for item in _csv(str)(text):
        phi, _, g = item.partition(":")
        out.append((float(phi), g or "one"))
    return out


def run_ablation(base, train_ds, test_ds, cells: list[dict], seeds: Sequence[int], steps: int,
                 thresholds: Sequence[float], loss_weight: float = 0.5) -> list[dict]:
    rows = []
    for cell in cells:
        row = dict(cell, per_seed={}, errors={})
        for seed in seeds:
            try:
                cpe = CpeConfig(temperature=cell["temperature"], phi=cell["phi"], reweight=cell["reweight"],
                                loss_weight=loss_weight)
                cfg = strong_baseline_config(base.cfg, steps).replace(embed_dim=cell["embed_dim"])
                state = fine_tune(base, train_ds, cfg, cpe, seed=seed)
                row["per_seed"][seed] = evaluate(state, test_ds, thresholds).aggregates
            except Exception as e:  # a failed cell is recorded and the sweep goes on
                log.error("cell %s seed %d failed: %s", cell, seed, e)
                row["errors"][seed] = f"{type(e).__name__}: {e}"
        keys = sorted({k for v in row["per_seed"].values() for k in v if k.startswith("nAP")})
        row["median"] = {k: statistics.median(v[k] for v in row["per_seed"].values() if k in v) for k in keys}
        rows.append(row)
    return rows


def format_ablation(rows: list[dict], seeds: Sequence[int]) -> str:
    metrics = sorted({k for r in rows for k in r["median"]})
    head = ["tau", "D_C", "phi", "g"] + [f"{m}[s{s}]" for m in metrics for s in seeds] + [f"{m}[med]" for m in metrics]
    body = []
    for r in rows:
        cells = [f"{r['temperature']:g}", str(r["embed_dim"]), f"{r['phi']:g}", r["reweight"]]
        for m in metrics:
            for s in seeds:
                v = r["per_seed"].get(s, {}).get(m)
                cells.append("err" if s in r["errors"] else ("-" if v is None else f"{v:.4f}"))
        cells += [f"{r['median'][m]:.4f}" if m in r["median"] else "-" for m in metrics]
        body.append(cells)
    widths = [max(len(h), *(len(b[i]) for b in body)) if body else len(h) for i, h in enumerate(head)]
    lines = ["  ".join(h.rjust(w) for h, w in zip(head, widths))]
    lines += ["  ".join(c.rjust(w) for c, w in zip(b, widths)) for b in body]
    return "\n".join(lines) + "\n"


def cmd_ablate(args) -> int:
    cells = ablation_cells(args.grid, args.temperatures, args.embed_dims, args.consistency)
    out = output_dir(args.out)
    inputs = {}
    if cells:
        ckpt = require_file(args.checkpoint, "checkpoint")
        train_src = require_dataset(args.data)
        test_src = require_dataset(args.test)
        inputs = {"checkpoint": ckpt, "data": train_src, "test": test_src}
        base = _load_state(ckpt)
        rows = run_ablation(base, load_dataset(train_src), load_dataset(test_src), cells, args.seeds,
                            args.steps, args.thresholds, args.loss_weight)
    else:
        rows = []
    text = format_ablation(rows, args.seeds)
    (out / "ablation.txt").write_text(text)
    payload = {"seeds": list(args.seeds), "rows": [
        dict(r, per_seed={str(k): v for k, v in r["per_seed"].items()},
             errors={str(k): v for k, v in r["errors"].items()}) for r in rows]}
    (out / "ablation.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    failed = sum(len(r["errors"]) for r in rows)
    write_manifest(out, "ablate", None, {"grid": args.grid, "cells": cells, "seeds": list(args.seeds),
                                         "steps": args.steps, "thresholds": list(args.thresholds),
                                         "cpe.lambda": args.loss_weight},
                   inputs, [out / "ablation.txt", out / "ablation.json"], failed_cells=failed)
    sys.stdout.write(text)
    return 1 if failed else 0


def cmd_plot(args) -> int:
    try:
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        raise CliError("plotting needs matplotlib (pip install 'fsce[plot]')") from None
    import numpy as np
    from .evaluation import read_embeddings

    out = output_dir(args.out)
    written = []
    inputs = {}
    if args.embeddings:
        src = require_file(args.embeddings, "embedding file")
        inputs["embeddings"] = src
        rows = read_embeddings(src)
        if rows:
            z = np.stack([r.z for r in rows])
            z = z / np.linalg.norm(z, axis=1, keepdims=True)
            z = z - z.mean(axis=0)
            # 2-D projection onto the two leading principal axes
            _, _, vt = np.linalg.svd(z, full_matrices=False)
            xy = z @ vt[:2].T
            y = np.array([r.class_id for r in rows])
            fig, ax = plt.subplots(figsize=(5, 5))
            for c in sorted(set(y.tolist())):
                ax.scatter(xy[y == c, 0], xy[y == c, 1], s=6, label=str(c))
            ax.legend(title="class", fontsize=7)
            path = out / "embeddings.png"
            fig.savefig(path, dpi=120)
            plt.close(fig)
            written.append(path)
    if args.pr_curves:
        src = require_file(args.pr_curves, "PR-curve file")
        inputs["pr_curves"] = src
        curves = json.loads(src.read_text())
        fig, ax = plt.subplots(figsize=(5, 4))
        for name, c in sorted(curves.items()):
            ax.plot(c["recall"], c["precision"], label=name)
        ax.set_xlabel("recall")
        ax.set_ylabel("precision")
        ax.set_xlim(0, 1)
        ax.set_ylim(0, 1.05)
        ax.legend(fontsize=7)
        path = out / "pr_curves.png"
        fig.savefig(path, dpi=120)
        plt.close(fig)
        written.append(path)
    if not inputs:
        raise CliError("nothing to plot: pass --embeddings and/or --pr-curves")
    write_manifest(out, "plot", None, {}, inputs, written)
    return 0


# ---------------------------------------------------------------- parser

def _add_detector_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("detector config")
    for f in dataclasses.fields(DetectorConfig):
        if f.name == "freeze":
            continue
        default = f.default
        if isinstance(default, tuple):
            kind = _csv(type(default[0]))
        elif isinstance(default, bool):
            kind = _bool
        else:
            kind = type(default)
        g.add_argument(f"--{f.name}", type=kind, default=None, metavar=f.name.upper())
    for c in COMPONENTS:
        g.add_argument(f"--freeze.{c}", dest=f"freeze.{c}", type=_bool, default=None, metavar="BOOL")


def _add_cpe_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("contrastive loss")
    g.add_argument("--cpe.lambda", dest="cpe.lambda", type=float, default=None, help="loss weight (0.5)")
    g.add_argument("--cpe.temperature", dest="cpe.temperature", type=float, default=None, help="tau (0.2)")
    g.add_argument("--cpe.phi", dest="cpe.phi", type=float, default=None, help="IoU threshold (0.7)")
    g.add_argument("--cpe.reweight", dest="cpe.reweight", choices=("one", "linear", "expm1"), default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fsce", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name, func, help_):
        p = sub.add_parser(name, help=help_)
        p.set_defaults(func=func)
        p.add_argument("--config", type=Path, default=None, help="flat key = value options file")
        return p

    p = command("generate", cmd_generate, "draw a synthetic shape dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--images", type=int, default=500)
    p.add_argument("--classes", type=int, default=len(SHAPES))
    p.add_argument("--novel", type=_csv(str), default=None, help="comma-separated novel shape names")
    p.add_argument("--image-size", dest="image_size", type=int, default=96)
    p.add_argument("--base-only", dest="base_only", action="store_true", help="draw base classes only")
    p.add_argument("--seed", type=int, default=0)

    p = command("split", cmd_split, "build a balanced K-shot fine-tune set")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--novel", type=_csv(str), default=None)
    p.add_argument("--seed", type=int, default=0)

    p = command("train-base", cmd_train_base, "base-stage training")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--log-every", dest="log_every", type=int, default=100)
    _add_detector_flags(p)

    p = command("finetune", cmd_finetune, "fine-tune on a balanced K-shot set")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None, help="defaults to the base run's seed")
    p.add_argument("--preset", choices=("strong", "frozen"), default="strong",
                   help="strong: refine RPN/RoI, 2x proposal cap, half RoI batch; frozen: box predictors only")
    p.add_argument("--log-every", dest="log_every", type=int, default=100)
    _add_detector_flags(p)
    _add_cpe_flags(p)

    p = command("evaluate", cmd_evaluate, "per-class AP with base/novel aggregates")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--thresholds", type=_thresholds, default=[0.5, 0.75], help="comma list or 'coco'")
    p.add_argument("--mode", choices=("all-point", "voc11"), default="all-point")
    p.add_argument("--pr-curves", dest="pr_curves", action="store_true", help="also dump AP50 PR curves")

    p = command("stats", cmd_stats, "positive anchors and foreground proposals per image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--caps", type=_csv(int), default=[64, 128], help="post-NMS proposal caps")

    p = command("export-embeddings", cmd_export_embeddings, "dump contrastive embeddings of fg proposals")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--max-images", dest="max_images", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)

    p = command("ablate", cmd_ablate, "fine-tune + evaluate over a hyper-parameter grid")
    p.add_argument("--checkpoint")
    p.add_argument("--data", help="balanced fine-tune set")
    p.add_argument("--test", help="held-out evaluation set")
    p.add_argument("--out", required=True)
    p.add_argument("--grid", choices=("tau-dim", "reweight", "custom", "empty"), default="custom")
    p.add_argument("--temperatures", type=_csv(float), default=[0.2])
    p.add_argument("--embed-dims", dest="embed_dims", type=_csv(int), default=[128])
    p.add_argument("--consistency", type=_consistency, default=[(0.7, "one")],
                   help="comma list of phi:g, e.g. 0.7:one,0:expm1")
    p.add_argument("--seeds", type=_csv(int), default=[0, 1, 2])
    p.add_argument("--steps", type=int, default=FINETUNE_STEPS)
    p.add_argument("--thresholds", type=_thresholds, default=[0.5, 0.75])
    p.add_argument("--cpe.lambda", dest="loss_weight", type=float, default=0.5)

    p = command("plot", cmd_plot, "render embedding projections and PR curves (needs matplotlib)")
    p.add_argument("--out", required=True)
    p.add_argument("--embeddings")
    p.add_argument("--pr-curves", dest="pr_curves")
    return parser


def _option_dests(parser: argparse.ArgumentParser) -> dict[str, argparse.Action]:
    out = {}
    for a in parser._actions:
        for s in a.option_strings:
            if s.startswith("--"):
                out[s[2:]] = a
    return out


def parse_args(argv: Optional[Sequence[str]] = None) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config is None:
        return args
    sub = parser._subparsers._group_actions[0].choices[args.command]
    options = _option_dests(sub)
    values = read_config_file(args.config)
    unknown = sorted(set(values) - set(options))
    if unknown:
        raise CliError(f"{args.config}: unknown option(s) for {args.command}: {', '.join(unknown)}")
    # file values become defaults, so anything on the command line still wins
    defaults = {}
    for key, value in values.items():
        action = options[key]
        if isinstance(action, argparse._StoreTrueAction):
            defaults[action.dest] = _bool(value)
        else:
            defaults[action.dest] = value
    sub.set_defaults(**defaults)
    for action in sub._actions:
        if action.dest in defaults:
            action.required = False
    return parser.parse_args(argv)


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = parse_args(argv)
    except CliError as e:
        print(f"fsce: error: {e}", file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    # single-threaded kernels keep training bit-reproducible
    torch.set_num_threads(1)
    try:
        return args.func(args)
    except CliError as e:
        print(f"fsce: error: {e}", file=sys.stderr)
        return 1
    except (FileNotFoundError, ValueError) as e:
        print(f"fsce: error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
