"""Command-line entry point for the whole pipeline.

Exit codes: 0 success, 1 validation/config error, 2 numerical-check
failure, 3 I/O error. Every command requires an explicit seed where
randomness is involved; nothing is seeded from the wall clock.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import checks, model as model_mod, optim, train as train_mod
from .data import Manifest, ManifestEntry, read_vvol, write_vvol
from .errors import BleedsegError
from .metrics import build_report, confusion, emit_report
from .model import ModelConfig, load_checkpoint, save_checkpoint, valid_tile_shapes
from .optim import GridSpec
from .phantom import DEFAULT_RECIPES, PhantomSpec, generate_phantom
from .preprocess import apply_pipeline
from .volume import LabelVolume, Volume


def _log(msg: str) -> None:
    print(msg, file=sys.stderr)


def cmd_gen_data(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    recipes = {c: DEFAULT_RECIPES[c] for c in range(1, args.classes + 1)}
    entries = []
    for i in range(args.count):
        spec = PhantomSpec(
            extents=(args.extent,) * 3, recipes=recipes,
            noise=args.noise, seed=args.seed + i,
        )
        img, lab = generate_phantom(spec)
        img_name, lab_name = f"phantom_{i:04d}_img.vvol", f"phantom_{i:04d}_lab.vvol"
        write_vvol(out / img_name, img)
        write_vvol(out / lab_name, lab)
        entries.append((img_name, lab_name))
        _log(f"wrote phantom {i + 1}/{args.count}")

    n_train = round(args.count * 0.70)
    n_val = round(args.count * 0.15)
    manifest = Manifest(
        num_classes=args.classes + 1,
        class_names=["background"] + [f"lesion_{c}" for c in range(1, args.classes + 1)],
    )
    for i, (img_name, lab_name) in enumerate(entries):
        split = "train" if i < n_train else ("val" if i < n_train + n_val else "test")
        manifest.entries.append(ManifestEntry(img_name, lab_name, split))
    manifest.save(out / "manifest.json")
    return 0


def cmd_preprocess(args) -> int:
    with open(args.pipeline, "r", encoding="utf-8") as f:
        steps = json.load(f)["steps"]
    in_root = Path(args.in_manifest).parent
    manifest = Manifest.load(args.in_manifest)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i, e in enumerate(manifest.entries):
        img = read_vvol(in_root / e.image)
        lab = read_vvol(in_root / e.label)
        lab.num_classes = manifest.num_classes
        img2, lab2 = apply_pipeline(img, lab, steps, seed=(args.seed + i))
        write_vvol(out / e.image, img2.astype(np.float32))
        write_vvol(out / e.label, lab2)
        _log(f"processed {e.image}")
    manifest.save(out / "manifest.json")
    return 0


def cmd_train(args) -> int:
    run = train_mod.RunConfig.load(args.config)
    root = Path(run.manifest).parent
    manifest = Manifest.load(run.manifest)
    pairs = train_mod.load_pairs(manifest, root, "train")
    if not pairs:
        raise BleedsegError("manifest has no training entries")

    if args.resume:
        model, opt_dict, start_step = load_checkpoint(args.resume)
        opt_state = optim.optimizer_state_from_dict(opt_dict) if opt_dict else None
    else:
        model = model_mod.build(run.model, run.seed)
        opt_state, start_step = None, 0

    def on_step(step, loss, state):
        _log(f"step {step}: loss {loss:.6f}")
        if run.checkpoint_every and (step + 1) % run.checkpoint_every == 0:
            save_checkpoint(
                model, run.checkpoint,
                optimizer_state=optim.optimizer_state_dict(state),
                step=step + 1,
            )

    losses, opt_state = train_mod.train_model(
        model, pairs, run, opt_state=opt_state, start_step=start_step,
        on_step=on_step,
    )
    save_checkpoint(
        model, run.checkpoint,
        optimizer_state=optim.optimizer_state_dict(opt_state),
        step=start_step + run.steps,
    )
    train_mod.write_loss_csv(run.loss_csv, losses, start_step)
    return 0


def cmd_gridsearch(args) -> int:
    with open(args.grid, "r", encoding="utf-8") as f:
        doc = json.load(f)
    budget = int(doc.pop("budget", 50))
    spec = GridSpec(
        learning_rates=tuple(doc.get("learning_rates", GridSpec.learning_rates)),
        dropouts=tuple(doc.get("dropouts", GridSpec.dropouts)),
        conv_kernels=tuple(doc.get("conv_kernels", GridSpec.conv_kernels)),
        pool_kernels=tuple(doc.get("pool_kernels", GridSpec.pool_kernels)),
    )
    run = train_mod.RunConfig.load(args.config)
    root = Path(run.manifest).parent
    manifest = Manifest.load(run.manifest)
    train_pairs = train_mod.load_pairs(manifest, root, "train")
    val_pairs = train_mod.load_pairs(manifest, root, "val") or train_pairs

    import dataclasses

    def objective(cell, steps):
        cfg = dataclasses.replace(
            run.model,
            dropout_p=cell["dropout"],
            conv_kernel=cell["conv_kernel"],
            pool_kernel=cell["pool_kernel"],
        )
        cell_run = dataclasses.replace(run, model=cfg, lr=cell["lr"], steps=steps)
        m = model_mod.build(cfg, run.seed)
        train_mod.train_model(m, train_pairs, cell_run)
        return train_mod.mean_foreground_iou(m, val_pairs)

    results = optim.grid_search(spec, budget, objective)
    optim.write_grid_csv(results, args.out)
    best = results[0]
    _log(f"best cell: {best}")
    return 0


def cmd_predict(args) -> int:
    model, _, _ = load_checkpoint(args.checkpoint)
    img = read_vvol(args.infile)
    if not isinstance(img, Volume):
        raise BleedsegError(f"{args.infile} is not a float volume")
    labels, probs = train_mod.predict_volume(model, img)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_vvol(str(out) + "_labels.vvol", labels)
    write_vvol(str(out) + "_probs.vvol", Volume(probs))
    return 0


def cmd_eval(args) -> int:
    pred_manifest = Manifest.load(args.pred_manifest)
    truth_manifest = Manifest.load(args.truth_manifest)
    pred_root = Path(args.pred_manifest).parent
    truth_root = Path(args.truth_manifest).parent
    c = truth_manifest.num_classes
    total = np.zeros((c, c), dtype=np.int64)
    scores = {cls: [] for cls in range(1, c)}
    truths = []
    have_probs = True
    for pe, te in zip(pred_manifest.entries, truth_manifest.entries):
        pred = read_vvol(pred_root / pe.label)
        truth = read_vvol(truth_root / te.label)
        pred.num_classes = truth.num_classes = c
        total += confusion(pred, truth, c)
        probs = read_vvol(pred_root / pe.image)
        if isinstance(probs, Volume) and probs.channels == c:
            for cls in range(1, c):
                scores[cls].append(probs.data[cls].ravel())
            truths.append(truth.data.ravel())
        else:
            have_probs = False
    names = truth_manifest.class_names or None
    if have_probs and truths:
        truth_flat = LabelVolume(np.concatenate(truths).reshape(1, 1, -1), num_classes=c)
        flat_scores = {cls: np.concatenate(v) for cls, v in scores.items()}
        report = build_report(total, names, flat_scores, truth_flat)
    else:
        report = build_report(total, names)
    emit_report(report, args.report, fmt=args.format)
    return 0


def cmd_gradcheck(args) -> int:
    results = checks.run_suite(range(args.seeds))
    ok = True
    for name, worst in results.items():
        if name.startswith("_"):
            continue
        tol = results["_net_tol"] if name == "network" else results["_op_tol"]
        status = "ok" if worst < tol else "FAIL"
        ok &= worst < tol
        _log(f"{name}: max rel err {worst:.3e} (tol {tol:g}) {status}")
    return 0 if ok else 2


def cmd_shapes(args) -> int:
    cfg = ModelConfig(
        depth=args.depth, conv_kernel=args.conv_kernel, pool_kernel=args.pool_kernel,
        base_channels=1, num_classes=2, dropout_p=0.0,
    )
    rows = valid_tile_shapes(cfg, (args.lo, args.hi))
    print("input,output")
    for s, o in rows:
        print(f"{s},{o}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="bleedseg", description="Volumetric bleed-segmentation pipeline"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate synthetic phantom volumes")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--extent", type=int, default=60)
    p.add_argument("--noise", type=float, default=0.015)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("preprocess", help="replay a preprocessing pipeline")
    p.add_argument("--pipeline", required=True)
    p.add_argument("--in-manifest", dest="in_manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("train", help="train from a run config")
    p.add_argument("--config", required=True)
    p.add_argument("--resume")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("gridsearch", help="hyperparameter grid search")
    p.add_argument("--grid", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gridsearch)

    p = sub.add_parser("predict", help="segment one volume")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("eval", help="compare predictions against truth")
    p.add_argument("--pred-manifest", dest="pred_manifest", required=True)
    p.add_argument("--truth-manifest", dest="truth_manifest", required=True)
    p.add_argument("--report", required=True)
    p.add_argument("--format", choices=["json", "csv"], default="json")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--seeds", type=int, default=20)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("shapes", help="print valid tile extents")
    p.add_argument("--depth", type=int, default=4)
    p.add_argument("--conv-kernel", type=int, default=3)
    p.add_argument("--pool-kernel", type=int, default=2)
    p.add_argument("--lo", type=int, default=20)
    p.add_argument("--hi", type=int, default=100)
    p.set_defaults(func=cmd_shapes)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except BleedsegError as e:
        _log(f"error: {e}")
        return 1
    except OSError as e:
        _log(f"I/O error: {e}")
        return 3


if __name__ == "__main__":
    sys.exit(main())
