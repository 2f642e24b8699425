"""Command-line entry point.

Subcommands: gen-data, train, eval, eval-grid, edit, mix, augment,
train-classifier, serve. Artifacts (CSV tables, PNG figures, checkpoints)
land in the chosen output directory; stdout carries the metric tables.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import sys
from pathlib import Path

import numpy as np
import torch

from . import edit as edit_ops
from . import evaluate as ev
from . import figures, persist, trainer
from .data import Manifest, SyntheticSpec, generate_synthetic, split
from .model import MODEL_CONFIGS, PRESETS, ModelConfig, named_config, parse_keyvalue_file
from .objectives import WEIGHT_PRESETS, LossWeights
from .trainer import SSLConfig, TrainConfig

RUN_SPEC_KEYS = {
    "preset", "data", "outdir", "model", "epochs", "batch_size", "seed", "lr",
    "beta1", "beta2", "adversarial_kind", "ssl_labeled_per_batch", "ssl_label_fraction",
    "weights",
} | {f"lambda_{k}" for k in LossWeights().to_dict()}


def load_run_spec(path: Path) -> dict:
    spec = parse_keyvalue_file(path)
    unknown = set(spec) - RUN_SPEC_KEYS
    if unknown:
        raise SystemExit(f"error: unknown run spec keys: {sorted(unknown)}")
    return spec


def resolve_model(name_or_path: str) -> ModelConfig:
    if name_or_path in MODEL_CONFIGS:
        return named_config(name_or_path)
    return ModelConfig.load(name_or_path)


def build_train_config(args, spec: dict) -> TrainConfig:
    def pick(key, default, cast):
        if getattr(args, key.replace("-", "_"), None) is not None:
            return cast(getattr(args, key.replace("-", "_")))
        if key in spec:
            return cast(spec[key])
        return default

    weights_name = pick("weights", "desk", str)
    if weights_name not in WEIGHT_PRESETS:
        raise SystemExit(f"error: unknown weight preset {weights_name!r}")
    weights = WEIGHT_PRESETS[weights_name]
    overrides = {}
    for key in LossWeights().to_dict():
        sk = f"lambda_{key}"
        v = getattr(args, sk, None)
        if v is None and sk in spec:
            v = spec[sk]
        if v is not None:
            overrides[key] = float(v)
    if overrides:
        weights = weights.override(**overrides)

    ssl = None
    lpb = pick("ssl_labeled_per_batch", None, int)
    frac = pick("ssl_label_fraction", None, float)
    if lpb is not None or frac is not None:
        ssl = SSLConfig(labeled_per_batch=lpb or 8, label_fraction=frac if frac is not None else 1.0)

    return TrainConfig(
        preset=pick("preset", "DualDis", str),
        weights=weights,
        epochs=pick("epochs", 30, int),
        batch_size=pick("batch_size", 64, int),
        seed=pick("seed", 0, int),
        lr=pick("lr", 0.001, float),
        beta1=pick("beta1", 0.9, float),
        beta2=pick("beta2", 0.999, float),
        adversarial_kind=pick("adversarial_kind", "inverse-label", str),
        ssl=ssl,
    )


def cmd_gen_data(args) -> int:
    spec = SyntheticSpec(
        n_classes=args.classes,
        samples_per_class=args.samples_per_class,
        image_size=args.image_size,
        channels=args.channels,
        seed=args.seed,
    )
    manifest = generate_synthetic(spec, args.outdir)
    manifest = split(manifest, args.test_fraction, args.val_fraction, args.seed)
    out_csv = Path(args.outdir) / "manifest.csv"
    manifest.save(out_csv)
    counts = {tag: len(manifest.subset(tag)) for tag in ("train", "val", "test")}
    print(f"wrote {len(manifest.rows)} images to {args.outdir} ({counts})")
    print(f"manifest: {out_csv}")
    return 0


def cmd_train(args) -> int:
    spec = load_run_spec(Path(args.run_spec)) if args.run_spec else {}
    data = args.data or spec.get("data")
    outdir = args.outdir or spec.get("outdir")
    if not data or not outdir:
        raise SystemExit("error: --data and --outdir are required (directly or via --run-spec)")
    cfg = build_train_config(args, spec)
    model_cfg = resolve_model(args.model or spec.get("model", "desk"))
    manifest = Manifest.load(data)
    result = trainer.run(cfg, model_cfg, manifest, outdir, resume=args.resume)
    figures.loss_curves(Path(outdir) / "losses.csv")
    figures.metrics_history(Path(outdir) / "metrics.csv")
    last = result["metrics"][-1]
    print(ev.MetricsReport.header("epoch"))
    report = ev.MetricsReport(last["acc_y"], last["acc_z"], last["dis_y"], last["dis_z"])
    print(report.formatted_row(str(last["epoch"])))
    print(f"checkpoint: {result['checkpoint']}")
    return 0


def _eval_one(checkpoint: Path, manifest: Manifest, split_tag: str, probes: bool, batch_size: int):
    loaded = persist.load_checkpoint(checkpoint, inference_only=True)
    if probes or loaded.model.adversary_y is None:
        probe_y, probe_z = ev.train_probes(loaded.model, manifest)
        report = ev.evaluate_with_probes(loaded.model, probe_y, probe_z, manifest, split_tag, batch_size)
    else:
        report = ev.evaluate_model(loaded.model, manifest, split_tag, batch_size)
    return loaded, report


def cmd_eval(args) -> int:
    manifest = Manifest.load(args.data)
    loaded, report = _eval_one(Path(args.checkpoint), manifest, args.split, args.probes, args.batch_size)
    print(ev.MetricsReport.header())
    print(report.formatted_row(loaded.preset))
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        with open(out, "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=["preset", *report.to_dict().keys()])
            w.writeheader()
            w.writerow({"preset": loaded.preset, **report.to_dict()})
    return 0


def cmd_eval_grid(args) -> int:
    manifest = Manifest.load(args.data)
    model_cfg = resolve_model(args.model or "desk")
    presets = args.presets.split(",") if args.presets else list(PRESETS)
    outdir = Path(args.outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    rows = []
    print(ev.MetricsReport.header())
    for name in presets:
        cfg = dataclasses.replace(build_train_config(args, {}), preset=name)
        result = trainer.run(cfg, model_cfg, manifest, outdir / f"run_{name.replace(chr(39), 'p')}")
        report = ev.evaluate_model(result["model"], manifest, "test", cfg.batch_size)
        rows.append({"preset": name, **report.to_dict()})
        print(report.formatted_row(name))
    grid_csv = outdir / "grid.csv"
    with open(grid_csv, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=list(rows[0].keys()))
        w.writeheader()
        w.writerows(rows)
    figures.grid_figure(grid_csv)
    print(f"grid table: {grid_csv}")
    return 0


def cmd_edit(args) -> int:
    loaded = persist.load_checkpoint(args.checkpoint, inference_only=True)
    manifest = Manifest.load(args.data)
    rows = manifest.subset(args.split)
    row = rows[args.index]
    from .data import ImageStore

    store = ImageStore(manifest.root)
    x = torch.from_numpy(store.get(row.filename)).unsqueeze(0)
    pair = loaded.model.encode(x)
    outdir = Path(args.outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    epsilons = np.linspace(-args.magnitude, args.magnitude, args.steps)
    names = loaded.config.attribute_names or [str(i) for i in range(loaded.config.n_attributes)]
    attrs = [int(a) for a in args.attributes.split(",")] if args.attributes else list(range(loaded.config.n_attributes))
    grid = []
    for attr in attrs:
        imgs = []
        for _, image, _ in edit_ops.sweep(loaded.model, pair, attr, epsilons):
            imgs.append(image.clamp(0, 1).squeeze(0).numpy())
        grid.append(imgs)
    out_png = outdir / f"edit_{row.filename.replace('.png', '')}.png"
    figures.edit_sweep_grid(grid, [names[a] for a in attrs], [f"{e:+.2f}" for e in epsilons], out_png)
    print(f"edit sweep grid: {out_png}")
    return 0


def cmd_mix(args) -> int:
    loaded = persist.load_checkpoint(args.checkpoint, inference_only=True)
    manifest = Manifest.load(args.data)
    rows = manifest.subset(args.split)
    from .data import ImageStore, save_image

    store = ImageStore(manifest.root)
    xa = torch.from_numpy(store.get(rows[args.identity_index].filename)).unsqueeze(0)
    xb = torch.from_numpy(store.get(rows[args.attribute_index].filename)).unsqueeze(0)
    pa, pb = loaded.model.encode(xa), loaded.model.encode(xb)
    image = edit_ops.mix(loaded.model, pa, pb).clamp(0, 1)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_image(image.squeeze(0).numpy(), out)
    audit = loaded.model.heads(loaded.model.encode(image))
    print(f"mixed image: {out}")
    print(f"audit class prediction: {int(audit[0].argmax())} (identity source was {rows[args.identity_index].y})")
    return 0


def cmd_augment(args) -> int:
    loaded = persist.load_checkpoint(args.checkpoint, inference_only=True)
    manifest = Manifest.load(args.data)
    if args.calibration and Path(args.calibration).exists():
        names = loaded.config.attribute_names or [str(i) for i in range(loaded.config.n_attributes)]
        epsilons = edit_ops.load_epsilon_table(args.calibration, names)
    else:
        epsilons = edit_ops.calibrate_epsilons(loaded.model, manifest)
        if args.calibration:
            names = loaded.config.attribute_names or [str(i) for i in range(loaded.config.n_attributes)]
            edit_ops.save_epsilon_table(epsilons, names, args.calibration)
    plan = edit_ops.uniform_plan(loaded.config.n_attributes, args.ngen, seed=args.seed)
    generated = edit_ops.plan_augmentation(manifest, plan, loaded.model, epsilons, args.outdir)
    print(f"generated {len(generated.rows)} images into {args.outdir}")
    print(f"manifest: {Path(args.outdir) / 'manifest.csv'}")
    return 0


def cmd_train_classifier(args) -> int:
    manifests = [Manifest.load(p) for p in args.data]
    model_cfg = resolve_model(args.model)
    eval_manifest = manifests[0]
    _, accuracy = trainer.retrain_classifier(
        manifests,
        model_cfg,
        eval_manifest,
        eval_split=args.split,
        epochs=args.epochs,
        batch_size=args.batch_size,
        lr=args.lr,
        seed=args.seed,
    )
    print(f"classifier accuracy on {args.split}: {accuracy:.1f}%")
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        new_row = {"n_gen": args.ngen if args.ngen is not None else "", "accuracy": f"{accuracy:.4f}"}
        rows = []
        if out.exists():
            with open(out, newline="") as f:
                rows = list(csv.DictReader(f))
        rows.append(new_row)
        with open(out, "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=["n_gen", "accuracy"])
            w.writeheader()
            w.writerows(rows)
        if all(r["n_gen"] != "" for r in rows) and len(rows) > 1:
            figures.augmentation_trend(out)
    return 0


def cmd_serve(args) -> int:
    from .service import serve

    serve(args.checkpoint, port=args.port, host=args.host, max_payload=args.max_payload, static_dir=args.static)
    return 0


def _add_train_flags(p):
    p.add_argument("--preset", choices=list(PRESETS) + ["Bp", "Dp"], default=None)
    p.add_argument("--model", default=None, help="named model config (desk/celeba/yale/norb) or a config file")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--beta1", type=float, default=None)
    p.add_argument("--beta2", type=float, default=None)
    p.add_argument("--weights", default=None, help="loss-weight preset name (desk/celeba/yale/norb)")
    p.add_argument("--adversarial-kind", default=None, choices=["inverse-label", "max-entropy", "uniform-cross-entropy"])
    p.add_argument("--ssl-labeled-per-batch", type=int, default=None, dest="ssl_labeled_per_batch")
    p.add_argument("--ssl-label-fraction", type=float, default=None, dest="ssl_label_fraction")
    for key in LossWeights().to_dict():
        p.add_argument(f"--lambda-{key.replace('_', '-')}", type=float, default=None, dest=f"lambda_{key}")


def main(argv=None) -> int:
    torch.set_num_threads(1)
    parser = argparse.ArgumentParser(prog="dualdis", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate the synthetic glyph dataset")
    p.add_argument("--outdir", required=True)
    p.add_argument("--classes", type=int, default=5)
    p.add_argument("--samples-per-class", type=int, default=300)
    p.add_argument("--image-size", type=int, default=32)
    p.add_argument("--channels", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--test-fraction", type=float, default=0.2)
    p.add_argument("--val-fraction", type=float, default=0.2)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model variant")
    p.add_argument("--run-spec", default=None, help="key = value run description file")
    p.add_argument("--data", default=None, help="dataset manifest CSV")
    p.add_argument("--outdir", default=None)
    p.add_argument("--resume", action="store_true")
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint (one table row)")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--probes", action="store_true", help="retrain post-hoc probe adversaries")
    p.add_argument("--out", default=None, help="CSV output path")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("eval-grid", help="train and evaluate every preset on one dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--outdir", required=True)
    p.add_argument("--presets", default=None, help="comma-separated subset")
    _add_train_flags(p)
    p.set_defaults(func=cmd_eval_grid)

    p = sub.add_parser("edit", help="render an attribute-by-magnitude edit sweep")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--attributes", default=None, help="comma-separated attribute indices")
    p.add_argument("--magnitude", type=float, default=3.0)
    p.add_argument("--steps", type=int, default=9)
    p.add_argument("--outdir", required=True)
    p.set_defaults(func=cmd_edit)

    p = sub.add_parser("mix", help="mix the identity of one image with the attributes of another")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--identity-index", type=int, required=True)
    p.add_argument("--attribute-index", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_mix)

    p = sub.add_parser("augment", help="generate guided augmentation images")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--ngen", type=int, required=True, help="generated images per class")
    p.add_argument("--outdir", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--calibration", default=None, help="epsilon table JSON (read, or written after calibration)")
    p.set_defaults(func=cmd_augment)

    p = sub.add_parser("train-classifier", help="retrain the identity classifier on (augmented) manifests")
    p.add_argument("--data", nargs="+", required=True, help="manifest CSVs; the first provides the eval split")
    p.add_argument("--model", default="desk")
    p.add_argument("--split", default="test")
    p.add_argument("--epochs", type=int, default=60)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--lr", type=float, default=0.001)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--ngen", type=int, default=None, help="recorded in the trend CSV")
    p.add_argument("--out", default=None, help="trend CSV to append to")
    p.set_defaults(func=cmd_train_classifier)

    p = sub.add_parser("serve", help="serve the latent-editing HTTP API")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--port", type=int, default=8008)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--max-payload", type=int, default=8_000_000)
    p.add_argument("--static", default=None, help="static UI bundle directory to mount")
    p.set_defaults(func=cmd_serve)

    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, RuntimeError, OSError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
