"""Two-optimizer adversarial training loop and run orchestration.

Each step runs one shared forward pass, backs the main loss into the
encoders/decoder/heads and steps their optimizer, then backs the
discriminative loss into the adversaries and steps theirs (main first,
then disc, within the same batch). All randomness flows from one master
seed, so equal seeds give bitwise-equal loss curves and resumed runs
continue the unbroken curve exactly.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np
import torch
from torch import nn

from .data import ImageStore, LabeledBatch, Manifest, ManifestRow, load_batches, rows_to_batch
from .layers import assert_finite_gradients, build_cnn, make_adam, stack_output_shape
from .model import DualDisModel, ModelConfig, build_model
from .objectives import INVERSE_LABEL, LossWeights, forward_pass, total_losses


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class SSLConfig:
    labeled_per_batch: int
    label_fraction: float = 1.0


@dataclass(frozen=True)
class TrainConfig:
    preset: str = "DualDis"
    weights: LossWeights = field(default_factory=LossWeights)
    epochs: int = 30
    batch_size: int = 64
    seed: int = 0
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    adversarial_kind: str = INVERSE_LABEL
    ssl: Optional[SSLConfig] = None
    checkpoint_every: int = 1
    eval_every: int = 1


# Published run settings per dataset (batch size, epochs); the desk entry is
# the package's own CPU-scale default.
TRAIN_PRESETS: dict[str, tuple[int, int]] = {
    "celeba": (32, 330),
    "yale": (64, 400),
    "norb": (128, 250),
    "desk": (64, 30),
}

SSL_LABELED_PER_BATCH = {4000: 10, 2000: 10, 1000: 8, 400: 8}


def epoch_seed(master: int, epoch: int) -> int:
    return int(np.random.SeedSequence([master, epoch]).generate_state(1)[0])


def make_optimizers(model: DualDisModel, cfg: TrainConfig):
    opt_main = make_adam(model.main_parameters(), cfg.lr, cfg.beta1, cfg.beta2)
    opt_disc = make_adam(model.disc_parameters(), cfg.lr, cfg.beta1, cfg.beta2)
    return opt_main, opt_disc


def train_step(
    model: DualDisModel,
    batch: LabeledBatch,
    weights: LossWeights,
    opt_main,
    opt_disc,
    kind: str = INVERSE_LABEL,
) -> dict[str, float]:
    """One optimization step; raises naming the first non-finite term."""
    model.train()
    outputs = forward_pass(model, batch)
    main, disc, terms = total_losses(model, outputs, batch, weights, kind)
    for name, value in terms.items():
        if not math.isfinite(value):
            raise TrainingError(f"loss term {name!r} is not finite ({value})")
    opt_main.zero_grad(set_to_none=True)
    main.backward()
    assert_finite_gradients(model.named_parameters())
    opt_main.step()
    opt_disc.zero_grad(set_to_none=True)
    disc.backward()
    assert_finite_gradients(model.named_parameters())
    opt_disc.step()
    return terms


def ssl_batches(
    labeled: Sequence[ManifestRow],
    unlabeled: Sequence[ManifestRow],
    labeled_per_batch: int,
    batch_size: int,
    seed: int,
) -> Iterator[tuple[list[ManifestRow], list[bool]]]:
    """Batch composition for semi-supervised runs.

    Labeled and unlabeled rows are iterated independently; an epoch is one
    pass over the unlabeled set, and the labeled set is recycled with a
    reshuffle whenever it runs out (so its samples are seen more than once
    per epoch). Every batch carries exactly ``labeled_per_batch`` rows with
    attribute labels. ``labeled_per_batch == batch_size`` degenerates to a
    fully supervised pass over the labeled set.
    """
    if labeled_per_batch > batch_size:
        raise TrainingError("labeled_per_batch must not exceed batch_size")
    if not labeled:
        raise TrainingError("semi-supervised run with an empty labeled set")
    rng = np.random.default_rng(seed)
    if labeled_per_batch == batch_size:
        lab = [labeled[i] for i in rng.permutation(len(labeled))]
        for start in range(0, len(lab), batch_size):
            chunk_rows = lab[start : start + batch_size]
            yield chunk_rows, [True] * len(chunk_rows)
        return
    unl = [unlabeled[i] for i in rng.permutation(len(unlabeled))]
    lab_order: list[ManifestRow] = []

    def next_labeled(k: int) -> list[ManifestRow]:
        nonlocal lab_order
        out = []
        while len(out) < k:
            if not lab_order:
                lab_order = [labeled[i] for i in rng.permutation(len(labeled))]
            out.append(lab_order.pop())
        return out

    chunk = batch_size - labeled_per_batch
    for start in range(0, len(unl), chunk):
        u = unl[start : start + chunk]
        l = next_labeled(labeled_per_batch)
        rows = l + u
        flags = [True] * len(l) + [False] * len(u)
        yield rows, flags


@dataclass
class RunState:
    epoch: int = 0
    step: int = 0


class LossLog:
    """Long-format CSV of per-step loss terms: step, term, value."""

    def __init__(self, path: Path):
        self.path = path
        self.rows: list[tuple[int, str, float]] = []

    def append(self, step: int, terms: dict[str, float]):
        for name, value in terms.items():
            self.rows.append((step, name, value))

    def truncate_after(self, step: int):
        self.rows = [r for r in self.rows if r[0] <= step]

    def save(self):
        with open(self.path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["step", "term", "value"])
            w.writerows(self.rows)

    @classmethod
    def load(cls, path: Path) -> "LossLog":
        log = cls(path)
        if path.exists():
            with open(path, newline="") as f:
                reader = csv.reader(f)
                next(reader, None)
                log.rows = [(int(s), t, float(v)) for s, t, v in reader]
        return log


def run(
    train_cfg: TrainConfig,
    model_cfg: ModelConfig,
    manifest: Manifest,
    out_dir: Path | str,
    resume: bool = False,
) -> dict:
    """Train a model on the manifest's train split; returns a summary dict.

    Writes ``losses.csv`` (per-step terms), ``metrics.csv`` (per-epoch
    validation metrics) and ``checkpoint.ddck`` under ``out_dir``.
    """
    from . import evaluate as ev
    from . import persist

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt_path = out_dir / "checkpoint.ddck"
    loss_log = LossLog(out_dir / "losses.csv")
    state = RunState()

    if resume and ckpt_path.exists():
        loaded = persist.load_checkpoint(ckpt_path)
        model = loaded.model
        opt_main, opt_disc = make_optimizers(model, train_cfg)
        persist.restore_optimizers(loaded, opt_main, opt_disc)
        state = RunState(**loaded.stream)
        loss_log = LossLog.load(loss_log.path)
        loss_log.truncate_after(state.step)
    else:
        model = build_model(model_cfg, train_cfg.preset, seed=train_cfg.seed)
        opt_main, opt_disc = make_optimizers(model, train_cfg)

    store = ImageStore(manifest.root)
    train_rows = sorted(manifest.subset("train"), key=lambda r: r.filename)
    labeled_set: Optional[set[str]] = None
    if train_cfg.ssl is not None and train_cfg.ssl.label_fraction < 1.0:
        from .data import choose_labeled

        labeled_set = choose_labeled(manifest, train_cfg.ssl.label_fraction, train_cfg.seed)

    metrics_rows: list[dict] = []
    for epoch in range(state.epoch, train_cfg.epochs):
        shuffle = epoch_seed(train_cfg.seed, epoch)
        if labeled_set is not None:
            lab = [r for r in train_rows if r.filename in labeled_set]
            unl = [r for r in train_rows if r.filename not in labeled_set]
            batches = (
                rows_to_batch(rows, store, labeled_set)
                for rows, _ in ssl_batches(lab, unl, train_cfg.ssl.labeled_per_batch, train_cfg.batch_size, shuffle)
            )
        else:
            batches = load_batches(manifest, "train", train_cfg.batch_size, shuffle, store)
        for batch in batches:
            terms = train_step(model, batch, train_cfg.weights, opt_main, opt_disc, train_cfg.adversarial_kind)
            state.step += 1
            loss_log.append(state.step, terms)
        state.epoch = epoch + 1

        if state.epoch % train_cfg.eval_every == 0 or state.epoch == train_cfg.epochs:
            report = ev.evaluate_model(model, manifest, "val", batch_size=train_cfg.batch_size)
            metrics_rows.append({"epoch": state.epoch, **report.to_dict()})
        if state.epoch % train_cfg.checkpoint_every == 0 or state.epoch == train_cfg.epochs:
            persist.save_checkpoint(
                ckpt_path,
                model,
                optimizers=(opt_main, opt_disc),
                stream={"epoch": state.epoch, "step": state.step},
                train_config=train_config_dict(train_cfg),
            )
            loss_log.save()

    loss_log.save()
    _write_metrics_csv(out_dir / "metrics.csv", metrics_rows)
    return {"checkpoint": ckpt_path, "model": model, "metrics": metrics_rows, "steps": state.step}


def train_config_dict(cfg: TrainConfig) -> dict:
    d = {
        "preset": cfg.preset,
        "epochs": cfg.epochs,
        "batch_size": cfg.batch_size,
        "seed": cfg.seed,
        "lr": cfg.lr,
        "beta1": cfg.beta1,
        "beta2": cfg.beta2,
        "adversarial_kind": cfg.adversarial_kind,
        "weights": cfg.weights.to_dict(),
    }
    if cfg.ssl is not None:
        d["ssl"] = {"labeled_per_batch": cfg.ssl.labeled_per_batch, "label_fraction": cfg.ssl.label_fraction}
    return d


def _write_metrics_csv(path: Path, rows: list[dict]):
    if not rows:
        return
    keys = list(rows[0].keys())
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=keys)
        w.writeheader()
        for row in rows:
            w.writerow(row)


# ---------------------------------------------------------------------------
# classifier retraining for the augmentation protocol


class ClassifierNet(nn.Module):
    """Plain classifier with the identity branch's architecture (no decoder,
    no adversaries), retrained from scratch for augmentation experiments."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        hw = (config.image_size, config.image_size)
        self.encoder = build_cnn(config.encoder, config.image_channels, hw, role="encoder")
        trunk = stack_output_shape(config.encoder, (config.image_channels, *hw))
        self.encoder_y = build_cnn(config.encoder_y, trunk[0], trunk[1:], role="encoder")
        self.head_y = nn.Linear(config.dim_hy, config.n_classes)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head_y(self.encoder_y(self.encoder(x)).flatten(1))


def retrain_classifier(
    manifests: Sequence[Manifest],
    model_cfg: ModelConfig,
    eval_manifest: Manifest,
    eval_split: str = "test",
    epochs: int = 400,
    batch_size: int = 64,
    lr: float = 0.001,
    seed: int = 0,
) -> tuple[ClassifierNet, float]:
    """Train a fresh classifier on the union of the given manifests' train
    rows and report accuracy on the held-out split."""
    torch.manual_seed(seed)
    net = ClassifierNet(model_cfg)
    opt = make_adam(net.parameters(), lr)
    stores = [ImageStore(m.root) for m in manifests]
    pools = [sorted(m.subset("train"), key=lambda r: r.filename) for m in manifests]
    indexed = [(si, row) for si, rows in enumerate(pools) for row in rows]
    ce = nn.CrossEntropyLoss()
    for epoch in range(epochs):
        rng = np.random.default_rng(epoch_seed(seed, epoch))
        order = rng.permutation(len(indexed))
        net.train()
        for start in range(0, len(order), batch_size):
            chunk = [indexed[i] for i in order[start : start + batch_size]]
            x = torch.from_numpy(np.stack([stores[si].get(r.filename) for si, r in chunk]))
            y = torch.tensor([r.y for _, r in chunk], dtype=torch.int64)
            loss = ce(net(x), y)
            if not torch.isfinite(loss):
                raise TrainingError("classifier loss is not finite")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
    net.eval()
    correct = total = 0
    with torch.no_grad():
        for batch in load_batches(eval_manifest, eval_split, batch_size):
            pred = net(batch.x).argmax(dim=1)
            correct += int((pred == batch.y).sum())
            total += len(batch.y)
    return net, 100.0 * correct / max(total, 1)
