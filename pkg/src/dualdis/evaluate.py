"""Metric suite: head accuracies, adversary error rates, probe classifiers
for models without native adversaries, and the aggregated score.

Scores are percentages. Disentangling is reported as the adversary's error
rate (100 - accuracy), so higher is better everywhere; the aggregated score
averages the four values and rounds half-up to one decimal. Metrics that do
not exist for a variant (the attribute branch under the attribute-decoder
preset) are reported as None and render as ``--``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch

from .data import ImageStore, Manifest, load_batches
from .layers import build_mlp, make_adam
from .model import DualDisModel
from .objectives import loss_attr, loss_class


class EvaluationError(ValueError):
    pass


def round_half_up(value: float, decimals: int = 1) -> float:
    scale = 10.0**decimals
    return math.floor(value * scale + 0.5) / scale


def aggregated(scores: Sequence[Optional[float]]) -> Optional[float]:
    """Mean of the four scores, one-decimal half-up; None if any is missing."""
    if any(s is None for s in scores):
        return None
    if not all(math.isfinite(s) for s in scores):
        raise EvaluationError(f"non-finite score in {scores}")
    return round_half_up(sum(scores) / len(scores))


@dataclass
class MetricsReport:
    acc_y: Optional[float]
    acc_z: Optional[float]
    dis_y: Optional[float]
    dis_z: Optional[float]
    native_adversaries: bool = True

    @property
    def aggregated(self) -> Optional[float]:
        return aggregated((self.acc_y, self.acc_z, self.dis_y, self.dis_z))

    def to_dict(self) -> dict:
        return {
            "acc_y": self.acc_y,
            "acc_z": self.acc_z,
            "dis_y": self.dis_y,
            "dis_z": self.dis_z,
            "aggregated": self.aggregated,
            "native_adversaries": self.native_adversaries,
        }

    def formatted_row(self, label: str = "") -> str:
        def fmt(v):
            return "   --" if v is None else f"{v:5.1f}"

        cells = [fmt(self.aggregated), fmt(self.acc_y), fmt(self.acc_z), fmt(self.dis_y), fmt(self.dis_z)]
        probe = "" if self.native_adversaries else "  (probe)"
        return f"{label:10s} {'  '.join(cells)}{probe}"

    @staticmethod
    def header(label: str = "model") -> str:
        return f"{label:10s} {'aggr.':>5s}  {'acc_y':>5s}  {'acc_z':>5s}  {'dis_y':>5s}  {'dis_z':>5s}"


@torch.no_grad()
def collect_predictions(model: DualDisModel, manifest: Manifest, split: str, batch_size: int = 64):
    """Eval-mode pass over a split: labels, head probabilities, adversary
    probabilities, stacked as numpy arrays (None where not applicable)."""
    model.eval()
    ys, zs, y_probs, z_probs, advy, advz = [], [], [], [], [], []
    n = 0
    for batch in load_batches(manifest, split, batch_size):
        n += len(batch.y)
        pair = model.encode(batch.x)
        yp, zp = model.heads(pair)
        ya, za = model.adversaries(pair)
        ys.append(batch.y.numpy())
        zs.append(batch.z.numpy())
        y_probs.append(yp.numpy())
        z_probs.append(None if zp is None else zp.numpy())
        advy.append(None if ya is None else ya.numpy())
        advz.append(za.numpy())
    if n == 0:
        raise EvaluationError(f"split {split!r} is empty")

    def cat(parts):
        return None if parts[0] is None else np.concatenate(parts)

    return cat(ys), cat(zs), cat(y_probs), cat(z_probs), cat(advy), cat(advz)


def accuracy_from_class_probs(y: np.ndarray, probs: np.ndarray) -> float:
    return 100.0 * float((probs.argmax(axis=1) == y).mean())


def accuracy_from_attr_probs(z: np.ndarray, probs: np.ndarray) -> float:
    """Mean per-attribute binary accuracy at the 0.5 threshold; soft targets
    are thresholded at 0.5 for scoring only."""
    truth = z >= 0.5
    pred = probs >= 0.5
    return 100.0 * float((truth == pred).mean())


def accuracy_y(model: DualDisModel, manifest: Manifest, split: str, batch_size: int = 64) -> float:
    y, _, yp, _, _, _ = collect_predictions(model, manifest, split, batch_size)
    return accuracy_from_class_probs(y, yp)


def accuracy_z(model: DualDisModel, manifest: Manifest, split: str, batch_size: int = 64) -> Optional[float]:
    _, z, _, zp, _, _ = collect_predictions(model, manifest, split, batch_size)
    return None if zp is None else accuracy_from_attr_probs(z, zp)


def disentangling(model: DualDisModel, manifest: Manifest, split: str, batch_size: int = 64):
    """(dis_y, dis_z): adversary error rates; dis_y is None without h_z."""
    y, z, _, _, ya, za = collect_predictions(model, manifest, split, batch_size)
    dis_y = None if ya is None else 100.0 - accuracy_from_class_probs(y, ya)
    dis_z = 100.0 - accuracy_from_attr_probs(z, za)
    return dis_y, dis_z


def evaluate_model(model: DualDisModel, manifest: Manifest, split: str, batch_size: int = 64) -> MetricsReport:
    y, z, yp, zp, ya, za = collect_predictions(model, manifest, split, batch_size)
    return MetricsReport(
        acc_y=accuracy_from_class_probs(y, yp),
        acc_z=None if zp is None else accuracy_from_attr_probs(z, zp),
        dis_y=None if ya is None else 100.0 - accuracy_from_class_probs(y, ya),
        dis_z=100.0 - accuracy_from_attr_probs(z, za),
    )


@dataclass(frozen=True)
class ProbeConfig:
    epochs: int = 100
    batch_size: int = 64
    lr: float = 0.001
    seed: int = 0


def train_probes(model: DualDisModel, manifest: Manifest, config: ProbeConfig = ProbeConfig()):
    """Train fresh adversaries on the frozen model's latents.

    The evaluated model is never touched: latents are detached and its
    parameters stay bit-identical (asserted).
    """
    before = {k: v.clone() for k, v in model.state_dict().items()}
    torch.manual_seed(config.seed)
    probe_y = None if model.encoder_z is None else build_mlp(model.config.adversary_y, model.config.dim_hz)
    probe_z = build_mlp(model.config.adversary_z, model.config.dim_hy)
    params = list(probe_z.parameters()) + ([] if probe_y is None else list(probe_y.parameters()))
    opt = make_adam(params, config.lr)

    model.eval()
    store = ImageStore(manifest.root)
    for epoch in range(config.epochs):
        seed = int(np.random.SeedSequence([config.seed, 31, epoch]).generate_state(1)[0])
        for batch in load_batches(manifest, "train", config.batch_size, seed, store):
            with torch.no_grad():
                pair = model.encode(batch.x)
            loss = loss_attr(batch.z, torch.sigmoid(probe_z(pair.h_y)))
            if probe_y is not None:
                loss = loss + loss_class(batch.y, torch.softmax(probe_y(pair.h_z), dim=1))
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()

    after = model.state_dict()
    for key, tensor in before.items():
        if not torch.equal(tensor, after[key]):
            raise EvaluationError(f"probe training modified evaluated model parameter {key!r}")
    return probe_y, probe_z


@torch.no_grad()
def evaluate_with_probes(
    model: DualDisModel, probe_y, probe_z, manifest: Manifest, split: str, batch_size: int = 64
) -> MetricsReport:
    model.eval()
    ys, zs, pys, pzs = [], [], [], []
    for batch in load_batches(manifest, split, batch_size):
        pair = model.encode(batch.x)
        ys.append(batch.y.numpy())
        zs.append(batch.z.numpy())
        if probe_y is not None:
            pys.append(torch.softmax(probe_y(pair.h_z), dim=1).numpy())
        pzs.append(torch.sigmoid(probe_z(pair.h_y)).numpy())
    y = np.concatenate(ys)
    z = np.concatenate(zs)
    base = evaluate_model(model, manifest, split, batch_size)
    dis_y = None if not pys else 100.0 - accuracy_from_class_probs(y, np.concatenate(pys))
    dis_z = 100.0 - accuracy_from_attr_probs(z, np.concatenate(pzs))
    return MetricsReport(acc_y=base.acc_y, acc_z=base.acc_z, dis_y=dis_y, dis_z=dis_z, native_adversaries=False)
