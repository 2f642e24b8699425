"""Latent-space semantic editing and the guided augmentation planner.

Editing moves the attribute latent along a row of the attribute head:
``h_z' = h_z + eps * w_i``. Because the head is linear, the i-th logit
shifts by exactly ``eps * ||w_i||^2``, which makes the edit magnitude
calibratable and the predicted probability strictly monotone in ``eps``.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .data import ImageStore, Manifest, ManifestRow, load_batches, save_image
from .model import DualDisModel, LatentPair


class EditError(ValueError):
    pass


def attribute_direction(model: DualDisModel, attribute: int) -> torch.Tensor:
    if model.head_z is None:
        raise EditError(f"preset {model.preset.name} has no attribute head to edit along")
    w = model.head_z.weight
    if not 0 <= attribute < w.shape[0]:
        raise EditError(f"attribute index {attribute} outside 0..{w.shape[0] - 1}")
    return w[attribute].detach()


@torch.no_grad()
def slide(model: DualDisModel, pair: LatentPair, attribute: int, epsilon: float):
    """Move h_z along the attribute direction; returns (decoded image,
    post-edit attribute probabilities, edited latent pair)."""
    model.eval()
    w = attribute_direction(model, attribute)
    h_z = pair.h_z + epsilon * w.unsqueeze(0)
    edited = LatentPair(pair.h_y, h_z)
    image = model.decode(pair.h_y, h_z)
    z_probs = torch.sigmoid(model.attr_logits(h_z, blocked=True))
    return image, z_probs, edited


@torch.no_grad()
def sweep(model: DualDisModel, pair: LatentPair, attribute: int, epsilons: Sequence[float]):
    """Attribute probabilities (and images) across an epsilon grid."""
    out = []
    for eps in epsilons:
        image, z_probs, _ = slide(model, pair, attribute, float(eps))
        out.append((float(eps), image, z_probs))
    return out


@torch.no_grad()
def flip_epsilon(model: DualDisModel, pair: LatentPair, attribute: int, eps_star: float) -> torch.Tensor:
    """Per-sample signed edit magnitude that flips the predicted attribute.

    The sign opposes the current prediction and the move targets the logit
    ``sign * eps_star * ||w||^2``; samples already past that target are not
    moved backward (the magnitude shrinks toward zero instead).
    """
    if eps_star <= 0:
        raise EditError(f"attribute {attribute} has no calibrated edit magnitude")
    w = attribute_direction(model, attribute)
    logits = model.attr_logits(pair.h_z, blocked=True)[:, attribute]
    sign = torch.where(logits >= 0, -1.0, 1.0)
    shift = (eps_star - sign * logits / float(w.pow(2).sum())).clamp_min(0.0)
    return sign * shift


@torch.no_grad()
def flip(model: DualDisModel, pair: LatentPair, attribute: int, eps_star: float):
    """Flip the model's own prediction for one attribute; returns
    (decoded image, post-edit probabilities, edited pair, target bits)."""
    model.eval()
    eps = flip_epsilon(model, pair, attribute, eps_star)
    w = attribute_direction(model, attribute)
    h_z = pair.h_z + eps.unsqueeze(1) * w.unsqueeze(0)
    edited = LatentPair(pair.h_y, h_z)
    image = model.decode(pair.h_y, h_z)
    z_probs = torch.sigmoid(model.attr_logits(h_z, blocked=True))
    before = model.attr_logits(pair.h_z, blocked=True)[:, attribute]
    target = (before < 0).float()  # flipping toward the opposite side
    return image, z_probs, edited, target


@torch.no_grad()
def mix(model: DualDisModel, identity: LatentPair, attributes: LatentPair) -> torch.Tensor:
    """Decode the class latent of one image with the attribute latent of
    another."""
    model.eval()
    if identity.h_y.shape[1] != model.config.dim_hy or attributes.h_z.shape[1] != model.config.dim_hz:
        raise EditError("latent dimensions do not match the model")
    return model.decode(identity.h_y, attributes.h_z)


DEFAULT_EPS_GRID = tuple(float(x) for x in np.round(np.geomspace(0.05, 40.0, 24), 4))


@torch.no_grad()
def calibrate_epsilons(
    model: DualDisModel,
    manifest: Manifest,
    split: str = "val",
    grid: Sequence[float] = DEFAULT_EPS_GRID,
    target_rate: float = 0.9,
    batch_size: int = 64,
    max_samples: int = 192,
    cycle: bool = True,
) -> dict[int, float]:
    """Smallest epsilon per attribute that flips the model's own prediction
    for at least ``target_rate`` of validation samples when pushed against
    the current side. With ``cycle`` the edited latent is decoded and
    re-encoded first, so the chosen magnitude flips the rendered image and
    not merely the head logit. Returns {attribute index: epsilon}."""
    model.eval()
    h_ys, h_zs = [], []
    seen = 0
    for batch in load_batches(manifest, split, batch_size):
        pair = model.encode(batch.x)
        h_ys.append(pair.h_y)
        h_zs.append(pair.h_z)
        seen += len(batch.y)
        if seen >= max_samples:
            break
    if not h_zs:
        raise EditError(f"no samples in split {split!r} to calibrate on")
    h_y = torch.cat(h_ys)[:max_samples]
    h_z = torch.cat(h_zs)[:max_samples]
    table: dict[int, float] = {}
    for attribute in range(model.config.n_attributes):
        w = attribute_direction(model, attribute)
        logits = model.attr_logits(h_z, blocked=True)[:, attribute]
        sign = torch.where(logits >= 0, -1.0, 1.0)
        chosen = None
        best_eps, best_rate = float(grid[0]), -1.0
        for eps in grid:
            shifted_hz = h_z + (sign * float(eps)).unsqueeze(1) * w.unsqueeze(0)
            if cycle and model.decoder is not None:
                image = model.decode(h_y, shifted_hz).clamp(0.0, 1.0)
                new_logits = model.attr_logits(model.encode(image).h_z, blocked=True)[:, attribute]
            else:
                new_logits = model.attr_logits(shifted_hz, blocked=True)[:, attribute]
            rate = float(((new_logits >= 0) != (logits >= 0)).float().mean())
            if rate > best_rate:
                best_eps, best_rate = float(eps), rate
            if rate >= target_rate:
                chosen = float(eps)
                break
        if chosen is None:
            warnings.warn(
                f"attribute {attribute}: no grid epsilon reaches a {target_rate:.0%} flip rate;"
                f" using the best observed ({best_rate:.0%} at {best_eps})"
            )
            chosen = best_eps
        table[attribute] = chosen
    return table


def save_epsilon_table(table: dict[int, float], names: Sequence[str], path: Path | str):
    import json

    payload = {names[i] if i < len(names) else str(i): eps for i, eps in sorted(table.items())}
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def load_epsilon_table(path: Path | str, names: Sequence[str]) -> dict[int, float]:
    import json

    payload = json.loads(Path(path).read_text())
    index = {name: i for i, name in enumerate(names)}
    table = {}
    for key, eps in payload.items():
        idx = index.get(key, int(key) if key.isdigit() else None)
        if idx is None:
            raise EditError(f"unknown attribute {key!r} in epsilon table")
        table[idx] = float(eps)
    return table


# ---------------------------------------------------------------------------
# guided data augmentation

YALE_AUGMENT_DISTRIBUTION = tuple(v / 45.0 for v in (1, 3, 3, 2, 5, 3, 10, 3, 5, 2, 2, 2, 2, 2))
YALE_EXCLUDED_ATTRIBUTES = (0, 4, 8, 9, 13)
YALE_N_GEN_PER_IDENTITY = 150


@dataclass(frozen=True)
class AugmentPlan:
    """Per-class generation plan toward a target attribute distribution.

    ``one_hot`` domains treat the category of an image as the argmax
    attribute (and editing a category raises its bit, optionally lowering
    the source bit). Binary domains use (attribute, value) pairs as
    categories and flip single bits.
    """

    distribution: tuple[float, ...]
    n_gen_per_class: int
    excluded_attributes: tuple[int, ...] = ()
    one_hot: bool = False
    lower_source_bit: bool = True
    seed: int = 0

    def validate(self, n_attributes: int):
        n_cat = n_attributes if self.one_hot else 2 * n_attributes
        if len(self.distribution) != n_cat:
            raise EditError(f"distribution has {len(self.distribution)} entries, expected {n_cat}")
        if abs(sum(self.distribution) - 1.0) > 1e-6:
            raise EditError("distribution must sum to 1")


def uniform_plan(n_attributes: int, n_gen_per_class: int, seed: int = 0) -> AugmentPlan:
    n_cat = 2 * n_attributes
    return AugmentPlan(tuple(1.0 / n_cat for _ in range(n_cat)), n_gen_per_class, seed=seed)


def yale_plan(n_gen_per_identity: int = YALE_N_GEN_PER_IDENTITY, seed: int = 0) -> AugmentPlan:
    return AugmentPlan(
        YALE_AUGMENT_DISTRIBUTION,
        n_gen_per_identity,
        excluded_attributes=YALE_EXCLUDED_ATTRIBUTES,
        one_hot=True,
        seed=seed,
    )


def _category_of(row: ManifestRow, one_hot: bool) -> object:
    if one_hot:
        return int(np.argmax(row.z))
    return None  # binary rows contribute to one category per attribute


def _largest_remainder(total: int, dist: Sequence[float]) -> list[int]:
    raw = [total * d for d in dist]
    base = [int(math.floor(r)) for r in raw]
    remainder = total - sum(base)
    order = sorted(range(len(dist)), key=lambda i: raw[i] - base[i], reverse=True)
    for i in order[:remainder]:
        base[i] += 1
    return base


@torch.no_grad()
def plan_augmentation(
    manifest: Manifest,
    plan: AugmentPlan,
    model: DualDisModel,
    epsilons: dict[int, float],
    out_dir: Path | str,
    split: str = "train",
) -> Manifest:
    """Generate edited images per class until the per-category histogram
    matches the plan's distribution (within integer rounding), writing PNGs
    plus a manifest into ``out_dir``. Emits a warning and a partial plan if
    a class has no eligible source images."""
    plan.validate(model.config.n_attributes)
    model.eval()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    store = ImageStore(manifest.root)
    rng = np.random.default_rng(plan.seed)
    rows = [r for r in manifest.rows if r.split == split]
    by_class: dict[int, list[ManifestRow]] = {}
    for r in rows:
        by_class.setdefault(r.y, []).append(r)

    generated: list[ManifestRow] = []
    n_cat = len(plan.distribution)
    for y, class_rows in sorted(by_class.items()):
        class_rows = sorted(class_rows, key=lambda r: r.filename)
        eligible = [
            r
            for r in class_rows
            if not (plan.one_hot and int(np.argmax(r.z)) in plan.excluded_attributes)
        ]
        if not eligible:
            warnings.warn(f"class {y}: no eligible source images, skipping its quota")
            continue
        counts = np.zeros(n_cat, dtype=np.int64)
        for r in class_rows:
            if plan.one_hot:
                counts[int(np.argmax(r.z))] += 1
            else:
                for a, v in enumerate(r.z):
                    counts[2 * a + int(round(v))] += 1
        weight = 1 if plan.one_hot else model.config.n_attributes
        total_final = (len(class_rows) + plan.n_gen_per_class) * weight
        target = np.array(_largest_remainder(total_final, plan.distribution))
        deficits = np.maximum(target - counts, 0)

        source_cycle = 0
        for k in range(plan.n_gen_per_class):
            if deficits.sum() == 0:
                # quotas met; keep generating toward the largest shortfall
                deficits = np.maximum(target - counts, 0)
                if deficits.sum() == 0:
                    cat = int(rng.choice(n_cat, p=np.array(plan.distribution)))
                    deficits[cat] = 1
            cat = int(rng.choice(np.flatnonzero(deficits)))
            row = eligible[source_cycle % len(eligible)]
            source_cycle += 1
            image = store.get(row.filename)
            pair = model.encode(torch.from_numpy(image).unsqueeze(0))
            if plan.one_hot:
                target_attr = cat
                source_attr = int(np.argmax(row.z))
                eps = epsilons.get(target_attr)
                if eps is None:
                    raise EditError(f"attribute {target_attr} is not calibrated")
                h_z = pair.h_z + eps * attribute_direction(model, target_attr).unsqueeze(0)
                if plan.lower_source_bit and source_attr != target_attr:
                    h_z = h_z - eps * attribute_direction(model, source_attr).unsqueeze(0)
                new_z = tuple(1.0 if i == target_attr else 0.0 for i in range(n_cat))
            else:
                target_attr, value = divmod(cat, 2)
                eps = epsilons.get(target_attr)
                if eps is None:
                    raise EditError(f"attribute {target_attr} is not calibrated")
                signed = eps if value == 1 else -eps
                h_z = pair.h_z + signed * attribute_direction(model, target_attr).unsqueeze(0)
                new_z = tuple(
                    float(value) if a == target_attr else float(row.z[a])
                    for a in range(model.config.n_attributes)
                )
            decoded = model.decode(pair.h_y, h_z).clamp(0.0, 1.0)[0].numpy()
            name = f"gen_y{y}_{k:05d}.png"
            save_image(decoded, out_dir / name)
            generated.append(ManifestRow(name, y, new_z, "train"))
            if plan.one_hot:
                counts[cat] += 1
            else:
                for a, v in enumerate(new_z):
                    counts[2 * a + int(round(v))] += 1
            deficits = np.maximum(target - counts, 0)

    out = Manifest(root=out_dir, rows=generated)
    out.save(out_dir / "manifest.csv")
    return out
