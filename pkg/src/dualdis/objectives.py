"""Loss terms and the two weighted aggregate losses.

The main loss trains the encoders, decoder and linear heads; the
discriminative loss trains the adversarial classifiers (and the UAI
predictors) only. Routing is enforced structurally: adversary outputs that
feed the main loss are computed with the adversary parameters treated as
constants, and adversary outputs that feed the discriminative loss are
computed from detached latents.

Probabilities are clamped to [1e-7, 1 - 1e-7] inside every log, so a
saturated classifier cannot produce an infinite loss.
"""

from __future__ import annotations

from dataclasses import dataclass, fields, replace
from typing import Optional

import torch

from .data import LabeledBatch
from .model import DualDisModel, LatentPair, VariantPreset

PROB_EPS = 1e-7

INVERSE_LABEL = "inverse-label"
MAX_ENTROPY = "max-entropy"
UNIFORM = "uniform-cross-entropy"
ADVERSARIAL_KINDS = (INVERSE_LABEL, MAX_ENTROPY, UNIFORM)


class ObjectiveError(ValueError):
    pass


@dataclass(frozen=True)
class LossWeights:
    rec: float = 1.0
    y: float = 1.0
    z: float = 1.0
    adv_y: float = 0.1
    adv_z: float = 0.1
    orth: float = 1e-6
    disc_y: float = 1.0
    disc_z: float = 1.0
    uai_adv: float = 0.3
    uai_disc: float = 1.0

    def override(self, **kwargs) -> "LossWeights":
        return replace(self, **kwargs)

    def to_dict(self) -> dict[str, float]:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, d: dict) -> "LossWeights":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ObjectiveError(f"unknown loss weight keys: {sorted(unknown)}")
        return cls(**{k: float(v) for k, v in d.items()})


# Published per-dataset weights; everything not listed keeps the defaults.
WEIGHT_PRESETS = {
    "celeba": LossWeights(rec=0.3, adv_y=0.1, adv_z=0.1),
    "yale": LossWeights(rec=1.0, adv_y=0.08, adv_z=0.08),
    "norb": LossWeights(rec=10.0, adv_y=0.25, adv_z=0.25),
    "desk": LossWeights(rec=0.1, adv_y=0.3, adv_z=1.0, orth=1e-3),
}


def _clamp(p: torch.Tensor) -> torch.Tensor:
    return p.clamp(PROB_EPS, 1.0 - PROB_EPS)


def _masked_mean(per_sample: torch.Tensor, mask: Optional[torch.Tensor]) -> torch.Tensor:
    if mask is None:
        return per_sample.mean()
    if not mask.any():
        return per_sample.sum() * 0.0
    return per_sample[mask].mean()


def loss_rec(x: torch.Tensor, x_hat: torch.Tensor) -> torch.Tensor:
    """Squared error summed over pixels, averaged over the batch."""
    if x.shape != x_hat.shape:
        raise ObjectiveError(f"reconstruction shape mismatch: {tuple(x.shape)} vs {tuple(x_hat.shape)}")
    return (x - x_hat).pow(2).flatten(1).sum(dim=1).mean()


def loss_class(y: torch.Tensor, y_probs: torch.Tensor, mask: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Cross entropy on probability outputs, averaged over (masked) samples."""
    per = -torch.log(_clamp(y_probs.gather(1, y.view(-1, 1)).squeeze(1)))
    return _masked_mean(per, mask)


def loss_attr(z: torch.Tensor, z_probs: torch.Tensor, mask: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Binary cross entropy, averaged over attributes then (masked) samples.

    Soft targets are allowed (the NORB labels are soft assignments).
    """
    p = _clamp(z_probs)
    per = -(z * torch.log(p) + (1.0 - z) * torch.log(1.0 - p)).mean(dim=1)
    return _masked_mean(per, mask)


def loss_disc(
    y: torch.Tensor,
    y_adv: Optional[torch.Tensor],
    z: torch.Tensor,
    z_adv: Optional[torch.Tensor],
    weights: LossWeights,
    mask_y: Optional[torch.Tensor] = None,
    mask_z: Optional[torch.Tensor] = None,
) -> tuple[torch.Tensor, dict[str, float]]:
    """Adversary training loss; call with adversary outputs computed from
    detached latents so gradients stay inside the adversaries."""
    total = torch.zeros(())
    terms: dict[str, float] = {}
    if y_adv is not None:
        t = loss_class(y, y_adv, mask_y)
        terms["disc_y"] = float(t.detach())
        total = total + weights.disc_y * t
    if z_adv is not None:
        t = loss_attr(z, z_adv, mask_z)
        terms["disc_z"] = float(t.detach())
        total = total + weights.disc_z * t
    return total, terms


def loss_adv_class(
    y: torch.Tensor, y_adv: torch.Tensor, kind: str = INVERSE_LABEL, mask: Optional[torch.Tensor] = None
) -> torch.Tensor:
    """Encoder-side adversarial objective on the class adversary output."""
    if kind == INVERSE_LABEL:
        return -loss_class(y, y_adv, mask)
    if kind == MAX_ENTROPY:
        p = _clamp(y_adv)
        per = (p * torch.log(p)).sum(dim=1)  # negative entropy
        return _masked_mean(per, mask)
    if kind == UNIFORM:
        per = -torch.log(_clamp(y_adv)).mean(dim=1)
        return _masked_mean(per, mask)
    raise ObjectiveError(f"unknown adversarial objective kind {kind!r}")


def loss_adv_attr(
    z: torch.Tensor, z_adv: torch.Tensor, kind: str = INVERSE_LABEL, mask: Optional[torch.Tensor] = None
) -> torch.Tensor:
    if kind == INVERSE_LABEL:
        return loss_attr(1.0 - z, z_adv, mask)
    if kind == MAX_ENTROPY:
        p = _clamp(z_adv)
        per = (p * torch.log(p) + (1 - p) * torch.log(1 - p)).mean(dim=1)
        return _masked_mean(per, mask)
    if kind == UNIFORM:
        half = torch.full_like(z_adv, 0.5)
        per = -(half * torch.log(_clamp(z_adv)) + half * torch.log(_clamp(1 - z_adv))).mean(dim=1)
        return _masked_mean(per, mask)
    raise ObjectiveError(f"unknown adversarial objective kind {kind!r}")


def loss_orth(w: torch.Tensor) -> torch.Tensor:
    """Off-diagonal squared cosines between rows of the attribute head.

    Zero iff all rows are mutually orthogonal; invariant to positive row
    rescaling. Row norms are clamped so zero rows stay finite.
    """
    norms = w.norm(dim=1, keepdim=True).clamp_min(1e-12)
    g = (w / norms) @ (w / norms).t()
    off = g - torch.diag_embed(torch.diagonal(g))
    return off.pow(2).sum()


def loss_uai(h: torch.Tensor, h_pred: torch.Tensor, side: str) -> torch.Tensor:
    """MSE between a latent and its cross-branch prediction.

    ``disc`` trains the predictors (minimize), ``adv`` trains the encoders
    to be unpredictable (maximize, returned negated).
    """
    mse = (h - h_pred).pow(2).mean()
    if side == "disc":
        return mse
    if side == "adv":
        return -mse
    raise ObjectiveError(f"unknown uai side {side!r}")


@dataclass
class ForwardOutputs:
    pair: LatentPair
    x_hat: Optional[torch.Tensor]
    y_probs: torch.Tensor
    z_probs: Optional[torch.Tensor]
    adv_y_frozen: Optional[torch.Tensor]  # live latents, frozen adversary params
    adv_z_frozen: Optional[torch.Tensor]
    adv_y_live: Optional[torch.Tensor]  # detached latents, live adversary params
    adv_z_live: Optional[torch.Tensor]
    uai_frozen: Optional[tuple[torch.Tensor, torch.Tensor]]
    uai_live: Optional[tuple[torch.Tensor, torch.Tensor]]


def forward_pass(model: DualDisModel, batch: LabeledBatch) -> ForwardOutputs:
    """One shared forward pass producing everything the two losses need."""
    preset = model.preset
    pair = model.encode(batch.x)
    x_hat = None
    if model.decoder is not None:
        second = batch.z if preset.mtan else pair.h_z
        x_hat = model.decode(pair.h_y, second)
    y_probs, z_probs = model.heads(pair)
    adv_y_frozen = adv_z_frozen = None
    if preset.adv_y or preset.adv_z:
        adv_y_frozen, adv_z_frozen = model.adversaries(pair, freeze_params=True)
    adv_y_live, adv_z_live = model.adversaries(pair, detach_latents=True)
    uai_frozen = uai_live = None
    if preset.uai:
        uai_frozen = model.uai_predict(pair, freeze_params=True)
        uai_live = model.uai_predict(pair, detach_latents=True)
    return ForwardOutputs(
        pair=pair,
        x_hat=x_hat,
        y_probs=y_probs,
        z_probs=z_probs,
        adv_y_frozen=adv_y_frozen,
        adv_z_frozen=adv_z_frozen,
        adv_y_live=adv_y_live,
        adv_z_live=adv_z_live,
        uai_frozen=uai_frozen,
        uai_live=uai_live,
    )


def total_losses(
    model: DualDisModel,
    outputs: ForwardOutputs,
    batch: LabeledBatch,
    weights: LossWeights,
    kind: str = INVERSE_LABEL,
) -> tuple[torch.Tensor, torch.Tensor, dict[str, float]]:
    """Assemble (main loss, discriminative loss, per-term record) for the
    model's preset. Only terms the preset enables contribute."""
    preset: VariantPreset = model.preset
    terms: dict[str, float] = {}
    main = torch.zeros(())

    def add(name: str, weight: float, value: torch.Tensor) -> torch.Tensor:
        terms[name] = float(value.detach())
        return weight * value

    if preset.reconstruction:
        main = main + add("rec", weights.rec, loss_rec(batch.x, outputs.x_hat))
    main = main + add("y", weights.y, loss_class(batch.y, outputs.y_probs, batch.mask_y))
    if outputs.z_probs is not None:
        main = main + add("z", weights.z, loss_attr(batch.z, outputs.z_probs, batch.mask_z))
    if preset.adv_y and outputs.adv_y_frozen is not None:
        main = main + add("adv_y", weights.adv_y, loss_adv_class(batch.y, outputs.adv_y_frozen, kind, batch.mask_y))
    if preset.adv_z:
        main = main + add("adv_z", weights.adv_z, loss_adv_attr(batch.z, outputs.adv_z_frozen, kind, batch.mask_z))
    if preset.orth and model.head_z is not None:
        main = main + add("orth", weights.orth, loss_orth(model.head_z.weight))
    if preset.uai:
        h_y_pred, h_z_pred = outputs.uai_frozen
        value = loss_uai(outputs.pair.h_y, h_y_pred, "adv") + loss_uai(outputs.pair.h_z, h_z_pred, "adv")
        main = main + add("uai_adv", weights.uai_adv, value)

    disc, disc_terms = loss_disc(
        batch.y,
        outputs.adv_y_live,
        batch.z,
        outputs.adv_z_live,
        weights,
        batch.mask_y,
        batch.mask_z,
    )
    terms.update(disc_terms)
    if preset.uai:
        h_y_pred, h_z_pred = outputs.uai_live
        value = loss_uai(outputs.pair.h_y.detach(), h_y_pred, "disc") + loss_uai(
            outputs.pair.h_z.detach(), h_z_pred, "disc"
        )
        terms["uai_disc"] = float(value.detach())
        disc = disc + weights.uai_disc * value

    terms["main"] = float(main.detach())
    terms["disc"] = float(disc.detach())
    return main, disc, terms
