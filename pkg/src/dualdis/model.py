"""Dual-branch auto-encoder assembly and the baseline variant presets.

The full network is: shared encoder E, branch encoders E_y / E_z producing
flat latents h_y / h_z, decoder D on the concatenated latents, linear heads
W_y / W_z, non-linear adversaries C_y (reads h_z, predicts the class) and
C_z (reads h_y, predicts the attributes), and optional cross-latent
regressors U_y / U_z for the UAI-style variants.

Presets A..E reproduce the published baselines by switching losses and
components; "DualDis" enables everything.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from pathlib import Path

import torch
from torch import nn

from .layers import (
    LayerSpec,
    ShapeError,
    build_cnn,
    build_mlp,
    format_stack,
    parse_stack,
    stack_output_shape,
)

DECODER_LATENTS = "latents"  # decoder sees h_y || h_z
DECODER_ATTRIBUTES = "attributes"  # decoder sees h_y || z (ground truth)


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class VariantPreset:
    """Which components and loss terms a model variant activates."""

    name: str
    reconstruction: bool = True  # decoder + reconstruction loss
    attr_to_encoder: bool = True  # attribute loss reaches E_z (else W_z is a blocked probe)
    adv_y: bool = False  # adversarial pressure from C_y(h_z) on the encoders
    adv_z: bool = False  # adversarial pressure from C_z(h_y)
    uai: bool = False  # U predictors active (and trained via the disc loss)
    mtan: bool = False  # no E_z; decoder conditioned on the true z vector
    orth: bool = False  # row-orthogonality penalty on W_z
    shallow_branches: bool = False  # UAI variants need single-layer E_y/E_z

    @property
    def uses_z_labels(self) -> bool:
        return self.attr_to_encoder or self.mtan


PRESETS: dict[str, VariantPreset] = {
    "A": VariantPreset("A", reconstruction=False),
    "B": VariantPreset("B", attr_to_encoder=False),
    "B'": VariantPreset("B'"),
    "C": VariantPreset("C", attr_to_encoder=False, adv_z=True, mtan=True),
    "D": VariantPreset("D", attr_to_encoder=False, uai=True, shallow_branches=True),
    "D'": VariantPreset("D'", uai=True, shallow_branches=True),
    "E": VariantPreset("E", attr_to_encoder=False, adv_y=True),
    "DualDis": VariantPreset("DualDis", adv_y=True, adv_z=True, orth=True),
}
PRESET_ALIASES = {"Bp": "B'", "Dp": "D'", "dualdis": "DualDis"}


def get_preset(name: str) -> VariantPreset:
    name = PRESET_ALIASES.get(name, name)
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; valid: {', '.join(PRESETS)}")
    return PRESETS[name]


@dataclass(frozen=True)
class ModelConfig:
    image_size: int
    image_channels: int
    n_classes: int
    n_attributes: int
    dim_hy: int
    dim_hz: int
    encoder: tuple[LayerSpec, ...]
    encoder_y: tuple[LayerSpec, ...]
    encoder_z: tuple[LayerSpec, ...]
    decoder: tuple[LayerSpec, ...]
    adversary_y: tuple[LayerSpec, ...]
    adversary_z: tuple[LayerSpec, ...]
    uai_y: tuple[LayerSpec, ...] = ()
    uai_z: tuple[LayerSpec, ...] = ()
    decoder_input: str = DECODER_LATENTS
    block_grad_wz: bool = False
    attribute_names: tuple[str, ...] = ()

    def validate(self):
        shape = (self.image_channels, self.image_size, self.image_size)
        trunk = stack_output_shape(self.encoder, shape)
        for name, specs, dim in (("encoder_y", self.encoder_y, self.dim_hy), ("encoder_z", self.encoder_z, self.dim_hz)):
            out = stack_output_shape(specs, trunk)
            if math.prod(out) != dim:
                raise ConfigError(f"{name} produces {math.prod(out)} features, configured dim is {dim}")
        if self.decoder:
            width = self.dim_hy + (self.n_attributes if self.decoder_input == DECODER_ATTRIBUTES else self.dim_hz)
            out = stack_output_shape(self.decoder, (width, 1, 1))
            if out != shape:
                raise ConfigError(f"decoder produces {out}, expected {shape}")
        for name, specs, want in (("adversary_y", self.adversary_y, self.n_classes), ("adversary_z", self.adversary_z, self.n_attributes)):
            if specs and specs[-1].out_channels != want:
                raise ConfigError(f"{name} must end with {want} outputs")
        for name, specs, want in (("uai_y", self.uai_y, self.dim_hy), ("uai_z", self.uai_z, self.dim_hz)):
            if specs and specs[-1].out_channels != want:
                raise ConfigError(f"{name} must end with {want} outputs")
        if self.decoder_input not in (DECODER_LATENTS, DECODER_ATTRIBUTES):
            raise ConfigError(f"bad decoder_input {self.decoder_input!r}")
        if self.attribute_names and len(self.attribute_names) != self.n_attributes:
            raise ConfigError("attribute_names length != n_attributes")

    def to_dict(self) -> dict:
        d = {
            "image_size": self.image_size,
            "image_channels": self.image_channels,
            "n_classes": self.n_classes,
            "n_attributes": self.n_attributes,
            "dim_hy": self.dim_hy,
            "dim_hz": self.dim_hz,
            "encoder": format_stack(self.encoder),
            "encoder_y": format_stack(self.encoder_y),
            "encoder_z": format_stack(self.encoder_z),
            "decoder": format_stack(self.decoder),
            "adversary_y": format_stack(self.adversary_y),
            "adversary_z": format_stack(self.adversary_z),
            "uai_y": format_stack(self.uai_y),
            "uai_z": format_stack(self.uai_z),
            "decoder_input": self.decoder_input,
            "block_grad_wz": self.block_grad_wz,
            "attribute_names": list(self.attribute_names),
        }
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        kwargs = dict(d)
        for key in ("encoder", "encoder_y", "encoder_z", "decoder", "adversary_y", "adversary_z", "uai_y", "uai_z"):
            if key in kwargs and isinstance(kwargs[key], str):
                kwargs[key] = parse_stack(kwargs[key])
        if "attribute_names" in kwargs:
            kwargs["attribute_names"] = tuple(kwargs["attribute_names"])
        for key in ("image_size", "image_channels", "n_classes", "n_attributes", "dim_hy", "dim_hz"):
            if key in kwargs:
                kwargs[key] = int(kwargs[key])
        if "block_grad_wz" in kwargs and isinstance(kwargs["block_grad_wz"], str):
            kwargs["block_grad_wz"] = kwargs["block_grad_wz"].lower() in ("1", "true", "yes")
        cfg = cls(**kwargs)
        cfg.validate()
        return cfg

    def save(self, path: Path | str):
        lines = []
        for key, value in self.to_dict().items():
            if isinstance(value, list):
                value = ", ".join(value)
            lines.append(f"{key} = {value}")
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path: Path | str) -> "ModelConfig":
        d = parse_keyvalue_file(path)
        if "attribute_names" in d:
            d["attribute_names"] = tuple(s.strip() for s in d["attribute_names"].split(",") if s.strip())
        return cls.from_dict(d)


def parse_keyvalue_file(path: Path | str) -> dict[str, str]:
    """Strict ``key = value`` file: one pair per line, ``#`` comments."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        key = key.strip()
        if key in out:
            raise ConfigError(f"{path}:{lineno}: duplicate key {key!r}")
        out[key] = value.strip()
    return out


# ---------------------------------------------------------------------------
# named architecture presets


def desk_config(channels: int = 3) -> ModelConfig:
    from .data import ATTRIBUTE_NAMES

    return ModelConfig(
        image_size=32,
        image_channels=channels,
        n_classes=5,
        n_attributes=6,
        dim_hy=32,
        dim_hz=32,
        encoder=parse_stack("16k4s2, 24k4s2, 32k4s2"),
        encoder_y=parse_stack("48k3s2, 32k2p0"),
        encoder_z=parse_stack("48k3s2, 32k2p0"),
        decoder=parse_stack("dec64p0s1, 48, dec48, 32, dec32, 24, dec24, 16, 3none"),
        adversary_y=parse_stack("l64, l64, l5"),
        adversary_z=parse_stack("l64, l64, l6"),
        uai_y=parse_stack("l32"),
        uai_z=parse_stack("l32"),
        attribute_names=ATTRIBUTE_NAMES,
    )


def celeba_config() -> ModelConfig:
    return ModelConfig(
        image_size=256,
        image_channels=3,
        n_classes=2000,
        n_attributes=40,
        dim_hy=196,
        dim_hz=196,
        encoder=parse_stack("32p0s2, 32p0s1, 64p0, maxpool2k3, 80k1, maxpool2k3, 96p0, maxpool2k3"),
        encoder_y=parse_stack("96p0, 128p0s2, 196p0, 196p0"),
        encoder_z=parse_stack("96p0, 128p0s2, 196p0, 196p0"),
        decoder=parse_stack(
            "dec392p0s1, 392, upsample, 392, upsample, 256, upsample, 196, upsample, 128, 128,"
            " upsample, 96, 96, upsample, 64, 64, 32, 3k1"
        ),
        adversary_y=parse_stack("l256, l256, l2000"),
        adversary_z=parse_stack("l256, l256, l40"),
        uai_y=parse_stack("l196"),
        uai_z=parse_stack("l196"),
    )


def yale_config() -> ModelConfig:
    return ModelConfig(
        image_size=64,
        image_channels=3,
        n_classes=38,
        n_attributes=14,
        dim_hy=80,
        dim_hz=80,
        encoder=parse_stack("32k4s2, 40k4s2, 48k4s2"),
        encoder_y=parse_stack("64k4s2, 72k3p0, 80k2p0"),
        encoder_z=parse_stack("64k4s2, 72k3p0, 80k2p0"),
        decoder=parse_stack("160k2p1, dec80, dec64, dec48, dec32, dec32, 32, 3none"),
        adversary_y=parse_stack("l80, l80, l38"),
        adversary_z=parse_stack("l80, l80, l14"),
        uai_y=parse_stack("l80"),
        uai_z=parse_stack("l80"),
    )


def norb_config() -> ModelConfig:
    return ModelConfig(
        image_size=64,
        image_channels=1,
        n_classes=5,
        n_attributes=8,
        dim_hy=128,
        dim_hz=128,
        encoder=parse_stack("64k4s2, 64k4s2, 96k4s2"),
        encoder_y=parse_stack("96k4s2, 128k3p0, 128k2p0"),
        encoder_z=parse_stack("96k4s2, 128k3p0, 128k2p0"),
        decoder=parse_stack("256k2p1, dec192, 128, dec128, 128, dec96, 96, dec64, 64, dec64, 64, 32, 1"),
        adversary_y=parse_stack("l128, l128, l5"),
        adversary_z=parse_stack("l128, l128, l8"),
        uai_y=parse_stack("l128"),
        uai_z=parse_stack("l128"),
    )


MODEL_CONFIGS = {"desk": desk_config, "celeba": celeba_config, "yale": yale_config, "norb": norb_config}


def named_config(name: str) -> ModelConfig:
    if name not in MODEL_CONFIGS:
        raise ConfigError(f"unknown model config {name!r}; valid: {', '.join(MODEL_CONFIGS)}")
    return MODEL_CONFIGS[name]()


def shallow_variant(config: ModelConfig) -> ModelConfig:
    """UAI-style rearrangement: branch depth folds into the trunk, leaving
    single-layer E_y/E_z (their adversarial game needs shallow branches)."""
    moved = config.encoder_y[:-1]
    return replace(
        config,
        encoder=config.encoder + moved,
        encoder_y=config.encoder_y[-1:],
        encoder_z=config.encoder_z[-1:],
    )


# ---------------------------------------------------------------------------
# the model


@dataclass
class LatentPair:
    h_y: torch.Tensor
    h_z: torch.Tensor | None

    def detached(self) -> "LatentPair":
        return LatentPair(self.h_y.detach(), None if self.h_z is None else self.h_z.detach())


def _frozen_apply(module: nn.Module, x: torch.Tensor) -> torch.Tensor:
    """Apply ``module`` with its parameters treated as constants, so the
    result back-propagates into ``x`` only."""
    params = {name: p.detach() for name, p in module.named_parameters()}
    return torch.func.functional_call(module, params, (x,))


class DualDisModel(nn.Module):
    def __init__(self, config: ModelConfig, preset: VariantPreset | str = "DualDis"):
        super().__init__()
        if isinstance(preset, str):
            preset = get_preset(preset)
        self.base_config = config  # as passed, for checkpointing
        if preset.shallow_branches:
            config = shallow_variant(config)
        if preset.mtan:
            config = replace(config, decoder_input=DECODER_ATTRIBUTES)
        if not preset.attr_to_encoder and not preset.mtan:
            config = replace(config, block_grad_wz=True)
        config.validate()
        self.config = config
        self.preset = preset

        hw = (config.image_size, config.image_size)
        self.encoder = build_cnn(config.encoder, config.image_channels, hw, role="encoder")
        trunk = stack_output_shape(config.encoder, (config.image_channels, *hw))
        self.encoder_y = build_cnn(config.encoder_y, trunk[0], trunk[1:], role="encoder")
        self.encoder_z = None if preset.mtan else build_cnn(config.encoder_z, trunk[0], trunk[1:], role="encoder")

        self.head_y = nn.Linear(config.dim_hy, config.n_classes)
        self.head_z = None if preset.mtan else nn.Linear(config.dim_hz, config.n_attributes)

        self.adversary_y = None if preset.mtan else build_mlp(config.adversary_y, config.dim_hz)
        self.adversary_z = build_mlp(config.adversary_z, config.dim_hy)
        self.uai_y = build_mlp(config.uai_y, config.dim_hz) if preset.uai else None
        self.uai_z = build_mlp(config.uai_z, config.dim_hy) if preset.uai else None

        if preset.reconstruction:
            width = config.dim_hy + (config.n_attributes if preset.mtan else config.dim_hz)
            self.unflatten = nn.Unflatten(1, (width, 1, 1))
            self.decoder = build_cnn(config.decoder, width, (1, 1), role="decoder")
        else:
            self.unflatten = None
            self.decoder = None

    # -- forward pieces -----------------------------------------------------

    def encode(self, x: torch.Tensor) -> LatentPair:
        expected = (self.config.image_channels, self.config.image_size, self.config.image_size)
        if x.dim() != 4 or tuple(x.shape[1:]) != expected:
            raise ShapeError("input", ("B", *expected), tuple(x.shape))
        trunk = self.encoder(x)
        h_y = self.encoder_y(trunk).flatten(1)
        h_z = None if self.encoder_z is None else self.encoder_z(trunk).flatten(1)
        return LatentPair(h_y=h_y, h_z=h_z)

    def decode(self, h_y: torch.Tensor, second: torch.Tensor) -> torch.Tensor:
        if self.decoder is None:
            raise ConfigError(f"preset {self.preset.name} has no decoder")
        want = self.config.n_attributes if self.preset.mtan else self.config.dim_hz
        if second.shape[1] != want:
            raise ShapeError("decoder-input", (h_y.shape[0], want), tuple(second.shape))
        h = torch.cat([h_y, second], dim=1)
        return self.decoder(self.unflatten(h))

    def class_logits(self, h_y: torch.Tensor) -> torch.Tensor:
        return self.head_y(h_y)

    def attr_logits(self, h_z: torch.Tensor, blocked: bool | None = None) -> torch.Tensor:
        if self.head_z is None:
            raise ConfigError(f"preset {self.preset.name} has no attribute head")
        if blocked is None:
            blocked = self.config.block_grad_wz
        return self.head_z(h_z.detach() if blocked else h_z)

    def heads(self, pair: LatentPair) -> tuple[torch.Tensor, torch.Tensor | None]:
        y_probs = torch.softmax(self.class_logits(pair.h_y), dim=1)
        z_probs = None if self.head_z is None else torch.sigmoid(self.attr_logits(pair.h_z))
        return y_probs, z_probs

    def adversaries(
        self, pair: LatentPair, detach_latents: bool = False, freeze_params: bool = False
    ) -> tuple[torch.Tensor | None, torch.Tensor]:
        """(class probabilities from h_z, attribute probabilities from h_y)."""
        h_y = pair.h_y.detach() if detach_latents else pair.h_y
        apply_z = _frozen_apply if freeze_params else (lambda m, v: m(v))
        z_adv = torch.sigmoid(apply_z(self.adversary_z, h_y))
        y_adv = None
        if self.adversary_y is not None and pair.h_z is not None:
            h_z = pair.h_z.detach() if detach_latents else pair.h_z
            y_adv = torch.softmax(apply_z(self.adversary_y, h_z), dim=1)
        return y_adv, z_adv

    def uai_predict(
        self, pair: LatentPair, detach_latents: bool = False, freeze_params: bool = False
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """(h_y predicted from h_z, h_z predicted from h_y)."""
        if self.uai_y is None or pair.h_z is None:
            raise ConfigError(f"uai predictors are only available under UAI presets, not {self.preset.name}")
        h_y = pair.h_y.detach() if detach_latents else pair.h_y
        h_z = pair.h_z.detach() if detach_latents else pair.h_z
        apply = _frozen_apply if freeze_params else (lambda m, v: m(v))
        return apply(self.uai_y, h_z), apply(self.uai_z, h_y)

    def reconstruct(self, x: torch.Tensor, z_true: torch.Tensor | None = None) -> torch.Tensor:
        pair = self.encode(x)
        second = z_true if self.preset.mtan else pair.h_z
        return self.decode(pair.h_y, second)

    # -- parameter partitions ------------------------------------------------

    def main_modules(self) -> dict[str, nn.Module]:
        mods = {"encoder": self.encoder, "encoder_y": self.encoder_y, "head_y": self.head_y}
        if self.encoder_z is not None:
            mods["encoder_z"] = self.encoder_z
        if self.head_z is not None:
            mods["head_z"] = self.head_z
        if self.decoder is not None:
            mods["decoder"] = self.decoder
        return mods

    def disc_modules(self) -> dict[str, nn.Module]:
        mods = {}
        if self.adversary_y is not None:
            mods["adversary_y"] = self.adversary_y
        mods["adversary_z"] = self.adversary_z
        if self.uai_y is not None:
            mods["uai_y"] = self.uai_y
            mods["uai_z"] = self.uai_z
        return mods

    def main_parameters(self):
        for mod in self.main_modules().values():
            yield from mod.parameters()

    def disc_parameters(self):
        for mod in self.disc_modules().values():
            yield from mod.parameters()


def build_model(config: ModelConfig, preset: VariantPreset | str, seed: int | None = None) -> DualDisModel:
    """Construct a model with reproducible initialization."""
    if seed is not None:
        torch.manual_seed(seed)
    return DualDisModel(config, preset)
