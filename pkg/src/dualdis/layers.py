"""Layer specifications, spec-string parsing, and torch-backed construction.

Layer strings follow a compact grammar:

* conv:            ``32``, ``32p0s2``, ``80k1``, ``128p0``, ``3none``
  (kernel defaults to 3, stride to 1, padding to ``(kernel-1)//2`` which
  preserves spatial size at stride 1; a ``none`` suffix marks a layer that
  gets no normalization/activation regardless of its position)
* transposed conv: ``dec128``, ``dec392p0s1`` (defaults: kernel 4, padding 1,
  stride 2)
* linear:          ``l256`` (the unicode form ``ℓ256`` is accepted too)
* max pooling:     ``maxpool2k3`` (stride 2, kernel 3)
* upsampling:      ``upsample`` (nearest neighbour, factor 2)
* bare tokens:     ``relu``, ``lrelu``, ``sigmoid``, ``softmax``, ``bn``

``format_layer`` emits the canonical minimal string (defaults omitted), so
``parse_layer(format_layer(s)) == s`` for every spec.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import torch
from torch import nn

CONV = "conv"
TCONV = "transposed-conv"
LINEAR = "linear"
BATCH_NORM = "batch-norm"
RELU = "relu"
LEAKY_RELU = "leaky-relu"
SIGMOID = "sigmoid"
SOFTMAX = "softmax"
MAX_POOL = "max-pool"
UPSAMPLE = "nearest-upsample"

LEAKY_SLOPE = 0.2
BN_MOMENTUM = 0.1
BN_EPS = 1e-5

_WEIGHTED_KINDS = (CONV, TCONV, LINEAR)
_BARE_TOKENS = {
    "relu": RELU,
    "lrelu": LEAKY_RELU,
    "sigmoid": SIGMOID,
    "softmax": SOFTMAX,
    "bn": BATCH_NORM,
    "upsample": UPSAMPLE,
}
_TOKEN_FOR_KIND = {v: k for k, v in _BARE_TOKENS.items()}


class LayerSyntaxError(ValueError):
    """Raised when a layer string does not match the grammar."""


class ShapeError(RuntimeError):
    """Shape mismatch, carrying the offending layer and both shapes."""

    def __init__(self, layer: str, expected, actual):
        self.layer = layer
        self.expected = expected
        self.actual = actual
        super().__init__(
            f"layer {layer!r}: expected input shape {expected}, got {actual}"
        )


class GradientError(RuntimeError):
    """Non-finite gradient, carrying the parameter name."""

    def __init__(self, name: str):
        self.name = name
        super().__init__(f"non-finite gradient in parameter {name!r}")


@dataclass(frozen=True)
class LayerSpec:
    """One layer. Fields irrelevant to ``kind`` are left at 0 and ignored."""

    kind: str
    out_channels: int = 0
    kernel: int = 0
    stride: int = 0
    padding: int = 0
    bare: bool = False  # "none" suffix: never followed by BN/activation

    def __post_init__(self):
        if min(self.kernel, self.stride, self.padding, self.out_channels) < 0:
            raise LayerSyntaxError(f"negative field in layer spec {self!r}")


def default_conv_padding(kernel: int) -> int:
    return (kernel - 1) // 2


_CONV_RE = re.compile(r"^(dec)?(\d+)((?:[kps]\d+)*)(none)?$")
_POOL_RE = re.compile(r"^maxpool(\d+)k(\d+)$")
_FIELD_RE = re.compile(r"([kps])(\d+)")


def parse_layer(token: str) -> LayerSpec:
    token = token.strip().replace("ℓ", "l")
    if not token:
        raise LayerSyntaxError("empty layer token")
    if token in _BARE_TOKENS:
        return LayerSpec(_BARE_TOKENS[token])
    m = _POOL_RE.match(token)
    if m:
        return LayerSpec(MAX_POOL, stride=int(m.group(1)), kernel=int(m.group(2)))
    if token[0] == "l" and token[1:].isdigit():
        return LayerSpec(LINEAR, out_channels=int(token[1:]))
    m = _CONV_RE.match(token)
    if not m:
        raise LayerSyntaxError(f"unrecognized layer token {token!r}")
    dec, channels, fields, bare = m.groups()
    seen = {}
    for letter, value in _FIELD_RE.findall(fields):
        if letter in seen:
            raise LayerSyntaxError(f"duplicate field {letter!r} in {token!r}")
        seen[letter] = int(value)
    if dec:
        kernel = seen.get("k", 4)
        return LayerSpec(
            TCONV,
            out_channels=int(channels),
            kernel=kernel,
            stride=seen.get("s", 2),
            padding=seen.get("p", 1),
            bare=bool(bare),
        )
    kernel = seen.get("k", 3)
    return LayerSpec(
        CONV,
        out_channels=int(channels),
        kernel=kernel,
        stride=seen.get("s", 1),
        padding=seen.get("p", default_conv_padding(kernel)),
        bare=bool(bare),
    )


def format_layer(spec: LayerSpec) -> str:
    if spec.kind in _TOKEN_FOR_KIND:
        return _TOKEN_FOR_KIND[spec.kind]
    if spec.kind == MAX_POOL:
        return f"maxpool{spec.stride}k{spec.kernel}"
    if spec.kind == LINEAR:
        return f"l{spec.out_channels}"
    if spec.kind == CONV:
        out = str(spec.out_channels)
        if spec.kernel != 3:
            out += f"k{spec.kernel}"
        if spec.padding != default_conv_padding(spec.kernel):
            out += f"p{spec.padding}"
        if spec.stride != 1:
            out += f"s{spec.stride}"
        return out + ("none" if spec.bare else "")
    if spec.kind == TCONV:
        out = f"dec{spec.out_channels}"
        if spec.kernel != 4:
            out += f"k{spec.kernel}"
        if spec.padding != 1:
            out += f"p{spec.padding}"
        if spec.stride != 2:
            out += f"s{spec.stride}"
        return out + ("none" if spec.bare else "")
    raise LayerSyntaxError(f"cannot format layer kind {spec.kind!r}")


def parse_stack(text: str) -> tuple[LayerSpec, ...]:
    return tuple(parse_layer(t) for t in text.split(",") if t.strip())


def format_stack(specs: Iterable[LayerSpec]) -> str:
    return ", ".join(format_layer(s) for s in specs)


def layer_output_shape(spec: LayerSpec, shape: tuple[int, int, int]) -> tuple[int, int, int]:
    """Shape arithmetic for one layer on a (C, H, W) input (batch excluded)."""
    c, h, w = shape

    def conv_dim(size, k, s, p):
        out = (size + 2 * p - k) // s + 1
        if size + 2 * p < k or out < 1:
            raise ShapeError(format_layer(spec), f"spatial size >= {k - 2 * p}", shape)
        return out

    if spec.kind == CONV:
        return (
            spec.out_channels,
            conv_dim(h, spec.kernel, spec.stride, spec.padding),
            conv_dim(w, spec.kernel, spec.stride, spec.padding),
        )
    if spec.kind == TCONV:
        out_h = (h - 1) * spec.stride - 2 * spec.padding + spec.kernel
        out_w = (w - 1) * spec.stride - 2 * spec.padding + spec.kernel
        if out_h < 1 or out_w < 1:
            raise ShapeError(format_layer(spec), "positive output size", shape)
        return (spec.out_channels, out_h, out_w)
    if spec.kind == MAX_POOL:
        return (c, conv_dim(h, spec.kernel, spec.stride, 0), conv_dim(w, spec.kernel, spec.stride, 0))
    if spec.kind == UPSAMPLE:
        return (c, 2 * h, 2 * w)
    if spec.kind == LINEAR:
        return (spec.out_channels, 1, 1)
    return shape  # activations and batch-norm preserve shape


def stack_output_shape(specs: Sequence[LayerSpec], shape: tuple[int, int, int]) -> tuple[int, int, int]:
    for spec in specs:
        shape = layer_output_shape(spec, shape)
    return shape


def make_layer(spec: LayerSpec, in_channels: int) -> nn.Module:
    """Instantiate a single layer; ``in_channels`` is flat features for linear."""
    if spec.kind == CONV:
        return nn.Conv2d(in_channels, spec.out_channels, spec.kernel, spec.stride, spec.padding)
    if spec.kind == TCONV:
        return nn.ConvTranspose2d(in_channels, spec.out_channels, spec.kernel, spec.stride, spec.padding)
    if spec.kind == LINEAR:
        return nn.Linear(in_channels, spec.out_channels)
    if spec.kind == BATCH_NORM:
        return nn.BatchNorm2d(in_channels, eps=BN_EPS, momentum=BN_MOMENTUM)
    if spec.kind == RELU:
        return nn.ReLU()
    if spec.kind == LEAKY_RELU:
        return nn.LeakyReLU(LEAKY_SLOPE)
    if spec.kind == SIGMOID:
        return nn.Sigmoid()
    if spec.kind == SOFTMAX:
        return nn.Softmax(dim=1)
    if spec.kind == MAX_POOL:
        return nn.MaxPool2d(spec.kernel, spec.stride)
    if spec.kind == UPSAMPLE:
        return nn.Upsample(scale_factor=2, mode="nearest")
    raise LayerSyntaxError(f"unknown layer kind {spec.kind!r}")


class SpecStack(nn.Module):
    """Sequential stack that reports structured shape errors per layer."""

    def __init__(self, entries: list[tuple[str, nn.Module, tuple[int, int, int] | None]]):
        super().__init__()
        self.blocks = nn.ModuleList(m for _, m, _ in entries)
        self.names = [n for n, _, _ in entries]
        self.expected = [e for _, _, e in entries]

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        for name, module, expected in zip(self.names, self.blocks, self.expected):
            if expected is not None and tuple(x.shape[1:]) != expected:
                raise ShapeError(name, expected, tuple(x.shape[1:]))
            try:
                x = module(x)
            except RuntimeError as err:
                raise ShapeError(name, expected, tuple(x.shape[1:])) from err
        return x


def build_cnn(
    specs: Sequence[LayerSpec],
    in_channels: int,
    in_hw: tuple[int, int],
    role: str = "encoder",
) -> SpecStack:
    """Build a convolutional stack with role-dependent normalization.

    ``encoder``: every conv/deconv is followed by batch norm and ReLU.
    ``decoder``: batch norm and LeakyReLU(0.2), except the last weighted
    layer (and any layer marked ``none``) which is left raw.
    ``plain``: layers exactly as written.
    """
    weighted = [i for i, s in enumerate(specs) if s.kind in _WEIGHTED_KINDS]
    last_weighted = weighted[-1] if weighted else -1
    entries = []
    shape = (in_channels, *in_hw)
    for i, spec in enumerate(specs):
        if spec.kind == LINEAR:
            raise LayerSyntaxError("linear layers belong in mlp stacks, not cnn stacks")
        name = f"{i}:{format_layer(spec)}"
        entries.append((name, make_layer(spec, shape[0]), shape))
        shape = layer_output_shape(spec, shape)
        if role == "plain" or spec.kind not in (CONV, TCONV) or spec.bare:
            continue
        if role == "decoder" and i == last_weighted:
            continue
        entries.append((f"{name}/bn", nn.BatchNorm2d(shape[0], eps=BN_EPS, momentum=BN_MOMENTUM), None))
        act = nn.LeakyReLU(LEAKY_SLOPE) if role == "decoder" else nn.ReLU()
        entries.append((f"{name}/act", act, None))
    return SpecStack(entries)


def build_mlp(specs: Sequence[LayerSpec], in_features: int) -> SpecStack:
    """Linear stack; every intermediate layer is followed by a ReLU."""
    for spec in specs:
        if spec.kind != LINEAR:
            raise LayerSyntaxError(f"mlp stacks accept linear layers only, got {format_layer(spec)}")
    entries = []
    features = in_features
    for i, spec in enumerate(specs):
        name = f"{i}:{format_layer(spec)}"
        entries.append((name, nn.Linear(features, spec.out_channels), None))
        features = spec.out_channels
        if i < len(specs) - 1:
            entries.append((f"{name}/act", nn.ReLU(), None))
    return SpecStack(entries)


def make_adam(
    params: Iterable[torch.nn.Parameter],
    lr: float = 0.001,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> torch.optim.Optimizer:
    params = [p for p in params if p.requires_grad]
    if not params:
        return _NullOptimizer()
    return torch.optim.Adam(params, lr=lr, betas=(beta1, beta2), eps=eps)


class _NullOptimizer(torch.optim.Optimizer):
    """No-op optimizer for empty parameter sets."""

    def __init__(self):
        self.param_groups = []
        self.state = {}

    def zero_grad(self, set_to_none: bool = True):
        pass

    def step(self, closure=None):
        pass

    def state_dict(self):
        return {"state": {}, "param_groups": []}

    def load_state_dict(self, state):
        pass


def block_gradient(x: torch.Tensor) -> torch.Tensor:
    """Gradient block boundary: the value passes, gradients stop."""
    return x.detach()


def assert_finite_gradients(named_parameters: Iterable[tuple[str, torch.nn.Parameter]]):
    for name, p in named_parameters:
        if p.grad is not None and not torch.isfinite(p.grad).all():
            raise GradientError(name)


def zero_gradients(module: nn.Module):
    for p in module.parameters():
        p.grad = None


def max_fd_relative_error(
    loss_fn: Callable[[], torch.Tensor],
    tensors: Sequence[torch.Tensor],
    step: float = 1e-3,
    max_elements: int | None = None,
    rng: torch.Generator | None = None,
) -> float:
    """Compare autograd gradients of ``loss_fn`` against central differences.

    ``loss_fn`` must recompute the forward pass from the current values of
    ``tensors`` (leaf tensors with requires_grad). Run in float64: finite
    differences are unreliable at 32-bit.
    """
    for t in tensors:
        t.grad = None
    loss = loss_fn()
    loss.backward()
    grads = [t.grad.detach().clone() if t.grad is not None else torch.zeros_like(t) for t in tensors]

    worst = 0.0
    for t, grad in zip(tensors, grads):
        flat = t.detach().reshape(-1)
        n = flat.numel()
        if max_elements is not None and n > max_elements:
            idx = torch.randperm(n, generator=rng)[:max_elements]
        else:
            idx = torch.arange(n)
        for i in idx.tolist():
            original = flat[i].item()
            with torch.no_grad():
                flat[i] = original + step
            plus = loss_fn().item()
            with torch.no_grad():
                flat[i] = original - step
            minus = loss_fn().item()
            with torch.no_grad():
                flat[i] = original
            fd = (plus - minus) / (2 * step)
            an = grad.reshape(-1)[i].item()
            rel = abs(fd - an) / max(abs(fd), abs(an), 1e-4)
            worst = max(worst, rel)
    return worst
