"""Layer kinds used by the denoiser, with explicit forward/backward contexts.

Every layer is a ``torch.nn.Module`` built from a ``LayerSpec``. ``forward``
runs a layer and keeps the graph in a ``LayerContext``; ``backward`` consumes
that context exactly once and returns the input and parameter gradients.
"""

import math
from contextlib import contextmanager
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, Iterator, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from loguru import logger
from torch import nn

__all__ = [
    "LayerKind",
    "LayerSpec",
    "LayerShapeError",
    "LayerContractError",
    "LayerContext",
    "SelfAttention",
    "TimeEmbedding",
    "UpsampleConv",
    "sinusoidal_embedding",
    "build_layer",
    "init_weights",
    "forward",
    "backward",
    "gradient_check",
    "ParamStore",
    "ema_update",
    "adamw_step",
    "cosine_lr",
]

GROUP_NORM_EPS = 1e-5


class LayerShapeError(Exception):
    """Raised when a layer receives inputs incompatible with its spec."""

    pass


class LayerContractError(Exception):
    """Raised when backward is called with a stale or mismatched context."""

    pass


class LayerKind(str, Enum):
    CONV3X3 = "conv3x3"
    CONV1X1 = "conv1x1"
    GROUP_NORM = "group_norm"
    SILU = "silu"
    SELF_ATTENTION = "self_attention"
    DOWN_STRIDE2 = "down_stride2"
    UP_NEAREST2 = "up_nearest2"
    TIME_EMBED = "time_embed"
    LINEAR = "linear"


@dataclass(frozen=True)
class LayerSpec:
    kind: LayerKind
    in_channels: int = 0
    out_channels: int = 0
    groups: int = 16
    embed_dim: int = 0
    heads: int = 1
    name: str = ""

    def __post_init__(self):
        object.__setattr__(self, "kind", LayerKind(self.kind))
        if self.kind == LayerKind.GROUP_NORM and self.in_channels % self.groups != 0:
            raise LayerShapeError(
                f"{self.label}: groups={self.groups} does not divide "
                f"channels={self.in_channels}"
            )
        if self.kind == LayerKind.SELF_ATTENTION and self.in_channels % self.heads != 0:
            raise LayerShapeError(
                f"{self.label}: heads={self.heads} does not divide "
                f"channels={self.in_channels}"
            )

    @property
    def label(self) -> str:
        return self.name or self.kind.value


def sinusoidal_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    """Transformer-style sin/cos embedding of (possibly fractional) timesteps."""
    half = dim // 2
    freqs = torch.exp(
        -math.log(10000.0) * torch.arange(half, dtype=torch.float64, device=t.device) / half
    )
    args = t.to(torch.float64)[:, None] * freqs[None, :]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=-1)


class TimeEmbedding(nn.Module):
    """Sinusoidal embedding followed by a two-layer SiLU MLP."""

    def __init__(self, dim: int):
        super().__init__()
        self.dim = dim
        self.mlp = nn.Sequential(nn.Linear(dim, dim), nn.SiLU(), nn.Linear(dim, dim))

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        dtype = self.mlp[0].weight.dtype
        return self.mlp(sinusoidal_embedding(t, self.dim).to(dtype))


class SelfAttention(nn.Module):
    """Pre-norm multi-head self-attention over spatial tokens with a residual add."""

    def __init__(self, channels: int, groups: int, heads: int = 1):
        super().__init__()
        self.heads = heads
        self.norm = nn.GroupNorm(groups, channels, eps=GROUP_NORM_EPS)
        self.qkv = nn.Conv2d(channels, 3 * channels, kernel_size=1)
        self.proj = nn.Conv2d(channels, channels, kernel_size=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        n, c, h, w = x.shape
        head_dim = c // self.heads
        q, k, v = self.qkv(self.norm(x)).reshape(n, 3, self.heads, head_dim, h * w).unbind(1)
        scores = torch.einsum("bhdi,bhdj->bhij", q, k) / math.sqrt(head_dim)
        attn = torch.softmax(scores, dim=-1)
        out = torch.einsum("bhij,bhdj->bhdi", attn, v).reshape(n, c, h, w)
        return x + self.proj(out)


class UpsampleConv(nn.Module):
    """Nearest ×2 upsampling followed by a 3×3 convolution."""

    def __init__(self, in_channels: int, out_channels: int):
        super().__init__()
        self.conv = nn.Conv2d(in_channels, out_channels, kernel_size=3, padding=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.conv(F.interpolate(x, scale_factor=2, mode="nearest"))


def init_weights(module: nn.Module) -> None:
    """Fan-in scaled normal for convs and linears, identity affine for norms."""
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.Linear)):
            fan_in = m.weight[0].numel()
            nn.init.normal_(m.weight, 0.0, 1.0 / math.sqrt(fan_in))
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.GroupNorm):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)


def build_layer(spec: LayerSpec, dtype: torch.dtype = torch.float32) -> nn.Module:
    kind = spec.kind
    if kind == LayerKind.CONV3X3:
        layer = nn.Conv2d(spec.in_channels, spec.out_channels, kernel_size=3, padding=1)
    elif kind == LayerKind.CONV1X1:
        layer = nn.Conv2d(spec.in_channels, spec.out_channels, kernel_size=1)
    elif kind == LayerKind.GROUP_NORM:
        layer = nn.GroupNorm(spec.groups, spec.in_channels, eps=GROUP_NORM_EPS)
    elif kind == LayerKind.SILU:
        layer = nn.SiLU()
    elif kind == LayerKind.SELF_ATTENTION:
        layer = SelfAttention(spec.in_channels, spec.groups, spec.heads)
    elif kind == LayerKind.DOWN_STRIDE2:
        layer = nn.Conv2d(
            spec.in_channels, spec.out_channels, kernel_size=3, stride=2, padding=1
        )
    elif kind == LayerKind.UP_NEAREST2:
        layer = UpsampleConv(spec.in_channels, spec.out_channels)
    elif kind == LayerKind.TIME_EMBED:
        layer = TimeEmbedding(spec.embed_dim)
    elif kind == LayerKind.LINEAR:
        layer = nn.Linear(spec.in_channels, spec.out_channels)
    else:
        raise LayerShapeError(f"Unsupported layer kind: {kind}")
    init_weights(layer)
    layer.spec = spec
    return layer.to(dtype)


def _check_inputs(spec: LayerSpec, inputs: Sequence[torch.Tensor]) -> None:
    shapes = [tuple(x.shape) for x in inputs]
    if len(inputs) != 1:
        raise LayerShapeError(f"{spec.label}: expected one input, got shapes {shapes}")
    x = inputs[0]
    if spec.kind == LayerKind.TIME_EMBED:
        if x.ndim != 1:
            raise LayerShapeError(f"{spec.label}: expected timesteps (N,), got {shapes[0]}")
        return
    if spec.kind == LayerKind.LINEAR:
        if x.shape[-1] != spec.in_channels:
            raise LayerShapeError(
                f"{spec.label}: expected last dim {spec.in_channels}, got {shapes[0]}"
            )
        return
    if x.ndim != 4:
        raise LayerShapeError(f"{spec.label}: expected (N, C, H, W), got {shapes[0]}")
    if spec.kind != LayerKind.SILU and x.shape[1] != spec.in_channels:
        raise LayerShapeError(
            f"{spec.label}: expected {spec.in_channels} channels, got {shapes[0]}"
        )
    if spec.kind == LayerKind.DOWN_STRIDE2 and (x.shape[2] % 2 or x.shape[3] % 2):
        raise LayerShapeError(f"{spec.label}: spatial size must be even, got {shapes[0]}")


@dataclass
class LayerContext:
    spec: LayerSpec
    inputs: Tuple[torch.Tensor, ...]
    output: torch.Tensor
    params: Dict[str, nn.Parameter]
    param_versions: Dict[str, int]
    consumed: bool = field(default=False)


def forward(
    layer: nn.Module, *inputs: torch.Tensor
) -> Tuple[torch.Tensor, LayerContext]:
    """Run a layer and keep the context its backward needs."""
    spec: LayerSpec = layer.spec
    _check_inputs(spec, inputs)
    tracked = tuple(
        x.detach().requires_grad_(x.is_floating_point()) for x in inputs
    )
    with torch.enable_grad():
        output = layer(*tracked)
    params = dict(layer.named_parameters())
    return output.detach(), LayerContext(
        spec=spec,
        inputs=tracked,
        output=output,
        params=params,
        param_versions={name: p._version for name, p in params.items()},
    )


def backward(
    ctx: LayerContext, upstream: torch.Tensor
) -> Tuple[Tuple[Optional[torch.Tensor], ...], Dict[str, torch.Tensor]]:
    """Gradients of ``sum(upstream * output)`` w.r.t. inputs and parameters."""
    if ctx.consumed:
        raise LayerContractError(f"{ctx.spec.label}: context already consumed")
    if tuple(upstream.shape) != tuple(ctx.output.shape):
        raise LayerContractError(
            f"{ctx.spec.label}: upstream shape {tuple(upstream.shape)} does not match "
            f"output shape {tuple(ctx.output.shape)}"
        )
    for name, p in ctx.params.items():
        if p._version != ctx.param_versions[name]:
            raise LayerContractError(
                f"{ctx.spec.label}: parameter {name} changed since forward"
            )

    float_inputs = [x for x in ctx.inputs if x.requires_grad]
    names = list(ctx.params)
    targets = float_inputs + [ctx.params[name] for name in names]
    grads = torch.autograd.grad(
        ctx.output, targets, grad_outputs=upstream, allow_unused=True
    )
    ctx.consumed = True

    grads = [torch.zeros_like(t) if g is None else g for t, g in zip(targets, grads)]
    input_iter = iter(grads[: len(float_inputs)])
    input_grads = tuple(next(input_iter) if x.requires_grad else None for x in ctx.inputs)
    param_grads = dict(zip(names, grads[len(float_inputs) :]))
    return input_grads, param_grads


def gradient_check(
    layer: nn.Module, *inputs: torch.Tensor, eps: float = 1e-5, seed: int = 0
) -> float:
    """
    Max relative error between ``backward`` and central finite differences.

    The scalar probed is ``sum(u * layer(x))`` for a seeded random ``u``. The
    error of each gradient tensor is normalized by the largest magnitude of
    its numerical gradient.
    """
    output, ctx = forward(layer, *inputs)
    generator = torch.Generator().manual_seed(seed)
    upstream = torch.randn(output.shape, generator=generator, dtype=output.dtype)
    input_grads, param_grads = backward(ctx, upstream)

    def scalar() -> float:
        with torch.no_grad():
            return float((layer(*inputs) * upstream).sum())

    def numerical(target: torch.Tensor) -> torch.Tensor:
        grad = torch.zeros_like(target)
        flat, flat_grad = target.data.view(-1), grad.view(-1)
        for i in range(flat.numel()):
            original = flat[i].item()
            flat[i] = original + eps
            plus = scalar()
            flat[i] = original - eps
            minus = scalar()
            flat[i] = original
            flat_grad[i] = (plus - minus) / (2 * eps)
        return grad

    pairs = [
        (x, g) for x, g in zip(inputs, input_grads) if g is not None
    ] + [(p, param_grads[name]) for name, p in layer.named_parameters()]

    worst = 0.0
    for target, analytic in pairs:
        expected = numerical(target)
        scale = max(float(expected.abs().max()), 1e-12)
        worst = max(worst, float((analytic - expected).abs().max()) / scale)
    logger.debug(f"gradient check {layer.spec.label}: max relative error {worst:.3e}")
    return worst


class ParamStore:
    """Named parameters of a module, their gradients, and EMA shadow copies."""

    def __init__(self, module: nn.Module):
        self.module = module
        self.shadow: Dict[str, torch.Tensor] = {}
        self._optimizer: Optional[torch.optim.AdamW] = None

    @property
    def params(self) -> Dict[str, nn.Parameter]:
        return dict(self.module.named_parameters())

    @property
    def grads(self) -> Dict[str, Optional[torch.Tensor]]:
        return {name: p.grad for name, p in self.module.named_parameters()}

    def zero_grad(self) -> None:
        self.module.zero_grad(set_to_none=False)

    def load_shadow(self, shadow: Dict[str, torch.Tensor]) -> None:
        params = self.params
        if set(shadow) != set(params):
            raise LayerContractError("EMA shadow names do not match parameters")
        for name, tensor in shadow.items():
            if tensor.shape != params[name].shape:
                raise LayerContractError(
                    f"EMA shadow {name} has shape {tuple(tensor.shape)}, "
                    f"parameter has {tuple(params[name].shape)}"
                )
        self.shadow = {name: t.detach().clone() for name, t in shadow.items()}

    @contextmanager
    def swap_in_ema(self) -> Iterator[nn.Module]:
        """Temporarily load the EMA shadow into the module's parameters."""
        if not self.shadow:
            yield self.module
            return
        params = self.params
        live = {name: p.detach().clone() for name, p in params.items()}
        with torch.no_grad():
            for name, p in params.items():
                p.copy_(self.shadow[name])
        try:
            yield self.module
        finally:
            with torch.no_grad():
                for name, p in params.items():
                    p.copy_(live[name])


def ema_update(store: ParamStore, decay: float) -> None:
    """shadow ← decay·shadow + (1 − decay)·param; the first call copies."""
    with torch.no_grad():
        if not store.shadow:
            store.shadow = {n: p.detach().clone() for n, p in store.params.items()}
            return
        for name, p in store.params.items():
            store.shadow[name].mul_(decay).add_(p.detach(), alpha=1.0 - decay)


def adamw_step(
    store: ParamStore,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    weight_decay: float = 0.0,
    grad_clip: Optional[float] = None,
) -> float:
    """Clip the global gradient norm, then take one decoupled-weight-decay Adam step."""
    params = list(store.module.parameters())
    if store._optimizer is None:
        store._optimizer = torch.optim.AdamW(params, lr=lr)
    group = store._optimizer.param_groups[0]
    group.update(lr=lr, betas=(beta1, beta2), weight_decay=weight_decay)

    grads = [p.grad for p in params if p.grad is not None]
    if grad_clip is not None and grad_clip > 0:
        norm = float(torch.nn.utils.clip_grad_norm_(params, grad_clip))
    elif grads:
        norm = float(torch.linalg.vector_norm(torch.stack([g.norm() for g in grads])))
    else:
        norm = 0.0
    store._optimizer.step()
    return norm


def cosine_lr(step: int, total_steps: int, base_lr: float, warmup_frac: float) -> float:
    """Linear warmup from 0 to base_lr, then half-cosine decay to 0."""
    warmup = int(round(warmup_frac * total_steps))
    if warmup > 0 and step < warmup:
        return base_lr * step / warmup
    progress = (step - warmup) / max(1, total_steps - warmup)
    return float(base_lr * 0.5 * (1.0 + np.cos(np.pi * min(1.0, progress))))
