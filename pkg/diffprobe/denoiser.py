"""U-Net noise estimator with enumerable decoder readout locations.

Decoder stages are numbered from the lowest resolution (r = 1) to the
highest; blocks within a stage are b = 1..B. The flat readout index is
ℓ = B·(r − 1) + b, which is ℓ = 3(r − 1) + b at the standard B = 3.
"""

from dataclasses import dataclass
from typing import Dict, Iterable, List, Optional, Tuple

import torch
from torch import nn

from diffprobe.config import ConfigError, DenoiserConfig
from diffprobe.layers import LayerKind, LayerShapeError, LayerSpec, build_layer

__all__ = [
    "DenoiserError",
    "ReadoutId",
    "FeatureTensor",
    "ReadoutInfo",
    "ResBlock",
    "Denoiser",
    "predict_noise",
    "forward_with_readouts",
    "all_readouts",
    "readout_table",
    "expected_parameter_count",
    "parameter_count",
]


class DenoiserError(Exception):
    """Raised on invalid denoiser inputs or readout requests."""

    pass


@dataclass(frozen=True, order=True)
class ReadoutId:
    stage: int
    block: int
    blocks_per_stage: int = 3

    def __post_init__(self):
        if self.stage < 1 or not 1 <= self.block <= self.blocks_per_stage:
            raise DenoiserError(
                f"Invalid readout (r={self.stage}, b={self.block}) "
                f"for {self.blocks_per_stage} blocks per stage"
            )

    @property
    def ell(self) -> int:
        return self.blocks_per_stage * (self.stage - 1) + self.block

    @classmethod
    def from_ell(cls, ell: int, blocks_per_stage: int = 3) -> "ReadoutId":
        if ell < 1:
            raise DenoiserError(f"Invalid readout index ℓ={ell}")
        stage, block = divmod(ell - 1, blocks_per_stage)
        return cls(stage=stage + 1, block=block + 1, blocks_per_stage=blocks_per_stage)

    def __str__(self) -> str:
        return f"ℓ={self.ell} (r={self.stage}, b={self.block})"


@dataclass(frozen=True)
class FeatureTensor:
    readout: ReadoutId
    values: torch.Tensor

    @property
    def channels(self) -> int:
        return self.values.shape[-3]

    @property
    def height(self) -> int:
        return self.values.shape[-2]

    @property
    def width(self) -> int:
        return self.values.shape[-1]


@dataclass(frozen=True)
class ReadoutInfo:
    readout: ReadoutId
    channels: int
    resolution: int
    attention: bool

    @property
    def ell(self) -> int:
        return self.readout.ell


def readout_table(config: DenoiserConfig) -> List[ReadoutInfo]:
    n = len(config.stage_channels)
    blocks = config.decoder_blocks_per_stage
    table = []
    for r in range(1, n + 1):
        i = n - r
        resolution = config.resolutions[i]
        for b in range(1, blocks + 1):
            table.append(
                ReadoutInfo(
                    readout=ReadoutId(r, b, blocks),
                    channels=config.stage_channels[i],
                    resolution=resolution,
                    attention=b == blocks and resolution in config.attention_resolutions,
                )
            )
    return table


def all_readouts(config: DenoiserConfig) -> List[ReadoutId]:
    return [info.readout for info in readout_table(config)]


class ResBlock(nn.Module):
    """Pre-activation residual block with a per-channel time bias."""

    def __init__(self, in_channels: int, out_channels: int, time_dim: int, groups: int):
        super().__init__()
        self.norm1 = build_layer(LayerSpec(LayerKind.GROUP_NORM, in_channels, groups=groups))
        self.act = build_layer(LayerSpec(LayerKind.SILU))
        self.conv1 = build_layer(LayerSpec(LayerKind.CONV3X3, in_channels, out_channels))
        self.time_proj = build_layer(LayerSpec(LayerKind.LINEAR, time_dim, out_channels))
        self.norm2 = build_layer(LayerSpec(LayerKind.GROUP_NORM, out_channels, groups=groups))
        self.conv2 = build_layer(LayerSpec(LayerKind.CONV3X3, out_channels, out_channels))
        if in_channels != out_channels:
            self.skip = build_layer(LayerSpec(LayerKind.CONV1X1, in_channels, out_channels))
        else:
            self.skip = nn.Identity()

    def forward(self, x: torch.Tensor, temb: torch.Tensor) -> torch.Tensor:
        h = self.conv1(self.act(self.norm1(x)))
        h = h + self.time_proj(self.act(temb))[:, :, None, None]
        h = self.conv2(self.act(self.norm2(h)))
        return self.skip(x) + h


class _Stage(nn.Module):
    def __init__(self):
        super().__init__()
        self.blocks = nn.ModuleList()
        self.attention: Optional[nn.Module] = None
        self.resample: Optional[nn.Module] = None


class Denoiser(nn.Module):
    """E_θ(x_t, t): predicts the Gaussian noise used to form x_t."""

    def __init__(
        self,
        config: DenoiserConfig,
        num_timesteps: int = 1000,
        dtype: torch.dtype = torch.float32,
    ):
        super().__init__()
        self.config = config
        self.num_timesteps = num_timesteps
        self.forward_passes = 0
        try:
            self._build(config)
        except LayerShapeError as e:
            raise ConfigError(f"Denoiser config is not realizable: {e}") from e
        self.to(dtype)

    def _build(self, config: DenoiserConfig) -> None:
        chs = config.stage_channels
        n = len(chs)
        ted, groups = config.time_embed_dim, config.groups
        attention_at = set(config.attention_resolutions)

        def attention(c: int) -> nn.Module:
            return build_layer(
                LayerSpec(LayerKind.SELF_ATTENTION, c, groups=groups, heads=config.heads)
            )

        self.time_embed = build_layer(LayerSpec(LayerKind.TIME_EMBED, embed_dim=ted))
        self.stem = build_layer(LayerSpec(LayerKind.CONV3X3, config.in_channels, chs[0]))

        skip_channels = [chs[0]]
        self.encoder = nn.ModuleList()
        h_ch = chs[0]
        for i, c in enumerate(chs):
            stage = _Stage()
            for _ in range(config.encoder_blocks_per_stage):
                stage.blocks.append(ResBlock(h_ch, c, ted, groups))
                h_ch = c
                skip_channels.append(c)
            if config.resolutions[i] in attention_at:
                stage.attention = attention(c)
            if i < n - 1:
                stage.resample = build_layer(LayerSpec(LayerKind.DOWN_STRIDE2, c, c))
                skip_channels.append(c)
            self.encoder.append(stage)

        self.bottleneck = nn.ModuleList(
            [ResBlock(h_ch, h_ch, ted, groups) for _ in range(config.bottleneck_blocks)]
        )

        self.decoder = nn.ModuleList()
        for i in reversed(range(n)):
            c = chs[i]
            stage = _Stage()
            for _ in range(config.decoder_blocks_per_stage):
                stage.blocks.append(ResBlock(h_ch + skip_channels.pop(), c, ted, groups))
                h_ch = c
            if config.resolutions[i] in attention_at:
                stage.attention = attention(c)
            if i > 0:
                stage.resample = build_layer(LayerSpec(LayerKind.UP_NEAREST2, c, c))
            self.decoder.append(stage)

        self.norm_out = build_layer(LayerSpec(LayerKind.GROUP_NORM, chs[0], groups=groups))
        self.act_out = build_layer(LayerSpec(LayerKind.SILU))
        self.conv_out = build_layer(LayerSpec(LayerKind.CONV3X3, chs[0], config.in_channels))
        nn.init.zeros_(self.conv_out.weight)
        nn.init.zeros_(self.conv_out.bias)

    def _check_inputs(self, x_t: torch.Tensor, t: torch.Tensor) -> None:
        size, channels = self.config.image_size, self.config.in_channels
        if x_t.ndim != 4 or tuple(x_t.shape[1:]) != (channels, size, size):
            raise DenoiserError(
                f"Expected x_t of shape (N, {channels}, {size}, {size}), "
                f"got {tuple(x_t.shape)}"
            )
        if t.ndim != 1 or t.shape[0] != x_t.shape[0]:
            raise DenoiserError(
                f"Expected one timestep per item ({x_t.shape[0]}), got {tuple(t.shape)}"
            )
        if t.numel() and (int(t.min()) < 1 or int(t.max()) > self.num_timesteps):
            raise DenoiserError(
                f"Timesteps must lie in 1..{self.num_timesteps}, "
                f"got {int(t.min())}..{int(t.max())}"
            )

    def forward_with_readouts(
        self,
        x_t: torch.Tensor,
        t: torch.Tensor,
        wanted: Iterable[ReadoutId] = (),
    ) -> Tuple[torch.Tensor, Dict[ReadoutId, FeatureTensor]]:
        wanted = set(wanted)
        valid = set(all_readouts(self.config))
        if invalid := wanted - valid:
            raise DenoiserError(f"Invalid readout ids: {sorted(map(str, invalid))}")
        self._check_inputs(x_t, t)
        self.forward_passes += x_t.shape[0]

        temb = self.time_embed(t)
        h = self.stem(x_t)
        skips = [h]
        for stage in self.encoder:
            for j, block in enumerate(stage.blocks):
                h = block(h, temb)
                if stage.attention is not None and j == len(stage.blocks) - 1:
                    h = stage.attention(h)
                skips.append(h)
            if stage.resample is not None:
                h = stage.resample(h)
                skips.append(h)

        for block in self.bottleneck:
            h = block(h, temb)

        readouts: Dict[ReadoutId, FeatureTensor] = {}
        blocks = self.config.decoder_blocks_per_stage
        for r, stage in enumerate(self.decoder, start=1):
            for b, block in enumerate(stage.blocks, start=1):
                h = block(torch.cat([h, skips.pop()], dim=1), temb)
                if stage.attention is not None and b == blocks:
                    h = stage.attention(h)
                readout = ReadoutId(r, b, blocks)
                if readout in wanted:
                    readouts[readout] = FeatureTensor(readout, h)
            if stage.resample is not None:
                h = stage.resample(h)

        eps_hat = self.conv_out(self.act_out(self.norm_out(h)))
        return eps_hat, dict(sorted(readouts.items()))

    def forward(self, x_t: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        return self.forward_with_readouts(x_t, t, ())[0]


def predict_noise(model: Denoiser, x_t: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
    return model(x_t, t)


def forward_with_readouts(
    model: Denoiser, x_t: torch.Tensor, t: torch.Tensor, wanted: Iterable[ReadoutId]
) -> Tuple[torch.Tensor, Dict[ReadoutId, FeatureTensor]]:
    return model.forward_with_readouts(x_t, t, wanted)


def parameter_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def expected_parameter_count(config: DenoiserConfig) -> int:
    """Closed-form parameter count of ``Denoiser(config)``."""
    ted, c_in = config.time_embed_dim, config.in_channels
    chs = config.stage_channels
    n = len(chs)
    attention_at = set(config.attention_resolutions)

    def norm(c: int) -> int:
        return 2 * c

    def conv(cin: int, cout: int, k: int) -> int:
        return k * k * cin * cout + cout

    def res(cin: int, cout: int) -> int:
        total = norm(cin) + conv(cin, cout, 3) + (ted * cout + cout)
        total += norm(cout) + conv(cout, cout, 3)
        return total + (conv(cin, cout, 1) if cin != cout else 0)

    def attn(c: int) -> int:
        return norm(c) + conv(c, 3 * c, 1) + conv(c, c, 1)

    total = 2 * (ted * ted + ted) + conv(c_in, chs[0], 3)
    skips = [chs[0]]
    h = chs[0]
    for i, c in enumerate(chs):
        for _ in range(config.encoder_blocks_per_stage):
            total += res(h, c)
            h = c
            skips.append(c)
        if config.resolutions[i] in attention_at:
            total += attn(c)
        if i < n - 1:
            total += conv(c, c, 3)
            skips.append(c)
    total += config.bottleneck_blocks * res(h, h)
    for i in reversed(range(n)):
        c = chs[i]
        for _ in range(config.decoder_blocks_per_stage):
            total += res(h + skips.pop(), c)
            h = c
        if config.resolutions[i] in attention_at:
            total += attn(c)
        if i > 0:
            total += conv(c, c, 3)
    return total + norm(chs[0]) + conv(chs[0], c_in, 3)
