"""Dual-output encoder/decoder network, trainable scopes and the CAM head."""

from __future__ import annotations

import copy
import enum
from dataclasses import asdict, dataclass
from typing import Sequence

import torch
import torch.nn.functional as F
from torch import nn

BOTTLENECK_SIDE = 6
BOTTLENECK_CHANNELS = 16


@dataclass(frozen=True)
class ArchConfig:
    """Layer plan. ``input_size / 2**len(encoder_channels)`` must equal 6."""

    input_size: int = 192
    encoder_channels: tuple[int, ...] = (16, 32, 32, 32, 16)
    dense_widths: tuple[int, ...] = (64,)

    def __post_init__(self):
        object.__setattr__(self, "encoder_channels", tuple(int(c) for c in self.encoder_channels))
        object.__setattr__(self, "dense_widths", tuple(int(c) for c in self.dense_widths))
        if not self.encoder_channels or self.encoder_channels[-1] != BOTTLENECK_CHANNELS:
            raise ValueError(f"encoder_channels must end in {BOTTLENECK_CHANNELS}, got {self.encoder_channels}")
        steps = self.downsample_steps
        if self.input_size % 2**steps or self.input_size // 2**steps != BOTTLENECK_SIDE:
            raise ValueError(
                f"input_size {self.input_size} is not reduced to {BOTTLENECK_SIDE} by {steps} stride-2 steps"
            )

    @property
    def downsample_steps(self) -> int:
        return len(self.encoder_channels)

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    @classmethod
    def from_dict(cls, d) -> ArchConfig:
        return cls(**d)


DESK_ARCH = ArchConfig(input_size=96, encoder_channels=(16, 32, 32, 16))


class TrainableScope(str, enum.Enum):
    ALL = "all"
    ED_ONLY = "ed_only"
    ED_DENSE_ONLY = "ed_dense_only"
    CAM_DENSE_ONLY = "cam_dense_only"


def _encoder(channels: Sequence[int]) -> nn.Sequential:
    layers = []
    c_in = 1
    for c_out in channels:
        layers += [nn.Conv2d(c_in, c_out, 3, stride=2, padding=1), nn.ReLU()]
        c_in = c_out
    return nn.Sequential(*layers)


class _Decoder(nn.Module):
    """Mirror of the encoder without skip connections, up to half resolution.

    Everything the mask head sees has to pass through the 6x6x16 bottleneck.
    The last 2x step is a fixed bilinear upsampling of the logits, which is
    several times cheaper than a learned full-resolution layer.
    """

    def __init__(self, channels: Sequence[int]):
        super().__init__()
        plan = [channels[-1], *reversed(channels[:-1])]
        layers = []
        for c_in, c_out in zip(plan[:-1], plan[1:]):
            layers += [nn.ConvTranspose2d(c_in, c_out, 2, stride=2), nn.ReLU()]
        layers.append(nn.Conv2d(plan[-1], 1, 1))
        self.body = nn.Sequential(*layers)

    def forward(self, feats: torch.Tensor) -> torch.Tensor:
        return F.interpolate(self.body(feats), scale_factor=2, mode="bilinear", align_corners=False)


def _dense_head(in_features: int, widths: Sequence[int]) -> nn.Sequential:
    layers: list[nn.Module] = [nn.Flatten()]
    c_in = in_features
    for w in widths:
        layers += [nn.Linear(c_in, w), nn.ReLU()]
        c_in = w
    layers.append(nn.Linear(c_in, 1))
    return nn.Sequential(*layers)


def _as_batch(x: torch.Tensor, size: int) -> torch.Tensor:
    x = torch.as_tensor(x, dtype=torch.float32)
    if x.ndim == 2:
        x = x[None, None]
    elif x.ndim == 3:
        x = x[:, None]
    if x.ndim != 4 or x.shape[1] != 1 or tuple(x.shape[-2:]) != (size, size):
        raise ValueError(f"expected images of shape ({size}, {size}), got batch shape {tuple(x.shape)}")
    return x


def init_parameters(module: nn.Module, seed: int) -> None:
    """Fan-in scaled (He) uniform weights and zero biases, drawn from ``seed``."""
    gen = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        for m in module.modules():
            if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear)):
                nn.init.kaiming_uniform_(m.weight, nonlinearity="relu", generator=gen)
                if m.bias is not None:
                    m.bias.zero_()


class DualHeadNetwork(nn.Module):
    """Shared encoder feeding a dense class head (ED unit) and a mask decoder."""

    def __init__(self, config: ArchConfig):
        super().__init__()
        self.config = config
        self.encoder = _encoder(config.encoder_channels)
        self.ed_dense = _dense_head(BOTTLENECK_CHANNELS * BOTTLENECK_SIDE**2, config.dense_widths)
        self.decoder = _Decoder(config.encoder_channels)

    def features(self, x) -> torch.Tensor:
        return self.encoder(_as_batch(x, self.config.input_size))

    def class_logits(self, feats: torch.Tensor) -> torch.Tensor:
        return self.ed_dense(feats).squeeze(1)

    def seg_logits(self, feats: torch.Tensor) -> torch.Tensor:
        return self.decoder(feats).squeeze(1)

    def forward(self, x) -> tuple[torch.Tensor, torch.Tensor]:
        """``(class_probs [N], seg_maps [N, H, W])``."""
        f = self.features(x)
        return torch.sigmoid(self.class_logits(f)), torch.sigmoid(self.seg_logits(f))

    def scope_parameters(self, scope: TrainableScope) -> list[nn.Parameter]:
        scope = TrainableScope(scope)
        if scope is TrainableScope.ALL:
            return list(self.parameters())
        if scope is TrainableScope.ED_ONLY:
            return [*self.encoder.parameters(), *self.ed_dense.parameters()]
        if scope is TrainableScope.ED_DENSE_ONLY:
            return list(self.ed_dense.parameters())
        raise ValueError(f"scope {scope.value!r} is not valid for a DualHeadNetwork")


class CamNetwork(nn.Module):
    """Frozen encoder, global average pooling, and a 16-input dense unit."""

    def __init__(self, config: ArchConfig):
        super().__init__()
        self.config = config
        self.encoder = _encoder(config.encoder_channels)
        self.cam_dense = nn.Linear(BOTTLENECK_CHANNELS, 1)

    def features(self, x) -> torch.Tensor:
        return self.encoder(_as_batch(x, self.config.input_size))

    @staticmethod
    def gap(feats: torch.Tensor) -> torch.Tensor:
        return feats.mean(dim=(2, 3))

    def class_logits(self, feats: torch.Tensor) -> torch.Tensor:
        return self.cam_dense(self.gap(feats)).squeeze(1)

    def forward(self, x) -> torch.Tensor:
        return torch.sigmoid(self.class_logits(self.features(x)))

    def scope_parameters(self, scope: TrainableScope) -> list[nn.Parameter]:
        scope = TrainableScope(scope)
        if scope is TrainableScope.CAM_DENSE_ONLY:
            return list(self.cam_dense.parameters())
        raise ValueError(f"scope {scope.value!r} is not valid for a CamNetwork")


def build_model(config: ArchConfig = ArchConfig(), seed: int = 0) -> DualHeadNetwork:
    net = DualHeadNetwork(config)
    init_parameters(net, seed)
    return net


def build_cam_head(net: DualHeadNetwork, seed: int = 0) -> CamNetwork:
    """Swap the ED dense layers for GAP + a fresh 16-weight dense unit.

    The encoder is deep-copied, so the result never aliases ``net``.
    """
    cam = CamNetwork(net.config)
    cam.encoder.load_state_dict(copy.deepcopy(net.encoder.state_dict()))
    init_parameters(cam.cam_dense, seed)
    set_trainable(cam, TrainableScope.CAM_DENSE_ONLY)
    return cam


def set_trainable(net: nn.Module, scope: TrainableScope | str) -> list[nn.Parameter]:
    """Mark exactly the parameters of ``scope`` trainable; returns them."""
    if not isinstance(net, (DualHeadNetwork, CamNetwork)):
        raise TypeError(f"unsupported network type {type(net).__name__}")
    trainable = net.scope_parameters(TrainableScope(scope))
    ids = {id(p) for p in trainable}
    for p in net.parameters():
        p.requires_grad_(id(p) in ids)
        p.grad = None
    return trainable


def parameter_snapshot(net: nn.Module) -> dict[str, torch.Tensor]:
    return {k: v.detach().clone() for k, v in net.state_dict().items()}
