"""VNet-style 3D encoder-decoder with four encoder feature taps."""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import DomainError, FeaturePyramid, SoftPrediction, Volume

DEPTH = 4


class ShapeError(DomainError):
    pass


def _conv_block(cin, cout):
    return nn.Sequential(
        nn.Conv3d(cin, cout, 3, padding=1),
        nn.InstanceNorm3d(cout, affine=True),
        nn.ReLU(inplace=True),
        nn.Conv3d(cout, cout, 3, padding=1),
        nn.InstanceNorm3d(cout, affine=True),
        nn.ReLU(inplace=True),
    )


def _down(cin, cout):
    return nn.Sequential(
        nn.Conv3d(cin, cout, 2, stride=2),
        nn.InstanceNorm3d(cout, affine=True),
        nn.ReLU(inplace=True),
    )


def _up(cin, cout):
    return nn.Sequential(
        nn.Conv3d(cin, cout, 1),
        nn.InstanceNorm3d(cout, affine=True),
        nn.ReLU(inplace=True),
    )


class VNetBackbone(nn.Module):
    """Four-level encoder-decoder; normalization is batch-independent so a
    batch of one is reproducible. Forward returns softmax probabilities and
    the four encoder taps (shallow to deep)."""

    def __init__(self, base_channels: int = 16, num_classes: int = 2):
        super().__init__()
        if base_channels < 1 or num_classes < 2:
            raise DomainError("base_channels >= 1 and num_classes >= 2 required")
        c = base_channels
        self.base_channels = c
        self.num_classes = num_classes
        self.enc1 = _conv_block(1, c)
        self.down1 = _down(c, 2 * c)
        self.enc2 = _conv_block(2 * c, 2 * c)
        self.down2 = _down(2 * c, 4 * c)
        self.enc3 = _conv_block(4 * c, 4 * c)
        self.down3 = _down(4 * c, 8 * c)
        self.enc4 = _conv_block(8 * c, 8 * c)
        self.up3 = _up(8 * c, 4 * c)
        self.dec3 = _conv_block(8 * c, 4 * c)
        self.up2 = _up(4 * c, 2 * c)
        self.dec2 = _conv_block(4 * c, 2 * c)
        self.up1 = _up(2 * c, c)
        self.dec1 = _conv_block(2 * c, c)
        self.head = nn.Conv3d(c, num_classes, 1)

    @property
    def tap_channels(self):
        c = self.base_channels
        return (c, 2 * c, 4 * c, 8 * c)

    def check_input_shape(self, shape):
        for axis, name in zip(shape, "HWD"):
            if axis % 8 != 0:
                raise ShapeError(
                    f"axis {name}={axis} not divisible by 8 (three downsamplings)"
                )

    def forward(self, x: torch.Tensor):
        self.check_input_shape(x.shape[-3:])
        t1 = self.enc1(x)
        t2 = self.enc2(self.down1(t1))
        t3 = self.enc3(self.down2(t2))
        t4 = self.enc4(self.down3(t3))
        d3 = self.dec3(torch.cat([self._upsample(self.up3, t4), t3], dim=1))
        d2 = self.dec2(torch.cat([self._upsample(self.up2, d3), t2], dim=1))
        d1 = self.dec1(torch.cat([self._upsample(self.up1, d2), t1], dim=1))
        probs = torch.softmax(self.head(d1), dim=1)
        return probs, [t1, t2, t3, t4]

    @staticmethod
    def _upsample(block, x):
        x = F.interpolate(x, scale_factor=2, mode="trilinear", align_corners=False)
        return block(x)


def expected_param_count(base_channels: int, num_classes: int) -> int:
    """Closed-form learnable parameter count of VNetBackbone.

    conv(i, o, k): i*o*k^3 + o; instance norm: 2*o.
    """
    c, k = base_channels, num_classes

    def block(i, o):
        return (27 * i * o + o + 2 * o) + (27 * o * o + o + 2 * o)

    def down(i, o):
        return 8 * i * o + o + 2 * o

    def up(i, o):
        return i * o + o + 2 * o

    total = block(1, c) + down(c, 2 * c) + block(2 * c, 2 * c)
    total += down(2 * c, 4 * c) + block(4 * c, 4 * c)
    total += down(4 * c, 8 * c) + block(8 * c, 8 * c)
    total += up(8 * c, 4 * c) + block(8 * c, 4 * c)
    total += up(4 * c, 2 * c) + block(4 * c, 2 * c)
    total += up(2 * c, c) + block(2 * c, c)
    total += c * k + k
    return total


def init_backbone(seed: int, base_channels: int, num_classes: int) -> VNetBackbone:
    """Deterministically initialized backbone (fan-in scaled uniform init)."""
    gen_state = torch.random.get_rng_state()
    torch.manual_seed(seed)
    net = VNetBackbone(base_channels=base_channels, num_classes=num_classes)
    torch.random.set_rng_state(gen_state)
    return net


def backbone_forward(net: VNetBackbone, volume: Volume):
    """Single-volume forward returning domain types (no gradients)."""
    x = torch.from_numpy(volume.voxels).float()[None, None]
    with torch.no_grad():
        probs, taps = net(x)
    pred = SoftPrediction(probs[0].numpy())
    pyramid = FeaturePyramid([t[0] for t in taps])
    return pred, pyramid
