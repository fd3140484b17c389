"""Per-phase feature extraction and iterative temporal fusion of CT phases.

Each phase has its own two-block encoder. Features are then folded in temporal
order (NC, A, V, then D when present)::

    fused_1     = h_NC
    fused_{k+1} = F_conv(concat(fused_k, h_next))

so a 3-phase case stops at fused_3 and a 4-phase case at fused_4, both with C
channels at input resolution.
"""

from __future__ import annotations

import torch
from torch import nn

from liverdx.errors import PhaseError
from liverdx.labels import PHASES, REQUIRED_PHASES

LEAKY_SLOPE = 0.01
NORM_EPS = 1e-5


class ConvBlock(nn.Sequential):
    """3x3x3 convolution, instance norm, LeakyReLU."""

    def __init__(self, in_ch, out_ch, stride=1, slope=LEAKY_SLOPE, eps=NORM_EPS):
        super().__init__(
            nn.Conv3d(in_ch, out_ch, kernel_size=3, stride=stride, padding=1),
            nn.InstanceNorm3d(out_ch, eps=eps, affine=True),
            nn.LeakyReLU(slope),
        )


def _as_volume_batch(volume):
    x = torch.as_tensor(volume)
    if x.dim() == 3:
        x = x[None, None]
    elif x.dim() == 4:
        x = x[:, None]
    if x.dim() != 5 or x.shape[1] != 1:
        raise ValueError(f"expected a 3D volume or a (B, 1, D, H, W) batch, got shape {tuple(x.shape)}")
    return x


class PhaseEncoders(nn.Module):
    """One unshared two-block encoder per phase."""

    def __init__(self, channels=16, slope=LEAKY_SLOPE, eps=NORM_EPS):
        super().__init__()
        self.channels = channels
        self.blocks = nn.ModuleDict({
            p: nn.Sequential(ConvBlock(1, channels, slope=slope, eps=eps), ConvBlock(channels, channels, slope=slope, eps=eps))
            for p in PHASES
        })

    def encode(self, volume, phase):
        if phase not in self.blocks:
            raise PhaseError(f"unknown phase {phase!r}; expected one of {PHASES}")
        x = _as_volume_batch(volume)
        w = self.blocks[phase][0][0].weight
        return self.blocks[phase](x.to(dtype=w.dtype, device=w.device))

    forward = encode


def phase_encode(volume, phase, params: PhaseEncoders):
    return params.encode(volume, phase)


class IterativeFusion(nn.Module):
    """Fold phase features in temporal order with a 2C -> C conv block.

    With ``shared=True`` (the default) one block is reused at every step;
    ``shared=False`` gives each of the three steps its own block.
    """

    def __init__(self, channels=16, shared=True, slope=LEAKY_SLOPE, eps=NORM_EPS):
        super().__init__()
        self.shared = shared
        n = 1 if shared else len(PHASES) - 1
        self.steps = nn.ModuleList([ConvBlock(2 * channels, channels, slope=slope, eps=eps) for _ in range(n)])

    def step_block(self, k):
        return self.steps[0 if self.shared else k]

    def forward(self, features, return_intermediates=False):
        if not 3 <= len(features) <= 4:
            raise PhaseError(f"iterative fusion needs 3 or 4 phase features, got {len(features)}")
        shape = features[0].shape
        if any(f.shape != shape for f in features):
            raise PhaseError("phase features must share one shape")
        fused = features[0]
        history = [fused]
        for k, h in enumerate(features[1:]):
            fused = self.step_block(k)(torch.cat([fused, h], dim=1))
            history.append(fused)
        return (fused, history) if return_intermediates else fused


def iterative_fuse(features, params: IterativeFusion):
    return params(features)


def _ordered_phases(volumes):
    present = [p for p in PHASES if p in volumes]
    unknown = set(volumes) - set(PHASES)
    if unknown:
        raise PhaseError(f"unknown phases {sorted(unknown)}")
    if any(p not in volumes for p in REQUIRED_PHASES):
        raise PhaseError(f"NC, A and V are required, got {present}")
    return present


class PhaseFusion(nn.Module):
    """Phase encoders followed by iterative fusion; accepts 3 or 4 phases."""

    def __init__(self, channels=16, shared=True, slope=LEAKY_SLOPE, eps=NORM_EPS):
        super().__init__()
        self.channels = channels
        self.encoders = PhaseEncoders(channels, slope, eps)
        self.fuse = IterativeFusion(channels, shared, slope, eps)

    def forward(self, volumes):
        phases = _ordered_phases(volumes)
        feats = [self.encoders.encode(volumes[p], p) for p in phases]
        return self.fuse(feats)


class EarlyConcatFusion(nn.Module):
    """Ablation stand-in: NC, A, V stacked as channels into one encoder; D is ignored."""

    def __init__(self, channels=16, slope=LEAKY_SLOPE, eps=NORM_EPS):
        super().__init__()
        self.channels = channels
        self.encoder = nn.Sequential(
            ConvBlock(len(REQUIRED_PHASES), channels, slope=slope, eps=eps),
            ConvBlock(channels, channels, slope=slope, eps=eps),
        )

    def forward(self, volumes):
        _ordered_phases(volumes)
        w = self.encoder[0][0].weight
        x = torch.cat([_as_volume_batch(volumes[p]) for p in REQUIRED_PHASES], dim=1)
        return self.encoder(x.to(dtype=w.dtype, device=w.device))
