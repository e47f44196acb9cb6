"""Backbone network, conditional control encoder, and checkpoint format.

The backbone is a small two-level encoder-decoder with skip connections,
FiLM-style time conditioning on Fourier features of log t, group
normalization and SiLU throughout. The control encoder clones the
backbone's encoder and middle block and couples into the decoder through
zero-initialized 1x1 convolutions, so an untrained encoder is exactly
inert.

Everything runs in float64 on a single thread: forward passes must be
bit-reproducible across runs, and parameter gradients are checked against
central finite differences at tolerances float32 cannot meet.
"""

from __future__ import annotations

import copy
import json
import struct
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .errors import MalformedHeader, TruncatedPayload, ValidationError
from .tensor import SeededRng

torch.set_num_threads(1)

DTYPE = torch.float64


def _as_time_tensor(t) -> torch.Tensor:
    """Normalize a float or (B,) tensor time to a 1-D float64 tensor."""
    if isinstance(t, torch.Tensor):
        return t.reshape(-1).to(DTYPE)
    return torch.tensor([float(t)], dtype=DTYPE)


def _scale_input(x: torch.Tensor, t, sigma_data: float) -> torch.Tensor:
    """Normalize x_t to unit-ish variance: divide by sqrt(t^2 + sigma_data^2)."""
    tt = _as_time_tensor(t)
    denom = torch.sqrt(tt * tt + sigma_data * sigma_data)
    if tt.numel() == 1:
        return x / float(denom[0])
    return x / denom[:, None, None, None]


class FourierTimeEmbedding(nn.Module):
    """Sinusoidal features of log t followed by a two-layer MLP."""

    def __init__(self, fourier_dim: int, time_dim: int):
        super().__init__()
        half = fourier_dim // 2
        freqs = torch.exp(-np.log(1000.0) * torch.arange(half, dtype=DTYPE) / max(half - 1, 1))
        self.register_buffer("freqs", freqs)
        self.mlp = nn.Sequential(
            nn.Linear(fourier_dim, time_dim, dtype=DTYPE),
            nn.SiLU(),
            nn.Linear(time_dim, time_dim, dtype=DTYPE),
        )

    def forward(self, t) -> torch.Tensor:
        args = torch.log(_as_time_tensor(t))[:, None] * self.freqs[None, :]
        feats = torch.cat([torch.cos(args), torch.sin(args)], dim=1)
        return self.mlp(feats)


class ResBlock(nn.Module):
    """GroupNorm/SiLU residual block with scale-shift time conditioning."""

    def __init__(self, ch_in: int, ch_out: int, time_dim: int, groups: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(groups, ch_in, dtype=DTYPE)
        self.conv1 = nn.Conv2d(ch_in, ch_out, 3, padding=1, dtype=DTYPE)
        self.time_proj = nn.Linear(time_dim, 2 * ch_out, dtype=DTYPE)
        self.norm2 = nn.GroupNorm(groups, ch_out, dtype=DTYPE)
        self.conv2 = nn.Conv2d(ch_out, ch_out, 3, padding=1, dtype=DTYPE)
        self.skip = nn.Conv2d(ch_in, ch_out, 1, dtype=DTYPE) if ch_in != ch_out else nn.Identity()
        self.act = nn.SiLU()

    def forward(self, x, temb):
        h = self.conv1(self.act(self.norm1(x)))
        scale, shift = self.time_proj(self.act(temb)).chunk(2, dim=-1)
        h = self.norm2(h) * (1.0 + scale[:, :, None, None]) + shift[:, :, None, None]
        h = self.conv2(self.act(h))
        return h + self.skip(x)


def _zero_conv(channels: int) -> nn.Conv2d:
    conv = nn.Conv2d(channels, channels, 1, dtype=DTYPE)
    with torch.no_grad():
        conv.weight.zero_()
        conv.bias.zero_()
    return conv


@dataclass(frozen=True)
class NetConfig:
    in_channels: int = 1
    base_channels: int = 16
    time_dim: int = 32
    fourier_dim: int = 16
    groups: int = 4

    def as_dict(self):
        return {
            "in_channels": self.in_channels,
            "base_channels": self.base_channels,
            "time_dim": self.time_dim,
            "fourier_dim": self.fourier_dim,
            "groups": self.groups,
        }


class BackboneNet(nn.Module):
    """Predicts the denoising direction F(x, t) on (B, c, h, w) batches.

    Inputs are pre-scaled by 1/sqrt(t^2 + sigma_data^2) so activations stay
    O(1) across the whole noise range.
    """

    def __init__(self, config: NetConfig, sigma_data: float = 0.5):
        super().__init__()
        if config.base_channels % config.groups:
            raise ValidationError("base_channels must be divisible by groups")
        self.config = config
        self.sigma_data = float(sigma_data)
        c0 = config.base_channels
        c1 = 2 * c0
        td = config.time_dim
        g = config.groups
        self.time_embed = FourierTimeEmbedding(config.fourier_dim, td)
        self.in_conv = nn.Conv2d(config.in_channels, c0, 3, padding=1, dtype=DTYPE)
        self.enc1 = ResBlock(c0, c0, td, g)
        self.down = nn.Conv2d(c0, c1, 3, stride=2, padding=1, dtype=DTYPE)
        self.enc2 = ResBlock(c1, c1, td, g)
        self.mid = ResBlock(c1, c1, td, g)
        self.dec2 = ResBlock(2 * c1, c1, td, g)
        self.up = nn.Conv2d(c1, c0, 3, padding=1, dtype=DTYPE)
        self.dec1 = ResBlock(2 * c0, c0, td, g)
        self.out_norm = nn.GroupNorm(g, c0, dtype=DTYPE)
        self.out_conv = nn.Conv2d(c0, config.in_channels, 3, padding=1, dtype=DTYPE)
        self.act = nn.SiLU()

    def forward(self, x, t, control=None, scale: float = 1.0):
        if x.shape[-1] % 2 or x.shape[-2] % 2:
            raise ValidationError("spatial dims must be even for the 2-level net")
        temb = self.time_embed(t)
        x_in = _scale_input(x, t, self.sigma_data)
        h1 = self.enc1(self.in_conv(x_in), temb)
        h2 = self.enc2(self.down(h1), temb)
        m = self.mid(h2, temb)
        if control is not None:
            r1, r2, rm = control
            h1 = h1 + scale * r1
            h2 = h2 + scale * r2
            m = m + scale * rm
        u2 = self.dec2(torch.cat([m, h2], dim=1), temb)
        u1 = self.up(torch.nn.functional.interpolate(u2, scale_factor=2, mode="nearest"))
        u0 = self.dec1(torch.cat([u1, h1], dim=1), temb)
        return self.out_conv(self.act(self.out_norm(u0)))


class ControlEncoder(nn.Module):
    """Trainable copy of the backbone encoder plus zero-coupled condition path.

    forward() returns the three residuals injected into the backbone's
    decoder skip inputs (level 1, level 2, middle); all are exactly zero
    until training moves the zero convolutions.
    """

    def __init__(self, backbone: BackboneNet, cond_channels: int | None = None):
        super().__init__()
        cfg = backbone.config
        c0 = cfg.base_channels
        c1 = 2 * c0
        self.config = cfg
        self.cond_channels = cfg.in_channels if cond_channels is None else int(cond_channels)
        self.sigma_data = backbone.sigma_data
        self.guidance_scale = 1.0
        self.time_embed = copy.deepcopy(backbone.time_embed)
        self.in_conv = copy.deepcopy(backbone.in_conv)
        self.enc1 = copy.deepcopy(backbone.enc1)
        self.down = copy.deepcopy(backbone.down)
        self.enc2 = copy.deepcopy(backbone.enc2)
        self.mid = copy.deepcopy(backbone.mid)
        self.cond_embed = nn.Conv2d(self.cond_channels, c0, 3, padding=1, dtype=DTYPE)
        self.zero_in = _zero_conv(c0)
        self.zero_out1 = _zero_conv(c0)
        self.zero_out2 = _zero_conv(c1)
        self.zero_mid = _zero_conv(c1)
        self.act = nn.SiLU()

    def forward(self, x, cond, t):
        temb = self.time_embed(t)
        x_in = _scale_input(x, t, self.sigma_data)
        h0 = self.in_conv(x_in) + self.zero_in(self.act(self.cond_embed(cond)))
        h1 = self.enc1(h0, temb)
        h2 = self.enc2(self.down(h1), temb)
        m = self.mid(h2, temb)
        return self.zero_out1(h1), self.zero_out2(h2), self.zero_mid(m)


def init_parameters(module: nn.Module, rng: SeededRng) -> None:
    """Deterministic re-initialization from a SeededRng.

    Weight matrices get U(-1/sqrt(fan_in), 1/sqrt(fan_in)), norm gains 1,
    every bias 0. Parameters whose name mentions a zero coupling stay 0.
    """
    with torch.no_grad():
        for name, param in module.named_parameters():
            if "zero_" in name:
                param.zero_()
            elif param.ndim > 1:
                fan_in = int(np.prod(param.shape[1:]))
                bound = 1.0 / np.sqrt(fan_in)
                vals = (rng.uniform(param.numel()) * 2.0 - 1.0) * bound
                param.copy_(torch.from_numpy(vals.reshape(tuple(param.shape))))
            elif "weight" in name:
                param.fill_(1.0)  # norm gains
            else:
                param.zero_()


def flat_params(module: nn.Module) -> np.ndarray:
    return torch.nn.utils.parameters_to_vector(module.parameters()).detach().numpy().copy()


def set_flat_params(module: nn.Module, vec: np.ndarray) -> None:
    expected = sum(p.numel() for p in module.parameters())
    if vec.size != expected:
        raise ValidationError(f"parameter vector has {vec.size} entries, module needs {expected}")
    torch.nn.utils.vector_to_parameters(torch.from_numpy(np.ascontiguousarray(vec, dtype=np.float64)), module.parameters())


def parameter_count(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


# ---------------------------------------------------------------------------
# Checkpoints: JSON header + independently loadable flat float64 payloads
# ---------------------------------------------------------------------------

_CKPT_MAGIC = b"CMCK"


def save_checkpoint(path, schedule, backbone: BackboneNet, ema: np.ndarray | None = None,
                    control: ControlEncoder | None = None) -> None:
    sections = {"backbone": flat_params(backbone)}
    if ema is not None:
        sections["ema"] = np.asarray(ema, dtype=np.float64)
    if control is not None:
        sections["control"] = flat_params(control)
    header = {
        "version": 1,
        "schedule": {
            "epsilon": schedule.epsilon,
            "t_max": schedule.t_max,
            "rho": schedule.rho,
            "steps": schedule.steps,
            "sigma_data": schedule.sigma_data,
        },
        "backbone_config": backbone.config.as_dict(),
        "control_config": None if control is None else {
            **control.config.as_dict(), "cond_channels": control.cond_channels,
        },
        "sections": {name: vec.size for name, vec in sections.items()},
    }
    blob = json.dumps(header).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for vec in sections.values():
            fh.write(np.ascontiguousarray(vec, dtype="<f8").tobytes())


@dataclass
class Checkpoint:
    header: dict
    sections: dict

    @property
    def schedule_params(self):
        return self.header["schedule"]


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 8 or raw[:4] != _CKPT_MAGIC:
        raise MalformedHeader(f"{path}: not a checkpoint file")
    (hlen,) = struct.unpack_from("<I", raw, 4)
    try:
        header = json.loads(raw[8:8 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise MalformedHeader(f"{path}: bad checkpoint header") from exc
    offset = 8 + hlen
    sections = {}
    for name, size in header["sections"].items():
        nbytes = size * 8
        chunk = raw[offset:offset + nbytes]
        if len(chunk) != nbytes:
            raise TruncatedPayload(f"{path}: section {name} incomplete")
        sections[name] = np.frombuffer(chunk, dtype="<f8").copy()
        offset += nbytes
    return Checkpoint(header, sections)
