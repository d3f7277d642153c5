"""U-Net over residual multi-kernel blocks with tri-axis attention gating.

Layout convention: torch tensors are (B, C, H, W); feature maps are plain
tensors, no wrapper type. Tiles enter as (H, W, C) rasters and are permuted
by the trainer.

Architecture (config depth d, base filters f, input H = head_resolutions[1]):
    encoder level i (0..d-1): block -> attention -> skip, then 2x2 max pool
    bottleneck: block -> attention, channels f * 2^d
    decoder level i (d-1..0): nearest 2x upsample, concat skip, block ->
        attention; output channels 2 * f * 2^i, so the final map carries
        2f channels at full resolution (64 at the default f=32).
    heads (parameter-free): sigmoid of the channel mean. The full-resolution
        head reads the final map; the double-resolution head reads the final
        map nearest-upsampled 2x; the half-resolution head reads the deepest
        decoder feature one level below full resolution (the bottleneck when
        depth == 1).
    detection: global average pool of the final map -> single dense -> logit.

BatchNorm uses torch momentum 0.1, i.e. running-average decay 0.9 in the
classic convention.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import asdict, dataclass, field
from typing import Dict, Optional, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import (
    BadMagic,
    ChannelMismatch,
    MissingHead,
    ShapeMismatch,
    TruncatedFile,
    UnsupportedVersion,
)

LEAKY_SLOPE = 0.01
CKPT_MAGIC = b"RMCK"
CKPT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    in_channels: int = 23
    base_filters: int = 32
    depth: int = 4
    attention_heads: int = 4
    attention_key_dim: int = 16
    head_resolutions: Tuple[int, int, int] = (256, 128, 64)
    mode: str = "both"  # segmentation | detection | both; consumed by the trainer
    block: str = "res"  # res | double, for block ablations
    attention: bool = True  # False strips the attention gates entirely

    def __post_init__(self):
        # in_channels 0 is the "infer from data" sentinel the trainer resolves
        if self.in_channels < 0:
            raise ShapeMismatch("in_channels must be >= 0")
        if self.depth < 1:
            raise ShapeMismatch("depth must be >= 1")
        if len(self.head_resolutions) != 3:
            raise ShapeMismatch("exactly three head resolutions required")
        hi, mid, lo = self.head_resolutions
        if not (hi == 2 * mid and mid == 2 * lo):
            raise ShapeMismatch(
                f"head resolutions must be (2H, H, H/2), got {self.head_resolutions}"
            )
        if mid % (1 << self.depth) != 0:
            raise ShapeMismatch(
                f"input size {mid} not divisible by 2^depth={1 << self.depth}"
            )
        if self.mode not in ("segmentation", "detection", "both"):
            raise ShapeMismatch(f"bad mode {self.mode!r}")
        if self.block not in ("res", "double"):
            raise ShapeMismatch(f"bad block {self.block!r}")
        object.__setattr__(self, "head_resolutions", tuple(self.head_resolutions))

    @property
    def input_size(self) -> int:
        return self.head_resolutions[1]


def _conv_bn_act(c_in: int, c_out: int, k: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(c_in, c_out, k, padding=k // 2),
        nn.BatchNorm2d(c_out),
        nn.LeakyReLU(LEAKY_SLOPE),
    )


class DoubleConv(nn.Module):
    """Two (3x3 conv -> BN -> LeakyReLU) units; the plain baseline block."""

    def __init__(self, c_in: int, c_out: int):
        super().__init__()
        self.unit1 = _conv_bn_act(c_in, c_out, 3)
        self.unit2 = _conv_bn_act(c_out, c_out, 3)

    def forward(self, x):
        return self.unit2(self.unit1(x))


class ResConv(nn.Module):
    """Parallel 1x1/3x3/5x5 conv branches summed, plus a shortcut."""

    def __init__(self, c_in: int, c_out: int):
        super().__init__()
        self.branch1 = _conv_bn_act(c_in, c_out, 1)
        self.branch3 = _conv_bn_act(c_in, c_out, 3)
        self.branch5 = _conv_bn_act(c_in, c_out, 5)
        self.shortcut = (
            nn.Identity() if c_in == c_out else nn.Conv2d(c_in, c_out, 1)
        )

    def forward(self, x):
        return self.branch1(x) + self.branch3(x) + self.branch5(x) + self.shortcut(x)


class PooledAttention(nn.Module):
    """Multi-head self-attention over one pooled 2-D map (B, T, D) -> (B, T, D)."""

    def __init__(self, dim: int, heads: int, key_dim: int):
        super().__init__()
        self.heads = heads
        self.key_dim = key_dim
        inner = heads * key_dim
        self.q = nn.Linear(dim, inner)
        self.k = nn.Linear(dim, inner)
        self.v = nn.Linear(dim, inner)
        self.out = nn.Linear(inner, dim)

    def forward(self, x):
        b, t, _ = x.shape
        h, dk = self.heads, self.key_dim
        q = self.q(x).reshape(b, t, h, dk).transpose(1, 2)
        k = self.k(x).reshape(b, t, h, dk).transpose(1, 2)
        v = self.v(x).reshape(b, t, h, dk).transpose(1, 2)
        scores = torch.softmax(q @ k.transpose(-2, -1) / (dk ** 0.5), dim=-1)
        att = (scores @ v).transpose(1, 2).reshape(b, t, h * dk)
        return self.out(att)


class TriAxisAttention(nn.Module):
    """Gate a (B, C, H, W) map by attention over its three axis reductions.

    Per axis: reduce with max and with mean, attend over each pooled map,
    average the two attended maps, squash with sigmoid, and multiply the
    three resulting gates into the input. Attention layers are sized for
    the (C, H, W) fixed at construction.
    """

    def __init__(self, channels: int, height: int, width: int, heads: int, key_dim: int):
        super().__init__()
        # pooled maps: drop C -> (H, W); drop H -> (C, W); drop W -> (C, H)
        self.att_c_max = PooledAttention(width, heads, key_dim)
        self.att_c_avg = PooledAttention(width, heads, key_dim)
        self.att_h_max = PooledAttention(width, heads, key_dim)
        self.att_h_avg = PooledAttention(width, heads, key_dim)
        self.att_w_max = PooledAttention(height, heads, key_dim)
        self.att_w_avg = PooledAttention(height, heads, key_dim)

    def forward(self, x):
        gate_c = torch.sigmoid(
            (self.att_c_max(x.amax(dim=1)) + self.att_c_avg(x.mean(dim=1))) / 2
        ).unsqueeze(1)
        gate_h = torch.sigmoid(
            (self.att_h_max(x.amax(dim=2)) + self.att_h_avg(x.mean(dim=2))) / 2
        ).unsqueeze(2)
        gate_w = torch.sigmoid(
            (self.att_w_max(x.amax(dim=3)) + self.att_w_avg(x.mean(dim=3))) / 2
        ).unsqueeze(3)
        return x * gate_c * gate_h * gate_w


class _Level(nn.Module):
    """Block plus optional attention; one encoder/decoder/bottleneck stage."""

    def __init__(self, cfg: ModelConfig, c_in: int, c_out: int, size: int):
        super().__init__()
        block_cls = ResConv if cfg.block == "res" else DoubleConv
        self.block = block_cls(c_in, c_out)
        self.att = (
            TriAxisAttention(c_out, size, size, cfg.attention_heads, cfg.attention_key_dim)
            if cfg.attention
            else nn.Identity()
        )

    def forward(self, x):
        return self.att(self.block(x))


class RmauNet(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        if cfg.in_channels < 1:
            raise ShapeMismatch("cannot build a model with in_channels=0 (unresolved)")
        self.cfg = cfg
        f, d, size = cfg.base_filters, cfg.depth, cfg.input_size
        self.pool = nn.MaxPool2d(2)
        self.up = nn.Upsample(scale_factor=2, mode="nearest")

        self.enc = nn.ModuleList()
        c_prev = cfg.in_channels
        for i in range(d):
            c_out = f * (1 << i)
            self.enc.append(_Level(cfg, c_prev, c_out, size >> i))
            c_prev = c_out
        self.bott = _Level(cfg, c_prev, f * (1 << d), size >> d)

        self.dec = nn.ModuleList()
        c_prev = f * (1 << d)
        for i in range(d - 1, -1, -1):
            skip = f * (1 << i)
            c_out = 2 * f * (1 << i)
            self.dec.append(_Level(cfg, c_prev + skip, c_out, size >> i))
            c_prev = c_out
        self.detect = nn.Linear(c_prev, 1)

    def forward(self, x: torch.Tensor) -> Dict[str, object]:
        cfg = self.cfg
        if x.ndim != 4 or x.shape[1] != cfg.in_channels:
            raise ChannelMismatch(
                f"expected (B, {cfg.in_channels}, H, W), got {tuple(x.shape)}"
            )
        if x.shape[2] != cfg.input_size or x.shape[3] != cfg.input_size:
            raise ShapeMismatch(
                f"expected {cfg.input_size}x{cfg.input_size} input, got "
                f"{x.shape[2]}x{x.shape[3]}"
            )
        skips = []
        for level in self.enc:
            x = level(x)
            skips.append(x)
            x = self.pool(x)
        x = self.bott(x)
        half_res = x if cfg.depth == 1 else None
        for j, level in enumerate(self.dec):
            x = level(torch.cat([self.up(x), skips[-1 - j]], dim=1))
            if j == len(self.dec) - 2:
                half_res = x
        final = x

        hi, mid, lo = cfg.head_resolutions
        masks = {
            hi: torch.sigmoid(self.up(final).mean(dim=1)),
            mid: torch.sigmoid(final.mean(dim=1)),
            lo: torch.sigmoid(half_res.mean(dim=1)),
        }
        logit = self.detect(final.mean(dim=(2, 3))).squeeze(-1)
        return {"masks": masks, "detect_logit": logit}

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())


def force_identity_gates(model: RmauNet, bias: float = 30.0) -> None:
    """Surgery: make every attention gate output sigmoid(bias) ~ 1."""
    with torch.no_grad():
        for mod in model.modules():
            if isinstance(mod, PooledAttention):
                mod.out.weight.zero_()
                mod.out.bias.fill_(bias)


def ensemble_masks(masks: Dict[int, np.ndarray]) -> np.ndarray:
    """Average the three heads at the middle resolution.

    The double-resolution map is 2x2 box-averaged down; the half-resolution
    map is nearest-replicated up; the result is their pixelwise mean with
    the native map.
    """
    if len(masks) != 3:
        raise MissingHead(f"need exactly 3 heads, got {sorted(masks)}")
    hi, mid, lo = sorted(masks, reverse=True)
    if not (hi == 2 * mid and mid == 2 * lo):
        raise MissingHead(f"head resolutions {sorted(masks)} are not (2H, H, H/2)")
    a = np.asarray(masks[hi], dtype=np.float64)
    b = np.asarray(masks[mid], dtype=np.float64)
    c = np.asarray(masks[lo], dtype=np.float64)
    down = a.reshape(mid, 2, mid, 2).mean(axis=(1, 3))
    up = np.repeat(np.repeat(c, 2, axis=0), 2, axis=1)
    return ((down + b + up) / 3.0).astype(np.float32)


def _state_entries(model: RmauNet):
    # num_batches_tracked is an int64 step counter, not a learned value;
    # it is excluded from checkpoints and reset to zero on load.
    for name, tensor in model.state_dict().items():
        if name.endswith("num_batches_tracked"):
            continue
        yield name, tensor


def save_checkpoint(model: RmauNet, path) -> None:
    entries = []
    blob = io.BytesIO()
    offset = 0
    for name, tensor in _state_entries(model):
        arr = tensor.detach().cpu().to(torch.float32).numpy().astype("<f4")
        entries.append(
            {"name": name, "shape": list(arr.shape), "offset": offset, "numel": int(arr.size)}
        )
        blob.write(arr.tobytes())
        offset += arr.size
    header = json.dumps(
        {"config": asdict(model.cfg), "entries": entries}, sort_keys=True
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<2I", CKPT_VERSION, len(header)))
        fh.write(header)
        fh.write(blob.getvalue())


def load_checkpoint(path) -> RmauNet:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CKPT_MAGIC:
            raise BadMagic(f"{path}: expected {CKPT_MAGIC!r}, got {magic!r}")
        raw = fh.read(8)
        if len(raw) != 8:
            raise TruncatedFile(f"{path}: header cut short")
        version, header_len = struct.unpack("<2I", raw)
        if version != CKPT_VERSION:
            raise UnsupportedVersion(f"{path}: checkpoint version {version}")
        header_raw = fh.read(header_len)
        if len(header_raw) != header_len:
            raise TruncatedFile(f"{path}: header cut short")
        header = json.loads(header_raw.decode("utf-8"))
        payload = fh.read()

    cfg_dict = dict(header["config"])
    cfg_dict["head_resolutions"] = tuple(cfg_dict["head_resolutions"])
    cfg = ModelConfig(**cfg_dict)
    model = RmauNet(cfg)
    state = model.state_dict()
    want_names = [n for n, _ in _state_entries(model)]
    got_names = [e["name"] for e in header["entries"]]
    if want_names != got_names:
        raise UnsupportedVersion(f"{path}: parameter tree mismatch")
    total = sum(e["numel"] for e in header["entries"])
    if len(payload) != total * 4:
        raise TruncatedFile(f"{path}: payload {len(payload)} bytes, want {total * 4}")
    for entry in header["entries"]:
        start = entry["offset"] * 4
        arr = np.frombuffer(
            payload, dtype="<f4", count=entry["numel"], offset=start
        ).reshape(entry["shape"])
        state[entry["name"]] = torch.from_numpy(arr.copy()).to(
            state[entry["name"]].dtype
        )
    for name in list(state):
        if name.endswith("num_batches_tracked"):
            state[name] = torch.zeros_like(state[name])
    model.load_state_dict(state)
    return model
