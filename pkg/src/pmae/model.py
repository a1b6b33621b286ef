"""
Video masked autoencoder with a raw+difference fusion stem.

Shape pipeline for a ``(B, T, H, W, 3)`` clip::

    stem      -> (B, T, H/4,  W/4,  C_stem)
    tokenize  -> (B, T, H/16, W/16, D)       + fixed 3-D sinusoidal positions
    encode    -> visible tokens only
    decode    -> (B, T, H/16, W/16, 48)      4x4x3 pixel patches at stem resolution
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from typing import Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .masking import MaskIndex, MaskPlan, apply_mask, reassemble

PATCH = 4  # tokenizer patch on the stem output; the stem itself downsamples by 4
PATCH_DIM = PATCH * PATCH * 3


@dataclass
class ModelConfig:
    D: int = 64
    enc_depth: int = 4
    dec_depth: int = 4
    heads: int = 4
    C_stem: int = 32
    T: int = 160
    H: int = 128
    W: int = 128
    mlp_ratio: float = 4.0
    seed: int = 0

    def __post_init__(self):
        if self.D % self.heads:
            raise ValueError(f"D={self.D} is not divisible by heads={self.heads}")
        if self.H % 16 or self.W % 16:
            raise ValueError(f"H and W must be divisible by 16, got {self.H}x{self.W}")
        if self.D < 6:
            raise ValueError("D must be at least 6 for the 3-D positional embedding")

    @property
    def grid(self) -> Tuple[int, int]:
        return self.H // 16, self.W // 16

    @property
    def n_tokens(self) -> int:
        h, w = self.grid
        return self.T * h * w

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


def _sincos(pos: np.ndarray, dim: int) -> np.ndarray:
    # standard transformer table; dim is even
    i = np.arange(dim // 2)
    freq = 1.0 / (10000.0 ** (2 * i / dim))
    ang = pos[:, None] * freq[None, :]
    out = np.empty((len(pos), dim))
    out[:, 0::2] = np.sin(ang)
    out[:, 1::2] = np.cos(ang)
    return out


def sinusoidal_3d(T: int, h: int, w: int, D: int) -> torch.Tensor:
    """Fixed positional table of shape ``(T, h, w, D)``.

    Channels are split between time, row and column, each a sin/cos table, and
    concatenated, so distinct lattice positions always get distinct vectors.
    """
    d_sp = 2 * (D // 6)
    d_t = D - 2 * d_sp
    et = _sincos(np.arange(T, dtype=np.float64), d_t)
    er = _sincos(np.arange(h, dtype=np.float64), d_sp)
    ec = _sincos(np.arange(w, dtype=np.float64), d_sp)
    table = np.concatenate([
        np.broadcast_to(et[:, None, None, :], (T, h, w, d_t)),
        np.broadcast_to(er[None, :, None, :], (T, h, w, d_sp)),
        np.broadcast_to(ec[None, None, :, :], (T, h, w, d_sp)),
    ], axis=-1)
    return torch.from_numpy(np.ascontiguousarray(table)).float()


class FusionStem(nn.Module):
    """Concatenate each frame with its backward difference, then two stride-2 convs."""

    def __init__(self, C_stem: int):
        super().__init__()
        mid = max(C_stem // 2, 8)
        self.conv1 = nn.Conv2d(6, mid, 3, stride=2, padding=1)
        self.conv2 = nn.Conv2d(mid, C_stem, 3, stride=2, padding=1)

    @staticmethod
    def fuse(frames: torch.Tensor) -> torch.Tensor:
        prev = torch.cat([frames[:, :1], frames[:, :-1]], dim=1)
        return torch.cat([frames, frames - prev], dim=-1)

    def forward(self, frames: torch.Tensor) -> torch.Tensor:
        if frames.dim() != 5 or frames.shape[-1] != 3:
            raise ValueError(f"expected (B, T, H, W, 3) frames, got {tuple(frames.shape)}")
        B, T, H, W, _ = frames.shape
        if T < 2:
            raise ValueError("the fusion stem needs at least two frames")
        if H % 4 or W % 4:
            raise ValueError(f"frame size {H}x{W} must be divisible by 4")
        x = self.fuse(frames).reshape(B * T, H, W, 6).permute(0, 3, 1, 2)
        x = F.gelu(self.conv1(x))
        x = F.gelu(self.conv2(x))
        return x.permute(0, 2, 3, 1).reshape(B, T, H // 4, W // 4, -1)


class Tokenizer(nn.Module):
    def __init__(self, C_stem: int, D: int, T: int, grid: Tuple[int, int]):
        super().__init__()
        self.proj = nn.Conv2d(C_stem, D, PATCH, stride=PATCH)
        self.register_buffer("pos_embed", sinusoidal_3d(T, grid[0], grid[1], D), persistent=False)

    def forward(self, stem_out: torch.Tensor) -> torch.Tensor:
        B, T, h4, w4, C = stem_out.shape
        if h4 % PATCH or w4 % PATCH:
            raise ValueError(f"stem output {h4}x{w4} is not divisible by {PATCH}")
        if (T, h4 // PATCH, w4 // PATCH) != tuple(self.pos_embed.shape[:3]):
            raise ValueError(f"token lattice {(T, h4 // PATCH, w4 // PATCH)} does not match the "
                             f"configured {tuple(self.pos_embed.shape[:3])}")
        x = stem_out.reshape(B * T, h4, w4, C).permute(0, 3, 1, 2)
        x = self.proj(x).permute(0, 2, 3, 1)
        x = x.reshape(B, T, h4 // PATCH, w4 // PATCH, -1)
        return x + self.pos_embed.to(x.dtype)


class Attention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        B, N, D = x.shape
        qkv = self.qkv(x).reshape(B, N, 3, self.heads, D // self.heads).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        attn = (q @ k.transpose(-2, -1)) * (D // self.heads) ** -0.5
        out = attn.softmax(dim=-1) @ v
        return self.proj(out.transpose(1, 2).reshape(B, N, D))


class Block(nn.Module):
    """Pre-norm transformer block."""

    def __init__(self, dim: int, heads: int, mlp_ratio: float = 4.0):
        super().__init__()
        hidden = int(dim * mlp_ratio)
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))

    def forward(self, x):
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


class Encoder(nn.Module):
    def __init__(self, dim: int, depth: int, heads: int, mlp_ratio: float):
        super().__init__()
        self.blocks = nn.ModuleList([Block(dim, heads, mlp_ratio) for _ in range(depth)])
        self.norm = nn.LayerNorm(dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-2] == 0:
            raise ValueError("encoder received an empty token sequence")
        for blk in self.blocks:
            x = blk(x)
        return self.norm(x)


class Decoder(nn.Module):
    def __init__(self, dim: int, depth: int, heads: int, mlp_ratio: float, pos_embed: torch.Tensor):
        super().__init__()
        self.mask_token = nn.Parameter(torch.zeros(dim))
        self.register_buffer("pos_embed", pos_embed.clone(), persistent=False)
        self.blocks = nn.ModuleList([Block(dim, heads, mlp_ratio) for _ in range(depth)])
        self.norm = nn.LayerNorm(dim)
        self.head = nn.Linear(dim, PATCH_DIM)

    def forward(self, encoded: torch.Tensor, index: MaskIndex) -> Tuple[torch.Tensor, torch.Tensor]:
        if tuple(index.shape) != tuple(self.pos_embed.shape[:3]):
            raise ValueError(f"mask index lattice {index.shape} does not match "
                             f"{tuple(self.pos_embed.shape[:3])}")
        full = reassemble(encoded, self.mask_token, index)
        full = full + self.pos_embed.to(full.dtype)
        lattice = full.shape[:-1]
        x = full.reshape(full.shape[0], -1, full.shape[-1])
        for blk in self.blocks:
            x = blk(x)
        hidden = self.norm(x)
        pixels = self.head(hidden)
        return pixels.reshape(lattice + (PATCH_DIM,)), hidden.reshape(lattice + (-1,))


class SignalHead(nn.Module):
    """Per-frame spatial mean then a kernel-3 temporal conv to one channel."""

    def __init__(self, dim: int):
        super().__init__()
        self.conv = nn.Conv1d(dim, 1, 3, padding=1)

    def forward(self, grid: torch.Tensor) -> torch.Tensor:
        x = grid.mean(dim=(2, 3)).transpose(1, 2)  # (B, D, T)
        return self.conv(x)[:, 0]


class RPPGHead(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, dim // 2)
        self.fc2 = nn.Linear(dim // 2, 1)

    def forward(self, grid: torch.Tensor) -> torch.Tensor:
        x = grid.mean(dim=(2, 3))  # (B, T, D)
        return self.fc2(F.gelu(self.fc1(x)))[..., 0]


def _init_weights(m: nn.Module) -> None:
    if isinstance(m, nn.Linear):
        nn.init.xavier_uniform_(m.weight)
        nn.init.zeros_(m.bias)
    elif isinstance(m, nn.LayerNorm):
        nn.init.ones_(m.weight)
        nn.init.zeros_(m.bias)


class PeriodicMAE(nn.Module):
    """Stem, tokenizer, encoder, depth-4 decoder and the two signal heads.

    Parameters are initialised from ``config.seed`` without touching the
    global torch RNG, so identical configs give identical models.
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(config.seed)
            self.stem = FusionStem(config.C_stem)
            self.tokenizer = Tokenizer(config.C_stem, config.D, config.T, config.grid)
            self.encoder = Encoder(config.D, config.enc_depth, config.heads, config.mlp_ratio)
            self.decoder = Decoder(config.D, config.dec_depth, config.heads, config.mlp_ratio,
                                   self.tokenizer.pos_embed)
            self.signal_head = SignalHead(config.D)
            self.rppg = RPPGHead(config.D)
            self.apply(_init_weights)
            nn.init.normal_(self.decoder.mask_token, std=0.02)

    # individual stages -------------------------------------------------
    def stem_forward(self, frames: torch.Tensor) -> torch.Tensor:
        return self.stem(frames)

    def tokenize(self, stem_out: torch.Tensor) -> torch.Tensor:
        return self.tokenizer(stem_out)

    def encode(self, visible: torch.Tensor) -> torch.Tensor:
        return self.encoder(visible)

    def decode(self, encoded: torch.Tensor, index: MaskIndex) -> Tuple[torch.Tensor, torch.Tensor]:
        """Return ``(pixel_patches, hidden)`` over the full lattice."""
        return self.decoder(encoded, index)

    def signal_from_decoded(self, hidden: torch.Tensor) -> torch.Tensor:
        return self.signal_head(hidden)

    def rppg_head(self, encoded_full: torch.Tensor) -> torch.Tensor:
        if encoded_full.dim() != 5:
            raise ValueError("rppg_head needs the full (B, T, h, w, D) lattice; masked "
                             "token sequences are not accepted")
        return self.rppg(encoded_full)

    # composed passes ---------------------------------------------------
    def _as_batch(self, frames) -> torch.Tensor:
        if not isinstance(frames, torch.Tensor):
            frames = torch.as_tensor(np.asarray(frames))
        p = next(self.parameters())
        frames = frames.to(dtype=p.dtype, device=p.device)
        return frames[None] if frames.dim() == 4 else frames

    def forward_pretrain(self, frames, plan: MaskPlan) -> dict:
        frames = self._as_batch(frames)
        tokens = self.tokenize(self.stem_forward(frames))
        visible, index = apply_mask(tokens, plan)
        pixels, hidden = self.decode(self.encode(visible), index)
        return {"pixels": pixels, "hidden": hidden, "index": index,
                "signal": self.signal_from_decoded(hidden)}

    def encode_full(self, frames) -> torch.Tensor:
        frames = self._as_batch(frames)
        tokens = self.tokenize(self.stem_forward(frames))
        B, T, h, w, D = tokens.shape
        enc = self.encode(tokens.reshape(B, T * h * w, D))
        return enc.reshape(B, T, h, w, D)

    def forward_rppg(self, frames) -> torch.Tensor:
        return self.rppg_head(self.encode_full(frames))

    def forward(self, frames) -> torch.Tensor:
        return self.forward_rppg(frames)


def reconstruction_targets(frames: torch.Tensor, normalize: bool = True, eps: float = 1e-6) -> torch.Tensor:
    """Pixel-patch targets ``(B, T, H/16, W/16, 48)`` at stem resolution.

    Frames are average-pooled by 4, cut into 4x4 patches and, by default,
    normalised to zero mean and unit variance within each patch.
    """
    B, T, H, W, C = frames.shape
    x = frames.reshape(B * T, H, W, C).permute(0, 3, 1, 2)
    x = F.avg_pool2d(x, 4)  # (BT, 3, H/4, W/4)
    h, w = H // 16, W // 16
    x = x.reshape(B, T, C, h, PATCH, w, PATCH).permute(0, 1, 3, 5, 4, 6, 2)
    x = x.reshape(B, T, h, w, PATCH_DIM)
    if normalize:
        mean = x.mean(dim=-1, keepdim=True)
        var = x.var(dim=-1, unbiased=False, keepdim=True)
        x = (x - mean) / torch.sqrt(var + eps)
    return x
