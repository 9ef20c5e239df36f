"""Shared torch layers: masks, positions, transformer blocks, cross-attention."""

import math

import torch
from torch import nn
from torch.nn import functional as F


def lengths_to_mask(lengths, max_len=None):
    """Boolean ``[B, T]`` mask, True on valid positions."""
    lengths = torch.as_tensor(lengths)
    max_len = int(lengths.max()) if max_len is None else max_len
    return torch.arange(max_len, device=lengths.device)[None, :] < lengths[:, None]


def sinusoid_positions(n, dim, device=None, pos=None):
    """Sinusoidal table ``[n, dim]``; ``pos`` replaces the integer positions if given."""
    if pos is None:
        pos = torch.arange(n, dtype=torch.float32, device=device)
    pos = pos.to(torch.float32)[..., None]
    freq = torch.exp(torch.arange(0, dim, 2, dtype=torch.float32, device=device)
                     * (-math.log(10000.0) / dim))
    out = torch.zeros(*pos.shape[:-1], dim, device=device)
    out[..., 0::2] = torch.sin(pos * freq)
    out[..., 1::2] = torch.cos(pos * freq)[..., : dim // 2]
    return out


# Relative positions are spread over this many integer steps.
RELATIVE_SPAN = 64.0


def relative_sinusoid_positions(mask, dim):
    """Sinusoids of ``RELATIVE_SPAN * (k + 0.5) / L`` for the ``L`` valid frames of each row."""
    m = mask.to(torch.float32)
    length = m.sum(-1, keepdim=True).clamp_min(1.0)
    k = torch.arange(mask.shape[1], dtype=torch.float32, device=mask.device)[None]
    return sinusoid_positions(mask.shape[1], dim, mask.device, RELATIVE_SPAN * (k + 0.5) / length)


class ConvFeedForward(nn.Module):
    """Position-wise feed-forward with 1-D convolutions over time."""

    def __init__(self, dim, filter_size, kernel_size, dropout=0.0):
        super().__init__()
        self.conv1 = nn.Conv1d(dim, filter_size, kernel_size, padding=kernel_size // 2)
        self.conv2 = nn.Conv1d(filter_size, dim, kernel_size, padding=kernel_size // 2)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x, mask):
        # x: [B, T, C], mask: [B, T]
        m = mask.unsqueeze(1).to(x.dtype)
        y = self.conv1(x.transpose(1, 2) * m)
        y = self.dropout(F.gelu(y))
        y = self.conv2(y * m)
        return (y * m).transpose(1, 2)


class TransformerBlock(nn.Module):
    """Pre-norm self-attention block with a convolutional feed-forward."""

    def __init__(self, dim, heads, filter_size, kernel_size, dropout=0.0):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = nn.MultiheadAttention(dim, heads, dropout=dropout, batch_first=True)
        self.norm2 = nn.LayerNorm(dim)
        self.ffn = ConvFeedForward(dim, filter_size, kernel_size, dropout)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x, mask):
        h = self.norm1(x)
        h, _ = self.attn(h, h, h, key_padding_mask=~mask, need_weights=False)
        x = x + self.dropout(h)
        x = x + self.dropout(self.ffn(self.norm2(x), mask))
        return x * mask.unsqueeze(-1).to(x.dtype)


POSITION_MODES = ("absolute", "relative", "none")


class TransformerStack(nn.Module):
    """Transformer blocks with sinusoidal positions added to the input.

    ``positions`` is ``"absolute"`` (frame index), ``"relative"`` (index
    divided by the valid length) or ``"none"``. With ``"none"`` order enters
    only through the convolutional feed-forward, and nothing in the stack
    reveals how long the sequence is.
    """

    def __init__(self, dim, blocks, heads, filter_size, kernel_size, dropout=0.0,
                 positions="absolute"):
        super().__init__()
        if positions not in POSITION_MODES:
            raise ValueError(f"positions must be one of {POSITION_MODES}, got {positions!r}")
        self.positions = positions
        self.blocks = nn.ModuleList(
            TransformerBlock(dim, heads, filter_size, kernel_size, dropout) for _ in range(blocks))
        self.norm = nn.LayerNorm(dim)

    def forward(self, x, mask):
        if self.positions == "absolute":
            x = x + sinusoid_positions(x.shape[1], x.shape[2], x.device)[None]
        elif self.positions == "relative":
            x = x + relative_sinusoid_positions(mask, x.shape[2])
        x = x * mask.unsqueeze(-1).to(x.dtype)
        for block in self.blocks:
            x = block(x, mask)
        return self.norm(x) * mask.unsqueeze(-1).to(x.dtype)


class CrossAttention(nn.Module):
    """Q-K-V attention from a query sequence into a memory (the style prompt)."""

    def __init__(self, query_dim, memory_dim, heads, dropout=0.0):
        super().__init__()
        self.norm = nn.LayerNorm(query_dim)
        self.attn = nn.MultiheadAttention(query_dim, heads, dropout=dropout, batch_first=True,
                                          kdim=memory_dim, vdim=memory_dim)

    def forward(self, x, memory, memory_mask):
        out, _ = self.attn(self.norm(x), memory, memory, key_padding_mask=~memory_mask,
                           need_weights=False)
        return out


def masked_mean(x, mask, dim=1):
    m = mask.unsqueeze(-1).to(x.dtype)
    return (x * m).sum(dim) / m.sum(dim).clamp_min(1.0)
