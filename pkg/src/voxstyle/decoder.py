"""Conditional masked-token decoder with iterative confidence-based unmasking.

Levels of the token grid are generated strictly in order. Within a level, all
positions start masked and a cosine schedule decides how many stay masked
after each step; the most confident predictions are committed first.
"""

import math
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .layers import CrossAttention, sinusoid_positions


def mask_schedule(i, n, N):
    """Positions still masked after step ``i`` of ``n``: ``ceil(N cos(pi/2 * i/n))``."""
    if n < 1:
        raise ValueError("need at least one decoding step")
    if not 0 <= i <= n:
        raise ValueError(f"step {i} outside [0, {n}]")
    if i == n:
        return 0
    # Rounding guards float noise such as 5.000000000000001.
    return int(math.ceil(round(N * math.cos(math.pi / 2 * i / n), 9)))


class FiLM(nn.Module):
    """Scale/shift produced by one Q-K-V read of the style sequence."""

    def __init__(self, hidden, style_dim, heads):
        super().__init__()
        self.cross = CrossAttention(hidden, style_dim, heads)
        self.proj = nn.Linear(hidden, 2 * hidden)
        nn.init.zeros_(self.proj.weight)
        nn.init.zeros_(self.proj.bias)

    def forward(self, x, z, z_mask):
        scale, shift = self.proj(self.cross(x, z, z_mask)).chunk(2, dim=-1)
        return x * (1 + scale) + shift


class ResidualConvLayer(nn.Module):
    """Dilated gated convolution with residual connection (WaveNet style)."""

    def __init__(self, hidden, filter_size, kernel, dilation, dropout):
        super().__init__()
        pad = (kernel - 1) * dilation // 2
        self.conv = nn.Conv1d(hidden, 2 * filter_size, kernel, dilation=dilation, padding=pad)
        self.out = nn.Conv1d(filter_size, hidden, 1)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x, mask):
        m = mask.unsqueeze(1).to(x.dtype)
        y = self.conv(self.dropout(x.transpose(1, 2)) * m)
        a, b = y.chunk(2, dim=1)
        y = self.out(torch.tanh(a) * torch.sigmoid(b))
        return x + (y * m).transpose(1, 2)


class MaskedTokenDecoder(nn.Module):
    def __init__(self, cfg, levels, vocab_size, cond_dim, style_dim=None, use_positions=True):
        super().__init__()
        style_dim = cond_dim if style_dim is None else style_dim
        self.levels = levels
        self.vocab_size = vocab_size
        self.mask_id = vocab_size
        self.use_positions = use_positions
        h = cfg.decoder_hidden
        self.token_emb = nn.ModuleList(nn.Embedding(vocab_size + 1, h) for _ in range(levels))
        self.level_emb = nn.Embedding(levels, h)
        self.cond_proj = nn.Linear(cond_dim, h)
        self.layers = nn.ModuleList()
        self.films = nn.ModuleDict()
        for k in range(cfg.decoder_layers):
            dilation = cfg.decoder_dilation ** (k % cfg.decoder_dilation_cycle)
            self.layers.append(ResidualConvLayer(h, cfg.decoder_filter, cfg.decoder_kernel,
                                                 dilation, cfg.decoder_dropout))
            if (k + 1) % cfg.film_every == 0:
                self.films[str(k)] = FiLM(h, style_dim, cfg.attention_heads)
        self.norm = nn.LayerNorm(h)
        self.head_weight = nn.Parameter(torch.randn(levels, h, vocab_size) * h ** -0.5)
        self.head_bias = nn.Parameter(torch.zeros(levels, vocab_size))

    def forward(self, tokens, level, masked, c, z, frame_mask, z_mask):
        """Logits ``[B, N, V]`` for the current level of each batch item.

        ``tokens`` is ``[B, T, N]``; ``level`` ``[B]``; ``masked`` ``[B, N]`` marks
        positions of the current level that are hidden. Levels above the
        current one are ignored.
        """
        B, T, N = tokens.shape
        if c.shape[1] != N:
            raise ValueError(f"condition has {c.shape[1]} frames, tokens have {N}")
        if masked.shape != (B, N):
            raise ValueError("mask must be [B, N]")
        level = torch.as_tensor(level, dtype=torch.long).reshape(B)
        tok = tokens.clone()
        cur = tok[torch.arange(B), level]
        tok[torch.arange(B), level] = torch.where(masked, torch.full_like(cur, self.mask_id), cur)
        x = self.cond_proj(c) + self.level_emb(level)[:, None, :]
        for t in range(T):
            keep = (level >= t).to(x.dtype)[:, None, None]
            x = x + keep * self.token_emb[t](tok[:, t])
        if self.use_positions:
            x = x + sinusoid_positions(N, x.shape[-1], x.device)[None]
        x = x * frame_mask.unsqueeze(-1).to(x.dtype)
        for k, layer in enumerate(self.layers):
            x = layer(x, frame_mask)
            if str(k) in self.films:
                x = self.films[str(k)](x, z, z_mask) * frame_mask.unsqueeze(-1).to(x.dtype)
        x = self.norm(x)
        return torch.einsum("bnh,bhv->bnv", x, self.head_weight[level]) + self.head_bias[level][:, None, :]


def masked_cross_entropy(logits, targets, masked):
    """Mean cross-entropy over masked positions only."""
    ce = F.cross_entropy(logits.transpose(1, 2), targets, reduction="none")
    m = masked.to(ce.dtype)
    return (ce * m).sum() / m.sum().clamp_min(1.0)


def sample_training_mask(n_valid, n_max, rng):
    """Mask ``ceil(N cos(pi/2 u))`` random positions (at least one), ``u ~ U[0, 1)``."""
    u = rng.random()
    count = max(1, int(math.ceil(n_valid * math.cos(math.pi / 2 * u))))
    pos = rng.permutation(n_valid)[:count]
    mask = np.zeros(n_max, dtype=bool)
    mask[pos] = True
    return mask


@dataclass
class DecodeTrace:
    """Per-level, per-step record of confidences and commitments."""

    steps: list = field(default_factory=list)

    def add(self, level, step, confidence, was_masked, committed, still_masked):
        self.steps.append(dict(level=level, step=step, confidence=confidence,
                               was_masked=was_masked, committed=committed,
                               still_masked=still_masked))


@torch.no_grad()
def iterative_decode(decoder, c, z, n_steps, temperature=0.0, generator=None, trace=None,
                     levels=None):
    """Generate a ``[T, N]`` token grid for one utterance.

    ``c`` is ``[1, N, D]`` and ``z`` ``[1, M, D]``. Greedy by default; with a
    positive temperature, candidates are sampled and confidence is the
    probability of the sampled token.
    """
    if n_steps < 1:
        raise ValueError("need at least one decoding step")
    levels = decoder.levels if levels is None else levels
    N = c.shape[1]
    tokens = torch.zeros(1, decoder.levels, N, dtype=torch.long)
    frame_mask = torch.ones(1, N, dtype=torch.bool)
    z_mask = torch.ones(z.shape[:2], dtype=torch.bool)
    for t in range(levels):
        masked = np.ones(N, dtype=bool)
        for i in range(1, n_steps + 1):
            logits = decoder(tokens, torch.tensor([t]), torch.from_numpy(masked)[None], c, z,
                             frame_mask, z_mask)[0]
            probs = torch.softmax(logits.double(), dim=-1)
            if temperature > 0:
                samp = torch.softmax(logits.double() / temperature, dim=-1)
                cand = torch.multinomial(samp, 1, generator=generator).squeeze(-1)
                conf = probs.gather(-1, cand[:, None]).squeeze(-1)
            else:
                cand = probs.argmax(-1)
                conf = probs.gather(-1, cand[:, None]).squeeze(-1)
            conf = conf.numpy()
            cand = cand.numpy()
            remain = mask_schedule(i, n_steps, N)
            pos = np.flatnonzero(masked)
            order = pos[np.argsort(-conf[pos], kind="stable")]
            commit = order[: len(pos) - remain]
            row = tokens[0, t].numpy().copy()
            row[commit] = cand[commit]
            tokens[0, t] = torch.from_numpy(row)
            was_masked = masked.copy()
            masked[commit] = False
            if trace is not None:
                trace.add(t, i, conf, was_masked, commit, masked.copy())
    return tokens[0, :levels]
