"""Source-side encoder: token embedding, bottleneck, transformer, phone pooling, VQ.

The output ``h_q`` is a phone-level sequence snapped to a small codebook of
linguistic clusters. Gradients reach the pre-quantization ``h`` through the
straight-through estimator.
"""

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .codec import lookup_sum
from .layers import TransformerStack


class AlignmentError(ValueError):
    pass


class TokenEmbedding(nn.Module):
    """Frozen codec codebooks; embeds a token grid as the sum of its codewords."""

    def __init__(self, books):
        super().__init__()
        self.register_buffer("books", torch.tensor(np.array(books, dtype=np.float32)))

    @property
    def levels(self):
        return self.books.shape[0]

    @property
    def vocab_size(self):
        return self.books.shape[1]

    def forward(self, grid):
        if grid.min() < 0 or grid.max() >= self.vocab_size:
            raise IndexError(f"token index out of range [0, {self.vocab_size})")
        return lookup_sum(self.books, grid)


def embed_tokens(grid, books):
    """Token grid ``[T, N]`` (or batched ``[B, T, N]``) to summed codeword frames."""
    grid = torch.as_tensor(grid, dtype=torch.long)
    books = torch.as_tensor(books)
    if grid.min() < 0 or grid.max() >= books.shape[1]:
        raise IndexError(f"token index out of range [0, {books.shape[1]})")
    return lookup_sum(books, grid)


def bottleneck_project(frames, layer):
    """Apply the learned low-dimensional projection ``layer`` to ``[..., N, D]`` frames."""
    if frames.shape[-1] != layer.in_features:
        raise ValueError(f"bottleneck expects dim {layer.in_features}, got {frames.shape[-1]}")
    return layer(frames)


def alignment_matrix(durations, n_frames):
    """One-hot phone membership ``[B, P, N]`` from padded durations ``[B, P]``.

    Padded phones carry duration 0 and get empty rows.
    """
    durations = torch.as_tensor(durations, dtype=torch.long)
    ends = torch.cumsum(durations, dim=-1)
    starts = ends - durations
    frame = torch.arange(n_frames, device=durations.device)
    return ((frame[None, None, :] >= starts[..., None]) & (frame[None, None, :] < ends[..., None])).float()


def check_durations(durations, n_frames):
    d = torch.as_tensor(durations)
    if d.ndim != 1 or d.numel() == 0:
        raise AlignmentError("durations must be a non-empty 1-D sequence")
    if torch.any(d < 1):
        raise AlignmentError("every phone duration must be >= 1 frame")
    if int(d.sum()) != n_frames:
        raise AlignmentError(f"durations sum to {int(d.sum())}, but there are {n_frames} frames")
    return d.long()


def pool_frames(frames, align):
    """Mean of each phone's frames; ``align`` from :func:`alignment_matrix`.

    The mean is taken around each phone's first frame so that phone-constant
    input comes back bit-exact.
    """
    counts = align.sum(-1, keepdim=True)
    first = align.argmax(-1)
    anchor = torch.gather(frames, -2, first.unsqueeze(-1).expand(*first.shape, frames.shape[-1]))
    anchor = anchor * (counts > 0).to(frames.dtype)
    # One-hot products copy values exactly, so deviations are exactly 0 on constant spans.
    deviation = frames - align.transpose(-1, -2) @ anchor
    return anchor + (align @ deviation) / counts.clamp_min(1.0)


def inverse_length_regulate(frames, durations):
    """Frame-level ``[N, D]`` to phone-level ``[P, D]`` by averaging each phone span."""
    frames = torch.as_tensor(frames)
    d = check_durations(durations, frames.shape[0])
    return pool_frames(frames, alignment_matrix(d[None], frames.shape[0])[0].to(frames.dtype))


def nearest_codes(h, codebook):
    """Index of the nearest codebook row for every row of ``h`` (ties: lowest index)."""
    d = ((h.unsqueeze(-2) - codebook) ** 2).sum(-1)
    return d.argmin(-1)


def vq_commit(h, codebook, beta=0.25, mask=None):
    """Quantize phone vectors and compute the commitment loss.

    Returns ``(h_q, loss, indices)``. ``h_q`` carries the codebook values in the
    forward pass and passes gradients straight through to ``h``. The loss is
    ``beta * mean_p ||h_p - sg(e_p)||^2`` over valid phones; the codebook
    itself is moved by moving averages, not by this loss.
    """
    if h.shape[-2] == 0 or (mask is not None and not bool(mask.any())):
        raise ValueError("vq_commit needs at least one phone vector")
    if h.shape[-1] != codebook.shape[-1]:
        raise ValueError(f"dim mismatch: h has {h.shape[-1]}, codebook {codebook.shape[-1]}")
    idx = nearest_codes(h.detach(), codebook)
    e = codebook[idx].detach()
    sq = ((h - e) ** 2).sum(-1)
    if mask is None:
        loss = beta * sq.mean()
    else:
        m = mask.to(sq.dtype)
        loss = beta * (sq * m).sum() / m.sum()
    # e + 0 keeps the forward value bit-identical to the codeword.
    h_q = e + (h - h.detach())
    return h_q, loss, idx


class VectorQuantizerEMA(nn.Module):
    """Linguistic codebook updated by exponential moving averages."""

    def __init__(self, dim, size, beta=0.25, decay=0.99, eps=1e-5, dead_threshold=0.05):
        super().__init__()
        self.beta = beta
        self.decay = decay
        self.eps = eps
        self.dead_threshold = dead_threshold
        self.register_buffer("codebook", torch.randn(size, dim) * 0.1)
        self.register_buffer("ema_count", torch.ones(size))
        self.register_buffer("ema_sum", self.codebook.clone())
        self.register_buffer("initialized", torch.tensor(False))

    @torch.no_grad()
    def _update(self, flat, idx):
        if not bool(self.initialized):
            pick = torch.randint(0, flat.shape[0], (self.codebook.shape[0],))
            self.codebook.copy_(flat[pick])
            self.ema_sum.copy_(self.codebook)
            self.ema_count.fill_(1.0)
            self.initialized.fill_(True)
            idx = nearest_codes(flat, self.codebook)
        onehot = F.one_hot(idx, self.codebook.shape[0]).to(flat.dtype)
        self.ema_count.mul_(self.decay).add_(onehot.sum(0), alpha=1 - self.decay)
        self.ema_sum.mul_(self.decay).add_(onehot.t() @ flat, alpha=1 - self.decay)
        n = self.ema_count.sum()
        count = (self.ema_count + self.eps) / (n + self.codebook.shape[0] * self.eps) * n
        self.codebook.copy_(self.ema_sum / count.unsqueeze(-1))
        dead = self.ema_count < self.dead_threshold
        if bool(dead.any()):
            pick = torch.randint(0, flat.shape[0], (int(dead.sum()),))
            self.codebook[dead] = flat[pick]
            self.ema_sum[dead] = flat[pick]
            self.ema_count[dead] = 1.0

    def forward(self, h, mask):
        if self.training:
            flat = h.detach()[mask]
            self._update(flat, nearest_codes(flat, self.codebook))
        return vq_commit(h, self.codebook, self.beta, mask)


class LatentEncoder(nn.Module):
    """Tokens ``[B, T, N]`` plus durations ``[B, P]`` to phone-level ``h_q`` ``[B, P, D]``."""

    def __init__(self, cfg, books):
        super().__init__()
        self.use_bottleneck = cfg.use_bottleneck
        self.straight_through = cfg.vq_straight_through
        self.embed = TokenEmbedding(books)
        feat = self.embed.books.shape[-1]
        self.in_proj = nn.Linear(feat, cfg.encoder_dim)
        if self.use_bottleneck:
            self.bottleneck = nn.Linear(cfg.encoder_dim, cfg.bottleneck_dim)
            self.up_proj = nn.Linear(cfg.bottleneck_dim, cfg.encoder_dim)
            self.vq = VectorQuantizerEMA(cfg.encoder_dim, cfg.vq_codebook_size,
                                         beta=cfg.vq_commit_beta, decay=cfg.vq_decay)
        self.transformer = TransformerStack(cfg.encoder_dim, cfg.encoder_blocks, cfg.encoder_heads,
                                            cfg.encoder_filter, cfg.encoder_kernel,
                                            cfg.encoder_dropout)

    def forward(self, tokens, frame_mask, durations, phone_mask):
        x = self.in_proj(self.embed(tokens))
        if self.use_bottleneck:
            x = self.up_proj(bottleneck_project(x, self.bottleneck))
        x = self.transformer(x, frame_mask)
        align = alignment_matrix(durations, x.shape[1])
        h = pool_frames(x, align)
        if self.use_bottleneck:
            h_q, vq_loss, idx = self.vq(h, phone_mask)
            if not self.straight_through:
                h_q = h
        else:
            h_q, vq_loss, idx = h, h.new_zeros(()), None
        h_q = h_q * phone_mask.unsqueeze(-1).to(h_q.dtype)
        return {"h": h, "h_q": h_q, "vq_loss": vq_loss, "vq_indices": idx}
