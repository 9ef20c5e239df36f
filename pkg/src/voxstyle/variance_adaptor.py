"""Duration/pitch prediction, gradient reversal and the decoder condition.

Durations are predicted as log frame counts per phone. Pitch is predicted per
frame in the pitch-channel domain: ``log(f0 / 40)`` when voiced and 0 when
unvoiced, so a single regression output also carries the voicing decision.
"""

import math

import numpy as np
import torch
from torch import nn

from .latent_encoder import alignment_matrix
from .layers import CrossAttention
from .synth_data import F0_REF, VOICING_THRESHOLD


class GradientReversal(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x, scale):
        ctx.scale = scale
        return x.view_as(x)

    @staticmethod
    def backward(ctx, grad_output):
        return grad_output.neg() * ctx.scale, None


def grl(x, scale=1.0):
    """Identity forward; multiplies the incoming gradient by ``-scale``."""
    return GradientReversal.apply(x, scale)


def length_regulate(h, durations):
    """Repeat phone ``p`` of ``h`` (``[P, D]``) ``durations[p]`` times."""
    d = torch.as_tensor(durations, dtype=torch.long)
    if d.ndim != 1 or d.numel() != h.shape[0]:
        raise ValueError("need one duration per phone")
    if torch.any(d < 1):
        raise ValueError("durations must be positive integers")
    return torch.repeat_interleave(h, d, dim=0)


def expand(h, durations, n_frames):
    """Batched length regulation: ``[B, P, D]`` to ``[B, N, D]`` (padded phones have 0)."""
    align = alignment_matrix(durations, n_frames).to(h.dtype)
    return align.transpose(1, 2) @ h


def round_frames(frames):
    """Round half up with a floor of one frame."""
    return torch.clamp(torch.floor(frames + 0.5), min=1).long()


def round_durations(log_durations):
    """Inference durations from log-domain predictions."""
    return round_frames(torch.exp(log_durations))


class PitchQuantizer:
    """Log-spaced pitch bins over ``[fmin, fmax]``.

    Bin 0 is reserved for unvoiced frames; voiced frames map to 1..bins, with
    out-of-range values clamped to the first/last bin. ``edges`` has
    ``bins + 1`` entries, ``edges[k] = fmin * (fmax / fmin) ** (k / bins)``.
    """

    def __init__(self, bins=256, fmin=50.0, fmax=600.0):
        self.bins = bins
        self.fmin = fmin
        self.fmax = fmax
        self.edges = np.geomspace(fmin, fmax, bins + 1)

    def __call__(self, f0):
        f0 = torch.as_tensor(f0, dtype=torch.float64)
        edges = torch.as_tensor(self.edges, dtype=torch.float64)
        idx = torch.bucketize(f0, edges, right=True).clamp(1, self.bins)
        return torch.where(f0 > 0, idx, torch.zeros_like(idx))


def build_condition(frames, f0, pitch_embedding, quantizer):
    """``c = frames + embed(bin(f0))``; frames ``[.., N, D]``, f0 ``[.., N]`` in Hz."""
    if frames.shape[:-1] != torch.as_tensor(f0).shape:
        raise ValueError(f"length mismatch: frames {tuple(frames.shape[:-1])} vs pitch "
                         f"{tuple(torch.as_tensor(f0).shape)}")
    return frames + pitch_embedding(quantizer(f0).to(frames.device))


def pitch_target(f0):
    """Hz (0 = unvoiced) to the regression domain used by the pitch heads."""
    f0 = torch.as_tensor(f0, dtype=torch.float32)
    return torch.where(f0 > 0, torch.log(f0.clamp_min(1e-3) / F0_REF), torch.zeros_like(f0))


def target_to_f0(y):
    return torch.where(y > VOICING_THRESHOLD, F0_REF * torch.exp(y), torch.zeros_like(y))


def phone_position_features(phone_mask, n_scales=4):
    """Multi-scale sinusoids of the phone index, ``[B, P, 2 * n_scales]``."""
    k = torch.arange(phone_mask.shape[1], dtype=torch.float32)[:, None]
    freq = math.pi / (2.0 ** torch.arange(n_scales, dtype=torch.float32))[None, :]
    feats = torch.cat([torch.sin(k * freq), torch.cos(k * freq)], dim=-1)
    return feats[None].expand(phone_mask.shape[0], -1, -1) * phone_mask.unsqueeze(-1)


def relative_position(mask):
    """``(k + 0.5) / L`` for the ``L`` valid entries of each row, ``[B, T, 1]``."""
    m = mask.to(torch.float32)
    length = m.sum(-1, keepdim=True).clamp_min(1.0)
    pos = (torch.arange(mask.shape[1], dtype=torch.float32)[None] + 0.5) / length
    return (pos * m).unsqueeze(-1)


def frame_progress_features(durations, n_frames):
    """Relative position ``(j + 0.5) / d`` of each frame in its phone, as
    ``[tau, sin(pi tau), cos(pi tau)]``; ``[B, N, 3]``."""
    align = alignment_matrix(durations, n_frames)
    d = durations.float()
    starts = torch.cumsum(d, -1) - d
    start_f = (align * starts[..., None]).sum(1)
    dur_f = (align * d[..., None]).sum(1).clamp_min(1.0)
    tau = (torch.arange(n_frames, dtype=torch.float32)[None] - start_f + 0.5) / dur_f
    tau = tau * (align.sum(1) > 0)
    return torch.stack([tau, torch.sin(math.pi * tau), torch.cos(math.pi * tau)], dim=-1)


class VarianceHead(nn.Module):
    """Conv stack with optional Q-K-V attention into the style sequence."""

    def __init__(self, in_dim, hidden, layers, kernel, dropout=0.0, style_dim=None, heads=2):
        super().__init__()
        self.in_proj = nn.Linear(in_dim, hidden)
        self.convs = nn.ModuleList(nn.Conv1d(hidden, hidden, kernel, padding=kernel // 2)
                                   for _ in range(layers))
        self.norms = nn.ModuleList(nn.LayerNorm(hidden) for _ in range(layers))
        self.dropout = nn.Dropout(dropout)
        self.cross = CrossAttention(hidden, style_dim, heads) if style_dim else None
        self.out = nn.Linear(hidden, 1)

    def forward(self, x, mask, z=None, z_mask=None):
        m = mask.unsqueeze(-1).to(x.dtype)
        h = self.in_proj(x) * m
        for conv, norm in zip(self.convs, self.norms):
            y = conv(h.transpose(1, 2)).transpose(1, 2)
            h = self.dropout(norm(torch.relu(y))) * m
        if self.cross is not None:
            if z is None or z.shape[1] == 0:
                raise ValueError("style embedding must be non-empty")
            h = h + self.cross(h, z, z_mask)
        return self.out(h).squeeze(-1) * mask.to(x.dtype)


class VarianceAdaptor(nn.Module):
    def __init__(self, cfg):
        super().__init__()
        d = cfg.encoder_dim
        phone_in = d + 8 + 1
        frame_in = phone_in + 3 + 1
        kw = dict(hidden=d, layers=cfg.va_layers, kernel=cfg.va_kernel, dropout=cfg.va_dropout)
        self.duration_head = VarianceHead(phone_in, style_dim=d, heads=cfg.attention_heads, **kw)
        self.pitch_head = VarianceHead(frame_in, style_dim=d, heads=cfg.attention_heads, **kw)
        self.use_adversarial = cfg.use_adversarial
        self.reverse_scale = cfg.grl_reverse_scale
        if self.use_adversarial:
            self.adv_duration_head = VarianceHead(phone_in, **kw)
            self.adv_pitch_head = VarianceHead(frame_in, **kw)
        self.quantizer = PitchQuantizer(cfg.pitch_bins, cfg.pitch_fmin, cfg.pitch_fmax)
        self.pitch_embedding = nn.Embedding(cfg.pitch_bins + 1, d)

    def _phone_inputs(self, h, phone_mask):
        pos = torch.cat([phone_position_features(phone_mask), relative_position(phone_mask)], -1)
        return torch.cat([h, pos.to(h.dtype)], dim=-1)

    def _frame_inputs(self, h, phone_mask, durations, n_frames):
        ph = expand(self._phone_inputs(h, phone_mask), durations, n_frames)
        frame_mask = alignment_matrix(durations, n_frames).sum(1) > 0
        extra = torch.cat([frame_progress_features(durations, n_frames),
                           relative_position(frame_mask)], dim=-1)
        return torch.cat([ph, extra.to(h.dtype)], dim=-1)

    def predict_variances(self, h, phone_mask, durations, frame_mask, z, z_mask):
        """Log durations ``[B, P]`` and pitch targets ``[B, N]``; ``durations``
        drive the frame expansion for the pitch head."""
        log_dur = self.duration_head(self._phone_inputs(h, phone_mask), phone_mask, z, z_mask)
        frames_in = self._frame_inputs(h, phone_mask, durations, frame_mask.shape[1])
        pitch = self.pitch_head(frames_in, frame_mask, z, z_mask)
        return log_dur, pitch

    def adversarial_predict(self, h, phone_mask, durations, frame_mask, reverse_scale=None):
        """Style-free prediction from ``grl(h)`` with separate parameters (training only)."""
        if not self.training:
            raise RuntimeError("the adversarial branch is only available in training mode")
        if not self.use_adversarial:
            raise RuntimeError("adversarial branch disabled in this model")
        scale = self.reverse_scale if reverse_scale is None else reverse_scale
        hr = grl(h, scale)
        log_dur = self.adv_duration_head(self._phone_inputs(hr, phone_mask), phone_mask)
        frames_in = self._frame_inputs(hr, phone_mask, durations, frame_mask.shape[1])
        pitch = self.adv_pitch_head(frames_in, frame_mask)
        return log_dur, pitch

    def condition(self, h, durations, n_frames, f0):
        return build_condition(expand(h, durations, n_frames), f0, self.pitch_embedding,
                               self.quantizer)

    @torch.no_grad()
    def infer(self, h, z, z_mask=None):
        """Single utterance: ``h`` ``[1, P, D]`` -> (durations ``[P]``, f0 ``[N]``, condition)."""
        phone_mask = torch.ones(h.shape[:2], dtype=torch.bool)
        if z_mask is None:
            z_mask = torch.ones(z.shape[:2], dtype=torch.bool)
        log_dur = self.duration_head(self._phone_inputs(h, phone_mask), phone_mask, z, z_mask)
        durations = round_durations(log_dur)
        n = int(durations.sum())
        frame_mask = torch.ones(1, n, dtype=torch.bool)
        pitch = self.pitch_head(self._frame_inputs(h, phone_mask, durations, n), frame_mask, z, z_mask)
        f0 = target_to_f0(pitch)
        return durations[0], f0[0], self.condition(h, durations, n, f0)
