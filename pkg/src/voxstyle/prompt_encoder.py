"""Style prompt encoder with uncertainty-modelled adaptive instance normalization.

Per-utterance channel statistics are normalized away (they carry most of the
speaker timbre), then replaced by running-average statistics scaled by
randomly sampled weights ``omega1`` and ``omega2``.
"""

import torch
from torch import nn

from .layers import TransformerStack, masked_mean


def instance_stats(z, mask=None, eps=1e-5):
    """Per-channel mean and ``sqrt(var + eps)`` over time.

    ``z`` is ``[M, D]`` or ``[B, M, D]``; the population variance is used.
    """
    if z.shape[-2] < 1:
        raise ValueError("instance_stats needs at least one frame")
    if mask is None:
        mu = z.mean(-2)
        var = ((z - mu.unsqueeze(-2)) ** 2).mean(-2)
    else:
        mu = masked_mean(z, mask)
        var = masked_mean((z - mu.unsqueeze(-2)) ** 2, mask)
    return mu, torch.sqrt(var + eps)


def umadain(x, mu_bar, sigma_bar, mu, sigma, omega1, omega2):
    """``omega1 * mu_bar * (x - mu) / sigma + omega2 * sigma_bar``.

    Vectors broadcast over the time axis of ``x`` (``[.., M, D]``).
    """
    u = lambda v: v.unsqueeze(-2)
    return u(omega1) * u(mu_bar) * (x - u(mu)) / u(sigma) + u(omega2) * u(sigma_bar)


class UMAdaIN(nn.Module):
    def __init__(self, dim, eps=1e-5, omega_mean=0.0, omega_std=1.0, momentum=0.1):
        super().__init__()
        self.eps = eps
        self.omega_mean = omega_mean
        self.omega_std = omega_std
        self.momentum = momentum
        self.register_buffer("mu_bar", torch.ones(dim))
        self.register_buffer("sigma_bar", torch.ones(dim))
        self.register_buffer("initialized", torch.tensor(False))

    def sample_omega(self, shape, generator=None, device=None):
        noise = torch.randn(shape, generator=generator, device=device)
        return self.omega_mean + self.omega_std * noise

    def forward(self, x, mask=None, generator=None, omega=None):
        mu, sigma = instance_stats(x, mask, self.eps)
        if self.training:
            with torch.no_grad():
                batch_mu = mu.detach().reshape(-1, mu.shape[-1]).mean(0)
                batch_sigma = sigma.detach().reshape(-1, sigma.shape[-1]).mean(0)
                if not bool(self.initialized):
                    self.mu_bar.copy_(batch_mu)
                    self.sigma_bar.copy_(batch_sigma)
                    self.initialized.fill_(True)
                else:
                    self.mu_bar.lerp_(batch_mu, self.momentum)
                    self.sigma_bar.lerp_(batch_sigma, self.momentum)
        if omega is None:
            omega1 = self.sample_omega(mu.shape, generator, x.device)
            omega2 = self.sample_omega(mu.shape, generator, x.device)
        else:
            omega1, omega2 = omega
        out = umadain(x, self.mu_bar, self.sigma_bar, mu, sigma, omega1, omega2)
        if mask is not None:
            out = out * mask.unsqueeze(-1).to(out.dtype)
        return out


class PromptEncoder(nn.Module):
    """Prompt token grid ``[B, T, M]`` to style sequence ``z_sty`` ``[B, M, D]``."""

    def __init__(self, cfg, embed):
        super().__init__()
        self.embed = embed
        feat = embed.books.shape[-1]
        self.use_umadain = cfg.use_umadain
        self.umadain = UMAdaIN(feat, cfg.umadain_eps, cfg.umadain_omega_mean,
                               cfg.umadain_omega_std, cfg.umadain_momentum)
        self.in_proj = nn.Linear(feat, cfg.encoder_dim)
        self.transformer = TransformerStack(cfg.encoder_dim, cfg.prompt_encoder_blocks,
                                            cfg.encoder_heads, cfg.encoder_filter,
                                            cfg.encoder_kernel, cfg.encoder_dropout,
                                            positions=cfg.prompt_positions)

    def forward(self, tokens, mask, generator=None, omega=None):
        if tokens.shape[-1] == 0:
            raise ValueError("prompt must contain at least one frame")
        x = self.embed(tokens)
        if self.use_umadain:
            x = self.umadain(x, mask, generator=generator, omega=omega)
        return self.transformer(self.in_proj(x), mask)
