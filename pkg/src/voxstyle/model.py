"""Full conversion model: encoders, variance adaptor and masked-token decoder."""

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .decoder import MaskedTokenDecoder, iterative_decode, masked_cross_entropy
from .latent_encoder import LatentEncoder
from .prompt_encoder import PromptEncoder
from .variance_adaptor import VarianceAdaptor, pitch_target


@dataclass
class Batch:
    """Padded training batch. Masks are True on valid entries."""

    tokens: torch.Tensor          # [B, T, N] input-segment tokens
    frame_mask: torch.Tensor      # [B, N]
    durations: torch.Tensor       # [B, P], 0 on padding
    phone_mask: torch.Tensor      # [B, P]
    f0: torch.Tensor              # [B, N] Hz, 0 = unvoiced
    prompt_tokens: torch.Tensor   # [B, T, M]
    prompt_mask: torch.Tensor     # [B, M]
    level: torch.Tensor           # [B] decoder level to train
    dec_mask: torch.Tensor        # [B, N] masked positions of that level


def _masked_l1(pred, target, mask):
    m = mask.to(pred.dtype)
    return ((pred - target).abs() * m).sum() / m.sum().clamp_min(1.0)


class StyleConversionModel(nn.Module):
    def __init__(self, cfg, books):
        super().__init__()
        self.cfg = cfg
        books = np.asarray(books)
        self.latent_encoder = LatentEncoder(cfg, books)
        self.prompt_encoder = PromptEncoder(cfg, self.latent_encoder.embed)
        self.variance_adaptor = VarianceAdaptor(cfg)
        self.decoder = MaskedTokenDecoder(cfg, books.shape[0], books.shape[1], cfg.encoder_dim)

    @property
    def levels(self):
        return self.decoder.levels

    def check_batch(self, batch):
        B, T, N = batch.tokens.shape
        if T != self.levels:
            raise ValueError(f"batch has {T} token levels, model expects {self.levels}")
        if batch.prompt_tokens.shape[:2] != (B, T):
            raise ValueError("prompt tokens must be [B, T, M] with the same B and T")
        if batch.frame_mask.shape != (B, N) or batch.f0.shape != (B, N) or batch.dec_mask.shape != (B, N):
            raise ValueError("frame-level tensors must all be [B, N]")
        if batch.durations.shape != batch.phone_mask.shape or batch.durations.shape[0] != B:
            raise ValueError("durations and phone mask must be [B, P]")
        sums = (batch.durations * batch.phone_mask).sum(-1)
        if not torch.equal(sums, batch.frame_mask.sum(-1)):
            raise ValueError("phone durations do not add up to the frame counts")
        if batch.tokens.min() < 0 or batch.tokens.max() >= self.decoder.vocab_size:
            raise ValueError("token index out of range")

    def loss_parts(self, batch):
        """Unweighted loss components for one batch (dict of scalar tensors)."""
        self.check_batch(batch)
        enc = self.latent_encoder(batch.tokens, batch.frame_mask, batch.durations, batch.phone_mask)
        h_q = enc["h_q"]
        z = self.prompt_encoder(batch.prompt_tokens, batch.prompt_mask)
        va = self.variance_adaptor
        log_dur_gt = torch.log(batch.durations.clamp_min(1).float())
        pitch_gt = pitch_target(batch.f0)
        log_dur, pitch = va.predict_variances(h_q, batch.phone_mask, batch.durations,
                                              batch.frame_mask, z, batch.prompt_mask)
        l_va = (_masked_l1(log_dur, log_dur_gt, batch.phone_mask)
                + _masked_l1(pitch, pitch_gt, batch.frame_mask))
        if va.use_adversarial:
            # lambda_grl scales only the reversed gradient that reaches h; the
            # adversary itself always trains at unit weight (see total_loss).
            adv_dur, adv_pitch = va.adversarial_predict(
                h_q, batch.phone_mask, batch.durations, batch.frame_mask,
                reverse_scale=va.reverse_scale * self.cfg.lambda_grl)
            voiced = batch.frame_mask & (batch.f0 > 0)
            l_adv = (_masked_l1(adv_dur, log_dur_gt, batch.phone_mask)
                     + _masked_l1(adv_pitch, pitch_gt, voiced))
        else:
            l_adv = h_q.new_zeros(())
        c = va.condition(h_q, batch.durations, batch.tokens.shape[-1], batch.f0)
        logits = self.decoder(batch.tokens, batch.level, batch.dec_mask, c, z,
                              batch.frame_mask, batch.prompt_mask)
        targets = batch.tokens[torch.arange(batch.tokens.shape[0]), batch.level]
        l_diff = masked_cross_entropy(logits, targets, batch.dec_mask & batch.frame_mask)
        return {"L_diff": l_diff, "L_VQ": enc["vq_loss"], "L_va": l_va, "L_va_adv": l_adv}

    @torch.no_grad()
    def convert(self, source_tokens, source_durations, prompt_tokens, generator=None,
                decode_steps=None, temperature=None):
        """Convert one utterance; returns tokens ``[T, N]``, durations and f0 (numpy)."""
        cfg = self.cfg
        src = torch.as_tensor(source_tokens, dtype=torch.long)[None]
        dur = torch.as_tensor(source_durations, dtype=torch.long)[None]
        prm = torch.as_tensor(prompt_tokens, dtype=torch.long)[None]
        frame_mask = torch.ones(1, src.shape[-1], dtype=torch.bool)
        phone_mask = torch.ones(dur.shape, dtype=torch.bool)
        prompt_mask = torch.ones(1, prm.shape[-1], dtype=torch.bool)
        h_q = self.latent_encoder(src, frame_mask, dur, phone_mask)["h_q"]
        z = self.prompt_encoder(prm, prompt_mask, generator=generator)
        durations, f0, c = self.variance_adaptor.infer(h_q, z, prompt_mask)
        steps = cfg.decode_steps if decode_steps is None else decode_steps
        temp = cfg.sampling_temperature if temperature is None else temperature
        tokens = iterative_decode(self.decoder, c, z, steps, temperature=temp, generator=generator)
        return {"tokens": tokens.numpy(), "durations": durations.numpy(), "f0": f0.numpy()}
