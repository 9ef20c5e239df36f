"""Prompt/target segment sampling, the combined objective and the training loop."""

import json
import math
import os
from dataclasses import asdict, dataclass

import numpy as np
import torch

from .config import config_from_dict
from .decoder import sample_training_mask
from .model import Batch, StyleConversionModel

CHECKPOINT_VERSION = 1


@dataclass
class SegmentSplit:
    """Prompt frames ``[start, end)``; the target is everything else."""

    start: int
    end: int
    n_frames: int
    utt_id: str = ""

    @property
    def prompt_length(self):
        return self.end - self.start

    @property
    def target_ranges(self):
        return [(a, b) for a, b in ((0, self.start), (self.end, self.n_frames)) if b > a]


def sample_prompt_segment(n_frames, rng, durations=None, utt_id=""):
    """Draw a prompt segment of ``U{ceil(N/4) .. floor(N/2)}`` frames at a uniform start.

    With ``durations`` the segment is widened to phone boundaries; if that
    would swallow the whole utterance it is narrowed instead so the target
    stays non-empty.
    """
    N = int(n_frames)
    if N < 4:
        raise ValueError(f"utterance of {N} frames is too short to split (need >= 4)")
    lo, hi = math.ceil(N / 4), N // 2
    length = int(rng.integers(lo, hi + 1))
    start = int(rng.integers(0, N - length + 1))
    end = start + length
    if durations is not None:
        bounds = np.concatenate([[0], np.cumsum(durations)])
        if bounds[-1] != N:
            raise ValueError("durations do not add up to the frame count")
        a = int(bounds[bounds <= start].max())
        b = int(bounds[bounds >= end].min())
        if a == 0 and b == N:
            inner_a = int(bounds[bounds >= start].min())
            inner_b = int(bounds[bounds <= end].max())
            if inner_a > 0 and inner_a < N:
                a = inner_a
            elif inner_b < N and inner_b > 0:
                b = inner_b
            else:
                # Single-phone utterance: no boundary to split on.
                a, b = start, end
        start, end = a, b
    return SegmentSplit(start, end, N, utt_id)


@dataclass
class LossBreakdown:
    L_diff: float
    L_VQ: float
    L_va: float
    L_va_adv: float
    total: float

    def to_dict(self):
        return asdict(self)


def total_loss(parts, lambda_grl=0.5, use_bottleneck=True, use_adversarial=True, lambda_vq=1.0):
    """``L_diff + lambda_vq * L_VQ + L_va + lambda_grl * L_va_adv``.

    Works on floats or scalar tensors. Disabled branches contribute exactly 0.
    For tensors the adversarial term keeps the value ``lambda_grl * L_va_adv``
    but passes a unit gradient to the adversary; the encoder side of that
    branch is weighted by the reversal layer, whose scale the model sets to
    ``lambda_grl``.
    """
    for name in ("L_diff", "L_VQ", "L_va", "L_va_adv"):
        value = float(torch.as_tensor(parts[name]).detach())
        if not math.isfinite(value):
            raise FloatingPointError(f"loss component {name} is not finite ({value})")
    l_vq = parts["L_VQ"] if use_bottleneck else 0.0 * parts["L_VQ"]
    l_adv = parts["L_va_adv"] if use_adversarial else 0.0 * parts["L_va_adv"]
    if torch.is_tensor(l_adv) and l_adv.requires_grad:
        # Value is exactly lambda_grl * l_adv since x - x == 0.
        adv_term = lambda_grl * l_adv.detach() + (l_adv - l_adv.detach())
    else:
        adv_term = lambda_grl * l_adv
    total = parts["L_diff"] + lambda_vq * l_vq + parts["L_va"] + adv_term
    return LossBreakdown(parts["L_diff"], l_vq, parts["L_va"], l_adv, total)


def lr_schedule(step, peak=5e-4, warmup=32000):
    """Linear warmup to ``peak`` then inverse square-root decay."""
    if step < 1:
        raise ValueError("steps are counted from 1")
    return peak * min(step / warmup, math.sqrt(warmup / step))


@dataclass
class TrainItem:
    utt_id: str
    tokens: np.ndarray     # [T, N]
    durations: np.ndarray  # [P]
    f0: np.ndarray         # [N]


def make_batch(items, rng, levels):
    """Split each item into prompt/target, pad, and draw decoder levels and masks."""
    inputs, prompts = [], []
    for it in items:
        split = sample_prompt_segment(it.tokens.shape[1], rng, it.durations, it.utt_id)
        bounds = np.concatenate([[0], np.cumsum(it.durations)])
        keep_phone = (bounds[:-1] < split.start) | (bounds[:-1] >= split.end)
        keep = np.ones(it.tokens.shape[1], dtype=bool)
        keep[split.start:split.end] = False
        inputs.append((it.tokens[:, keep], it.durations[keep_phone], it.f0[keep]))
        prompts.append(it.tokens[:, split.start:split.end])
    B = len(items)
    N = max(x[0].shape[1] for x in inputs)
    P = max(len(x[1]) for x in inputs)
    M = max(p.shape[1] for p in prompts)
    tokens = np.zeros((B, levels, N), dtype=np.int64)
    prompt_tokens = np.zeros((B, levels, M), dtype=np.int64)
    durations = np.zeros((B, P), dtype=np.int64)
    f0 = np.zeros((B, N), dtype=np.float32)
    frame_mask = np.zeros((B, N), dtype=bool)
    phone_mask = np.zeros((B, P), dtype=bool)
    prompt_mask = np.zeros((B, M), dtype=bool)
    level = rng.integers(0, levels, size=B)
    dec_mask = np.zeros((B, N), dtype=bool)
    for b, ((tok, dur, pitch), prm) in enumerate(zip(inputs, prompts)):
        n, p, m = tok.shape[1], len(dur), prm.shape[1]
        tokens[b, :, :n] = tok
        durations[b, :p] = dur
        f0[b, :n] = pitch
        frame_mask[b, :n] = True
        phone_mask[b, :p] = True
        prompt_tokens[b, :, :m] = prm
        prompt_mask[b, :m] = True
        dec_mask[b] = sample_training_mask(n, N, rng)
    t = torch.from_numpy
    return Batch(t(tokens), t(frame_mask), t(durations), t(phone_mask), t(f0),
                 t(prompt_tokens), t(prompt_mask), t(level), t(dec_mask))


def load_train_items(corpus, rows):
    from .synth_data import extract_pitch

    return [TrainItem(r["id"], corpus.tokens(r["id"]), corpus.durations(r["id"]),
                      extract_pitch(corpus.frames(r["id"])).astype(np.float32))
            for r in rows]


class Trainer:
    """Owns the model, optimizer and all random state of one training run."""

    def __init__(self, cfg, books, seed=None):
        self.cfg = cfg
        self.seed = cfg.seed if seed is None else seed
        torch.manual_seed(self.seed)
        self.books = np.asarray(books)
        self.model = StyleConversionModel(cfg, self.books)
        self.optimizer = torch.optim.AdamW(self.model.parameters(), lr=cfg.learning_rate,
                                           betas=tuple(cfg.adam_betas),
                                           weight_decay=cfg.weight_decay)
        self.rng = np.random.default_rng(self.seed)
        self.step = 0
        self._order = []

    def next_items(self, items):
        """Shuffled pass over ``items`` filling up to ``batch_frames`` frames."""
        chosen, frames = [], 0
        while not chosen or frames < self.cfg.batch_frames:
            if not self._order:
                self._order = list(self.rng.permutation(len(items)))
            k = int(self._order.pop())
            if any(c is items[k] for c in chosen):
                self._order.append(k)
                break
            chosen.append(items[k])
            frames += items[k].tokens.shape[1]
            if len(chosen) == len(items):
                break
        return chosen

    def train_step(self, batch):
        cfg = self.cfg
        self.model.check_batch(batch)
        self.model.train()
        self.step += 1
        lr = lr_schedule(self.step, cfg.learning_rate, cfg.warmup_steps)
        for group in self.optimizer.param_groups:
            group["lr"] = lr
        parts = self.model.loss_parts(batch)
        loss = total_loss(parts, cfg.lambda_grl, cfg.use_bottleneck, cfg.use_adversarial,
                          cfg.lambda_vq)
        self.optimizer.zero_grad(set_to_none=True)
        loss.total.backward()
        if cfg.grad_clip > 0:
            torch.nn.utils.clip_grad_norm_(self.model.parameters(), cfg.grad_clip)
        self.optimizer.step()
        logged = {k: float(v.detach()) for k, v in parts.items()}
        record = total_loss(logged, cfg.lambda_grl, cfg.use_bottleneck, cfg.use_adversarial,
                            cfg.lambda_vq)
        return record, lr

    def fit(self, items, steps, log_path=None, checkpoint_dir=None, save_every=None,
            progress=None):
        """Run ``steps`` more optimization steps; returns the list of log records."""
        save_every = self.cfg.save_every if save_every is None else save_every
        records = []
        log = open(log_path, "a") if log_path else None
        try:
            for _ in range(steps):
                batch = make_batch(self.next_items(items), self.rng, self.model.levels)
                loss, lr = self.train_step(batch)
                rec = {"step": self.step, "lr": lr, **loss.to_dict()}
                records.append(rec)
                if log:
                    log.write(json.dumps(rec) + "\n")
                if progress:
                    progress(rec)
                if checkpoint_dir and save_every and self.step % save_every == 0:
                    self.save(os.path.join(checkpoint_dir, f"step{self.step:07d}.pt"))
        finally:
            if log:
                log.close()
        return records

    def state(self):
        return {
            "format_version": CHECKPOINT_VERSION,
            "config": self.cfg.to_dict(),
            "codebooks": torch.from_numpy(self.books.copy()),
            "model": self.model.state_dict(),
            "optimizer": self.optimizer.state_dict(),
            "step": self.step,
            "seed": self.seed,
            "numpy_rng": self.rng.bit_generator.state,
            "torch_rng": torch.get_rng_state(),
            "order": [int(k) for k in self._order],
        }

    def save(self, path):
        torch.save(self.state(), path)

    @classmethod
    def load(cls, path):
        state = torch.load(path, weights_only=False)
        if state.get("format_version") != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {state.get('format_version')}")
        cfg = config_from_dict(state["config"])
        trainer = cls(cfg, state["codebooks"].numpy(), seed=state["seed"])
        trainer.model.load_state_dict(state["model"])
        trainer.optimizer.load_state_dict(state["optimizer"])
        trainer.step = state["step"]
        trainer.rng.bit_generator.state = state["numpy_rng"]
        torch.set_rng_state(state["torch_rng"])
        trainer._order = list(state["order"])
        return trainer


def load_model(path):
    """Model in eval mode plus its config, from a training checkpoint."""
    trainer = Trainer.load(path)
    trainer.model.eval()
    return trainer.model, trainer.cfg
