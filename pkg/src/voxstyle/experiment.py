"""Zero-shot conversion protocol on a synthetic corpus.

Held-out pairs combine a *source* utterance from a training speaker in the
held-out style with a *prompt* utterance from the held-out speaker in a
training style. Both utterances are unseen during training, the prompt voice
is unseen, and source and prompt always differ in speaker and style.
"""

import numpy as np
import torch

from . import codec
from .metrics import aggregate, envelope_distance, style_transfer_scores
from .synth_data import extract_pitch


def heldout_pairs(corpus, n_pairs=60, seed=0):
    """Deterministic sample of ``(source_id, prompt_id)`` pairs (see module docstring)."""
    ho_spk = set(corpus.meta["heldout_speakers"])
    ho_sty = set(corpus.meta["heldout_styles"])
    sources = [r["id"] for r in corpus.rows
               if r["style"] in ho_sty and r["speaker"] not in ho_spk]
    prompts = [r["id"] for r in corpus.rows
               if r["speaker"] in ho_spk and r["style"] not in ho_sty]
    if not sources or not prompts:
        raise ValueError("corpus has no held-out speaker/style combination to pair")
    grid = [(s, p) for s in sources for p in prompts]
    rng = np.random.default_rng(seed)
    pick = rng.permutation(len(grid))[: min(n_pairs, len(grid))]
    return [grid[k] for k in sorted(pick)]


def convert_pair(model, corpus, books, source_id, prompt_id, seed=0):
    """Run one conversion; returns frames, f0, durations and tokens."""
    gen = torch.Generator().manual_seed(seed)
    out = model.convert(corpus.tokens(source_id), corpus.durations(source_id),
                        corpus.tokens(prompt_id), generator=gen)
    frames = codec.decode(out["tokens"], books)
    return {"frames": frames, "f0": extract_pitch(frames), "pred_f0": out["f0"],
            "durations": out["durations"], "tokens": out["tokens"]}


def score_pair(corpus, source_id, prompt_id, frames, log_f0=False):
    """Per-pair metric record for a converted utterance given as frames."""
    src_frames, prm_frames = corpus.frames(source_id), corpus.frames(prompt_id)
    scores = style_transfer_scores(extract_pitch(src_frames), extract_pitch(prm_frames),
                                   extract_pitch(frames), log_f0=log_f0)
    return {"source": source_id, "prompt": prompt_id, **scores.to_dict(),
            "env_to_source": envelope_distance(frames, src_frames),
            "env_to_prompt": envelope_distance(frames, prm_frames)}


def evaluate_pairs(model, corpus, books, pairs, seed=0):
    """Convert and score every pair; returns ``(records, summary)``."""
    model.eval()
    records = []
    for k, (s, p) in enumerate(pairs):
        out = convert_pair(model, corpus, books, s, p, seed=seed + k)
        records.append(score_pair(corpus, s, p, out["frames"]))
    return records, aggregate(records)
