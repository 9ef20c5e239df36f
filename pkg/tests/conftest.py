import numpy as np
import pytest

from voxstyle import codec, synth_data
from voxstyle.config import apply_overrides, preset_config

TINY = {
    "codec_levels": 2, "codec_vocab": 16, "encoder_dim": 16, "encoder_blocks": 1,
    "encoder_heads": 2, "encoder_filter": 32, "prompt_encoder_blocks": 1,
    "bottleneck_dim": 4, "vq_codebook_size": 8, "va_layers": 1, "decoder_layers": 2,
    "decoder_hidden": 16, "decoder_filter": 32, "film_every": 1, "attention_heads": 2,
    "decode_steps": 2, "warmup_steps": 10, "batch_frames": 150, "save_every": 0,
}


def tiny_config(**overrides):
    return apply_overrides(preset_config("desk"), {**TINY, **overrides})


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    """2 speakers x 2 styles x 3 utterances with fitted tokens; returns (corpus, books)."""
    root = tmp_path_factory.mktemp("tiny_corpus")
    synth_data.generate_corpus(root, 2, 2, 3, seed=0)
    corpus = synth_data.Corpus(str(root))
    frames = np.concatenate([corpus.frames(r["id"]) for r in corpus.rows])
    books = codec.fit_codebooks(frames, TINY["codec_levels"], TINY["codec_vocab"], seed=0)
    for r in corpus.rows:
        codec.save_tokens(corpus.path(r, "tokens"), codec.encode(corpus.frames(r["id"]), books))
    return corpus, books


# Acceptance results, one line per criterion, printed at the end of the run.
ACCEPTANCE = {}


@pytest.fixture
def criterion():
    """Call ``criterion(k, ok, detail)`` to record and print the verdict of criterion k."""
    def record(k, ok, detail=""):
        line = f"criterion {k:2d}: {'PASS' if ok else 'FAIL'}  {detail}".rstrip()
        ACCEPTANCE[k] = line
        print(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[k])
