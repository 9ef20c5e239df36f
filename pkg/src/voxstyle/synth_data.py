"""Synthetic speech-like corpus with known speaker and style factors.

An utterance is a 16-channel feature sequence. Channels 0..14 carry the phone
identity scaled by the speaker's spectral envelope (timbre); the last channel
carries log-f0 for voiced frames and 0 for unvoiced ones. Style controls the
pitch contour (shape over the course of the utterance, register, alternating
phone-level accent) and the duration scaling.

Corpus layout on disk::

    corpus.json            speakers, styles, held-out ids, generation settings
    manifest.jsonl         one record per utterance
    frames/<id>.npy        float64 [N, 16]
    pitch/<id>.npy         float64 [N], Hz, 0 = unvoiced
    tokens/<id>.npy        int32 [levels, N], written by codec fitting
"""

import json
import os
from dataclasses import dataclass, field

import numpy as np

FORMAT_VERSION = 1
FEATURE_DIM = 16
PITCH_CHANNEL = FEATURE_DIM - 1
FRAME_RATE = 50.0
F0_REF = 40.0
VOICING_THRESHOLD = 0.25  # pitch-channel value; f0 = 40 * e^0.25 ~ 51 Hz

PHONES = ["a", "e", "i", "o", "u", "y", "m", "n", "l", "r", "w", "j", "s", "f", "k", "t"]
UNVOICED = frozenset({"s", "f", "k", "t"})
BASE_DURATIONS = dict(zip(PHONES, [12, 10, 8, 11, 9, 7, 6, 6, 5, 5, 4, 4, 9, 7, 4, 5]))


def _phone_embeddings():
    rng = np.random.default_rng(20240917)
    return {p: rng.uniform(0.3, 1.7, size=FEATURE_DIM - 1) for p in PHONES}


PHONE_EMBEDDINGS = _phone_embeddings()


@dataclass
class SpeakerSpec:
    speaker_id: str
    envelope: np.ndarray
    base_f0: float

    def __post_init__(self):
        self.envelope = np.asarray(self.envelope, dtype=np.float64)
        if self.envelope.shape != (FEATURE_DIM - 1,) or np.any(self.envelope <= 0):
            raise ValueError("speaker envelope must be 15 positive gains")
        if not 80.0 <= self.base_f0 <= 300.0:
            raise ValueError(f"base f0 {self.base_f0} outside [80, 300] Hz")

    def to_dict(self):
        return {"speaker_id": self.speaker_id, "envelope": self.envelope.tolist(),
                "base_f0": self.base_f0}


SHAPES = {
    "rise": lambda tau: 2.0 * tau - 1.0,
    "fall": lambda tau: 1.0 - 2.0 * tau,
    "hat": lambda tau: 1.0 - 4.0 * np.abs(tau - 0.5),
    "wave": lambda tau: np.sin(2.0 * np.pi * tau),
    "flat": lambda tau: np.zeros_like(tau),
}


@dataclass
class StyleSpec:
    """Pitch contour parameters (log-f0 units) and a duration scale."""

    style_id: str
    shape: str = "flat"
    amplitude: float = 0.0
    register: float = 0.0
    accent: float = 0.0
    duration_scale: float = 1.0

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise ValueError(f"unknown contour shape {self.shape!r}")
        if not 0.5 <= self.duration_scale <= 2.0:
            raise ValueError("duration scale must lie in [0.5, 2.0]")

    def to_dict(self):
        return dict(self.__dict__)


STYLE_BANK = [
    dict(shape="rise", amplitude=0.3, register=-0.05, accent=0.0, duration_scale=1.0),
    dict(shape="fall", amplitude=0.3, register=-0.15, accent=0.0, duration_scale=1.5),
    dict(shape="flat", amplitude=0.0, register=0.2, accent=0.15, duration_scale=0.7),
    dict(shape="hat", amplitude=0.3, register=0.05, accent=0.05, duration_scale=1.25),
    dict(shape="wave", amplitude=0.25, register=0.1, accent=0.0, duration_scale=0.85),
    dict(shape="rise", amplitude=0.15, register=0.25, accent=0.1, duration_scale=1.75),
]


@dataclass
class UtteranceRecord:
    utt_id: str
    phones: list
    durations: np.ndarray
    frames: np.ndarray
    pitch: np.ndarray
    speaker_id: str
    style_id: str
    meta: dict = field(default_factory=dict)

    @property
    def n_frames(self):
        return int(self.frames.shape[0])


def round_half_up(x):
    return np.floor(np.asarray(x, dtype=np.float64) + 0.5).astype(np.int64)


def style_durations(phones, style):
    base = np.array([BASE_DURATIONS[p] for p in phones], dtype=np.float64)
    return np.maximum(round_half_up(base * style.duration_scale), 1)


def utterance_position(n_frames):
    """Relative position (n + 0.5) / N of every frame in the utterance."""
    return (np.arange(n_frames) + 0.5) / n_frames


def style_log_contour(phones, durations, style):
    """Speaker-independent part of log-f0 per frame (add log base f0)."""
    tau = utterance_position(int(np.sum(durations)))
    parity = np.repeat(np.where(np.arange(len(phones)) % 2 == 0, 1.0, -1.0), durations)
    return style.register + style.amplitude * SHAPES[style.shape](tau) + style.accent * parity


def pitch_to_channel(f0):
    f0 = np.asarray(f0, dtype=np.float64)
    out = np.zeros_like(f0)
    voiced = f0 > 0
    out[voiced] = np.log(f0[voiced] / F0_REF)
    return out


def generate_utterance(phones, speaker, style, rng, noise_std=0.02, utt_id="utt"):
    """Render one utterance; see the module docstring for the feature layout."""
    phones = list(phones)
    if not phones:
        raise ValueError("phone list must be non-empty")
    unknown = [p for p in phones if p not in BASE_DURATIONS]
    if unknown:
        raise ValueError(f"unknown phones: {unknown}")
    durations = style_durations(phones, style)
    frame_phones = np.repeat(np.arange(len(phones)), durations)
    voiced = np.array([phones[k] not in UNVOICED for k in frame_phones])
    f0 = speaker.base_f0 * np.exp(style_log_contour(phones, durations, style))
    f0 = np.where(voiced, f0, 0.0)

    emb = np.stack([PHONE_EMBEDDINGS[phones[k]] for k in frame_phones])
    n = len(frame_phones)
    frames = np.empty((n, FEATURE_DIM))
    frames[:, :PITCH_CHANNEL] = emb * speaker.envelope + noise_std * rng.standard_normal((n, PITCH_CHANNEL))
    frames[:, PITCH_CHANNEL] = pitch_to_channel(f0)
    return UtteranceRecord(utt_id, phones, durations, frames, f0,
                           speaker.speaker_id, style.style_id)


def extract_pitch(frames):
    """Recover per-frame f0 in Hz from the pitch channel; 0 where unvoiced."""
    frames = np.asarray(frames, dtype=np.float64)
    v = frames[:, PITCH_CHANNEL]
    return np.where(v > VOICING_THRESHOLD, F0_REF * np.exp(v), 0.0)


def make_speakers(n, rng, f0_range=(120.0, 180.0), envelope_spread=0.35):
    return [SpeakerSpec(f"spk{i:02d}",
                        np.exp(rng.normal(0.0, envelope_spread, FEATURE_DIM - 1)),
                        float(rng.uniform(*f0_range)))
            for i in range(n)]


def make_styles(n, rng):
    styles = []
    for i in range(n):
        if i < len(STYLE_BANK):
            params = STYLE_BANK[i]
        else:
            params = dict(shape=str(rng.choice(sorted(SHAPES))),
                          amplitude=float(rng.uniform(0.1, 0.3)),
                          register=float(rng.uniform(-0.2, 0.25)),
                          accent=float(rng.uniform(0.0, 0.15)),
                          duration_scale=float(rng.uniform(0.7, 1.6)))
        styles.append(StyleSpec(f"sty{i:02d}", **params))
    return styles


def random_phones(rng, min_len=8, max_len=14):
    n = int(rng.integers(min_len, max_len + 1))
    return [PHONES[k] for k in rng.integers(0, len(PHONES), size=n)]


def generate_corpus(out_dir, n_speakers, n_styles, n_utts, seed=0, heldout_speakers=1,
                    heldout_styles=1, noise_std=0.02, f0_range=(120.0, 180.0)):
    """Write a full speaker x style x utterance factorial corpus to ``out_dir``.

    The last ``heldout_speakers`` speakers and last ``heldout_styles`` styles
    are flagged as held out (never more than count - 1, so training data is
    never empty). Returns the path of the manifest.
    """
    for name, value in (("n_speakers", n_speakers), ("n_styles", n_styles), ("n_utts", n_utts)):
        if int(value) < 1:
            raise ValueError(f"{name} must be >= 1, got {value}")
    rng = np.random.default_rng(seed)
    speakers = make_speakers(n_speakers, rng, f0_range=f0_range)
    styles = make_styles(n_styles, rng)
    ho_spk = {s.speaker_id for s in speakers[n_speakers - min(heldout_speakers, n_speakers - 1):]}
    ho_sty = {s.style_id for s in styles[n_styles - min(heldout_styles, n_styles - 1):]}

    for sub in ("frames", "pitch", "tokens"):
        os.makedirs(os.path.join(out_dir, sub), exist_ok=True)
    rows = []
    for spk in speakers:
        for sty in styles:
            for u in range(n_utts):
                utt_id = f"{spk.speaker_id}-{sty.style_id}-u{u:03d}"
                rec = generate_utterance(random_phones(rng), spk, sty, rng,
                                         noise_std=noise_std, utt_id=utt_id)
                np.save(os.path.join(out_dir, "frames", utt_id + ".npy"), rec.frames)
                np.save(os.path.join(out_dir, "pitch", utt_id + ".npy"), rec.pitch)
                is_ho_spk = spk.speaker_id in ho_spk
                is_ho_sty = sty.style_id in ho_sty
                rows.append({
                    "id": utt_id,
                    "speaker": spk.speaker_id,
                    "style": sty.style_id,
                    "phones": " ".join(rec.phones),
                    "durations": [int(d) for d in rec.durations],
                    "n_frames": rec.n_frames,
                    "frames": f"frames/{utt_id}.npy",
                    "pitch": f"pitch/{utt_id}.npy",
                    "tokens": f"tokens/{utt_id}.npy",
                    "heldout_speaker": is_ho_spk,
                    "heldout_style": is_ho_sty,
                    "split": "heldout" if (is_ho_spk or is_ho_sty) else "train",
                })
    meta = {
        "format_version": FORMAT_VERSION,
        "seed": seed,
        "feature_dim": FEATURE_DIM,
        "pitch_channel": PITCH_CHANNEL,
        "frame_rate": FRAME_RATE,
        "noise_std": noise_std,
        "speakers": [s.to_dict() for s in speakers],
        "styles": [s.to_dict() for s in styles],
        "heldout_speakers": sorted(ho_spk),
        "heldout_styles": sorted(ho_sty),
    }
    with open(os.path.join(out_dir, "corpus.json"), "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
    manifest = os.path.join(out_dir, "manifest.jsonl")
    with open(manifest, "w") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")
    return manifest


class Corpus:
    """Read access to a generated corpus directory."""

    def __init__(self, root):
        self.root = root
        manifest = os.path.join(root, "manifest.jsonl")
        if not os.path.exists(manifest):
            raise FileNotFoundError(f"no manifest at {manifest}")
        with open(os.path.join(root, "corpus.json")) as fh:
            self.meta = json.load(fh)
        with open(manifest) as fh:
            self.rows = [json.loads(line) for line in fh if line.strip()]
        self.by_id = {r["id"]: r for r in self.rows}

    def __len__(self):
        return len(self.rows)

    def path(self, row, kind):
        return os.path.join(self.root, row[kind])

    def frames(self, utt_id):
        return np.load(self.path(self.by_id[utt_id], "frames"))

    def pitch(self, utt_id):
        return np.load(self.path(self.by_id[utt_id], "pitch"))

    def tokens(self, utt_id):
        return np.load(self.path(self.by_id[utt_id], "tokens")).astype(np.int64)

    def durations(self, utt_id):
        return np.asarray(self.by_id[utt_id]["durations"], dtype=np.int64)

    def has_tokens(self):
        return all(os.path.exists(self.path(r, "tokens")) for r in self.rows)

    def split(self, name):
        return [r for r in self.rows if r["split"] == name]
