"""Prosody and timbre metrics for converted utterances.

Pitch similarity follows the usual VC protocol: fill unvoiced gaps, align the
two contours with dynamic time warping, then report RMSE (Hz) and Pearson
correlation over the aligned pairs. ``S_*`` scores compare the conversion with
its source, ``T_*`` scores with the style prompt.
"""

from dataclasses import asdict, dataclass

import numpy as np

from .synth_data import PITCH_CHANNEL


class MetricError(ValueError):
    pass


def dtw_align(a, b):
    """Minimal cumulative ``|a_i - b_j|`` alignment with steps (1,0), (0,1), (1,1).

    Returns ``(path, cost)``; the path runs from ``(0, 0)`` to
    ``(len(a) - 1, len(b) - 1)``. On equal-cost predecessors the diagonal is
    preferred, then the step that advances ``a``.
    """
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.size == 0 or b.size == 0:
        raise MetricError("dtw_align needs two non-empty sequences")
    n, m = a.size, b.size
    local = np.abs(a[:, None] - b[None, :])
    acc = np.full((n + 1, m + 1), np.inf)
    acc[0, 0] = 0.0
    for i in range(1, n + 1):
        row_prev = acc[i - 1]
        row = acc[i]
        li = local[i - 1]
        # Diagonal and vertical predecessors are known for the whole row.
        best_dv = np.minimum(row_prev[:-1], row_prev[1:])
        for j in range(1, m + 1):
            left = row[j - 1]
            dv = best_dv[j - 1]
            row[j] = li[j - 1] + (dv if dv <= left else left)
    path = [(n - 1, m - 1)]
    i, j = n, m
    while (i, j) != (1, 1):
        diag = acc[i - 1, j - 1]
        up = acc[i - 1, j]
        left = acc[i, j - 1]
        if diag <= up and diag <= left:
            i, j = i - 1, j - 1
        elif up <= left:
            i -= 1
        else:
            j -= 1
        path.append((i - 1, j - 1))
    path.reverse()
    return path, float(acc[n, m])


def interpolate_unvoiced(f0):
    """Linear interpolation across interior unvoiced gaps, edge hold outside."""
    f0 = np.asarray(f0, dtype=np.float64).ravel()
    voiced = np.flatnonzero(f0 > 0)
    if voiced.size == 0:
        raise MetricError("contour has no voiced frames")
    return np.interp(np.arange(f0.size), voiced, f0[voiced])


def pearson(x, y):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    xc = x - x.mean()
    yc = y - y.mean()
    denom = np.sqrt((xc ** 2).sum() * (yc ** 2).sum())
    if denom == 0.0:
        return 1.0 if np.array_equal(x, y) else 0.0
    return float(np.clip((xc * yc).sum() / denom, -1.0, 1.0))


def pitch_rmse_corr(ref, hyp, log_f0=False):
    """DTW-aligned pitch RMSE and Pearson correlation; returns ``(rmse, corr)``.

    With ``log_f0`` the alignment and scores use log-Hz instead of Hz.
    """
    ref = np.asarray(ref, dtype=np.float64).ravel()
    hyp = np.asarray(hyp, dtype=np.float64).ravel()
    for name, c in (("ref", ref), ("hyp", hyp)):
        if np.count_nonzero(c > 0) < 2:
            raise MetricError(f"{name} contour needs at least 2 voiced frames")
    r = interpolate_unvoiced(ref)
    h = interpolate_unvoiced(hyp)
    if log_f0:
        r, h = np.log(r), np.log(h)
    path, _ = dtw_align(r, h)
    idx = np.asarray(path)
    ra, ha = r[idx[:, 0]], h[idx[:, 1]]
    rmse = float(np.sqrt(np.mean((ra - ha) ** 2)))
    return rmse, pearson(ra, ha)


@dataclass
class StyleTransferScores:
    S_RMSE: float
    S_Corr: float
    T_RMSE: float
    T_Corr: float

    def to_dict(self):
        return asdict(self)


def style_transfer_scores(source, prompt, converted, log_f0=False):
    s_rmse, s_corr = pitch_rmse_corr(source, converted, log_f0=log_f0)
    t_rmse, t_corr = pitch_rmse_corr(prompt, converted, log_f0=log_f0)
    return StyleTransferScores(s_rmse, s_corr, t_rmse, t_corr)


class MeanEnvelopeEmbedder:
    """Time-averaged frame with the pitch channel removed.

    Any object with an ``embed(frames) -> vector`` method can stand in for it,
    e.g. a wrapper around a pretrained speaker-verification model.
    """

    def __init__(self, pitch_channel=PITCH_CHANNEL):
        self.pitch_channel = pitch_channel

    def embed(self, frames):
        frames = np.asarray(frames, dtype=np.float64)
        if frames.ndim != 2 or frames.shape[0] == 0:
            raise MetricError("embedder needs non-empty [N, F] frames")
        keep = np.ones(frames.shape[1], dtype=bool)
        if self.pitch_channel is not None:
            keep[self.pitch_channel] = False
        return frames[:, keep].mean(axis=0)


def envelope_distance(a, b, embedder=None):
    embedder = embedder or MeanEnvelopeEmbedder()
    return float(np.linalg.norm(embedder.embed(a) - embedder.embed(b)))


def aggregate(records, keys=("S_RMSE", "S_Corr", "T_RMSE", "T_Corr")):
    """Mean of each key over per-pair records plus the timbre-preservation rate."""
    if not records:
        raise MetricError("no records to aggregate")
    out = {k: float(np.mean([r[k] for r in records])) for k in keys}
    if all("env_to_source" in r and "env_to_prompt" in r for r in records):
        out["timbre_preservation"] = float(np.mean(
            [r["env_to_source"] < r["env_to_prompt"] for r in records]))
    out["pairs"] = len(records)
    return out
