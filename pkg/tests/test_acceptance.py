"""End-to-end acceptance checks, one test per criterion.

Every test records a single PASS/FAIL line that is repeated in the terminal
summary. Criteria 1 to 6 and 10 take seconds; 7 trains a desk-scale model on
10 utterances and 8/9 train three models on the 5 x 4 corpus (roughly half an
hour each on one CPU core). Set VOXSTYLE_ACCEPTANCE_CACHE to a directory to
keep the 8/9 runs between sessions; finished stages are then skipped.
"""

import itertools
import json
import os
import time
from pathlib import Path

import numpy as np
import pytest
import torch
from torch import nn

from voxstyle import codec, synth_data
from voxstyle.cli import main
from voxstyle.config import apply_overrides, preset_config
from voxstyle.decoder import DecodeTrace, MaskedTokenDecoder, iterative_decode, mask_schedule
from voxstyle.latent_encoder import vq_commit
from voxstyle.metrics import dtw_align
from voxstyle.prompt_encoder import UMAdaIN, instance_stats, umadain
from voxstyle.training import Trainer, load_train_items, make_batch
from voxstyle.variance_adaptor import grl

from conftest import TINY

REPO = Path(__file__).resolve().parents[1]
ZERO_SHOT_CONFIG = REPO / "configs" / "zero_shot.json"


def cli(out, *args):
    return main(["--out", str(out), *args])


# -- 1 --------------------------------------------------------------------------


def test_criterion_01_gradient_reversal(criterion):
    torch.manual_seed(0)
    probe = nn.Sequential(nn.Linear(6, 8), nn.Tanh(), nn.Linear(8, 1)).double()
    for p in probe.parameters():
        p.requires_grad_(False)
    loss = lambda x: (probe(x) ** 2).sum()
    h = torch.randn(5, 6, dtype=torch.float64, requires_grad=True)
    worst_rel, worst_fd = 0.0, 0.0
    for lam in (0.5, 1.0, 2.0):
        (g_rev,) = torch.autograd.grad(loss(grl(h, lam)), h)
        (g_id,) = torch.autograd.grad(loss(h), h)
        worst_rel = max(worst_rel, float((g_rev + lam * g_id).norm() / g_id.norm()))
        eps = 1e-6
        fd = torch.zeros_like(h)
        for i, j in itertools.product(range(5), range(6)):
            hp, hm = h.detach().clone(), h.detach().clone()
            hp[i, j] += eps
            hm[i, j] -= eps
            fd[i, j] = (loss(hp) - loss(hm)) / (2 * eps)
        worst_fd = max(worst_fd, float((g_rev + lam * fd).abs().max()))
    ok = worst_rel < 1e-6 and worst_fd < 1e-4
    criterion(1, ok, f"rel err {worst_rel:.1e} (< 1e-6), finite diff {worst_fd:.1e} (< 1e-4)")
    assert ok


# -- 2 --------------------------------------------------------------------------


def test_criterion_02_umadain_statistics(criterion):
    g = torch.Generator().manual_seed(0)
    x = torch.randn(32, 16, generator=g, dtype=torch.float64) * 4 + 3
    ones = torch.ones(16, dtype=torch.float64)
    zeros = torch.zeros(16, dtype=torch.float64)
    mu, sigma = instance_stats(x)
    out = umadain(x, ones, ones, mu, sigma, ones, zeros)
    mean_err = float(out.mean(0).abs().max())
    var_err = float((out.var(0, unbiased=False) - 1).abs().max())

    mod = UMAdaIN(16).double().eval()
    inv_err = 0.0
    for _ in range(10):
        x = torch.randn(32, 16, generator=g, dtype=torch.float64)
        a = torch.rand(16, generator=g, dtype=torch.float64) * 3 + 0.5
        b = torch.randn(16, generator=g, dtype=torch.float64) * 2
        omega = (torch.randn(16, generator=g, dtype=torch.float64),
                 torch.randn(16, generator=g, dtype=torch.float64))
        inv_err = max(inv_err, float((mod(x, omega=omega) - mod(a * x + b, omega=omega)).abs().max()))
    ok = mean_err < 1e-4 and var_err < 1e-3 and inv_err < 1e-4
    criterion(2, ok, f"|mean| {mean_err:.1e}, |var-1| {var_err:.1e}, affine {inv_err:.1e}")
    assert ok


# -- 3 --------------------------------------------------------------------------


def test_criterion_03_masked_decoding(criterion):
    endpoints = all(mask_schedule(0, n, N) == N and mask_schedule(n, n, N) == 0
                    for N in (1, 7, 50, 301) for n in (1, 2, 8, 16))
    levels, vocab, dim = 3, 12, 16
    torch.manual_seed(0)
    cfg = apply_overrides(preset_config("desk"), {
        "decoder_layers": 2, "decoder_hidden": 16, "decoder_filter": 32, "film_every": 1,
        "attention_heads": 2})
    dec = MaskedTokenDecoder(cfg, levels, vocab, dim).eval()
    g = torch.Generator().manual_seed(0)
    c, z = torch.randn(1, 9, dim, generator=g), torch.randn(1, 5, dim, generator=g)

    complete = True
    for n in (1, 3, 8):
        trace = DecodeTrace()
        grid = iterative_decode(dec, c, z, n, trace=trace)
        complete &= bool(grid.min() >= 0 and grid.max() < vocab)
        for t in range(levels):
            last = [s for s in trace.steps if s["level"] == t][-1]
            complete &= not bool(last["still_masked"].any())

    grid = iterative_decode(dec, c, z, 1)
    fm, zm = torch.ones(1, 9, dtype=torch.bool), torch.ones(1, 5, dtype=torch.bool)
    oracle = True
    with torch.no_grad():
        for t in range(levels):
            state = torch.zeros(1, levels, 9, dtype=torch.long)
            state[0, :t] = grid[:t]
            logits = dec(state, torch.tensor([t]), torch.ones(1, 9, dtype=torch.bool), c, z, fm, zm)[0]
            oracle &= bool(torch.equal(grid[t], logits.argmax(-1)))
    ok = endpoints and complete and oracle
    criterion(3, ok, f"endpoints {endpoints}, no masked left {complete}, n=1 argmax {oracle}")
    assert ok


# -- 4 --------------------------------------------------------------------------


def test_criterion_04_vq_bottleneck(criterion):
    g = torch.Generator().manual_seed(0)
    cb = torch.randn(16, 4, generator=g, dtype=torch.float64)
    exact = float(vq_commit(cb[[3, 3, 0, 15, 7]], cb)[1])

    w = torch.randn(4, generator=g, dtype=torch.float64)
    f = lambda x: torch.sin(x @ w).sum() + (x ** 3).sum()
    h = torch.randn(6, 4, generator=g, dtype=torch.float64, requires_grad=True)
    h_q, _, idx = vq_commit(h, cb)
    (grad,) = torch.autograd.grad(f(h_q), h)
    e = cb[idx]
    eps = 1e-6
    fd = torch.zeros_like(e)
    for i, j in itertools.product(range(6), range(4)):
        ep, em = e.clone(), e.clone()
        ep[i, j] += eps
        em[i, j] -= eps
        fd[i, j] = (f(ep) - f(em)) / (2 * eps)
    st_err = float((grad - fd).abs().max())
    ok = exact == 0.0 and st_err < 1e-4
    criterion(4, ok, f"loss on codewords {exact}, straight-through vs finite diff {st_err:.1e}")
    assert ok


# -- 5 --------------------------------------------------------------------------


def _all_monotone_costs(a, b):
    n, m = len(a), len(b)

    def walk(i, j):
        here = abs(a[i] - b[j])
        if (i, j) == (n - 1, m - 1):
            yield here
            return
        for di, dj in ((1, 0), (0, 1), (1, 1)):
            if i + di < n and j + dj < m:
                for rest in walk(i + di, j + dj):
                    yield here + rest

    return walk(0, 0)


def test_criterion_05_dtw_oracle(criterion):
    rng = np.random.default_rng(2024)
    mismatches = 0
    for _ in range(200):
        a = [int(v) for v in rng.integers(-9, 10, size=rng.integers(1, 7))]
        b = [int(v) for v in rng.integers(-9, 10, size=rng.integers(1, 7))]
        _, cost = dtw_align(a, b)
        mismatches += cost != min(_all_monotone_costs(a, b))
    ok = mismatches == 0
    criterion(5, ok, f"{200 - mismatches}/200 pairs match brute force exactly")
    assert ok


# -- 6 --------------------------------------------------------------------------


def test_criterion_06_loss_assembly(criterion, tiny_corpus):
    corpus, books = tiny_corpus
    items = load_train_items(corpus, corpus.rows)
    cfg = apply_overrides(preset_config("desk"), TINY)
    assert cfg.lambda_grl == 0.5
    recs = Trainer(cfg, books.books).fit(items, 25)
    bad = [r["step"] for r in recs
           if r["total"] != r["L_diff"] + r["L_VQ"] + r["L_va"] + 0.5 * r["L_va_adv"]]
    ok = not bad and all(r["L_va_adv"] > 0 for r in recs)
    criterion(6, ok, f"{len(recs) - len(bad)}/{len(recs)} steps exact with lambda_grl = 0.5")
    assert ok


# -- 7 --------------------------------------------------------------------------


def _eval_masked_ce(model, items, levels, draws=8):
    """Masked-token CE averaged over fixed random splits, masks and levels."""
    rng = np.random.default_rng(123)
    va = model.variance_adaptor
    # The adversary only runs in training mode and does not touch L_diff.
    adversarial, va.use_adversarial = va.use_adversarial, False
    model.eval()
    vals = []
    try:
        with torch.no_grad():
            for _ in range(draws):
                vals.append(float(model.loss_parts(make_batch(items, rng, levels))["L_diff"]))
    finally:
        va.use_adversarial = adversarial
        model.train()
    return float(np.mean(vals))


def test_criterion_07_overfit_fixture(criterion, tmp_path):
    # Noise-free frames: with frame noise the finer codec levels hold i.i.d. noise
    # indices that can only be memorized frame by frame.
    synth_data.generate_corpus(tmp_path, 1, 1, 10, seed=0, noise_std=0.0)
    corpus = synth_data.Corpus(str(tmp_path))
    cfg = preset_config("desk")
    frames = np.concatenate([corpus.frames(r["id"]) for r in corpus.rows])
    books = codec.fit_codebooks(frames, cfg.codec_levels, cfg.codec_vocab, seed=0)
    for r in corpus.rows:
        codec.save_tokens(corpus.path(r, "tokens"), codec.encode(corpus.frames(r["id"]), books))
    items = load_train_items(corpus, corpus.rows)
    assert len(items) == 10

    trainer = Trainer(cfg, books.books)
    start = time.time()
    ce, step = float("inf"), 0
    while trainer.step < 2000:
        trainer.fit(items, 250)
        ce = _eval_masked_ce(trainer.model, items, books.levels)
        step = trainer.step
        if ce < 0.1:
            break
    minutes = (time.time() - start) / 60
    ok = ce < 0.1 and minutes < 10
    criterion(7, ok, f"masked CE {ce:.4f} (< 0.1) at step {step} after {minutes:.1f} min (< 10)")
    assert ok


# -- 8 and 9 --------------------------------------------------------------------

VARIANTS = {"full": [], "no_adversarial": ["--no-adversarial"], "no_umadain": ["--no-umadain"]}


@pytest.fixture(scope="module")
def experiment(tmp_path_factory):
    """Run the zero-shot protocol for the full model and both ablations via the CLI."""
    cache = os.environ.get("VOXSTYLE_ACCEPTANCE_CACHE")
    root = Path(cache) if cache else tmp_path_factory.mktemp("zero_shot")
    root.mkdir(parents=True, exist_ok=True)
    data = root / "data"
    if not (data / "codec.bin").exists():
        assert cli(data, "gen-data", "--speakers", "5", "--styles", "4", "--utts", "10", "--force") == 0
        assert cli(data, "--config", str(ZERO_SHOT_CONFIG), "fit-codec") == 0
    results = {}
    for name, flags in VARIANTS.items():
        out = root / name
        summary = out / "eval" / "summary.json"
        if not summary.exists():
            out.mkdir(exist_ok=True)
            for link in ("corpus", "codec.bin"):
                if not (out / link).exists():
                    os.symlink(data / link, out / link)
            start = time.time()
            assert cli(out, "--config", str(ZERO_SHOT_CONFIG), "train", "--log-every", "500", *flags) == 0
            assert cli(out, "convert", "--pairs", "60") == 0
            assert cli(out, "eval") == 0
            (out / "minutes.txt").write_text(f"{(time.time() - start) / 60:.1f}\n")
        results[name] = json.loads(summary.read_text())
        results[name]["minutes"] = float((out / "minutes.txt").read_text())
    return results


def test_criterion_08_zero_shot_direction(criterion, experiment):
    s = experiment["full"]
    ok = (s["pairs"] >= 50 and s["T_Corr"] > s["S_Corr"] and s["T_RMSE"] < s["S_RMSE"]
          and s["timbre_preservation"] >= 0.8 and s["minutes"] <= 60)
    criterion(8, ok, (f"{s['pairs']} pairs: T_Corr {s['T_Corr']:.3f} vs S_Corr {s['S_Corr']:.3f}, "
                      f"T_RMSE {s['T_RMSE']:.2f} vs S_RMSE {s['S_RMSE']:.2f}, "
                      f"timbre {s['timbre_preservation']:.2f} (>= 0.80), {s['minutes']:.0f} min"))
    assert ok


def test_criterion_09_ablation_direction(criterion, experiment):
    full, no_adv, no_um = (experiment[k] for k in ("full", "no_adversarial", "no_umadain"))
    adv_ok = no_adv["T_Corr"] < full["T_Corr"]
    um_ok = no_um["timbre_preservation"] < full["timbre_preservation"]
    ok = adv_ok and um_ok
    criterion(9, ok, (f"T_Corr full {full['T_Corr']:.3f} vs no-adversarial {no_adv['T_Corr']:.3f}; "
                      f"timbre full {full['timbre_preservation']:.2f} vs "
                      f"no-umadain {no_um['timbre_preservation']:.2f}"))
    assert ok


# -- 10 -------------------------------------------------------------------------


def _snapshot(root):
    return {str(p.relative_to(root)): p.read_bytes()
            for p in sorted(Path(root).rglob("*")) if p.is_file() and not p.is_symlink()}


def test_criterion_10_determinism(criterion, tmp_path):
    cfg = tmp_path / "tiny.json"
    cfg.write_text(json.dumps({**TINY, "save_every": 5}))
    out = tmp_path / "run"
    commands = [
        ("gen-data", ["--seed", "7", "gen-data", "--speakers", "3", "--styles", "2", "--utts", "2", "--force"]),
        ("fit-codec", ["--config", str(cfg), "fit-codec"]),
        ("train", ["--config", str(cfg), "--seed", "7", "train", "--steps", "12"]),
        ("train-resume", ["train", "--resume", str(out / "train" / "step0000010.pt"), "--steps", "14"]),
        ("convert", ["--seed", "7", "convert", "--pairs", "4"]),
        ("eval", ["eval"]),
        ("plot", ["plot"]),
    ]
    differing = []
    for name, args in commands:
        if name == "train-resume":
            # Resuming appends to the log, so repeat it in a fresh directory each time.
            runs = []
            for k in range(2):
                other = tmp_path / f"resume{k}"
                other.mkdir()
                for link in ("corpus", "codec.bin"):
                    os.symlink(out / link, other / link)
                assert cli(other, *args) == 0
                runs.append(_snapshot(other))
            first, second = runs
        else:
            assert cli(out, *args) == 0
            first = _snapshot(out)
            assert cli(out, *args) == 0
            second = _snapshot(out)
        if first != second:
            differing.append(name)
    ok = not differing
    criterion(10, ok, f"{len(commands)} commands repeated, byte-identical: "
                      f"{'all' if ok else 'not ' + ', '.join(differing)}")
    assert ok
