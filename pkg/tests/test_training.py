import json
import math

import numpy as np
import pytest
import torch

from voxstyle import variance_adaptor
from voxstyle.training import (
    Trainer,
    load_train_items,
    lr_schedule,
    make_batch,
    sample_prompt_segment,
    total_loss,
)

from conftest import tiny_config

# Upper 0.1% point of chi-square with 25 degrees of freedom.
CHI2_25_999 = 52.620


class TestPromptSegment:
    def test_shortest_utterance(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            s = sample_prompt_segment(4, rng)
            assert s.prompt_length in (1, 2)
            assert s.target_ranges and s.start < s.end

    def test_seeded(self):
        a = sample_prompt_segment(50, np.random.default_rng(3))
        b = sample_prompt_segment(50, np.random.default_rng(3))
        assert (a.start, a.end) == (b.start, b.end)

    def test_too_short(self):
        with pytest.raises(ValueError):
            sample_prompt_segment(3, np.random.default_rng(0))

    def test_partition(self):
        rng = np.random.default_rng(1)
        for n in range(4, 40):
            s = sample_prompt_segment(n, rng)
            covered = sorted(list(range(s.start, s.end))
                             + [k for a, b in s.target_ranges for k in range(a, b)])
            assert covered == list(range(n))

    def test_length_distribution_chi_square(self):
        rng = np.random.default_rng(2024)
        lengths = np.array([sample_prompt_segment(100, rng).prompt_length for _ in range(100_000)])
        observed = np.bincount(lengths, minlength=51)[25:51]
        assert observed.sum() == 100_000
        expected = 100_000 / 26
        chi2 = float(((observed - expected) ** 2 / expected).sum())
        assert chi2 < CHI2_25_999

    def test_start_uniform_given_length(self):
        rng = np.random.default_rng(5)
        starts = []
        while len(starts) < 20000:
            s = sample_prompt_segment(8, rng)
            if s.prompt_length == 2:
                starts.append(s.start)
        freq = np.bincount(starts, minlength=7) / len(starts)
        assert np.abs(freq - 1 / 7).max() < 0.015

    def test_snaps_to_phone_boundaries(self):
        rng = np.random.default_rng(0)
        durations = np.array([3, 5, 2, 6, 4])
        bounds = set(np.concatenate([[0], np.cumsum(durations)]).tolist())
        for _ in range(300):
            s = sample_prompt_segment(20, rng, durations)
            assert s.start in bounds and s.end in bounds
            assert 0 < s.prompt_length < 20

    def test_single_phone_falls_back_to_frames(self):
        s = sample_prompt_segment(10, np.random.default_rng(0), np.array([10]))
        assert 0 < s.prompt_length < 10

    def test_inconsistent_durations(self):
        with pytest.raises(ValueError):
            sample_prompt_segment(10, np.random.default_rng(0), np.array([3, 3]))


class TestTotalLoss:
    ONES = {"L_diff": 1.0, "L_VQ": 1.0, "L_va": 1.0, "L_va_adv": 1.0}

    def test_hand_value(self):
        assert total_loss(self.ONES, 0.5).total == 3.5

    def test_lambda_zero_ignores_adversary(self):
        a = total_loss(self.ONES, 0.0).total
        b = total_loss({**self.ONES, "L_va_adv": 123.0}, 0.0).total
        assert a == b == 3.0

    def test_random_components(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            d, q, v, a = rng.uniform(0, 5, 4)
            lam = rng.uniform(0, 1)
            out = total_loss({"L_diff": d, "L_VQ": q, "L_va": v, "L_va_adv": a}, lam)
            assert out.total == d + 1.0 * q + v + lam * a

    def test_ablation_flags(self):
        assert total_loss(self.ONES, 0.5, use_bottleneck=False).total == 2.5
        assert total_loss(self.ONES, 0.5, use_adversarial=False).total == 3.0

    def test_nan_names_component(self):
        with pytest.raises(FloatingPointError, match="L_va"):
            total_loss({**self.ONES, "L_va": float("nan")})

    def test_tensor_value_is_exact_and_adversary_gets_unit_gradient(self):
        adv = torch.tensor(0.7, requires_grad=True)
        parts = {"L_diff": torch.tensor(1.3), "L_VQ": torch.tensor(0.2),
                 "L_va": torch.tensor(0.4), "L_va_adv": adv}
        out = total_loss(parts, 0.5)
        assert float(out.total.detach()) == float(torch.tensor(1.3) + torch.tensor(0.2) + torch.tensor(0.4)
                                         + 0.5 * torch.tensor(0.7))
        (g,) = torch.autograd.grad(out.total, adv)
        assert float(g) == 1.0


class TestLrSchedule:
    def test_examples(self):
        assert math.isclose(lr_schedule(32000), 5e-4)
        assert math.isclose(lr_schedule(16000), 2.5e-4)
        assert math.isclose(lr_schedule(128000), 2.5e-4)

    def test_desk_warmup(self):
        assert math.isclose(lr_schedule(200, 5e-4, 200), 5e-4)
        assert math.isclose(lr_schedule(1, 5e-4, 200), 2.5e-6)

    def test_step_zero(self):
        with pytest.raises(ValueError):
            lr_schedule(0)


@pytest.fixture(scope="module")
def items(tiny_corpus):
    corpus, _ = tiny_corpus
    return load_train_items(corpus, corpus.rows)


def _trace(books, items, steps=5, **cfg):
    trainer = Trainer(tiny_config(**cfg), books.books)
    return [r for r in trainer.fit(items, steps)]


class TestTrainer:
    def test_logged_total_is_exact_sum(self, tiny_corpus, items):
        _, books = tiny_corpus
        for rec in _trace(books, items, steps=4):
            assert rec["total"] == rec["L_diff"] + rec["L_VQ"] + rec["L_va"] + 0.5 * rec["L_va_adv"]

    def test_bitwise_reproducible(self, tiny_corpus, items):
        _, books = tiny_corpus
        assert _trace(books, items) == _trace(books, items)

    def test_no_adversarial_logs_zero(self, tiny_corpus, items):
        _, books = tiny_corpus
        recs = _trace(books, items, steps=2, use_adversarial=False)
        assert all(r["L_va_adv"] == 0.0 for r in recs)

    def test_shape_error_before_update(self, tiny_corpus, items):
        _, books = tiny_corpus
        trainer = Trainer(tiny_config(), books.books)
        batch = make_batch(items[:2], np.random.default_rng(0), 2)
        batch.f0 = batch.f0[:, :-1]
        before = [p.detach().clone() for p in trainer.model.parameters()]
        with pytest.raises(ValueError):
            trainer.train_step(batch)
        assert all(torch.equal(a, b) for a, b in zip(before, trainer.model.parameters()))

    def test_resume_matches_uninterrupted(self, tiny_corpus, items, tmp_path):
        _, books = tiny_corpus
        full = Trainer(tiny_config(), books.books)
        straight = full.fit(items, 6)
        first = Trainer(tiny_config(), books.books)
        first.fit(items, 3)
        first.save(tmp_path / "ckpt.pt")
        resumed = Trainer.load(tmp_path / "ckpt.pt")
        assert resumed.step == 3
        assert resumed.fit(items, 3) == straight[3:]

    def test_log_file_records(self, tiny_corpus, items, tmp_path):
        _, books = tiny_corpus
        trainer = Trainer(tiny_config(), books.books)
        trainer.fit(items, 3, log_path=tmp_path / "log.jsonl")
        lines = [json.loads(x) for x in (tmp_path / "log.jsonl").read_text().splitlines()]
        assert [r["step"] for r in lines] == [1, 2, 3]
        assert set(lines[0]) == {"step", "lr", "L_diff", "L_VQ", "L_va", "L_va_adv", "total"}

    def test_single_utterance_loss_decreases(self, tiny_corpus, items):
        _, books = tiny_corpus
        trainer = Trainer(tiny_config(batch_frames=1, warmup_steps=20), books.books)
        recs = trainer.fit(items[:1], 200)
        first = np.mean([r["total"] for r in recs[:20]])
        last = np.mean([r["total"] for r in recs[-20:]])
        assert last < 0.7 * first


def _branch_grads(books, items, lam, monkeypatch=None, identity=False):
    """Gradients of the adversarial term alone w.r.t. h and the adversary's parameters."""
    trainer = Trainer(tiny_config(lambda_grl=lam), books.books)
    model = trainer.model.train()
    captured = {}

    def hook(module, args, out):
        out["h_q"].retain_grad()
        captured["h"] = out["h_q"]

    model.latent_encoder.register_forward_hook(hook)
    if identity:
        monkeypatch.setattr(variance_adaptor, "grl", lambda x, scale=1.0: x)
    batch = make_batch(items[:3], np.random.default_rng(0), 2)
    parts = model.loss_parts(batch)
    only_adv = {k: (v if k == "L_va_adv" else 0.0 * v) for k, v in parts.items()}
    total_loss(only_adv, lam).total.backward()
    adv_params = [p for n, p in model.named_parameters() if n.startswith("variance_adaptor.adv_")]
    adv_norm = float(sum(p.grad.pow(2).sum() for p in adv_params if p.grad is not None))
    return captured["h"].grad.flatten(), adv_norm


class TestGradientFlow:
    def test_lambda_zero_keeps_adversary_learning(self, tiny_corpus, items):
        _, books = tiny_corpus
        h_grad, adv_norm = _branch_grads(books, items, 0.0)
        assert adv_norm > 0
        assert torch.all(h_grad == 0)

    def test_reversal_flips_sign(self, tiny_corpus, items, monkeypatch):
        _, books = tiny_corpus
        with_grl, _ = _branch_grads(books, items, 0.5)
        without, _ = _branch_grads(books, items, 0.5, monkeypatch, identity=True)
        cos = torch.nn.functional.cosine_similarity(with_grl.double(), without.double(), dim=0)
        assert abs(float(cos) + 1) < 1e-5
        assert torch.allclose(with_grl, -0.5 * without, rtol=1e-4, atol=1e-9)
