import csv
import logging
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from flowvocoder import numcore, training
from flowvocoder.errors import InputError, NumericFailure
from flowvocoder.flowstack import FlowModel
from flowvocoder.training import (
    Checkpoint, Trainer, fixed_chunks, is_test_file, load_dataset, lr_schedule, make_utterance,
    nll_loss, split_dataset, train)
from flowvocoder.wavio import write_wav

from conftest import mel_for, randomize_head, tiny_config

HALF_LOG_2PI = 0.5 * math.log(2 * math.pi)


def tiny_corpus(config, n=3, seconds=0.05, seed=0):
    rng = np.random.default_rng(seed)
    length = int(seconds * config.sample_rate)
    return [make_utterance(f"u{i}.wav", 0.3 * rng.standard_normal(length), config) for i in range(n)]


def read_entries(blob):
    count = int.from_bytes(blob[8:12], "little")
    offset, out = 12, {}
    for _ in range(count):
        n = int.from_bytes(blob[offset:offset + 2], "little")
        name = blob[offset + 2:offset + 2 + n].decode()
        offset += 2 + n
        rank = blob[offset]
        dims = [int.from_bytes(blob[offset + 1 + 4 * i:offset + 5 + 4 * i], "little") for i in range(rank)]
        offset += 1 + 4 * rank
        size = int(np.prod(dims))
        out[name] = np.frombuffer(blob[offset:offset + 4 * size], "<f4").reshape(dims)
        offset += 4 * size
    return out


@pytest.mark.parametrize("it,every,expected", [
    (0, 200_000, 2e-4), (200_000, 200_000, 1e-4), (500_000, 200_000, 5e-5), (1999, 2000, 2e-4)])
def test_lr_schedule_examples(it, every, expected):
    assert lr_schedule(it, 2e-4, every) == pytest.approx(expected, rel=1e-15)


@given(st.integers(0, 10**7), st.integers(0, 10**6), st.integers(1, 10**6))
def test_lr_schedule_non_increasing_piecewise_constant(it, gap, every):
    assert lr_schedule(it + gap, 2e-4, every) <= lr_schedule(it, 2e-4, every)
    start = (it // every) * every
    assert lr_schedule(it, 2e-4, every) == lr_schedule(start, 2e-4, every)


def test_lr_schedule_rejects_negative():
    with pytest.raises(InputError):
        lr_schedule(-1)


def test_zero_model_zero_chunks_loss():
    cfg = tiny_config()
    x = np.zeros((2, 24))
    loss = nll_loss(x, mel_for(x, cfg), FlowModel.build(cfg))
    assert loss.item() == pytest.approx(HALF_LOG_2PI, abs=1e-15)


def test_zero_model_noise_loss_matches_gaussian_entropy():
    cfg = tiny_config(squeeze_h=16, chunk_len=4000)
    x = np.random.default_rng(7).standard_normal((10, 4000))
    with torch.no_grad():
        loss = float(nll_loss(x, mel_for(x, cfg), FlowModel.build(cfg)))
    assert loss == pytest.approx(0.5 + HALF_LOG_2PI, abs=0.02)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.01, 3.0))
def test_zero_model_loss_is_half_mean_square(seed, scale):
    cfg = tiny_config()
    x = np.random.default_rng(seed).standard_normal((2, 24)) * scale
    with torch.no_grad():
        loss = float(nll_loss(x, mel_for(x, cfg), FlowModel.build(cfg)))
    assert loss == pytest.approx(np.mean(x ** 2) / 2 + HALF_LOG_2PI, rel=1e-13)


def test_mask_excludes_padding():
    cfg = tiny_config()
    x = np.random.default_rng(3).standard_normal((1, 24))
    mask = np.zeros((1, 24))
    mask[0, :10] = 1
    padded = x * mask
    loss = float(nll_loss(padded, mel_for(padded, cfg), FlowModel.build(cfg), mask))
    assert loss == pytest.approx(np.mean(x[0, :10] ** 2) / 2 + HALF_LOG_2PI, rel=1e-13)
    with pytest.raises(InputError):
        nll_loss(padded, mel_for(padded, cfg), FlowModel.build(cfg), np.zeros((1, 24)))


def test_nll_gradient_matches_finite_differences():
    cfg = tiny_config(chunk_len=32)
    model = randomize_head(FlowModel.build(cfg), std=0.3, seed=5)
    x = np.random.default_rng(2).standard_normal((1, 32)) * 0.5
    mel = mel_for(x, cfg)
    params = list(model.parameters())
    grads = numcore.backward(nll_loss(x, mel, model), params)
    with torch.no_grad():
        fd = numcore.finite_difference_grad(lambda: nll_loss(x, mel, model), params, eps=1e-5)
    worst = max(float((g - f).abs().div(f.abs().clamp(min=1.0)).max()) for g, f in zip(grads, fd))
    assert worst <= 1e-4


def test_loss_decreases_on_fixed_batch():
    cfg = tiny_config(chunk_len=32)
    model = FlowModel.build(cfg)
    rng = np.random.default_rng(0)
    t = np.arange(32)
    x = np.stack([0.5 * np.sin(0.3 * t + p) for p in rng.uniform(0, 6, 2)])
    mel = mel_for(x, cfg)
    opt = training.make_optimizer(model, 1e-2)
    losses = []
    for _ in range(50):
        loss = nll_loss(x, mel, model)
        losses.append(float(loss))
        for p, g in zip(model.parameters(), numcore.backward(loss, model.parameters())):
            p.grad = g
        opt.step()
    assert losses[-1] < losses[0] - 0.5


def test_nan_loss_reports_batch_item():
    cfg = tiny_config()
    model = randomize_head(FlowModel.build(cfg), std=0.3)
    with torch.no_grad():
        model.estimator.head.bias[0] = math.nan
    x = np.zeros((2, 24))
    with pytest.raises(NumericFailure, match="batch item 0"):
        nll_loss(x, mel_for(x, cfg), model)


def test_split_is_stable_and_about_ten_percent():
    names = [f"LJ{i:03d}-{j:04d}.wav" for i in range(20) for j in range(50)]
    test = [n for n in names if is_test_file(n)]
    assert 0.07 < len(test) / len(names) < 0.13
    assert test == [n for n in names if is_test_file("/elsewhere/" + n)]


def test_sampler_chunks_are_hop_aligned_and_masked():
    cfg = tiny_config(chunk_len=512)
    utts = tiny_corpus(cfg, n=2, seconds=0.2) + [make_utterance("short.wav", np.ones(100), cfg)]
    sampler = training.ChunkSampler(utts, cfg, np.random.default_rng(0))
    for _ in range(20):
        chunks, mels, masks = sampler.sample(batch=3)
        assert chunks.shape == (3, 512) and mels.shape == (3, 80, 2) and masks.shape == (3, 512)
    short = utts[2]
    assert short.audio.size == 512 and short.length == 100
    c, _, m = fixed_chunks([short], cfg)
    assert m.sum() == 100 and np.all(c[0, 100:] == 0)


def test_two_iterations_twice_identical():
    cfg = tiny_config(max_iters=2)
    utts = tiny_corpus(cfg)
    _, first = train(utts, cfg)
    _, second = train(utts, cfg)
    assert first == second and len(first) == 2


def test_train_writes_metrics_and_checkpoints(tmp_path):
    cfg = tiny_config(max_iters=10, checkpoint_every=4)
    train(tiny_corpus(cfg), cfg, out_dir=tmp_path)
    with open(tmp_path / "metrics.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["iter", "loss", "lr", "wall_ms"]
    assert [int(r[0]) for r in rows[1:]] == list(range(10))
    assert sorted(p.name for p in tmp_path.glob("*.fvoc")) == [
        "ckpt_00000004.fvoc", "ckpt_00000008.fvoc", "ckpt_00000010.fvoc"]


def test_nan_halts_with_diagnostic_checkpoint(tmp_path, monkeypatch):
    cfg = tiny_config(max_iters=5)

    def broken(*args, **kwargs):
        return torch.tensor(math.nan, dtype=torch.float64, requires_grad=True) * 1.0
    monkeypatch.setattr(training, "nll_loss", broken)
    with pytest.raises(NumericFailure, match="iteration 0"):
        train(tiny_corpus(cfg), cfg, out_dir=tmp_path)
    assert (tmp_path / "diagnostic.fvoc").exists()


def test_checkpoint_bytes_round_trip(tmp_path):
    cfg = tiny_config(max_iters=3)
    trainer, _ = train(tiny_corpus(cfg), cfg)
    path = tmp_path / "a.fvoc"
    trainer.checkpoint().save(path)
    blob = path.read_bytes()
    assert blob[:4] == b"FVOC"
    assert Checkpoint.load(path).to_bytes() == blob


def test_checkpoint_float32_entries_carry_weights(tmp_path):
    cfg = tiny_config()
    model = randomize_head(FlowModel.build(cfg))
    path = tmp_path / "m.fvoc"
    training.save_checkpoint(path, model, cfg)
    ckpt = Checkpoint.load(path)
    assert ckpt.config == cfg
    for name, t in model.state_dict().items():
        assert np.array_equal(ckpt.arrays[name], t.numpy())
    # a reader that knows only the documented entry layout sees float32 weights
    plain = read_entries(path.read_bytes())
    for name, t in model.state_dict().items():
        assert np.array_equal(plain[name], t.numpy().astype(np.float32))
    loaded, _ = training.load_model(path)
    for a, b in zip(loaded.parameters(), model.parameters()):
        assert torch.equal(a, b)


def test_resume_is_bit_identical(tmp_path):
    cfg = tiny_config(max_iters=6, checkpoint_every=3)
    utts = tiny_corpus(cfg)
    straight, history = train(utts, cfg, out_dir=tmp_path / "a")
    ckpt = Checkpoint.load(tmp_path / "a" / "ckpt_00000003.fvoc")
    resumed, tail = train(utts, cfg, out_dir=tmp_path / "b",
                          trainer=Trainer.from_checkpoint(ckpt, utts))
    assert tail == history[3:]
    for a, b in zip(straight.model.parameters(), resumed.model.parameters()):
        assert torch.equal(a, b)
    assert ((tmp_path / "a" / "ckpt_00000006.fvoc").read_bytes()
            == (tmp_path / "b" / "ckpt_00000006.fvoc").read_bytes())


@pytest.mark.parametrize("blob", [b"NOPE" + bytes(20), b"FVOC" + bytes(3), b"FVOC\x01\x00\x00\x00\x05\x00\x00\x00"])
def test_corrupt_checkpoint_rejected(tmp_path, blob):
    path = tmp_path / "bad.fvoc"
    path.write_bytes(blob)
    with pytest.raises(InputError):
        Checkpoint.load(path)


def test_load_dataset_skips_unreadable(tmp_path, caplog):
    cfg = tiny_config()
    write_wav(tmp_path / "good.wav", (np.arange(400) % 50).astype(np.int16), cfg.sample_rate)
    (tmp_path / "bad.wav").write_bytes(b"not a wav at all")
    write_wav(tmp_path / "rate.wav", np.zeros(100, np.int16), 16000)
    with caplog.at_level(logging.WARNING):
        utts = load_dataset(tmp_path, cfg)
    assert [u.name for u in utts] == ["good.wav"]
    assert "bad.wav" in caplog.text and "rate.wav" in caplog.text
    with pytest.raises(InputError):
        load_dataset(tmp_path / "missing", cfg)


def test_split_dataset_partitions():
    cfg = tiny_config()
    utts = tiny_corpus(cfg, n=30)
    train_set, test_set = split_dataset(utts)
    assert len(train_set) + len(test_set) == 30
    assert not {u.name for u in train_set} & {u.name for u in test_set}
