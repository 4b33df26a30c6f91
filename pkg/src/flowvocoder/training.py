"""Maximum-likelihood training: chunk sampling, NLL, Adam with step halving, checkpoints."""
import csv
import hashlib
import json
import logging
import math
import os
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import numcore
from .conditioning import mel_extract, mel_slice, normalize_audio
from .config import Config, parse_key_values
from .errors import ConfigurationError, InputError, NumericFailure
from .flowstack import FlowModel, gaussian_log_density, reverse_squeezed, squeeze
from .mixlogcdf import MixtureParams, coupling_forward, coupling_inverse
from .wavio import read_wav

log = logging.getLogger(__name__)

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8
GRAD_CLIP = 100.0

CKPT_MAGIC = b"FVOC"
CKPT_VERSION = 1
EXACT_SUFFIX = "#f64"
METRICS_HEADER = ("iter", "loss", "lr", "wall_ms")


@dataclass
class Utterance:
    name: str
    audio: np.ndarray          # normalised, zero-padded to at least one chunk
    mel: np.ndarray            # (n_mels, T) of the padded audio
    length: int                # real (unpadded) sample count


def make_utterance(name, audio, config):
    audio = np.asarray(audio, dtype=np.float64)
    if audio.ndim != 1 or audio.size == 0:
        raise InputError(f"{name}: expected a non-empty mono waveform")
    length = audio.size
    if length < config.chunk_len:
        audio = np.pad(audio, (0, config.chunk_len - length))
    mel = mel_extract(audio, config.sample_rate, config.fft, config.hop, config.win, config.n_mels)
    return Utterance(name, audio, mel.frames, length)


def is_test_file(name):
    """Stable 90/10 split: one in ten file names (by MD5) goes to the test set."""
    digest = hashlib.md5(Path(name).name.encode("utf-8")).hexdigest()
    return int(digest, 16) % 10 == 0


def split_dataset(utterances):
    train = [u for u in utterances if not is_test_file(u.name)]
    test = [u for u in utterances if is_test_file(u.name)]
    return train, test


def load_dataset(directory, config):
    """Read every ``*.wav`` under ``directory`` (sorted); unreadable files are skipped."""
    directory = Path(directory)
    if not directory.is_dir():
        raise InputError(f"data directory {directory} does not exist")
    utterances = []
    for path in sorted(directory.glob("*.wav")):
        try:
            pcm, rate = read_wav(path)
            if rate != config.sample_rate:
                raise InputError(f"{path}: sample rate {rate} != configured {config.sample_rate}")
            utterances.append(make_utterance(path.name, normalize_audio(pcm), config))
        except InputError as exc:
            log.warning("skipping %s", exc)
    return utterances


class ChunkSampler:
    """Draws hop-aligned random chunks (with their mel frames and loss masks)."""

    def __init__(self, utterances, config, rng):
        if not utterances:
            raise InputError("no training utterances")
        self.utterances = utterances
        self.config = config
        self.rng = rng

    def sample(self, batch=None):
        cfg = self.config
        n = cfg.chunk_len
        chunks, mels, masks = [], [], []
        for _ in range(batch or cfg.batch):
            utt = self.utterances[self.rng.integers(len(self.utterances))]
            start = cfg.hop * int(self.rng.integers((utt.audio.size - n) // cfg.hop + 1))
            chunks.append(utt.audio[start:start + n])
            mels.append(mel_slice(utt.mel, start, n, cfg.hop))
            masks.append((np.arange(start, start + n) < utt.length).astype(np.float64))
        return np.stack(chunks), np.stack(mels), np.stack(masks)


def fixed_chunks(utterances, config):
    """Every non-overlapping, hop-aligned chunk of each utterance (deterministic)."""
    n = config.chunk_len
    step = -(-n // config.hop) * config.hop
    chunks, mels, masks = [], [], []
    for utt in utterances:
        for start in range(0, utt.audio.size - n + 1, step):
            chunks.append(utt.audio[start:start + n])
            mels.append(mel_slice(utt.mel, start, n, config.hop))
            masks.append((np.arange(start, start + n) < utt.length).astype(np.float64))
    return np.stack(chunks), np.stack(mels), np.stack(masks)


def chunk_log_likelihood(chunks, mels, model, masks=None):
    """Per-chunk ``(total log-likelihood, counted dimensions)``, honouring ``masks``."""
    dtype = model.dtype
    x = torch.as_tensor(chunks, dtype=dtype)
    if x.dim() == 1:
        x = x.unsqueeze(0)
    mel = torch.as_tensor(mels, dtype=dtype)
    if mel.dim() == 2:
        mel = mel.unsqueeze(0)
    H = model.squeeze_h
    mask = None if masks is None else squeeze(torch.as_tensor(masks, dtype=dtype).reshape(x.shape), H)
    cond = model.conditioner(mel, x.shape[-1])
    Z, logdet, mask, _ = reverse_squeezed(squeeze(x, H), cond, model, mask=mask)
    base = gaussian_log_density(Z)
    if mask is None:
        return logdet + base.sum((-2, -1)), torch.full_like(logdet, float(x.shape[-1]))
    return logdet + (base * mask).sum((-2, -1)), mask.sum((-2, -1))


def nll_loss(chunks, mels, model, masks=None):
    """Mean over the batch of negative log-likelihood per dimension (nats)."""
    ll, count = chunk_log_likelihood(chunks, mels, model, masks)
    if (count <= 0).any():
        raise InputError("a chunk has no unmasked samples")
    per_item = -ll / count
    bad = ~torch.isfinite(per_item)
    if bad.any():
        raise NumericFailure("non-finite loss", where=f"batch item {int(bad.nonzero()[0])}")
    return per_item.mean()


def lr_schedule(iteration, lr0=2e-4, anneal_every=200_000):
    """Learning rate halved every ``anneal_every`` iterations."""
    if iteration < 0:
        raise InputError("iteration must be non-negative")
    return lr0 * 0.5 ** (iteration // anneal_every)


def make_optimizer(model, lr):
    return torch.optim.Adam(model.parameters(), lr=lr, betas=ADAM_BETAS, eps=ADAM_EPS,
                            foreach=False)


class Trainer:
    """One model, one optimizer, one sampling RNG; ``step()`` is one Adam update."""

    def __init__(self, model, utterances, config, rng=None, optimizer=None, iteration=0):
        self.model = model
        self.config = config
        self.rng = rng if rng is not None else np.random.default_rng(config.seed)
        self.sampler = ChunkSampler(utterances, config, self.rng)
        self.optimizer = optimizer or make_optimizer(model, config.lr0)
        self.iteration = iteration

    @classmethod
    def from_checkpoint(cls, ckpt, utterances, config=None):
        config = config or ckpt.config
        model = ckpt.build_model()
        optimizer = make_optimizer(model, config.lr0)
        ckpt.restore_optimizer(optimizer, model)
        rng = np.random.default_rng()
        rng.bit_generator.state = ckpt.rng_state
        return cls(model, utterances, config, rng, optimizer, ckpt.iteration)

    def step(self):
        cfg = self.config
        lr = lr_schedule(self.iteration, cfg.lr0, cfg.anneal_every)
        chunks, mels, masks = self.sampler.sample()
        try:
            loss = nll_loss(chunks, mels, self.model, masks)
            params = list(self.model.parameters())
            grads = numcore.backward(loss, params)
        except NumericFailure as exc:
            raise NumericFailure(f"iteration {self.iteration}: {exc}", where=exc.where) from exc
        for p, g in zip(params, grads):
            p.grad = g
        torch.nn.utils.clip_grad_norm_(params, GRAD_CLIP, foreach=False)
        for group in self.optimizer.param_groups:
            group["lr"] = lr
        self.optimizer.step()
        self.optimizer.zero_grad(set_to_none=True)
        self.iteration += 1
        return float(loss.detach()), lr

    def checkpoint(self):
        return Checkpoint.capture(self.model, self.config, self.iteration,
                                  self.optimizer, self.rng)


def train(utterances, config, out_dir=None, trainer=None, callback=None):
    """Run until ``config.max_iters``; returns the trainer and the loss history.

    With ``out_dir`` set, writes ``metrics.csv`` (appending on resume) and a
    checkpoint every ``config.checkpoint_every`` iterations plus at the end.
    A non-finite loss writes ``diagnostic.fvoc`` and re-raises.
    """
    trainer = trainer or Trainer(FlowModel.build(config), utterances, config)
    history = []
    writer = fh = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        metrics = out_dir / "metrics.csv"
        fresh = trainer.iteration == 0 or not metrics.exists()
        fh = open(metrics, "w" if fresh else "a", newline="")
        writer = csv.writer(fh)
        if fresh:
            writer.writerow(METRICS_HEADER)
    log.info("training config:\n%s", config.to_text().rstrip())
    try:
        while trainer.iteration < config.max_iters:
            it = trainer.iteration
            tick = time.perf_counter()
            try:
                loss, lr = trainer.step()
            except NumericFailure:
                if out_dir is not None:
                    trainer.checkpoint().save(out_dir / "diagnostic.fvoc")
                raise
            history.append(loss)
            if writer is not None:
                writer.writerow((it, repr(loss), repr(lr),
                                 f"{1000 * (time.perf_counter() - tick):.3f}"))
            if callback is not None:
                callback(trainer, loss)
            if out_dir is not None and (trainer.iteration % config.checkpoint_every == 0
                                        or trainer.iteration == config.max_iters):
                fh.flush()
                trainer.checkpoint().save(out_dir / f"ckpt_{trainer.iteration:08d}.fvoc")
    finally:
        if fh is not None:
            fh.close()
    return trainer, history


# --- checkpoint file -------------------------------------------------------

def _pack_entry(name, array):
    raw = name.encode("utf-8")
    out = [struct.pack("<H", len(raw)), raw, struct.pack("<B", array.ndim)]
    out.append(struct.pack(f"<{array.ndim}I", *array.shape))
    out.append(np.ascontiguousarray(array, dtype="<f4").tobytes())
    return b"".join(out)


def _exact_words(array):
    """float64 bytes re-read as float32 words (bit-exact carrier), shape ``(*shape, 2)``."""
    array = np.ascontiguousarray(array, dtype="<f8")
    return array.view("<f4").reshape(*array.shape, 2)


def _from_exact_words(words):
    return np.array(words, dtype="<f4").view("<f8").reshape(words.shape[:-1]).astype(np.float64)


@dataclass
class Checkpoint:
    config: Config
    iteration: int = 0
    arrays: dict = field(default_factory=dict)   # name -> float64 ndarray
    rng_state: dict = None
    adam_step: int = 0

    @classmethod
    def capture(cls, model, config, iteration=0, optimizer=None, rng=None):
        arrays = {name: t.detach().cpu().double().numpy().copy()
                  for name, t in model.state_dict().items()}
        step = 0
        if optimizer is not None:
            names = dict((id(p), n) for n, p in model.named_parameters())
            for p in model.parameters():
                state = optimizer.state.get(p)
                if not state:
                    continue
                step = int(float(state["step"]))
                arrays[f"adam.exp_avg.{names[id(p)]}"] = state["exp_avg"].cpu().double().numpy().copy()
                arrays[f"adam.exp_avg_sq.{names[id(p)]}"] = state["exp_avg_sq"].cpu().double().numpy().copy()
        rng_state = rng.bit_generator.state if rng is not None else None
        return cls(config, iteration, arrays, rng_state, step)

    def build_model(self, dtype=numcore.DEFAULT_DTYPE):
        model = FlowModel.build(self.config, dtype=dtype)
        state = {}
        for name, ref in model.state_dict().items():
            if name not in self.arrays:
                raise ConfigurationError(f"checkpoint lacks weight {name!r}")
            arr = self.arrays[name]
            if tuple(arr.shape) != tuple(ref.shape):
                raise ConfigurationError(
                    f"weight {name!r} has shape {arr.shape}, model expects {tuple(ref.shape)}")
            state[name] = torch.as_tensor(arr, dtype=dtype)
        model.load_state_dict(state)
        return model

    def restore_optimizer(self, optimizer, model):
        if not self.adam_step:
            return
        for name, p in model.named_parameters():
            optimizer.state[p] = {
                "step": torch.tensor(float(self.adam_step)),
                "exp_avg": torch.as_tensor(self.arrays[f"adam.exp_avg.{name}"], dtype=p.dtype).clone(),
                "exp_avg_sq": torch.as_tensor(self.arrays[f"adam.exp_avg_sq.{name}"], dtype=p.dtype).clone(),
            }

    def to_bytes(self):
        entries = []
        for name in sorted(self.arrays):
            arr = np.asarray(self.arrays[name], dtype=np.float64)
            entries.append(_pack_entry(name, arr))
            entries.append(_pack_entry(name + EXACT_SUFFIX, _exact_words(arr)))
        text = self.config.to_text()
        text += f"state.iteration={self.iteration}\n"
        text += f"state.adam_step={self.adam_step}\n"
        if self.rng_state is not None:
            text += f"state.rng={json.dumps(self.rng_state, sort_keys=True)}\n"
        text = text.encode("utf-8")
        head = CKPT_MAGIC + struct.pack("<II", CKPT_VERSION, len(entries))
        return head + b"".join(entries) + struct.pack("<I", len(text)) + text

    def save(self, path):
        tmp = f"{path}.tmp"
        with open(tmp, "wb") as fh:
            fh.write(self.to_bytes())
        os.replace(tmp, path)

    @classmethod
    def from_bytes(cls, blob, source="<bytes>"):
        if blob[:4] != CKPT_MAGIC:
            raise InputError(f"{source}: not a checkpoint (magic {blob[:4]!r})")
        try:
            version, count = struct.unpack_from("<II", blob, 4)
            if version != CKPT_VERSION:
                raise InputError(f"{source}: unsupported checkpoint version {version}")
            offset = 12
            plain, exact = {}, {}
            for _ in range(count):
                (n,) = struct.unpack_from("<H", blob, offset)
                name = blob[offset + 2:offset + 2 + n].decode("utf-8")
                offset += 2 + n
                (rank,) = struct.unpack_from("<B", blob, offset)
                dims = struct.unpack_from(f"<{rank}I", blob, offset + 1)
                offset += 1 + 4 * rank
                size = math.prod(dims)
                data = np.frombuffer(blob, dtype="<f4", count=size, offset=offset).reshape(dims)
                offset += 4 * size
                if name.endswith(EXACT_SUFFIX):
                    exact[name[:-len(EXACT_SUFFIX)]] = _from_exact_words(data)
                else:
                    plain[name] = data.astype(np.float64)
            (text_len,) = struct.unpack_from("<I", blob, offset)
            text = blob[offset + 4:offset + 4 + text_len].decode("utf-8")
        except (struct.error, ValueError, UnicodeDecodeError) as exc:
            raise InputError(f"{source}: truncated or corrupt checkpoint ({exc})") from exc
        pairs = parse_key_values(text)
        state = {k[6:]: pairs.pop(k) for k in list(pairs) if k.startswith("state.")}
        config = Config.from_pairs(pairs)
        arrays = {**plain, **exact}
        rng_state = json.loads(state["rng"]) if "rng" in state else None
        return cls(config, int(state.get("iteration", 0)), arrays, rng_state,
                   int(state.get("adam_step", 0)))

    @classmethod
    def load(cls, path):
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read(), source=str(path))


def save_checkpoint(path, model, config, iteration=0, optimizer=None, rng=None):
    Checkpoint.capture(model, config, iteration, optimizer, rng).save(path)


def load_model(path, dtype=numcore.DEFAULT_DTYPE):
    ckpt = Checkpoint.load(path)
    return ckpt.build_model(dtype), ckpt


# --- one-dimensional density fit ------------------------------------------

def fit_constant_coupling(samples, n_mix=4, iters=2000, lr=5e-2, seed=0):
    """Fit one coupling layer with input-independent parameters by exact ML.

    Returns the fitted :class:`MixtureParams` (scalar batch shape).
    """
    x = torch.as_tensor(np.asarray(samples), dtype=torch.float64)
    gen = torch.Generator().manual_seed(seed)
    raw = (0.1 * torch.randn(2 + 3 * n_mix, generator=gen, dtype=torch.float64)).requires_grad_()
    opt = torch.optim.Adam([raw], lr=lr, foreach=False)
    for _ in range(iters):
        p = MixtureParams.from_raw(raw, n_mix, dim=0)
        z, logdet = coupling_forward(x, p)
        loss = -(logdet + gaussian_log_density(z)).mean()
        (grad,) = numcore.backward(loss, [raw])
        raw.grad = grad
        opt.step()
    return MixtureParams.from_raw(raw.detach(), n_mix, dim=0)


def sample_constant_coupling(params, n, seed=0, tol=1e-10):
    """Draw ``n`` samples by inverting the coupling on standard-normal noise."""
    gen = torch.Generator().manual_seed(seed)
    z = torch.randn(n, generator=gen, dtype=torch.float64)
    expanded = params.map(lambda t: t.expand(n, *t.shape))
    return coupling_inverse(z, expanded, tol=tol).numpy()
