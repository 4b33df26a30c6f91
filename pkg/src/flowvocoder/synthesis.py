"""Mel-conditioned generation: sample a latent grid, invert the flow, write PCM16."""
import csv
import time
from dataclasses import dataclass, field

import numpy as np
import torch

from .conditioning import denormalize_audio, mel_extract, normalize_audio, read_mel_cache
from .errors import ConfigurationError, InputError
from .flowstack import flow_forward
from .wavio import read_wav, write_wav

TIMING_STAGES = ("upsample", "estimator", "inversion", "total")


def default_tol(dtype):
    return 1e-8 if dtype == torch.float64 else 1e-6


@dataclass
class SynthesisResult:
    pcm: np.ndarray                 # int16 samples
    wave: np.ndarray                # float waveform before quantisation
    latent: torch.Tensor            # the H x w noise grid that was inverted
    sample_rate: int
    timings: dict = field(default_factory=dict)   # stage -> seconds

    @property
    def duration(self):
        return self.pcm.size / self.sample_rate

    @property
    def rtf(self):
        return rtf(self.timings["total"], self.duration)


def sample_latent(n_frames, model, temperature=1.0, seed=0):
    """Draw ``Z ~ N(0, temperature^2)`` of shape ``H x (hop * n_frames / H)``."""
    if temperature < 0 or not np.isfinite(temperature):
        raise InputError(f"temperature must be a finite value >= 0, got {temperature}")
    H = model.squeeze_h
    n = model.config.hop * n_frames
    gen = torch.Generator().manual_seed(int(seed))
    Z = torch.randn(H, n // H, generator=gen, dtype=torch.float64)
    return (Z * temperature).to(model.dtype)


def synthesize(mel, model, temperature=1.0, seed=0, tol=None):
    """Generate ``hop * T`` PCM16 samples from ``(n_mels, T)`` mel frames."""
    mel = np.asarray(mel, dtype=np.float64)
    if mel.ndim != 2 or mel.shape[1] < 1:
        raise InputError(f"mel must be (n_mels, T) with T >= 1, got shape {mel.shape}")
    if mel.shape[0] != model.config.n_mels:
        raise ConfigurationError(
            f"mel has {mel.shape[0]} bands, model expects {model.config.n_mels}")
    tol = default_tol(model.dtype) if tol is None else tol
    Z = sample_latent(mel.shape[1], model, temperature, seed)
    timings = {}
    tick = time.perf_counter()
    x = flow_forward(Z, mel, model, tol=tol, timings=timings)
    timings["total"] = time.perf_counter() - tick
    wave = x.detach().double().numpy()
    return SynthesisResult(denormalize_audio(wave), wave, Z, model.config.sample_rate, timings)


def rtf(seconds, duration):
    """Real-time factor: synthesis wall time over audio duration."""
    if duration <= 0:
        raise InputError("audio duration must be positive")
    return seconds / duration


def load_mel_source(model, mel_path=None, wav_path=None):
    """Mel frames from an FVML cache or computed from a reference WAV."""
    if (mel_path is None) == (wav_path is None):
        raise InputError("give exactly one of a mel file or a reference WAV")
    cfg = model.config
    if mel_path is not None:
        return read_mel_cache(mel_path)
    pcm, rate = read_wav(wav_path)
    if rate != cfg.sample_rate:
        raise ConfigurationError(f"{wav_path}: sample rate {rate} != model's {cfg.sample_rate}")
    return mel_extract(normalize_audio(pcm), cfg.sample_rate, cfg.fft, cfg.hop, cfg.win,
                       cfg.n_mels).frames


def write_timings(path, timings):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(("stage", "ms"))
        for stage in TIMING_STAGES:
            if stage in timings:
                writer.writerow((stage, f"{1000 * timings[stage]:.3f}"))


def save_result(result, wav_path, timing_path=None):
    write_wav(wav_path, result.pcm, result.sample_rate)
    if timing_path is not None:
        write_timings(timing_path, result.timings)

