"""Audio normalisation, log-mel extraction and the learned 256x mel upsampler."""
import math
import struct
from dataclasses import dataclass

import numpy as np
import torch
from scipy.signal import get_window
from torch import nn
from torch.nn import functional as F

from .errors import ConfigurationError, InputError

PCM_SCALE = 32768.0
LOG_FLOOR = 1e-5
HOP = 256
UPSAMPLE_STRIDES = (16, 16)
UPSAMPLE_KERNEL = (3, 32)  # (mel band, time)
LEAKY_SLOPE = 0.4

MEL_MAGIC = b"FVML"
MEL_VERSION = 1


def normalize_audio(pcm):
    """Scale 16-bit integer samples to floats in [-1, 1)."""
    return np.asarray(pcm, dtype=np.int16).astype(np.float64) / PCM_SCALE


def denormalize_audio(wave):
    """Inverse of :func:`normalize_audio`, rounding and clipping to int16."""
    scaled = np.rint(np.asarray(wave, dtype=np.float64) * PCM_SCALE)
    return np.clip(scaled, -32768, 32767).astype(np.int16)


@dataclass
class MelSpectrogram:
    frames: np.ndarray  # (n_mels, T), natural-log magnitudes
    sample_rate: int
    hop: int = HOP
    fft: int = 1024
    win: int = 1024

    @property
    def n_frames(self):
        return self.frames.shape[1]


def hz_to_mel(freq):
    """Slaney mel scale: linear below 1 kHz, logarithmic above."""
    freq = np.asarray(freq, dtype=np.float64)
    f_sp = 200.0 / 3
    min_log_hz = 1000.0
    min_log_mel = min_log_hz / f_sp
    logstep = math.log(6.4) / 27.0
    return np.where(freq >= min_log_hz,
                    min_log_mel + np.log(np.maximum(freq, min_log_hz) / min_log_hz) / logstep,
                    freq / f_sp)


def mel_to_hz(mels):
    mels = np.asarray(mels, dtype=np.float64)
    f_sp = 200.0 / 3
    min_log_hz = 1000.0
    min_log_mel = min_log_hz / f_sp
    logstep = math.log(6.4) / 27.0
    return np.where(mels >= min_log_mel,
                    min_log_hz * np.exp(logstep * (mels - min_log_mel)),
                    f_sp * mels)


def mel_center_frequencies(n_mels, fmin, fmax):
    return mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))[1:-1]


def mel_filterbank(sample_rate, n_fft, n_mels=80, fmin=0.0, fmax=None):
    """Triangular mel filters with Slaney area normalisation, shape ``(n_mels, n_fft//2+1)``."""
    fmax = sample_rate / 2 if fmax is None else fmax
    fft_freqs = np.fft.rfftfreq(n_fft, 1.0 / sample_rate)
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    widths = np.diff(edges)
    ramps = edges[:, None] - fft_freqs[None, :]
    lower = -ramps[:-2] / widths[:-1, None]
    upper = ramps[2:] / widths[1:, None]
    weights = np.maximum(0.0, np.minimum(lower, upper))
    weights *= (2.0 / (edges[2:] - edges[:-2]))[:, None]
    return weights


def n_frames_for(length, hop=HOP):
    return int(math.ceil(length / hop))


def stft_magnitude(wave, n_fft=1024, hop=HOP, win=1024):
    """Hamming-windowed, reflect-centred STFT magnitude, ``(n_fft//2+1, ceil(len/hop))``."""
    wave = np.asarray(wave, dtype=np.float64)
    if wave.ndim != 1 or wave.size == 0:
        raise InputError("expected a non-empty 1-D waveform")
    if win > n_fft:
        raise ConfigurationError("window longer than FFT size")
    n_frames = n_frames_for(wave.size, hop)
    half = n_fft // 2
    mode = "reflect" if wave.size > half else "constant"
    padded = np.pad(wave, (half, half), mode=mode)
    need = (n_frames - 1) * hop + n_fft
    if padded.size < need:
        padded = np.pad(padded, (0, need - padded.size))
    window = np.zeros(n_fft)
    offset = (n_fft - win) // 2
    window[offset:offset + win] = get_window("hamming", win, fftbins=True)
    frames = np.lib.stride_tricks.sliding_window_view(padded, n_fft)[::hop][:n_frames]
    return np.abs(np.fft.rfft(frames * window, axis=-1)).T


_FB_CACHE = {}


def mel_extract(wave, sample_rate=22050, n_fft=1024, hop=HOP, win=1024, n_mels=80,
                fmin=0.0, fmax=None):
    """80-band natural-log mel spectrogram with a ``1e-5`` floor."""
    key = (sample_rate, n_fft, n_mels, fmin, fmax)
    if key not in _FB_CACHE:
        _FB_CACHE[key] = mel_filterbank(sample_rate, n_fft, n_mels, fmin, fmax)
    mag = stft_magnitude(wave, n_fft, hop, win)
    frames = np.log(np.maximum(_FB_CACHE[key] @ mag, LOG_FLOOR))
    return MelSpectrogram(frames, sample_rate, hop, n_fft, win)


def mel_slice(frames, start, length, hop=HOP):
    """Frames covering samples ``[start, start + length)``; ``start`` must be hop-aligned."""
    if start % hop:
        raise InputError(f"chunk start {start} is not a multiple of hop {hop}")
    first = start // hop
    count = n_frames_for(length, hop)
    out = frames[..., first:first + count]
    if out.shape[-1] < count:
        raise InputError("mel frames do not cover the requested chunk")
    return out


class Upsampler(nn.Module):
    """Two strided transposed convolutions over the (band, time) plane.

    Each layer multiplies the time axis by 16 exactly; a 1x1 projection
    then maps the mel bands to ``cond_channels`` per-sample features.
    """

    def __init__(self, n_mels=80, cond_channels=32):
        super().__init__()
        kb, kt = UPSAMPLE_KERNEL
        self.n_mels = n_mels
        self.cond_channels = cond_channels
        self.layers = nn.ModuleList(
            nn.ConvTranspose2d(1, 1, (kb, kt), stride=(1, s), padding=(kb // 2, (kt - s) // 2))
            for s in UPSAMPLE_STRIDES)
        self.proj = nn.Conv1d(n_mels, cond_channels, 1)

    @property
    def factor(self):
        return math.prod(UPSAMPLE_STRIDES)

    def forward(self, mel):
        """``(B, n_mels, T)`` -> ``(B, cond_channels, 256 * T)``."""
        if mel.dim() != 3 or mel.shape[1] != self.n_mels:
            raise ConfigurationError(
                f"expected mel of shape (B, {self.n_mels}, T), got {tuple(mel.shape)}")
        n_out = mel.shape[-1] * self.factor
        x = mel.unsqueeze(1)
        for layer in self.layers:
            x = F.leaky_relu(layer(x), LEAKY_SLOPE)
        x = x.squeeze(1)[..., :n_out]
        return self.proj(x)


def upsample(mel, upsampler, length=None):
    """Per-sample conditioner for a mel (array or tensor, ``(n_mels, T)`` or batched).

    The result covers ``256 * T`` samples, optionally cropped to ``length``.
    """
    param = next(upsampler.parameters())
    frames = mel.frames if isinstance(mel, MelSpectrogram) else mel
    frames = torch.as_tensor(np.asarray(frames) if not torch.is_tensor(frames) else frames,
                             dtype=param.dtype)
    single = frames.dim() == 2
    if single:
        frames = frames.unsqueeze(0)
    cond = upsampler(frames)
    if length is not None:
        if length > cond.shape[-1]:
            raise ConfigurationError(f"conditioner covers {cond.shape[-1]} samples, need {length}")
        cond = cond[..., :length]
    return cond[0] if single else cond


def write_mel_cache(path, frames):
    """Write ``(n_mels, T)`` frames as an FVML file (float32, frame-major)."""
    frames = np.asarray(frames, dtype=np.float64)
    bands, n = frames.shape
    with open(path, "wb") as fh:
        fh.write(MEL_MAGIC)
        fh.write(struct.pack("<III", MEL_VERSION, n, bands))
        fh.write(np.ascontiguousarray(frames.T, dtype="<f4").tobytes())


def read_mel_cache(path):
    """Read an FVML file back to ``(n_mels, T)`` float64 frames."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != MEL_MAGIC:
        raise InputError(f"{path}: bad mel cache magic {blob[:4]!r}")
    version, n, bands = struct.unpack_from("<III", blob, 4)
    if version != MEL_VERSION:
        raise InputError(f"{path}: unsupported mel cache version {version}")
    data = np.frombuffer(blob, dtype="<f4", offset=16)
    if data.size != n * bands:
        raise InputError(f"{path}: expected {n * bands} values, found {data.size}")
    return data.reshape(n, bands).T.astype(np.float64)
