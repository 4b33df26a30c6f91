"""Mono PCM16 RIFF/WAV reading and writing."""
import wave

import numpy as np

from .errors import InputError


def read_wav(path):
    """Return ``(samples int16 array, sample_rate)``; multi-channel input keeps channel 0."""
    try:
        with wave.open(str(path), "rb") as fh:
            width = fh.getsampwidth()
            channels = fh.getnchannels()
            rate = fh.getframerate()
            raw = fh.readframes(fh.getnframes())
    except (wave.Error, EOFError) as exc:
        raise InputError(f"{path}: not a readable WAV file ({exc})") from exc
    if width != 2:
        raise InputError(f"{path}: only 16-bit PCM is supported (got {8 * width}-bit)")
    data = np.frombuffer(raw, dtype="<i2")
    if channels > 1:
        data = data[: len(data) // channels * channels].reshape(-1, channels)[:, 0]
    return data.astype(np.int16), rate


def write_wav(path, samples, sample_rate):
    samples = np.asarray(samples)
    if samples.dtype != np.int16:
        raise InputError("write_wav expects int16 samples")
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(int(sample_rate))
        fh.writeframes(samples.astype("<i2").tobytes())
