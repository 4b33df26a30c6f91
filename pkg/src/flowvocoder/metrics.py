"""Objective evaluation: mel-cepstral distortion, F0 error in cents, per-dim log-likelihood."""
import csv
import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
from scipy.fft import dct, irfft, rfft

from .conditioning import mel_extract
from .errors import InputError
from .training import chunk_log_likelihood

MCD_ORDER = 13
MCD_SCALE = 10.0 / math.log(10.0)

F0_FRAME = 1024
F0_HOP = 256
F0_MIN = 70.0
F0_MAX = 800.0
VOICING_THRESHOLD = 0.45
SILENCE_RMS = 1e-4


def mel_cepstrum(log_mel, order=MCD_ORDER):
    """Coefficients ``1..order`` of the orthonormal DCT-II of each log-mel frame: ``(order, T)``."""
    return dct(np.asarray(log_mel, dtype=np.float64), type=2, norm="ortho", axis=0)[1:order + 1]


def mcd_from_cepstra(ref, syn):
    """Mean over frames of ``(10/ln 10) * sqrt(2 * sum_m (c_r - c_s)^2)``."""
    ref = np.asarray(ref, dtype=np.float64)
    syn = np.asarray(syn, dtype=np.float64)
    frames = min(ref.shape[1], syn.shape[1])
    if frames < 1:
        raise InputError("no common frame to compare")
    diff = ref[:, :frames] - syn[:, :frames]
    return float(np.mean(MCD_SCALE * np.sqrt(2.0 * np.sum(diff ** 2, axis=0))))


def mcd(ref, syn, sample_rate=22050, **mel_kwargs):
    """MCD in dB between two time-aligned waveforms (trimmed to the shorter)."""
    c_ref = mel_cepstrum(mel_extract(ref, sample_rate, **mel_kwargs).frames)
    c_syn = mel_cepstrum(mel_extract(syn, sample_rate, **mel_kwargs).frames)
    return mcd_from_cepstra(c_ref, c_syn)


def frame_signal(wave, frame=F0_FRAME, hop=F0_HOP):
    """Centered, zero-padded frames; frame ``t`` is centred on sample ``t * hop``."""
    wave = np.asarray(wave, dtype=np.float64)
    if wave.ndim != 1:
        raise InputError("expected a mono waveform")
    n_frames = max(1, -(-wave.size // hop))
    padded = np.pad(wave, (frame // 2, frame // 2 + n_frames * hop))
    idx = np.arange(frame)[None, :] + hop * np.arange(n_frames)[:, None]
    return padded[idx]


def normalized_autocorrelation(frames, max_lag):
    """``r[t, tau] = sum x[n] x[n+tau] / sqrt(sum x[n]^2 * sum x[n+tau]^2)`` over the overlap."""
    N = frames.shape[1]
    size = 1 << (2 * N - 1).bit_length()
    spec = rfft(frames, size, axis=1)
    num = irfft(spec * np.conj(spec), size, axis=1)[:, :max_lag + 1]
    energy = np.concatenate([np.zeros((frames.shape[0], 1)), np.cumsum(frames ** 2, axis=1)], axis=1)
    lags = np.arange(max_lag + 1)
    head = energy[:, N - lags]                       # sum of x[0 .. N-tau-1]^2
    tail = energy[:, N:N + 1] - energy[:, lags]      # sum of x[tau .. N-1]^2
    denom = np.sqrt(head * tail)
    with np.errstate(invalid="ignore", divide="ignore"):
        r = np.where(denom > 0, num / denom, 0.0)
    return r


def f0_track(wave, sample_rate, frame=F0_FRAME, hop=F0_HOP, fmin=F0_MIN, fmax=F0_MAX,
             threshold=VOICING_THRESHOLD):
    """Per-frame F0 in Hz (0 where unvoiced) from the normalised autocorrelation.

    The chosen lag is the first local maximum reaching 95% of the best
    in-range peak (guards against octave-down errors), refined by a parabola
    through its neighbours. A frame is voiced when that peak reaches
    ``threshold``.
    """
    frames = frame_signal(wave, frame, hop)
    frames = frames - frames.mean(axis=1, keepdims=True)
    lo = max(1, int(math.floor(sample_rate / fmax)))
    hi = min(frame - 2, int(math.ceil(sample_rate / fmin)))
    r = normalized_autocorrelation(frames, hi + 1)
    rms = np.sqrt(np.mean(frames ** 2, axis=1))
    f0 = np.zeros(frames.shape[0])
    for t in range(frames.shape[0]):
        if rms[t] < SILENCE_RMS:
            continue
        seg = r[t]
        peaks = [k for k in range(lo, hi + 1) if seg[k] >= seg[k - 1] and seg[k] > seg[k + 1]]
        if not peaks:
            continue
        best = max(seg[k] for k in peaks)
        if best < threshold:
            continue
        k = next(k for k in peaks if seg[k] >= 0.95 * best)
        a, b, c = seg[k - 1], seg[k], seg[k + 1]
        curve = a - 2 * b + c
        shift = 0.5 * (a - c) / curve if curve < 0 else 0.0
        f0[t] = sample_rate / (k + shift)
    return f0


def f0_contour(wave, sample_rate, **kwargs):
    """``(time_s, f0_hz)`` rows, one per analysis frame."""
    f0 = f0_track(wave, sample_rate, **kwargs)
    hop = kwargs.get("hop", F0_HOP)
    return [(t * hop / sample_rate, float(v)) for t, v in enumerate(f0)]


def write_f0_contour(path, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(("time_s", "f0_hz"))
        for t, v in rows:
            writer.writerow((f"{t:.6f}", f"{v:.4f}"))


def rmse_f0_from_tracks(f0_ref, f0_syn):
    """RMS of ``1200 * log2(F_r / F_s)`` over frames voiced in both; None if there are none."""
    n = min(len(f0_ref), len(f0_syn))
    ref = np.asarray(f0_ref[:n], dtype=np.float64)
    syn = np.asarray(f0_syn[:n], dtype=np.float64)
    both = (ref > 0) & (syn > 0)
    if not both.any():
        return None
    cents = 1200.0 * (np.log2(ref[both]) - np.log2(syn[both]))
    return float(np.sqrt(np.mean(cents ** 2)))


def rmse_f0(ref, syn, sample_rate=22050, **kwargs):
    return rmse_f0_from_tracks(f0_track(ref, sample_rate, **kwargs),
                               f0_track(syn, sample_rate, **kwargs))


def ll_eval(chunks, mels, model, masks=None, batch=8):
    """Mean over chunks of log-likelihood per (unmasked) dimension, in nats."""
    chunks = np.asarray(chunks)
    if chunks.ndim == 1:
        chunks = chunks[None]
        mels = np.asarray(mels)[None]
    if chunks.shape[0] == 0:
        raise InputError("no evaluation chunks")
    values = []
    with torch.no_grad():
        for start in range(0, chunks.shape[0], batch):
            sl = slice(start, start + batch)
            ll, count = chunk_log_likelihood(chunks[sl], np.asarray(mels)[sl], model,
                                             None if masks is None else np.asarray(masks)[sl])
            values.extend((ll / count).tolist())
    return math.fsum(values) / len(values)


def mean_stderr(values):
    values = np.asarray([v for v in values if v is not None], dtype=np.float64)
    if values.size == 0:
        return None, None
    err = float(values.std(ddof=1) / math.sqrt(values.size)) if values.size > 1 else 0.0
    return float(values.mean()), err


@dataclass
class EvalReport:
    mcd_db: float
    mcd_stderr: float
    rmse_f0_cents: float        # None when no utterance had a commonly voiced frame
    rmse_f0_stderr: float
    ll_per_dim: float
    rtf: float
    n_utterances: int
    n_f0_undefined: int

    @classmethod
    def from_rows(cls, rows, ll_per_dim):
        mcd_mean, mcd_err = mean_stderr(r["mcd_db"] for r in rows)
        f0_mean, f0_err = mean_stderr(r["rmse_f0_cents"] for r in rows)
        rtf_mean, _ = mean_stderr(r["rtf"] for r in rows)
        undefined = sum(r["rmse_f0_cents"] is None for r in rows)
        return cls(mcd_mean, mcd_err, f0_mean, f0_err, ll_per_dim, rtf_mean, len(rows), undefined)

    def summary(self):
        def fmt(mean, err):
            return "undefined" if mean is None else f"{mean:.4f} ± {err:.4f}"
        return "\n".join([
            f"utterances      {self.n_utterances}",
            f"MCD [dB]        {fmt(self.mcd_db, self.mcd_stderr)}",
            f"RMSE-F0 [cent]  {fmt(self.rmse_f0_cents, self.rmse_f0_stderr)}"
            + (f"  ({self.n_f0_undefined} undefined)" if self.n_f0_undefined else ""),
            f"LL [nats/dim]   {self.ll_per_dim:.4f}",
            f"RTF             {self.rtf:.4f}",
        ])

    def write_csv(self, target, rows=()):
        """Per-utterance rows followed by a ``mean`` row; ``target`` is a path or open file."""
        if not hasattr(target, "write"):
            with open(target, "w", newline="") as fh:
                return self.write_csv(fh, rows)
        fields = ("name", "mcd_db", "rmse_f0_cents", "ll_per_dim", "rtf")
        writer = csv.writer(target)
        writer.writerow(fields)
        for r in rows:
            writer.writerow([_cell(r.get(f)) for f in fields])
        d = asdict(self)
        writer.writerow(["mean", _cell(d["mcd_db"]), _cell(d["rmse_f0_cents"]),
                         _cell(d["ll_per_dim"]), _cell(d["rtf"])])


def _cell(v):
    if v is None:
        return "undefined"
    return v if isinstance(v, str) else repr(float(v))


def evaluate(utterances, model, n=None, seed=0, temperature=1.0, tol=None):
    """Analysis-synthesis evaluation of a seeded draw of ``n`` utterances.

    ``utterances`` are :class:`flowvocoder.training.Utterance` objects.
    Returns ``(EvalReport, per-utterance rows)``.
    """
    from .synthesis import synthesize
    from .training import fixed_chunks

    if not utterances:
        raise InputError("no reference utterances")
    total = len(utterances)
    n = total if n is None else n
    if n < 1:
        raise InputError(f"--n must be at least 1, got {n}")
    n = min(n, total)
    picks = sorted(np.random.default_rng(seed).choice(total, size=n, replace=False).tolist())
    cfg = model.config
    rows = []
    for j, idx in enumerate(picks):
        utt = utterances[idx]
        ref = utt.audio[:utt.length]
        T = -(-utt.length // cfg.hop)
        result = synthesize(utt.mel[:, :T], model, temperature, seed + j, tol)
        syn = result.wave[:utt.length]
        chunks, mels, masks = fixed_chunks([utt], cfg)
        rows.append(dict(name=utt.name,
                         mcd_db=mcd(ref, syn, cfg.sample_rate, n_fft=cfg.fft, hop=cfg.hop,
                                    win=cfg.win, n_mels=cfg.n_mels),
                         rmse_f0_cents=rmse_f0(ref, syn, cfg.sample_rate),
                         ll_per_dim=ll_eval(chunks, mels, model, masks),
                         rtf=result.rtf))
    ll = math.fsum(r["ll_per_dim"] for r in rows) / len(rows)
    return EvalReport.from_rows(rows, ll), rows
