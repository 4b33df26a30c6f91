"""scikit-learn style wrapper: a waveform density estimator with fit / score / transform."""
import math

import numpy as np
import torch
from sklearn.base import BaseEstimator, DensityMixin
from sklearn.utils.validation import check_is_fitted

from .conditioning import mel_extract, normalize_audio
from .config import Config
from .errors import InputError
from .flowstack import FlowModel, flow_forward, flow_reverse
from .metrics import ll_eval
from .synthesis import default_tol, synthesize
from .training import Checkpoint, Trainer, fixed_chunks, make_utterance, train

CONFIG_FIELDS = tuple(Config.__dataclass_fields__)


def check_waveforms(X):
    """List of 1-D float64 waveforms in [-1, 1); int16 input is rescaled."""
    if isinstance(X, np.ndarray) and X.ndim == 1 and X.dtype != object:
        X = [X]
    out = []
    for i, x in enumerate(X):
        x = np.asarray(x)
        if x.ndim != 1 or x.size == 0:
            raise InputError(f"waveform {i}: expected a non-empty 1-D array, got shape {x.shape}")
        if x.dtype == np.int16:
            x = normalize_audio(x)
        x = x.astype(np.float64)
        if not np.isfinite(x).all():
            raise InputError(f"waveform {i}: contains NaN or Inf")
        out.append(x)
    if not out:
        raise InputError("no waveforms given")
    return out


def check_equal_length(waves, multiple):
    lengths = {w.size for w in waves}
    if len(lengths) != 1:
        raise InputError(f"waveforms must share one length, got {sorted(lengths)}")
    n = lengths.pop()
    if n % multiple:
        raise InputError(f"waveform length {n} is not a multiple of {multiple}")
    return n


class FlowVocoder(DensityMixin, BaseEstimator):
    """Mel-conditioned waveform flow.

    ``fit`` trains on a list of waveforms (float in [-1, 1) or int16 PCM);
    ``score_samples`` returns each waveform's log-likelihood per sample (nats,
    over its whole chunks; a waveform shorter than one chunk is padded and masked);
    ``transform`` maps equal-length waveforms to latent grids and
    ``inverse_transform`` maps them back given the mel frames.
    """

    def __init__(self, sample_rate=22050, n_mels=80, fft=1024, hop=256, win=1024, squeeze_h=16,
                 n_flows=8, n_mix=4, channels=32, n_layers=4, emb_dim=64, cond_channels=32,
                 lr0=2e-4, anneal_every=2000, batch=2, chunk_len=4000, max_iters=10000,
                 checkpoint_every=1000, seed=0, inverse_tol=1e-8, dtype="float64"):
        self.sample_rate = sample_rate
        self.n_mels = n_mels
        self.fft = fft
        self.hop = hop
        self.win = win
        self.squeeze_h = squeeze_h
        self.n_flows = n_flows
        self.n_mix = n_mix
        self.channels = channels
        self.n_layers = n_layers
        self.emb_dim = emb_dim
        self.cond_channels = cond_channels
        self.lr0 = lr0
        self.anneal_every = anneal_every
        self.batch = batch
        self.chunk_len = chunk_len
        self.max_iters = max_iters
        self.checkpoint_every = checkpoint_every
        self.seed = seed
        self.inverse_tol = inverse_tol
        self.dtype = dtype

    def _config(self):
        return Config(**{name: getattr(self, name) for name in CONFIG_FIELDS})

    def _torch_dtype(self):
        if self.dtype not in ("float32", "float64"):
            raise InputError(f"dtype must be 'float32' or 'float64', got {self.dtype!r}")
        return getattr(torch, self.dtype)

    def fit(self, X, y=None, out_dir=None):
        config = self._config()
        utterances = [make_utterance(f"{i:06d}", w, config) for i, w in enumerate(check_waveforms(X))]
        model = FlowModel.build(config, dtype=self._torch_dtype())
        trainer, history = train(utterances, config, out_dir=out_dir,
                                 trainer=Trainer(model, utterances, config))
        self.config_ = config
        self.model_ = trainer.model
        self.n_iter_ = trainer.iteration
        self.loss_curve_ = history
        return self

    def _model64(self):
        if self.model_.dtype == torch.float64:
            return self.model_
        return Checkpoint.capture(self.model_, self.config_).build_model(torch.float64)

    def score_samples(self, X):
        check_is_fitted(self, "model_")
        model = self._model64()
        scores = []
        for w in check_waveforms(X):
            utt = make_utterance("x", w, self.config_)
            chunks, mels, masks = fixed_chunks([utt], self.config_)
            scores.append(ll_eval(chunks, mels, model, masks))
        return np.asarray(scores)

    def score(self, X, y=None):
        return float(math.fsum(self.score_samples(X)) / len(check_waveforms(X)))

    def mel(self, x):
        cfg = self._config() if not hasattr(self, "config_") else self.config_
        return mel_extract(x, cfg.sample_rate, cfg.fft, cfg.hop, cfg.win, cfg.n_mels).frames

    def transform(self, X):
        """Equal-length waveforms -> latent grids ``(n, H, length / H)``."""
        check_is_fitted(self, "model_")
        waves = check_waveforms(X)
        check_equal_length(waves, self.config_.squeeze_h)
        mels = np.stack([self.mel(w) for w in waves])
        with torch.no_grad():
            Z, _ = flow_reverse(np.stack(waves), mels, self.model_)
        return Z.double().numpy()

    def inverse_transform(self, Z, mel):
        """Latent grids plus their mel frames ``(n, n_mels, T)`` -> waveforms."""
        check_is_fitted(self, "model_")
        Z = torch.as_tensor(np.asarray(Z), dtype=self.model_.dtype)
        x = flow_forward(Z, np.asarray(mel), self.model_, tol=self._tol())
        return x.double().numpy()

    def sample(self, mel, temperature=1.0, seed=0):
        """Generate int16 PCM conditioned on ``(n_mels, T)`` mel frames."""
        check_is_fitted(self, "model_")
        return synthesize(mel, self.model_, temperature, seed, self._tol()).pcm

    def _tol(self):
        return max(self.config_.inverse_tol, default_tol(self.model_.dtype))

    def save(self, path):
        check_is_fitted(self, "model_")
        Checkpoint.capture(self.model_, self.config_, self.n_iter_).save(path)

    @classmethod
    def load(cls, path, dtype="float64"):
        ckpt = Checkpoint.load(path)
        est = cls(**{name: getattr(ckpt.config, name) for name in CONFIG_FIELDS}, dtype=dtype)
        est.config_ = ckpt.config
        est.model_ = ckpt.build_model(getattr(torch, dtype))
        est.n_iter_ = ckpt.iteration
        est.loss_curve_ = []
        return est

