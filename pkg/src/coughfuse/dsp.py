"""Time-frequency front end and hand-crafted features.

Frames are taken without centering or padding, so a 57,600-sample segment with
a 512-sample Hann window and a 256-sample hop yields exactly 224 frames.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.fft import dct

from .errors import ShapeError

LOG_FLOOR = 1e-10
MEL_BINS_HANDCRAFTED = 26
MEL_BINS_IMAGE = 128
MEL_BINS_AUDIO = 64
MFCC_COEFFS = 14


@dataclass(frozen=True)
class StftConfig:
    window_len: int = 512
    hop: int = 256
    sample_rate_hz: int = 16_000

    def __post_init__(self):
        if self.window_len <= 0 or self.window_len & (self.window_len - 1):
            raise ValueError(f"window_len must be a power of two, got {self.window_len}")
        if not 0 < self.hop <= self.window_len:
            raise ValueError(f"hop must be in (0, window_len], got {self.hop}")

    @property
    def fft_len(self) -> int:
        return self.window_len

    @property
    def n_bins(self) -> int:
        return self.window_len // 2 + 1

    def n_frames(self, n_samples: int) -> int:
        return (n_samples - self.window_len) // self.hop + 1


@dataclass(frozen=True)
class LogMelSpectrogram:
    values: np.ndarray  # [n_mels, n_frames]
    frame_hop_s: float

    @property
    def n_mels(self) -> int:
        return self.values.shape[0]

    @property
    def n_frames(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class FeatureVector:
    values: np.ndarray
    lld_names: tuple
    functional_names: tuple

    def index(self, lld: str, functional: str) -> int:
        return self.lld_names.index(lld) * len(self.functional_names) + self.functional_names.index(functional)

    @property
    def layout(self) -> dict:
        """(lld, functional) -> flat index."""
        nf = len(self.functional_names)
        return {(l, f): i * nf + j
                for i, l in enumerate(self.lld_names)
                for j, f in enumerate(self.functional_names)}

    @property
    def names(self) -> list[str]:
        return [f"{l}__{f}" for l in self.lld_names for f in self.functional_names]


def _samples(segment) -> np.ndarray:
    return np.asarray(getattr(segment, "samples", segment), dtype=np.float64)


def stft_power(segment, cfg: StftConfig = StftConfig()) -> np.ndarray:
    """Hann-windowed |X|^2, shape [window_len/2 + 1, n_frames]."""
    x = _samples(segment)
    if x.ndim != 1 or x.size < cfg.window_len:
        raise ShapeError(f"need at least {cfg.window_len} samples, got {x.size}")
    frames = sliding_window_view(x, cfg.window_len)[::cfg.hop]
    spec = np.fft.rfft(frames * np.hanning(cfg.window_len + 1)[:-1], n=cfg.fft_len, axis=1)
    return (spec.real ** 2 + spec.imag ** 2).T


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_centers(n_mels: int, fmin_hz: float, fmax_hz: float) -> np.ndarray:
    """Centre frequencies in Hz, equally spaced on the HTK Mel scale."""
    edges = np.linspace(hz_to_mel(fmin_hz), hz_to_mel(fmax_hz), n_mels + 2)
    return mel_to_hz(edges[1:-1])


def mel_filterbank(n_mels: int, fft_bins: int = 257, sample_rate_hz: int = 16_000,
                   fmin_hz: float = 0.0, fmax_hz: float | None = None) -> np.ndarray:
    """Triangular HTK-Mel filters sampled on the rfft bin grid, each scaled to unit peak.

    Filters narrower than one FFT bin would otherwise be empty; those get a
    single unit weight on the bin nearest their centre.
    """
    if fmax_hz is None:
        fmax_hz = sample_rate_hz / 2.0
    if n_mels < 1:
        raise ValueError("n_mels must be >= 1")
    if not 0.0 <= fmin_hz < fmax_hz <= sample_rate_hz / 2.0:
        raise ValueError(f"invalid frequency range [{fmin_hz}, {fmax_hz}] for rate {sample_rate_hz}")
    n_fft = 2 * (fft_bins - 1)
    freqs = np.arange(fft_bins) * sample_rate_hz / n_fft
    pts = mel_to_hz(np.linspace(hz_to_mel(fmin_hz), hz_to_mel(fmax_hz), n_mels + 2))
    lo, ctr, hi = pts[:-2, None], pts[1:-1, None], pts[2:, None]
    up = (freqs - lo) / (ctr - lo)
    down = (hi - freqs) / (hi - ctr)
    fb = np.maximum(0.0, np.minimum(up, down))
    for m in range(n_mels):
        peak = fb[m].max()
        if peak > 0:
            fb[m] /= peak
        else:
            fb[m, int(np.argmin(np.abs(freqs - ctr[m, 0])))] = 1.0
    return fb


_FB_CACHE: dict = {}


def _cached_filterbank(n_mels, cfg: StftConfig):
    key = (n_mels, cfg.n_bins, cfg.sample_rate_hz)
    fb = _FB_CACHE.get(key)
    if fb is None:
        fb = mel_filterbank(n_mels, cfg.n_bins, cfg.sample_rate_hz)
        fb.setflags(write=False)
        _FB_CACHE[key] = fb
    return fb


def log_mel(segment, cfg: StftConfig = StftConfig(), n_mels: int = MEL_BINS_AUDIO) -> LogMelSpectrogram:
    """ln(filterbank @ power + 1e-10), shape [n_mels, n_frames]."""
    return log_mel_from_power(stft_power(segment, cfg), cfg, n_mels)


def log_mel_from_power(power, cfg: StftConfig, n_mels: int) -> LogMelSpectrogram:
    fb = _cached_filterbank(n_mels, cfg)
    return LogMelSpectrogram(np.log(fb @ power + LOG_FLOOR), cfg.hop / cfg.sample_rate_hz)


def mfcc(logmel, n_coeffs: int = MFCC_COEFFS, n_mels: int = MEL_BINS_HANDCRAFTED) -> np.ndarray:
    """Orthonormal DCT-II over the Mel axis, coefficients 0..n_coeffs-1 (c0 included)."""
    values = logmel.values if isinstance(logmel, LogMelSpectrogram) else np.asarray(logmel, dtype=np.float64)
    if values.ndim != 2 or values.shape[0] != n_mels:
        raise ShapeError(f"expected {n_mels} Mel bins, got shape {values.shape}")
    return dct(values, type=2, norm="ortho", axis=0)[:n_coeffs]


# --- functionals -----------------------------------------------------------

def _regression(x):
    n = x.shape[1]
    t = np.arange(n, dtype=np.float64)
    tc = t - t.mean()
    slope = (x - x.mean(axis=1, keepdims=True)) @ tc / (tc @ tc)
    offset = x.mean(axis=1) - slope * t.mean()
    resid = x - (offset[:, None] + slope[:, None] * t)
    return slope, offset, (resid ** 2).mean(axis=1)


def _moments(x):
    c = x - x.mean(axis=1, keepdims=True)
    m2 = (c ** 2).mean(axis=1)
    m3 = (c ** 3).mean(axis=1)
    m4 = (c ** 4).mean(axis=1)
    flat = np.ptp(x, axis=1) == 0
    safe = np.where(flat, 1.0, m2)
    skew = np.where(flat, 0.0, m3 / safe ** 1.5)
    kurt = np.where(flat, 0.0, m4 / safe ** 2)
    return skew, kurt


def _mean_crossing_rate(x):
    c = x - x.mean(axis=1, keepdims=True)
    sign = c > 0
    rate = (sign[:, 1:] != sign[:, :-1]).sum(axis=1) / (x.shape[1] - 1)
    return np.where(np.ptp(x, axis=1) == 0, 0.0, rate)


def _default_catalog():
    def pct(q):
        return lambda x: np.percentile(x, q, axis=1)

    def reg(i):
        return lambda x: _regression(x)[i]

    return {
        "mean": lambda x: x.mean(axis=1),
        "std": lambda x: x.std(axis=1),
        "min": lambda x: x.min(axis=1),
        "max": lambda x: x.max(axis=1),
        "range": lambda x: np.ptp(x, axis=1),
        "median": lambda x: np.median(x, axis=1),
        "quartile1": pct(25),
        "quartile3": pct(75),
        "iqr": lambda x: np.percentile(x, 75, axis=1) - np.percentile(x, 25, axis=1),
        "percentile1": pct(1),
        "percentile99": pct(99),
        "skewness": lambda x: _moments(x)[0],
        "kurtosis": lambda x: _moments(x)[1],
        "linreg_slope": reg(0),
        "linreg_offset": reg(1),
        "linreg_mse": reg(2),
        "mean_crossing_rate": _mean_crossing_rate,
        "pos_max": lambda x: np.argmax(x, axis=1) / (x.shape[1] - 1),
        "pos_min": lambda x: np.argmin(x, axis=1) / (x.shape[1] - 1),
        "rms": lambda x: np.sqrt((x ** 2).mean(axis=1)),
    }


DEFAULT_FUNCTIONALS = _default_catalog()


def apply_functionals(llds, catalog=None, lld_names=None) -> FeatureVector:
    """Summarize each LLD row with every functional; lld-major layout.

    Skewness and kurtosis (non-excess) are 0 for a constant row; positions
    of max/min are fractions of ``n_frames - 1``.
    """
    x = np.asarray(llds, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeError(f"llds must be 2-D, got shape {x.shape}")
    if x.shape[1] < 2:
        raise ShapeError("functionals need at least 2 frames")
    catalog = DEFAULT_FUNCTIONALS if catalog is None else catalog
    if lld_names is None:
        lld_names = tuple(f"lld{i}" for i in range(x.shape[0]))
    cols = np.stack([np.asarray(fn(x), dtype=np.float64) for fn in catalog.values()], axis=1)
    return FeatureVector(cols.reshape(-1), tuple(lld_names), tuple(catalog))


def handcrafted_features(segment, kind: str = "logmel", cfg: StftConfig = StftConfig(),
                         n_mels: int = MEL_BINS_HANDCRAFTED, n_coeffs: int = MFCC_COEFFS,
                         catalog=None) -> FeatureVector:
    """Functionals over 26 log-Mel bands (``logmel``) or 14 MFCCs (``mfcc``)."""
    lm = log_mel(segment, cfg, n_mels)
    if kind == "logmel":
        return apply_functionals(lm.values, catalog, [f"logmel{i}" for i in range(n_mels)])
    if kind == "mfcc":
        return apply_functionals(mfcc(lm, n_coeffs, n_mels), catalog, [f"mfcc{i}" for i in range(n_coeffs)])
    raise ValueError(f"unknown hand-crafted feature set {kind!r}")
