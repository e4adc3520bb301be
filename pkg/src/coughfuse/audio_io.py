"""Audio ingestion: WAV decoding, band-limited resampling, fixed-length
segmentation and the ``path,label,fold`` dataset manifest."""

from __future__ import annotations

import csv
import math
import os
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.io import wavfile
from scipy.signal import upfirdn

from .errors import AudioFormatError, ManifestError

PIPELINE_RATE_HZ = 16_000
SEGMENT_LEN = 57_600  # 3.6 s at 16 kHz
N_FOLDS = 5


@dataclass(frozen=True)
class AudioClip:
    samples: np.ndarray
    sample_rate_hz: int
    source_id: str = ""

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1 or samples.size == 0:
            raise AudioFormatError(f"{self.source_id or 'clip'}: empty or non-1-D audio")
        if not np.all(np.isfinite(samples)):
            raise AudioFormatError(f"{self.source_id or 'clip'}: non-finite samples")
        if int(self.sample_rate_hz) <= 0:
            raise AudioFormatError(f"invalid sample rate {self.sample_rate_hz}")
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "sample_rate_hz", int(self.sample_rate_hz))

    def __len__(self):
        return self.samples.size

    @property
    def duration_s(self) -> float:
        return self.samples.size / self.sample_rate_hz


@dataclass(frozen=True)
class Segment:
    samples: np.ndarray
    parent_id: str
    index: int


@dataclass(frozen=True)
class ManifestEntry:
    path: str
    label: int
    fold: int
    root: str = ""

    @property
    def file(self) -> str:
        """Path usable for opening; relative entries resolve against the manifest directory."""
        if not self.root or os.path.isabs(self.path):
            return self.path
        return os.path.join(self.root, self.path)


def decode_wav(path) -> AudioClip:
    """Read a PCM (8/16/24/32-bit int) or 32/64-bit float WAV as a mono clip in [-1, 1]."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such audio file: {path}")
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", wavfile.WavFileWarning)
            rate, data = wavfile.read(path)
    except ValueError as exc:
        raise AudioFormatError(f"{path}: {exc}") from exc

    if data.dtype == np.uint8:
        x = (data.astype(np.float64) - 128.0) / 128.0
    elif data.dtype == np.int16:
        x = data.astype(np.float64) / 32768.0
    elif data.dtype == np.int32:
        # scipy left-justifies 24-bit samples into int32
        x = data.astype(np.float64) / 2147483648.0
    elif data.dtype in (np.float32, np.float64):
        x = data.astype(np.float64)
    else:
        raise AudioFormatError(f"{path}: unsupported sample type {data.dtype}")

    if x.ndim == 2:
        x = x.mean(axis=1)
    if x.size == 0:
        raise AudioFormatError(f"{path}: zero-length audio")
    return AudioClip(x, int(rate), source_id=str(path))


def write_wav(path, samples, sample_rate_hz: int) -> None:
    """Write mono 16-bit PCM. Values are clipped to [-1, 1)."""
    pcm = np.clip(np.round(np.asarray(samples) * 32768.0), -32768, 32767).astype("<i2")
    wavfile.write(path, int(sample_rate_hz), pcm)


def _polyphase_filter(up: int, down: int, cutoff_hz: float, src_hz: int,
                      zero_crossings: int = 32, beta: float = 10.0) -> np.ndarray:
    """Kaiser-windowed sinc at the upsampled rate, scaled for an ``up``-fold zero-stuffed input.

    Every polyphase branch is normalized to sum to exactly 1 so that DC passes
    unchanged regardless of residual imaging.
    """
    fs_high = src_hz * up
    fc = cutoff_hz / fs_high  # cycles per high-rate sample
    half = int(math.ceil(zero_crossings / (2.0 * fc)))
    n = np.arange(-half, half + 1, dtype=np.float64)
    h = 2.0 * fc * np.sinc(2.0 * fc * n) * np.kaiser(n.size, beta)
    for phase in range(up):
        branch = h[phase::up]
        h[phase::up] = branch / branch.sum()
    return h


def resample(clip: AudioClip, target_hz: int = PIPELINE_RATE_HZ) -> AudioClip:
    """Band-limited polyphase resampling to ``target_hz``.

    Output length is ``round(len * target / source)``. The anti-aliasing cutoff
    sits at 0.45 x the lower of the two rates.
    """
    target_hz = int(target_hz)
    if target_hz <= 0:
        raise ValueError(f"target rate must be positive, got {target_hz}")
    src = clip.sample_rate_hz
    if src == target_hz:
        return AudioClip(clip.samples.copy(), src, clip.source_id)

    g = math.gcd(src, target_hz)
    up, down = target_hz // g, src // g
    n_out = int(round(clip.samples.size * target_hz / src))
    h = _polyphase_filter(up, down, 0.45 * min(src, target_hz), src)
    delay = (h.size - 1) // 2  # in high-rate samples

    # output k should sit at high-rate index delay + k*down; left-pad the
    # filter so that offset is a whole number of output steps
    pre = (-delay) % down
    h = np.concatenate([np.zeros(pre), h])
    y = upfirdn(h, clip.samples, up, down)
    start = (delay + pre) // down
    y = y[start:start + n_out]
    if y.size < n_out:
        y = np.concatenate([y, np.zeros(n_out - y.size)])
    return AudioClip(y, target_hz, clip.source_id)


def segment(clip: AudioClip, segment_len: int = SEGMENT_LEN) -> list[Segment]:
    """Cut into non-overlapping windows; a short tail is tile-padded.

    The tail (or a clip shorter than ``segment_len``) is repeated cyclically
    and truncated to exactly ``segment_len`` samples.
    """
    if segment_len <= 0:
        raise ValueError("segment_len must be positive")
    x = clip.samples
    if x.size == 0:
        raise AudioFormatError("cannot segment an empty clip")
    out = []
    n_full = x.size // segment_len
    for i in range(n_full):
        out.append(Segment(x[i * segment_len:(i + 1) * segment_len].copy(), clip.source_id, i))
    rest = x[n_full * segment_len:]
    if rest.size:
        out.append(Segment(np.resize(rest, segment_len), clip.source_id, n_full))
    return out


def load_audio(path, target_hz: int = PIPELINE_RATE_HZ) -> AudioClip:
    return resample(decode_wav(path), target_hz)


_LABELS = {"0": 0, "1": 1, "negative": 0, "positive": 1, "n": 0, "p": 1}


def load_manifest(path, n_folds: int = N_FOLDS) -> list[ManifestEntry]:
    """Parse a ``path,label,fold`` CSV. Relative paths resolve against the CSV's directory."""
    path = Path(path)
    base = path.parent
    entries = []
    seen = set()
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip().lower() for h in header] != ["path", "label", "fold"]:
            raise ManifestError(f"{path}: header must be 'path,label,fold', got {header}")
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 3:
                raise ManifestError(f"{path}:{lineno}: expected 3 fields, got {len(row)}")
            p, lab, fold = (c.strip() for c in row)
            if lab.lower() not in _LABELS:
                raise ManifestError(f"{path}:{lineno}: unknown label {lab!r}")
            try:
                k = int(fold)
            except ValueError:
                raise ManifestError(f"{path}:{lineno}: fold {fold!r} is not an integer") from None
            if not 0 <= k < n_folds:
                raise ManifestError(f"{path}:{lineno}: fold {k} outside [0, {n_folds - 1}]")
            if not p:
                raise ManifestError(f"{path}:{lineno}: empty path")
            if p in seen:
                raise ManifestError(f"{path}:{lineno}: duplicate path {p!r}")
            seen.add(p)
            entries.append(ManifestEntry(p, _LABELS[lab.lower()], k, str(base)))
    if not entries:
        raise ManifestError(f"{path}: no entries")
    return entries


def write_manifest(path, entries) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write("path,label,fold\n")
        for e in entries:
            fh.write(f"{e.path},{e.label},{e.fold}\n")


def fold_partition(entries, fold: int):
    """Split into (train, validation) lists for one cross-validation fold."""
    train = [e for e in entries if e.fold != fold]
    val = [e for e in entries if e.fold == fold]
    return train, val
