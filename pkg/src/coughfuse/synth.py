"""Seeded synthetic cough-like corpus for desk-scale experiments.

Negatives are bursts of band-limited noise in a low centre band. Positives sit
in a higher, overlapping band and carry an amplitude-modulated envelope. Both
ride on background noise at a jittered SNR, so the classes overlap.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .audio_io import ManifestEntry, N_FOLDS, write_manifest, write_wav


@dataclass(frozen=True)
class SynthSpec:
    n_files: int = 200
    imbalance: float = 9.0  # negatives per positive
    min_duration_s: float = 1.0
    max_duration_s: float = 4.5
    sample_rate_hz: int = 44_100
    neg_band_hz: tuple = (300.0, 1500.0)
    pos_band_hz: tuple = (1000.0, 2600.0)
    snr_db: tuple = (5.0, 25.0)
    seed: int = 0

    def __post_init__(self):
        n_pos, n_neg = self.class_counts()
        if n_pos < 1 or n_neg < 1:
            raise ValueError("both classes need at least one file")
        if not 0 < self.min_duration_s <= self.max_duration_s:
            raise ValueError("invalid duration range")

    def class_counts(self) -> tuple[int, int]:
        n_pos = int(round(self.n_files / (self.imbalance + 1.0)))
        return n_pos, self.n_files - n_pos


def _band_noise(rng, n, sr, centre, width):
    spec = np.fft.rfft(rng.standard_normal(n))
    f = np.fft.rfftfreq(n, 1.0 / sr)
    spec *= np.exp(-0.5 * ((f - centre) / width) ** 2)
    x = np.fft.irfft(spec, n)
    return x / (np.abs(x).max() + 1e-12)


def synth_clip(rng, label: int, spec: SynthSpec) -> np.ndarray:
    sr = spec.sample_rate_hz
    n = int(rng.uniform(spec.min_duration_s, spec.max_duration_s) * sr)
    x = np.zeros(n)
    band = spec.pos_band_hz if label else spec.neg_band_hz
    for _ in range(int(rng.integers(1, 5))):
        blen = int(rng.uniform(0.15, 0.45) * sr)
        blen = min(blen, n)
        start = int(rng.integers(0, n - blen + 1))
        t = np.arange(blen) / sr
        env = (1.0 - np.exp(-t / 0.01)) * np.exp(-t / rng.uniform(0.05, 0.15))
        if label:
            env = env * (1.0 + rng.uniform(0.4, 0.9) * np.sin(2 * np.pi * rng.uniform(15, 40) * t))
        burst = _band_noise(rng, blen, sr, rng.uniform(*band), rng.uniform(150, 500))
        x[start:start + blen] += rng.uniform(0.5, 1.0) * env * burst
    sig_rms = np.sqrt(np.mean(x ** 2)) + 1e-12
    snr = rng.uniform(*spec.snr_db)
    x += rng.standard_normal(n) * sig_rms / 10 ** (snr / 20)
    return 0.5 * x / (np.abs(x).max() + 1e-12)


def stratified_folds(labels, rng, n_folds: int = N_FOLDS) -> np.ndarray:
    """Round-robin fold assignment within each class after a seeded shuffle."""
    labels = np.asarray(labels)
    folds = np.empty(labels.size, dtype=int)
    for c in (0, 1):
        idx = rng.permutation(np.flatnonzero(labels == c))
        folds[idx] = np.arange(idx.size) % n_folds
    return folds


def make_corpus(spec: SynthSpec, out_dir) -> list[ManifestEntry]:
    """Write WAVs plus ``manifest.csv`` into ``out_dir``; identical bytes for identical specs."""
    os.makedirs(out_dir, exist_ok=True)
    rng = np.random.default_rng(spec.seed)
    n_pos, n_neg = spec.class_counts()
    labels = rng.permutation(np.array([1] * n_pos + [0] * n_neg))
    folds = stratified_folds(labels, rng)
    entries = []
    for i, (label, fold) in enumerate(zip(labels, folds)):
        name = f"cough_{i:04d}.wav"
        write_wav(os.path.join(out_dir, name), synth_clip(rng, int(label), spec), spec.sample_rate_hz)
        entries.append(ManifestEntry(name, int(label), int(fold), str(out_dir)))
    write_manifest(os.path.join(out_dir, "manifest.csv"), entries)
    return entries
