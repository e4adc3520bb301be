"""Cross-validation driver, segment-to-file score aggregation and metrics."""

from __future__ import annotations

import json
import logging
import os
import subprocess
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from . import dsp, fusion, nnet
from .audio_io import load_audio, segment
from .config import Config
from .errors import CheckpointError, ManifestError
from .models import MODEL_KINDS, ModelSpec, SingleModel

log = logging.getLogger(__name__)

METRICS = ("sensitivity", "specificity", "auc")


# --- metrics ---------------------------------------------------------------

@dataclass(frozen=True)
class MetricsReport:
    sensitivity: float
    specificity: float
    auc: float
    threshold: float
    target_met: bool = True

    def to_json(self):
        return {"sensitivity": self.sensitivity, "specificity": self.specificity,
                "auc": self.auc, "threshold": self.threshold, "target_met": self.target_met}


def aggregate_file_score(segment_probs) -> float:
    p = np.asarray(segment_probs, dtype=np.float64)
    if p.size == 0:
        raise ValueError("no segment probabilities to aggregate")
    return float(p.mean())


def _split(scores, labels):
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(int)
    if s.shape != y.shape:
        raise ValueError("scores and labels differ in length")
    if not (y == 1).any() or not (y == 0).any():
        raise ValueError("need at least one positive and one negative")
    return s, y


def roc_auc(scores, labels) -> float:
    """Mann-Whitney AUC from midranks; ties count one half."""
    s, y = _split(scores, labels)
    ranks = rankdata(s)  # average ranks, exact halves
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    u = ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def sens_spec_at_operating_point(scores, labels, target_sensitivity: float = 0.8) -> MetricsReport:
    """Use the largest cutoff t with sensitivity >= target, predicting positive when score >= t."""
    s, y = _split(scores, labels)
    pos, neg = s[y == 1], s[y == 0]
    best = None
    for t in np.unique(s)[::-1]:
        sens = float((pos >= t).mean())
        if sens >= target_sensitivity:
            best = t
            break
    target_met = best is not None
    if best is None:
        best = float(s.min())
    sens = float((pos >= best).mean())
    spec = float((neg < best).mean())
    return MetricsReport(sens, spec, roc_auc(s, y), float(best), target_met)


def mean_std(values) -> dict:
    v = np.asarray(values, dtype=np.float64)
    return {"mean": float(v.mean()), "std": float(v.std())}


# --- features --------------------------------------------------------------

def input_key(spec_or_kind, features: str = "logmel") -> str:
    kind = getattr(spec_or_kind, "kind", spec_or_kind)
    if kind == "handcrafted_dnn":
        feats = getattr(spec_or_kind, "features", "") or features
        return f"{feats}_functionals"
    return {"spec_cnn_a": "mel_image", "spec_cnn_b": "mel_audio"}[kind]


def segment_features(segments, cfg: Config, keys) -> dict:
    """Model inputs for each segment, stacked per key."""
    stft = cfg.stft
    out = {k: [] for k in keys}
    for seg in segments:
        power = dsp.stft_power(seg, stft)
        if "logmel_functionals" in out or "mfcc_functionals" in out:
            lm26 = dsp.log_mel_from_power(power, stft, cfg.mel_bins_handcrafted)
            if "logmel_functionals" in out:
                out["logmel_functionals"].append(dsp.apply_functionals(lm26.values).values)
            if "mfcc_functionals" in out:
                c = dsp.mfcc(lm26, cfg.mfcc_coeffs, cfg.mel_bins_handcrafted)
                out["mfcc_functionals"].append(dsp.apply_functionals(c).values)
        if "mel_image" in out:
            out["mel_image"].append(dsp.log_mel_from_power(power, stft, cfg.mel_bins_image).values)
        if "mel_audio" in out:
            out["mel_audio"].append(dsp.log_mel_from_power(power, stft, cfg.mel_bins_audio).values)
    return {k: np.stack(v) for k, v in out.items()}


def file_features(path, cfg: Config, keys) -> dict:
    clip = load_audio(path, cfg.sample_rate)
    return segment_features(segment(clip, cfg.segment_len), cfg, keys)


@dataclass
class FeatureBank:
    """Per-segment model inputs for a whole manifest, computed once and shared by all folds."""

    entries: list
    seg_file: np.ndarray  # segment -> entry index
    inputs: dict

    @property
    def file_labels(self) -> np.ndarray:
        return np.array([e.label for e in self.entries])

    @property
    def seg_labels(self) -> np.ndarray:
        return self.file_labels[self.seg_file].astype(np.float64)

    def segments_of(self, file_idx) -> np.ndarray:
        return np.flatnonzero(np.isin(self.seg_file, file_idx))


def build_feature_bank(entries, cfg: Config, keys=None) -> FeatureBank:
    if keys is None:
        keys = [input_key(k, cfg.features) for k in MODEL_KINDS]
    chunks = {k: [] for k in keys}
    seg_file = []
    for i, e in enumerate(entries):
        feats = file_features(e.file, cfg, keys)
        n = len(next(iter(feats.values())))
        seg_file.extend([i] * n)
        for k in keys:
            chunks[k].append(feats[k])
    return FeatureBank(list(entries), np.array(seg_file), {k: np.concatenate(v) for k, v in chunks.items()})


# --- models ----------------------------------------------------------------

def model_spec(kind: str, cfg: Config) -> ModelSpec:
    if kind == "handcrafted_dnn":
        n_llds = cfg.mel_bins_handcrafted if cfg.features == "logmel" else cfg.mfcc_coeffs
        return ModelSpec(kind, (n_llds * len(dsp.DEFAULT_FUNCTIONALS),), cfg.features)
    mels = cfg.mel_bins_image if kind == "spec_cnn_a" else cfg.mel_bins_audio
    return ModelSpec(kind, (mels, cfg.n_frames))


def member_rng(seed: int, member: int):
    return np.random.default_rng([seed, member])


def train_single(kind: str, bank: FeatureBank, seg_idx, cfg: Config, rng) -> tuple[SingleModel, list]:
    spec = model_spec(kind, cfg)
    X = bank.inputs[input_key(spec)][seg_idx]
    y = bank.seg_labels[seg_idx]
    model = SingleModel(spec, rng)
    model.fit_normalizer(X)
    history = nnet.train(model, X, y, cfg.train, rng)
    return model, history


class Scorer:
    """Per-segment probabilities from one model, or from members plus a fusion strategy."""

    def __init__(self, members, strategy: str | None = None, head=None):
        self.members = list(members)
        self.strategy = strategy
        self.head = head
        if strategy is None and len(self.members) != 1:
            raise ValueError("a plain scorer wraps exactly one model")

    @property
    def input_keys(self):
        return [input_key(m.spec) for m in self.members]

    def member_outputs(self, inputs: dict, seg_idx=None):
        probs, embs = [], []
        for m in self.members:
            x = inputs[input_key(m.spec)]
            if seg_idx is not None:
                x = x[seg_idx]
            logits = m.predict_logits(x)
            probs.append(nnet.sigmoid(logits))
            embs.append(m.embed(x))
        return np.stack(probs, axis=1), np.stack(embs, axis=1)

    def segment_probs(self, inputs: dict, seg_idx=None) -> np.ndarray:
        probs, embs = self.member_outputs(inputs, seg_idx)
        if self.strategy is None:
            return probs[:, 0]
        return fusion.combine_decisions(self.strategy, probs, embs, self.head)


# --- cross-validation ------------------------------------------------------

@dataclass
class FoldResult:
    fold: int
    scores: dict  # file -> probability
    labels: dict  # file -> class
    metrics: MetricsReport
    train_loss: list = field(default_factory=list)

    def to_json(self):
        d = {"fold": self.fold, "n_files": len(self.scores)}
        d.update(self.metrics.to_json())
        return d


@dataclass
class CrossvalResult:
    target: str
    folds: list

    @property
    def aggregate(self) -> dict:
        return {m: mean_std([getattr(f.metrics, m) for f in self.folds]) for m in METRICS + ("threshold",)}

    def to_json(self):
        return {"target": self.target, "folds": [f.to_json() for f in self.folds],
                "aggregate": self.aggregate}


def _file_scores(bank: FeatureBank, file_idx, seg_probs, seg_idx) -> dict:
    out = {}
    owner = bank.seg_file[seg_idx]
    for i in file_idx:
        out[bank.entries[i].path] = aggregate_file_score(seg_probs[owner == i])
    return out


def _fold_result(bank, fold, val_files, seg_probs, val_segs, cfg, history=()):
    scores = _file_scores(bank, val_files, seg_probs, val_segs)
    labels = {bank.entries[i].path: bank.entries[i].label for i in val_files}
    keys = list(scores)
    report = sens_spec_at_operating_point([scores[k] for k in keys], [labels[k] for k in keys],
                                          cfg.target_sensitivity)
    return FoldResult(fold, scores, labels, report, list(history))


def check_folds(entries, n_folds: int = 5):
    for k in range(n_folds):
        labs = {e.label for e in entries if e.fold == k}
        if labs != {0, 1}:
            raise ManifestError(f"fold {k} must contain both classes, has {sorted(labs)}")


def run_suite(bank: FeatureBank, cfg: Config, seed: int, strategies=fusion.STRATEGIES,
              members=None, n_folds: int = 5) -> dict:
    """Cross-validate the three single models and every requested fusion strategy.

    Per fold the members are trained once (seeded ``seed + fold``) and shared
    by all strategies. With ``members`` given, those frozen models are used
    for every fold instead and only fusion heads are trained.
    Returns ``{target_name: CrossvalResult}``.
    """
    check_folds(bank.entries, n_folds)
    folds = {name: [] for name in list(strategies) + ([] if members else list(MODEL_KINDS))}
    fold_of = np.array([e.fold for e in bank.entries])
    for k in range(n_folds):
        fold_seed = seed + k
        train_files = np.flatnonzero(fold_of != k)
        val_files = np.flatnonzero(fold_of == k)
        tr, va = bank.segments_of(train_files), bank.segments_of(val_files)
        if members is None:
            trained = []
            for j, kind in enumerate(MODEL_KINDS):
                model, hist = train_single(kind, bank, tr, cfg, member_rng(fold_seed, j))
                trained.append(model)
                probs = nnet.sigmoid(model.predict_logits(bank.inputs[input_key(model.spec)][va]))
                folds[kind].append(_fold_result(bank, k, val_files, probs, va, cfg, hist))
                log.info("fold %d %s auc=%.3f", k, kind, folds[kind][-1].metrics.auc)
        else:
            trained = list(members)
        if not strategies:
            continue
        scorer = Scorer(trained, "decision_avg")
        _, emb_tr = scorer.member_outputs(bank.inputs, tr)
        probs_va, emb_va = scorer.member_outputs(bank.inputs, va)
        for strategy in strategies:
            # stream keyed by strategy, so a strategy run alone matches the full suite
            j = len(MODEL_KINDS) + fusion.STRATEGIES.index(strategy)
            head, hist = fusion.train_fusion(strategy, emb_tr, bank.seg_labels[tr], cfg.train,
                                             member_rng(fold_seed, j))
            p = fusion.combine_decisions(strategy, probs_va, emb_va, head)
            folds[strategy].append(_fold_result(bank, k, val_files, p, va, cfg, hist))
            log.info("fold %d %s auc=%.3f", k, strategy, folds[strategy][-1].metrics.auc)
    return {name: CrossvalResult(name, fl) for name, fl in folds.items()}


def run_crossval(bank: FeatureBank, target: str, cfg: Config, seed: int, members=None,
                 n_folds: int = 5) -> CrossvalResult:
    """Five-fold cross-validation of one model kind or one fusion strategy."""
    if target in MODEL_KINDS:
        if members:
            raise ValueError("frozen members only apply to fusion targets")
        check_folds(bank.entries, n_folds)
        fold_of = np.array([e.fold for e in bank.entries])
        j = MODEL_KINDS.index(target)
        results = []
        for k in range(n_folds):
            val_files = np.flatnonzero(fold_of == k)
            tr = bank.segments_of(np.flatnonzero(fold_of != k))
            va = bank.segments_of(val_files)
            model, hist = train_single(target, bank, tr, cfg, member_rng(seed + k, j))
            probs = nnet.sigmoid(model.predict_logits(bank.inputs[input_key(model.spec)][va]))
            results.append(_fold_result(bank, k, val_files, probs, va, cfg, hist))
        return CrossvalResult(target, results)
    if target not in fusion.STRATEGIES:
        raise ValueError(f"unknown target {target!r}")
    return run_suite(bank, cfg, seed, (target,), members, n_folds)[target]


def run_final_train(bank: FeatureBank, target: str, cfg: Config, seed: int, out_dir) -> str:
    """Train on every manifest file and write checkpoint(s); returns the main checkpoint path."""
    os.makedirs(out_dir, exist_ok=True)
    all_segs = np.arange(len(bank.seg_file))
    if target in MODEL_KINDS:
        model, _ = train_single(target, bank, all_segs, cfg, member_rng(seed, MODEL_KINDS.index(target)))
        path = os.path.join(out_dir, f"{target}.ckpt")
        model.save(path, {"config": cfg.to_dict(), "n_train_files": len(bank.entries)})
        return path
    if target not in fusion.STRATEGIES:
        raise ValueError(f"unknown target {target!r}")
    member_paths = []
    for j, kind in enumerate(MODEL_KINDS):
        model, _ = train_single(kind, bank, all_segs, cfg, member_rng(seed, j))
        p = os.path.join(out_dir, f"{kind}.ckpt")
        model.save(p, {"config": cfg.to_dict(), "n_train_files": len(bank.entries)})
        member_paths.append(p)
    return fit_fusion_checkpoint(bank, target, member_paths, cfg, seed, os.path.join(out_dir, f"{target}.ckpt"))


def fit_fusion_checkpoint(bank: FeatureBank, strategy: str, member_paths, cfg: Config, seed: int, path) -> str:
    """Train a fusion head on frozen member checkpoints and save it with their hashes."""
    members, refs = [], []
    for p in member_paths:
        spec_json, arrays, digest = nnet.load_checkpoint(p)
        members.append(SingleModel.from_checkpoint(spec_json, arrays))
        refs.append({"path": os.path.relpath(os.path.abspath(p), os.path.dirname(os.path.abspath(path))),
                     "sha256": digest, "kind": spec_json["model"]["kind"]})
    if len(members) < 2:
        raise ValueError("fusion needs at least two member models")
    all_segs = np.arange(len(bank.seg_file))
    _, emb = Scorer(members, "decision_avg").member_outputs(bank.inputs, all_segs)
    head, _ = fusion.train_fusion(strategy, emb, bank.seg_labels, cfg.train,
                                  member_rng(seed, 100 + fusion.STRATEGIES.index(strategy)))
    arrays = fusion.head_state(head) if head is not None else []
    nnet.save_checkpoint(path, {"artifact": "fusion", "strategy": strategy, "members": refs,
                                "config": cfg.to_dict()}, arrays)
    return path


def load_scorer(path) -> Scorer:
    """Load a single-model or fusion checkpoint; fusion members are verified by sha256."""
    spec_json, arrays, _ = nnet.load_checkpoint(path)
    if spec_json.get("artifact") == "single_model":
        return Scorer([SingleModel.from_checkpoint(spec_json, arrays)])
    if spec_json.get("artifact") != "fusion":
        raise CheckpointError(f"{path}: unknown artifact type")
    base = os.path.dirname(os.path.abspath(path))
    members = []
    for ref in spec_json["members"]:
        mpath = os.path.join(base, ref["path"])
        if not os.path.exists(mpath):
            raise CheckpointError(f"{path}: member checkpoint {mpath} not found")
        m_spec, m_arrays, digest = nnet.load_checkpoint(mpath)
        if digest != ref["sha256"]:
            raise CheckpointError(f"{path}: member {ref['path']} hash mismatch (stale fusion)")
        members.append(SingleModel.from_checkpoint(m_spec, m_arrays))
    strategy = spec_json["strategy"]
    head = fusion.head_from_state(strategy, arrays) if strategy in fusion.TRAINABLE else None
    return Scorer(members, strategy, head)


def score_file(scorer: Scorer, path, cfg: Config) -> float:
    feats = file_features(path, cfg, set(scorer.input_keys))
    return aggregate_file_score(scorer.segment_probs(feats))


# --- reporting -------------------------------------------------------------

def git_describe() -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"], capture_output=True,
                             text=True, timeout=5, cwd=os.path.dirname(os.path.abspath(__file__)))
        return out.stdout.strip() or "unknown"
    except (OSError, subprocess.SubprocessError):
        return "unknown"


def results_document(results: dict, cfg: Config, seed: int, extra: dict | None = None,
                     meta: dict | None = None) -> dict:
    """JSON-ready report. Only ``meta`` may differ between identical runs."""
    doc = {"config": cfg.to_dict(), "seed": seed, "git_describe": git_describe()}
    if extra:
        doc.update(extra)
    doc["results"] = {name: r.to_json() for name, r in results.items()}
    doc["meta"] = meta or {}
    return doc


def write_results(path, doc: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_scores_csv(path, result: CrossvalResult) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("file,label,score\n")
        for f in result.folds:
            for name, score in f.scores.items():
                fh.write(f"{name},{f.labels[name]},{score!r}\n")


__all__ = [
    "MetricsReport", "aggregate_file_score", "roc_auc", "sens_spec_at_operating_point", "mean_std",
    "FeatureBank", "build_feature_bank", "Scorer", "FoldResult", "CrossvalResult", "run_suite",
    "run_crossval", "run_final_train", "fit_fusion_checkpoint", "load_scorer", "score_file",
    "results_document", "write_results", "write_scores_csv",
]
