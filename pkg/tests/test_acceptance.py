"""Acceptance criteria, one test each; every test prints a PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -s`` or ``python3 tests/test_acceptance.py``.
"""

import json
import os
import sys
import time

import numpy as np
import pytest

from coughfuse import dsp, fusion, harness, nnet
from coughfuse.audio_io import Segment, load_manifest
from coughfuse.cli import main as cli_main
from coughfuse.config import Config
from coughfuse.fusion import FusionHead
from coughfuse.synth import SynthSpec, make_corpus

sys.path.insert(0, os.path.dirname(__file__))
from conftest import numeric_grad, rel_error  # noqa: E402

N_SEEDS = 5


def report(name, ok, detail):
    line = f"{'PASS' if ok else 'FAIL'}  {name}: {detail}"
    capture = getattr(report, "capture", None)
    if capture is not None:
        with capture.disabled():
            print("\n" + line)
    else:
        print(line)
    return ok


@pytest.fixture(autouse=True)
def _uncaptured(capsys):
    report.capture = capsys
    yield
    report.capture = None


# --- shared corpus ---------------------------------------------------------

_STATE = {}


def corpus_dir(tmp_root):
    if "corpus" not in _STATE:
        t0 = time.perf_counter()
        out = os.path.join(tmp_root, "synthetic200")
        make_corpus(SynthSpec(n_files=200, imbalance=9.0, seed=0), out)
        _STATE["corpus"] = out
        _STATE["synth_s"] = time.perf_counter() - t0
    return _STATE["corpus"]


def feature_bank(tmp_root):
    if "bank" not in _STATE:
        path = corpus_dir(tmp_root)
        t0 = time.perf_counter()
        _STATE["bank"] = harness.build_feature_bank(load_manifest(os.path.join(path, "manifest.csv")), Config())
        _STATE["bank_s"] = time.perf_counter() - t0
    return _STATE["bank"]


@pytest.fixture(scope="module")
def tmp_root(tmp_path_factory):
    return str(tmp_path_factory.mktemp("acceptance"))


# --- criteria --------------------------------------------------------------

def test_shape_reproduction():
    t0 = time.perf_counter()
    x = np.random.default_rng(0).standard_normal(57_600)
    lm = dsp.log_mel(Segment(x, "probe", 0), dsp.StftConfig(512, 256, 16_000), 64)
    dt = time.perf_counter() - t0
    ok = lm.n_frames == 224 and dt < 1.0
    assert report("shape reproduction", ok, f"{lm.n_frames} frames in {dt:.3f}s (need 224, < 1 s)")


def _away_from_zero(rng, shape, margin=1e-3):
    x = rng.standard_normal(shape)
    return np.where(np.abs(x) < margin, margin * np.sign(x + 1e-300) + x, x)


def _grad_cases(rng):
    """Yield (op name, analytic grads, list of (numeric_fn, variable)) per random instance."""

    def linear():
        x, W, b = rng.standard_normal((3, 5)), rng.standard_normal((4, 5)), rng.standard_normal(4)
        G = rng.standard_normal((3, 4))
        f = lambda: float((nnet.linear_forward(x, W, b) * G).sum())
        return nnet.linear_backward(x, W, G), (x, W, b), f

    def conv(k):
        def make():
            x = rng.standard_normal((2, 3, 6))
            W, b = rng.standard_normal((4, 3, k)), rng.standard_normal(4)
            G = rng.standard_normal((2, 4, 6))
            f = lambda: float((nnet.conv1d_forward(x, W, b) * G).sum())
            return nnet.conv1d_backward(x, W, G), (x, W, b), f
        return make

    def elementwise(layer_cls):
        def make():
            x = _away_from_zero(rng, (2, 3, 5))
            G = rng.standard_normal((2, 3, 5))
            layer = layer_cls()
            layer.forward(x)
            f = lambda: float((layer_cls().forward(x) * G).sum())
            return (layer.backward(G),), (x,), f
        return make

    def bce():
        z, y = rng.uniform(-5, 5, 8), rng.random(8)
        pw = float(rng.uniform(0.2, 9.0))
        _, g = nnet.bce_with_logits(z, y, pw)
        return (g,), (z,), lambda: nnet.bce_with_logits(z, y, pw)[0]

    def head(strategy):
        def make():
            h = FusionHead(strategy, 4, rng)
            for v in h.params.values():
                v[...] = rng.standard_normal(v.shape) * 0.5
            reps = rng.standard_normal((3, 3, 4))
            y = rng.integers(0, 2, 3).astype(float)
            f = lambda: nnet.bce_with_logits(h.logits(reps), y)[0]
            h.zero_grad()
            _, g = nnet.bce_with_logits(h.logits(reps), y)
            dreps = h.backward(g)
            names = list(h.params)
            return (dreps,) + tuple(h.grads()[k].copy() for k in names), \
                (reps,) + tuple(h.params[k] for k in names), f
        return make

    return {
        "linear": linear, "conv1d_k1": conv(1), "conv1d_k3": conv(3),
        "relu": elementwise(nnet.ReLU), "sigmoid": elementwise(nnet.Sigmoid), "weighted_bce": bce,
        "feature_max": head("feature_max"), "feature_avg": head("feature_avg"),
        "feature_attention": head("feature_attention"), "decision_attention": head("decision_attention"),
    }


def test_gradient_suite():
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    worst, failures, count = {}, [], {}
    for name, make in _grad_cases(rng).items():
        for _ in range(20):
            analytic, variables, f = make()
            for a, v in zip(analytic, variables):
                err = rel_error(a, numeric_grad(f, v))
                worst[name] = max(worst.get(name, 0.0), err)
                if err >= 1e-4:
                    failures.append((name, err))
            count[name] = count.get(name, 0) + 1
    dt = time.perf_counter() - t0
    ok = not failures and dt < 30.0 and min(count.values()) >= 20
    detail = f"{len(count)} ops x {min(count.values())} instances, worst rel err {max(worst.values()):.2e}, {dt:.1f}s"
    assert report("gradient suite", ok, detail), failures[:5]


def _pair_count(s, y):
    pos, neg = s[y == 1], s[y == 0]
    diff = pos[:, None] - neg[None, :]
    return ((diff > 0).sum() + 0.5 * (diff == 0).sum()) / (len(pos) * len(neg))


def test_auc_oracle():
    rng = np.random.default_rng(99)
    mismatches = 0
    for _ in range(200):
        n = int(rng.integers(2, 101))
        y = rng.integers(0, 2, n)
        y[:2] = [0, 1]
        s = rng.random(n)
        k = int(rng.integers(1, max(2, n // 3)))
        s[rng.integers(0, n, k)] = s[rng.integers(0, n)]  # injected ties
        s = np.round(s, int(rng.integers(1, 4)))  # more ties through coarse scores
        auc = harness.roc_auc(s, y)
        same = auc == _pair_count(s, y)
        mono = auc == harness.roc_auc(s ** 3, y) == harness.roc_auc(1 / (1 + np.exp(-4 * s)), y) \
            == harness.roc_auc(np.exp(s) + 7.0, y)
        mismatches += not (same and mono)
    assert report("AUC oracle", mismatches == 0, f"200 sets, {mismatches} mismatches vs pair counting/monotone maps")


def test_fusion_degeneracy():
    rng = np.random.default_rng(5)
    worst = 0.0
    for _ in range(100):
        reps = rng.standard_normal((1, 3, 256)) * rng.uniform(0.1, 10)
        a = fusion.fuse_attention(reps, np.zeros((256, 256)), np.zeros(256))
        worst = max(worst, float(np.abs(a - fusion.fuse_avg(reps)).max()))
    bad = 0
    for _ in range(1000):
        p = rng.random(3)
        lo, hi = p.min(), p.max()
        bad += not (lo <= fusion.decision_max(p) <= hi and lo <= fusion.decision_avg(p) <= hi)
    ok = worst <= 1e-12 and bad == 0
    assert report("fusion degeneracy", ok, f"max |attn - avg| {worst:.1e} on 100 stacks; {bad}/1000 out-of-bounds")


def test_mixup():
    x1, x2 = np.array([1.0, -2.0, 3.0]), np.array([0.5, 4.0, -1.0])
    ident = (np.array_equal(nnet.mixup(x1, 1.0, x2, 0.0, alpha=1.0)[0], x1)
             and np.array_equal(nnet.mixup(x1, 1.0, x2, 0.0, alpha=0.0)[0], x2)
             and np.array_equal(nnet.mixup(x1, 1.0, x2, 0.0, alpha=0.5)[0], 0.5 * x1 + 0.5 * x2)
             and nnet.mixup(x1, 1.0, x2, 0.0, alpha=0.5)[1] == 0.5)
    rng = np.random.default_rng(1)
    n = 10_000
    _, alphas = nnet.mixup(np.ones((n, 1)), np.ones(n), np.zeros((n, 1)), np.zeros(n), rng)
    mean = float(alphas.mean())
    a, b = rng.standard_normal((n, 4)), rng.standard_normal((n, 4))
    xm, _ = nnet.mixup(a, rng.random(n), b, rng.random(n), rng)
    bounded = bool(np.all(xm >= np.minimum(a, b) - 1e-15) and np.all(xm <= np.maximum(a, b) + 1e-15))
    ok = ident and abs(mean - 0.5) <= 0.02 and bounded
    assert report("mixup", ok, f"identities {ident}, Beta(1,1) mean {mean:.4f}, within bounds {bounded}")


def test_end_to_end_synthetic(tmp_root):
    t0 = time.perf_counter()
    bank = feature_bank(tmp_root)
    res = harness.run_crossval(bank, "handcrafted_dnn", Config(), seed=0)
    dt = time.perf_counter() - t0 + _STATE["synth_s"]
    auc = res.aggregate["auc"]["mean"]
    ok = auc >= 0.85 and dt < 600
    assert report("end-to-end synthetic", ok,
                  f"handcrafted_dnn mean AUC {auc:.4f} (std {res.aggregate['auc']['std']:.4f}), {dt:.0f}s total")


@pytest.mark.slow
def test_fusion_ordering(tmp_root):
    bank = feature_bank(tmp_root)
    t0 = time.perf_counter()
    per_seed = {}
    for seed in range(N_SEEDS):
        res = harness.run_suite(bank, Config(), seed, strategies=("feature_attention",))
        per_seed[seed] = {k: v.aggregate["auc"]["mean"] for k, v in res.items()}
    med = {k: float(np.median([per_seed[s][k] for s in per_seed])) for k in per_seed[0]}
    best_single = max(med[k] for k in ("handcrafted_dnn", "spec_cnn_a", "spec_cnn_b"))
    ok = med["feature_attention"] >= best_single - 0.02
    detail = ", ".join(f"{k} {v:.4f}" for k, v in med.items())
    assert report("fusion ordering", ok, f"medians over {N_SEEDS} seeds: {detail}; "
                                         f"{time.perf_counter() - t0:.0f}s")


def test_crossval_determinism(tmp_path):
    corpus = tmp_path / "corpus"
    cli_main(["synth", "--out", str(corpus), "--n-files", "30", "--imbalance", "2", "--seed", "3"])
    docs, csvs = [], []
    for run in ("a", "b"):
        out = tmp_path / run
        code = cli_main(["crossval", "--manifest", str(corpus / "manifest.csv"), "--model", "all",
                         "--seed", "11", "--set", "epochs=2", "--out", str(out)])
        assert code == 0
        doc = json.loads((out / "results.json").read_text())
        doc.pop("meta")
        docs.append(json.dumps(doc, indent=2, sort_keys=True))
        csvs.append({p: (out / p).read_bytes() for p in sorted(os.listdir(out)) if p.endswith(".csv")})
    ok = docs[0] == docs[1] and csvs[0] == csvs[1]
    assert report("determinism", ok, f"results.json minus meta identical: {docs[0] == docs[1]}, "
                                     f"{len(csvs[0])} score CSVs identical: {csvs[0] == csvs[1]}")


def test_lr_schedule():
    wrong = [e for e in range(30) if nnet.lr_at(e) != 0.001 * 0.1 ** (e // 10)]
    assert report("LR schedule", not wrong, f"30 epochs exact, mismatches {wrong}")


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q", "-s"]))
