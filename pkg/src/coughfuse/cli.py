"""Command-line entry point: ``coughfuse {synth,extract,train,crossval,fuse,predict}``."""

from __future__ import annotations

import argparse
import datetime
import logging
import os
import sys
import time

from . import dsp, fusion, harness, nnet
from .audio_io import load_audio, load_manifest, segment, write_wav
from .config import Config, load_config, parse_overrides
from .errors import CheckpointError, CoughFuseError
from .models import MODEL_KINDS
from .synth import SynthSpec, make_corpus

TARGETS = MODEL_KINDS + fusion.STRATEGIES


def _config(args) -> Config:
    cfg = load_config(args.config) if args.config else Config()
    overrides = {}
    for item in args.set or []:
        if "=" not in item:
            raise CoughFuseError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        overrides[k.strip()] = v.strip()
    if args.seed is not None:
        overrides["seed"] = str(args.seed)
    return cfg.replace(**parse_overrides(overrides))


def _bank(args, cfg, keys=None):
    entries = load_manifest(args.manifest)
    return harness.build_feature_bank(entries, cfg, keys)


def _meta(started):
    return {"timestamp": datetime.datetime.now(datetime.timezone.utc).isoformat(timespec="seconds"),
            "runtime_s": round(time.time() - started, 3)}


def cmd_synth(args, cfg):
    spec = SynthSpec(n_files=args.n_files, imbalance=args.imbalance, min_duration_s=args.min_duration,
                     max_duration_s=args.max_duration, sample_rate_hz=args.rate, seed=cfg.seed)
    entries = make_corpus(spec, args.out)
    n_pos = sum(e.label for e in entries)
    print(f"wrote {len(entries)} files ({n_pos} positive) and manifest.csv to {args.out}")


def cmd_extract(args, cfg):
    os.makedirs(args.out, exist_ok=True)
    entries = load_manifest(args.manifest)
    keys = args.what.split(",")
    handles = {}
    try:
        for e in entries:
            clip = load_audio(e.file, cfg.sample_rate)
            segs = segment(clip, cfg.segment_len)
            feats = harness.segment_features(segs, cfg, keys)
            for key in keys:
                if key not in handles:
                    handles[key] = open(os.path.join(args.out, f"{key}.csv"), "w", encoding="utf-8")
                    handles[key].write("file,segment," + ",".join(_column_names(key, feats[key][0], cfg)) + "\n")
                for i, row in enumerate(feats[key]):
                    handles[key].write(f"{e.path},{i}," + ",".join(repr(float(v)) for v in row.ravel()) + "\n")
            if args.dump_segments:
                os.makedirs(args.dump_segments, exist_ok=True)
                stem = os.path.splitext(os.path.basename(e.path))[0]
                for s in segs:
                    write_wav(os.path.join(args.dump_segments, f"{stem}_seg{s.index:03d}.wav"), s.samples,
                              cfg.sample_rate)
    finally:
        for fh in handles.values():
            fh.close()
    print(f"extracted {','.join(keys)} for {len(entries)} files into {args.out}")


def _column_names(key, sample, cfg):
    if key.endswith("_functionals"):
        n_llds = cfg.mel_bins_handcrafted if key.startswith("logmel") else cfg.mfcc_coeffs
        prefix = "logmel" if key.startswith("logmel") else "mfcc"
        return [f"{prefix}{i}__{f}" for i in range(n_llds) for f in dsp.DEFAULT_FUNCTIONALS]
    n_mels, n_frames = sample.shape
    return [f"mel{m}_t{t}" for m in range(n_mels) for t in range(n_frames)]


def cmd_train(args, cfg):
    bank = _bank(args, cfg)
    path = harness.run_final_train(bank, args.model, cfg, cfg.seed, args.out)
    print(f"{path},{nnet.file_sha256(path)}")


def _members_from(args):
    paths = []
    if getattr(args, "fusion_checkpoint", None):
        spec_json, _, _ = nnet.load_checkpoint(args.fusion_checkpoint)
        if spec_json.get("artifact") != "fusion":
            raise CheckpointError(f"{args.fusion_checkpoint}: not a fusion checkpoint")
        base = os.path.dirname(os.path.abspath(args.fusion_checkpoint))
        for ref in spec_json["members"]:
            p = os.path.join(base, ref["path"])
            if nnet.file_sha256(p) != ref["sha256"]:
                raise CheckpointError(f"member {p} hash mismatch (stale fusion)")
            paths.append(p)
        return paths, spec_json["strategy"]
    if args.members:
        paths = [p.strip() for p in args.members.split(",") if p.strip()]
    return paths, None


def cmd_crossval(args, cfg):
    started = time.time()
    member_paths, fused_strategy = _members_from(args)
    target = args.model or fused_strategy or "feature_attention"
    members = None
    extra = {}
    if member_paths:
        if target in MODEL_KINDS or target == "all":
            raise CoughFuseError("--members/--fusion-checkpoint need a fusion --model")
        from .models import SingleModel
        members = [SingleModel.load(p) for p in member_paths]
        extra["members"] = [{"path": os.path.basename(p), "sha256": nnet.file_sha256(p)} for p in member_paths]
    bank = _bank(args, cfg)
    if target == "all":
        results = harness.run_suite(bank, cfg, cfg.seed)
    else:
        results = {target: harness.run_crossval(bank, target, cfg, cfg.seed, members)}
    os.makedirs(args.out, exist_ok=True)
    doc = harness.results_document(results, cfg, cfg.seed, extra, _meta(started))
    harness.write_results(os.path.join(args.out, "results.json"), doc)
    for name, r in results.items():
        harness.write_scores_csv(os.path.join(args.out, f"scores_{name}.csv"), r)
        agg = r.aggregate
        print(f"{name}: auc {agg['auc']['mean']:.4f} ({agg['auc']['std']:.4f}) "
              f"sens {agg['sensitivity']['mean']:.4f} spec {agg['specificity']['mean']:.4f}")


def cmd_fuse(args, cfg):
    paths = [p.strip() for p in args.members.split(",") if p.strip()]
    for p in paths:
        if not os.path.exists(p):
            raise FileNotFoundError(f"member checkpoint {p} not found")
    bank = _bank(args, cfg)
    os.makedirs(args.out, exist_ok=True)
    out = os.path.join(args.out, f"{args.strategy}.ckpt")
    harness.fit_fusion_checkpoint(bank, args.strategy, paths, cfg, cfg.seed, out)
    print(f"{out},{nnet.file_sha256(out)}")


def cmd_predict(args, cfg):
    scorer = harness.load_scorer(args.checkpoint)
    for path in args.input:
        print(f"{path},{harness.score_file(scorer, path, cfg):.6f}")


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key = value config file")
    common.add_argument("--seed", type=int, help="overrides the config seed")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="coughfuse", description="Cough-audio COVID-19 screening pipeline.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="write a synthetic corpus and manifest")
    s.add_argument("--out", required=True)
    s.add_argument("--n-files", type=int, default=200)
    s.add_argument("--imbalance", type=float, default=9.0, help="negatives per positive")
    s.add_argument("--min-duration", type=float, default=1.0)
    s.add_argument("--max-duration", type=float, default=4.5)
    s.add_argument("--rate", type=int, default=44_100)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("extract", parents=[common], help="dump features as CSV")
    s.add_argument("--manifest", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--what", default="logmel_functionals,mfcc_functionals",
                   help="comma list of logmel_functionals, mfcc_functionals, mel_image, mel_audio")
    s.add_argument("--dump-segments", metavar="DIR")
    s.set_defaults(func=cmd_extract)

    s = sub.add_parser("train", parents=[common], help="train on the whole manifest")
    s.add_argument("--manifest", required=True)
    s.add_argument("--model", required=True, choices=TARGETS)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("crossval", parents=[common], help="five-fold cross-validation")
    s.add_argument("--manifest", required=True)
    s.add_argument("--model", choices=TARGETS + ("all",), help="model kind, fusion strategy or 'all'")
    s.add_argument("--features", choices=("logmel", "mfcc"), help="hand-crafted feature set")
    s.add_argument("--members", help="comma list of frozen member checkpoints for a fusion model")
    s.add_argument("--fusion-checkpoint", help="reuse the strategy and members of a fusion checkpoint")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_crossval)

    s = sub.add_parser("fuse", parents=[common], help="train a fusion head on frozen members")
    s.add_argument("--manifest", required=True)
    s.add_argument("--strategy", required=True, choices=fusion.STRATEGIES)
    s.add_argument("--members", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_fuse)

    s = sub.add_parser("predict", parents=[common], help="score WAV files")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--input", required=True, nargs="+")
    s.set_defaults(func=cmd_predict)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _config(args)
        if getattr(args, "features", None):
            cfg = cfg.replace(features=args.features)
        args.func(args, cfg)
    except (CoughFuseError, OSError, ValueError) as exc:
        msg = str(exc).replace("\n", " ")
        print(f"coughfuse: error: {type(exc).__name__}: {msg}", file=sys.stderr)
        return 2 if isinstance(exc, (CoughFuseError, ValueError)) else 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
