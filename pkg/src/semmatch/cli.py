"""Command-line surface: match, eval, synth, train, selftest, export-plots."""
from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import blob
from .evaluation import (EvalConfig, DatasetError, evaluate, export_curve_csv,
                         load_hpatches_dir, report_to_json,
                         tasks_from_records, tasks_from_synthetic)
from .features import SemanticProvider, load_image, save_pgm
from .geometry import (Correspondence, EstimationFailure,
                       format_homography_text, ransac_homography)
from .matching import MatcherConfig, match_pipeline, write_matches
from .synth import (DatasetSpec, HomographySamplerConfig, PhotometricConfig,
                    make_pair, parse_manifest)
from .training import (TrainConfig, configure_ablation, train_toy)

DEFAULT_INIT_SEED = 0


def _provider(args) -> SemanticProvider:
    sem_dir = getattr(args, "semantic_dir", None)
    if sem_dir:
        return SemanticProvider(mode="file", blob_dir=sem_dir)
    return SemanticProvider(mode="toy")


def _load_params(args, provider: SemanticProvider, cfg: MatcherConfig):
    from .matching import init_model_params
    if getattr(args, "checkpoint", None):
        return blob.load_checkpoint(args.checkpoint)
    return init_model_params(DEFAULT_INIT_SEED, provider.channels, cfg)


def _cmd_match(args) -> int:
    provider = _provider(args)
    cfg = MatcherConfig(semantic_mode=provider.mode)
    params = _load_params(args, provider, cfg)
    img0 = load_image(args.img0)
    img1 = load_image(args.img1)
    ids = (os.path.splitext(os.path.basename(args.img0))[0],
           os.path.splitext(os.path.basename(args.img1))[0])
    result = match_pipeline(img0, img1, params, provider, cfg, ids)
    print(f"{len(result.coarse)} coarse matches, {len(result.fine)} fine")
    if args.out:
        write_matches(args.out, result.fine)
    if args.homography_out:
        if len(result.fine) < 4:
            print("not enough matches for homography estimation",
                  file=sys.stderr)
            return 1
        corrs = [Correspondence(np.array(m.p0), np.array(m.p1), m.confidence)
                 for m in result.fine]
        try:
            h, mask = ransac_homography(corrs, seed=args.seed)
        except EstimationFailure as exc:
            print(f"estimation failed: {exc}", file=sys.stderr)
            return 1
        with open(args.homography_out, "w") as f:
            f.write(format_homography_text(h))
        print(f"homography written ({int(mask.sum())}/{len(corrs)} inliers)")
    return 0


def _cmd_eval(args) -> int:
    provider = _provider(args)
    cfg = configure_ablation(args.ablation or [],
                             MatcherConfig(semantic_mode=provider.mode))
    params = _load_params(args, provider, cfg)
    ecfg = EvalConfig(seed=args.seed, resize_cap=args.cap)
    if os.path.isdir(args.dataset):
        records, warnings = load_hpatches_dir(args.dataset)
        for w in warnings:
            print(f"warning: {w}", file=sys.stderr)
        tasks = tasks_from_records(records, ecfg.resize_cap)
    else:
        tasks = tasks_from_synthetic(parse_manifest(args.dataset), ecfg)
    report = evaluate(tasks, params, provider, cfg, ecfg)
    text = report_to_json(report)
    if args.report:
        with open(args.report, "w") as f:
            f.write(text)
    print(json.dumps(report["auc"]))
    print(f"pairs={report['pairs_total']} failures={report['failures']}")
    return 0


def _cmd_synth(args) -> int:
    os.makedirs(args.out, exist_ok=True)
    spec = DatasetSpec(procedural_n=args.n, master_seed=args.seed)
    scfg = HomographySamplerConfig()
    pcfg = PhotometricConfig()
    lines = []
    for i in range(args.n):
        pair = make_pair(spec.base_image(i), spec.pair_seed(i), scfg, pcfg)
        p0 = os.path.join(args.out, f"pair_{i:04d}_0.pgm")
        p1 = os.path.join(args.out, f"pair_{i:04d}_1.pgm")
        save_pgm(p0, pair.image0)
        save_pgm(p1, pair.image1)
        with open(os.path.join(args.out, f"pair_{i:04d}_H.txt"), "w") as f:
            f.write(format_homography_text(pair.h_gt))
        lines.append(f"{p0} {spec.pair_seed(i)}")
    with open(os.path.join(args.out, "manifest.txt"), "w") as f:
        f.write("\n".join(lines) + "\n")
    print(f"wrote {args.n} pairs to {args.out}")
    return 0


def _cmd_train(args) -> int:
    provider = _provider(args)
    dataset = parse_manifest(args.manifest)
    mcfg = configure_ablation(args.ablation or [],
                              MatcherConfig(semantic_mode=provider.mode))
    tcfg = TrainConfig(epochs=args.epochs, seed=args.seed, matcher=mcfg)
    from .matching import init_model_params
    params = init_model_params(args.seed, provider.channels, mcfg)
    os.makedirs(args.out, exist_ok=True)
    params, rows = train_toy(dataset, params, provider, tcfg,
                             checkpoint_dir=args.out,
                             log_path=os.path.join(args.out, "loss_log.csv"))
    if rows:
        print(f"trained {len(rows)} steps, "
              f"final L_total={rows[-1]['L_total']:.4f}")
    return 0


def _cmd_selftest(_args) -> int:
    from .selftest import run_selftest
    return run_selftest()


def _cmd_export_plots(args) -> int:
    with open(args.report) as f:
        report = json.load(f)
    export_curve_csv(report, args.csv)
    print(f"curve points written to {args.csv}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="semmatch",
        description="Semantic-aware detector-free matching and homography "
                    "estimation")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("match", help="match two images")
    p.add_argument("img0")
    p.add_argument("img1")
    p.add_argument("--checkpoint")
    p.add_argument("--semantic-dir")
    p.add_argument("--out", default="matches.txt")
    p.add_argument("--homography-out")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=_cmd_match)

    p = sub.add_parser("eval", help="corner-error AUC over a dataset")
    p.add_argument("--dataset", required=True,
                   help="HPatches-style directory or dataset manifest")
    p.add_argument("--checkpoint")
    p.add_argument("--semantic-dir")
    p.add_argument("--report")
    p.add_argument("--ablation", action="append",
                   choices=["no_sfb", "no_cross", "no_overlap"])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--cap", type=int, default=128,
                   help="shorter-side resize cap (use 480 to mirror "
                        "full-resolution benchmark setups)")
    p.set_defaults(fn=_cmd_eval)

    p = sub.add_parser("synth", help="generate synthetic pairs")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_synth)

    p = sub.add_parser("train", help="train the toy model")
    p.add_argument("--manifest", required=True)
    p.add_argument("--epochs", type=int, default=3)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--semantic-dir")
    p.add_argument("--ablation", action="append",
                   choices=["no_sfb", "no_cross", "no_overlap"])
    p.set_defaults(fn=_cmd_train)

    p = sub.add_parser("selftest", help="run the built-in oracle suites")
    p.set_defaults(fn=_cmd_selftest)

    p = sub.add_parser("export-plots", help="report JSON -> curve CSV")
    p.add_argument("--report", required=True)
    p.add_argument("--csv", required=True)
    p.set_defaults(fn=_cmd_export_plots)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (DatasetError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
