"""Dataset ingestion and end-to-end corner-error AUC evaluation.

Supports the HPatches directory layout (per-sequence folders of images
1..N plus `H_1_k` ground-truth files) and synthetic manifests. Each pair
runs the full matcher, RANSAC on the fine matches, and the corner-error
metric; estimation failures count as infinite error. Reports serialize to
byte-stable JSON under a fixed seed.
"""
from __future__ import annotations

import hashlib
import json
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .features import Image, SemanticProvider, bilinear_resize_grid, \
    image_from_array, load_image
from .geometry import (Correspondence, EstimationFailure, GeometryError,
                       Homography, auc, corner_error, parse_homography_text,
                       ransac_homography)
from .matching import MatcherConfig, MatchingError, match_pipeline
from .synth import DatasetSpec, HomographySamplerConfig, PhotometricConfig, \
    make_pair

AUC_THRESHOLDS = (1, 3, 5, 10)


class DatasetError(ValueError):
    pass


@dataclass
class SequenceRecord:
    name: str
    ref_path: str
    pairs: list[tuple[str, Homography]]
    tag: str  # illumination | viewpoint | synthetic


@dataclass
class PairTask:
    seq: str
    pair: str
    image0: Image
    image1: Image
    h_gt: Homography
    width: int   # reference-image extent the corner metric uses
    height: int


@dataclass
class EvalConfig:
    ransac_threshold: float = 3.0
    ransac_confidence: float = 0.9999
    ransac_max_iters: int = 2000
    seed: int = 0
    resize_cap: int = 128  # shorter image side after resize; 0 disables
    sampler: HomographySamplerConfig = field(
        default_factory=HomographySamplerConfig)
    photometric: PhotometricConfig | None = field(
        default_factory=PhotometricConfig)


def _find_image(seq_dir: str, stem: str) -> str | None:
    for ext in (".pgm", ".ppm"):
        p = os.path.join(seq_dir, stem + ext)
        if os.path.isfile(p):
            return p
    return None


def load_hpatches_dir(root: str) -> tuple[list[SequenceRecord], list[str]]:
    """One record per sequence folder; image 1 is the reference.

    Malformed pairs are skipped with a warning string; a root with no
    usable sequence at all raises DatasetError.
    """
    if not os.path.isdir(root):
        raise DatasetError(f"no such dataset directory: {root}")
    records: list[SequenceRecord] = []
    warnings: list[str] = []
    for name in sorted(os.listdir(root)):
        seq_dir = os.path.join(root, name)
        if not os.path.isdir(seq_dir):
            continue
        ref = _find_image(seq_dir, "1")
        if ref is None:
            warnings.append(f"{name}: missing reference image 1")
            continue
        pairs: list[tuple[str, Homography]] = []
        k = 2
        while True:
            target = _find_image(seq_dir, str(k))
            if target is None:
                break
            h_path = os.path.join(seq_dir, f"H_1_{k}")
            if not os.path.isfile(h_path):
                warnings.append(f"{name}: missing H_1_{k}, pair skipped")
                k += 1
                continue
            try:
                with open(h_path) as f:
                    h = parse_homography_text(f.read())
            except (GeometryError, ValueError) as exc:
                warnings.append(f"{name}: bad H_1_{k} ({exc}), pair skipped")
                k += 1
                continue
            pairs.append((target, h))
            k += 1
        if not pairs:
            warnings.append(f"{name}: no valid pairs")
            continue
        tag = ("illumination" if name.startswith("i_")
               else "viewpoint" if name.startswith("v_") else "synthetic")
        records.append(SequenceRecord(name=name, ref_path=ref,
                                      pairs=pairs, tag=tag))
    if not records:
        raise DatasetError(f"no valid sequences under {root}")
    return records, warnings


def _resize_image(img: Image, cap: int) -> tuple[Image, float]:
    shorter = min(img.orig_h, img.orig_w)
    if cap <= 0 or shorter <= cap:
        return img, 1.0
    s = cap / shorter
    th = max(int(round(img.orig_h * s)), 1)
    tw = max(int(round(img.orig_w * s)), 1)
    resized = bilinear_resize_grid(
        img.pixels[:img.orig_h, :img.orig_w, None], th, tw)[:, :, 0]
    return image_from_array(np.clip(resized, 0.0, 1.0)), s


def tasks_from_records(records: list[SequenceRecord],
                       cap: int) -> list[PairTask]:
    tasks = []
    for rec in records:
        ref = load_image(rec.ref_path)
        ref_r, s0 = _resize_image(ref, cap)
        for target_path, h in rec.pairs:
            tgt = load_image(target_path)
            tgt_r, s1 = _resize_image(tgt, cap)
            m = np.diag([s1, s1, 1.0]) @ h.matrix @ np.diag([1 / s0, 1 / s0, 1.0])
            tasks.append(PairTask(
                seq=rec.name,
                pair=os.path.basename(target_path),
                image0=ref_r, image1=tgt_r, h_gt=Homography(m),
                width=ref_r.orig_w, height=ref_r.orig_h))
    return tasks


def tasks_from_synthetic(spec: DatasetSpec, cfg: EvalConfig) -> list[PairTask]:
    tasks = []
    for i in range(len(spec)):
        base = spec.base_image(i)
        pair = make_pair(base, spec.pair_seed(i), cfg.sampler, cfg.photometric)
        tasks.append(PairTask(seq="synthetic", pair=f"{i:04d}",
                              image0=pair.image0, image1=pair.image1,
                              h_gt=pair.h_gt,
                              width=pair.image0.orig_w,
                              height=pair.image0.orig_h))
    return tasks


def _eval_one(task: PairTask, index: int, params, provider, mcfg, ecfg,
              bypass_gt: bool) -> dict:
    t0 = time.perf_counter()
    if bypass_gt:
        err = corner_error(task.h_gt, task.h_gt, task.width, task.height)
        return {"seq": task.seq, "pair": task.pair, "error_px": err,
                "time_ms": (time.perf_counter() - t0) * 1e3}
    err = float("inf")
    try:
        result = match_pipeline(task.image0, task.image1, params, provider,
                                mcfg)
        fine = result.fine
    except MatchingError:  # e.g. a fully padded frame; count as a failure
        fine = []
    if len(fine) >= 4:
        corrs = [Correspondence(np.array(m.p0), np.array(m.p1), m.confidence)
                 for m in fine]
        pair_seed = int(np.random.default_rng(
            [ecfg.seed, index]).integers(2**31))
        try:
            h_est, _ = ransac_homography(
                corrs, inlier_threshold=ecfg.ransac_threshold,
                max_iters=ecfg.ransac_max_iters,
                confidence=ecfg.ransac_confidence, seed=pair_seed)
            err = corner_error(h_est, task.h_gt, task.width, task.height)
        except EstimationFailure:
            pass
    return {"seq": task.seq, "pair": task.pair, "error_px": err,
            "time_ms": (time.perf_counter() - t0) * 1e3}


def evaluate(tasks: list[PairTask], params, provider: SemanticProvider,
             mcfg: MatcherConfig, ecfg: EvalConfig,
             bypass_gt: bool = False) -> dict:
    """Corner-error AUC report over a task list.

    Pairs may run in parallel (bounded by SEMMATCH_THREADS); the report
    aggregates in canonical task order either way. Timing is collected
    separately and kept out of the canonical report so identical seeds
    give byte-identical JSON.
    """
    if not tasks:
        raise DatasetError("no evaluation pairs")
    workers = int(os.environ.get("SEMMATCH_THREADS", "1") or "1")
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(
                lambda it: _eval_one(it[1], it[0], params, provider, mcfg,
                                     ecfg, bypass_gt), enumerate(tasks)))
    else:
        rows = [_eval_one(t, i, params, provider, mcfg, ecfg, bypass_gt)
                for i, t in enumerate(tasks)]
    errors = [r["error_px"] for r in rows]
    failures = sum(1 for e in errors if not np.isfinite(e))
    aucs = {str(t): round(100.0 * auc(errors, t), 6) for t in AUC_THRESHOLDS}
    cfg_blob = json.dumps({"matcher": vars(mcfg),
                           "ransac_threshold": ecfg.ransac_threshold,
                           "ransac_confidence": ecfg.ransac_confidence,
                           "ransac_max_iters": ecfg.ransac_max_iters,
                           "resize_cap": ecfg.resize_cap,
                           "seed": ecfg.seed}, sort_keys=True)
    report = {
        "dataset": tasks[0].seq if len({t.seq for t in tasks}) == 1 else "mixed",
        "config_hash": hashlib.sha256(cfg_blob.encode()).hexdigest()[:12],
        "per_pair": [{"seq": r["seq"], "pair": r["pair"],
                      "error_px": (round(r["error_px"], 6)
                                   if np.isfinite(r["error_px"]) else None)}
                     for r in rows],
        "auc": aucs,
        "failures": failures,
        "pairs_total": len(rows),
        "pairs_succeeded": len(rows) - failures,
        "timings_ms": [r["time_ms"] for r in rows],
    }
    return report


def report_to_json(report: dict) -> str:
    """Canonical report serialization; timing stays out for determinism."""
    stable = {k: v for k, v in report.items() if k != "timings_ms"}
    return json.dumps(stable, indent=2, sort_keys=False) + "\n"


def export_curve_csv(report: dict, path: str | os.PathLike) -> None:
    """Cumulative recall-vs-error points for external plotting."""
    errors = sorted(r["error_px"] for r in report["per_pair"]
                    if r["error_px"] is not None)
    n = report["pairs_total"]
    with open(path, "w") as f:
        f.write("error_px,recall\n")
        for i, e in enumerate(errors):
            f.write(f"{e:.6f},{(i + 1) / n:.6f}\n")
