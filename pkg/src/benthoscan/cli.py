"""Command-line front end: dataset generation, training, evaluation, the
detection-to-count pipeline, hyperparameter sweeps, and report assembly.

Exit codes: 0 success, 1 usage error, 2 bad or mismatched input data,
3 numeric failure (training divergence and the like).

Run layout (everything lands under --out):

    detector.pt / detector_r<k>.pt       detector checkpoints (config inside)
    substrate.pt / substrate_<name>.pt   substrate checkpoints
    cache/<digest>_<video>.jsonl         full-rate detection dumps, keyed by
                                         checkpoint content digest and video
    report_<split>.json                  metric dumps (EvalReport JSON)
    counts_<split>.csv                   per-species counts and signed errors
    sweep.csv, sweep_rows.jsonl          one row per grid combination

The config file is YAML with optional sections `scene`, `splits`,
`withhold_fraction`, `eval_stride`, `detector`, `substrate`, and `pipeline`.
Missing sections fall back to the desk profile: 256x256 frames, two-minute
videos, 3 train / 1 val / 1 test, sized so the whole generate-train-count
loop stays within a half hour on a laptop CPU.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import itertools
import json
import statistics
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from types import SimpleNamespace
from typing import Any, Mapping, Sequence

import numpy as np
import yaml

from .annotations import (
    SPECIES_ORDER,
    SUBSTRATE_ORDER,
    frame_substrate_labels,
    substrate_multihot,
)
from .config import (
    DetectorConfig,
    SubstrateHyper,
    config_hash,
    dataclass_from_dict,
)
from .datasets import (
    GenSpec,
    file_digest,
    gen_spec_from_dict,
    generate_dataset,
    iter_video_frames,
    load_eval_set,
    load_examples,
    load_gt_counts,
    load_intervals,
    load_manifest,
    read_frame_image,
    split_videos,
)
from .detector import (
    infer,
    load_checkpoint,
    save_checkpoint,
    train_detector,
)
from .errors import DataError, NumericError
from .evaluate import (
    EvalReport,
    improvement_report,
    load_report,
    map_bottom_half,
    relative_errors,
    save_report,
)
from .records import Detection, read_detections, write_detections
from .substrate import (
    CombinedSubstrateModel,
    SubstratePrediction,
    load_substrate_checkpoint,
    predict_scores,
    sample_test_wv,
    save_substrate_checkpoint,
    substrate_map,
    train_combined,
    train_single,
    write_substrate_predictions,
)
from .tracker import PipelineParams, pipeline_counts, write_tracks

# Desk profile: fills in any config section the user leaves out. Frame size,
# video length, and split counts are the published desk-scale values; the
# rest keeps the full loop under half an hour of laptop CPU.
DESK_SCENE: dict[str, Any] = {
    "fps": 4.0,
    "object_speed": 6.0,
    "spawn_rate": 0.4,
}
DESK_DETECTOR: dict[str, Any] = {
    "image_size": 256,
    "anchor_scales": [12.0, 18.0, 26.0, 38.0],
    "max_epochs": 6,
    "batch_size": 4,
    "lr": 1e-3,
    "box_feature_dim": 256,
    "global_feature_dim": 64,
}


# --- config plumbing ---------------------------------------------------------


def _load_config(path: str | None) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise DataError(f"config file not found: {p}")
    try:
        raw = yaml.safe_load(p.read_text())
    except yaml.YAMLError as exc:
        raise DataError(f"malformed YAML in {p}: {exc}") from exc
    if raw is None:
        return {}
    if not isinstance(raw, dict):
        raise DataError(f"config root must be a mapping: {p}")
    return raw


def _section(cfg: Mapping, name: str, defaults: Mapping | None = None) -> dict:
    merged = dict(defaults or {})
    given = cfg.get(name, {})
    if not isinstance(given, Mapping):
        raise DataError(f"config section '{name}' must be a mapping")
    merged.update(given)
    return merged


def _gen_spec(cfg: Mapping) -> GenSpec:
    d: dict[str, Any] = {"scene": _section(cfg, "scene", DESK_SCENE)}
    for key in ("splits", "withhold_fraction", "eval_stride"):
        if key in cfg:
            d[key] = cfg[key]
    return gen_spec_from_dict(d)


def _detector_config(cfg: Mapping, seed: int | None) -> DetectorConfig:
    dc = dataclass_from_dict(DetectorConfig, _section(cfg, "detector", DESK_DETECTOR))
    if seed is not None:
        dc = dataclasses.replace(dc, seed=seed)
    return dc


def _substrate_hyper(cfg: Mapping, seed: int | None) -> SubstrateHyper:
    hyper = dataclass_from_dict(SubstrateHyper, _section(cfg, "substrate"))
    if seed is not None:
        hyper = dataclasses.replace(hyper, seed=seed)
    return hyper


def _pipeline_params(
    cfg: Mapping, tau: float | None = None, gamma: int | None = None
) -> PipelineParams:
    d = _section(cfg, "pipeline")
    if tau is not None:
        d["tau"] = tau
    if gamma is not None:
        d["gamma"] = gamma
    known = {f.name for f in dataclasses.fields(PipelineParams)}
    unknown = set(d) - known
    if unknown:
        raise DataError(f"unknown pipeline fields: {', '.join(sorted(unknown))}")
    return PipelineParams(**d)


def _out_dir(args, default: Path | None = None) -> Path:
    out = Path(args.out) if args.out else default
    if out is None:
        raise DataError("--out is required for this command")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _frame_height(manifest: dict, names: Sequence[str]) -> float:
    heights = {manifest["videos"][v]["height"] for v in names}
    if len(heights) != 1:
        raise DataError("videos in the split disagree on frame height")
    return float(heights.pop())


# --- detection caching -------------------------------------------------------


def _video_detections(
    root: Path,
    manifest: dict,
    video: str,
    ckpt_path: Path,
    cache_dir: Path,
    model_box: dict,
) -> list[Detection]:
    """Full-rate detections for one video, cached by checkpoint digest.

    The digest keys the cache to the exact checkpoint bytes, so a stale dump
    from an older model can never be mistaken for the current one.
    """
    digest = file_digest(ckpt_path)
    cache_dir.mkdir(parents=True, exist_ok=True)
    path = cache_dir / f"{digest}_{video}.jsonl"
    if path.exists():
        return read_detections(path)
    if "model" not in model_box:
        model_box["model"] = load_checkpoint(ckpt_path)
    frames = list(iter_video_frames(root, manifest, video))
    dets = infer(model_box["model"], frames)
    tmp = path.with_suffix(".tmp")
    write_detections(tmp, dets)
    tmp.replace(path)
    return dets


def _split_detections(
    root: Path, manifest: dict, split: str, ckpt_path: Path, cache_dir: Path
) -> list[Detection]:
    model_box: dict = {}
    out: list[Detection] = []
    for video in split_videos(manifest, split):
        out.extend(
            _video_detections(root, manifest, video, ckpt_path, cache_dir, model_box)
        )
    return out


# --- report emission ---------------------------------------------------------


def _write_per_class_csv(path: Path, reports: Mapping[str, EvalReport]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["run"] + [sp.value for sp in SPECIES_ORDER] + ["mAP"])
        for name, rep in reports.items():
            row: list[Any] = [name]
            for sp in SPECIES_ORDER:
                ap = rep.per_class_ap.get(sp)
                row.append("" if ap is None else f"{ap:.4f}")
            row.append("" if rep.map50 is None else f"{rep.map50:.4f}")
            w.writerow(row)


def _write_counts_csv(
    path: Path,
    counts: Mapping,
    gt: Mapping,
    errors,
    tau: float,
    gamma: int,
) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["species", "predicted", "truth", "relative_error", "tau", "gamma"])
        for sp in SPECIES_ORDER:
            err = errors.per_species.get(sp)
            w.writerow(
                [
                    sp.value,
                    counts.get(sp, 0),
                    gt.get(sp, 0),
                    "" if err is None else f"{err:.4f}",
                    tau,
                    gamma,
                ]
            )
        w.writerow(
            [
                "mean_abs",
                "",
                "",
                "" if errors.mean_abs is None else f"{errors.mean_abs:.4f}",
                tau,
                gamma,
            ]
        )


def _print_counting(counts, gt, errors) -> None:
    for sp in SPECIES_ORDER:
        if sp in errors.per_species:
            print(
                f"  {sp.value:>6}: predicted {counts.get(sp, 0):3d} "
                f"truth {gt.get(sp, 0):3d} error {errors.per_species[sp]:+.3f}"
            )
    for sp in errors.excluded:
        print(f"  {sp.value:>6}: no ground-truth individuals, excluded")
    if errors.mean_abs is not None:
        print(f"  mean |error| {errors.mean_abs:.4f}")


# --- subcommands -------------------------------------------------------------


def cmd_gen(args) -> int:
    cfg = _load_config(args.config)
    spec = _gen_spec(cfg)
    out = _out_dir(args)
    manifest = generate_dataset(out, spec, args.seed)
    print(f"dataset {out} (hash {manifest['config_hash']})")
    for name in sorted(manifest["videos"]):
        info = manifest["videos"][name]
        print(
            f"  {name}: {info['split']}, {info['n_frames']} frames, "
            f"{len(info['withheld'])} withheld targets"
        )
    return 0


def cmd_train_detector(args) -> int:
    cfg = _load_config(args.config)
    root = Path(args.data)
    manifest = load_manifest(root)
    out = _out_dir(args, root / "runs")
    base = _detector_config(cfg, args.seed)

    train = load_examples(root, manifest, "train")
    val = load_eval_set(root, manifest, "val")
    print(f"training on {len(train)} frames, validating on {len(val.frames)}")

    repeat = args.repeat or 1
    log: list[dict] = []
    maps: list[float] = []
    for r in range(repeat):
        dc = dataclasses.replace(base, seed=base.seed + r)
        res = train_detector(train, val, dc, log=lambda s: print(f"  [{r}] {s}"))
        name = "detector.pt" if repeat == 1 else f"detector_r{r}.pt"
        save_checkpoint(out / name, res.model)
        maps.append(res.best_map)
        log.append(
            {
                "checkpoint": name,
                "seed": dc.seed,
                "config_hash": config_hash(dc),
                "best_epoch": res.best_epoch,
                "best_val_map": res.best_map,
                "val_map_trace": res.val_map_trace,
                "loss_trace": res.loss_trace,
            }
        )
    (out / "train_log.json").write_text(json.dumps(log, indent=2) + "\n")
    mean = statistics.fmean(maps)
    spread = statistics.stdev(maps) if len(maps) > 1 else 0.0
    print(f"val mAP {mean:.4f} +/- {spread:.4f} over {repeat} run(s) -> {out}")
    return 0


def _substrate_frames(root: Path, manifest: dict, split: str, stride: int):
    """Frame records with substrate labels, sampled every `stride` frames."""
    frames = []
    for video, (intervals, _) in zip(
        split_videos(manifest, split), load_intervals(root, manifest, split)
    ):
        info = manifest["videos"][video]
        for f in range(0, info["n_frames"], stride):
            labels = frame_substrate_labels(intervals, f / info["fps"])
            frames.append(
                SimpleNamespace(
                    video=video,
                    frame=f,
                    image=read_frame_image(root, video, f),
                    substrates=substrate_multihot(labels),
                )
            )
    return frames


def cmd_train_substrate(args) -> int:
    cfg = _load_config(args.config)
    root = Path(args.data)
    manifest = load_manifest(root)
    out = _out_dir(args, root / "runs")
    hyper = _substrate_hyper(cfg, args.seed)

    train = _substrate_frames(root, manifest, "train", args.stride)
    val = _substrate_frames(root, manifest, "val", args.stride)
    print(f"{len(train)} training frames, {len(val)} validation frames")

    if args.regime == "single":
        res = train_single(train, val, hyper)
        save_substrate_checkpoint(out / "substrate.pt", res.model, hyper)
        print(
            f"single regime: val mAP {res.best_map:.4f} "
            f"(epoch {res.best_epoch}) -> {out / 'substrate.pt'}"
        )
    else:
        res = train_combined(train, val, hyper)
        for sub, single in zip(SUBSTRATE_ORDER, res.per_substrate):
            path = out / f"substrate_{sub.value.lower()}.pt"
            save_substrate_checkpoint(path, single.model, hyper)
            ap = "none" if single.best_map is None else f"{single.best_map:.4f}"
            print(f"combined regime: {sub.value} AP {ap} -> {path}")
    return 0


def _verify_config_hash(args, cfg: Mapping, model) -> None:
    """Refuse to evaluate a checkpoint that disagrees with --config.

    The seed is excluded from the comparison so repeat-k checkpoints still
    match the config file that produced them.
    """
    if args.config is None or "detector" not in cfg:
        return
    want = _detector_config(cfg, None)
    want = dataclasses.replace(want, seed=model.config.seed)
    if config_hash(want) != config_hash(model.config):
        raise DataError(
            f"checkpoint config hash {config_hash(model.config)} does not match "
            f"--config ({config_hash(want)}); refusing to mix artifacts"
        )


def cmd_eval_det(args) -> int:
    cfg = _load_config(args.config)
    root = Path(args.data)
    manifest = load_manifest(root)
    ckpt = Path(args.checkpoint)
    model = load_checkpoint(ckpt)
    _verify_config_hash(args, cfg, model)
    out = _out_dir(args, ckpt.parent)

    eval_set = load_eval_set(root, manifest, args.split)
    cache_dir = out / "cache"
    dets = _split_detections(root, manifest, args.split, ckpt, cache_dir)
    wanted = {(fr.video, fr.frame) for fr in eval_set.frames}
    report = map_bottom_half(
        [d for d in dets if (d.video, d.frame) in wanted],
        eval_set.frames,
        eval_set.frame_height,
    )
    report.config_hash = config_hash(model.config)

    save_report(out / f"report_{args.split}.json", report)
    _write_per_class_csv(out / f"per_class_ap_{args.split}.csv", {args.split: report})
    shown = "none" if report.map50 is None else f"{report.map50:.4f}"
    print(f"{args.split} mAP@0.5 {shown} over {report.n_eval_frames} frames")
    for sp in SPECIES_ORDER:
        ap = report.per_class_ap.get(sp)
        if ap is not None:
            print(f"  {sp.value:>6}: AP {ap:.4f}")
    return 0


def cmd_eval_substrate(args) -> int:
    root = Path(args.data)
    manifest = load_manifest(root)
    ckpt = Path(args.checkpoint)
    out = _out_dir(args, ckpt.parent)

    if args.regime == "single":
        model, _ = load_substrate_checkpoint(ckpt)
    else:
        stem = ckpt.with_suffix("")
        parts = []
        for sub in SUBSTRATE_ORDER:
            path = Path(f"{stem}_{sub.value.lower()}.pt")
            net, _ = load_substrate_checkpoint(path)
            parts.append(net)
        model = CombinedSubstrateModel(parts)

    names = split_videos(manifest, args.split)
    table = []
    for video, (intervals, _) in zip(
        names, load_intervals(root, manifest, args.split)
    ):
        info = manifest["videos"][video]
        table.append((video, info["n_frames"], info["fps"], intervals))
    wv = sample_test_wv(table)
    if not wv:
        raise DataError(f"split '{args.split}' has no test_wv frames")
    images = [read_frame_image(root, fr.video, fr.frame) for fr in wv]
    scores = predict_scores(model, images)
    labels = np.array([fr.labels for fr in wv], dtype=np.float32)
    mean_ap, per_class = substrate_map(scores, labels)

    preds = [
        SubstratePrediction(fr.video, fr.frame, tuple(float(s) for s in row))
        for fr, row in zip(wv, scores)
    ]
    write_substrate_predictions(out / f"substrate_predictions_{args.split}.jsonl", preds)
    report = EvalReport(
        substrate_ap={s: ap for s, ap in zip(SUBSTRATE_ORDER, per_class)},
        substrate_map=mean_ap,
        n_eval_frames=len(wv),
    )
    save_report(out / f"report_substrate_{args.split}.json", report)

    shown = "none" if mean_ap is None else f"{mean_ap:.4f}"
    print(f"{args.split} substrate mAP {shown} over {len(wv)} test_wv frames")
    for sub, ap in zip(SUBSTRATE_ORDER, per_class):
        print(f"  {sub.value:>8}: " + ("no positives" if ap is None else f"AP {ap:.4f}"))
    return 0


def cmd_pipeline(args) -> int:
    cfg = _load_config(args.config)
    root = Path(args.data)
    manifest = load_manifest(root)
    ckpt = Path(args.checkpoint)
    model = load_checkpoint(ckpt)
    _verify_config_hash(args, cfg, model)
    out = _out_dir(args, ckpt.parent)
    params = _pipeline_params(cfg, args.tau, args.gamma)

    names = split_videos(manifest, args.split)
    height = _frame_height(manifest, names)
    dets = _split_detections(root, manifest, args.split, ckpt, out / "cache")
    counts, tracks = pipeline_counts(dets, params, height)
    gt = load_gt_counts(root, manifest, args.split)
    errors = relative_errors(counts, gt)

    write_tracks(out / f"tracks_{args.split}.jsonl", tracks)
    _write_counts_csv(
        out / f"counts_{args.split}.csv", counts, gt, errors, params.tau, params.gamma
    )
    report = EvalReport(counting=errors, config_hash=config_hash(model.config))
    save_report(out / f"report_pipeline_{args.split}.json", report)

    print(
        f"pipeline on {args.split}: tau {params.tau} gamma {params.gamma}, "
        f"{len(dets)} detections, {len(tracks)} tracks"
    )
    _print_counting(counts, gt, errors)
    return 0


# --- sweep -------------------------------------------------------------------

DETECTOR_KNOBS = ("alpha", "beta", "rho", "lr")
PIPELINE_KNOBS = ("tau", "gamma")


def _combos(grid: Mapping[str, Sequence]) -> list[dict]:
    keys = sorted(grid)
    out = []
    for values in itertools.product(*(grid[k] for k in keys)):
        out.append(dict(zip(keys, values)))
    return out


def _sweep_cell(
    root: str,
    out: str,
    det_dict: dict,
    seeds: list[int],
    pipe_combos: list[dict],
    pipeline_base: dict,
) -> list[dict]:
    """All repeats of one detector combination; returns per-run records.

    Module-level so a worker pool can pickle it. Checkpoints and detection
    dumps land in shared content-keyed caches, making re-runs no-ops.
    """
    root_p, out_p = Path(root), Path(out)
    manifest = load_manifest(root_p)
    base = dataclass_from_dict(DetectorConfig, det_dict)
    train = None
    val_eval = load_eval_set(root_p, manifest, "val")
    splits = ["val"]
    try:
        split_videos(manifest, "test")
        splits.append("test")
    except DataError:
        pass
    frames_by_split = {"val": val_eval.frames}
    if "test" in splits:
        frames_by_split["test"] = load_eval_set(root_p, manifest, "test").frames
    heights = {s: _frame_height(manifest, split_videos(manifest, s)) for s in splits}

    records = []
    for seed in seeds:
        dc = dataclasses.replace(base, seed=seed)
        ckpt_dir = out_p / "checkpoints"
        ckpt_dir.mkdir(parents=True, exist_ok=True)
        ckpt = ckpt_dir / f"det_{config_hash(dc)}_s{seed}.pt"
        if not ckpt.exists():
            if train is None:
                train = load_examples(root_p, manifest, "train")
            res = train_detector(train, val_eval, dc)
            save_checkpoint(ckpt, res.model)
        rec: dict[str, Any] = {
            "detector": {k: det_dict[k] for k in DETECTOR_KNOBS if k in det_dict},
            "seed": seed,
            "config_hash": config_hash(dc),
            "checkpoint": str(ckpt),
        }
        for split in splits:
            dets = _split_detections(root_p, manifest, split, ckpt, out_p / "cache")
            wanted = {(fr.video, fr.frame) for fr in frames_by_split[split]}
            rep = map_bottom_half(
                [d for d in dets if (d.video, d.frame) in wanted],
                frames_by_split[split],
                heights[split],
            )
            rec[f"{split}_map"] = rep.map50
            gt = load_gt_counts(root_p, manifest, split)
            for combo in pipe_combos:
                params = PipelineParams(**{**pipeline_base, **combo})
                counts, _ = pipeline_counts(dets, params, heights[split])
                errors = relative_errors(counts, gt)
                key = f"{split}_err_tau{combo.get('tau', params.tau)}_g{combo.get('gamma', params.gamma)}"
                rec[key] = errors.mean_abs
        records.append(rec)
    return records


def cmd_sweep(args) -> int:
    cfg = _load_config(args.config)
    grid_cfg = _load_config(args.grid)
    if "grid" not in grid_cfg:
        raise DataError("grid file needs a 'grid' section listing value lists")
    grid = grid_cfg["grid"]
    unknown = set(grid) - set(DETECTOR_KNOBS) - set(PIPELINE_KNOBS)
    if unknown:
        raise DataError(f"unknown sweep knobs: {', '.join(sorted(unknown))}")
    for key, values in grid.items():
        if not isinstance(values, (list, tuple)) or not values:
            raise DataError(f"grid entry '{key}' must be a non-empty list")

    root = Path(args.data or grid_cfg.get("dataset", ""))
    if not str(root):
        raise DataError("sweep needs --data or a 'dataset' path in the grid file")
    load_manifest(root)
    out = _out_dir(args, root / "sweep")

    base_seed = args.seed if args.seed is not None else int(grid_cfg.get("seed", 0))
    repeat = args.repeat or int(grid_cfg.get("repeat", 4))
    seeds = [base_seed + r for r in range(repeat)]

    det_section = _section(cfg, "detector", DESK_DETECTOR)
    det_section.update(grid_cfg.get("base", {}))
    pipe_base = _section(cfg, "pipeline")

    det_combos = _combos({k: v for k, v in grid.items() if k in DETECTOR_KNOBS})
    pipe_combos = _combos({k: v for k, v in grid.items() if k in PIPELINE_KNOBS})

    jobs = []
    for det_combo in det_combos:
        det_dict = {**det_section, **det_combo}
        jobs.append((str(root), str(out), det_dict, seeds, pipe_combos, pipe_base))

    if args.workers > 1:
        with ProcessPoolExecutor(max_workers=args.workers) as pool:
            cell_records = list(pool.map(_sweep_cell, *zip(*jobs)))
    else:
        cell_records = [_sweep_cell(*job) for job in jobs]

    rows = []
    all_records: list[dict] = []
    for det_combo, records in zip(det_combos, cell_records):
        all_records.extend(records)
        splits = [s for s in ("val", "test") if f"{s}_map" in records[0]]
        resolved = dataclass_from_dict(DetectorConfig, {**det_section, **det_combo})
        for pipe_combo in pipe_combos:
            row: dict[str, Any] = {}
            for k in DETECTOR_KNOBS:
                row[k] = getattr(resolved, k)
            defaults = PipelineParams(**pipe_base)
            row["tau"] = pipe_combo.get("tau", defaults.tau)
            row["gamma"] = pipe_combo.get("gamma", defaults.gamma)
            row["repeat"] = len(seeds)
            row["seeds"] = " ".join(str(s) for s in seeds)
            for split in splits:
                maps = [r[f"{split}_map"] for r in records if r[f"{split}_map"] is not None]
                key = f"{split}_err_tau{row['tau']}_g{row['gamma']}"
                errs = [r[key] for r in records if r.get(key) is not None]
                row[f"{split}_map_mean"] = statistics.fmean(maps) if maps else ""
                row[f"{split}_map_std"] = (
                    statistics.stdev(maps) if len(maps) > 1 else 0.0 if maps else ""
                )
                row[f"{split}_err_mean"] = statistics.fmean(errs) if errs else ""
                row[f"{split}_err_std"] = (
                    statistics.stdev(errs) if len(errs) > 1 else 0.0 if errs else ""
                )
            rows.append(row)

    columns = list(rows[0])
    with open(out / "sweep.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns)
        w.writeheader()
        w.writerows(rows)
    with open(out / "sweep_rows.jsonl", "w") as fh:
        for rec in all_records:
            fh.write(json.dumps(rec) + "\n")

    print(f"sweep: {len(rows)} rows x {repeat} repeats -> {out / 'sweep.csv'}")
    for row in rows:
        knobs = " ".join(f"{k}={row[k]}" for k in DETECTOR_KNOBS + ("tau", "gamma"))
        vm = row.get("val_map_mean", "")
        shown = f"{vm:.4f}" if isinstance(vm, float) else "n/a"
        print(f"  {knobs}: val mAP {shown}")
    return 0


def cmd_report(args) -> int:
    reports: dict[str, EvalReport] = {}
    for item in args.runs:
        if "=" not in item:
            raise DataError(f"--runs entries look like NAME=path/to/report.json: {item}")
        name, _, path = item.partition("=")
        reports[name] = load_report(path)
    out = _out_dir(args)

    _write_per_class_csv(out / "per_class_ap.csv", reports)

    counting = {n: r for n, r in reports.items() if r.counting is not None}
    if counting:
        with open(out / "counting_errors.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["run"] + [sp.value for sp in SPECIES_ORDER] + ["mean_abs"])
            for name, rep in counting.items():
                row: list[Any] = [name]
                for sp in SPECIES_ORDER:
                    err = rep.counting.per_species.get(sp)
                    row.append("" if err is None else f"{err:.4f}")
                mean = rep.counting.mean_abs
                row.append("" if mean is None else f"{mean:.4f}")
                w.writerow(row)

    lines = []
    if args.baseline is not None:
        if args.baseline not in reports:
            raise DataError(f"baseline '{args.baseline}' not among --runs names")
        base = reports[args.baseline].map50
        if base is None or base <= 0:
            raise DataError("baseline run has no usable mAP")
        variants = {
            n: r.map50
            for n, r in reports.items()
            if n != args.baseline and r.map50 is not None
        }
        gains = improvement_report(base, variants)
        with open(out / "improvements.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["run", "map50", "gain_pct_vs_" + args.baseline])
            for name, gain in gains.items():
                w.writerow([name, f"{variants[name]:.4f}", f"{gain:+.1f}"])
        lines.append(f"baseline {args.baseline}: mAP {base:.4f}")
        for name, gain in gains.items():
            lines.append(f"  {name}: mAP {variants[name]:.4f} ({gain:+.1f}%)")

    for name, rep in reports.items():
        shown = "none" if rep.map50 is None else f"{rep.map50:.4f}"
        lines.append(f"{name}: mAP {shown}, {rep.n_eval_frames} eval frames")
        if rep.substrate_map is not None:
            lines.append(f"  substrate mAP {rep.substrate_map:.4f}")
        if rep.counting is not None and rep.counting.mean_abs is not None:
            lines.append(f"  mean |counting error| {rep.counting.mean_abs:.4f}")
    text = "\n".join(lines) + "\n"
    (out / "summary.txt").write_text(text)
    print(text, end="")

    if args.plots:
        _emit_plots(out, reports)
    return 0


def _emit_plots(out: Path, reports: Mapping[str, EvalReport]) -> None:
    try:
        import matplotlib
    except ImportError:
        raise DataError(
            "matplotlib is not installed; install the [plots] extra for --plots"
        ) from None
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(10, 4))
    width = 0.8 / max(1, len(reports))
    ticks = np.arange(len(SPECIES_ORDER))
    for i, (name, rep) in enumerate(reports.items()):
        aps = [rep.per_class_ap.get(sp) or 0.0 for sp in SPECIES_ORDER]
        ax.bar(ticks + i * width, aps, width, label=name)
    ax.set_xticks(ticks + 0.4 - width / 2)
    ax.set_xticklabels([sp.value for sp in SPECIES_ORDER], rotation=45, ha="right")
    ax.set_ylabel("AP@0.5")
    ax.legend()
    fig.tight_layout()
    fig.savefig(out / "per_class_ap.png", dpi=120)
    plt.close(fig)
    print(f"wrote {out / 'per_class_ap.png'}")


# --- argument parsing --------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="benthoscan",
        description="Synthetic benthic transect counting: generate, train, evaluate.",
    )
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML config file (desk profile when omitted)")
    common.add_argument("--seed", type=int, default=None, help="seed override")
    common.add_argument("--out", help="output directory")
    common.add_argument(
        "--repeat", type=int, default=None,
        help="training repetitions (default 1; sweeps default to 4)",
    )

    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", parents=[common], help="render a synthetic dataset")
    p.set_defaults(func=cmd_gen, seed_default=0)

    p = sub.add_parser("train-detector", parents=[common], help="train the detector")
    p.add_argument("--data", required=True, help="dataset directory")
    p.set_defaults(func=cmd_train_detector)

    p = sub.add_parser(
        "train-substrate", parents=[common], help="train substrate classifiers"
    )
    p.add_argument("--data", required=True)
    p.add_argument("--regime", choices=("single", "combined"), default="single")
    p.add_argument("--stride", type=int, default=8, help="frame sampling stride")
    p.set_defaults(func=cmd_train_substrate)

    p = sub.add_parser("eval-det", parents=[common], help="detector mAP on a split")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="val")
    p.set_defaults(func=cmd_eval_det)

    p = sub.add_parser(
        "eval-substrate", parents=[common], help="substrate AP on test_wv frames"
    )
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="val")
    p.add_argument("--regime", choices=("single", "combined"), default="single")
    p.set_defaults(func=cmd_eval_substrate)

    p = sub.add_parser(
        "pipeline", parents=[common], help="detect, track, and count a split"
    )
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--tau", type=float, default=None, help="confidence floor")
    p.add_argument("--gamma", type=int, default=None, help="track length floor")
    p.set_defaults(func=cmd_pipeline)

    p = sub.add_parser("sweep", parents=[common], help="hyperparameter grid sweep")
    p.add_argument("--grid", required=True, help="YAML grid file")
    p.add_argument("--data", help="dataset directory (else 'dataset' in the grid file)")
    p.add_argument("--workers", type=int, default=1, help="parallel grid cells")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("report", parents=[common], help="assemble comparison tables")
    p.add_argument(
        "--runs", nargs="+", required=True, metavar="NAME=REPORT_JSON",
        help="named report files to compare",
    )
    p.add_argument("--baseline", help="run name the improvement table compares against")
    p.add_argument("--plots", action="store_true", help="emit PNG figures")
    p.set_defaults(func=cmd_report)

    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code in (0, None) else 1
    if args.seed is None and getattr(args, "seed_default", None) is not None:
        args.seed = args.seed_default
    try:
        return args.func(args)
    except DataError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except NumericError as err:
        print(f"numeric failure: {err}", file=sys.stderr)
        return 3


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
