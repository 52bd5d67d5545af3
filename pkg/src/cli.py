from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from .calibration import (
    apply_temperature,
    confidence_error_summary,
    confidence_map,
    expected_calibration_error,
    fit_temperature,
    mve_predictive_probs,
    reliability,
)
from .classical import baseline_segment, draft_mask
from .config import RunConfig, load_run_config, load_scene_config, load_search_space
from .errors import CarbsegError, DataError, TrainingAborted, UsageError
from .evaluation import compare_methods, confusion, dice, dice_coefficient, morphometrics, summarize
from .imagecore import (
    MANIFEST_NAME,
    ChannelPair,
    Image2D,
    TileSet,
    assign_splits,
    crop_pair,
    load_mask,
    load_pair,
    read_manifest,
    read_tileset,
    save_image,
    save_mask,
    split,
    tile,
    write_tileset,
)
from .presets import get_material, get_scene_preset
from .reporting import build_issue_report, to_json, write_csv_atomic, write_json_atomic
from .synthdata import derive_seed, generate_dataset, generate_scene, load_dataset
from .tensorio import load_array, load_checkpoint, load_tensors, save_checkpoint, save_tensors
from .tensornet import ParameterStore, UNetConfig, forward
from .training import TrainConfig, hyperparameter_search, predict_image, predict_logits_image, train


logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"
EXIT_OK = 0
PREDICT_TILE_SIZE = 128


class _Parser(argparse.ArgumentParser):
    """argparse that raises instead of exiting, so usage errors get a JSON summary too."""

    def error(self, message: str) -> None:  # type: ignore[override]
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _floats(text: str) -> Tuple[float, ...]:
    try:
        return tuple(float(p) for p in text.split(",") if p.strip())
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from e


def _wrote(path: Path | str) -> None:
    print(f"Wrote: {path}")


# -----------------------------
# Config plumbing
# -----------------------------

def _flag_overrides(args: argparse.Namespace, mapping: Dict[str, str]) -> List[str]:
    """Dotted overrides for every mapped flag the user actually set."""
    out = []
    for attr, dotted in mapping.items():
        value = getattr(args, attr, None)
        if value is None:
            continue
        if isinstance(value, (list, tuple)):
            value = ",".join(str(v) for v in value)
        out.append(f"{dotted}={value}")
    return out


def _run_config(args: argparse.Namespace, mapping: Optional[Dict[str, str]] = None) -> RunConfig:
    overrides = list(args.set or [])
    overrides += _flag_overrides(args, mapping or {})
    if getattr(args, "threads", None):
        overrides.append(f"training.threads={args.threads}")
    return load_run_config(args.config, overrides)


def _pixel_size(args: argparse.Namespace, fallback: Optional[float] = None) -> Optional[float]:
    if getattr(args, "pixel_size_nm", None) is not None:
        return float(args.pixel_size_nm)
    if getattr(args, "material", None):
        return get_material(args.material).pixel_size_nm
    return fallback


def _require_dir(path: Optional[str], what: str) -> Path:
    if not path:
        raise UsageError(f"{what} directory is required")
    p = Path(path)
    if not p.is_dir():
        raise DataError(f"{what} directory not found: {p}")
    return p


def _read_temperature(args: argparse.Namespace) -> float:
    if getattr(args, "calibration", None):
        path = Path(args.calibration)
        if not path.is_file():
            raise DataError(f"Calibration file not found: {path}")
        try:
            return float(json.loads(path.read_text(encoding="utf-8"))["temperature"])
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
            raise DataError(f"{path}: no usable temperature ({e})") from e
    return float(args.temperature)


# -----------------------------
# Subcommands
# -----------------------------

def cmd_generate(args: argparse.Namespace) -> Dict[str, Any]:
    overrides = list(args.set or [])
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    cfg = load_scene_config(args.config, overrides, preset=args.preset)
    manifest = generate_dataset(cfg, args.n, args.out, threads=args.threads or 1, pixel_size_nm=_pixel_size(args))
    _wrote(manifest)
    return {"out": str(args.out), "n_images": args.n, "height": cfg.height, "width": cfg.width}


def cmd_tile(args: argparse.Namespace) -> Dict[str, Any]:
    run = _run_config(args, {"tile_size": "data.tile_size", "crop_top": "data.crop_top", "crop_bottom": "data.crop_bottom"})
    d = run.data
    tiles = TileSet()
    if args.dataset:
        scenes = load_dataset(_require_dir(args.dataset, "Dataset"))
        for sid, pair, mask in scenes:
            tiles.extend(_tile_one(pair, mask, d.tile_size, d.crop_top, d.crop_bottom, sid))
        n_images = len(scenes)
    else:
        if not (args.se and args.inlens and args.mask):
            raise UsageError("tile needs --se, --inlens and --mask, or --dataset")
        pair = load_pair(args.se, args.inlens)
        source = args.source_id or Path(args.se).stem
        tiles = _tile_one(pair, load_mask(args.mask), d.tile_size, d.crop_top, d.crop_bottom, source)
        n_images = 1
    manifest = write_tileset(args.out, tiles)
    _wrote(manifest)
    return {"out": str(args.out), "tiles": len(tiles), "tile_size": d.tile_size, "images": n_images}


def _tile_one(pair: ChannelPair, mask: np.ndarray, size: int, top: int, bottom: int, source: str) -> TileSet:
    if top or bottom:
        pair = crop_pair(pair, top, bottom)
        mask = mask[top:mask.shape[0] - bottom]
    return tile(pair, mask, size, source_id=source)


def cmd_split(args: argparse.Namespace) -> Dict[str, Any]:
    run = _run_config(args, {"fractions": "data.split_fractions", "seed": "data.split_seed"})
    tile_dir = _require_dir(args.tiles, "Tile")
    tiles = read_tileset(tile_dir)
    per_image = args.per_image or run.data.per_image_split
    parts = split(tiles, run.data.split_fractions, run.data.split_seed, per_image=per_image)
    named = dict(zip(("train", "val", "test"), parts))
    _wrote(assign_splits(tile_dir, named))
    return {"tiles": str(tile_dir), **{k: len(v) for k, v in named.items()}, "per_image": per_image}


BASELINE_FLAGS = {
    "sigma": "baseline.denoise_sigma",
    "tophat_radius": "baseline.tophat_radius",
    "min_size": "baseline.min_component_size",
    "ratio": "baseline.merge_ratio",
}


def cmd_baseline(args: argparse.Namespace) -> Dict[str, Any]:
    run = _run_config(args, BASELINE_FLAGS)
    if args.tiles:
        tiles = read_tileset(_require_dir(args.tiles, "Tile"), args.split)
        out_dir = Path(args.out)
        fg = 0
        for t in tiles:
            pair = ChannelPair(se=Image2D(t.inputs[0]), inlens=Image2D(t.inputs[1]))
            mask = baseline_segment(pair, run.baseline)
            fg += int(mask.sum())
            save_mask(out_dir / f"{t.tile_id}.png", mask)
        print(f"Wrote: {len(tiles)} masks to {out_dir}")
        return {"out": str(out_dir), "tiles": len(tiles), "split": args.split, "foreground_pixels": fg}
    if not (args.se and args.inlens):
        raise UsageError("baseline needs --se and --inlens, or --tiles")
    pair = load_pair(args.se, args.inlens)
    d = run.data
    if d.crop_top or d.crop_bottom:
        pair = crop_pair(pair, d.crop_top, d.crop_bottom)
    mask = baseline_segment(pair, run.baseline)
    _wrote(save_mask(args.out, mask))
    return {"out": str(args.out), "foreground_fraction": float(mask.mean())}


def cmd_train(args: argparse.Namespace) -> Dict[str, Any]:
    run = _run_config(args, {"data": "data.tile_dir", "epochs": "training.max_epochs", "seed": "training.seed"})
    if not run.data.tile_dir:
        raise UsageError("train needs --data or data.tile_dir in the config")
    tile_dir = _require_dir(run.data.tile_dir, "Data")
    train_set = read_tileset(tile_dir, "train")
    val_set = read_tileset(tile_dir, "val")
    cfg = run.train_config()
    store = None
    if args.resume:
        store, _ = load_checkpoint(args.resume)
        cfg = replace(cfg, unet=store.cfg)
    try:
        store, report = train(train_set, val_set, cfg, store=store)
    except TrainingAborted as e:
        if args.report and e.report is not None:
            _wrote(write_csv_atomic(e.report.to_frame(), args.report))
        if e.params is not None:
            _wrote(save_checkpoint(args.out, e.params, {"aborted": True}))
        raise
    report.checkpoint = str(args.out)
    _wrote(save_checkpoint(args.out, store, {"best_epoch": report.best_epoch, "best_val_loss": report.best_val_loss}))
    if args.report:
        _wrote(write_csv_atomic(report.to_frame(include_timing=args.timing), args.report))
    return {"train_tiles": len(train_set), "val_tiles": len(val_set), **report.summary()}


def _tile_logits(store: ParameterStore, tiles: TileSet, batch_size: int) -> np.ndarray:
    out = []
    for start in range(0, len(tiles), batch_size):
        idx = list(range(start, min(start + batch_size, len(tiles))))
        out.append(forward(store, tiles.stack_inputs(idx), mode="eval"))
    return np.concatenate(out).astype(np.float32)


def _predict_tile_size(requested: Optional[int], divisor: int) -> int:
    """Requested size, or the training tile size rounded up to the network's divisor."""
    if requested:
        return requested
    return -(-PREDICT_TILE_SIZE // divisor) * divisor


def cmd_predict(args: argparse.Namespace) -> Dict[str, Any]:
    store, _ = load_checkpoint(args.checkpoint)
    temperature = _read_temperature(args)
    if args.tiles:
        tiles = read_tileset(_require_dir(args.tiles, "Tile"), args.split)
        logits = _tile_logits(store, tiles, args.batch_size)
        masks = logits[:, 0] >= 0.0
        if args.out:
            out_dir = Path(args.out)
            for t, m in zip(tiles, masks):
                save_mask(out_dir / f"{t.tile_id}.png", m)
            print(f"Wrote: {len(tiles)} masks to {out_dir}")
        meta = {"split": args.split, "tile_ids": [t.tile_id for t in tiles]}
        if args.logits_out:
            tensors = {"logits": logits[:, 0]}
            if store.cfg.mve_head:
                tensors["log_variance"] = logits[:, 1]
            _wrote(save_tensors(args.logits_out, tensors, meta))
        if args.targets_out:
            _wrote(save_tensors(args.targets_out, {"targets": tiles.stack_targets()[:, 0]}, meta))
        return {"tiles": len(tiles), "split": args.split, "foreground_fraction": float(masks.mean())}

    if not (args.se and args.inlens and args.out):
        raise UsageError("predict needs --se, --inlens and --out, or --tiles")
    pair = load_pair(args.se, args.inlens)
    tile_size = _predict_tile_size(args.tile_size, store.cfg.divisor)
    prob, mask = predict_image(store, pair, temperature, tile_size, args.batch_size)
    _wrote(save_image(args.out, prob.data))
    if args.mask_out:
        _wrote(save_mask(args.mask_out, mask))
    result: Dict[str, Any] = {"out": str(args.out), "temperature": temperature, "foreground_fraction": float(mask.mean())}
    if args.confidence_out:
        cmap = confidence_map(prob.data)
        _wrote(save_image(args.confidence_out, cmap.level / 2.0, bit_depth=8))
        result["confidence_levels"] = cmap.level_fractions()
    return result


def cmd_calibrate(args: argparse.Namespace) -> Dict[str, Any]:
    run = _run_config(args, {"bins": "calibration.bins"})
    c = run.calibration
    logits = load_array(args.logits, "logits")
    targets = load_array(args.targets, "targets")
    if logits.shape != targets.shape:
        raise DataError(f"Logits {logits.shape} and targets {targets.shape} differ in shape")
    model = fit_temperature(logits, targets, cap=c.temperature_cap)
    doc = {
        **model.to_dict(),
        "bins": c.bins,
        "ece_before": expected_calibration_error(apply_temperature(logits, 1.0), targets, c.bins),
        "ece_after": expected_calibration_error(apply_temperature(logits, model.temperature), targets, c.bins),
        "confidence": confidence_error_summary(apply_temperature(logits, model.temperature), targets, c.confidence_levels),
    }
    _wrote(write_json_atomic(doc, args.out))
    return {k: doc[k] for k in ("temperature", "iterations", "nll_before", "nll_after", "ece_before", "ece_after", "converged")}


def cmd_reliability(args: argparse.Namespace) -> Dict[str, Any]:
    run = _run_config(args, {"bins": "calibration.bins"})
    c = run.calibration
    targets = load_array(args.targets, "targets")
    tensors: Dict[str, np.ndarray] = {}
    if args.probs:
        probs = load_array(args.probs)
    elif args.logits:
        tensors, _ = load_tensors(args.logits)
        if "logits" not in tensors:
            raise DataError(f"{args.logits}: no tensor named 'logits'")
        probs = apply_temperature(tensors["logits"], _read_temperature(args))
    else:
        raise UsageError("reliability needs --probs or --logits")
    if args.mve_out and "log_variance" not in tensors:
        raise UsageError("--mve-out needs logits from a checkpoint with a mean-variance head")
    diagram = reliability(probs, targets, c.bins)
    _wrote(write_csv_atomic(diagram.to_frame(), args.out))
    result: Dict[str, Any] = {"bins": c.bins, "ece": diagram.ece}

    # Logits written from a mean-variance checkpoint carry their own uncertainty.
    if "log_variance" in tensors:
        mve_probs = mve_predictive_probs(tensors["logits"], tensors["log_variance"], c.mve_samples,
                                         np.random.default_rng(args.seed))
        mve_diagram = reliability(mve_probs, targets, c.bins)
        result["ece_mve"] = mve_diagram.ece
        if args.mve_out:
            _wrote(write_csv_atomic(mve_diagram.to_frame(), args.mve_out))
    return result


def cmd_draft(args: argparse.Namespace) -> Dict[str, Any]:
    run = _run_config(args, {"ratio": "baseline.merge_ratio"})
    pair = load_pair(args.se, args.inlens)
    d = run.data
    if d.crop_top or d.crop_bottom:
        pair = crop_pair(pair, d.crop_top, d.crop_bottom)
    mask = draft_mask(pair, run.baseline.merge_ratio, args.threshold)
    _wrote(save_mask(args.out, mask))
    return {"out": str(args.out), "threshold": args.threshold, "foreground_fraction": float(mask.mean())}


def _mask_files(directory: Path) -> Dict[str, Path]:
    files = {}
    for p in sorted(directory.iterdir()):
        if p.suffix.lower() in {".png", ".tif", ".tiff"}:
            key = p.stem[:-5] if p.stem.endswith("_mask") else p.stem
            files[key] = p
    return files


def _target_masks(target_dir: Path, split_name: Optional[str]) -> Dict[str, Callable[[], np.ndarray]]:
    if (target_dir / MANIFEST_NAME).is_file():
        manifest = read_manifest(target_dir)
        if "tiles" in manifest:
            return {
                e["id"]: (lambda f=target_dir / e["files"]["mask"]: load_mask(f))
                for e in manifest["tiles"]
                if split_name is None or e.get("split") == split_name
            }
    return {k: (lambda f=p: load_mask(f)) for k, p in _mask_files(target_dir).items()}


def cmd_evaluate(args: argparse.Namespace) -> Dict[str, Any]:
    pred_dir = _require_dir(args.pred, "Prediction")
    targets = _target_masks(_require_dir(args.target, "Target"), args.split)
    preds = _mask_files(pred_dir)
    if not preds:
        raise DataError(f"No mask images in {pred_dir}")
    missing = sorted(set(preds) - set(targets))
    if missing:
        raise DataError(f"{len(missing)} predictions have no target, e.g. {missing[:3]}")
    rows = []
    for key, path in preds.items():
        c = confusion(load_mask(path), targets[key]())
        rows.append({"tile": key, "dice": dice_coefficient(c), "tp": c.tp, "fp": c.fp, "fn": c.fn})
    table = pd.DataFrame(rows)
    _wrote(write_csv_atomic(table, args.out))
    return summarize(table["dice"]).to_dict()


def _read_dices(path: str) -> pd.DataFrame:
    p = Path(path)
    if not p.is_file():
        raise DataError(f"Dice table not found: {p}")
    table = pd.read_csv(p)
    if not {"tile", "dice"} <= set(table.columns):
        raise DataError(f"{p}: expected columns 'tile' and 'dice', got {list(table.columns)}")
    return table[["tile", "dice"]]


def cmd_compare(args: argparse.Namespace) -> Dict[str, Any]:
    run = _run_config(args, {"alpha": "evaluation.alpha"})
    a, b = _read_dices(args.a), _read_dices(args.b)
    if set(a["tile"]) != set(b["tile"]):
        raise DataError("The two Dice tables cover different tiles; comparison must be paired")
    merged = a.merge(b, on="tile", suffixes=("_a", "_b")).sort_values("tile", kind="stable")
    labels = (args.label_a, args.label_b)
    report = compare_methods(merged["dice_a"].tolist(), merged["dice_b"].tolist(),
                             run.evaluation.alpha, labels, merged["tile"].tolist(),
                             run.evaluation.exact_max_n)
    _wrote(write_json_atomic(report.to_dict(), args.out))
    if args.table:
        _wrote(write_csv_atomic(report.table, args.table))
    w = report.wilcoxon
    return {
        "n": len(merged),
        "median_a": report.summary_a.median,
        "median_b": report.summary_b.median,
        "p_value": w.p_value if w else None,
        "reject": w.reject if w else None,
    }


def cmd_quantify(args: argparse.Namespace) -> Dict[str, Any]:
    run = _run_config(args, {
        "connectivity": "evaluation.connectivity",
        "ecd_bin_nm": "evaluation.ecd_bin_nm",
        "large_ecd_nm": "evaluation.large_ecd_nm",
    })
    px = _pixel_size(args, run.data.pixel_size_nm)
    if px is None:
        raise UsageError("quantify needs --pixel-size-nm, --material or data.pixel_size_nm")
    e = run.evaluation
    result = morphometrics(load_mask(args.mask), px, e.connectivity, e.ecd_bin_nm, e.large_ecd_nm)
    _wrote(write_csv_atomic(result.components, args.out))
    if args.histogram:
        _wrote(write_csv_atomic(result.histogram_frame(), args.histogram))
    return {"pixel_size_nm": px, **result.summary()}


def cmd_hpo(args: argparse.Namespace) -> Dict[str, Any]:
    space_overrides = list(args.space_set or [])
    space_overrides += _flag_overrides(args, {"budget": "budget", "objective": "objective", "trial_epochs": "trial_max_epochs"})
    space = load_search_space(args.space, space_overrides)
    run = _run_config(args, {"data": "data.tile_dir"})
    if not run.data.tile_dir:
        raise UsageError("hpo needs --data or data.tile_dir in the config")
    tile_dir = _require_dir(run.data.tile_dir, "Data")
    table = hyperparameter_search(space, read_tileset(tile_dir, "train"), read_tileset(tile_dir, "val"),
                                  base=run.train_config(), threads=args.threads or 1)
    _wrote(write_csv_atomic(table, args.out))
    best = table[table["is_best"]]
    summary: Dict[str, Any] = {"trials": len(table), "ok": int((table["status"] == "ok").sum()), "objective": space.objective}
    if len(best):
        row = best.iloc[0]
        summary["best"] = {k: row[k] for k in ("trial", "lr0", "early_stop_patience", "base_features", "encoder_blocks", "val_loss", "val_dice")}
    return summary


# -----------------------------
# End-to-end synthetic pipeline
# -----------------------------

REPRO_UNET = UNetConfig(encoder_blocks=1, base_features=8)


def _repro_mve(mve_cfg: TrainConfig, train_set: TileSet, val_set: TileSet, test_set: TileSet,
               out_dir: Path, seed: int) -> Dict[str, Any]:
    store, _ = train(train_set, val_set, mve_cfg)
    logits = _tile_logits(store, test_set, mve_cfg.batch_size)
    targets = test_set.stack_targets()[:, 0]
    probs = mve_predictive_probs(logits[:, 0], logits[:, 1], mve_cfg.mve_samples, np.random.default_rng(seed))
    diagram = reliability(probs, targets)
    write_csv_atomic(diagram.to_frame(), out_dir / "reliability_mve.csv")
    dices = [dice(z >= 0.0, t.target) for t, z in zip(test_set, logits[:, 0])]
    return {"ece": diagram.ece, "unet_dice_median": summarize(dices).median}


def run_repro(seed: int, out_dir: Path, n_scenes: int = 10, scene_size: int = 192, tile_size: int = 64,
              epochs: int = 40, threads: int = 1, mve: bool = False) -> Dict[str, Any]:
    """
    Desk-scale version of the whole workflow on synthetic scenes: tile,
    split, train a one-block U-Net, run the baseline, compare per test tile,
    calibrate on validation logits, and score one held-out scene rendered
    with a shifted preset. With `mve`, a second network with a mean-variance
    head is trained on the same split and its sampled reliability is scored
    next to the temperature-scaled one.
    """
    out_dir.mkdir(parents=True, exist_ok=True)
    scene_cfg = get_scene_preset("default", height=scene_size, width=scene_size, carbide_count=(6, 12))
    tiles = TileSet()
    for i in range(n_scenes):
        pair, mask = generate_scene(replace(scene_cfg, seed=derive_seed(seed, i)))
        tiles.extend(tile(pair, mask, tile_size, source_id=f"scene_{i:03d}"))
    train_set, val_set, test_set = split(tiles, (0.8, 0.1, 0.1), seed)

    cfg = TrainConfig(unet=REPRO_UNET, lr0=1e-2, batch_size=8, max_epochs=epochs, threads=threads, seed=seed)
    store, report = train(train_set, val_set, cfg)
    write_csv_atomic(report.to_frame(), out_dir / "training.csv")

    test_logits = _tile_logits(store, test_set, cfg.batch_size)[:, 0]
    unet_dices, base_dices = [], []
    for t, z in zip(test_set, test_logits):
        pair = ChannelPair(se=Image2D(t.inputs[0]), inlens=Image2D(t.inputs[1]))
        unet_dices.append(dice(z >= 0.0, t.target))
        base_dices.append(dice(baseline_segment(pair), t.target))
    comparison = compare_methods(unet_dices, base_dices, 0.001, ("unet", "baseline"), [t.tile_id for t in test_set])
    write_csv_atomic(comparison.table, out_dir / "dices.csv")

    val_logits = _tile_logits(store, val_set, cfg.batch_size)[:, 0]
    test_targets = test_set.stack_targets()[:, 0]
    temperature: Optional[float] = None
    ece_after: Optional[float] = None
    try:
        temperature = fit_temperature(val_logits, val_set.stack_targets()[:, 0]).temperature
        ece_after = expected_calibration_error(apply_temperature(test_logits, temperature), test_targets)
        write_csv_atomic(reliability(apply_temperature(test_logits, temperature), test_targets).to_frame(),
                         out_dir / "reliability.csv")
    except DataError as e:
        logger.warning("Temperature not fitted: %s", e)
    ece_before = expected_calibration_error(apply_temperature(test_logits, 1.0), test_targets)

    shifted = get_scene_preset("shifted", height=scene_size, width=scene_size, carbide_count=(6, 12),
                               seed=derive_seed(seed, n_scenes))
    g_pair, g_mask = generate_scene(shifted)
    g_unet = predict_logits_image(store, g_pair, tile_size)[0] >= 0.0

    summary: Dict[str, Any] = {
        "seed": seed,
        "n_test_tiles": len(test_set),
        "unet_dice_median": comparison.summary_a.median,
        "baseline_dice_median": comparison.summary_b.median,
        "wilcoxon_p": comparison.wilcoxon.p_value if comparison.wilcoxon else None,
        "temperature": temperature,
        "ece_before": ece_before,
        "ece_after": ece_after,
        "best_epoch": report.best_epoch,
        "generalization": {
            "unet_dice": dice(g_unet, g_mask),
            "baseline_dice": dice(baseline_segment(g_pair), g_mask),
        },
    }
    if mve:
        summary["mve"] = _repro_mve(mve_cfg=replace(cfg, unet=replace(REPRO_UNET, mve_head=True)),
                                    train_set=train_set, val_set=val_set, test_set=test_set,
                                    out_dir=out_dir, seed=seed)
    write_json_atomic(summary, out_dir / "summary.json")
    return summary


def cmd_repro(args: argparse.Namespace) -> Dict[str, Any]:
    out_dir = Path(args.out)
    summary = run_repro(args.seed, out_dir, args.scenes, args.scene_size, args.tile_size, args.epochs,
                        args.threads or 1, mve=args.mve)
    _wrote(out_dir / "summary.json")
    return summary


# -----------------------------
# Parser
# -----------------------------

def _config_parent() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", default=None, help="Run config (TOML).")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="Override a config value, e.g. training.lr0=1e-3 (repeatable).")
    return p


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="carbseg", description="Carbide segmentation in two-detector SEM micrographs.")
    parser.add_argument("--threads", type=int, default=None, help="Upper bound on worker threads.")
    parser.add_argument("-v", "--verbose", action="store_true", help="Debug logging.")
    parser.add_argument("-q", "--quiet", action="store_true", help="Warnings and errors only.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    cfg = _config_parent()

    p = sub.add_parser("generate", help="Write synthetic SE/InLens scenes with exact masks.")
    p.add_argument("--config", default=None, help="Scene config (TOML).")
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.add_argument("--preset", default=None, help="default | hard | shifted | fullframe")
    p.add_argument("--n", type=int, default=12)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--pixel-size-nm", type=float, default=None)
    p.add_argument("--material", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("tile", parents=[cfg], help="Cut image pairs and masks into square tiles.")
    p.add_argument("--se")
    p.add_argument("--inlens")
    p.add_argument("--mask")
    p.add_argument("--source-id", default=None)
    p.add_argument("--dataset", default=None, help="Tile every scene of a generated dataset.")
    p.add_argument("--tile-size", type=int, default=None)
    p.add_argument("--crop-top", type=int, default=None)
    p.add_argument("--crop-bottom", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_tile)

    p = sub.add_parser("split", parents=[cfg], help="Assign tiles to train/val/test.")
    p.add_argument("--tiles", required=True)
    p.add_argument("--fractions", type=_floats, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--per-image", action="store_true")
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("baseline", parents=[cfg], help="Classical top-hat + Otsu segmentation.")
    p.add_argument("--se")
    p.add_argument("--inlens")
    p.add_argument("--tiles", default=None)
    p.add_argument("--split", default="test")
    p.add_argument("--sigma", type=float, default=None)
    p.add_argument("--tophat-radius", type=int, default=None)
    p.add_argument("--min-size", type=int, default=None)
    p.add_argument("--ratio", type=float, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_baseline)

    p = sub.add_parser("draft", parents=[cfg], help="Rough mask to start a manual annotation from.")
    p.add_argument("--se", required=True)
    p.add_argument("--inlens", required=True)
    p.add_argument("--ratio", type=float, default=None)
    p.add_argument("--threshold", type=float, default=None, help="Gray value; Otsu when omitted.")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_draft)

    p = sub.add_parser("train", parents=[cfg], help="Train the U-Net on a split tile directory.")
    p.add_argument("--data", default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--resume", default=None, help="Start from an existing checkpoint.")
    p.add_argument("--out", required=True, help="Checkpoint path.")
    p.add_argument("--report", default=None, help="Per-epoch CSV.")
    p.add_argument("--timing", action="store_true", help="Include wall-clock seconds in the report.")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="Probability map and mask from a checkpoint.")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--se")
    p.add_argument("--inlens")
    p.add_argument("--tiles", default=None)
    p.add_argument("--split", default="val")
    p.add_argument("--temperature", type=float, default=1.0)
    p.add_argument("--calibration", default=None, help="calib.json from `calibrate`.")
    p.add_argument("--tile-size", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--out", default=None)
    p.add_argument("--mask-out", default=None)
    p.add_argument("--confidence-out", default=None)
    p.add_argument("--logits-out", default=None)
    p.add_argument("--targets-out", default=None)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("calibrate", parents=[cfg], help="Fit the temperature on validation logits.")
    p.add_argument("--logits", required=True)
    p.add_argument("--targets", required=True)
    p.add_argument("--bins", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("reliability", parents=[cfg], help="Reliability diagram data as CSV.")
    p.add_argument("--probs", default=None)
    p.add_argument("--logits", default=None)
    p.add_argument("--temperature", type=float, default=1.0)
    p.add_argument("--calibration", default=None)
    p.add_argument("--targets", required=True)
    p.add_argument("--bins", type=int, default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0, help="Sampling seed for mean-variance logits.")
    p.add_argument("--mve-out", default=None, help="Reliability CSV of the mean-variance predictive probabilities.")
    p.set_defaults(func=cmd_reliability)

    p = sub.add_parser("evaluate", help="Per-tile Dice between prediction and target masks.")
    p.add_argument("--pred", required=True)
    p.add_argument("--target", required=True, help="Mask directory or tile directory with a manifest.")
    p.add_argument("--split", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("compare", parents=[cfg], help="Paired Wilcoxon comparison of two Dice tables.")
    p.add_argument("--a", required=True)
    p.add_argument("--b", required=True)
    p.add_argument("--label-a", default="a")
    p.add_argument("--label-b", default="b")
    p.add_argument("--alpha", type=float, default=None)
    p.add_argument("--table", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("quantify", parents=[cfg], help="Carbide morphometrics from a mask.")
    p.add_argument("--mask", required=True)
    p.add_argument("--pixel-size-nm", type=float, default=None)
    p.add_argument("--material", default=None, help="JFL | ANP-10")
    p.add_argument("--connectivity", type=int, default=None)
    p.add_argument("--ecd-bin-nm", type=float, default=None)
    p.add_argument("--large-ecd-nm", type=float, default=None)
    p.add_argument("--histogram", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_quantify)

    p = sub.add_parser("hpo", parents=[cfg], help="Random hyperparameter search.")
    p.add_argument("--space", default=None, help="Search space (TOML).")
    p.add_argument("--space-set", action="append", metavar="KEY=VALUE")
    p.add_argument("--budget", type=int, default=None)
    p.add_argument("--objective", choices=["val_loss", "val_dice"], default=None)
    p.add_argument("--trial-epochs", type=int, default=None)
    p.add_argument("--data", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_hpo)

    p = sub.add_parser("repro", help="Run the whole pipeline on synthetic scenes.")
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--scenes", type=int, default=10)
    p.add_argument("--scene-size", type=int, default=192)
    p.add_argument("--tile-size", type=int, default=64)
    p.add_argument("--epochs", type=int, default=40)
    p.add_argument("--mve", action="store_true", help="Also train a mean-variance head and score its reliability.")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_repro)
    return parser


def _configure_logging(verbose: bool, quiet: bool) -> None:
    level = logging.DEBUG if verbose else (logging.WARNING if quiet else logging.INFO)
    logging.basicConfig(level=level, format=LOG_FORMAT, stream=sys.stderr, force=True)


def _error_summary(command: Optional[str], e: CarbsegError) -> Dict[str, Any]:
    for issue in getattr(e, "issues", []):
        print(f"{issue.severity.upper()} {issue.code}: {issue.message}", file=sys.stderr)
    print(f"error: {e}", file=sys.stderr)
    summary = {"command": command, "status": "error", "exit_code": e.exit_code,
               "error": str(e), "error_type": type(e).__name__}
    if getattr(e, "issues", None):
        summary["issues"] = build_issue_report(e.issues)
    return summary


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    command = None
    try:
        args = parser.parse_args(argv)
        command = args.command
        if command is None:
            parser.print_usage(sys.stderr)
            raise UsageError("a subcommand is required")
        _configure_logging(args.verbose, args.quiet)
        result = args.func(args)
        summary = {"command": command, "status": "ok", "exit_code": EXIT_OK, **result}
    except CarbsegError as e:
        summary = _error_summary(command, e)
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        logger.debug("Unhandled I/O failure", exc_info=True)
        summary = _error_summary(command, DataError(f"{type(e).__name__}: {e}"))
    print(to_json(summary, indent=None))
    return int(summary["exit_code"])


if __name__ == "__main__":
    raise SystemExit(main())
