from __future__ import annotations

import logging
import math
import time
from concurrent.futures import Future, ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Any, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.special import expit

from .calibration import apply_temperature, mve_mc_dice_loss_grad
from .errors import CarbsegError, DataError, TrainingAborted
from .evaluation import confusion, dice_coefficient
from .imagecore import AugmentationSpec, ChannelPair, Image2D, TileSet, augment, tile_rng
from .losses import DEFAULT_SMOOTH, dice_loss, dice_loss_from_logits
from .tensornet import ParameterStore, UNetConfig, adam_step, backward, build_unet, forward


logger = logging.getLogger(__name__)

__all__ = [
    "TrainConfig", "EpochRecord", "TrainReport", "PlateauScheduler", "EarlyStopper",
    "SearchSpace", "dice_loss", "train", "evaluate_tiles", "predict_logits_image",
    "predict_image", "sample_trials", "hyperparameter_search",
]


@dataclass(frozen=True)
class TrainConfig:
    unet: UNetConfig = field(default_factory=UNetConfig)
    lr0: float = 2e-4
    lr_decay_factor: float = 0.5
    lr_patience: int = 7
    early_stop_patience: int = 14
    batch_size: int = 32
    max_epochs: int = 200
    dice_smooth: float = DEFAULT_SMOOTH
    augment: bool = True
    augmentation: AugmentationSpec = field(default_factory=AugmentationSpec)
    mve_samples: int = 16
    threads: int = 1
    seed: int = 0

    def __post_init__(self) -> None:
        if not 0.0 < self.lr_decay_factor < 1.0:
            raise DataError(f"lr_decay_factor must lie in (0, 1), got {self.lr_decay_factor}")
        if self.lr_patience < 1 or self.early_stop_patience < 1:
            raise DataError("Patience values must be >= 1")
        if self.batch_size < 1:
            raise DataError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.max_epochs < 1:
            raise DataError(f"max_epochs must be >= 1, got {self.max_epochs}")
        if self.lr0 < 0:
            raise DataError(f"lr0 must be >= 0, got {self.lr0}")
        if self.dice_smooth < 0:
            raise DataError(f"dice_smooth must be >= 0, got {self.dice_smooth}")
        if self.mve_samples < 1 or self.threads < 1:
            raise DataError("mve_samples and threads must be >= 1")


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    val_dice: float
    lr: float
    seconds: float = 0.0


@dataclass
class TrainReport:
    epochs: List[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    best_val_loss: float = math.inf
    stopped_early: bool = False
    checkpoint: Optional[str] = None

    @property
    def epochs_run(self) -> int:
        return len(self.epochs)

    @property
    def best_val_dice(self) -> float:
        for r in self.epochs:
            if r.epoch == self.best_epoch:
                return r.val_dice
        return float("nan")

    def to_frame(self, include_timing: bool = False) -> pd.DataFrame:
        cols = ["epoch", "train_loss", "val_loss", "val_dice", "lr"] + (["seconds"] if include_timing else [])
        return pd.DataFrame([asdict(r) for r in self.epochs], columns=["epoch", "train_loss", "val_loss", "val_dice", "lr", "seconds"])[cols]

    def summary(self) -> Dict[str, Any]:
        return {
            "epochs_run": self.epochs_run,
            "best_epoch": self.best_epoch,
            "best_val_loss": self.best_val_loss,
            "best_val_dice": self.best_val_dice,
            "stopped_early": self.stopped_early,
            "checkpoint": self.checkpoint,
        }


class PlateauScheduler:
    """
    Multiply the learning rate by `factor` once the monitored loss has failed
    to strictly decrease for more than `patience` consecutive epochs.
    """

    def __init__(self, lr: float, factor: float = 0.5, patience: int = 7) -> None:
        self.lr = lr
        self.factor = factor
        self.patience = patience
        self.best = math.inf
        self.bad_epochs = 0

    def step(self, loss: float) -> float:
        if loss < self.best:
            self.best = loss
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
        if self.bad_epochs > self.patience:
            self.lr *= self.factor
            self.bad_epochs = 0
            logger.info("Validation loss plateaued; learning rate reduced to %.3g", self.lr)
        return self.lr


class EarlyStopper:
    """Signals a stop after `patience` consecutive epochs without a strict decrease."""

    def __init__(self, patience: int = 14) -> None:
        self.patience = patience
        self.best = math.inf
        self.best_epoch = 0
        self.bad_epochs = 0

    def update(self, epoch: int, loss: float) -> bool:
        if loss < self.best:
            self.best = loss
            self.best_epoch = epoch
            self.bad_epochs = 0
            return False
        self.bad_epochs += 1
        return self.bad_epochs >= self.patience


# -----------------------------
# Batching
# -----------------------------

def _check_tiles(tiles: TileSet, cfg: UNetConfig, name: str) -> None:
    if len(tiles) == 0:
        raise DataError(f"The {name} split is empty")
    size = tiles[0].size
    if size % cfg.divisor:
        raise DataError(f"Tile size {size} is not divisible by 2**encoder_blocks = {cfg.divisor}")


def _assemble(tiles: TileSet, indices: Sequence[int], cfg: TrainConfig, epoch: int) -> Tuple[np.ndarray, np.ndarray]:
    if cfg.augment:
        picked = [augment(tiles[i], cfg.augmentation, tile_rng(cfg.seed, epoch, i)) for i in indices]
        picked_set = TileSet(picked)
        return picked_set.stack_inputs(), picked_set.stack_targets()
    return tiles.stack_inputs(indices), tiles.stack_targets(indices)


def _batches(tiles: TileSet, cfg: TrainConfig, epoch: int, pool: ThreadPoolExecutor) -> Iterator[Tuple[np.ndarray, np.ndarray]]:
    """
    Seeded shuffle, then batches assembled on worker threads one batch ahead
    of the optimizer. Each tile draws from its own (seed, epoch, index)
    stream, so results do not depend on scheduling.
    """
    order = np.random.default_rng([cfg.seed, epoch]).permutation(len(tiles))
    chunks = [order[i:i + cfg.batch_size] for i in range(0, len(order), cfg.batch_size)]
    pending: Optional[Future] = None
    for k in range(len(chunks)):
        current = pending if pending is not None else pool.submit(_assemble, tiles, chunks[k], cfg, epoch)
        pending = pool.submit(_assemble, tiles, chunks[k + 1], cfg, epoch) if k + 1 < len(chunks) else None
        yield current.result()


def _loss_and_grad(store: ParameterStore, logits: np.ndarray, targets: np.ndarray, cfg: TrainConfig,
                   rng: np.random.Generator) -> Tuple[float, np.ndarray]:
    if store.cfg.mve_head:
        k = store.cfg.out_channels
        loss, dmu, dlv = mve_mc_dice_loss_grad(logits[:, :k], logits[:, k:], targets, cfg.mve_samples, rng, cfg.dice_smooth)
        return loss, np.concatenate([dmu, dlv], axis=1).astype(logits.dtype)
    return dice_loss_from_logits(logits, targets, cfg.dice_smooth)


def evaluate_tiles(store: ParameterStore, tiles: TileSet, batch_size: int = 32,
                   eps: float = DEFAULT_SMOOTH) -> Tuple[float, float]:
    """Eval-mode (pooled soft Dice loss, pooled hard Dice) over a whole tile set."""
    k = store.cfg.out_channels
    probs: List[np.ndarray] = []
    targets: List[np.ndarray] = []
    for start in range(0, len(tiles), batch_size):
        idx = list(range(start, min(start + batch_size, len(tiles))))
        logits = forward(store, tiles.stack_inputs(idx), mode="eval")
        probs.append(expit(logits[:, :k].astype(np.float64)))
        targets.append(tiles.stack_targets(idx))
    p = np.concatenate(probs)
    y = np.concatenate(targets)
    loss = dice_loss(p, y, eps)
    hard = dice_coefficient(confusion(p >= 0.5, y > 0.5))
    return loss, hard


# -----------------------------
# Training loop
# -----------------------------

def train(train_set: TileSet, val_set: TileSet, cfg: TrainConfig,
          store: Optional[ParameterStore] = None) -> Tuple[ParameterStore, TrainReport]:
    """
    Adam on the Dice loss with plateau LR decay and early stopping on the
    validation loss. Returns the parameters of the best validation epoch.
    """
    _check_tiles(train_set, cfg.unet, "train")
    _check_tiles(val_set, cfg.unet, "validation")
    store = store if store is not None else build_unet(cfg.unet, seed=cfg.seed)
    scheduler = PlateauScheduler(cfg.lr0, cfg.lr_decay_factor, cfg.lr_patience)
    stopper = EarlyStopper(cfg.early_stop_patience)
    report = TrainReport()
    best = store.snapshot()
    lr = cfg.lr0

    with ThreadPoolExecutor(max_workers=cfg.threads) as pool:
        for epoch in range(1, cfg.max_epochs + 1):
            t0 = time.perf_counter()
            losses: List[float] = []
            for b, (x, y) in enumerate(_batches(train_set, cfg, epoch, pool)):
                logits = forward(store, x, mode="train")
                loss, dlogits = _loss_and_grad(store, logits, y, cfg, tile_rng(cfg.seed, epoch, b, 1))
                if not math.isfinite(loss):
                    store.restore(best)
                    raise TrainingAborted(f"Non-finite training loss at epoch {epoch}, batch {b}", params=store, report=report)
                store.zero_grad()
                backward(store, dlogits)
                try:
                    adam_step(store, lr=lr)
                except CarbsegError as e:
                    store.restore(best)
                    raise TrainingAborted(f"Epoch {epoch}, batch {b}: {e}", params=store, report=report) from e
                losses.append(loss)

            val_loss, val_dice = evaluate_tiles(store, val_set, cfg.batch_size, cfg.dice_smooth)
            if not math.isfinite(val_loss):
                store.restore(best)
                raise TrainingAborted(f"Non-finite validation loss at epoch {epoch}", params=store, report=report)
            record = EpochRecord(epoch, float(np.mean(losses)), val_loss, val_dice, lr, time.perf_counter() - t0)
            report.epochs.append(record)
            logger.info("epoch %d train_loss=%.5f val_loss=%.5f val_dice=%.4f lr=%.3g",
                        epoch, record.train_loss, val_loss, val_dice, lr)

            if val_loss < report.best_val_loss:
                report.best_val_loss = val_loss
                report.best_epoch = epoch
                best = store.snapshot()
            lr = scheduler.step(val_loss)
            if stopper.update(epoch, val_loss):
                report.stopped_early = True
                logger.info("Early stopping at epoch %d (best epoch %d)", epoch, report.best_epoch)
                break

    store.restore(best)
    return store, report


# -----------------------------
# Inference
# -----------------------------

def predict_logits_image(store: ParameterStore, pair: ChannelPair, tile_size: int = 128, batch_size: int = 8) -> np.ndarray:
    """
    (head_channels, H, W) logits for a full image: mirror-pad to whole tiles,
    run each tile in eval mode, crop back.
    """
    cfg = store.cfg
    if tile_size < 1 or tile_size % cfg.divisor:
        raise DataError(f"tile_size {tile_size} is not divisible by 2**encoder_blocks = {cfg.divisor}")
    x = pair.stacked()
    if x.shape[0] != cfg.in_channels:
        raise DataError(f"Network expects {cfg.in_channels} channels, image pair has {x.shape[0]}")
    h, w = pair.shape
    ph = -h % tile_size
    pw = -w % tile_size
    if ph or pw:
        x = np.pad(x, ((0, 0), (0, ph), (0, pw)), mode="symmetric")
    H, W = x.shape[1:]
    origins = [(r, c) for r in range(0, H, tile_size) for c in range(0, W, tile_size)]
    out = np.zeros((cfg.head_channels, H, W), dtype=np.float32)
    for start in range(0, len(origins), batch_size):
        chunk = origins[start:start + batch_size]
        batch = np.stack([x[:, r:r + tile_size, c:c + tile_size] for r, c in chunk])
        logits = forward(store, batch, mode="eval")
        for (r, c), z in zip(chunk, logits):
            out[:, r:r + tile_size, c:c + tile_size] = z
    return out[:, :h, :w]


def predict_image(store: ParameterStore, pair: ChannelPair, temperature: float = 1.0,
                  tile_size: int = 128, batch_size: int = 8) -> Tuple[Image2D, np.ndarray]:
    """Probability map sigmoid(z/T) of the first output channel and its 0.5 mask."""
    logits = predict_logits_image(store, pair, tile_size, batch_size)
    prob = apply_temperature(logits[0], temperature)
    return Image2D(data=prob, pixel_size_nm=pair.pixel_size_nm), prob >= 0.5


# -----------------------------
# Hyperparameter search
# -----------------------------

@dataclass(frozen=True)
class SearchSpace:
    lr0_range: Tuple[float, float] = (1e-5, 1e-2)
    early_stop_patience_range: Tuple[int, int] = (5, 20)
    base_features_choices: Tuple[int, ...] = (8, 16, 32, 64, 128)
    encoder_blocks_choices: Tuple[int, ...] = (1, 2, 3, 4)
    budget: int = 40
    trial_max_epochs: int = 20
    objective: str = "val_dice"    # "val_dice" (maximize) | "val_loss" (minimize)
    seed: int = 0

    def __post_init__(self) -> None:
        lo, hi = self.lr0_range
        if not 0 < lo <= hi:
            raise DataError(f"lr0_range must be positive and ordered, got {self.lr0_range}")
        plo, phi = self.early_stop_patience_range
        if not 1 <= plo <= phi:
            raise DataError(f"early_stop_patience_range must be ordered and >= 1, got {self.early_stop_patience_range}")
        if not self.base_features_choices or not self.encoder_blocks_choices:
            raise DataError("Choice lists must be non-empty")
        if self.budget < 1 or self.trial_max_epochs < 1:
            raise DataError("budget and trial_max_epochs must be >= 1")
        if self.objective not in ("val_dice", "val_loss"):
            raise DataError(f"objective must be 'val_dice' or 'val_loss', got {self.objective!r}")


def sample_trials(space: SearchSpace) -> List[Dict[str, Any]]:
    """Seeded random draws: log-uniform lr0, integer patience, categorical widths and depths."""
    rng = np.random.default_rng(space.seed)
    lo, hi = np.log(space.lr0_range[0]), np.log(space.lr0_range[1])
    trials = []
    for i in range(space.budget):
        trials.append({
            "trial": i,
            "lr0": float(np.exp(rng.uniform(lo, hi))),
            "early_stop_patience": int(rng.integers(space.early_stop_patience_range[0], space.early_stop_patience_range[1] + 1)),
            "base_features": int(rng.choice(space.base_features_choices)),
            "encoder_blocks": int(rng.choice(space.encoder_blocks_choices)),
        })
    return trials


def _run_trial(params: Dict[str, Any], base: TrainConfig, max_epochs: int,
               train_set: TileSet, val_set: TileSet) -> Dict[str, Any]:
    row = dict(params)
    try:
        unet = replace(base.unet, base_features=params["base_features"], encoder_blocks=params["encoder_blocks"])
        cfg = replace(base, unet=unet, lr0=params["lr0"], early_stop_patience=params["early_stop_patience"],
                      max_epochs=max_epochs, threads=1)
        if train_set[0].size % unet.divisor:
            raise DataError(f"tile size {train_set[0].size} not divisible by {unet.divisor}")
    except DataError as e:
        logger.warning("Trial %d skipped: %s", params["trial"], e)
        return {**row, "status": "skipped", "reason": str(e), "val_loss": np.nan, "val_dice": np.nan,
                "best_epoch": 0, "epochs_run": 0}
    try:
        _, report = train(train_set, val_set, cfg)
    except TrainingAborted as e:
        logger.warning("Trial %d failed: %s", params["trial"], e)
        return {**row, "status": "failed", "reason": str(e), "val_loss": np.nan, "val_dice": np.nan,
                "best_epoch": 0, "epochs_run": 0}
    return {**row, "status": "ok", "reason": "", "val_loss": report.best_val_loss,
            "val_dice": report.best_val_dice, "best_epoch": report.best_epoch, "epochs_run": report.epochs_run}


def hyperparameter_search(space: SearchSpace, train_set: TileSet, val_set: TileSet,
                          base: Optional[TrainConfig] = None, threads: int = 1) -> pd.DataFrame:
    """
    Random search over lr0, early-stopping patience, first-block width and
    encoder depth. One row per trial; infeasible draws are kept as skipped rows.
    """
    base = base or TrainConfig()
    _check_tiles(train_set, UNetConfig(encoder_blocks=1), "train")
    _check_tiles(val_set, UNetConfig(encoder_blocks=1), "validation")
    trials = sample_trials(space)
    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        rows = list(pool.map(lambda p: _run_trial(p, base, space.trial_max_epochs, train_set, val_set), trials))

    table = pd.DataFrame(rows, columns=[
        "trial", "lr0", "early_stop_patience", "base_features", "encoder_blocks",
        "status", "reason", "val_loss", "val_dice", "best_epoch", "epochs_run",
    ])
    table["objective"] = space.objective
    table["is_best"] = False
    ok = table["status"] == "ok"
    if ok.any():
        scores = table.loc[ok, space.objective]
        best = scores.idxmax() if space.objective == "val_dice" else scores.idxmin()
        table.loc[best, "is_best"] = True
    return table
