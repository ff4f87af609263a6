"""SGD with momentum, evaluation and the epoch loop."""

from __future__ import annotations

import csv
import io
import logging
import math
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .detector import Model, assign_targets, build_model, decode_predictions, detection_loss, forward, tiny_config
from .errors import ConfigError, NonFiniteError
from .metrics import ap_sweep, gts_from_labels, nms, per_class_ap
from .params import decay_flags, named_parameters, set_training
from .tensor import no_grad
from .tensorio import save_checkpoint

log = logging.getLogger(__name__)

HISTORY_FIELDS = ("epoch", "loss", "box", "obj", "cls", "grad_norm", "AP50")


def seed_override(seed: int) -> int:
    """``PRNET_SEED`` wins over any configured seed."""
    env = os.environ.get("PRNET_SEED")
    if env is None or env.strip() == "":
        return seed
    try:
        return int(env)
    except ValueError:
        raise ConfigError(f"PRNET_SEED must be an integer, got {env!r}") from None


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.01
    momentum: float = 0.937
    weight_decay: float = 0.0005
    batch_size: int = 8
    epochs: int = 30
    patience: int = 50
    seed: int = 0
    grad_clip: float = 10.0
    conf_thresh: float = 0.001
    nms_iou: float = 0.6
    max_det: int = 100
    lr_final: float = 0.01  # final lr as a fraction of ``lr``; linear decay over ``epochs``

    def __post_init__(self):
        if self.lr < 0 or self.weight_decay < 0 or not 0 <= self.momentum < 1:
            raise ConfigError("lr and weight_decay must be >= 0 and momentum in [0, 1)")
        if self.batch_size < 1 or self.epochs < 1 or self.patience < 1:
            raise ConfigError("batch_size, epochs and patience must be positive")
        if self.grad_clip < 0:
            raise ConfigError("grad_clip must be >= 0 (0 disables clipping)")
        if not 0 <= self.lr_final <= 1:
            raise ConfigError("lr_final must lie in [0, 1]")
        if not 0 <= self.conf_thresh <= 1:
            raise ConfigError("conf_thresh must lie in [0, 1]")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown train config key(s): {sorted(extra)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class SGDState:
    velocity: list[np.ndarray] = field(default_factory=list)
    steps: int = 0


def sgd_momentum_step(params: Sequence, grads: Sequence[np.ndarray], cfg: TrainConfig,
                      state: SGDState, decay: Sequence[bool] | None = None,
                      names: Sequence[str] | None = None) -> SGDState:
    """``v <- m v + g + wd w`` then ``w <- w - lr v``, in place.

    Weight decay enters the momentum buffer, and only where ``decay`` is true
    (all parameters when ``decay`` is None).
    """
    if not state.velocity:
        state.velocity = [np.zeros_like(p.data) for p in params]
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            g = np.zeros_like(p.data)
        if not np.all(np.isfinite(g)):
            name = names[i] if names else f"#{i}"
            raise NonFiniteError(f"non-finite gradient for parameter {name} at step {state.steps}")
        v = state.velocity[i]
        v *= cfg.momentum
        v += g
        if cfg.weight_decay and (decay is None or decay[i]):
            v += cfg.weight_decay * p.data
        p.data -= cfg.lr * v
    state.steps += 1
    return state


def epoch_lr(cfg: TrainConfig, epoch: int) -> float:
    """Linear decay from ``lr`` at epoch 1 toward ``lr * lr_final`` at ``epochs + 1``."""
    x = (epoch - 1) / cfg.epochs
    return cfg.lr * ((1.0 - x) * (1.0 - cfg.lr_final) + cfg.lr_final)


def clip_grad_norm(grads: Sequence[np.ndarray], max_norm: float) -> float:
    """Scale all gradients in place so their joint L2 norm is at most ``max_norm``."""
    total = math.sqrt(math.fsum(float(np.vdot(g, g)) for g in grads if g is not None))
    if max_norm > 0 and total > max_norm:
        k = max_norm / (total + 1e-6)
        for g in grads:
            if g is not None:
                g *= k
    return total


def train_step(model: Model, images, labels, cfg: TrainConfig, state: SGDState, cache: dict | None = None):
    """One forward/backward/update; returns (loss breakdown, grad norm)."""
    if cache is None:
        cache = {}
    if "params" not in cache:
        named = list(named_parameters(model))
        cache["names"] = [n for n, _ in named]
        cache["params"] = [t for _, t in named]
        cache["decay"] = decay_flags(model)
    params = cache["params"]
    for p in params:
        p.grad = None
    set_training(model, True)
    preds = forward(model, images)
    targets = assign_targets(labels, images.shape[2])
    loss = detection_loss(preds, targets)
    loss.total.backward()
    grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]
    norm = clip_grad_norm(grads, cfg.grad_clip)
    sgd_momentum_step(params, grads, cfg, state, cache["decay"], cache["names"])
    return loss, norm


def predict(model: Model, dataset, indices: Sequence[int], cfg: TrainConfig) -> list:
    """Post-NMS detections for ``indices``; image ids are dataset indices."""
    set_training(model, False)
    dets = []
    with no_grad():
        for start in range(0, len(indices), cfg.batch_size):
            chunk = list(indices[start:start + cfg.batch_size])
            images, _ = dataset.load_batch(chunk)
            preds = forward(model, images)
            for k, idx in enumerate(chunk):
                one = [P.data[k:k + 1] for P in preds]
                d = decode_predictions(one, cfg.conf_thresh, images.shape[2], image_offset=idx)
                d = nms(d, cfg.nms_iou)
                d.sort(key=lambda e: -e.score)
                dets.extend(d[:cfg.max_det])
    set_training(model, True)
    return dets


def evaluate(model: Model, dataset, indices: Sequence[int] | None = None,
             cfg: TrainConfig | None = None, full: bool = True) -> dict:
    """COCO-style report {AP, AP50, AP75, per_class, num_images}."""
    cfg = cfg or TrainConfig()
    if indices is None:
        indices = dataset.indices("val") or dataset.indices()
    indices = list(indices)
    dets = predict(model, dataset, indices, cfg)
    gts = [g for i in indices for g in gts_from_labels([dataset.labels(i)], image_offset=i)]
    if full:
        report = ap_sweep(dets, gts)
    else:
        from .metrics import average_precision

        report = {"AP50": average_precision(dets, gts, 0.5)}
    report["per_class"] = {str(c): v for c, v in per_class_ap(dets, gts, 0.5).items()}
    report["num_images"] = len(indices)
    return report


@dataclass
class TrainResult:
    history: list[dict]
    best_ap50: float
    best_epoch: int
    stopped_early: bool


def history_csv(history: Sequence[dict]) -> str:
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(HISTORY_FIELDS)
    for h in history:
        wr.writerow([h["epoch"]] + [repr(float(h[k])) for k in HISTORY_FIELDS[1:]])
    return buf.getvalue()


def train_loop(model: Model, dataset, cfg: TrainConfig, out_dir=None,
               train_indices: Sequence[int] | None = None,
               val_indices: Sequence[int] | None = None) -> TrainResult:
    """Seeded epochs with per-epoch val AP50 and patience-based early stop.

    With ``out_dir`` set, writes ``best.json``/``best.bin`` whenever AP50
    improves, ``last.json``/``last.bin`` after every epoch and ``history.csv``.
    A non-finite loss aborts the run and leaves earlier checkpoints intact.
    """
    train_idx = list(dataset.indices("train") if train_indices is None else train_indices)
    if not train_idx:
        raise ConfigError("training needs at least one training image")
    if val_indices is None:
        val_indices = dataset.indices("val") or train_idx
    val_idx = list(val_indices)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    rng = np.random.default_rng(cfg.seed)
    state = SGDState()
    cache: dict = {}
    history: list[dict] = []
    best_ap, best_epoch, since_best = -math.inf, 0, 0
    stopped = False
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(train_idx))
        step_cfg = replace(cfg, lr=epoch_lr(cfg, epoch))
        sums = {"loss": 0.0, "box": 0.0, "obj": 0.0, "cls": 0.0, "grad_norm": 0.0}
        batches = 0
        for start in range(0, len(order), cfg.batch_size):
            chunk = [train_idx[j] for j in order[start:start + cfg.batch_size]]
            images, labels = dataset.load_batch(chunk)
            try:
                loss, norm = train_step(model, images, labels, step_cfg, state, cache)
            except NonFiniteError as e:
                if out is not None:
                    (out / "history.csv").write_text(history_csv(history))
                raise NonFiniteError(f"epoch {epoch}, batch {batches}: {e}") from None
            sums["loss"] += float(loss.total.data)
            sums["box"] += loss.box
            sums["obj"] += loss.obj
            sums["cls"] += loss.cls
            sums["grad_norm"] += norm
            batches += 1
        ap50 = evaluate(model, dataset, val_idx, cfg, full=False)["AP50"]
        ap50 = 0.0 if ap50 is None else ap50
        row = {"epoch": epoch, **{k: v / batches for k, v in sums.items()}, "AP50": ap50}
        history.append(row)
        log.info("epoch %d loss %.4f AP50 %.4f", epoch, row["loss"], ap50)
        if ap50 > best_ap:
            best_ap, best_epoch, since_best = ap50, epoch, 0
            if out is not None:
                save_checkpoint(model, out / "best.json", {"epoch": epoch, "AP50": ap50, "train": cfg.to_dict()})
        else:
            since_best += 1
        if out is not None:
            save_checkpoint(model, out / "last.json", {"epoch": epoch, "AP50": ap50, "train": cfg.to_dict()})
            (out / "history.csv").write_text(history_csv(history))
        if since_best >= cfg.patience:
            stopped = epoch < cfg.epochs
            break
    return TrainResult(history, best_ap, best_epoch, stopped)


@dataclass
class NeckComparison:
    seeds: list[int]
    prn: list[float]
    panfpn: list[float]
    seconds: float

    @property
    def margin(self) -> float:
        return float(np.mean(self.prn) - np.mean(self.panfpn))

    def to_dict(self) -> dict:
        return {"seeds": self.seeds, "prn_AP50": self.prn, "panfpn_AP50": self.panfpn,
                "mean_prn": float(np.mean(self.prn)), "mean_panfpn": float(np.mean(self.panfpn)),
                "margin": self.margin, "seconds": self.seconds}

    def to_text(self) -> str:
        lines = [f"{'seed':>4}  {'PRN AP50':>9}  {'PAN-FPN AP50':>12}"]
        lines += [f"{s:>4}  {a:9.4f}  {b:12.4f}" for s, a, b in zip(self.seeds, self.prn, self.panfpn)]
        lines.append(f"{'mean':>4}  {np.mean(self.prn):9.4f}  {np.mean(self.panfpn):12.4f}")
        lines.append(f"margin {100 * self.margin:+.2f} AP50 points")
        return "\n".join(lines)


def compare_necks(dataset, seeds: Sequence[int] = (0, 1, 2), cfg: TrainConfig | None = None,
                  arch_overrides: dict | None = None) -> NeckComparison:
    """Train the tiny PRN and PAN-FPN detectors per seed; collect best val AP50."""
    import time

    cfg = cfg or TrainConfig()
    out = NeckComparison(list(seeds), [], [], 0.0)
    t0 = time.perf_counter()
    for seed in seeds:
        run_cfg = replace(cfg, seed=seed)
        for neck in ("prn", "panfpn"):
            model = build_model(tiny_config(neck, seed, **(arch_overrides or {})))
            res = train_loop(model, dataset, run_cfg)
            getattr(out, neck).append(res.best_ap50)
            log.info("compare_necks seed %d %s best AP50 %.4f", seed, neck, res.best_ap50)
    out.seconds = time.perf_counter() - t0
    return out
