"""Toy detector: strided backbone (ESSamp in the first two downsamplers),
PRN or PAN-FPN neck, and a three-scale anchor-free head with its loss.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, fields, replace
from typing import Any, Sequence

import numpy as np

from .blocks import (
    AvgPoolDown,
    ConvBlockParams,
    conv_block,
    init_weights,
    make_conv_block,
    make_down,
    resize_down2,
)
from .errors import ConfigError, ContractViolation, InvalidArgument, NonFiniteError
from .essamp import ESSampConfig, ESSampParams, essamp_forward, make_essamp
from .neck import FeatureSet, NeckState, PRNConfig, PRNParams, check_features, make_prn, prn_forward, top_down_fuse
from .tensor import ConvWeights, Tensor, _accum, concat_channels, conv2d, make_op, sigmoid, upsample_nearest2

log = logging.getLogger(__name__)

LEVEL_NAMES = ("P2", "P3", "P4")
STRIDES = (4, 8, 16)
# max-side thresholds in pixels: < 16 -> P2, [16, 32) -> P3, >= 32 -> P4
LEVEL_THRESHOLDS = (16.0, 32.0)


# --------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class ArchConfig:
    neck: str = "prn"
    stages: int = 1
    neck_widths: tuple[int, int, int] = (32, 64, 128)
    neck_down: str = "conv"
    essamp_layers: int = 2
    essamp_d: int = 2
    num_classes: int = 3
    widths: tuple[int, int, int, int, int] = (16, 32, 64, 128, 256)
    seed: int = 0
    obj_prior: float = 0.01

    def __post_init__(self):
        if self.neck not in ("prn", "panfpn"):
            raise ConfigError(f"neck must be 'prn' or 'panfpn', got {self.neck!r}")
        if not 0 <= self.essamp_layers <= 2:
            raise ConfigError(f"essamp.layers must be in {{0, 1, 2}}, got {self.essamp_layers}")
        if self.essamp_d <= 0 or self.num_classes <= 0:
            raise ConfigError("essamp.d and num_classes must be positive")
        if len(self.widths) != 5 or min(self.widths) <= 0:
            raise ConfigError(f"widths must be five positive ints, got {self.widths}")
        if len(self.neck_widths) != 3 or min(self.neck_widths) <= 0:
            raise ConfigError(f"prn.widths must be three positive ints, got {self.neck_widths}")
        if self.neck_down not in ("conv", "avgpool"):
            raise ConfigError(f"neck_down must be 'conv' or 'avgpool', got {self.neck_down!r}")
        if not 0.0 < self.obj_prior < 1.0:
            raise ConfigError(f"obj_prior must lie in (0, 1), got {self.obj_prior}")

    @property
    def prn(self) -> PRNConfig:
        return PRNConfig(self.stages, tuple(self.neck_widths), tuple(self.widths[1:]), self.neck_down)

    def to_dict(self) -> dict:
        return {
            "neck": self.neck,
            "prn": {"stages": self.stages, "widths": list(self.neck_widths)},
            "neck_down": self.neck_down,
            "essamp": {"layers": self.essamp_layers, "d": self.essamp_d},
            "widths": list(self.widths),
            "num_classes": self.num_classes,
            "seed": self.seed,
            "obj_prior": self.obj_prior,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ArchConfig":
        """Accepts nested (``{"prn": {"stages": 1}}``) or dotted (``{"prn.stages": 1}``) keys."""
        flat: dict[str, Any] = {}
        for k, v in d.items():
            if isinstance(v, dict):
                for kk, vv in v.items():
                    flat[f"{k}.{kk}"] = vv
            else:
                flat[k] = v
        mapping = {
            "neck": "neck", "prn.stages": "stages", "prn.widths": "neck_widths",
            "neck_down": "neck_down", "prn.neck_down": "neck_down",
            "essamp.layers": "essamp_layers", "essamp.d": "essamp_d",
            "widths": "widths", "num_classes": "num_classes", "seed": "seed",
            "obj_prior": "obj_prior",
        }
        mapping.update({f.name: f.name for f in fields(cls)})
        kwargs = {}
        for k, v in flat.items():
            if k not in mapping:
                raise ConfigError(f"unknown model config key {k!r}")
            kwargs[mapping[k]] = tuple(v) if isinstance(v, list) else v
        return cls(**kwargs)


TINY_WIDTHS = (8, 8, 16, 32, 32)
TINY_NECK_WIDTHS = (8, 16, 32)


def tiny_config(neck: str = "prn", seed: int = 0, **overrides) -> ArchConfig:
    """The desk-scale detector used for neck comparisons (S=1, d=2 unless overridden)."""
    return ArchConfig(neck=neck, widths=TINY_WIDTHS, neck_widths=TINY_NECK_WIDTHS, seed=seed, **overrides)


@dataclass
class BoxLabel:
    class_id: int
    cx: float
    cy: float
    w: float
    h: float


# --------------------------------------------------------------------------
# parameters


@dataclass
class BackboneStep:
    down: ESSampParams | ConvBlockParams
    conv: ConvBlockParams


@dataclass
class PANFPNParams:
    td4: ConvBlockParams
    td3: ConvBlockParams
    td2: ConvBlockParams
    down3: ConvBlockParams | AvgPoolDown
    bu3: ConvBlockParams
    down4: ConvBlockParams | AvgPoolDown
    bu4: ConvBlockParams


@dataclass
class Model:
    cfg: ArchConfig
    backbone: list[BackboneStep]
    neck: PRNParams | PANFPNParams
    head: list[ConvWeights]


def make_backbone(cfg: ArchConfig) -> list[BackboneStep]:
    steps = []
    c_prev = 3
    for i, c in enumerate(cfg.widths):
        if i < cfg.essamp_layers:
            down = make_essamp(ESSampConfig(c_prev, c, cfg.essamp_d))
        else:
            down = make_conv_block(c_prev, c, 3, stride=2)
        steps.append(BackboneStep(down, make_conv_block(c, c)))
        c_prev = c
    return steps


def make_panfpn(cfg: ArchConfig) -> PANFPNParams:
    w2, w3, w4 = cfg.neck_widths
    _, c2, c3, c4, c5 = cfg.widths
    return PANFPNParams(
        td4=make_conv_block(c5 + c4, w4),
        td3=make_conv_block(w4 + c3, w3),
        td2=make_conv_block(w3 + c2, w2),
        down3=make_down(cfg.neck_down, w2),
        bu3=make_conv_block(w2 + w3, w3),
        down4=make_down(cfg.neck_down, w3),
        bu4=make_conv_block(w3 + w4, w4),
    )


def build_model(cfg: ArchConfig, seed: int | None = None) -> Model:
    """Assemble and initialize; the same (cfg, seed) always yields the same weights."""
    seed = cfg.seed if seed is None else seed
    neck = make_prn(cfg.prn) if cfg.neck == "prn" else make_panfpn(cfg)
    head = [ConvWeights.zeros(5 + cfg.num_classes, w, 1, bias=True, padding=0) for w in cfg.neck_widths]
    model = Model(cfg, make_backbone(cfg), neck, head)
    init_weights(model, seed)
    prior = math.log(cfg.obj_prior / (1.0 - cfg.obj_prior))
    for h in model.head:
        h.bias.data[4] = prior
    return model


# --------------------------------------------------------------------------
# forward


def backbone_forward(steps: Sequence[BackboneStep], images: Tensor) -> FeatureSet:
    if images.data.ndim != 4 or images.shape[1] != 3:
        raise ContractViolation(f"backbone expects N x 3 x H x W images, got {images.shape}")
    H, W = images.shape[2:]
    if H % 32 or W % 32:
        raise InvalidArgument(f"image size {H}x{W} must be divisible by 32")
    x = images
    feats = []
    for step in steps:
        if isinstance(step.down, ESSampParams):
            x = essamp_forward(step.down, x)
        else:
            x = resize_down2(x, step.down)
        x = conv_block(x, step.conv)
        feats.append(x)
    return FeatureSet(*feats[1:])


def panfpn_forward(f: FeatureSet, p: PANFPNParams) -> NeckState:
    """Baseline neck: top-down then one bottom-up pass; each backbone map read once."""
    check_features(f)
    s = NeckState()
    s.p4td = conv_block(concat_channels([upsample_nearest2(f.p5), f.p4]), p.td4)
    s.p3td = conv_block(concat_channels([upsample_nearest2(s.p4td), f.p3]), p.td3)
    s.p2td = conv_block(concat_channels([upsample_nearest2(s.p3td), f.p2]), p.td2)
    s.p2out = s.p2td
    s.p3out = conv_block(concat_channels([resize_down2(s.p2out, p.down3), s.p3td]), p.bu3)
    s.p4out = conv_block(concat_channels([resize_down2(s.p3out, p.down4), s.p4td]), p.bu4)
    return s


def neck_forward(model: Model, f: FeatureSet) -> NeckState:
    if isinstance(model.neck, PRNParams):
        return prn_forward(f, model.neck)
    return panfpn_forward(f, model.neck)


def head_forward(head: Sequence[ConvWeights], neck_out: Sequence[Tensor]) -> list[Tensor]:
    """One 1x1 conv per level to 5 + K logit channels (tx, ty, tw, th, obj, classes)."""
    if len(neck_out) != len(head):
        raise ContractViolation(f"head has {len(head)} levels, neck emitted {len(neck_out)}")
    return [conv2d(x, w, stride=1, padding=0) for x, w in zip(neck_out, head)]


def forward(model: Model, images: Tensor) -> list[Tensor]:
    """Raw predictions for levels P2, P3, P4."""
    state = neck_forward(model, backbone_forward(model.backbone, images))
    return head_forward(model.head, state.outputs())


# --------------------------------------------------------------------------
# targets and loss


@dataclass
class LevelTargets:
    stride: int
    obj: np.ndarray  # (N, H, W) in {0, 1}
    box: np.ndarray  # (N, 4, H, W) cx, cy, w, h in pixels
    cls: np.ndarray  # (N, H, W) class id, -1 where empty


@dataclass
class TargetMaps:
    image_size: int
    levels: list[LevelTargets]
    dropped_ties: int = 0
    dropped_degenerate: int = 0

    @property
    def num_positives(self) -> int:
        return int(sum(lv.obj.sum() for lv in self.levels))


def level_for(max_side: float) -> int:
    if max_side < LEVEL_THRESHOLDS[0]:
        return 0
    if max_side < LEVEL_THRESHOLDS[1]:
        return 1
    return 2


def clamp_box(b: BoxLabel, size: int) -> BoxLabel | None:
    x1, x2 = max(0.0, b.cx - b.w / 2), min(float(size), b.cx + b.w / 2)
    y1, y2 = max(0.0, b.cy - b.h / 2), min(float(size), b.cy + b.h / 2)
    if x2 - x1 <= 0 or y2 - y1 <= 0:
        return None
    return BoxLabel(b.class_id, (x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1)


def assign_targets(labels: Sequence[Sequence[BoxLabel]], image_size: int,
                   strides: Sequence[int] = STRIDES) -> TargetMaps:
    """One level per box by max side, one cell per box by its center.

    On a cell collision the larger-area box wins and the other is counted in
    ``dropped_ties``.
    """
    N = len(labels)
    levels = []
    for s in strides:
        g = image_size // s
        levels.append(LevelTargets(
            s, np.zeros((N, g, g), np.float32), np.zeros((N, 4, g, g), np.float32),
            np.full((N, g, g), -1, np.int64)))
    ties = degenerate = 0
    for n, boxes in enumerate(labels):
        for raw in boxes:
            b = clamp_box(raw, image_size)
            if b is None:
                degenerate += 1
                continue
            lv = levels[level_for(max(b.w, b.h))]
            g = lv.obj.shape[1]
            gx = min(int(b.cx // lv.stride), g - 1)
            gy = min(int(b.cy // lv.stride), g - 1)
            if lv.obj[n, gy, gx]:
                ties += 1
                if lv.box[n, 2, gy, gx] * lv.box[n, 3, gy, gx] >= b.w * b.h:
                    continue
            lv.obj[n, gy, gx] = 1.0
            lv.box[n, :, gy, gx] = (b.cx, b.cy, b.w, b.h)
            lv.cls[n, gy, gx] = b.class_id
    if ties:
        log.debug("assign_targets: dropped %d box(es) sharing a cell with a larger box", ties)
    if degenerate:
        log.debug("assign_targets: dropped %d degenerate box(es)", degenerate)
    return TargetMaps(image_size, levels, ties, degenerate)


def _bce_logits(z: np.ndarray, t: np.ndarray) -> np.ndarray:
    return np.maximum(z, 0.0) - z * t + np.log1p(np.exp(-np.abs(z)))


def _iou_and_grad(p: np.ndarray, t: np.ndarray):
    """IoU of cx,cy,w,h boxes (rows) and d IoU / d p."""
    px1, px2 = p[:, 0] - p[:, 2] / 2, p[:, 0] + p[:, 2] / 2
    py1, py2 = p[:, 1] - p[:, 3] / 2, p[:, 1] + p[:, 3] / 2
    tx1, tx2 = t[:, 0] - t[:, 2] / 2, t[:, 0] + t[:, 2] / 2
    ty1, ty2 = t[:, 1] - t[:, 3] / 2, t[:, 1] + t[:, 3] / 2
    iw_raw = np.minimum(px2, tx2) - np.maximum(px1, tx1)
    ih_raw = np.minimum(py2, ty2) - np.maximum(py1, ty1)
    iw, ih = np.maximum(iw_raw, 0.0), np.maximum(ih_raw, 0.0)
    inter = iw * ih
    union = p[:, 2] * p[:, 3] + t[:, 2] * t[:, 3] - inter
    iou = inter / union
    # sub-gradients of the overlap extents
    ax = (iw_raw > 0).astype(p.dtype)
    ay = (ih_raw > 0).astype(p.dtype)
    dx2 = (px2 < tx2) * ax
    dx1 = -((px1 > tx1) * ax)
    dy2 = (py2 < ty2) * ay
    dy1 = -((py1 > ty1) * ay)
    dI = np.stack([ih * (dx2 + dx1), iw * (dy2 + dy1), ih * 0.5 * (dx2 - dx1), iw * 0.5 * (dy2 - dy1)], axis=1)
    dU_area = np.stack([np.zeros_like(iou), np.zeros_like(iou), p[:, 3], p[:, 2]], axis=1)
    # IoU = I / (A + B - I)
    grad = dI * ((union + inter) / union ** 2)[:, None] - dU_area * (inter / union ** 2)[:, None]
    return iou, grad


@dataclass
class LossBreakdown:
    total: Tensor
    box: float
    obj: float
    cls: float


def decode_boxes(pred: np.ndarray, stride: int, image_size: int):
    """Decode (N, 5+K, H, W) logits to pixel-space cx, cy, w, h of shape (N, 4, H, W)."""
    N, _, H, W = pred.shape
    gx = np.arange(W, dtype=pred.dtype)[None, None, :]
    gy = np.arange(H, dtype=pred.dtype)[None, :, None]
    cx = (gx + sigmoid(pred[:, 0])) * stride
    cy = (gy + sigmoid(pred[:, 1])) * stride
    w = np.minimum(stride * np.exp(np.minimum(pred[:, 2], 30.0)), image_size)
    h = np.minimum(stride * np.exp(np.minimum(pred[:, 3], 30.0)), image_size)
    return np.stack([cx, cy, w, h], axis=1)


def detection_loss(preds: Sequence[Tensor], targets: TargetMaps,
                   lambdas: tuple[float, float, float] = (5.0, 1.0, 1.0)) -> LossBreakdown:
    """lambda_box * sum(1 - IoU) + lambda_obj * sum BCE(obj) + lambda_cls * sum BCE(cls), / N.

    Objectness BCE runs over every cell of every level; box and class terms
    over positive cells only.
    """
    lb, lo, lc = lambdas
    if len(preds) != len(targets.levels):
        raise ContractViolation(f"{len(preds)} prediction levels vs {len(targets.levels)} target levels")
    S = targets.image_size
    box_sum = obj_sum = cls_sum = 0.0
    grads = []
    N = preds[0].shape[0]
    for li, (P, T) in enumerate(zip(preds, targets.levels)):
        p = P.data
        n_, c_, H, W = p.shape
        if (n_, H, W) != T.obj.shape:
            raise ContractViolation(
                f"level {LEVEL_NAMES[li]}: prediction {p.shape} does not match targets {T.obj.shape}")
        K = c_ - 5
        g = np.zeros_like(p)
        z = p[:, 4]
        bce = _bce_logits(z, T.obj)
        if not np.all(np.isfinite(bce)):
            n, y, x = np.argwhere(~np.isfinite(bce))[0]
            raise NonFiniteError(f"non-finite objectness loss at level {LEVEL_NAMES[li]} image {n} cell ({y}, {x})")
        obj_sum += float(bce.sum())
        g[:, 4] = lo * (sigmoid(z) - T.obj)

        pos = np.nonzero(T.obj)
        if pos[0].size:
            n, y, x = pos
            st = T.stride
            t = p[n, :, y, x]  # (P, 5+K)
            sx, sy = sigmoid(t[:, 0]), sigmoid(t[:, 1])
            ew = st * np.exp(np.minimum(t[:, 2], 30.0))
            eh = st * np.exp(np.minimum(t[:, 3], 30.0))
            w_cl, h_cl = ew > S, eh > S
            pb = np.stack([(x + sx) * st, (y + sy) * st, np.minimum(ew, S), np.minimum(eh, S)], axis=1)
            tb = T.box[n, :, y, x]
            iou, diou = _iou_and_grad(pb.astype(np.float64), tb.astype(np.float64))
            if not np.all(np.isfinite(iou)):
                k = int(np.argmax(~np.isfinite(iou)))
                raise NonFiniteError(
                    f"non-finite box loss at level {LEVEL_NAMES[li]} image {n[k]} cell ({y[k]}, {x[k]})")
            box_sum += float((1.0 - iou).sum())
            dpb = -lb * diou
            gb = np.stack([
                dpb[:, 0] * st * sx * (1 - sx),
                dpb[:, 1] * st * sy * (1 - sy),
                np.where(w_cl, 0.0, dpb[:, 2] * pb[:, 2]),
                np.where(h_cl, 0.0, dpb[:, 3] * pb[:, 3]),
            ], axis=1)
            onehot = np.zeros((len(n), K), dtype=p.dtype)
            onehot[np.arange(len(n)), T.cls[n, y, x]] = 1.0
            zc = t[:, 5:]
            cls_sum += float(_bce_logits(zc, onehot).sum())
            g[n, 0:4, y, x] = gb
            g[n, 5:, y, x] = lc * (sigmoid(zc) - onehot)
        grads.append(g / N)

    total = (lb * box_sum + lo * obj_sum + lc * cls_sum) / N
    if not math.isfinite(total):
        raise NonFiniteError(f"non-finite total loss (box={box_sum}, obj={obj_sum}, cls={cls_sum})")

    def backward(gout):
        for P, g in zip(preds, grads):
            _accum(P, (g * gout).astype(P.data.dtype))

    out = make_op(np.asarray(total, dtype=np.result_type(*[P.data for P in preds])), tuple(preds),
                  backward, "detection_loss")
    return LossBreakdown(out, lb * box_sum / N, lo * obj_sum / N, lc * cls_sum / N)


# --------------------------------------------------------------------------
# decoding


@dataclass
class Detection:
    image_id: int
    class_id: int
    box: tuple[float, float, float, float]  # cx, cy, w, h
    score: float


def decode_predictions(preds: Sequence[Tensor | np.ndarray], conf_thresh: float, image_size: int,
                       strides: Sequence[int] = STRIDES, image_offset: int = 0) -> list[Detection]:
    """Cells whose sigmoid(obj) * max sigmoid(cls) exceeds ``conf_thresh``."""
    if not 0.0 <= conf_thresh <= 1.0:
        raise InvalidArgument(f"conf_thresh={conf_thresh} outside [0, 1]")
    dets: list[Detection] = []
    for P, st in zip(preds, strides):
        p = P.data if isinstance(P, Tensor) else P
        cls_p = sigmoid(p[:, 5:])
        best = cls_p.argmax(axis=1)
        score = sigmoid(p[:, 4]) * cls_p.max(axis=1)
        n, y, x = np.nonzero(score > conf_thresh)
        if not n.size:
            continue
        boxes = decode_boxes(p, st, image_size)[n, :, y, x]
        for k in range(n.size):
            dets.append(Detection(int(n[k]) + image_offset, int(best[n[k], y[k], x[k]]),
                                  tuple(float(v) for v in boxes[k]), float(score[n[k], y[k], x[k]])))
    return dets


def targets_to_logits(targets: TargetMaps, num_classes: int, confidence: float = 20.0) -> list[np.ndarray]:
    """Inverse of decoding: logits whose decoded boxes equal the assigned targets."""
    out = []
    eps = 1e-6
    for T in targets.levels:
        N, H, W = T.obj.shape
        p = np.full((N, 5 + num_classes, H, W), -confidence, dtype=np.float64)
        p[:, 0:4] = 0.0
        n, y, x = np.nonzero(T.obj)
        b = T.box[n, :, y, x].astype(np.float64)
        fx = np.clip(b[:, 0] / T.stride - x, eps, 1 - eps)
        fy = np.clip(b[:, 1] / T.stride - y, eps, 1 - eps)
        p[n, 0, y, x] = np.log(fx / (1 - fx))
        p[n, 1, y, x] = np.log(fy / (1 - fy))
        p[n, 2, y, x] = np.log(b[:, 2] / T.stride)
        p[n, 3, y, x] = np.log(b[:, 3] / T.stride)
        p[n, 4, y, x] = confidence
        p[n, 5 + T.cls[n, y, x], y, x] = confidence
        out.append(p)
    return out
