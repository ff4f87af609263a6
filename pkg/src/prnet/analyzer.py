"""Static cost model: exact parameter counts and multiply-accumulates.

Shapes are propagated through the same topology the forward functions use,
without touching any data. MAC conventions match :func:`prnet.tensor.count_ops`:
convolution = out_elems * in_per_group * kh * kw, batch norm / activation /
resize = out_elems, rearrangement and concatenation = 0. FLOPs = 2 * MACs.
"""

from __future__ import annotations

import csv
import dataclasses
import io
from dataclasses import dataclass, field
from typing import Any, Iterable, Sequence

from .blocks import AvgPoolDown, ConvBlockParams
from .detector import ArchConfig, Model, PANFPNParams, build_model
from .errors import ContractViolation, InvalidArgument
from .essamp import ESSampParams
from .neck import PRNParams
from .params import named_parameters
from .tensor import BatchNormState, ConvWeights

Shape = tuple[int, int, int, int]


@dataclass
class StatRow:
    path: str
    params: int
    macs: int

    @property
    def flops(self) -> int:
        return 2 * self.macs


@dataclass
class ModelStats:
    rows: list[StatRow] = field(default_factory=list)

    @property
    def params(self) -> int:
        return sum(r.params for r in self.rows)

    @property
    def macs(self) -> int:
        return sum(r.macs for r in self.rows)

    @property
    def flops(self) -> int:
        return 2 * self.macs

    def to_text(self, title: str = "path") -> str:
        return format_table(self.rows, title, total=True)

    def to_csv(self) -> str:
        return format_csv(self.rows)


def count_params(module: Any) -> int:
    """Number of learnable scalars (running statistics excluded)."""
    return sum(t.data.size for _, t in named_parameters(module))


# --------------------------------------------------------------------------
# shape propagation


class _Walker:
    def __init__(self):
        self.rows: list[StatRow] = []

    def emit(self, path, params, macs):
        self.rows.append(StatRow(path, int(params), int(macs)))

    # leaves

    def conv(self, s: Shape, w: ConvWeights, stride: int | None = None, padding: int | None = None) -> tuple[Shape, int]:
        N, C, H, W = s
        if C != w.in_channels:
            raise ContractViolation(f"conv expects {w.in_channels} input channels, got shape {s}")
        st = w.stride if stride is None else stride
        pad = w.padding if padding is None else padding
        kh, kw = w.kernel_size
        Ho = (H + 2 * pad - kh) // st + 1
        Wo = (W + 2 * pad - kw) // st + 1
        if Ho <= 0 or Wo <= 0:
            raise ContractViolation(f"input {s} too small for a {kh}x{kw} kernel")
        out = (N, w.out_channels, Ho, Wo)
        return out, N * w.out_channels * Ho * Wo * w.in_channels_per_group * kh * kw

    @staticmethod
    def _elems(s: Shape) -> int:
        return s[0] * s[1] * s[2] * s[3]

    def bn_act(self, s: Shape, bn: BatchNormState, act: str) -> int:
        if s[1] != bn.channels:
            raise ContractViolation(f"batch norm over {bn.channels} channels, got shape {s}")
        return self._elems(s) * (1 if act == "identity" else 2)

    # modules

    def block(self, s: Shape, p: ConvBlockParams, path: str, stride: int = 1) -> Shape:
        out, macs = self.conv(s, p.conv, stride=stride)
        macs += self.bn_act(out, p.bn, p.act)
        self.emit(path, count_params(p), macs)
        return out

    def down(self, s: Shape, p, path: str) -> Shape:
        if s[2] % 2 or s[3] % 2:
            raise InvalidArgument(f"{path}: spatial dims of {s} must be even")
        if isinstance(p, AvgPoolDown):
            out = (s[0], s[1], s[2] // 2, s[3] // 2)
            self.emit(path, 0, self._elems(out))
            return out
        return self.block(s, p, path, stride=2)

    def up(self, s: Shape, path: str) -> Shape:
        out = (s[0], s[1], 2 * s[2], 2 * s[3])
        self.emit(path, 0, self._elems(out))
        return out

    @staticmethod
    def cat(shapes: Sequence[Shape]) -> Shape:
        N, _, H, W = shapes[0]
        for t in shapes[1:]:
            if (t[0], t[2], t[3]) != (N, H, W):
                raise ContractViolation(f"concat of mismatched shapes {list(shapes)}")
        return (N, sum(t[1] for t in shapes), H, W)

    def essamp(self, s: Shape, p: ESSampParams, path: str) -> Shape:
        if s[1] != p.c_in:
            raise ContractViolation(f"ESSamp built for {p.c_in} channels, got shape {s}")
        if s[2] % 2 or s[3] % 2:
            raise InvalidArgument(f"{path}: ESSamp needs even spatial dims, got {s}")
        u = (s[0], 4 * s[1], s[2] // 2, s[3] // 2)
        y, m1 = self.conv(u, p.w1_edw, stride=1, padding=1)
        m1 += self.bn_act(y, p.bn1, "gelu")
        z, m2 = self.conv(y, p.w2_pw, stride=1, padding=0)
        m2 += self.bn_act(z, p.bn2, "gelu")
        self.emit(path, count_params(p), m1 + m2)
        return z

    def prn(self, f: Sequence[Shape], p: PRNParams, path: str) -> tuple[Shape, Shape, Shape]:
        p2, p3, p4, p5 = f
        q = path + "."
        p4td = self.block(self.cat([self.up(p5, q + "td4.up"), p4]), p.td4, q + "td4")
        p3td = self.block(self.cat([self.up(p4td, q + "td3.up"), p3]), p.td3, q + "td3")
        r = self.block(self.cat([self.up(p3td, q + "td2.up"), p2]), p.td2, q + "td2")
        for k, st in enumerate(p.stages):
            sp = f"{q}stages.{k}."
            t3 = self.block(self.cat([self.down(r, st.down, sp + "down"), p3]), st.t3, sp + "t3")
            r = self.block(self.cat([self.up(t3, sp + "r.up"), r, p2]), st.r, sp + "r")
        d = self.down(self.down(r, p.out_down1, q + "out_down1"), p.out_down2, q + "out_down2")
        o4 = self.block(d, p.out4, q + "out4")
        o3 = self.block(self.cat([self.up(o4, q + "out3.up"), p3]), p.out3, q + "out3")
        o2 = self.block(self.cat([self.up(o3, q + "out2.up"), r, p2]), p.out2, q + "out2")
        return o2, o3, o4

    def panfpn(self, f: Sequence[Shape], p: PANFPNParams, path: str) -> tuple[Shape, Shape, Shape]:
        p2, p3, p4, p5 = f
        q = path + "."
        p4td = self.block(self.cat([self.up(p5, q + "td4.up"), p4]), p.td4, q + "td4")
        p3td = self.block(self.cat([self.up(p4td, q + "td3.up"), p3]), p.td3, q + "td3")
        o2 = self.block(self.cat([self.up(p3td, q + "td2.up"), p2]), p.td2, q + "td2")
        o3 = self.block(self.cat([self.down(o2, p.down3, q + "down3"), p3td]), p.bu3, q + "bu3")
        o4 = self.block(self.cat([self.down(o3, p.down4, q + "down4"), p4td]), p.bu4, q + "bu4")
        return o2, o3, o4

    def model(self, s: Shape, m: Model) -> list[Shape]:
        if s[1] != 3:
            raise ContractViolation(f"model expects 3-channel images, got shape {s}")
        if s[2] % 32 or s[3] % 32:
            raise InvalidArgument(f"image size {s[2]}x{s[3]} must be divisible by 32")
        feats = []
        x = s
        for i, step in enumerate(m.backbone):
            if isinstance(step.down, ESSampParams):
                x = self.essamp(x, step.down, f"backbone.{i}.down")
            else:
                x = self.down(x, step.down, f"backbone.{i}.down")
            x = self.block(x, step.conv, f"backbone.{i}.conv")
            feats.append(x)
        if isinstance(m.neck, PRNParams):
            outs = self.prn(feats[1:], m.neck, "neck")
        else:
            outs = self.panfpn(feats[1:], m.neck, "neck")
        preds = []
        for i, (o, w) in enumerate(zip(outs, m.head)):
            y, macs = self.conv(o, w, stride=1, padding=0)
            self.emit(f"head.{i}", count_params(w), macs)
            preds.append(y)
        return preds


def _as_shape(input_shape) -> Shape:
    if isinstance(input_shape, int):
        return (1, 3, input_shape, input_shape)
    s = tuple(int(v) for v in input_shape)
    if len(s) != 4:
        raise ContractViolation(f"expected an N x C x H x W shape, got {input_shape}")
    return s


def stats(module: Any, input_shape) -> ModelStats:
    """Per-component rows for ``module`` at ``input_shape``.

    Necks take a sequence of four feature shapes (P2in..P5in); every other
    module takes one N x C x H x W shape (an int means a 1 x 3 x S x S image).
    """
    w = _Walker()
    if isinstance(module, (PRNParams, PANFPNParams)):
        shapes = [_as_shape(s) for s in input_shape]
        if len(shapes) != 4:
            raise ContractViolation(f"necks take four feature shapes, got {len(shapes)}")
        (w.prn if isinstance(module, PRNParams) else w.panfpn)(shapes, module, "neck")
        return ModelStats(w.rows)
    s = _as_shape(input_shape)
    if isinstance(module, Model):
        w.model(s, module)
    elif isinstance(module, ESSampParams):
        w.essamp(s, module, "essamp")
    elif isinstance(module, ConvBlockParams):
        w.block(s, module, "block", stride=module.conv.stride)
    elif isinstance(module, AvgPoolDown):
        w.down(s, module, "avgpool")
    elif isinstance(module, ConvWeights):
        _, macs = w.conv(s, module)
        w.emit("conv", count_params(module), macs)
    else:
        raise InvalidArgument(f"no cost model for {type(module).__name__}")
    return ModelStats(w.rows)


def count_macs(module: Any, input_shape) -> int:
    return stats(module, input_shape).macs


# --------------------------------------------------------------------------
# sweeps and formatting


def sweep(cfg_grid: Iterable[tuple[str, ArchConfig]], image_size: int = 256) -> list[StatRow]:
    """One totals row per ``(label, config)`` at a 1 x 3 x S x S input."""
    rows = []
    for label, cfg in cfg_grid:
        m = build_model(cfg)
        rows.append(StatRow(label, count_params(m), count_macs(m, image_size)))
    return rows


def stage_grid(base: ArchConfig, stages: Sequence[int] = (0, 1, 2, 3)):
    return [(f"stages={s}", dataclasses.replace(base, stages=s)) for s in stages]


def depth_grid(base: ArchConfig, depths: Sequence[int] = (1, 2, 3)):
    return [(f"essamp.d={d}", dataclasses.replace(base, essamp_d=d)) for d in depths]


def format_table(rows: Sequence[StatRow], title: str = "path", total: bool = False) -> str:
    body = [(r.path, f"{r.params:,}", f"{r.macs:,}", f"{r.flops:,}") for r in rows]
    if total:
        body.append(("total", f"{sum(r.params for r in rows):,}", f"{sum(r.macs for r in rows):,}",
                     f"{2 * sum(r.macs for r in rows):,}"))
    header = (title, "params", "MACs", "FLOPs")
    widths = [max(len(x[i]) for x in [header, *body]) for i in range(4)]
    lines = ["  ".join([header[0].ljust(widths[0])] + [h.rjust(w) for h, w in zip(header[1:], widths[1:])])]
    lines.append("  ".join("-" * w for w in widths))
    for b in body:
        lines.append("  ".join([b[0].ljust(widths[0])] + [v.rjust(w) for v, w in zip(b[1:], widths[1:])]))
    return "\n".join(lines)


def format_csv(rows: Sequence[StatRow]) -> str:
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(["path", "params", "macs", "flops"])
    for r in rows:
        wr.writerow([r.path, r.params, r.macs, r.flops])
    return buf.getvalue()
