"""Progressive Refinement Neck.

Top-down fusion over P5..P2, then ``S`` refinement stages that each run one
down-up cycle at strides 8 and 4 while re-reading the raw backbone P3 and P2
maps, then three outputs at strides 16, 8 and 4::

    P4td = Conv(Concat(Up(P5in), P4in))
    P3td = Conv(Concat(Up(P4td), P3in))
    P2td = Conv(Concat(Up(P3td), P2in))                 R_0 = P2td
    T3_k = Conv(Concat(Down(R_{k-1}), P3in))
    R_k  = Conv(Concat(Up(T3_k), R_{k-1}, P2in))         k = 1..S
    P4out = Conv(Down(Down(R_S)))
    P3out = Conv(Concat(Up(P4out), P3in))
    P2out = Conv(Concat(Up(P3out), R_S, P2in))

Stages have independent weights.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .blocks import AvgPoolDown, ConvBlockParams, conv_block, make_conv_block, make_down, resize_down2
from .errors import ConfigError, ContractViolation, InvalidState
from .tensor import Tensor, concat_channels, upsample_nearest2


@dataclass
class FeatureSet:
    """Backbone outputs at strides 4, 8, 16, 32."""

    p2: Tensor
    p3: Tensor
    p4: Tensor
    p5: Tensor

    def levels(self):
        return (self.p2, self.p3, self.p4, self.p5)


def check_features(f: FeatureSet) -> None:
    lv = f.levels()
    for t in lv:
        if t.data.ndim != 4:
            raise ContractViolation(f"feature maps must be N x C x H x W, got {t.shape}")
    for name, (a, b) in zip(("P2/P3", "P3/P4", "P4/P5"), zip(lv[:-1], lv[1:])):
        if a.shape[0] != b.shape[0] or a.shape[2] != 2 * b.shape[2] or a.shape[3] != 2 * b.shape[3]:
            raise ContractViolation(
                f"inconsistent spatial ratio {name}: {a.shape} vs {b.shape} (expected exactly 2x)")


@dataclass(frozen=True)
class PRNConfig:
    stages: int = 1
    widths: tuple[int, int, int] = (32, 64, 128)
    in_channels: tuple[int, int, int, int] = (32, 64, 128, 256)
    neck_down: str = "conv"

    def __post_init__(self):
        if self.stages < 0:
            raise ConfigError(f"prn.stages must be >= 0, got {self.stages}")
        if len(self.widths) != 3 or min(self.widths) <= 0:
            raise ConfigError(f"prn.widths must be three positive ints, got {self.widths}")
        if len(self.in_channels) != 4 or min(self.in_channels) <= 0:
            raise ConfigError(f"backbone channels must be four positive ints, got {self.in_channels}")


@dataclass
class PRNStage:
    down: ConvBlockParams | AvgPoolDown
    t3: ConvBlockParams
    r: ConvBlockParams


@dataclass
class PRNParams:
    td4: ConvBlockParams
    td3: ConvBlockParams
    td2: ConvBlockParams
    stages: list[PRNStage]
    out_down1: ConvBlockParams | AvgPoolDown
    out_down2: ConvBlockParams | AvgPoolDown
    out4: ConvBlockParams
    out3: ConvBlockParams
    out2: ConvBlockParams


@dataclass
class NeckState:
    p4td: Tensor | None = None
    p3td: Tensor | None = None
    p2td: Tensor | None = None
    t3: list[Tensor] = field(default_factory=list)
    r: list[Tensor] = field(default_factory=list)
    p2out: Tensor | None = None
    p3out: Tensor | None = None
    p4out: Tensor | None = None

    def outputs(self) -> tuple[Tensor, Tensor, Tensor]:
        """Detection inputs ordered by stride: (P2out, P3out, P4out)."""
        return self.p2out, self.p3out, self.p4out


def make_stage(cfg: PRNConfig) -> PRNStage:
    w2, w3, _ = cfg.widths
    c2, c3, _, _ = cfg.in_channels
    return PRNStage(
        down=make_down(cfg.neck_down, w2),
        t3=make_conv_block(w2 + c3, w3),
        r=make_conv_block(w3 + w2 + c2, w2),
    )


def make_prn(cfg: PRNConfig) -> PRNParams:
    w2, w3, w4 = cfg.widths
    c2, c3, c4, c5 = cfg.in_channels
    return PRNParams(
        td4=make_conv_block(c5 + c4, w4),
        td3=make_conv_block(w4 + c3, w3),
        td2=make_conv_block(w3 + c2, w2),
        stages=[make_stage(cfg) for _ in range(cfg.stages)],
        out_down1=make_down(cfg.neck_down, w2),
        out_down2=make_down(cfg.neck_down, w2),
        out4=make_conv_block(w2, w4),
        out3=make_conv_block(w4 + c3, w3),
        out2=make_conv_block(w3 + w2 + c2, w2),
    )


def top_down_fuse(f: FeatureSet, params: PRNParams) -> NeckState:
    """Initial fusion, i = 4, 3, 2 in that order; P5 is consumed only here."""
    check_features(f)
    s = NeckState()
    s.p4td = conv_block(concat_channels([upsample_nearest2(f.p5), f.p4]), params.td4)
    s.p3td = conv_block(concat_channels([upsample_nearest2(s.p4td), f.p3]), params.td3)
    s.p2td = conv_block(concat_channels([upsample_nearest2(s.p3td), f.p2]), params.td2)
    s.r = [s.p2td]
    s.t3 = []
    return s


def refine_stage(state: NeckState, f: FeatureSet, params: PRNParams, k: int) -> NeckState:
    """Stage ``k`` (1-based): one down-up cycle re-reading P3in and P2in."""
    if k < 1:
        raise InvalidState(f"refinement stages are numbered from 1, got k={k}")
    if len(state.r) < k or state.r[k - 1] is None:
        raise InvalidState(f"refine_stage({k}) needs R_{k - 1}; run the earlier stages first")
    if k > len(params.stages):
        raise InvalidState(f"refine_stage({k}) but the neck has {len(params.stages)} stage(s)")
    st = params.stages[k - 1]
    prev = state.r[k - 1]
    t3 = conv_block(concat_channels([resize_down2(prev, st.down), f.p3]), st.t3)
    r = conv_block(concat_channels([upsample_nearest2(t3), prev, f.p2]), st.r)
    del state.t3[k - 1:]
    del state.r[k:]
    state.t3.append(t3)
    state.r.append(r)
    return state


def generate_outputs(state: NeckState, f: FeatureSet, params: PRNParams) -> NeckState:
    if not state.r:
        raise InvalidState("generate_outputs needs at least R_0 (run top_down_fuse first)")
    r = state.r[-1]
    state.p4out = conv_block(resize_down2(resize_down2(r, params.out_down1), params.out_down2), params.out4)
    state.p3out = conv_block(concat_channels([upsample_nearest2(state.p4out), f.p3]), params.out3)
    state.p2out = conv_block(concat_channels([upsample_nearest2(state.p3out), r, f.p2]), params.out2)
    return state


def prn_forward(f: FeatureSet, params: PRNParams, cfg: PRNConfig | None = None) -> NeckState:
    if cfg is not None and cfg.stages != len(params.stages):
        raise ConfigError(f"config asks for {cfg.stages} stage(s), parameters hold {len(params.stages)}")
    state = top_down_fuse(f, params)
    for k in range(1, len(params.stages) + 1):
        refine_stage(state, f, params, k)
    return generate_outputs(state, f, params)
