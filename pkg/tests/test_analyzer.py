import dataclasses

import numpy as np
import pytest

from prnet.analyzer import (
    count_macs,
    count_params,
    depth_grid,
    format_csv,
    format_table,
    stage_grid,
    stats,
    sweep,
)
from prnet.blocks import make_conv_block
from prnet.detector import ArchConfig, build_model, forward
from prnet.errors import ContractViolation
from prnet.essamp import ESSampConfig, make_essamp
from prnet.params import parameters
from prnet.tensor import ConvWeights, Tensor, count_ops, no_grad, pixel_unshuffle

SMALL = ArchConfig(widths=(8, 8, 16, 16, 32), neck_widths=(8, 12, 16))


def test_essamp_params():
    assert count_params(make_essamp(ESSampConfig(16, 32, 2))) == 5568


def test_conv_block_params():
    assert count_params(make_conv_block(8, 4)) == 296


def test_conv_macs_closed_form():
    w = ConvWeights.zeros(4, 8, 3, padding=1)
    assert count_macs(w, (1, 8, 16, 16)) == 73728


def test_unshuffle_costs_nothing():
    with count_ops() as c:
        pixel_unshuffle(Tensor(np.zeros((1, 2, 4, 4))), 2)
    assert sum(c.values()) == 0


def test_shape_mismatch_is_contract_violation():
    with pytest.raises(ContractViolation):
        count_macs(make_conv_block(8, 4), (1, 7, 16, 16))
    with pytest.raises(ContractViolation):
        count_macs(make_essamp(ESSampConfig(4, 4)), (1, 3, 8, 8))


@pytest.mark.parametrize("neck,down", [("prn", "conv"), ("prn", "avgpool"), ("panfpn", "conv"), ("panfpn", "avgpool")])
def test_static_macs_match_runtime_counter(neck, down):
    cfg = dataclasses.replace(SMALL, neck=neck, neck_down=down, stages=2)
    m = build_model(cfg)
    with count_ops() as c, no_grad():
        forward(m, Tensor(np.zeros((2, 3, 64, 64), np.float32)))
    assert count_macs(m, (2, 3, 64, 64)) == sum(c.values())


def test_totals_are_column_sums_and_additive():
    m = build_model(SMALL)
    s = stats(m, 64)
    assert s.params == sum(r.params for r in s.rows) == count_params(m)
    assert s.macs == sum(r.macs for r in s.rows)
    assert s.flops == 2 * s.macs
    # backbone + neck + head partition the model
    parts = {"backbone": 0, "neck": 0, "head": 0}
    for r in s.rows:
        parts[r.path.split(".")[0]] += r.macs
    assert sum(parts.values()) == s.macs


def test_param_count_equals_sgd_updated_values():
    from prnet.train import SGDState, TrainConfig, sgd_momentum_step

    m = build_model(SMALL)
    ps = parameters(m)
    before = [p.data.copy() for p in ps]
    grads = [np.ones_like(p.data) for p in ps]
    sgd_momentum_step(ps, grads, TrainConfig(weight_decay=0.0, momentum=0.0, lr=0.5), SGDState())
    changed = sum(int(np.count_nonzero(p.data != b)) for p, b in zip(ps, before))
    assert changed == count_params(m)


def test_stage_sweep_strict_and_affine():
    rows = sweep(stage_grid(SMALL), 64)
    assert [r.path for r in rows] == ["stages=0", "stages=1", "stages=2", "stages=3"]
    dp = [b.params - a.params for a, b in zip(rows, rows[1:])]
    dm = [b.macs - a.macs for a, b in zip(rows, rows[1:])]
    assert min(dp) > 0 and len(set(dp)) == 1
    assert min(dm) > 0 and len(set(dm)) == 1


def test_depth_sweep_small_increments():
    rows = sweep(depth_grid(SMALL), 64)
    assert rows[0].params < rows[1].params < rows[2].params
    assert rows[0].macs < rows[1].macs < rows[2].macs
    assert (rows[2].params - rows[0].params) / rows[0].params < 0.1


def test_empty_grid():
    assert sweep([], 64) == []
    assert format_csv([]) == "path,params,macs,flops\n"


def test_text_and_csv_formats():
    rows = sweep(stage_grid(SMALL, (0, 1)), 64)
    text = format_table(rows, "config")
    lines = text.splitlines()
    assert lines[0].split() == ["config", "params", "MACs", "FLOPs"]
    assert len({len(line) for line in lines}) == 1  # aligned
    csv_lines = format_csv(rows).splitlines()
    assert csv_lines[0] == "path,params,macs,flops"
    path, p, m, f = csv_lines[1].split(",")
    assert path == "stages=0" and int(f) == 2 * int(m) and int(p) == rows[0].params
