"""The nine acceptance criteria, each at its stated tolerance and time budget."""

import json
import time

import numpy as np
import pytest

from prnet.analyzer import count_params, stats, sweep, stage_grid
from prnet.blocks import init_weights
from prnet.cli import main as cli_main
from prnet.detector import ArchConfig, BoxLabel, assign_targets, detection_loss, tiny_config
from prnet.essamp import ESSampConfig, essamp_forward, essamp_param_count, make_essamp, slice_concat, \
    slice_to_unshuffle_perm
from prnet.metrics import average_precision
from prnet.neck import FeatureSet, PRNConfig, make_prn, prn_forward
from prnet.params import cast, parameters
from prnet.synth import Dataset, DatasetSpec, benchmark_spec, gen_dataset
from prnet.tensor import (
    BatchNormState,
    ConvWeights,
    Tensor,
    _accum,
    activation,
    batchnorm,
    conv2d,
    grad_check,
    make_op,
    pixel_shuffle,
    pixel_unshuffle,
)
from prnet.train import SGDState, TrainConfig, compare_necks, train_step

from test_metrics import HAND_AP, _hand_case, _rand_case, brute_force_ap

GRAD_TOL = 1e-4


def _probe(fn, rng):
    """Scalar <y, M> with a fixed random M, so every output element matters."""
    masks = {}

    def f():
        ys = fn()
        ys = ys if isinstance(ys, (list, tuple)) else [ys]
        for i, y in enumerate(ys):
            masks.setdefault(i, rng.standard_normal(y.shape))
        val = sum(float((y.data * masks[i]).sum()) for i, y in enumerate(ys))

        def bw(g):
            for i, y in enumerate(ys):
                _accum(y, g * masks[i])
        return make_op(np.asarray(val), tuple(ys), bw, "probe")
    return f


# --------------------------------------------------------------------------


def test_1_rearrangement_equivalence(verdict):
    t0 = time.perf_counter()
    rng = np.random.default_rng(1)
    mismatches = 0
    for _ in range(1000):
        c = int(rng.integers(1, 6))
        h, w = 2 * int(rng.integers(1, 6)), 2 * int(rng.integers(1, 6))
        x = Tensor(rng.standard_normal((int(rng.integers(1, 3)), c, h, w)).astype(np.float32))
        u = pixel_unshuffle(x, 2)
        if not np.array_equal(slice_concat(x).data, u.data[:, slice_to_unshuffle_perm(c)]):
            mismatches += 1
        if pixel_shuffle(u, 2).data.tobytes() != x.data.tobytes():
            mismatches += 1
    dt = time.perf_counter() - t0
    ok = verdict(1, mismatches == 0 and dt < 5, f"1000 tensors, {mismatches} mismatches, {dt:.2f}s")
    assert ok


def test_2_gradient_correctness(verdict):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2)
    errs = {}

    x = Tensor(rng.standard_normal((2, 4, 6, 5)))
    for name, (O, Cg, g, s) in {"conv": (3, 4, 1, 1), "grouped": (4, 2, 2, 2), "depthwise d=2": (8, 1, 4, 1)}.items():
        w = ConvWeights.zeros(O, Cg, 3, groups=g, stride=s, padding=1, bias=True, dtype=np.float64)
        w.values.data = rng.standard_normal(w.values.shape)
        w.bias.data = rng.standard_normal(O)
        errs[name] = grad_check(_probe(lambda: conv2d(x, w), rng), [x, w.values, w.bias])

    bn = BatchNormState.fresh(4, dtype=np.float64)
    bn.gamma.data = rng.uniform(0.5, 1.5, 4)
    bn.beta.data = rng.standard_normal(4)
    errs["batchnorm"] = grad_check(_probe(lambda: batchnorm(x, bn), rng), [x, bn.gamma, bn.beta])
    for kind in ("silu", "gelu"):
        errs[kind] = grad_check(_probe(lambda: activation(x, kind), rng), [x])

    p = make_essamp(ESSampConfig(2, 3, 2))
    init_weights(p, 0)
    cast(p, np.float64)
    xe = Tensor(rng.standard_normal((2, 2, 4, 4)))
    errs["essamp"] = grad_check(_probe(lambda: essamp_forward(p, xe), rng), [xe] + parameters(p))

    cfg = PRNConfig(1, (2, 2, 2), (2, 2, 2, 2))
    neck = make_prn(cfg)
    init_weights(neck, 3)
    cast(neck, np.float64)
    f = FeatureSet(*[Tensor(rng.standard_normal((2, 2, 16 // s, 16 // s))) for s in (1, 2, 4, 8)])
    errs["PRN neck"] = grad_check(_probe(lambda: prn_forward(f, neck).outputs(), rng),
                                  list(f.levels()) + parameters(neck))

    t = assign_targets([[BoxLabel(1, 21.0, 13.0, 9.0, 6.0), BoxLabel(0, 8.0, 20.0, 20.0, 17.0)]], 32)
    preds = [Tensor(rng.normal(0, 0.5, (1, 8, 32 // s, 32 // s))) for s in (4, 8, 16)]
    errs["detection loss"] = grad_check(lambda: detection_loss(preds, t).total, preds)

    dt = time.perf_counter() - t0
    worst = max(errs, key=errs.get)
    ok = verdict(2, errs[worst] <= GRAD_TOL and dt < 60,
                 f"{len(errs)} ops, worst {worst} {errs[worst]:.2e} <= {GRAD_TOL:g}, {dt:.1f}s")
    assert ok, errs


def test_3_count_formula_fidelity(verdict):
    t0 = time.perf_counter()
    got = [count_params(make_essamp(ESSampConfig(16, 32, d))) for d in (1, 2, 3)]
    # depthwise 9 * (4dC) + BN 2 * 4dC + pointwise 4dC * c_out + BN 2 * c_out
    closed = [9 * 4 * d * 16 + 2 * 4 * d * 16 + 4 * d * 16 * 32 + 2 * 32 for d in (1, 2, 3)]
    formula = [essamp_param_count(ESSampConfig(16, 32, d)) for d in (1, 2, 3)]
    dt = time.perf_counter() - t0
    ok = got == closed == formula == [2816, 5568, 8320] and got[0] < got[1] < got[2] and dt < 1
    verdict(3, ok, f"params d=1,2,3 -> {got}, {dt * 1e3:.0f}ms")
    assert ok


def test_4_stage_sweep_trend(verdict):
    t0 = time.perf_counter()
    rows = sweep(stage_grid(ArchConfig()), 256)
    dp = [b.params - a.params for a, b in zip(rows, rows[1:])]
    dm = [b.macs - a.macs for a, b in zip(rows, rows[1:])]
    dt = time.perf_counter() - t0
    ok = min(dp) > 0 and min(dm) > 0 and len(set(dp)) == 1 and len(set(dm)) == 1 and dt < 1
    verdict(4, ok, f"params {[r.params for r in rows]}, +{dp[0]}/stage, +{dm[0]} MACs/stage, {dt * 1e3:.0f}ms")
    assert ok


def test_5_topology_contracts(verdict):
    t0 = time.perf_counter()
    rng = np.random.default_rng(5)
    problems = []
    for s in range(4):
        cfg = PRNConfig(s, (32, 64, 128), (32, 64, 128, 256))
        p = make_prn(cfg)
        init_weights(p, s)
        f = FeatureSet(*[Tensor(rng.standard_normal((1, c, 256 // k, 256 // k)).astype(np.float32),
                                requires_grad=True) for c, k in zip(cfg.in_channels, (4, 8, 16, 32))])
        st = prn_forward(f, p, cfg)
        outs = st.outputs()
        if [o.shape for o in outs] != [(1, 32, 64, 64), (1, 64, 32, 32), (1, 128, 16, 16)]:
            problems.append(f"S={s} shapes {[o.shape for o in outs]}")
        if s == 0 and (p.stages or st.t3):
            problems.append("S=0 built a refinement block")
        _probe(lambda: outs, rng)().backward()
        for name in ("p2", "p3", "p5"):
            g = getattr(f, name).grad
            if g is None or not np.any(g):
                problems.append(f"S={s}: {name} does not reach the outputs")
    dt = time.perf_counter() - t0
    ok = not problems and dt < 30
    verdict(5, ok, f"S=0..3 strides 4/8/16, widths 32/64/128, P2in/P3in/P5 reach outputs, {dt:.1f}s"
            if ok else "; ".join(problems) + f" ({dt:.1f}s)")
    assert ok


def test_6_trainability(verdict, tmp_path):
    t0 = time.perf_counter()
    gen_dataset(DatasetSpec(num_images=4, image_size=128, seed=0), tmp_path)
    images, labels = Dataset(tmp_path).load_batch(range(4))
    ratios = {}
    for neck in ("prn", "panfpn"):
        from prnet.detector import build_model

        model = build_model(tiny_config(neck, seed=0))
        state, cache, first, best = SGDState(), {}, None, np.inf
        for _ in range(300):
            loss, _ = train_step(model, images, labels, TrainConfig(), state, cache)
            v = float(loss.total.data)
            first = v if first is None else first
            best = min(best, v)
        ratios[neck] = best / first
    dt = time.perf_counter() - t0
    ok = max(ratios.values()) <= 0.10 and dt < 300
    verdict(6, ok, f"min loss / initial: PRN {ratios['prn']:.3f}, PAN-FPN {ratios['panfpn']:.3f} "
                   f"(<= 0.10), {dt:.0f}s")
    assert ok


def test_7_neck_comparison(verdict, tmp_path):
    gen_dataset(benchmark_spec(), tmp_path)
    res = compare_necks(Dataset(tmp_path), seeds=(0, 1, 2), cfg=TrainConfig(epochs=30))
    (tmp_path / "comparison.json").write_text(json.dumps(res.to_dict(), indent=1))
    print(res.to_text())
    in_budget = res.seconds < 45 * 60
    met = res.margin >= 0.02
    detail = (f"PRN {np.mean(res.prn):.4f} vs PAN-FPN {np.mean(res.panfpn):.4f}, margin {100 * res.margin:+.2f} pts "
              f"(>= +2), per-seed PRN {[round(v, 4) for v in res.prn]} PAN-FPN {[round(v, 4) for v in res.panfpn]}, "
              f"{res.seconds / 60:.1f} min")
    verdict(7, met and in_budget, detail + ("" if met else " [soft criterion: margin not met, flagged]"))
    assert in_budget
    assert all(np.isfinite(res.prn + res.panfpn))
    if not met:
        pytest.xfail(f"soft criterion: margin {100 * res.margin:+.2f} AP50 points below +2")


def test_8_metric_correctness(verdict):
    t0 = time.perf_counter()
    bad = 0
    for seed in range(50):
        dets, gts = _rand_case(seed, 8, 4)
        for t in (0.5, 0.75):
            bad += average_precision(dets, gts, t) != brute_force_ap(dets, gts, t)
    dets, gts = _hand_case()
    hand = average_precision(dets, gts, 0.5)
    dt = time.perf_counter() - t0
    ok = bad == 0 and abs(hand - HAND_AP) <= 1e-15 and dt < 10
    verdict(8, ok, f"50 random sets x 2 thresholds, {bad} mismatches; hand case {hand:.15f}; {dt:.2f}s")
    assert ok


def _pipeline(root, spec):
    (root / "spec.json").write_text(json.dumps(spec.to_dict()))
    (root / "model.json").write_text(json.dumps(tiny_config("prn").to_dict()))
    (root / "train.json").write_text(json.dumps({"seed": 0}))
    codes = [
        cli_main(["gen", "--spec", str(root / "spec.json"), "--out", str(root / "data")]),
        cli_main(["train", "--data", str(root / "data"), "--model", str(root / "model.json"),
                  "--train", str(root / "train.json"), "--out", str(root / "run"), "--epochs", "1"]),
        cli_main(["eval", "--data", str(root / "data"), "--ckpt", str(root / "run/best.json"),
                  "--json", str(root / "eval.json")]),
        cli_main(["analyze", "--model", str(root / "model.json"), "--input", str(spec.image_size),
                  "--csv", str(root / "analyze.csv")]),
    ]
    return codes, {n: (root / p).read_bytes() for n, p in
                   [("history", "run/history.csv"), ("eval", "eval.json"), ("analyze", "analyze.csv")]}


def test_9_pipeline_determinism(verdict, tmp_path, monkeypatch):
    monkeypatch.delenv("PRNET_SEED", raising=False)
    t0 = time.perf_counter()
    spec = benchmark_spec()
    (tmp_path / "a").mkdir()
    (tmp_path / "b").mkdir()
    ca, a = _pipeline(tmp_path / "a", spec)
    cb, b = _pipeline(tmp_path / "b", spec)
    dt = time.perf_counter() - t0
    same = [k for k in a if a[k] == b[k]]
    ok = ca == cb == [0, 0, 0, 0] and len(same) == 3 and dt < 180
    verdict(9, ok, f"history.csv, eval.json, analyze.csv byte-identical: {sorted(same)}; {dt:.0f}s")
    assert ok
    assert json.loads(a["eval"])["num_images"] == 50
