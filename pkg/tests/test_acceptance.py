"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Criteria 8 and 9 train four toy networks twice (about 7 minutes on one core).
"""

import time
from pathlib import Path

import numpy as np
import pytest

from conftest import SMALL_IMAGE_CRF, two_region_instance
from test_metrics import set_arithmetic
from waspnet import ops
from waspnet.analysis import branch_receptive_fields, count_parameters, receptive_field
from waspnet.builders import TOY_WIDTHS, HeadWidths, build_head, build_network
from waspnet.config import parse_config
from waspnet.crf import CrfParams, UnaryField, energy, mean_field_refine
from waspnet.gradcheck import grad_check, graph_grad_check
from waspnet.graph import ModuleGraph
from waspnet.metrics import ConfusionMatrix
from waspnet.ops import ConvSpec
from waspnet.reports import (COMPARE_HEADER, compare_rows, compare_table, format_table,
                             load_splits, to_csv)
from waspnet.training import PolySchedule, cross_entropy, poly_lr

HEADS = ("aspp", "cascade", "res2net-seg", "wasp")
SEEDS = range(5)

# Toy end-to-end setup, frozen after the pilot run (WASP reached 0.899).
TOY_CONFIG = """
backbone = toy-resnet(2,16)
num_classes = 4
n_images = 200
n_val = 40
image_size = 64
max_iter = 500
batch_size = 8
base_lr = 0.05
eval_every = 100
seed = 0
"""
TOY_MIOU_THRESHOLD = 0.85


# ---------------------------------------------------------------------------
# 1. Parameter accounting
# ---------------------------------------------------------------------------


def test_criterion_1_parameter_accounting(verdict):
    start = time.perf_counter()
    counts = {h: count_parameters(build_network(h, None, "resnet101-counting", 21, HeadWidths()))
              for h in ("aspp", "res2net-seg", "wasp")}
    elapsed = time.perf_counter() - start
    base = counts["aspp"]
    red_wasp = 100 * (base - counts["wasp"]) / base
    red_res2 = 100 * (base - counts["res2net-seg"]) / base
    ok = (counts["wasp"] < counts["res2net-seg"] < base
          and abs(base - 59.869e6) <= 0.05 * 59.869e6
          and abs(red_wasp - 20.69) <= 3 and abs(red_res2 - 14.99) <= 3
          and elapsed < 1.0)
    verdict(1, ok, f"ASPP {base:,} / Res2Net-Seg {counts['res2net-seg']:,} ({red_res2:.2f}%) / "
                   f"WASP {counts['wasp']:,} ({red_wasp:.2f}%) in {elapsed:.3f}s")


# ---------------------------------------------------------------------------
# 2. Dilated convolution correctness
# ---------------------------------------------------------------------------


def test_criterion_2_dilated_conv(verdict):
    start = time.perf_counter()
    g = np.random.default_rng(2024)
    rates = (1, 2, 3, 6, 12, 18, 24)
    worst, exact, cases = 0.0, True, 0
    for case in range(105):
        r = rates[case % len(rates)]
        c_in, c_out = int(g.integers(1, 4)), int(g.integers(1, 4))
        h, w = (int(v) for v in g.integers(5, 24, size=2))
        x = g.standard_normal((int(g.integers(1, 3)), c_in, h, w)).astype(np.float32)
        k = g.standard_normal((c_out, c_in, 3, 3)).astype(np.float32)
        b = g.standard_normal(c_out).astype(np.float32)
        pad = int(g.integers(0, r + 1))
        if (h + 2 * pad - 2 * r) < 1 or (w + 2 * pad - 2 * r) < 1:
            pad = r
        dilated = ops.conv2d(x, ConvSpec(k, b, dilation=r, padding=pad))
        stuffed = ops.conv2d(x, ConvSpec(ops.zero_stuff(k, r), b, padding=pad))
        worst = max(worst, float(np.abs(dilated - stuffed).max()))
        if r == 1:
            plain = ops.conv2d(x, ConvSpec(k, b, padding=pad))
            exact &= np.array_equal(dilated, plain) and np.array_equal(ops.zero_stuff(k, 1), k)
        cases += 1
    elapsed = time.perf_counter() - start
    ok = worst <= 1e-5 and exact and cases >= 100 and elapsed < 30
    verdict(2, ok, f"{cases} cases, zero-stuffing max |diff| {worst:.2e}, r=1 exact={exact}, "
                   f"{elapsed:.1f}s")


# ---------------------------------------------------------------------------
# 3. Gradient suite
# ---------------------------------------------------------------------------


def _proj_check(forward, backward, inputs, seed, out_shape):
    proj = np.random.default_rng(seed + 100).standard_normal(out_shape)
    return grad_check(lambda p: float((forward(p) * proj).sum()), lambda p: backward(p, proj),
                      inputs, 1e-4, 1e-3, seed=seed)


def _op_checks(seed):
    # inputs use their own stream: graph_grad_check draws its projection from
    # default_rng(seed), and x == R would null the batch-norm gradient
    g = np.random.default_rng(seed + 1000)
    x = g.standard_normal((2, 3, 6, 6))
    reports = {}

    for r in (1, 2, 3):
        k, b = g.standard_normal((2, 3, 3, 3)), g.standard_normal(2)
        spec = lambda p, r=r: ConvSpec(p["k"], p["b"], dilation=r, padding=r)  # noqa: E731

        def bwd(p, proj, spec=spec):
            gx, gk, gb = ops.conv2d_backward(p["x"], spec(p), proj)
            return {"x": gx, "k": gk, "b": gb}

        reports[f"atrous-conv r={r}"] = _proj_check(lambda p, spec=spec: ops.conv2d(p["x"], spec(p)), bwd,
                                                   {"x": x, "k": k, "b": b}, seed, (2, 2, 6, 6))
    reports["bilinear"] = _proj_check(
        lambda p: ops.bilinear_resize(p["x"], 11, 9),
        lambda p, proj: {"x": ops.bilinear_resize_backward(proj, 6, 6)}, {"x": x}, seed, (2, 3, 11, 9))
    reports["global-avg-pool"] = _proj_check(
        lambda p: ops.global_avg_pool(p["x"]),
        lambda p, proj: {"x": ops.global_avg_pool_backward(proj, p["x"].shape)}, {"x": x}, seed,
        (2, 3, 1, 1))
    reports["softmax"] = _proj_check(
        lambda p: ops.softmax_channels(p["x"]),
        lambda p, proj: {"x": ops.softmax_channels_backward(proj, ops.softmax_channels(p["x"]))},
        {"x": x}, seed, x.shape)
    mask, _ = ops.dropout(np.ones_like(x), 0.5, "train", g)
    reports["dropout"] = _proj_check(
        lambda p: p["x"] * mask, lambda p, proj: {"x": ops.dropout_backward(proj, mask)}, {"x": x}, seed,
        x.shape)
    labels = g.integers(0, 3, (2, 6, 6))
    labels[0, :2] = 255
    reports["cross-entropy"] = grad_check(lambda p: cross_entropy(p["z"], labels)[0],
                                          lambda p: {"z": cross_entropy(p["z"], labels)[1]}, {"z": x})

    # layers with kinks or state go through small graphs
    def single(kind, **attrs):
        m = ModuleGraph(kind)
        m.add_input("input", 3)
        m.add("op", kind, "input", **attrs)
        return m.init_params(seed, np.float64)

    graphs = {
        "relu": single("relu"),
        "batchnorm (train)": single("batchnorm", channels=3),
        "batchnorm (eval)": single("batchnorm", channels=3),
        "maxpool": single("maxpool", kernel=3, stride=2, padding=1),
        "se-gate": single("se-gate", channels=3, reduction=1),
        "split": single("split", start=1, stop=3),
    }
    m = ModuleGraph("fusion")
    m.add_input("input", 3)
    a = m.add("a", "conv", "input", in_ch=3, out_ch=3, kernel=1)
    m.add("sum", "sum", ["input", a])
    m.add("cat", "concat", ["sum", a])
    graphs["sum+concat"] = m.init_params(seed, np.float64)
    for name, graph in graphs.items():
        mode = "train" if name == "batchnorm (train)" else "eval"
        if name == "batchnorm (eval)":
            graph.buffers = {k: np.abs(g.standard_normal(v.shape)) + 0.5 for k, v in graph.buffers.items()}
        reports[name] = graph_grad_check(graph, x, seed=seed, mode=mode)
    return reports


def test_criterion_3_gradient_suite(verdict):
    start = time.perf_counter()
    worst, failures, n_checks = 0.0, [], 0
    for seed in SEEDS:
        reports = _op_checks(seed)
        for head in HEADS:
            graph = build_head(head, 8, None, TOY_WIDTHS).init_params(seed)
            x = np.random.default_rng(seed + 1000).standard_normal((1, 8, 7, 7))
            reports[f"head {head}"] = graph_grad_check(graph, x, seed=seed, max_coords=12)
        for name, rep in reports.items():
            n_checks += 1
            worst = max(worst, rep.max_rel_error)
            if not rep.passed:
                failures.append(f"{name} seed {seed}: {rep}")
    elapsed = time.perf_counter() - start
    ok = not failures and elapsed < 300
    verdict(3, ok, f"{n_checks} checks over {len(SEEDS)} seeds, max rel error {worst:.2e}, "
                   f"{elapsed:.1f}s" + (f"; failed: {failures[:3]}" if failures else ""))


# ---------------------------------------------------------------------------
# 4. Receptive fields
# ---------------------------------------------------------------------------


def test_criterion_4_receptive_fields(verdict):
    start = time.perf_counter()
    rates = (6, 12, 18, 24)
    wasp = receptive_field(build_head("wasp", 2048, rates, HeadWidths())).size
    aspp_graph = build_head("aspp", 2048, rates, HeadWidths())
    aspp = receptive_field(aspp_graph).size
    kernels = [ke for _, _, ke in branch_receptive_fields(aspp_graph)]
    elapsed = time.perf_counter() - start
    ok = wasp == 121 and aspp == 49 and wasp > aspp and kernels == [13, 25, 37, 49] and elapsed < 1
    verdict(4, ok, f"WASP RF {wasp}, ASPP RF {aspp}, branch kernels {kernels}, {elapsed:.3f}s")


# ---------------------------------------------------------------------------
# 5. Poly learning rate
# ---------------------------------------------------------------------------


def test_criterion_5_poly_lr(verdict):
    s = PolySchedule(0.007, 1000, 0.9)
    lrs = np.array([poly_lr(i, s) for i in range(1001)])
    checks = {
        "start": abs(lrs[0] - 0.007) <= 1e-12,
        "end": abs(lrs[-1]) <= 1e-12,
        "midpoint": abs(poly_lr(500, s) - 0.007 * 0.5**0.9) <= 1e-12,
        "monotone": bool(np.all(np.diff(lrs) < 0)),
    }
    verdict(5, all(checks.values()), ", ".join(f"{k}={v}" for k, v in checks.items()))


# ---------------------------------------------------------------------------
# 6. mIOU oracle equivalence
# ---------------------------------------------------------------------------


def test_criterion_6_miou_oracle(verdict):
    g = np.random.default_rng(6)
    worst, integer_ok, n = 0.0, True, 0
    for _ in range(60):
        C = int(g.integers(2, 8))
        shape = tuple(int(v) for v in g.integers(4, 20, size=2))
        gt = g.integers(0, C, shape)
        gt[g.random(shape) < 0.1] = 255
        pred = np.where(g.random(shape) < 0.5, np.where(gt == 255, 0, gt), g.integers(0, C, shape))
        conf = ConfusionMatrix(C).accumulate(pred, gt)
        tp, fp, fn, mean = set_arithmetic(pred, gt, C)
        integer_ok &= (np.array_equal(conf.tp, tp) and np.array_equal(conf.fp, fp)
                       and np.array_equal(conf.fn, fn))
        worst = max(worst, abs(conf.miou()[0] - mean))
        n += 1
    verdict(6, integer_ok and worst <= 1e-12 and n >= 50,
            f"{n} maps, TP/FP/FN identical={integer_ok}, max |mIOU diff| {worst:.1e}")


# ---------------------------------------------------------------------------
# 7. CRF
# ---------------------------------------------------------------------------


def run_crf_harness():
    """Criterion 7 checks plus a per-instance CSV of unrefined/refined mIOU."""
    params = CrfParams(**SMALL_IMAGE_CRF)
    g = np.random.default_rng(7)
    P = g.dirichlet(np.ones(3), size=(8, 8)).transpose(2, 0, 1)
    u = UnaryField(P, g.uniform(0, 255, (8, 8, 3)))
    identity = np.array_equal(mean_field_refine(u, CrfParams(w1=0, w2=0)), u.probabilities)
    _, history = mean_field_refine(u, params, return_history=True)
    norm_err = max(float(np.abs(Q.sum(axis=0) - 1).max()) for Q in history)

    rows, improved = [], True
    for seed in range(20):
        prob, image, truth = two_region_instance(seed)
        refined = mean_field_refine(UnaryField(prob, image), params)
        before = ConfusionMatrix(2).accumulate(prob.argmax(axis=0), truth).miou()[0]
        after = ConfusionMatrix(2).accumulate(refined.argmax(axis=0), truth).miou()[0]
        improved &= after >= before
        rows.append((seed, f"{before:.6f}", f"{after:.6f}"))

    two = UnaryField(np.array([[[0.7, 0.2]], [[0.3, 0.8]]]),
                     np.array([[[10.0, 20.0, 30.0], [13.0, 24.0, 30.0]]]))
    p2 = CrfParams(w1=4, w2=3, sigma_alpha=2, sigma_beta=5, sigma_gamma=1.5)
    hand = (-np.log(0.7) - np.log(0.8) + 4 * np.exp(-1 / 8 - 25 / 50) + 3 * np.exp(-1 / 4.5))
    energy_err = abs(energy(np.array([[0, 1]]), two, p2) - hand)
    csv = to_csv(("instance", "unrefined_miou", "refined_miou"), rows)
    return identity, norm_err, improved, energy_err, csv


def test_criterion_7_crf(verdict, tmp_path):
    start = time.perf_counter()
    identity, norm_err, improved, energy_err, csv = run_crf_harness()
    elapsed = time.perf_counter() - start
    ok = identity and norm_err <= 1e-5 and improved and energy_err <= 1e-9 and elapsed < 60
    verdict(7, ok, f"identity={identity}, normalisation err {norm_err:.1e}, 20/20 improved={improved}, "
                   f"2-pixel energy err {energy_err:.1e}, {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# 8 and 9. Toy end-to-end and determinism
# ---------------------------------------------------------------------------


def run_toy_harness():
    """Train every head on the synthetic set; returns (rows, CSV text)."""
    cfg = parse_config(TOY_CONFIG + "heads = " + ",".join(HEADS))
    rows = compare_rows(cfg, splits=load_splits(cfg))
    csv = to_csv(COMPARE_HEADER + ("checksum",),
                 [t + (r.checksum,) for t, r in zip(compare_table(rows), rows)])
    return rows, csv


@pytest.fixture(scope="module")
def first_run():
    start = time.perf_counter()
    crf_csv = run_crf_harness()[-1]
    rows, toy_csv = run_toy_harness()
    return rows, toy_csv, crf_csv, time.perf_counter() - start


@pytest.mark.slow
def test_criterion_8_toy_end_to_end(verdict, first_run, tmp_path_factory):
    rows, toy_csv, _, elapsed = first_run
    out = tmp_path_factory.mktemp("toy") / "toy_compare.csv"
    out.write_text(toy_csv)
    print()
    print(format_table(COMPARE_HEADER, compare_table(rows)))
    scores = {r.name: r.miou for r in rows}
    ok = (scores["wasp"] >= TOY_MIOU_THRESHOLD and all(np.isfinite(v) for v in scores.values())
          and elapsed <= 15 * 60)
    verdict(8, ok, "val mIOU " + ", ".join(f"{k} {v:.4f}" for k, v in scores.items())
            + f" (WASP threshold {TOY_MIOU_THRESHOLD}), {elapsed:.0f}s; report {Path(out).name}")


@pytest.mark.slow
def test_criterion_9_determinism(verdict, first_run):
    _, toy_csv, crf_csv, _ = first_run
    crf_again = run_crf_harness()[-1]
    rows_again, toy_again = run_toy_harness()
    ok = toy_again == toy_csv and crf_again == crf_csv
    verdict(9, ok, f"CRF CSV identical={crf_again == crf_csv}, toy CSV incl. checksums "
                   f"identical={toy_again == toy_csv} ({rows_again[-1].checksum[:12]}...)")
