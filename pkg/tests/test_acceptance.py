"""Acceptance criteria, one test each; every test prints a PASS/FAIL line.

Run ``pytest tests/test_acceptance.py -s -v`` or ``python tests/test_acceptance.py``.
Criteria 5-7 train a few hundred small networks and take several minutes on
one core.
"""

from __future__ import annotations

import itertools
import json
import sys
import time
import warnings
from pathlib import Path

import numpy as np
import pytest
from scipy.linalg import expm

from knaskit.archspace import Blueprint, make_blueprints, sample_cells
from knaskit.cli import main as cli_main
from knaskit.convergence import FlowConfig, check_bound, gradient_flow
from knaskit.data import DataSpec, gen_synthetic
from knaskit.gramkernel import (
    MgmConfig,
    fro_norm,
    gram,
    lambda_min,
    layer_sampled_from_grads,
    mgm_exact,
    split_halves_from_grads,
)
from knaskit.netbuild import Batch, instantiate, per_example_output_grads
from knaskit.records import dumps, read_report, report_to_dict
from knaskit.search import (
    CellSpace,
    SearchConfig,
    SearchReport,
    correlation_study,
    knas_search,
    random_search_baseline,
    speedup_accounting,
)
from knaskit.tensor import INPUT, TARGET, Graph, OpKind, grad_check
from knaskit.trainer import TrainConfig

# desk-scale task shared by criteria 5-7
TASK_NOISE = 1.0
TASK_LR = TrainConfig().lr
CORR_MGM = MgmConfig(estimator="layer_sampled", gradient_mode="output")
SEEDS = (1, 2, 3, 4, 5)
THREADS = 1

_results: dict[int, tuple[bool, str]] = {}


def _verdict(n: int, ok: bool, detail: str) -> None:
    _results[n] = (ok, detail)
    sys.__stdout__.write(f"\n{'PASS' if ok else 'FAIL'} criterion {n}: {detail}\n")
    sys.__stdout__.flush()


# -- 1: gradient correctness --------------------------------------------------


def _rel(a, b) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-12), initial=0.0))


def _input_fd_error(graph: Graph, x: np.ndarray, targets=None, eps: float = 1e-5) -> float:
    graph.backward(graph.forward(x, targets))
    analytic = graph.input_grad.copy()
    num = np.empty_like(x)
    flat, nflat = x.reshape(-1), num.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = graph.forward(x, targets).item()
        flat[i] = orig - eps
        fm = graph.forward(x, targets).item()
        flat[i] = orig
        nflat[i] = (fp - fm) / (2 * eps)
    return _rel(analytic, num)


def _op_fixtures(rng):
    """One small scalar-valued graph per op kind, with inputs and targets."""

    def away(a, gap=1e-2):
        a = np.array(a)
        a[np.abs(a) < gap] = gap
        return a

    out = {}
    g = Graph((3,))
    g.add_param("w", rng.standard_normal((2, 3)))
    g.add_param("b", rng.standard_normal(2))
    g.add_node(OpKind.SUM_OUTPUT, [g.add_node(OpKind.LINEAR, [INPUT], ("w", "b"))])
    out[OpKind.LINEAR] = (g, rng.standard_normal((1, 3)), None)

    g = Graph((3, 3, 2))
    g.add_param("w", rng.standard_normal((2, 3)))
    g.add_param("b", rng.standard_normal(3))
    g.add_node(OpKind.SUM_OUTPUT, [g.add_node(OpKind.CONV1X1, [INPUT], ("w", "b"))])
    out[OpKind.CONV1X1] = (g, rng.standard_normal((1, 3, 3, 2)), None)

    g = Graph((4, 3, 2))
    g.add_param("w", rng.standard_normal((3, 3, 2, 2)))
    g.add_param("b", rng.standard_normal(2))
    c = g.add_node(OpKind.CONV3X3, [INPUT], ("w", "b"))
    g.add_param("v", rng.standard_normal((2, 1)))
    g.add_param("c", np.zeros(1))
    g.add_node(OpKind.SUM_OUTPUT, [g.add_node(OpKind.CONV1X1, [c], ("v", "c"))])
    out[OpKind.CONV3X3] = (g, rng.standard_normal((1, 4, 3, 2)), None)

    g = Graph((4, 4, 2))
    p = g.add_node(OpKind.AVGPOOL3X3, [INPUT])
    g.add_param("w", rng.standard_normal((2, 1)))
    g.add_param("b", np.zeros(1))
    g.add_node(OpKind.SUM_OUTPUT, [g.add_node(OpKind.CONV1X1, [p], ("w", "b"))])
    out[OpKind.AVGPOOL3X3] = (g, rng.standard_normal((1, 4, 4, 2)), None)

    g = Graph((4,))
    g.add_param("w", rng.standard_normal((3, 4)))
    g.add_param("b", np.zeros(3))
    g.add_node(OpKind.SUM_OUTPUT, [g.add_node(OpKind.LINEAR, [g.add_node(OpKind.RELU, [INPUT])], ("w", "b"))])
    out[OpKind.RELU] = (g, away(rng.standard_normal((1, 4))), None)

    g = Graph((3,))
    g.add_param("w", rng.standard_normal((3, 3)))
    g.add_param("b", rng.standard_normal(3))
    lin = g.add_node(OpKind.LINEAR, [INPUT], ("w", "b"))
    g.add_node(OpKind.SUM_OUTPUT, [g.add_node(OpKind.ADD, [INPUT, lin, lin])])
    out[OpKind.ADD] = (g, rng.standard_normal((1, 3)), None)

    g = Graph((3, 3, 2))
    gap = g.add_node(OpKind.GLOBAL_AVG_POOL, [INPUT])
    g.add_param("w", rng.standard_normal((1, 2)))
    g.add_param("b", np.zeros(1))
    g.add_node(OpKind.SUM_OUTPUT, [g.add_node(OpKind.LINEAR, [gap], ("w", "b"))])
    out[OpKind.GLOBAL_AVG_POOL] = (g, rng.standard_normal((1, 3, 3, 2)), None)

    g = Graph((2, 2, 3))
    g.add_param("w", rng.standard_normal((3, 2)))
    g.add_param("b", rng.standard_normal(2))
    g.add_node(OpKind.SUM_OUTPUT, [g.add_node(OpKind.CONV1X1, [INPUT], ("w", "b"))])
    out[OpKind.SUM_OUTPUT] = (g, rng.standard_normal((1, 2, 2, 3)), None)

    g = Graph((3,))
    g.add_param("w", rng.standard_normal((4, 3)))
    g.add_param("b", rng.standard_normal(4))
    g.add_node(OpKind.SOFTMAX_XENT, [g.add_node(OpKind.LINEAR, [INPUT], ("w", "b")), TARGET])
    out[OpKind.SOFTMAX_XENT] = (g, rng.standard_normal((3, 3)), np.array([0, 3, 1]))

    g = Graph((3,))
    g.add_param("w", rng.standard_normal((2, 3)))
    g.add_param("b", rng.standard_normal(2))
    g.add_node(OpKind.MSE, [g.add_node(OpKind.LINEAR, [INPUT], ("w", "b")), TARGET], reduction="mean")
    out[OpKind.MSE] = (g, rng.standard_normal((3, 3)), rng.standard_normal((3, 2)))
    return out


def _smooth_net(bp: Blueprint, seed: int, batch_shape, margin: float = 1e-3):
    """Instantiate with random biases and draw an input keeping every ReLU off its kink."""
    rng = np.random.default_rng([seed, 77])
    for _ in range(50):
        net = instantiate(bp, seed)
        for name, t in net.graph.params.items():
            if name.endswith(".b"):
                t.data[:] = 0.5 * rng.standard_normal(t.shape)
        x = rng.standard_normal(batch_shape)
        g = net.graph
        g.forward(x)
        ok = True
        for node in g.nodes:
            if node.op is OpKind.RELU:
                v = x if node.inputs[0] == INPUT else g.activation(node.inputs[0])
                # exact zeros come from dead units upstream and are locally constant
                if np.any((v != 0) & (np.abs(v) < margin)):
                    ok = False
                    break
        if ok:
            return net, x
        seed += 1000
    raise RuntimeError("no smooth point found")


def criterion_1() -> tuple[bool, str]:
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst_op, worst_net = 0.0, 0.0
    fixtures = _op_fixtures(rng)
    missing = set(OpKind) - set(fixtures)
    for op, (g, x, y) in fixtures.items():
        worst_op = max(worst_op, grad_check(g, x, 1e-5, y) if g.trainable() else 0.0, _input_fd_error(g, x, y))
    nets = []
    for i, cell in enumerate(sample_cells(2024, 14)):
        bp = make_blueprints("chain", 3, cell, n_cells=1, in_shape=(4, 4, 2), head="sum")[0]
        nets.append((bp, i, (1, 4, 4, 2)))
    for j, topo in enumerate(("highway", "lookahead", "dense")):
        for L in (0, 2):
            nets.append((make_blueprints(topo, 5, in_shape=(4,), head="sum")[L], 100 + 2 * j + L, (1, 4)))
    for bp, seed, shape in nets:
        net, x = _smooth_net(bp, seed, shape)
        worst_net = max(worst_net, grad_check(net.graph, x, 1e-5))
    ok = not missing and worst_op <= 1e-5 and worst_net <= 1e-5 and len(nets) == 20
    return ok, (
        f"{len(fixtures)} op kinds max rel err {worst_op:.2e}, {len(nets)} random nets max rel err {worst_net:.2e} "
        f"(tol 1e-5), {time.perf_counter() - t0:.1f}s"
    )


# -- 2: Gram / MGM oracles ----------------------------------------------------


def _naive_gram(G):
    n, P = G.shape
    H = np.zeros((n, n))
    for i in range(n):
        for j in range(n):
            H[i, j] = sum(G[i, p] * G[j, p] for p in range(P))
    return H


def _naive_mean(H):
    n = len(H)
    return sum(H[i, j] for i in range(n) for j in range(n)) / n**2


def criterion_2() -> tuple[bool, str]:
    t0 = time.perf_counter()
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(100):
        n, P = int(rng.integers(1, 9)), int(rng.integers(1, 65))
        G = rng.standard_normal((n, P))
        H = _naive_gram(G)
        worst = max(worst, np.max(np.abs(gram(G).h - H)), abs(mgm_exact(gram(G)).value - _naive_mean(H)))
        cuts = np.sort(rng.choice(np.arange(1, P), size=min(2, P - 1), replace=False)) if P > 1 else []
        bounds = [0, *cuts, P]
        slices = [(f"t{i}", slice(a, b)) for i, (a, b) in enumerate(zip(bounds, bounds[1:]))]
        per_layer = [_naive_mean(_naive_gram(G[:, sl])) for _, sl in slices]
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            ls = layer_sampled_from_grads(G, slices, 64, np.random.default_rng(0))
        worst = max(worst, abs(ls - sum(per_layer) / len(per_layer)))
    # split halves on n = 4: expectation over shuffles vs every ordering
    G = rng.standard_normal((4, 5))
    sl = [("t0", slice(0, 5))]
    exact = np.mean([np.mean(np.sum(G[list(p[:2])] * G[list(p[2:])], axis=0)) for p in itertools.permutations(range(4))])
    draws = np.array([split_halves_from_grads(G, sl, 5, np.random.default_rng(s)) for s in range(1000)])
    sigma = draws.std(ddof=1) / np.sqrt(len(draws))
    dev = abs(draws.mean() - exact)
    ok = worst <= 1e-12 and dev <= 3 * sigma
    return ok, (
        f"100 instances max abs err {worst:.1e} (tol 1e-12); split-halves |mean-exact|={dev:.2e} vs 3σ={3 * sigma:.2e}, "
        f"{time.perf_counter() - t0:.1f}s"
    )


# -- 3: spectral inequality ---------------------------------------------------


def criterion_3() -> tuple[bool, str]:
    rng = np.random.default_rng(3)
    bad = 0
    for _ in range(1000):
        n = int(rng.integers(1, 9))
        H = gram(rng.standard_normal((n, int(rng.integers(1, 17)))) * rng.uniform(0.01, 10))
        bad += lambda_min(H) > fro_norm(H)
    space = CellSpace()
    ds = gen_synthetic(DataSpec(noise=TASK_NOISE, examples=64, seed=3))
    batch = ds.train.subset(slice(0, 16))
    bad_g = 0
    for cell in space.sample(3, 50):
        H = gram(per_example_output_grads(space.network(cell, 3), batch, "output"))
        bad_g += lambda_min(H) > fro_norm(H)
    return bad == 0 and bad_g == 0, f"violations: {bad}/1000 random PSD, {bad_g}/50 genotype H(0)"


# -- 4: exponential loss bound -----------------------------------------------


def criterion_4() -> tuple[bool, str]:
    t0 = time.perf_counter()
    rng = np.random.default_rng(4)
    # (a) linear model, constant H
    net = instantiate(Blueprint("linear", (), in_shape=(8,), head="sum"), 0)
    X = rng.standard_normal((6, 8)) * 0.2
    batch = Batch(X, rng.standard_normal(6))
    traj = gradient_flow(net, batch, FlowConfig(step=1e-4, horizon=1.0, record_every=0.1))
    A = np.hstack([X, np.ones((6, 1))])
    r0 = net.graph.forward(X).data.reshape(-1) - batch.targets
    exact = np.array([batch.targets + expm(-(A @ A.T) * t) @ r0 for t in traj.times])
    lin_err = float(np.max(np.abs(np.array(traj.outputs) - exact)))
    lin_rep = check_bound(traj)
    # (b) random wide MLPs and cells with a sum head, n = 16
    reports = []
    for i in range(10):
        if i < 7:
            bp = Blueprint("mlp", (64,) * (1 + i % 2), in_shape=(8,), head="sum")
            b = Batch(rng.standard_normal((16, 8)), rng.standard_normal(16))
        else:
            cell = sample_cells(40 + i, 1)[0]
            bp = make_blueprints("chain", 64, cell, n_cells=1, in_shape=(3, 3, 2), head="sum")[0]
            b = Batch(rng.standard_normal((16, 3, 3, 2)), rng.standard_normal(16))
        tr = gradient_flow(instantiate(bp, 400 + i), b, FlowConfig(default_steps=1000, records=25))
        reports.append(check_bound(tr))
    viol = sum(len(r.violations) for r in reports) + len(lin_rep.violations)
    ok = viol == 0 and lin_err <= 1e-4
    return ok, (
        f"linear fixture max |y-y_exact|={lin_err:.2e} (tol 1e-4), {viol} bound violations over 11 runs, "
        f"min margin {min(r.min_margin for r in reports):.2e}, {time.perf_counter() - t0:.1f}s"
    )


# -- 5: correlation direction -------------------------------------------------


def criterion_5() -> tuple[bool, str]:
    t0 = time.perf_counter()
    space = CellSpace()
    cells = space.sample(1, 30)
    hits, parts = 0, []
    for s in SEEDS:
        ds = gen_synthetic(DataSpec(noise=TASK_NOISE, seed=s))
        cfg = SearchConfig(30, 30, MgmConfig(estimator=CORR_MGM.estimator, gradient_mode=CORR_MGM.gradient_mode, seed=s), TrainConfig(lr=TASK_LR, seed=s), seed=s)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            _, corr = correlation_study(space, ds, cells, cfg, threads=THREADS)
        good = corr.spearman_rho > 0.3 and corr.p_value < 0.05
        hits += good
        parts.append(f"s{s}: rho={corr.spearman_rho:.2f} p={corr.p_value:.4f}")
    return hits >= 4, f"{hits}/5 seeds with rho>0.3 and p<0.05 [{'; '.join(parts)}], {time.perf_counter() - t0:.0f}s"


# -- 6 and 7: search quality and speedup --------------------------------------

_search_runs: list[tuple[SearchReport, SearchReport]] = []


def _run_searches() -> list[tuple[SearchReport, SearchReport]]:
    if not _search_runs:
        space = CellSpace()
        for s in SEEDS:
            ds = gen_synthetic(DataSpec(noise=TASK_NOISE, seed=s))
            cfg = SearchConfig(50, 5, MgmConfig(seed=s), TrainConfig(lr=TASK_LR, seed=s), seed=s)
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                knas = knas_search(space, ds, cfg, threads=THREADS)
                rand = random_search_baseline(space, ds, 5, cfg, threads=THREADS)
            _search_runs.append((knas, rand))
    return _search_runs


def _best_acc(rep: SearchReport) -> float:
    return next(t.val_acc for t in rep.trials if t.genotype == str(rep.best_genotype))


def criterion_6() -> tuple[bool, str]:
    t0 = time.perf_counter()
    runs = _run_searches()
    k = np.array([_best_acc(a) for a, _ in runs])
    r = np.array([_best_acc(b) for _, b in runs])
    wins = int(np.sum(k >= r))
    ok = k.mean() >= r.mean() - 0.005 and wins >= 3
    return ok, (
        f"knas mean {k.mean():.3f} vs random mean {r.mean():.3f}, knas >= random in {wins}/5 seeds "
        f"[{', '.join(f'{a:.3f}/{b:.3f}' for a, b in zip(k, r))}], {time.perf_counter() - t0:.0f}s"
    )


def criterion_7() -> tuple[bool, str]:
    runs = _run_searches()
    score_t = [t.mgm.wall_time for a, _ in runs for t in a.trials]
    train_t = [t.curve.wall_time for a, b in runs for t in a.candidates + b.candidates]
    ratio = float(np.mean(train_t) / np.mean(score_t))
    speedups = [speedup_accounting(a) for a, _ in runs]
    ok = ratio >= 10 and min(speedups) > 5
    return ok, (
        f"per-architecture train/score time {np.mean(train_t):.2f}s/{np.mean(score_t):.3f}s = {ratio:.0f}x (need >=10); "
        f"speedup M=50,k=5 min {min(speedups):.2f} (need >5)"
    )


# -- 8: determinism and persistence -------------------------------------------


def _files(d: Path) -> dict[str, bytes]:
    return {p.name: p.read_bytes() for p in sorted(d.iterdir()) if p.name != "timing.json"}


def criterion_8(tmp: Path) -> tuple[bool, str]:
    data = tmp / "data"
    common = ["--data", str(data), "--batch", "8", "--width", "4"]
    train = ["--epochs", "2", "--lr", str(TASK_LR)]
    commands = {
        "gen-data": ["gen-data", "--n", "96", "--seed", "3", "--noise", str(TASK_NOISE)],
        "score": ["score", "--sample", "8", "--seed", "1"] + common,
        "search-knas": ["search", "--policy", "knas", "--m", "6", "--k", "2", "--seed", "2"] + common + train,
        "search-random": ["search", "--policy", "random", "--k", "2", "--seed", "2"] + common + train,
        "correlate": ["correlate", "--sample", "6", "--groups", "2", "--seed", "1"] + common + train,
        "verify-bound": ["verify-bound", "--net", "mlp", "--width", "64", "--n", "16", "--steps", "200"],
    }
    problems = []
    assert cli_main(commands["gen-data"] + ["--out", str(data)]) == 0
    for name, argv in commands.items():
        dirs = []
        for rep, threads in (("a", "1"), ("b", "2")):
            out = tmp / f"{name}-{rep}"
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                code = cli_main(argv + ["--out", str(out), "--threads", threads])
            if code != 0:
                problems.append(f"{name} exit {code}")
            dirs.append(out)
        if _files(dirs[0]) != _files(dirs[1]):
            problems.append(f"{name} outputs differ")
        if (dirs[0] / "report.json").exists():
            text = (dirs[0] / "report.json").read_text()
            r = read_report(dirs[0])
            if dumps(report_to_dict(r, timings=False)) != text:
                problems.append(f"{name} report does not round-trip")
            if "best_genotype" in r.extra:
                back = SearchReport.from_run_report(r).to_run_report()
                back.config = r.config
                back.extra.update({k: v for k, v in r.extra.items() if k not in back.extra})
                if dumps(report_to_dict(back, timings=False)) != text:
                    problems.append(f"{name} search report does not round-trip")
        json.loads((dirs[0] / "config.json").read_text())
    return not problems, f"{len(commands)} commands rerun byte-identical and round-trip" if not problems else "; ".join(problems)


# -- pytest entry points ------------------------------------------------------


def _check(n, fn, *args):
    ok, detail = fn(*args)
    _verdict(n, ok, detail)
    assert ok, detail


def test_criterion_1_gradient_correctness():
    _check(1, criterion_1)


def test_criterion_2_gram_oracles():
    _check(2, criterion_2)


def test_criterion_3_spectral_inequality():
    _check(3, criterion_3)


def test_criterion_4_loss_bound():
    _check(4, criterion_4)


@pytest.mark.slow
def test_criterion_5_correlation_direction():
    _check(5, criterion_5)


@pytest.mark.slow
def test_criterion_6_search_quality():
    _check(6, criterion_6)


@pytest.mark.slow
def test_criterion_7_speedup():
    _check(7, criterion_7)


def test_criterion_8_determinism(tmp_path):
    _check(8, criterion_8, tmp_path)


if __name__ == "__main__":
    import tempfile

    failed = 0
    for n, fn in [(1, criterion_1), (2, criterion_2), (3, criterion_3), (4, criterion_4), (5, criterion_5), (6, criterion_6), (7, criterion_7)]:
        ok, detail = fn()
        _verdict(n, ok, detail)
        failed += not ok
    with tempfile.TemporaryDirectory() as tmp:
        ok, detail = criterion_8(Path(tmp))
        _verdict(8, ok, detail)
        failed += not ok
    sys.exit(1 if failed else 0)
