"""Command-line entry point: ``knaskit <subcommand> ...``.

Every run resolves its configuration (defaults < ``--config`` file <
``--set key=value`` < explicit flags) and writes it to ``config.json`` in the
output directory before doing any work. Wall-clock numbers go to
``timing.json`` so that every other output is byte-reproducible.

Exit codes: 0 success, 1 checked-property failure, 2 usage or contract
error, 3 I/O or format error.
"""

from __future__ import annotations

import argparse
import csv
import filecmp
import logging
import shutil
import sys
import tempfile
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from .archspace import Blueprint, make_blueprints, parse_genotype
from .convergence import FlowConfig, FlowTrajectory, check_bound, gradient_flow
from .data import DataSpec, Dataset, gen_synthetic, ingest_cifar10, load_dataset, save_dataset, scoring_batch
from .errors import ContractError, DivergenceError, FormatError, KnasError, NoViableCandidate
from .gramkernel import MgmConfig
from .netbuild import Batch, instantiate
from .records import (
    RunReport,
    dumps,
    groups_csv,
    read_report,
    report_to_dict,
    trials_csv,
    write_report,
)
from .search import (
    CellSpace,
    SearchConfig,
    default_threads,
    knas_search,
    random_search_baseline,
    correlation_study,
    score_genotypes,
    subseed,
)
from .stats import rank_group_summary
from .trainer import TrainConfig

log = logging.getLogger("knaskit")

EXIT_OK, EXIT_CHECK, EXIT_USAGE, EXIT_IO = 0, 1, 2, 3

_DATA_KEYS = {"data": "", "classes": 4, "examples": 512, "noise": DataSpec.noise, "width": 8}
_MGM_KEYS = {"m": 50, "estimator": "split_halves", "mode": "loss", "batch": 32}
_TRAIN_KEYS = {"epochs": 20, "lr": TrainConfig.lr, "batch_size": 32}

DEFAULTS: dict[str, dict] = {
    "gen-data": {"classes": 4, "examples": 512, "noise": DataSpec.noise, "seed": 0, "cifar": "", "n_train": 0, "n_val": 0},
    "score": {**_DATA_KEYS, **_MGM_KEYS, "seed": 0, "arch": "", "sample": 0},
    "search": {**_DATA_KEYS, **_MGM_KEYS, **_TRAIN_KEYS, "seed": 0, "policy": "knas", "max_iterations": 100, "k": 20},
    "correlate": {
        **_DATA_KEYS,
        **_MGM_KEYS,
        **_TRAIN_KEYS,
        "estimator": "layer_sampled",
        "mode": "output",
        "seed": 0,
        "sample": 30,
        "sample_seed": 1,
        "source": "",
        "train": False,
        "groups": 4,
        "permutations": 10_000,
    },
    "verify-bound": {
        "seed": 0,
        "net": "mlp",
        "width": 64,
        "n": 16,
        "inputs": 8,
        "count": 1,
        "arch": "",
        "steps": 2000,
        "records": 50,
        "step": 0.0,
        "replay": "",
    },
    "report": {"run": "", "groups": 0},
}


class UsageError(Exception):
    pass


# -- configuration -----------------------------------------------------------


def _coerce(key: str, raw, like):
    if not isinstance(raw, str):
        return raw
    try:
        if isinstance(like, bool):
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(like, int):
            return int(raw)
        if isinstance(like, float):
            return float(raw)
    except ValueError:
        raise UsageError(f"{key}: cannot read {raw!r} as {type(like).__name__}") from None
    return raw


def read_config_file(path: str | Path) -> dict[str, str]:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise FormatError(f"cannot read config file {path}: {exc}") from exc
    for no, line in enumerate(lines, start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{no}: expected key=value, got {line!r}")
        k, v = line.split("=", 1)
        out[k.strip().replace("-", "_")] = v.strip()
    return out


def resolve_config(cmd: str, args: argparse.Namespace) -> dict:
    defaults = DEFAULTS[cmd]
    cfg = dict(defaults)
    layers = []
    if args.config:
        layers.append(read_config_file(args.config))
    sets = {}
    for item in args.set or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        sets[k.strip().replace("-", "_")] = v.strip()
    layers.append(sets)
    layers.append({k: v for k, v in vars(args).items() if k in defaults and v is not None})
    for layer in layers:
        for k, v in layer.items():
            if k not in defaults:
                raise UsageError(f"unknown setting {k!r} for {cmd}; known: {', '.join(sorted(defaults))}")
            cfg[k] = _coerce(k, v, defaults[k])
    return cfg


def _prepare_out(args, cfg: dict, cmd: str) -> Path | None:
    if not args.out:
        return None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(dumps({"command": cmd, **cfg}))
    return out


def _threads(args) -> int:
    return args.threads if args.threads else default_threads()


# -- shared pieces -----------------------------------------------------------


def _dataset(cfg: dict) -> Dataset:
    if cfg["data"]:
        return load_dataset(cfg["data"])
    return gen_synthetic(DataSpec(classes=cfg["classes"], examples=cfg["examples"], noise=cfg["noise"], seed=cfg["seed"]))


def _space(cfg: dict, ds: Dataset) -> CellSpace:
    return CellSpace(width=cfg["width"], in_shape=ds.input_shape, num_classes=ds.num_classes)


def _mgm(cfg: dict) -> MgmConfig:
    return MgmConfig(m=cfg["m"], seed=cfg["seed"], estimator=cfg["estimator"], gradient_mode=cfg["mode"])


def _search_cfg(cfg: dict, max_iterations: int, k: int) -> SearchConfig:
    t = {**_TRAIN_KEYS, **cfg}
    train = TrainConfig(epochs=t["epochs"], lr=t["lr"], batch_size=t["batch_size"], seed=cfg["seed"])
    return SearchConfig(max_iterations, k, _mgm(cfg), train, cfg["seed"], cfg["batch"])


def _write(path: Path, text: str) -> None:
    path.write_text(text)
    log.info("wrote %s", path)


def _emit(out: Path | None, report: RunReport, csv_name: str | None = None, csv_text: str | None = None) -> None:
    if out is None:
        sys.stdout.write(dumps(report_to_dict(report, timings=False)))
        return
    write_report(report, out)
    if csv_name:
        _write(out / csv_name, csv_text)


# -- subcommands -------------------------------------------------------------


def cmd_gen_data(args, cfg: dict) -> int:
    out = Path(args.out)
    if cfg["cifar"]:
        ds = ingest_cifar10(cfg["cifar"], cfg["n_train"] or None, cfg["n_val"] or None)
    else:
        spec = DataSpec(classes=cfg["classes"], examples=cfg["examples"], noise=cfg["noise"], seed=cfg["seed"])
        ds = gen_synthetic(spec)
    with tempfile.TemporaryDirectory() as tmp:
        written = save_dataset(ds, tmp)
        same = all((out / p.name).exists() and filecmp.cmp(p, out / p.name, shallow=False) for p in written)
        if not same:
            for p in written:
                shutil.copyfile(p, out / p.name)
    print(f"dataset {out}: {len(ds.train)} train / {len(ds.val)} val, shape {ds.input_shape}, {ds.num_classes} classes")
    if same:
        print("unchanged: existing files already match")
    return EXIT_OK


def cmd_score(args, cfg: dict, out: Path | None) -> int:
    ds = _dataset(cfg)
    space = _space(cfg, ds)
    if cfg["arch"]:
        cells = [parse_genotype(a) for a in cfg["arch"].split(",")]
    elif cfg["sample"]:
        cells = space.sample(cfg["seed"], cfg["sample"])
    else:
        raise UsageError("score needs --arch or --sample")
    scfg = _search_cfg(cfg, max(len(cells), 1), 1)
    t0 = time.perf_counter()
    trials = score_genotypes(space, scoring_batch(ds, cfg["batch"], cfg["seed"]), cells, scfg, _threads(args))
    report = RunReport(cfg, trials, timings={"scoring_time": time.perf_counter() - t0})
    _emit(out, report, "trials.csv", trials_csv(trials))
    return EXIT_OK


def cmd_search(args, cfg: dict, out: Path | None) -> int:
    ds = _dataset(cfg)
    space = _space(cfg, ds)
    if cfg["policy"] == "knas":
        rep = knas_search(space, ds, _search_cfg(cfg, cfg["max_iterations"], cfg["k"]), _threads(args))
    elif cfg["policy"] == "random":
        rep = random_search_baseline(space, ds, cfg["k"], _search_cfg(cfg, cfg["k"], cfg["k"]), _threads(args))
    else:
        raise UsageError(f"unknown policy {cfg['policy']!r}; use knas or random")
    run = rep.to_run_report()
    run.config = cfg
    run.extra["search_config"] = rep.config
    if rep.speedup is not None:
        run.timings["speedup"] = rep.speedup
    _emit(out, run, "trials.csv", trials_csv(rep.trials))
    best = next(t for t in rep.trials if t.genotype == str(rep.best_genotype))
    print(f"best {rep.best_genotype} val_acc={best.val_acc}", file=sys.stderr)
    return EXIT_OK


def cmd_correlate(args, cfg: dict, out: Path | None) -> int:
    ds = _dataset(cfg)
    space = _space(cfg, ds)
    scfg = _search_cfg(cfg, 1, 1)
    t0 = time.perf_counter()
    trials = None
    if cfg["source"]:
        trials = read_report(cfg["source"]).trials
        missing = [t.genotype for t in trials if t.val_acc is None]
        if missing and not cfg["train"]:
            raise ContractError(f"{len(missing)} trial(s) in {cfg['source']} have no accuracy; pass --train to train them")
        cells = [parse_genotype(t.genotype) for t in trials]
        # retrain from the same initializations the source run scored
        scfg = replace(scfg, seed=trials[0].seed) if trials else scfg
    else:
        cells = space.sample(cfg["sample_seed"], cfg["sample"])
    trials, corr = correlation_study(space, ds, cells, scfg, cfg["permutations"], _threads(args), trials)
    usable = [t for t in trials if t.val_acc is not None and t.mgm is not None and t.mgm.numeric_ok]
    table = rank_group_summary(usable, cfg["groups"]) if cfg["groups"] else []
    report = RunReport(cfg, trials, corr, {"total_time": time.perf_counter() - t0}, {"groups": table})
    if out is not None:
        _write(out / "groups.csv", groups_csv(table))
    _emit(out, report, "trials.csv", trials_csv(trials))
    print(f"spearman rho={corr.spearman_rho:.4f} p={corr.p_value:.4g} n={corr.n}", file=sys.stderr)
    return EXIT_OK


def _read_trajectory(path: str | Path) -> FlowTrajectory:
    try:
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        return FlowTrajectory(
            times=[float(r["t"]) for r in rows],
            losses=[float(r["loss"]) for r in rows],
            lambda_mins=[float(r["lambda_min"]) for r in rows],
            bound_values=[float(r["bound"]) for r in rows],
        )
    except (KeyError, ValueError) as exc:
        raise FormatError(f"{path}: not a trajectory CSV ({exc})") from exc


def _bound_nets(cfg: dict):
    rng = np.random.default_rng([cfg["seed"], 0xB0D])
    n, d = cfg["n"], cfg["inputs"]
    for i in range(cfg["count"]):
        if cfg["net"] in ("mlp", "linear"):
            hidden = (cfg["width"],) if cfg["net"] == "mlp" else ()
            bp = Blueprint(cfg["net"], hidden, in_shape=(d,), head="sum")
            batch = Batch(rng.standard_normal((n, d)), rng.standard_normal(n))
        elif cfg["net"] == "cell":
            cell = parse_genotype(cfg["arch"]) if cfg["arch"] else CellSpace().sample(cfg["seed"], cfg["count"])[i]
            bp = make_blueprints("chain", cfg["width"], cell, n_cells=1, in_shape=(4, 4, 3), head="sum")[0]
            batch = Batch(rng.standard_normal((n, 4, 4, 3)), rng.standard_normal(n))
        else:
            raise UsageError(f"unknown --net {cfg['net']!r}; use mlp, linear or cell")
        yield instantiate(bp, subseed(cfg["seed"], i)), batch


def cmd_verify_bound(args, cfg: dict, out: Path | None) -> int:
    if cfg["replay"]:
        rep = check_bound(_read_trajectory(cfg["replay"]))
        summary = {"nets": [{"net": 0, "status": "ok" if rep.holds else "violation", **_bound_dict(rep)}], "holds": rep.holds}
        return _finish_bound(summary, out, {})
    rows, timings = [], {}
    flow = FlowConfig(step=cfg["step"] or None, default_steps=cfg["steps"], records=cfg["records"])
    for i, (net, batch) in enumerate(_bound_nets(cfg)):
        try:
            traj = gradient_flow(net, batch, flow)
        except DivergenceError as exc:
            rows.append({"net": i, "status": "diverged", "message": str(exc)})
            continue
        timings[f"net{i}"] = traj.wall_time
        rep = check_bound(traj)
        rows.append({"net": i, "status": "ok" if rep.holds else "violation", **_bound_dict(rep)})
        if out is not None:
            name = "trajectory.csv" if cfg["count"] == 1 else f"trajectory_{i:02d}.csv"
            _write(out / name, traj.to_csv())
    summary = {"nets": rows, "holds": all(r["status"] == "ok" for r in rows)}
    return _finish_bound(summary, out, timings)


def _bound_dict(rep) -> dict:
    return {"holds": rep.holds, "min_margin": rep.min_margin, "violations": rep.violations, "lambda_positive": rep.lambda_positive}


def _finish_bound(summary: dict, out: Path | None, timings: dict) -> int:
    if out is not None:
        _write(out / "bound.json", dumps(summary))
        _write(out / "timing.json", dumps(timings))
    else:
        sys.stdout.write(dumps(summary))
    for r in summary["nets"]:
        if r["status"] == "violation":
            print(f"net {r['net']}: bound violated at record(s) {r['violations']}", file=sys.stderr)
        elif r["status"] == "diverged":
            print(f"net {r['net']}: diverged: {r['message']}", file=sys.stderr)
    return EXIT_OK if summary["holds"] else EXIT_CHECK


def cmd_report(args, cfg: dict, out: Path | None) -> int:
    if not cfg["run"]:
        raise UsageError("report needs --run DIR")
    run = Path(cfg["run"])
    r = read_report(run)
    on_disk = (run / "report.json").read_text()
    if dumps(report_to_dict(r, timings=False)) != on_disk:
        print(f"{run}/report.json does not round-trip byte-identically", file=sys.stderr)
        return EXIT_CHECK
    scored = [t for t in r.trials if t.mgm is not None]
    trained = [t for t in r.trials if t.val_acc is not None]
    print(f"run {run}: {len(r.trials)} trials, {len(scored)} scored, {len(trained)} trained")
    if "best_genotype" in r.extra:
        print(f"policy {r.extra['policy']}: best {r.extra['best_genotype']}")
    if r.correlation is not None:
        c = r.correlation
        print(f"spearman rho={c.spearman_rho:.4f} p={c.p_value:.4g} n={c.n}")
    if cfg["groups"]:
        table = rank_group_summary([t for t in trained if t.mgm_rank is not None], cfg["groups"])
        text = groups_csv(table)
        if out is not None:
            _write(out / "groups.csv", text)
        else:
            sys.stdout.write(text)
    return EXIT_OK


# -- argument parsing --------------------------------------------------------


def _common(p: argparse.ArgumentParser, out_required: bool = False) -> None:
    p.add_argument("--config", help="flat key=value settings file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one setting (repeatable)")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=out_required, help="output directory")
    p.add_argument("--threads", type=int, help="worker threads (default: KNASKIT_THREADS or CPU count)")


def _data_opts(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", help="dataset directory from gen-data (default: synthesize in memory)")
    p.add_argument("--noise", type=float)
    p.add_argument("--width", type=int)


def _mgm_opts(p: argparse.ArgumentParser) -> None:
    p.add_argument("--estimator", choices=["exact", "layer_sampled", "split_halves"])
    p.add_argument("--mode", choices=["output", "loss"])
    p.add_argument("--samples-per-layer", dest="m", type=int, help="coordinates sampled per parameter tensor")
    p.add_argument("--batch", type=int, help="scoring batch size")


def _train_opts(p: argparse.ArgumentParser) -> None:
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", dest="batch_size", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="knaskit", description="Gradient-kernel architecture search toolkit")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic or CIFAR-10 dataset")
    _common(p)
    p.add_argument("--classes", type=int)
    p.add_argument("--n", dest="examples", type=int, help="total examples")
    p.add_argument("--noise", type=float)
    p.add_argument("--cifar", help="directory of CIFAR-10 binary batches to ingest instead")
    p.add_argument("--n-train", dest="n_train", type=int)
    p.add_argument("--n-val", dest="n_val", type=int)

    p = sub.add_parser("score", help="MGM scores at initialization")
    _common(p)
    _data_opts(p)
    _mgm_opts(p)
    p.add_argument("--arch", help="genotype text, comma-separate several")
    p.add_argument("--sample", type=int, help="score this many sampled genotypes")

    p = sub.add_parser("search", help="top-k MGM search or the random baseline")
    _common(p)
    _data_opts(p)
    _mgm_opts(p)
    _train_opts(p)
    p.add_argument("--policy", choices=["knas", "random"])
    p.add_argument("--m", dest="max_iterations", type=int, help="genotypes sampled and scored")
    p.add_argument("--k", type=int, help="candidates trained (the budget for --policy random)")

    p = sub.add_parser("correlate", help="rank correlation of MGM with trained accuracy")
    _common(p)
    _data_opts(p)
    _mgm_opts(p)
    _train_opts(p)
    p.add_argument("--from", dest="source", help="a prior score/search run directory")
    p.add_argument("--train", action="store_const", const=True, help="train trials that lack an accuracy")
    p.add_argument("--sample", type=int)
    p.add_argument("--sample-seed", dest="sample_seed", type=int)
    p.add_argument("--groups", type=int)
    p.add_argument("--permutations", type=int)

    p = sub.add_parser("verify-bound", help="simulate gradient flow and check the exponential loss bound")
    _common(p)
    p.add_argument("--net", choices=["mlp", "linear", "cell"])
    p.add_argument("--width", type=int)
    p.add_argument("--n", type=int, help="examples")
    p.add_argument("--inputs", type=int, help="input dimension for mlp/linear")
    p.add_argument("--count", type=int, help="number of random networks")
    p.add_argument("--arch")
    p.add_argument("--steps", type=int)
    p.add_argument("--records", type=int)
    p.add_argument("--step", type=float, help="Euler step (default: the stability guard)")
    p.add_argument("--replay", help="check a saved trajectory CSV instead of simulating")

    p = sub.add_parser("report", help="summarize and validate a run directory")
    _common(p)
    p.add_argument("--run")
    p.add_argument("--groups", type=int)
    return parser


_COMMANDS = {
    "score": cmd_score,
    "search": cmd_search,
    "correlate": cmd_correlate,
    "verify-bound": cmd_verify_bound,
    "report": cmd_report,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = resolve_config(args.cmd, args)
        if args.cmd == "gen-data" and not args.out:
            raise UsageError("gen-data needs --out")
        out = _prepare_out(args, cfg, args.cmd)
        if args.cmd == "gen-data":
            return cmd_gen_data(args, cfg)
        return _COMMANDS[args.cmd](args, cfg, out)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NoViableCandidate as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CHECK
    except (FormatError, OSError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (KnasError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
