"""Command-line front end: ``rtabc <command> [flags]``.

Exit codes: 0 success, 2 usage, 3 I/O, 4 parse, 5 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import bench
from .config import ConfigError, floats, read_config_file, resolve, slack_grid, trial_seed, write_effective
from .core import ErrorModel, infer_slack_map
from .problem import ReachProblem, load_surrogate, make_observation
from .reach import (
    ControllerGains,
    DatasetParseError,
    EmptyDatasetError,
    SimulationDiverged,
    TableBounds,
    UnreachableGoalError,
    generate_dataset,
    read_dataset,
)
from .surrogate import DivergenceError, Mlp, TrainConfig, WeightFileError, save_weights, train_sgd
from .tree import compute_tp_posterior, write_leaf_dump

log = logging.getLogger("rtabc")

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_PARSE, EXIT_NUMERIC = 0, 2, 3, 4, 5


class UsageError(Exception):
    pass


def _problem(cfg) -> ReachProblem:
    bounds = TableBounds(cfg["table_x_lo"], cfg["table_x_hi"], cfg["table_y_lo"], cfg["table_y_hi"])
    return ReachProblem(bounds=bounds, slack_grid=slack_grid(cfg))


def _out_dir(path) -> Path:
    if path is None:
        raise UsageError("--out is required")
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _forward(args, problem: ReachProblem):
    if getattr(args, "raw_sim", False):
        return problem.raw_forward()
    return load_surrogate(args.weights)


def _load_data(path):
    if path is None:
        raise UsageError("--data is required")
    return read_dataset(path)


# --- commands -----------------------------------------------------------------


def cmd_gen_data(args, cfg) -> int:
    if args.out is None:
        raise UsageError("--out is required")
    problem = _problem(cfg)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    data = generate_dataset(
        problem.arm, problem.gains, cfg["n"], problem.bounds, cfg["seed"], cfg["noise_std"], path=args.out
    )
    log.info("wrote %d records to %s", len(data), args.out)
    return EXIT_OK


def cmd_train(args, cfg) -> int:
    if args.out is None:
        raise UsageError("--out is required (weight file path)")
    data = _load_data(args.data)
    hidden = [int(v) for v in floats(cfg["hidden"])]
    sizes = [data.inputs.shape[1], *hidden, data.targets.shape[1]]
    rng = np.random.default_rng(cfg["seed"])
    net = Mlp.init(sizes, rng)
    net.set_scaling(data.inputs, data.targets)
    tcfg = TrainConfig(
        epsilon_star=cfg["epsilon_star"], learning_rate=cfg["lr"], batch_size=cfg["batch"],
        epochs=cfg["epochs"], seed=cfg["seed"],
    )
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    history = train_sgd(net, data, tcfg, log=lambda e, l: log.info("epoch %d loss %.6g", e, l))
    save_weights(net, out)
    with open(str(out) + ".loss.csv", "w") as fh:
        fh.write("epoch,mean_loss\n")
        for i, v in enumerate(history):
            fh.write(f"{i},{v!r}\n")
    write_effective(cfg, str(out) + ".config")
    return EXIT_OK


def _select(data, index: int):
    if not 0 <= index < len(data):
        raise UsageError(f"--index {index} out of range (dataset has {len(data)} records)")
    return data.inputs[index], data.targets[index]


def cmd_infer(args, cfg) -> int:
    method = bench.canonical_method(cfg["method"])
    out = _out_dir(args.out)
    data = _load_data(args.data)
    problem = _problem(cfg)
    forward = _forward(args, problem)
    model = problem.model
    truth, traj = _select(data, cfg["index"])
    obs = make_observation(traj, cfg["observed_frac"])
    mcfg = bench.method_config(method, cfg, trial_seed(cfg["seed"], cfg["index"]))
    write_effective({**cfg, "method": method}, out / "config.txt")

    if args.stream:
        with open(out / "stream.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["frame", "map_x", "map_y", "map_slack", "error_m", "n_evals", "time_ms"])
            for n, res in _stream(method, mcfg, model, obs, forward):
                err = float(np.linalg.norm(res.map_x - truth))
                w.writerow([n, repr(float(res.map_x[0])), repr(float(res.map_x[1])), repr(res.map_slack),
                            repr(err), res.n_evals, repr(1000 * res.wall_time)])
        return EXIT_OK

    t0 = time.perf_counter()
    result, tree = bench.run_inference(method, mcfg, model, obs, forward)
    result.wall_time = time.perf_counter() - t0
    payload = result.to_dict()
    payload.update(method=method, truth=truth.tolist(), error_m=float(np.linalg.norm(result.map_x - truth)),
                   observed=obs.n_observed, index=cfg["index"])
    (out / "result.json").write_text(json.dumps(payload, indent=2) + "\n")
    if tree is not None:
        write_leaf_dump(tree, out / "leaves.txt")
    print(json.dumps({k: payload[k] for k in ("method", "map_x", "map_slack", "n_evals", "error_m")}))
    return EXIT_OK


def _stream(method, mcfg, model, obs, forward):
    """Per-frame results as the trajectory is revealed one sample at a time."""
    from .baselines import particle_filter

    if method == "particle_filter":
        run = particle_filter(mcfg, model, obs, forward)
        for frame in run.frames:
            yield frame.diagnostics["frame"], frame
        return
    for n in range(1, obs.n_observed + 1):
        result, _ = bench.run_inference(method, mcfg, model, obs.truncated(n), forward)
        yield n, result


def cmd_bench(args, cfg) -> int:
    methods = [bench.canonical_method(m) for m in str(cfg["methods"]).split(",") if m.strip()]
    if not methods:
        raise UsageError("no methods given")
    for method in methods:
        bench.method_config(method, cfg, cfg["seed"])
    fracs = floats(cfg["observed_fracs"])
    out = _out_dir(args.out)
    data = _load_data(args.data)
    problem = _problem(cfg)
    forward = _forward(args, problem)
    model = problem.model
    trials = min(int(cfg["trials"]), len(data))
    write_effective(cfg, out / "config.txt")
    records = []
    for method in methods:
        for trial in range(trials):
            truth, traj = data.inputs[trial], data.targets[trial]
            for frac in fracs:
                obs = make_observation(traj, frac)
                records.append(bench.run_trial(method, cfg, model, obs, forward, truth, trial, frac, cfg["seed"]))
            log.info("%s trial %d done", method, trial)
    bench.write_records(records, out / "raw.csv")
    summary = bench.summarize(records)
    bench.write_summary(summary, out / "summary.csv", out / "summary.txt")
    bench.write_points(records, out)
    print((out / "summary.txt").read_text(), end="")
    return EXIT_OK


def slack_scan(model: ErrorModel, forward, observations, tp_cfg) -> list[float]:
    """Joint-MAP slack of each observation, scored over its tree-pyramid leaves."""
    out = []
    for obs in observations:
        tree, _ = compute_tp_posterior(tp_cfg, model, obs, forward)
        centers = np.array([leaf.center for leaf in tree.leaves()])
        out.append(infer_slack_map(obs, model, forward, centers))
    return out


def cmd_slack_scan(args, cfg) -> int:
    out = _out_dir(args.out)
    data = _load_data(args.data)
    if len(data) == 0:
        raise UsageError("empty observation set")
    problem = _problem(cfg)
    forward = _forward(args, problem)
    model = problem.model
    tp_cfg = bench.method_config("tp", cfg, cfg["seed"])
    offset = float(cfg["offset"])
    variants = [("clean", 0.0)] + ([("offset", offset)] if offset else [])
    write_effective(cfg, out / "config.txt")
    rows = []
    for name, shift in variants:
        obs_list = []
        for traj in data.targets:
            t = np.asarray(traj, dtype=float).reshape(-1, 3).copy()
            t[:, 0] += shift
            obs_list.append(make_observation(t, cfg["observed_frac"]))
        for i, s in enumerate(slack_scan(model, forward, obs_list, tp_cfg)):
            rows.append((i, name, s, s > cfg["slack_threshold"]))
    with open(out / "slack.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["index", "variant", "slack", "anomalous"])
        for i, name, s, flag in rows:
            w.writerow([i, name, repr(float(s)), int(flag)])
    n_flag = sum(r[3] for r in rows)
    print(f"{len(rows)} observations scanned, {n_flag} above slack threshold {cfg['slack_threshold']}")
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "infer": cmd_infer,
    "bench": cmd_bench,
    "slack-scan": cmd_slack_scan,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="key=value config file")
    common.add_argument("--out", help="output file (gen-data, train) or directory")
    common.add_argument("--seed", type=int)
    common.add_argument("--data", help="dataset file")
    common.add_argument("--weights", help="surrogate weight file (default: packaged surrogate)")
    common.add_argument("--raw-sim", action="store_true", help="use the simulator instead of the surrogate")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="rtabc", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", parents=[common], help="simulate a trajectory dataset")
    p.add_argument("--n", type=int)
    p.add_argument("--noise-std", type=float)

    p = sub.add_parser("train", parents=[common], help="train the neural surrogate")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch", type=int)
    p.add_argument("--epsilon-star", type=float)
    p.add_argument("--hidden")

    for name in ("infer", "bench", "slack-scan"):
        p = sub.add_parser(name, parents=[common])
        p.add_argument("--observed-frac", type=float)
        p.add_argument("--rho", type=float)
        p.add_argument("--tau", type=float)
        p.add_argument("--tau-mode", choices=list(bench.TAU_MODES))
        if name == "infer":
            p.add_argument("--method")
            p.add_argument("--index", type=int)
            p.add_argument("--h", type=float)
            p.add_argument("--stream", action="store_true")
        if name == "bench":
            p.add_argument("--methods")
            p.add_argument("--trials", type=int)
            p.add_argument("--observed-fracs")
            p.add_argument("--h", type=float)
        if name == "slack-scan":
            p.add_argument("--offset", type=float)
            p.add_argument("--slack-threshold", type=float)
    return parser


NON_CONFIG = {"command", "config", "out", "data", "weights", "raw_sim", "verbose", "stream"}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
        file_values = read_config_file(args.config) if args.config else None
        flags = {k: v for k, v in vars(args).items() if k not in NON_CONFIG}
        cfg = resolve(file_values, flags)
        return COMMANDS[args.command](args, cfg)
    except (UsageError, ConfigError, bench.UnknownMethod, UnreachableGoalError, EmptyDatasetError) as exc:
        print(f"rtabc: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DatasetParseError, WeightFileError) as exc:
        print(f"rtabc: parse error: {exc}", file=sys.stderr)
        return EXIT_PARSE
    except OSError as exc:
        print(f"rtabc: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (DivergenceError, SimulationDiverged, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"rtabc: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
