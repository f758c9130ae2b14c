"""Command-line entry point: ``iotdrl train|test|compare|sweep|hil-demo``.

Configuration precedence, lowest to highest: built-in defaults, the JSON
file given by ``--config``, ``IOTDRL_*`` environment variables, flags.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

from .dqn import Hyperparams, load_checkpoint, save_checkpoint
from .env import Channel, ChannelPlan, LinkModel, write_trace
from .sim import (RunState, TrainingDiverged, mean_fsr, run_baseline_untrained,
                  run_testing, run_training, window_means, write_metrics_csv)

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_DIVERGED = 0, 1, 2, 3
ENV_PREFIX = "IOTDRL_"

log = logging.getLogger("iotdrl")


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    learning_rate: float = 0.01
    gamma: float = 0.6
    episodes: int = 500
    steps_per_episode: int = 20
    batch_size: int = 16
    sync_period: int = 10
    buffer_capacity: int = 10000
    hidden_units: int = 16
    num_agents: int = 2
    channels: list = field(default_factory=lambda: [[0, 922.4, 125.0], [1, 922.8, 125.0],
                                                    [2, 923.2, 125.0]])
    gateway_receivable: list = field(default_factory=lambda: [1, 2])
    loss_probability: float = 0.0
    ack_always_delivered: bool = True
    seed: int = 1
    out: str = "runs/latest"
    reset_buffer_per_episode: bool = False
    reset_state_per_episode: bool = False
    baseline_epsilon: float = 1.0
    test_episodes: int = 100
    window: int = 100

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def hyperparams(self) -> Hyperparams:
        names = {f.name for f in dataclasses.fields(Hyperparams)}
        return Hyperparams(**{k: v for k, v in self.to_dict().items() if k in names})

    def run_state(self) -> RunState:
        try:
            plan = ChannelPlan([Channel(int(i), float(f), float(bw))
                                for i, f, bw in self.channels],
                               frozenset(self.gateway_receivable))
            link = LinkModel(self.loss_probability, self.ack_always_delivered)
            run = RunState(self.hyperparams(), plan, link, self.num_agents, self.seed,
                           self.reset_buffer_per_episode, self.reset_state_per_episode)
            run.validate()
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None
        return run

    def validate(self) -> RunState:
        if not 0.0 <= self.baseline_epsilon <= 1.0:
            raise ConfigError("baseline_epsilon: must lie in [0, 1]")
        for name in ("test_episodes", "window"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name}: must be a positive integer")
        return self.run_state()


_FIELDS = {f.name: f for f in dataclasses.fields(RunConfig)}
_DEFAULTS = RunConfig()


def _coerce(name: str, value):
    """Check ``value`` against the type of the field's default."""
    default = getattr(_DEFAULTS, name)
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{name}: expected true/false, got {value!r}")
    elif isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{name}: expected an integer, got {value!r}")
    elif isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{name}: expected a number, got {value!r}")
        value = float(value)
    elif isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{name}: expected a string, got {value!r}")
    elif isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(f"{name}: expected a list, got {value!r}")
        if name == "channels" and not all(
                isinstance(c, list) and len(c) == 3 for c in value):
            raise ConfigError("channels: each entry must be [index, freq_mhz, bandwidth_khz]")
    return value


def _apply(values: dict, updates: dict, source: str) -> None:
    for key, value in updates.items():
        if key not in _FIELDS:
            raise ConfigError(f"{key}: unknown configuration field ({source})")
        values[key] = _coerce(key, value)


def load_config(path: str | None = None, overrides: dict | None = None,
                environ: dict | None = None) -> RunConfig:
    values = _DEFAULTS.to_dict()
    if path:
        try:
            doc = json.loads(Path(path).read_text())
        except OSError as exc:
            raise ConfigError(f"config: cannot read {path}: {exc.strerror}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config: {path} is not valid JSON ({exc.msg})") from None
        if not isinstance(doc, dict):
            raise ConfigError("config: top level must be a JSON object")
        _apply(values, doc, path)

    environ = os.environ if environ is None else environ
    from_env = {}
    for key, raw in environ.items():
        if key.startswith(ENV_PREFIX):
            name = key[len(ENV_PREFIX):].lower()
            try:
                from_env[name] = json.loads(raw)
            except json.JSONDecodeError:
                from_env[name] = raw
    _apply(values, from_env, "environment")
    _apply(values, {k: v for k, v in (overrides or {}).items() if v is not None}, "flags")
    return RunConfig(**values)


# --- argument parsing ------------------------------------------------------

_FLAG_MAP = {
    "seed": "seed", "episodes": "episodes", "steps": "steps_per_episode",
    "agents": "num_agents", "loss_prob": "loss_probability",
    "baseline_epsilon": "baseline_epsilon", "out": "out",
    "reset_buffer_per_episode": "reset_buffer_per_episode",
    "reset_state_per_episode": "reset_state_per_episode",
    "test_episodes": "test_episodes",
}


def _common(p: argparse.ArgumentParser, episodes_help: str = "training episodes N") -> None:
    p.add_argument("--config", help="JSON run configuration")
    p.add_argument("--seed", type=int)
    p.add_argument("--episodes", type=int, help=episodes_help)
    p.add_argument("--steps", type=int, help="transmissions per episode T")
    p.add_argument("--agents", type=int)
    p.add_argument("--loss-prob", type=float)
    p.add_argument("--baseline-epsilon", type=float)
    p.add_argument("--out")
    p.add_argument("--reset-buffer-per-episode", action="store_true", default=None)
    p.add_argument("--reset-state-per-episode", action="store_true", default=None)
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="iotdrl", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run the training phase")
    _common(p)
    p.add_argument("--trace", action="store_true", help="also write the per-slot trace.csv")

    p = sub.add_parser("test", help="greedy testing of saved checkpoints")
    _common(p, episodes_help="number of test episodes (default: test_episodes)")
    p.add_argument("--checkpoints", nargs="+", help="agent checkpoints, in agent order")

    p = sub.add_parser("compare", help="train, test, and run the untrained baseline")
    _common(p)
    p.add_argument("--test-episodes", type=int)

    p = sub.add_parser("sweep", help="compare over several seeds")
    _common(p)
    p.add_argument("--test-episodes", type=int)
    p.add_argument("--seeds", type=int, nargs="+", help="explicit seed list")
    p.add_argument("--num-seeds", type=int, default=5)
    p.add_argument("--workers", type=int, default=1)

    p = sub.add_parser("hil-demo", help="train through mock devices and check transparency")
    _common(p)
    p.add_argument("--timeout-ms", type=int, default=5000)
    return parser


def _resolve(args, skip=()) -> RunConfig:
    overrides = {dest: getattr(args, flag) for flag, dest in _FLAG_MAP.items()
                 if hasattr(args, flag) and flag not in skip}
    cfg = load_config(args.config, overrides)
    cfg.validate()
    return cfg


# --- commands --------------------------------------------------------------

def _write_summary(out: Path, cfg: RunConfig, **results) -> None:
    doc = {"config": cfg.to_dict(), **results}
    (out / "summary.json").write_text(json.dumps(doc, indent=2) + "\n")


def _train(cfg: RunConfig, out: Path, trace: bool = False):
    run = cfg.run_state()
    rows = [] if trace else None
    agents, metrics = run_training(run, trace=rows)
    write_metrics_csv(out / "metrics.csv", metrics, cfg.window)
    for ag in agents:
        save_checkpoint(ag.net, out / f"agent_{ag.agent_id}.ckpt", ag.init_seed)
    if trace:
        write_trace(out / "trace.csv", rows)
    first, final = window_means(metrics, cfg.window)
    return run, agents, {"first_window_mean_fsr": first, "final_window_mean_fsr": final}


def cmd_train(args) -> int:
    cfg = _resolve(args)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    _, _, res = _train(cfg, out, args.trace)
    _write_summary(out, cfg, **res)
    print(f"final-window mean FSR: {res['final_window_mean_fsr']:.4f}")
    return EXIT_OK


def cmd_test(args) -> int:
    cfg = _resolve(args, skip=("episodes",))
    episodes = args.episodes if args.episodes is not None else cfg.test_episodes
    if episodes < 1:
        raise ConfigError("episodes: must be a positive integer")
    run = cfg.run_state()
    out = Path(cfg.out)
    paths = args.checkpoints or [str(out / f"agent_{i}.ckpt") for i in range(cfg.num_agents)]
    if len(paths) != cfg.num_agents:
        raise ConfigError(f"checkpoints: got {len(paths)}, config has {cfg.num_agents} agents")
    nets = []
    for p in paths:
        try:
            net, _ = load_checkpoint(p)
        except (OSError, ValueError, KeyError, TypeError) as exc:
            raise ConfigError(f"checkpoints: {exc}") from None
        if net.arch != run.architecture:
            raise ConfigError(f"checkpoints: {p} has architecture {net.arch}, "
                              f"config expects {run.architecture}")
        nets.append(net)
    metrics = run_testing(nets, run, episodes)
    out.mkdir(parents=True, exist_ok=True)
    write_metrics_csv(out / "test_metrics.csv", metrics, cfg.window)
    print(f"test mean FSR over {episodes} episodes: {mean_fsr(metrics):.2f}")
    return EXIT_OK


def compare(cfg: RunConfig, out: Path | None = None) -> dict:
    """Train, test greedily and run the untrained baseline; return the summary."""
    run = cfg.run_state()
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        run, agents, res = _train(cfg, out)
    else:
        agents, metrics = run_training(run)
        first, final = window_means(metrics, cfg.window)
        res = {"first_window_mean_fsr": first, "final_window_mean_fsr": final}
    tested = run_testing(agents, run, cfg.test_episodes)
    baseline = run_baseline_untrained(run, cfg.test_episodes, cfg.baseline_epsilon)
    if out is not None:
        write_metrics_csv(out / "test_metrics.csv", tested, cfg.window)
        write_metrics_csv(out / "baseline_metrics.csv", baseline, cfg.window)
    test_fsr, base_fsr = mean_fsr(tested), mean_fsr(baseline)
    res.update(test_mean_fsr=test_fsr, baseline_mean_fsr=base_fsr,
               baseline_epsilon=cfg.baseline_epsilon,
               improvement_points=100.0 * (test_fsr - base_fsr))
    return res


def cmd_compare(args) -> int:
    cfg = _resolve(args)
    out = Path(cfg.out)
    res = compare(cfg, out)
    _write_summary(out, cfg, **res)
    print(f"trained FSR:  {res['test_mean_fsr']:.4f}")
    print(f"baseline FSR: {res['baseline_mean_fsr']:.4f} (epsilon={cfg.baseline_epsilon})")
    print(f"improvement:  {res['improvement_points']:+.1f} points")
    return EXIT_OK


def _sweep_one(cfg: RunConfig) -> dict:
    return compare(cfg)


def cmd_sweep(args) -> int:
    cfg = _resolve(args)
    seeds = args.seeds or [cfg.seed + k for k in range(args.num_seeds)]
    configs = [dataclasses.replace(cfg, seed=s) for s in seeds]
    if args.workers > 1:
        with ProcessPoolExecutor(max_workers=args.workers) as pool:
            results = list(pool.map(_sweep_one, configs))
    else:
        results = [_sweep_one(c) for c in configs]

    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    cols = ["first_window_mean_fsr", "final_window_mean_fsr", "test_mean_fsr",
            "baseline_mean_fsr", "improvement_points"]
    with open(out / "sweep.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["seed", *cols])
        for s, r in zip(seeds, results):
            w.writerow([s, *(repr(r[c]) for c in cols)])
    pooled = {c: sum(r[c] for r in results) / len(results) for c in cols}
    _write_summary(out, cfg, seeds=seeds, per_seed=results, pooled=pooled)
    for s, r in zip(seeds, results):
        print(f"seed {s}: test {r['test_mean_fsr']:.4f} baseline {r['baseline_mean_fsr']:.4f} "
              f"improvement {r['improvement_points']:+.1f}")
    print(f"pooled: test {pooled['test_mean_fsr']:.4f} "
          f"baseline {pooled['baseline_mean_fsr']:.4f} "
          f"improvement {pooled['improvement_points']:+.1f}")
    return EXIT_OK


def cmd_hil_demo(args) -> int:
    from .hil import run_training_hil

    cfg = _resolve(args)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    _, direct = run_training(cfg.run_state())
    _, via_hil = run_training_hil(cfg.run_state(), timeout_ms=args.timeout_ms)
    write_metrics_csv(out / "metrics.csv", direct, cfg.window)
    write_metrics_csv(out / "hil_metrics.csv", via_hil, cfg.window)
    same = (out / "metrics.csv").read_bytes() == (out / "hil_metrics.csv").read_bytes()
    _write_summary(out, cfg, hil_matches_in_process=same,
                   final_window_mean_fsr=window_means(via_hil, cfg.window)[1])
    print(f"HIL run {'matches' if same else 'DIFFERS FROM'} the in-process run")
    return EXIT_OK if same else EXIT_FAIL


COMMANDS = {"train": cmd_train, "test": cmd_test, "compare": cmd_compare,
            "sweep": cmd_sweep, "hil-demo": cmd_hil_demo}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingDiverged as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
