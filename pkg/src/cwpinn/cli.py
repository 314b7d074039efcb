"""Command-line runner for the benchmark experiments.

Experiment files are plain ``key = value`` lines; ``#`` starts a comment.
Keys that are not given take the defaults of the chosen problem, so a file
holding only ``problem = heat1d`` describes the full heat benchmark.

    cwpinn run heat1d-cwp                 # a shipped preset, by name
    cwpinn run my.cfg --iterations 2000 --seeds 1
    cwpinn presets
    cwpinn eval runs/heat/seed-1/final.ckpt heat1d
    cwpinn export-grid runs/heat/seed-1/final.ckpt heat1d 201,101

Set ``CWPINN_THREADS`` to cap the number of compute threads.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import math
import os
import shutil
import sys
import time
from dataclasses import dataclass, field, fields
from importlib import resources
from pathlib import Path

logger = logging.getLogger("cwpinn")

CONFIG_SUFFIX = ".cfg"


class ConfigError(ValueError):
    """A configuration problem tied to a key and, when known, a line number."""

    def __init__(self, key: str, message: str, line: int | None = None):
        where = f"line {line}: " if line is not None else ""
        super().__init__(f"{where}{key}: {message}")
        self.key = key
        self.line = line


# per-problem defaults; anything not listed falls back to the field default
PROBLEM_DEFAULTS = {
    "heat1d": dict(N_f=1000, iterations=50_000, lr0=1.5e-3, decay_factor=0.8, decay_every=2000,
                   hidden_layers=4, hidden_width=80),
    "kg2d": dict(N_f=1000, N_b=300, boundary_weight=100.0, iterations=20_000, lr0=5e-3, decay_factor=0.8,
                 decay_every=1000, hidden_layers=4, hidden_width=80, kg_t_max=10.0),
    "burgers1d": dict(N_f=10_000, iterations=30_000, lr0=5e-3, decay_factor=0.7, decay_every=1000,
                      lr_floor=1e-5, hidden_layers=7, hidden_width=20),
    "poisson-inv": dict(N_f=100, N_b=10, N_obs=60, obs_weight=10.0, boundary_weight=10.0, noise_variance=0.01,
                        iterations=20_000, lr0=0.01, decay_factor=0.85, decay_every=1500,
                        hidden_layers=4, hidden_width=50),
}


@dataclass(frozen=True)
class ExperimentConfig:
    problem: str
    scheme: str = "cwp"
    N_f: int = 1000
    N_b: int = 0  # kg2d: boundary points in total; poisson-inv: points per edge
    N_0: int = 0
    N_obs: int = 0
    M: int = 4
    epsilon: float = 0.01
    eta_lambda: float = 1e-3
    eta_star: float | None = None
    sa_lr: float = 1e-3
    iterations: int = 50_000
    lr0: float = 1.5e-3
    decay_factor: float = 0.8
    decay_every: int = 2000
    lr_floor: float = 0.0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_update_stride: int = 1
    resample_K: int = 200
    checkpoint_every: int = 100
    seeds: tuple[int, ...] = (1, 2, 3)
    output_dir: str = ""
    hidden_layers: int = 4
    hidden_width: int = 80
    boundary_weight: float = 0.0
    obs_weight: float = 0.0
    noise_variance: float = 0.0
    burgers_constraint: str = "printed"
    kg_t_max: float = 10.0
    n_test: int = 90_000
    snapshot_every: int = 0  # collocation snapshots; 0 = first and last only
    state_every: int = 1000  # resumable state cadence in iterations
    source: str = field(default="", compare=False)  # citation comment, not a setting

    def __post_init__(self):
        validate(self)

    def train_config(self, seed: int):
        from .trainer import TrainConfig

        return TrainConfig(
            iterations=self.iterations, lr0=self.lr0, decay_factor=self.decay_factor,
            decay_every=self.decay_every, lr_floor=self.lr_floor, adam_beta1=self.adam_beta1,
            adam_beta2=self.adam_beta2, adam_eps=self.adam_eps,
            weight_update_stride=self.weight_update_stride, resample_K=self.resample_K,
            checkpoint_every=self.checkpoint_every, seed=seed,
        )

    def scheme_config(self):
        from .weighting import SchemeConfig

        return SchemeConfig(self.scheme, self.eta_lambda, self.eta_star, self.M, self.epsilon, self.sa_lr)

    def build_problem(self, seed: int):
        from .problems import get_problem

        net = dict(hidden_layers=self.hidden_layers, hidden_width=self.hidden_width)
        if self.problem == "heat1d":
            return get_problem("heat1d", **net)
        if self.problem == "kg2d":
            return get_problem("kg2d", n_boundary=self.N_b, seed=seed, t_max=self.kg_t_max,
                               boundary_weight=self.boundary_weight, **net)
        if self.problem == "burgers1d":
            return get_problem("burgers1d", constraint=self.burgers_constraint, **net)
        return get_problem("poisson-inv", n_obs=self.N_obs, n_boundary_per_edge=self.N_b,
                           noise_variance=self.noise_variance, obs_weight=self.obs_weight,
                           boundary_weight=self.boundary_weight, seed=seed, **net)


SETTINGS = tuple(f for f in fields(ExperimentConfig) if f.name != "source")


def _kind(f) -> str:
    return f.type if isinstance(f.type, str) else f.type.__name__


def validate(cfg: ExperimentConfig) -> None:
    from .problems import PROBLEMS
    from .weighting import SCHEMES

    def bad(key, message):
        raise ConfigError(key, message)

    if cfg.problem not in PROBLEMS:
        bad("problem", f"unknown problem {cfg.problem!r}; choose from {sorted(PROBLEMS)}")
    if cfg.scheme not in SCHEMES:
        bad("scheme", f"unknown scheme {cfg.scheme!r}; choose from {list(SCHEMES)}")
    for key in ("N_f", "N_b", "N_0", "N_obs", "M", "weight_update_stride", "resample_K", "snapshot_every",
                "n_test", "state_every"):
        if getattr(cfg, key) < 0:
            bad(key, "must be non-negative")
    for key in ("iterations", "decay_every", "checkpoint_every", "hidden_layers", "hidden_width", "N_f",
                "n_test"):
        if getattr(cfg, key) < 1:
            bad(key, "must be at least 1")
    if not 0 < cfg.eta_lambda < 1:
        bad("eta_lambda", "must lie in (0, 1)")
    if cfg.eta_star is not None and cfg.eta_star <= 0:
        bad("eta_star", "must be positive")
    for key in ("epsilon", "sa_lr", "lr0", "adam_eps", "kg_t_max"):
        if not getattr(cfg, key) > 0:
            bad(key, "must be positive")
    if not 0 < cfg.decay_factor <= 1:
        bad("decay_factor", "must lie in (0, 1]")
    for key in ("adam_beta1", "adam_beta2"):
        if not 0 <= getattr(cfg, key) < 1:
            bad(key, "must lie in [0, 1)")
    for key in ("lr_floor", "boundary_weight", "obs_weight", "noise_variance"):
        v = getattr(cfg, key)
        if not (v >= 0 and math.isfinite(v)):
            bad(key, "must be finite and non-negative")
    if cfg.burgers_constraint not in ("printed", "symmetric"):
        bad("burgers_constraint", "must be 'printed' or 'symmetric'")
    if not cfg.seeds:
        bad("seeds", "at least one seed is required")
    if len(set(cfg.seeds)) != len(cfg.seeds):
        bad("seeds", "seeds must be distinct")
    if any(s < 0 for s in cfg.seeds):
        bad("seeds", "seeds must be non-negative")
    # counts must match the loss terms the problem actually has
    if cfg.N_0:
        bad("N_0", f"{cfg.problem} enforces its initial condition exactly; N_0 must be 0")
    if cfg.problem in ("heat1d", "burgers1d") and cfg.N_b:
        bad("N_b", f"{cfg.problem} enforces its boundary conditions exactly; N_b must be 0")
    if cfg.problem != "poisson-inv" and cfg.N_obs:
        bad("N_obs", f"{cfg.problem} has no observation loss; N_obs must be 0")
    if cfg.problem == "poisson-inv" and cfg.N_obs < 1:
        bad("N_obs", "the inverse problem needs observations")
    if cfg.problem == "poisson-inv" and cfg.N_b == 1:
        bad("N_b", "at least 2 points per edge are needed to include the corners")
    if cfg.problem == "kg2d" and cfg.N_b and not cfg.boundary_weight > 0:
        bad("boundary_weight", "boundary points need a positive weight")


def _parse_value(f, text: str, line: int):
    kind = _kind(f)
    try:
        if kind == "tuple[int, ...]":
            return tuple(int(s) for s in text.split(",") if s.strip())
        if kind == "float | None":
            return None if text.lower() == "none" else float(text)
        if kind == "int":
            return int(text)
        if kind == "float":
            value = float(text)
            if not math.isfinite(value):
                raise ValueError
            return value
        if f.name == "scheme":
            return text.replace("-", "_")  # preset names spell cwp_fix as cwp-fix
        return text
    except ValueError:
        raise ConfigError(f.name, f"expected {kind}, got {text!r}", line) from None


def parse_config_text(text: str, problem: str | None = None, origin: str = "<config>") -> ExperimentConfig:
    """Parse the ``key = value`` format; see :func:`parse_config`."""
    by_name = {f.name: f for f in SETTINGS}
    values: dict[str, object] = {}
    lines: dict[str, int] = {}
    source = []
    for number, raw in enumerate(text.splitlines(), start=1):
        stripped = raw.strip()
        if stripped.startswith("#"):
            comment = stripped.lstrip("#").strip()
            if comment.lower().startswith("source:"):
                source.append(comment.split(":", 1)[1].strip())
            continue
        stripped = stripped.split("#", 1)[0].strip()
        if not stripped:
            continue
        key, sep, value = stripped.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not key:
            raise ConfigError(key or "?", f"expected 'key = value' in {origin}", number)
        if key not in by_name:
            raise ConfigError(key, "unknown key", number)
        if key in values:
            raise ConfigError(key, f"repeated key (first set on line {lines[key]})", number)
        values[key] = _parse_value(by_name[key], value, number)
        lines[key] = number
    name = values.get("problem", problem)
    if name is None:
        raise ConfigError("problem", f"{origin} does not name a problem")
    merged = dict(PROBLEM_DEFAULTS.get(name, {}))
    merged.update(values)
    merged["problem"] = name
    if "output_dir" not in values:
        merged["output_dir"] = f"runs/{name}-{merged.get('scheme', 'cwp')}"
    try:
        return ExperimentConfig(**merged, source="; ".join(source))
    except ConfigError as err:
        raise ConfigError(err.key, str(err).split(": ", 1)[1], lines.get(err.key)) from None


def parse_config(path, problem: str | None = None) -> ExperimentConfig:
    """Read an experiment file.

    ``problem`` supplies the problem when the file does not name one, which
    makes an empty file mean "all defaults for that problem". Errors name
    the offending key and line.
    """
    path = Path(path)
    return parse_config_text(path.read_text(encoding="utf-8"), problem, str(path))


def _format_value(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def emit_config(cfg: ExperimentConfig) -> str:
    """Full listing of every setting; parsing it back gives an equal config."""
    out = []
    if cfg.source:
        out.append(f"# source: {cfg.source}")
    width = max(len(f.name) for f in SETTINGS)
    out += [f"{f.name.ljust(width)} = {_format_value(getattr(cfg, f.name))}" for f in SETTINGS]
    return "\n".join(out) + "\n"


# --------------------------------------------------------------------------
# presets


def _preset_dir():
    return resources.files("cwpinn") / "presets"


def list_presets() -> list[tuple[str, str]]:
    """(name, source) for every shipped preset, sorted by name."""
    out = []
    for entry in _preset_dir().iterdir():
        if entry.name.endswith(CONFIG_SUFFIX):
            cfg = parse_config_text(entry.read_text(encoding="utf-8"), origin=entry.name)
            out.append((entry.name[: -len(CONFIG_SUFFIX)], cfg.source))
    return sorted(out)


def load_preset(name: str) -> ExperimentConfig:
    entry = _preset_dir() / f"{name}{CONFIG_SUFFIX}"
    if not entry.is_file():
        raise ConfigError("preset", f"no preset named {name!r}; see 'cwpinn presets'")
    return parse_config_text(entry.read_text(encoding="utf-8"), origin=entry.name)


def resolve_config(spec: str) -> ExperimentConfig:
    """A path to an experiment file, or the name of a shipped preset."""
    path = Path(spec)
    if path.is_file():
        return parse_config(path)
    if path.suffix or os.sep in spec:
        raise FileNotFoundError(f"no such config file: {spec}")
    return load_preset(spec)


# --------------------------------------------------------------------------
# running


def _seed_dir(cfg: ExperimentConfig, seed: int) -> Path:
    return Path(cfg.output_dir) / f"seed-{seed}"


def run_seed(cfg: ExperimentConfig, seed: int, resume: bool = False) -> dict:
    """Train one seed and write its outputs; returns the summary."""
    from .metrics import (
        TestSet, append_collocation_snapshot, write_history, write_summary, write_timing,
        write_weight_snapshot,
    )
    from .diffnet import save_checkpoint
    from .trainer import STATE_FILES, TrainingDiverged, initial_collocation, load_state, save_state, train

    out = _seed_dir(cfg, seed)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.cfg").write_text(emit_config(dataclasses.replace(cfg, seeds=(seed,))), encoding="utf-8")
    problem = cfg.build_problem(seed)
    test = TestSet.for_problem(problem, cfg.n_test, seed)
    coll_path = out / "collocation.csv"
    start = None
    if resume and all((out / name).exists() for name in STATE_FILES):
        start = load_state(out, problem)
        logger.info("seed %d: resuming at iteration %d", seed, start.iteration)
    else:
        for stale in ("history.csv", "timing.csv", "summary.json", "collocation.csv", *STATE_FILES):
            (out / stale).unlink(missing_ok=True)
    points = initial_collocation(problem, cfg.N_f, seed)
    if start is None:
        append_collocation_snapshot(coll_path, 0, points, problem.coord_names)

    snap_every = cfg.snapshot_every
    moved = cfg.scheme in ("cwp", "cwp_fix")

    def on_checkpoint(result):
        write_history(result.history, out / "history.csv", problem.field_names)
        write_timing(result.history, out / "timing.csv")
        it = result.iteration
        if moved and snap_every and it % snap_every == 0 and it != cfg.iterations:
            append_collocation_snapshot(coll_path, it, result.collocation.points, problem.coord_names)
        if cfg.state_every and it % cfg.state_every == 0:
            save_state(out, problem, result)
        rec = result.history[-1]
        logger.info("seed %d it %d loss %.3e rel_l2 %.3e", seed, it, rec.loss_total, rec.rel_l2)

    status = "ok"
    t0 = time.perf_counter()
    try:
        result = train(problem, cfg.scheme_config(), cfg.train_config(seed), n_collocation=cfg.N_f, test=test,
                       points=points, resume=start, callback=on_checkpoint)
    except TrainingDiverged as err:
        logger.error("seed %d diverged: %s", seed, err)
        result, status = err.result, "diverged"
    elapsed = time.perf_counter() - t0
    if result.iteration == cfg.iterations and status == "ok":
        append_collocation_snapshot(coll_path, result.iteration, result.collocation.points, problem.coord_names)
    write_weight_snapshot(out / "weights.csv", result.collocation.points, result.weights.lambdas,
                          problem.coord_names)
    save_checkpoint(out / "final.ckpt", problem.networks, result.params)
    summary = {
        "problem": cfg.problem,
        "scheme": cfg.scheme,
        "seed": seed,
        "status": status,
        "iterations": result.iteration,
        "wall_seconds": round(elapsed, 3),
    }
    if result.history:
        last = result.history[-1]
        summary.update(rel_l2=last.rel_l2, l_inf=last.l_inf, loss_total=last.loss_total,
                       loss_residual=last.loss_residual, loss_fixed=last.loss_fixed)
        for key, value in last.extra.items():
            summary[key] = value
    finite = all(math.isfinite(v) for k, v in summary.items() if k.startswith(("rel_l2", "l_inf")))
    if status == "ok" and not (finite and "rel_l2" in summary):
        summary["status"] = status = "non-finite"
    summary["config"] = {f.name: _format_value(getattr(cfg, f.name)) for f in SETTINGS}
    write_summary(out / "summary.json", summary)
    return summary


def write_index(cfg: ExperimentConfig, summaries: list[dict]) -> dict:
    """Per-seed final metrics and their minimum over the seeds."""
    metrics = sorted({k for s in summaries for k in s if k.startswith(("rel_l2", "l_inf"))})
    best = {}
    for key in metrics:
        vals = [s[key] for s in summaries if s.get("status") == "ok" and key in s]
        if vals:
            best[key] = min(vals)
    index = {
        "problem": cfg.problem,
        "scheme": cfg.scheme,
        "seeds": {str(s["seed"]): {k: s.get(k) for k in ["status", "iterations", *metrics]} for s in summaries},
        "best": best,
    }
    Path(cfg.output_dir, "index.json").write_text(json.dumps(index, indent=2, sort_keys=True) + "\n")
    return index


def run(cfg: ExperimentConfig, force: bool = False, resume: bool = False) -> int:
    """Run every seed; exit status 0 iff all finish with finite metrics."""
    root = Path(cfg.output_dir)
    taken = [s for s in cfg.seeds if _seed_dir(cfg, s).exists()]
    if taken and not (force or resume):
        logger.error("%s already holds runs for seeds %s; pass --force to overwrite or --resume to continue",
                     root, taken)
        return 2
    if force and not resume:
        for s in taken:
            shutil.rmtree(_seed_dir(cfg, s))
    root.mkdir(parents=True, exist_ok=True)
    summaries = []
    for seed in cfg.seeds:
        done = _seed_dir(cfg, seed) / "summary.json"
        if resume and done.exists():
            previous = json.loads(done.read_text())
            if previous.get("status") == "ok" and previous.get("iterations") == cfg.iterations:
                summaries.append(previous)
                continue
        try:
            summaries.append(run_seed(cfg, seed, resume=resume))
        except OSError as err:
            logger.error("seed %d: %s", seed, err)
            summaries.append({"seed": seed, "status": "io-error"})
    write_index(cfg, summaries)
    return 0 if all(s.get("status") == "ok" for s in summaries) else 1


# --------------------------------------------------------------------------
# entry point


def _apply_thread_override() -> None:
    threads = os.environ.get("CWPINN_THREADS")
    if not threads:
        return
    if not threads.isdigit() or int(threads) < 1:
        raise SystemExit(f"CWPINN_THREADS must be a positive integer, got {threads!r}")
    flags = os.environ.get("XLA_FLAGS", "")
    extra = f"--xla_cpu_multi_thread_eigen={'true' if int(threads) > 1 else 'false'} " \
            f"intra_op_parallelism_threads={threads}"
    os.environ["XLA_FLAGS"] = f"{flags} {extra}".strip()
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(var, threads)


def _grid_shape(problem, text: str) -> tuple[int, ...]:
    """``nx[,ny[,nt]]``: spatial counts first, time last; missing counts repeat the last one."""
    try:
        counts = [int(s) for s in text.split(",")]
    except ValueError:
        raise ValueError(f"grid sizes must be integers, got {text!r}") from None
    if not counts or any(c < 1 for c in counts) or len(counts) > problem.input_dim:
        raise ValueError(f"expected 1 to {problem.input_dim} positive grid sizes, got {text!r}")
    counts += [counts[-1]] * (problem.input_dim - len(counts))
    spatial = [i for i, name in enumerate(problem.coord_names) if name != "t"]
    order = spatial + [i for i in range(problem.input_dim) if i not in spatial]
    shape = [0] * problem.input_dim
    for count, axis in zip(counts, order):
        shape[axis] = count
    return tuple(shape)


def _load_for_eval(args):
    from .diffnet import load_checkpoint

    cfg = parse_config(args.config) if args.config else parse_config_text("", args.problem)
    if cfg.problem != args.problem:
        raise ValueError(f"config describes {cfg.problem!r}, not {args.problem!r}")
    problem = cfg.build_problem(args.seed)
    configs, params = load_checkpoint(args.checkpoint)
    if tuple(configs) != tuple(problem.networks):
        raise ValueError(f"{args.checkpoint} does not match the {args.problem} networks; pass --config")
    return cfg, problem, params


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cwpinn", description=__doc__.split("\n\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress at every checkpoint")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="train every seed of an experiment")
    p.add_argument("config", help="experiment file or preset name")
    p.add_argument("--force", action="store_true", help="overwrite existing run directories")
    p.add_argument("--resume", action="store_true", help="continue interrupted seeds from their saved state")
    p.add_argument("--iterations", type=int, help="override the iteration count")
    p.add_argument("--seeds", help="comma-separated seeds overriding the config")
    p.add_argument("--output-dir", help="override the output directory")
    p.add_argument("--print-config", action="store_true", help="print the resolved config and exit")

    sub.add_parser("presets", help="list the shipped presets")

    for name, text in (("eval", "metrics of a checkpoint on the test set"),
                       ("export-grid", "prediction, truth and error on a grid as CSV")):
        p = sub.add_parser(name, help=text)
        p.add_argument("checkpoint")
        p.add_argument("problem")
        if name == "export-grid":
            p.add_argument("grid", help="nx[,ny[,nt]]")
            p.add_argument("-o", "--output", default="-", help="CSV path ('-' for stdout)")
        p.add_argument("--config", help="experiment file the checkpoint was trained with")
        p.add_argument("--seed", type=int, default=1, help="seed for problem data and test points")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(message)s", datefmt="%H:%M:%S")
    _apply_thread_override()

    if args.command == "presets":
        names = list_presets()
        width = max(len(n) for n, _ in names)
        for name, source in names:
            print(f"{name.ljust(width)}  {source}")
        return 0

    if args.command == "run":
        try:
            cfg = resolve_config(args.config)
            overrides = {}
            if args.iterations is not None:
                overrides["iterations"] = args.iterations
            if args.seeds:
                overrides["seeds"] = tuple(int(s) for s in args.seeds.split(","))
            if args.output_dir:
                overrides["output_dir"] = args.output_dir
            cfg = dataclasses.replace(cfg, **overrides)
        except (ConfigError, FileNotFoundError, ValueError) as err:
            print(f"cwpinn: {err}", file=sys.stderr)
            return 2
        if args.print_config:
            print(emit_config(cfg), end="")
            return 0
        return run(cfg, force=args.force, resume=args.resume)

    from .metrics import TestSet, evaluate, export_field_grid

    try:
        cfg, problem, params = _load_for_eval(args)
        shape = _grid_shape(problem, args.grid) if args.command == "export-grid" else None
    except (ConfigError, OSError, ValueError) as err:
        print(f"cwpinn: {err}", file=sys.stderr)
        return 2
    if args.command == "eval":
        test = TestSet.for_problem(problem, cfg.n_test, args.seed)
        for name, (rel, linf) in evaluate(problem, params, test).items():
            print(f"{name}: rel_l2 = {rel!r}  l_inf = {linf!r}")
        return 0
    if args.output == "-":
        import tempfile

        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "grid.csv"
            export_field_grid(problem, params, shape, path)
            sys.stdout.write(path.read_text())
    else:
        export_field_grid(problem, params, shape, args.output)
    return 0


if __name__ == "__main__":
    sys.exit(main())
