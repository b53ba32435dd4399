"""Command-line front end.

Config files are INI-style ``key = value`` text with section headers::

    [run]
    mode = gate            # gate | sweep | mc | verify
    output = result.csv
    pattern = D1,D3
    n_trajectories = 1000
    base_seed = 0

    [params]
    omega = 1.0
    kappa = 0.2
    tau = 1.3
    t_detect = 25.0
    # optional: phi1 = 0, phi2 = 0, eta = 0, fock_cutoff = 1

    [inputs]               # optional, defaults to 1/sqrt(2) everywhere
    alpha1 = 0.7071067811865476
    beta1 = 0.7071067811865476
    alpha2 = 1
    beta2 = 0

    [sweep]                # field = start, stop, count, linear|log
    tau = 0.1, 10, 50, log

Unknown sections or keys are rejected. Exit codes: 0 success, 1 usage,
configuration or I/O error, 2 numerical consistency failure, 3 failed
verification.
"""

from __future__ import annotations

import argparse
import configparser
import dataclasses
import io
import itertools
import json
import os
import re
import sys
import tempfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .dynamics import SystemParams
from .errors import ConfigError, ContractError, NumericError
from .hilbert import dump_amplitudes
from .protocol import (
    AtomInputs,
    DetectionPattern,
    HERALDING_PATTERNS,
    outcome_row,
    rows_to_csv,
    run_protocol,
    success_probability,
)

MODES = ("gate", "sweep", "mc", "verify")
EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_VERIFY = 0, 1, 2, 3

_RUN_KEYS = {"mode", "output", "pattern", "n_trajectories", "base_seed"}
_PARAM_KEYS = {f.name for f in dataclasses.fields(SystemParams)}
_REQUIRED_PARAMS = ("omega", "kappa", "tau", "t_detect")
_INPUT_KEYS = ("alpha1", "beta1", "alpha2", "beta2")


@dataclass(frozen=True)
class SweepAxis:
    field: str
    start: float
    stop: float
    count: int
    scale: str = "linear"

    def values(self) -> list[float]:
        if self.count == 1:
            return [self.start]
        if self.scale == "log":
            vals = np.geomspace(self.start, self.stop, self.count)
        else:
            vals = np.linspace(self.start, self.stop, self.count)
        # pin the endpoints exactly
        vals[0], vals[-1] = self.start, self.stop
        return [float(v) for v in vals]


@dataclass(frozen=True)
class RunConfig:
    mode: str
    params: SystemParams
    inputs: AtomInputs = field(default_factory=AtomInputs.uniform)
    pattern: DetectionPattern = DetectionPattern(frozenset({"D1", "D3"}))
    sweep_axes: tuple[SweepAxis, ...] = ()
    n_trajectories: int = 1000
    base_seed: int = 0
    output_path: str | None = None


def _positions(text: str) -> dict[tuple[str, str], tuple[int, int]]:
    """Map ``(section, key)`` to the 1-based line/column of its value."""
    pos = {}
    section = ""
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        m = re.match(r"\s*\[([^\]]+)\]", line)
        if m:
            section = m.group(1).strip()
            pos[(section, "")] = (lineno, line.index("[") + 1)
            continue
        if not stripped or stripped.startswith(("#", ";")) or "=" not in line:
            continue
        key, _, rest = line.partition("=")
        col = len(key) + 2 + (len(rest) - len(rest.lstrip()))
        pos[(section, key.strip().lower())] = (lineno, col)
    return pos


def _read_ini(text: str) -> configparser.ConfigParser:
    cp = configparser.ConfigParser(delimiters=("=",), comment_prefixes=("#", ";"),
                                   inline_comment_prefixes=("#",), strict=True,
                                   interpolation=None, default_section="\x00none")
    try:
        cp.read_string(text)
    except configparser.MissingSectionHeaderError as exc:
        raise ConfigError("key outside of any [section]", exc.lineno, 1) from None
    except (configparser.DuplicateOptionError, configparser.DuplicateSectionError) as exc:
        raise ConfigError(exc.message.splitlines()[0], exc.lineno, 1) from None
    except configparser.ParsingError as exc:
        lineno, line = exc.errors[0]
        raise ConfigError(f"cannot parse {line.strip()!r}", lineno, 1) from None
    return cp


def _number(text: str, where, kind=float):
    line, col = where
    try:
        if kind is int:
            return int(text)
        if kind is complex:
            return complex(text.replace(" ", ""))
        return float(text)
    except ValueError:
        raise ConfigError(f"expected {kind.__name__}, got {text!r}", line, col) from None


def parse_config(text: str) -> RunConfig:
    """Strictly parse a config file; see the module docstring for the format."""
    cp = _read_ini(text)
    pos = _positions(text)

    def where(section, key=""):
        return pos.get((section, key), (1, 1))

    for section in cp.sections():
        if section not in ("run", "params", "inputs", "sweep"):
            raise ConfigError(f"unknown section [{section}]", *where(section))
    allowed = {"run": _RUN_KEYS, "params": _PARAM_KEYS, "inputs": set(_INPUT_KEYS),
               "sweep": _PARAM_KEYS}
    for section in cp.sections():
        for key in cp[section]:
            if key not in allowed[section]:
                line, col = where(section, key)
                raise ConfigError(f"unknown key {key!r} in [{section}]", line, 1, field=key)

    run = cp["run"] if cp.has_section("run") else {}
    mode = run.get("mode")
    if mode is None:
        raise ConfigError("missing [run] mode", field="mode")
    if mode not in MODES:
        raise ConfigError(f"mode must be one of {MODES}, got {mode!r}",
                          *where("run", "mode"), field="mode")

    if not cp.has_section("params"):
        raise ConfigError("missing [params] section", field="params")
    raw = cp["params"]
    values = {}
    for key in _REQUIRED_PARAMS:
        if key not in raw:
            raise ConfigError(f"missing required parameter {key!r}", field=key)
    for key, text_val in raw.items():
        kind = int if key == "fock_cutoff" else float
        values[key] = _number(text_val, where("params", key), kind)
    params = _build_params(values, where)

    inputs = AtomInputs.uniform()
    if cp.has_section("inputs"):
        sect = cp["inputs"]
        missing = [k for k in _INPUT_KEYS if k not in sect]
        if missing:
            raise ConfigError(f"[inputs] needs all of {_INPUT_KEYS}; missing {missing}",
                              field=missing[0])
        amps = [_number(sect[k], where("inputs", k), complex) for k in _INPUT_KEYS]
        try:
            inputs = AtomInputs(*amps)
        except ValueError as exc:
            raise ConfigError(str(exc), *where("inputs", "alpha1"), field="inputs") from None

    pattern = DetectionPattern(frozenset({"D1", "D3"}))
    if "pattern" in run:
        try:
            pattern = DetectionPattern.parse(run["pattern"])
        except ValueError as exc:
            raise ConfigError(str(exc), *where("run", "pattern"), field="pattern") from None
        if pattern.clicked not in HERALDING_PATTERNS:
            raise ConfigError(f"pattern {run['pattern']!r} is not a heralding pair",
                              *where("run", "pattern"), field="pattern")

    n_traj = _number(run.get("n_trajectories", "1000"), where("run", "n_trajectories"), int)
    if n_traj < 100:
        raise ConfigError("n_trajectories must be >= 100", *where("run", "n_trajectories"),
                          field="n_trajectories")
    base_seed = _number(run.get("base_seed", "0"), where("run", "base_seed"), int)
    if not 0 <= base_seed < 2 ** 63:
        raise ConfigError("base_seed must lie in [0, 2^63)", *where("run", "base_seed"),
                          field="base_seed")

    axes = []
    if cp.has_section("sweep"):
        for key, axis_text in cp["sweep"].items():
            axes.append(_parse_axis(key, axis_text, where("sweep", key), params))
    if mode == "sweep" and not axes:
        raise ConfigError("sweep mode needs a [sweep] section with at least one axis",
                          field="sweep")

    return RunConfig(mode, params, inputs, pattern, tuple(axes), n_traj, base_seed,
                     run.get("output"))


def _build_params(values: dict, where) -> SystemParams:
    try:
        return SystemParams(**values)
    except ValueError as exc:
        name = str(exc).split()[0]
        line, col = where("params", name)
        raise ConfigError(str(exc), line, col, field=name) from None


def _parse_axis(key: str, axis_text: str, loc, params: SystemParams) -> SweepAxis:
    line, col = loc
    parts = [p.strip() for p in axis_text.split(",")]
    if len(parts) not in (3, 4):
        raise ConfigError(f"sweep {key}: expected 'start, stop, count[, linear|log]'",
                          line, col, field=key)
    kind = int if key == "fock_cutoff" else float
    start = _number(parts[0], loc, kind)
    stop = _number(parts[1], loc, kind)
    count = _number(parts[2], loc, int)
    scale = parts[3] if len(parts) == 4 else "linear"
    if count < 1:
        raise ConfigError(f"sweep {key}: count must be >= 1", line, col, field=key)
    if scale not in ("linear", "log"):
        raise ConfigError(f"sweep {key}: scale must be linear or log", line, col, field=key)
    if scale == "log" and (start <= 0 or stop <= 0):
        raise ConfigError(f"sweep {key}: log scale needs positive endpoints",
                          line, col, field=key)
    axis = SweepAxis(key, start, stop, count, scale)
    if key == "fock_cutoff" and any(v != int(v) for v in axis.values()):
        raise ConfigError("sweep fock_cutoff: values must be integers", line, col, field=key)
    for v in (start, stop):
        try:
            dataclasses.replace(params, **{key: kind(v)})
        except ValueError as exc:
            raise ConfigError(f"sweep {key}: {exc}", line, col, field=key) from None
    return axis


def write_atomic(path: str, text: str) -> None:
    """Write via a temporary file in the same directory, then rename."""
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def sweep_points(config: RunConfig) -> list[SystemParams]:
    grids = [axis.values() for axis in config.sweep_axes]
    points = []
    for combo in itertools.product(*grids):
        updates = {}
        for axis, v in zip(config.sweep_axes, combo):
            updates[axis.field] = int(v) if axis.field == "fock_cutoff" else v
        points.append(dataclasses.replace(config.params, **updates))
    return points


def _sweep_row(args) -> list[str]:
    inputs, params, pattern = args
    return outcome_row(params, run_protocol(inputs, params, pattern))


def _mc_lines(args) -> list[tuple[str, bool, bool]]:
    from .trajectories import run_trajectory
    inputs, params, seeds = args
    out = []
    for s in seeds:
        rec = run_trajectory(inputs, params, s)
        out.append((rec.to_json(), rec.survived_step1, rec.heralded_pattern is not None))
    return out


def _pool_map(fn, items: list, jobs: int) -> list:
    if jobs <= 1 or len(items) < 2:
        return [fn(it) for it in items]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


def _echo(quiet: bool, msg: str) -> None:
    if not quiet:
        print(msg)


def run(config: RunConfig, jobs: int = 1, quiet: bool = False) -> int:
    """Execute a parsed config; returns the process exit code."""
    try:
        if config.mode == "gate":
            return _run_gate(config, quiet)
        if config.mode == "sweep":
            return _run_sweep(config, jobs, quiet)
        if config.mode == "mc":
            return _run_mc(config, jobs, quiet)
        return _run_verify(config, jobs, quiet)
    except (NumericError, ContractError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


def _run_gate(config: RunConfig, quiet: bool) -> int:
    outcome = run_protocol(config.inputs, config.params, config.pattern)
    csv_text = rows_to_csv([outcome_row(config.params, outcome)])
    _echo(quiet, csv_text.rstrip("\n"))
    if config.output_path:
        write_atomic(config.output_path, csv_text)
        buf = io.StringIO()
        dump_amplitudes(outcome.heralded_state, buf)
        write_atomic(config.output_path + ".amplitudes.jsonl", buf.getvalue())
    return EXIT_OK


def _run_sweep(config: RunConfig, jobs: int, quiet: bool) -> int:
    points = sweep_points(config)
    rows = _pool_map(_sweep_row, [(config.inputs, p, config.pattern) for p in points], jobs)
    csv_text = rows_to_csv(rows)
    if config.output_path:
        write_atomic(config.output_path, csv_text)
        _echo(quiet, f"wrote {len(rows)} rows to {config.output_path}")
    else:
        _echo(quiet, csv_text.rstrip("\n"))
    return EXIT_OK


def _run_mc(config: RunConfig, jobs: int, quiet: bool) -> int:
    from .trajectories import EstimateWithError

    n = config.n_trajectories
    seeds = [config.base_seed + i for i in range(n)]
    size = max(1, -(-n // (4 * max(jobs, 1))))
    chunks = [(config.inputs, config.params, seeds[i:i + size]) for i in range(0, n, size)]
    results = [r for part in _pool_map(_mc_lines, chunks, jobs) for r in part]
    flags = np.array([herald for _, ok, herald in results if ok], dtype=float)
    est = EstimateWithError.from_indicators(flags)
    summary = {
        "n_trajectories": n,
        "base_seed": config.base_seed,
        "heralding_mean": est.mean,
        "heralding_stderr": est.stderr,
        "n_survived_step1": est.n_samples,
        "closed_form": success_probability(config.params),
    }
    summary_text = json.dumps(summary)
    _echo(quiet, summary_text)
    if config.output_path:
        write_atomic(config.output_path, "".join(line + "\n" for line, _, _ in results))
        write_atomic(config.output_path + ".summary.json", summary_text + "\n")
    return EXIT_OK


def _run_verify(config: RunConfig, jobs: int, quiet: bool) -> int:
    from .acceptance import run_all

    results = run_all(jobs=jobs, echo=None if quiet else print)
    report = "".join(r.line() + "\n" for r in results)
    if config.output_path:
        write_atomic(config.output_path, report)
    return EXIT_OK if all(r.passed for r in results) else EXIT_VERIFY


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="heralded-cz",
                description="Simulate the heralded two-cavity controlled-phase gate.")
    p.add_argument("--config", required=True, help="path to the run configuration")
    p.add_argument("--output", help="output path (overrides [run] output)")
    p.add_argument("--jobs", type=int, default=None,
                   help="worker processes (env GATE_SIM_JOBS, default 1)")
    p.add_argument("--seed", type=int, default=None, help="base seed (overrides config)")
    p.add_argument("--quiet", action="store_true", help="suppress stdout")
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    jobs = args.jobs
    if jobs is None:
        env = os.environ.get("GATE_SIM_JOBS", "1")
        try:
            jobs = int(env)
        except ValueError:
            print(f"error: GATE_SIM_JOBS must be an integer, got {env!r}", file=sys.stderr)
            return EXIT_USAGE
    if jobs < 1:
        print("error: --jobs must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    try:
        with open(args.config) as fh:
            text = fh.read()
    except OSError as exc:
        print(f"error: cannot read config: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        config = parse_config(text)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    if args.output:
        config = dataclasses.replace(config, output_path=args.output)
    if args.seed is not None:
        if args.seed < 0:
            print("error: --seed must be >= 0", file=sys.stderr)
            return EXIT_USAGE
        config = dataclasses.replace(config, base_seed=args.seed)
    return run(config, jobs=jobs, quiet=args.quiet)


if __name__ == "__main__":
    sys.exit(main())
