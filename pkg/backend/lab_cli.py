#!/usr/bin/env python3
"""
Command-line entry point for the statistical filtering lab.

    python lab_cli.py twin --builtin cubic1 --tau 1e-3 --delta 0.01 --N 2000 --T 2
    python lab_cli.py filter --config run.json --seed 7 --out runs/filter7
    python lab_cli.py analyze --run-dir runs/filter7

Exit codes: 0 success, 2 config validation, 3 numerical failure, 4 I/O failure.
"""

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional

from config import configure_logging, get_settings
from errors import ConfigValidationError, LabError, OutputError
from experiments import SCENARIOS, analyze_run, load_spec, run_experiment
from outputs import write_json, write_result

logger = logging.getLogger(__name__)

FILTER_FLAGS = {
    "tau": "tau", "delta": "delta", "N": "N", "T": "T", "eps": "eps",
    "gain_variant": "gain_variant", "split_step": "split_step", "analysis_only": "analysis_only",
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON experiment spec; flags override its fields")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", type=Path, help="output directory")
    common.add_argument("--reproducible", action="store_true", default=None,
                        help="omit wall-clock fields from the manifest")
    common.add_argument("--workers", type=int)
    common.add_argument("--log-level", default=None)

    system = common.add_argument_group("system")
    system.add_argument("--system", help="system definition file (.json)")
    system.add_argument("--builtin", help="builtin prototype: ou1, cubic1, triad3, l96s")

    filt = common.add_argument_group("filter")
    filt.add_argument("--tau", type=float)
    filt.add_argument("--delta", type=float)
    filt.add_argument("--N", type=int)
    filt.add_argument("--T", type=float)
    filt.add_argument("--eps", type=float)
    filt.add_argument("--gain-variant", dest="gain_variant", choices=["euler_consistent", "printed"])
    filt.add_argument("--no-obs-noise", dest="perturb_obs_noise", action="store_false", default=None)
    filt.add_argument("--split-step", dest="split_step", action="store_true", default=None)
    filt.add_argument("--analysis-only", dest="analysis_only", action="store_true", default=None)

    obs = common.add_argument_group("observations")
    obs.add_argument("--gamma-m", dest="gamma_m", type=float)
    obs.add_argument("--gamma-v", dest="gamma_v", type=float)
    obs.add_argument("--obs-mode", dest="obs_mode", choices=["direct", "sde"])
    obs.add_argument("--obs-file", dest="obs_file", help="observation CSV instead of synthesis")

    truth = common.add_argument_group("truth")
    truth.add_argument("--n-truth", dest="n_truth", type=int)
    truth.add_argument("--dt", type=float)
    truth.add_argument("--t-end", dest="t_end", type=float)
    truth.add_argument("--snapshot-every", dest="snapshot_every", type=int)

    sweep = common.add_argument_group("converge")
    sweep.add_argument("--taus", type=float, nargs="+")
    sweep.add_argument("--ns", type=int, nargs="+")
    sweep.add_argument("--replicates", type=int)

    oracle = common.add_argument_group("oracle")
    oracle.add_argument("--grid-cells", dest="grid_cells", type=int)
    oracle.add_argument("--oracle-mode", dest="oracle_mode", choices=["kb", "ks", "fp"])

    common.add_argument("--run-dir", dest="run_dir", help="run directory for 'analyze'")

    parser = argparse.ArgumentParser(prog="lab_cli", description="Statistical filtering lab")
    sub = parser.add_subparsers(dest="scenario", required=True)
    for name in SCENARIOS:
        sub.add_parser(name, parents=[common], help=f"run the '{name}' scenario")
    return parser


def _set(data: Dict[str, Any], block: str, key: str, value: Any) -> None:
    if value is not None:
        data.setdefault(block, {})[key] = value


def merge_args(args: argparse.Namespace, base: Dict[str, Any]) -> Dict[str, Any]:
    """Overlay command-line flags on a spec mapping"""
    data = json.loads(json.dumps(base))
    data["scenario"] = args.scenario
    for key in ("seed", "system", "builtin", "workers", "run_dir"):
        if getattr(args, key) is not None:
            data[key] = getattr(args, key)
    if args.builtin is not None:
        data.pop("system", None)
    if args.system is not None:
        data.pop("builtin", None)
    if args.out is not None:
        data["output_dir"] = str(args.out)

    for flag, key in FILTER_FLAGS.items():
        _set(data, "filter", key, getattr(args, flag))
    _set(data, "filter", "perturb_obs_noise", args.perturb_obs_noise)
    if args.seed is not None and "filter" in data:
        data["filter"]["seed"] = args.seed

    needs_obs = args.scenario in ("filter", "oracle", "twin")
    obs_flags = {"gamma_m": args.gamma_m, "gamma_v": args.gamma_v, "mode": args.obs_mode, "path": args.obs_file}
    if needs_obs or any(v is not None for v in obs_flags.values()):
        for key, value in obs_flags.items():
            _set(data, "observations", key, value)
        delta = data.get("filter", {}).get("delta")
        if delta is not None and "delta" not in data.get("observations", {}):
            _set(data, "observations", "delta", delta)

    for key in ("n_truth", "dt", "t_end", "snapshot_every"):
        _set(data, "truth", key, getattr(args, key))
    _set(data, "sweep", "taus", args.taus)
    _set(data, "sweep", "ns", args.ns)
    _set(data, "sweep", "replicates", args.replicates)
    _set(data, "oracle", "m", args.grid_cells)
    _set(data, "oracle", "mode", args.oracle_mode)
    return data


def _read_config(path: Optional[Path]) -> Dict[str, Any]:
    if path is None:
        return {}
    try:
        data = json.loads(path.read_text())
    except OSError as e:
        raise OutputError(f"Cannot read config {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise ConfigValidationError(f"{path}: invalid JSON at line {e.lineno}: {e.msg}") from e
    if not isinstance(data, dict):
        raise ConfigValidationError(f"{path}: top level must be an object")
    return data


def run(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        settings = get_settings()
    except ConfigValidationError as e:
        configure_logging(args.log_level)
        logger.error(f"Invalid environment settings: {e}")
        return e.exit_code
    configure_logging(args.log_level or settings.log_level)

    try:
        data = merge_args(args, _read_config(args.config))
        data.setdefault("workers", settings.workers)
        spec = load_spec(data)
        reproducible = settings.reproducible if args.reproducible is None else args.reproducible

        if spec.scenario == "analyze":
            summary = analyze_run(spec.run_dir)
            out = Path(spec.output_dir) if spec.output_dir else Path(spec.run_dir)
            out.mkdir(parents=True, exist_ok=True)
            path = write_json(summary, out / "analysis.json")
            logger.info(f"Analysis written to {path}")
            return 0

        out_dir = Path(spec.output_dir) if spec.output_dir else settings.output_dir / spec.scenario
        result = run_experiment(spec)
        files = write_result(result, out_dir, reproducible=reproducible)
        logger.info(f"Scenario '{spec.scenario}' finished; {len(files)} files in {out_dir}")
        return 0
    except LabError as e:
        logger.error(f"{type(e).__name__}: {e}")
        return e.exit_code
    except OSError as e:
        logger.error(f"I/O failure: {e}")
        return OutputError.exit_code


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
