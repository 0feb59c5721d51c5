"""
Run artifacts: CSV tables, NDJSON snapshots, JSON reports and the run manifest.
"""

import hashlib
import json
import logging
import math
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional

import numpy as np
import pandas as pd

from errors import OutputError
from experiments import ExperimentResult
from filter_engine import FilterRun
from fp_oracle import OracleRun
from obs_stream import save_observations
from system_parser import system_to_dict
from truth_mc import TruthPath

logger = logging.getLogger(__name__)

FLOAT_FORMAT = "%.17g"


def _idx(d: int):
    return range(1, d + 1)


def truth_frame(path: TruthPath) -> pd.DataFrame:
    """t, mean_k, cov_kl, skew_k, kurt_k"""
    d = path.records[0].stats.d
    rows = []
    for rec in path.records:
        row = {"t": rec.t}
        row.update({f"mean_{k}": rec.stats.mean[k - 1] for k in _idx(d)})
        row.update({f"cov_{k}{l}": rec.stats.cov[k - 1, l - 1] for k in _idx(d) for l in _idx(d)})
        row.update({f"skew_{k}": rec.skewness[k - 1] for k in _idx(d)})
        row.update({f"kurt_{k}": rec.kurtosis[k - 1] for k in _idx(d)})
        rows.append(row)
    return pd.DataFrame(rows)


def filter_frame(run: FilterRun) -> pd.DataFrame:
    """t, mean_k, cov_kl, hbar_m_k, tr_c_h, psd_projections"""
    d = run.records[0].mean.size
    rows = []
    for rec in run.records:
        row = {"t": rec.t}
        row.update({f"mean_{k}": rec.mean[k - 1] for k in _idx(d)})
        row.update({f"cov_{k}{l}": rec.cov[k - 1, l - 1] for k in _idx(d) for l in _idx(d)})
        row.update({f"hbar_m_{k}": rec.hbar_m[k - 1] for k in _idx(d)})
        row["tr_c_h"] = float(np.trace(rec.c_h))
        row["psd_projections"] = rec.psd_projections
        rows.append(row)
    return pd.DataFrame(rows)


def oracle_frame(run: OracleRun) -> pd.DataFrame:
    return pd.DataFrame([vars(rec) for rec in run.records])


def to_jsonable(value: Any) -> Any:
    """Recursively convert numpy / pandas values; non-finite floats become strings"""
    if isinstance(value, dict):
        return {str(k): to_jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [to_jsonable(v) for v in value]
    if isinstance(value, pd.DataFrame):
        return to_jsonable(value.to_dict(orient="list"))
    if isinstance(value, np.ndarray):
        return to_jsonable(value.tolist())
    if isinstance(value, np.generic):
        return to_jsonable(value.item())
    if isinstance(value, float) and not math.isfinite(value):
        return str(value)
    return value


def canonical_json(data: Any) -> str:
    return json.dumps(to_jsonable(data), sort_keys=True, separators=(",", ":"))


def sha256_text(text: str) -> str:
    return hashlib.sha256(text.encode()).hexdigest()


def sha256_file(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_csv(frame: pd.DataFrame, path: Path) -> Path:
    try:
        frame.to_csv(path, index=False, float_format=FLOAT_FORMAT)
    except OSError as e:
        raise OutputError(f"Cannot write {path}: {e}") from e
    logger.info(f"Wrote {len(frame)} rows to {path}")
    return path


def write_ndjson(records: Iterable[Dict], path: Path) -> Path:
    try:
        with open(path, "w") as f:
            for rec in records:
                f.write(json.dumps(to_jsonable(rec), sort_keys=True) + "\n")
    except OSError as e:
        raise OutputError(f"Cannot write {path}: {e}") from e
    logger.info(f"Wrote snapshots to {path}")
    return path


def write_json(data: Any, path: Path) -> Path:
    try:
        Path(path).write_text(json.dumps(to_jsonable(data), sort_keys=True, indent=2) + "\n")
    except OSError as e:
        raise OutputError(f"Cannot write {path}: {e}") from e
    return path


def prepare_dir(out_dir) -> Path:
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise OutputError(f"Cannot create output directory {out}: {e}") from e
    return out


def build_manifest(result: ExperimentResult, files: List[Path], reproducible: bool) -> Dict[str, Any]:
    """Config, seed and content hashes of the run; reproducible mode leaves out wall-clock fields"""
    spec = result.spec
    # worker count and destination are not part of the hashed config
    config = spec.model_dump(mode="json", exclude={"workers": True, "output_dir": True, "filter": {"workers": True}})
    manifest: Dict[str, Any] = {
        "scenario": spec.scenario,
        "seed": spec.seed,
        "config": config,
        "config_sha256": sha256_text(canonical_json(config)),
        "outputs": {p.name: sha256_file(p) for p in sorted(files)},
    }
    if result.system is not None:
        manifest["system"] = result.system.describe()
        manifest["system_sha256"] = sha256_text(canonical_json(system_to_dict(result.system)))
    if spec.system is not None:
        manifest["system_file_sha256"] = sha256_file(Path(spec.system))
    if not reproducible:
        manifest["created_at"] = datetime.now(timezone.utc).isoformat()
        manifest["workers"] = spec.workers
    return manifest


def write_result(result: ExperimentResult, out_dir, reproducible: bool = False) -> Dict[str, Path]:
    """Write every artifact present in the result plus report.json and manifest.json"""
    out = prepare_dir(out_dir)
    files: Dict[str, Path] = {}

    if result.truth is not None:
        files["truth"] = write_csv(truth_frame(result.truth), out / "truth.csv")
        if result.truth.snapshots:
            files["truth_snapshots"] = write_ndjson(result.truth.snapshots, out / "truth_snapshots.ndjson")
    if result.observations is not None:
        files["observations"] = save_observations(result.observations, out / "observations.csv")
    if result.forecast is not None:
        files["forecast"] = write_csv(filter_frame(result.forecast), out / "forecast.csv")
    if result.filter_run is not None:
        files["filter"] = write_csv(filter_frame(result.filter_run), out / "filter.csv")
    if result.oracle is not None:
        files["oracle"] = write_csv(oracle_frame(result.oracle), out / "oracle.csv")
        if result.oracle.snapshots:
            files["oracle_snapshots"] = write_ndjson(result.oracle.snapshots, out / "oracle_snapshots.ndjson")
    if result.sweep is not None:
        files["sweep"] = write_csv(result.sweep, out / "sweep.csv")

    files["report"] = write_json(result.report, out / "report.json")
    manifest = build_manifest(result, list(files.values()), reproducible)
    files["manifest"] = write_json(manifest, out / "manifest.json")
    logger.info(f"Run artifacts written to {out}")
    return files


def load_manifest(path) -> Dict[str, Any]:
    try:
        return json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise OutputError(f"Cannot read manifest {path}: {e}") from e


def verify_outputs(manifest: Dict[str, Any], run_dir, names: Optional[Iterable[str]] = None) -> Dict[str, bool]:
    """Compare current file hashes in run_dir with the manifest's"""
    run_dir = Path(run_dir)
    expected = manifest.get("outputs", {})
    names = list(names) if names is not None else list(expected)
    return {name: (run_dir / name).is_file() and sha256_file(run_dir / name) == expected.get(name) for name in names}
