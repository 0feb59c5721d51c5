import json
import logging
from pathlib import Path
from typing import Any, Dict, Optional, Tuple

import numpy as np

from errors import SystemFileError
from spectral_model import SpectralSystem, TimeProfile

logger = logging.getLogger(__name__)


class SystemParser:
    """
    Parser for system definition files.

    A system file is a JSON object:

        {
          "name": "triad",                 optional
          "d": 3, "s": 3,
          "lambda": [...],                 d*d entries, row-major (or nested rows)
          "gamma": [...],                  d*d*d entries, k-major (or nested)
          "forcing": {"kind": "constant", "value": [...]},
          "noise": {"kind": "constant", "value": [...]},   d*s entries, row-major
          "energy_conserving": false       optional
        }

    Profile kinds: constant(value), sinusoidal(offset, amplitude, omega, phase),
    piecewise(times, values), decaying(value, rate).
    """

    def __init__(self):
        self.supported_formats = {'.json'}
        logger.info("SystemParser initialized")

    def load(self, file_path) -> SpectralSystem:
        path = Path(file_path)
        if path.suffix.lower() not in self.supported_formats:
            raise SystemFileError(f"Unsupported file type '{path.suffix}'. Allowed: {', '.join(self.supported_formats)}")
        try:
            text = path.read_text()
        except OSError as e:
            raise SystemFileError(f"Cannot read system file: {e}") from e
        system = self.parse_text(text, default_name=path.stem)
        logger.info(f"Loaded system '{system.name}' (d={system.d}, s={system.s}) from {path}")
        return system

    def parse_text(self, text: str, default_name: str = "custom") -> SpectralSystem:
        try:
            data = json.loads(text)
        except json.JSONDecodeError as e:
            raise SystemFileError(f"Invalid JSON: {e.msg}", line=e.lineno) from e
        if not isinstance(data, dict):
            raise SystemFileError("Top level must be an object", line=1)
        return self.parse_dict(data, text=text, default_name=default_name)

    def parse_dict(self, data: Dict[str, Any], text: str = "", default_name: str = "custom") -> SpectralSystem:
        def fail(key_path: str, message: str):
            raise SystemFileError(message, key_path=key_path, line=_line_of(text, key_path))

        d = self._positive_int(data, "d", fail, minimum=1)
        s = self._positive_int(data, "s", fail, minimum=0)
        lam = self._array(data, "lambda", (d, d), fail)
        gamma = self._array(data, "gamma", (d, d, d), fail)
        forcing = self._profile(data.get("forcing", {"kind": "constant", "value": [0.0] * d}), "forcing", (d,), fail)
        noise = self._profile(data.get("noise", {"kind": "constant", "value": [0.0] * (d * s)}), "noise", (d, s), fail)

        energy_conserving = data.get("energy_conserving", False)
        if not isinstance(energy_conserving, bool):
            fail("energy_conserving", "must be true or false")

        try:
            return SpectralSystem(
                lam=lam,
                gamma=gamma,
                forcing=forcing,
                noise=noise,
                energy_conserving=energy_conserving,
                name=str(data.get("name", default_name)),
            )
        except ValueError as e:
            key = "energy_conserving" if "energy" in str(e) else ""
            fail(key, str(e))

    def _positive_int(self, data, key, fail, minimum):
        if key not in data:
            fail(key, "missing required key")
        value = data[key]
        if not isinstance(value, int) or isinstance(value, bool) or value < minimum:
            fail(key, f"must be an integer >= {minimum}, got {value!r}")
        return value

    def _array(self, data, key, shape: Tuple[int, ...], fail, required: bool = True) -> Optional[np.ndarray]:
        if key not in data:
            if required:
                fail(key, "missing required key")
            return None
        return _as_array(data[key], key, shape, fail)

    def _profile(self, spec, key: str, shape: Tuple[int, ...], fail) -> TimeProfile:
        if not isinstance(spec, dict):
            fail(key, "must be an object with a 'kind' field")
        kind = spec.get("kind")
        if kind not in TimeProfile.KINDS:
            fail(f"{key}.kind", f"unknown kind {kind!r}; allowed: {', '.join(TimeProfile.KINDS)}")

        params: Dict[str, Any] = {}
        if kind in ("constant", "decaying"):
            params["value"] = _as_array(spec.get("value"), f"{key}.value", shape, fail)
            if kind == "decaying":
                params["rate"] = _scalar(spec, "rate", key, fail)
        elif kind == "sinusoidal":
            params["offset"] = _as_array(spec.get("offset", [0.0] * int(np.prod(shape))), f"{key}.offset", shape, fail)
            params["amplitude"] = _as_array(spec.get("amplitude"), f"{key}.amplitude", shape, fail)
            params["omega"] = _scalar(spec, "omega", key, fail, default=1.0)
            params["phase"] = _scalar(spec, "phase", key, fail, default=0.0)
        else:
            times = spec.get("times")
            values = spec.get("values")
            if not isinstance(times, list) or not isinstance(values, list) or len(times) != len(values) or not times:
                fail(f"{key}.times", "piecewise profile needs equal-length non-empty 'times' and 'values'")
            if any(b <= a for a, b in zip(times[:-1], times[1:])):
                fail(f"{key}.times", "breakpoints must be strictly increasing")
            params["times"] = np.asarray(times, dtype=float)
            params["values"] = np.stack([
                _as_array(v, f"{key}.values[{i}]", shape, fail) for i, v in enumerate(values)
            ])
        try:
            return TimeProfile(kind, shape, params)
        except ValueError as e:
            fail(key, str(e))


def _as_array(value, key_path: str, shape: Tuple[int, ...], fail) -> np.ndarray:
    if value is None:
        fail(key_path, "missing required value")
    try:
        arr = np.asarray(value, dtype=float)
    except (TypeError, ValueError):
        fail(key_path, "must be a (nested) array of numbers")
    expected = int(np.prod(shape))
    if arr.size != expected:
        fail(key_path, f"expected {expected} entries for shape {shape}, got {arr.size}")
    if not np.all(np.isfinite(arr)):
        fail(key_path, "entries must be finite")
    return arr.reshape(shape)


def _scalar(spec, name: str, key: str, fail, default: Optional[float] = None) -> float:
    value = spec.get(name, default)
    if value is None or isinstance(value, bool) or not isinstance(value, (int, float)):
        fail(f"{key}.{name}", "must be a number")
    return float(value)


def _line_of(text: str, key_path: str) -> Optional[int]:
    """Line of the first occurrence of the innermost key, if present in the source"""
    if not text or not key_path:
        return None
    leaf = key_path.split(".")[-1].split("[")[0]
    needle = f'"{leaf}"'
    idx = text.find(needle)
    if idx < 0:
        return None
    return text.count("\n", 0, idx) + 1


def system_to_dict(system: SpectralSystem) -> Dict[str, Any]:
    """Inverse of SystemParser.parse_dict, used for manifests and the API"""
    return {
        "name": system.name,
        "d": system.d,
        "s": system.s,
        "lambda": system.lam.ravel().tolist(),
        "gamma": system.gamma.ravel().tolist(),
        "forcing": system.forcing.to_dict(),
        "noise": system.noise.to_dict(),
        "energy_conserving": bool(system.energy_conserving),
    }
