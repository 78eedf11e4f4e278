"""Cost parameters and the versioned parameter file."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, fields, replace
from importlib import resources
from pathlib import Path

from . import __version__

PARAMS_FORMAT = "trajpred.params/1"


@dataclass(frozen=True)
class CostParams:
    # magnitudes
    alpha_g: float = 1.0
    alpha_g_broken: float = 0.05
    alpha_d: float = 1.0
    alpha_r: float = 0.01
    alpha_kappa: float = 1.0
    alpha_a: float = 1.0
    # thresholds
    tau_b: float = 0.5
    tau_o: float = 6.0
    tau_r: float = 20.0
    kappa_max: float = 0.2
    a_max: float = 4.0
    # weights
    w_g: float = 1.0
    w_s: float = 1.0
    w_d: float = 100.0
    w_r: float = 1.0
    w_v: float = 1.0
    w_kappa: float = 1.0
    w_a: float = 1.0

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not math.isfinite(v):
                raise ValueError(f"{f.name} must be finite")
            if f.name.startswith(("alpha", "tau", "kappa_max", "a_max")) and not v > 0:
                raise ValueError(f"{f.name} must be > 0")
            if f.name.startswith("w_") and v < 0:
                raise ValueError(f"{f.name} must be >= 0")

    def with_weights(self, **kw) -> "CostParams":
        return replace(self, **kw)

    def only(self, *weights: str) -> "CostParams":
        """Copy with every weight zeroed except the named ones."""
        zero = {f.name: 0.0 for f in fields(self) if f.name.startswith("w_") and f.name not in weights}
        return replace(self, **zero)

    def digest(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:12]


def params_from_dict(doc: dict) -> CostParams:
    known = {f.name for f in fields(CostParams)}
    values = doc.get("params", doc)
    unknown = set(values) - known
    if unknown:
        raise ValueError(f"unknown parameter(s): {sorted(unknown)}")
    return CostParams(**{k: float(v) for k, v in values.items()})


def load_params(path: str | Path | None = None) -> CostParams:
    """Load a parameter file; None loads the bundled defaults."""
    if path is None:
        text = resources.files("trajpred").joinpath("data/params.json").read_text(encoding="utf-8")
    else:
        text = Path(path).read_text(encoding="utf-8")
    return params_from_dict(json.loads(text))


def params_to_json(params: CostParams) -> str:
    return json.dumps({"format": PARAMS_FORMAT, "params": asdict(params)}, indent=1, sort_keys=True)


def file_header(params: CostParams | None = None) -> str:
    """Header line stamped on every output file."""
    digest = params.digest() if params is not None else "none"
    return f"# trajpred {__version__} params={digest}"
