"""CSV ingestion/emission, config files, report schema, atomic writes.

CSV layout: header ``x1,...,xd,s,w,y`` with optional trailing ``score_0,score_1``
columns carrying precomputed propensities.  Numbers are written with Python's
shortest round-trip representation (17 significant digits when needed),
'.' decimals, ',' separators and LF line endings.
"""

from __future__ import annotations

import json
import os
import re
import tempfile
from importlib import resources

import jsonschema
import numpy as np

from .bootstrap import BootstrapConfig
from .dual import SolverConfig
from .exceptions import ValidationError
from .models import CovariateSpace, Dataset


def fmt_float(v: float) -> str:
    return repr(float(v))


def atomic_write(path: str, text: str) -> None:
    """Write via a temp file in the target directory, then rename."""
    directory = os.path.dirname(os.path.abspath(path)) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", text=True)
    try:
        with os.fdopen(fd, "w", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_dataset_csv(data: Dataset, path: str, scores: np.ndarray = None) -> None:
    d = data.dim
    header = [f"x{j + 1}" for j in range(d)] + ["s", "w", "y"]
    if scores is not None:
        header += ["score_0", "score_1"]
    lines = [",".join(header)]
    for i in range(data.n):
        row = [fmt_float(v) for v in data.X[i]] + [str(int(data.s[i])), str(int(data.w[i])), fmt_float(data.y[i])]
        if scores is not None:
            row += [fmt_float(scores[i, 0]), fmt_float(scores[i, 1])]
        lines.append(",".join(row))
    atomic_write(path, "\n".join(lines) + "\n")


def read_dataset_csv(path: str, space: CovariateSpace = None, pad: float = 0.05):
    """Parse a dataset CSV; returns (Dataset, scores-or-None).

    Schema violations name the offending row and column.
    """
    with open(path, "r", newline="") as fh:
        lines = [ln.rstrip("\n").rstrip("\r") for ln in fh if ln.strip()]
    if not lines:
        raise ValidationError(f"{path}: empty file")
    header = lines[0].split(",")
    xcols = [h for h in header if re.fullmatch(r"x\d+", h)]
    expected_x = [f"x{j + 1}" for j in range(len(xcols))]
    has_scores = header[-2:] == ["score_0", "score_1"]
    core = header[:-2] if has_scores else header
    if len(xcols) < 1 or core != expected_x + ["s", "w", "y"]:
        raise ValidationError(
            f"{path}: header must be x1,...,xd,s,w,y with optional score_0,score_1 columns; got {header}"
        )
    d = len(xcols)
    n_cols = len(header)
    X, s, w, y = [], [], [], []
    scores = [] if has_scores else None
    for ridx, line in enumerate(lines[1:], start=2):
        cells = line.split(",")
        if len(cells) != n_cols:
            raise ValidationError(f"{path}: row {ridx} has {len(cells)} cells, expected {n_cols}")
        try:
            xv = [float(cells[j]) for j in range(d)]
        except ValueError:
            raise ValidationError(f"{path}: row {ridx}: non-numeric covariate") from None
        for name, col in (("s", d), ("w", d + 1)):
            if cells[col] not in ("0", "1"):
                raise ValidationError(f"{path}: row {ridx}, column {name}: expected 0/1, got {cells[col]!r}")
        try:
            yv = float(cells[d + 2])
        except ValueError:
            raise ValidationError(f"{path}: row {ridx}, column y: non-numeric") from None
        if not np.isfinite(yv):
            raise ValidationError(f"{path}: row {ridx}, column y: non-finite")
        X.append(xv)
        s.append(int(cells[d]))
        w.append(int(cells[d + 1]))
        y.append(yv)
        if has_scores:
            try:
                sc = (float(cells[d + 3]), float(cells[d + 4]))
            except ValueError:
                raise ValidationError(f"{path}: row {ridx}: non-numeric score column") from None
            scores.append(sc)
    X = np.asarray(X, dtype=float)
    if space is None:
        space = CovariateSpace.from_data(X, pad=pad)
    data = Dataset(X=X, s=np.asarray(s), w=np.asarray(w), y=np.asarray(y), space=space)
    return data, (np.asarray(scores) if has_scores else None)


def write_sweep_csv(result, path: str, emit_timings: bool = False) -> None:
    header = ["theta1", "r", "eps", "statistic", "critical_value", "reject", "boundary_hit", "status"]
    if emit_timings:
        header.insert(6, "runtime")
    lines = [",".join(header)]
    for row in result.rows:
        cells = [
            fmt_float(row.theta1),
            fmt_float(row.r),
            fmt_float(row.eps),
            fmt_float(row.statistic),
            fmt_float(row.critical_value),
            str(int(row.reject)),
        ]
        if emit_timings:
            cells.append(fmt_float(row.runtime))
        cells += [str(int(row.boundary_hit)), row.status]
        lines.append(",".join(cells))
    atomic_write(path, "\n".join(lines) + "\n")


_DEFAULTS = {
    "r": 1.0,
    "eps": 0.01,
    "alpha_level": 0.05,
    "seed": 0,
    "solver": {f.name: getattr(SolverConfig(), f.name) for f in SolverConfig.__dataclass_fields__.values()},
    "bootstrap": {f.name: getattr(BootstrapConfig(), f.name) for f in BootstrapConfig.__dataclass_fields__.values()},
    "estimation": {"reg": 1e-4, "bandwidth": None},
    "space": None,
}


def default_config() -> dict:
    return json.loads(json.dumps(_DEFAULTS))


def load_config(path: str = None) -> dict:
    """Defaults overlaid with the JSON file; unknown keys are rejected."""
    cfg = default_config()
    if path is None:
        return cfg
    with open(path) as fh:
        try:
            user = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ValidationError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(user, dict):
        raise ValidationError(f"{path}: config must be a JSON object")
    for key, value in user.items():
        if key not in cfg:
            raise ValidationError(f"{path}: unknown config key {key!r}")
        if isinstance(cfg[key], dict) and key != "space":
            if not isinstance(value, dict):
                raise ValidationError(f"{path}: {key} must be an object")
            for sub, sval in value.items():
                if sub not in cfg[key]:
                    raise ValidationError(f"{path}: unknown config key {key}.{sub}")
                cfg[key][sub] = sval
        else:
            cfg[key] = value
    return cfg


def solver_config_from(cfg: dict) -> SolverConfig:
    return SolverConfig(**cfg["solver"])


def bootstrap_config_from(cfg: dict) -> BootstrapConfig:
    fields = dict(cfg["bootstrap"])
    if fields.get("seed") is None:
        fields["seed"] = cfg.get("seed", 0)
    return BootstrapConfig(**fields)


def report_schema() -> dict:
    with resources.files("fairproj.schemas").joinpath("report-v1.json").open() as fh:
        return json.load(fh)


def validate_report(doc: dict) -> None:
    jsonschema.validate(doc, report_schema())


def dump_json(doc: dict) -> str:
    return json.dumps(doc, indent=2) + "\n"
