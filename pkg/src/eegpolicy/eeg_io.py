"""Recording and feature-table I/O.

Two on-disk formats are owned here:

* raw recordings -- a JSON header (``channel_names``, ``sample_rate_hz``,
  ``condition``, ``block_index``) next to a little-endian float32
  channel-major binary, or alternatively a CSV whose header row is the
  channel names;
* feature tables -- UTF-8 CSV with mandatory ``subject_id``, ``W``, ``Y``
  columns, optionally accompanied by a ``<name>.schema.json`` sidecar that
  tags covariate columns as categorical.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

EYES_OPEN = "eyes_open"
EYES_CLOSED = "eyes_closed"
CONDITIONS = (EYES_OPEN, EYES_CLOSED)

CONTINUOUS = "continuous"
CATEGORICAL = "categorical"


class DataFormatError(ValueError):
    """A file violated one of the formats owned by this module."""

    def __init__(self, message: str, field_name: str = ""):
        super().__init__(message)
        self.field_name = field_name


class MalformedHeaderError(DataFormatError):
    pass


class LengthMismatchError(DataFormatError):
    pass


class DuplicateChannelError(DataFormatError):
    pass


@dataclass(frozen=True)
class Channel:
    name: str
    position: np.ndarray | None = None  # unit-sphere xyz, None if unknown

    def __post_init__(self):
        if self.position is not None:
            pos = np.asarray(self.position, dtype=float)
            if pos.shape != (3,):
                raise ValueError(f"position of {self.name!r} is not a 3-vector")
            if abs(np.linalg.norm(pos) - 1.0) > 1e-6:
                raise ValueError(f"position of {self.name!r} is not unit norm")
            pos.flags.writeable = False
            object.__setattr__(self, "position", pos)


@dataclass(frozen=True)
class Recording:
    """Multi-channel time series for one acquisition block."""

    channels: tuple[Channel, ...]
    sample_rate: float
    data: np.ndarray  # channels x samples, microvolts
    condition: str
    block_index: int

    def __post_init__(self):
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")
        if self.condition not in CONDITIONS:
            raise ValueError(f"condition must be one of {CONDITIONS}")
        data = np.ascontiguousarray(self.data, dtype=np.float64)
        if data.ndim != 2 or data.shape[0] != len(self.channels):
            raise ValueError("data must be a channels x samples matrix")
        names = [c.name for c in self.channels]
        if len(set(names)) != len(names):
            raise DuplicateChannelError("duplicate channel names", "channel_names")
        data.flags.writeable = False
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "channels", tuple(self.channels))

    @property
    def channel_names(self) -> list[str]:
        return [c.name for c in self.channels]

    @property
    def n_samples(self) -> int:
        return self.data.shape[1]

    @property
    def duration(self) -> float:
        return self.data.shape[1] / self.sample_rate

    def with_data(self, data: np.ndarray, sample_rate: float | None = None) -> "Recording":
        return Recording(self.channels, sample_rate or self.sample_rate,
                         data, self.condition, self.block_index)


@dataclass(frozen=True)
class FeatureMatrix:
    """Per-subject covariates, treatment indicator, and outcome."""

    subject_ids: tuple[str, ...]
    X: np.ndarray
    W: np.ndarray
    Y: np.ndarray
    column_names: tuple[str, ...]
    column_kinds: tuple[str, ...] = ()

    def __post_init__(self):
        X = np.ascontiguousarray(self.X, dtype=np.float64)
        W = np.ascontiguousarray(self.W, dtype=np.float64)
        Y = np.ascontiguousarray(self.Y, dtype=np.float64)
        n, d = X.shape
        if n == 0 or d == 0:
            raise ValueError("feature matrix must be non-empty")
        if W.shape != (n,) or Y.shape != (n,):
            raise ValueError("W and Y must have one entry per subject")
        if not np.all(np.isin(W, (0.0, 1.0))):
            raise DataFormatError("W entries must be 0 or 1", "W")
        if not (np.all(np.isfinite(X)) and np.all(np.isfinite(Y))):
            raise DataFormatError("non-finite entries in X or Y")
        if len(self.column_names) != d:
            raise ValueError("column_names length must match X width")
        if len(set(self.column_names)) != d:
            raise DataFormatError("duplicate column names", "column_names")
        kinds = self.column_kinds or tuple(CONTINUOUS for _ in range(d))
        if len(kinds) != d:
            raise ValueError("column_kinds length must match X width")
        for a in (X, W, Y):
            a.flags.writeable = False
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "W", W)
        object.__setattr__(self, "Y", Y)
        object.__setattr__(self, "subject_ids", tuple(str(s) for s in self.subject_ids))
        object.__setattr__(self, "column_names", tuple(self.column_names))
        object.__setattr__(self, "column_kinds", tuple(kinds))

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def d(self) -> int:
        return self.X.shape[1]


# ---------------------------------------------------------------------------
# bundled montage

def standard_montage() -> dict[str, np.ndarray]:
    """Idealized 10-10 electrode positions keyed by channel name."""
    text = resources.files("eegpolicy.assets").joinpath("montage_10_10.json").read_text()
    return {name: np.asarray(xyz, dtype=float) for name, xyz in json.loads(text).items()}


def common_channel_names() -> list[str]:
    """The bundled 54-channel list shared by all acquisition sites."""
    text = resources.files("eegpolicy.assets").joinpath("common_channels_54.txt").read_text()
    return text.split()


def _attach_positions(names: list[str]) -> tuple[Channel, ...]:
    montage = standard_montage()
    lowered = {k.lower(): v for k, v in montage.items()}
    return tuple(Channel(n, lowered.get(n.lower())) for n in names)


# ---------------------------------------------------------------------------
# recording I/O

_HEADER_FIELDS = ("channel_names", "sample_rate_hz", "condition", "block_index")


def load_recording(path: str | Path, *, sample_rate: float = 250.0,
                   condition: str = EYES_OPEN, block_index: int = 1) -> Recording:
    """Load a header+binary pair (pass the ``.json`` path) or a CSV.

    For CSV files the keyword defaults supply the metadata unless a
    ``<stem>.json`` sidecar is present.
    """
    path = Path(path)
    if path.suffix == ".csv":
        sidecar = path.with_suffix(".json")
        if sidecar.exists():
            header = _read_header(sidecar, require_channels=False)
            sample_rate = header.get("sample_rate_hz", sample_rate)
            condition = header.get("condition", condition)
            block_index = header.get("block_index", block_index)
        return _load_csv_recording(path, sample_rate, condition, block_index)
    if path.suffix != ".json":
        raise MalformedHeaderError(
            f"expected a .json header or .csv recording, got {path.name}")
    header = _read_header(path, require_channels=True)
    names = header["channel_names"]
    if len(set(names)) != len(names):
        raise DuplicateChannelError(
            "header declares duplicate channel names", "channel_names")
    binary = path.with_suffix(".bin")
    raw = np.fromfile(binary, dtype="<f4")
    n_ch = len(names)
    if n_ch == 0 or raw.size % n_ch:
        raise LengthMismatchError(
            f"binary length {raw.size} is not a multiple of the "
            f"{n_ch} channels declared in channel_names", "channel_names")
    if "n_samples" in header and raw.size != n_ch * int(header["n_samples"]):
        raise LengthMismatchError(
            f"binary holds {raw.size // n_ch} samples per channel but the "
            f"header declares {header['n_samples']}", "n_samples")
    data = raw.astype(np.float64).reshape(n_ch, -1)
    return Recording(_attach_positions(names), float(header["sample_rate_hz"]),
                     data, header["condition"], int(header["block_index"]))


def _read_header(path: Path, require_channels: bool) -> dict:
    try:
        header = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise MalformedHeaderError(f"header {path.name} is not valid JSON: {exc}") from exc
    if not isinstance(header, dict):
        raise MalformedHeaderError(f"header {path.name} must be a JSON object")
    required = _HEADER_FIELDS if require_channels else ()
    for key in required:
        if key not in header:
            raise MalformedHeaderError(f"header missing field {key!r}", key)
    if "sample_rate_hz" in header and not header["sample_rate_hz"] > 0:
        raise MalformedHeaderError("sample_rate_hz must be positive", "sample_rate_hz")
    if "condition" in header and header["condition"] not in CONDITIONS:
        raise MalformedHeaderError(
            f"condition must be one of {CONDITIONS}", "condition")
    return header


def _load_csv_recording(path: Path, sample_rate: float, condition: str,
                        block_index: int) -> Recording:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise MalformedHeaderError(f"{path.name} is empty", "channel_names")
    names = [c.strip() for c in rows[0]]
    if len(set(names)) != len(names):
        raise DuplicateChannelError("duplicate channel names in CSV header",
                                    "channel_names")
    try:
        body = np.array([[float(v) for v in row] for row in rows[1:]], dtype=float)
    except ValueError as exc:
        raise DataFormatError(f"non-numeric sample in {path.name}: {exc}") from exc
    if body.size and body.shape[1] != len(names):
        raise LengthMismatchError("row width differs from channel count",
                                  "channel_names")
    data = body.T if body.size else np.zeros((len(names), 0))
    return Recording(_attach_positions(names), sample_rate, data, condition,
                     block_index)


def save_recording(rec: Recording, path: str | Path) -> None:
    """Write the JSON header + float32 binary pair (pass the ``.json`` path)."""
    path = Path(path)
    if path.suffix != ".json":
        raise ValueError("save path must end in .json")
    header = {
        "channel_names": rec.channel_names,
        "sample_rate_hz": rec.sample_rate,
        "condition": rec.condition,
        "block_index": rec.block_index,
        "n_samples": rec.n_samples,
    }
    path.write_text(json.dumps(header, indent=1) + "\n")
    rec.data.astype("<f4").tofile(path.with_suffix(".bin"))


# ---------------------------------------------------------------------------
# feature-table I/O

def one_hot_expand(values: list[str], column: str) -> tuple[np.ndarray, list[str]]:
    """Indicator columns for every level but the first (reference dropped)."""
    levels = sorted(set(values))
    keep = levels[1:]
    mat = np.zeros((len(values), len(keep)))
    index = {lv: j for j, lv in enumerate(keep)}
    for i, v in enumerate(values):
        j = index.get(v)
        if j is not None:
            mat[i, j] = 1.0
    return mat, [f"{column}={lv}" for lv in keep]


def load_feature_table(path: str | Path) -> FeatureMatrix:
    """Read a feature CSV; categorical columns are one-hot expanded."""
    path = Path(path)
    schema_path = path.with_name(path.stem + ".schema.json")
    categorical: set[str] = set()
    if schema_path.exists():
        schema = json.loads(schema_path.read_text())
        categorical = {c for c, kind in schema.items() if kind == CATEGORICAL}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataFormatError(f"{path.name} is empty") from None
        rows = list(reader)
    header = [h.strip() for h in header]
    for required in ("subject_id", "W", "Y"):
        if required not in header:
            raise DataFormatError(f"missing mandatory column {required!r}", required)
    if not rows:
        raise DataFormatError(f"{path.name} has no data rows")
    col = {name: [row[j] for row in rows] for j, name in enumerate(header)}
    subject_ids = col["subject_id"]
    w = np.array([_parse_number(v, "W") for v in col["W"]])
    if not np.all(np.isin(w, (0.0, 1.0))):
        raise DataFormatError("W values must be 0 or 1", "W")
    y = np.array([_parse_number(v, "Y") for v in col["Y"]])

    blocks: list[np.ndarray] = []
    names: list[str] = []
    kinds: list[str] = []
    for name in header:
        if name in ("subject_id", "W", "Y"):
            continue
        values = col[name]
        if name in categorical:
            mat, expanded = one_hot_expand(values, name)
            blocks.append(mat)
            names.extend(expanded)
            kinds.extend(CATEGORICAL for _ in expanded)
        else:
            try:
                blocks.append(np.array([[float(v)] for v in values]))
            except ValueError:
                raise DataFormatError(
                    f"non-numeric value in column {name!r}; tag it categorical "
                    "in the schema sidecar", name) from None
            names.append(name)
            kinds.append(CONTINUOUS)
    if not blocks:
        raise DataFormatError("no covariate columns present")
    X = np.hstack(blocks)
    return FeatureMatrix(tuple(subject_ids), X, w, y, tuple(names), tuple(kinds))


def _parse_number(value: str, column: str) -> float:
    try:
        return float(value)
    except ValueError:
        raise DataFormatError(f"non-numeric value {value!r} in column {column!r}",
                              column) from None


def save_feature_table(fm: FeatureMatrix, path: str | Path) -> None:
    """Write a feature CSV (already-expanded columns are written as-is)."""
    path = Path(path)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["subject_id", "W", "Y", *fm.column_names])
        for i in range(fm.n):
            writer.writerow([fm.subject_ids[i], _fmt(fm.W[i]), _fmt(fm.Y[i]),
                             *(_fmt(v) for v in fm.X[i])])


def _fmt(x: float) -> str:
    return repr(float(x))
