"""Columnar dataset container and its JSON-Lines persistence."""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Mapping

import numpy as np

from .. import canonical
from ..errors import DigestMismatch, SchemaMismatch

SCHEMA_VERSION = 1
GENERATOR_VERSION = "sliceloop-dgl/1"

# (name, dtype, kind); kind is "numeric", "categorical", "key" or "flag"
SCHEMA: tuple[tuple[str, str, str], ...] = (
    ("sample_id", "int64", "key"),
    ("user_id", "int64", "key"),
    ("window", "int64", "key"),
    ("timestamp_s", "float64", "key"),
    ("pos_x_m", "float64", "numeric"),
    ("pos_y_m", "float64", "numeric"),
    ("speed_mps", "float64", "numeric"),
    ("traffic_load_pps", "float64", "numeric"),
    ("snr_db", "float64", "numeric"),
    ("group", "int8", "categorical"),
    ("label", "int8", "categorical"),
    ("is_anomalous", "bool", "flag"),
)
COLUMN_NAMES = tuple(name for name, _, _ in SCHEMA)
NUMERIC_FEATURES = tuple(name for name, _, kind in SCHEMA if kind == "numeric")
GROUP_NAMES = {0: "rural", 1: "urban"}

# metadata keys that never enter a digest
VOLATILE_KEYS = ("created_at",)


@dataclass(frozen=True)
class Sample:
    sample_id: int
    user_id: int
    window: int
    timestamp_s: float
    pos_x_m: float
    pos_y_m: float
    speed_mps: float
    traffic_load_pps: float
    snr_db: float
    group: str
    label: int
    is_anomalous: bool
    provenance: Mapping[str, object]

    def numeric(self) -> np.ndarray:
        return np.array([getattr(self, f) for f in NUMERIC_FEATURES])


def _freeze(columns: Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
    missing = [c for c in COLUMN_NAMES if c not in columns]
    if missing:
        raise SchemaMismatch(f"missing columns: {missing}")
    extra = set(columns) - set(COLUMN_NAMES)
    if extra:
        raise SchemaMismatch(f"unknown columns: {sorted(extra)}")
    out = {}
    n = None
    for name, dtype, _ in SCHEMA:
        arr = np.array(columns[name], dtype=dtype)
        if arr.ndim != 1:
            raise SchemaMismatch(f"column {name} must be 1-D")
        if n is None:
            n = arr.size
        elif arr.size != n:
            raise SchemaMismatch(f"column {name} has {arr.size} rows, expected {n}")
        arr.setflags(write=False)
        out[name] = arr
    return out


@dataclass(frozen=True, eq=False)
class Dataset:
    columns: Mapping[str, np.ndarray]
    metadata: Mapping[str, object]

    def __post_init__(self):
        object.__setattr__(self, "columns", _freeze(self.columns))
        object.__setattr__(self, "metadata", dict(self.metadata))

    def __len__(self) -> int:
        return int(self.columns["sample_id"].size)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.columns[name]

    @property
    def provenance(self) -> dict:
        return {
            "run_id": self.metadata.get("run_id", ""),
            "seed": self.metadata.get("seed"),
            "generator_version": self.metadata.get("generator_version", GENERATOR_VERSION),
        }

    def sample(self, i: int) -> Sample:
        c = self.columns
        return Sample(
            sample_id=int(c["sample_id"][i]),
            user_id=int(c["user_id"][i]),
            window=int(c["window"][i]),
            timestamp_s=float(c["timestamp_s"][i]),
            pos_x_m=float(c["pos_x_m"][i]),
            pos_y_m=float(c["pos_y_m"][i]),
            speed_mps=float(c["speed_mps"][i]),
            traffic_load_pps=float(c["traffic_load_pps"][i]),
            snr_db=float(c["snr_db"][i]),
            group=GROUP_NAMES[int(c["group"][i])],
            label=int(c["label"][i]),
            is_anomalous=bool(c["is_anomalous"][i]),
            provenance=self.provenance,
        )

    def samples(self) -> Iterator[Sample]:
        for i in range(len(self)):
            yield self.sample(i)

    def features(self, names=NUMERIC_FEATURES) -> np.ndarray:
        return np.column_stack([np.asarray(self.columns[n], dtype=float) for n in names])

    def keys(self) -> np.ndarray:
        """(user_id, window) pairs identifying each sample's slot in the run."""
        return np.column_stack([self.columns["user_id"], self.columns["window"]])

    def take(self, idx, event: dict | None = None) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        cols = {k: v[idx] for k, v in self.columns.items()}
        meta = dict(self.metadata)
        meta["n_samples"] = int(idx.size)
        if event is not None:
            meta["provenance_log"] = list(meta.get("provenance_log", [])) + [event]
        return Dataset(cols, meta)

    def replace_columns(self, event: dict | None = None, **new) -> "Dataset":
        cols = dict(self.columns)
        cols.update(new)
        meta = dict(self.metadata)
        if event is not None:
            meta["provenance_log"] = list(meta.get("provenance_log", [])) + [event]
        return Dataset(cols, meta)

    def with_metadata(self, **updates) -> "Dataset":
        meta = dict(self.metadata)
        meta.update(updates)
        return Dataset(dict(self.columns), meta)

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(f"schema:{SCHEMA_VERSION};n:{len(self)};".encode())
        for name, dtype, _ in SCHEMA:
            arr = np.ascontiguousarray(self.columns[name], dtype=np.dtype(dtype).newbyteorder("<"))
            h.update(name.encode())
            h.update(arr.tobytes())
        stable = {k: v for k, v in self.metadata.items() if k not in VOLATILE_KEYS}
        h.update(canonical.dump_bytes(stable))
        return h.hexdigest()


def concat(parts: list[Dataset], metadata: Mapping[str, object]) -> Dataset:
    cols = {name: np.concatenate([p.columns[name] for p in parts]) for name in COLUMN_NAMES}
    return Dataset(cols, metadata)


def _row(ds: Dataset, i: int) -> dict:
    s = ds.sample(i)
    row = {name: getattr(s, name) for name in COLUMN_NAMES}
    row["provenance"] = dict(s.provenance)
    return row


def write_jsonl(ds: Dataset, path: str | Path) -> Path:
    """Write one JSON object per sample plus a ``<name>.meta.json`` sidecar."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        for i in range(len(ds)):
            fh.write(json.dumps(_row(ds, i), sort_keys=True))
            fh.write("\n")
    meta = {
        "schema_version": SCHEMA_VERSION,
        "schema": [list(s) for s in SCHEMA],
        "metadata": ds.metadata,
        "digest": ds.digest(),
    }
    sidecar = meta_path(path)
    sidecar.write_text(json.dumps(meta, sort_keys=True, indent=1), encoding="utf-8")
    return sidecar


def meta_path(path: str | Path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".meta.json")


def read_jsonl(path: str | Path, verify: bool = True) -> Dataset:
    path = Path(path)
    meta = json.loads(meta_path(path).read_text(encoding="utf-8"))
    if meta.get("schema_version") != SCHEMA_VERSION:
        raise SchemaMismatch(f"schema version {meta.get('schema_version')} != {SCHEMA_VERSION}")
    rows = [json.loads(line) for line in path.read_text(encoding="utf-8").splitlines() if line]
    inverse_groups = {v: k for k, v in GROUP_NAMES.items()}
    cols = {}
    for name, dtype, _ in SCHEMA:
        values = [r[name] for r in rows]
        if name == "group":
            values = [inverse_groups[v] for v in values]
        cols[name] = np.array(values, dtype=dtype) if values else np.empty(0, dtype=dtype)
    ds = Dataset(cols, meta["metadata"])
    if verify and ds.digest() != meta["digest"]:
        raise DigestMismatch(f"{path}: content digest does not match its sidecar")
    return ds


def now_iso() -> str:
    return time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime())
