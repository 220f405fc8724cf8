"""Flow datasets, on-disk format, normalization, splitting and windowing."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

GRID = "grid"
GRAPH = "graph"


class DatasetError(ValueError):
    """Raised when a dataset (in memory or on disk) violates its invariants."""


@dataclass(frozen=True)
class GridSpec:
    height: int
    width: int

    def __post_init__(self):
        if self.height < 1 or self.width < 1:
            raise DatasetError(f"grid dimensions must be positive, got {self.height}x{self.width}")


@dataclass(frozen=True)
class GraphTopology:
    num_nodes: int
    edges: tuple  # tuple of (i, j) pairs

    def __post_init__(self):
        if self.num_nodes < 1:
            raise DatasetError("graph needs at least one node")
        seen = set()
        for i, j in self.edges:
            if not (0 <= i < self.num_nodes and 0 <= j < self.num_nodes):
                raise DatasetError(f"edge ({i}, {j}) out of range for {self.num_nodes} nodes")
            if i == j:
                raise DatasetError(f"self-loop at node {i}")
            key = (min(i, j), max(i, j))
            if key in seen:
                raise DatasetError(f"duplicate edge {key}")
            seen.add(key)

    @classmethod
    def from_edges(cls, num_nodes: int, edges) -> "GraphTopology":
        return cls(int(num_nodes), tuple((int(i), int(j)) for i, j in edges))

    def neighbors(self) -> list[list[int]]:
        adj: list[list[int]] = [[] for _ in range(self.num_nodes)]
        for i, j in self.edges:
            adj[i].append(j)
            adj[j].append(i)
        for row in adj:
            row.sort()
        return adj

    def adjacency(self) -> np.ndarray:
        a = np.zeros((self.num_nodes, self.num_nodes), dtype=np.float64)
        for i, j in self.edges:
            a[i, j] = a[j, i] = 1.0
        return a


@dataclass(frozen=True)
class DatasetMeta:
    interval: str
    mean: float
    std: float
    min: float
    max: float

    @classmethod
    def describe(cls, values: np.ndarray, interval: str = "1step") -> "DatasetMeta":
        v = np.asarray(values, dtype=np.float64)
        return cls(interval, float(v.mean()), float(v.std()), float(v.min()), float(v.max()))


@dataclass(frozen=True)
class TaskSpec:
    """History length H and horizon length P, in timesteps."""

    history_len: int
    horizon_len: int

    def __post_init__(self):
        if self.history_len < 1 or self.horizon_len < 0:
            raise ValueError(f"invalid task {self.history_len}->{self.horizon_len}")

    @property
    def window_len(self) -> int:
        return self.history_len + self.horizon_len


SHORT_TERM = TaskSpec(12, 12)
LONG_TERM = TaskSpec(64, 64)


@dataclass(frozen=True)
class Normalizer:
    """Min-max map of [lo, hi] onto [0, 1]."""

    lo: float
    hi: float

    def __post_init__(self):
        if not (math.isfinite(self.lo) and math.isfinite(self.hi)) or self.hi <= self.lo:
            raise DatasetError(f"degenerate normalization range [{self.lo}, {self.hi}]")

    @classmethod
    def fit(cls, values) -> "Normalizer":
        v = np.asarray(values, dtype=np.float64)
        return cls(float(v.min()), float(v.max()))

    @property
    def scale(self) -> float:
        return self.hi - self.lo

    def transform(self, x):
        return (np.asarray(x, dtype=np.float64) - self.lo) / self.scale

    def inverse_transform(self, y):
        return np.asarray(y, dtype=np.float64) * self.scale + self.lo


@dataclass(frozen=True, eq=False)
class FlowDataset:
    name: str
    kind: str
    values: np.ndarray  # T x N x C
    meta: DatasetMeta
    grid_spec: Optional[GridSpec] = None
    topology: Optional[GraphTopology] = None
    normalizer: Optional[Normalizer] = None

    def __post_init__(self):
        v = self.values
        if v.ndim != 3:
            raise DatasetError(f"values must be T x N x C, got shape {v.shape}")
        T, N, C = v.shape
        if min(T, N, C) < 1:
            raise DatasetError(f"empty dimension in shape {v.shape}")
        if self.kind == GRID:
            if self.grid_spec is None:
                raise DatasetError("grid dataset requires a grid spec")
            if self.grid_spec.height * self.grid_spec.width != N:
                raise DatasetError(
                    f"grid {self.grid_spec.height}x{self.grid_spec.width} does not match N={N}"
                )
        elif self.kind == GRAPH:
            if self.topology is None:
                raise DatasetError("graph dataset requires a topology")
            if self.topology.num_nodes != N:
                raise DatasetError(f"topology has {self.topology.num_nodes} nodes, values have N={N}")
        else:
            raise DatasetError(f"unknown dataset kind {self.kind!r}")
        if not np.all(np.isfinite(v)):
            raise DatasetError(f"dataset {self.name!r} contains non-finite values")

    @property
    def shape(self) -> tuple:
        return self.values.shape

    @property
    def T(self) -> int:
        return self.values.shape[0]

    @property
    def N(self) -> int:
        return self.values.shape[1]

    @property
    def C(self) -> int:
        return self.values.shape[2]


# ---------------------------------------------------------------------------
# on-disk format

META_FILE = "meta.json"
VALUES_FILE = "values.f32"
EDGES_FILE = "edges.jsonl"


def save_dataset(dataset: FlowDataset, path) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    T, N, C = dataset.shape
    meta = {
        "name": dataset.name,
        "kind": dataset.kind,
        "T": T,
        "N": N,
        "C": C,
        "interval": dataset.meta.interval,
        "mean": dataset.meta.mean,
        "std": dataset.meta.std,
        "min": dataset.meta.min,
        "max": dataset.meta.max,
    }
    if dataset.kind == GRID:
        meta["H"] = dataset.grid_spec.height
        meta["W"] = dataset.grid_spec.width
    else:
        meta["num_nodes"] = dataset.topology.num_nodes
    if dataset.normalizer is not None:
        meta["normalizer"] = {"lo": dataset.normalizer.lo, "hi": dataset.normalizer.hi}
    (path / META_FILE).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    np.ascontiguousarray(dataset.values, dtype="<f4").tofile(path / VALUES_FILE)
    if dataset.kind == GRAPH:
        with open(path / EDGES_FILE, "w", encoding="utf-8") as fh:
            for i, j in dataset.topology.edges:
                fh.write(f"[{i}, {j}]\n")
    return path


def load_dataset(path) -> FlowDataset:
    path = Path(path)
    meta_path = path / META_FILE
    blob_path = path / VALUES_FILE
    for p in (meta_path, blob_path):
        if not p.is_file():
            raise DatasetError(f"missing dataset file {p}")
    meta = json.loads(meta_path.read_text(encoding="utf-8"))
    T, N, C = int(meta["T"]), int(meta["N"]), int(meta["C"])
    raw = np.fromfile(blob_path, dtype="<f4")
    if raw.size != T * N * C:
        raise DatasetError(f"values blob holds {raw.size} floats, meta declares {T}x{N}x{C}")
    values = raw.reshape(T, N, C).astype(np.float32, copy=False)
    if not np.all(np.isfinite(values)):
        raise DatasetError(f"non-finite values in {blob_path}")

    kind = meta["kind"]
    grid_spec = topology = None
    if kind == GRID:
        grid_spec = GridSpec(int(meta["H"]), int(meta["W"]))
    elif kind == GRAPH:
        edges_path = path / EDGES_FILE
        if not edges_path.is_file():
            raise DatasetError(f"missing dataset file {edges_path}")
        edges = []
        with open(edges_path, encoding="utf-8") as fh:
            for line in fh:
                if line.strip():
                    edges.append(tuple(json.loads(line)))
        topology = GraphTopology.from_edges(int(meta.get("num_nodes", N)), edges)
    norm = meta.get("normalizer")
    return FlowDataset(
        name=meta["name"],
        kind=kind,
        values=values,
        meta=DatasetMeta(
            meta.get("interval", "1step"),
            float(meta["mean"]),
            float(meta["std"]),
            float(meta["min"]),
            float(meta["max"]),
        ),
        grid_spec=grid_spec,
        topology=topology,
        normalizer=Normalizer(norm["lo"], norm["hi"]) if norm else None,
    )


# ---------------------------------------------------------------------------
# preprocessing


def split_622(dataset_or_T) -> tuple[range, range, range]:
    """Temporally ordered 60/20/20 split of ``[0, T)``."""
    T = dataset_or_T if isinstance(dataset_or_T, int) else dataset_or_T.T
    n_train = int(math.floor(0.6 * T))
    n_val = int(math.floor(0.2 * T))
    n_test = T - n_train - n_val
    if min(n_train, n_val, n_test) < 1:
        raise DatasetError(f"T={T} is too short for a 6:2:2 split")
    return (
        range(0, n_train),
        range(n_train, n_train + n_val),
        range(n_train + n_val, T),
    )


def normalize(dataset: FlowDataset, fit_range: Optional[range] = None) -> tuple[FlowDataset, Normalizer]:
    """Min-max scale ``dataset`` to [0, 1].

    The statistics come from ``fit_range`` (all timesteps when omitted).
    Timesteps outside the fitting range may fall outside [0, 1].
    """
    fit_values = dataset.values if fit_range is None else dataset.values[fit_range.start:fit_range.stop]
    norm = Normalizer.fit(fit_values)
    scaled = norm.transform(dataset.values)
    out = replace(dataset, values=scaled, normalizer=norm)
    return out, norm


def denormalize(values, normalizer: Normalizer) -> np.ndarray:
    return normalizer.inverse_transform(values)


def window_count(range_len: int, task: TaskSpec) -> int:
    return range_len - task.window_len + 1


def window_samples(dataset: FlowDataset, task: TaskSpec, time_range: range) -> "WindowSet":
    return WindowSet(dataset.values, task, time_range)


class WindowSet(Sequence):
    """Stride-1 sliding windows confined to ``time_range``.

    Items are ``(history, future)`` pairs of shape ``(H, N, C)`` and ``(P, N, C)``.
    ``windows`` exposes all windows at once as a zero-copy ``(count, H+P, N, C)`` view.
    """

    def __init__(self, values: np.ndarray, task: TaskSpec, time_range: range):
        n = len(time_range)
        if window_count(n, task) < 1:
            raise DatasetError(
                f"range of length {n} cannot hold a {task.history_len}->{task.horizon_len} window"
            )
        self.task = task
        self.time_range = time_range
        seg = values[time_range.start:time_range.stop]
        view = np.lib.stride_tricks.sliding_window_view(seg, task.window_len, axis=0)
        # sliding_window_view appends the window axis last
        self.windows = np.moveaxis(view, -1, 1)

    def __len__(self) -> int:
        return self.windows.shape[0]

    def __getitem__(self, idx):
        if isinstance(idx, slice):
            return [self[i] for i in range(*idx.indices(len(self)))]
        w = self.windows[idx]
        H = self.task.history_len
        return w[:H], w[H:]

    def batch(self, indices) -> np.ndarray:
        return np.ascontiguousarray(self.windows[np.asarray(indices)])
