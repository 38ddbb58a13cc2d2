"""Sliding-window graphs over CAN message streams.

Each complete window of ``W`` messages becomes one graph: a node per distinct
CAN id (ascending id order), node features ``[id / 2047, count / W,
mean payload]``, and a directed edge ``j -> k`` weighted by how often a
message of id ``j`` is immediately followed by one of id ``k``. A window is
labeled 1 when any of its messages is an attack.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .can_ingest import MAX_ID, CanMessage, Label
from .errors import EmptyTrace, GraphFileError, IdNotInWindow, WindowTooSmall

PAYLOAD_SCALE = 8 * 255


@dataclass
class WindowGraph:
    node_ids: np.ndarray   # (n,) int, ascending
    x: np.ndarray          # (n, 3) float64
    edges: np.ndarray      # (m, 3) int64 rows of (src, dst, weight)
    label: int
    window_start_index: int = 0
    unknown_count: int = 0

    @property
    def num_nodes(self) -> int:
        return int(self.node_ids.shape[0])

    @property
    def num_edges(self) -> int:
        return int(self.edges.shape[0])

    def permuted(self, perm: np.ndarray) -> "WindowGraph":
        """Same graph with node ``i`` moved to position ``perm[i]``."""
        perm = np.asarray(perm)
        inv = np.argsort(perm)
        edges = self.edges.copy()
        edges[:, 0] = perm[edges[:, 0]]
        edges[:, 1] = perm[edges[:, 1]]
        return WindowGraph(self.node_ids[inv], self.x[inv], edges, self.label,
                           self.window_start_index, self.unknown_count)

    def __eq__(self, other) -> bool:
        if not isinstance(other, WindowGraph):
            return NotImplemented
        return (np.array_equal(self.node_ids, other.node_ids)
                and np.array_equal(self.x, other.x)
                and np.array_equal(self.edges, other.edges)
                and self.label == other.label
                and self.window_start_index == other.window_start_index
                and self.unknown_count == other.unknown_count)


def payload_scalar(payload: Sequence[int]) -> float:
    """Byte sum over 8 * 255; short payloads are not padded."""
    return float(sum(payload)) / PAYLOAD_SCALE


def node_features(window: Sequence[CanMessage], can_id: int) -> np.ndarray:
    values = [payload_scalar(m.payload) for m in window if m.can_id == can_id]
    if not values:
        raise IdNotInWindow(f"id {can_id:#x} does not occur in the window")
    return np.array([can_id / MAX_ID, len(values) / len(window), sum(values) / len(values)])


def label_window(window: Sequence[CanMessage]) -> int:
    """1 iff any message is an attack; Unknown counts as benign."""
    return int(any(m.label is Label.ATTACK for m in window))


def _window_arrays(messages: Sequence[CanMessage]):
    ids = np.fromiter((m.can_id for m in messages), dtype=np.int64, count=len(messages))
    scal = np.fromiter((sum(m.payload) for m in messages), dtype=np.float64,
                       count=len(messages)) / PAYLOAD_SCALE
    attack = np.fromiter((m.label is Label.ATTACK for m in messages), dtype=bool, count=len(messages))
    unknown = np.fromiter((m.label is Label.UNKNOWN for m in messages), dtype=bool, count=len(messages))
    return ids, scal, attack, unknown


def _graph_from_arrays(ids, scal, attack, unknown, start: int) -> WindowGraph:
    w = ids.shape[0]
    node_ids, local, counts = np.unique(ids, return_inverse=True, return_counts=True)
    n = node_ids.shape[0]
    payload_sum = np.bincount(local, weights=scal, minlength=n)
    x = np.column_stack([node_ids / MAX_ID, counts / w, payload_sum / counts])
    pair = local[:-1] * n + local[1:]
    keys, weights = np.unique(pair, return_counts=True)
    edges = np.column_stack([keys // n, keys % n, weights]).astype(np.int64)
    return WindowGraph(node_ids.astype(np.int64), x, edges, int(attack.any()), start, int(unknown.sum()))


def build_windows(messages: Sequence[CanMessage], window: int = 50, stride: int = 50) -> list[WindowGraph]:
    """One graph per complete window; a trailing partial window is dropped."""
    if window < 2:
        raise WindowTooSmall(f"window must be >= 2, got {window}")
    if stride < 1:
        raise WindowTooSmall(f"stride must be >= 1, got {stride}")
    if len(messages) == 0:
        raise EmptyTrace("no messages to window")
    ids, scal, attack, unknown = _window_arrays(messages)
    return [
        _graph_from_arrays(ids[s:s + window], scal[s:s + window], attack[s:s + window],
                           unknown[s:s + window], s)
        for s in range(0, len(messages) - window + 1, stride)
    ]


# -- graph dataset files ------------------------------------------------------------

MAGIC = b"KDGATGRF"
VERSION = 1


@dataclass
class GraphDataset:
    graphs: list[WindowGraph]
    window: int
    stride: int
    meta: dict

    def __len__(self) -> int:
        return len(self.graphs)


def write_graphs(path: Path | str, graphs: Sequence[WindowGraph], window: int, stride: int,
                 meta: dict | None = None) -> None:
    """Little-endian binary layout, versioned by a magic header."""
    meta_bytes = json.dumps(meta or {}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<HIIQI", VERSION, window, stride, len(graphs), len(meta_bytes)))
        fh.write(meta_bytes)
        for g in graphs:
            fh.write(struct.pack("<IIBQI", g.num_nodes, g.num_edges, g.label,
                                 g.window_start_index, g.unknown_count))
            fh.write(g.node_ids.astype("<u2").tobytes())
            fh.write(g.x.astype("<f8").tobytes())
            fh.write(g.edges.astype("<u4").tobytes())


def read_graphs(path: Path | str) -> GraphDataset:
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise GraphFileError(f"cannot read {path}: {exc}") from exc
    if buf[:8] != MAGIC:
        raise GraphFileError(f"{path}: not a graph dataset file")
    try:
        version, window, stride, count, meta_len = struct.unpack_from("<HIIQI", buf, 8)
        if version != VERSION:
            raise GraphFileError(f"{path}: unsupported graph file version {version}")
        pos = 8 + struct.calcsize("<HIIQI")
        meta = json.loads(buf[pos:pos + meta_len])
        pos += meta_len
        graphs = []
        rec = struct.calcsize("<IIBQI")
        for _ in range(count):
            n, m, label, start, unknown = struct.unpack_from("<IIBQI", buf, pos)
            pos += rec
            ids = np.frombuffer(buf, "<u2", n, pos).astype(np.int64)
            pos += 2 * n
            x = np.frombuffer(buf, "<f8", 3 * n, pos).reshape(n, 3).copy()
            pos += 24 * n
            edges = np.frombuffer(buf, "<u4", 3 * m, pos).reshape(m, 3).astype(np.int64)
            pos += 12 * m
            graphs.append(WindowGraph(ids, x, edges, int(label), int(start), int(unknown)))
    except (struct.error, ValueError) as exc:
        raise GraphFileError(f"{path}: truncated or corrupt graph file ({exc})") from None
    if pos != len(buf):
        raise GraphFileError(f"{path}: {len(buf) - pos} trailing bytes")
    return GraphDataset(graphs, window, stride, meta)


def write_graphs_text(path: Path | str, graphs: Sequence[WindowGraph], window: int, stride: int) -> None:
    """Human-readable dump; floats use repr so the text form is lossless."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"kdgat-graphs v{VERSION} window={window} stride={stride} count={len(graphs)}\n")
        for i, g in enumerate(graphs):
            fh.write(f"graph {i} label={g.label} start={g.window_start_index} "
                     f"unknown={g.unknown_count} nodes={g.num_nodes} edges={g.num_edges}\n")
            fh.write("ids " + " ".join(f"{v:03X}" for v in g.node_ids) + "\n")
            for row in g.x:
                fh.write("x " + " ".join(repr(float(v)) for v in row) + "\n")
            fh.write("e " + " ".join(f"{s}:{d}:{w}" for s, d, w in g.edges) + "\n")


def read_graphs_text(path: Path | str) -> GraphDataset:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    head = dict(tok.split("=") for tok in lines[0].split()[2:])
    graphs, i = [], 1
    while i < len(lines):
        info = dict(tok.split("=") for tok in lines[i].split()[2:])
        n = int(info["nodes"])
        ids = np.array([int(t, 16) for t in lines[i + 1].split()[1:]], dtype=np.int64)
        x = np.array([[float(t) for t in lines[i + 2 + r].split()[1:]] for r in range(n)]).reshape(n, 3)
        etoks = lines[i + 2 + n].split()[1:]
        edges = np.array([[int(v) for v in t.split(":")] for t in etoks], dtype=np.int64).reshape(-1, 3)
        graphs.append(WindowGraph(ids, x, edges, int(info["label"]), int(info["start"]), int(info["unknown"])))
        i += 3 + n
    return GraphDataset(graphs, int(head["window"]), int(head["stride"]), {})
