"""Teacher/student GAT classifiers, disjoint-union batching and checkpoints."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .errors import ArchMismatch, CorruptCheckpoint, InvalidArch, ShapeMismatch, VersionMismatch
from .graph_builder import WindowGraph
from .layers import (
    GatLayerParams,
    JkParams,
    LinearParams,
    LstmParams,
    gat_layer,
    global_mean_pool,
    glorot,
    jk_aggregate,
    linear,
)
from .tensor import Tensor


@dataclass(frozen=True)
class ArchConfig:
    gat_layers: int
    heads: int
    hidden_channels: int
    linear_layers: int = 3
    dropout: float = 0.2
    in_dim: int = 3
    out_dim: int = 2
    jk_hidden: int | None = None
    edge_weight_attention: bool = True

    def __post_init__(self):
        for name in ("gat_layers", "heads", "hidden_channels", "linear_layers", "in_dim", "out_dim"):
            if getattr(self, name) < 1:
                raise InvalidArch(f"{name} must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise InvalidArch(f"dropout must be in [0, 1), got {self.dropout}")
        if self.jk_hidden is not None and self.jk_hidden < 1:
            raise InvalidArch("jk_hidden must be >= 1")

    @property
    def lstm_hidden(self) -> int:
        # Grows with depth x heads x channels; /16 keeps the teacher LSTM at 80 units.
        if self.jk_hidden is not None:
            return self.jk_hidden
        return max(1, self.gat_layers * self.heads * self.hidden_channels // 16)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ArchConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


TEACHER = ArchConfig(gat_layers=5, heads=8, hidden_channels=32, linear_layers=3, dropout=0.2)
STUDENT = ArchConfig(gat_layers=2, heads=4, hidden_channels=32, linear_layers=3, dropout=0.2)


@dataclass
class GraphBatch:
    """Several window graphs merged into one disjoint-union graph."""
    x: np.ndarray
    src: np.ndarray
    dst: np.ndarray
    weight: np.ndarray
    graph_index: np.ndarray
    num_graphs: int
    labels: np.ndarray

    @classmethod
    def from_graphs(cls, graphs: Sequence[WindowGraph]) -> "GraphBatch":
        if not graphs:
            raise ShapeMismatch("cannot batch zero graphs")
        offsets = np.cumsum([0] + [g.num_nodes for g in graphs[:-1]])
        src = np.concatenate([g.edges[:, 0] + o for g, o in zip(graphs, offsets)])
        dst = np.concatenate([g.edges[:, 1] + o for g, o in zip(graphs, offsets)])
        w = np.concatenate([g.edges[:, 2] for g in graphs]).astype(np.float64)
        gi = np.concatenate([np.full(g.num_nodes, i) for i, g in enumerate(graphs)])
        return cls(np.concatenate([g.x for g in graphs]), src.astype(np.int64), dst.astype(np.int64),
                   w, gi.astype(np.int64), len(graphs), np.array([g.label for g in graphs], dtype=np.int64))


class GatModel:
    """GAT stack -> LSTM jumping knowledge -> mean pool -> linear head -> 2 logits."""

    def __init__(self, arch: ArchConfig, params: dict[str, Tensor]):
        self.arch = arch
        self.params = params
        self.training = False
        self.meta: dict = {}
        expected = _param_shapes(arch)
        if list(expected) != list(params) or any(params[k].shape != s for k, s in expected.items()):
            raise ArchMismatch("parameter set does not match the architecture")

    def train(self) -> "GatModel":
        self.training = True
        return self

    def eval(self) -> "GatModel":
        self.training = False
        return self

    def parameter_count(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for k, p in self.params.items():
            p.data = state[k].copy()

    # -- structured views ----------------------------------------------------------
    def _gat(self, i: int) -> GatLayerParams:
        last = i == self.arch.gat_layers - 1
        return GatLayerParams(self.params[f"gat.{i}.weight"], self.params[f"gat.{i}.attn"],
                              self.arch.heads, concat_heads=not last, bias=self.params[f"gat.{i}.bias"])

    def _jk(self) -> JkParams:
        p = self.params
        proj = [LinearParams(p[f"jk.proj.{i}.weight"], p[f"jk.proj.{i}.bias"])
                for i in range(self.arch.gat_layers)]
        return JkParams(proj,
                        LstmParams(p["jk.fwd.w_ih"], p["jk.fwd.w_hh"], p["jk.fwd.bias"]),
                        LstmParams(p["jk.bwd.w_ih"], p["jk.bwd.w_hh"], p["jk.bwd.bias"]))

    def __call__(self, batch: GraphBatch | WindowGraph, rng: np.random.Generator | None = None) -> Tensor:
        if isinstance(batch, WindowGraph):
            batch = GraphBatch.from_graphs([batch])
        if batch.x.ndim != 2 or batch.x.shape[1] != self.arch.in_dim:
            raise ShapeMismatch(f"node features {batch.x.shape}, model expects in_dim {self.arch.in_dim}")
        arch, training = self.arch, self.training
        edges = (batch.src, batch.dst, batch.weight)
        h = Tensor(batch.x)
        reprs = []
        for i in range(arch.gat_layers):
            last = i == arch.gat_layers - 1
            # Raw 3-column features are never dropped; hidden inputs are.
            h = gat_layer(h, edges, self._gat(i), training, dropout=arch.dropout if i else 0.0,
                          rng=rng, activation=None if last else "elu")
            reprs.append(h)
        nodes = jk_aggregate(reprs, self._jk())
        z = global_mean_pool(nodes, batch.graph_index, batch.num_graphs)
        for j in range(arch.linear_layers):
            if j > 0:
                z = T.dropout(T.elu(z), arch.dropout, training, rng)
            z = linear(z, LinearParams(self.params[f"head.{j}.weight"], self.params[f"head.{j}.bias"]))
        return z


def _param_shapes(arch: ArchConfig) -> dict[str, tuple[int, ...]]:
    H, C, L = arch.heads, arch.hidden_channels, arch.gat_layers
    d_h = arch.lstm_hidden
    shapes: dict[str, tuple[int, ...]] = {}
    in_dim = arch.in_dim
    widths = []
    attn_len = 2 * C + (1 if arch.edge_weight_attention else 0)
    for i in range(L):
        shapes[f"gat.{i}.weight"] = (in_dim, H * C)
        shapes[f"gat.{i}.attn"] = (H, attn_len)
        in_dim = C if i == L - 1 else H * C
        shapes[f"gat.{i}.bias"] = (in_dim,)
        widths.append(in_dim)
    for i, w in enumerate(widths):
        shapes[f"jk.proj.{i}.weight"] = (w, C)
        shapes[f"jk.proj.{i}.bias"] = (C,)
    for d in ("fwd", "bwd"):
        shapes[f"jk.{d}.w_ih"] = (C, 4 * d_h)
        shapes[f"jk.{d}.w_hh"] = (d_h, 4 * d_h)
        shapes[f"jk.{d}.bias"] = (4 * d_h,)
    dims = [2 * d_h] + [C] * (arch.linear_layers - 1) + [arch.out_dim]
    for j in range(arch.linear_layers):
        shapes[f"head.{j}.weight"] = (dims[j], dims[j + 1])
        shapes[f"head.{j}.bias"] = (dims[j + 1],)
    return shapes


def parameter_count(arch: ArchConfig) -> int:
    return int(sum(np.prod(s) for s in _param_shapes(arch).values()))


def build_model(arch: ArchConfig, seed: int = 0) -> GatModel:
    """Glorot-uniform weights, zero biases, drawn in a fixed order from ``seed``."""
    rng = np.random.Generator(np.random.PCG64([seed, 11]))
    params: dict[str, Tensor] = {}
    C = arch.hidden_channels
    for name, shape in _param_shapes(arch).items():
        if name.endswith("bias"):
            data = np.zeros(shape)
        elif name.endswith(".attn"):
            data = glorot(rng, shape, fan_in=shape[1], fan_out=1)
        elif ".w_ih" in name or ".w_hh" in name:
            data = glorot(rng, shape, fan_in=shape[0], fan_out=shape[1] // 4)
        elif name.startswith("gat."):
            data = glorot(rng, shape, fan_in=shape[0], fan_out=C)
        else:
            data = glorot(rng, shape)
        params[name] = Tensor(data, requires_grad=True)
    return GatModel(arch, params)


def forward(model: GatModel, graph: WindowGraph | GraphBatch | Sequence[WindowGraph],
            rng: np.random.Generator | None = None) -> Tensor:
    """Logits of shape (2,) for a single graph, (B, 2) for a batch."""
    if isinstance(graph, WindowGraph):
        return T.reshape(model(graph, rng), (model.arch.out_dim,))
    if not isinstance(graph, GraphBatch):
        graph = GraphBatch.from_graphs(list(graph))
    return model(graph, rng)


# -- checkpoints --------------------------------------------------------------------

CKPT_MAGIC = b"KDGATCKP"
CKPT_VERSION = 1


def save_checkpoint(model: GatModel, meta: dict, path: Path | str) -> None:
    """Magic, version, JSON header, little-endian float64 blocks, SHA-256 trailer."""
    header = {
        "arch": model.arch.to_dict(),
        "params": [[name, list(p.shape)] for name, p in model.params.items()],
        "meta": meta,
    }
    hbytes = json.dumps(header, sort_keys=True).encode()
    body = bytearray(CKPT_MAGIC)
    body += struct.pack("<II", CKPT_VERSION, len(hbytes))
    body += hbytes
    for p in model.params.values():
        body += p.data.astype("<f8").tobytes()
    body += hashlib.sha256(body).digest()
    Path(path).write_bytes(bytes(body))


def load_checkpoint(path: Path | str, expected_arch: ArchConfig | None = None) -> GatModel:
    buf = Path(path).read_bytes()
    if len(buf) < 16 or buf[:8] != CKPT_MAGIC:
        raise CorruptCheckpoint(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack_from("<II", buf, 8)
    if version != CKPT_VERSION:
        raise VersionMismatch(f"{path}: checkpoint version {version}, expected {CKPT_VERSION}")
    if len(buf) < 16 + hlen + 32 or hashlib.sha256(buf[:-32]).digest() != buf[-32:]:
        raise CorruptCheckpoint(f"{path}: integrity hash mismatch (truncated or modified)")
    try:
        header = json.loads(buf[16:16 + hlen])
        arch = ArchConfig.from_dict(header["arch"])
    except (ValueError, KeyError, TypeError) as exc:
        raise CorruptCheckpoint(f"{path}: unreadable header ({exc})") from None
    if expected_arch is not None and arch != expected_arch:
        raise ArchMismatch(f"{path}: checkpoint holds {arch}, expected {expected_arch}")
    pos = 16 + hlen
    params = {}
    for name, shape in header["params"]:
        n = int(np.prod(shape))
        if pos + 8 * n > len(buf) - 32:
            raise CorruptCheckpoint(f"{path}: parameter block {name} truncated")
        params[name] = Tensor(np.frombuffer(buf, "<f8", n, pos).reshape(shape), requires_grad=True)
        pos += 8 * n
    if pos != len(buf) - 32:
        raise CorruptCheckpoint(f"{path}: unexpected trailing data")
    model = GatModel(arch, params)
    model.meta = header.get("meta", {})
    return model.eval()
