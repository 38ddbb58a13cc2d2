"""GAT layer, LSTM jumping-knowledge aggregator, pooling and losses."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import (
    EdgeIndexOutOfRange,
    EmptyGraph,
    EmptyLayerList,
    InvalidLabel,
    NonPositiveTemperature,
    ProbabilityOutOfRange,
    ShapeMismatch,
)
from .tensor import Tensor

LEAKY_SLOPE = 0.2


@dataclass
class LinearParams:
    weight: Tensor  # (in, out)
    bias: Tensor    # (out,)


@dataclass
class GatLayerParams:
    weight: Tensor  # (in_dim, heads * head_dim)
    attn: Tensor    # (heads, 2 * head_dim [+ 1 edge slot])
    heads: int
    concat_heads: bool = True
    bias: Tensor | None = None  # (out_dim,), added before the activation

    @property
    def head_dim(self) -> int:
        return self.weight.shape[1] // self.heads

    @property
    def uses_edge_weight(self) -> bool:
        return self.attn.shape[1] == 2 * self.head_dim + 1

    @property
    def out_dim(self) -> int:
        return self.weight.shape[1] if self.concat_heads else self.head_dim


@dataclass
class LstmParams:
    w_ih: Tensor  # (d_in, 4 * d_h), gate order i, f, g, o
    w_hh: Tensor  # (d_h, 4 * d_h)
    bias: Tensor  # (4 * d_h,)

    @property
    def hidden(self) -> int:
        return self.w_hh.shape[0]


@dataclass
class JkParams:
    proj: list[LinearParams]
    fwd: LstmParams
    bwd: LstmParams


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 0.5
    tau: float = 2.0
    gamma: float = 1.0
    use_focal: bool = False

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.tau <= 0:
            raise NonPositiveTemperature(f"tau must be > 0, got {self.tau}")
        if self.gamma < 0:
            raise ValueError(f"gamma must be >= 0, got {self.gamma}")


def linear(x, p: LinearParams) -> Tensor:
    return T.matmul(x, p.weight) + p.bias


# -- graph attention -------------------------------------------------------------

def as_edge_arrays(edges) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Accept an (m, 3) array of (src, dst, weight) or a (src, dst, weight) triple."""
    if isinstance(edges, tuple) and len(edges) == 3:
        src, dst, w = (np.asarray(e) for e in edges)
    else:
        arr = np.asarray(edges)
        if arr.size == 0:
            arr = arr.reshape(0, 3)
        if arr.ndim != 2 or arr.shape[1] != 3:
            raise ShapeMismatch(f"edge list must be (m, 3), got {arr.shape}")
        src, dst, w = arr[:, 0], arr[:, 1], arr[:, 2]
    return src.astype(np.int64), dst.astype(np.int64), w.astype(np.float64)


def add_self_loops(num_nodes: int, src, dst, weight):
    """Append a weight-1 self-loop to every node that lacks one."""
    has_loop = np.zeros(num_nodes, dtype=bool)
    has_loop[src[src == dst]] = True
    missing = np.flatnonzero(~has_loop)
    if missing.size == 0:
        return src, dst, weight
    return (np.concatenate([src, missing]), np.concatenate([dst, missing]),
            np.concatenate([weight, np.ones(missing.size)]))


def gat_layer(x, edges, params: GatLayerParams, training: bool = False, *,
              dropout: float = 0.0, rng: np.random.Generator | None = None,
              activation: str | None = "elu", return_attention: bool = False):
    """One multi-head graph attention layer over incoming-edge neighbourhoods.

    Returns node embeddings, plus per-edge attention (E, heads) and the
    (src, dst) arrays it refers to when ``return_attention`` is set.
    """
    x = T.as_tensor(x)
    if x.ndim != 2 or x.shape[1] != params.weight.shape[0]:
        raise ShapeMismatch(f"gat_layer expects (n, {params.weight.shape[0]}), got {x.shape}")
    n = x.shape[0]
    src, dst, w = as_edge_arrays(edges)
    if src.size and (min(src.min(), dst.min()) < 0 or max(src.max(), dst.max()) >= n):
        raise EdgeIndexOutOfRange(f"edge endpoint outside [0, {n})")
    src, dst, w = add_self_loops(n, src, dst, w)

    H, C = params.heads, params.head_dim
    h = T.dropout(x, dropout, training, rng)
    wh = T.reshape(T.matmul(h, params.weight), (n, H, C))
    a_dst = params.attn[:, :C]
    a_src = params.attn[:, C:2 * C]
    s_dst = T.sum(wh * a_dst, axis=-1)          # (n, H)
    s_src = T.sum(wh * a_src, axis=-1)
    scores = T.take_rows(s_dst, dst) + T.take_rows(s_src, src)
    if params.uses_edge_weight:
        scores = scores + T.Tensor(np.log1p(w)[:, None]) * params.attn[:, 2 * C]
    scores = T.leaky_relu(scores, LEAKY_SLOPE)
    alpha = T.segment_softmax(scores, dst, n)   # (E, H)
    msg = T.take_rows(wh, src) * T.reshape(alpha, (alpha.shape[0], H, 1))
    out = T.segment_sum(msg, dst, n)            # (n, H, C)
    out = T.reshape(out, (n, H * C)) if params.concat_heads else T.mean(out, axis=1)
    if params.bias is not None:
        out = out + params.bias
    if activation == "elu":
        out = T.elu(out)
    elif activation is not None:
        raise ValueError(f"unknown activation {activation!r}")
    if return_attention:
        return out, alpha, (src, dst)
    return out


# -- LSTM and jumping knowledge ------------------------------------------------------

def lstm_cell(x_t, h_prev, c_prev, params: LstmParams) -> tuple[Tensor, Tensor]:
    x_t, h_prev, c_prev = T.as_tensor(x_t), T.as_tensor(h_prev), T.as_tensor(c_prev)
    d = params.hidden
    vector = x_t.ndim == 1
    if vector:
        x_t, h_prev, c_prev = (T.reshape(v, (1, -1)) for v in (x_t, h_prev, c_prev))
    if x_t.shape[1] != params.w_ih.shape[0] or h_prev.shape[1] != d or c_prev.shape != h_prev.shape:
        raise ShapeMismatch(
            f"lstm_cell: x {x_t.shape}, h {h_prev.shape}, c {c_prev.shape} for d_in="
            f"{params.w_ih.shape[0]}, d_h={d}")
    gates = T.matmul(x_t, params.w_ih) + T.matmul(h_prev, params.w_hh) + params.bias
    i = T.sigmoid(gates[:, 0:d])
    f = T.sigmoid(gates[:, d:2 * d])
    g = T.tanh(gates[:, 2 * d:3 * d])
    o = T.sigmoid(gates[:, 3 * d:4 * d])
    c_t = f * c_prev + i * g
    h_t = o * T.tanh(c_t)
    if vector:
        return T.reshape(h_t, (d,)), T.reshape(c_t, (d,))
    return h_t, c_t


def _run_lstm(seq: list[Tensor], params: LstmParams) -> Tensor:
    n = seq[0].shape[0]
    h = c = T.Tensor(np.zeros((n, params.hidden)))
    for x_t in seq:
        h, c = lstm_cell(x_t, h, c, params)
    return h


def jk_aggregate(layer_reprs: list, params: JkParams) -> Tensor:
    """Bidirectional LSTM over each node's per-layer representations.

    Every layer output is first projected to a common width. The result is
    the forward state after layer L concatenated with the backward state
    after layer 1, shape (n, 2 * d_h).
    """
    if not layer_reprs:
        raise EmptyLayerList("jk_aggregate needs at least one layer")
    if len(layer_reprs) != len(params.proj):
        raise ShapeMismatch(f"{len(layer_reprs)} layers but {len(params.proj)} projections")
    n = layer_reprs[0].shape[0]
    if any(r.shape[0] != n for r in layer_reprs):
        raise ShapeMismatch("layer representations disagree on node count")
    seq = [linear(r, p) for r, p in zip(layer_reprs, params.proj)]
    fwd = _run_lstm(seq, params.fwd)
    bwd = _run_lstm(seq[::-1], params.bwd)
    return T.concat([fwd, bwd], axis=1)


def global_mean_pool(x, batch: np.ndarray | None = None, num_graphs: int | None = None) -> Tensor:
    x = T.as_tensor(x)
    if x.shape[0] == 0:
        raise EmptyGraph("cannot pool a graph with no nodes")
    if batch is None:
        return T.mean(x, axis=0)
    batch = np.asarray(batch, dtype=np.int64)
    if num_graphs is None:
        num_graphs = int(batch.max()) + 1
    counts = np.bincount(batch, minlength=num_graphs).astype(np.float64)
    if (counts == 0).any():
        raise EmptyGraph("a graph in the batch has no nodes")
    return T.segment_sum(x, batch, num_graphs) * (1.0 / counts)[:, None]


# -- losses ---------------------------------------------------------------------

def soften(logits, tau: float):
    """Temperature-scaled softmax; works on arrays and Tensors."""
    if tau <= 0:
        raise NonPositiveTemperature(f"tau must be > 0, got {tau}")
    if isinstance(logits, Tensor):
        return T.softmax(logits * (1.0 / tau), axis=-1)
    return T.np_softmax(np.asarray(logits, dtype=np.float64) / tau, axis=-1)


def focal_loss(p_t, gamma: float):
    """-(1 - p_t)^gamma * log(p_t) for the probability of the true class."""
    if gamma < 0:
        raise ValueError(f"gamma must be >= 0, got {gamma}")
    if isinstance(p_t, Tensor):
        if (p_t.data <= 0).any() or (p_t.data > 1).any():
            raise ProbabilityOutOfRange("p_t must lie in (0, 1]")
        return -(_modulator(p_t, gamma) * T.log(p_t))
    p = np.asarray(p_t, dtype=np.float64)
    if (p <= 0).any() or (p > 1).any():
        raise ProbabilityOutOfRange("p_t must lie in (0, 1]")
    out = -((1.0 - p) ** gamma) * np.log(p)
    return float(out) if out.ndim == 0 else out


def _modulator(p_t: Tensor, gamma: float):
    if gamma == 0:
        return 1.0
    return T.power(1.0 - p_t, gamma)


def _check_labels(y, batch: int) -> np.ndarray:
    y = np.asarray(y).reshape(-1)
    if y.shape[0] != batch:
        raise InvalidLabel(f"{y.shape[0]} labels for {batch} logit rows")
    if not np.isin(y, (0, 1)).all():
        raise InvalidLabel("labels must be 0 or 1")
    return y.astype(np.int64)


def _as_rows(logits) -> Tensor:
    logits = T.as_tensor(logits)
    if logits.ndim == 1:
        logits = T.reshape(logits, (1, -1))
    if logits.ndim != 2 or logits.shape[1] != 2:
        raise ShapeMismatch(f"expected 2 logits per row, got {logits.shape}")
    return logits


def hard_loss(logits, y, gamma: float | None = None) -> Tensor:
    """Mean softmax cross-entropy over two classes; focal-modulated when gamma is set."""
    logits = _as_rows(logits)
    y = _check_labels(y, logits.shape[0])
    logp = T.log_softmax(logits, axis=1)
    logp_t = logp[np.arange(y.size), y]
    if gamma is None:
        per = -logp_t
    else:
        per = -(_modulator(T.exp(logp_t), gamma) * logp_t)
    return T.mean(per)


def kd_loss(student_logits, teacher_logits, y, cfg: LossConfig) -> Tensor:
    """alpha * hard + (1 - alpha) * tau^2 * KL(teacher_soft || student_soft).

    Teacher logits are taken as constants.
    """
    s = _as_rows(student_logits)
    t = teacher_logits.data if isinstance(teacher_logits, Tensor) else np.asarray(teacher_logits, dtype=np.float64)
    t = t.reshape(-1, 2)
    if t.shape[0] != s.shape[0]:
        raise ShapeMismatch(f"student rows {s.shape[0]} vs teacher rows {t.shape[0]}")
    hard = hard_loss(s, y, cfg.gamma if cfg.use_focal else None)
    q = T.np_softmax(t / cfg.tau, axis=1)
    log_q = T.np_log_softmax(t / cfg.tau, axis=1)
    log_p = T.log_softmax(s * (1.0 / cfg.tau), axis=1)
    kl = T.sum(T.Tensor(q) * (T.Tensor(log_q) - log_p), axis=1)
    soft = T.mean(kl) * (cfg.tau ** 2)
    return hard * cfg.alpha + soft * (1.0 - cfg.alpha)


def glorot(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int | None = None,
           fan_out: int | None = None) -> np.ndarray:
    fan_in = shape[0] if fan_in is None else fan_in
    fan_out = shape[-1] if fan_out is None else fan_out
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)
