"""Adam training for the teacher and two-stage distillation of the student."""
from __future__ import annotations

import csv
import dataclasses
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .errors import EmptyDataset, ShapeMismatch, SingleClassDataset
from .graph_builder import WindowGraph
from .layers import LossConfig, hard_loss, kd_loss
from .model import STUDENT, TEACHER, ArchConfig, GatModel, GraphBatch, build_model

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 5e-4
    batch_size: int = 128
    epochs: int = 100
    warmup_epochs: int = 5
    alpha: float = 0.5
    tau: float = 2.0
    gamma_focal: float = 1.0
    use_focal: bool = False
    window: int = 50
    stride: int = 50
    val_fraction: float = 0.2
    seed: int = 0
    split: str = "stratified"         # or "chronological"
    select_metric: str = "accuracy"   # or "f1"
    clip_norm: float | None = None

    def __post_init__(self):
        if not 0.0 < self.val_fraction < 1.0:
            raise ValueError(f"val_fraction must be in (0, 1), got {self.val_fraction}")
        if self.split not in ("stratified", "chronological"):
            raise ValueError(f"unknown split {self.split!r}")
        if self.select_metric not in ("accuracy", "f1"):
            raise ValueError(f"unknown selection metric {self.select_metric!r}")
        if self.epochs < 0 or self.warmup_epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs, warmup_epochs must be >= 0 and batch_size >= 1")

    def loss_config(self) -> LossConfig:
        return LossConfig(self.alpha, self.tau, self.gamma_focal, self.use_focal)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


# -- Adam ------------------------------------------------------------------------

@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(params: dict[str, T.Tensor], grads: dict[str, np.ndarray], state: AdamState,
              lr: float, betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8) -> AdamState:
    """Bias-corrected Adam update applied in place to ``params``."""
    b1, b2 = betas
    state.t += 1
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.data.shape:
            raise ShapeMismatch(f"grad for {name}: {g.shape} vs {p.data.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return state


def _clip(grads: dict[str, np.ndarray], max_norm: float) -> None:
    total = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if total > max_norm:
        scale = max_norm / (total + 1e-12)
        for k in grads:
            grads[k] = grads[k] * scale


# -- data handling -----------------------------------------------------------------

def split_indices(labels: np.ndarray, cfg: TrainConfig) -> tuple[np.ndarray, np.ndarray]:
    n = labels.shape[0]
    if cfg.split == "chronological":
        cut = n - max(1, int(round(n * cfg.val_fraction)))
        return np.arange(cut), np.arange(cut, n)
    rng = np.random.Generator(np.random.PCG64([cfg.seed, 21]))
    train, val = [], []
    for cls in (0, 1):
        idx = np.flatnonzero(labels == cls)
        idx = idx[rng.permutation(idx.size)]
        k = int(round(idx.size * cfg.val_fraction))
        val.append(idx[:k])
        train.append(idx[k:])
    return np.sort(np.concatenate(train)), np.sort(np.concatenate(val))


def _check_dataset(graphs: Sequence[WindowGraph], cfg: TrainConfig):
    if not graphs:
        raise EmptyDataset("no graphs to train on")
    labels = np.array([g.label for g in graphs])
    train_idx, val_idx = split_indices(labels, cfg)
    if np.unique(labels[train_idx]).size < 2:
        raise SingleClassDataset("training split must contain both benign and attack windows")
    if val_idx.size == 0:
        raise EmptyDataset("validation split is empty")
    return labels, train_idx, val_idx


def _batches(indices: np.ndarray, batch_size: int):
    for s in range(0, indices.size, batch_size):
        yield indices[s:s + batch_size]


def predict_logits(model: GatModel, graphs: Sequence[WindowGraph], batch_size: int = 128) -> np.ndarray:
    """Eval-mode logits for every graph, computed in fixed-size batches."""
    was = model.training
    model.eval()
    out = []
    with T.no_grad():
        for s in range(0, len(graphs), batch_size):
            out.append(model(GraphBatch.from_graphs(graphs[s:s + batch_size])).data)
    model.training = was
    return np.concatenate(out) if out else np.zeros((0, 2))


def _val_scores(logits: np.ndarray, labels: np.ndarray) -> tuple[float, float]:
    pred = (logits[:, 1] > logits[:, 0]).astype(int)
    tp = int(np.sum((pred == 1) & (labels == 1)))
    fp = int(np.sum((pred == 1) & (labels == 0)))
    fn = int(np.sum((pred == 0) & (labels == 1)))
    acc = float(np.mean(pred == labels))
    f1 = 2 * tp / (2 * tp + fp + fn) if tp else 0.0
    return acc, f1


# -- history -----------------------------------------------------------------------

@dataclass
class EpochRecord:
    epoch: int
    stage: str
    train_loss: float
    val_loss: float
    val_acc: float
    val_f1: float


@dataclass
class History:
    records: list[EpochRecord] = field(default_factory=list)
    best_epoch: int | None = None

    def __len__(self) -> int:
        return len(self.records)

    def column(self, name: str) -> list:
        return [getattr(r, name) for r in self.records]


HISTORY_COLUMNS = ["epoch", "stage", "train_loss", "val_loss", "val_acc", "val_f1"]


def write_history_csv(path: Path | str, history: History, comment: str | None = None) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        if comment:
            fh.write(f"# {comment}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(HISTORY_COLUMNS)
        for r in history.records:
            w.writerow([r.epoch, r.stage, repr(r.train_loss), repr(r.val_loss), repr(r.val_acc), repr(r.val_f1)])


# -- training loops ------------------------------------------------------------------

LossFn = Callable[[T.Tensor, np.ndarray, np.ndarray], T.Tensor]


def _fit(model: GatModel, graphs: Sequence[WindowGraph], cfg: TrainConfig,
         stage_for_epoch: Callable[[int], tuple[str, LossFn]],
         extra: np.ndarray | None = None) -> History:
    """Shared epoch loop. ``extra`` holds per-graph teacher logits when distilling."""
    labels, train_idx, val_idx = _check_dataset(graphs, cfg)
    history = History()
    if cfg.epochs == 0:
        return history
    rng = np.random.Generator(np.random.PCG64([cfg.seed, 31]))
    adam = AdamState()
    val_graphs = [graphs[i] for i in val_idx]
    val_extra = None if extra is None else extra[val_idx]
    best_key, best_state = None, model.state()

    for epoch in range(1, cfg.epochs + 1):
        stage, loss_fn = stage_for_epoch(epoch)
        model.train()
        order = train_idx[rng.permutation(train_idx.size)]
        total, seen = 0.0, 0
        for idx in _batches(order, cfg.batch_size):
            batch = GraphBatch.from_graphs([graphs[i] for i in idx])
            model.zero_grad()
            logits = model(batch, rng)
            loss = loss_fn(logits, batch.labels, None if extra is None else extra[idx])
            loss.backward()
            grads = {k: p.grad for k, p in model.params.items() if p.grad is not None}
            if cfg.clip_norm is not None:
                _clip(grads, cfg.clip_norm)
            adam_step(model.params, grads, adam, cfg.lr)
            total += loss.item() * idx.size
            seen += idx.size
        model.zero_grad()

        val_logits = predict_logits(model, val_graphs, cfg.batch_size)
        with T.no_grad():
            val_loss = loss_fn(T.Tensor(val_logits), labels[val_idx], val_extra).item()
        acc, f1 = _val_scores(val_logits, labels[val_idx])
        rec = EpochRecord(epoch, stage, total / seen, val_loss, acc, f1)
        history.records.append(rec)
        log.info("epoch %d [%s] train %.4f val %.4f acc %.4f f1 %.4f",
                 epoch, stage, rec.train_loss, val_loss, acc, f1)
        score = acc if cfg.select_metric == "accuracy" else f1
        key = (score, -val_loss)
        if best_key is None or key > best_key:
            best_key, best_state, history.best_epoch = key, model.state(), epoch

    model.load_state(best_state)
    model.eval()
    return history


def train_teacher(graphs: Sequence[WindowGraph], cfg: TrainConfig,
                  arch: ArchConfig = TEACHER) -> tuple[GatModel, History]:
    """Supervised training; returns the best-validation epoch's parameters."""
    model = build_model(arch, cfg.seed)
    gamma = cfg.gamma_focal if cfg.use_focal else None

    def hard(logits, y, _):
        return hard_loss(logits, y, gamma)

    history = _fit(model, graphs, cfg, lambda e: ("teacher", hard))
    model.meta = {"role": "teacher", "best_epoch": history.best_epoch, "config": cfg.to_dict()}
    return model, history


def distill_student(teacher: GatModel, graphs: Sequence[WindowGraph], cfg: TrainConfig,
                    arch: ArchConfig = STUDENT) -> tuple[GatModel, History]:
    """Warm-up on hard labels, then the mixed hard/soft loss against frozen teacher logits."""
    if teacher.meta.get("best_epoch") is None:
        warnings.warn("teacher has no training record; distilling from an untrained teacher",
                      stacklevel=2)
    teacher.eval()
    # Teacher is frozen and eval mode is deterministic, so its logits are computed once.
    teacher_logits = predict_logits(teacher, graphs, cfg.batch_size)
    student = build_model(arch, cfg.seed + 1)
    gamma = cfg.gamma_focal if cfg.use_focal else None
    loss_cfg = cfg.loss_config()

    def hard(logits, y, _):
        return hard_loss(logits, y, gamma)

    def mixed(logits, y, t_logits):
        return kd_loss(logits, t_logits, y, loss_cfg)

    def stage(epoch):
        return ("warmup", hard) if epoch <= cfg.warmup_epochs else ("distill", mixed)

    history = _fit(student, graphs, cfg, stage, extra=teacher_logits)
    student.meta = {"role": "student", "best_epoch": history.best_epoch, "config": cfg.to_dict()}
    return student, history
