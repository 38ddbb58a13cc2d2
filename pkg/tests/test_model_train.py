import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kdgat import tensor as T
from kdgat.errors import (
    ArchMismatch,
    CorruptCheckpoint,
    EmptyDataset,
    InvalidArch,
    ShapeMismatch,
    SingleClassDataset,
    VersionMismatch,
)
from kdgat.graph_builder import build_windows
from kdgat.layers import hard_loss
from kdgat.model import (
    CKPT_MAGIC,
    STUDENT,
    TEACHER,
    ArchConfig,
    GraphBatch,
    build_model,
    forward,
    load_checkpoint,
    parameter_count,
    save_checkpoint,
)
from kdgat.train import (
    AdamState,
    TrainConfig,
    adam_step,
    distill_student,
    predict_logits,
    split_indices,
    train_teacher,
    write_history_csv,
)

from conftest import msg, random_messages, split_grad_check, toy_graphs

SMALL = ArchConfig(gat_layers=2, heads=2, hidden_channels=8, linear_layers=2, dropout=0.2)
TOY_CFG = TrainConfig(lr=5e-3, batch_size=32, epochs=20, warmup_epochs=3, seed=0)


@pytest.fixture(scope="module")
def toy():
    return toy_graphs()


@pytest.fixture(scope="module")
def toy_teacher(toy):
    return train_teacher(toy, TOY_CFG, TEACHER)


# -- architecture ------------------------------------------------------------------

def test_table_defaults():
    assert (TEACHER.gat_layers, TEACHER.heads, TEACHER.hidden_channels, TEACHER.linear_layers,
            TEACHER.dropout) == (5, 8, 32, 3, 0.2)
    assert (STUDENT.gat_layers, STUDENT.heads, STUDENT.hidden_channels, STUDENT.linear_layers,
            STUDENT.dropout) == (2, 4, 32, 3, 0.2)
    t = build_model(TEACHER)
    assert sum(k.startswith("gat.") and k.endswith(".weight") for k in t.params) == 5
    assert t.params["gat.0.attn"].shape[0] == 8
    s = build_model(STUDENT)
    assert sum(k.startswith("gat.") and k.endswith(".weight") for k in s.params) == 2
    assert s.params["gat.0.attn"].shape[0] == 4


def test_parameter_ratio_under_defaults():
    ratio = parameter_count(STUDENT) / parameter_count(TEACHER)
    assert ratio < 0.10
    assert build_model(STUDENT).parameter_count() == parameter_count(STUDENT)


def test_build_is_deterministic():
    a, b, c = build_model(STUDENT, 3), build_model(STUDENT, 3), build_model(STUDENT, 4)
    assert all(a.params[k].data.tobytes() == b.params[k].data.tobytes() for k in a.params)
    assert any(a.params[k].data.tobytes() != c.params[k].data.tobytes() for k in a.params)
    assert all(not a.params[k].data.any() for k in a.params if k.endswith("bias"))


def test_invalid_arch():
    with pytest.raises(InvalidArch):
        ArchConfig(0, 4, 32)
    with pytest.raises(InvalidArch):
        ArchConfig(2, 4, 32, dropout=1.0)


# -- forward ---------------------------------------------------------------------------

def test_single_node_graph_gives_finite_logits():
    (g,) = build_windows([msg(k, 0x1A0) for k in range(5)], 5, 5)
    out = forward(build_model(STUDENT), g)
    assert out.shape == (2,) and np.isfinite(out.data).all()


@settings(max_examples=30)
@given(seed=st.integers(0, 2**31))
def test_node_permutation_invariance(seed):
    rng = np.random.Generator(np.random.PCG64(seed))
    (g,) = build_windows(random_messages(rng, 40, attack_rate=0.2), 40, 40)
    model = build_model(STUDENT, seed % 7)
    perm = rng.permutation(g.num_nodes)
    a = forward(model, g).data
    b = forward(model, g.permuted(perm)).data
    assert np.max(np.abs(a - b)) < 1e-9


def test_eval_mode_is_bit_deterministic(rng):
    graphs = build_windows(random_messages(rng, 200, attack_rate=0.1), 50, 50)
    model = build_model(STUDENT).eval()
    assert forward(model, graphs).data.tobytes() == forward(model, graphs).data.tobytes()


def test_train_mode_dropout_changes_output(rng):
    graphs = build_windows(random_messages(rng, 200), 50, 50)
    model = build_model(STUDENT).train()
    r = np.random.Generator(np.random.PCG64(0))
    assert not np.array_equal(forward(model, graphs, r).data, forward(model, graphs, r).data)


def test_batched_equals_alone(rng):
    graphs = build_windows(random_messages(rng, 500, attack_rate=0.1), 50, 50)
    model = build_model(STUDENT, 2)
    batched = forward(model, graphs).data
    alone = np.stack([forward(model, g).data for g in graphs])
    assert np.max(np.abs(batched - alone)) < 1e-9


def test_empty_batch_is_a_shape_error():
    with pytest.raises(ShapeMismatch):
        GraphBatch.from_graphs([])


def test_student_loss_gradients(rng):
    graphs = build_windows(random_messages(rng, 200, attack_rate=0.3), 25, 25)
    batch = GraphBatch.from_graphs(graphs)
    model = build_model(STUDENT, 5).eval()
    for name in ("gat.0.weight", "gat.1.attn", "jk.fwd.w_hh", "head.2.weight"):
        p = model.params[name]
        coords = np.random.Generator(np.random.PCG64(1)).choice(p.size, size=min(12, p.size), replace=False)

        def f(x, name=name):
            saved = model.params[name]
            model.params[name] = x
            try:
                return hard_loss(model(batch), batch.labels)
            finally:
                model.params[name] = saved

        rel, absolute = split_grad_check(f, p.data.copy(), coords)
        assert rel < 1e-4 and absolute < 1e-9, name


# -- Adam ------------------------------------------------------------------------------

def test_adam_zero_gradient_is_a_no_op():
    p = {"w": T.Tensor(np.arange(6.0).reshape(2, 3))}
    before = p["w"].data.copy()
    adam_step(p, {"w": np.zeros((2, 3))}, AdamState(), lr=0.1)
    assert np.array_equal(p["w"].data, before)


@settings(max_examples=50)
@given(g=st.floats(-100, 100).filter(lambda v: abs(v) > 1e-3), lr=st.floats(1e-5, 1e-1))
def test_adam_first_step_moves_by_lr(g, lr):
    p = {"w": T.Tensor(np.zeros(4))}
    adam_step(p, {"w": np.full(4, g)}, AdamState(), lr=lr)
    # m_hat = g and v_hat = g^2 after bias correction, so the step is lr * |g| / (|g| + eps)
    expected = -np.sign(g) * lr * abs(g) / (abs(g) + 1e-8)
    assert np.allclose(p["w"].data, expected, rtol=1e-12, atol=0)
    assert abs(abs(p["w"].data[0]) - lr) <= lr * 1e-5


def test_adam_trajectories_repeat():
    def run():
        r = np.random.Generator(np.random.PCG64(0))
        p = {"w": T.Tensor(r.normal(size=5))}
        s = AdamState()
        for _ in range(20):
            adam_step(p, {"w": 2 * p["w"].data + r.normal(size=5)}, s, 0.01)
        return p["w"].data.tobytes()
    assert run() == run()


def test_adam_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        adam_step({"w": T.Tensor(np.zeros(3))}, {"w": np.zeros(4)}, AdamState(), 0.1)


# -- checkpoints -------------------------------------------------------------------------

def test_checkpoint_round_trip_is_bit_exact(tmp_path, rng):
    graphs = build_windows(random_messages(rng, 300, attack_rate=0.1), 50, 50)
    model = build_model(STUDENT, 9)
    save_checkpoint(model, {"seed": 9}, tmp_path / "m.ckpt")
    back = load_checkpoint(tmp_path / "m.ckpt", expected_arch=STUDENT)
    assert back.meta == {"seed": 9}
    assert forward(back, graphs).data.tobytes() == forward(model.eval(), graphs).data.tobytes()


def test_checkpoint_failures(tmp_path):
    path = tmp_path / "t.ckpt"
    save_checkpoint(build_model(SMALL), {}, path)
    data = path.read_bytes()
    (tmp_path / "trunc.ckpt").write_bytes(data[: len(data) // 2])
    with pytest.raises(CorruptCheckpoint):
        load_checkpoint(tmp_path / "trunc.ckpt")
    flipped = bytearray(data)
    flipped[200] ^= 1
    (tmp_path / "flip.ckpt").write_bytes(bytes(flipped))
    with pytest.raises(CorruptCheckpoint):
        load_checkpoint(tmp_path / "flip.ckpt")
    (tmp_path / "v9.ckpt").write_bytes(CKPT_MAGIC + (9).to_bytes(4, "little") + data[12:])
    with pytest.raises(VersionMismatch):
        load_checkpoint(tmp_path / "v9.ckpt")
    with pytest.raises(ArchMismatch):
        load_checkpoint(path, expected_arch=STUDENT)


def test_teacher_checkpoint_is_not_a_student(tmp_path):
    save_checkpoint(build_model(TEACHER), {}, tmp_path / "teacher.ckpt")
    with pytest.raises(ArchMismatch):
        load_checkpoint(tmp_path / "teacher.ckpt", expected_arch=STUDENT)


# -- training ----------------------------------------------------------------------------

def test_stratified_split_keeps_class_shares():
    labels = np.array([0] * 800 + [1] * 200)
    tr, va = split_indices(labels, TrainConfig())
    assert va.size == 200 and labels[va].sum() == 40
    assert np.intersect1d(tr, va).size == 0 and tr.size + va.size == 1000
    tr, va = split_indices(labels, TrainConfig(split="chronological"))
    assert va.tolist() == list(range(800, 1000))


def test_zero_epochs_returns_initial_model(toy):
    model, history = train_teacher(toy, TrainConfig(epochs=0), SMALL)
    init = build_model(SMALL, 0)
    assert len(history) == 0 and history.best_epoch is None
    assert all(np.array_equal(model.params[k].data, init.params[k].data) for k in init.params)


def test_dataset_errors(toy):
    with pytest.raises(EmptyDataset):
        train_teacher([], TOY_CFG, SMALL)
    benign = [g for g in toy if g.label == 0]
    with pytest.raises(SingleClassDataset):
        train_teacher(benign, TOY_CFG, SMALL)


def test_teacher_learns_separable_toy_task(toy_teacher):
    model, history = toy_teacher
    assert len(history) == 20
    assert max(history.column("val_acc")) >= 0.99


def test_best_epoch_has_the_best_validation_accuracy(toy, toy_teacher):
    model, history = toy_teacher
    accs = history.column("val_acc")
    assert accs[history.best_epoch - 1] == max(accs)
    labels = np.array([g.label for g in toy])
    _, val = split_indices(labels, TOY_CFG)
    logits = predict_logits(model, [toy[i] for i in val])
    assert np.mean((logits[:, 1] > logits[:, 0]) == labels[val]) == max(accs)


def test_training_is_repeatable(toy):
    cfg = TrainConfig(lr=5e-3, batch_size=32, epochs=3, seed=4)
    (m1, h1), (m2, h2) = train_teacher(toy, cfg, SMALL), train_teacher(toy, cfg, SMALL)
    assert h1.records == h2.records
    assert all(m1.params[k].data.tobytes() == m2.params[k].data.tobytes() for k in m1.params)


def test_student_tracks_teacher_and_leaves_it_untouched(toy, toy_teacher):
    teacher, t_hist = toy_teacher
    before = {k: p.data.tobytes() for k, p in teacher.params.items()}
    student, s_hist = distill_student(teacher, toy, TOY_CFG, STUDENT)
    assert {k: p.data.tobytes() for k, p in teacher.params.items()} == before
    assert max(s_hist.column("val_acc")) >= max(t_hist.column("val_acc")) - 0.01


def test_stage_switch_at_warmup_boundary(toy, toy_teacher):
    cfg = TrainConfig(lr=5e-3, batch_size=32, epochs=6, warmup_epochs=4)
    _, history = distill_student(toy_teacher[0], toy, cfg, SMALL)
    assert history.column("stage") == ["warmup"] * 4 + ["distill"] * 2


def test_alpha_one_matches_hard_label_training(toy, toy_teacher):
    teacher = toy_teacher[0]
    mixed = TrainConfig(lr=5e-3, batch_size=32, epochs=5, warmup_epochs=2, alpha=1.0)
    hard_only = TrainConfig(lr=5e-3, batch_size=32, epochs=5, warmup_epochs=5, alpha=1.0)
    m1, h1 = distill_student(teacher, toy, mixed, SMALL)
    m2, h2 = distill_student(teacher, toy, hard_only, SMALL)
    assert h1.column("train_loss") == h2.column("train_loss")
    assert h1.column("val_acc") == h2.column("val_acc")
    assert all(m1.params[k].data.tobytes() == m2.params[k].data.tobytes() for k in m1.params)


def test_untrained_teacher_warns(toy):
    with pytest.warns(UserWarning, match="untrained"):
        distill_student(build_model(SMALL), toy, TrainConfig(epochs=1), SMALL)


def test_trained_teacher_does_not_warn(toy, toy_teacher):
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        distill_student(toy_teacher[0], toy, TrainConfig(epochs=0), SMALL)


def test_history_csv(tmp_path, toy_teacher):
    history = toy_teacher[1]
    path = tmp_path / "h.csv"
    write_history_csv(path, history, comment="config_hash=abc")
    lines = path.read_text().splitlines()
    assert lines[0] == "# config_hash=abc"
    assert lines[1] == "epoch,stage,train_loss,val_loss,val_acc,val_f1"
    assert len(lines) == 2 + len(history)
    first = lines[2].split(",")
    assert first[:2] == ["1", "teacher"] and float(first[4]) == history.records[0].val_acc
