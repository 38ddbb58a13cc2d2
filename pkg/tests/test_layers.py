import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kdgat import tensor as T
from kdgat.errors import (
    EdgeIndexOutOfRange,
    EmptyGraph,
    EmptyLayerList,
    InvalidLabel,
    NonPositiveTemperature,
    ProbabilityOutOfRange,
    ShapeMismatch,
)
from kdgat.layers import (
    GatLayerParams,
    JkParams,
    LinearParams,
    LossConfig,
    LstmParams,
    add_self_loops,
    focal_loss,
    gat_layer,
    global_mean_pool,
    hard_loss,
    jk_aggregate,
    kd_loss,
    lstm_cell,
    soften,
)
from kdgat.tensor import Tensor, grad_check

from conftest import ABS_TOL, split_grad_check


def gat_params(rng, d_in, heads, head_dim, concat=True, edge_slot=True, bias=True):
    out = heads * head_dim if concat else head_dim
    return GatLayerParams(
        Tensor(rng.normal(size=(d_in, heads * head_dim)) * 0.5),
        Tensor(rng.normal(size=(heads, 2 * head_dim + (1 if edge_slot else 0)))),
        heads, concat_heads=concat,
        bias=Tensor(rng.normal(size=out) * 0.1) if bias else None)


def random_graph(rng, n=None, m=None):
    n = int(rng.integers(1, 8)) if n is None else n
    m = int(rng.integers(0, 3 * n)) if m is None else m
    edges = np.column_stack([rng.integers(0, n, m), rng.integers(0, n, m), rng.integers(1, 20, m)])
    return n, edges.reshape(-1, 3)


def lstm_params(rng, d_in, d_h, scale=0.5):
    return LstmParams(Tensor(rng.normal(size=(d_in, 4 * d_h)) * scale),
                      Tensor(rng.normal(size=(d_h, 4 * d_h)) * scale),
                      Tensor(rng.normal(size=4 * d_h) * scale))


def jk_params(rng, widths, d, d_h):
    proj = [LinearParams(Tensor(rng.normal(size=(w, d)) * 0.5), Tensor(rng.normal(size=d) * 0.1)) for w in widths]
    return JkParams(proj, lstm_params(rng, d, d_h), lstm_params(rng, d, d_h))


# -- graph attention -----------------------------------------------------------------

@settings(max_examples=200)
@given(seed=st.integers(0, 2**32 - 1))
def test_attention_sums_to_one_per_node_and_head(seed):
    rng = np.random.Generator(np.random.PCG64(seed))
    n, edges = random_graph(rng)
    p = gat_params(rng, 3, int(rng.integers(1, 5)), 4)
    _, alpha, (_, dst) = gat_layer(rng.normal(size=(n, 3)) * 3, edges, p, return_attention=True)
    sums = T.segment_sum(alpha, dst, n).data
    assert np.abs(sums - 1.0).max() <= 1e-12


def test_singleton_graph_attends_to_itself(rng):
    p = gat_params(rng, 3, 2, 4, bias=False)
    x = rng.normal(size=(1, 3))
    out, alpha, (src, dst) = gat_layer(x, np.zeros((0, 3)), p, return_attention=True, activation="elu")
    assert src.tolist() == [0] and dst.tolist() == [0]
    assert np.array_equal(alpha.data, np.ones((1, 2)))
    expected = T.elu(T.matmul(Tensor(x), p.weight)).data
    assert np.allclose(out.data, expected, rtol=0, atol=1e-15)


def test_symmetric_pair_splits_attention_evenly(rng):
    p = gat_params(rng, 3, 3, 4)
    x = np.tile(rng.normal(size=(1, 3)), (2, 1))
    edges = np.array([[0, 1, 2], [1, 0, 2], [0, 0, 2], [1, 1, 2]])
    _, alpha, _ = gat_layer(x, edges, p, return_attention=True)
    assert np.allclose(alpha.data, 0.5, rtol=0, atol=1e-15)


def test_self_loops_added_only_where_missing():
    src, dst, w = add_self_loops(3, np.array([0, 1]), np.array([0, 2]), np.array([5.0, 1.0]))
    loops = sorted(int(s) for s, d in zip(src, dst) if s == d)
    assert loops == [0, 1, 2]
    assert w[(src == 0) & (dst == 0)].tolist() == [5.0]


@settings(max_examples=50)
@given(seed=st.integers(0, 2**32 - 1), shift=st.floats(-5, 5))
def test_attention_is_shift_invariant_within_a_neighbourhood(seed, shift):
    rng = np.random.Generator(np.random.PCG64(seed))
    m = int(rng.integers(1, 12))
    seg = rng.integers(0, 3, m)
    scores = rng.normal(size=(m, 2))
    bumped = scores + np.where(seg == 0, shift, 0.0)[:, None]
    a = T.segment_softmax(Tensor(scores), seg, 3).data
    b = T.segment_softmax(Tensor(bumped), seg, 3).data
    assert np.allclose(a, b, rtol=0, atol=1e-12)


@settings(max_examples=50)
@given(seed=st.integers(0, 2**32 - 1))
def test_gat_layer_is_permutation_equivariant(seed):
    rng = np.random.Generator(np.random.PCG64(seed))
    n, edges = random_graph(rng, n=int(rng.integers(2, 8)))
    p = gat_params(rng, 3, 2, 3)
    x = rng.normal(size=(n, 3))
    perm = rng.permutation(n)
    moved = edges.copy()
    moved[:, 0], moved[:, 1] = perm[edges[:, 0]], perm[edges[:, 1]]
    px = np.empty_like(x)
    px[perm] = x
    a = gat_layer(x, edges, p).data
    b = gat_layer(px, moved, p).data
    assert np.allclose(b[perm], a, rtol=0, atol=1e-12)


def test_head_combination_widths(rng):
    n, edges = random_graph(rng, n=4, m=6)
    x = rng.normal(size=(n, 3))
    assert gat_layer(x, edges, gat_params(rng, 3, 4, 5, concat=True)).shape == (n, 20)
    assert gat_layer(x, edges, gat_params(rng, 3, 4, 5, concat=False)).shape == (n, 5)


def test_edge_weight_slot_can_be_disabled(rng):
    n, edges = random_graph(rng, n=4, m=8)
    p = gat_params(rng, 3, 2, 3, edge_slot=False)
    assert not p.uses_edge_weight
    heavier = edges.copy()
    heavier[:, 2] *= 7
    x = rng.normal(size=(n, 3))
    assert np.array_equal(gat_layer(x, edges, p).data, gat_layer(x, heavier, p).data)


def test_gat_layer_errors(rng):
    p = gat_params(rng, 3, 2, 3)
    with pytest.raises(ShapeMismatch):
        gat_layer(np.ones((2, 4)), np.zeros((0, 3)), p)
    with pytest.raises(EdgeIndexOutOfRange):
        gat_layer(np.ones((2, 3)), np.array([[0, 2, 1]]), p)


@settings(max_examples=20)
@given(seed=st.integers(0, 2**32 - 1))
def test_gat_layer_gradients(seed):
    rng = np.random.Generator(np.random.PCG64(seed))
    n, edges = random_graph(rng, n=int(rng.integers(2, 6)))
    p = gat_params(rng, 3, 2, 3)
    x = rng.normal(size=(n, 3))
    probe = rng.normal(size=(n, 6))
    assert grad_check(lambda w: T.sum(gat_layer(x, edges, GatLayerParams(w, p.attn, 2, bias=p.bias)) * probe),
                      Tensor(p.weight.data)) < 1e-4
    # The destination half of each attention vector is often exactly
    # gradient-free (softmax shift invariance), hence the split check.
    rel, absolute = split_grad_check(
        lambda a: T.sum(gat_layer(x, edges, GatLayerParams(p.weight, a, 2, bias=p.bias)) * probe),
        Tensor(p.attn.data))
    assert rel < 1e-4 and absolute < ABS_TOL
    assert grad_check(lambda h: T.sum(gat_layer(h, edges, p) * probe), Tensor(x)) < 1e-4


# -- LSTM and jumping knowledge ----------------------------------------------------------

def test_zero_lstm_gives_zero_state():
    params = LstmParams(Tensor(np.zeros((4, 8))), Tensor(np.zeros((2, 8))), Tensor(np.zeros(8)))
    h, c = lstm_cell(np.zeros(4), np.zeros(2), np.zeros(2), params)
    assert np.array_equal(h.data, np.zeros(2)) and np.array_equal(c.data, np.zeros(2))


def test_saturated_forget_gate_keeps_cell_state(rng):
    d_in, d = 3, 4
    bias = np.zeros(4 * d)
    bias[0:d] = -10.0        # input gate shut
    bias[d:2 * d] = 10.0     # forget gate open
    params = LstmParams(Tensor(np.zeros((d_in, 4 * d))), Tensor(np.zeros((d, 4 * d))), Tensor(bias))
    c_prev = rng.normal(size=d)
    _, c = lstm_cell(rng.normal(size=d_in), rng.normal(size=d), c_prev, params)
    assert np.abs(c.data - c_prev).max() < 1e-4


@settings(max_examples=20)
@given(seed=st.integers(0, 2**32 - 1))
def test_three_chained_cells_pass_grad_check(seed):
    rng = np.random.Generator(np.random.PCG64(seed))
    d_in, d = 3, 4
    p = lstm_params(rng, d_in, d)
    xs = [rng.normal(size=(2, d_in)) for _ in range(3)]
    probe = rng.normal(size=(2, d))

    def loss(w_ih):
        q = LstmParams(w_ih, p.w_hh, p.bias)
        h = c = Tensor(np.zeros((2, d)))
        for x in xs:
            h, c = lstm_cell(x, h, c, q)
        return T.sum(h * probe) + T.sum(c * c)
    assert grad_check(loss, Tensor(p.w_ih.data)) < 1e-4


def test_lstm_shape_errors(rng):
    p = lstm_params(rng, 3, 4)
    with pytest.raises(ShapeMismatch):
        lstm_cell(np.zeros(5), np.zeros(4), np.zeros(4), p)
    with pytest.raises(ShapeMismatch):
        lstm_cell(np.zeros(3), np.zeros(3), np.zeros(3), p)


@pytest.mark.parametrize("layers", [1, 2, 5])
def test_jk_output_shape(rng, layers):
    d, d_h, n = 6, 5, 4
    widths = [int(w) for w in rng.integers(2, 9, size=layers)]
    reprs = [Tensor(rng.normal(size=(n, w))) for w in widths]
    assert jk_aggregate(reprs, jk_params(rng, widths, d, d_h)).shape == (n, 2 * d_h)


def test_jk_single_layer_is_one_step_each_way(rng):
    d, d_h, n = 4, 3, 2
    params = jk_params(rng, [5], d, d_h)
    x = Tensor(rng.normal(size=(n, 5)))
    seq = T.matmul(x, params.proj[0].weight) + params.proj[0].bias
    zeros = np.zeros((n, d_h))
    fwd, _ = lstm_cell(seq, zeros, zeros, params.fwd)
    bwd, _ = lstm_cell(seq, zeros, zeros, params.bwd)
    out = jk_aggregate([x], params).data
    assert np.array_equal(out, np.concatenate([fwd.data, bwd.data], axis=1))


def test_jk_is_row_equivariant(rng):
    n = 6
    params = jk_params(rng, [4, 4, 3], 5, 3)
    reprs = [rng.normal(size=(n, w)) for w in (4, 4, 3)]
    perm = rng.permutation(n)
    a = jk_aggregate([Tensor(r) for r in reprs], params).data
    b = jk_aggregate([Tensor(r[perm]) for r in reprs], params).data
    assert np.allclose(b, a[perm], rtol=0, atol=1e-14)


def test_jk_errors(rng):
    with pytest.raises(EmptyLayerList):
        jk_aggregate([], jk_params(rng, [], 3, 2))
    params = jk_params(rng, [3, 3], 3, 2)
    with pytest.raises(ShapeMismatch):
        jk_aggregate([Tensor(np.ones((2, 3))), Tensor(np.ones((3, 3)))], params)


# -- pooling ---------------------------------------------------------------------------

def test_mean_pool_examples():
    assert np.array_equal(global_mean_pool(np.array([[1.0, 2.0]])).data, [1.0, 2.0])
    assert np.array_equal(global_mean_pool(np.array([[0.0, 0.0], [2.0, 2.0]])).data, [1.0, 1.0])
    with pytest.raises(EmptyGraph):
        global_mean_pool(np.zeros((0, 2)))


def test_batched_pool_matches_per_graph_means(rng):
    x = rng.normal(size=(7, 3))
    batch = np.array([0, 0, 1, 1, 1, 2, 2])
    pooled = global_mean_pool(x, batch, 3).data
    for g in range(3):
        assert np.allclose(pooled[g], x[batch == g].mean(axis=0), rtol=0, atol=1e-15)
    perm = rng.permutation(7)
    assert np.allclose(global_mean_pool(x[perm], batch[perm], 3).data, pooled, rtol=0, atol=1e-15)


# -- losses ------------------------------------------------------------------------------

def test_soften_examples():
    e = math.e
    assert np.allclose(soften(np.array([2.0, 0.0]), 2.0), [e / (e + 1), 1 / (e + 1)], rtol=0, atol=1e-15)
    assert np.array_equal(soften(np.array([3.0, 3.0]), 0.7), [0.5, 0.5])
    assert np.abs(soften(np.array([2.0, 0.0]), 1e6) - 0.5).max() < 1e-5
    with pytest.raises(NonPositiveTemperature):
        soften(np.array([1.0, 0.0]), 0.0)


def test_focal_examples():
    assert focal_loss(1.0, 1.0) == 0.0
    assert abs(focal_loss(0.5, 0.0) - 0.6931) < 5e-5
    assert abs(focal_loss(0.5, 1.0) - 0.3466) < 5e-5
    with pytest.raises(ProbabilityOutOfRange):
        focal_loss(0.0, 1.0)
    with pytest.raises(ProbabilityOutOfRange):
        focal_loss(1.2, 1.0)


@pytest.mark.parametrize("p", [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9])
def test_focal_without_focusing_is_cross_entropy(p):
    assert abs(focal_loss(p, 0.0) + math.log(p)) <= 1e-12


@settings(max_examples=100)
@given(p=st.floats(1e-6, 0.999), dp=st.floats(1e-4, 0.5), gamma=st.floats(0.0, 5.0))
def test_focal_decreases_in_true_class_probability(p, dp, gamma):
    q = min(1.0, p + dp)
    assert focal_loss(q, gamma) < focal_loss(p, gamma)


def test_kd_worked_example_matches_direct_evaluation():
    cfg = LossConfig(alpha=0.5, tau=2.0)
    q = np.array([math.e, 1.0]) / (math.e + 1)
    kl = float(np.sum(q * np.log(q / 0.5)))
    expected = 0.5 * math.log(2.0) + 0.5 * 4.0 * kl
    got = kd_loss(np.array([0.0, 0.0]), np.array([2.0, 0.0]), [1], cfg).item()
    assert abs(got - expected) <= 1e-12
    assert abs(got - 0.568462) < 1e-6


@settings(max_examples=50)
@given(seed=st.integers(0, 2**32 - 1))
def test_kd_collapses_to_hard_loss_at_alpha_one(seed):
    rng = np.random.Generator(np.random.PCG64(seed))
    s, t = rng.normal(size=(5, 2)) * 3, rng.normal(size=(5, 2)) * 3
    y = rng.integers(0, 2, 5)
    got = kd_loss(s, t, y, LossConfig(alpha=1.0, tau=float(rng.uniform(0.5, 5)))).item()
    assert abs(got - hard_loss(s, y).item()) <= 1e-12


@settings(max_examples=50)
@given(seed=st.integers(0, 2**32 - 1))
def test_kd_soft_term_vanishes_when_logits_agree(seed):
    rng = np.random.Generator(np.random.PCG64(seed))
    s = rng.normal(size=(4, 2)) * 3
    y = rng.integers(0, 2, 4)
    got = kd_loss(s, s.copy(), y, LossConfig(alpha=0.0, tau=2.0)).item()
    assert abs(got) <= 1e-12


@settings(max_examples=20)
@given(seed=st.integers(0, 2**32 - 1), focal=st.booleans())
def test_kd_gradient_reaches_student_only(seed, focal):
    rng = np.random.Generator(np.random.PCG64(seed))
    s, t = rng.normal(size=(6, 2)), Tensor(rng.normal(size=(6, 2)), requires_grad=True)
    y = rng.integers(0, 2, 6)
    cfg = LossConfig(alpha=0.3, tau=2.0, gamma=1.0, use_focal=focal)
    assert grad_check(lambda z: kd_loss(z, t, y, cfg), Tensor(s)) < 1e-4
    kd_loss(Tensor(s, requires_grad=True), t, y, cfg).backward()
    assert t.grad is None


def test_focal_hard_loss_at_gamma_zero_is_cross_entropy(rng):
    s = rng.normal(size=(8, 2))
    y = rng.integers(0, 2, 8)
    assert abs(hard_loss(s, y, gamma=0.0).item() - hard_loss(s, y).item()) <= 1e-12


def test_loss_input_errors():
    with pytest.raises(InvalidLabel):
        hard_loss(np.zeros((2, 2)), [0, 2])
    with pytest.raises(InvalidLabel):
        hard_loss(np.zeros((2, 2)), [0])
    with pytest.raises(ValueError):
        LossConfig(alpha=1.5)
    with pytest.raises(ValueError):
        LossConfig(tau=0.0)
