import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import TINY
from dgprtn import dgp
from dgprtn import numcore as nc
from dgprtn.distributions import GaussianParams, theorem1_m
from dgprtn.numcore import ContractViolation, Rng, Tensor
from dgprtn.training import init_model


def inv_softplus(y):
    return math.log(math.expm1(y))


def test_edge_m_at_unit_n_and_sigma():
    # n = sigma~ = 1 -> l = 2 -> m = (3 - sqrt 5) / 2
    a = Tensor(np.array([inv_softplus(0.99)]))
    m = dgp.m_from_raw(a, a, 0.01, 0.01)
    assert m.item() == pytest.approx((3 - math.sqrt(5)) / 2, abs=1e-12)
    assert m.item() == pytest.approx(0.381966, abs=1e-6)


@pytest.mark.parametrize("mu,var", [(-1.0, 0.05), (0.0, 0.5), (0.4, 2.0), (0.2, 0.1)])
def test_edge_map_agrees_with_closed_form(mu, var):
    n = 1.0 / (1.0 - 2.0 * mu)
    sig = math.sqrt(var)
    a = Tensor(np.array([inv_softplus(n - 0.01)]))
    b = Tensor(np.array([inv_softplus(sig - 0.01)]))
    assert dgp.m_from_raw(a, b, 0.01, 0.01).item() == pytest.approx(
        theorem1_m(GaussianParams(mu, var)), rel=1e-12)


@settings(max_examples=200, deadline=None)
@given(st.floats(-60, 60), st.floats(-60, 60))
def test_edge_m_always_in_open_half_interval(a, b):
    for dtype in (np.float64, np.float32):
        m = dgp.m_from_raw(Tensor(np.array([a], dtype)), Tensor(np.array([b], dtype)), 0.01, 0.01)
        assert 0 < m.item() < 0.5


def test_summary_edge_sampling_and_clamp():
    m = Tensor(np.array([0.3, 0.3, 0.3, 0.01]))
    noise = np.array([0.0, 1.0, -10.0, 0.0])
    alpha, clamped = dgp.sample_summary_edge(m, noise=noise, epsilon_alpha=1e-4)
    sd = math.sqrt(0.3 * 0.7)
    np.testing.assert_allclose(alpha.data, [0.3, 0.3 + sd, 1e-4, 0.01])
    np.testing.assert_array_equal(clamped, [False, False, True, False])
    big, c2 = dgp.sample_summary_edge(Tensor(np.array([0.45])), noise=np.array([5.0]))
    assert big.item() == 1.0 and c2[0]


def test_transform_sample_formula():
    alpha = Tensor(np.array([0.25, 0.5]))
    s, bar = dgp.sample_transform(alpha, Tensor(np.array([2.0, -1.0])),
                                  Tensor(np.array([0.4, 0.1])), noise=np.array([1.0, -2.0]))
    np.testing.assert_allclose(s.data, [0.25 * 2 + 0.5 * 0.4, -0.5 - math.sqrt(0.5) * 0.2])
    np.testing.assert_allclose(bar.data, s.data * alpha.data)


def test_window_set_pairs_and_sharing():
    ws = dgp.WindowSet.build([list(range(10))])
    assert ws.pairs.shape == (45, 2)
    assert np.all(ws.pairs[:, 0] < ws.pairs[:, 1])
    ws2 = dgp.WindowSet.build([[0, 1, 2], [1, 2, 3]])
    assert ws2.n_incidences == 6
    assert ws2.pairs.shape[0] == 5            # (1, 2) is shared
    with pytest.raises(ContractViolation):
        dgp.WindowSet.build([[]])


def test_embedding_matches_explicit_sum(tiny_model64):
    rng = np.random.default_rng(0)
    V = Tensor(rng.normal(size=(5, TINY.d_node)))
    ws = dgp.WindowSet.build([[0, 1, 2], [2, 3, 4], [4]])
    sample = dgp.sample_graphs(V, ws, tiny_model64.params, TINY, rng=Rng(1))
    feat = sample.edges.feat.data
    for w in range(ws.n_windows):
        expect = np.zeros(TINY.d_embed)
        for inc in np.nonzero(ws.inc_window == w)[0]:
            expect += sample.alpha_bar.data[inc] * feat[ws.inc_pair[inc]]
        np.testing.assert_allclose(sample.e.data[w], expect, rtol=1e-12, atol=1e-14)
    np.testing.assert_array_equal(sample.e.data[2], 0.0)   # single-node window


def test_dict_graph_embedding_agrees_with_batched(tiny_model64, tiny_data):
    frames = [u.frames for u in tiny_data[0].utterances]
    noise = dgp.EdgeNoise.draw(Rng(4), 6)
    summary, task, e = dgp.build_graphs(frames, tiny_model64.params, TINY, noise=noise)
    assert len(task.alpha_bar) == 6
    e2 = dgp.graph_embedding(task, tiny_model64.params, TINY)
    np.testing.assert_allclose(e.data, e2.data, rtol=1e-12, atol=1e-14)
    empty = dgp.TaskGraph(task.nodes[:1])
    np.testing.assert_array_equal(dgp.graph_embedding(empty, tiny_model64.params, TINY).data, 0)


def test_noiseless_graphs_use_posterior_means(tiny_model64, tiny_data):
    frames = [u.frames for u in tiny_data[1].utterances]
    summary, task, _ = dgp.build_graphs(frames, tiny_model64.params, TINY)
    for key, p in summary.params.items():
        assert summary.alpha[key] == pytest.approx(max(p.m, TINY.epsilon_alpha))
        assert task.s[key] == pytest.approx(summary.alpha[key] * p.mu_s)
        assert task.alpha_bar[key] == pytest.approx(task.s[key] * summary.alpha[key])


def test_padding_does_not_change_node_embeddings(tiny_model64, tiny_data):
    utts = tiny_data[0].utterances
    frames = [u.frames for u in utts]
    T = max(f.shape[0] for f in frames)
    padded = np.zeros((T, len(frames), TINY.d_in))
    for b, f in enumerate(frames):
        padded[: f.shape[0], b] = f
        padded[f.shape[0]:, b] = 1e3            # junk in the padding region
    V = dgp.encode_nodes(Tensor(padded), [f.shape[0] for f in frames], tiny_model64.params, TINY)
    for b, f in enumerate(frames):
        single = dgp.encode_node(Tensor(f), tiny_model64.params, TINY)
        np.testing.assert_allclose(V.data[b], single.data, rtol=1e-12, atol=1e-14)


def test_tied_prior_gives_zero_gap():
    model = init_model(TINY, Rng(2), dtype=np.float64, tie_prior=True)
    V = Tensor(np.random.default_rng(1).normal(size=(3, TINY.d_node)))
    ed = dgp.edge_tensors(V, np.array([[0, 1], [1, 2]]), model.params, TINY)
    np.testing.assert_array_equal(ed.m.data, ed.m0.data)
    m, mu, sd = dgp.edge_posterior(V[0], V[1], model.params, TINY)
    assert m.item() == pytest.approx(ed.m.data[0], rel=1e-14)


def test_sampling_draw_count_and_noiseless_pass(tiny_model64):
    V = Tensor(np.random.default_rng(2).normal(size=(4, TINY.d_node)))
    ws = dgp.WindowSet.build([[0, 1, 2, 3]])
    r = Rng(0)
    dgp.sample_graphs(V, ws, tiny_model64.params, TINY, rng=r)
    assert r.draws == 2 * 6
    quiet = dgp.sample_graphs(V, ws, tiny_model64.params, TINY)
    np.testing.assert_allclose(quiet.alpha.data, np.maximum(quiet.edges.m.data, 1e-4))


def test_embedding_path_gradients(tiny_model64):
    """Encoder -> edges -> frozen-noise samples -> embedding, in float64."""
    rng = np.random.default_rng(3)
    frames = Tensor(rng.normal(size=(4, 3, TINY.d_in)))
    lengths = [4, 2, 3]
    ws = dgp.WindowSet.build([[0], [0, 1], [0, 1, 2]])
    noise = dgp.EdgeNoise(rng.normal(size=ws.n_incidences) * 0.3,
                          rng.normal(size=ws.n_incidences))
    proj = rng.normal(size=(ws.n_windows, TINY.d_embed))

    def f(p):
        V = dgp.encode_nodes(frames, lengths, p, TINY)
        e = dgp.sample_graphs(V, ws, p, TINY, noise=noise).e
        return nc.tsum(e * proj)
    params = {k: v for k, v in tiny_model64.params.items() if not k.startswith("rtn.")}
    rep = nc.grad_check(f, params, tol=1e-4, step=1e-6, max_entries=12)
    assert rep.passed, rep.lines()
