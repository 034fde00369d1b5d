from concurrent.futures import ThreadPoolExecutor
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from numpy.testing import assert_allclose, assert_array_equal

from diffnet import streams
from diffnet.algorithms import (STEPS, AlgorithmSpec, DivergenceError, DrawSource, Draws, SpecError, partial_step,
                                run, simulate)
from diffnet.model import generate_model
from diffnet.topology import complete_graph, metropolis_weights, random_geometric_graph, star_graph
from oracles import lms_reference


@pytest.fixture(scope="module")
def net():
    topo = random_geometric_graph(8, 0.5, streams.stream(3, streams.TOPOLOGY))
    model = generate_model(4, 8, seed=3)
    return topo, model, metropolis_weights(topo)


def states(spec, net, iters=40, runs=(0, 1, 2), seed=5, **kw):
    topo, model, _ = net
    return simulate(spec, model, topo, iters, runs, seed, record_states=True, **kw)[1]


# reduction identities, bitwise under shared streams

def test_dcd_full_sharing_is_diffusion(net):
    C = net[2]
    a = states(AlgorithmSpec("dcd", 0.05, C=C, M=4, M_grad=4), net)
    b = states(AlgorithmSpec("diffusion", 0.05, C=C), net)
    assert_array_equal(a, b)


def test_cd_full_sharing_is_diffusion(net):
    C = net[2]
    assert_array_equal(states(AlgorithmSpec("cd", 0.05, C=C, M=4), net),
                       states(AlgorithmSpec("diffusion", 0.05, C=C), net))


def test_cd_is_dcd_with_full_gradients(net):
    C = net[2]
    assert_array_equal(states(AlgorithmSpec("cd", 0.05, C=C, M=2), net),
                       states(AlgorithmSpec("dcd", 0.05, C=C, M=2, M_grad=4), net))


def test_partial_full_sharing_is_diffusion(net):
    A = net[2]
    assert_array_equal(states(AlgorithmSpec("partial", 0.05, A=A, M=4), net),
                       states(AlgorithmSpec("diffusion", 0.05, A=A), net))


def test_rcd_all_neighbors_is_diffusion(net):
    topo, _, A = net
    assert_array_equal(states(AlgorithmSpec("rcd", 0.05, A=A, m_k=topo.degree), net),
                       states(AlgorithmSpec("diffusion", 0.05, A=A), net))


@pytest.mark.parametrize("spec", [AlgorithmSpec("rcd", 0.05, m_k=0), AlgorithmSpec("partial", 0.05, M=0)])
def test_no_sharing_is_noncooperative(net, spec):
    topo, model, A = net
    spec = AlgorithmSpec(spec.kind, spec.step_sizes, A=A, M=spec.M, m_k=spec.m_k)
    # the neighbor weights now multiply psi_k itself, so equality holds up to rounding of sum(a) = 1
    assert_allclose(states(spec, net), states(AlgorithmSpec("diffusion", 0.05), net), rtol=1e-13, atol=1e-15)


def _lms_by_hand(model, iters, mu, seed):
    U = model.sigma_u[0] * streams.node_stream(seed, 0, 0, streams.REGRESSOR).standard_normal((iters, model.dim))
    v = streams.node_stream(seed, 0, 0, streams.NOISE).standard_normal((iters, 1))[:, 0]
    D = U @ model.w_true + model.sigma_v[0] * v
    return lms_reference(model, np.zeros(model.dim), U, D, mu)


@pytest.mark.parametrize("spec", [AlgorithmSpec("diffusion", 0.1), AlgorithmSpec("dcd", 0.1, M=1, M_grad=2),
                                  AlgorithmSpec("cd", 0.1, M=1), AlgorithmSpec("partial", 0.1, M=1),
                                  AlgorithmSpec("rcd", 0.1, m_k=0)])
def test_single_node_is_lms(spec):
    model = generate_model(3, 1, seed=8)
    got = simulate(spec, model, complete_graph(1), 30, [0], 4, record_states=True)[1][:, 0, 0]
    assert_allclose(got, _lms_by_hand(model, 30, 0.1, 4), rtol=1e-13, atol=1e-15)


def test_partial_hand_fixed_masks():
    topo = complete_graph(2)
    A = np.full((2, 2), 0.5)
    rs = AlgorithmSpec("partial", 0.1, A=A, M=1).resolve(topo, 2)
    W = np.array([[1.0, 2.0], [3.0, 4.0]])[..., None]
    U = np.zeros((2, 2, 1))  # no adaptation: psi = w
    H = np.array([[1.0, 0.0], [0.0, 1.0]])[..., None]
    out = partial_step(W, Draws(U, np.zeros((2, 1)), H=H), rs)[..., 0]
    # node 0 takes entry 1 of node 1; node 1 takes entry 0 of node 0
    assert_allclose(out, [[1.0, 3.0], [2.0, 4.0]])


@pytest.mark.parametrize("kind,extra", [("diffusion", {}), ("rcd", {"m_k": 1}), ("partial", {"M": 2}),
                                        ("cd", {"M": 1}), ("dcd", {"M": 2, "M_grad": 1})])
def test_noiseless_fixed_point(kind, extra):
    topo = random_geometric_graph(6, 0.6, np.random.default_rng(0))
    model = generate_model(4, 6, sigma_v=0.0, seed=1)
    A = metropolis_weights(topo)
    spec = AlgorithmSpec(kind, 0.2, A=A if kind != "cd" else None, C=A, **extra)
    rs = spec.resolve(topo, 4)
    src = DrawSource(rs, model, 0, range(5))
    W = np.repeat(np.tile(model.w_true, (6, 1))[..., None], 5, axis=2)
    target = np.broadcast_to(model.w_true[None, :, None], W.shape)
    for _ in range(20):
        W = STEPS[kind](W, src.next(), rs)
        assert_allclose(W, target, rtol=1e-14)


@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), kind=st.sampled_from(["diffusion", "partial", "cd", "dcd"]))
def test_permutation_equivariance(seed, kind):
    rng = np.random.default_rng(seed)
    topo = random_geometric_graph(6, 0.6, rng)
    model = generate_model(3, 6, seed=seed % 1000)
    perm = rng.permutation(6)
    extra = {"partial": {"M": 2}, "cd": {"M": 1}, "dcd": {"M": 2, "M_grad": 1}}.get(kind, {})

    def spec_for(t):
        W = metropolis_weights(t)
        return AlgorithmSpec(kind, 0.05, A=None if kind == "cd" else W, C=W, **extra)

    base = simulate(spec_for(topo), model, topo, 15, [0, 1], seed, record_states=True)[1]
    ptopo = topo.permuted(perm)
    moved = simulate(spec_for(ptopo), model.permuted(perm), ptopo, 15, [0, 1], seed, node_keys=perm,
                     record_states=True)[1]
    assert_allclose(moved, base[:, :, perm], rtol=1e-12, atol=1e-14)


def test_rcd_permutation_uses_node_streams():
    # neighbor slots are reordered by a relabeling, so only the all-neighbors case maps draw for draw
    rng = np.random.default_rng(1)
    topo = random_geometric_graph(6, 0.6, rng)
    model = generate_model(3, 6, seed=2)
    perm = rng.permutation(6)
    ptopo = topo.permuted(perm)
    base = simulate(AlgorithmSpec("rcd", 0.05, A=metropolis_weights(topo)), model, topo, 10, [0], 1,
                    record_states=True)[1]
    moved = simulate(AlgorithmSpec("rcd", 0.05, A=metropolis_weights(ptopo)), model.permuted(perm), ptopo, 10,
                     [0], 1, node_keys=perm, record_states=True)[1]
    assert_allclose(moved, base[:, :, perm], rtol=1e-12, atol=1e-14)


# Monte-Carlo driver

def test_chunk_and_batch_invariance(net):
    topo, model, C = net
    spec = AlgorithmSpec("dcd", 0.05, C=C, M=2, M_grad=1)
    a = simulate(spec, model, topo, 60, range(6), 9, chunk=7)[0]
    b = simulate(spec, model, topo, 60, range(6), 9, chunk=1000)[0]
    c = np.concatenate([simulate(spec, model, topo, 60, [r], 9)[0] for r in range(6)])
    assert_array_equal(a, b)
    assert_array_equal(a, c)
    serial = run(spec, model, topo, 60, 6, 9, batch_size=6)
    with ThreadPoolExecutor(3) as ex:
        threaded = run(spec, model, topo, 60, 6, 9, batch_size=2, executor=ex)
    assert_array_equal(serial.msd, threaded.msd)


def test_identical_runs_average_to_one(net):
    topo, model, C = net
    spec = AlgorithmSpec("diffusion", 0.05, C=C)
    one = simulate(spec, model, topo, 30, [4], 2)[0]
    two = simulate(spec, model, topo, 30, [4, 4], 2)[0]
    assert_array_equal(two.mean(axis=0), one[0])


def test_run_is_deterministic_and_nonnegative(net):
    topo, model, C = net
    spec = AlgorithmSpec("partial", 0.05, A=C, M=1)
    a = run(spec, model, topo, 50, 4, 1, keep_runs=True)
    b = run(spec, model, topo, 50, 4, 1)
    assert_array_equal(a.msd, b.msd)
    assert np.all(a.per_run >= 0)
    assert a.msd[0] == pytest.approx(model.w_true @ model.w_true)
    assert a.iterations == 50


def test_divergence_reported(net):
    topo, model, C = net
    model = generate_model(4, 8, sigma_u=[0.3] * 7 + [3.0], seed=3)
    bound = 2 / 9.0
    with pytest.raises(DivergenceError) as info:
        run(AlgorithmSpec("dcd", 10 * bound, C=C, M=2, M_grad=1), model, topo, 2000, 2, 0)
    assert 1 <= info.value.iteration < 2000
    assert "diverged at iteration" in str(info.value)


def test_rcd_selection_frequency():
    topo = star_graph(4)
    m_k = np.array([2, 1, 1, 1, 1])
    rs = AlgorithmSpec("rcd", 0.1, A=metropolis_weights(topo), m_k=m_k).resolve(topo, 2)
    src = DrawSource(rs, generate_model(2, 5, seed=0), 0, range(50))
    counts = np.zeros(rs.nbr.shape)
    n = 2000
    for _ in range(n):
        sel = src.next().select
        assert_array_equal(sel.sum(axis=1), np.repeat(m_k[:, None], 50, axis=1))
        counts += sel.sum(axis=2)
    freq = counts / (n * 50)
    assert_allclose(freq[0, 1:], 0.5, rtol=0.01)
    assert_allclose(freq[1:, 1], 1.0)


# spec validation and reporting

def test_compression_ratios():
    assert AlgorithmSpec("dcd", 0.1, M=3, M_grad=1).compression_ratio(5) == Fraction(5, 2)
    assert AlgorithmSpec("dcd", 0.1, M=3, M_grad=3).compression_ratio(5) == Fraction(10, 6)
    assert AlgorithmSpec("cd", 0.1, M=5).compression_ratio(50) == Fraction(100, 55)
    assert AlgorithmSpec("partial", 0.1, M=2).compression_ratio(4) == 4
    assert AlgorithmSpec("diffusion", 0.1).compression_ratio(4) == 1
    assert AlgorithmSpec("rcd", 0.1, m_k=1).compression_ratio(3, star_graph(3)) == 3


@pytest.mark.parametrize("spec,msg", [
    (AlgorithmSpec("dcd", 0.1, M=5, M_grad=1), "M must be"),
    (AlgorithmSpec("dcd", 0.1, M=2, M_grad=0), "M_grad must be"),
    (AlgorithmSpec("rcd", 0.1, m_k=4), "m_k must lie"),
    (AlgorithmSpec("lms", 0.1), "unknown algorithm"),
    (AlgorithmSpec("diffusion", -0.1), "positive"),
    (AlgorithmSpec("diffusion", 0.1, C=np.full((4, 4), 0.25)), "support violations"),
])
def test_spec_validation(spec, msg):
    with pytest.raises(SpecError, match=msg):
        spec.resolve(star_graph(3), 4)


def test_node_count_mismatch():
    with pytest.raises(SpecError, match="nodes"):
        simulate(AlgorithmSpec("diffusion", 0.1), generate_model(2, 3), complete_graph(4), 5, [0], 0)
