import json

import jax
import jax.numpy as jnp
import numpy as np
import pytest

from lgnn import autodiff, graphmodel, systems
from lgnn.graphmodel import ClnnConfig, ClnnModel, LgnnModel, ModelConfig

from conftest import random_chain_state


def _sp(x, b=4.0):
    return 0.5 * (x + np.sqrt(x * x + b))


def _dense(p, name, x):
    return x @ np.asarray(p[f"{name}.w"]) + np.asarray(p[f"{name}.b"])


def _oracle_net(p, cfg, edges, node_x, edge_x):
    """Straight-line transcription with explicit per-node and per-edge loops."""
    b = cfg.squareplus_b

    def mlp(prefix, x):
        for k in range(cfg.mlp_layers + 1):
            x = _dense(p, f"{prefix}.{k}", x)
            if k < cfg.mlp_layers:
                x = _sp(x, b)
        return x

    h = [_sp(_dense(p, "node_enc", x), b) for x in node_x]
    he = [_sp(_dense(p, "edge_enc", x), b) for x in edge_x]
    for r in range(cfg.mp_rounds):
        WE = np.asarray(p[f"round{r}.W_E.w"])
        WU = np.asarray(p[f"round{r}.W_U.w"])
        he_next = []
        for e, (i, j) in enumerate(edges):
            z = he[e] + np.concatenate([h[i], h[j]]) @ WE
            he_next.append(_sp(mlp(f"round{r}.edge_mlp", z), b))
        h_next = []
        for node in range(len(h)):
            agg = np.zeros_like(h[node])
            for e, (i, j) in enumerate(edges):
                if node in (i, j):
                    agg = agg + he[e] @ WU
            h_next.append(_sp(mlp(f"round{r}.node_mlp", h[node] + agg), b))
        h, he = h_next, he_next
    return sum(float(mlp("readout", z)[0]) for z in he)


def _oracle_lagrangian(model, topo, q, qdot):
    n, d = topo.n_nodes, topo.dim
    x = np.zeros((n, 3))
    v = np.zeros((n, 3))
    x[:, :d] = np.asarray(q).reshape(n, d)
    v[:, :d] = np.asarray(qdot).reshape(n, d)
    edges = topo.edges()
    onehot = np.eye(model.config.type_vocab)[topo.types]
    ep = [np.concatenate([onehot[e], x[i] - x[j]]) for e, (i, j) in enumerate(edges)]
    ek = [np.concatenate([onehot[e], np.cross(x[i] - x[j], v[i] - v[j])]) for e, (i, j) in enumerate(edges)]
    V = _oracle_net(model.params["potential"], model.config, edges, x, ep)
    T = _oracle_net(model.params["kinetic"], model.config, edges, v, ek)
    return T - V


def test_squareplus_values():
    assert float(graphmodel.squareplus(0.0)) == 1.0
    assert float(jax.grad(graphmodel.squareplus)(0.0)) == 0.5
    big = 1e6
    assert abs(float(graphmodel.squareplus(big)) - big) < 1e-5
    assert 0 < float(graphmodel.squareplus(-big)) < 1e-5
    xs = jnp.linspace(-50, 50, 1001)
    assert np.all(np.diff(np.asarray(graphmodel.squareplus(xs))) > 0)
    curv = jax.vmap(jax.grad(jax.grad(graphmodel.squareplus)))(xs)
    assert np.isfinite(np.asarray(curv)).all() and float(curv.max()) <= 0.25 + 1e-15


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(embedding_dim=0)
    with pytest.raises(ValueError):
        ModelConfig(squareplus_b=0.0)


def test_parameter_count_is_deterministic():
    # per network: encoders 20 + 30, two rounds of 305, readout 71
    assert LgnnModel.init(seed=0).n_params == 2 * 731
    assert LgnnModel.init(seed=5).n_params == 2 * 731
    a = LgnnModel.init(seed=3)
    b = LgnnModel.init(seed=3)
    for k in a.params["kinetic"]:
        np.testing.assert_array_equal(a.params["kinetic"][k], b.params["kinetic"][k])


def test_features(rng):
    topo = systems.catalog("chain-4").topology
    state, _, _ = random_chain_state(topo, rng)
    _, _, _, ek = graphmodel.featurize(topo, state.q, np.zeros_like(state.qdot))
    np.testing.assert_array_equal(ek[:, 2:], 0.0)
    v = np.tile([0.3, -1.2], topo.n_nodes)
    _, _, _, ek = graphmodel.featurize(topo, state.q, v)
    np.testing.assert_array_equal(ek[:, 2:], 0.0)
    xp, ep, xk, ek = graphmodel.featurize(topo, state.q, state.qdot)
    np.testing.assert_array_equal(ek[:, 2:4], 0.0)
    assert np.abs(np.asarray(ek[:, 4])).max() > 0
    np.testing.assert_array_equal(ep[:, :2], np.eye(2)[topo.types])
    assert xp.shape == (5, 3) and ep.shape == (4, 5)


def test_type_vocabulary_is_enforced():
    topo = systems.chain_topology(2).replace(types=[0, 2])
    with pytest.raises(graphmodel.TypeVocabularyError):
        LgnnModel.init().lagrangian_fn(topo)


def test_transcription_oracle(rng):
    topo = systems.catalog("chain-2").topology
    for seed in range(3):
        model = LgnnModel.init(seed=seed)
        state, _, _ = random_chain_state(topo, rng)
        L = float(model.lagrangian_fn(topo)(jnp.asarray(state.q), jnp.asarray(state.qdot)))
        assert abs(L - _oracle_lagrangian(model, topo, state.q, state.qdot)) <= 1e-12
    cfg = ModelConfig(embedding_dim=3, mlp_hidden=4, mlp_layers=2, mp_rounds=3)
    model = LgnnModel.init(cfg, seed=9)
    t3 = systems.catalog("T1").topology
    q = t3.q_ref.reshape(-1)
    v = rng.normal(size=q.shape)
    L = float(model.lagrangian_fn(t3)(jnp.asarray(q), jnp.asarray(v)))
    assert abs(L - _oracle_lagrangian(model, t3, q, v)) <= 1e-12


def test_permutation_invariance(rng):
    topo = systems.catalog("chain-4").topology
    model = LgnnModel.init(seed=1)
    state, _, _ = random_chain_state(topo, rng)
    L0 = float(model.lagrangian_fn(topo)(jnp.asarray(state.q), jnp.asarray(state.qdot)))
    for _ in range(20):
        perm = rng.permutation(topo.n_nodes)
        p = topo.permuted(perm)
        q = np.zeros_like(state.q).reshape(-1, 2)
        v = np.zeros_like(q)
        q[perm] = state.q.reshape(-1, 2)
        v[perm] = state.qdot.reshape(-1, 2)
        L = float(model.lagrangian_fn(p)(jnp.asarray(q.reshape(-1)), jnp.asarray(v.reshape(-1))))
        assert abs(L - L0) <= 1e-12


def test_disjoint_union_doubles(rng):
    topo = systems.catalog("chain-3").topology
    model = LgnnModel.init(seed=2)
    state, _, _ = random_chain_state(topo, rng)
    both = topo.union(topo)
    L1 = float(model.lagrangian_fn(topo)(jnp.asarray(state.q), jnp.asarray(state.qdot)))
    L2 = float(model.lagrangian_fn(both)(jnp.asarray(np.tile(state.q, 2)), jnp.asarray(np.tile(state.qdot, 2))))
    assert abs(L2 - 2 * L1) <= 1e-13 * abs(L1)


def test_potential_stream_ignores_velocities(rng):
    topo = systems.catalog("chain-4").topology
    model = LgnnModel.init(seed=3)
    state, _, _ = random_chain_state(topo, rng)
    _, V1 = model.energies(model.params, topo, jnp.asarray(state.q), jnp.asarray(state.qdot))
    _, V2 = model.energies(model.params, topo, jnp.asarray(state.q), jnp.asarray(rng.normal(size=10)))
    assert float(V1) == float(V2)


def test_kinetic_stream_sees_positions_only_through_omega(rng):
    topo = systems.catalog("chain-4").topology
    model = LgnnModel.init(seed=3)
    state, _, _ = random_chain_state(topo, rng)
    shift = np.tile([2.0, -4.0], topo.n_nodes)
    T1, V1 = model.energies(model.params, topo, jnp.asarray(state.q), jnp.asarray(state.qdot))
    T2, V2 = model.energies(model.params, topo, jnp.asarray(state.q + shift), jnp.asarray(state.qdot))
    assert abs(float(T1) - float(T2)) <= 1e-12
    assert abs(float(V1) - float(V2)) > 1e-6


def test_mass_matrix_symmetry_and_locality(rng):
    topo = systems.catalog("chain-8").topology
    hops = topo.graph_distances()
    for seed in range(3):
        model = LgnnModel.init(seed=seed)
        state, _, _ = random_chain_state(topo, rng)
        L = model.lagrangian_fn(topo)
        M = autodiff.hessian_block(L, (state.q, state.qdot), row=1, col=1)
        assert np.abs(M - M.T).max() <= 1e-10
        node = np.arange(topo.n_coords) // 2
        far = hops[np.ix_(node, node)] > model.config.mp_rounds + 1
        assert far.any()
        assert np.abs(M[far]).max() <= 1e-12
        near = hops[np.ix_(node, node)] == model.config.mp_rounds + 1
        assert np.abs(M[near]).max() > 1e-12


def test_checkpoint_round_trip(tmp_path, rng):
    topo = systems.catalog("chain-4").topology
    model = LgnnModel.init(ModelConfig(embedding_dim=4), seed=7)
    path = tmp_path / "ckpt.json"
    graphmodel.save_checkpoint(model, path, {"note": "x"})
    data = json.loads(path.read_text())
    assert {"config", "seed", "potential_net", "kinetic_net"} <= set(data)
    again = graphmodel.load_checkpoint(path)
    state, _, _ = random_chain_state(topo, rng)
    a = float(model.lagrangian_fn(topo)(jnp.asarray(state.q), jnp.asarray(state.qdot)))
    b = float(again.lagrangian_fn(topo)(jnp.asarray(state.q), jnp.asarray(state.qdot)))
    assert a == b
    assert again.config == model.config and again.seed == 7


def test_clnn_behaviour(tmp_path, rng):
    topo = systems.catalog("chain-4").topology
    model = ClnnModel.init(ClnnConfig(n_coords=topo.n_coords), seed=0)
    zero = model.with_params({"net": {k: jnp.zeros_like(v) for k, v in model.params["net"].items()}})
    bias = {**zero.params["net"], "mlp.2.b": jnp.array([0.75])}
    zero = zero.with_params({"net": bias})
    state, _, _ = random_chain_state(topo, rng)
    L = zero.lagrangian_fn(topo)
    assert float(L(jnp.asarray(state.q), jnp.asarray(state.qdot))) == 0.75
    L = model.lagrangian_fn(topo)
    q, v = jnp.asarray(state.q), jnp.asarray(state.qdot)
    assert float(L(q, v)) == float(L(q, v))
    g = autodiff.gradient(L, state.q, state.qdot, argnum=1)
    h = 1e-5
    fd = np.array([(float(L(q, v.at[k].add(h))) - float(L(q, v.at[k].add(-h)))) / (2 * h)
                   for k in range(v.size)])
    assert np.linalg.norm(g - fd) / np.linalg.norm(fd) < 1e-6
    with pytest.raises(graphmodel.SizeMismatchError):
        model.lagrangian_fn(systems.catalog("chain-8").topology)
    graphmodel.save_checkpoint(model, tmp_path / "c.json")
    again = graphmodel.load_checkpoint(tmp_path / "c.json")
    assert float(again.lagrangian_fn(topo)(q, v)) == float(L(q, v))
