"""Autoencoder bank, relation graph, sharpening and conditioning tests."""
import numpy as np
import pytest

from clusterseq import autodiff as ad
from clusterseq import clustering
from clusterseq.config import RunConfig
from clusterseq.errors import ContractError, DimensionError, DomainError


def small_cfg(**overrides) -> RunConfig:
    base = dict(embed_dim=8, k_shots=3, num_clusters=3, batch_size=4)
    base.update(overrides)
    return RunConfig(**base)


def entropy(rows: np.ndarray) -> np.ndarray:
    p = np.asarray(rows, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, -p * np.log(p), 0.0)
    return terms.sum(axis=-1)


# ---------------------------------------------------------------------------
# autoencoders


def test_ae_layer_dims():
    assert clustering.ae_layer_dims(16) == ([(16, 8), (8, 4)], [(4, 8), (8, 16)])
    assert clustering.ae_layer_dims(5) == ([(5, 2), (2, 1)], [(1, 2), (2, 5)])
    # tiny widths floor at one unit
    assert clustering.ae_layer_dims(1) == ([(1, 1), (1, 1)], [(1, 1), (1, 1)])


def test_autoencode_shapes_and_relu_range():
    cfg = small_cfg()
    params = clustering.init_cluster_params(cfg, np.random.default_rng(0))
    e = ad.constant(np.random.default_rng(1).normal(0, 1, 8))
    h_layers, recon = clustering.autoencode(e, params, 0, cfg)
    assert [h.value.shape for h in h_layers] == [(8,), (4,), (2,)]
    assert recon.value.shape == (8,)
    for h in h_layers[1:]:
        assert np.all(h.value >= 0.0)


def test_user_cluster_pass_assignment_and_best():
    cfg = small_cfg()
    params = clustering.init_cluster_params(cfg, np.random.default_rng(3))
    e = ad.constant(np.random.default_rng(4).normal(0, 1, 8))
    pass_ = clustering.user_cluster_pass(e, params, cfg)
    assert len(pass_.distances) == 3
    a = pass_.assignment.value
    assert a.shape == (3,) and abs(a.sum() - 1.0) <= 1e-12 and np.all(a > 0)
    dists = [float(d.value) for d in pass_.distances]
    assert pass_.best == int(np.argmin(dists))
    # the closest autoencoder gets the largest assignment mass
    assert int(np.argmax(a)) == pass_.best
    np.testing.assert_array_equal(
        clustering.encoding_assignment(e, params, cfg).value, a
    )
    assert float(clustering.reconstruction_loss(pass_).value) == min(dists)


def test_best_tie_resolves_to_lowest_index():
    cfg = small_cfg(num_clusters=2)
    params = clustering.init_cluster_params(cfg, np.random.default_rng(3))
    # make autoencoder 1 an exact copy of autoencoder 0
    for name in list(params):
        if name.startswith("ae1."):
            twin = params[name.replace("ae1.", "ae0.")]
            params[name] = ad.parameter(twin.value.copy())
    e = ad.constant(np.random.default_rng(4).normal(0, 1, 8))
    pass_ = clustering.user_cluster_pass(e, params, cfg)
    assert float(pass_.distances[0].value) == float(pass_.distances[1].value)
    assert pass_.best == 0


# ---------------------------------------------------------------------------
# sharpening


def test_sharpen_hand_oracle():
    out = clustering.sharpen(np.array([[0.5, 0.5], [0.9, 0.1]]))
    # exact fractions: row 1 is (3/10, 7/10), row 2 is (243/250, 7/250)
    np.testing.assert_allclose(out, [[0.3, 0.7], [0.972, 0.028]], atol=1e-6)


def test_sharpen_one_hot_fixed_point():
    for c in (np.eye(3), np.array([[1.0, 0.0], [1.0, 0.0]])):
        np.testing.assert_allclose(clustering.sharpen(c), c, atol=1e-12)


def test_sharpen_zero_column_stays_zero():
    out = clustering.sharpen(np.array([[0.5, 0.5, 0.0], [0.25, 0.75, 0.0]]))
    np.testing.assert_array_equal(out[:, 2], [0.0, 0.0])
    np.testing.assert_allclose(out.sum(axis=1), [1.0, 1.0], rtol=1e-12)


def test_sharpen_rows_are_distributions():
    rng = np.random.default_rng(8)
    raw = rng.dirichlet(np.ones(4), size=12)
    out = clustering.sharpen(raw)
    assert np.all(out >= 0)
    np.testing.assert_allclose(out.sum(axis=1), np.ones(12), rtol=1e-12)


def test_sharpen_frequency_correction_can_raise_a_row_entropy():
    # The column division rebalances toward rare clusters, so a single row's
    # entropy may rise even though squaring alone always lowers it.  Mean
    # entropy over the batch still falls.
    c = np.vstack([[0.55, 0.45], np.tile([4.25 / 7.0, 2.75 / 7.0], (7, 1))])
    np.testing.assert_allclose(c.sum(axis=0), [4.8, 3.2], rtol=1e-12)
    out = clustering.sharpen(c)
    assert entropy(out[0]) > entropy(c[0])
    assert entropy(out).mean() < entropy(c).mean()


def test_sharpen_linear_denominator_variant():
    out = clustering.sharpen(
        np.array([[0.5, 0.5], [0.9, 0.1]]), linear_denominator=True
    )
    # first row lands on (0.15, 0.35); rows are intentionally unnormalized
    np.testing.assert_allclose(out[0], [0.15, 0.35], rtol=1e-12)
    assert abs(out[0].sum() - 1.0) > 0.1


def test_sharpen_input_validation():
    with pytest.raises(DimensionError):
        clustering.sharpen(np.array([0.5, 0.5]))
    with pytest.raises(DomainError):
        clustering.sharpen(np.array([[1.5, -0.5], [0.5, 0.5]]))
    with pytest.raises(DomainError):
        clustering.sharpen(np.array([[0.5, 0.2], [0.5, 0.5]]))


def test_sharpen_assignment_matches_matrix_form():
    c = np.array([0.2, 0.3, 0.5])
    v = clustering.sharpen_assignment(ad.parameter(c.copy()))
    np.testing.assert_allclose(v.value, clustering.sharpen(c[None])[0], rtol=1e-12)
    # for a single row the operation is plain normalization
    np.testing.assert_allclose(v.value, c, rtol=1e-12)

    params = {"c": ad.parameter(np.array([0.4, 0.1, 0.5]))}

    def f(p):
        return ad.vsum(ad.mul(clustering.sharpen_assignment(p["c"]),
                              ad.constant(np.array([1.0, -2.0, 0.5]))))

    assert ad.check_gradients(f, params, h=1e-5) <= 1e-7


def test_sharpen_assignment_rejects_matrix():
    with pytest.raises(DimensionError):
        clustering.sharpen_assignment(ad.constant(np.eye(2)))


# ---------------------------------------------------------------------------
# relation graph


def test_graph_symmetric_normalized_with_self_loops():
    rng = np.random.default_rng(12)
    emb = rng.normal(0, 1, (6, 8))
    sets = [set(rng.choice(20, size=5, replace=False)) for _ in range(6)]
    graph = clustering.build_relation_graph(emb, sets, 2, 0.1)
    a = graph.a_hat
    np.testing.assert_allclose(a, a.T, rtol=1e-12)
    assert np.all(np.diag(a) > 0)

    # rebuild A + I from the neighbour lists and renormalize independently
    adj = np.zeros((6, 6))
    for i, neigh in enumerate(graph.neighbors):
        assert len(neigh) == 2 and i not in neigh
        adj[i, neigh] = 1.0
    looped = np.maximum(adj, adj.T) + np.eye(6)
    inv = 1.0 / np.sqrt(looped.sum(axis=1))
    np.testing.assert_allclose(a, looped * np.outer(inv, inv), rtol=1e-12)


def test_graph_tie_breaks_to_lower_index():
    emb = np.ones((3, 4))  # all pairs tie at cosine 1
    sets = [set(), set(), set()]
    graph = clustering.build_relation_graph(emb, sets, 1, 0.0)
    assert graph.neighbors == [[1], [0], [0]]


def test_graph_item_overlap_steers_selection():
    emb = np.eye(3)  # pairwise cosine 0 everywhere
    sets = [{1, 2, 3}, {9}, {1, 2}]
    graph = clustering.build_relation_graph(emb, sets, 1, 0.1)
    # users 0 and 2 share two items; user 1 shares none and falls back to
    # the tie-break winner
    assert graph.neighbors[0] == [2]
    assert graph.neighbors[2] == [0]
    assert graph.neighbors[1] == [0]


def test_graph_zero_norm_rows_score_zero_cosine():
    emb = np.vstack([np.zeros(4), np.ones(4), np.ones(4)])
    sets = [set(), set(), set()]
    graph = clustering.build_relation_graph(emb, sets, 2, 0.0)
    assert np.all(np.isfinite(graph.a_hat))


def test_graph_input_validation():
    with pytest.raises(ContractError):
        clustering.build_relation_graph(np.ones((1, 4)), [set()], 1, 0.0)
    with pytest.raises(DimensionError):
        clustering.build_relation_graph(np.ones((3, 4)), [set()], 1, 0.0)


# ---------------------------------------------------------------------------
# graph branch and conditioning


def test_gcn_shapes_and_row_distributions():
    cfg = small_cfg(embed_dim=8, num_clusters=3)
    params = clustering.init_cluster_params(cfg, np.random.default_rng(7))
    rng = np.random.default_rng(8)
    b = 5
    stacks = [
        ad.constant(rng.normal(0, 1, (b, 8))),
        ad.constant(np.abs(rng.normal(0, 1, (b, 4)))),
        ad.constant(np.abs(rng.normal(0, 1, (b, 2)))),
    ]
    a_hat = np.eye(b)
    z = clustering.gcn_forward(stacks, a_hat, params, cfg)
    assert z.value.shape == (b, 3)
    row = clustering.topological_assignment(ad.take_row(z, 2))
    assert abs(float(np.sum(row.value)) - 1.0) <= 1e-12


def test_gcn_rejects_wrong_stack_count():
    cfg = small_cfg()
    params = clustering.init_cluster_params(cfg, np.random.default_rng(7))
    with pytest.raises(ContractError):
        clustering.gcn_forward([ad.constant(np.ones((2, 8)))], np.eye(2), params, cfg)


def test_film_identity_at_init_heads():
    cfg = small_cfg(embed_dim=4, num_clusters=2)
    params = clustering.init_cluster_params(cfg, np.random.default_rng(0))
    # zero weights leave only the biases: gain 1, shift 0 -> identity
    params["film_gamma.weight"] = ad.parameter(np.zeros((4, 2)))
    params["film_beta.weight"] = ad.parameter(np.zeros((4, 2)))
    u = ad.constant(np.array([1.0, -2.0, 0.5, 3.0]))
    c = ad.constant(np.array([0.7, 0.3]))
    out = clustering.film_condition(u, c, params)
    np.testing.assert_array_equal(out.value, u.value)


def test_film_matches_manual_affine():
    cfg = small_cfg(embed_dim=4, num_clusters=2)
    params = clustering.init_cluster_params(cfg, np.random.default_rng(5))
    u = np.array([1.0, -2.0, 0.5, 3.0])
    c = np.array([0.7, 0.3])
    out = clustering.film_condition(ad.constant(u), ad.constant(c), params)
    gamma = params["film_gamma.weight"].value @ c + params["film_gamma.bias"].value
    beta = params["film_beta.weight"].value @ c + params["film_beta.bias"].value
    np.testing.assert_allclose(out.value, gamma * u + beta, rtol=1e-12)


# ---------------------------------------------------------------------------
# batch objective


def make_batch(cfg, seed=0, b=4):
    rng = np.random.default_rng(seed)
    params = clustering.init_cluster_params(cfg, rng)
    e_vars = [ad.parameter(rng.normal(0, 1, cfg.embed_dim)) for _ in range(b)]
    sets = [set(rng.choice(30, size=6, replace=False).tolist()) for _ in range(b)]
    return params, e_vars, sets


def test_cluster_batch_components_and_views():
    cfg = small_cfg()
    params, e_vars, sets = make_batch(cfg, seed=2)
    batch = clustering.cluster_batch_loss(e_vars, sets, params, cfg)
    total = (float(batch.reconstruction.value) + float(batch.modularity.value)
             + float(batch.combination.value))
    assert abs(float(batch.loss.value) - total) <= 1e-12
    assert float(batch.modularity.value) >= 0.0
    assert float(batch.combination.value) >= 0.0
    assert batch.encoding_view.shape == (4, 3)
    assert batch.topological_view.shape == (4, 3)
    np.testing.assert_allclose(batch.encoding_view.sum(axis=1), np.ones(4), rtol=1e-12)
    np.testing.assert_allclose(
        batch.targets[0], clustering.sharpen(batch.encoding_view), rtol=1e-12
    )
    np.testing.assert_allclose(
        batch.targets[1], clustering.sharpen(batch.topological_view), rtol=1e-12
    )


def test_cluster_batch_needs_two_users():
    cfg = small_cfg()
    params, e_vars, sets = make_batch(cfg, b=1)
    with pytest.raises(ContractError):
        clustering.cluster_batch_loss(e_vars, sets, params, cfg)


def test_cluster_batch_gradients_with_frozen_constants():
    cfg = small_cfg(embed_dim=4, num_clusters=2, graph_neighbors=2)
    params, e_vars, sets = make_batch(cfg, seed=6, b=3)
    # zero biases park dead-bottleneck relu inputs exactly on the kink, where
    # central differences straddle two linear pieces; probe at a generic point
    rng = np.random.default_rng(99)
    for name, var in params.items():
        if name.endswith(".bias"):
            params[name] = ad.parameter(var.value + rng.normal(0, 0.05, var.value.shape))
    base = clustering.cluster_batch_loss(e_vars, sets, params, cfg)
    frozen = clustering.FrozenClusterStep(base.graph, base.ae_choice, base.targets)

    probe = dict(params)
    for i, e in enumerate(e_vars):
        probe[f"e{i}"] = e

    def f(p):
        es = [p[f"e{i}"] for i in range(3)]
        return clustering.cluster_batch_loss(es, sets, p, cfg, frozen=frozen).loss

    assert ad.check_gradients(f, probe, h=1e-4) <= 1e-5
