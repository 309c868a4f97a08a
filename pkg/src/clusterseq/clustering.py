"""User clustering: competing autoencoders, a user-relation graph with a
graph-convolutional branch, target sharpening and feature-wise conditioning.

Two assignment views exist for each user: the encoding view (softmax over
negated reconstruction distances of the per-cluster autoencoders) and the
topological view (softmax over the GCN output row).  Sharpened versions of
these views act as fixed targets for the KL alignment losses; gradient never
flows through a target.

The relation graph is built from detached embedding values: top-k neighbour
selection is not differentiable, so the normalized adjacency is a constant of
the step by construction.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Variable
from .config import RunConfig
from .errors import ContractError, DimensionError, DomainError

GCN_LAYERS = 2  # mirrors the autoencoder encoder depth


def ae_layer_dims(d: int) -> tuple[list, list]:
    """Encoder and mirrored decoder layer widths for input width d."""
    d2 = max(1, d // 2)
    d4 = max(1, d // 4)
    return [(d, d2), (d2, d4)], [(d4, d2), (d2, d)]


def init_cluster_params(cfg: RunConfig, rng: np.random.Generator) -> dict:
    """Autoencoder bank, GCN weights and conditioning heads.

    Layer weights are uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)).  The
    conditioning heads start at the exact identity (zero weights, gain bias
    one): an untrained assignment then cannot perturb the scoring path, and
    the heads move only once the gradient correlates assignments with useful
    shifts.
    """
    d, m = cfg.embed_dim, cfg.num_clusters
    enc_dims, dec_dims = ae_layer_dims(d)
    params: dict[str, Variable] = {}

    def dense(name, fan_in, fan_out, bias_value=0.0, zero_weight=False):
        bound = 0.0 if zero_weight else 1.0 / np.sqrt(fan_in)
        params[f"{name}.weight"] = ad.parameter(rng.uniform(-bound, bound, (fan_out, fan_in)))
        params[f"{name}.bias"] = ad.parameter(np.full(fan_out, bias_value))

    for j in range(m):
        for layer, (fan_in, fan_out) in enumerate(enc_dims):
            dense(f"ae{j}.enc{layer}", fan_in, fan_out)
        for layer, (fan_in, fan_out) in enumerate(dec_dims):
            dense(f"ae{j}.dec{layer}", fan_in, fan_out)
    widths = [d] + [out for _, out in enc_dims]
    for layer in range(GCN_LAYERS + 1):
        fan_in = widths[layer]
        fan_out = widths[layer + 1] if layer < GCN_LAYERS else m
        bound = 1.0 / np.sqrt(fan_in)
        params[f"gcn.w{layer + 1}"] = ad.parameter(rng.uniform(-bound, bound, (fan_in, fan_out)))
    dense("film_gamma", m, d, bias_value=1.0, zero_weight=True)
    dense("film_beta", m, d, zero_weight=True)
    return params


def _dense(params: dict, name: str, x: Variable) -> Variable:
    return ad.add(ad.matvec(params[f"{name}.weight"], x), params[f"{name}.bias"])


def autoencode(e: Variable, params: dict, j: int, cfg: RunConfig):
    """Run autoencoder j; returns encoder-side layer outputs and the
    reconstruction.  All layers are relu except the final linear output."""
    enc_dims, dec_dims = ae_layer_dims(cfg.embed_dim)
    h_layers = [e]
    h = e
    for layer in range(len(enc_dims)):
        h = ad.apply_activation(_dense(params, f"ae{j}.enc{layer}", h), "relu")
        h_layers.append(h)
    out = h
    last = len(dec_dims) - 1
    for layer in range(len(dec_dims)):
        out = _dense(params, f"ae{j}.dec{layer}", out)
        if layer != last:
            out = ad.apply_activation(out, "relu")
    return h_layers, out


@dataclass
class UserClusterPass:
    distances: list          # M reconstruction distances (0-d Variables)
    h_layers: list           # per autoencoder: encoder-side layer outputs
    assignment: Variable     # encoding-view assignment, (M,)

    @property
    def best(self) -> int:
        values = np.array([float(d.value) for d in self.distances])
        return int(np.argmin(values))  # ties resolve to the lowest index


def user_cluster_pass(e: Variable, params: dict, cfg: RunConfig) -> UserClusterPass:
    distances, h_all = [], []
    for j in range(cfg.num_clusters):
        h_layers, recon = autoencode(e, params, j, cfg)
        distances.append(ad.l2_distance(e, recon))
        h_all.append(h_layers)
    neg = ad.pack([ad.scale(d, -1.0) for d in distances])
    return UserClusterPass(distances, h_all, ad.softmax(neg))


def encoding_assignment(e: Variable, params: dict, cfg: RunConfig) -> Variable:
    """Soft assignment from reconstruction distances alone; needs no graph
    and no other users, so it is the cold-start inference path."""
    return user_cluster_pass(e, params, cfg).assignment


def reconstruction_loss(pass_: UserClusterPass) -> Variable:
    """Distance of the best autoencoder; gradient flows only through it."""
    return pass_.distances[pass_.best]


# ---------------------------------------------------------------------------
# relation graph


@dataclass
class RelationGraph:
    a_hat: np.ndarray        # symmetric normalized adjacency with self loops
    neighbors: list          # per user: selected neighbour indices


def build_relation_graph(embeddings: np.ndarray, item_sets: list, n_adj: int,
                         overlap_weight: float) -> RelationGraph:
    """Top-k similarity graph over batch users.

    Pair scores are cosine similarity of the embedding values plus
    ``overlap_weight`` times the shared-item count.  Each user keeps its
    ``n_adj`` best-scoring neighbours (ties to the lower index); the adjacency
    is then symmetrized by elementwise max and normalized as
    Deg^{-1/2} (A + I) Deg^{-1/2}.
    """
    emb = np.asarray(embeddings, dtype=np.float64)
    b = emb.shape[0]
    if emb.ndim != 2 or b < 2:
        raise ContractError(f"build_relation_graph: need a (B>=2, D) matrix, got {emb.shape}")
    if len(item_sets) != b:
        raise DimensionError(f"build_relation_graph: {len(item_sets)} item sets for {b} users")
    n_adj = min(n_adj, b - 1)

    norms = np.linalg.norm(emb, axis=1)
    safe = np.where(norms == 0.0, 1.0, norms)
    cos = (emb @ emb.T) / np.outer(safe, safe)
    cos[norms == 0.0, :] = 0.0
    cos[:, norms == 0.0] = 0.0

    overlap = np.zeros((b, b))
    for i in range(b):
        for j in range(i + 1, b):
            shared = len(item_sets[i] & item_sets[j])
            overlap[i, j] = overlap[j, i] = shared
    score = cos + overlap_weight * overlap
    np.fill_diagonal(score, -np.inf)

    adjacency = np.zeros((b, b))
    neighbors = []
    for i in range(b):
        order = np.lexsort((np.arange(b), -score[i]))
        chosen = order[:n_adj]
        adjacency[i, chosen] = 1.0
        neighbors.append(sorted(int(c) for c in chosen))
    adjacency = np.maximum(adjacency, adjacency.T)

    looped = adjacency + np.eye(b)
    inv_sqrt_deg = 1.0 / np.sqrt(looped.sum(axis=1))
    a_hat = looped * np.outer(inv_sqrt_deg, inv_sqrt_deg)
    return RelationGraph(a_hat, neighbors)


def gcn_forward(h_stacks: list, a_hat: np.ndarray, params: dict, cfg: RunConfig) -> Variable:
    """Graph branch: each layer mixes the previous graph state with the
    matching autoencoder layer, propagates over the normalized adjacency and
    projects.  The final projection to cluster logits has no nonlinearity."""
    if len(h_stacks) != GCN_LAYERS + 1:
        raise ContractError(f"gcn_forward: expected {GCN_LAYERS + 1} layer stacks")
    a = ad.constant(a_hat)
    eps = cfg.gcn_mix
    z = h_stacks[0]
    for layer in range(GCN_LAYERS + 1):
        mixed = ad.add(ad.scale(z, 1.0 - eps), ad.scale(h_stacks[layer], eps))
        z = ad.matmul(ad.matmul(a, mixed), params[f"gcn.w{layer + 1}"])
        if layer < GCN_LAYERS:
            z = ad.apply_activation(z, "relu")
    return z


def topological_assignment(z_row: Variable) -> Variable:
    return ad.softmax(z_row)


# ---------------------------------------------------------------------------
# sharpening and losses


def sharpen(assignments: np.ndarray, linear_denominator: bool = False) -> np.ndarray:
    """Frequency-corrected squared sharpening of an assignment matrix.

    Entries are squared and divided by their column mass, then rows are
    renormalized; columns with zero mass contribute nothing.  The
    ``linear_denominator`` switch reproduces the degraded textbook form whose
    denominator skips the squaring, leaving rows unnormalized.
    """
    c = np.asarray(assignments, dtype=np.float64)
    if c.ndim != 2 or c.shape[1] < 1:
        raise DimensionError(f"sharpen: expected a (B, M) matrix, got {c.shape}")
    if np.any(c < 0.0):
        raise DomainError("sharpen: negative entries")
    row_sums = c.sum(axis=1)
    if np.any(np.abs(row_sums - 1.0) > 1e-6):
        raise DomainError("sharpen: rows must sum to 1")
    f = c.sum(axis=0)
    nonzero = f > 0.0
    num = np.zeros_like(c)
    num[:, nonzero] = c[:, nonzero] ** 2 / f[nonzero]
    if linear_denominator:
        den_terms = np.zeros_like(c)
        den_terms[:, nonzero] = c[:, nonzero] / f[nonzero]
        return num / den_terms.sum(axis=1, keepdims=True)
    return num / num.sum(axis=1, keepdims=True)


def sharpen_assignment(c: Variable) -> Variable:
    """Differentiable sharpening of a single user's assignment.

    With one row the column masses equal the entries themselves, so the
    squared-over-frequency form reduces algebraically to plain row
    normalization; this keeps the exact gradient without a 0/0 hazard.
    """
    if c.value.ndim != 1:
        raise DimensionError(f"sharpen_assignment: expected a vector, got {c.value.shape}")
    return ad.div(c, ad.vsum(c))


def film_condition(u: Variable, c: Variable, params: dict) -> Variable:
    """Feature-wise affine conditioning of a user vector on its assignment."""
    gamma = _dense(params, "film_gamma", c)
    beta = _dense(params, "film_beta", c)
    return ad.add(ad.mul(gamma, u), beta)


@dataclass
class FrozenClusterStep:
    """Data-dependent constants captured at a base point so a finite-difference
    probe sees exactly the function backward() differentiates."""

    graph: RelationGraph
    ae_choice: list
    targets: tuple  # (sharpened encoding view, sharpened topological view)


@dataclass
class ClusterBatch:
    loss: Variable
    reconstruction: Variable
    modularity: Variable
    combination: Variable
    encoding_view: np.ndarray
    topological_view: np.ndarray
    graph: RelationGraph
    ae_choice: list
    targets: tuple


def cluster_batch_loss(e_vars: list, item_sets: list, params: dict, cfg: RunConfig,
                       frozen: FrozenClusterStep | None = None) -> ClusterBatch:
    """Assemble the clustering objective over a batch of user embeddings.

    Returns the total loss (reconstruction + modularity + combination, each a
    batch mean) along with both assignment views and the constants used, so a
    caller can freeze them for gradient probes.
    """
    b = len(e_vars)
    if b < 2:
        raise ContractError(f"cluster_batch_loss: need at least 2 users, got {b}")
    passes = [user_cluster_pass(e, params, cfg) for e in e_vars]
    choice = frozen.ae_choice if frozen is not None else [p.best for p in passes]

    recon = ad.scale(ad.add_n([passes[u].distances[choice[u]] for u in range(b)]), 1.0 / b)

    if frozen is not None:
        graph = frozen.graph
    else:
        emb = np.stack([e.value for e in e_vars])
        graph = build_relation_graph(
            emb, item_sets, min(cfg.graph_neighbors, b - 1), cfg.item_overlap_weight
        )

    stacks = [ad.stack_rows(e_vars)]
    for layer in range(1, GCN_LAYERS + 1):
        stacks.append(ad.stack_rows([passes[u].h_layers[choice[u]][layer] for u in range(b)]))
    z = gcn_forward(stacks, graph.a_hat, params, cfg)
    c_top = ad.softmax(z)

    encoding_view = np.stack([p.assignment.value for p in passes])
    topological_view = c_top.value.copy()
    if frozen is not None:
        enc_target, top_target = frozen.targets
    else:
        enc_target = sharpen(encoding_view, cfg.sharpen_linear_denominator)
        top_target = sharpen(topological_view, cfg.sharpen_linear_denominator)

    mod_terms, combo_terms = [], []
    for u in range(b):
        row = ad.take_row(c_top, u)
        mod_terms.append(ad.kl_divergence(ad.constant(top_target[u]), row))
        combo_terms.append(ad.kl_divergence(ad.constant(enc_target[u]), row))
    modularity = ad.scale(ad.add_n(mod_terms), 1.0 / b)
    combination = ad.scale(ad.add_n(combo_terms), 1.0 / b)

    total = ad.add_n([recon, modularity, combination])
    return ClusterBatch(
        loss=total,
        reconstruction=recon,
        modularity=modularity,
        combination=combination,
        encoding_view=encoding_view,
        topological_view=topological_view,
        graph=graph,
        ae_choice=list(choice),
        targets=(enc_target, top_target),
    )
