"""Message-passing backbone over molecular graphs.

Each layer sends a learned message along every directed edge, sums the
incoming messages per node, and applies a learned update to the pair
(state, aggregated message). A permutation-invariant readout pools the
final node states into one graph vector.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ParameterStore, Value
from .errors import InvalidConfig, ShapeError

READOUTS = ("sum", "mean")


@dataclass
class MolecularGraph:
    """Graph view of a molecule.

    ``edges`` holds directed (source, destination) pairs; an undirected
    bond contributes both directions. ``node_feats`` are the initial node
    features (one-hot atom identity by default), ``edge_feats`` one row per
    directed edge, ``targets`` the regression targets.
    """

    node_feats: np.ndarray
    edges: np.ndarray
    edge_feats: np.ndarray
    targets: np.ndarray

    def __post_init__(self):
        self.node_feats = np.asarray(self.node_feats, dtype=np.float64)
        self.edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        self.edge_feats = np.asarray(self.edge_feats, dtype=np.float64)
        self.targets = np.asarray(self.targets, dtype=np.float64)
        n = self.node_feats.shape[0]
        if self.edges.size:
            if self.edges.min() < 0 or self.edges.max() >= n:
                raise InvalidConfig("edge endpoint out of range")
            if np.any(self.edges[:, 0] == self.edges[:, 1]):
                raise InvalidConfig("self-loops are not allowed")
        if self.edge_feats.shape[0] != self.edges.shape[0]:
            raise InvalidConfig(
                f"edge_feats rows {self.edge_feats.shape[0]} != edge count {self.edges.shape[0]}"
            )

    @property
    def n_nodes(self) -> int:
        return self.node_feats.shape[0]

    @property
    def n_edges(self) -> int:
        return self.edges.shape[0]


@dataclass
class GnnConfig:
    layers: int = 3
    hidden: int = 32
    message_width: int = 32
    readout: str = "sum"
    activation: str = "relu"

    def __post_init__(self):
        if self.layers < 1:
            raise InvalidConfig(f"layers must be >= 1, got {self.layers}")
        if self.readout not in READOUTS:
            raise InvalidConfig(f"readout must be one of {READOUTS}, got {self.readout!r}")
        if self.activation not in ad.ACTIVATIONS:
            raise InvalidConfig(f"unknown activation {self.activation!r}")


def init_gnn_params(store: ParameterStore, cfg: GnnConfig, d0: int, d_edge: int,
                    rng: np.random.Generator, prefix: str = "gnn") -> None:
    """Create embedding, message, and update parameters in the store."""

    def dense(name, fan_in, fan_out):
        store.add(f"{prefix}.{name}.W", rng.normal(0.0, np.sqrt(2.0 / fan_in), (fan_in, fan_out)))
        store.add(f"{prefix}.{name}.b", np.zeros(fan_out))

    dense("embed", d0, cfg.hidden)
    for layer in range(cfg.layers):
        dense(f"l{layer}.msg1", 2 * cfg.hidden + d_edge, cfg.message_width)
        dense(f"l{layer}.msg2", cfg.message_width, cfg.message_width)
        dense(f"l{layer}.upd", cfg.hidden + cfg.message_width, cfg.hidden)


def initial_states(graph: MolecularGraph, store: ParameterStore, cfg: GnnConfig,
                   prefix: str = "gnn", node_feats: Value | None = None) -> Value:
    """h^0 = node_feats @ W_embed + b (a learned per-atom embedding)."""
    feats = node_feats if node_feats is not None else Value(graph.node_feats)
    return ad.add(ad.matmul(feats, store[f"{prefix}.embed.W"]), store[f"{prefix}.embed.b"])


def message_pass(h: Value, graph: MolecularGraph, store: ParameterStore, cfg: GnnConfig,
                 layer: int, prefix: str = "gnn") -> Value:
    """One round of message passing and node update.

    Messages go along directed edges: the destination node v receives
    M(h_v, h_src, e) from each incoming edge, where M is a one-hidden-layer
    perceptron; incoming messages are summed per node (nodes without
    incoming edges get a zero message). The update is
    h' = act(affine(concat(h, m))).
    """
    if h.data.shape != (graph.n_nodes, cfg.hidden):
        raise ShapeError(f"node states {h.data.shape} != ({graph.n_nodes}, {cfg.hidden})")
    act = ad.ACTIVATIONS[cfg.activation]
    if graph.n_edges > 0:
        src, dst = graph.edges[:, 0], graph.edges[:, 1]
        h_dst = ad.gather_rows(h, dst)
        h_src = ad.gather_rows(h, src)
        pair = ad.concat([h_dst, h_src, Value(graph.edge_feats)], axis=1)
        hidden = act(ad.add(ad.matmul(pair, store[f"{prefix}.l{layer}.msg1.W"]),
                            store[f"{prefix}.l{layer}.msg1.b"]))
        messages = ad.add(ad.matmul(hidden, store[f"{prefix}.l{layer}.msg2.W"]),
                          store[f"{prefix}.l{layer}.msg2.b"])
        m = ad.scatter_add_rows(messages, dst, graph.n_nodes)
    else:
        m = Value(np.zeros((graph.n_nodes, cfg.message_width)))
    joint = ad.concat([h, m], axis=1)
    return act(ad.add(ad.matmul(joint, store[f"{prefix}.l{layer}.upd.W"]),
                      store[f"{prefix}.l{layer}.upd.b"]))


def readout(node_states: Value, mode: str = "sum") -> Value:
    """Pool node states into a graph vector (column-wise sum or mean)."""
    if mode not in READOUTS:
        raise InvalidConfig(f"readout must be one of {READOUTS}, got {mode!r}")
    if mode == "sum":
        return ad.sum_pool(node_states, axis=0)
    return ad.mean_pool(node_states, axis=0)


def gnn_forward(graph: MolecularGraph, store: ParameterStore, cfg: GnnConfig,
                prefix: str = "gnn", node_feats: Value | None = None) -> Value:
    """Full backbone: embed, L message-passing rounds, readout."""
    h = initial_states(graph, store, cfg, prefix, node_feats=node_feats)
    for layer in range(cfg.layers):
        h = message_pass(h, graph, store, cfg, layer, prefix)
    return readout(h, cfg.readout)
