"""Full regression model: graph backbone + geometric encoder + fused head.

The graph vector g (projected to a fixed width) is concatenated with the
view-averaged geometric fingerprint p; a two-layer perceptron maps the
fused vector to the targets. The training loss is MSE plus an L1 penalty
on the fused vector. Also provides the rotation-invariance measurement
harness and gradient-based atom importance.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import encoder3d, gnn
from .autodiff import ParameterStore, Value
from .data import MoleculeRecord, build_graph
from .encoder3d import EncoderConfig
from .errors import DegenerateCloud, InvalidConfig, NoData, ShapeError
from .geometry import PointCloud, SamplingConfig, sample_rotations
from .gnn import GnnConfig, MolecularGraph

OBJECTIVES = ("average_output", "average_loss")


@dataclass
class LossConfig:
    lambda_l1: float = 1e-4
    task_loss: str = "mse"

    def __post_init__(self):
        if self.lambda_l1 < 0:
            raise InvalidConfig(f"lambda_l1 must be >= 0, got {self.lambda_l1}")
        if self.task_loss != "mse":
            raise InvalidConfig(f"only 'mse' task loss is supported, got {self.task_loss!r}")


@dataclass
class ModelConfig:
    encoder: EncoderConfig
    gnn: GnnConfig
    g_dim: int = 128
    head_hidden: int = 256
    activation: str = "relu"
    cutoff: float = 5.0
    objective: str = "average_output"
    ablate_3d: bool = False
    ablate_features: bool = False
    ablate_pointwise: bool = False

    def __post_init__(self):
        if self.g_dim < 1 or self.head_hidden < 1:
            raise InvalidConfig("g_dim and head_hidden must be positive")
        if self.activation not in ad.ACTIVATIONS:
            raise InvalidConfig(f"unknown activation {self.activation!r}")
        if self.objective not in OBJECTIVES:
            raise InvalidConfig(f"objective must be one of {OBJECTIVES}, got {self.objective!r}")

    @property
    def d_p_effective(self) -> int:
        if self.ablate_3d:
            return 0
        if self.ablate_pointwise:
            return self.encoder.input_width
        return self.encoder.d_p

    @property
    def d_u(self) -> int:
        return self.g_dim + self.d_p_effective


@dataclass
class InvarianceReport:
    """Prediction deviation under random rigid rotations of the input."""

    mean_dev: float
    max_dev: float
    n_molecules: int
    n_rotations: int
    align_mode: str


def fuse(g: Value, p: Value) -> Value:
    """u = [g || p], graph part first."""
    return ad.concat([g, p], axis=0)


def predict_head(u: Value, store: ParameterStore, activation: str = "relu",
                 prefix: str = "head") -> Value:
    """Two-layer perceptron from the fused vector to the task outputs."""
    act = ad.ACTIVATIONS[activation]
    hidden = act(ad.add(ad.matmul(u, store[f"{prefix}.W1"]), store[f"{prefix}.b1"]))
    return ad.add(ad.matmul(hidden, store[f"{prefix}.W2"]), store[f"{prefix}.b2"])


def loss(y_hat: Value, y, u: Value, cfg: LossConfig) -> Value:
    """MSE(y_hat, y) + lambda * ||u||_1 for a single sample."""
    task = ad.mse(y_hat, y)
    if cfg.lambda_l1 == 0.0:
        return task
    return ad.add(task, ad.scale(ad.l1_norm(u), cfg.lambda_l1))


class Model:
    """Assembled network with its parameters and batchnorm states.

    ``bonded`` declares whether the dataset carries explicit bonds (edge
    features are bond-order one-hots) or uses cutoff graphs (RBF distance
    features); the edge width of the message layers depends on it.
    """

    def __init__(self, cfg: ModelConfig, vocab, task_names, seed: int = 0, bonded: bool = False):
        self.cfg = cfg
        self.vocab = tuple(vocab)
        self.task_names = tuple(task_names)
        self.bonded = bonded
        self.inference_seed = cfg.encoder.seed
        self.store = ParameterStore()
        self.bn_states = {}
        self.enc_table = None
        rng = np.random.default_rng(seed)

        if not cfg.ablate_3d:
            if cfg.ablate_pointwise:
                if cfg.encoder.use_atom_embedding:
                    self.enc_table = encoder3d.AtomEmbeddingTable(
                        self.vocab,
                        self.store.add("enc.embed", rng.normal(0.0, 1.0, (len(self.vocab), cfg.encoder.embed_dim))),
                    )
            else:
                self.enc_table, self.bn_states = encoder3d.init_encoder_params(
                    self.store, cfg.encoder, self.vocab, rng
                )
        gnn.init_gnn_params(self.store, cfg.gnn, len(self.vocab), self.d_edge, rng)
        self.store.add("gproj.W", rng.normal(0.0, np.sqrt(2.0 / cfg.gnn.hidden), (cfg.gnn.hidden, cfg.g_dim)))
        self.store.add("gproj.b", np.zeros(cfg.g_dim))
        self.store.add("head.W1", rng.normal(0.0, np.sqrt(2.0 / cfg.d_u), (cfg.d_u, cfg.head_hidden)))
        self.store.add("head.b1", np.zeros(cfg.head_hidden))
        self.store.add("head.W2", rng.normal(0.0, np.sqrt(2.0 / cfg.head_hidden), (cfg.head_hidden, len(self.task_names))))
        self.store.add("head.b2", np.zeros(len(self.task_names)))

    @property
    def d_edge(self) -> int:
        from .data import BOND_ORDERS, RBF_N_CENTERS

        if self.cfg.ablate_features:
            return 1
        return len(BOND_ORDERS) + 1 if self.bonded else RBF_N_CENTERS

    def graph_for(self, record: MoleculeRecord) -> MolecularGraph:
        return build_graph(
            record,
            self.cfg.cutoff,
            vocab=self.vocab,
            task_names=self.task_names,
            edge_features="constant" if self.cfg.ablate_features else "auto",
        )

    def cloud_for(self, record: MoleculeRecord) -> PointCloud:
        return PointCloud(record.coords, np.asarray(record.atomic_numbers))

    def _graph_vector(self, graph: MolecularGraph, node_feats: Value | None = None) -> Value:
        g = gnn.gnn_forward(graph, self.store, self.cfg.gnn, node_feats=node_feats)
        return ad.add(ad.matmul(g, self.store["gproj.W"]), self.store["gproj.b"])

    def _fingerprint(self, cloud: PointCloud, *, training: bool, update_running: bool,
                     rotations, align: bool | None, coords_value=None, emb_value=None) -> Value:
        return encoder3d.encode(
            cloud,
            self.enc_table,
            self.store,
            self.cfg.encoder,
            self.bn_states,
            training=training,
            update_running=update_running,
            rotations=rotations,
            align=align,
            use_stack=not self.cfg.ablate_pointwise,
            coords_value=coords_value,
            emb_value=emb_value,
        )

    def _align_flag(self, training: bool) -> bool:
        mode = self.cfg.encoder.align_mode
        if training:
            return mode == "pre"
        return mode in ("pre", "post")

    def forward(self, graph: MolecularGraph, cloud: PointCloud, *, training: bool = False,
                update_running: bool | None = None, rotations=None,
                node_feats: Value | None = None, coords_value=None,
                emb_value=None) -> tuple[Value, Value]:
        """One molecule forward pass; returns (y_hat, u) as graph nodes."""
        if update_running is None:
            update_running = training
        g = self._graph_vector(graph, node_feats=node_feats)
        if self.cfg.ablate_3d:
            u = g
        else:
            p = self._fingerprint(
                cloud,
                training=training,
                update_running=update_running,
                rotations=rotations,
                align=self._align_flag(training),
                coords_value=coords_value,
                emb_value=emb_value,
            )
            u = fuse(g, p)
        y_hat = predict_head(u, self.store, self.cfg.activation)
        return y_hat, u

    def forward_per_view(self, graph: MolecularGraph, cloud: PointCloud, *,
                         training: bool = False, update_running: bool | None = None,
                         rotations=None) -> list[tuple[Value, Value]]:
        """Per-view passes for the expectation-of-loss objective.

        Every sampled view gets its own fused vector and prediction; the
        graph vector is shared across views.
        """
        if self.cfg.ablate_3d:
            return [self.forward(graph, cloud, training=training, update_running=update_running)]
        if update_running is None:
            update_running = training
        if rotations is None:
            rotations = sample_rotations(SamplingConfig(k=self.cfg.encoder.k, seed=self.inference_seed))
        g = self._graph_vector(graph)
        out = []
        for rotation in rotations:
            p = self._fingerprint(
                cloud,
                training=training,
                update_running=update_running,
                rotations=[rotation],
                align=self._align_flag(training),
            )
            u = fuse(g, p)
            out.append((predict_head(u, self.store, self.cfg.activation), u))
        return out

    def predict(self, record: MoleculeRecord) -> np.ndarray:
        """Deterministic inference (normalized-target units)."""
        y_hat, _ = self.forward(self.graph_for(record), self.cloud_for(record), training=False)
        return y_hat.data.copy()


def measure_invariance(model: Model, records, n_rotations: int, seed: int = 0) -> InvarianceReport:
    """Prediction deviation of each molecule under random rotations.

    Per molecule the deviation is max over rotations and tasks of
    |y_hat(R X) - y_hat(X)|; the report carries the mean and max over
    molecules. Inference resamples its views from the model's fixed seed
    on every call, so post-align models are exactly invariant here.
    """
    if not records:
        raise NoData("no molecules given")
    if n_rotations < 2:
        raise InvalidConfig(f"n_rotations must be >= 2, got {n_rotations}")
    rotations = sample_rotations(SamplingConfig(k=n_rotations, seed=seed))
    deviations = []
    for record in records:
        base = model.predict(record)
        worst = 0.0
        for rotation in rotations:
            rotated = MoleculeRecord(
                id=record.id,
                atomic_numbers=list(record.atomic_numbers),
                coords=record.coords @ rotation.T,
                bonds=record.bonds,
                targets=dict(record.targets),
            )
            worst = max(worst, float(np.max(np.abs(model.predict(rotated) - base))))
        deviations.append(worst)
    return InvarianceReport(
        mean_dev=float(np.mean(deviations)),
        max_dev=float(np.max(deviations)),
        n_molecules=len(records),
        n_rotations=n_rotations,
        align_mode=model.cfg.encoder.align_mode,
    )


def atom_importance(model: Model, record: MoleculeRecord, task_index: int,
                    return_components: bool = False):
    """Gradient-based per-atom contribution scores for one task.

    Backpropagates the selected output to the input coordinates, the atom
    embedding rows, and the graph node features, feeding each in as a
    shared leaf; the coordinate gradient therefore already carries the
    average over the k sampled views. The per-atom score is the Euclidean
    norm of the concatenated per-atom input gradient, normalized so the
    largest score is 1. Coordinate gradients are reported with the
    centering projection applied (a uniform shift of all atoms is not a
    real input direction); for aligned models the canonical frame is held
    fixed, so the score is a linearization around it.
    """
    if not (0 <= task_index < len(model.task_names)):
        raise InvalidConfig(f"task_index {task_index} out of range for {model.task_names}")
    graph = model.graph_for(record)
    cloud = model.cloud_for(record)
    node_leaf = Value(graph.node_feats, requires_grad=True)
    coords_leaf = emb_leaf = None
    if not model.cfg.ablate_3d:
        from .alignment import canonical_align
        from .geometry import center_cloud

        processed, _ = center_cloud(cloud)
        if model._align_flag(training=False):
            result = canonical_align(processed)
            if result.degenerate:
                raise DegenerateCloud("cannot align a degenerate cloud for importance")
            processed = result.aligned
        coords_leaf = Value(processed.coords, requires_grad=True)
        if model.enc_table is not None and model.cfg.encoder.use_atom_embedding:
            rows = model.enc_table.indices(processed.atomic_numbers)
            emb_leaf = Value(model.enc_table.values.data[rows], requires_grad=True)
        cloud = processed

    y_hat, _ = model.forward(
        graph, cloud, training=False, node_feats=node_leaf,
        coords_value=coords_leaf, emb_value=emb_leaf,
    )
    ad.backward(ad.pick(y_hat, task_index))

    parts = [node_leaf.grad]
    if coords_leaf is not None:
        coord_grad = coords_leaf.grad - coords_leaf.grad.mean(axis=0)
        parts.insert(0, coord_grad)
        coord_component = np.sqrt(np.sum(coord_grad**2, axis=1))
    else:
        coord_component = np.zeros(record.n_atoms)
    if emb_leaf is not None:
        parts.append(emb_leaf.grad)
    scores = np.sqrt(sum(np.sum(p**2, axis=1) for p in parts))
    peak = float(scores.max())
    if peak > 0:
        scores = scores / peak
    if return_components:
        return scores, coord_component
    return scores
