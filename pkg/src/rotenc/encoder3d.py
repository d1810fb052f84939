"""3D geometric encoder: rotate, per-atom convolve, pool, average over views.

A molecule's centered coordinates are rotated into k sampled views. Each
view runs through a stack of shared per-atom affine maps (1x1 convolutions)
with batchnorm and an activation, is pooled over atoms into a fixed-length
fingerprint, and the k fingerprints are averaged. The average is a
Monte-Carlo estimate of the rotation-group expectation of the single-view
encoder, so the result is approximately rotation invariant, with the
residual shrinking as 1/sqrt(k). Canonical pre-alignment of the input makes
it exactly invariant.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .alignment import canonical_align
from .autodiff import BatchNormState, ParameterStore, Value
from .errors import DegenerateCloud, InvalidConfig, ShapeError, UnknownElement
from .geometry import PointCloud, SamplingConfig, center_cloud, sample_rotations

POOL_MODES = ("mean", "max")
ALIGN_MODES = ("none", "pre", "post")


@dataclass
class EncoderConfig:
    """Widths and sampling policy of the geometric encoder.

    ``widths`` has one output width per stack layer and must end at the
    fingerprint length ``d_p``. ``align_mode`` selects when canonical
    alignment is applied: never, before training ("pre"), or only at
    inference on a model trained without it ("post").
    """

    tau: int = 3
    widths: tuple[int, ...] = (64, 128, 128)
    d_p: int = 128
    pool: str = "mean"
    use_atom_embedding: bool = True
    embed_dim: int = 32
    k: int = 16
    seed: int = 0
    align_mode: str = "none"
    activation: str = "relu"

    def __post_init__(self):
        self.widths = tuple(self.widths)
        if self.tau < 1:
            raise InvalidConfig(f"tau must be >= 1, got {self.tau}")
        if len(self.widths) != self.tau:
            raise InvalidConfig(f"widths {self.widths} must have tau={self.tau} entries")
        if self.d_p < 1:
            raise InvalidConfig(f"d_p must be >= 1, got {self.d_p}")
        if self.widths[-1] != self.d_p:
            raise InvalidConfig(f"last width {self.widths[-1]} must equal d_p {self.d_p}")
        if self.k < 1:
            raise InvalidConfig(f"k must be >= 1, got {self.k}")
        if self.pool not in POOL_MODES:
            raise InvalidConfig(f"pool must be one of {POOL_MODES}, got {self.pool!r}")
        if self.align_mode not in ALIGN_MODES:
            raise InvalidConfig(f"align_mode must be one of {ALIGN_MODES}, got {self.align_mode!r}")
        if self.activation not in ad.ACTIVATIONS:
            raise InvalidConfig(f"unknown activation {self.activation!r}")

    @property
    def input_width(self) -> int:
        return 3 + (self.embed_dim if self.use_atom_embedding else 0)


class AtomEmbeddingTable:
    """Learnable per-element feature vectors, indexed by atomic number."""

    def __init__(self, vocab, values: Value):
        self.vocab = tuple(vocab)
        self.values = values
        if values.data.shape[0] != len(self.vocab):
            raise ShapeError(
                f"embedding rows {values.data.shape[0]} != vocabulary size {len(self.vocab)}"
            )
        self._index = {z: i for i, z in enumerate(self.vocab)}

    @property
    def embed_dim(self) -> int:
        return self.values.data.shape[1]

    def indices(self, atomic_numbers) -> np.ndarray:
        rows = []
        for z in atomic_numbers:
            if int(z) not in self._index:
                raise UnknownElement(f"atomic number {int(z)} not in vocabulary {list(self.vocab)}")
            rows.append(self._index[int(z)])
        return np.asarray(rows, dtype=np.int64)


def init_encoder_params(store: ParameterStore, cfg: EncoderConfig, vocab,
                        rng: np.random.Generator, prefix: str = "enc"):
    """Create stack weights, batchnorm parameters/states, and the embedding table.

    Returns (table, bn_states) where bn_states maps state names to
    BatchNormState objects (running statistics live outside the store).
    """
    table = None
    if cfg.use_atom_embedding:
        table = AtomEmbeddingTable(vocab, store.add(f"{prefix}.embed", rng.normal(0.0, 1.0, (len(vocab), cfg.embed_dim))))
    bn_states = {}
    fan_in = cfg.input_width
    for layer, width in enumerate(cfg.widths):
        # no conv bias: the batchnorm beta that follows would absorb it,
        # leaving the bias with an identically-zero gradient
        store.add(f"{prefix}.conv{layer}.W", rng.normal(0.0, np.sqrt(2.0 / fan_in), (fan_in, width)))
        store.add(f"{prefix}.bn{layer}.gamma", np.ones(width))
        store.add(f"{prefix}.bn{layer}.beta", np.zeros(width))
        bn_states[f"{prefix}.bn{layer}"] = BatchNormState.for_width(width)
        fan_in = width
    return table, bn_states


def build_view_input(cloud: PointCloud, rotation: np.ndarray, table: AtomEmbeddingTable | None,
                     cfg: EncoderConfig, coords: Value | None = None,
                     emb: Value | None = None) -> Value:
    """Per-view input features: rotated coordinates, optionally || Emb(z).

    ``cloud`` must already be centered. ``coords`` can supply the
    coordinates as a graph node and ``emb`` pre-gathered embedding rows
    (both used for gradients w.r.t. the inputs); they default to the cloud
    coordinates and a fresh table lookup.
    """
    base = coords if coords is not None else Value(cloud.coords)
    rotated = ad.matmul(base, Value(np.ascontiguousarray(rotation.T)))
    if not cfg.use_atom_embedding:
        return rotated
    if emb is None:
        if table is None:
            raise InvalidConfig("use_atom_embedding=True but no embedding table given")
        emb = ad.gather_rows(table.values, table.indices(cloud.atomic_numbers))
    return ad.concat([rotated, emb], axis=1)


def pointwise_stack(features: Value, store: ParameterStore, cfg: EncoderConfig,
                    bn_states: dict, training: bool = False, update_running: bool = True,
                    prefix: str = "enc") -> Value:
    """Stack of per-atom affine maps with batchnorm and activation.

    Atoms never mix: every layer applies the same dense map to each row
    independently, so duplicating an input row duplicates the output row.
    """
    act = ad.ACTIVATIONS[cfg.activation]
    x = features
    for layer in range(cfg.tau):
        x = ad.matmul(x, store[f"{prefix}.conv{layer}.W"])
        x = ad.batchnorm(x, store[f"{prefix}.bn{layer}.gamma"], store[f"{prefix}.bn{layer}.beta"],
                         bn_states[f"{prefix}.bn{layer}"], training, update_running)
        x = act(x)
    return x


def pool_view(features: Value, mode: str = "mean") -> Value:
    """Column-wise mean or max over atoms: one fingerprint per view."""
    if mode not in POOL_MODES:
        raise InvalidConfig(f"pool must be one of {POOL_MODES}, got {mode!r}")
    if mode == "mean":
        return ad.mean_pool(features, axis=0)
    return ad.max_pool(features, axis=0)


def encode(cloud: PointCloud, table: AtomEmbeddingTable | None, store: ParameterStore,
           cfg: EncoderConfig, bn_states: dict, *, training: bool = False,
           update_running: bool = True, rotations=None, align: bool | None = None,
           use_stack: bool = True, prefix: str = "enc",
           coords_value: Value | None = None, emb_value: Value | None = None) -> Value:
    """Full encoder: center, (optionally) align, rotate into k views, pool, average.

    ``rotations`` overrides the sampled view set (otherwise k rotations are
    drawn from cfg.seed); ``align`` overrides the config's alignment policy
    (the training loop disables alignment for post-align models). The view
    fingerprints are averaged in ascending view order for reproducibility.
    ``coords_value``/``emb_value`` feed the coordinates and embedding rows
    in as shared graph leaves for input-gradient attribution; the caller
    must then supply already centered (and aligned, if applicable)
    coordinates, and the cloud only provides atomic numbers.
    """
    if coords_value is not None:
        centered = PointCloud(coords_value.data, cloud.atomic_numbers)
    else:
        centered, _ = center_cloud(cloud)
        if align is None:
            align = cfg.align_mode in ("pre", "post")
        if align:
            result = canonical_align(centered)
            if result.degenerate:
                raise DegenerateCloud("covariance spectrum is degenerate; no unique canonical frame")
            centered = result.aligned
    if rotations is None:
        rotations = sample_rotations(SamplingConfig(k=cfg.k, seed=cfg.seed))
    fingerprints = []
    for rotation in rotations:
        view = build_view_input(centered, rotation, table, cfg, coords=coords_value, emb=emb_value)
        if use_stack:
            view = pointwise_stack(view, store, cfg, bn_states, training, update_running, prefix)
        fingerprints.append(pool_view(view, cfg.pool))
    total = fingerprints[0]
    for fp in fingerprints[1:]:
        total = ad.add(total, fp)
    return ad.scale(total, 1.0 / len(fingerprints))
