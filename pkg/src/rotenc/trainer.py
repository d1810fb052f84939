"""Training loop (AdamW), cross-validation driver, metrics, checkpoints.

Training is single-threaded and fully deterministic for a fixed seed: epoch
shuffles, per-molecule view rotations, and parameter updates all derive
from the config seed, so two runs produce bit-identical loss curves.
Checkpoints are self-describing binary files (magic ``ROTENC1``) holding
every parameter as little-endian float64, the batchnorm running statistics,
the target normalizer, and the fully resolved training config.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ParameterStore
from .data import MoleculeRecord, Normalizer, SplitSpec, dataset_task_names, dataset_vocab, normalize_targets, split
from .encoder3d import EncoderConfig
from .errors import Diverged, InvalidConfig, StaleGradient, TaskMismatch
from .geometry import SamplingConfig, sample_rotations
from .gnn import GnnConfig
from .model import LossConfig, Model, ModelConfig, loss as sample_loss

CHECKPOINT_MAGIC = b"ROTENC1\n"
CHECKPOINT_VERSION = 1


@dataclass
class TrainConfig:
    model: ModelConfig
    split: SplitSpec
    epochs: int = 800
    batch_size: int = 128
    lr: float = 1e-3
    weight_decay: float = 0.01
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    seed: int = 0
    lambda_l1: float = 1e-4

    def __post_init__(self):
        self.betas = tuple(self.betas)
        if self.epochs < 1:
            raise InvalidConfig(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise InvalidConfig(f"batch_size must be >= 1, got {self.batch_size}")
        if self.lr <= 0:
            raise InvalidConfig(f"lr must be positive, got {self.lr}")
        if self.lambda_l1 < 0:
            raise InvalidConfig(f"lambda_l1 must be >= 0, got {self.lambda_l1}")


@dataclass
class Metrics:
    """Per-task MAE / RMSE / R^2 on a named split (original target units)."""

    split: str
    mae: dict[str, float]
    rmse: dict[str, float]
    r2: dict[str, float]


class AdamWState:
    """First/second moment estimates plus the shared step counter."""

    def __init__(self):
        self.step = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}


def adamw_step(store: ParameterStore, state: AdamWState, cfg: TrainConfig) -> None:
    """One decoupled-weight-decay Adam update over all parameters.

    The decay theta <- theta * (1 - lr * wd) is applied before the Adam
    update; moments use bias correction. Parameters are visited in sorted
    name order. Raises StaleGradient when backward has not populated a
    parameter's gradient since the last zero_grad.
    """
    b1, b2 = cfg.betas
    state.step += 1
    t = state.step
    for name, p in store.items():
        if p._grad is None:
            raise StaleGradient(f"parameter {name!r} has no gradient; call backward first")
        g = p._grad
        p.data *= 1.0 - cfg.lr * cfg.weight_decay
        m = state.m.setdefault(name, np.zeros_like(p.data))
        v = state.v.setdefault(name, np.zeros_like(p.data))
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1**t)
        v_hat = v / (1.0 - b2**t)
        p.data -= cfg.lr * m_hat / (np.sqrt(v_hat) + cfg.eps)


@dataclass
class Checkpoint:
    """Everything needed to reproduce predictions bit-for-bit."""

    params: dict[str, np.ndarray]
    bn_stats: dict[str, tuple[np.ndarray, np.ndarray]]
    normalizer: Normalizer
    train_config: TrainConfig
    vocab: tuple[int, ...]
    task_names: tuple[str, ...]
    inference_seed: int
    bonded: bool
    format_version: int = CHECKPOINT_VERSION


def config_to_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)


def config_from_dict(d: dict) -> TrainConfig:
    d = dict(d)
    model = dict(d.pop("model"))
    model["encoder"] = EncoderConfig(**model.pop("encoder"))
    model["gnn"] = GnnConfig(**model.pop("gnn"))
    d["model"] = ModelConfig(**model)
    d["split"] = SplitSpec(**d.pop("split"))
    return TrainConfig(**d)


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    arrays = []
    param_meta = []
    for name in sorted(ckpt.params):
        arr = np.ascontiguousarray(ckpt.params[name], dtype="<f8")
        param_meta.append({"name": name, "shape": list(arr.shape)})
        arrays.append(arr)
    bn_meta = []
    for name in sorted(ckpt.bn_stats):
        mean, var = ckpt.bn_stats[name]
        bn_meta.append({"name": name, "width": int(mean.shape[0])})
        arrays.append(np.ascontiguousarray(mean, dtype="<f8"))
        arrays.append(np.ascontiguousarray(var, dtype="<f8"))
    header = {
        "format_version": ckpt.format_version,
        "train_config": config_to_dict(ckpt.train_config),
        "normalizer": {
            "task_names": list(ckpt.normalizer.task_names),
            "mean": ckpt.normalizer.mean.tolist(),
            "std": ckpt.normalizer.std.tolist(),
        },
        "vocab": list(ckpt.vocab),
        "task_names": list(ckpt.task_names),
        "inference_seed": int(ckpt.inference_seed),
        "bonded": bool(ckpt.bonded),
        "params": param_meta,
        "bn_states": bn_meta,
    }
    blob = json.dumps(header).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for arr in arrays:
            fh.write(arr.tobytes())


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise InvalidConfig(f"not a checkpoint file (bad magic {magic!r})")
        (header_len,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(header_len).decode("utf-8"))
        if header["format_version"] != CHECKPOINT_VERSION:
            raise InvalidConfig(f"unsupported checkpoint version {header['format_version']}")

        def read_array(shape):
            count = int(np.prod(shape)) if shape else 1
            buf = fh.read(8 * count)
            return np.frombuffer(buf, dtype="<f8").reshape(shape).copy()

        params = {m["name"]: read_array(m["shape"]) for m in header["params"]}
        bn_stats = {}
        for m in header["bn_states"]:
            mean = read_array([m["width"]])
            var = read_array([m["width"]])
            bn_stats[m["name"]] = (mean, var)
    norm = header["normalizer"]
    return Checkpoint(
        params=params,
        bn_stats=bn_stats,
        normalizer=Normalizer(
            tuple(norm["task_names"]), np.asarray(norm["mean"]), np.asarray(norm["std"])
        ),
        train_config=config_from_dict(header["train_config"]),
        vocab=tuple(header["vocab"]),
        task_names=tuple(header["task_names"]),
        inference_seed=int(header["inference_seed"]),
        bonded=bool(header["bonded"]),
        format_version=int(header["format_version"]),
    )


def checkpoint_from_model(model: Model, normalizer: Normalizer, cfg: TrainConfig) -> Checkpoint:
    return Checkpoint(
        params=model.store.state_dict(),
        bn_stats={name: (s.mean.copy(), s.var.copy()) for name, s in model.bn_states.items()},
        normalizer=normalizer,
        train_config=cfg,
        vocab=model.vocab,
        task_names=model.task_names,
        inference_seed=model.inference_seed,
        bonded=model.bonded,
    )


def model_from_checkpoint(ckpt: Checkpoint) -> tuple[Model, Normalizer]:
    model = Model(
        ckpt.train_config.model,
        ckpt.vocab,
        ckpt.task_names,
        seed=ckpt.train_config.seed,
        bonded=ckpt.bonded,
    )
    model.store.load_state_dict(ckpt.params)
    for name, (mean, var) in ckpt.bn_stats.items():
        model.bn_states[name].mean = mean.copy()
        model.bn_states[name].var = var.copy()
    model.inference_seed = ckpt.inference_seed
    return model, ckpt.normalizer


def _rotation_seed(base: int, epoch: int, index: int) -> int:
    return int(np.random.SeedSequence((base, epoch, index)).generate_state(1)[0])


def _metrics_from_predictions(preds: np.ndarray, targets: np.ndarray, task_names,
                              split_name: str) -> Metrics:
    mae, rmse, r2 = {}, {}, {}
    for j, task in enumerate(task_names):
        err = preds[:, j] - targets[:, j]
        mae[task] = float(np.mean(np.abs(err)))
        rmse[task] = float(np.sqrt(np.mean(err**2)))
        centered = targets[:, j] - targets[:, j].mean()
        ss_tot = float(np.sum(centered**2))
        ss_res = float(np.sum(err**2))
        r2[task] = 1.0 - ss_res / ss_tot if ss_tot > 0 else float("nan")
    return Metrics(split=split_name, mae=mae, rmse=rmse, r2=r2)


def evaluate_model(model: Model, normalizer: Normalizer, records, indices=None,
                   split_name: str = "eval") -> Metrics:
    """MAE / RMSE / R^2 per task in original (denormalized) units."""
    if tuple(normalizer.task_names) != tuple(model.task_names):
        raise TaskMismatch(f"normalizer tasks {normalizer.task_names} != model {model.task_names}")
    idx = range(len(records)) if indices is None else indices
    preds, targets = [], []
    for i in idx:
        record = records[i]
        if tuple(sorted(record.targets)) != tuple(model.task_names):
            raise TaskMismatch(f"record {record.id} tasks do not match {model.task_names}")
        preds.append(normalizer.invert(model.predict(record)))
        targets.append([record.targets[t] for t in model.task_names])
    return _metrics_from_predictions(
        np.asarray(preds), np.asarray(targets), model.task_names, split_name
    )


def evaluate(ckpt: Checkpoint, records, indices=None, split_name: str = "eval") -> Metrics:
    model, normalizer = model_from_checkpoint(ckpt)
    return evaluate_model(model, normalizer, records, indices, split_name)


def _train_one_fold(cfg: TrainConfig, records, train_idx, val_idx, fold: int,
                    vocab, task_names, bonded: bool):
    normalizer = normalize_targets(records, train_idx)
    model = Model(cfg.model, vocab, task_names, seed=cfg.seed, bonded=bonded)
    opt = AdamWState()
    loss_cfg = LossConfig(lambda_l1=cfg.lambda_l1)

    graphs = {int(i): model.graph_for(records[i]) for i in np.concatenate([train_idx, val_idx])}
    clouds = {int(i): model.cloud_for(records[i]) for i in graphs}
    norm_targets = {i: normalizer.apply(graphs[i].targets) for i in graphs}

    history = []
    best_score = None
    best_ckpt = None
    for epoch in range(cfg.epochs):
        shuffle_rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, 7, fold, epoch)))
        order = np.asarray(train_idx)[shuffle_rng.permutation(len(train_idx))]
        epoch_losses = []
        for b_start in range(0, len(order), cfg.batch_size):
            batch = order[b_start : b_start + cfg.batch_size]
            model.store.zero_grad()
            per_sample = []
            for i in batch:
                i = int(i)
                rotations = sample_rotations(
                    SamplingConfig(k=cfg.model.encoder.k, seed=_rotation_seed(cfg.seed, epoch, i))
                ) if not cfg.model.ablate_3d else None
                target = norm_targets[i]
                if cfg.model.objective == "average_output" or cfg.model.ablate_3d:
                    y_hat, u = model.forward(
                        graphs[i], clouds[i], training=True, rotations=rotations
                    )
                    per_sample.append(sample_loss(y_hat, target, u, loss_cfg))
                else:
                    views = model.forward_per_view(
                        graphs[i], clouds[i], training=True, rotations=rotations
                    )
                    view_losses = [sample_loss(y, target, u, loss_cfg) for y, u in views]
                    total = view_losses[0]
                    for vl in view_losses[1:]:
                        total = ad.add(total, vl)
                    per_sample.append(ad.scale(total, 1.0 / len(view_losses)))
            batch_loss = per_sample[0]
            for term in per_sample[1:]:
                batch_loss = ad.add(batch_loss, term)
            batch_loss = ad.scale(batch_loss, 1.0 / len(per_sample))
            if not np.isfinite(batch_loss.data):
                raise Diverged(epoch, b_start // cfg.batch_size)
            ad.backward(batch_loss)
            adamw_step(model.store, opt, cfg)
            epoch_losses.append(float(batch_loss.data))

        val = evaluate_model(model, normalizer, records, val_idx, split_name="val")
        score = float(np.mean(list(val.rmse.values())))
        entry = {
            "fold": fold,
            "epoch": epoch,
            "train_loss": float(np.mean(epoch_losses)),
            "val_mae": dict(val.mae),
            "val_rmse": dict(val.rmse),
            "val_r2": dict(val.r2),
        }
        history.append(entry)
        if best_score is None or score < best_score:
            best_score = score
            best_ckpt = checkpoint_from_model(model, normalizer, cfg)
    return best_ckpt, history, best_score


def train(cfg: TrainConfig, records) -> tuple[Checkpoint, list[dict]]:
    """Train per the config's split spec; returns (checkpoint, history).

    Holdout trains once; kfold trains every fold sequentially and returns
    the checkpoint of the fold with the best validation score. The history
    holds one entry per (fold, epoch) with the train loss and denormalized
    validation metrics; the retained checkpoint is the best-validation
    snapshot, not the last epoch.
    """
    if not records:
        raise InvalidConfig("dataset is empty")
    task_names = dataset_task_names(records)
    vocab = dataset_vocab(records)
    bondedness = {r.bonds is not None for r in records}
    if len(bondedness) > 1:
        raise InvalidConfig("records mix bonded and bond-free molecules")
    bonded = bondedness.pop()

    if cfg.split.mode == "holdout":
        train_idx, val_idx = split(records, cfg.split)
        ckpt, history, _ = _train_one_fold(
            cfg, records, train_idx, val_idx, 0, vocab, task_names, bonded
        )
        return ckpt, history
    folds = split(records, cfg.split)
    all_history = []
    best = None
    for fold_i, val_idx in enumerate(folds):
        train_idx = np.concatenate([f for j, f in enumerate(folds) if j != fold_i])
        ckpt, history, score = _train_one_fold(
            cfg, records, np.sort(train_idx), val_idx, fold_i, vocab, task_names, bonded
        )
        all_history.extend(history)
        if best is None or score < best[0]:
            best = (score, ckpt)
    return best[1], all_history
