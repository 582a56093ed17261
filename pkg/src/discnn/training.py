"""SGD harness: log-linear learning-rate schedule, checkpointing,
pretrain-to-finetune initialization, per-class subsetting, and the
loss-balance diagnostic."""

from __future__ import annotations

import hashlib
import json
import os
import struct
import time
from dataclasses import dataclass, field, replace
from typing import Mapping, Optional, Sequence, Union

import numpy as np

from . import autodiff as ad
from .errors import DataError, NumericalError
from .network import LossBreakdown, LossWeights, NetSpec, Network, ParameterStore
from .pairs import PairedExample, SingleExample

__all__ = [
    "TrainConfig",
    "TURNTABLE_EPOCHS",
    "VIDEO_EPOCHS",
    "Checkpoint",
    "MetricLog",
    "EpochRow",
    "TrainResult",
    "EvalResult",
    "GradBalance",
    "lr_at",
    "train",
    "finetune",
    "evaluate",
    "topk_hits",
    "subsample_per_class",
    "grad_balance_report",
    "save_checkpoint",
    "load_checkpoint",
    "network_from_checkpoint",
]

TURNTABLE_EPOCHS = 20
VIDEO_EPOCHS = 15

Example = Union[SingleExample, PairedExample]

DIVERGENCE_LIMIT = 1e6


@dataclass
class TrainConfig:
    epochs: int = TURNTABLE_EPOCHS
    batch_size: int = 64
    lr_start: float = 0.01
    lr_end: float = 0.0001
    momentum: float = 0.0
    weight_decay: float = 0.0
    loss_weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0
    precision: str = "single"  # single | double

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.lr_start >= self.lr_end > 0:
            raise ValueError("need lr_start >= lr_end > 0")
        if self.precision not in ("single", "double"):
            raise ValueError(f"precision must be single|double, got {self.precision!r}")

    @property
    def dtype(self):
        return np.float32 if self.precision == "single" else np.float64

    def digest(self) -> str:
        blob = json.dumps(
            {k: v if not isinstance(v, LossWeights) else [v.lambda1, v.lambda2]
             for k, v in vars(self).items()},
            sort_keys=True,
        )
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def lr_at(epoch: int, epochs: int, lr_start: float, lr_end: float) -> float:
    """Log-linear interpolation from lr_start (epoch 0) to lr_end (epoch E-1)."""
    if epochs < 1:
        raise ValueError("epochs must be >= 1")
    if not 0 <= epoch < epochs:
        raise ValueError(f"epoch {epoch} outside [0, {epochs})")
    if epoch == 0 or epochs == 1:
        return lr_start
    if epoch == epochs - 1:
        return lr_end
    t = epoch / (epochs - 1)
    return float(np.exp(np.log(lr_start) + t * (np.log(lr_end) - np.log(lr_start))))


# -- checkpoint binary format ---------------------------------------------------

CHECKPOINT_MAGIC = b"DISC"
CHECKPOINT_VERSION = 1


@dataclass
class Checkpoint:
    spec: NetSpec
    tensors: dict[str, np.ndarray]  # float32, little-endian on disk
    epoch: int
    seed: int
    config_digest: str


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    meta = json.dumps(
        {
            "net_spec": ckpt.spec.to_dict(),
            "epoch": ckpt.epoch,
            "seed": ckpt.seed,
            "config_digest": ckpt.config_digest,
        },
        sort_keys=True,
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<H", CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(meta)))
        fh.write(meta)
        fh.write(struct.pack("<I", len(ckpt.tensors)))
        for name, tensor in ckpt.tensors.items():
            data = np.ascontiguousarray(tensor, dtype="<f4")
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<B", data.ndim))
            fh.write(struct.pack(f"<{data.ndim}I", *data.shape))
            fh.write(data.tobytes())


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        if fh.read(4) != CHECKPOINT_MAGIC:
            raise DataError(f"{path}: not a checkpoint (bad magic)")
        (version,) = struct.unpack("<H", fh.read(2))
        if version != CHECKPOINT_VERSION:
            raise DataError(f"{path}: unsupported checkpoint version {version}")
        (meta_len,) = struct.unpack("<I", fh.read(4))
        meta = json.loads(fh.read(meta_len).decode("utf-8"))
        spec = NetSpec.from_dict(meta["net_spec"])
        (count,) = struct.unpack("<I", fh.read(4))
        tensors: dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<H", fh.read(2))
            name = fh.read(name_len).decode("utf-8")
            (ndim,) = struct.unpack("<B", fh.read(1))
            shape = struct.unpack(f"<{ndim}I", fh.read(4 * ndim))
            size = int(np.prod(shape)) if shape else 1
            tensors[name] = np.frombuffer(fh.read(4 * size), dtype="<f4").reshape(shape).copy()
    expected = spec.parameter_shapes()
    for name in sorted(expected):
        if name not in tensors:
            raise DataError(f"{path}: checkpoint is missing tensor {name!r}")
        if tensors[name].shape != expected[name]:
            raise DataError(
                f"{path}: tensor {name!r} has shape {tensors[name].shape}, "
                f"spec wants {expected[name]}"
            )
    return Checkpoint(spec, tensors, meta["epoch"], meta["seed"], meta["config_digest"])


def network_from_checkpoint(ckpt: Checkpoint, dtype=np.float32) -> Network:
    return Network(ckpt.spec, ParameterStore(ckpt.tensors, ckpt.seed, dtype))


# -- metric log ------------------------------------------------------------------

METRIC_HEADER = (
    "epoch,lr,object_loss,pose_loss,tie_loss,total_loss,"
    "train_accuracy,test_top1,test_top5,wall_time"
)


@dataclass
class EpochRow:
    epoch: int
    lr: float
    object_loss: float
    pose_loss: float
    tie_loss: float
    total_loss: float
    train_accuracy: float
    test_top1: Optional[float]
    test_top5: Optional[float]
    wall_time: float


@dataclass
class MetricLog:
    rows: list[EpochRow] = field(default_factory=list)

    def to_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(METRIC_HEADER + "\n")
            for r in self.rows:
                fh.write(
                    f"{r.epoch},{r.lr:.10g},{r.object_loss:.10g},{r.pose_loss:.10g},"
                    f"{r.tie_loss:.10g},{r.total_loss:.10g},{r.train_accuracy:.10g},"
                    f"{'' if r.test_top1 is None else format(r.test_top1, '.10g')},"
                    f"{'' if r.test_top5 is None else format(r.test_top5, '.10g')},"
                    f"{r.wall_time:.6f}\n"
                )


# -- batching --------------------------------------------------------------------


def _stack(images: Mapping[str, np.ndarray], shots, dtype) -> np.ndarray:
    return np.stack([images[s.image_path] for s in shots]).astype(dtype, copy=False)


def _batch_loss(network, graph, params, batch, images, weights, train, rng):
    """Loss node plus per-term means and correct/total category counts.

    The batch may mix single images and pairs, labeled or not; examples are
    grouped by kind and the group means recombine weighted by size, so the
    result is the mean per-example composite loss.
    """
    dtype = graph.dtype
    singles = [ex for ex in batch if isinstance(ex, SingleExample)]
    pairs = [ex for ex in batch if isinstance(ex, PairedExample)]
    n_total = len(batch)
    total_node = None
    sums = {"object": 0.0, "pose": 0.0, "tie": 0.0}
    correct = 0
    labeled = 0

    def _fold(node, count):
        nonlocal total_node
        scaled = ad.scale(node, count / n_total)
        total_node = scaled if total_node is None else ad.add(total_node, scaled)

    if singles:
        labels = np.array([ex.category_label for ex in singles])
        if any(l is None for l in labels):
            raise DataError("a single image without a category label has nothing to learn from")
        logits, loss, _, _ = network.build_single(
            graph, params, _stack(images, [ex.shot for ex in singles], dtype), labels,
            train=train, rng=rng,
        )
        _fold(loss, len(singles))
        sums["object"] += float(loss.value) * len(singles)
        correct += int((logits.value.argmax(axis=1) == labels).sum())
        labeled += len(singles)

    def _key(ex: PairedExample):
        return (ex.category_label is not None, ex.pose_label is not None)

    for key in sorted({_key(ex) for ex in pairs}):
        group = [ex for ex in pairs if _key(ex) == key]
        has_cat, has_pose = key
        left = _stack(images, [ex.left for ex in group], dtype)
        right = _stack(images, [ex.right for ex in group], dtype)
        cat = np.array([ex.category_label for ex in group]) if has_cat else None
        pose = np.array([ex.pose_label for ex in group]) if has_pose else None
        nodes = network.build_pair(
            graph, params, left, right, cat, pose, weights, train=train, rng=rng
        )
        _fold(nodes["total"], len(group))
        sums["tie"] += float(nodes["tie"].value) * len(group)
        if has_pose:
            sums["pose"] += float(nodes["pose"].value) * len(group)
        if has_cat:
            sums["object"] += float(nodes["object"].value) * len(group)
            which = nodes["category_logits"].value.argmax(axis=1)
            correct += int((which == cat).sum())
            labeled += len(group)
    breakdown = LossBreakdown(
        object_loss=sums["object"] / n_total,
        pose_loss=sums["pose"] / n_total,
        tie_loss=sums["tie"] / n_total,
        total=float(total_node.value),
    )
    return total_node, breakdown, correct, labeled


@dataclass
class TrainResult:
    network: Network
    log: MetricLog
    checkpoint: Checkpoint
    epoch_orders: list[np.ndarray]


def train(
    network: Network,
    examples: Sequence[Example],
    images: Mapping[str, np.ndarray],
    config: TrainConfig,
    test_examples: Optional[Sequence[SingleExample]] = None,
    out_dir=None,
) -> TrainResult:
    """Plain SGD over per-epoch seeded permutations of ``examples``.

    The permutation stream depends only on (seed, len(examples)), so a
    baseline run over a pair list's left-image set sees the same order as
    the two-stream run over the pairs themselves. Aborts with the last
    completed epoch's parameters retained if the loss diverges.
    """
    if not examples:
        raise DataError("training needs at least one example")
    if network.store.dtype != np.dtype(config.dtype):
        network.store = network.store.astype(config.dtype)
    store = network.store
    perm_rng = np.random.default_rng([config.seed, 0])
    drop_rng = np.random.default_rng([config.seed, 1])
    velocity = {name: np.zeros_like(t) for name, t in store.tensors.items()} if config.momentum else None

    if out_dir is not None:
        os.makedirs(os.path.join(out_dir, "checkpoints"), exist_ok=True)

    def snapshot(epoch):
        return Checkpoint(
            spec=network.spec,
            tensors={n: t.astype(np.float32) for n, t in store.tensors.items()},
            epoch=epoch,
            seed=config.seed,
            config_digest=config.digest(),
        )

    log = MetricLog()
    orders: list[np.ndarray] = []
    last_good = snapshot(-1)
    n = len(examples)
    for epoch in range(config.epochs):
        t_start = time.perf_counter()
        lr = lr_at(epoch, config.epochs, config.lr_start, config.lr_end)
        order = perm_rng.permutation(n)
        orders.append(order)
        term_sums = np.zeros(3)
        total_sum = 0.0
        correct = 0
        labeled = 0
        for lo in range(0, n, config.batch_size):
            batch = [examples[i] for i in order[lo : lo + config.batch_size]]
            graph = ad.Graph(config.dtype)
            params = network._param_nodes(graph)
            loss_node, breakdown, c, l = _batch_loss(
                network, graph, params, batch, images, config.loss_weights,
                train=True, rng=drop_rng,
            )
            total = float(loss_node.value)
            if not np.isfinite(total) or total > DIVERGENCE_LIMIT:
                err = NumericalError(
                    f"loss diverged at epoch {epoch} ({total!r}); "
                    f"parameters from epoch {last_good.epoch} retained"
                )
                err.last_good = last_good
                raise err
            graph.backward(loss_node)
            grads = graph.parameter_gradients()
            for name, tensor in store.tensors.items():
                g = grads[name]
                if config.weight_decay:
                    g = g + config.weight_decay * tensor
                if velocity is not None:
                    velocity[name] = config.momentum * velocity[name] + g
                    g = velocity[name]
                tensor -= lr * g
            k = len(batch)
            term_sums += k * np.array(
                [breakdown.object_loss, breakdown.pose_loss, breakdown.tie_loss]
            )
            total_sum += k * total
            correct += c
            labeled += l
        top1 = top5 = None
        if test_examples:
            ev = evaluate(network, test_examples, images)
            top1, top5 = ev.top1, ev.top5
        row = EpochRow(
            epoch=epoch,
            lr=lr,
            object_loss=term_sums[0] / n,
            pose_loss=term_sums[1] / n,
            tie_loss=term_sums[2] / n,
            total_loss=total_sum / n,
            train_accuracy=correct / labeled if labeled else float("nan"),
            test_top1=top1,
            test_top5=top5,
            wall_time=time.perf_counter() - t_start,
        )
        log.rows.append(row)
        last_good = snapshot(epoch)
        if out_dir is not None:
            save_checkpoint(os.path.join(out_dir, "checkpoints", f"epoch_{epoch:03d}.disc"), last_good)
    if out_dir is not None:
        save_checkpoint(os.path.join(out_dir, "final.disc"), last_good)
        log.to_csv(os.path.join(out_dir, "metrics.csv"))
    return TrainResult(network=network, log=log, checkpoint=last_good, epoch_orders=orders)


# -- evaluation -------------------------------------------------------------------


def topk_hits(logits: np.ndarray, labels: np.ndarray, k: int) -> int:
    """Hits where the true class is among the k largest logits, ties broken
    by class index (a stable sort on the negated logits)."""
    order = np.argsort(-logits, axis=1, kind="stable")[:, :k]
    return int((order == labels[:, None]).any(axis=1).sum())


@dataclass
class EvalResult:
    top1: float
    top5: float
    confusion: np.ndarray  # rows = true class
    count: int


def evaluate(
    network: Network,
    examples: Sequence[SingleExample],
    images: Mapping[str, np.ndarray],
    batch_size: int = 128,
) -> EvalResult:
    if not examples:
        raise DataError("evaluation needs at least one example")
    k = network.spec.num_categories
    confusion = np.zeros((k, k), dtype=np.int64)
    hits1 = hits5 = 0
    for lo in range(0, len(examples), batch_size):
        chunk = examples[lo : lo + batch_size]
        labels = np.array([ex.category_label for ex in chunk])
        logits = network.forward_single(_stack(images, [ex.shot for ex in chunk], network.store.dtype))
        hits1 += topk_hits(logits, labels, 1)
        hits5 += topk_hits(logits, labels, min(5, k))
        preds = np.argsort(-logits, axis=1, kind="stable")[:, 0]
        np.add.at(confusion, (labels, preds), 1)
    n = len(examples)
    return EvalResult(top1=hits1 / n, top5=hits5 / n, confusion=confusion, count=n)


# -- fine-tuning ------------------------------------------------------------------


def subsample_per_class(
    examples: Sequence[SingleExample], k: int, seed: int
) -> list[SingleExample]:
    """Exactly k examples per category, chosen by the seeded generator,
    original order preserved."""
    by_class: dict[int, list[int]] = {}
    for i, ex in enumerate(examples):
        by_class.setdefault(ex.category_label, []).append(i)
    rng = np.random.default_rng([seed, 3])
    keep: set[int] = set()
    for label in sorted(by_class):
        idxs = by_class[label]
        if len(idxs) < k:
            raise DataError(f"class {label} has {len(idxs)} examples, fewer than k={k}")
        keep.update(np.asarray(idxs)[rng.choice(len(idxs), size=k, replace=False)].tolist())
    return [ex for i, ex in enumerate(examples) if i in keep]


def finetune(
    checkpoint: Checkpoint,
    examples: Sequence[Example],
    images: Mapping[str, np.ndarray],
    config: TrainConfig,
    new_num_categories: Optional[int] = None,
    target_spec: Optional[NetSpec] = None,
    k_per_class: Optional[int] = None,
    test_examples: Optional[Sequence[SingleExample]] = None,
    out_dir=None,
) -> TrainResult:
    """Continue training from a checkpoint's backbone with fresh task heads.

    The target differs from the checkpoint's spec only in head geometry
    (category count, partition, pose label space); backbone tensors are
    copied and verified shape-by-shape. Heads whose shape changed are
    always reinitialized.
    """
    if (new_num_categories is None) == (target_spec is None):
        raise ValueError("pass exactly one of new_num_categories= or target_spec=")
    if target_spec is None:
        target_spec = replace(checkpoint.spec, num_categories=new_num_categories)
    want = target_spec.parameter_shapes()
    head_names = {n for n in want if n.startswith(("category_head.", "pose_head."))}
    for name in sorted(want):
        if name in head_names:
            continue
        if name not in checkpoint.tensors:
            raise DataError(f"checkpoint is missing backbone tensor {name!r}")
        if checkpoint.tensors[name].shape != want[name]:
            raise DataError(
                f"backbone tensor {name!r} has shape {checkpoint.tensors[name].shape}, "
                f"target spec wants {want[name]}"
            )
    head_rng = np.random.default_rng([config.seed, 2])
    tensors: dict[str, np.ndarray] = {}
    for name, shape in want.items():
        if name in head_names:
            reusable = (
                name in checkpoint.tensors and checkpoint.tensors[name].shape == shape
            )
            if reusable:
                tensors[name] = checkpoint.tensors[name].copy()
            elif name.endswith(".bias"):
                tensors[name] = np.zeros(shape)
            else:
                tensors[name] = head_rng.normal(0.0, 0.01, size=shape)
        else:
            tensors[name] = checkpoint.tensors[name].copy()
    network = Network(target_spec, ParameterStore(tensors, config.seed, config.dtype))
    if k_per_class is not None:
        singles = [ex for ex in examples if isinstance(ex, SingleExample)]
        if len(singles) != len(examples):
            raise DataError("k-per-class subsetting applies to single-image examples")
        examples = subsample_per_class(singles, k_per_class, config.seed)
    return train(network, examples, images, config, test_examples=test_examples, out_dir=out_dir)


# -- loss-balance diagnostic --------------------------------------------------------


@dataclass
class GradBalance:
    """Parameter-gradient norms of the three unweighted loss terms over a
    batch, and the weights that would match each term's pull to the object
    term's. Norm-zero terms get no suggestion."""

    object_norm: float
    pose_norm: float
    tie_norm: float
    suggested_lambda1: Optional[float]
    suggested_lambda2: Optional[float]


def grad_balance_report(
    network: Network,
    batch: Sequence[PairedExample],
    images: Mapping[str, np.ndarray],
) -> GradBalance:
    if not batch:
        raise DataError("balance diagnostic needs a batch of labeled pairs")
    if any(ex.category_label is None or ex.pose_label is None for ex in batch):
        raise DataError("balance diagnostic needs both labels on every pair")
    dtype = network.store.dtype
    left = _stack(images, [ex.left for ex in batch], dtype)
    right = _stack(images, [ex.right for ex in batch], dtype)
    cat = np.array([ex.category_label for ex in batch])
    pose = np.array([ex.pose_label for ex in batch])

    def term_norm(which: str) -> float:
        graph = ad.Graph(dtype)
        params = network._param_nodes(graph)
        nodes = network.build_pair(graph, params, left, right, cat, pose)
        graph.backward(nodes[which])
        grads = graph.parameter_gradients()
        return float(np.sqrt(sum(float((g * g).sum()) for g in grads.values())))

    object_norm = term_norm("object")
    pose_norm = term_norm("pose")
    tie_norm = term_norm("tie")
    return GradBalance(
        object_norm=object_norm,
        pose_norm=pose_norm,
        tie_norm=tie_norm,
        suggested_lambda1=object_norm / pose_norm if pose_norm > 0 else None,
        suggested_lambda2=object_norm / tie_norm if tie_norm > 0 else None,
    )
