"""Single-stream baseline and two-stream shared-weight network.

The final embedding layer is partitioned into identity and pose units:
the category head reads only the identity slice, the pose head reads the
concatenation of the two streams' pose slices, and an L2 tie penalty pulls
the two identity slices together. A baseline spec is the same stream with
an undivided embedding (``pose_units == 0``) feeding the category head.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence, Union

import numpy as np

from . import autodiff as ad
from .autodiff import Graph, Node

__all__ = [
    "ConvLayer",
    "PoolLayer",
    "LRNLayer",
    "FCLayer",
    "DropoutLayer",
    "NetSpec",
    "LossWeights",
    "LossBreakdown",
    "EmbeddingPair",
    "PairOutputs",
    "ParameterStore",
    "Network",
    "build_network",
    "desk_spec",
    "paper_spec",
    "composite_loss",
    "parse_layer_string",
    "layer_string",
]


@dataclass(frozen=True)
class ConvLayer:
    channels: int
    kernel: int = 5
    stride: int = 1
    pad: int = 2

    def token(self):
        return f"C{self.channels}:{self.kernel}:{self.stride}:{self.pad}"


@dataclass(frozen=True)
class PoolLayer:
    window: int = 2
    stride: int = 2

    def token(self):
        return f"P:{self.window}:{self.stride}"


@dataclass(frozen=True)
class LRNLayer:
    depth: int = 5
    k: float = 2.0
    alpha: float = 1e-4
    beta: float = 0.75

    def token(self):
        return f"LRN:{self.depth}:{self.k:g}:{self.alpha:g}:{self.beta:g}"


@dataclass(frozen=True)
class FCLayer:
    units: int

    def token(self):
        return f"F{self.units}"


@dataclass(frozen=True)
class DropoutLayer:
    rate: float = 0.5

    def token(self):
        return f"D:{self.rate:g}"


Layer = Union[ConvLayer, PoolLayer, LRNLayer, FCLayer, DropoutLayer]


def parse_layer_string(text: str) -> tuple[Layer, ...]:
    """Parse a dash-separated layer string, e.g. ``C16:5:1:2-P:2:2-LRN-F128-D``.

    Conv tokens are ``C<channels>[:kernel[:stride[:pad]]]``, pools
    ``P[:window[:stride]]``, normalization ``LRN[:depth[:k[:alpha[:beta]]]]``,
    fully-connected ``F<units>``, dropout ``D[:rate]``. ReLU follows every
    conv and fully-connected layer implicitly.
    """
    layers: list[Layer] = []
    for token in text.strip().split("-"):
        parts = token.strip().split(":")
        head = parts[0]
        try:
            if head.startswith("C") and head != "C":
                args = [int(head[1:])] + [int(p) for p in parts[1:]]
                layers.append(ConvLayer(*args))
            elif head == "P":
                layers.append(PoolLayer(*[int(p) for p in parts[1:]]))
            elif head == "LRN":
                nums = [float(p) for p in parts[1:]]
                if nums:
                    nums[0] = int(nums[0])
                layers.append(LRNLayer(*nums))
            elif head.startswith("F") and head != "F":
                layers.append(FCLayer(int(head[1:])))
            elif head == "D":
                layers.append(DropoutLayer(*[float(p) for p in parts[1:]]))
            else:
                raise ValueError
        except (ValueError, TypeError):
            raise ValueError(f"unrecognized layer token {token!r}") from None
    return tuple(layers)


def layer_string(layers: Sequence[Layer]) -> str:
    return "-".join(layer.token() for layer in layers)


@dataclass(frozen=True)
class NetSpec:
    """Declarative topology shared by the baseline and the two-stream net.

    ``identity_units + pose_units == embedding_size`` (the final F layer's
    width). A baseline uses ``pose_units == 0`` and ``num_pose_labels == 0``;
    the partitioned net requires both positive.
    """

    layers: tuple[Layer, ...]
    input_shape: tuple[int, int, int]
    embedding_size: int
    identity_units: int
    pose_units: int
    num_categories: int
    num_pose_labels: int
    category_source: str = "left"  # which stream's identity slice feeds the category head
    squared_tie: bool = False

    def __post_init__(self):
        if len(self.input_shape) != 3 or any(d < 1 for d in self.input_shape):
            raise ValueError(f"input_shape must be (C, H, W), got {self.input_shape}")
        fcs = [l for l in self.layers if isinstance(l, FCLayer)]
        if not fcs:
            raise ValueError("layer sequence needs at least one fully-connected layer")
        if fcs[-1].units != self.embedding_size:
            raise ValueError(
                f"embedding_size {self.embedding_size} does not match the final "
                f"F layer's {fcs[-1].units} units"
            )
        if self.identity_units <= 0:
            raise ValueError("identity_units must be positive")
        if self.pose_units < 0:
            raise ValueError("pose_units must be non-negative")
        if self.identity_units + self.pose_units != self.embedding_size:
            raise ValueError(
                f"identity_units + pose_units must equal embedding_size "
                f"({self.identity_units} + {self.pose_units} != {self.embedding_size})"
            )
        if (self.pose_units > 0) != (self.num_pose_labels > 0):
            raise ValueError(
                "pose_units and num_pose_labels must both be positive (two-stream) "
                "or both zero (baseline)"
            )
        if self.num_categories < 1:
            raise ValueError("num_categories must be >= 1")
        if self.category_source not in ("left", "right"):
            raise ValueError(f"category_source must be 'left' or 'right', got {self.category_source!r}")

    @property
    def is_baseline(self) -> bool:
        return self.pose_units == 0

    def parameter_shapes(self) -> dict[str, tuple[int, ...]]:
        """Named tensor shapes, checking layer-by-layer geometry."""
        shapes: dict[str, tuple[int, ...]] = {}
        c, h, w = self.input_shape
        flat: Optional[int] = None
        conv_i = 0
        fc_i = sum(1 for l in self.layers if isinstance(l, ConvLayer))
        for i, layer in enumerate(self.layers):
            where = f"layer {i + 1} ({layer.token()})"
            if isinstance(layer, ConvLayer):
                if flat is not None:
                    raise ValueError(f"{where}: convolution after a fully-connected layer")
                if h + 2 * layer.pad < layer.kernel or w + 2 * layer.pad < layer.kernel:
                    raise ValueError(f"{where}: kernel {layer.kernel} exceeds padded {h}x{w} input")
                conv_i += 1
                shapes[f"conv{conv_i}.kernels"] = (layer.channels, c, layer.kernel, layer.kernel)
                shapes[f"conv{conv_i}.bias"] = (layer.channels,)
                c = layer.channels
                h = (h + 2 * layer.pad - layer.kernel) // layer.stride + 1
                w = (w + 2 * layer.pad - layer.kernel) // layer.stride + 1
            elif isinstance(layer, PoolLayer):
                if flat is not None:
                    raise ValueError(f"{where}: pooling after a fully-connected layer")
                if layer.window > h or layer.window > w:
                    raise ValueError(f"{where}: window {layer.window} exceeds {h}x{w} input")
                h = (h - layer.window) // layer.stride + 1
                w = (w - layer.window) // layer.stride + 1
            elif isinstance(layer, LRNLayer):
                if flat is not None:
                    raise ValueError(f"{where}: LRN after a fully-connected layer")
            elif isinstance(layer, FCLayer):
                if flat is None:
                    flat = c * h * w
                fc_i += 1
                shapes[f"fc{fc_i}.weights"] = (layer.units, flat)
                shapes[f"fc{fc_i}.bias"] = (layer.units,)
                flat = layer.units
            elif isinstance(layer, DropoutLayer):
                pass
        shapes["category_head.weights"] = (self.num_categories, self.identity_units)
        shapes["category_head.bias"] = (self.num_categories,)
        if not self.is_baseline:
            shapes["pose_head.weights"] = (self.num_pose_labels, 2 * self.pose_units)
            shapes["pose_head.bias"] = (self.num_pose_labels,)
        return shapes

    def to_dict(self) -> dict:
        return {
            "layers": layer_string(self.layers),
            "input_shape": list(self.input_shape),
            "embedding_size": self.embedding_size,
            "identity_units": self.identity_units,
            "pose_units": self.pose_units,
            "num_categories": self.num_categories,
            "num_pose_labels": self.num_pose_labels,
            "category_source": self.category_source,
            "squared_tie": self.squared_tie,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NetSpec":
        return cls(
            layers=parse_layer_string(d["layers"]),
            input_shape=tuple(d["input_shape"]),
            embedding_size=int(d["embedding_size"]),
            identity_units=int(d["identity_units"]),
            pose_units=int(d["pose_units"]),
            num_categories=int(d["num_categories"]),
            num_pose_labels=int(d["num_pose_labels"]),
            category_source=d.get("category_source", "left"),
            squared_tie=bool(d.get("squared_tie", False)),
        )


def desk_spec(
    num_categories: int,
    num_pose_labels: int,
    embedding_size: int = 128,
    input_size: int = 32,
    baseline: bool = False,
    fc6_units: int = 128,
) -> NetSpec:
    """CPU-trainable preset: C16-P-LRN-C32-P-C32-F<fc6>-D-F<emb>-D on 3x32x32.

    The embedding splits in half for the two-stream net; a baseline keeps
    it undivided and drops the pose head. Dropout runs at 0.25 here: at
    this width the full-size rate of 0.5 starves the halved heads.
    """
    layers = parse_layer_string(
        f"C16:5:1:2-P:2:2-LRN-C32:5:1:2-P:2:2-C32:3:1:1-F{fc6_units}-D:0.25-F{embedding_size}-D:0.25"
    )
    if baseline:
        identity, pose, pose_labels = embedding_size, 0, 0
    else:
        identity, pose, pose_labels = embedding_size // 2, embedding_size - embedding_size // 2, num_pose_labels
    return NetSpec(
        layers=layers,
        input_shape=(3, input_size, input_size),
        embedding_size=embedding_size,
        identity_units=identity,
        pose_units=pose,
        num_categories=num_categories,
        num_pose_labels=pose_labels,
    )


def paper_spec(num_categories: int = 10, num_pose_labels: int = 7, baseline: bool = False) -> NetSpec:
    """Full-size preset: the AlexNet-style stream on 227x227 input with the
    last two fully-connected layers at 1024 units, split 512/512."""
    layers = parse_layer_string(
        "C96:11:4:0-P:3:2-LRN-C256:5:1:2-P:3:2-LRN-C384:3:1:1-C384:3:1:1-C256:3:1:1-P:3:2"
        "-F1024-D-F1024-D"
    )
    if baseline:
        identity, pose, pose_labels = 1024, 0, 0
    else:
        identity, pose, pose_labels = 512, 512, num_pose_labels
    return NetSpec(
        layers=layers,
        input_shape=(3, 227, 227),
        embedding_size=1024,
        identity_units=identity,
        pose_units=pose,
        num_categories=num_categories,
        num_pose_labels=pose_labels,
    )


@dataclass
class LossWeights:
    """Weights of the pose and tie terms in the composite objective."""

    lambda1: float = 1.0
    lambda2: float = 0.1

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass
class LossBreakdown:
    """The three scalar terms and their weighted total. Absent terms are
    exactly zero. Per-term parameter-gradient norms are filled only by the
    balance diagnostic."""

    object_loss: float = 0.0
    pose_loss: float = 0.0
    tie_loss: float = 0.0
    total: float = 0.0
    per_term_gradient_norm: Optional[tuple[float, float, float]] = None


@dataclass
class EmbeddingPair:
    """Identity and pose slices of both streams' embeddings."""

    id1: np.ndarray
    id2: np.ndarray
    pose1: np.ndarray
    pose2: np.ndarray

    def full(self, stream: int) -> np.ndarray:
        if stream == 1:
            return np.concatenate([self.id1, self.pose1], axis=-1)
        if stream == 2:
            return np.concatenate([self.id2, self.pose2], axis=-1)
        raise ValueError("stream must be 1 or 2")


@dataclass
class PairOutputs:
    category_logits: np.ndarray
    pose_logits: Optional[np.ndarray]
    embeddings: EmbeddingPair


class ParameterStore:
    """One set of named weight tensors; both streams read the same store."""

    def __init__(self, tensors: dict[str, np.ndarray], seed: int, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        self.tensors = {name: np.asarray(t, dtype=self.dtype) for name, t in tensors.items()}
        self.seed = seed

    def copy(self) -> "ParameterStore":
        return ParameterStore({n: t.copy() for n, t in self.tensors.items()}, self.seed, self.dtype)

    def astype(self, dtype) -> "ParameterStore":
        return ParameterStore(self.tensors, self.seed, dtype)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]


def build_network(spec: NetSpec, seed: int, dtype=np.float32, init: str = "fixed",
                  init_std: float = 0.01) -> "Network":
    """Initialize all parameters (Gaussian, zero biases) for a spec.

    The default draws every weight at std 0.01, the convention the full-size
    architecture trains under. ``init="scaled"`` uses std sqrt(2 / fan_in)
    per tensor instead; the small desk networks need it to reach healthy
    activation scales (std 0.01 leaves their embeddings ~1e-5 and training
    stalls for hundreds of epochs). Deterministic per seed: tensors are
    drawn in the fixed order of ``spec.parameter_shapes()``.
    """
    if init not in ("fixed", "scaled"):
        raise ValueError(f"init must be 'fixed' or 'scaled', got {init!r}")
    rng = np.random.default_rng(seed)
    tensors: dict[str, np.ndarray] = {}
    for name, shape in spec.parameter_shapes().items():
        if name.endswith(".bias"):
            tensors[name] = np.zeros(shape)
        else:
            fan_in = int(np.prod(shape[1:]))
            std = init_std if init == "fixed" else math.sqrt(2.0 / fan_in)
            tensors[name] = rng.normal(0.0, std, size=shape)
    return Network(spec, ParameterStore(tensors, seed, dtype))


class Network:
    """A spec bound to its parameter store, with graph-building and eval paths."""

    def __init__(self, spec: NetSpec, store: ParameterStore):
        expected = spec.parameter_shapes()
        for name, shape in expected.items():
            if name not in store.tensors:
                raise ValueError(f"parameter store is missing tensor {name!r}")
            if store.tensors[name].shape != shape:
                raise ValueError(
                    f"tensor {name!r} has shape {store.tensors[name].shape}, spec wants {shape}"
                )
        extra = set(store.tensors) - set(expected)
        if extra:
            raise ValueError(f"parameter store has unexpected tensors: {sorted(extra)}")
        self.spec = spec
        self.store = store

    # -- graph construction ------------------------------------------------

    def _param_nodes(self, graph: Graph) -> dict[str, Node]:
        return {name: graph.parameter(name, t) for name, t in self.store.tensors.items()}

    def _stream(self, graph, params, images, train, rng) -> tuple[Node, Node]:
        """One stream to the final embedding.

        Returns (embedding, head_input): the post-ReLU embedding of the last
        F layer, and the same after any trailing dropout. The tie penalty
        compares clean embeddings; the task heads read the regularized
        version. With per-stream dropout masks, a tie on dropped-out values
        would be minimized by shrinking the embedding itself.
        """
        x = graph.constant(images)
        conv_i = 0
        fc_i = sum(1 for l in self.spec.layers if isinstance(l, ConvLayer))
        flattened = False
        mode = "train" if train else "eval"
        embedding = None
        for layer in self.spec.layers:
            if isinstance(layer, ConvLayer):
                conv_i += 1
                x = ad.conv2d(
                    x,
                    params[f"conv{conv_i}.kernels"],
                    params[f"conv{conv_i}.bias"],
                    stride=layer.stride,
                    pad=layer.pad,
                )
                x = ad.relu(x)
            elif isinstance(layer, PoolLayer):
                x = ad.maxpool(x, layer.window, layer.stride)
            elif isinstance(layer, LRNLayer):
                x = ad.lrn(x, layer.depth, layer.k, layer.alpha, layer.beta)
            elif isinstance(layer, FCLayer):
                if not flattened:
                    x = ad.flatten(x)
                    flattened = True
                fc_i += 1
                x = ad.fully_connected(x, params[f"fc{fc_i}.weights"], params[f"fc{fc_i}.bias"])
                x = ad.relu(x)
                embedding = x
            elif isinstance(layer, DropoutLayer):
                x = ad.dropout(x, layer.rate, mode, rng)
        assert embedding is not None
        return embedding, x

    def _split(self, embedding: Node) -> tuple[Node, Optional[Node]]:
        ident = ad.slice_last(embedding, 0, self.spec.identity_units)
        if self.spec.pose_units == 0:
            return ident, None
        pose = ad.slice_last(embedding, self.spec.identity_units, self.spec.embedding_size)
        return ident, pose

    def _category_logits(self, graph, params, identity: Node) -> Node:
        return ad.fully_connected(
            identity, params["category_head.weights"], params["category_head.bias"]
        )

    def build_single(self, graph, params, images, category_labels=None, train=False, rng=None):
        """Single-image path: embedding -> identity slice -> category head.

        Returns (category_logits, object_loss_node_or_None, identity, pose);
        the identity/pose slices are of the clean embedding. The pose slice
        is computed but feeds nothing.
        """
        emb, head_in = self._stream(graph, params, images, train, rng)
        ident, pose = self._split(emb)
        head_ident, _ = self._split(head_in)
        logits = self._category_logits(graph, params, head_ident)
        loss = None
        if category_labels is not None:
            loss = ad.softmax_cross_entropy(logits, category_labels)
        return logits, loss, ident, pose

    def build_pair(
        self,
        graph,
        params,
        left,
        right,
        category_labels=None,
        pose_labels=None,
        weights: Optional[LossWeights] = None,
        train=False,
        rng=None,
    ):
        """Two-stream path over one shared parameter set.

        Dropout masks are drawn independently per stream in train mode. The
        category head reads the identity slice of the ``category_source``
        stream; the pose head reads concat(pose1, pose2). Returns a dict of
        nodes: category_logits, pose_logits, id1, id2, pose1, pose2, and
        the loss terms object/pose/tie/total (None where inapplicable,
        except tie which always applies to pairs).
        """
        if self.spec.is_baseline:
            raise ValueError("baseline spec has no pose partition; use build_single")
        weights = weights or LossWeights()
        emb1, head1 = self._stream(graph, params, left, train, rng)
        emb2, head2 = self._stream(graph, params, right, train, rng)
        id1, pose1 = self._split(emb1)
        id2, pose2 = self._split(emb2)
        head_id1, head_pose1 = self._split(head1)
        head_id2, head_pose2 = self._split(head2)
        head_input = head_id1 if self.spec.category_source == "left" else head_id2
        category_logits = self._category_logits(graph, params, head_input)
        pose_logits = ad.fully_connected(
            ad.concat_last(head_pose1, head_pose2),
            params["pose_head.weights"],
            params["pose_head.bias"],
        )
        object_term = (
            ad.softmax_cross_entropy(category_logits, category_labels)
            if category_labels is not None
            else None
        )
        pose_term = (
            ad.softmax_cross_entropy(pose_logits, pose_labels) if pose_labels is not None else None
        )
        tie_term = ad.l2_tie_loss(id1, id2, squared=self.spec.squared_tie)
        total = ad.scale(tie_term, weights.lambda2)
        if pose_term is not None:
            total = ad.add(total, ad.scale(pose_term, weights.lambda1))
        if object_term is not None:
            total = ad.add(total, object_term)
        return {
            "category_logits": category_logits,
            "pose_logits": pose_logits,
            "id1": id1,
            "id2": id2,
            "pose1": pose1,
            "pose2": pose2,
            "object": object_term,
            "pose": pose_term,
            "tie": tie_term,
            "total": total,
        }

    # -- inference ---------------------------------------------------------

    def forward_single(self, images) -> np.ndarray:
        """Eval-mode category logits; the pose half is computed but unused."""
        graph = Graph(self.store.dtype)
        params = self._param_nodes(graph)
        logits, _, _, _ = self.build_single(graph, params, images)
        return logits.value

    def forward_pair(self, left, right) -> PairOutputs:
        """Eval-mode outputs of both streams."""
        graph = Graph(self.store.dtype)
        params = self._param_nodes(graph)
        nodes = self.build_pair(graph, params, left, right)
        return PairOutputs(
            category_logits=nodes["category_logits"].value,
            pose_logits=nodes["pose_logits"].value,
            embeddings=EmbeddingPair(
                id1=nodes["id1"].value,
                id2=nodes["id2"].value,
                pose1=nodes["pose1"].value,
                pose2=nodes["pose2"].value,
            ),
        )

    def extract_embedding(self, images, which: str = "full") -> np.ndarray:
        """Eval-mode slice of the final embedding: identity, pose, or full."""
        if which not in ("identity", "pose", "full"):
            raise ValueError(f"which must be identity|pose|full, got {which!r}")
        graph = Graph(self.store.dtype)
        params = self._param_nodes(graph)
        emb, _ = self._stream(graph, params, images, train=False, rng=None)
        full = emb.value
        if which == "full":
            return full
        if which == "identity":
            return full[..., : self.spec.identity_units]
        return full[..., self.spec.identity_units :]

    def apply_category_head(self, embedding: np.ndarray) -> np.ndarray:
        """Category logits from a full embedding; reads only the identity slice."""
        ident = embedding[..., : self.spec.identity_units]
        w = self.store["category_head.weights"]
        b = self.store["category_head.bias"]
        return ident @ w.T + b


def _softmax_nll(logits: np.ndarray, labels) -> float:
    logits = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    labels = np.atleast_1d(np.asarray(labels))
    z = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    return float((lse - z[np.arange(len(labels)), labels]).mean())


def composite_loss(
    outputs,
    category_label=None,
    pose_label=None,
    weights: Optional[LossWeights] = None,
    squared_tie: bool = False,
) -> LossBreakdown:
    """Loss values for already-computed outputs (no gradients).

    ``outputs`` is PairOutputs (pair: the tie term always applies, the
    object/pose terms only with their labels) or a bare logits array
    (single image: requires a category label; pose and tie are exactly 0).
    """
    weights = weights or LossWeights()
    if isinstance(outputs, PairOutputs):
        if category_label is None and pose_label is None and outputs.pose_logits is None:
            raise ValueError("pair outputs without any label or pose head: nothing to score")
        object_loss = (
            _softmax_nll(outputs.category_logits, category_label)
            if category_label is not None
            else 0.0
        )
        pose_loss = (
            _softmax_nll(outputs.pose_logits, pose_label) if pose_label is not None else 0.0
        )
        diff = np.atleast_2d(outputs.embeddings.id1 - outputs.embeddings.id2)
        per_row = (diff * diff).sum(axis=1)
        tie_loss = float(per_row.mean()) if squared_tie else float(np.sqrt(per_row).mean())
    else:
        if category_label is None:
            raise ValueError("a single image without a category label has nothing to learn from")
        if pose_label is not None:
            raise ValueError("a single image cannot carry a pose-transformation label")
        object_loss = _softmax_nll(outputs, category_label)
        pose_loss = 0.0
        tie_loss = 0.0
    total = object_loss + weights.lambda1 * pose_loss + weights.lambda2 * tie_loss
    return LossBreakdown(object_loss, pose_loss, tie_loss, total)
