"""Low-rank adapters: the per-task A/B factor pairs and their algebra.

An adapter holds one (A, B) pair per named injection point. Merging folds
``scale * A @ B`` into a base weight; the side path computes the same
result as ``x @ W + scale * (x @ A) @ B`` without touching the base.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .backbone import Backbone, make_batches
from .errors import (
    ContractError,
    DivergenceError,
    ParseError,
    ShapeError,
    UnknownAdapterError,
)
from .numerics import DTYPE, Matrix, as_matrix

ADAPTER_FORMAT_VERSION = 1


@dataclass
class LoraAdapter:
    """Per-task low-rank update: ``layer_deltas[name] = (A[h,r], B[r,d])``.

    ``scale`` multiplies the delta everywhere it is applied; the default
    of 1.0 uses the factors as-is. Set it to ``alpha / rank`` to follow
    the common alpha-scaling convention.
    """

    adapter_id: str
    task_label: str
    rank: int
    scale: float = 1.0
    layer_deltas: dict[str, tuple[Matrix, Matrix]] = field(default_factory=dict)

    def __post_init__(self):
        if self.rank < 1:
            raise ContractError(f"rank must be >= 1, got {self.rank}")
        for name, (a, b) in self.layer_deltas.items():
            self._check_pair(name, a, b)

    def _check_pair(self, name: str, a: np.ndarray, b: np.ndarray) -> None:
        if a.ndim != 2 or b.ndim != 2:
            raise ShapeError(f"{name}: A and B must be 2-D")
        h, r = a.shape
        r2, d = b.shape
        if r != self.rank or r2 != self.rank:
            raise ShapeError(
                f"{name}: factor ranks {r}/{r2} do not match adapter rank {self.rank}"
            )
        if self.rank > min(h, d):
            raise ContractError(
                f"{name}: rank {self.rank} exceeds min(h={h}, d={d})"
            )

    def set_layer(self, name: str, a, b) -> None:
        a = as_matrix(a)
        b = as_matrix(b)
        self._check_pair(name, a, b)
        self.layer_deltas[name] = (a, b)

    def layer_names(self) -> list[str]:
        return list(self.layer_deltas)

    def param_count(self) -> int:
        return sum(a.size + b.size for a, b in self.layer_deltas.values())

    def _pair(self, layer: str) -> tuple[Matrix, Matrix]:
        if layer not in self.layer_deltas:
            raise UnknownAdapterError(
                f"adapter {self.adapter_id!r} has no layer {layer!r}"
            )
        return self.layer_deltas[layer]


@dataclass
class LoraTrainConfig:
    learning_rate: float = 0.05
    epochs: int = 20
    batch_size: int = 16
    seed: int = 0
    init_std: float = 0.02  # A ~ gaussian(0, init_std); B starts at zero

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ContractError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.epochs < 1:
            raise ContractError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ContractError(f"batch_size must be >= 1, got {self.batch_size}")


def delta_weight(adapter: LoraAdapter, layer: str) -> Matrix:
    """The dense update ``scale * A @ B`` contributed at one layer."""
    a, b = adapter._pair(layer)
    return (np.float32(adapter.scale) * (a @ b)).astype(DTYPE)


def merge(base: Matrix, adapter: LoraAdapter, layer: str) -> Matrix:
    """``base + scale * A @ B`` as a new matrix; ``base`` is not mutated."""
    a, b = adapter._pair(layer)
    if base.shape != (a.shape[0], b.shape[1]):
        raise ShapeError(
            f"merge shape mismatch at {layer}: base {base.shape} vs delta "
            f"{(a.shape[0], b.shape[1])}"
        )
    return base + delta_weight(adapter, layer)


def unmerge(merged: Matrix, adapter: LoraAdapter, layer: str) -> Matrix:
    """Inverse of :func:`merge`."""
    a, b = adapter._pair(layer)
    if merged.shape != (a.shape[0], b.shape[1]):
        raise ShapeError(
            f"unmerge shape mismatch at {layer}: merged {merged.shape} vs delta "
            f"{(a.shape[0], b.shape[1])}"
        )
    return merged - delta_weight(adapter, layer)


def adapted_forward(x: Matrix, base: Matrix, adapter: LoraAdapter, layer: str) -> Matrix:
    """Side-path forward ``x @ base + scale * (x @ A) @ B``."""
    a, b = adapter._pair(layer)
    if x.ndim != 2 or x.shape[1] != base.shape[0]:
        raise ShapeError(f"input {x.shape} does not conform to base {base.shape}")
    if base.shape != (a.shape[0], b.shape[1]):
        raise ShapeError(
            f"adapter delta {(a.shape[0], b.shape[1])} does not match base {base.shape}"
        )
    return x @ base + np.float32(adapter.scale) * ((x @ a) @ b)


def init_adapter(
    backbone: Backbone,
    task_label: str,
    rank: int,
    seed: int = 0,
    adapter_id: str | None = None,
    include_ffn: bool = False,
    scale: float = 1.0,
    init_std: float = 0.02,
) -> LoraAdapter:
    """Fresh adapter over the backbone's injection points.

    A is gaussian, B is zero, so a freshly initialized adapter leaves the
    base model's outputs exactly unchanged.
    """
    adapter = LoraAdapter(
        adapter_id=adapter_id or task_label,
        task_label=task_label,
        rank=rank,
        scale=scale,
    )
    rng = np.random.Generator(np.random.Philox(seed))
    for name in backbone.list_injection_points(include_ffn=include_ffn):
        h, d = backbone.layer_shape(name)
        if rank > min(h, d):
            raise ContractError(
                f"rank {rank} exceeds min(h={h}, d={d}) at {name}"
            )
        a = rng.normal(0.0, init_std, size=(h, rank)).astype(DTYPE)
        b = np.zeros((rank, d), dtype=DTYPE)
        adapter.set_layer(name, a, b)
    return adapter


def train_adapter(
    backbone: Backbone,
    task_corpus,
    config: LoraTrainConfig,
    rank: int = 8,
    include_ffn: bool = False,
    adapter_id: str | None = None,
    log=None,
) -> tuple[LoraAdapter, list[float]]:
    """SGD-train a fresh adapter on one task; backbone weights stay frozen.

    ``task_corpus`` is anything with ``task_label`` and ``examples``
    attributes (or a plain ``(label, [(prompt, target), ...])`` tuple).
    Returns the adapter and the per-epoch mean loss trajectory.
    """
    if hasattr(task_corpus, "examples"):
        label = task_corpus.task_label
        pairs = [(ex.prompt, ex.target) for ex in task_corpus.examples]
    else:
        label, pairs = task_corpus
    if not pairs:
        raise ContractError("training requires a non-empty corpus")

    adapter = init_adapter(
        backbone,
        label,
        rank,
        seed=config.seed,
        adapter_id=adapter_id,
        include_ffn=include_ffn,
        init_std=config.init_std,
    )
    batches = make_batches(backbone.vocab, pairs, config.batch_size)
    rng = np.random.Generator(np.random.Philox(config.seed))
    lr = np.float32(config.learning_rate)
    history = []
    for epoch in range(config.epochs):
        order = rng.permutation(len(batches))
        total, count = 0.0, 0
        for bi in order:
            inputs, targets, mask = batches[bi]
            loss, _, agrads = backbone.loss_and_grads(
                inputs, targets, mask, adapter=adapter, need_weight_grads=False
            )
            if not math.isfinite(loss):
                raise DivergenceError(f"non-finite loss {loss} at epoch {epoch}", epoch)
            for name, (da, db) in agrads.items():
                a, b = adapter.layer_deltas[name]
                adapter.layer_deltas[name] = (a - lr * da, b - lr * db)
            total += loss * mask.sum()
            count += mask.sum()
        history.append(total / max(count, 1))
        if log is not None:
            log(epoch, history[-1])
    return adapter, history


def merged_backbone(backbone: Backbone, adapter: LoraAdapter) -> Backbone:
    """Copy of the backbone with the adapter folded into its weights."""
    merged = backbone.copy()
    for name in adapter.layer_names():
        merged.weights[name] = merge(backbone.weights[name], adapter, name)
    return merged


# ----------------------------------------------------------------------
# persistence
# ----------------------------------------------------------------------


def save_adapter(adapter: LoraAdapter, path) -> None:
    doc = {
        "format_version": ADAPTER_FORMAT_VERSION,
        "adapter_id": adapter.adapter_id,
        "task_label": adapter.task_label,
        "rank": adapter.rank,
        "scale": adapter.scale,
        "layers": {
            name: {"A": a.tolist(), "B": b.tolist()}
            for name, (a, b) in adapter.layer_deltas.items()
        },
    }
    Path(path).write_text(json.dumps(doc), encoding="utf-8")


def load_adapter(path) -> LoraAdapter:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ParseError(f"adapter file {path}: {e}") from e
    if doc.get("format_version") != ADAPTER_FORMAT_VERSION:
        raise ParseError(
            f"adapter file {path}: unsupported format_version "
            f"{doc.get('format_version')!r}"
        )
    adapter = LoraAdapter(
        adapter_id=doc["adapter_id"],
        task_label=doc["task_label"],
        rank=int(doc["rank"]),
        scale=float(doc["scale"]),
    )
    for name, pair in doc["layers"].items():
        adapter.set_layer(name, pair["A"], pair["B"])
    return adapter
