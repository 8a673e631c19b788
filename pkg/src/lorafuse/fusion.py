"""Adapter registry and the batched multi-adapter forward pass.

All registered adapters' A factors (and B factors) live in one contiguous
stacked buffer per injection point, indexed by slot. A fusion plan picks
slots and weights; the fused forward gathers the selected slices into a
dense working set and runs broadcast batched products, which is the
host-side analog of stacked-tensor GEMM batching.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    ContractError,
    DuplicateAdapterError,
    ParseError,
    RankMismatchError,
    RoutingError,
    ShapeError,
    UnknownAdapterError,
)
from .lora import LoraAdapter, load_adapter, save_adapter
from .numerics import DTYPE, StackedTensor3
from .router import fusion_weights, select_top_p

REGISTRY_FORMAT_VERSION = 1

_SAFE_ID = re.compile(r"[A-Za-z0-9._-]+")


@dataclass
class FusionPlan:
    """Selected adapter slots and their weights for one sentence."""

    selected_slots: list[int]
    weights: np.ndarray
    source_sentence_index: int = 0
    created_from: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=DTYPE)
        if len(self.selected_slots) == 0:
            raise ContractError("a fusion plan needs at least one slot")
        if len(set(self.selected_slots)) != len(self.selected_slots):
            raise ContractError(f"duplicate slots in plan: {self.selected_slots}")
        if self.weights.shape != (len(self.selected_slots),):
            raise ShapeError(
                f"{len(self.selected_slots)} slots but weights shape {self.weights.shape}"
            )
        if abs(float(self.weights.sum()) - 1.0) > 1e-6:
            raise ContractError(
                f"plan weights must sum to 1, got {float(self.weights.sum()):.8f}"
            )
        # per-layer gathered working sets, keyed by registry version
        self._gathered: dict[str, tuple] = {}


class LoraRegistry:
    """Hash-indexed adapter pool over contiguous stacked tensors.

    Slots are dense in ``[0, n)``. Removal swaps the last slot into the
    hole, so the stacks never fragment. All adapters must share one rank
    and one injection-point set; the first registration fixes both.

    Concurrency: any number of readers may call the fused forwards at
    once; register/remove must not overlap with reads (callers serialize
    mutation, and the version counter catches stale plan gathers).
    """

    def __init__(self):
        self._slot_of: dict[str, int] = {}
        self._ids: list[str] = []
        self._labels: dict[str, str] = {}
        self._task_labels: list[str] = []
        self._scales: list[float] = []
        self._stacks: dict[str, tuple[StackedTensor3, StackedTensor3]] = {}
        self.uniform_rank: int | None = None
        self.version = 0  # bumped on every mutation; invalidates plan gathers

    def __len__(self) -> int:
        return len(self._ids)

    @property
    def n(self) -> int:
        return len(self._ids)

    @property
    def adapter_ids(self) -> list[str]:
        return list(self._ids)

    @property
    def labels(self) -> dict[str, str]:
        return dict(self._labels)

    def layer_names(self) -> list[str]:
        return list(self._stacks)

    def stacks(self, layer: str) -> tuple[StackedTensor3, StackedTensor3]:
        if layer not in self._stacks:
            raise UnknownAdapterError(f"registry has no injection point {layer!r}")
        return self._stacks[layer]

    def register(self, adapter: LoraAdapter) -> int:
        if adapter.adapter_id in self._slot_of:
            raise DuplicateAdapterError(
                f"adapter id {adapter.adapter_id!r} already registered"
            )
        if adapter.task_label in self._labels:
            raise DuplicateAdapterError(
                f"task label {adapter.task_label!r} already registered "
                f"(adapter {self._labels[adapter.task_label]!r})"
            )
        if self.uniform_rank is None:
            self.uniform_rank = adapter.rank
            for name, (a, b) in adapter.layer_deltas.items():
                self._stacks[name] = (
                    StackedTensor3(a.shape[0], a.shape[1]),
                    StackedTensor3(b.shape[0], b.shape[1]),
                )
        else:
            if adapter.rank != self.uniform_rank:
                raise RankMismatchError(
                    f"adapter {adapter.adapter_id!r} has rank {adapter.rank}, "
                    f"registry rank is {self.uniform_rank}"
                )
            if set(adapter.layer_deltas) != set(self._stacks):
                raise ContractError(
                    f"adapter {adapter.adapter_id!r} covers layers "
                    f"{sorted(adapter.layer_deltas)}, registry expects "
                    f"{sorted(self._stacks)}"
                )
        slot = len(self._ids)
        for name, (a, b) in adapter.layer_deltas.items():
            sa, sb = self._stacks[name]
            sa.append(a)
            sb.append(b)
        self._ids.append(adapter.adapter_id)
        self._task_labels.append(adapter.task_label)
        self._scales.append(float(adapter.scale))
        self._slot_of[adapter.adapter_id] = slot
        self._labels[adapter.task_label] = adapter.adapter_id
        self.version += 1
        return slot

    def remove(self, adapter_id: str) -> None:
        if adapter_id not in self._slot_of:
            raise UnknownAdapterError(f"adapter id {adapter_id!r} not registered")
        slot = self._slot_of.pop(adapter_id)
        last = len(self._ids) - 1
        del self._labels[self._task_labels[slot]]
        for sa, sb in self._stacks.values():
            sa.swap_remove(slot)
            sb.swap_remove(slot)
        if slot != last:
            moved = self._ids[last]
            self._ids[slot] = moved
            self._task_labels[slot] = self._task_labels[last]
            self._scales[slot] = self._scales[last]
            self._slot_of[moved] = slot
        self._ids.pop()
        self._task_labels.pop()
        self._scales.pop()
        if not self._ids:
            self.uniform_rank = None
            self._stacks = {}
        self.version += 1

    def slot_of(self, adapter_id: str) -> int:
        if adapter_id not in self._slot_of:
            raise UnknownAdapterError(f"adapter id {adapter_id!r} not registered")
        return self._slot_of[adapter_id]

    def slot_of_label(self, task_label: str) -> int:
        if task_label not in self._labels:
            raise RoutingError(f"no adapter registered for task label {task_label!r}")
        return self._slot_of[self._labels[task_label]]

    def label_of_slot(self, slot: int) -> str:
        if not 0 <= slot < self.n:
            raise ContractError(f"slot {slot} out of range [0, {self.n})")
        return self._task_labels[slot]

    def get_adapter(self, adapter_id: str) -> LoraAdapter:
        """Reconstruct a registered adapter from its stack slices (exact)."""
        slot = self.slot_of(adapter_id)
        adapter = LoraAdapter(
            adapter_id=adapter_id,
            task_label=self._task_labels[slot],
            rank=self.uniform_rank,
            scale=self._scales[slot],
        )
        for name, (sa, sb) in self._stacks.items():
            adapter.set_layer(name, sa.get(slot), sb.get(slot))
        return adapter

    def total_adapter_params(self) -> int:
        per_adapter = sum(
            sa.rows * sa.cols + sb.rows * sb.cols for sa, sb in self._stacks.values()
        )
        return per_adapter * self.n

    def _check_plan(self, plan: FusionPlan) -> None:
        for s in plan.selected_slots:
            if not 0 <= s < self.n:
                raise ContractError(f"plan slot {s} out of range [0, {self.n})")


def _gathered_for(plan: FusionPlan, registry: LoraRegistry, layer: str):
    """Dense [R, h, r] / [R, r, d] working sets for a plan at one layer.

    Gathered once per (plan, layer) and reused for every token generated
    under the plan; a registry mutation invalidates the cache via the
    version counter.
    """
    entry = plan._gathered.get(layer)
    if entry is not None and entry[0] is registry and entry[1] == registry.version:
        return entry[2], entry[3], entry[4]
    registry._check_plan(plan)
    sa, sb = registry.stacks(layer)
    slots = np.asarray(plan.selected_slots, dtype=np.intp)
    a_sel = sa.gather(slots)
    b_sel = sb.gather(slots)
    w = plan.weights * np.asarray(
        [registry._scales[s] for s in plan.selected_slots], dtype=DTYPE
    )
    plan._gathered[layer] = (registry, registry.version, a_sel, b_sel, w)
    return a_sel, b_sel, w


def fused_forward(x: np.ndarray, base: np.ndarray, registry: LoraRegistry,
                  plan: FusionPlan, layer: str) -> np.ndarray:
    """``x @ base`` plus the weighted selected adapter deltas at ``layer``.

    The selected A/B slices are gathered into dense stacked working sets
    (see :func:`_gathered_for`) and all adapters are evaluated with
    broadcast batched matmuls.
    """
    a_sel, b_sel, w = _gathered_for(plan, registry, layer)
    x = np.asarray(x, dtype=DTYPE)
    if x.ndim != 2 or x.shape[1] != base.shape[0]:
        raise ShapeError(f"input {x.shape} does not conform to base {base.shape}")
    if (base.shape[0], base.shape[1]) != (a_sel.shape[1], b_sel.shape[2]):
        raise ShapeError(
            f"base {base.shape} does not match adapter stacks "
            f"({a_sel.shape[1]}x{a_sel.shape[2]} / {b_sel.shape[1]}x{b_sel.shape[2]})"
        )
    if len(w) == 1:
        # degenerate single-slice batch: same math, cheaper dispatch
        return x @ base + w[0] * ((x @ a_sel[0]) @ b_sel[0])
    xa = np.matmul(x, a_sel)                      # [R, batch, r]
    xab = np.matmul(xa, b_sel)                    # [R, batch, d]
    return x @ base + np.tensordot(w, xab, axes=(0, 0))


def batched_fused_forward(xs, base: np.ndarray, registry: LoraRegistry,
                          layer: str) -> list[np.ndarray]:
    """Per-sentence fused forwards, grouping sentences that share a plan.

    ``xs`` is a list of ``(input batch, plan)`` pairs; the outputs line up
    with the inputs. Sentences with identical plans are concatenated so
    each distinct plan pays for its slice gather once.
    """
    groups: dict[tuple, list[int]] = {}
    for i, (_, plan) in enumerate(xs):
        key = (tuple(plan.selected_slots), plan.weights.tobytes())
        groups.setdefault(key, []).append(i)
    out: list[np.ndarray | None] = [None] * len(xs)
    for indices in groups.values():
        plan = xs[indices[0]][1]
        stacked = np.concatenate([np.atleast_2d(xs[i][0]) for i in indices], axis=0)
        fused = fused_forward(stacked, base, registry, plan, layer)
        offset = 0
        for i in indices:
            rows = np.atleast_2d(xs[i][0]).shape[0]
            out[i] = fused[offset : offset + rows]
            offset += rows
    return out


def plan_for_sentence(probs, p: float, registry: LoraRegistry,
                      sentence_index: int, task_labels,
                      weight_mode: str = "softmax") -> FusionPlan:
    """Threshold-select tasks, map labels to slots, and weight the result."""
    probs = np.asarray(probs, dtype=DTYPE)
    if len(task_labels) != probs.shape[-1]:
        raise ContractError(
            f"{probs.shape[-1]} probabilities for {len(task_labels)} task labels"
        )
    selected = select_top_p(probs, p)
    weights = fusion_weights(probs, selected, mode=weight_mode)
    slots = [registry.slot_of_label(task_labels[i]) for i in selected]
    return FusionPlan(
        selected_slots=slots,
        weights=weights,
        source_sentence_index=sentence_index,
        created_from=probs.copy(),
    )


# ----------------------------------------------------------------------
# snapshots
# ----------------------------------------------------------------------


def save_registry(registry: LoraRegistry, dirpath) -> None:
    """Directory snapshot: one adapter JSON per slot plus a manifest."""
    d = Path(dirpath)
    d.mkdir(parents=True, exist_ok=True)
    for adapter_id in registry.adapter_ids:
        if not _SAFE_ID.fullmatch(adapter_id):
            raise ContractError(
                f"adapter id {adapter_id!r} is not filesystem-safe"
            )
        save_adapter(registry.get_adapter(adapter_id), d / f"{adapter_id}.json")
    manifest = {
        "format_version": REGISTRY_FORMAT_VERSION,
        "uniform_rank": registry.uniform_rank,
        "order": registry.adapter_ids,
    }
    (d / "manifest.json").write_text(json.dumps(manifest), encoding="utf-8")


def load_registry(dirpath) -> LoraRegistry:
    d = Path(dirpath)
    manifest_path = d / "manifest.json"
    if not manifest_path.exists():
        raise ParseError(f"no manifest.json in {d}")
    try:
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ParseError(f"registry manifest {manifest_path}: {e}") from e
    if manifest.get("format_version") != REGISTRY_FORMAT_VERSION:
        raise ParseError(
            f"registry manifest {manifest_path}: unsupported format_version "
            f"{manifest.get('format_version')!r}"
        )
    registry = LoraRegistry()
    for adapter_id in manifest["order"]:
        registry.register(load_adapter(d / f"{adapter_id}.json"))
    if registry.n and registry.uniform_rank != manifest["uniform_rank"]:
        raise ParseError(
            f"manifest rank {manifest['uniform_rank']} does not match adapters "
            f"({registry.uniform_rank})"
        )
    return registry
