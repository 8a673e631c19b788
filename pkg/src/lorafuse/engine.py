"""Inference orchestration: when to classify, which plan is live, what ran.

The classifier fires exactly once per sentence start. The prompt triggers
sentence 0 immediately (and again at every sentence boundary inside the
prompt); during generation a trigger fires when the first token of a new
sentence is emitted, so that token itself was produced under the previous
plan and everything after it runs under the new one. Between triggers the
active plan is applied at every injection point.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field

import numpy as np

from .backbone import SENTENCE_DELIMITERS, Backbone
from .errors import ContractError, ParseError, RoutingError
from .fusion import LoraRegistry, FusionPlan, fused_forward, plan_for_sentence
from .router import RouterConfig, SentenceRouter

TRACE_FORMAT_VERSION = 1

_DELIM_TEXT = set(SENTENCE_DELIMITERS) | {"\n"}


@dataclass
class TraceEntry:
    sentence_index: int
    sentence_prefix_text: str
    probs: list[float]
    selected_labels: list[str]
    weights: list[float]
    classify_ms: float


@dataclass
class RoutingTrace:
    entries: list[TraceEntry] = field(default_factory=list)

    def append(self, entry: TraceEntry) -> None:
        expected = self.entries[-1].sentence_index + 1 if self.entries else 0
        if entry.sentence_index != expected:
            raise ContractError(
                f"trace entries must be gapless: got sentence {entry.sentence_index}, "
                f"expected {expected}"
            )
        self.entries.append(entry)

    def __len__(self) -> int:
        return len(self.entries)


@dataclass
class SessionState:
    """Mutable per-conversation state shared across run_inference calls.

    One session is single-threaded; distinct sessions may run concurrently
    against shared immutable backbone and router weights.
    """

    history_tokens: list[int] = field(default_factory=list)
    sentence_index: int = 0
    active_plan: FusionPlan | None = None
    router_invocations: int = 0
    trace: RoutingTrace = field(default_factory=RoutingTrace)

    def reset(self) -> None:
        self.history_tokens.clear()
        self.sentence_index = 0
        self.active_plan = None
        self.router_invocations = 0
        self.trace = RoutingTrace()


def reset(session: SessionState) -> None:
    session.reset()


def detect_sentence_start(prev_token: str | None, next_token: str | None) -> bool:
    """A token starts a new sentence iff it follows a delimiter or nothing."""
    return prev_token is None or prev_token in _DELIM_TEXT


def run_inference(
    prompt: str,
    session: SessionState,
    backbone: Backbone,
    registry: LoraRegistry | None = None,
    router: SentenceRouter | None = None,
    cfg: RouterConfig | None = None,
    max_new: int = 64,
    forced=None,
    stop_at_eos: bool = True,
    instrument=None,
    reroute_every_token: bool = False,
) -> tuple[str, RoutingTrace]:
    """Generate from ``prompt`` with sentence-level adapter routing.

    With ``registry`` and ``router`` both None this is plain greedy
    generation through the identical decode loop (the benchmark relies on
    that). ``forced`` substitutes the emitted token at each step while the
    full forward still runs, making delimiter placement controllable.
    ``instrument(layer_name, plan)`` is called on every fused projection.
    ``reroute_every_token`` classifies after every generated token instead
    of at sentence starts only; it exists as the benchmark's stand-in for
    token-level gating cost.
    """
    vocab = backbone.vocab
    if vocab is None:
        raise ContractError("backbone has no vocabulary attached")
    cfg = cfg or RouterConfig()
    routing = registry is not None and router is not None
    if routing:
        for label in router.task_labels:
            if label not in registry.labels:
                raise RoutingError(f"no adapter registered for task label {label!r}")

    ids = vocab.encode(prompt)
    if not ids:
        raise ContractError("prompt must encode to at least one token")
    delim_ids = vocab.delimiter_ids
    eos_id = vocab.eos_id

    proj_fn = None
    if routing:
        adapted_layers = frozenset(registry.layer_names())

        def proj_fn(name, x, w):
            if name not in adapted_layers:
                return x @ w
            plan = session.active_plan
            if instrument is not None:
                instrument(name, plan)
            return fused_forward(x, w, registry, plan, name)

    def classify_now(sentence_text: str, history_ids: list[int]) -> None:
        window = history_ids[-cfg.history_window:] if cfg.history_window else []
        history_text = vocab.decode(window)
        t0 = time.perf_counter()
        probs = router.classify(sentence_text, history_text, cfg)
        plan = plan_for_sentence(
            probs, cfg.p_threshold, registry, session.sentence_index,
            router.task_labels, cfg.weight_mode,
        )
        ms = (time.perf_counter() - t0) * 1000.0
        session.active_plan = plan
        session.router_invocations += 1
        session.trace.append(TraceEntry(
            sentence_index=session.sentence_index,
            sentence_prefix_text=sentence_text,
            probs=[float(v) for v in probs],
            selected_labels=[registry.label_of_slot(s) for s in plan.selected_slots],
            weights=[float(v) for v in plan.weights],
            classify_ms=ms,
        ))
        session.sentence_index += 1

    cache = backbone.new_cache()
    stream = list(session.history_tokens)

    # prompt segments: every run starts a sentence, and so does any token
    # following a delimiter inside the prompt
    starts = [p for p in range(len(ids)) if p == 0 or ids[p - 1] in delim_ids]
    last_logits = None
    for si, s in enumerate(starts):
        e = starts[si + 1] if si + 1 < len(starts) else len(ids)
        if routing:
            classify_now(vocab.decode(ids[s:e]), stream + ids[:s])
        last_logits = backbone.prefill(ids[s:e], cache, proj_fn=proj_fn)

    out = list(ids)
    emitted: list[int] = []
    if max_new > 0:
        for step_i in range(max_new):
            tok = int(np.argmax(last_logits))
            if forced is not None:
                tok = int(forced[step_i])
            out.append(tok)
            emitted.append(tok)
            if routing and (reroute_every_token or out[-2] in delim_ids):
                # first token of a new sentence was just generated
                classify_now(vocab.decode([tok]), stream + out[:-1])
            if stop_at_eos and tok == eos_id:
                break
            if cache.length >= backbone.config.max_seq_len or step_i == max_new - 1:
                break
            last_logits = backbone.step(tok, cache, proj_fn=proj_fn)

    session.history_tokens.extend(out)
    return vocab.decode(emitted), session.trace


# ----------------------------------------------------------------------
# trace persistence
# ----------------------------------------------------------------------


def save_trace(trace: RoutingTrace, path) -> None:
    """One JSON object per routing event, schema version on every line."""
    with open(path, "w", encoding="utf-8") as f:
        for e in trace.entries:
            f.write(json.dumps({
                "v": TRACE_FORMAT_VERSION,
                "sentence_index": e.sentence_index,
                "sentence_prefix_text": e.sentence_prefix_text,
                "probs": e.probs,
                "selected_labels": e.selected_labels,
                "weights": e.weights,
                "classify_ms": e.classify_ms,
            }) + "\n")


def load_trace(path) -> RoutingTrace:
    trace = RoutingTrace()
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                doc = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"trace {path} line {lineno}: {exc}", lineno) from exc
            if doc.get("v") != TRACE_FORMAT_VERSION:
                raise ParseError(
                    f"trace {path} line {lineno}: unsupported version {doc.get('v')!r}",
                    lineno,
                )
            trace.append(TraceEntry(
                sentence_index=doc["sentence_index"],
                sentence_prefix_text=doc["sentence_prefix_text"],
                probs=doc["probs"],
                selected_labels=doc["selected_labels"],
                weights=doc["weights"],
                classify_ms=doc["classify_ms"],
            ))
    return trace
