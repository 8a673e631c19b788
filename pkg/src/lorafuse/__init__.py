"""Sentence-level routing and batched fusion of multiple LoRA adapters.

A mini-MLP classifier picks task adapters once per sentence; the selected
adapters are threshold-filtered, softmax-weighted, and applied through a
contiguously stacked multi-adapter forward pass on a small decoder
backbone. A benchmark harness checks that sentence-level routing stays
within twice the latency of a single merged adapter.
"""

from .backbone import Backbone, BackboneConfig, Vocab
from .corpus import Example, SplitCorpus, TaskCorpus, generate_tasks, split_9_1
from .engine import (
    RoutingTrace,
    SessionState,
    detect_sentence_start,
    run_inference,
)
from .fusion import (
    FusionPlan,
    LoraRegistry,
    batched_fused_forward,
    fused_forward,
    plan_for_sentence,
)
from .lora import (
    LoraAdapter,
    LoraTrainConfig,
    adapted_forward,
    delta_weight,
    merge,
    merged_backbone,
    train_adapter,
    unmerge,
)
from .metrics import EvalReport, accuracy, bleu, rouge1, rougeL
from .router import (
    HashVectorizer,
    MiniMlp,
    MiniMlpClassifier,
    RouterConfig,
    SentenceRouter,
    fusion_weights,
    select_top_p,
    train_router,
)

__version__ = "0.1.0"

__all__ = [
    "Backbone", "BackboneConfig", "Vocab",
    "Example", "SplitCorpus", "TaskCorpus", "generate_tasks", "split_9_1",
    "RoutingTrace", "SessionState", "detect_sentence_start", "run_inference",
    "FusionPlan", "LoraRegistry", "batched_fused_forward", "fused_forward",
    "plan_for_sentence",
    "LoraAdapter", "LoraTrainConfig", "adapted_forward", "delta_weight",
    "merge", "merged_backbone", "train_adapter", "unmerge",
    "EvalReport", "accuracy", "bleu", "rouge1", "rougeL",
    "HashVectorizer", "MiniMlp", "MiniMlpClassifier", "RouterConfig",
    "SentenceRouter", "fusion_weights", "select_top_p", "train_router",
]
