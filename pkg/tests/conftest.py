"""Shared fixtures. The desk pipeline (8 tasks, trained router, trained
adapters on the default-size backbone) is expensive, so it is built once
per session and shared by the router, engine, and acceptance tests."""

import numpy as np
import pytest

from lorafuse.backbone import Backbone, BackboneConfig, Vocab
from lorafuse.corpus import (
    corpus_texts,
    generate_tasks,
    router_training_data,
    split_9_1,
)
from lorafuse.fusion import LoraRegistry
from lorafuse.lora import LoraTrainConfig, merged_backbone, train_adapter
from lorafuse.router import train_router

DESK_SEED = 42
N_TASKS = 8
PER_TASK = 200


class DeskPipeline:
    """Everything trained: tasks, splits, backbone, router, adapters."""

    def __init__(self):
        self.tasks = generate_tasks(N_TASKS, PER_TASK, seed=DESK_SEED)
        self.splits = [split_9_1(t, seed=1) for t in self.tasks]
        self.labels = [t.task_label for t in self.tasks]
        vocab = Vocab.from_texts(corpus_texts(self.tasks))
        self.backbone = Backbone(
            BackboneConfig(vocab_size=max(512, len(vocab)), seed=0), vocab
        )

        labeled = [
            (ex.prompt, ti)
            for ti, sp in enumerate(self.splits)
            for ex in sp.train.examples
        ]
        self.router, self.router_accuracy = train_router(
            labeled, self.labels, epochs=40, seed=7
        )

        # a second router trained on history-polluted inputs for
        # multi-turn session tests
        aug_labeled, _ = router_training_data(
            [sp.train for sp in self.splits], history_window=16, seed=11
        )
        self.aug_router, self.aug_router_accuracy = train_router(
            aug_labeled, self.labels, epochs=40, seed=7
        )

        cfg = LoraTrainConfig(learning_rate=0.2, epochs=40, batch_size=16, seed=3)
        self.adapters = {}
        self.registry = LoraRegistry()
        for sp in self.splits:
            adapter, history = train_adapter(self.backbone, sp.train, cfg, rank=8)
            self.adapters[adapter.task_label] = adapter
            self.registry.register(adapter)
        self.train_loss_history = history  # last task's trajectory

    def merged(self, task_label: str) -> Backbone:
        return merged_backbone(self.backbone, self.adapters[task_label])


@pytest.fixture(scope="session")
def desk():
    return DeskPipeline()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
