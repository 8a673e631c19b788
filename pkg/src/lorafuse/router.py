"""Sentence-level task routing: vectorizer, 4-layer MLP classifier,
threshold selection, and fusion weights.

The two learnable pieces follow the scikit-learn estimator protocol
(``fit`` / ``transform`` / ``predict_proba`` / ``get_params``) so they
compose with ordinary sklearn tooling; training itself is hand-rolled
mini-batch gradient descent with analytic gradients.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.exceptions import NotFittedError

from .errors import ConfigError, ContractError, DataError, DivergenceError, ParseError
from .numerics import DTYPE

ROUTER_FORMAT_VERSION = 1

# hidden widths giving ~4.9M parameters at input dim 4096 over a few dozen tasks
FULL_SCALE_INPUT_DIM = 4096
FULL_SCALE_HIDDEN = (1024, 512, 256)
DESK_SCALE_INPUT_DIM = 1024
DESK_SCALE_HIDDEN = (256, 128, 64)


class HashVectorizer(BaseEstimator, TransformerMixin):
    """Bag of hashed character n-grams, L2-normalized. Stateless.

    Hashing uses crc32 so feature indices are stable across processes and
    platforms. ``hash_seed`` salts the hash, giving independent feature
    spaces when needed.
    """

    def __init__(self, dim: int = DESK_SCALE_INPUT_DIM, ngram_min: int = 2,
                 ngram_max: int = 4, hash_seed: int = 0, lowercase: bool = True):
        self.dim = dim
        self.ngram_min = ngram_min
        self.ngram_max = ngram_max
        self.hash_seed = hash_seed
        self.lowercase = lowercase

    def _validate(self):
        if self.dim < 64:
            raise ContractError(f"dim must be >= 64, got {self.dim}")
        if not 1 <= self.ngram_min <= self.ngram_max <= 5:
            raise ContractError(
                f"need 1 <= ngram_min <= ngram_max <= 5, got "
                f"({self.ngram_min}, {self.ngram_max})"
            )

    def fit(self, X=None, y=None):
        self._validate()
        return self

    def transform_one(self, text: str) -> np.ndarray:
        self._validate()
        v = np.zeros(self.dim, dtype=DTYPE)
        if self.lowercase:
            text = text.lower()
        raw = text.encode("utf-8")
        if not raw:
            return v
        salt = zlib.crc32(repr(self.hash_seed).encode())
        n_chars = len(raw)
        for n in range(self.ngram_min, self.ngram_max + 1):
            for i in range(n_chars - n + 1):
                v[zlib.crc32(raw[i : i + n], salt) % self.dim] += 1.0
        norm = np.linalg.norm(v)
        if norm > 0:
            v /= norm
        return v

    def transform(self, texts) -> np.ndarray:
        if isinstance(texts, str):
            raise ContractError("transform takes a sequence of texts, not one string")
        return np.stack([self.transform_one(t) for t in texts]) if len(texts) else (
            np.zeros((0, self.dim), dtype=DTYPE)
        )


def vectorize(text: str, vec: HashVectorizer) -> np.ndarray:
    """Feature vector of length ``vec.dim`` for one text."""
    return vec.transform_one(text)


class MiniMlp:
    """Exactly four affine layers with ReLU hiddens and a softmax output."""

    def __init__(self, weights, biases):
        if len(weights) != 4 or len(biases) != 4:
            raise ContractError(
                f"the classifier has exactly 4 affine layers, got {len(weights)}"
            )
        self.weights = [np.ascontiguousarray(w, dtype=DTYPE) for w in weights]
        self.biases = [np.ascontiguousarray(b, dtype=DTYPE) for b in biases]
        for i in range(3):
            if self.weights[i].shape[1] != self.weights[i + 1].shape[0]:
                raise ConfigError(
                    f"layer {i} output {self.weights[i].shape[1]} does not feed "
                    f"layer {i + 1} input {self.weights[i + 1].shape[0]}"
                )

    @property
    def layer_dims(self) -> list[int]:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    def param_count(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    @classmethod
    def zeros(cls, layer_dims) -> "MiniMlp":
        dims = list(layer_dims)
        if len(dims) != 5:
            raise ContractError(f"layer_dims must have 5 entries, got {len(dims)}")
        return cls(
            [np.zeros((dims[i], dims[i + 1]), dtype=DTYPE) for i in range(4)],
            [np.zeros(dims[i + 1], dtype=DTYPE) for i in range(4)],
        )

    @classmethod
    def random(cls, layer_dims, seed: int = 0) -> "MiniMlp":
        """He-initialized hiddens; the output layer starts at zero so the
        initial distribution is uniform and output units are symmetric."""
        dims = list(layer_dims)
        if len(dims) != 5:
            raise ContractError(f"layer_dims must have 5 entries, got {len(dims)}")
        rng = np.random.Generator(np.random.Philox(seed))
        weights, biases = [], []
        for i in range(4):
            if i < 3:
                std = np.sqrt(2.0 / dims[i])
                weights.append(rng.normal(0.0, std, (dims[i], dims[i + 1])).astype(DTYPE))
            else:
                weights.append(np.zeros((dims[i], dims[i + 1]), dtype=DTYPE))
            biases.append(np.zeros(dims[i + 1], dtype=DTYPE))
        return cls(weights, biases)

    def _forward_full(self, X: np.ndarray):
        X = np.asarray(X, dtype=DTYPE)
        if X.ndim != 2 or X.shape[1] != self.weights[0].shape[0]:
            raise ConfigError(
                f"input dim {X.shape} does not match classifier input "
                f"{self.weights[0].shape[0]}"
            )
        acts = [X]
        h = X
        for i in range(3):
            h = np.maximum(h @ self.weights[i] + self.biases[i], 0.0)
            acts.append(h)
        logits = h @ self.weights[3] + self.biases[3]
        return logits, acts

    def forward(self, X: np.ndarray, keep: bool = False):
        """Probabilities [n, n_tasks]; with ``keep`` also the activations."""
        logits, acts = self._forward_full(X)
        m = logits.max(axis=1, keepdims=True)
        e = np.exp(logits - m)
        probs = e / e.sum(axis=1, keepdims=True)
        return (probs, acts) if keep else probs

    def gradients(self, X, y):
        """Mean cross-entropy loss and analytic grads for all layers.

        The softmax/log step runs in float64 so the returned loss is smooth
        enough for finite-difference verification.
        """
        logits, acts = self._forward_full(X)
        z = logits.astype(np.float64)
        z -= z.max(axis=1, keepdims=True)
        e = np.exp(z)
        probs = e / e.sum(axis=1, keepdims=True)
        n = X.shape[0]
        loss = float(-np.log(np.maximum(probs[np.arange(n), y], 1e-300)).mean())
        dz = probs
        dz[np.arange(n), y] -= 1.0
        dz = (dz / n).astype(DTYPE)
        dws, dbs = [None] * 4, [None] * 4
        for i in range(3, -1, -1):
            dws[i] = acts[i].T @ dz
            dbs[i] = dz.sum(axis=0)
            if i > 0:
                dz = (dz @ self.weights[i].T) * (acts[i] > 0)
        return loss, dws, dbs


class MiniMlpClassifier(BaseEstimator, ClassifierMixin):
    """Task classifier over feature vectors, trained by mini-batch SGD.

    sklearn-compatible: ``fit(X, y)`` then ``predict_proba`` / ``predict``
    / ``score``. ``classes_`` holds the dense task indices seen in ``y``.
    """

    def __init__(self, hidden_dims=DESK_SCALE_HIDDEN, epochs: int = 40,
                 learning_rate: float = 0.5, batch_size: int = 32, seed: int = 0):
        self.hidden_dims = hidden_dims
        self.epochs = epochs
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.seed = seed

    def fit(self, X, y):
        X = np.asarray(X, dtype=DTYPE)
        y = np.asarray(y, dtype=np.int64)
        if X.ndim != 2 or X.shape[0] != y.shape[0]:
            raise ContractError(f"X {X.shape} and y {y.shape} do not align")
        if len(self.hidden_dims) != 3:
            raise ContractError(
                f"hidden_dims must have 3 entries, got {len(self.hidden_dims)}"
            )
        n_classes = int(y.max()) + 1 if y.size else 0
        if n_classes < 1:
            raise DataError("fit requires at least one class")
        dims = [X.shape[1], *self.hidden_dims, n_classes]
        mlp = MiniMlp.random(dims, seed=self.seed)
        rng = np.random.Generator(np.random.Philox(self.seed))
        lr = np.float32(self.learning_rate)
        n = X.shape[0]
        self.loss_history_ = []
        for epoch in range(self.epochs):
            order = rng.permutation(n)
            total = 0.0
            for s in range(0, n, self.batch_size):
                idx = order[s : s + self.batch_size]
                loss, dws, dbs = mlp.gradients(X[idx], y[idx])
                if not np.isfinite(loss):
                    raise DivergenceError(
                        f"non-finite loss {loss} at epoch {epoch}", epoch
                    )
                for i in range(4):
                    mlp.weights[i] -= lr * dws[i]
                    mlp.biases[i] -= lr * dbs[i]
                total += loss * len(idx)
            self.loss_history_.append(total / n)
        self.mlp_ = mlp
        self.classes_ = np.arange(n_classes)
        return self

    def _check_fitted(self):
        if not hasattr(self, "mlp_"):
            raise NotFittedError("MiniMlpClassifier is not fitted yet")

    def predict_proba(self, X) -> np.ndarray:
        self._check_fitted()
        return self.mlp_.forward(np.asarray(X, dtype=DTYPE))

    def predict(self, X) -> np.ndarray:
        return self.predict_proba(X).argmax(axis=1)

    def score(self, X, y) -> float:
        return float((self.predict(X) == np.asarray(y)).mean())


@dataclass
class RouterConfig:
    """Runtime routing knobs: the selection threshold and how much trailing
    context feeds the classifier."""

    p_threshold: float = 0.3
    history_window: int = 64  # trailing tokens of context, rendered as text
    weight_mode: str = "softmax"  # or "renormalize"

    def __post_init__(self):
        if not 0.0 < self.p_threshold <= 1.0:
            raise ContractError(
                f"p_threshold must be in (0, 1], got {self.p_threshold}"
            )
        if self.history_window < 0:
            raise ContractError(
                f"history_window must be >= 0, got {self.history_window}"
            )
        if self.weight_mode not in ("softmax", "renormalize"):
            raise ContractError(f"unknown weight_mode {self.weight_mode!r}")


def _check_probs(probs) -> np.ndarray:
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim != 1 or p.size == 0:
        raise ContractError("probability vector must be non-empty and 1-D")
    if abs(p.sum() - 1.0) > 1e-4 or (p < -1e-7).any():
        raise ContractError(f"not a probability vector (sum={p.sum():.6f})")
    return p


def select_top_p(probs, p: float) -> list[int]:
    """Indices whose probability meets the threshold ``p``.

    This is an absolute per-class threshold, not cumulative-mass nucleus
    sampling. When nothing reaches ``p``, falls back to the argmax so a
    selection always exists.
    """
    if not 0.0 < p <= 1.0:
        raise ContractError(f"p must be in (0, 1], got {p}")
    pr = _check_probs(probs)
    selected = [i for i in range(pr.size) if pr[i] >= p]
    if not selected:
        selected = [int(pr.argmax())]
    return selected


def fusion_weights(probs, selected, mode: str = "softmax") -> np.ndarray:
    """Weights over ``selected``, aligned with its order, summing to 1.

    ``softmax`` re-softmaxes the selected probabilities (flattening toward
    uniform); ``renormalize`` divides them by their sum instead.
    """
    pr = _check_probs(probs)
    if len(selected) == 0:
        raise ContractError("fusion_weights needs a non-empty selection")
    idx = np.asarray(selected, dtype=np.intp)
    if idx.min() < 0 or idx.max() >= pr.size or len(set(selected)) != len(selected):
        raise ContractError(f"invalid selection {selected!r} for {pr.size} tasks")
    vals = pr[idx]
    if mode == "softmax":
        e = np.exp(vals - vals.max())
        w = e / e.sum()
    elif mode == "renormalize":
        w = vals / vals.sum()
    else:
        raise ContractError(f"unknown weight mode {mode!r}")
    return w.astype(DTYPE)


class SentenceRouter:
    """Trained vectorizer + classifier + task-label table, as one unit.

    The label list is positional: class index ``i`` of the classifier is
    the task ``task_labels[i]``; registries resolve adapters by label.
    """

    def __init__(self, vectorizer: HashVectorizer, mlp: MiniMlp, task_labels):
        if vectorizer.dim != mlp.layer_dims[0]:
            raise ConfigError(
                f"vectorizer dim {vectorizer.dim} does not match classifier "
                f"input {mlp.layer_dims[0]}"
            )
        if len(task_labels) != mlp.layer_dims[-1]:
            raise ConfigError(
                f"{len(task_labels)} labels for {mlp.layer_dims[-1]} classifier outputs"
            )
        self.vectorizer = vectorizer
        self.mlp = mlp
        self.task_labels = list(task_labels)

    @property
    def n_tasks(self) -> int:
        return len(self.task_labels)

    def classify(self, sentence: str, history: str = "",
                 cfg: RouterConfig | None = None) -> np.ndarray:
        """Task distribution for a sentence given trailing history text."""
        cfg = cfg or RouterConfig()
        parts = []
        if cfg.history_window and history:
            parts.append(" ".join(history.split()[-cfg.history_window:]))
        if sentence:
            parts.append(sentence)
        feats = self.vectorizer.transform_one(" ".join(parts))
        return self.mlp.forward(feats[None, :])[0]

    def save(self, path) -> None:
        doc = {
            "format_version": ROUTER_FORMAT_VERSION,
            "vectorizer": {
                "dim": self.vectorizer.dim,
                "ngram_min": self.vectorizer.ngram_min,
                "ngram_max": self.vectorizer.ngram_max,
                "hash_seed": self.vectorizer.hash_seed,
                "lowercase": self.vectorizer.lowercase,
            },
            "layer_dims": self.mlp.layer_dims,
            "weights": [w.tolist() for w in self.mlp.weights],
            "biases": [b.tolist() for b in self.mlp.biases],
            "task_labels": self.task_labels,
        }
        Path(path).write_text(json.dumps(doc), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "SentenceRouter":
        try:
            doc = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as e:
            raise ParseError(f"router checkpoint {path}: {e}") from e
        if doc.get("format_version") != ROUTER_FORMAT_VERSION:
            raise ParseError(
                f"router checkpoint {path}: unsupported format_version "
                f"{doc.get('format_version')!r}"
            )
        vec = HashVectorizer(**doc["vectorizer"])
        mlp = MiniMlp(
            [np.asarray(w, dtype=DTYPE) for w in doc["weights"]],
            [np.asarray(b, dtype=DTYPE) for b in doc["biases"]],
        )
        return cls(vec, mlp, doc["task_labels"])


def classify(sentence: str, history: str, mlp: MiniMlp, vec: HashVectorizer,
             cfg: RouterConfig) -> np.ndarray:
    """Functional form of :meth:`SentenceRouter.classify`."""
    labels = [str(i) for i in range(mlp.layer_dims[-1])]
    return SentenceRouter(vec, mlp, labels).classify(sentence, history, cfg)


def train_router(
    labeled,
    task_labels,
    vectorizer: HashVectorizer | None = None,
    hidden_dims=DESK_SCALE_HIDDEN,
    epochs: int = 40,
    learning_rate: float = 0.5,
    batch_size: int = 32,
    seed: int = 0,
) -> tuple[SentenceRouter, float]:
    """Train the sentence classifier on (sentence, task_index) pairs.

    Splits 9:1 by a seeded shuffle, fits on the nine tenths, and returns
    the router together with accuracy on the held-out tenth.
    """
    labeled = list(labeled)
    if not labeled:
        raise DataError("train_router requires labeled sentences")
    ys = np.asarray([t for _, t in labeled], dtype=np.int64)
    n_tasks = len(task_labels)
    present = set(ys.tolist())
    if present != set(range(n_tasks)):
        raise DataError(
            f"task indices must be dense in [0, {n_tasks}), got {sorted(present)}"
        )
    counts = np.bincount(ys, minlength=n_tasks)
    thin = [task_labels[i] for i in range(n_tasks) if counts[i] < 2]
    if thin:
        raise DataError(f"classes with fewer than 2 examples: {thin}")

    vec = vectorizer or HashVectorizer()
    X = vec.transform([s for s, _ in labeled])

    rng = np.random.Generator(np.random.Philox(seed))
    order = rng.permutation(len(labeled))
    n_test = max(1, round(len(labeled) / 10))
    test_idx, train_idx = order[:n_test], order[n_test:]

    clf = MiniMlpClassifier(
        hidden_dims=hidden_dims,
        epochs=epochs,
        learning_rate=learning_rate,
        batch_size=batch_size,
        seed=seed,
    )
    # the output layer is sized from the training labels, so every task
    # must survive the split
    if set(ys[train_idx].tolist()) != set(range(n_tasks)):
        raise DataError("held-out split removed every example of some class")
    clf.fit(X[train_idx], ys[train_idx])
    accuracy = clf.score(X[test_idx], ys[test_idx])
    return SentenceRouter(vec, clf.mlp_, task_labels), accuracy
