"""Small decoder-only transformer with named, overridable linear projections.

This is the frozen base model that adapters attach to. Every attention and
feed-forward projection is routed through a single ``proj`` call site keyed
by a stable name (``layer{i}.{projection}``), so callers can swap in an
adapter-aware implementation without the model knowing about adapters.

Gradients are hand-derived (no autodiff): the batched training forward
keeps the activations needed by ``_backward_batch``, which returns grads
for every backbone weight and, when a side adapter is attached, for its
A/B factors only.
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np

from .errors import ContractError, ParseError, ShapeError
from .numerics import DTYPE

ATTN_PROJECTIONS = ("query", "key", "value", "output")
FFN_PROJECTIONS = ("ffn_up", "ffn_down")

PAD, UNK, EOS = "<pad>", "<unk>", "<eos>"
NEWLINE = "<nl>"
SENTENCE_DELIMITERS = (".", "!", "?", NEWLINE)
RESERVED_TOKENS = (PAD, UNK, EOS, ".", "!", "?", NEWLINE)

_LN_EPS = 1e-5
_NEG_INF = np.float32(-1e30)

CHECKPOINT_VERSION = 1


@dataclass
class BackboneConfig:
    vocab_size: int = 512
    d_model: int = 128
    n_heads: int = 4
    n_layers: int = 4
    ffn_dim: int = 256
    max_seq_len: int = 256
    seed: int = 0

    def __post_init__(self):
        for name in ("vocab_size", "d_model", "n_heads", "n_layers", "ffn_dim", "max_seq_len"):
            if getattr(self, name) < 1:
                raise ContractError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.d_model % self.n_heads != 0:
            raise ContractError(
                f"d_model={self.d_model} not divisible by n_heads={self.n_heads}"
            )


class Vocab:
    """Whitespace word-to-id tokenizer over a fixed vocabulary.

    Sentence delimiters and newlines are dedicated tokens; anything not in
    the vocabulary maps to the reserved unknown id.
    """

    def __init__(self, words):
        self.tokens = list(RESERVED_TOKENS)
        seen = set(self.tokens)
        for w in words:
            if w not in seen:
                self.tokens.append(w)
                seen.add(w)
        self.index = {t: i for i, t in enumerate(self.tokens)}
        self.pad_id = self.index[PAD]
        self.unk_id = self.index[UNK]
        self.eos_id = self.index[EOS]
        self.delimiter_ids = frozenset(self.index[t] for t in SENTENCE_DELIMITERS)

    def __len__(self) -> int:
        return len(self.tokens)

    @classmethod
    def from_texts(cls, texts) -> "Vocab":
        words = sorted({w for text in texts for w in _split_words(text)})
        return cls(words)

    def encode(self, text: str) -> list[int]:
        return [self.index.get(w, self.unk_id) for w in _split_words(text)]

    def decode(self, ids, skip_special: bool = True) -> str:
        out = []
        for i in ids:
            # ids past the word list are legal model outputs (the embedding
            # table may be larger than the vocabulary); render them opaquely
            t = self.tokens[i] if 0 <= i < len(self.tokens) else f"<{i}>"
            if skip_special and t in (PAD, EOS):
                continue
            out.append("\n" if t == NEWLINE else t)
        return " ".join(out)


def _split_words(text: str) -> list[str]:
    """Whitespace split with sentence punctuation peeled into its own token."""
    words = []
    for chunk in text.replace("\n", f" {NEWLINE} ").split():
        m = re.fullmatch(r"(.*?)([.!?]+)", chunk)
        if m and m.group(1):
            words.append(m.group(1))
            words.extend(m.group(2))
        elif m:
            words.extend(m.group(2))
        else:
            words.append(chunk)
    return words


class KVCache:
    """Per-layer key/value buffers for incremental decoding."""

    def __init__(self, config: BackboneConfig):
        L, T, d = config.n_layers, config.max_seq_len, config.d_model
        self.k = [np.zeros((T, d), dtype=DTYPE) for _ in range(L)]
        self.v = [np.zeros((T, d), dtype=DTYPE) for _ in range(L)]
        self.length = 0


class TrainCache:
    """Activations saved by the batched training forward."""

    def __init__(self):
        self.layers = []
        self.extra = {}


class Backbone:
    """Pre-LN causal transformer over a toy word vocabulary.

    Weights are plain float32 arrays in ``self.weights`` keyed by name.
    Inference never mutates them; training code updates them in place.
    """

    def __init__(self, config: BackboneConfig, vocab: Vocab | None = None):
        if vocab is not None and len(vocab) > config.vocab_size:
            raise ContractError(
                f"vocab has {len(vocab)} tokens but vocab_size={config.vocab_size}"
            )
        self.config = config
        self.vocab = vocab
        self.weights = self._init_weights(config)

    @staticmethod
    def _init_weights(cfg: BackboneConfig) -> dict[str, np.ndarray]:
        rng = np.random.Generator(np.random.Philox(cfg.seed))
        std = 0.02
        out_std = std / math.sqrt(2 * cfg.n_layers)

        def normal(shape, s):
            return rng.normal(0.0, s, size=shape).astype(DTYPE)

        w = {
            "emb": normal((cfg.vocab_size, cfg.d_model), std),
            "pos": normal((cfg.max_seq_len, cfg.d_model), std),
        }
        for i in range(cfg.n_layers):
            p = f"layer{i}"
            w[f"{p}.ln1.g"] = np.ones(cfg.d_model, dtype=DTYPE)
            w[f"{p}.ln1.b"] = np.zeros(cfg.d_model, dtype=DTYPE)
            w[f"{p}.query"] = normal((cfg.d_model, cfg.d_model), std)
            w[f"{p}.key"] = normal((cfg.d_model, cfg.d_model), std)
            w[f"{p}.value"] = normal((cfg.d_model, cfg.d_model), std)
            w[f"{p}.output"] = normal((cfg.d_model, cfg.d_model), out_std)
            w[f"{p}.ln2.g"] = np.ones(cfg.d_model, dtype=DTYPE)
            w[f"{p}.ln2.b"] = np.zeros(cfg.d_model, dtype=DTYPE)
            w[f"{p}.ffn_up"] = normal((cfg.d_model, cfg.ffn_dim), std)
            w[f"{p}.ffn_down"] = normal((cfg.ffn_dim, cfg.d_model), out_std)
        w["ln_f.g"] = np.ones(cfg.d_model, dtype=DTYPE)
        w["ln_f.b"] = np.zeros(cfg.d_model, dtype=DTYPE)
        w["unembed"] = normal((cfg.d_model, cfg.vocab_size), std)
        return w

    # ------------------------------------------------------------------
    # structure
    # ------------------------------------------------------------------

    def list_injection_points(self, include_ffn: bool = False) -> list[str]:
        """Stable names of the adapter-capable projections, ``layer{i}.{proj}``."""
        projections = ATTN_PROJECTIONS + (FFN_PROJECTIONS if include_ffn else ())
        return [
            f"layer{i}.{p}" for i in range(self.config.n_layers) for p in projections
        ]

    def layer_shape(self, name: str) -> tuple[int, int]:
        """(input dim, output dim) of an injection point."""
        if name not in self.weights or self.weights[name].ndim != 2:
            raise ContractError(f"unknown injection point {name!r}")
        h, d = self.weights[name].shape
        return h, d

    def param_count(self) -> int:
        return sum(int(w.size) for w in self.weights.values())

    def copy(self) -> "Backbone":
        other = Backbone.__new__(Backbone)
        other.config = self.config
        other.vocab = self.vocab
        other.weights = {k: v.copy() for k, v in self.weights.items()}
        return other

    # ------------------------------------------------------------------
    # inference
    # ------------------------------------------------------------------

    def _check_tokens(self, tokens) -> np.ndarray:
        ids = np.asarray(tokens, dtype=np.int64)
        if ids.ndim != 1:
            raise ShapeError(f"token sequence must be 1-D, got shape {ids.shape}")
        if ids.size and (ids.min() < 0 or ids.max() >= self.config.vocab_size):
            raise ContractError(
                f"token id out of range [0, {self.config.vocab_size})"
            )
        return ids

    def forward(self, tokens, proj_fn=None) -> np.ndarray:
        """Logits ``[len(tokens), vocab_size]`` under causal masking."""
        ids = self._check_tokens(tokens)
        if ids.size == 0:
            raise ContractError("forward requires at least one token")
        if ids.size > self.config.max_seq_len:
            raise ContractError(
                f"sequence length {ids.size} exceeds max_seq_len={self.config.max_seq_len}"
            )
        cache = KVCache(self.config)
        return self.prefill(ids, cache, proj_fn=proj_fn, return_all=True)

    def new_cache(self) -> KVCache:
        return KVCache(self.config)

    def prefill(self, tokens, cache: KVCache, proj_fn=None, return_all: bool = False):
        """Run a segment of tokens through the model, extending ``cache``.

        Returns the logits of the segment's last position, or of every
        position when ``return_all`` is set.
        """
        ids = self._check_tokens(tokens)
        n = ids.size
        if n == 0:
            raise ContractError("prefill requires at least one token")
        t0 = cache.length
        if t0 + n > self.config.max_seq_len:
            raise ContractError(
                f"sequence length {t0 + n} exceeds max_seq_len={self.config.max_seq_len}"
            )
        w = self.weights
        cfg = self.config
        H = cfg.n_heads
        dh = cfg.d_model // H
        inv_sqrt = np.float32(1.0 / math.sqrt(dh))

        x = w["emb"][ids] + w["pos"][t0 : t0 + n]
        # future positions within the segment are masked; cached ones are all past
        seg_mask = np.triu(np.full((n, n), _NEG_INF, dtype=DTYPE), k=1)
        for i in range(cfg.n_layers):
            p = f"layer{i}"
            a = _layernorm(x, w[f"{p}.ln1.g"], w[f"{p}.ln1.b"])
            q = _proj(a, w[f"{p}.query"], f"{p}.query", proj_fn)
            k = _proj(a, w[f"{p}.key"], f"{p}.key", proj_fn)
            v = _proj(a, w[f"{p}.value"], f"{p}.value", proj_fn)
            cache.k[i][t0 : t0 + n] = k
            cache.v[i][t0 : t0 + n] = v
            K = cache.k[i][: t0 + n].reshape(t0 + n, H, dh)
            V = cache.v[i][: t0 + n].reshape(t0 + n, H, dh)
            qh = q.reshape(n, H, dh)
            scores = np.einsum("nhd,thd->hnt", qh, K) * inv_sqrt
            scores[:, :, t0:] += seg_mask
            att = _softmax_last(scores)
            z = np.einsum("hnt,thd->nhd", att, V).reshape(n, cfg.d_model)
            x = x + _proj(z, w[f"{p}.output"], f"{p}.output", proj_fn)
            b = _layernorm(x, w[f"{p}.ln2.g"], w[f"{p}.ln2.b"])
            u = np.maximum(_proj(b, w[f"{p}.ffn_up"], f"{p}.ffn_up", proj_fn), 0.0)
            x = x + _proj(u, w[f"{p}.ffn_down"], f"{p}.ffn_down", proj_fn)
        cache.length = t0 + n
        hf = _layernorm(x, w["ln_f.g"], w["ln_f.b"])
        logits = hf @ w["unembed"]
        return logits if return_all else logits[-1]

    def step(self, token: int, cache: KVCache, proj_fn=None) -> np.ndarray:
        """Feed one token, returning the logits for its position."""
        return self.prefill([token], cache, proj_fn=proj_fn)

    def generate(
        self,
        prompt,
        max_new: int,
        hook=None,
        proj_fn=None,
        forced=None,
        eos_id: int | None = None,
    ) -> list[int]:
        """Greedy decoding from ``prompt``; returns prompt plus new tokens.

        ``hook(position, token)`` fires after each emitted token. ``forced``
        overrides the emitted token stream (the full forward is still
        computed each step, so timing matches greedy decoding). Stops after
        ``max_new`` tokens, at ``eos_id``, or when the context is full.
        """
        ids = list(self._check_tokens(prompt))
        if not ids:
            raise ContractError("generate requires a non-empty prompt")
        out = list(ids)
        if max_new == 0:
            return out
        cache = self.new_cache()
        last_logits = self.prefill(ids, cache, proj_fn=proj_fn)
        for step in range(max_new):
            tok = int(np.argmax(last_logits))
            if forced is not None:
                tok = forced[step]
            out.append(tok)
            if hook is not None:
                hook(len(out) - 1, tok)
            if eos_id is not None and tok == eos_id:
                break
            if len(out) >= self.config.max_seq_len or step == max_new - 1:
                break
            last_logits = self.step(tok, cache, proj_fn=proj_fn)
        return out

    # ------------------------------------------------------------------
    # training (hand-derived gradients)
    # ------------------------------------------------------------------

    def _forward_batch(self, ids: np.ndarray, adapter=None):
        """Batched forward ``[B,T] -> [B,T,V]`` keeping activations for backward."""
        cfg = self.config
        w = self.weights
        B, T = ids.shape
        H = cfg.n_heads
        dh = cfg.d_model // H
        inv_sqrt = np.float32(1.0 / math.sqrt(dh))
        deltas = adapter.layer_deltas if adapter is not None else {}
        scale = np.float32(adapter.scale) if adapter is not None else None

        tc = TrainCache()
        tc.extra["ids"] = ids
        mask = np.triu(np.full((T, T), _NEG_INF, dtype=DTYPE), k=1)

        def proj(x2, name, lc):
            W = w[name]
            y = x2 @ W
            if name in deltas:
                A, Bm = deltas[name]
                xa = x2 @ A
                y = y + scale * (xa @ Bm)
                lc[name] = (x2, xa)
            else:
                lc[name] = (x2, None)
            return y

        x = w["emb"][ids] + w["pos"][:T]
        for i in range(cfg.n_layers):
            p = f"layer{i}"
            lc = {}
            lc["x_in"] = x
            a, ln1c = _layernorm_cached(x, w[f"{p}.ln1.g"], w[f"{p}.ln1.b"])
            lc["ln1"] = ln1c
            a2 = a.reshape(B * T, cfg.d_model)
            q = proj(a2, f"{p}.query", lc).reshape(B, T, H, dh)
            k = proj(a2, f"{p}.key", lc).reshape(B, T, H, dh)
            v = proj(a2, f"{p}.value", lc).reshape(B, T, H, dh)
            scores = np.einsum("bnhd,bthd->bhnt", q, k) * inv_sqrt + mask
            att = _softmax_last(scores)
            z = np.einsum("bhnt,bthd->bnhd", att, v).reshape(B * T, cfg.d_model)
            lc["att"] = att
            lc["qkv"] = (q, k, v)
            o = proj(z, f"{p}.output", lc).reshape(B, T, cfg.d_model)
            x = x + o
            lc["x_mid"] = x
            b, ln2c = _layernorm_cached(x, w[f"{p}.ln2.g"], w[f"{p}.ln2.b"])
            lc["ln2"] = ln2c
            u = np.maximum(proj(b.reshape(B * T, cfg.d_model), f"{p}.ffn_up", lc), 0.0)
            lc["relu_out"] = u
            m = proj(u, f"{p}.ffn_down", lc).reshape(B, T, cfg.d_model)
            x = x + m
            tc.layers.append(lc)
        hf, lnfc = _layernorm_cached(x, w["ln_f.g"], w["ln_f.b"])
        tc.extra["ln_f"] = lnfc
        tc.extra["hf"] = hf
        logits = hf.reshape(B * T, cfg.d_model) @ w["unembed"]
        return logits.reshape(B, T, cfg.vocab_size), tc

    def _backward_batch(self, tc: TrainCache, dlogits: np.ndarray, adapter=None,
                        need_weight_grads: bool = True):
        """Gradients for ``_forward_batch``.

        Returns ``(weight_grads, adapter_grads)`` where ``adapter_grads``
        maps injection-point name to (dA, dB). Either dict may be empty
        depending on ``need_weight_grads`` / ``adapter``.
        """
        cfg = self.config
        w = self.weights
        B, T, V = dlogits.shape
        H = cfg.n_heads
        dh = cfg.d_model // H
        inv_sqrt = np.float32(1.0 / math.sqrt(dh))
        deltas = adapter.layer_deltas if adapter is not None else {}
        scale = np.float32(adapter.scale) if adapter is not None else None

        grads: dict[str, np.ndarray] = {}
        adapter_grads: dict[str, tuple[np.ndarray, np.ndarray]] = {}

        def proj_backward(dy, name, lc):
            x2, xa = lc[name]
            W = w[name]
            dx = dy @ W.T
            if need_weight_grads:
                grads[name] = x2.T @ dy
            if name in deltas:
                A, Bm = deltas[name]
                dyB = dy @ Bm.T
                adapter_grads[name] = (scale * (x2.T @ dyB), scale * (xa.T @ dy))
                dx = dx + scale * (dyB @ A.T)
            return dx

        d2 = dlogits.reshape(B * T, V)
        hf = tc.extra["hf"].reshape(B * T, cfg.d_model)
        if need_weight_grads:
            grads["unembed"] = hf.T @ d2
        dhf = (d2 @ w["unembed"].T).reshape(B, T, cfg.d_model)
        dx, dg, db = _layernorm_backward(dhf, tc.extra["ln_f"])
        if need_weight_grads:
            grads["ln_f.g"], grads["ln_f.b"] = dg, db

        for i in reversed(range(cfg.n_layers)):
            p = f"layer{i}"
            lc = tc.layers[i]
            # ffn block
            dm = dx.reshape(B * T, cfg.d_model)
            du = proj_backward(dm, f"{p}.ffn_down", lc)
            du *= lc["relu_out"] > 0
            dbv = proj_backward(du, f"{p}.ffn_up", lc).reshape(B, T, cfg.d_model)
            dmid, dg, db = _layernorm_backward(dbv, lc["ln2"])
            if need_weight_grads:
                grads[f"{p}.ln2.g"], grads[f"{p}.ln2.b"] = dg, db
            dx = dx + dmid
            # attention block
            do = dx.reshape(B * T, cfg.d_model)
            dz = proj_backward(do, f"{p}.output", lc).reshape(B, T, H, dh)
            att = lc["att"]
            q, k, v = lc["qkv"]
            datt = np.einsum("bnhd,bthd->bhnt", dz, v)
            dv = np.einsum("bhnt,bnhd->bthd", att, dz)
            ds = (datt - (datt * att).sum(axis=-1, keepdims=True)) * att
            dq = np.einsum("bhnt,bthd->bnhd", ds, k) * inv_sqrt
            dk = np.einsum("bhnt,bnhd->bthd", ds, q) * inv_sqrt
            da = (
                proj_backward(dq.reshape(B * T, cfg.d_model), f"{p}.query", lc)
                + proj_backward(dk.reshape(B * T, cfg.d_model), f"{p}.key", lc)
                + proj_backward(dv.reshape(B * T, cfg.d_model), f"{p}.value", lc)
            ).reshape(B, T, cfg.d_model)
            dattn_in, dg, db = _layernorm_backward(da, lc["ln1"])
            if need_weight_grads:
                grads[f"{p}.ln1.g"], grads[f"{p}.ln1.b"] = dg, db
            dx = dx + dattn_in

        if need_weight_grads:
            ids = tc.extra["ids"]
            demb = np.zeros_like(w["emb"])
            np.add.at(demb, ids.ravel(), dx.reshape(B * T, cfg.d_model))
            grads["emb"] = demb
            dpos = np.zeros_like(w["pos"])
            dpos[:T] = dx.sum(axis=0)
            grads["pos"] = dpos
        return grads, adapter_grads

    def loss_and_grads(self, inputs, targets, loss_mask, adapter=None,
                       need_weight_grads: bool = True):
        """Mean next-token cross-entropy over masked positions, with grads."""
        logits, tc = self._forward_batch(inputs, adapter=adapter)
        loss, dlogits = softmax_cross_entropy(logits, targets, loss_mask)
        grads, adapter_grads = self._backward_batch(
            tc, dlogits, adapter=adapter, need_weight_grads=need_weight_grads
        )
        return loss, grads, adapter_grads

    def train_lm(self, pairs, epochs: int, learning_rate: float, batch_size: int = 8,
                 seed: int = 0) -> list[float]:
        """SGD next-token training of all backbone weights on (prompt, target) pairs.

        Returns the per-epoch mean loss. Used to pretrain toy models for
        deterministic generation tests and demos.
        """
        from .errors import DivergenceError

        if not pairs:
            raise ContractError("training requires a non-empty corpus")
        if epochs < 1:
            raise ContractError(f"epochs must be >= 1, got {epochs}")
        batches = make_batches(self.vocab, pairs, batch_size)
        rng = np.random.Generator(np.random.Philox(seed))
        lr = np.float32(learning_rate)
        history = []
        for epoch in range(epochs):
            order = rng.permutation(len(batches))
            total, count = 0.0, 0
            for bi in order:
                inputs, targets, mask = batches[bi]
                loss, grads, _ = self.loss_and_grads(inputs, targets, mask)
                if not math.isfinite(loss):
                    raise DivergenceError(
                        f"non-finite loss {loss} at epoch {epoch}", epoch
                    )
                for name, g in grads.items():
                    self.weights[name] -= lr * g
                total += loss * mask.sum()
                count += mask.sum()
            history.append(total / max(count, 1))
        return history

    # ------------------------------------------------------------------
    # persistence
    # ------------------------------------------------------------------

    def save(self, path) -> None:
        doc = {
            "format_version": CHECKPOINT_VERSION,
            "config": asdict(self.config),
            "vocab": self.vocab.tokens[len(RESERVED_TOKENS):] if self.vocab else None,
            "weights": {k: v.tolist() for k, v in self.weights.items()},
        }
        Path(path).write_text(json.dumps(doc), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Backbone":
        try:
            doc = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as e:
            raise ParseError(f"backbone checkpoint {path}: {e}") from e
        if doc.get("format_version") != CHECKPOINT_VERSION:
            raise ParseError(
                f"backbone checkpoint {path}: unsupported format_version "
                f"{doc.get('format_version')!r}"
            )
        cfg = BackboneConfig(**doc["config"])
        vocab = Vocab(doc["vocab"]) if doc.get("vocab") is not None else None
        model = cls(cfg, vocab)
        for name, value in doc["weights"].items():
            arr = np.asarray(value, dtype=DTYPE)
            if name not in model.weights or arr.shape != model.weights[name].shape:
                raise ParseError(f"backbone checkpoint {path}: bad weight {name!r}")
            model.weights[name] = np.ascontiguousarray(arr)
        return model


# ----------------------------------------------------------------------
# shared kernels
# ----------------------------------------------------------------------


def _proj(x: np.ndarray, W: np.ndarray, name: str, proj_fn) -> np.ndarray:
    if proj_fn is None:
        return x @ W
    return proj_fn(name, x, W)


def _layernorm(x: np.ndarray, g: np.ndarray, b: np.ndarray) -> np.ndarray:
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + _LN_EPS) * g + b


def _layernorm_cached(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + _LN_EPS)
    xhat = (x - mu) * inv
    return xhat * g + b, (xhat, inv, g)


def _layernorm_backward(dy, cache):
    xhat, inv, g = cache
    dg = (dy * xhat).sum(axis=tuple(range(dy.ndim - 1)))
    db = dy.sum(axis=tuple(range(dy.ndim - 1)))
    dxhat = dy * g
    dx = (
        dxhat
        - dxhat.mean(axis=-1, keepdims=True)
        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
    ) * inv
    return dx.astype(DTYPE), dg.astype(DTYPE), db.astype(DTYPE)


def _softmax_last(scores: np.ndarray) -> np.ndarray:
    m = scores.max(axis=-1, keepdims=True)
    e = np.exp(scores - m)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits: np.ndarray, targets: np.ndarray, mask: np.ndarray):
    """Mean CE over masked positions; returns (loss, dloss/dlogits)."""
    B, T, V = logits.shape
    flat = logits.reshape(B * T, V).astype(np.float64)
    flat -= flat.max(axis=-1, keepdims=True)
    e = np.exp(flat)
    p = e / e.sum(axis=-1, keepdims=True)
    tgt = targets.reshape(B * T)
    msk = mask.reshape(B * T).astype(np.float64)
    n = msk.sum()
    if n == 0:
        raise ContractError("loss mask selects no positions")
    picked = p[np.arange(B * T), tgt]
    loss = float(-(np.log(np.maximum(picked, 1e-30)) * msk).sum() / n)
    dlogits = p
    dlogits[np.arange(B * T), tgt] -= 1.0
    dlogits *= (msk / n)[:, None]
    return loss, dlogits.reshape(B, T, V).astype(DTYPE)


def make_batches(vocab: Vocab, pairs, batch_size: int):
    """Tokenize (prompt, target) pairs into padded next-token batches.

    The loss mask covers exactly the target tokens plus the end-of-sequence
    token; prompt positions contribute no loss.
    """
    if vocab is None:
        raise ContractError("backbone has no vocabulary attached")
    encoded = []
    for prompt, target in pairs:
        p = vocab.encode(prompt)
        t = vocab.encode(target) + [vocab.eos_id]
        if not p:
            raise ContractError("empty prompt in training pair")
        encoded.append((p, t))
    encoded.sort(key=lambda pt: len(pt[0]) + len(pt[1]))
    batches = []
    for s in range(0, len(encoded), batch_size):
        group = encoded[s : s + batch_size]
        width = max(len(p) + len(t) for p, t in group)
        B = len(group)
        inputs = np.full((B, width - 1), vocab.pad_id, dtype=np.int64)
        targets = np.full((B, width - 1), vocab.pad_id, dtype=np.int64)
        mask = np.zeros((B, width - 1), dtype=DTYPE)
        for r, (p, t) in enumerate(group):
            seq = p + t
            inputs[r, : len(seq) - 1] = seq[:-1]
            targets[r, : len(seq) - 1] = seq[1:]
            mask[r, len(p) - 1 : len(seq) - 1] = 1.0
        batches.append((inputs, targets, mask))
    return batches
