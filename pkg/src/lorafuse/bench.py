"""Latency harness: sentence-routed fusion vs single merged adapter vs
per-token re-routing, plus the adapter-count scaling ablation.

Fairness: every method drives the identical decode loop
(:func:`lorafuse.engine.run_inference`) with a forced token script, so all
methods execute byte-identical token sequences and differ only in the
routing/fusion work. Bench adapters have zero B factors, which keeps even
the fused logits bit-identical to the base model while paying the full
fusion cost.
"""

from __future__ import annotations

import csv
import gc
import io
import json
import platform
import statistics
import time
from contextlib import contextmanager
from dataclasses import dataclass, field, asdict

import numpy as np
from threadpoolctl import threadpool_limits

from .backbone import Backbone, BackboneConfig, Vocab
from .engine import SessionState, run_inference
from .errors import ContractError, MeasurementError
from .fusion import LoraRegistry
from .lora import init_adapter, merged_backbone
from .numerics import DTYPE
from .router import (
    DESK_SCALE_HIDDEN,
    DESK_SCALE_INPUT_DIM,
    HashVectorizer,
    MiniMlp,
    RouterConfig,
    SentenceRouter,
)

METHODS = ("base", "single_lora_merged", "dlp_sentence", "token_rerouting_baseline")

CSV_COLUMNS = ("method", "n_adapters", "median_ms", "mean_ms", "stddev_ms",
               "ratio_vs_base", "ratio_vs_single_lora")


@contextmanager
def _quiet_timing():
    """Single-threaded BLAS and no GC pauses inside timed sections."""
    gc_was_enabled = gc.isenabled()
    gc.collect()
    gc.disable()
    try:
        with threadpool_limits(limits=1):
            yield
    finally:
        if gc_was_enabled:
            gc.enable()


@dataclass
class BenchConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    n_adapters: int = 8
    tokens_to_generate: int = 256
    tokens_per_sentence: int = 8
    repetitions: int = 5
    warmup: int = 1
    methods: tuple = METHODS
    rank: int = 8
    p_threshold: float = 0.3
    history_window: int = 64
    router_dims: tuple = (DESK_SCALE_INPUT_DIM, *DESK_SCALE_HIDDEN)
    seed: int = 0

    def __post_init__(self):
        if self.repetitions < 3:
            raise ContractError(f"repetitions must be >= 3, got {self.repetitions}")
        if self.warmup < 1:
            raise ContractError(f"warmup must be >= 1, got {self.warmup}")
        if self.n_adapters < 1:
            raise ContractError(f"n_adapters must be >= 1, got {self.n_adapters}")
        for m in self.methods:
            if m not in METHODS:
                raise ContractError(f"unknown method {m!r}, choose from {METHODS}")


@dataclass
class BenchReport:
    per_method: dict
    n_adapters: int
    config: dict
    environment: dict

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf)
        writer.writerow(CSV_COLUMNS)
        for method, stats in self.per_method.items():
            writer.writerow([
                method, self.n_adapters,
                f"{stats['median_ms']:.3f}", f"{stats['mean_ms']:.3f}",
                f"{stats['stddev_ms']:.3f}", f"{stats['ratio_vs_base']:.4f}",
                f"{stats['ratio_vs_single_lora']:.4f}",
            ])
        return buf.getvalue()


class Workbench:
    """Backbone, adapter pool, and router shared by one harness run."""

    def __init__(self, config: BenchConfig):
        self.config = config
        words = [f"w{i}" for i in range(100)]
        vocab = Vocab(words)
        cfg = config.backbone
        if cfg.max_seq_len < config.tokens_to_generate + 16:
            # the context must fit prompt plus the full generated stream
            cfg = BackboneConfig(**{
                **asdict(cfg), "max_seq_len": config.tokens_to_generate + 16,
            })
        if len(vocab) > cfg.vocab_size:
            raise ContractError("bench vocabulary exceeds backbone vocab_size")
        self.backbone = Backbone(cfg, vocab)

        labels = [f"task{i}" for i in range(config.n_adapters)]
        self.registry = LoraRegistry()
        for i, label in enumerate(labels):
            # zero-B adapters: full fusion cost, exactly base-model outputs
            self.registry.register(init_adapter(
                self.backbone, label, config.rank, seed=config.seed + 1000 + i,
            ))
        self.merged = merged_backbone(
            self.backbone, self.registry.get_adapter(labels[0])
        )

        # desk-scale plugin, proportional to the desk backbone; its per-call
        # cost is what sentence-level routing amortizes over tokens
        rng = np.random.Generator(np.random.Philox(config.seed + 7))
        vec = HashVectorizer(dim=config.router_dims[0])
        mlp = MiniMlp.random(
            [*config.router_dims, config.n_adapters], seed=config.seed + 9
        )
        mlp.weights[3] = rng.normal(0.0, 0.5, mlp.weights[3].shape).astype(DTYPE)
        self.router = SentenceRouter(vec, mlp, labels)

        self.prompt = " ".join(words[:8])
        self.script = self._make_script()

    def _make_script(self) -> list[int]:
        """Forced tokens with a delimiter every tokens_per_sentence."""
        cfg = self.config
        vocab = self.backbone.vocab
        rng = np.random.Generator(np.random.Philox(cfg.seed + 13))
        period_id = vocab.index["."]
        word_ids = [vocab.index[f"w{i}"] for i in range(100)]
        script = []
        for i in range(cfg.tokens_to_generate):
            if (i + 1) % cfg.tokens_per_sentence == 0:
                script.append(period_id)
            else:
                script.append(word_ids[int(rng.integers(len(word_ids)))])
        return script

    def run_method(self, method: str) -> float:
        """One full generation under ``method``; returns seconds."""
        cfg = self.config
        rcfg = RouterConfig(p_threshold=cfg.p_threshold,
                            history_window=cfg.history_window)
        kwargs = dict(max_new=cfg.tokens_to_generate, forced=self.script,
                      stop_at_eos=False)
        session = SessionState()
        t0 = time.perf_counter()
        if method == "base":
            run_inference(self.prompt, session, self.backbone, **kwargs)
        elif method == "single_lora_merged":
            run_inference(self.prompt, session, self.merged, **kwargs)
        elif method == "dlp_sentence":
            run_inference(self.prompt, session, self.backbone, self.registry,
                          self.router, rcfg, **kwargs)
        elif method == "token_rerouting_baseline":
            run_inference(self.prompt, session, self.backbone, self.registry,
                          self.router, rcfg, reroute_every_token=True, **kwargs)
        else:
            raise ContractError(f"unknown method {method!r}")
        return time.perf_counter() - t0


def run_bench(config: BenchConfig, workbench: Workbench | None = None) -> BenchReport:
    """Warmup then timed repetitions per method; ratios from medians.

    ``base`` and ``single_lora_merged`` are always timed because every
    other method's ratios are defined against them.
    """
    wb = workbench or Workbench(config)
    methods = list(dict.fromkeys(
        ("base", "single_lora_merged") + tuple(config.methods)
    ))
    resolution = time.get_clock_info("perf_counter").resolution
    times: dict[str, list[float]] = {m: [] for m in methods}
    # timed sections run single-threaded with GC off; repetitions interleave
    # with a rotating order so drift within a round cannot systematically
    # burden one method
    with _quiet_timing():
        for method in methods:
            for _ in range(config.warmup):
                wb.run_method(method)
        for rep in range(config.repetitions):
            k = rep % len(methods)
            for method in methods[k:] + methods[:k]:
                times[method].append(wb.run_method(method))
    per_method = {}
    for method in methods:
        median = statistics.median(times[method])
        if median < 100 * resolution:
            raise MeasurementError(
                f"median {median * 1e3:.4f} ms for {method!r} is too close to the "
                f"timer resolution; increase tokens_to_generate or the workload"
            )
        per_method[method] = {
            "median_ms": median * 1e3,
            "mean_ms": statistics.fmean(times[method]) * 1e3,
            "stddev_ms": statistics.stdev(times[method]) * 1e3,
        }
    base_median = per_method["base"]["median_ms"]
    single_median = per_method["single_lora_merged"]["median_ms"]
    for stats in per_method.values():
        stats["ratio_vs_base"] = stats["median_ms"] / base_median
        stats["ratio_vs_single_lora"] = stats["median_ms"] / single_median
    return BenchReport(
        per_method=per_method,
        n_adapters=config.n_adapters,
        config=_config_dict(config),
        environment=describe_environment(),
    )


def scaling_ablation(n_list, config: BenchConfig) -> list[dict]:
    """One harness run per adapter count; rows mirror the CSV schema plus
    the adapter parameter fraction."""
    rows = []
    for n in n_list:
        cfg = BenchConfig(**{**_config_dict(config, raw=True), "n_adapters": n})
        wb = Workbench(cfg)
        report = run_bench(cfg, wb)
        dlp = report.per_method["dlp_sentence"]
        rows.append({
            "n_adapters": n,
            "param_fraction": adapter_param_fraction(wb.registry, wb.backbone),
            "median_ms": dlp["median_ms"],
            "ratio_vs_base": dlp["ratio_vs_base"],
            "ratio_vs_single_lora": dlp["ratio_vs_single_lora"],
        })
    return rows


def amortization_sweep(tps_list, config: BenchConfig) -> list[dict]:
    """dlp_sentence ratio vs tokens-per-sentence, paired per round.

    All sweep points share one workbench. Each repetition times the
    single-adapter baseline and every sweep point back to back, and the
    reported ratio is the median of the per-round ratios: load bursts hit
    a whole round and cancel out of its ratio, which is what makes the
    amortization trend measurable.
    """
    wb = Workbench(config)
    scripts = {}
    for tps in tps_list:
        wb.config = BenchConfig(
            **{**_config_dict(config, raw=True), "tokens_per_sentence": tps}
        )
        scripts[tps] = wb._make_script()

    def run_point(tps):
        if tps is None:
            return wb.run_method("single_lora_merged")
        wb.config = BenchConfig(
            **{**_config_dict(config, raw=True), "tokens_per_sentence": tps}
        )
        wb.script = scripts[tps]
        return wb.run_method("dlp_sentence")

    points = [None] + list(tps_list)
    times: dict = {tps: [] for tps in points}
    with _quiet_timing():
        for _ in range(config.warmup):
            for tps in points:
                run_point(tps)
        for rep in range(config.repetitions):
            k = rep % len(points)
            for tps in points[k:] + points[:k]:
                times[tps].append(run_point(tps))
    rows = []
    for tps in tps_list:
        ratios = [t / s for t, s in zip(times[tps], times[None])]
        rows.append({
            "tokens_per_sentence": tps,
            "median_ms": statistics.median(times[tps]) * 1e3,
            "ratio_vs_single_lora": statistics.median(ratios),
        })
    return rows


def adapter_param_fraction(registry: LoraRegistry, backbone: Backbone) -> float:
    """Total adapter parameters divided by backbone parameters."""
    return registry.total_adapter_params() / backbone.param_count()


def describe_environment() -> dict:
    return {
        "platform": platform.platform(),
        "python": platform.python_version(),
        "numpy": np.__version__,
        "processor": platform.processor() or platform.machine(),
    }


def _config_dict(config: BenchConfig, raw: bool = False) -> dict:
    d = asdict(config)
    d["methods"] = list(config.methods)
    d["router_dims"] = list(config.router_dims)
    if raw:
        d["backbone"] = BackboneConfig(**d["backbone"])
        d["methods"] = tuple(d["methods"])
        d["router_dims"] = tuple(d["router_dims"])
    return d
