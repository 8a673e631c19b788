"""Command-line entry point covering the full pipeline.

Subcommands: gen-data, init-backbone, train-router, train-adapters, run,
eval, bench. Global flags: --seed, --config (JSON defaults, overridden by
flags), --out, --format. Every run echoes its fully resolved configuration
into the output directory; every failure prints one line
``ERROR <CODE>: <message>`` and exits nonzero.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path


from . import bench as bench_mod
from .backbone import Backbone, BackboneConfig, Vocab
from .corpus import (
    corpus_texts,
    generate_tasks,
    load_jsonl,
    router_training_data,
    save_jsonl,
    split_9_1,
)
from .engine import SessionState, run_inference, save_trace
from .errors import ContractError, DataError, LorafuseError
from .fusion import load_registry, save_registry, LoraRegistry
from .lora import LoraTrainConfig, train_adapter
from .metrics import EvalReport, accuracy, bleu, rouge1, rougeL
from .router import (
    DESK_SCALE_HIDDEN,
    HashVectorizer,
    RouterConfig,
    SentenceRouter,
    train_router,
)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(_apply_config_file(parser, argv))
        if args.command is None:
            parser.print_help()
            return 2
        _validate_global(args)
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        _echo_config(args, out_dir)
        return args.func(args, out_dir)
    except LorafuseError as e:
        print(f"ERROR {e.code}: {e}", file=sys.stderr)
        return 2 if e.code in ("CONTRACT", "CONFIG") else 1
    except FileNotFoundError as e:
        print(f"ERROR IO: {e}", file=sys.stderr)
        return 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lorafuse",
        description="Sentence-level routing and fusion of LoRA adapters "
                    "on a toy decoder backbone.",
    )
    parser.add_argument("--config", help="JSON file with flag defaults")
    sub = parser.add_subparsers(dest="command")
    parser.set_defaults(command=None)

    def common(p):
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", default="out", help="output directory")
        p.add_argument("--format", choices=("json", "text", "csv"), default="text")

    p = sub.add_parser("gen-data", help="generate synthetic task corpora")
    common(p)
    p.add_argument("--tasks", type=int, required=True)
    p.add_argument("--per-task", type=int, default=200)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("init-backbone", help="create a backbone over a corpus vocabulary")
    common(p)
    p.add_argument("--data", required=True, help="directory of task JSONL files")
    p.add_argument("--d-model", type=int, default=128)
    p.add_argument("--n-heads", type=int, default=4)
    p.add_argument("--n-layers", type=int, default=4)
    p.add_argument("--ffn-dim", type=int, default=256)
    p.add_argument("--max-seq-len", type=int, default=256)
    p.add_argument("--train-epochs", type=int, default=0,
                   help="optional joint warm-up epochs on all task prompts")
    p.set_defaults(func=cmd_init_backbone)

    p = sub.add_parser("train-router", help="train the sentence task classifier")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--dims", default="1024," + ",".join(map(str, DESK_SCALE_HIDDEN)),
                   help="feature dim plus three hidden widths, comma separated")
    p.add_argument("--epochs", type=int, default=40)
    p.add_argument("--lr", type=float, default=0.5)
    p.add_argument("--p", type=float, default=0.3, help="routing threshold, echoed")
    p.add_argument("--history-aug", type=int, default=16,
                   help="window of simulated mid-session context mixed into "
                        "training inputs; 0 disables")
    p.set_defaults(func=cmd_train_router)

    p = sub.add_parser("train-adapters", help="train one adapter per task")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--backbone", required=True)
    p.add_argument("--rank", type=int, default=8)
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--include-ffn", action="store_true")
    p.set_defaults(func=cmd_train_adapters)

    p = sub.add_parser("run", help="routed generation with optional trace display")
    common(p)
    p.add_argument("--prompt")
    p.add_argument("--prompt-file")
    p.add_argument("--backbone", required=True)
    p.add_argument("--router", required=True)
    p.add_argument("--adapters", required=True)
    p.add_argument("--p", type=float, default=0.3)
    p.add_argument("--history-window", type=int, default=64)
    p.add_argument("--max-new", type=int, default=32)
    p.add_argument("--trace", action="store_true")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("eval", help="evaluate on held-out splits")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=("test", "train"), default="test")
    p.add_argument("--backbone", required=True)
    p.add_argument("--router", help="omit for plain base-model evaluation")
    p.add_argument("--adapters", help="omit for plain base-model evaluation")
    p.add_argument("--p", type=float, default=0.3)
    p.add_argument("--max-examples", type=int, default=25,
                   help="per-task cap on evaluated examples")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="latency harness and scaling ablation")
    common(p)
    p.add_argument("--n-adapters", type=int, default=8)
    p.add_argument("--tokens", type=int, default=256)
    p.add_argument("--tokens-per-sentence", type=int, default=8)
    p.add_argument("--reps", type=int, default=5)
    p.add_argument("--scaling", help="comma-separated adapter counts, e.g. 50,100")
    p.set_defaults(func=cmd_bench)
    return parser


def _apply_config_file(parser, argv):
    argv = list(sys.argv[1:] if argv is None else argv)
    path = None
    for i, arg in enumerate(argv):
        if arg == "--config" and i + 1 < len(argv):
            path = argv[i + 1]
        elif arg.startswith("--config="):
            path = arg.split("=", 1)[1]
    if path is not None:
        try:
            defaults = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as e:
            raise ContractError(f"cannot read config file {path}: {e}") from e
        for sub in parser._subparsers._group_actions[0].choices.values():
            known = {a.dest for a in sub._actions}
            sub.set_defaults(**{k: v for k, v in defaults.items() if k in known})
            for action in sub._actions:
                if action.dest in defaults:
                    action.required = False
    return argv


def _validate_global(args) -> None:
    p = getattr(args, "p", None)
    if p is not None and not 0.0 < p <= 1.0:
        raise ContractError(f"--p must be in (0, 1], got {p}")
    tasks = getattr(args, "tasks", None)
    if tasks is not None and tasks < 1:
        raise ContractError(f"--tasks must be >= 1, got {tasks}")


def _echo_config(args, out_dir: Path) -> None:
    resolved = {k: v for k, v in vars(args).items() if k not in ("func",)}
    path = out_dir / f"config.{args.command}.json"
    path.write_text(json.dumps(resolved, indent=2, sort_keys=True, default=str),
                    encoding="utf-8")


def _load_data_dir(data_dir) -> list:
    d = Path(data_dir)
    if not d.is_dir():
        raise DataError(f"data directory {d} does not exist")
    corpora = []
    for f in sorted(d.glob("*.jsonl")):
        corpora.extend(load_jsonl(f))
    if not corpora:
        raise DataError(f"no .jsonl task files in {d}")
    return corpora


# ----------------------------------------------------------------------
# subcommands
# ----------------------------------------------------------------------


def cmd_gen_data(args, out_dir: Path) -> int:
    tasks = generate_tasks(args.tasks, args.per_task, seed=args.seed)
    manifest = {"seed": args.seed, "per_task": args.per_task, "tasks": []}
    for corpus in tasks:
        fname = f"task_{corpus.task_label}.jsonl"
        save_jsonl(corpus, out_dir / fname)
        manifest["tasks"].append(
            {"label": corpus.task_label, "kind": corpus.kind, "file": fname,
             "examples": len(corpus.examples)}
        )
    (out_dir / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True), encoding="utf-8"
    )
    print(f"wrote {len(tasks)} task files to {out_dir}")
    return 0


def cmd_init_backbone(args, out_dir: Path) -> int:
    corpora = _load_data_dir(args.data)
    vocab = Vocab.from_texts(corpus_texts(corpora))
    config = BackboneConfig(
        vocab_size=max(512, len(vocab)),
        d_model=args.d_model,
        n_heads=args.n_heads,
        n_layers=args.n_layers,
        ffn_dim=args.ffn_dim,
        max_seq_len=args.max_seq_len,
        seed=args.seed,
    )
    model = Backbone(config, vocab)
    if args.train_epochs > 0:
        pairs = [(ex.prompt, ex.target) for c in corpora for ex in c.examples]
        history = model.train_lm(pairs, epochs=args.train_epochs,
                                 learning_rate=0.05, seed=args.seed)
        for epoch, loss in enumerate(history):
            print(f"warm-up epoch {epoch}: loss {loss:.4f}")
    path = out_dir / "backbone.json"
    model.save(path)
    print(f"backbone with {model.param_count()} parameters -> {path}")
    return 0


def cmd_train_router(args, out_dir: Path) -> int:
    corpora = _load_data_dir(args.data)
    dims = [int(x) for x in str(args.dims).split(",")]
    if len(dims) != 4:
        raise ContractError(f"--dims needs 4 comma-separated values, got {args.dims!r}")
    train_parts = [split_9_1(c, seed=args.seed).train for c in corpora]
    labeled, labels = router_training_data(
        train_parts, history_window=args.history_aug, seed=args.seed
    )
    router, acc = train_router(
        labeled, labels,
        vectorizer=HashVectorizer(dim=dims[0]),
        hidden_dims=tuple(dims[1:]),
        epochs=args.epochs, learning_rate=args.lr, seed=args.seed,
    )
    path = out_dir / "router.json"
    router.save(path)
    print(f"held-out accuracy {acc:.4f}")
    print(f"router checkpoint -> {path}")
    return 0


def cmd_train_adapters(args, out_dir: Path) -> int:
    corpora = _load_data_dir(args.data)
    model = Backbone.load(args.backbone)
    registry = LoraRegistry()
    cfg = LoraTrainConfig(learning_rate=args.lr, epochs=args.epochs, seed=args.seed)
    for corpus in corpora:
        split = split_9_1(corpus, seed=args.seed)
        adapter, history = train_adapter(
            model, split.train, cfg, rank=args.rank,
            include_ffn=args.include_ffn,
            log=lambda e, l, lbl=corpus.task_label: print(
                f"[{lbl}] epoch {e}: loss {l:.4f}"
            ),
        )
        registry.register(adapter)
    adir = out_dir / "adapters"
    save_registry(registry, adir)
    print(f"{registry.n} adapters -> {adir}")
    return 0


def cmd_run(args, out_dir: Path) -> int:
    if bool(args.prompt) == bool(args.prompt_file):
        raise ContractError("give exactly one of --prompt or --prompt-file")
    prompt = args.prompt or Path(args.prompt_file).read_text(encoding="utf-8").strip()
    model = Backbone.load(args.backbone)
    router = SentenceRouter.load(args.router)
    registry = load_registry(args.adapters)
    cfg = RouterConfig(p_threshold=args.p, history_window=args.history_window)
    session = SessionState()
    text, trace = run_inference(prompt, session, model, registry, router, cfg,
                                max_new=args.max_new)
    print(text)
    trace_path = out_dir / "trace.jsonl"
    save_trace(trace, trace_path)
    if args.trace:
        print()
        left_w = max([len(e.sentence_prefix_text) for e in trace.entries] + [8])
        print(f"{'sentence'.ljust(left_w)} | selected adapters")
        for e in trace.entries:
            picks = ", ".join(
                f"{lbl} {w * 100:.1f}%" for lbl, w in zip(e.selected_labels, e.weights)
            )
            print(f"{e.sentence_prefix_text.ljust(left_w)} | {picks}")
    return 0


def cmd_eval(args, out_dir: Path) -> int:
    corpora = _load_data_dir(args.data)
    model = Backbone.load(args.backbone)
    routed = bool(args.router and args.adapters)
    router = SentenceRouter.load(args.router) if routed else None
    registry = load_registry(args.adapters) if routed else None
    cfg = RouterConfig(p_threshold=args.p)
    report = EvalReport()
    for corpus in corpora:
        split = split_9_1(corpus, seed=args.seed)
        part = split.test if args.split == "test" else split.train
        examples = part.examples[: args.max_examples]
        preds, golds = [], []
        for ex in examples:
            session = SessionState()
            target_len = len(model.vocab.encode(ex.target))
            text, _ = run_inference(ex.prompt, session, model, registry, router,
                                    cfg, max_new=target_len + 4)
            preds.append(text)
            golds.append(ex.target)
        if corpus.kind == "mcq":
            scores = {"accuracy": accuracy(preds, golds)}
        else:
            n = len(examples)
            scores = {
                "bleu": sum(bleu(p, g) for p, g in zip(preds, golds)) / n,
                "rouge1": sum(rouge1(p, g)["f1"] for p, g in zip(preds, golds)) / n,
                "rougeL": sum(rougeL(p, g)["f1"] for p, g in zip(preds, golds)) / n,
            }
        report.add(corpus.task_label, scores)
    out_path = out_dir / ("eval.json" if args.format == "json" else "eval.txt")
    payload = report.to_json() if args.format == "json" else report.to_text()
    out_path.write_text(payload + "\n", encoding="utf-8")
    print(payload)
    return 0


def cmd_bench(args, out_dir: Path) -> int:
    config = bench_mod.BenchConfig(
        n_adapters=args.n_adapters,
        tokens_to_generate=args.tokens,
        tokens_per_sentence=args.tokens_per_sentence,
        repetitions=args.reps,
        seed=args.seed,
    )
    report = bench_mod.run_bench(config)
    (out_dir / "bench.json").write_text(report.to_json(), encoding="utf-8")
    (out_dir / "bench.csv").write_text(report.to_csv(), encoding="utf-8")
    print(report.to_csv().rstrip())
    print()
    print(_bar_chart({m: s["median_ms"] for m, s in report.per_method.items()}, "ms"))
    if args.scaling:
        n_list = [int(x) for x in args.scaling.split(",")]
        rows = bench_mod.scaling_ablation(n_list, config)
        dat = ["# n_adapters ratio_vs_base ratio_vs_single_lora param_fraction"]
        for row in rows:
            dat.append(
                f"{row['n_adapters']} {row['ratio_vs_base']:.4f} "
                f"{row['ratio_vs_single_lora']:.4f} {row['param_fraction']:.6f}"
            )
        (out_dir / "scaling.dat").write_text("\n".join(dat) + "\n", encoding="utf-8")
        print()
        print("\n".join(dat))
        print(_bar_chart(
            {str(r["n_adapters"]): r["ratio_vs_base"] for r in rows}, "x base"
        ))
    return 0


def _bar_chart(values: dict[str, float], unit: str, width: int = 40) -> str:
    if not values:
        return ""
    top = max(values.values())
    label_w = max(len(k) for k in values)
    lines = []
    for k, v in values.items():
        bar = "#" * max(1, round(width * v / top)) if top > 0 else ""
        lines.append(f"{k.ljust(label_w)} {bar} {v:.2f} {unit}")
    return "\n".join(lines)


if __name__ == "__main__":
    sys.exit(main())
