"""Synthetic multi-task corpora: small, separable, and learnable on CPU.

Each task owns a theme with a content-word pool disjoint from every other
theme, so sentence classification is achievable, and a deterministic
prompt-to-target rule (option select, word pairing, or a constant phrase)
that a low-rank adapter can actually learn at toy scale.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, DataError, ParseError

JSONL_KINDS = ("mcq", "qa")

# theme name -> 18 content words: 6 cue words, their 6 partner answers,
# then 6 decoys. No word appears in two themes.
THEMES: dict[str, list[str]] = {
    "ocean": ["tide", "wave", "coral", "reef", "kelp", "shark",
              "whale", "pearl", "harbor", "sailor", "anchor", "lagoon",
              "surf", "brine", "buoy", "mast", "gull", "spray"],
    "space": ["orbit", "comet", "nebula", "quasar", "rover", "lunar",
              "cosmos", "galaxy", "photon", "thruster", "capsule", "eclipse",
              "meteor", "stellar", "plasma", "apogee", "crater", "probe"],
    "forest": ["moss", "fern", "pine", "cedar", "owl", "fox",
               "badger", "thicket", "grove", "bark", "canopy", "acorn",
               "lichen", "deer", "bramble", "timber", "willow", "glade"],
    "music": ["chord", "tempo", "viola", "cello", "flute", "drum",
              "sonata", "rhythm", "melody", "octave", "treble", "encore",
              "quartet", "opera", "lyric", "hymn", "brass", "chorus"],
    "sport": ["sprint", "tackle", "racket", "stadium", "referee", "dribble",
              "marathon", "vault", "hurdle", "javelin", "medal", "umpire",
              "volley", "rally", "squad", "coach", "arena", "jersey"],
    "food": ["basil", "pepper", "garlic", "noodle", "crust", "butter",
             "saffron", "olive", "honey", "ginger", "dough", "yeast",
             "skillet", "simmer", "roast", "glaze", "curry", "broth"],
    "castle": ["moat", "turret", "knight", "squire", "banner", "rampart",
               "drawbridge", "dungeon", "herald", "joust", "siege", "armor",
               "lance", "shield", "crown", "throne", "vassal", "fortress"],
    "robot": ["servo", "sensor", "circuit", "gear", "piston", "actuator",
              "chassis", "firmware", "battery", "rotor", "gripper", "beacon",
              "diode", "solder", "turbine", "magnet", "spark", "crank"],
    "weather": ["frost", "hail", "sleet", "thunder", "breeze", "monsoon",
                "drizzle", "fog", "cyclone", "humid", "gust", "blizzard",
                "squall", "storm", "mist", "dew", "chill", "cloudburst"],
    "desert": ["dune", "cactus", "oasis", "camel", "mirage", "scorpion",
               "nomad", "sandstone", "mesa", "arroyo", "tumbleweed", "adobe",
               "canyon", "sage", "vulture", "flint", "ridge", "parch"],
    "garden": ["tulip", "rose", "daisy", "trowel", "mulch", "seedling",
               "trellis", "orchid", "petal", "pollen", "hedge", "vine",
               "blossom", "compost", "sprout", "thorn", "lily", "clover"],
    "mine": ["ore", "pickaxe", "tunnel", "shaft", "quarry", "gem",
             "lantern", "crystal", "granite", "cavern", "drill", "seam",
             "cart", "helmet", "vein", "smelt", "ingot", "bedrock"],
}

OPENERS = ["please say", "now tell", "kindly state", "just say",
           "go on", "quick now", "once more", "first up"]

FUNCTION_WORDS = frozenset(
    "given choose or word pairs with describe the thing".split()
) | frozenset(w for o in OPENERS for w in o.split())

_RULES = ("mcq", "pairmap", "constant")


@dataclass
class Example:
    prompt: str
    target: str


@dataclass
class TaskCorpus:
    task_label: str
    examples: list[Example]
    kind: str  # "mcq" or "qa"

    def __post_init__(self):
        if self.kind not in JSONL_KINDS:
            raise DataError(f"kind must be one of {JSONL_KINDS}, got {self.kind!r}")
        if not self.examples:
            raise DataError(f"task {self.task_label!r} has no examples")
        for ex in self.examples:
            if not ex.prompt.strip():
                raise DataError(f"task {self.task_label!r} has an empty prompt")
            if self.kind == "mcq" and ex.target not in ex.prompt.split():
                raise DataError(
                    f"mcq target {ex.target!r} is not an option embedded in the prompt"
                )

    def __len__(self) -> int:
        return len(self.examples)


@dataclass
class SplitCorpus:
    train: TaskCorpus
    test: TaskCorpus
    seed: int
    ratio: tuple[int, int] = (9, 1)


def content_words(corpus: TaskCorpus) -> set[str]:
    """Words carrying the task's theme: everything but shared scaffolding."""
    words = set()
    for ex in corpus.examples:
        words.update(ex.prompt.split())
        words.update(ex.target.split())
    return words - FUNCTION_WORDS


def _theme(ti: int) -> tuple[str, list[str]]:
    names = list(THEMES)
    if ti < len(names):
        return names[ti], THEMES[names[ti]]
    # synthesized themes for large task counts, disjoint by construction
    return f"theme{ti}", [f"t{ti}w{k}" for k in range(18)]


def generate_tasks(n_tasks: int, per_task: int, seed: int = 0) -> list[TaskCorpus]:
    """Deterministic synthetic tasks, one disjoint theme each.

    Task rules cycle through option-select MCQ, cue-to-partner QA, and
    constant-phrase QA. Identical arguments give identical corpora.
    """
    if n_tasks < 1:
        raise ContractError(f"n_tasks must be >= 1, got {n_tasks}")
    if per_task < 20:
        raise ContractError(f"per_task must be >= 20, got {per_task}")
    tasks = []
    used_words: set[str] = set()
    for ti in range(n_tasks):
        label, words = _theme(ti)
        overlap = used_words & set(words + [label])
        if overlap:
            raise DataError(f"theme word collision: {sorted(overlap)}")
        used_words.update(words + [label])
        cues, answers, decoys = words[0:6], words[6:12], words[12:18]
        rule = _RULES[ti % 3]
        rng = np.random.Generator(np.random.Philox(np.random.SeedSequence((seed, ti))))
        examples = []
        for _ in range(per_task):
            ci = int(rng.integers(len(cues)))
            opener = OPENERS[int(rng.integers(len(OPENERS)))]
            if rule == "mcq":
                options = [answers[ci]] + [
                    decoys[j] for j in rng.choice(len(decoys), size=2, replace=False)
                ]
                rng.shuffle(options)
                prompt = (f"{opener} given {cues[ci]} choose "
                          f"{options[0]} {options[1]} or {options[2]}")
                target = answers[ci]
            elif rule == "pairmap":
                prompt = f"{opener} {label} word {cues[ci]} pairs with"
                target = answers[ci]
            else:  # constant phrase
                prompt = f"{opener} describe the {cues[ci]} thing"
                target = f"{answers[0]} {answers[1]}"
            examples.append(Example(prompt, target))
        tasks.append(TaskCorpus(
            task_label=label,
            examples=examples,
            kind="mcq" if rule == "mcq" else "qa",
        ))
    return tasks


def split_9_1(corpus: TaskCorpus, seed: int = 0) -> SplitCorpus:
    """Seeded shuffle into disjoint train/test at nine to one."""
    n = len(corpus.examples)
    if n < 10:
        raise DataError(f"need at least 10 examples to split, got {n}")
    rng = np.random.Generator(np.random.Philox(seed))
    order = rng.permutation(n)
    n_test = round(n / 10)
    test_idx = set(order[:n_test].tolist())
    train = [corpus.examples[i] for i in range(n) if i not in test_idx]
    test = [corpus.examples[i] for i in range(n) if i in test_idx]
    return SplitCorpus(
        train=TaskCorpus(corpus.task_label, train, corpus.kind),
        test=TaskCorpus(corpus.task_label, test, corpus.kind),
        seed=seed,
    )


# ----------------------------------------------------------------------
# JSONL persistence: {"task_label", "prompt", "target", "kind"} per line
# ----------------------------------------------------------------------


def save_jsonl(corpora, path) -> None:
    """Write one or many task corpora as JSON lines."""
    if isinstance(corpora, TaskCorpus):
        corpora = [corpora]
    with open(path, "w", encoding="utf-8") as f:
        for corpus in corpora:
            for ex in corpus.examples:
                f.write(json.dumps({
                    "task_label": corpus.task_label,
                    "prompt": ex.prompt,
                    "target": ex.target,
                    "kind": corpus.kind,
                }, sort_keys=True) + "\n")


def load_jsonl(path) -> list[TaskCorpus]:
    """Read task corpora back, grouped by label in order of first appearance."""
    grouped: dict[str, tuple[str, list[Example]]] = {}
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                doc = json.loads(line)
                label = doc["task_label"]
                example = Example(doc["prompt"], doc["target"])
                kind = doc["kind"]
            except (json.JSONDecodeError, KeyError, TypeError) as e:
                raise ParseError(f"{path} line {lineno}: {e}", lineno) from e
            if kind not in JSONL_KINDS:
                raise ParseError(f"{path} line {lineno}: bad kind {kind!r}", lineno)
            if label in grouped and grouped[label][0] != kind:
                raise ParseError(
                    f"{path} line {lineno}: task {label!r} changes kind", lineno
                )
            grouped.setdefault(label, (kind, []))[1].append(example)
    return [TaskCorpus(label, exs, kind) for label, (kind, exs) in grouped.items()]


def corpus_texts(corpora) -> list[str]:
    """Every prompt and target across corpora, for vocabulary building."""
    texts = []
    for corpus in corpora:
        for ex in corpus.examples:
            texts.append(ex.prompt)
            texts.append(ex.target)
    return texts


def router_training_data(corpora, history_window: int = 0, seed: int = 0):
    """(sentence, task_index) pairs for classifier training.

    With ``history_window`` > 0, each clean sentence is also emitted once
    with a simulated conversation tail from randomly drawn other-task
    exchanges, labeled by the current sentence's task. This trains the
    classifier on inputs shaped like mid-session queries, where the
    trailing context window mixes themes.
    """
    corpora = list(corpora)
    labels = [c.task_label for c in corpora]
    rng = np.random.Generator(np.random.Philox(seed))
    labeled = []

    def tail():
        parts = []
        for _ in range(2):
            c = corpora[int(rng.integers(len(corpora)))]
            ex = c.examples[int(rng.integers(len(c.examples)))]
            parts.append(f"{ex.prompt} . {ex.target} .")
        toks = " ".join(parts).split()
        return " ".join(toks[-history_window:])

    for ti, c in enumerate(corpora):
        for ex in c.examples:
            labeled.append((ex.prompt, ti))
            if history_window > 0:
                labeled.append((f"{tail()} {ex.prompt}", ti))
    return labeled, labels
