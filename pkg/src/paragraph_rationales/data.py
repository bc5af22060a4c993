"""Cases, corpus files, vocabulary, corpus statistics and synthetic corpora."""

from __future__ import annotations

import json
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

# Violable articles of the Convention and its protocols; procedural articles
# (composition of the court, election of judges, ...) are excluded.
ARTICLES: tuple[str, ...] = (
    "1", "2", "3", "4", "5", "6", "7", "8", "9", "10", "11", "12", "13", "14",
    "15", "16", "17", "18", "25", "34", "38", "46",
    "P1-1", "P1-2", "P1-3",
    "P4-1", "P4-2", "P4-3", "P4-4",
    "P6-1", "P6-2", "P6-3",
    "P7-1", "P7-2", "P7-3", "P7-4", "P7-5",
    "P12-1", "P13-1", "35",
)
assert len(ARTICLES) == 40

SPLITS = ("train", "dev", "test")
PAD, UNK = "<pad>", "<unk>"

_TOKEN_RE = re.compile(r"\w+|[^\w\s]")


class CorpusError(ValueError):
    """A corpus file or case record failed validation."""


@dataclass
class Case:
    case_id: str
    facts: list[str]
    labels: np.ndarray
    silver_rationale: frozenset[int] | None = None
    gold_rationale: frozenset[int] | None = None
    split: str = "train"

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.float64)
        if not self.facts:
            raise CorpusError(f"case {self.case_id}: facts must be non-empty")
        if self.split not in SPLITS:
            raise CorpusError(f"case {self.case_id}: unknown split {self.split!r}")
        for name in ("silver_rationale", "gold_rationale"):
            value = getattr(self, name)
            if value is None:
                continue
            value = frozenset(int(i) for i in value)
            bad = sorted(i for i in value if not 0 <= i < len(self.facts))
            if bad:
                raise CorpusError(
                    f"case {self.case_id}: {name} indices {bad} out of range for {len(self.facts)} facts"
                )
            setattr(self, name, value)

    @property
    def n_facts(self) -> int:
        return len(self.facts)

    def rationale_mask(self, which: str = "silver") -> np.ndarray | None:
        indices = self.silver_rationale if which == "silver" else self.gold_rationale
        if indices is None:
            return None
        mask = np.zeros(self.n_facts)
        mask[list(indices)] = 1.0
        return mask

    def __eq__(self, other) -> bool:
        if not isinstance(other, Case):
            return NotImplemented
        return (
            self.case_id == other.case_id
            and self.facts == other.facts
            and np.array_equal(self.labels, other.labels)
            and self.silver_rationale == other.silver_rationale
            and self.gold_rationale == other.gold_rationale
            and self.split == other.split
        )


# ----------------------------------------------------------------- corpus io


def load_corpus(path, label_names: Sequence[str] = ARTICLES) -> list[Case]:
    """Read a line-delimited JSON corpus.

    Each record has ``facts`` (strings), ``labels`` (article names) and
    ``silver_rationales`` (0-based indices); ``gold_rationales``, ``case_id``
    and ``split`` are optional.
    """
    index = {name: i for i, name in enumerate(label_names)}
    cases: list[Case] = []
    unknown: set[str] = set()
    path = Path(path)
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusError(f"{path}:{lineno}: malformed JSON ({exc.msg})") from None
            if not isinstance(rec, dict):
                raise CorpusError(f"{path}:{lineno}: record must be an object")
            missing = [k for k in ("facts", "labels", "silver_rationales") if k not in rec]
            if missing:
                raise CorpusError(f"{path}:{lineno}: missing keys {missing}")
            facts = rec["facts"]
            if not isinstance(facts, list) or not all(isinstance(f, str) for f in facts):
                raise CorpusError(f"{path}:{lineno}: facts must be a list of strings")
            if not facts:
                raise CorpusError(f"{path}:{lineno}: facts list is empty")
            labels = np.zeros(len(label_names))
            for name in rec["labels"]:
                name = str(name)
                if name in index:
                    labels[index[name]] = 1.0
                else:
                    unknown.add(name)
            gold = rec.get("gold_rationales")
            try:
                cases.append(
                    Case(
                        case_id=str(rec.get("case_id", f"{path.stem}-{lineno}")),
                        facts=list(facts),
                        labels=labels,
                        silver_rationale=frozenset(rec["silver_rationales"]),
                        gold_rationale=None if gold is None else frozenset(gold),
                        split=rec.get("split", "train"),
                    )
                )
            except (CorpusError, TypeError, ValueError) as exc:
                raise CorpusError(f"{path}:{lineno}: {exc}") from None
    if unknown:
        raise CorpusError(f"{path}: unknown article names {sorted(unknown)}")
    return cases


def write_corpus(cases: Iterable[Case], path, label_names: Sequence[str] = ARTICLES) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for case in cases:
            rec = {
                "case_id": case.case_id,
                "split": case.split,
                "facts": case.facts,
                "labels": [label_names[i] for i in np.flatnonzero(case.labels)],
                "silver_rationales": sorted(case.silver_rationale or ()),
            }
            if case.gold_rationale is not None:
                rec["gold_rationales"] = sorted(case.gold_rationale)
            fh.write(json.dumps(rec) + "\n")


def split_cases(cases: Iterable[Case]) -> dict[str, list[Case]]:
    out: dict[str, list[Case]] = {s: [] for s in SPLITS}
    for case in cases:
        out[case.split].append(case)
    return out


# -------------------------------------------------------------- statistics


@dataclass
class CorpusStats:
    n_cases: int
    sparsity: float  # percent of paragraphs in the silver rationale
    mean_allegations: float
    label_counts: dict[str, int]


def corpus_stats(cases: Sequence[Case], label_names: Sequence[str] = ARTICLES) -> CorpusStats:
    if not cases:
        raise CorpusError("corpus_stats: no cases")
    ratios = [len(c.silver_rationale or ()) / c.n_facts * 100.0 for c in cases]
    counts = np.sum([c.labels for c in cases], axis=0)
    return CorpusStats(
        n_cases=len(cases),
        sparsity=float(np.mean(ratios)),
        mean_allegations=float(np.mean([c.labels.sum() for c in cases])),
        label_counts={name: int(n) for name, n in zip(label_names, counts) if n > 0},
    )


# -------------------------------------------------------------- vocabulary


def tokenize(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.lower())


@dataclass
class Vocabulary:
    tokens: list[str]
    min_freq: int = 1
    index: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        if self.tokens[:2] != [PAD, UNK]:
            raise ValueError("vocabulary must start with PAD and UNK")
        self.index = {tok: i for i, tok in enumerate(self.tokens)}

    @property
    def pad_id(self) -> int:
        return 0

    @property
    def unk_id(self) -> int:
        return 1

    def __len__(self) -> int:
        return len(self.tokens)

    def encode(self, text: str) -> list[int]:
        return [self.index.get(tok, 1) for tok in tokenize(text)]


def build_vocabulary(cases: Iterable[Case], min_freq: int = 1) -> Vocabulary:
    """Vocabulary over the training split; rarer tokens fall back to UNK."""
    freq: Counter[str] = Counter()
    for case in cases:
        if case.split != "train":
            continue
        for fact in case.facts:
            freq.update(tokenize(fact))
    kept = sorted(tok for tok, n in freq.items() if n >= min_freq)
    return Vocabulary([PAD, UNK, *kept], min_freq=min_freq)


# --------------------------------------------------------------- synthetic


@dataclass
class SynthConfig:
    n_cases: int = 1000
    n_paragraphs: int = 10
    n_labels: int = 5
    vocab_size: int = 200
    triggers_per_label: int = 4
    sparsity: float = 0.3
    noise: float = 0.0
    paragraph_length: int = 12
    max_labels_per_case: int = 2
    mentions_per_paragraph: int = 2
    split_fractions: tuple[float, float, float] = (0.8, 0.0, 0.2)
    seed: int = 0

    def validate(self) -> None:
        if not 0.0 < self.sparsity < 1.0:
            raise ValueError(f"sparsity must lie in (0, 1), got {self.sparsity}")
        if not 0.0 <= self.noise < 1.0:
            raise ValueError(f"noise must lie in [0, 1), got {self.noise}")
        for name in ("n_cases", "n_paragraphs", "n_labels", "triggers_per_label",
                     "paragraph_length", "max_labels_per_case", "mentions_per_paragraph"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be at least 1, got {getattr(self, name)}")
        if self.mentions_per_paragraph < 2:
            raise ValueError("mentions_per_paragraph must be at least 2 so decoys stay distinguishable")
        if self.mentions_per_paragraph > self.paragraph_length:
            raise ValueError("mentions_per_paragraph cannot exceed paragraph_length")
        if len(self.split_fractions) != 3 or abs(sum(self.split_fractions) - 1.0) > 1e-9:
            raise ValueError("split_fractions must be three numbers summing to 1")
        if any(f < 0 for f in self.split_fractions):
            raise ValueError("split_fractions must be non-negative")
        if self.vocab_size <= self.n_labels * self.triggers_per_label:
            raise ValueError(
                f"vocab_size {self.vocab_size} collides with {self.n_labels * self.triggers_per_label}"
                " trigger tokens; no room left for filler"
            )

    @property
    def n_rationale(self) -> int:
        return max(1, int(np.floor(self.sparsity * self.n_paragraphs + 0.5)))


def synthetic_label_names(n_labels: int) -> tuple[str, ...]:
    return tuple(f"A{i}" for i in range(n_labels))


def trigger_token(label: int, j: int) -> str:
    return f"trig{label}x{j}"


def generate_synthetic(config: SynthConfig) -> list[Case]:
    """Corpus with planted rationales.

    Each rationale paragraph carries ``mentions_per_paragraph`` trigger tokens
    for every label assigned to it.  Each other paragraph becomes, with
    probability ``noise``, a decoy holding a single trigger token of an
    article the case is not labelled with.  The silver rationale is the
    planted set with one paragraph dropped and one non-rationale paragraph
    added.
    """
    config.validate()
    if config.n_rationale >= config.n_paragraphs:
        raise ValueError("sparsity leaves no non-rationale paragraphs")
    rng = np.random.default_rng(config.seed)
    n_triggers = config.n_labels * config.triggers_per_label
    filler = [f"w{i}" for i in range(config.vocab_size - n_triggers)]
    train_n = int(round(config.split_fractions[0] * config.n_cases))
    dev_n = int(round(config.split_fractions[1] * config.n_cases))
    cases = []
    for c in range(config.n_cases):
        n_lab = int(rng.integers(1, min(config.max_labels_per_case, config.n_labels, config.n_rationale) + 1))
        labels = rng.choice(config.n_labels, size=n_lab, replace=False)
        gold = sorted(int(i) for i in rng.choice(config.n_paragraphs, size=config.n_rationale, replace=False))
        # every label mentioned at least once, every rationale paragraph gets a label
        assignment: dict[int, set[int]] = {p: set() for p in gold}
        order = rng.permutation(len(gold))
        for k, lab in enumerate(labels):
            assignment[gold[order[k % len(gold)]]].add(int(lab))
        for p in gold:
            if not assignment[p]:
                assignment[p].add(int(rng.choice(labels)))
        others = [int(l) for l in range(config.n_labels) if l not in set(labels.tolist())]
        facts = []
        for p in range(config.n_paragraphs):
            words = [filler[i] for i in rng.integers(0, len(filler), size=config.paragraph_length)]
            planted: list[str] = []
            if p in assignment:
                for lab in sorted(assignment[p]):
                    picks = rng.choice(config.triggers_per_label, size=config.mentions_per_paragraph,
                                       replace=config.mentions_per_paragraph > config.triggers_per_label)
                    planted += [trigger_token(lab, int(j)) for j in picks]
            elif others and rng.random() < config.noise:
                lab = others[int(rng.integers(len(others)))]
                planted.append(trigger_token(lab, int(rng.integers(config.triggers_per_label))))
            slots = rng.choice(len(words) + len(planted), size=len(planted), replace=False)
            merged: list[str | None] = [None] * (len(words) + len(planted))
            for s, tok in zip(slots, planted):
                merged[s] = tok
            it = iter(words)
            facts.append(" ".join(tok if tok is not None else next(it) for tok in merged))
        silver = set(gold)
        silver.discard(gold[int(rng.integers(len(gold)))])
        non_gold = [p for p in range(config.n_paragraphs) if p not in gold]
        silver.add(non_gold[int(rng.integers(len(non_gold)))])
        y = np.zeros(config.n_labels)
        y[labels] = 1.0
        split = "train" if c < train_n else "dev" if c < train_n + dev_n else "test"
        cases.append(Case(f"synth-{c:05d}", facts, y, frozenset(silver), frozenset(gold), split))
    return cases


def keyword_classifier(case: Case, n_labels: int) -> np.ndarray:
    """Trigger-lookup baseline: predict every label whose trigger appears."""
    pred = np.zeros(n_labels)
    pattern = re.compile(r"trig(\d+)x\d+")
    for fact in case.facts:
        for m in pattern.finditer(fact):
            lab = int(m.group(1))
            if lab < n_labels:
                pred[lab] = 1.0
    return pred
