"""Command-line driver: ``paragraph-rationales <subcommand> [options]``.

Experiments are described by a YAML file with optional sections ``synth``,
``model``, ``train``, ``weights``, ``tune``, ``eval`` and ``gradcheck``, plus
the top-level keys ``seed`` and ``labels``.  Unknown keys anywhere are an
error.  Flags only override the seed, paths and the report format.

Exit codes: 0 success, 1 user error (bad config, missing file, invalid
input), 2 internal error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Sequence

import numpy as np
import yaml

from . import data as D
from . import losses as L
from . import metrics as M
from . import silver
from . import training as T
from .model import ModelConfig, load_checkpoint, save_checkpoint

logger = logging.getLogger(__name__)

EXIT_OK, EXIT_USER, EXIT_INTERNAL = 0, 1, 2
MASK_VIEWS = ("full", "masked", "complement", "all")

# Which report fields each --mask view shows.
_VIEW_FIELDS = {
    "full": ("micro_f1_full",),
    "masked": ("micro_f1_masked", "sufficiency", "observed_sparsity", "rationale_f1", "mean_r_precision"),
    "complement": ("micro_f1_complement", "comprehensiveness"),
}

# ModelConfig fields fixed by the corpus rather than the config file.
_DERIVED_MODEL_FIELDS = ("vocab_size", "num_labels")


class UserError(Exception):
    """Bad input from the person running the command."""


# ------------------------------------------------------------------ config


@dataclass
class TuneSettings:
    grids: list = field(default_factory=lambda: [["lambda_s", [0.0, 0.01, 0.1, 0.5, 1.0]]])
    tolerance: float = 0.01


@dataclass
class EvalSettings:
    split: str = "test"
    rationale_source: str = "gold"


@dataclass
class GradcheckSettings:
    n_probes: int = 4
    n_cases: int = 3
    n_paragraphs: int = 6
    n_tokens: int = 5
    epsilon: float = 1e-4
    tolerance: float = 1e-4


@dataclass
class CliConfig:
    seed: int = 0
    labels: Any = "articles"
    synth: D.SynthConfig = field(default_factory=D.SynthConfig)
    model: dict = field(default_factory=dict)
    train: T.TrainConfig = field(default_factory=T.TrainConfig)
    weights: L.LossWeights = field(default_factory=L.LossWeights)
    tune: TuneSettings = field(default_factory=TuneSettings)
    eval: EvalSettings = field(default_factory=EvalSettings)
    gradcheck: GradcheckSettings = field(default_factory=GradcheckSettings)

    def label_names(self) -> tuple[str, ...]:
        if self.labels == "articles":
            return D.ARTICLES
        if self.labels == "synthetic":
            return D.synthetic_label_names(self.synth.n_labels)
        if isinstance(self.labels, list) and self.labels and all(isinstance(x, str) for x in self.labels):
            return tuple(self.labels)
        raise UserError("labels: expected 'articles', 'synthetic' or a list of label names")

    def model_base(self) -> ModelConfig:
        return ModelConfig(vocab_size=1, num_labels=1, **self.model)

    def train_config(self) -> T.TrainConfig:
        return replace(self.train, seed=self.seed, weights=self.weights)


def _build(cls, values: dict | None, section: str, skip: Sequence[str] = ()):
    values = dict(values or {})
    if not isinstance(values, dict):
        raise UserError(f"{section}: expected a mapping")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(k for k in values if k not in known or k in skip)
    if unknown:
        raise UserError(f"{section}: unknown key(s) {', '.join(unknown)}")
    for name, value in values.items():
        if isinstance(value, list) and "tuple" in str(known[name].type):
            values[name] = tuple(value)
    try:
        return cls(**values)
    except TypeError as exc:
        raise UserError(f"{section}: {exc}") from exc


def parse_config(raw: dict | None) -> CliConfig:
    """Validate a parsed YAML document into a :class:`CliConfig`."""
    raw = dict(raw or {})
    known = {f.name for f in fields(CliConfig)}
    unknown = sorted(k for k in raw if k not in known)
    if unknown:
        raise UserError(f"config: unknown key(s) {', '.join(unknown)}")
    cfg = CliConfig(seed=int(raw.get("seed", 0)), labels=raw.get("labels", "articles"))
    cfg.synth = _build(D.SynthConfig, raw.get("synth"), "synth")
    cfg.train = _build(T.TrainConfig, raw.get("train"), "train", skip=("weights", "seed"))
    cfg.weights = _build(L.LossWeights, raw.get("weights"), "weights")
    cfg.tune = _build(TuneSettings, raw.get("tune"), "tune")
    cfg.eval = _build(EvalSettings, raw.get("eval"), "eval")
    cfg.gradcheck = _build(GradcheckSettings, raw.get("gradcheck"), "gradcheck")
    model = raw.get("model") or {}
    bad = sorted(k for k in model if k not in {f.name for f in fields(ModelConfig)} or k in _DERIVED_MODEL_FIELDS)
    if bad:
        raise UserError(f"model: unknown key(s) {', '.join(bad)}")
    cfg.model = dict(model)
    try:
        cfg.synth = replace(cfg.synth, seed=cfg.synth.seed)
        cfg.model_base().validate()
        cfg.train_config().validate()
    except ValueError as exc:
        raise UserError(str(exc)) from exc
    if cfg.eval.rationale_source not in ("gold", "silver"):
        raise UserError("eval.rationale_source must be 'gold' or 'silver'")
    if cfg.eval.split not in D.SPLITS:
        raise UserError(f"eval.split must be one of {D.SPLITS}")
    return cfg


def load_config(path: str | None, seed: int | None = None) -> CliConfig:
    raw: dict = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise UserError(f"config file not found: {path}")
        try:
            raw = yaml.safe_load(p.read_text(encoding="utf-8")) or {}
        except yaml.YAMLError as exc:
            raise UserError(f"config file {path} is not valid YAML: {exc}") from exc
        if not isinstance(raw, dict):
            raise UserError(f"config file {path} must hold a mapping at the top level")
    cfg = parse_config(raw)
    if seed is not None:
        cfg.seed = seed
        cfg.synth = replace(cfg.synth, seed=seed)
    return cfg


# ---------------------------------------------------------------- helpers


def _emit(text: str, out: str | None) -> None:
    if out:
        Path(out).write_text(text + "\n", encoding="utf-8")
    else:
        print(text)


def _load_cases(path: str, cfg: CliConfig) -> list[D.Case]:
    if not Path(path).is_file():
        raise UserError(f"corpus file not found: {path}")
    return D.load_corpus(path, cfg.label_names())


def _report_payload(report: M.EvalReport, view: str) -> dict:
    keys = [k for v in ("full", "masked", "complement") for k in _VIEW_FIELDS[v]] if view == "all" else _VIEW_FIELDS[view]
    payload = {k: getattr(report, k) for k in keys}
    payload["rationale_source"] = report.rationale_source
    if view in ("all", "masked") and report.per_label_f1:
        payload["per_label_f1"] = {k: list(v) for k, v in report.per_label_f1.items()}
    return payload


def _render(report: M.EvalReport, view: str, fmt: str) -> str:
    payload = _report_payload(report, view)
    if fmt == "machine":
        return json.dumps(payload, indent=2, sort_keys=True)
    lines = [f"{k:<22} {v:.4f}" for k, v in payload.items() if isinstance(v, float)]
    lines.append(f"{'rationale_source':<22} {report.rationale_source}")
    if view == "all":
        lines = [report.to_table(), ""] + lines
    for name, (f1, count) in payload.get("per_label_f1", {}).items():
        lines.append(f"  label {name:<10} F1 {f1:.3f}  (train cases {count})")
    return "\n".join(lines)


def _label_counts(cases: Sequence[D.Case], label_names: Sequence[str]) -> dict[str, int]:
    train = [c for c in cases if c.split == "train"]
    if not train:
        return {}
    totals = np.sum([c.labels for c in train], axis=0)
    return {name: int(n) for name, n in zip(label_names, totals)}


# ------------------------------------------------------------- subcommands


def cmd_synth(args) -> int:
    cfg = load_config(args.config, args.seed)
    try:
        cases = D.generate_synthetic(cfg.synth)
    except ValueError as exc:
        raise UserError(f"synth: {exc}") from exc
    D.write_corpus(cases, args.out, D.synthetic_label_names(cfg.synth.n_labels))
    print(f"wrote {len(cases)} cases to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = load_config(args.config, args.seed)
    labels = cfg.label_names()
    cases = _load_cases(args.corpus, cfg)
    prepared = T.prepare(cases, len(labels), cfg.model_base())
    if not prepared.train:
        raise UserError("corpus has no training cases")
    config = replace(cfg.train_config(), log_path=args.log or cfg.train.log_path)
    result = T.train_model(prepared, config, rationale_source=cfg.eval.rationale_source)
    save_checkpoint(args.checkpoint, result.params, prepared.vocab, labels)
    split = prepared.dev or prepared.test or prepared.train
    report = T.evaluate(result.params, split, cfg.eval.rationale_source, labels, _label_counts(cases, labels))
    _emit(_render(report, "all", args.format), args.out)
    logger.info("checkpoint written to %s (epoch %d)", args.checkpoint, result.history.best_epoch)
    return EXIT_OK


def cmd_tune(args) -> int:
    cfg = load_config(args.config, args.seed)
    labels = cfg.label_names()
    prepared = T.prepare(_load_cases(args.corpus, cfg), len(labels), cfg.model_base())
    grids = []
    for item in cfg.tune.grids:
        if not (isinstance(item, (list, tuple)) and len(item) == 2 and isinstance(item[1], list)):
            raise UserError("tune.grids: each entry must be [weight name, [candidates...]]")
        grids.append((str(item[0]), list(item[1])))
    try:
        result = T.greedy_lambda_tuning(prepared, grids, cfg.train_config(), tolerance=cfg.tune.tolerance)
    except ValueError as exc:
        raise UserError(f"tune: {exc}") from exc
    if args.format == "machine":
        text = json.dumps({"weights": asdict(result.weights), "table": result.table}, indent=2, sort_keys=True)
    else:
        text = result.render()
    _emit(text, args.out)
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = load_config(args.config, args.seed)
    if not Path(args.checkpoint).is_file():
        raise UserError(f"checkpoint not found: {args.checkpoint}")
    try:
        params, vocab, labels = load_checkpoint(args.checkpoint)
    except (OSError, KeyError, ValueError) as exc:
        raise UserError(f"cannot read checkpoint {args.checkpoint}: {exc}") from exc
    if vocab is None or labels is None:
        raise UserError("checkpoint lacks a vocabulary or label names; re-train with this tool")
    cases = D.load_corpus(args.corpus, labels) if Path(args.corpus).is_file() else None
    if cases is None:
        raise UserError(f"corpus file not found: {args.corpus}")
    split = args.split or cfg.eval.split
    chosen = [c for c in cases if c.split == split]
    if not chosen:
        raise UserError(f"corpus has no cases in split {split!r}")
    encoded = T.encode_cases(chosen, vocab, params.config)
    source = args.rationales or cfg.eval.rationale_source
    report = T.evaluate(params, encoded, source, labels, _label_counts(cases, labels))
    _emit(_render(report, args.mask, args.format), args.out)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    cfg = load_config(args.config, args.seed)
    gc = cfg.gradcheck
    n_probes = gc.n_probes if args.n_probes is None else args.n_probes
    if n_probes < 1:
        raise UserError("n_probes must be at least 1")
    model = {"embed_dim": 8, "attention_heads": 2, "ff_dim": 8, "kq_dim": 6, **cfg.model}
    model.update(max_paragraphs=max(model.get("max_paragraphs", gc.n_paragraphs), gc.n_paragraphs),
                 max_tokens=max(model.get("max_tokens", gc.n_tokens), gc.n_tokens))
    config = ModelConfig(vocab_size=30, num_labels=4, **model)
    rows = T.check_gradients(config, gc.n_cases, gc.n_paragraphs, gc.n_tokens, n_probes, gc.epsilon, cfg.seed)
    ok = all(r.passed(gc.tolerance) for r in rows)
    if args.format == "machine":
        print(json.dumps({"passed": ok, "tolerance": gc.tolerance,
                          "rows": {r.name: r.max_relative_error for r in rows}}, indent=2, sort_keys=True))
    else:
        for r in rows:
            print(f"{r.name:<24} max rel. error {r.max_relative_error:.3e}  {'ok' if r.passed(gc.tolerance) else 'FAIL'}")
        print("PASS" if ok else "FAIL")
    return EXIT_OK if ok else EXIT_USER


def cmd_extract_silver(args) -> int:
    if args.n_facts < 0:
        raise UserError("n-facts must be non-negative")
    if args.text == "-":
        text = sys.stdin.read()
    else:
        path = Path(args.text)
        if not path.is_file():
            raise UserError(f"text file not found: {args.text}")
        text = path.read_text(encoding="utf-8")
    found = sorted(silver.extract_silver_rationales(text, args.n_facts))
    print(json.dumps(found) if args.format == "machine" else "{" + ", ".join(map(str, found)) + "}")
    return EXIT_OK


def cmd_stats(args) -> int:
    cfg = load_config(args.config, None)
    cases = _load_cases(args.corpus, cfg)
    if args.split:
        cases = [c for c in cases if c.split == args.split]
    if not cases:
        raise UserError("corpus is empty" + (f" for split {args.split!r}" if args.split else ""))
    stats = D.corpus_stats(cases, cfg.label_names())
    if args.format == "machine":
        print(json.dumps(asdict(stats), indent=2, sort_keys=True))
    else:
        print(f"cases                {stats.n_cases}")
        print(f"silver sparsity %    {stats.sparsity:.2f}")
        print(f"mean allegations     {stats.mean_allegations:.3f}")
        for name, count in stats.label_counts.items():
            print(f"  {name:<8} {count}")
    return EXIT_OK


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="paragraph-rationales", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, corpus=False, out=True):
        p.add_argument("--config", help="YAML experiment file")
        p.add_argument("--seed", type=int, help="override the configured seed")
        p.add_argument("--format", choices=("table", "machine"), default="table")
        if corpus:
            p.add_argument("--corpus", required=True, help="JSONL corpus")
        if out:
            p.add_argument("--out", help="write the report here instead of stdout")

    p = sub.add_parser("synth", help="generate a planted-rationale corpus")
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model and save a checkpoint")
    common(p, corpus=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--log", help="per-step loss log (tab separated)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("tune", help="greedy one-weight-at-a-time tuning")
    common(p, corpus=True)
    p.set_defaults(func=cmd_tune)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    common(p, corpus=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", choices=D.SPLITS)
    p.add_argument("--mask", choices=MASK_VIEWS, default="all")
    p.add_argument("--rationales", choices=("gold", "silver"))
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of every loss configuration")
    common(p, out=False)
    p.add_argument("--n-probes", type=int, help="entries probed per parameter tensor")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("extract-silver", help="paragraph references in decision text")
    p.add_argument("--text", required=True, help="text file, or - for stdin")
    p.add_argument("--n-facts", type=int, required=True)
    p.add_argument("--format", choices=("table", "machine"), default="table")
    p.set_defaults(func=cmd_extract_silver)

    p = sub.add_parser("stats", help="corpus statistics")
    p.add_argument("--config")
    p.add_argument("--corpus", required=True)
    p.add_argument("--split", choices=D.SPLITS)
    p.add_argument("--format", choices=("table", "machine"), default="table")
    p.set_defaults(func=cmd_stats)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USER
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (UserError, D.CorpusError, FileNotFoundError, PermissionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USER
    except Exception as exc:  # noqa: BLE001 - top-level guard maps to the internal-error code
        logger.debug("internal error", exc_info=True)
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
