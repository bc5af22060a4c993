"""Optimization, evaluation and experiment orchestration."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from . import losses as L
from . import metrics as M
from .data import Case, Vocabulary, build_vocabulary
from .model import (
    Batch,
    EncodedCase,
    ModelConfig,
    ModelParams,
    PassCounter,
    encode_case,
    forward,
    init_params,
    make_batch,
    masked_head,
)

logger = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 8
    epochs: int = 10
    seed: int = 0
    weights: L.LossWeights = field(default_factory=L.LossWeights)
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    supervision: bool = False
    log_path: str | None = None
    checkpoint_path: str | None = None

    def validate(self) -> None:
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.epochs < 1:
            raise ValueError("epochs must be at least 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("Adam betas must lie in [0, 1)")
        self.weights.validate()


# ---------------------------------------------------------------------- adam


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adam_step(params: ModelParams, grads: dict[str, np.ndarray], state: AdamState,
              lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """One bias-corrected Adam update, applied in place.  Returns ``(params, state)``."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"adam_step: non-finite gradient for parameter {name!r}")
    state.step += 1
    t = state.step
    for name, tensor in params.named():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != tensor.shape:
            raise ad.ShapeError(f"adam_step: gradient shape {g.shape} does not match {name} {tensor.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(g)
            state.v[name] = np.zeros_like(g)
        v = state.v[name]
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * g * g
        m_hat = m / (1 - beta1**t)
        v_hat = v / (1 - beta2**t)
        tensor.value -= lr * m_hat / (np.sqrt(v_hat) + eps)
    return params, state


# ----------------------------------------------------------------- objective


def batch_objective(
    params: ModelParams,
    batch: Batch,
    weights: L.LossWeights,
    supervision: bool = False,
    rng: np.random.Generator | None = None,
    z_random: np.ndarray | None = None,
    counter: PassCounter | None = None,
    hard: bool = True,
):
    """Forward passes for Z (and Z^c, Z^r when their weights are nonzero)
    and the assembled loss.  Returns ``(loss, breakdown)``."""
    fr = forward(params, batch, hard=hard)
    y = batch.labels
    z = fr.hard_mask
    lp = L.classification_loss(fr.label_probs, y)
    comps: dict[str, ad.Tensor] = {"L_p": lp}
    if supervision:
        if weights.lambda_ns:
            if batch.silver is None:
                raise ValueError("supervision needs silver rationales for every case in the batch")
            comps["L_sup"] = L.supervision_loss(z, batch.silver, fr.valid)
        return L.total_loss(comps, weights, supervision=True)
    main = L.PassTerms(lp, fr.label_probs, fr.doc_repr)
    if weights.lambda_s:
        comps["L_s"] = L.sparsity_loss(z, weights.sparsity_target, fr.valid)
    if weights.lambda_c:
        comps["L_c"] = L.continuity_loss(z, fr.valid)
    if weights.lambda_g:
        zc = fr.complement()
        doc_c, probs_c = masked_head(params, fr, zc, counter)
        lpc = L.classification_loss(probs_c, y)
        comps["L_p_c"] = lpc
        comps["L_g"] = L.comprehensiveness(weights.g_variant, main, L.PassTerms(lpc, probs_c, doc_c),
                                           y, weights.margin)
    if weights.lambda_r:
        if z_random is None:
            if rng is None:
                raise ValueError("singularity loss needs a random generator or a fixed random mask")
            z_random = L.random_masks(batch.n_paragraphs, z.shape[-1], weights.sparsity_target, rng)
        doc_r, probs_r = masked_head(params, fr, z_random, counter)
        lpr = L.classification_loss(probs_r, y)
        comps["L_p_r"] = lpr
        comps["L_r"] = L.singularity_loss(z, z_random, weights.r_variant, main,
                                          L.PassTerms(lpr, probs_r, doc_r), y, weights.margin)
    return L.total_loss(comps, weights)


# ----------------------------------------------------------------- training


@dataclass
class TrainHistory:
    steps: list[tuple[int, int, L.LossBreakdown]] = field(default_factory=list)
    dev_reports: list[M.EvalReport] = field(default_factory=list)
    best_epoch: int = -1


def encode_cases(cases: Sequence[Case], vocab: Vocabulary, config: ModelConfig) -> list[EncodedCase]:
    return [encode_case(c, vocab, config) for c in cases]


def _batches(items: Sequence[EncodedCase], size: int, order: np.ndarray):
    for start in range(0, len(order), size):
        yield make_batch([items[i] for i in order[start:start + size]])


def train_epoch(
    corpus: Sequence[EncodedCase],
    params: ModelParams,
    config: TrainConfig,
    rng: np.random.Generator,
    state: AdamState,
    history: TrainHistory,
    epoch: int = 0,
    counter: PassCounter | None = None,
    log: Callable[[str], None] | None = None,
) -> TrainHistory:
    items = list(corpus)
    if config.supervision:
        items = [c for c in items if c.silver is not None]
    if not items:
        raise ValueError("train_epoch: no trainable cases")
    order = rng.permutation(len(items))
    for batch in _batches(items, config.batch_size, order):
        params.zero_grad()
        with ad.Tape() as tape:
            loss, breakdown = batch_objective(params, batch, config.weights, config.supervision,
                                              rng=rng, counter=counter)
            if not np.isfinite(loss.value):
                raise FloatingPointError(f"non-finite loss in batch with cases {batch.case_ids}")
            tape.backward(loss)
        grads = {name: t.grad for name, t in params.named()}
        adam_step(params, grads, state, config.learning_rate, config.beta1, config.beta2, config.adam_eps)
        step = len(history.steps)
        history.steps.append((step, epoch, breakdown))
        if log is not None:
            log(breakdown.to_log_line(step))
    return history


@dataclass
class TrainResult:
    params: ModelParams
    history: TrainHistory


def train(
    train_cases: Sequence[EncodedCase],
    params: ModelParams,
    config: TrainConfig,
    dev_cases: Sequence[EncodedCase] | None = None,
    counter: PassCounter | None = None,
    rationale_source: str = "silver",
) -> TrainResult:
    """Train for ``config.epochs``; with dev cases, keep the epoch with the
    best dev masked-input micro-F1 (later epochs win ties)."""
    config.validate()
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 1]))
    state = AdamState()
    history = TrainHistory()
    best_f1, best = -1.0, None
    log_fh = open(config.log_path, "w", encoding="utf-8") if config.log_path else None
    try:
        if log_fh:
            log_fh.write(L.LossBreakdown().header() + "\n")
        writer = (lambda line: log_fh.write(line + "\n")) if log_fh else None
        for epoch in range(config.epochs):
            train_epoch(train_cases, params, config, rng, state, history, epoch, counter, writer)
            if dev_cases:
                report = evaluate(params, dev_cases, rationale_source=rationale_source)
                history.dev_reports.append(report)
                logger.info("epoch %d dev micro-F1 %.4f mRP %.4f sparsity %.1f%%", epoch,
                            report.micro_f1_masked, report.mean_r_precision, report.observed_sparsity)
                if report.micro_f1_masked >= best_f1:
                    best_f1, best = report.micro_f1_masked, params.copy()
                    history.best_epoch = epoch
    finally:
        if log_fh:
            log_fh.close()
    if best is None:
        history.best_epoch = config.epochs - 1
        best = params
    return TrainResult(best, history)


# --------------------------------------------------------------- evaluation


@dataclass
class Predictions:
    probs_full: np.ndarray
    probs_masked: np.ndarray
    probs_complement: np.ndarray
    attention: list[np.ndarray]
    masks: list[np.ndarray]
    labels: np.ndarray


def predict(params: ModelParams, cases: Sequence[EncodedCase], batch_size: int = 128) -> Predictions:
    """Full, masked and complement passes with no tape (no parameter mutation)."""
    full, masked, comp, att, masks = [], [], [], [], []
    for start in range(0, len(cases), batch_size):
        batch = make_batch(cases[start:start + batch_size])
        fr = forward(params, batch)
        _, p_full = masked_head(params, fr, np.ones(fr.valid.shape))
        _, p_comp = masked_head(params, fr, fr.complement())
        full.append(p_full.value)
        masked.append(fr.label_probs.value)
        comp.append(p_comp.value)
        for b, n in enumerate(batch.n_paragraphs):
            att.append(fr.attention.value[b, :n].copy())
            masks.append(fr.hard_mask.value[b, :n].copy())
    return Predictions(np.concatenate(full), np.concatenate(masked), np.concatenate(comp), att, masks,
                       np.stack([c.labels for c in cases]))


def evaluate(
    params: ModelParams,
    cases: Sequence[EncodedCase],
    rationale_source: str = "gold",
    label_names: Sequence[str] | None = None,
    label_counts: dict[str, int] | None = None,
) -> M.EvalReport:
    if not cases:
        raise ValueError("evaluate: no cases")
    pred = predict(params, cases)
    y = pred.labels
    rf1, rankings, golds = [], [], []
    for case, a, z in zip(cases, pred.attention, pred.masks):
        gold = case.gold if rationale_source == "gold" else case.silver
        if gold is None:
            continue
        rf1.append(M.rationale_f1(z, gold))
        rankings.append(M.rank_selected(a, z))
        golds.append(np.flatnonzero(gold).tolist())
    per_label = {}
    if label_names is not None:
        f1s = M.per_label_f1(pred.probs_masked > 0.5, y)
        counts = label_counts or {}
        per_label = {name: (float(f), int(counts.get(name, 0))) for name, f in zip(label_names, f1s)}
    return M.EvalReport(
        micro_f1_full=M.micro_f1(pred.probs_full > 0.5, y),
        micro_f1_masked=M.micro_f1(pred.probs_masked > 0.5, y),
        micro_f1_complement=M.micro_f1(pred.probs_complement > 0.5, y),
        sufficiency=M.sufficiency(pred.probs_full, pred.probs_masked, y),
        comprehensiveness=M.comprehensiveness_metric(pred.probs_full, pred.probs_complement, y),
        rationale_f1=float(np.mean(rf1)) if rf1 else 0.0,
        mean_r_precision=M.mean_r_precision(rankings, golds),
        observed_sparsity=float(np.mean([z.mean() for z in pred.masks]) * 100.0),
        rationale_source=rationale_source,
        per_label_f1=per_label,
    )


# -------------------------------------------------------------- experiments


def model_config_for(vocab: Vocabulary, num_labels: int, base: ModelConfig | None = None) -> ModelConfig:
    base = base or ModelConfig(vocab_size=len(vocab), num_labels=num_labels)
    return replace(base, vocab_size=len(vocab), num_labels=num_labels)


@dataclass
class Prepared:
    vocab: Vocabulary
    model_config: ModelConfig
    train: list[EncodedCase]
    dev: list[EncodedCase]
    test: list[EncodedCase]


def prepare(cases: Sequence[Case], num_labels: int, base: ModelConfig | None = None, min_freq: int = 1) -> Prepared:
    vocab = build_vocabulary(cases, min_freq=min_freq)
    config = model_config_for(vocab, num_labels, base)
    config.validate()
    parts = {s: [c for c in cases if c.split == s] for s in ("train", "dev", "test")}
    return Prepared(vocab, config, *(encode_cases(parts[s], vocab, config) for s in ("train", "dev", "test")))


def train_model(prepared: Prepared, config: TrainConfig, counter: PassCounter | None = None,
                rationale_source: str = "silver") -> TrainResult:
    init_seq = np.random.SeedSequence([config.seed, 0])
    params = init_params(prepared.model_config, np.random.default_rng(init_seq))
    return train(prepared.train, params, config, prepared.dev or None, counter, rationale_source)


def select_candidate(rows: Sequence[dict], baseline_f1: float, tolerance: float = 0.01) -> int:
    """Index of the row with the best dev mRP among rows whose dev micro-F1 is
    within ``tolerance`` of the baseline; falls back to the best micro-F1."""
    eligible = [i for i, r in enumerate(rows) if r["micro_f1"] >= baseline_f1 - tolerance - 1e-12]
    if not eligible:
        return max(range(len(rows)), key=lambda i: (rows[i]["micro_f1"], -i))
    return max(eligible, key=lambda i: (rows[i]["mean_r_precision"], -i))


@dataclass
class TuningResult:
    weights: L.LossWeights
    table: list[dict]

    def render(self) -> str:
        head = f"{'parameter':<12} {'value':>12} | {'micro-F1':>8} | {'sparsity':>8} | {'F1':>6} | {'mRP':>6} | chosen"
        lines = [head, "-" * len(head)]
        for r in self.table:
            lines.append(
                f"{r['parameter']:<12} {str(r['value']):>12} | {r['micro_f1']:8.3f} | "
                f"{r['sparsity']:8.1f} | {r['rationale_f1']:6.3f} | {r['mean_r_precision']:6.3f} | "
                f"{'*' if r['chosen'] else ''}"
            )
        return "\n".join(lines)


def greedy_lambda_tuning(
    prepared: Prepared,
    grids: Sequence[tuple[str, Sequence]],
    config: TrainConfig,
    cache: dict | None = None,
    tolerance: float = 0.01,
) -> TuningResult:
    """Tune one weight at a time in grid order, fixing each before moving on;
    untuned lambdas stay at zero."""
    if not grids:
        raise ValueError("greedy_lambda_tuning: empty grid list")
    known = set(L.weight_fields())
    current = replace(config.weights)
    for name, values in grids:
        if name not in known:
            raise ValueError(f"unknown weight {name!r}")
        if not list(values):
            raise ValueError(f"empty grid for {name!r}")
        if name.startswith("lambda_"):
            current = replace(current, **{name: 0.0})
    cache = {} if cache is None else cache

    def run(weights: L.LossWeights) -> M.EvalReport:
        key = json.dumps(asdict(weights), sort_keys=True)
        if key not in cache:
            result = train_model(prepared, replace(config, weights=weights))
            dev = prepared.dev or prepared.train
            cache[key] = evaluate(result.params, dev, rationale_source="silver")
        return cache[key]

    table: list[dict] = []
    for name, values in grids:
        values = list(values)
        rows = []
        for value in values:
            report = run(replace(current, **{name: value}))
            rows.append({
                "parameter": name, "value": value, "micro_f1": report.micro_f1_masked,
                "sparsity": report.observed_sparsity, "rationale_f1": report.rationale_f1,
                "mean_r_precision": report.mean_r_precision, "chosen": False,
            })
        if len(values) == 1:
            choice = 0
        else:
            reference = replace(current, **{name: 0.0}) if name.startswith("lambda_") else current
            choice = select_candidate(rows, run(reference).micro_f1_masked, tolerance)
        rows[choice]["chosen"] = True
        current = replace(current, **{name: values[choice]})
        table.extend(rows)
    return TuningResult(current, table)


@dataclass
class ExperimentResult:
    reports: list[M.EvalReport]
    aggregates: dict[str, M.RunAggregate]

    def render(self, name: str = "model") -> str:
        source = self.reports[0].rationale_source if self.reports else "gold"
        return M.render_table([(name, self.aggregates)], source)

    def to_dict(self) -> dict:
        return {
            "runs": [r.scores() for r in self.reports],
            "aggregate": {k: asdict(v) for k, v in self.aggregates.items()},
        }


def run_experiment(prepared: Prepared, config: TrainConfig, n_seeds: int = 5,
                   rationale_source: str = "gold") -> ExperimentResult:
    """Train ``n_seeds`` models (seeds ``config.seed + i``) and aggregate test metrics."""
    if n_seeds < 1:
        raise ValueError("n_seeds must be at least 1")
    reports = []
    test = prepared.test or prepared.dev
    for i in range(n_seeds):
        result = train_model(prepared, replace(config, seed=config.seed + i))
        reports.append(evaluate(result.params, test, rationale_source=rationale_source))
    aggregates = {k: M.aggregate_runs([r.scores()[k] for r in reports]) for k in M.EvalReport.SCORES}
    return ExperimentResult(reports, aggregates)


def save_report(path, payload: dict) -> None:
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True), encoding="utf-8")


# ----------------------------------------------------------- gradient check


def loss_configurations(margin: float = 0.1) -> list[tuple[str, L.LossWeights, bool]]:
    """Every objective the trainer can assemble: ``(name, weights, supervision)``."""
    configs = [
        ("L_p", L.LossWeights(), False),
        ("+L_s", L.LossWeights(lambda_s=0.5), False),
        ("+L_c", L.LossWeights(lambda_c=0.5), False),
    ]
    for variant in L.VARIANTS:
        configs.append((f"+L_g {variant}", L.LossWeights(lambda_g=0.5, g_variant=variant, margin=margin), False))
    for variant in L.VARIANTS:
        configs.append((f"+L_r {variant}", L.LossWeights(lambda_r=0.5, r_variant=variant, margin=margin), False))
    configs.append(("supervision", L.LossWeights(lambda_ns=0.5), True))
    return configs


def random_check_batch(config: ModelConfig, n_cases: int, n_paragraphs: int, n_tokens: int,
                       rng: np.random.Generator) -> Batch:
    """Random token ids, labels and silver masks for a gradient check."""
    cases = []
    for i in range(n_cases):
        paragraphs = [rng.integers(2, config.vocab_size, size=n_tokens) for _ in range(n_paragraphs)]
        labels = (rng.random(config.num_labels) < 0.5).astype(np.float64)
        silver = (rng.random(n_paragraphs) < 0.4).astype(np.float64)
        cases.append(EncodedCase(f"check-{i}", paragraphs, labels, silver, None))
    return make_batch(cases)


@dataclass
class GradientCheckRow:
    name: str
    max_relative_error: float

    def passed(self, tolerance: float = 1e-4) -> bool:
        return self.max_relative_error < tolerance


def check_gradients(
    model_config: ModelConfig,
    n_cases: int = 3,
    n_paragraphs: int = 6,
    n_tokens: int = 5,
    n_probes: int | None = 4,
    epsilon: float = 1e-4,
    seed: int = 0,
    configurations: Sequence[tuple[str, L.LossWeights, bool]] | None = None,
    floor: float = 1e-8,
) -> list[GradientCheckRow]:
    """Compare tape gradients with central differences for each objective.

    The threshold runs in its soft form (identity surrogate), so the
    finite-difference oracle sees exactly the function whose derivative the
    straight-through rule propagates.  Steps are chosen per entry around
    ``epsilon`` (see :func:`autodiff.gradient_check`), which keeps ReLU and
    hinge kinks and round-off on tiny gradients out of the oracle.  The
    random mask for the singularity terms is drawn once and held fixed.
    """
    if n_probes is not None and n_probes < 1:
        raise ValueError("n_probes must be at least 1")
    rng = np.random.default_rng(seed)
    params = init_params(model_config, rng)
    # Move every constant-initialised tensor (gains, biases and the zeroed
    # residual outputs and head) off its start value; a zero head would
    # otherwise block every gradient below it.
    for _, t in params.named():
        if np.all(t.value == t.value.flat[0]):
            t.value += rng.normal(0.0, 0.1, size=t.shape)
    batch = random_check_batch(model_config, n_cases, n_paragraphs, n_tokens, rng)
    rows = []
    for name, weights, supervision in configurations or loss_configurations():
        z_random = L.random_masks(batch.n_paragraphs, batch.para_mask.shape[1], weights.sparsity_target, rng)

        def loss_fn(_, weights=weights, supervision=supervision, z_random=z_random):
            return batch_objective(params, batch, weights, supervision, z_random=z_random, hard=False)[0]

        err = ad.gradient_check(loss_fn, list(params), epsilon=epsilon, n_probes=n_probes,
                                rng=np.random.default_rng([seed, len(rows)]), floor=floor, adaptive=True)
        rows.append(GradientCheckRow(name, err))
    return rows
