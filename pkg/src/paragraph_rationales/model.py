"""Hierarchical hard-attention classifier over case paragraphs.

Pipeline per case: a shared paragraph encoder turns each paragraph into a
vector independently; a small transformer stack contextualizes the paragraph
vectors; two SELU projections produce a classification view (K) and a
selection view (Q); a sigmoid scorer over Q gives soft attention, which is
thresholded into a hard mask; the mask zeroes K rows before a max-pool, and a
sigmoid head predicts one probability per label.

Everything is batched: a batch holds ``B`` cases padded to ``N`` paragraphs
of ``L`` tokens, with boolean masks marking the real entries.
"""

from __future__ import annotations

import json
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import Case, Vocabulary

PARAGRAPH_ENCODERS = ("mean-of-embeddings", "single-transformer-layer")


@dataclass
class ModelConfig:
    vocab_size: int
    num_labels: int
    embed_dim: int = 32
    max_paragraphs: int = 50
    max_tokens: int = 256
    context_layers: int = 2
    attention_heads: int = 2
    ff_dim: int = 64
    kq_dim: int = 32
    paragraph_encoder: str = "mean-of-embeddings"
    threshold: float = 0.5
    init_scale: float = 0.1

    def validate(self) -> None:
        for name in ("vocab_size", "num_labels", "embed_dim", "max_paragraphs", "max_tokens",
                     "context_layers", "attention_heads", "ff_dim", "kq_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be at least 1, got {getattr(self, name)}")
        if self.embed_dim % self.attention_heads:
            raise ValueError("embed_dim must be divisible by attention_heads")
        if self.paragraph_encoder not in PARAGRAPH_ENCODERS:
            raise ValueError(f"paragraph_encoder must be one of {PARAGRAPH_ENCODERS}")
        if not 0.0 < self.threshold < 1.0:
            raise ValueError("threshold must lie in (0, 1)")


@dataclass
class ModelParams:
    config: ModelConfig
    tensors: "OrderedDict[str, Tensor]" = field(default_factory=OrderedDict)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors.values())

    def named(self):
        return self.tensors.items()

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.zero_grad()

    def copy(self) -> "ModelParams":
        out = ModelParams(self.config)
        for name, t in self.tensors.items():
            out.tensors[name] = Tensor(t.value.copy(), requires_grad=True, name=name)
        return out

    def n_parameters(self) -> int:
        return sum(t.value.size for t in self.tensors.values())


def _transformer_names(prefix: str) -> list[str]:
    return [f"{prefix}.{n}" for n in ("wq", "wk", "wv", "wo", "bo", "ln1_g", "ln1_b",
                                      "w1", "b1", "w2", "b2", "ln2_g", "ln2_b")]


def init_params(config: ModelConfig, rng: np.random.Generator) -> ModelParams:
    config.validate()
    d, s = config.embed_dim, config.init_scale
    shapes: dict[str, tuple[int, ...]] = {"embed": (config.vocab_size, d)}
    layers = [f"ctx{i}" for i in range(config.context_layers)]
    if config.paragraph_encoder == "single-transformer-layer":
        shapes["tok_pos"] = (config.max_tokens + 1, d)
        shapes["cls"] = (d,)
        layers = ["tok", *layers]
    shapes["para_pos"] = (config.max_paragraphs, d)
    for prefix in layers:
        shapes.update({
            f"{prefix}.wq": (d, d), f"{prefix}.wk": (d, d), f"{prefix}.wv": (d, d),
            f"{prefix}.wo": (d, d), f"{prefix}.bo": (d,),
            f"{prefix}.ln1_g": (d,), f"{prefix}.ln1_b": (d,),
            f"{prefix}.w1": (d, config.ff_dim), f"{prefix}.b1": (config.ff_dim,),
            f"{prefix}.w2": (config.ff_dim, d), f"{prefix}.b2": (d,),
            f"{prefix}.ln2_g": (d,), f"{prefix}.ln2_b": (d,),
        })
    shapes.update({
        "k.w": (d, config.kq_dim), "k.b": (config.kq_dim,),
        "q.w": (d, config.kq_dim), "q.b": (config.kq_dim,),
        "score.w": (config.kq_dim, 1), "score.b": (1,),
        "head.w": (config.kq_dim, config.num_labels), "head.b": (config.num_labels,),
    })
    params = ModelParams(config)
    for name, shape in shapes.items():
        if name.endswith("_g"):
            value = np.ones(shape)
        elif name in ("para_pos", "head.w") or name.endswith((".wo", ".w2")):
            # Residual branches start closed, so each layer begins as a normalized
            # identity; positions start neutral so content drives the first
            # selections; a zero head keeps random label signs from pushing
            # the mask before any label has been learned.
            value = np.zeros(shape)
        elif name.endswith((".b", "_b", ".bo", ".b1", ".b2")):
            value = np.zeros(shape)
        elif len(shape) == 2 and name not in ("embed", "tok_pos", "para_pos"):
            value = rng.normal(0.0, 1.0 / np.sqrt(shape[0]), size=shape)
        else:
            value = rng.normal(0.0, s, size=shape)
        params.tensors[name] = Tensor(value, requires_grad=True, name=name)
    return params


# ------------------------------------------------------------------- batches


@dataclass
class Batch:
    token_ids: np.ndarray      # (B, N, L) int
    token_mask: np.ndarray     # (B, N, L) bool
    para_mask: np.ndarray      # (B, N) bool
    labels: np.ndarray         # (B, A)
    silver: np.ndarray | None  # (B, N), None when any case lacks a silver mask
    case_ids: list[str]

    @property
    def size(self) -> int:
        return self.token_ids.shape[0]

    @property
    def n_paragraphs(self) -> np.ndarray:
        return self.para_mask.sum(axis=1)


@dataclass
class EncodedCase:
    case_id: str
    paragraphs: list[np.ndarray]
    labels: np.ndarray
    silver: np.ndarray | None
    gold: np.ndarray | None


def encode_case(case: Case, vocab: Vocabulary, config: ModelConfig) -> EncodedCase:
    """Token ids per paragraph, truncated to the first N_max paragraphs and L_max tokens."""
    if not case.facts:
        raise ValueError(f"case {case.case_id} has no paragraphs")
    facts = case.facts[: config.max_paragraphs]
    paragraphs = []
    for text in facts:
        ids = vocab.encode(text)[: config.max_tokens] or [vocab.pad_id]
        paragraphs.append(np.array(ids, dtype=np.int64))
    n = len(facts)
    silver = case.rationale_mask("silver")
    gold = case.rationale_mask("gold")
    return EncodedCase(
        case.case_id,
        paragraphs,
        case.labels,
        None if silver is None else silver[:n],
        None if gold is None else gold[:n],
    )


def make_batch(cases: Sequence[EncodedCase]) -> Batch:
    if not cases:
        raise ValueError("empty batch")
    B = len(cases)
    N = max(len(c.paragraphs) for c in cases)
    L = max(len(p) for c in cases for p in c.paragraphs)
    ids = np.zeros((B, N, L), dtype=np.int64)
    tmask = np.zeros((B, N, L), dtype=bool)
    pmask = np.zeros((B, N), dtype=bool)
    for b, c in enumerate(cases):
        pmask[b, : len(c.paragraphs)] = True
        for i, p in enumerate(c.paragraphs):
            ids[b, i, : len(p)] = p
            tmask[b, i, : len(p)] = p != 0
            if not tmask[b, i].any():
                tmask[b, i, 0] = True
    labels = np.stack([c.labels for c in cases])
    silver = None
    if all(c.silver is not None for c in cases):
        silver = np.zeros((B, N))
        for b, c in enumerate(cases):
            silver[b, : len(c.silver)] = c.silver
    return Batch(ids, tmask, pmask, labels, silver, [c.case_id for c in cases])


# ------------------------------------------------------------------ pipeline


def _transformer_layer(x: Tensor, params: ModelParams, prefix: str, valid: np.ndarray, heads: int) -> Tensor:
    """Post-norm transformer layer; ``x`` is (..., S, d), ``valid`` (..., S)."""
    p = params.tensors
    *lead, S, d = x.shape
    hd = d // heads

    def split(t: Tensor) -> Tensor:
        t = ad.reshape(t, (*lead, S, heads, hd))
        return ad.transpose(t, (*range(len(lead)), len(lead) + 1, len(lead), len(lead) + 2))

    q = split(x @ p[f"{prefix}.wq"])
    k = split(x @ p[f"{prefix}.wk"])
    v = split(x @ p[f"{prefix}.wv"])
    scores = ad.matmul(q, ad.transpose(k, (*range(len(lead) + 1), len(lead) + 2, len(lead) + 1)))
    scores = scores * (1.0 / np.sqrt(hd))
    key_valid = np.expand_dims(valid, (-3, -2))
    attn = ad.softmax(scores, axis=-1, valid=key_valid)
    ctx = ad.matmul(attn, v)
    ctx = ad.transpose(ctx, (*range(len(lead)), len(lead) + 1, len(lead), len(lead) + 2))
    ctx = ad.reshape(ctx, (*lead, S, d))
    h = ad.layer_norm(x + (ctx @ p[f"{prefix}.wo"] + p[f"{prefix}.bo"]), p[f"{prefix}.ln1_g"], p[f"{prefix}.ln1_b"])
    ff = ad.relu(h @ p[f"{prefix}.w1"] + p[f"{prefix}.b1"]) @ p[f"{prefix}.w2"] + p[f"{prefix}.b2"]
    return ad.layer_norm(h + ff, p[f"{prefix}.ln2_g"], p[f"{prefix}.ln2_b"])


def encode_paragraphs(batch: Batch, params: ModelParams) -> Tensor:
    """Context-unaware paragraph vectors, shape (B, N, d).

    Paragraphs never see each other here: mean pooling and the token-level
    transformer both operate within one paragraph.
    """
    cfg = params.config
    if batch.token_ids.shape[1] == 0:
        raise ValueError("encode_paragraphs: case has no paragraphs")
    ids = np.where(batch.token_ids < cfg.vocab_size, batch.token_ids, 1)
    emb = ad.embedding(params["embed"], ids)  # (B, N, L, d)
    if cfg.paragraph_encoder == "mean-of-embeddings":
        # padding paragraphs have no tokens and pool to zero
        w = batch.token_mask / np.maximum(batch.token_mask.sum(axis=-1, keepdims=True), 1)
        return ad.sum_(emb * w[..., None], axis=2)
    B, N, L, d = emb.shape
    flat = ad.reshape(emb, (B * N, L, d))
    cls = ad.broadcast_to(ad.reshape(params["cls"], (1, 1, d)), (B * N, 1, d))
    seq = ad.concat([cls, flat], axis=1) + params["tok_pos"][: L + 1]
    valid = np.concatenate([np.ones((B * N, 1), bool), batch.token_mask.reshape(B * N, L)], axis=1)
    out = _transformer_layer(seq, params, "tok", valid, cfg.attention_heads)
    return ad.reshape(out[:, 0, :], (B, N, d))


def contextualize(paras: Tensor, params: ModelParams, para_mask: np.ndarray) -> Tensor:
    """Self-attention over the paragraphs of each case plus learned positions."""
    cfg = params.config
    N = paras.shape[-2]
    if N > cfg.max_paragraphs:
        raise ValueError(f"contextualize: {N} paragraphs exceed the positional table ({cfg.max_paragraphs})")
    x = paras + params["para_pos"][:N]
    for i in range(cfg.context_layers):
        x = _transformer_layer(x, params, f"ctx{i}", para_mask, cfg.attention_heads)
    return x


def project_kq(contextual: Tensor, params: ModelParams) -> tuple[Tensor, Tensor]:
    pk = ad.selu(contextual @ params["k.w"] + params["k.b"])
    pq = ad.selu(contextual @ params["q.w"] + params["q.b"])
    return pk, pq


def attention_scores(pq: Tensor, params: ModelParams) -> Tensor:
    logits = pq @ params["score.w"] + params["score.b"]
    return ad.sigmoid(ad.reshape(logits, logits.shape[:-1]))


def document_repr(pk: Tensor, mask, valid: np.ndarray | None = None) -> Tensor:
    """Max-pool of mask-scaled K rows; zeroed rows still take part in the max."""
    mask = ad.as_tensor(mask)
    if mask.shape != pk.shape[:-1]:
        raise ad.ShapeError(f"document_repr: mask shape {mask.shape} does not match rows {pk.shape[:-1]}")
    masked = pk * ad.reshape(mask, (*mask.shape, 1))
    return ad.maxpool(masked, axis=-2, valid=valid)


def classify(doc: Tensor, params: ModelParams) -> Tensor:
    return ad.sigmoid(doc @ params["head.w"] + params["head.b"])


@dataclass
class ForwardResult:
    attention: Tensor    # soft scores a, (B, N)
    mask: Tensor         # mask actually used for D_M
    doc_repr: Tensor     # D_M, (B, kq_dim)
    label_probs: Tensor  # Y hat, (B, A)
    pk: Tensor
    pq: Tensor
    valid: np.ndarray    # (B, N) real paragraphs
    hard_mask: Tensor    # threshold(a) restricted to real paragraphs

    def complement(self) -> Tensor:
        """Z^c over real paragraphs; differentiable through Z."""
        return ad.sub(self.valid.astype(np.float64), self.hard_mask)


class PassCounter:
    """Counts masked head evaluations; used to verify no extra passes run."""

    def __init__(self):
        self.count = 0


def masked_head(params: ModelParams, result: ForwardResult, mask, counter: PassCounter | None = None):
    """Re-run masking, pooling and classification with another mask."""
    if counter is not None:
        counter.count += 1
    mask = ad.as_tensor(mask)
    mask = mask * result.valid.astype(np.float64)
    doc = document_repr(result.pk, mask, result.valid)
    return doc, classify(doc, params)


def forward(params: ModelParams, batch: Batch, mask_override=None, hard: bool = True) -> ForwardResult:
    """Full pipeline.  ``mask_override`` replaces the thresholded mask for
    pooling and classification; the soft scores are still reported.
    ``hard=False`` swaps the threshold for its identity surrogate."""
    paras = encode_paragraphs(batch, params)
    ctx = contextualize(paras, params, batch.para_mask)
    pk, pq = project_kq(ctx, params)
    a = attention_scores(pq, params)
    valid = batch.para_mask
    z = ad.straight_through_threshold(a, params.config.threshold, hard=hard)
    z = z * valid.astype(np.float64)
    used = z
    if mask_override is not None:
        used = ad.as_tensor(mask_override)
        if used.shape != a.shape:
            raise ad.ShapeError(f"forward: override shape {used.shape} does not match {a.shape}")
        used = used * valid.astype(np.float64)
    doc = document_repr(pk, used, valid)
    probs = classify(doc, params)
    return ForwardResult(a, used, doc, probs, pk, pq, valid, z)


def forward_case(params: ModelParams, case: Case, vocab: Vocabulary, mask_override=None) -> ForwardResult:
    batch = make_batch([encode_case(case, vocab, params.config)])
    if mask_override is not None:
        mask_override = np.asarray(ad.as_tensor(mask_override).value).reshape(1, -1)
    return forward(params, batch, mask_override)


# ---------------------------------------------------------------- checkpoint


def save_checkpoint(path, params: ModelParams, vocab: Vocabulary | None = None, label_names=None) -> None:
    """``.npz`` container: one array per parameter plus a JSON header."""
    header = {"model_config": asdict(params.config), "order": list(params.tensors)}
    if vocab is not None:
        header["vocab"] = vocab.tokens
        header["min_freq"] = vocab.min_freq
    if label_names is not None:
        header["label_names"] = list(label_names)
    arrays = {f"param:{name}": t.value for name, t in params.tensors.items()}
    with Path(path).open("wb") as fh:
        np.savez(fh, __header__=np.array(json.dumps(header)), **arrays)


def load_checkpoint(path) -> tuple[ModelParams, Vocabulary | None, list[str] | None]:
    with np.load(Path(path), allow_pickle=False) as data:
        header = json.loads(str(data["__header__"]))
        config = ModelConfig(**header["model_config"])
        params = ModelParams(config)
        for name in header["order"]:
            params.tensors[name] = Tensor(data[f"param:{name}"].copy(), requires_grad=True, name=name)
    vocab = Vocabulary(header["vocab"], header.get("min_freq", 1)) if "vocab" in header else None
    return params, vocab, header.get("label_names")
