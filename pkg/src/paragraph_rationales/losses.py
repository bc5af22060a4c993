"""Training objectives: classification, sparsity, continuity,
comprehensiveness (three variants), singularity and silver supervision.

Every per-case loss reduces over the last axis, so the same function serves
a single case (vectors) and a padded batch (matrices plus a ``valid`` mask).
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from typing import NamedTuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

VARIANTS = ("loss-margin", "prob-margin", "repr-cosine")


@dataclass
class LossWeights:
    lambda_s: float = 0.0
    lambda_c: float = 0.0
    lambda_g: float = 0.0
    lambda_r: float = 0.0
    lambda_ns: float = 0.0
    sparsity_target: float = 0.3
    margin: float = 0.1
    g_variant: str = "repr-cosine"
    r_variant: str = "prob-margin"

    def validate(self) -> None:
        for name in ("lambda_s", "lambda_c", "lambda_g", "lambda_r", "lambda_ns", "margin"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative, got {getattr(self, name)}")
        if not 0.0 < self.sparsity_target < 1.0:
            raise ValueError(f"sparsity_target must lie in (0, 1), got {self.sparsity_target}")
        for name in ("g_variant", "r_variant"):
            if getattr(self, name) not in VARIANTS:
                raise ValueError(f"{name} must be one of {VARIANTS}, got {getattr(self, name)!r}")


def _valid(z: Tensor, valid) -> np.ndarray:
    if valid is None:
        return np.ones(z.shape)
    valid = np.asarray(valid, dtype=np.float64)
    if valid.shape != z.shape:
        raise ad.ShapeError(f"valid mask shape {valid.shape} does not match {z.shape}")
    return valid


def classification_loss(probs, y) -> Tensor:
    """Binary cross-entropy summed over labels."""
    return ad.sum_(ad.bce(probs, y), axis=-1)


def sparsity_loss(z, target: float, valid=None) -> Tensor:
    """``|T - mean(z)|`` over the real paragraphs."""
    z = ad.as_tensor(z)
    v = _valid(z, valid)
    frac = ad.sum_(z * v, axis=-1) / v.sum(axis=-1)
    return ad.abs_(ad.sub(target, frac))


def continuity_loss(z, valid=None) -> Tensor:
    """Mean absolute difference of neighbouring mask entries; 0 for one paragraph."""
    z = ad.as_tensor(z)
    v = _valid(z, valid)
    if z.shape[-1] < 2:
        return ad.sum_(z * 0.0, axis=-1)
    pair = v[..., 1:] * v[..., :-1]
    diffs = ad.abs_(z[..., 1:] - z[..., :-1]) * pair
    transitions = pair.sum(axis=-1)
    return ad.sum_(diffs, axis=-1) / np.maximum(transitions, 1.0)


def comprehensiveness_loss_margin(lp, lp_other, margin: float) -> Tensor:
    """Hinge requiring the other mask's loss to exceed ours by ``margin``."""
    return ad.hinge(ad.as_tensor(lp) - lp_other + margin)


def comprehensiveness_prob(probs, probs_other, y, margin: float) -> Tensor:
    """Per-label probability margin averaged over labels, hinged at zero."""
    probs, probs_other, y = ad.as_tensor(probs), ad.as_tensor(probs_other), ad.as_tensor(y).value
    pos = y * (probs_other - probs + margin)
    neg = (1.0 - y) * (probs - probs_other + margin)
    return ad.hinge(ad.mean(pos + neg, axis=-1))


def comprehensiveness_repr(doc, doc_other) -> Tensor:
    """``|cos(D_M, D_M')|``; zero when either representation is zero."""
    return ad.abs_(ad.cosine(doc, doc_other))


def random_mask(n: int, target: float, rng: np.random.Generator) -> np.ndarray:
    """Binary vector with ``round(T*n)`` (at least one) ones at uniform positions."""
    if n < 1:
        raise ValueError("random_mask needs n >= 1")
    k = min(n, max(1, int(np.floor(target * n + 0.5))))
    mask = np.zeros(n)
    mask[rng.choice(n, size=k, replace=False)] = 1.0
    return mask


def random_masks(n_paragraphs: np.ndarray, width: int, target: float, rng: np.random.Generator) -> np.ndarray:
    """One :func:`random_mask` per case, padded to ``width``."""
    out = np.zeros((len(n_paragraphs), width))
    for b, n in enumerate(n_paragraphs):
        out[b, :n] = random_mask(int(n), target, rng)
    return out


def mask_gamma(z, z_random) -> Tensor:
    """``1 - cos(Z^r, Z)``: how little the random mask overlaps ours."""
    return ad.sub(1.0, ad.cosine(z_random, z))


class PassTerms(NamedTuple):
    """What one masked pass contributes to the comprehensiveness variants."""

    lp: Tensor
    probs: Tensor
    doc: Tensor


def comprehensiveness(variant: str, main: PassTerms, other: PassTerms, y, margin: float) -> Tensor:
    if variant == "loss-margin":
        return comprehensiveness_loss_margin(main.lp, other.lp, margin)
    if variant == "prob-margin":
        return comprehensiveness_prob(main.probs, other.probs, y, margin)
    if variant == "repr-cosine":
        return comprehensiveness_repr(main.doc, other.doc)
    raise ValueError(f"unknown comprehensiveness variant {variant!r}")


def singularity_loss(z, z_random, variant: str, main: PassTerms, other: PassTerms, y, margin: float) -> Tensor:
    """Comprehensiveness against a random mask, scaled by ``1 - cos(Z^r, Z)``."""
    return mask_gamma(z, z_random) * comprehensiveness(variant, main, other, y, margin)


def supervision_loss(z, z_silver, valid=None) -> Tensor:
    """Mean absolute error between predicted and silver masks."""
    z = ad.as_tensor(z)
    zs = ad.as_tensor(z_silver)
    if z.shape != zs.shape:
        raise ad.ShapeError(f"supervision_loss: mask shapes differ {z.shape} and {zs.shape}")
    v = _valid(z, valid)
    return ad.sum_(ad.abs_(z - zs) * v, axis=-1) / v.sum(axis=-1)


# ------------------------------------------------------------------ assembly

COMPONENTS = ("L_p", "L_p_c", "L_p_r", "L_s", "L_c", "L_g", "L_r", "L_sup")


@dataclass
class LossBreakdown:
    values: dict[str, float] = field(default_factory=dict)
    active: dict[str, bool] = field(default_factory=dict)
    total: float = 0.0

    def __getitem__(self, name: str) -> float:
        return self.values.get(name, 0.0)

    def header(self) -> str:
        return "\t".join(["step", *COMPONENTS, "L_total"])

    def to_log_line(self, step: int) -> str:
        cells = [str(step)]
        for name in COMPONENTS:
            cells.append(repr(self.values[name]) if self.active.get(name) else "-")
        cells.append(repr(self.total))
        return "\t".join(cells)


def total_loss(components: dict[str, Tensor], weights: LossWeights, supervision: bool = False):
    """Assemble the training objective from per-case component tensors.

    Components are batch-averaged first; the objective is linear, so this
    equals the batch mean of per-case totals.  Returns ``(loss, breakdown)``.
    """
    means = {name: ad.mean(t) for name, t in components.items() if t is not None}

    def need(*names):
        missing = [n for n in names if n not in means]
        if missing:
            raise ValueError(f"total_loss: components {missing} required by nonzero weights are missing")
        return [means[n] for n in names]

    (loss,) = need("L_p")
    if supervision:
        if weights.lambda_ns:
            (sup,) = need("L_sup")
            loss = loss + weights.lambda_ns * sup
    else:
        if weights.lambda_s:
            (ls,) = need("L_s")
            loss = loss + weights.lambda_s * ls
        if weights.lambda_c:
            (lc,) = need("L_c")
            loss = loss + weights.lambda_c * lc
        if weights.lambda_g:
            lg, lpc = need("L_g", "L_p_c")
            loss = loss + weights.lambda_g * (lg + lpc)
        if weights.lambda_r:
            lr, lpr = need("L_r", "L_p_r")
            loss = loss + weights.lambda_r * (lr + lpr)
    breakdown = LossBreakdown(
        values={n: (means[n].item() if n in means else 0.0) for n in COMPONENTS},
        active={n: n in means for n in COMPONENTS},
        total=loss.item(),
    )
    return loss, breakdown


def reassemble(breakdown: LossBreakdown, weights: LossWeights, supervision: bool = False) -> float:
    """Recompute the total from logged component values."""
    v = breakdown.values
    if supervision:
        return v["L_p"] + weights.lambda_ns * v["L_sup"]
    return (
        v["L_p"]
        + weights.lambda_s * v["L_s"]
        + weights.lambda_c * v["L_c"]
        + weights.lambda_g * (v["L_g"] + v["L_p_c"])
        + weights.lambda_r * (v["L_r"] + v["L_p_r"])
    )


def weight_fields() -> list[str]:
    return [f.name for f in fields(LossWeights)]
