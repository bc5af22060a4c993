"""Sparsity alone versus sparsity plus singularity on a corpus with many decoys.

Usage: python3 demos/compare_singularity.py [n_seeds]

Trains ``n_seeds`` models per objective (default 5, about ten minutes in all)
and prints mean and standard deviation of each test metric.
"""

import sys
from dataclasses import replace

from paragraph_rationales import losses as L
from paragraph_rationales import training as T
from paragraph_rationales.data import SynthConfig, generate_synthetic
from paragraph_rationales.metrics import EvalReport
from paragraph_rationales.model import ModelConfig


def main(n_seeds: int) -> None:
    corpus = generate_synthetic(SynthConfig(n_cases=2500, n_labels=5, noise=0.3, split_fractions=(0.8, 0.0, 0.2)))
    prepared = T.prepare(corpus, 5, ModelConfig(vocab_size=0, num_labels=0, max_paragraphs=10, max_tokens=32))
    base = T.TrainConfig(epochs=20, weights=L.LossWeights(lambda_s=0.1))
    objectives = {
        "L_s": base,
        "L_s + L_r": replace(base, weights=replace(base.weights, lambda_r=0.1, r_variant="prob-margin")),
    }
    print(f"{'metric':<22}" + "".join(f"{name:>22}" for name in objectives))
    results = {name: T.run_experiment(prepared, config, n_seeds) for name, config in objectives.items()}
    for key in EvalReport.SCORES:
        cells = [f"{r.aggregates[key].mean:.4f} ± {r.aggregates[key].std:.4f}" for r in results.values()]
        print(f"{key:<22}" + "".join(f"{c:>22}" for c in cells))


if __name__ == "__main__":
    main(int(sys.argv[1]) if len(sys.argv) > 1 else 5)
