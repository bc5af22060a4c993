"""Generate a planted-rationale corpus, train, and evaluate, all through the CLI.

Usage: python3 demos/recover_planted_rationales.py [workdir]

Takes a few minutes on one CPU.  The evaluation table shows classification
from the full input, from the selected paragraphs and from their complement,
followed by rationale quality against the planted paragraphs.
"""

import sys
import tempfile
from pathlib import Path

from paragraph_rationales import cli

CONFIG = str(Path(__file__).resolve().parent.parent / "configs" / "synthetic_recovery.yaml")


def main(workdir: Path) -> int:
    corpus, checkpoint = str(workdir / "corpus.jsonl"), str(workdir / "model.npz")
    steps = [
        ["synth", "--config", CONFIG, "--out", corpus],
        ["stats", "--config", CONFIG, "--corpus", corpus, "--split", "train"],
        ["train", "--config", CONFIG, "--corpus", corpus, "--checkpoint", checkpoint,
         "--log", str(workdir / "train.tsv"), "--out", str(workdir / "train_report.txt")],
        ["eval", "--config", CONFIG, "--corpus", corpus, "--checkpoint", checkpoint, "--split", "test"],
    ]
    for argv in steps:
        print(f"$ paragraph-rationales {' '.join(argv)}", flush=True)
        code = cli.main(argv)
        if code:
            return code
        print()
    return 0


if __name__ == "__main__":
    if len(sys.argv) > 1:
        sys.exit(main(Path(sys.argv[1])))
    with tempfile.TemporaryDirectory() as tmp:
        sys.exit(main(Path(tmp)))
