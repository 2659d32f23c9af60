"""
A complete run on a small corpus
================================

Generates about 80 images, votes pseudo-labels, trains the teacher and the
student, and prints the metrics. Takes well under a minute on one core.

    python3 demos/tiny_pipeline.py /tmp/nsod-demo
"""

import sys

from nsod.datamodel import read_pseudo_labels
from nsod.pipeline import RunConfig, run_all
from nsod.student import StudentParams
from nsod.synthgen import CorpusSpec

out = sys.argv[1] if len(sys.argv) > 1 else "nsod-demo-run"
config = RunConfig(
    output_dir=out,
    corpus=CorpusSpec(n_unlabeled=40, n_test=15, k_support=3, distractor_count=10),
    student=StudentParams(steps=400, decay_step=280),
)
record = run_all(config)

print("stage timings (s):", record.timings)
print("teacher:", record.training_log["teacher"])
for name in ("detection_map", "corloc", "classification_map", "macc"):
    print(f"{name:>20}: {100 * record.metrics[name]['mean']:6.2f}")
print(f"{'proposal recall':>20}: {record.metrics['proposal_recall']:.3f}")
print(f"{'distractors empty':>20}: {record.metrics['distractor_all_negative']:.2f}")

# a few pseudo-labels next to their scores
for p in read_pseudo_labels(f"{out}/pseudo.jsonl")[:5]:
    print(p.image_id, p.y_hat, p.q_hat.round(2))
