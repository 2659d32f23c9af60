"""
Fusion ablation as a sweep
==========================

Runs G-only, X-only and fused pseudo-labelling on the same small corpus and
writes ``sweep.csv`` and ``sweep.svg`` next to the runs.

    python3 demos/fusion_sweep.py /tmp/nsod-sweep
"""

import sys

from nsod.pipeline import RunConfig, report, sweep
from nsod.student import StudentParams
from nsod.synthgen import CorpusSpec

out = sys.argv[1] if len(sys.argv) > 1 else "nsod-demo-sweep"
base = RunConfig(
    output_dir=out,
    corpus=CorpusSpec(n_unlabeled=60, n_test=20, k_support=3),
    student=StudentParams(steps=600, decay_step=420),
    cache_dir=f"{out}/cache",
)
rows = sweep(base, "fusion_mode", ["G-only", "X-only", "fused"], out)
for row in rows:
    print(row["value"], row["status"], row.get("detection_map"))

print(report([f"{out}/fusion_mode={m}" for m in ("G-only", "X-only", "fused")]))
