"""The metric suite, computed from a hand-written accuracy log.

The log maps (train task k, mini-batch i, eval task j) to an accuracy,
with i = 0 meaning "before any mini-batch of task k" and i = B_k the end
of the task.  Average accuracy, forgetting, and the learning-curve area
are all pure reads of this log.
"""

from llb.metrics import (
    AccuracyTensor,
    avg_accuracy,
    forgetting,
    lca,
    record,
    worst_case_forgetting,
    zero_shot_series,
)

tensor = AccuracyTensor(order=[1, 2, 3], batch_counts={1: 20, 2: 20, 3: 20})

# task 1: learns quickly from chance
for b, acc in enumerate([0.10, 0.42, 0.61, 0.72]):
    record(tensor, 1, b, 1, acc)
record(tensor, 1, 20, 1, 0.90)
record(tensor, 1, 20, 2, 0.12)
record(tensor, 1, 20, 3, 0.08)

# task 2: slightly better zero-shot (transfer), task 1 degrades a little
for b, acc in enumerate([0.15, 0.40, 0.66, 0.75]):
    record(tensor, 2, b, 2, acc)
record(tensor, 2, 20, 1, 0.85)
record(tensor, 2, 20, 2, 0.92)
record(tensor, 2, 20, 3, 0.10)

# task 3: task 1 drops further, task 2 holds
for b, acc in enumerate([0.22, 0.48, 0.70, 0.80]):
    record(tensor, 3, b, 3, acc)
record(tensor, 3, 20, 1, 0.70)
record(tensor, 3, 20, 2, 0.90)
record(tensor, 3, 20, 3, 0.93)

for k in (1, 2, 3):
    line = f"after task {k}: A = {avg_accuracy(tensor, k):.3f}"
    if k > 1:
        f_k, per = forgetting(tensor, k)
        line += (f"   F = {f_k:+.3f}  (per task: "
                 + ", ".join(f"{j}: {v:+.2f}" for j, v in per.items())
                 + f")   worst = {worst_case_forgetting(tensor, k):.2f}")
    print(line)

curve, area = lca(tensor, beta=3)
print(f"\nb-shot curve Z_b: {[round(z, 3) for z in curve]}")
print(f"learning-curve area LCA_3 = {area:.3f}")
print(f"zero-shot series: {zero_shot_series(tensor)}")
