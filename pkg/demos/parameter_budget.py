"""How much of a recommender's size sits in item embeddings, and what semantic
IDs buy back.  Pure arithmetic, runs instantly:

    python demos/parameter_budget.py
"""

from semids.semid import ModelDims, embedding_reduction, param_count
from semids.sweep import iso_param_contours

N = 100_000
dims = ModelDims(tiebreak_buckets=64)

base = param_count(N, 60, "baseline", dims=dims)
print(f"baseline, {N:,} tracks, h=60: {base['total']:,} parameters")
for k in (16, 64, 256, 1024, 4096):
    sem = param_count(N, 60, "semantic", k=k, n=4, max_tiebreak=64, dims=dims)
    print(f"  semantic k={k:<5} {sem['total']:>10,} total, embeddings {embedding_reduction(base, sem):6.1%} smaller")

# which (k, h) pairs cost the same as k=256, h=32?
budget = param_count(N, 32, "semantic", k=256, n=4, max_tiebreak=64, dims=dims)["total"]
pairs = iso_param_contours([budget], [16, 64, 256, 1024, 4096], list(range(8, 129)), "semantic", N,
                           max_tiebreak=64, dims=dims)[budget]  # fmt: skip
print(f"\npairs within 1% of {budget:,} parameters: {pairs}")
