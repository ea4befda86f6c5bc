"""Reproduce the published ranking pipeline from significant-win counts:
normalized [0.1, 1] scores with tie averaging, then the geometric-mean
leaderboard across the three segmentation datasets.

Run: python demos/rank_from_wins.py
"""

from mixerlab.evalrank import aggregate_geomean, normalize_ranks

# significant pairwise wins per dataset (14 submissions on jsrt/graz; the
# kernel-9 variants and the global-attention DNS row only affect tiger)
WINS = {
    "jsrt": {
        "pooling_k3": 4, "pooling_k5": 3, "pooling_k7": 1,
        "conv_k3": 8, "conv_k5": 10, "conv_k7": 9,
        "grouped_conv_k3": 9, "grouped_conv_k5": 8, "grouped_conv_k7": 9,
        "local_attn_k3": 0, "local_attn_k5": 4, "local_attn_k7": 1,
        "global_attn": 1, "identity": 1,
    },
    "graz": {
        "pooling_k3": 2, "pooling_k5": 2, "pooling_k7": 2,
        "conv_k3": 5, "conv_k5": 6, "conv_k7": 10,
        "grouped_conv_k3": 2, "grouped_conv_k5": 9, "grouped_conv_k7": 8,
        "local_attn_k3": 2, "local_attn_k5": 2, "local_attn_k7": 2,
        "global_attn": 0, "identity": 0,
    },
    "tiger": {
        "pooling_k3": 6, "pooling_k5": 2, "pooling_k7": 2, "pooling_k9": 6,
        "conv_k3": 10, "conv_k5": 1, "conv_k7": 1, "conv_k9": 3,
        "grouped_conv_k3": 2, "grouped_conv_k5": 5, "grouped_conv_k7": 4,
        "grouped_conv_k9": 3,
        "local_attn_k3": 0, "local_attn_k5": 0, "local_attn_k7": 0,
        "local_attn_k9": 0,
        "identity": 0,
    },
}

ranks = {ds: normalize_ranks(w) for ds, w in WINS.items()}

print("per-dataset normalized ranks:")
for ds in ("jsrt", "graz", "tiger"):
    print(f"\n  {ds}:")
    for name, score in sorted(ranks[ds].items(), key=lambda kv: -kv[1]):
        print(f"    {name:>18}: {score:.2f}  ({WINS[ds][name]} wins)")

# aggregate only the submissions that entered all three datasets; global
# attention did not start on tiger, which the None marker encodes
submissions = sorted(WINS["jsrt"])
cells = {
    ds: {name: ranks[ds].get(name) for name in submissions} for ds in WINS
}
leaderboard = aggregate_geomean(cells)

print("\nglobal leaderboard (geometric mean across datasets):")
for name, score in sorted(leaderboard.items(), key=lambda kv: -kv[1]):
    print(f"  {name:>18}: {score:.3f}")
