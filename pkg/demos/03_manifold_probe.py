"""
Recovering a hidden quality ordering with a 1-D embedding
=========================================================

Points are sampled along a curve in 16 dimensions with a known position q and
a little isotropic noise. The neighbour-graph embedding never sees q, yet its
single coordinate should rank the points in the same order (up to sign).
"""

from scipy.stats import spearmanr

from cadis.score import EmbeddingParams, ManifoldProbe, embed_1d, orient

for name, probe in (
    ("straight line", ManifoldProbe.linear(p=16, n_samples=200, seed=0)),
    ("three-segment curve", ManifoldProbe.curved(p=16, segments=3, n_samples=300, eta_frac=0.01, seed=0)),
):
    x, q = probe.sample()
    y = embed_1d(x, EmbeddingParams(n_neighbors=15, min_dist=0.1, seed=0))
    print(f"{name:<20} |Spearman(y, q)| = {abs(spearmanr(y, q)[0]):.4f}")

###############################################################################
# The sign of the embedding is arbitrary. Orientation fixes it with anchors
# known to be high quality, here the ten points with the largest q.

anchors = q.argsort()[-10:]
y_oriented, how = orient(y, anchors)
print(f"orientation: {how}, Spearman after orientation {spearmanr(y_oriented, q)[0]:+.4f}")
