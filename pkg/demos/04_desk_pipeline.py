"""
Desk-scale pipeline: pretrain, zero-shot score, evaluate, transfer
==================================================================

A small benchmark is built from 64x64 crops of the scikit-image sample images.
The network learns to rebuild the distorted image from its reference plus a
degradation feature. The feature is then pooled and embedded in one dimension
to rank quality without any labels.

The stand-in MOS is 100 * SSIM, so the numbers below show the mechanics, not
agreement with human raters. Pass the number of epochs as the first argument
(default 10; the acceptance run uses 40).
"""

import sys
import tempfile
from dataclasses import replace
from pathlib import Path

import numpy as np

from cadis.config import get_profile
from cadis.desk import build_desk_benchmark
from cadis.evaluation import counterfactual_suite, evaluate_scores
from cadis.score import EmbeddingParams, logistic_map, score_manifest
from cadis.train import pretrain

epochs = int(sys.argv[1]) if len(sys.argv) > 1 else 10
work = Path(tempfile.mkdtemp(prefix="cadis_demo_"))
prof = get_profile("desk")

###############################################################################
# 28 pristine crops, blur and noise at four levels, split 16 / 4 / 8 by image.

manifest = build_desk_benchmark(work / "data", seed=0)
print(f"{len(manifest)} pairs under {work}")

###############################################################################
# Pretrain. Losses are logged per epoch in the returned history.

ckpt = pretrain(manifest, replace(prof.pretrain, epochs=epochs), prof.net, out_dir=work / "pretrain")
print("last epoch:", {k: round(v, 5) for k, v in ckpt.history[-1].items() if isinstance(v, float)})

###############################################################################
# Zero-shot scores on the held-out images, embedded separately per kind.

test = manifest.subset("test")
table = score_manifest(ckpt, test, "zeroshot", EmbeddingParams(prof.n_neighbors, prof.min_dist, 0))
y = np.array([r["y"] for r in table.rows])
mos = np.array([r["mos"] for r in table.rows])
kinds = [r["kind"] for r in table.rows]
levels = [r["level"] for r in table.rows]
refs = [r["ref_path"] for r in table.rows]
report = evaluate_scores(y, mos, kinds, levels, refs, logistic_map(y, mos))
print(f"SRCC {report.srcc:.3f}  PLCC {report.plcc:.3f}  fixed-level pairwise {report.mean_pairwise_acc:.3f}")

###############################################################################
# Counterfactual transfer: take D from one pair, decode it on a different
# reference, and check that the result is closer to that reference degraded
# the same way than to any other kind.

res = counterfactual_suite(ckpt.net, manifest)
print(f"counterfactual accuracy {res['acc']:.3f} over {res['n']} trials")

###############################################################################
# Optional scatter of oriented y against the stand-in MOS.

try:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
except ImportError:
    plt = None
if plt is not None:
    fig, ax = plt.subplots(figsize=(4, 3))
    for k in sorted(set(kinds)):
        idx = [i for i, kk in enumerate(kinds) if kk == k]
        ax.scatter(y[idx], mos[idx], s=12, label=k)
    ax.set_xlabel("oriented y")
    ax.set_ylabel("100 * SSIM")
    ax.legend()
    fig.tight_layout()
    fig.savefig(work / "scatter.png", dpi=120)
    print("scatter saved to", work / "scatter.png")
