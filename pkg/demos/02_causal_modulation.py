"""
Causal modulation and the acyclicity penalty
============================================

The degradation feature D is nudged by the content code z_c through a gated,
bounded mask: D + lam * sigmoid(g) * tanh(f(z_c)) * D. With lam = 0 or a
closed gate the layer is the identity, and the trace penalty vanishes exactly
on graphs without cycles, such as content -> degradation -> image.
"""

import numpy as np
import torch

from cadis import causal_modulate, dag_acyclicity_penalty, film
from cadis.networks import CausalLayer

torch.manual_seed(0)
d = torch.randn(2, 6, 4, 4)
z = torch.randn(2, 8)

###############################################################################
# Identity cases.

layer = CausalLayer(8, 6, lambda_init=0.0)
print("lam = 0 is identity:", torch.equal(causal_modulate(d, z, layer), d))
layer = CausalLayer(8, 6)
with torch.no_grad():
    layer.gate.fill_(-20.0)
print("closed gate max change:", (causal_modulate(d, z, layer) - d).abs().max().item())
print("film(F, 0, 0) is identity:", torch.equal(film(d, torch.zeros(6), torch.zeros(6)), d))

###############################################################################
# The modulation is bounded: each element moves by at most lam * |D|.

layer = CausalLayer(8, 6, lambda_init=0.1)
with torch.no_grad():
    layer.gate.fill_(10.0)
ratio = ((causal_modulate(d, z, layer) - d).abs() / d.abs()).max().item()
print(f"largest relative change {ratio:.4f} (bound 0.1)")

###############################################################################
# Acyclicity on the three-node model C, D, I_d. Adding the back edge I_d -> C
# closes a loop and the penalty turns positive.

nodes = ["C", "D", "I_d"]
scm = np.array([[0, 1, 1], [0, 0, 1], [0, 0, 0]], dtype=float)
print("H(C->D, C->I_d, D->I_d) =", dag_acyclicity_penalty(scm))
loop = scm.copy()
loop[2, 0] = 1.0
print("H(with I_d->C)          =", dag_acyclicity_penalty(loop))
