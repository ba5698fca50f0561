"""Input-dependent SSM: the parallel scan, the sequential loop and token streaming agree.

Once delta, B and C depend on the input there is no fixed kernel, so the
recurrence h_t = a_t * h_{t-1} + b_t is evaluated either left to right or with
a work-efficient parallel prefix scan over the pairs (a_t, b_t).
"""

import numpy as np

from cobra_ssm import init_mamba_block, mamba_block_forward, selective_scan
from cobra_ssm.ssm import mamba_block_step

rng = np.random.default_rng(1)
blk = init_mamba_block(d_model=8, d_state=4, rng=rng)

for L in (1, 100, 1000, 4095):
    x = rng.normal(size=(L, blk.d_inner))
    y_seq, _ = selective_scan(x, blk.ssm, "sequential")
    y_par, _ = selective_scan(x, blk.ssm, "parallel")
    print(f"L={L:5d}  max |parallel - sequential| = {np.max(np.abs(y_seq - y_par)):.1e}")

# a full block, batch vs one token at a time
x = rng.normal(size=(64, 8))
batch = mamba_block_forward(x, blk)
state = blk.new_state()
rows = []
for t in range(64):
    y, state = mamba_block_step(state, x[t], blk)
    rows.append(y)
print(f"block: max |streamed - batch| = {np.max(np.abs(np.array(rows) - batch)):.1e}")
print(f"state carried between tokens: {state.nbytes} bytes, whatever the context length")
