"""Per-token decode cost against context length: SSM state vs attention KV cache.

Each context is prefilled, then a burst of single-token steps is timed. The
SSM step touches a fixed-size state; the attention step reads a cache that
grows with every token. Also prints a throughput table (tokens per second
over the whole request, image encoding included). Takes a few seconds.
"""

import numpy as np

from cobra_ssm import BackboneConfig, CobraConfig, ImageInput, init_backbone, init_cobra
from cobra_ssm.bench import format_table, measure_throughput, scaling_sweep

result = scaling_sweep(init_backbone(BackboneConfig(d_model=32, n_layers=2, d_state=8)), repeats=5)
print(result.table())
print(f"latency ratio 4096 vs 256: SSM {result.ssm_ratio:.2f}, attention {result.attention_ratio:.2f}\n")

reports = []
for projector in ("mlp", "ldp"):
    model = init_cobra(CobraConfig(projector=projector, backbone=BackboneConfig(d_model=16, n_layers=2)))
    img = ImageInput(np.full((3, 378, 378), 0.5))
    reports.append(measure_throughput(model, img, n_out=64, repeats=3, tag=f"toy-{projector}"))
print(format_table(reports))
