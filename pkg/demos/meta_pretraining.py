"""
Meta pre-training the prompts
=============================

Prompts are trained across distortion types with a first-order
inner/outer loop, then used zero-shot on distortion types that were held
out of pre-training. A short run is enough to see the query loss fall;
pass the number of epochs on the command line for a longer one.
"""

import sys

from grmp.meta import MetaConfig, run_meta_pretraining
from grmp.model import DualEncoder
from grmp.qgr import evaluate
from grmp.synth import build_benchmark

epochs = int(sys.argv[1]) if len(sys.argv) > 1 else 10
seed = 0

# Six distortion types feed pre-training; two more are kept for evaluation.
meta, ev = build_benchmark(seed=seed)
test = ev.subset(ev.where(split="test"))
print(f"meta-train images: {len(meta)}, held-out test images: {len(test)}")

init = DualEncoder.initialize(prompt_seed=seed)
result = run_meta_pretraining(meta, MetaConfig(epochs=epochs), init, seed)

# Mean support and query loss per epoch.
for epoch, (support, query) in enumerate(result.epoch_means()):
    print(f"epoch {epoch:3d}  support {support:.4f}  query {query:.4f}")

# Zero-shot quality prediction on the held-out types.
random_srcc = evaluate(init, test)["srcc"]
meta_srcc = evaluate(init.with_params(result.params), test)["srcc"]
print(f"zero-shot SRCC  random prompts {random_srcc:.3f}  meta prompts {meta_srcc:.3f}")
