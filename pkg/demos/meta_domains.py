"""How a handful of target images become transforms over the source domain.

Domain B of the synthetic benchmark is domain A shifted toward red/yellow and
slightly blurred. A 15% calibration draw from B is split into two
meta-domains; each one measures its members' LAB moments and sharpness, then
turns them into a color transfer plus a blur whose strength reproduces the
measured sharpness drop.
"""

import numpy as np

from metadapt.evaluation import generate_synthetic_benchmark
from metadapt.imaging import build_calibration_profile, image_stats
from metadapt.metadomain import build_meta_domains, partition_meta_domains, sample_calibration, source_sharpness
from metadapt.transforms import apply_many

bm = generate_synthetic_benchmark(seed=0, samples_per_class=60)
a, b = bm.domain_a, bm.domain_b

for ds in (a, b):
    prof = build_calibration_profile(ds.images[ds.indices("train")])
    c, s = prof.aggregate_color, prof.aggregate_sharpness
    print(f"{ds.domain_name}: LAB mean {np.round(c.mean, 2)}  laplacian var {s.laplacian_variance:.4f}")

cal = sample_calibration(b, 0.15, seed=0)
parts = partition_meta_domains(cal, 2, seed=0)
metas = build_meta_domains(a, b, parts, source_sharpness(a), master_seed=0)
print(f"\n{len(cal)} calibration images -> meta-domain sizes {[len(p) for p in parts]}")

src = a.images[a.indices("train")[:40]]
for m in metas:
    print(f"\nmeta-domain {m.id}:")
    for spec in m.pipeline.specs:
        print("  ", spec.to_dict())
    # probability 0.5 per transform, so on average the shift is partial
    moved = apply_many(m.pipeline, src, np.arange(len(src)))
    before = np.mean([image_stats(x)[0].mean for x in src], axis=0)
    after = np.mean([image_stats(x)[0].mean for x in moved], axis=0)
    print(f"   source LAB mean {np.round(before, 2)} -> {np.round(after, 2)}")
