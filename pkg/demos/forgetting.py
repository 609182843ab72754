"""Naive fine-tuning forgets the source domain; guided tuning holds on to it.

Train on domain A, then adapt to domain B twice from the same checkpoint:
once by plain fine-tuning, once with the guided objective. The forgetting
report lays out accuracy for every (stage, domain) pair and the backward
transfer on A.
"""

from metadapt.evaluation import forgetting_report, generate_synthetic_benchmark
from metadapt.training import TrainConfig, guided_tune, train_supervised

SEED = 0
bm = generate_synthetic_benchmark(SEED, 100)
a, b = bm.domain_a, bm.domain_b

source = train_supervised(a, None, TrainConfig("naive", epochs=80, lr=0.1, batch_size=16, seed=SEED))
adapt = dict(epochs=40, lr=0.2, batch_size=32, seed=SEED)
ft = train_supervised(b, source, TrainConfig("finetune", **adapt))
gt = guided_tune(source, a, b, TrainConfig("guided", adapt_source_batch=6, **adapt))

for name, ck in (("fine-tune", ft), ("guided", gt)):
    rep = forgetting_report([source, ck], [a, b], stage_names=["after A", f"after B ({name})"])
    print(f"\n{name}")
    print("  stage              " + "  ".join(f"{d:>9}" for d in rep.domains))
    for stage, row in zip(rep.stages, rep.accuracy_matrix()):
        print(f"  {stage:<18} " + "  ".join(f"{v:9.3f}" for v in row))
    print(f"  backward transfer on A: {rep.backward_transfer['domain_a']:+.3f}")

# per-epoch source accuracy while adapting, straight from the guided run's log
print("\nguided run, source val accuracy by epoch:")
print("  " + " ".join(f"{r['source_val_accuracy']:.2f}" for r in gt.log[::5]))
