"""Contrastive pre-training and robustness to image degradations.

Two classifiers on domain A share the same supervised schedule; one starts
from random weights, the other from an encoder pre-trained with the
multi-positive contrastive loss on augmented views. Both are scored on the
clean test split and under five degradations.
"""

from metadapt.evaluation import default_suite, generate_synthetic_benchmark, robustness_report
from metadapt.training import TrainConfig, ct_pretrain, train_supervised

SEED = 1
a = generate_synthetic_benchmark(SEED, 100).domain_a
supervised = dict(epochs=80, lr=0.1, batch_size=16, seed=SEED)

naive = train_supervised(a, None, TrainConfig("naive", **supervised))
pre = ct_pretrain(a, TrainConfig("ct_pretrain", epochs=10, lr=0.1, batch_size=32, n_views=4, seed=SEED))
print("contrastive loss by epoch:", " ".join(f"{r['train_loss']:.3f}" for r in pre.log))
ct = train_supervised(a, pre, TrainConfig("finetune", **supervised))

suite = default_suite(severity=2)
for name, ck in (("naive", naive), ("contrastive", ct)):
    rep = robustness_report(ck, a, suite, "test", SEED)
    print(f"\n{name}: mean accuracy drop {rep.mean_accuracy_drop:.3f}")
    for row in rep.rows():
        print(f"  {row['condition']:<24} acc {row['accuracy']:.3f}  ({row['delta_accuracy']:+.3f})")
