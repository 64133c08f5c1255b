"""Long-tailed class profiles, the anti-long-tailed sampler and mixed samples.

Run: python3 demos/01_longtail_data.py
"""

import numpy as np

from ricasso.data import anti_longtail_sampler, build_training_batch, cutmix, make_longtail_profile, mixup

# An exponential profile: 10 classes, 500 images in the head, imbalance ratio 100.
profile = make_longtail_profile(10, 500, 100)
print("counts:", profile.counts)
print("priors:", np.round(profile.priors, 4))

# The anti-long-tailed sampler picks a class with probability proportional to 1/n_c,
# so the tail is drawn far more often than the head.
sampler = anti_longtail_sampler(profile, seed=0)
print("sampler class probabilities:", np.round(sampler.class_probs, 3))
drawn = profile.labels()[sampler.draw(10_000)]
print("empirical:", np.round(np.bincount(drawn, minlength=10) / 10_000, 3))

# Mixup blends whole inputs; the label becomes two-hot with mass lam on the first class.
x_head, x_tail = np.zeros((1, 8, 8)), np.ones((1, 8, 8))
m = mixup(x_head, 0, x_tail, 9, lam=0.7, num_classes=10)
print("mixup label:", m.soft_label)

# CutMix pastes a box; lam is recomputed from the pasted area after clipping.
c = cutmix(x_head, 0, x_tail, 9, lam_target=0.75, num_classes=10, center=(1, 1))
print(f"cutmix box {c.box}, effective lam {c.lam:.4f}, label mass on class 0 {c.soft_label[0]:.4f}")

# A training batch pairs ID sample p with anti-sampled sample p and draws one lam per pair.
rng = np.random.default_rng(0)
batch = build_training_batch(
    (rng.standard_normal((4, 1, 4, 8)), np.array([0, 0, 1, 2])),
    (rng.standard_normal((4, 1, 4, 8)), np.array([9, 8, 9, 7])),
    alpha=0.2,
    seed=1,
    num_classes=10,
)
print("stacked forward rows [ID, anti, mixup, cutmix]:", batch.stacked_inputs().shape)
for mix in batch.mixed_mixup:
    print(f"  pair {mix.src_i}->{mix.src_j}: lam {mix.lam:.3f}")
