"""Label smoothing, MixUp and CutMix on a pair of images."""

import numpy as np

from ood_tricks.augment import (
    MixConfig, RandAugConfig, SoftLabelPair, apply_mix_policy, cutmix, mixup, rand_augment, smooth_labels,
)
from ood_tricks.rng import make_rng
from ood_tricks.synthgen import GenerationConfig, generate_dataset

ds = generate_dataset(GenerationConfig(n_domains=2, samples_per_cell=1))
a, b = ds[0], ds[1]
la = smooth_labels(a.fine_label, a.coarse_label, 0.1, ds.n_fine, ds.n_coarse)
lb = smooth_labels(b.fine_label, b.coarse_label, 0.1, ds.n_fine, ds.n_coarse)
print("smoothed fine target of a:", np.round(la.fine, 4))

img, lab = mixup(a.image, la, b.image, lb, 0.3)
print("mixup 0.3 -> fine target", np.round(lab.fine, 4))

# patch side is sqrt(1 - gamma) of the image; clipping at the border shrinks the area
for center in [(16, 16), (0, 0)]:
    _, lab, area = cutmix(a.image, la, b.image, lb, 0.5, center=center)
    print(f"cutmix gamma 0.5 centred at {center}: pasted area {area:.4f}")

# batch policy: one coin decides CutMix or MixUp for the whole batch
rng = make_rng(0)
labels = SoftLabelPair(np.eye(8)[ds.fine_labels[:8]], np.eye(4)[ds.coarse_labels[:8]])
for _ in range(4):
    out = apply_mix_policy(ds.images[:8], labels.fine, labels.coarse, MixConfig(), rng)
    print(out.provenance.op, round(out.provenance.coefficient, 3))

_, ops = rand_augment(a.image, RandAugConfig(), rng, return_ops=True)
print("rand_augment applied", [(name, round(m, 2)) for name, m, _ in ops])
