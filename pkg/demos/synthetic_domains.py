"""Render the synthetic dataset and look at how domains differ.

Every fine class is a (shape, texture) pair and shares its shape with the
other members of its coarse group. Domains only change the background.
"""

import numpy as np

from ood_tricks.synthgen import GenerationConfig, generate_dataset, split_by_domain

ds = generate_dataset(GenerationConfig(samples_per_cell=4))
print(len(ds), "images of shape", ds.images.shape[1:])

for spec in ds.class_specs:
    print(f"fine {spec.fine_id}: {spec.shape_kind:8s} {spec.texture_kind:9s} -> coarse {spec.coarse_id}")

for dom in ds.domains:
    imgs = ds.images[ds.domain_ids == dom.domain_id]
    print(f"domain {dom.domain_id} ({dom.background_kind}): mean {imgs.mean():.3f} std {imgs.std():.3f}")

# train on six backgrounds, hold out the last two
train, test = split_by_domain(ds, range(6), [6, 7])
print("train", len(train), "held-out", len(test))

# a crude text view of one held-out image, brightness quantised to 4 levels
img = test.images[0].mean(axis=-1)
for row in img[::2]:
    print("".join(" .:#"[min(3, int(v * 4))] for v in row))
