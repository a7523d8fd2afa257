"""Overfit a tiny segmentation network on one synthetic volume.

Shows the supervised half of the pipeline in isolation: foreground-biased
patch sampling, soft Dice loss, SGD with momentum, and the per-iteration
record stream. Takes a few seconds on a laptop CPU.

Run:  python3 demos/03_train_tiny_network.py
"""

import dataclasses

import numpy as np

from voxcot.losses import dsc
from voxcot.network import ArchitectureDescriptor, ViewModel
from voxcot.rng import RngStream
from voxcot.tensor import no_grad
from voxcot.training import TrainConfig, train_stage1
from voxcot.views import identity

extent = 16
gen = np.random.default_rng(4)
image = gen.standard_normal((extent,) * 3).astype(np.float32) * 0.3
label = np.zeros((extent,) * 3, np.int16)
label[5:11, 4:12, 6:12] = 1
image += 1.5 * (label > 0)
print(f"one {extent}^3 volume, {int(label.sum())} foreground voxels "
      f"({100 * label.mean():.1f}%)")

desc = ArchitectureDescriptor(base_channels=4, depth=1,
                              stem_kernel=(3, 3, 3), stem_stride=1)
model = ViewModel.build(desc, identity(), RngStream(4).child("model", 0))
n_params = sum(int(np.prod(p.data.shape)) for p in model.parameters.values())
print(f"encoder-decoder with {n_params} parameters")

cfg = TrainConfig(patch_size=8, batch_labeled=2, stage1_iters=150,
                  stage2_iters=1, mc_samples=2)
print(f"training {cfg.stage1_iters} iterations at lr {cfg.stage1_lr} ...")
records = train_stage1([model], [(image, label)], cfg, RngStream(4))

for r in records[:: len(records) // 6]:
    print(f"  iter {r.iteration:4d}  dice loss {r.l_sup:.3f}")

with no_grad():
    probs = model.predict_through_view(image[None, None], "eval").data[0]
hard = np.argmax(probs, axis=0)
print(f"final whole-volume DSC: {dsc(hard, label, 1):.3f}")
print("(patch training, whole-volume eval: the model generalizes across")
print(" positions because convolutions are translation-equivariant)")
