"""Epistemic uncertainty from Monte-Carlo dropout, and why it matters
when fusing pseudo-labels from several models.

Two copies of the same trained network differ only in dropout rate. The
high-dropout copy produces scattered predictions across stochastic forward
passes; its sample variance (summed over the volume) is large, so its
reciprocal confidence is small, and the uncertainty-weighted fusion all but
ignores it. Uniform fusion, by contrast, lets the unreliable model drag the
fused label down.

Run:  python3 demos/04_mc_dropout_uncertainty.py
"""

import dataclasses

import numpy as np

from voxcot import fusion
from voxcot.losses import dsc
from voxcot.network import ArchitectureDescriptor, ViewModel
from voxcot.rng import RngStream
from voxcot.training import TrainConfig, train_stage1
from voxcot.views import identity

extent = 16
gen = np.random.default_rng(8)
image = gen.standard_normal((extent,) * 3).astype(np.float32) * 0.3
label = np.zeros((extent,) * 3, np.int16)
label[5:11, 4:12, 6:12] = 1
image += 1.5 * (label > 0)

desc = ArchitectureDescriptor(base_channels=4, depth=1, stem_kernel=(3, 3, 3),
                              stem_stride=1, dropout_p=0.1)
model = ViewModel.build(desc, identity(), RngStream(8).child("model", 0))
cfg = TrainConfig(patch_size=8, batch_labeled=2, stage1_iters=120,
                  stage2_iters=1, mc_samples=2)
train_stage1([model], [(image, label)], cfg, RngStream(8))

# same weights, two dropout rates
reliable = model
noisy = ViewModel.build(dataclasses.replace(desc, dropout_p=0.6), identity(),
                        RngStream(8).child("model", 1))
for name, p in noisy.parameters.items():
    p.data[...] = reliable.parameters[name].data

x = image[None, None]
K = 10
reports = []
means = []
for tag, m in (("dropout 0.1", reliable), ("dropout 0.6", noisy)):
    samples, mean = fusion.mc_sample_predictions(m, x, K, RngStream(99))
    rep = fusion.epistemic_uncertainty(samples[:, 0], view_index=len(reports))
    reports.append(rep)
    means.append(mean[0])
    d = dsc(np.argmax(mean[0], axis=0), label, 1)
    print(f"{tag}: volume-summed variance {rep.scalar_uncertainty:10.4f}  "
          f"confidence {rep.confidence:8.4f}  MC-mean DSC {d:.3f}")

confs = [r.confidence for r in reports]
w = np.array(confs) / np.sum(confs)
print(f"\nfusion weights from confidence: reliable {w[0]:.3f}, noisy {w[1]:.3f}")

# fuse for a hypothetical third view (leave-one-out keeps both contributors)
three_means = [means[0], means[1], means[0]]
for mode in ("ulf", "uniform"):
    pl = fusion.fuse_pseudo_label(2, three_means, confs + [confs[0]], mode=mode)
    d = dsc(np.argmax(pl.soft_label, axis=0), label, 1)
    wtxt = ", ".join(f"view{int(i)} {w:.3f}" for i, w in pl.weights)
    print(f"pseudo-label for view 2 under {mode:7s}: DSC {d:.3f} ({wtxt})")
print("\nuncertainty weighting keeps the fused label close to the reliable")
print("model; uniform averaging splits the difference with the noisy one.")
