"""
The two networks: box-prompted ANet and prompt-free PNet
========================================================

ANet turns an image plus a bounding box into a soft mask (it produces
the pseudo labels for the box-only training pool); PNet is the actual
camouflaged-object detector and sees no boxes. Both share the same
small multi-scale encoder-decoder; ANet adds a second input branch fed
with the box-masked image and a frequency (wavelet) pathway.
"""
import numpy as np

from nsl.data import synth_camo
from nsl.losses import LossSpec, composite_loss_b
from nsl.metrics import iou_score
from nsl.model import (CamoNet, T, Tape, anet_forward, make_proposal,
                       pnet_forward, pnet_forward_t)
from nsl.numerics import adam_step, sigmoid

s = synth_camo(seed=9, size=64, difficulty=0.5)

anet = CamoNet("anet", seed=1)
pnet = CamoNet("pnet", seed=2)
for net in (anet, pnet):
    n = sum(p.value.size for p in net.parameters())
    print(f"{net.kind}: {len(net.params)} tensors, {n/1e6:.2f}M parameters")

# the box prompt zeroes the image copy fed to the second branch
masked = make_proposal(s.image, s.box)
print(f"proposal branch mass {float(np.abs(masked).sum()):.0f} "
      f"vs full image {float(np.abs(s.image).sum()):.0f}")

pa = anet_forward(anet, s.image, s.box)
pp = pnet_forward(pnet, s.image)
print("head logits, fine to coarse:",
      [tuple(np.shape(h)[-2:]) for h in (pp.p1, pp.p2, pp.p3, pp.p4, pp.m4)])
print(f"untrained: anet IoU {iou_score(sigmoid(pa.p1), s.gt):.3f}, "
      f"pnet IoU {iou_score(sigmoid(pp.p1), s.gt):.3f}")

# sixty optimizer steps on this one sample; the loss should fall fast
spec = LossSpec(kind="nc", q_early=2.0, q_late=2.0, switch_epoch=0)
x = s.image[None]
gt = s.gt[None]
for step in range(60):
    tape = Tape()
    outs = pnet_forward_t(pnet, tape, T(x))
    vals, grads = composite_loss_b([o.v for o in outs], gt, spec, epoch=0)
    for o, gr in zip(outs, grads):
        o.g = gr
    tape.backward()
    for p in pnet.parameters():
        adam_step(p, 1e-3, t=step + 1)
    pnet.zero_grads()
    if step % 20 == 0 or step == 59:
        print(f"step {step:2d}: loss {float(vals.mean()):.4f}")

pred = sigmoid(pnet_forward(pnet, s.image).p1)
print(f"after 60 steps: IoU {iou_score(pred, s.gt):.3f}")
