"""Compare an average-pooled baseline with bilinear pooling on synthetic textures.

The textures share their colour palette, so only second-order statistics of
local features separate the classes.  Takes a couple of minutes on one core.

Run: python demos/texture_benchmark.py [seed]
"""
import sys
import time

from bcnn import data_io as D
from bcnn import train as TR

seed = int(sys.argv[1]) if len(sys.argv) > 1 else 0
spec = D.SyntheticTextureSpec(num_classes=8, image_size=64, n_train=100, n_val=20, n_test=50, seed=seed)
data = D.synth_arrays(spec)
(Xtr, ytr), (Xte, yte) = data["train"], data["test"]
print(f"{len(Xtr)} training and {len(Xte)} test images, {spec.num_classes} classes")

for encoder, extra in [("fc-baseline", {}), ("bilinear", {}), ("bilinear", {"rank": 8})]:
    t0 = time.time()
    model = TR.Model.create(TR.ModelConfig(num_classes=8, encoder=encoder, **extra), seed=seed)
    cfg = TR.TrainConfig(epochs_head=300, epochs_finetune=0, seed=seed)
    TR.train_two_step(model, (Xtr, ytr), cfg)
    rep = TR.evaluate(model, Xte, yte, flip_avg=True, top_n=2)
    name = encoder + (f" rank {extra['rank']}" if extra else "")
    print(f"{name:18s} dim {model.cfg.descriptor_dim:5d}  test acc {rep.accuracy:.3f}  "
          f"most confused {rep.confused}  ({time.time() - t0:.0f}s)")
