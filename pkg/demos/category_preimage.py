"""Train per-layer bilinear classifiers on a small texture set, then synthesize
an image that every layer assigns to a chosen class.

Run: python demos/category_preimage.py [class] [out.ppm]
"""
import sys

from bcnn import data_io as D
from bcnn import invert as I
from bcnn.backbone import BackboneConfig, backbone_init

target = int(sys.argv[1]) if len(sys.argv) > 1 else 0
out = sys.argv[2] if len(sys.argv) > 2 else "preimage.ppm"

spec = D.SyntheticTextureSpec(num_classes=4, image_size=32, n_train=30, n_val=0, n_test=0, seed=0)
X, y = D.synth_arrays(spec)["train"]
bcfg = BackboneConfig()
params = backbone_init(bcfg, seed=0)
layers = ("t1", "t2", "t3", "t4")
bank = I.train_layer_bank(params, bcfg, X, y, layers, spec.num_classes)

cfg = I.InversionConfig(layers=layers, max_iters=150, height=48, width=48, gamma=1e-4)
res = I.invert_category(params, bcfg, bank, target, cfg)
print("objective", f"{res.trace[0]:.4g} -> {res.trace[-1]:.4g} in {len(res.trace) - 1} steps")
for layer, p in I.target_posteriors(res.image, params, bcfg, bank, target, layers).items():
    print(f"  {layer}: posterior of class {target} = {p:.4f}")
print("total variation of the result", round(I.tv_prior(res.image).item(), 4))
D.ppm_save(res.image, out)
print("wrote", out)
