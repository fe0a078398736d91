"""Command-line entry point: ``bcnn <command> ...``.

Exit codes: 0 success, 1 check failure, 2 configuration or contract error,
3 I/O error.  Results go to stdout as tab-separated lines; diagnostics go
to stderr.
"""
from __future__ import annotations

import argparse
import sys
from pathlib import Path
from typing import Dict, Optional, Tuple

import numpy as np

from . import data_io as D
from . import gradcheck as G
from . import train as TR
from .config import RunConfig
from .errors import ConfigError, ContractError, FormatError, ShapeError
from .invert import LayerClassifierBank, invert_category, train_layer_bank
from .tensor import Tensor

EXIT_OK, EXIT_CHECK, EXIT_CONFIG, EXIT_IO = 0, 1, 2, 3
CONFIG_KEY = "meta/config"


def out(*fields) -> None:
    print("\t".join(str(f) for f in fields), flush=True)


def err(msg: str) -> None:
    print(msg, file=sys.stderr, flush=True)


def _read_text(path) -> str:
    with open(path, "r", encoding="utf-8") as fh:
        return fh.read()


def _check_writable(path) -> None:
    parent = Path(path).resolve().parent
    if not parent.is_dir():
        raise OSError(f"output directory does not exist: {parent}")


# --- checkpoints -----------------------------------------------------------

def model_entries(cfg: RunConfig, model: TR.Model, bank: Optional[LayerClassifierBank]) -> Dict:
    entries = {CONFIG_KEY: D.text_to_tensor(cfg.to_text())}
    for name, p in model.params.items():
        entries[name] = p.data
    if bank is not None:
        for tap, head in bank.heads.items():
            entries[f"invert/{tap}/W"] = head.W.data
            entries[f"invert/{tap}/b"] = head.bias.data
    return entries


def load_checkpoint(path) -> Tuple[RunConfig, TR.Model, Optional[LayerClassifierBank]]:
    entries = D.checkpoint_load(path)
    if CONFIG_KEY not in entries:
        raise ConfigError(f"{path}: checkpoint has no embedded config")
    cfg = RunConfig.from_text(D.tensor_to_text(entries[CONFIG_KEY]))
    mcfg = cfg.model()
    model = TR.Model.create(mcfg, cfg.seed)
    for name, arr in entries.items():
        if name == CONFIG_KEY or name.startswith("invert/"):
            continue
        if name in model.params and model.params[name].shape != arr.shape:
            raise ConfigError(f"checkpoint entry {name} has shape {arr.shape}, "
                              f"config expects {model.params[name].shape}")
        model.params[name] = Tensor(np.array(arr, dtype=np.float64),
                                    requires_grad=name != "encoder/gamma")
    required = ["head/W", "head/b"] + [n for n in model.params if n.startswith("backbone/")]
    if mcfg.encoder in ("netvlad", "netfv", "netbovw"):
        required += ["encoder/mu", "encoder/gamma"] + ([] if mcfg.tied else ["encoder/w", "encoder/b"])
    if mcfg.rank:
        required.append("proj/P")
    missing = [n for n in required if n not in entries]
    if missing:
        raise ConfigError(f"checkpoint is missing entries required by its config: {missing}")
    if model.params["head/W"].shape != (mcfg.descriptor_dim, mcfg.num_classes):
        raise ConfigError(f"head shape {model.params['head/W'].shape} does not match config")
    heads = {}
    for tap in cfg.invert_layers:
        if f"invert/{tap}/W" in entries:
            heads[tap] = TR.SoftmaxHead(Tensor(entries[f"invert/{tap}/W"]),
                                        Tensor(entries[f"invert/{tap}/b"]))
    bank = LayerClassifierBank(heads, mcfg.num_classes) if heads else None
    return cfg, model, bank


def _split_data(data_dir, split: str, num_classes: Optional[int] = None,
                required: bool = True) -> Optional[D.Manifest]:
    path = Path(data_dir) / f"{split}.txt"
    if not path.exists():
        if required:
            raise OSError(f"manifest not found: {path}")
        return None
    return D.manifest_load(path, num_classes)


# --- commands --------------------------------------------------------------

def cmd_synth(args) -> int:
    spec = D.SyntheticTextureSpec.from_text(_read_text(args.spec))
    if args.seed is not None:
        spec.seed = args.seed
    spec.validate()
    out("seed", spec.seed)
    manifests = D.synth_generate(spec, args.out)
    for split, m in manifests.items():
        out("images", split, len(m))
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = RunConfig.load(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    train_m = _split_data(args.data, "train")
    K = cfg.num_classes or train_m.num_classes
    if K < 1:
        raise ConfigError("training manifest is empty")
    cfg.num_classes = K
    cfg.validate(K)
    train_m = _split_data(args.data, "train", K)
    val_m = _split_data(args.data, "val", K, required=False)
    _check_writable(args.out)
    out("seed", cfg.seed)
    images = train_m.load_images()
    labels = np.asarray(train_m.labels)
    val = (val_m.load_images(), np.asarray(val_m.labels)) if val_m is not None and len(val_m) else None
    model = TR.Model.create(cfg.model(), cfg.seed)
    TR.train_two_step(model, (images, labels), cfg.train(), val=val, emit=out)
    bank = None
    if cfg.invert_layers:
        err("fitting per-layer inversion classifiers")
        bank = train_layer_bank(model.params, model.cfg.backbone, images, labels,
                                cfg.invert_layers, K)
    D.checkpoint_save(model_entries(cfg, model, bank), args.out)
    err(f"checkpoint written to {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg, model, _ = load_checkpoint(args.ckpt)
    if args.confusion is not None and args.confusion < 0:
        raise ConfigError("--confusion must be >= 0")
    K = model.cfg.num_classes
    test_m = _split_data(args.data, "test", K)
    train_m = _split_data(args.data, "train", K) if args.svm else None
    out("seed", cfg.seed)
    svms = None
    if args.svm:
        Xtr = train_m.load_images()
        ytr = np.asarray(train_m.labels)
        if cfg.flip_augment:
            Xtr, ytr = TR.augment_flip(Xtr, ytr)
        svms = TR.svm_fit_calibrated(model.descriptors(Xtr), ytr, cfg.c_svm, loss=cfg.svm_loss,
                                     num_classes=K)
    rep = TR.evaluate(model, test_m.load_images(), test_m.labels, svms=svms,
                      flip_avg=args.flip_avg, top_n=args.confusion or 0)
    out("accuracy", f"{rep.accuracy:.6f}")
    for (i, j), c in rep.confused:
        out("confused", i, j, c)
    return EXIT_OK


def cmd_extract(args) -> int:
    cfg, model, _ = load_checkpoint(args.ckpt)
    image = D.ppm_load(args.image)
    _check_writable(args.out)
    out("seed", cfg.seed)
    d = model.descriptor_multiscale(image)
    D.tensor_save(d, args.out)
    out("dims", d.shape[0])
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    seed = args.seed or 0
    out("seed", seed)
    rows = G.run_suite(seed, emit=out)
    failed = [r.name for r in rows if not r.passed]
    if failed:
        err(f"gradient check failed for: {', '.join(failed)}")
        return EXIT_CHECK
    return EXIT_OK


def cmd_invert(args) -> int:
    cfg, model, bank = load_checkpoint(args.ckpt)
    if args.seed is not None:
        cfg.seed = args.seed
    if bank is None:
        raise ConfigError(f"{args.ckpt}: checkpoint carries no per-layer classifiers")
    K = model.cfg.num_classes
    if not 0 <= args.class_ < K:
        raise ConfigError(f"class {args.class_} out of range [0, {K})")
    icfg = cfg.inversion(args.gamma, args.beta, args.max_iters, args.size)
    bank.check(icfg.layers)
    _check_writable(args.out)
    out("seed", cfg.seed)
    res = invert_category(model.params, model.cfg.backbone, bank, args.class_, icfg)
    D.ppm_save(res.image, args.out)
    lines = [f"# gamma={icfg.gamma:g}\tbeta={icfg.beta:g}", "iter\tobjective"]
    lines += [f"{i}\t{v:.12g}" for i, v in enumerate(res.trace)]
    trace_path = Path(args.out).with_suffix(".trace.tsv")
    trace_path.write_text("\n".join(lines) + "\n")
    for line in lines:
        print(line)
    return EXIT_OK


def cmd_kmeans_init(args) -> int:
    feats = D.tensor_load(args.features)
    if feats.ndim == 1:
        feats = feats[:, None]
    feats = feats.reshape(-1, feats.shape[-1])
    seed = args.seed or 0
    if args.k < 1 or args.k > len(feats):
        raise ConfigError(f"k={args.k} needs between 1 and {len(feats)} samples")
    _check_writable(args.out)
    out("seed", seed)
    from .encoders import kmeans_init
    cb = kmeans_init(feats, args.k, seed=seed)
    w, b = cb.derived()
    outp = Path(args.out)
    D.tensor_save(cb.mu.data, outp)
    stem = outp.with_suffix("")
    D.tensor_save(w, f"{stem}.w.btns")
    D.tensor_save(b, f"{stem}.b.btns")
    D.tensor_save(np.array([cb.gamma]), f"{stem}.gamma.btns")
    out("gamma", repr(cb.gamma))
    return EXIT_OK


# --- parser ----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bcnn", description="Orderless-pooling CNN toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate the synthetic texture benchmark")
    s.add_argument("--spec", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", help="two-step training from a run config")
    s.add_argument("--config", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="accuracy on the test split")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--svm", action="store_true", help="calibrated one-vs-all SVMs fit on the train split")
    s.add_argument("--flip-avg", action="store_true")
    s.add_argument("--confusion", type=int, metavar="N")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("extract", help="normalized descriptor of one image")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--image", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_extract)

    s = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("invert", help="synthesize a category pre-image")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--class", dest="class_", type=int, required=True)
    s.add_argument("--gamma", type=float, default=1e-8)
    s.add_argument("--beta", type=float, default=2.0)
    s.add_argument("--out", required=True)
    s.add_argument("--max-iters", type=int)
    s.add_argument("--size", type=int, default=64)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_invert)

    s = sub.add_parser("kmeans-init", help="k-means codebook from a feature tensor")
    s.add_argument("--features", required=True)
    s.add_argument("--k", type=int, required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_kmeans_init)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    try:
        return args.func(args)
    except (ConfigError, ContractError, ShapeError) as exc:
        err(f"error: {exc}")
        return EXIT_CONFIG
    except (OSError, FormatError) as exc:
        err(f"I/O error: {exc}")
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
