"""Command line interface.

Subcommands: synth, train, eval, infer, verify, perturb. Every command is
deterministic given (config, seed), writes its effective configuration into
the output directory, and uses the exit-code convention:
0 ok, 1 property failure, 2 config error, 3 I/O error, 4 numerical divergence.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import netpbm, synth
from .errors import BadParameter, ConfigError, DivergedLoss, DupscopeError, IoError
from .metrics import evaluate_maps
from .model import (
    ModelConfig,
    PairModel,
    evaluate_loss_and_masks,
    load_model,
    resume_optimizer,
    train,
)
from .nn import _interp_matrix
from .tensor import Tensor
from .verify import SABOTAGE_MODES, run_property_suite

EXIT_OK = 0
EXIT_PROPERTY_FAILURE = 1
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_DIVERGED = 4


def _write_json(path, payload):
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)


def _echo_config(out_dir, payload):
    os.makedirs(out_dir, exist_ok=True)
    _write_json(os.path.join(out_dir, "effective_config.json"), payload)


def _parse_task_mix(text):
    mix = {}
    for part in text.split(","):
        name, _, value = part.partition("=")
        name = name.strip()
        if name not in synth.TASKS:
            raise ConfigError(f"unknown task '{name}' in task mix")
        mix[name] = float(value)
    if not mix or sum(mix.values()) <= 0:
        raise ConfigError("task mix must contain positive weights")
    return mix


def _load_model_config(args):
    base = {}
    if getattr(args, "config", None):
        try:
            with open(args.config) as fh:
                base = json.load(fh)
        except OSError as exc:
            raise IoError(f"cannot read config: {exc}") from exc
    for key in (
        "image_size", "patch_size", "embed_dim", "encoder_depth", "heads",
        "ssm_state_dim", "sigma", "alpha", "topk", "lr", "epochs",
        "batch_size", "weight_decay", "seed", "grad_clip",
    ):
        value = getattr(args, key, None)
        if value is not None:
            base[key] = value
    return ModelConfig.from_dict(base)


def _resize_map(prob, out_h, out_w):
    """Bilinear resize of a [H,W] map to any target size (plain numpy)."""
    mr = _interp_matrix(out_h, prob.shape[0], np.float64)
    mc = _interp_matrix(out_w, prob.shape[1], np.float64)
    return mr @ prob @ mc.T


def _minmax_byte_map(x):
    lo, hi = float(x.min()), float(x.max())
    if hi - lo < 1e-12:
        return np.zeros_like(x)
    return (x - lo) / (hi - lo)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_synth(args):
    mix = _parse_task_mix(args.task_mix)
    kinds = tuple(k.strip() for k in args.base_kinds.split(","))
    for k in kinds:
        if k not in synth.BASE_KINDS:
            raise ConfigError(f"unknown base kind '{k}'")
    manifest = synth.build_dataset(
        args.out,
        count=args.count,
        seed=args.seed,
        image_size=args.image_size,
        task_mix=mix,
        pristine_frac=args.pristine_frac,
        base_kinds=kinds,
        identity_spec=args.identity_spec,
    )
    _echo_config(args.out, {k: v for k, v in manifest.items() if k != "samples"})
    print(f"wrote {manifest['count']} samples to {args.out}")
    return EXIT_OK


def _samples_to_tuples(samples, dtype):
    return [s.as_training_tuple(dtype) for s in samples]


def _split_train_val(samples, val_frac, seed):
    order = np.random.default_rng((seed, 31337)).permutation(len(samples))
    n_val = int(round(len(samples) * val_frac))
    val_idx = set(order[:n_val].tolist())
    tr = [s for i, s in enumerate(samples) if i not in val_idx]
    val = [s for i, s in enumerate(samples) if i in val_idx]
    return tr, val


def cmd_train(args):
    samples, _ = synth.load_dataset(args.data)
    if args.resume:
        model, extras = load_model(args.resume)
        cfg = model.cfg
        if args.epochs is not None:
            cfg.epochs = args.epochs
        optimizer = resume_optimizer(model, extras)
        start_epoch = (extras["epoch"] or 0) + 1
    else:
        cfg = _load_model_config(args)
        model = PairModel(cfg)
        optimizer = None
        start_epoch = 0
    dtype = cfg.np_dtype
    if args.val_data:
        val_samples, _ = synth.load_dataset(args.val_data)
        tr = _samples_to_tuples(samples, dtype)
        val = _samples_to_tuples(val_samples, dtype)
    else:
        tr_s, val_s = _split_train_val(samples, args.val_frac, cfg.seed)
        tr = _samples_to_tuples(tr_s, dtype)
        val = _samples_to_tuples(val_s, dtype)
    os.makedirs(args.out, exist_ok=True)
    _echo_config(args.out, {"model": cfg.to_dict(), "data": args.data, "val_frac": args.val_frac})
    ckpt_path = os.path.join(args.out, "model.btnt")
    log_path = os.path.join(args.out, "train_log.jsonl")
    result = train(
        model,
        tr,
        val,
        checkpoint_path=ckpt_path,
        log_path=log_path,
        start_epoch=start_epoch,
        optimizer=optimizer,
    )
    last = result.history[-1] if result.history else {}
    print(
        f"trained {result.epochs_run} epochs"
        + (f", val_loss={last.get('val_loss'):.4f}" if val else "")
        + f", checkpoint at {ckpt_path}"
    )
    return EXIT_OK


def _evaluate_checkpoint(model, samples, threshold, min_area_frac, perturbation=None, noise_seed=0):
    dtype = model.cfg.np_dtype
    preds, gts = [], []
    for idx, sample in enumerate(samples):
        x1, x2, m1, m2 = sample.as_training_tuple(np.float64)
        if perturbation is not None:
            kind, level = perturbation
            rng1 = np.random.default_rng((noise_seed, idx, 0))
            rng2 = np.random.default_rng((noise_seed, idx, 1))
            x1 = synth.perturb(x1, kind, level, rng1)
            x2 = synth.perturb(x2, kind, level, rng2)
        out = model.forward(
            Tensor(x1[None].astype(dtype)), Tensor(x2[None].astype(dtype))
        )
        preds.extend([out["o1"].numpy()[0, 0], out["o2"].numpy()[0, 0]])
        gts.extend([m1[0], m2[0]])
    pixel, image = evaluate_maps(preds, gts, threshold, min_area_frac)
    return pixel, image, preds


def cmd_eval(args):
    if not args.self_test and not args.checkpoint:
        raise ConfigError("eval requires --checkpoint (or --self-test)")
    samples, _ = synth.load_dataset(args.data)
    if args.self_test:
        preds = []
        gts = []
        for s in samples:
            preds.extend([s.mask1[0], s.mask2[0]])
            gts.extend([s.mask1[0], s.mask2[0]])
        pixel, image = evaluate_maps(preds, gts, args.threshold, args.min_area_frac)
        model_cfg = None
    else:
        model, _ = load_model(args.checkpoint)
        model_cfg = model.cfg.to_dict()
        pixel, image, preds = _evaluate_checkpoint(
            model, samples, args.threshold, args.min_area_frac
        )
        if args.save_masks:
            mask_dir = os.path.join(args.out, "masks")
            os.makedirs(mask_dir, exist_ok=True)
            for i, p in enumerate(preds):
                netpbm.write_pgm(os.path.join(mask_dir, f"pred_{i:05d}.pgm"), p)
    report = {
        "pixel": pixel.to_dict(),
        "image": image.to_dict(),
        "data": args.data,
        "threshold": args.threshold,
        "min_area_frac": args.min_area_frac,
    }
    _echo_config(args.out, {"model": model_cfg, "data": args.data})
    _write_json(os.path.join(args.out, "report.json"), report)
    print(f"pixel MCC {pixel.mcc:.4f}, image MCC {image.mcc:.4f}")
    return EXIT_OK


def cmd_infer(args):
    model, _ = load_model(args.checkpoint)
    size = model.cfg.image_size
    img1 = netpbm.read_ppm(args.img1)
    if args.img2:
        img2 = netpbm.read_ppm(args.img2)
        orig = (img1.shape[1:], img2.shape[1:])
    else:
        # single-image mode: split into a left/right pseudo-pair
        w = img1.shape[2]
        img1, img2 = img1[:, :, : w // 2], img1[:, :, w // 2 :]
        orig = (img1.shape[1:], img2.shape[1:])
    x1 = np.stack([_resize_map(ch, size, size) for ch in img1])
    x2 = np.stack([_resize_map(ch, size, size) for ch in img2])
    dtype = model.cfg.np_dtype
    out = model.forward(
        Tensor(np.clip(x1, 0, 1)[None].astype(dtype)),
        Tensor(np.clip(x2, 0, 1)[None].astype(dtype)),
    )
    os.makedirs(args.out, exist_ok=True)
    _echo_config(args.out, {"model": model.cfg.to_dict(), "img1": args.img1, "img2": args.img2})
    for name, key, dims in (("mask1", "o1", orig[0]), ("mask2", "o2", orig[1])):
        prob = out[key].numpy()[0, 0]
        prob = _resize_map(prob, dims[0], dims[1])
        netpbm.write_pgm(os.path.join(args.out, f"{name}.pgm"), prob)
    if args.dump_affinity:
        b1, b2 = out["bundles"]
        for tag, bundle in (("self1", b1), ("self2", b2)):
            heat = _minmax_byte_map(bundle.map2d.numpy()[0, 0])
            netpbm.write_pgm(os.path.join(args.out, f"affinity_{tag}.pgm"), heat)
        for tag, bundle in (("cross1", b1), ("cross2", b2)):
            # strongest mutual match per query token, on the token grid
            strength = bundle.final.numpy()[0].max(axis=1)
            g = int(np.sqrt(strength.size))
            heat = _minmax_byte_map(strength.reshape(g, g))
            netpbm.write_pgm(os.path.join(args.out, f"affinity_{tag}.pgm"), heat)
    print(f"wrote masks to {args.out}")
    return EXIT_OK


def cmd_verify(args):
    results = run_property_suite(seed=args.seed, trials=args.trials, sabotage=args.sabotage)
    payload = {
        "seed": args.seed,
        "trials": args.trials,
        "sabotage": args.sabotage,
        "families": results,
    }
    if args.out:
        _write_json(args.out, payload)
    all_passed = all(r["passed"] for r in results)
    for r in results:
        status = "pass" if r["passed"] else "FAIL"
        print(f"{status}  {r['family']:28s} max violation {r['max_violation']:.3e}")
    return EXIT_OK if all_passed else EXIT_PROPERTY_FAILURE


def cmd_perturb(args):
    samples, _ = synth.load_dataset(args.data)
    model, _ = load_model(args.checkpoint)
    levels = [float(v) for v in args.levels.split(",")]
    curve = []
    for level in levels:
        pixel, image, _ = _evaluate_checkpoint(
            model,
            samples,
            args.threshold,
            args.min_area_frac,
            perturbation=(args.kind, level),
            noise_seed=args.seed,
        )
        curve.append({"level": level, "pixel_mcc": pixel.mcc, "image_mcc": image.mcc})
        print(f"{args.kind} level {level}: pixel MCC {pixel.mcc:.4f}")
    payload = {
        "kind": args.kind,
        "levels": levels,
        "curve": curve,
        "checkpoint": args.checkpoint,
        "data": args.data,
        "proxy_note": "block_quant is a block-mean quantization proxy, not a real codec"
        if args.kind == "block_quant"
        else None,
    }
    os.makedirs(args.out, exist_ok=True)
    _echo_config(args.out, {"model": model.cfg.to_dict(), "kind": args.kind, "levels": levels})
    _write_json(os.path.join(args.out, "robustness.json"), payload)
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def build_parser():
    parser = argparse.ArgumentParser(prog="dupscope", description=__doc__)
    sub = parser.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("synth", help="Generate a synthetic forgery dataset.")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--image-size", type=int, default=64)
    p.add_argument("--task-mix", default="edd=1.0", help="e.g. edd=0.6,idd=0.2,cstd=0.2")
    p.add_argument("--pristine-frac", type=float, default=0.0)
    p.add_argument("--identity-spec", action="store_true",
                   help="no patch augmentation (hard-blend identity paste)")
    p.add_argument("--base-kinds", default=",".join(synth.BASE_KINDS))
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("train", help="Train a model on a synthesized dataset.")
    p.add_argument("--data", required=True)
    p.add_argument("--val-data")
    p.add_argument("--val-frac", type=float, default=0.1)
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="JSON file with model configuration")
    p.add_argument("--resume", help="checkpoint to continue from")
    for key, typ in (
        ("image_size", int), ("patch_size", int), ("embed_dim", int),
        ("encoder_depth", int), ("heads", int), ("ssm_state_dim", int),
        ("sigma", float), ("alpha", float), ("topk", int), ("lr", float),
        ("epochs", int), ("batch_size", int), ("weight_decay", float),
        ("seed", int), ("grad_clip", float),
    ):
        p.add_argument(f"--{key.replace('_', '-')}", dest=key, type=typ, default=None)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="Evaluate a checkpoint; writes a JSON report.")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--out", required=True)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--min-area-frac", type=float, default=0.001)
    p.add_argument("--save-masks", action="store_true")
    p.add_argument("--self-test", action="store_true",
                   help="score ground-truth masks as predictions (oracle check)")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("infer", help="Localize duplications in one pair (or one image).")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--img1", required=True)
    p.add_argument("--img2")
    p.add_argument("--out", required=True)
    p.add_argument("--dump-affinity", action="store_true")
    p.set_defaults(fn=cmd_infer)

    p = sub.add_parser("verify", help="Run the algebraic property suite.")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--trials", type=int, default=50)
    p.add_argument("--sabotage", choices=SABOTAGE_MODES)
    p.add_argument("--out")
    p.set_defaults(fn=cmd_verify)

    p = sub.add_parser("perturb", help="Robustness sweep over one perturbation.")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--kind", required=True,
                   choices=["brightness", "contrast", "gaussian_noise", "blur",
                            "color_reduce", "block_quant"])
    p.add_argument("--levels", required=True, help="comma-separated values")
    p.add_argument("--out", required=True)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--min-area-frac", type=float, default=0.001)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_perturb)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, BadParameter, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergedLoss as exc:
        print(f"diverged: {exc} (last good epoch {exc.last_good_epoch})", file=sys.stderr)
        return EXIT_DIVERGED
    except IoError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except FileNotFoundError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except DupscopeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PROPERTY_FAILURE


if __name__ == "__main__":
    sys.exit(main())
