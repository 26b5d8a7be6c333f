"""Command-line harness: dataset build, training, evaluation, experiments.

Commands: build-data, train, eval, ablate, sweep-rho, export-maps.
Config precedence is defaults < --config file < command-line flags, and the
fully resolved config is archived in the run directory before any compute,
so every run is reproducible from its own artifacts.

Exit status is 0 on success; failures print one machine-parsable line
``error category=<cat> message=...`` to stderr and return nonzero.
"""

import argparse
import csv
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .data import PhantomParams, build_dataset, load_manifest, load_split, \
    read_array, write_array
from .errors import ConfigError, DataError, GeoSegError
from .geometry import boundary_weights, sdm_target
from .inference import evaluate, sliding_window_infer
from .network import net_from_checkpoint
from .tensor import Tensor, no_grad
from .training import TrainConfig, config_from_dict, config_to_dict, train_loop

ABLATE_SCHEMA = "ablate_v1"
SWEEP_SCHEMA = "sweep_v1"
ABLATE_CONFIGS = ("seg", "seg+sdf", "mc", "gc", "wgc")
_MODES = {"supervised-only": "none", "mc": "mc", "gc": "gc", "wgc": "wgc"}


def _parse_extents(text):
    try:
        return tuple(int(p) for p in text.lower().split("x"))
    except ValueError:
        raise ConfigError(f"cannot parse extents {text!r}; expected e.g. 64x64")


def _parse_list(text, cast):
    try:
        return [cast(p) for p in text.split(",") if p != ""]
    except ValueError:
        raise ConfigError(f"cannot parse list {text!r}")


def _prepare_out(path, force):
    out = Path(path)
    if out.exists() and any(out.iterdir()) and not force:
        raise DataError(f"output directory {out} is not empty; pass --force "
                        "to reuse it")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _deep_merge(base, override):
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(base.get(key), dict):
            _deep_merge(base[key], value)
        else:
            base[key] = value
    return base


def _resolve_train_config(args):
    doc = config_to_dict(TrainConfig())
    if args.config:
        _deep_merge(doc, json.loads(Path(args.config).read_text()))
    if args.seed is not None:
        doc["seed"] = args.seed
        doc["network"]["seed"] = args.seed
    simple = {"t_max": args.t_max, "base_lr": args.lr,
              "lr_decay_every": args.lr_decay_every,
              "labeled_per_batch": args.labeled_per_batch,
              "unlabeled_per_batch": args.unlabeled_per_batch,
              "checkpoint_every": args.checkpoint_every,
              "momentum": args.momentum}
    for key, value in simple.items():
        if value is not None:
            doc[key] = value
    if args.crop is not None:
        doc["crop"] = list(_parse_extents(args.crop))
    if args.deterministic is not None:
        doc["deterministic"] = args.deterministic
    loss_over = {"rho": args.rho, "k": args.k, "beta": args.beta,
                 "lambda_max": args.lambda_max, "ramp_power": args.ramp_power,
                 "sign_mode": args.sign_mode}
    for key, value in loss_over.items():
        if value is not None:
            doc["loss"][key] = value
    if args.mode is not None:
        doc["loss"]["consistency"] = _MODES[args.mode]
    net_over = {"width": args.width, "depth": args.depth,
                "normalization": args.norm}
    for key, value in net_over.items():
        if value is not None:
            doc["network"][key] = value
    return config_from_dict(doc)


def _default_window(manifest, depth):
    multiple = 1 << depth
    return tuple(-(-n // multiple) * multiple for n in manifest.shape)


def _eval_window(args, manifest, net):
    window = (_parse_extents(args.window) if args.window
              else _default_window(manifest, net.config.depth))
    stride = _parse_extents(args.stride) if args.stride else window
    return window, stride


def _train_and_eval(split, cfg, run_dir, manifest, window=None, stride=None):
    result = train_loop(split, cfg, out_dir=run_dir)
    net = result.net
    window = window or _default_window(manifest, net.config.depth)
    stride = stride or window
    report = evaluate(net, split.test, window, stride, out_dir=run_dir)
    return report


def _metric_cells(report):
    agg = report.aggregate
    return [format(agg["dice"], ".17g"), format(agg["jaccard"], ".17g"),
            "" if agg["asd"] is None else format(agg["asd"], ".17g"),
            "" if agg["hd95"] is None else format(agg["hd95"], ".17g")]


# -- commands -------------------------------------------------------------


def cmd_build_data(args):
    out = _prepare_out(args.out, args.force)
    shape = _parse_extents(args.shape)
    params = PhantomParams()
    over = {}
    if args.noise_sigma is not None:
        over["noise_sigma"] = args.noise_sigma
    if args.blur_sigma is not None:
        over["blur_sigma"] = args.blur_sigma
    if args.contrast is not None:
        over["contrast"] = args.contrast
    if over:
        params = replace(params, **over)
    seed = args.seed if args.seed is not None else 0
    manifest = build_dataset(out, args.labeled, args.unlabeled, args.test,
                             shape, seed, params)
    print(f"wrote {len(manifest.records)} records to {out}")
    return 0


def cmd_train(args):
    cfg = _resolve_train_config(args)
    out = _prepare_out(args.out, args.force)
    manifest = load_manifest(args.manifest)
    split = load_split(manifest)
    result = train_loop(split, cfg, out_dir=out,
                        resume_from=args.resume_from)
    print(f"trained {cfg.t_max} steps -> {out} "
          f"(final loss {result.rows[-1][-1]:.5f})")
    return 0


def cmd_eval(args):
    out = _prepare_out(args.out, args.force)
    manifest = load_manifest(args.manifest)
    split = load_split(manifest)
    net, _, _ = net_from_checkpoint(args.checkpoint)
    window, stride = _eval_window(args, manifest, net)
    report = evaluate(net, split.test, window, stride, out_dir=out)
    agg = report.aggregate
    print(f"evaluated {report.n_cases} cases: dice={agg['dice']:.4f} "
          f"jaccard={agg['jaccard']:.4f}")
    return 0


def _member_config(base, name, seed):
    loss = base.loss
    if name == "seg":
        loss = replace(loss, consistency="none", beta=0.0)
    elif name == "seg+sdf":
        loss = replace(loss, consistency="none")
    else:
        loss = replace(loss, consistency=name)
    return replace(base, seed=seed, loss=loss,
                   network=replace(base.network, seed=seed))


def cmd_ablate(args):
    base = _resolve_train_config(args)
    out = _prepare_out(args.out, args.force)
    manifest = load_manifest(args.manifest)
    split = load_split(manifest)
    seeds = _parse_list(args.seeds, int)
    rows = []
    per_config = {name: [] for name in ABLATE_CONFIGS}
    for name in ABLATE_CONFIGS:
        for seed in seeds:
            cfg = _member_config(base, name, seed)
            run_dir = out / "runs" / f"{name.replace('+', '_')}_s{seed}"
            report = _train_and_eval(split, cfg, run_dir, manifest)
            rows.append([name, str(seed)] + _metric_cells(report)
                        + [ABLATE_SCHEMA])
            per_config[name].append(report.aggregate)
    with open(out / "ablation.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(("config", "seed", "dice", "jaccard", "asd", "hd95",
                         "schema"))
        writer.writerows(rows)
        for name in ABLATE_CONFIGS:
            aggs = per_config[name]
            cells = []
            for key in ("dice", "jaccard", "asd", "hd95"):
                vals = [a[key] for a in aggs if a[key] is not None]
                cells.append(format(float(np.mean(vals)), ".17g") if vals else "")
            writer.writerow([name, "mean"] + cells + [ABLATE_SCHEMA])
    print(f"ablation over {len(seeds)} seed(s) -> {out / 'ablation.csv'}")
    return 0


def cmd_sweep_rho(args):
    base = _resolve_train_config(args)
    out = _prepare_out(args.out, args.force)
    manifest = load_manifest(args.manifest)
    split = load_split(manifest)
    seeds = _parse_list(args.seeds, int)
    values = _parse_list(args.values, float)
    rows = []
    per_value = {v: [] for v in values}
    for value in values:
        for seed in seeds:
            cfg = _member_config(base, "wgc", seed)
            cfg = replace(cfg, loss=replace(cfg.loss, rho=value))
            run_dir = out / "runs" / f"rho{value:g}_s{seed}"
            report = _train_and_eval(split, cfg, run_dir, manifest)
            rows.append([format(value, "g"), str(seed)]
                        + _metric_cells(report) + [SWEEP_SCHEMA])
            per_value[value].append(report.aggregate)
    with open(out / "sweep.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(("rho", "seed", "dice", "jaccard", "asd", "hd95",
                         "schema"))
        writer.writerows(rows)
        if len(seeds) > 1:
            for value in values:
                aggs = per_value[value]
                cells = []
                for key in ("dice", "jaccard", "asd", "hd95"):
                    vals = [a[key] for a in aggs if a[key] is not None]
                    cells.append(format(float(np.mean(vals)), ".17g")
                                 if vals else "")
                writer.writerow([format(value, "g"), "mean"] + cells
                                + [SWEEP_SCHEMA])
    print(f"rho sweep over {values} -> {out / 'sweep.csv'}")
    return 0


def write_pgm(path, image):
    """Plain 8-bit binary grayscale (P5): magic, dimensions, maxval, raw."""
    image = np.ascontiguousarray(image, dtype=np.uint8)
    if image.ndim != 2:
        raise ConfigError(f"PGM slices must be 2D, got {image.shape}")
    h, w = image.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(image.tobytes())


def _mid_slice(volume):
    if volume.ndim == 2:
        return volume
    return volume[..., volume.shape[-1] // 2]


def weights_to_pixels(weights, rho):
    """Linear map [exp(-rho), 1] -> [0, 255], rounded to nearest."""
    wmin = float(np.exp(-rho))
    scaled = (weights - wmin) / (1.0 - wmin) * 255.0
    return np.rint(scaled).astype(np.uint8)


def _predicted_sdm(checkpoint, image_path):
    net, _, _ = net_from_checkpoint(checkpoint)
    image, spacing = read_array(image_path)
    volume = np.asarray(image, dtype=np.float64)
    multiple = 1 << net.config.depth
    pad = [(-n) % multiple for n in volume.shape]
    padded = np.pad(volume, [(0, p) for p in pad]) if any(pad) else volume
    with no_grad():
        out = net.forward(Tensor(padded[None, None]))
    sdm = out.sdm1.data[0, 0][tuple(slice(0, n) for n in volume.shape)]
    return sdm, spacing


def cmd_export_maps(args):
    if bool(args.mask) == bool(args.checkpoint):
        raise ConfigError("export-maps needs exactly one of --mask or "
                          "--checkpoint (with --image)")
    out = _prepare_out(args.out, args.force)
    rhos = _parse_list(args.rho, float)
    if args.mask:
        mask, spacing = read_array(args.mask)
        sdm = sdm_target(mask).values
    else:
        if not args.image:
            raise ConfigError("--checkpoint requires --image")
        sdm, spacing = _predicted_sdm(args.checkpoint, args.image)

    # slice pixels are derived from the float32 volumes as written, so the
    # image recomputes exactly from the exported data
    sdm32 = sdm.astype(np.float32)
    write_array(out / "sdm", sdm32, spacing)
    sdm_px = np.rint((_mid_slice(sdm32).astype(np.float64) + 1.0)
                     / 2.0 * 255.0).astype(np.uint8)
    write_pgm(out / "sdm_slice.pgm", sdm_px)
    for rho in rhos:
        weights = boundary_weights(sdm32.astype(np.float64), rho)
        weights32 = weights.astype(np.float32)
        tag = f"rho{rho:g}"
        write_array(out / f"weights_{tag}", weights32, spacing)
        write_pgm(out / f"weights_{tag}_slice.pgm",
                  weights_to_pixels(_mid_slice(weights32).astype(np.float64),
                                    rho))
    print(f"exported sdm + {len(rhos)} weight map(s) to {out}")
    return 0


# -- parser ----------------------------------------------------------------


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--out", required=True, help="output directory")
    common.add_argument("--config", default=None, help="JSON config file")
    common.add_argument("--deterministic", action=argparse.BooleanOptionalAction,
                        default=None)
    common.add_argument("--force", action="store_true",
                        help="reuse a non-empty output directory")

    train_flags = argparse.ArgumentParser(add_help=False)
    train_flags.add_argument("--manifest", required=True)
    train_flags.add_argument("--t-max", dest="t_max", type=int, default=None)
    train_flags.add_argument("--crop", default=None, help="e.g. 64x64")
    train_flags.add_argument("--lr", type=float, default=None)
    train_flags.add_argument("--lr-decay-every", dest="lr_decay_every",
                             type=int, default=None)
    train_flags.add_argument("--momentum", type=float, default=None)
    train_flags.add_argument("--labeled-per-batch", dest="labeled_per_batch",
                             type=int, default=None)
    train_flags.add_argument("--unlabeled-per-batch", dest="unlabeled_per_batch",
                             type=int, default=None)
    train_flags.add_argument("--checkpoint-every", dest="checkpoint_every",
                             type=int, default=None)
    train_flags.add_argument("--mode", choices=sorted(_MODES), default=None)
    train_flags.add_argument("--rho", type=float, default=None)
    train_flags.add_argument("--k", type=float, default=None)
    train_flags.add_argument("--beta", type=float, default=None)
    train_flags.add_argument("--lambda-max", dest="lambda_max", type=float,
                             default=None)
    train_flags.add_argument("--ramp-power", dest="ramp_power", type=int,
                             default=None)
    train_flags.add_argument("--sign-mode", dest="sign_mode",
                             choices=("inside-negative", "literal"), default=None)
    train_flags.add_argument("--width", type=int, default=None)
    train_flags.add_argument("--depth", type=int, default=None)
    train_flags.add_argument("--norm", choices=("none", "instance"), default=None)

    parser = argparse.ArgumentParser(
        prog="geoseg",
        description="geometry-aware semi-supervised segmentation harness")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build-data", parents=[common],
                       help="generate a synthetic phantom dataset")
    p.add_argument("--labeled", type=int, required=True)
    p.add_argument("--unlabeled", type=int, required=True)
    p.add_argument("--test", type=int, required=True)
    p.add_argument("--shape", default="64x64")
    p.add_argument("--noise-sigma", dest="noise_sigma", type=float, default=None)
    p.add_argument("--blur-sigma", dest="blur_sigma", type=float, default=None)
    p.add_argument("--contrast", type=float, default=None)
    p.set_defaults(func=cmd_build_data)

    p = sub.add_parser("train", parents=[common, train_flags],
                       help="run one training configuration")
    p.add_argument("--resume-from", dest="resume_from", default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common],
                       help="evaluate a checkpoint on the test split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--window", default=None, help="e.g. 64x64")
    p.add_argument("--stride", default=None, help="e.g. 18x18")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", parents=[common, train_flags],
                       help="run the five-configuration ablation")
    p.add_argument("--seeds", default="0,1,2")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("sweep-rho", parents=[common, train_flags],
                       help="sweep the boundary-weight sharpness")
    p.add_argument("--values", default="1.0,1.5,2.0,2.5,3.0")
    p.add_argument("--seeds", default="0")
    p.set_defaults(func=cmd_sweep_rho)

    p = sub.add_parser("export-maps", parents=[common],
                       help="export SDM / weight volumes and slice images")
    p.add_argument("--mask", default=None, help="volume header json of a mask")
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--image", default=None, help="volume header json")
    p.add_argument("--rho", default="1,2,3")
    p.set_defaults(func=cmd_export_maps)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args) or 0
    except GeoSegError as e:
        print(f"error category={e.category} message={e}", file=sys.stderr)
        return 1
    except OSError as e:
        print(f"error category=io message={e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
