"""Command-line front end: scene synthesis, training, coding, and reports."""

from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from . import __version__
from .container import HaczBlob, decode_scene, encode_scene, inspect_blob, verify_roundtrip
from .errors import (
    CdfDesyncError,
    CoderError,
    FormatError,
    HaczError,
    SceneValidationError,
    SectionOverrunError,
    SymbolRangeError,
    TruncatedFileError,
)
from .hashgrid import GRID_PRESETS, GridConfig, HashGrid, grid_new
from .masking import MaskSet
from .ratemodel import ContextModel, model_new
from .reports import (
    bit_allocation_map,
    family_report,
    format_family_report,
    voxel_records_json,
    write_history_csv,
    write_voxel_csv,
)
from .scene import AABB, load_scene, save_scene, synth_scene
from .trainer import TrainConfig, fit

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_MISSING = 3
EXIT_FORMAT = 4
EXIT_VALIDATION = 5
EXIT_VERIFY = 6
EXIT_CODER = 7
EXIT_OTHER = 1


# ---------------------------------------------------------------------------
# Checkpoints: trained grid + model + masks in one npz.
# ---------------------------------------------------------------------------

def save_checkpoint(path, grid, model, masks):
    cfg = grid.config
    arrays = {
        "levels_3d": np.int64(cfg.levels_3d),
        "levels_2d": np.int64(cfg.levels_2d),
        "res_3d": np.asarray(cfg.res_3d, dtype=np.int64),
        "res_2d": np.asarray(cfg.res_2d, dtype=np.int64),
        "table_3d_max": np.int64(cfg.table_3d_max),
        "table_2d_max": np.int64(cfg.table_2d_max),
        "dim_embed": np.int64(cfg.dim_embed),
        "bounds_min": grid.bounds.min,
        "bounds_max": grid.bounds.max,
        "dim_feat": np.int64(model.dim_feat),
        "k_offsets": np.int64(model.k_offsets),
        "q0": model.q0,
        "logits": masks.logits,
        "threshold": np.float64(masks.threshold),
    }
    for i, t in enumerate(grid.params):
        arrays[f"theta_{i:03d}"] = t
    for name, arr in zip(("w1", "b1", "w2", "b2", "w3", "b3"),
                         model.weight_arrays()):
        arrays[name] = arr
    np.savez(path, **arrays)


def load_checkpoint(path):
    with np.load(path) as data:
        cfg = GridConfig(
            levels_3d=int(data["levels_3d"]),
            levels_2d=int(data["levels_2d"]),
            res_3d=tuple(int(r) for r in data["res_3d"]),
            res_2d=tuple(int(r) for r in data["res_2d"]),
            table_3d_max=int(data["table_3d_max"]),
            table_2d_max=int(data["table_2d_max"]),
            dim_embed=int(data["dim_embed"]),
        )
        bounds = AABB(data["bounds_min"], data["bounds_max"])
        n_tables = len([k for k in data.files if k.startswith("theta_")])
        params = [data[f"theta_{i:03d}"] for i in range(n_tables)]
        grid = HashGrid(config=cfg, params=params, bounds=bounds)
        model = ContextModel(
            w1=data["w1"], b1=data["b1"], w2=data["w2"], b2=data["b2"],
            w3=data["w3"], b3=data["b3"],
            q0=data["q0"],
            dim_feat=int(data["dim_feat"]),
            k_offsets=int(data["k_offsets"]),
        )
        masks = MaskSet(data["logits"], threshold=float(data["threshold"]))
    return grid, model, masks


def _fresh_artifacts(scene, preset, seed):
    """Untrained, seeded grid/model/masks (used by verify without a
    checkpoint; coding needs no training to be lossless)."""
    cfg = GRID_PRESETS[preset]()
    grid = grid_new(cfg, seed, bounds=scene.bounds)
    model = model_new(cfg.feature_dim, scene.dim_feat, scene.k_offsets, seed + 1)
    masks = MaskSet(np.zeros((scene.n, scene.k_offsets)))
    return grid, model, masks


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def _cmd_synth(args):
    scene = synth_scene(args.seed, args.n, args.dim_feat, args.k_offsets,
                        args.smoothness)
    save_scene(scene, args.out)
    print(f"wrote {args.out}: {scene.n} anchors, dim_feat={scene.dim_feat}, "
          f"k_offsets={scene.k_offsets}")
    return EXIT_OK


def _train_config(args):
    return TrainConfig(
        lambda_e=args.lambda_e,
        lambda_m=args.lambda_m,
        iterations=args.iters,
        mode=args.mode,
        grid_config=GRID_PRESETS[args.grid_preset](),
        sample_frac=args.sample_frac,
        seed=args.seed,
        deterministic=args.deterministic,
    )


def _cmd_fit(args):
    scene = load_scene(args.scene)
    result = fit(scene, _train_config(args))
    save_checkpoint(args.ckpt, result.grid, result.model, result.masks)
    if args.history:
        write_history_csv(result.history, args.history)
    if args.refined_scene and args.mode == "joint":
        save_scene(result.scene, args.refined_scene)
    first, last = result.history[0], result.history[-1]
    print(f"fit: {len(result.history)} logged steps, total loss "
          f"{first['total']:.6f} -> {last['total']:.6f}"
          f"{'' if result.converged else ' (no improvement)'}")
    print(f"wrote {args.ckpt}")
    return EXIT_OK


def _cmd_encode(args):
    scene = load_scene(args.scene)
    grid, model, masks = load_checkpoint(args.ckpt)
    if masks.logits.shape[0] != scene.n:
        masks = MaskSet(np.zeros((scene.n, scene.k_offsets)))
    blob = encode_scene(scene, grid, model, masks,
                        lambda_e=args.lambda_e, lambda_m=args.lambda_m)
    data = blob.to_bytes()
    with open(args.out, "wb") as fh:
        fh.write(data)
    print(f"wrote {args.out}: {len(data)} bytes, {blob.n_kept} anchors kept")
    return EXIT_OK


def _cmd_decode(args):
    with open(args.blob, "rb") as fh:
        data = fh.read()
    decoded = decode_scene(HaczBlob.from_bytes(data))
    save_scene(decoded.scene, args.out)
    print(f"wrote {args.out}: {decoded.scene.n} anchors")
    return EXIT_OK


def _cmd_verify(args):
    scene = load_scene(args.scene)
    if args.ckpt:
        grid, model, masks = load_checkpoint(args.ckpt)
        if masks.logits.shape[0] != scene.n:
            masks = MaskSet(np.zeros((scene.n, scene.k_offsets)))
    else:
        grid, model, masks = _fresh_artifacts(scene, args.grid_preset, args.seed)
    ok, problems = verify_roundtrip(scene, grid, model, masks)
    if ok:
        print("verify: bit-exact")
        return EXIT_OK
    print(f"verify: MISMATCH in {', '.join(problems)}")
    return EXIT_VERIFY


def _cmd_inspect(args):
    with open(args.blob, "rb") as fh:
        data = fh.read()
    info = inspect_blob(data)
    text = json.dumps(info, indent=2)
    if args.json:
        with open(args.json, "w") as fh:
            fh.write(text)
    print(text)
    return EXIT_OK


def _cmd_bitmap(args):
    scene = load_scene(args.scene)
    grid, model, masks = load_checkpoint(args.ckpt)
    if masks.logits.shape[0] != scene.n:
        masks = MaskSet(np.zeros((scene.n, scene.k_offsets)))
    records = bit_allocation_map(scene, grid, model, masks, args.voxels)
    if args.out:
        write_voxel_csv(records, args.out)
        print(f"wrote {args.out}: {len(records)} voxels")
    else:
        print(voxel_records_json(records))
    return EXIT_OK


def _cmd_report(args):
    with open(args.blob, "rb") as fh:
        data = fh.read()
    report = family_report(data)
    if args.json:
        with open(args.json, "w") as fh:
            fh.write(json.dumps(report, indent=2))
    print(format_family_report(report))
    return EXIT_OK


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------

def _add_common_train_flags(p):
    p.add_argument("--lambda-e", type=float, default=2e-3, dest="lambda_e")
    p.add_argument("--lambda-m", type=float, default=5e-4, dest="lambda_m")
    p.add_argument("--iters", type=int, default=3000)
    p.add_argument("--mode", choices=("rate-only", "joint"), default="rate-only")
    p.add_argument("--grid-preset", choices=tuple(GRID_PRESETS), default="paper")
    p.add_argument("--sample-frac", type=float, default=0.05)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--deterministic", action="store_true", default=True)


def build_parser():
    parser = argparse.ArgumentParser(
        prog="hacz",
        description="Context-model compressor for anchor scenes",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic scene")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n", type=int, default=1000)
    p.add_argument("--dim-feat", type=int, default=50, dest="dim_feat")
    p.add_argument("--k-offsets", type=int, default=10, dest="k_offsets")
    p.add_argument("--smoothness", type=float, default=0.8)
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("fit", help="train grid, context model, and masks")
    p.add_argument("scene")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--history")
    p.add_argument("--refined-scene", dest="refined_scene")
    _add_common_train_flags(p)
    p.set_defaults(func=_cmd_fit)

    p = sub.add_parser("encode", help="compress a scene with a checkpoint")
    p.add_argument("scene")
    p.add_argument("ckpt")
    p.add_argument("--out", required=True)
    p.add_argument("--lambda-e", type=float, default=2e-3, dest="lambda_e")
    p.add_argument("--lambda-m", type=float, default=5e-4, dest="lambda_m")
    p.set_defaults(func=_cmd_encode)

    p = sub.add_parser("decode", help="decompress a blob into a scene file")
    p.add_argument("blob")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_decode)

    p = sub.add_parser("verify", help="encode+decode and compare bit-exactly")
    p.add_argument("scene")
    p.add_argument("--ckpt")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--grid-preset", choices=tuple(GRID_PRESETS), default="small")
    p.set_defaults(func=_cmd_verify)

    p = sub.add_parser("inspect", help="per-section size report of a blob")
    p.add_argument("blob")
    p.add_argument("--json")
    p.set_defaults(func=_cmd_inspect)

    p = sub.add_parser("bitmap", help="voxelized bit-allocation map")
    p.add_argument("scene")
    p.add_argument("ckpt")
    p.add_argument("--voxels", type=int, default=8)
    p.add_argument("--out")
    p.set_defaults(func=_cmd_bitmap)

    p = sub.add_parser("report", help="per-family bits-per-parameter table")
    p.add_argument("blob")
    p.add_argument("--json")
    p.set_defaults(func=_cmd_report)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except FileNotFoundError as exc:
        print(f"error: missing file: {exc.filename or exc}", file=sys.stderr)
        return EXIT_MISSING
    except (FormatError, TruncatedFileError) as exc:
        print(f"error: bad file format: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except SceneValidationError as exc:
        print(f"error: invalid data: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (SectionOverrunError, CdfDesyncError, SymbolRangeError, CoderError) as exc:
        print(f"error: codec failure: {exc}", file=sys.stderr)
        return EXIT_CODER
    except HaczError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_OTHER


if __name__ == "__main__":
    sys.exit(main())
