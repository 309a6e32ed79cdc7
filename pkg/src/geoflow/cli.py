"""Command-line interface.

Every subcommand accepts ``--config FILE`` (YAML or JSON) plus ``--set
key.path=value`` overrides and subcommand flags. Commands that write an output
directory also write ``manifest.json`` (resolved config, its hash, input
digests, seeds, versions), from which ``geoflow rerun`` reproduces the
directory bit-exactly. Failures exit nonzero after printing one JSON line
``{"error": code, "message": ...}`` to stderr.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import platform
import sys
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from geoflow import __version__
from geoflow.errors import ConfigError, GeoflowError
from geoflow.hashing import canonical_json, config_hash, to_plain

log = logging.getLogger("geoflow")

MANIFEST = "manifest.json"
EXIT_FAILURE = 1
EXIT_USAGE = 2


class UsageError(GeoflowError):
    code = "usage_error"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# ---------------------------------------------------------------------------
# small helpers


def _write_json(path: Path, data) -> None:
    path.write_text(json.dumps(to_plain(data), indent=2, sort_keys=True) + "\n")


def _emit(data) -> None:
    print(json.dumps(to_plain(data), sort_keys=True))


def _digest_path(path: Path) -> str:
    h = hashlib.sha256()
    if path.is_dir():
        for f in sorted(p for p in path.rglob("*") if p.is_file()):
            h.update(str(f.relative_to(path)).encode())
            h.update(f.read_bytes())
    else:
        h.update(path.read_bytes())
    return h.hexdigest()


def _versions() -> dict:
    import scipy

    return {"geoflow": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
            "python": platform.python_version()}


def _out_dir(args) -> Path:
    if args.out is None:
        raise UsageError(f"{args.command} needs --out")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _fmt_t(t: float) -> str:
    return f"{t:+.4f}"


# ---------------------------------------------------------------------------
# dataset directories


def write_dataset(out: Path, items, ids: Sequence[str]) -> None:
    from geoflow.io import write_field

    for sid, (image, labels) in zip(ids, items):
        write_field(out / f"{sid}.image.gf", image)
        if labels is not None:
            write_field(out / f"{sid}.labels.gf", labels)
    _write_json(out / "dataset.json", {"ids": list(ids)})


def read_dataset(path: Path):
    """``(ids, images, labels-or-None per id)`` from a dataset directory."""
    from geoflow.io import read_field

    meta_path = path / "dataset.json"
    if not meta_path.exists():
        raise UsageError(f"{path} is not a dataset directory (no dataset.json)")
    ids = json.loads(meta_path.read_text())["ids"]
    images, labels = [], []
    for sid in ids:
        images.append(read_field(path / f"{sid}.image.gf", kind="scalar"))
        lp = path / f"{sid}.labels.gf"
        labels.append(read_field(lp, kind="labels") if lp.exists() else None)
    return ids, images, labels


def _write_examples(out: Path, examples) -> list[dict]:
    from geoflow.io import write_field

    records = []
    for k, ex in enumerate(examples):
        d = out / "examples" / f"ex{k:05d}"
        d.mkdir(parents=True, exist_ok=True)
        write_field(d / "image.gf", ex.image)
        write_field(d / "labels.gf", ex.labels)
        rec = {"lineage": ex.lineage.as_dict(), "min_jacobian": ex.min_jacobian}
        _write_json(d / "lineage.json", rec)
        records.append(rec)
    return records


def _cache(args):
    from geoflow.augment import MomentumCache

    return MomentumCache(args.cache) if getattr(args, "cache", None) else MomentumCache()


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen(args, cfg, out):
    from geoflow.augment import default_ids
    from geoflow.synthdata import generate_population

    n = cfg.synth.n
    pop = generate_population(cfg.scene(), n, cfg.perturbation(), cfg.synth_seed())
    ids = default_ids(n)
    write_dataset(out, pop, ids)
    return {"images": n, "dims": list(cfg.synth.dims)}


def cmd_register(args, cfg, out):
    from geoflow.io import read_field, write_field
    from geoflow.registration import register

    src = read_field(args.source, kind="scalar")
    tgt = read_field(args.target, kind="scalar")
    reg = cfg.reg_config(src.grid)
    res = register(src, tgt, reg)
    write_field(out / "m0.gf", res.m0)
    write_field(out / "warped.gf", res.final_warped)
    norm = float(np.sqrt(np.sum(res.m0.vectors**2) * src.grid.voxel_volume))
    summary = {
        "converged": res.converged, "reason": res.reason,
        "initial_ssd": res.initial_ssd, "final_ssd": res.final_ssd,
        "ssd_ratio": res.final_ssd / res.initial_ssd if res.initial_ssd > 0 else 0.0,
        "m0_norm": norm, "momentum_norm_below_tolerance": norm <= reg.optimizer.grad_tol,
        "energy_trace": [list(e) for e in res.energy_trace],
    }
    _write_json(out / "result.json", summary)
    return {k: v for k, v in summary.items() if k != "energy_trace"}


def cmd_shoot(args, cfg, out):
    from geoflow.grid import interpolate, jacobian_determinant
    from geoflow.io import read_field, write_field
    from geoflow.shooting import shoot_sequence

    m0 = read_field(args.momentum, kind="vector")
    image = read_field(args.image, kind="scalar") if args.image else None
    ts = sorted(set(float(t) for t in args.t))
    states = shoot_sequence(m0, ts, cfg.shoot_config(m0.grid))
    report = {}
    for s in states:
        tag = _fmt_t(s.t)
        write_field(out / f"phi_inv_t{tag}.gf", s.phi_inv)
        write_field(out / f"phi_t{tag}.gf", s.phi)
        if image is not None:
            write_field(out / f"warped_t{tag}.gf", interpolate(image, s.phi_inv))
        report[tag] = float(jacobian_determinant(s.phi_inv).values.min())
    _write_json(out / "summary.json", {"min_jacobian_phi_inv": report})
    return {"times": ts, "min_jacobian_phi_inv": report}


def cmd_subspace(args, cfg, out):
    from geoflow.grid import interpolate
    from geoflow.io import export_image_2d, lambda_t_name, write_field
    from geoflow.subspace import draw_sample

    ids, images, _ = read_dataset(Path(args.dataset))
    pos = {s: k for k, s in enumerate(ids)}
    src_id = args.source_id or ids[0]
    if src_id not in pos:
        raise UsageError(f"unknown source id {src_id}")
    tgt_ids = args.target_ids or [s for s in ids if s != src_id][: cfg.sampler.K]
    missing = [t for t in tgt_ids if t not in pos]
    if missing:
        raise UsageError(f"unknown target ids {missing}")
    src = images[pos[src_id]]
    reg = cfg.reg_config(src.grid)
    sampler = cfg.sampler_config(src.grid)
    import dataclasses

    sampler = dataclasses.replace(sampler, K=len(tgt_ids))
    mset = _cache(args).momentum_set(src_id, src, [(t, images[pos[t]]) for t in tgt_ids], reg)
    (out / "momenta").mkdir(exist_ok=True)
    for tid, m in zip(tgt_ids, mset.momenta):
        write_field(out / "momenta" / f"{src_id}_to_{tid}.gf", m)
    records = []
    for i in range(args.n_samples):
        s = draw_sample(mset, sampler, i)
        d = out / "samples" / f"s{i:05d}"
        d.mkdir(parents=True, exist_ok=True)
        write_field(d / "phi_inv.gf", s.phi_inv)
        write_field(d / "phi.gf", s.phi)
        write_field(d / "warped.gf", interpolate(src, s.phi_inv))
        rec = {"lambda": list(s.lam), "t": s.t, "seed": s.seed, "index": s.index}
        _write_json(d / "sample.json", rec)
        records.append(rec)
    n_cells = 0
    if args.grid_lambdas and args.grid_times:
        if len(tgt_ids) != 2:
            raise UsageError("the lambda x t grid needs exactly two targets")
        gdir = out / "grid"
        gdir.mkdir(exist_ok=True)
        for l1 in args.grid_lambdas:
            lam = (float(l1), 1.0 - float(l1))
            for t in args.grid_times:
                s = draw_sample(mset, sampler, 0, lam=lam, t=float(t))
                export_image_2d(interpolate(src, s.phi_inv), gdir / lambda_t_name(lam, float(t)),
                                axis=args.axis, index=args.slice)
                n_cells += 1
    return {"samples": records, "grid_cells": n_cells}


def _split_dataset(cfg, ids, args):
    test = [ids[i] for i in cfg.pipeline.test_indices]
    if getattr(args, "test_ids", None):
        test = list(args.test_ids)
    return test


def cmd_augment_train(args, cfg, out):
    from geoflow.augment import augment_train

    ids, images, labels = read_dataset(Path(args.dataset))
    held = set(_split_dataset(cfg, ids, args))
    keep = [k for k, s in enumerate(ids) if s not in held]
    if any(labels[k] is None for k in keep):
        raise UsageError("augment-train needs labels for every training image")
    data = [(images[k], labels[k]) for k in keep]
    grid = images[0].grid
    res = augment_train(data, cfg.pipeline.n_out, cfg.sampler_config(grid), cfg.reg_config(grid),
                        ids=[ids[k] for k in keep], cache=_cache(args), workers=cfg.pipeline.workers)
    records = _write_examples(out, res.examples)
    summary = res.summary()
    summary["min_jacobian"] = min((r["min_jacobian"] for r in records), default=None)
    _write_json(out / "summary.json", summary)
    return summary


def cmd_augment_test(args, cfg, out):
    from geoflow.augment import atlas_segmenter, augment_test
    from geoflow.io import write_field
    from geoflow.labels import dice

    ids, images, labels = read_dataset(Path(args.dataset))
    pos = {s: k for k, s in enumerate(ids)}
    atlas_id = args.atlas_id or ids[cfg.pipeline.atlas_index]
    test_ids = _split_dataset(cfg, ids, args)
    if not test_ids:
        raise UsageError("augment-test needs test images (--test-ids or pipeline.test_indices)")
    train_ids = [s for s in ids if s not in test_ids and s != atlas_id]
    grid = images[0].grid
    reg = cfg.reg_config(grid)
    sampler = cfg.sampler_config(grid)
    seg = atlas_segmenter(images[pos[atlas_id]], labels[pos[atlas_id]], reg)
    cache = _cache(args)
    report = {}
    for tid in test_ids:
        fused, diags = augment_test(images[pos[tid]], [images[pos[s]] for s in train_ids], seg,
                                    cfg.pipeline.n_views, sampler, reg, image_id=tid, train_ids=train_ids,
                                    cache=cache, workers=cfg.pipeline.workers,
                                    t=args.t)
        write_field(out / f"{tid}.fused.gf", fused)
        entry = {"views": [to_plain(d) for d in diags]}
        if labels[pos[tid]] is not None:
            per, mean = dice(fused, labels[pos[tid]])
            entry["dice"] = {"per_label": per, "mean": mean}
        report[tid] = entry
    means = [e["dice"]["mean"] for e in report.values() if "dice" in e]
    summary = {"images": report, "mean_dice": float(np.mean(means)) if means else None}
    _write_json(out / "report.json", summary)
    return {"mean_dice": summary["mean_dice"], "test_ids": test_ids}


def cmd_oneshot(args, cfg, out):
    from geoflow.augment import oneshot_synthesize

    ids, images, labels = read_dataset(Path(args.dataset))
    atlas_k = ids.index(args.atlas_id) if args.atlas_id else cfg.pipeline.atlas_index
    if labels[atlas_k] is None:
        raise UsageError("the atlas needs labels")
    others = [k for k in range(len(ids)) if k != atlas_k]
    grid = images[0].grid
    res = oneshot_synthesize(images[atlas_k], labels[atlas_k], [images[k] for k in others], cfg.pipeline.n_out,
                             cfg.sampler_config(grid), cfg.reg_config(grid), variant=cfg.pipeline.variant,
                             atlas_id=ids[atlas_k], ids=[ids[k] for k in others], cache=_cache(args),
                             workers=cfg.pipeline.workers)
    _write_examples(out, res.examples)
    summary = res.summary()
    _write_json(out / "summary.json", summary)
    return summary


def cmd_bspline(args, cfg, out):
    from geoflow.augment import bspline_augment

    ids, images, labels = read_dataset(Path(args.dataset))
    data = [(im, lab) for im, lab in zip(images, labels)]
    if any(lab is None for _, lab in data):
        raise UsageError("bspline needs labels for every image")
    examples = bspline_augment(data, cfg.pipeline.n_out, cfg.bspline_settings(images[0].grid.ndim),
                               cfg.seed, ids=ids)
    records = _write_examples(out, examples)
    summary = {"examples": len(records),
               "folded": sum(1 for r in records if r["min_jacobian"] <= 0)}
    _write_json(out / "summary.json", summary)
    return summary


def cmd_jacobian(args, cfg, out):
    from geoflow.grid import jacobian_determinant
    from geoflow.io import read_field, write_field

    phi = read_field(args.map, kind="map")
    det = jacobian_determinant(phi)
    stats = {"min": float(det.values.min()), "max": float(det.values.max()),
             "nonpositive": int(np.sum(det.values <= 0))}
    if out is not None:
        write_field(out / "jacobian.gf", det)
        _write_json(out / "jacobian.json", stats)
    return stats


def cmd_dice(args, cfg, out):
    from geoflow.io import read_field
    from geoflow.labels import dice

    per, mean = dice(read_field(args.a, kind="labels"), read_field(args.b, kind="labels"))
    result = {"per_label": per, "mean": mean}
    if out is not None:
        _write_json(out / "dice.json", result)
    return result


def cmd_export(args, cfg, out):
    from geoflow.io import export_image_2d, read_field

    field = read_field(args.field)
    from geoflow.grid import ScalarField
    from geoflow.labels import LabelMap

    if not isinstance(field, (ScalarField, LabelMap)):
        raise UsageError("export takes a scalar or label field")
    path = Path(args.png)
    export_image_2d(field, path, axis=args.axis, index=args.slice)
    return {"written": path.name}


# name -> (handler, writes an output directory, input-path arguments)
COMMANDS: dict[str, tuple[Callable, bool, tuple[str, ...]]] = {
    "gen": (cmd_gen, True, ()),
    "register": (cmd_register, True, ("source", "target")),
    "shoot": (cmd_shoot, True, ("momentum", "image")),
    "subspace": (cmd_subspace, True, ("dataset",)),
    "augment-train": (cmd_augment_train, True, ("dataset",)),
    "augment-test": (cmd_augment_test, True, ("dataset",)),
    "oneshot": (cmd_oneshot, True, ("dataset",)),
    "bspline": (cmd_bspline, True, ("dataset",)),
    "jacobian": (cmd_jacobian, False, ("map",)),
    "dice": (cmd_dice, False, ("a", "b")),
    "export": (cmd_export, False, ("field",)),
}

# arguments that never affect outputs and so stay out of manifests
_RUNTIME_ARGS = {"command", "config", "set", "out", "cache", "workers", "verbose"}


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="geoflow", description="Geodesic-subspace augmentation toolkit.")
    p.add_argument("--version", action="version", version=f"geoflow {__version__}")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def common(sp, out_required=True):
        sp.add_argument("--config", help="YAML or JSON run configuration")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config entry, e.g. reg.sim_weight=100")
        sp.add_argument("--out", required=out_required, help="output directory")
        sp.add_argument("--seed", type=int, help="global seed (config key: seed)")
        sp.add_argument("--workers", type=int, help="parallel worker processes")
        sp.add_argument("--cache", help="momentum cache directory shared across runs")
        sp.add_argument("-v", "--verbose", action="store_true")

    sp = sub.add_parser("gen", help="generate a synthetic labeled population")
    common(sp)
    sp.add_argument("--n", type=int, help="population size (synth.n)")
    sp.add_argument("--dims", type=int, nargs="+", help="grid dims (synth.dims)")
    sp.add_argument("--noise", type=float, help="noise sigma (synth.noise)")

    sp = sub.add_parser("register", help="register a source image to a target image")
    common(sp)
    sp.add_argument("--source", required=True)
    sp.add_argument("--target", required=True)

    sp = sub.add_parser("shoot", help="shoot a momentum to one or more times")
    common(sp)
    sp.add_argument("--momentum", required=True)
    sp.add_argument("--t", type=float, nargs="+", required=True)
    sp.add_argument("--image", help="also warp this image")

    sp = sub.add_parser("subspace", help="build a momentum set and draw subspace samples")
    common(sp)
    sp.add_argument("--dataset", required=True)
    sp.add_argument("--source-id")
    sp.add_argument("--target-ids", nargs="+")
    sp.add_argument("--n-samples", type=int, default=4)
    sp.add_argument("--grid-lambdas", type=float, nargs="+", help="lambda_1 values of the export grid")
    sp.add_argument("--grid-times", type=float, nargs="+", help="times of the export grid")
    sp.add_argument("--axis", type=int)
    sp.add_argument("--slice", type=int)

    sp = sub.add_parser("augment-train", help="training-phase augmentation")
    common(sp)
    sp.add_argument("--dataset", required=True)
    sp.add_argument("--n-out", type=int, help="pipeline.n_out")
    sp.add_argument("--test-ids", nargs="+", help="ids held out from training")

    sp = sub.add_parser("augment-test", help="test-phase augmentation with label fusion")
    common(sp)
    sp.add_argument("--dataset", required=True)
    sp.add_argument("--test-ids", nargs="+")
    sp.add_argument("--atlas-id")
    sp.add_argument("--n-views", type=int, help="pipeline.n_views")
    sp.add_argument("--t", type=float, help="force every view to this time")

    sp = sub.add_parser("oneshot", help="one-shot synthesis from an atlas")
    common(sp)
    sp.add_argument("--dataset", required=True)
    sp.add_argument("--atlas-id")
    sp.add_argument("--variant", choices=["fluid_aug_real", "fluid_aug_real_t1", "brainstorm_real"])
    sp.add_argument("--n-out", type=int)

    sp = sub.add_parser("bspline", help="random B-spline baseline augmentation")
    common(sp)
    sp.add_argument("--dataset", required=True)
    sp.add_argument("--n-out", type=int)

    sp = sub.add_parser("jacobian", help="Jacobian determinant statistics of a map")
    common(sp, out_required=False)
    sp.add_argument("--map", required=True)

    sp = sub.add_parser("dice", help="Dice overlap of two label files")
    common(sp, out_required=False)
    sp.add_argument("--a", required=True)
    sp.add_argument("--b", required=True)

    sp = sub.add_parser("export", help="export a 2D image (PNG)")
    common(sp, out_required=False)
    sp.add_argument("--field", required=True)
    sp.add_argument("--png", required=True)
    sp.add_argument("--axis", type=int)
    sp.add_argument("--slice", type=int)

    sp = sub.add_parser("rerun", help="reproduce an output directory from its manifest")
    sp.add_argument("manifest")
    sp.add_argument("--out", required=True)
    sp.add_argument("--workers", type=int)
    sp.add_argument("--cache")
    sp.add_argument("-v", "--verbose", action="store_true")
    return p


# flag -> config key
_FLAG_KEYS = {
    "seed": "seed", "workers": "pipeline.workers", "n": "synth.n", "dims": "synth.dims",
    "noise": "synth.noise", "n_out": "pipeline.n_out", "n_views": "pipeline.n_views",
    "variant": "pipeline.variant",
}


def resolve_config(args):
    from geoflow.config import apply_override, load_config, parse_config, parse_override

    data = load_config(getattr(args, "config", None))
    for text in getattr(args, "set", []) or []:
        key, value = parse_override(text)
        data = apply_override(data, key, value)
    for flag, key in _FLAG_KEYS.items():
        value = getattr(args, flag, None)
        if value is not None:
            data = apply_override(data, key, value)
    return parse_config(data)


def _manifest(args, cfg) -> dict:
    handler, _, inputs = COMMANDS[args.command]
    plain = {k: v for k, v in sorted(vars(args).items()) if k not in _RUNTIME_ARGS}
    digests = {}
    for name in inputs:
        value = getattr(args, name, None)
        if value is not None:
            path = Path(value).resolve()
            plain[name] = str(path)
            digests[name] = _digest_path(path)
    config = cfg.model_dump(mode="json")
    config["pipeline"]["workers"] = 1  # worker count never changes outputs
    return {
        "command": args.command,
        "args": plain,
        "inputs": digests,
        "config": config,
        "config_hash": config_hash(config),
        "seeds": {"global": cfg.seed, "sampler": cfg.sampler.rng_seed if cfg.sampler.rng_seed is not None else cfg.seed,
                  "synth": cfg.synth_seed()},
        "versions": _versions(),
    }


def run_command(args, cfg) -> dict:
    handler, writes, _ = COMMANDS[args.command]
    out = _out_dir(args) if writes else (Path(args.out) if args.out else None)
    if out is not None and not writes:
        out.mkdir(parents=True, exist_ok=True)
    result = handler(args, cfg, out)
    if writes:
        _write_json(out / MANIFEST, _manifest(args, cfg))
    return result


def cmd_rerun(args) -> dict:
    from geoflow.config import parse_config

    manifest = json.loads(Path(args.manifest).read_text())
    command = manifest["command"]
    if command not in COMMANDS:
        raise UsageError(f"manifest names unknown command {command!r}")
    for name, digest in manifest["inputs"].items():
        path = Path(manifest["args"][name])
        if not path.exists() or _digest_path(path) != digest:
            raise ConfigError(f"input {name} ({path}) is missing or changed since the manifest was written")
    config = dict(manifest["config"])
    if args.workers is not None:
        config = json.loads(canonical_json(config))
        config["pipeline"]["workers"] = args.workers
    cfg = parse_config(config)
    ns = argparse.Namespace(command=command, out=args.out, cache=args.cache, config=None, set=[],
                            workers=None, verbose=args.verbose, **manifest["args"])
    return run_command(ns, cfg)


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(argv)
        if args.command is None:
            raise UsageError("missing subcommand")
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        if args.command == "rerun":
            result = cmd_rerun(args)
        else:
            result = run_command(args, resolve_config(args))
    except (UsageError, ConfigError) as exc:
        print(json.dumps({"error": exc.code, "message": str(exc)}), file=sys.stderr)
        return EXIT_USAGE
    except GeoflowError as exc:
        print(json.dumps({"error": exc.code, "message": str(exc)}), file=sys.stderr)
        return EXIT_FAILURE
    except (OSError, ValueError) as exc:
        code = "io_error" if isinstance(exc, OSError) else "invalid_input"
        print(json.dumps({"error": code, "message": str(exc)}), file=sys.stderr)
        return EXIT_FAILURE
    _emit(result)
    return 0


if __name__ == "__main__":
    sys.exit(main())
