"""Command line entry point.

Exit status: 0 on success, 1 for usage errors, 2 for runtime failures.
"""
from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from .charts import save_atlas
from .config import ExperimentConfig, format_config, load_config
from .geometry import chamfer
from .meshio import write_obj, write_ply
from . import harness as H
from .reconstruct import depth_to_cloud, fit_touch_chart, loss_faces, mesh_chamfer, predict_impression, \
    scene_atlas, deform, touch_mask
from .tactile import SensorPose


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _log(msg: str) -> None:
    print(msg, file=sys.stderr, flush=True)


def _config(args) -> ExperimentConfig:
    if args.config:
        cfg = load_config(args.config)
    elif getattr(args, "run", None) and (Path(args.run) / "config.txt").is_file():
        cfg = load_config(Path(args.run) / "config.txt")
    else:
        cfg = ExperimentConfig()
    if args.seed is not None:
        cfg = cfg.with_overrides(seed=args.seed)
    return cfg


def _run_dir(args) -> Path:
    run = Path(args.run)
    if not (run / "dataset" / "manifest.json").is_file():
        raise FileNotFoundError(f"{run}: no dataset (run gen-data --out {run / 'dataset'} first)")
    return run


def _depth(run: Path):
    if not (run / "depth" / "manifest.json").is_file():
        raise FileNotFoundError(f"{run / 'depth'}: no depth checkpoint (run train-depth)")
    return H.load_depth_model(run / "depth")


def _model(run: Path, name: str):
    d = run / "models" / name
    if not (d / "manifest.json").is_file():
        raise FileNotFoundError(f"{d}: no model checkpoint (run train-deform)")
    return H.load_deform_model(d)


def _modality_of(name: str) -> tuple[str, int]:
    stem, g = name.rsplit("_g", 1)
    return stem.replace("-", "+"), int(g)


# ---------------------------------------------------------------- commands

def cmd_gen_data(args):
    cfg = _config(args)
    out = H.gen_dataset(cfg, args.out, _log)
    stats = H.success_statistics(H.Dataset(out))
    print(json.dumps({"dataset": str(out), **stats}, sort_keys=True))


def cmd_train_depth(args):
    run = _run_dir(args)
    cfg = _config(args)
    out = Path(args.out) if args.out else run / "depth"
    model = H.train_depth_stage(H.Dataset(run / "dataset"), cfg, out, _log)
    print(json.dumps(H.evaluate_depth(model, H.Dataset(run / "dataset"), "val"), sort_keys=True))


def cmd_fit_touch(args):
    if args.cloud:
        if not args.pose:
            raise UsageError("fit-touch --cloud needs --pose")
        from .meshio import read_xyz
        pose = SensorPose.from_dict(json.loads(Path(args.pose).read_text()))
        res = fit_touch_chart(read_xyz(args.cloud), pose)
        out = Path(args.out or "chart.obj")
        from .geometry import TriMesh
        write_obj(out, TriMesh(res.chart.vertices, res.chart.faces, strict=False))
        print(json.dumps({"loss": res.loss, "iterations": res.iterations, "converged": res.converged,
                          "out": str(out)}))
        return
    if not args.run:
        raise UsageError("fit-touch needs --run or --cloud/--pose")
    run = _run_dir(args)
    cfg = _config(args)
    summary = H.fit_stage(H.Dataset(run / "dataset"), _depth(run), cfg, run, _log)
    print(json.dumps(summary, sort_keys=True))


def cmd_train_deform(args):
    run = _run_dir(args)
    cfg = _config(args)
    if args.modality not in H.MODALITIES:
        raise UsageError(f"unknown modality {args.modality!r}; choose from {sorted(H.MODALITIES)}")
    H.train_deform_stage(H.Dataset(run / "dataset"), cfg, run, args.modality, args.grasps, _log)
    print(json.dumps({"model": H.model_name(args.modality, args.grasps)}))


def predict_sample(run: Path, cfg: ExperimentConfig, name: str, oid: str, start: int, out: Path) -> dict:
    ds = H.Dataset(run / "dataset")
    if oid not in ds.ids():
        raise KeyError(f"unknown object {oid!r}")
    model = _model(run, name)
    modality, grasps = _modality_of(name)
    depth = _depth(run)
    fitted = H.load_fitted(ds, run, oid)
    window = H.grasp_window(start, grasps, ds.n_grasps)
    scene = H.build_scene(ds, fitted, oid, window, modality, H.make_camera(cfg))
    atlas = deform(model, scene_atlas(scene, model.config), scene)
    mesh = ds.mesh(oid)
    local = []
    for g in window:
        for tr in ds.touches(oid, g):
            if not tr.success:
                continue
            mask = touch_mask(tr.reading, depth.untouched).reshape(-1)
            cloud = depth_to_cloud(predict_impression(depth, tr.reading), tr.pose)[mask]
            local.append(chamfer(cloud, tr.local_cloud()) if len(cloud) else None)
    out.mkdir(parents=True, exist_ok=True)
    from .charts import atlas_to_mesh
    write_obj(out / f"{oid}.obj", atlas_to_mesh(atlas))
    metrics = {"object": oid, "model": name, "global_chamfer": mesh_chamfer(atlas, mesh, cfg.eval_samples),
               "per_touch_local_chamfer": local, "grasp_count": grasps,
               "n_vertices": atlas.n_vertices}
    (out / f"{oid}.json").write_text(json.dumps(metrics, indent=1, sort_keys=True))
    return metrics


def cmd_predict(args):
    run = _run_dir(args)
    cfg = _config(args)
    out = Path(args.out) if args.out else run / "predictions" / args.model
    print(json.dumps(predict_sample(run, cfg, args.model, args.object, args.start, out), sort_keys=True))


def cmd_eval_global(args):
    run = _run_dir(args)
    cfg = _config(args)
    modality, g = _modality_of(args.model)
    prefix = Path(args.out) if args.out else run / "reports" / f"global_{args.model}_{args.split}"
    rep = H.eval_global(_model(run, args.model), H.Dataset(run / "dataset"), run, args.split,
                        modality, g, cfg, prefix)
    print(json.dumps(rep, sort_keys=True))


def cmd_eval_rings(args):
    run = _run_dir(args)
    cfg = _config(args)
    modality, g = _modality_of(args.model)
    prefix = Path(args.out) if args.out else run / "reports" / f"rings_{args.model}_{args.split}"
    rep = H.eval_local_rings(_model(run, args.model), H.Dataset(run / "dataset"), run, args.split,
                             modality, g, cfg, prefix)
    print(json.dumps(rep, sort_keys=True))


def cmd_eval_grasps(args):
    run = _run_dir(args)
    cfg = _config(args)
    models = {g: _model(run, H.model_name(args.modality, g)) for g in cfg.grasp_counts}
    prefix = Path(args.out) if args.out else run / "reports" / f"grasps_{args.modality.replace('+', '-')}_{args.split}"
    rep = H.eval_multi_grasp(models, H.Dataset(run / "dataset"), run, args.split, args.modality, cfg, prefix)
    print(json.dumps(rep, sort_keys=True))


def cmd_export(args):
    """Predicted atlases (chart files), meshes (OBJ) and surface samples
    (PLY) for every object of a split."""
    run = _run_dir(args)
    cfg = _config(args)
    ds = H.Dataset(run / "dataset")
    model = _model(run, args.model)
    modality, g = _modality_of(args.model)
    out = Path(args.out) if args.out else run / "export" / args.model
    written = []
    for oid in ds.ids(args.split):
        fitted = H.load_fitted(ds, run, oid)
        scene = H.build_scene(ds, fitted, oid, H.grasp_window(0, g, ds.n_grasps), modality, H.make_camera(cfg))
        atlas = deform(model, scene_atlas(scene, model.config), scene)
        save_atlas(out / oid / "atlas", atlas)
        from .charts import atlas_to_mesh
        write_obj(out / oid / "mesh.obj", atlas_to_mesh(atlas))
        faces = loss_faces(atlas)
        from .reconstruct import atlas_samples
        fidx, w = atlas_samples(atlas.positions(), faces, cfg.eval_samples, np.random.default_rng(0))
        write_ply(out / oid / "samples.ply", np.einsum("nk,nkd->nd", w, atlas.positions()[faces[fidx]]))
        written.append(oid)
    print(json.dumps({"out": str(out), "objects": len(written)}))


def cmd_run(args):
    cfg = _config(args)
    out = Path(args.out or args.run or "run")
    t0 = time.time()
    summary = H.run_experiment(cfg, out, lambda m: _log(f"[{time.time() - t0:8.1f}s] {m}"))
    print(json.dumps({k: summary[k] for k in ("global", "grasps", "rings")}, sort_keys=True))


def cmd_show_config(args):
    print(format_config(_config(args)), end="")


# ------------------------------------------------------------------ parser

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="touchcharts", description="Tactile/visual chart-based shape reconstruction.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def add(name, func, help_text, run=True, out=True):
        sp = sub.add_parser(name, help=help_text)
        sp.add_argument("--config", help="flat key = value config file")
        sp.add_argument("--seed", type=int, default=None, help="override the master seed")
        if run:
            sp.add_argument("--run", help="run directory (dataset/, depth/, fitted/, models/)")
        if out:
            sp.add_argument("--out", help="output path")
        sp.set_defaults(func=func)
        return sp

    sp = add("gen-data", cmd_gen_data, "generate the procedural dataset", run=False)
    sp.set_defaults(out_required=True)
    add("train-depth", cmd_train_depth, "train the touch depth predictor")
    sp = add("fit-touch", cmd_fit_touch, "fit touch charts (whole run, or one cloud)")
    sp.add_argument("--cloud", help="XYZ point cloud to fit")
    sp.add_argument("--pose", help="sensor pose JSON for --cloud")
    sp = add("train-deform", cmd_train_deform, "train a deformation model")
    sp.add_argument("--modality", default="unoccluded+touch")
    sp.add_argument("--grasps", type=int, default=1)
    sp = add("predict", cmd_predict, "reconstruct one object (OBJ + metrics JSON)")
    sp.add_argument("--model", required=True)
    sp.add_argument("--object", required=True)
    sp.add_argument("--start", type=int, default=0, help="first grasp of the window")
    for name, func, text in (("eval-global", cmd_eval_global, "per-class Chamfer report"),
                             ("eval-rings", cmd_eval_rings, "local error around touch sites")):
        sp = add(name, func, text)
        sp.add_argument("--model", required=True)
        sp.add_argument("--split", default="test")
    sp = add("eval-grasps", cmd_eval_grasps, "Chamfer against number of grasps")
    sp.add_argument("--modality", default="touch")
    sp.add_argument("--split", default="test")
    sp = add("export", cmd_export, "write predicted atlases, meshes and samples")
    sp.add_argument("--model", required=True)
    sp.add_argument("--split", default="test")
    add("run", cmd_run, "full protocol: data, training and every evaluation")
    add("show-config", cmd_show_config, "print the effective configuration", out=False)
    return p


def cli_main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_help())
        if args.command == "gen-data" and not args.out:
            raise UsageError("gen-data requires --out")
        if getattr(args, "run", "x") is None and args.command not in ("run", "fit-touch"):
            raise UsageError(f"{args.command} requires --run")
    except UsageError as e:
        print(str(e).rstrip(), file=sys.stderr)
        return 1
    try:
        args.func(args)
    except UsageError as e:
        print(str(e), file=sys.stderr)
        return 1
    except Exception as e:  # runtime failure: report and exit 2
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 2
    return 0


def main():
    sys.exit(cli_main())


if __name__ == "__main__":
    main()
