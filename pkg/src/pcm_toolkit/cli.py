"""Command-line front end: one subcommand per pipeline stage.

    pcm synth    generate a synthetic fixture bundle
    pcm build    build an up-to-date scene from posed scans + cuboids
    pcm edit     apply an edit script, producing an outdated scene + delta
    pcm export   pack deltas into a portable archive
    pcm import   reconstruct edited scenes from an archive + base scene
    pcm project  generate change masks for every camera
    pcm delete   visibility-based point deletion under a change mask
    pcm add      register a predicted reconstruction into the map frame
    pcm eval     score an update with the four point-set distances

Every run writes its primary artifacts plus a machine-readable manifest
(inputs, parameter values, digests). Outputs are written atomically and
inputs are validated before anything is written, so a failed run leaves no
partial outputs. Behavior is fully determined by config + inputs; rerunning
with identical inputs reproduces byte-identical primary outputs (timestamps
are confined to the manifest).

Configuration: ``--config file.json`` supplies defaults; explicit flags win.
The ``PCM_TOOLKIT_LOG`` environment variable sets the log level.
"""

from __future__ import annotations

import argparse
import datetime
import hashlib
import json
import logging
import os
import sys
from dataclasses import dataclass

import numpy as np

from . import editor, formats, metrics, projector, synth, updater
from .builder import (
    Cuboid,
    LabelTaxonomy,
    PosedScan,
    build_static_scene,
    read_cuboids_json,
    write_cuboids_json,
)
from .geometry import CameraModel, PointCloud
from .updater import CorrespondenceSet, PredictedReconstruction
from .voxels import DEFAULT_RESOLUTION, load_scene, save_scene, scene_points

logger = logging.getLogger(__name__)


@dataclass
class RunConfig:
    resolution: float = DEFAULT_RESOLUTION
    occlusion_radius_px: int = projector.DEFAULT_OCCLUSION_RADIUS_PX
    occlusion_margin_m: float = projector.DEFAULT_OCCLUSION_MARGIN_M
    oracle: bool = False
    seed: int = 0
    threads: int = 1


def _load_config(args) -> RunConfig:
    cfg = RunConfig()
    if getattr(args, "config", None):
        with open(args.config, "r", encoding="utf-8") as fh:
            for key, value in json.load(fh).items():
                if not hasattr(cfg, key):
                    raise ValueError(f"unknown config key: {key!r}")
                setattr(cfg, key, value)
    for key in ("resolution", "occlusion_radius_px", "occlusion_margin_m", "seed", "threads"):
        value = getattr(args, key, None)
        if value is not None:
            setattr(cfg, key, value)
    if getattr(args, "oracle", False):
        cfg.oracle = True
    if cfg.resolution <= 0:
        raise ValueError("resolution must be positive")
    return cfg


def _method(cfg: RunConfig) -> str:
    return "brute" if cfg.oracle else "kdtree"


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _require_inputs(paths) -> None:
    for path in paths:
        if path is None:
            continue
        if not os.path.exists(path):
            raise FileNotFoundError(f"missing input: {path}")


def _write_json(path, payload) -> None:
    formats.atomic_write_bytes(
        path, (json.dumps(payload, indent=1, sort_keys=True) + "\n").encode("utf-8")
    )


def _write_manifest(out_dir, command: str, params: dict, inputs, outputs) -> None:
    manifest = {
        "command": command,
        "parameters": params,
        "inputs": {os.fspath(p): _sha256(p) for p in inputs if p and os.path.isfile(p)},
        "outputs": {os.fspath(p): _sha256(p) for p in outputs},
        "created_utc": datetime.datetime.now(datetime.timezone.utc).isoformat(),
    }
    _write_json(os.path.join(out_dir, "manifest.json"), manifest)


def _read_cameras(path) -> list[CameraModel]:
    with open(path, "r", encoding="utf-8") as fh:
        return [CameraModel.from_dict(d) for d in json.load(fh)]


def _read_scan(scan_dir, index: int) -> PosedScan:
    poses = formats.read_poses(os.path.join(scan_dir, "poses.txt"))
    if index >= len(poses):
        raise ValueError(f"no scan with index {index} in {scan_dir}")
    timestamp, pose = poses[index]
    cloud = formats.read_ply(os.path.join(scan_dir, f"scan_{index}.ply"))
    return PosedScan(cloud, pose, timestamp)


def _write_scans(scan_dir, scans) -> list[str]:
    os.makedirs(scan_dir, exist_ok=True)
    written = []
    entries = []
    for k, scan in enumerate(scans):
        path = os.path.join(scan_dir, f"scan_{k}.ply")
        formats.write_ply(path, scan.cloud)
        written.append(path)
        entries.append((scan.timestamp, scan.pose))
    poses_path = os.path.join(scan_dir, "poses.txt")
    formats.write_poses(poses_path, entries)
    written.append(poses_path)
    return written


def _read_changes(path) -> projector.ChangeSet3D:
    with open(path, "r", encoding="utf-8") as fh:
        data = json.load(fh)
    objects = tuple(
        projector.ChangeObject(
            o["object_id"],
            PointCloud(np.asarray(o["points"], dtype=np.float64)),
            o["change_kind"],
        )
        for o in data["objects"]
    )
    return projector.ChangeSet3D(objects)


def _write_changes(path, changes: projector.ChangeSet3D) -> None:
    payload = {
        "objects": [
            {
                "object_id": o.object_id,
                "change_kind": o.change_kind,
                "points": o.cloud.points.tolist(),
            }
            for o in changes.objects
        ]
    }
    _write_json(path, payload)


def _read_correspondences(path) -> CorrespondenceSet:
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            values = [float(v) for v in line.split()]
            if len(values) != 6:
                raise ValueError(f"correspondence rows need 6 values, got: {line!r}")
            rows.append(values)
    arr = np.asarray(rows, dtype=np.float64).reshape(-1, 6)
    return CorrespondenceSet(arr[:, :3], arr[:, 3:])


def _write_correspondences(path, corr: CorrespondenceSet) -> None:
    lines = [
        " ".join(f"{v:.17g}" for v in np.concatenate([s, t]))
        for s, t in zip(corr.source, corr.target)
    ]
    formats.atomic_write_bytes(path, ("\n".join(lines) + "\n").encode("ascii"))


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_synth(args) -> int:
    cfg = _load_config(args)
    if args.recipe:
        _require_inputs([args.recipe])
        with open(args.recipe, "r", encoding="utf-8") as fh:
            recipe = synth.SceneRecipe.from_json(fh.read())
        if args.seed is not None:
            recipe = synth.SceneRecipe(**{**json.loads(recipe.to_json()), "seed": args.seed})
    else:
        recipe = synth.SceneRecipe(seed=cfg.seed, family=args.family)
    bundle = synth.generate(recipe)
    out = args.out
    os.makedirs(out, exist_ok=True)
    outputs = []

    def emit(path):
        outputs.append(path)
        return path

    formats.atomic_write_bytes(emit(os.path.join(out, "recipe.json")), recipe.to_json().encode())
    save_scene(emit(os.path.join(out, "up_to_date.pcm")), bundle.up_to_date)
    save_scene(emit(os.path.join(out, "outdated.pcm")), bundle.outdated)
    editor.export_portable(bundle.up_to_date, [bundle.delta], emit(os.path.join(out, "delta.pcme")))
    _write_json(
        emit(os.path.join(out, "edit_script.json")),
        {"base_fingerprint": bundle.up_to_date.fingerprint(), "edits": list(bundle.edit_ops)},
    )
    bundle.ground.save_json(emit(os.path.join(out, "ground.json")))
    bundle.patch_db.save_dir(os.path.join(out, "patches"))
    outputs.append(os.path.join(out, "patches", "manifest.json"))
    write_cuboids_json(emit(os.path.join(out, "cuboids.json")), bundle.cuboids)
    _write_json(emit(os.path.join(out, "cameras.json")), [c.to_dict() for c in bundle.cameras])
    outputs += _write_scans(os.path.join(out, "scans"), bundle.scans)
    outputs += _write_scans(os.path.join(out, "survey"), bundle.survey_scans)
    _write_changes(emit(os.path.join(out, "changes.json")), bundle.changes)
    _write_json(
        emit(os.path.join(out, "ground_truth.json")),
        {
            "star_added": sorted(map(list, bundle.star_added_keys)),
            "star_deleted": sorted(map(list, bundle.star_deleted_keys)),
        },
    )
    if bundle.prediction is not None:
        formats.write_ply(
            emit(os.path.join(out, "prediction.ply")),
            bundle.prediction.cloud,
            extra={
                "u": bundle.prediction.pixels[:, 0],
                "v": bundle.prediction.pixels[:, 1],
                "image_index": bundle.prediction.image_indices.astype(np.uint32),
            },
        )
        _write_correspondences(
            emit(os.path.join(out, "correspondences.txt")), bundle.correspondences
        )
    _write_manifest(out, "synth", json.loads(recipe.to_json()), [args.recipe], outputs)
    print(f"synth: {bundle.up_to_date.num_voxels} voxels up-to-date, "
          f"{bundle.outdated.num_voxels} outdated -> {out}")
    return 0


def cmd_build(args) -> int:
    cfg = _load_config(args)
    _require_inputs([args.poses, args.cuboids, args.taxonomy])
    if not os.path.isdir(args.scans):
        raise FileNotFoundError(f"missing input: {args.scans}")
    poses = formats.read_poses(args.poses)
    scan_files = sorted(
        f for f in os.listdir(args.scans) if f.endswith(".ply")
    )
    if len(scan_files) != len(poses):
        raise ValueError("poses file does not match the number of scans")
    scans = [
        PosedScan(formats.read_ply(os.path.join(args.scans, f)), pose, ts)
        for f, (ts, pose) in zip(scan_files, poses)
    ]
    cuboids = read_cuboids_json(args.cuboids)
    taxonomy = (
        LabelTaxonomy.from_json_file(args.taxonomy)
        if args.taxonomy
        else LabelTaxonomy.default()
    )
    scene = build_static_scene(scans, cuboids, taxonomy, cfg.resolution, origin=(0, 0, 0))
    os.makedirs(args.out, exist_ok=True)
    scene_path = os.path.join(args.out, "scene.pcm")
    save_scene(scene_path, scene)
    _write_manifest(
        args.out,
        "build",
        {"resolution": cfg.resolution},
        [args.poses, args.cuboids, args.taxonomy],
        [scene_path],
    )
    print(f"build: {scene.num_voxels} voxels -> {scene_path}")
    return 0


def cmd_edit(args) -> int:
    _load_config(args)
    _require_inputs([args.scene, args.script, args.ground])
    base = load_scene(args.scene)
    with open(args.script, "r", encoding="utf-8") as fh:
        script = json.load(fh)
    expected = script.get("base_fingerprint")
    if expected is not None and int(expected) != base.fingerprint():
        raise ValueError("delta does not target this scene")
    ground = editor.GroundModel.load_json(args.ground) if args.ground else None
    patch_db = editor.PatchDatabase.load_dir(args.patches) if args.patches else None

    scene = base
    merged = None
    for op in script["edits"]:
        kind = op["op"]
        if kind == "delete_selection":
            delta = editor.delete_by_selection(scene, editor.region_from_dict(op["region"]))
        elif kind == "delete_cuboid":
            delta = editor.delete_by_cuboid(scene, Cuboid.from_dict(op["cuboid"]))
        elif kind == "insert_patch":
            if patch_db is None or ground is None:
                raise ValueError("insert_patch edits need --patches and --ground")
            delta = editor.insert_patch(
                scene, patch_db, op["patch_id"], op["xy"], float(op.get("yaw", 0.0)), ground
            )
        else:
            raise ValueError(f"unknown edit op: {kind!r}")
        merged = delta if merged is None else editor.merge_deltas(base, merged, delta)
        scene = editor.apply_delta(scene, delta)
    if merged is None:
        merged = editor.EditDelta.empty(base)

    os.makedirs(args.out, exist_ok=True)
    edited_path = os.path.join(args.out, "edited.pcm")
    delta_path = os.path.join(args.out, "delta.pcme")
    save_scene(edited_path, scene)
    editor.export_portable(base, [merged], delta_path)
    _write_manifest(
        args.out,
        "edit",
        {"edits": len(script["edits"])},
        [args.scene, args.script, args.ground, args.patches and os.path.join(args.patches, "manifest.json")],
        [edited_path, delta_path],
    )
    print(f"edit: {len(script['edits'])} ops, {scene.num_voxels} voxels -> {edited_path}")
    return 0


def cmd_export(args) -> int:
    _load_config(args)
    _require_inputs([args.base] + args.deltas)
    base = load_scene(args.base)
    deltas = []
    for path in args.deltas:
        fingerprint, parsed = editor.read_portable(path)
        if fingerprint != base.fingerprint():
            raise ValueError("delta does not target this scene")
        deltas.extend(parsed)
    editor.export_portable(base, deltas, args.out)
    out_dir = os.path.dirname(os.path.abspath(args.out))
    _write_manifest(
        out_dir, "export", {"deltas": len(deltas)}, [args.base] + args.deltas, [args.out]
    )
    print(f"export: {len(deltas)} deltas -> {args.out}")
    return 0


def cmd_import(args) -> int:
    _load_config(args)
    _require_inputs([args.archive, args.base])
    base = load_scene(args.base)
    scenes = editor.import_portable(args.archive, base)
    os.makedirs(args.out, exist_ok=True)
    outputs = []
    for i, scene in enumerate(scenes):
        path = os.path.join(args.out, f"edited_{i:03d}.pcm")
        save_scene(path, scene)
        outputs.append(path)
    _write_manifest(args.out, "import", {}, [args.archive, args.base], outputs)
    print(f"import: {len(scenes)} scenes -> {args.out}")
    return 0


def cmd_project(args) -> int:
    cfg = _load_config(args)
    _require_inputs([args.changes, args.cameras])
    changes = _read_changes(args.changes)
    cameras = _read_cameras(args.cameras)
    params = projector.OcclusionParams(cfg.occlusion_radius_px, cfg.occlusion_margin_m)
    os.makedirs(args.out, exist_ok=True)
    outputs = []
    for k, cam in enumerate(cameras):
        scan = _read_scan(args.scans, k)
        sparse, mask = projector.build_change_mask(changes, cam, scan, params)
        base = os.path.join(args.out, f"mask_cam{k}")
        formats.write_mask_png(base + ".png", mask.raster)
        formats.write_mask_png(
            base + "_added.png", mask.restricted_to_kind("added").raster
        )
        formats.write_mask_png(
            base + "_deleted.png", mask.restricted_to_kind("deleted").raster
        )
        _write_json(base + ".json", projector.sidecar_dict(sparse, mask))
        outputs += [base + ".png", base + "_added.png", base + "_deleted.png", base + ".json"]
    _write_manifest(
        args.out,
        "project",
        {"occlusion_radius_px": params.radius_px, "occlusion_margin_m": params.margin_m},
        [args.changes, args.cameras],
        outputs,
    )
    print(f"project: {len(cameras)} cameras -> {args.out}")
    return 0


def cmd_delete(args) -> int:
    cfg = _load_config(args)
    _require_inputs([args.scene, args.cameras, args.mask])
    scene = load_scene(args.scene)
    cameras = _read_cameras(args.cameras)
    cam = cameras[args.camera_index]
    scan = _read_scan(args.scans, args.camera_index)
    raster = formats.read_mask_png(args.mask)
    mask = projector.ChangeMask(raster.shape[1], raster.shape[0], raster, ())
    ref = projector.depth_reference(scan, cam)
    report = updater.classify_visibility(
        scene_points(scene), cam, ref, cfg.occlusion_margin_m, cfg.occlusion_radius_px
    )
    p_del = updater.predict_deletions(
        scene, mask, cam, ref, cfg.occlusion_margin_m, cfg.occlusion_radius_px
    )
    os.makedirs(args.out, exist_ok=True)
    ply_path = os.path.join(args.out, "p_del.ply")
    report_path = os.path.join(args.out, "delete_report.json")
    formats.write_ply(ply_path, p_del)
    _write_json(
        report_path,
        {"deleted": len(p_del), "visibility": report.counts},
    )
    _write_manifest(
        args.out,
        "delete",
        {
            "camera_index": args.camera_index,
            "occlusion_radius_px": cfg.occlusion_radius_px,
            "occlusion_margin_m": cfg.occlusion_margin_m,
            "deleted": len(p_del),
        },
        [args.scene, args.cameras, args.mask],
        [ply_path, report_path],
    )
    print(f"delete: {len(p_del)} voxel centers -> {ply_path}")
    return 0


def cmd_add(args) -> int:
    cfg = _load_config(args)
    _require_inputs([args.prediction, args.correspondences] + args.masks)
    cols = formats.read_ply_columns(args.prediction)
    for needed in ("x", "y", "z", "u", "v", "image_index"):
        if needed not in cols:
            raise ValueError(f"prediction PLY lacks property {needed!r}")
    cloud = PointCloud(
        np.column_stack([cols["x"], cols["y"], cols["z"]]).astype(np.float64)
    )
    pred = PredictedReconstruction(
        cloud=cloud,
        pixels=np.column_stack([cols["u"], cols["v"]]).astype(np.float64),
        image_indices=cols["image_index"].astype(np.int64),
    )
    corr = _read_correspondences(args.correspondences)
    masks = [formats.read_mask_png(p) for p in args.masks]
    result = updater.register_addition(pred, corr, masks)
    p_add = result.cloud
    if args.dedupe:
        p_add = updater.dedupe_to_voxels(p_add, cfg.resolution, (0.0, 0.0, 0.0))
    os.makedirs(args.out, exist_ok=True)
    ply_path = os.path.join(args.out, "p_add.ply")
    report_path = os.path.join(args.out, "add_report.json")
    formats.write_ply(ply_path, p_add)
    _write_json(
        report_path,
        {
            "added": len(p_add),
            "selected": result.selected_count,
            "rmse_m": result.rmse,
            "scale": result.transform.scale,
        },
    )
    _write_manifest(
        args.out,
        "add",
        {"dedupe": bool(args.dedupe), "resolution": cfg.resolution},
        [args.prediction, args.correspondences] + args.masks,
        [ply_path, report_path],
    )
    print(f"add: {len(p_add)} points, rmse {result.rmse:.3g} m -> {ply_path}")
    return 0


def cmd_eval(args) -> int:
    cfg = _load_config(args)
    _require_inputs([args.outdated, args.truth, args.updated, args.deletions, args.additions])
    p_out = load_scene(args.outdated)
    p_star = load_scene(args.truth)
    if args.updated:
        p_upd = load_scene(args.updated)
    elif args.deletions or args.additions:
        p_del = formats.read_ply(args.deletions) if args.deletions else PointCloud.empty()
        p_add = formats.read_ply(args.additions) if args.additions else PointCloud.empty()
        p_upd = updater.apply_update(p_out, p_del, p_add)
    else:
        raise ValueError("eval needs --updated or --deletions/--additions")
    diff = metrics.diff_sets(p_out, p_upd, p_star)
    evaluation = metrics.evaluate_update(diff, method=_method(cfg), workers=cfg.threads)
    deletion_keys_equal = diff.deleted_keys == diff.star_deleted_keys
    os.makedirs(args.out, exist_ok=True)
    metrics_path = os.path.join(args.out, "metrics.json")
    payload = evaluation.to_dict()
    payload["key_sets"] = {
        "added": len(diff.added_keys),
        "deleted": len(diff.deleted_keys),
        "star_added": len(diff.star_added_keys),
        "star_deleted": len(diff.star_deleted_keys),
        "deletion_keys_equal": deletion_keys_equal,
    }
    _write_json(metrics_path, payload)
    _write_manifest(
        args.out,
        "eval",
        {"oracle": cfg.oracle, "threads": cfg.threads},
        [args.outdated, args.truth, args.updated, args.deletions, args.additions],
        [metrics_path],
    )
    print(f"eval: -> {metrics_path}")
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file; explicit flags override it")
    p.add_argument("--resolution", type=float, default=None)
    p.add_argument("--occlusion-radius-px", dest="occlusion_radius_px", type=int, default=None)
    p.add_argument("--occlusion-margin-m", dest="occlusion_margin_m", type=float, default=None)
    p.add_argument("--oracle", action="store_true", help="use the brute-force metric oracle")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--threads", type=int, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pcm", description="Point-cloud-map maintenance toolkit"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic fixture bundle")
    p.add_argument("--recipe", help="recipe JSON file")
    p.add_argument("--family", default="generic", choices=synth.FAMILIES)
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("build", help="build a static scene from scans")
    p.add_argument("--scans", required=True, help="directory of PLY scans")
    p.add_argument("--poses", required=True)
    p.add_argument("--cuboids", required=True)
    p.add_argument("--taxonomy", default=None)
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_build)

    p = sub.add_parser("edit", help="apply an edit script")
    p.add_argument("--scene", required=True)
    p.add_argument("--script", required=True)
    p.add_argument("--patches", default=None)
    p.add_argument("--ground", default=None)
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_edit)

    p = sub.add_parser("export", help="pack deltas into a portable archive")
    p.add_argument("--base", required=True)
    p.add_argument("--deltas", nargs="+", required=True)
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_export)

    p = sub.add_parser("import", help="reconstruct edited scenes from an archive")
    p.add_argument("--archive", required=True)
    p.add_argument("--base", required=True)
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_import)

    p = sub.add_parser("project", help="generate change masks")
    p.add_argument("--changes", required=True)
    p.add_argument("--cameras", required=True)
    p.add_argument("--scans", required=True, help="reference scan directory")
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_project)

    p = sub.add_parser("delete", help="visibility-based deletion under a mask")
    p.add_argument("--scene", required=True)
    p.add_argument("--cameras", required=True)
    p.add_argument("--camera-index", dest="camera_index", type=int, default=0)
    p.add_argument("--scans", required=True)
    p.add_argument("--mask", required=True)
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_delete)

    p = sub.add_parser("add", help="register predicted additions")
    p.add_argument("--prediction", required=True)
    p.add_argument("--correspondences", required=True)
    p.add_argument("--masks", nargs="+", required=True)
    p.add_argument("--dedupe", action="store_true", help="deduplicate at scene resolution")
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_add)

    p = sub.add_parser("eval", help="score an update")
    p.add_argument("--outdated", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--updated", default=None)
    p.add_argument("--deletions", default=None)
    p.add_argument("--additions", default=None)
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_eval)

    return parser


def main(argv=None) -> int:
    level = os.environ.get("PCM_TOOLKIT_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING))
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:  # one-line diagnostic, nonzero exit
        print(f"pcm {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
