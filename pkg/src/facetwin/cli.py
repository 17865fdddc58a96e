"""Command-line front end.

Exit status: 0 on success, 1 on a numerical failure (partial output may
exist), 2 on bad input or usage.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import sys
import threading
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import dr, evaluation, plotting, sampler, solver, synthetic, texture
from .camera import init_intrinsics
from .config import PipelineConfig, StructuredLog, load_config, parse_ratios
from .mesh import Mesh, load_mesh, save_mesh

EXIT_OK, EXIT_NUMERICAL, EXIT_INPUT = 0, 1, 2


class CommandError(Exception):
    def __init__(self, message: str, code: int = EXIT_INPUT):
        super().__init__(message)
        self.code = code


def _float_list(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise CommandError(f"not a comma-separated number list: {text!r}") from None


def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise CommandError(f"not a comma-separated index list: {text!r}") from None


def _image_size(text: str) -> tuple[int, int]:
    try:
        w, h = text.lower().split("x")
        return int(w), int(h)
    except ValueError:
        raise CommandError(f"image size must look like 640x480, got {text!r}") from None


def _existing(path: str | None, what: str) -> Path:
    if not path:
        raise CommandError(f"{what} not given")
    p = Path(path)
    if not p.exists():
        raise CommandError(f"{what} not found: {p}")
    return p


def _mapped(jobs: int, fn: Callable, items: Sequence) -> list:
    """Order-preserving map; threads only when more than one job is requested."""
    if jobs <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


# ---------------------------------------------------------------- DR


def cmd_encode(args, cfg: PipelineConfig) -> int:
    reference = load_mesh(_existing(args.reference or cfg.paths.template, "reference mesh"))
    mesh = load_mesh(_existing(args.mesh, "mesh"))
    if mesh.n_vertices != reference.n_vertices:
        raise CommandError("mesh and reference differ in vertex count")
    feature = dr.encode_dr(mesh, reference)
    dr.save_feature(feature, args.out, Path(args.reference or cfg.paths.template).name)
    back = dr.DRDecoder(reference).decode(feature, 0, mesh.vertices[0])
    err = float(np.abs(back.vertices - mesh.vertices).max()) / max(mesh.bbox_diagonal(), 1e-300)
    print(f"round_trip_max_error_rel={err:.3e}")
    return EXIT_OK


def cmd_decode(args, cfg: PipelineConfig) -> int:
    reference = load_mesh(_existing(args.reference or cfg.paths.template, "reference mesh"))
    feature = dr.load_feature(_existing(args.feature, "feature"))
    mesh = dr.decode_dr(feature, reference)
    save_mesh(mesh, args.out)
    if args.compare:
        other = load_mesh(_existing(args.compare, "comparison mesh"))
        if other.n_vertices != mesh.n_vertices:
            raise CommandError("comparison mesh differs in vertex count")
        shift = other.vertices[0] - mesh.vertices[0]
        err = float(np.abs(mesh.vertices + shift - other.vertices).max()) / max(other.bbox_diagonal(), 1e-300)
        print(f"round_trip_max_error_rel={err:.3e}")
    return EXIT_OK


# ---------------------------------------------------------------- sampling


def cmd_sample(args, cfg: PipelineConfig) -> int:
    if args.count < 0:
        raise CommandError("--count must be non-negative")
    if args.count == 0:
        print("count=0; nothing written")
        return EXIT_OK
    dataset = sampler.load_dataset(_existing(args.manifest or cfg.paths.manifest, "dataset manifest"))
    ratios = parse_ratios(args.ratios or cfg.sampling.ratios)
    m = args.m or cfg.sampling.m
    out = Path(args.out_dir or cfg.output.directory)
    out.mkdir(parents=True, exist_ok=True)
    local = threading.local()

    def draw(k_stream):
        k, stream = k_stream
        if not hasattr(local, "decoder"):
            local.decoder = dr.DRDecoder(dataset.reference)
        face = sampler.draw_face(dataset, stream, args.group, m, ratios, local.decoder)
        save_mesh(face.mesh, out / f"face_{k:05d}.obj")
        return face

    streams = list(enumerate(sampler.draw_streams(cfg.output.seed, args.count)))
    faces = _mapped(args.jobs, draw, streams)
    log = StructuredLog(out / "sampling.log")
    counts: dict[str, int] = {}
    for k, face in enumerate(faces):
        counts[face.group] = counts.get(face.group, 0) + 1
        log.write("draw", index=k, seed=cfg.output.seed, file=f"face_{k:05d}.obj", **face.record())
    log.write("summary", seed=cfg.output.seed, count=args.count, m=m, group_counts=dict(sorted(counts.items())),
              ethnicity_ratios=None if args.group else ratios)
    for tag, n in sorted(counts.items()):
        print(f"{tag},{n}")
    return EXIT_OK


# ---------------------------------------------------------------- fitting


def _landmark_problem(args, cfg: PipelineConfig):
    template = load_mesh(_existing(args.template or cfg.paths.template, "template mesh"))
    anchors_path = _existing(args.anchors or cfg.paths.anchors, "anchor table")
    basis_path = args.basis or cfg.paths.basis
    points, size = solver.load_landmarks(_existing(args.landmarks, "landmark file"))
    try:
        lms = solver.load_anchor_table(anchors_path, points)
    except ValueError as exc:
        raise CommandError(f"landmarks vs anchor table: {exc}") from None
    basis = solver.load_basis(_existing(basis_path, "blendshape basis")) if basis_path \
        else solver.BlendshapeBasis.empty(template.n_vertices)
    if basis.blendshapes.shape[1] != template.n_vertices:
        raise CommandError("blendshape basis does not match the template vertex count")
    if args.image_size:
        size = _image_size(args.image_size)
    if size is None:
        raise CommandError("image size unknown; pass --image-size WxH")
    intr = init_intrinsics(int(size[0]), int(size[1]), cfg.camera.swap_principal_point)
    return template, lms, basis, intr


def cmd_fit(args, cfg: PipelineConfig) -> int:
    template, lms, basis, intr = _landmark_problem(args, cfg)
    out = Path(args.out_dir or cfg.output.directory)
    out.mkdir(parents=True, exist_ok=True)
    result = solver.fit(template, lms, basis, intr, cfg.solver_config())
    params = result.params
    solver.save_fit(params, out / "fit.json", intr)
    save_mesh(template.with_vertices(params.face(template, basis)), out / "face.obj")
    log = StructuredLog(out / "diagnostics.log")
    for rec in result.diagnostics:
        log.write("iteration", **rec)
    rmse = solver.reprojection_rmse(params, template, basis, result.landmarks, intr)
    log.write("result", converged=result.converged, warnings=result.warnings, landmark_rmse_px=rmse)
    plotting.plot_fit_diagnostics(result.diagnostics, out / "diagnostics.png")
    print("iteration,E_l,E_c,E_r,E")
    for d in result.diagnostics:
        print(f"{d['iteration']},{d['E_l']:.9g},{d['E_c']:.9g},{d['E_r']:.9g},{d['E']:.9g}")
    print(f"landmark_rmse_px={rmse:.6g}")
    for w in result.warnings:
        print(f"warning: {w}", file=sys.stderr)
    if not result.converged:
        raise CommandError("fit did not converge; outputs written", EXIT_NUMERICAL)
    return EXIT_OK


# ---------------------------------------------------------------- texture


def _eye_polygons(landmarks: Path | None) -> list[np.ndarray]:
    if landmarks is None:
        return []
    pts, _ = solver.load_landmarks(landmarks)
    if len(pts) < 48:
        raise CommandError("eye polygons need the 68-point markup")
    return [pts[36:42], pts[42:48]]


def _background(args, cfg: PipelineConfig, resolution: int, face: Mesh, template: Mesh) -> texture.UVTexture:
    if args.background:
        bg = texture.load_texture(_existing(args.background, "background texture"), args.background_mask)
    elif args.library:
        lib_path = _existing(args.library, "texture library")
        data = json.loads(lib_path.read_text(encoding="utf-8"))
        library = [texture.LibraryTexture(item["id"], texture.load_texture(lib_path.parent / item["texture"]),
                                          dr.load_feature(lib_path.parent / item["feature"]))
                   for item in data["textures"]]
        query = None if args.texture_id else dr.encode_dr(face, template)
        bg = texture.choose_background_texture(library, query, args.texture_id).texture
    else:
        raise CommandError("need --background or --library")
    if bg.shape != (resolution, resolution):
        raise CommandError(f"background is {bg.shape[1]}x{bg.shape[0]}, expected {resolution}x{resolution}")
    return bg


def cmd_texture(args, cfg: PipelineConfig) -> int:
    params, intr = solver.load_fit(_existing(args.fit, "fit file"))
    if intr is None:
        raise CommandError("fit file carries no intrinsics")
    face = load_mesh(_existing(args.face, "fitted face mesh"))
    template_path = args.template or cfg.paths.template
    template = load_mesh(_existing(template_path, "template mesh")) if template_path else face
    if face.uv is None:
        if template.uv is None or template.n_vertices != face.n_vertices:
            raise CommandError("fitted face has no UVs and no matching template was given")
        face = Mesh(face.vertices, face.faces, template.uv)
    image, _ = texture.read_image(_existing(args.image, "source image"))
    resolution = args.resolution or cfg.texture.resolution
    bg = _background(args, cfg, resolution, face, template)
    ctx = texture.ProjectionContext(face, face.vertices, params.extrinsics, intr, image)
    eyes = _eye_polygons(Path(args.landmarks) if args.landmarks else None)
    fg = texture.project_texture(ctx, (resolution, resolution), eyes, eps_fraction=cfg.texture.depth_eps_fraction)
    channels = bg.pixels.shape[2]
    if fg.pixels.shape[2] != channels:
        px = fg.pixels.mean(2, keepdims=True) if channels == 1 else np.repeat(fg.pixels, channels, axis=2)
        fg = texture.UVTexture(px, fg.mask, fg.bit_depth)
    fg = texture.UVTexture(fg.pixels, fg.mask, bg.bit_depth)
    blended = texture.poisson_blend(fg, bg)
    # the written mask records where the photo contributed
    blended = texture.UVTexture(blended.pixels, fg.mask, blended.bit_depth)
    texture.save_texture(blended, args.out, args.mask)
    counts = np.bincount(blended.mask.ravel(), minlength=3)
    print(f"projected={int(counts[texture.PROJECTED])},boundary={int(counts[texture.BOUNDARY])},"
          f"background={int(counts[texture.BACKGROUND])}")
    return EXIT_OK


# ---------------------------------------------------------------- evaluation


def _alignment_indices(mesh: Mesh, given: str | None, what: str) -> list[int]:
    if given:
        idx = _int_list(given)
    elif "alignment" in mesh.labels:
        idx = [int(i) for i in mesh.labels["alignment"]]
    else:
        raise CommandError(f"{what}: pass 7 landmark indices or provide an 'alignment' label")
    if len(idx) != 7:
        raise CommandError(f"{what}: need exactly 7 landmark indices, got {len(idx)}")
    if min(idx) < 0 or max(idx) >= mesh.n_vertices:
        raise CommandError(f"{what}: landmark index out of range")
    return idx


def cmd_eval(args, cfg: PipelineConfig) -> int:
    gt = load_mesh(_existing(args.gt, "ground-truth mesh"))
    preds = [(Path(p).stem, load_mesh(_existing(p, "predicted mesh"))) for p in args.pred]
    radii = _float_list(args.d or cfg.evaluation.radii)
    gt_idx = _alignment_indices(gt, args.landmarks, "ground truth")
    center = args.center or cfg.evaluation.center
    allow_scale = args.allow_scale or cfg.evaluation.allow_scale
    tolerance = args.tolerance if args.tolerance is not None else cfg.evaluation.tolerance

    def run(item):
        name, pred = item
        pred_idx = _alignment_indices(pred, args.pred_landmarks, name) if (args.pred_landmarks or
                                                                          "alignment" in pred.labels) else gt_idx
        return evaluation.evaluate_pair(gt, pred, gt_idx, pred_idx, radii, name, center=center,
                                        allow_scale=allow_scale)

    results = _mapped(args.jobs, run, preds)
    reports = [r for rep, _ in results for r in rep]
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    evaluation.write_report(reports, out)
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=evaluation.REPORT_FIELDS, lineterminator="\n")
    writer.writeheader()
    for r in reports:
        writer.writerow(r.row())
    sys.stdout.write(buf.getvalue())
    means, halves = [], []
    for d in radii:
        m, h = evaluation.aggregate([r.armse for r in reports if r.d == d])
        means.append(m)
        halves.append(h)
    plot_path = Path(args.plot) if args.plot else out.with_suffix(".png")
    plotting.plot_armse_curve({args.label: (radii, means, halves)}, plot_path)
    if args.heatmap:
        _, aligned = results[0]
        dist, _ = evaluation.heatmap_export(gt, aligned, args.heatmap, tolerance)
        plotting.plot_error_histogram(dist, Path(args.heatmap).with_suffix(".png"), tolerance)
    return EXIT_OK


def cmd_heatmap(args, cfg: PipelineConfig) -> int:
    gt = load_mesh(_existing(args.gt, "ground-truth mesh"))
    pred = load_mesh(_existing(args.pred, "predicted mesh"))
    tolerance = args.tolerance if args.tolerance is not None else cfg.evaluation.tolerance
    dist, _ = evaluation.heatmap_export(gt, pred, args.out, tolerance)
    plotting.plot_error_histogram(dist, args.plot or Path(args.out).with_suffix(".png"), tolerance)
    within = float(np.mean(dist <= tolerance)) if len(dist) else 1.0
    print(f"vertices={len(dist)},max_mm={dist.max():.6g},mean_mm={dist.mean():.6g},within_tolerance={within:.6f}")
    return EXIT_OK


# ---------------------------------------------------------------- demo assets


def cmd_make_demo(args, cfg: PipelineConfig) -> int:
    """Write a self-consistent synthetic workspace for trying every command."""
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(cfg.output.seed)
    tpl = synthetic.make_template(args.rings, args.columns)
    mesh = tpl.mesh
    anchors = alignment_vertices(tpl)
    labels = dict(mesh.labels)
    labels["alignment"] = anchors
    mesh = Mesh(mesh.vertices, mesh.faces, mesh.uv, labels)
    save_mesh(mesh, out / "template.obj")
    solver.save_anchor_table(tpl.anchors, out / "anchors.json")
    solver.save_basis(tpl.basis, out / "basis.npz")

    width, height = 640, 480
    intr = init_intrinsics(width, height, cfg.camera.swap_principal_point)
    extr = synthetic.frontal_extrinsics(10.0, -5.0, 0.0, (5.0, -10.0, 560.0))
    truth = solver.FitParams.initial(mesh.n_vertices, tpl.basis.size, extr)
    lms = synthetic.synthesize_landmarks(tpl, truth, intr)
    solver.save_landmarks(lms.points, out / "landmarks.json", (width, height))
    solver.save_fit(truth, out / "truth_fit.json", intr)
    texture.write_image(out / "photo.ppm", synthetic.checker_image(width, height))
    res = args.resolution
    yy, xx = np.mgrid[0:res, 0:res] / max(res - 1, 1)
    texture.write_image(out / "background.ppm", np.stack([0.6 + 0.2 * xx, 0.45 + 0.1 * yy, 0.4 + 0 * xx], -1))

    data = out / "dataset"
    data.mkdir(exist_ok=True)
    entries = []
    for gender in sampler.GENDERS:
        for eth in sampler.ETHNICITIES:
            for k in range(args.per_group):
                name = f"{eth}_{gender}_{k:02d}"
                shape = synthetic.smooth_deformation(mesh.vertices, rng, amplitude=0.03)
                dr.save_feature(dr.encode_dr(shape, mesh), data / f"{name}.dr", "template.obj")
                entries.append({"feature": f"{name}.dr", "gender": gender, "ethnicity": eth,
                                "texture": name, "name": name})
    save_mesh(mesh, data / "template.obj")
    sampler.save_dataset_manifest(data / "manifest.json", "template.obj", entries)

    demo = load_config(None, {})
    demo.paths.template = str((out / "template.obj").resolve())
    demo.paths.anchors = str((out / "anchors.json").resolve())
    demo.paths.basis = str((out / "basis.npz").resolve())
    demo.paths.manifest = str((data / "manifest.json").resolve())
    demo.texture.resolution = res
    (out / "config.ini").write_text(demo.to_ini(), encoding="utf-8")
    print(f"demo workspace written to {out}")
    return EXIT_OK


def alignment_vertices(tpl: synthetic.HeadTemplate) -> list[int]:
    """Seven alignment vertices: outer/inner eye corners, nose tip, mouth corners."""
    picks = (36, 39, 42, 45, 30, 48, 54)
    f = tpl.mesh.faces[tpl.anchors.faces[list(picks)]]
    return [int(row[np.argmax(b)]) for row, b in zip(f, tpl.anchors.bary[list(picks)])]


def cmd_config(args, cfg: PipelineConfig) -> int:
    sys.stdout.write(cfg.to_ini())
    return EXIT_OK


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="facetwin", description="3D face reconstruction and augmentation toolkit")
    p.add_argument("--seed", type=int, default=None, help="master RNG seed (overrides [output] seed)")
    p.add_argument("--config", default=None, help="INI configuration file")
    p.add_argument("--jobs", type=int, default=1, help="parallel workers across independent inputs")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("encode-dr", help="mesh -> DR feature")
    s.add_argument("mesh")
    s.add_argument("--reference")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_encode)

    s = sub.add_parser("decode-dr", help="DR feature -> mesh")
    s.add_argument("feature")
    s.add_argument("--reference")
    s.add_argument("--out", required=True)
    s.add_argument("--compare", help="mesh to report the round-trip error against")
    s.set_defaults(func=cmd_decode)

    s = sub.add_parser("sample", help="draw new faces by DR interpolation")
    s.add_argument("--manifest")
    s.add_argument("--count", type=int, required=True)
    s.add_argument("--group", help="fixed group tag, e.g. asian_male")
    s.add_argument("--ratios", help="ethnicity ratios, e.g. 0.65,0.30,0.05 (asian,white,black)")
    s.add_argument("-m", type=int, default=None, help="members blended per draw")
    s.add_argument("--out-dir")
    s.set_defaults(func=cmd_sample)

    s = sub.add_parser("fit", help="fit the template to 2D landmarks")
    s.add_argument("--landmarks", required=True)
    s.add_argument("--template")
    s.add_argument("--anchors")
    s.add_argument("--basis")
    s.add_argument("--image-size", help="WxH; defaults to the size stored in the landmark file")
    s.add_argument("--out-dir")
    s.set_defaults(func=cmd_fit)

    s = sub.add_parser("texture", help="project the photo into UV space and blend")
    s.add_argument("--fit", required=True)
    s.add_argument("--face", required=True)
    s.add_argument("--image", required=True)
    s.add_argument("--template")
    s.add_argument("--background")
    s.add_argument("--background-mask")
    s.add_argument("--library", help="JSON texture library with id/texture/feature records")
    s.add_argument("--texture-id")
    s.add_argument("--landmarks", help="landmark file for the eye exclusion polygons")
    s.add_argument("--resolution", type=int)
    s.add_argument("--out", required=True)
    s.add_argument("--mask")
    s.set_defaults(func=cmd_texture)

    s = sub.add_parser("eval", help="ARMSE of predictions against a ground-truth scan")
    s.add_argument("--gt", required=True)
    s.add_argument("--pred", required=True, nargs="+")
    s.add_argument("--landmarks", help="7 comma-separated ground-truth vertex indices")
    s.add_argument("--pred-landmarks", help="7 comma-separated predicted vertex indices")
    s.add_argument("--d", help="crop radii in mm, e.g. 80,90,100,110")
    s.add_argument("--center", choices=("nose_tip", "landmarks"))
    s.add_argument("--allow-scale", action="store_true")
    s.add_argument("--out", default="report.csv")
    s.add_argument("--plot")
    s.add_argument("--label", default="prediction")
    s.add_argument("--heatmap", help="colored OBJ of the first prediction's error")
    s.add_argument("--tolerance", type=float)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("heatmap", help="per-vertex error colors of gt vs an aligned prediction")
    s.add_argument("--gt", required=True)
    s.add_argument("--pred", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--plot")
    s.add_argument("--tolerance", type=float)
    s.set_defaults(func=cmd_heatmap)

    s = sub.add_parser("make-demo", help="write synthetic template, landmarks, images and dataset")
    s.add_argument("--out-dir", required=True)
    s.add_argument("--rings", type=int, default=37)
    s.add_argument("--columns", type=int, default=79)
    s.add_argument("--per-group", type=int, default=6)
    s.add_argument("--resolution", type=int, default=256)
    s.set_defaults(func=cmd_make_demo)

    s = sub.add_parser("config", help="print the effective configuration")
    s.set_defaults(func=cmd_config)
    return p


_INPUT_ERRORS = (FileNotFoundError, KeyError, json.JSONDecodeError, evaluation.EmptyCropError, ValueError, OSError)
_NUMERICAL_ERRORS = (np.linalg.LinAlgError, dr.SingularMatrixError, evaluation.DegenerateAlignmentError,
                     FloatingPointError)


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg.output.seed = args.seed
        if args.jobs < 1:
            raise CommandError("--jobs must be >= 1")
        return args.func(args, cfg)
    except CommandError as exc:
        print(f"facetwin: error: {exc}", file=sys.stderr)
        return exc.code
    except _NUMERICAL_ERRORS as exc:
        print(f"facetwin: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except _INPUT_ERRORS as exc:
        print(f"facetwin: error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
