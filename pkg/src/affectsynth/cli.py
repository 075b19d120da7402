"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__, io
from .io import CONTAINER_VERSION

log = logging.getLogger("affectsynth")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


# ---------------------------------------------------------------------------
# configuration


def load_config(path) -> dict:
    if path is None:
        return {}
    doc = json.loads(Path(path).read_text())
    if not isinstance(doc, dict):
        raise io.FormatError(f"{path}: config must be a JSON object")
    return doc


def section(cfg: dict, name: str, **flags) -> dict:
    """Config section with explicitly given command-line flags layered on top."""
    out = dict(cfg.get(name, {}))
    out.update({k: v for k, v in flags.items() if v is not None})
    return out


def _jobs(args) -> int:
    if args.jobs is not None:
        return max(1, args.jobs)
    return max(1, int(os.environ.get("AFFECTSYNTH_JOBS", "1")))


def _write_json(path, doc) -> None:
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True, allow_nan=True) + "\n")


def _mesh_dir(path) -> dict:
    files = sorted(Path(path).glob("*.obj"))
    if not files:
        raise io.FormatError(f"no .obj files in {path}")
    return {f.stem: f for f in files}


# ---------------------------------------------------------------------------
# subcommands


def cmd_testbed_gen(args, cfg):
    from . import testbed as tb
    from .gallery import write_annotations_csv

    out = Path(args.out)
    (out / "meshes").mkdir(parents=True, exist_ok=True)
    (out / "landmarks").mkdir(exist_ok=True)
    (out / "images").mkdir(exist_ok=True)
    ds = tb.make_dataset(args.identities, args.frames, args.seed)
    size = (args.image_size, args.image_size)
    cam = tb.default_camera(size)
    for mid, mesh in {**ds.neutrals, **ds.frames, **ds.basic_meshes}.items():
        io.write_obj(out / "meshes" / f"{mid}.obj", mesh)
    for ident, mesh in ds.neutrals.items():
        io.write_landmarks(out / "landmarks" / f"{ident}.json", tb.ground_truth_landmarks(mesh, cam))
        io.write_image(out / "images" / f"{ident}.png", tb.render_face(mesh, cam, size))
    io.write_obj(out / "template.obj", ds.neutrals[next(iter(ds.neutrals))].with_vertices(ds.template()))
    write_annotations_csv(out / "annotations.csv", ds.annotations)
    _write_json(out / "labels.json", ds.basic_sets)
    pairs = {mid: ds.frame_identity[mid] for mid in ds.frames}
    pairs.update({mid: mid.rsplit("_", 1)[0] for mid in ds.basic_meshes})
    _write_json(out / "pairs.json", pairs)
    _write_json(out / "landmark_map.json", tb.landmark_indices().tolist())
    _write_json(out / "camera.json", cam.to_dict())
    _write_json(out / "augment.json", {"items": [
        {"id": i, "image": f"images/{i}.png", "landmarks": f"landmarks/{i}.json"} for i in ds.neutrals]})
    log.info("wrote %d identities and %d frames to %s", len(ds.neutrals), len(ds.frames), out)


def cmd_build_model(args, cfg):
    from .geometry import topology_hash
    from .morphable import MorphableModel, build_pca_model, procrustes_normalise

    opts = section(cfg, "model", variance_fraction=args.variance)
    frac = float(opts.get("variance_fraction", 0.995))
    files = _mesh_dir(args.meshes)
    meshes = [io.read_obj(f) for f in files.values()]
    tris = meshes[0].triangles
    topo = topology_hash(tris, meshes[0].n_vertices)
    if any(m.topology_hash() != topo for m in meshes):
        raise io.FormatError("meshes do not share one topology")
    shapes = np.stack([m.vertices.ravel() for m in meshes])
    if opts.get("procrustes", not args.no_procrustes):
        shapes = procrustes_normalise(shapes)
    shape = build_pca_model(shapes, frac, "shape", topo)
    coloured = [m for m in meshes if m.per_vertex_color is not None]
    if not coloured:
        raise io.FormatError("no mesh carries vertex colours; a texture model needs them")
    texture = build_pca_model([m.per_vertex_color.ravel() for m in coloured], frac, "texture", topo)
    lmap = None
    if args.landmark_map:
        lmap = np.asarray(json.loads(Path(args.landmark_map).read_text()), dtype=np.int64)
    MorphableModel(shape, texture, tris, lmap).save(args.out)
    log.info("shape model: %d components; texture model: %d components",
             shape.n_components, texture.n_components)


def cmd_build_blendshapes(args, cfg):
    from .blendshape import build_blendshapes, difference_matrix

    opts = section(cfg, "blendshape", components=args.components, sparsity_weight=args.sparsity,
                   constraint=args.constraint, max_alternations=args.max_alternations)
    files = _mesh_dir(args.meshes)
    pairs = json.loads(Path(args.pairs).read_text())
    missing = sorted({m for kv in pairs.items() for m in kv} - set(files))
    if missing:
        raise io.FormatError(f"pairs reference unknown meshes: {missing[:5]}")
    expr = sorted(pairs)
    D = difference_matrix([io.read_obj(files[e]).vertices for e in expr],
                          [io.read_obj(files[pairs[e]]).vertices for e in expr])
    kw = {k: opts[k] for k in ("sparsity_weight", "constraint", "max_alternations") if k in opts}
    model, C = build_blendshapes(D, int(opts.get("components", 8)), **kw)
    model.save(args.out)
    if args.coefficients:
        _write_json(args.coefficients, {"mesh_ids": expr, "coefficients": C.tolist()})


def cmd_cluster(args, cfg):
    from .gallery import read_annotations_csv, ward_cluster

    opts = section(cfg, "gallery", clusters=args.k)
    anns = sorted(read_annotations_csv(args.annotations), key=lambda a: (a.mesh_id, a.valence, a.arousal))
    res = ward_cluster([(a.valence, a.arousal) for a in anns], int(opts.get("clusters", 550)))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "assignments.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["mesh_id", "valence", "arousal", "cluster"])
        for a, c in zip(anns, res.assignments):
            w.writerow([a.mesh_id, repr(a.valence), repr(a.arousal), int(c)])
    counts = np.bincount(res.assignments, minlength=len(res.centroids))
    _write_json(out / "centroids.json", [{"cluster": k, "valence": float(c[0]), "arousal": float(c[1]),
                                           "count": int(n)} for k, (c, n) in enumerate(zip(res.centroids, counts))])


def cmd_build_gallery(args, cfg):
    from .gallery import build_gallery, read_annotations_csv, read_labels_manifest

    opts = section(cfg, "gallery", clusters=args.k)
    files = _mesh_dir(args.meshes)
    anns = read_annotations_csv(args.annotations)
    needed = {a.mesh_id for a in anns}
    basic = {}
    if args.labels:
        for label, ids in read_labels_manifest(args.labels).items():
            basic[label] = [io.read_obj(files[i]).vertices for i in ids]
    unknown = sorted(needed - set(files))
    if unknown:
        raise io.FormatError(f"annotations reference meshes not in {args.meshes}: {unknown[:5]}")
    meshes = {m: io.read_obj(files[m]).vertices for m in sorted(needed)}
    template = io.read_obj(args.template).vertices
    gal = build_gallery(anns, meshes, template, int(opts.get("clusters", 550)), basic or None)
    gal.save(args.out)


def _fit_config(cfg):
    from .fitting import FitConfig

    return FitConfig.from_dict(cfg.get("fit", {}))


def cmd_fit(args, cfg):
    from .fitting import fit_3dmm
    from .geometry import TriMesh
    from .morphable import MorphableModel

    model = MorphableModel.load(args.model)
    image = io.read_image(args.image)
    lm = io.read_landmarks(args.landmarks)
    res = fit_3dmm(image, lm, model, _fit_config(cfg))
    Path(args.out).write_text(res.to_json() + "\n")
    if args.mesh_out:
        io.write_obj(args.mesh_out, TriMesh(res.shape(model), model.triangles, res.sampled_texture))


def _parse_va(text: str):
    try:
        v, a = (float(x) for x in text.split(","))
    except ValueError as exc:
        raise UsageError(f"expected 'v,a', got {text!r}") from exc
    return v, a


def _request_from_args(args):
    from .synthesis import AffectRequest

    chosen = [x is not None for x in (args.va, args.expr, args.path)]
    if sum(chosen) != 1:
        raise UsageError("give exactly one of --va, --expr, --path")
    if args.va is not None:
        return AffectRequest.point(*_parse_va(args.va))
    if args.expr is not None:
        return AffectRequest.basic(args.expr)
    doc = json.loads(Path(args.path).read_text())
    pts = doc["points"] if isinstance(doc, dict) else doc
    return AffectRequest.sequence(pts, args.frames)


def cmd_synthesize(args, cfg):
    from .gallery import AffectGallery
    from .morphable import MorphableModel
    from .synthesis import synthesize

    request = _request_from_args(args)
    model = MorphableModel.load(args.model)
    gallery = AffectGallery.load(args.gallery)
    image = io.read_image(args.image)
    lm = io.read_landmarks(args.landmarks)
    res = synthesize(image, lm, model, gallery, request, _fit_config(cfg), jobs=_jobs(args))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    names = []
    for k, frame in enumerate(res.frames):
        name = f"frame_{k:04d}.png"
        io.write_image(out / name, frame)
        names.append(name)
    _write_json(out / "manifest.json", {**res.manifest(), "files": names})


def cmd_augment(args, cfg):
    from .gallery import BASIC_LABELS, AffectGallery
    from .morphable import MorphableModel
    from .fitting import fit_3dmm
    from .synthesis import AffectRequest, synthesize

    manifest_path = Path(args.manifest)
    doc = json.loads(manifest_path.read_text())
    items = doc["items"] if isinstance(doc, dict) else doc
    requests = []
    if args.expr:
        labels = BASIC_LABELS if args.expr == "all" else args.expr.split(",")
        requests += [AffectRequest.basic(lab) for lab in labels]
    for text in args.va or []:
        requests.append(AffectRequest.point(*_parse_va(text)))
    if not requests:
        raise UsageError("augment needs --expr and/or --va")
    model = MorphableModel.load(args.model)
    gallery = AffectGallery.load(args.gallery)
    fcfg = _fit_config(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    base = manifest_path.parent

    def one(item):
        image = io.read_image(base / item["image"])
        lm = io.read_landmarks(base / item["landmarks"])
        fit = fit_3dmm(image, lm, model, fcfg)
        rows = []
        for r_idx, req in enumerate(requests):
            res = synthesize(image, lm, model, gallery, req, fit=fit)
            name = f"{item['id']}_{r_idx:02d}.png"
            io.write_image(out / name, res.frames[0])
            rows.append({"source": item["id"], "image": name, "request": req.to_dict(),
                         "cluster": res.clusters[0]})
        return rows

    jobs = _jobs(args)
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(one, items))
    else:
        results = [one(it) for it in items]
    _write_json(out / "manifest.json", {"items": [r for rows in results for r in rows]})


def cmd_register(args, cfg):
    from .correspondence import DEFAULT_SCHEDULE, nicp_register

    opts = section(cfg, "nicp", schedule=[float(x) for x in args.schedule.split(",")] if args.schedule else None,
                   inner_iters=args.inner_iters, landmark_weight=args.landmark_weight)
    src = io.read_obj(args.source)
    tgt = io.read_obj(args.target)
    pairs = None
    if args.landmarks:
        pairs = [(int(i), p) for i, p in json.loads(Path(args.landmarks).read_text())]
    out, report = nicp_register(src, tgt, opts.get("schedule", DEFAULT_SCHEDULE), pairs,
                                int(opts.get("inner_iters", 10)), float(opts.get("landmark_weight", 10.0)))
    io.write_obj(args.out, out)
    if args.report:
        _write_json(args.report, report.to_dict())


def _read_table(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows or "id" not in rows[0]:
        raise io.FormatError(f"{path}: expected a CSV with an 'id' column")
    return rows


def cmd_metrics(args, cfg):
    from . import metrics as M

    pred = {r["id"]: r for r in _read_table(args.pred)}
    truth = _read_table(args.truth)
    missing = [r["id"] for r in truth if r["id"] not in pred]
    if missing:
        raise io.FormatError(f"predictions missing for ids {missing[:5]}")
    pairs = [(pred[r["id"]], r) for r in truth]

    def report(subset):
        out = {"n": len(subset)}
        for col in ("valence", "arousal"):
            if col in subset[0][1] and col in subset[0][0]:
                x = [float(p[col]) for p, _ in subset]
                y = [float(t[col]) for _, t in subset]
                if args.per_sequence_mean and "sequence" in subset[0][1]:
                    seqs = sorted({t["sequence"] for _, t in subset})
                    per = [M.regression_report([float(p[col]) for p, t in subset if t["sequence"] == s],
                                               [float(t[col]) for p, t in subset if t["sequence"] == s])
                           for s in seqs]
                    out[col] = {k: (float(np.mean([d[k] for d in per if d[k] is not None]))
                                    if any(d[k] is not None for d in per) else None) for k in per[0]}
                else:
                    out[col] = M.regression_report(y, x)
        if "label" in subset[0][1] and "label" in subset[0][0]:
            p = [int(p["label"]) for p, _ in subset]
            t = [int(t["label"]) for _, t in subset]
            k = args.num_classes or (max(p + t) + 1)
            C = M.confusion(p, t, k)
            out["classification"] = {"f1_macro": M.f1_macro(p, t, k), "diag_average": M.diag_average(C),
                                     "confusion": C.tolist()}
        return out

    doc = {"overall": report(pairs)}
    if args.group_by:
        groups = sorted({t.get(args.group_by, "") for _, t in pairs})
        doc["groups"] = {g: report([pt for pt in pairs if pt[1].get(args.group_by, "") == g]) for g in groups}
    if args.grid:
        P = [(float(p["valence"]), float(p["arousal"])) for p, _ in pairs]
        T = [(float(t["valence"]), float(t["arousal"])) for _, t in pairs]
        grid = M.va_grid_mse(P, T, args.grid)
        doc["grid"] = {"bins": args.grid, "counts": grid.counts.tolist(),
                       "mse": [[None if np.isnan(x) else float(x) for x in row] for row in grid.mse]}
        if args.grid_out:
            with open(args.grid_out, "w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(["valence_bin", "arousal_bin", "v_lo", "v_hi", "a_lo", "a_hi", "count", "mse"])
                e = grid.edges
                for i in range(args.grid):
                    for j in range(args.grid):
                        m = grid.mse[i, j]
                        w.writerow([i, j, e[i], e[i + 1], e[j], e[j + 1], int(grid.counts[i, j]),
                                    "" if np.isnan(m) else repr(float(m))])
    if args.out:
        _write_json(args.out, doc)
    else:
        print(json.dumps(doc, indent=2, sort_keys=True))


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="affectsynth", description="Facial affect synthesis with 3D morphable models")
    p.add_argument("--version", action="store_true", help="print package and container format versions")
    p.add_argument("--config", help="JSON file overriding default settings")
    p.add_argument("--jobs", type=int, help="worker threads (default $AFFECTSYNTH_JOBS or 1)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    tb = sub.add_parser("testbed", help="synthetic data")
    tbs = tb.add_subparsers(dest="testbed_command", parser_class=_Parser)
    g = tbs.add_parser("gen", help="generate a synthetic corpus")
    g.add_argument("--identities", type=int, default=20)
    g.add_argument("--frames", type=int, default=50)
    g.add_argument("--seed", type=int, default=7)
    g.add_argument("--image-size", type=int, default=256)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_testbed_gen)

    s = sub.add_parser("build-model", help="PCA shape and texture model from a mesh directory")
    s.add_argument("--meshes", required=True)
    s.add_argument("--variance", type=float)
    s.add_argument("--no-procrustes", action="store_true")
    s.add_argument("--landmark-map", help="JSON list of 68 vertex indices")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_build_model)

    s = sub.add_parser("build-blendshapes", help="sparse expression components")
    s.add_argument("--meshes", required=True)
    s.add_argument("--pairs", required=True, help="JSON mapping expressive mesh id to neutral mesh id")
    s.add_argument("--components", type=int)
    s.add_argument("--sparsity", type=float)
    s.add_argument("--constraint", choices=("two-sided", "one-sided", "none"))
    s.add_argument("--max-alternations", type=int)
    s.add_argument("--coefficients", help="optional JSON output of the activations")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_build_blendshapes)

    s = sub.add_parser("cluster", help="Ward clustering of VA annotations")
    s.add_argument("--annotations", required=True)
    s.add_argument("--k", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_cluster)

    s = sub.add_parser("build-gallery", help="affect gallery of mean faces")
    s.add_argument("--annotations", required=True)
    s.add_argument("--meshes", required=True)
    s.add_argument("--template", required=True)
    s.add_argument("--labels", help="labeled-expression manifest JSON")
    s.add_argument("--k", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_build_gallery)

    s = sub.add_parser("fit", help="fit the morphable model to an image")
    s.add_argument("--image", required=True)
    s.add_argument("--landmarks", required=True)
    s.add_argument("--model", required=True)
    s.add_argument("--mesh-out")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_fit)

    s = sub.add_parser("synthesize", help="synthesise an affect on a face image")
    s.add_argument("--image", required=True)
    s.add_argument("--landmarks", required=True)
    s.add_argument("--model", required=True)
    s.add_argument("--gallery", required=True)
    s.add_argument("--va")
    s.add_argument("--expr")
    s.add_argument("--path")
    s.add_argument("--frames", type=int, default=30)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synthesize)

    s = sub.add_parser("augment", help="synthesise affects for every image in a manifest")
    s.add_argument("--manifest", required=True)
    s.add_argument("--model", required=True)
    s.add_argument("--gallery", required=True)
    s.add_argument("--expr", help="comma-separated labels or 'all'")
    s.add_argument("--va", action="append", help="v,a (repeatable)")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_augment)

    s = sub.add_parser("register", help="non-rigid ICP registration")
    s.add_argument("--source", required=True)
    s.add_argument("--target", required=True)
    s.add_argument("--schedule", help="comma-separated decreasing stiffness values")
    s.add_argument("--inner-iters", type=int)
    s.add_argument("--landmark-weight", type=float)
    s.add_argument("--landmarks", help="JSON list of [source_vertex, [x, y, z]]")
    s.add_argument("--report")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_register)

    s = sub.add_parser("metrics", help="evaluation report from prediction and truth CSVs")
    s.add_argument("--pred", required=True)
    s.add_argument("--truth", required=True)
    s.add_argument("--num-classes", type=int)
    s.add_argument("--group-by")
    mode = s.add_mutually_exclusive_group()
    mode.add_argument("--pool", action="store_true", help="pool all rows (default)")
    mode.add_argument("--per-sequence-mean", action="store_true",
                      help="average the measures over the 'sequence' column")
    s.add_argument("--grid", type=int, help="VA grid size for per-cell MSE")
    s.add_argument("--grid-out")
    s.add_argument("--out")
    s.set_defaults(func=cmd_metrics)
    return p


def main(argv=None) -> int:
    from .correspondence import SingularSystemError
    from .fitting import FitDegenerateError, NumericalFailureError
    from .synthesis import BlendDegenerateError

    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(message)s")
        if args.version:
            print(f"affectsynth {__version__} (container format {CONTAINER_VERSION})")
            return EXIT_OK
        func = getattr(args, "func", None)
        if func is None:
            parser.print_help(sys.stderr)
            return EXIT_USAGE
        cfg = load_config(args.config)
        func(args, cfg)
        return EXIT_OK
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except (NumericalFailureError, FitDegenerateError, SingularSystemError, BlendDegenerateError,
            np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, ValueError, KeyError, json.JSONDecodeError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
