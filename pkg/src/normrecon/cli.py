"""Command-line entry point: ``normrecon {synth,calibrate,reconstruct,eval,attn-check}``.

Exit codes: 0 ok, 2 usage, 3 data or degenerate input, 4 numerical failure.
Every command writes one ``manifest.json`` into its output directory.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

from . import __version__
from .attention import load_weights, run_invariant_suite
from .calibrate import (
    SimilarityTransform,
    calibrate_session,
    canonical_camera,
    canonicalize,
    load_landmarks,
    load_template,
    load_transform,
    save_landmarks,
    save_template,
    save_transform,
)
from .camera import CameraSamplerConfig, load_cameras, sample_cameras, save_cameras
from .errors import NumericalError, ParameterError, ReconError
from .imageio import load_normal_map, read_pgm, save_depth_map, save_normal_map
from .loss import LossConfig, make_views
from .meshio import read_mesh, write_mesh
from .metrics import evaluate_mesh, evaluate_normal_maps
from .optimize import ReconstructionConfig, ReconstructionFailed, reconstruct
from .raster import Frame
from .remesh import RemeshConfig
from .synth import (
    NoiseModel,
    SyntheticSubject,
    capture_frame_cameras,
    make_subject,
    observe_landmarks,
    perturb,
    random_similarity,
    render_ground_truth,
    template_landmarks,
)

log = logging.getLogger("normrecon")

SCHEMA_VERSION = 1

# Defaults for every tunable flag. Precedence: command-line flag > --config JSON > this table.
DEFAULTS = {
    "synth": {
        "subject": "bumpy",
        "amplitude": 0.05,
        "frequency": 4.0,
        "subdivisions": 5,
        "views": 10,
        "seed": 0,
        "noise_sigma": 0.0,
        "bias_deg": 0.0,
        "landmarks": 16,
        "capture_seed": None,
        "sampler": {},
    },
    "calibrate": {},
    "reconstruct": {
        "steps": 300,
        "lr": 0.3,
        "lambda_lap": 0.1,
        "alpha": 2.5,
        "min_edge": 0.005,
        "max_edge": 0.06,
        "max_vertices": 500_000,
        "subdivisions": 3,
        "seed": 0,
        "format": "obj",
    },
    "eval": {"mm_per_unit": None},
    "attn-check": {"seed": 0, "L": 8, "D": 16, "views": 3},
}


@dataclass
class RunManifest:
    command: str
    config: dict
    inputs: dict = field(default_factory=dict)
    outputs: dict = field(default_factory=dict)
    wall_time: float = 0.0
    exit_code: int = 0
    error: str | None = None
    tool_version: str = __version__
    schema_version: int = SCHEMA_VERSION


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _hash_inputs(paths) -> dict:
    out = {}
    for p in paths:
        if p is None:
            continue
        p = Path(p)
        if p.is_dir():
            for f in sorted(x for x in p.iterdir() if x.is_file() and x.name != "manifest.json"):
                out[str(f)] = sha256_file(f)
        elif p.is_file():
            out[str(p)] = sha256_file(p)
    return out


class _Run:
    """Tracks outputs written by a command and writes the manifest at the end."""

    def __init__(self, args, command: str, out_dir: Path, config: dict):
        args.run = self  # lets main() record failures in the manifest
        self.out = Path(out_dir)
        self.manifest = RunManifest(command, config)
        self.t0 = time.perf_counter()

    def path(self, name: str) -> Path:
        self.manifest.outputs.setdefault(name, None)
        return self.out / name

    def finish(self, exit_code: int, error: str | None = None) -> int:
        m = self.manifest
        m.exit_code, m.error = exit_code, error
        m.outputs = {k: sha256_file(self.out / k) for k in sorted(m.outputs) if (self.out / k).is_file()}
        m.wall_time = time.perf_counter() - self.t0
        self.out.mkdir(parents=True, exist_ok=True)
        (self.out / "manifest.json").write_text(json.dumps(asdict(m), indent=1, sort_keys=True))
        return exit_code


def _resolve(args, command: str) -> dict:
    """Merge flags over the optional config JSON over the defaults table."""
    config = {}
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.is_file():
            raise ParameterError(f"config file {path} not found")
        try:
            config = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ParameterError(f"{path}: invalid JSON: {exc}") from exc
        if not isinstance(config, dict):
            raise ParameterError(f"{path}: config must be a JSON object")
    defaults = DEFAULTS[command]
    unknown = set(config) - set(defaults)
    if unknown:
        raise ParameterError(f"unknown config keys for {command}: {sorted(unknown)}")
    resolved = {}
    for key, default in defaults.items():
        flag = getattr(args, key, None)
        resolved[key] = flag if flag is not None else config.get(key, default)
    return resolved


def _require(path, what: str) -> Path:
    if path is None:
        raise ParameterError(f"missing {what}")
    p = Path(path)
    if not p.exists():
        raise ParameterError(f"{what} {p} does not exist")
    return p


def _write_json(path: Path, data) -> None:
    path.write_text(json.dumps(data, indent=1, sort_keys=True))


def _view_stems(directory: Path) -> list[Path]:
    return [p.with_suffix("") for p in sorted(directory.glob("view_[0-9][0-9][0-9].pfm"))]


def _load_views(directory: Path, count: int):
    stems = _view_stems(directory)
    if len(stems) != count:
        raise ParameterError(f"{directory}: found {len(stems)} view maps for {count} cameras")
    return [load_normal_map(s) for s in stems]


# ---------------------------------------------------------------- commands


def cmd_synth(args) -> int:
    cfg = _resolve(args, "synth")
    if int(cfg["views"]) < 1:
        raise ParameterError("--views must be >= 1")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    run = _Run(args, "synth", out, cfg)
    subject = SyntheticSubject(cfg["subject"], cfg["amplitude"], cfg["frequency"], cfg["seed"], cfg["subdivisions"])
    mesh = make_subject(subject)
    sampler = dict(cfg["sampler"])
    for key in ("pitch_range", "yaw_range", "scale_range"):
        if key in sampler:
            sampler[key] = tuple(sampler[key])
    try:
        sampler_cfg = CameraSamplerConfig(seed=cfg["seed"], **sampler)
    except TypeError as exc:
        raise ParameterError(f"bad sampler settings: {exc}") from exc
    cams = sample_cameras(sampler_cfg, int(cfg["views"]))
    gt = render_ground_truth(mesh, cams)
    for i, (nmap, dmap, _) in enumerate(gt):
        if cfg["noise_sigma"] or cfg["bias_deg"]:
            nmap = perturb(nmap, NoiseModel(cfg["noise_sigma"], None, cfg["bias_deg"], seed=cfg["seed"] * 100_003 + i))
        stem = f"view_{i:03d}"
        for ext in (".pfm", ".pgm", ".json"):
            run.path(stem + ext)
        save_normal_map(out / stem, nmap)
        save_depth_map(run.path(f"depth_{i:03d}.pfm"), dmap)
    write_mesh(run.path("subject.obj"), mesh)
    template = template_landmarks(mesh, int(cfg["landmarks"]), cfg["seed"])
    observed = observe_landmarks(template, cams, [g[1] for g in gt])
    out_cams = cams
    if cfg["capture_seed"] is not None:
        G = random_similarity(int(cfg["capture_seed"]))
        out_cams = capture_frame_cameras(cams, G)
        save_transform(run.path("capture_transform.json"), G)
    save_cameras(run.path("cameras.json"), out_cams)
    save_landmarks(run.path("landmarks.json"), observed)
    save_template(run.path("template.json"), template)
    print(f"wrote {len(cams)} views to {out}")
    return run.finish(0)


def cmd_calibrate(args) -> int:
    cfg = _resolve(args, "calibrate")
    cams_path = _require(args.cameras, "--cameras")
    lm_path = _require(args.landmarks, "--landmarks")
    tmpl_path = _require(args.template, "--template")
    normals_dir = _require(args.normals, "--normals directory") if args.normals else None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    run = _Run(args, "calibrate", out, cfg)
    run.manifest.inputs = _hash_inputs([cams_path, lm_path, tmpl_path, normals_dir])
    cams = load_cameras(cams_path)
    G = calibrate_session(cams, load_landmarks(lm_path), load_template(tmpl_path))
    save_transform(run.path("transform.json"), G)
    if normals_dir is not None:
        maps = _load_views(normals_dir, len(cams))
        canon_cams, canon_maps = canonicalize(cams, maps, G)
        for i, nmap in enumerate(canon_maps):
            for ext in (".pfm", ".pgm", ".json"):
                run.path(f"view_{i:03d}{ext}")
            save_normal_map(out / f"view_{i:03d}", nmap)
    else:
        canon_cams = [canonical_camera(c, G) for c in cams]
    save_cameras(run.path("cameras.json"), canon_cams)
    print(f"scale {G.s:.9g}  rms residual {G.rms:.3e}")
    for lid, r in sorted(G.residuals.items()):
        print(f"  {lid}: {r:.3e}")
    return run.finish(0)


def cmd_reconstruct(args) -> int:
    cfg = _resolve(args, "reconstruct")
    in_dir = _require(args.input, "--input directory")
    if not in_dir.is_dir():
        raise ParameterError(f"--input {in_dir} is not a directory")
    cams_path = _require(in_dir / "cameras.json", "cameras file")
    transform_path = _require(args.transform, "--transform") if args.transform else None
    init_path = _require(args.init_mesh, "--init-mesh") if args.init_mesh else None
    if cfg["format"] not in ("obj", "ply"):
        raise ParameterError("--format must be obj or ply")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    run = _Run(args, "reconstruct", out, {**cfg, "threads": args.threads})
    run.manifest.inputs = _hash_inputs([in_dir, transform_path, init_path])

    cams = load_cameras(cams_path)
    maps = _load_views(in_dir, len(cams))
    frames = {m.frame for m in maps}
    if len(frames) != 1:
        raise ParameterError("view maps mix coordinate frames")
    if frames == {Frame.CAMERA}:
        G = load_transform(transform_path) if transform_path else SimilarityTransform()
        cams, maps = canonicalize(cams, maps, G)
    elif transform_path:
        raise ParameterError("maps are already canonical; --transform does not apply")

    loss_cfg = LossConfig(lambda_lap=cfg["lambda_lap"], alpha=cfg["alpha"])
    rcfg = ReconstructionConfig(
        steps=int(cfg["steps"]),
        learning_rate=cfg["lr"],
        loss=loss_cfg,
        remesh=RemeshConfig(cfg["min_edge"], cfg["max_edge"], int(cfg["max_vertices"])),
        sphere_subdivisions=int(cfg["subdivisions"]),
        seed=int(cfg["seed"]),
        threads=int(args.threads),
    )
    views = make_views(cams, maps, loss_cfg.alpha)
    init_mesh = read_mesh(init_path) if init_path else None

    def progress(i, value, mesh):
        if i % 25 == 0 or i == rcfg.steps - 1:
            log.info("step %d loss %.6g vertices %d", i, value, mesh.n_vertices)

    mesh_name = f"mesh.{cfg['format']}"
    try:
        mesh, report = reconstruct(views, rcfg, init_mesh=init_mesh, progress=progress)
    except ReconstructionFailed as exc:
        write_mesh(run.path(mesh_name), exc.mesh)
        _write_json(run.path("report.json"), _report_dict(exc.report))
        print(f"numerical failure: {exc}", file=sys.stderr)
        return run.finish(4, str(exc))
    write_mesh(run.path(mesh_name), mesh)
    _write_json(run.path("report.json"), _report_dict(report))
    print(f"{mesh.n_vertices} vertices, final loss {report.losses[-1]:.6g}")
    return run.finish(0)


def _report_dict(report) -> dict:
    # wall time lives in the manifest so the report itself is reproducible
    d = report.to_dict()
    d.pop("wall_time", None)
    return d


def _load_masks(directory, count):
    if directory is None:
        return None
    d = _require(directory, "--masks directory")
    files = sorted(d.glob("*.pgm"))
    if len(files) != count:
        raise ParameterError(f"{d}: found {len(files)} masks for {count} views")
    return [read_pgm(f) for f in files]


def cmd_eval(args) -> int:
    cfg = _resolve(args, "eval")
    mesh_mode = args.pred is not None or args.gt is not None
    map_mode = args.pred_normals is not None or args.gt_normals is not None
    if mesh_mode == map_mode:
        raise ParameterError("give either --pred/--gt/--cameras or --pred-normals/--gt-normals")
    if cfg["mm_per_unit"] is not None and not cfg["mm_per_unit"] > 0:
        raise ParameterError("--mm-per-unit must be positive")
    out = Path(args.out)
    if mesh_mode:
        pred_p = _require(args.pred, "--pred")
        gt_p = _require(args.gt, "--gt")
        cams_p = _require(args.cameras, "--cameras")
        inputs = [pred_p, gt_p, cams_p, args.masks]
    else:
        pred_d = _require(args.pred_normals, "--pred-normals")
        gt_d = _require(args.gt_normals, "--gt-normals")
        inputs = [pred_d, gt_d, args.masks]
    out.mkdir(parents=True, exist_ok=True)
    run = _Run(args, "eval", out, cfg)
    run.manifest.inputs = _hash_inputs(inputs)
    if mesh_mode:
        cams = load_cameras(cams_p)
        masks = _load_masks(args.masks, len(cams))
        result = evaluate_mesh(read_mesh(pred_p), read_mesh(gt_p), cams, masks, cfg["mm_per_unit"])
        data = result.to_dict()
        data["per_view"] = result.per_view
    else:
        preds = [load_normal_map(s) for s in _view_stems(pred_d)]
        gts = [load_normal_map(s) for s in _view_stems(gt_d)]
        if len(preds) != len(gts) or not preds:
            raise ParameterError("prediction and ground-truth directories hold different view counts")
        nm = evaluate_normal_maps(preds, gts, _load_masks(args.masks, len(preds)))
        data = {
            "mean_angular_deg": nm.mean_angular_deg,
            "gradient_error": nm.gradient_error,
            "pct_below": {"10": nm.pct_below_10, "20": nm.pct_below_20, "30": nm.pct_below_30},
            "valid_pixel_count": nm.valid_pixel_count,
            "views": len(preds),
        }
    _write_json(run.path("metrics.json"), data)
    print(json.dumps(data, indent=1, sort_keys=True))
    return run.finish(0)


def cmd_attn_check(args) -> int:
    cfg = _resolve(args, "attn-check")
    weights_path = _require(args.weights, "--weights") if args.weights else None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    run = _Run(args, "attn-check", out, cfg)
    run.manifest.inputs = _hash_inputs([weights_path])
    weights = None
    if weights_path is not None:
        weights, _ = load_weights(weights_path)
    results = run_invariant_suite(int(cfg["seed"]), int(cfg["L"]), int(cfg["D"]), int(cfg["views"]), weights)
    ok = all(passed for _, passed, _ in results)
    for name, passed, detail in results:
        print(f"{'PASS' if passed else 'FAIL'}  {name}  ({detail})")
    _write_json(run.path("attn_check.json"),
                {"passed": ok, "checks": [{"name": n, "passed": bool(p), "detail": d} for n, p, d in results]})
    return run.finish(0 if ok else 4, None if ok else "invariant check failed")


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="normrecon", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"normrecon {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_required=True):
        p.add_argument("--out", required=out_required, default=".", help="output directory")
        p.add_argument("--config", help="JSON file of flag values (flags override it)")
        p.add_argument("--threads", type=int, default=1, help="worker threads; results do not depend on it")
        p.add_argument("-v", "--verbose", action="store_true")

    p = sub.add_parser("synth", help="generate a synthetic subject with ground-truth views")
    common(p)
    p.add_argument("--subject", choices=["sphere", "bumpy", "blob"])
    p.add_argument("--amplitude", type=float)
    p.add_argument("--frequency", type=float)
    p.add_argument("--subdivisions", type=int)
    p.add_argument("--views", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--noise-sigma", type=float, help="per-pixel angular noise scale (degrees)")
    p.add_argument("--bias-deg", type=float, help="systematic tilt toward +x (degrees)")
    p.add_argument("--landmarks", type=int, help="number of template landmarks")
    p.add_argument("--capture-seed", type=int, help="emit cameras in a random capture frame")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("calibrate", help="fit the capture-to-canonical similarity from landmarks")
    common(p)
    p.add_argument("--cameras")
    p.add_argument("--landmarks")
    p.add_argument("--template")
    p.add_argument("--normals", help="directory of camera-space view maps to canonicalize")
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("reconstruct", help="optimize a mesh against multi-view normal maps")
    common(p)
    p.add_argument("--input", help="directory with cameras.json and view_NNN maps")
    p.add_argument("--transform", help="capture-to-canonical transform JSON (identity if absent)")
    p.add_argument("--init-mesh", help="start from this mesh instead of a sphere")
    p.add_argument("--steps", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--lambda-lap", type=float)
    p.add_argument("--alpha", type=float)
    p.add_argument("--min-edge", type=float)
    p.add_argument("--max-edge", type=float)
    p.add_argument("--max-vertices", type=int)
    p.add_argument("--subdivisions", type=int, help="initial icosphere subdivisions")
    p.add_argument("--seed", type=int)
    p.add_argument("--format", choices=["obj", "ply"])
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("eval", help="mesh or normal-map metrics")
    common(p, out_required=False)
    p.add_argument("--pred")
    p.add_argument("--gt")
    p.add_argument("--cameras")
    p.add_argument("--pred-normals")
    p.add_argument("--gt-normals")
    p.add_argument("--masks", help="directory of PGM masks, one per view in sorted order")
    p.add_argument("--mm-per-unit", type=float)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("attn-check", help="run the cross-attention invariant suite")
    common(p, out_required=False)
    p.add_argument("--seed", type=int)
    p.add_argument("--L", type=int, help="tokens per view")
    p.add_argument("--D", type=int, help="feature dimension")
    p.add_argument("--views", type=int)
    p.add_argument("--weights", help="MVAT weight file")
    p.set_defaults(func=cmd_attn_check)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    if args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return 2
    args.run = None
    try:
        return args.func(args)
    except ParameterError as exc:
        code, message = 2, f"usage error: {exc}"
    except NumericalError as exc:
        code, message = 4, f"numerical error: {exc}"
    except (ReconError, OSError, ValueError) as exc:
        code, message = 3, f"error: {exc}"
    print(message, file=sys.stderr)
    if args.run is None:
        # failed before the command got going: still leave one manifest behind
        try:
            _Run(args, args.command, Path(args.out), {})
        except OSError:
            return code
    try:
        args.run.finish(code, message)
    except OSError:
        pass
    return code


if __name__ == "__main__":
    sys.exit(main())
