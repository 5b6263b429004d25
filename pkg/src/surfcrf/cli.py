"""Pipeline orchestration: phantom -> presegment -> spheremap -> remesh ->
patches -> unary -> segment -> metrics, plus fit; every subcommand writes its
artifacts and a provenance record, and all randomness flows from one seed."""
from __future__ import annotations

import argparse
import copy
import hashlib
import json
import os
import sys
import time

import numpy as np

from . import crf as crfmod
from . import train as trainmod
from .mesh import TriMesh, harmonic_sphere_map, load_mesh, save_mesh, taubin_smooth
from .metrics import compare_surfaces
from .patches import GroundTruth, ground_truth, labeling_to_world, load_patchset, sample_columns, save_patchset
from .quadsphere import build_quadsphere, load_quadmesh, remesh, save_quadmesh
from .volume import PhantomSpec, Volume, load_svol, make_phantom, phantom_label_volume, save_svol


DEFAULT_CONFIG = {
    "seed": 0,
    "phantom": {
        "kind": "ellipsoid",
        "semi_axes_mm": [25.0, 22.0, 25.0],
        "radius_mm": 24.0,
        "bump_amplitude_mm": 2.0,
        "bump_freq": 3.0,
        "inside_value": 1.0,
        "outside_value": 0.0,
        "noise_sigma": 0.3,
        "blur_sigma_mm": 1.0,
        "dims": [64, 64, 64],
        "spacing": [1.0, 1.0, 1.0],
        "mesh_subdivisions": 3,
    },
    "preseg": {
        "smooth_iterations": 10,
        "smooth_lambda": 0.5,
        "smooth_mu": -0.53,
        "perturb_amplitude_mm": 3.0,
        "perturb_components": 6,
    },
    "spheremap": {
        "tol": 1e-6,
        "max_iters": 5000,
        "damping": 0.5,
    },
    "quad": {
        "recursion": 5,
    },
    "patches": {
        "column_len": 48,
        "column_res_mm": 0.625,
        "pad": 3,
    },
    "unary": {
        "mode": "gradient",  # gradient | external
        "polarity": "bright_to_dark",
        "scale": 6.0,
        "external_dir": "",
    },
    "crf": {
        "w_p": 1.0,
        "w1": 3.0,
        "theta1": 5.0,
        "theta2": 0.2,
        "theta3": 5.0,
        "theta_comp": 5.0,
        "window_radius": 3,
        "iterations": 5,
        "kernel_variant": "probability",
    },
    "fit": {
        "lr": 0.05,
        "epochs": 100,
        "momentum": 0.9,
        "trainable": list(trainmod.SCALAR_NAMES),
    },
}


class CliError(RuntimeError):
    pass


def _merge_config(defaults, override, path=""):
    out = copy.deepcopy(defaults)
    for key, val in override.items():
        where = f"{path}.{key}" if path else key
        if key not in defaults:
            raise CliError(f"unknown config key: {where}")
        if isinstance(defaults[key], dict):
            if not isinstance(val, dict):
                raise CliError(f"config key {where} must be a section")
            out[key] = _merge_config(defaults[key], val, where)
        else:
            out[key] = val
    return out


def load_config(path=None, overrides=None) -> dict:
    cfg = {}
    if path:
        with open(path) as fh:
            cfg = json.load(fh)
    cfg = _merge_config(DEFAULT_CONFIG, cfg)
    for dotted, value in (overrides or {}).items():
        if "." in dotted:
            section, key = dotted.split(".", 1)
            if section not in cfg or not isinstance(cfg[section], dict) \
                    or key not in cfg[section]:
                raise CliError(f"unknown config key: {dotted}")
            cfg[section][key] = value
        else:
            if dotted not in cfg or isinstance(cfg[dotted], dict):
                raise CliError(f"unknown config key: {dotted}")
            cfg[dotted] = value
    return cfg


def _config_hash(cfg) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()[:16]


def _phantom_spec(cfg) -> PhantomSpec:
    p = cfg["phantom"]
    return PhantomSpec(
        kind=p["kind"], semi_axes_mm=tuple(p["semi_axes_mm"]), radius_mm=p["radius_mm"],
        bump_amplitude_mm=p["bump_amplitude_mm"], bump_freq=p["bump_freq"],
        inside_value=p["inside_value"], outside_value=p["outside_value"],
        noise_sigma=p["noise_sigma"], blur_sigma_mm=p["blur_sigma_mm"],
        dims=tuple(p["dims"]), spacing=tuple(p["spacing"]), seed=cfg["seed"],
        mesh_subdivisions=p["mesh_subdivisions"])


def _crf_params(cfg) -> crfmod.CrfParams:
    return crfmod.CrfParams(**cfg["crf"])


class _Step:
    """Context manager: tracks written files for the provenance record and
    removes partial outputs when the step raises."""

    def __init__(self, name, outdir, cfg, inputs):
        self.name = name
        self.outdir = outdir
        self.cfg = cfg
        self.inputs = inputs
        self.written = []
        self.t0 = time.time()
        os.makedirs(outdir, exist_ok=True)

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc_type is not None:
            self._fail_cleanup()
            return False
        self._finish()
        return False

    def path(self, rel):
        p = os.path.join(self.outdir, rel)
        self.written.append(p)
        return p

    def _fail_cleanup(self):
        import shutil
        for p in self.written:
            if os.path.isdir(p):
                shutil.rmtree(p, ignore_errors=True)
            elif os.path.exists(p):
                os.remove(p)

    def _finish(self):
        prov = {
            "command": self.name,
            "inputs": self.inputs,
            "config_hash": _config_hash(self.cfg),
            "seed": self.cfg["seed"],
            "wall_time_s": round(time.time() - self.t0, 3),
            "outputs": [os.path.relpath(p, self.outdir) for p in self.written],
        }
        with open(os.path.join(self.outdir, f"{self.name}.prov.json"), "w") as fh:
            json.dump(prov, fh, indent=1, sort_keys=True)


def _echo_config(cfg, outdir):
    os.makedirs(outdir, exist_ok=True)
    with open(os.path.join(outdir, "config.echo.json"), "w") as fh:
        json.dump(cfg, fh, indent=1, sort_keys=True)


# ---------------------------------------------------------------------------
# steps


def cmd_phantom(cfg, outdir):
    with _Step("phantom", outdir, cfg, []) as step:
        spec = _phantom_spec(cfg)
        vol, truth = make_phantom(spec)
        labels = phantom_label_volume(spec)
        save_svol(vol, step.path("volume.svol"))
        save_svol(labels, step.path("labels.svol"))
        save_mesh(truth, step.path("truth.mesh"))
        with open(step.path("phantom.spec.json"), "w") as fh:
            fh.write(spec.to_json())


def perturb_mesh_radially(mesh: TriMesh, amplitude: float, components: int, seed: int) -> TriMesh:
    """Seeded smooth radial displacement field, standardized to the requested
    RMS amplitude (emulates an imperfect pre-segmentation)."""
    rng = np.random.default_rng(seed)
    c = mesh.vertices.mean(axis=0)
    d = mesh.vertices - c
    r = np.linalg.norm(d, axis=1)
    u = d / r[:, None]
    dirs = rng.normal(size=(components, 3))
    dirs /= np.linalg.norm(dirs, axis=1)[:, None]
    freqs = rng.uniform(1.5, 3.0, components)
    phases = rng.uniform(0, 2 * np.pi, components)
    field = np.zeros(len(u))
    for k in range(components):
        field += np.sin(freqs[k] * (u @ dirs[k]) * np.pi + phases[k])
    if amplitude > 0:
        field = (field - field.mean()) / (field.std() + 1e-12) * amplitude
    else:
        field = np.zeros_like(field)
    return TriMesh(vertices=c + (r + field)[:, None] * u, faces=mesh.faces.copy())


def cmd_presegment(cfg, outdir):
    with _Step("presegment", outdir, cfg, ["truth.mesh"]) as step:
        p = cfg["preseg"]
        truth = load_mesh(os.path.join(outdir, "truth.mesh"))
        smooth = taubin_smooth(truth, p["smooth_iterations"], p["smooth_lambda"], p["smooth_mu"])
        pre = perturb_mesh_radially(smooth, p["perturb_amplitude_mm"],
                                    p["perturb_components"], cfg["seed"] + 1000)
        save_mesh(pre, step.path("preseg.mesh"))


def cmd_spheremap(cfg, outdir):
    with _Step("spheremap", outdir, cfg, ["preseg.mesh"]) as step:
        s = cfg["spheremap"]
        pre = load_mesh(os.path.join(outdir, "preseg.mesh"))
        smap = harmonic_sphere_map(pre, tol=s["tol"], max_iters=s["max_iters"],
                                   damping=s["damping"])
        save_mesh(TriMesh(vertices=smap.positions, faces=pre.faces), step.path("sphere.mesh"))
        with open(step.path("spheremap.report.json"), "w") as fh:
            json.dump({"iterations": smap.iterations, "converged": smap.converged,
                       "clamped_weights": smap.clamped_weights,
                       "final_energy": float(smap.energy_trace[-1])}, fh)


def cmd_remesh(cfg, outdir):
    with _Step("remesh", outdir, cfg, ["preseg.mesh", "sphere.mesh"]) as step:
        from .mesh import SphereMap
        pre = load_mesh(os.path.join(outdir, "preseg.mesh"))
        sphere = load_mesh(os.path.join(outdir, "sphere.mesh"))
        smap = SphereMap(mesh=pre, positions=sphere.vertices)
        qs = build_quadsphere(cfg["quad"]["recursion"])
        qm = remesh(pre, smap, qs)
        save_quadmesh(qm, step.path("quad.mesh"), step.path("quad.json"))


def cmd_patches(cfg, outdir):
    with _Step("patches", outdir, cfg, ["volume.svol", "quad.mesh", "quad.json"]) as step:
        pc = cfg["patches"]
        vol = load_svol(os.path.join(outdir, "volume.svol"))
        qm = load_quadmesh(os.path.join(outdir, "quad.mesh"), os.path.join(outdir, "quad.json"))
        ps = sample_columns(vol, qm, z_len=pc["column_len"], delta=pc["column_res_mm"],
                            pad=pc["pad"])
        save_patchset(ps, step.path("patches"))
        truth_path = os.path.join(outdir, "truth.mesh")
        if os.path.exists(truth_path):
            truth = load_mesh(truth_path)
            gt = ground_truth(qm, truth, pc["column_len"], pc["column_res_mm"])
            with open(step.path("ground_truth.json"), "w") as fh:
                fh.write(gt.to_json())


def _load_unary(cfg, outdir) -> tuple:
    ps = load_patchset(os.path.join(outdir, "patches"))
    un = cfg["unary"]
    if un["mode"] == "gradient":
        u = crfmod.gradient_unary(ps, polarity=un["polarity"])
        logits = un["scale"] * u.logits
    elif un["mode"] == "external":
        ext = un["external_dir"] or os.path.join(outdir, "external_logits")
        logits = np.zeros((*ps.graph.shape, ps.z_len))
        for f in range(6):
            surf = load_svol(os.path.join(ext, f"patch{f}_surface.svol")).data
            nons = load_svol(os.path.join(ext, f"patch{f}_nonsurface.svol")).data
            logits[f] = crfmod.channel_reduce(surf, nons)
        logits = un["scale"] * logits
    else:
        raise CliError(f"unknown unary mode {un['mode']!r}")
    return ps, crfmod.unary_from_logits(ps.graph, logits)


def cmd_unary(cfg, outdir):
    with _Step("unary", outdir, cfg, ["patches"]) as step:
        ps, u = _load_unary(cfg, outdir)
        W = ps.graph.shape[1]
        for f in range(6):
            save_svol(Volume(dims=(W, W, ps.z_len), spacing=(1.0, 1.0, ps.delta),
                             origin=(0.0, 0.0, 0.0), data=u.logits[f].astype(np.float32)),
                      step.path(f"unary{f}.svol"))
        baseline = u.argmax_labels()
        with open(step.path("unary_argmax.json"), "w") as fh:
            json.dump({"labels": baseline.tolist()}, fh)


def cmd_segment(cfg, outdir):
    with _Step("segment", outdir, cfg, ["patches", "unary"]) as step:
        ps, u = _load_unary(cfg, outdir)
        params = _crf_params(cfg)
        lab = crfmod.meanfield_infer(u, params, ps=ps)
        W = ps.graph.shape[1]
        q_slots = ps.graph.split(lab.q, fill=0.0)
        for f in range(6):
            save_svol(Volume(dims=(W, W, ps.z_len), spacing=(1.0, 1.0, ps.delta),
                             origin=(0.0, 0.0, 0.0), data=q_slots[f].astype(np.float32)),
                      step.path(f"q{f}.svol"))
        with open(step.path("labeling.json"), "w") as fh:
            json.dump({"labels": lab.labels.tolist()}, fh)
        verts, faces = labeling_to_world(lab.labels, ps)
        from .mesh import save_quad_mesh_records
        save_quad_mesh_records(step.path("pred.mesh"), verts, faces)


def cmd_metrics(cfg, outdir):
    with _Step("metrics", outdir, cfg,
               ["pred.mesh", "truth.mesh", "labels.svol", "volume.svol"]) as step:
        from .mesh import load_quad_mesh_records
        pred_verts, pred_faces = load_quad_mesh_records(os.path.join(outdir, "pred.mesh"))
        truth = load_mesh(os.path.join(outdir, "truth.mesh"))
        template = load_svol(os.path.join(outdir, "volume.svol"))
        labels = load_svol(os.path.join(outdir, "labels.svol"))
        rep = compare_surfaces(pred_verts, pred_faces, truth.vertices, truth.faces,
                               template, labels=labels)
        with open(step.path("metrics.json"), "w") as fh:
            fh.write(rep.to_json())


def cmd_fit(cfg, outdir, manifest_path):
    with _Step("fit", outdir, cfg, [manifest_path]) as step:
        with open(manifest_path) as fh:
            manifest = json.load(fh)
        dataset = []
        for run_dir in manifest["runs"]:
            ps = load_patchset(os.path.join(run_dir, "patches"))
            un = cfg["unary"]
            u = crfmod.gradient_unary(ps, polarity=un["polarity"])
            with open(os.path.join(run_dir, "ground_truth.json")) as fh:
                gt = GroundTruth.from_json(fh.read())
            dataset.append((ps, u, gt))
        fc = cfg["fit"]
        fit_cfg = trainmod.FitConfig(lr=fc["lr"], epochs=fc["epochs"], momentum=fc["momentum"],
                                     seed=cfg["seed"], trainable=tuple(fc["trainable"]))
        result = trainmod.fit(dataset, _crf_params(cfg), fit_cfg,
                              unary_scale=cfg["unary"]["scale"])
        with open(step.path("fit.json"), "w") as fh:
            fh.write(result.to_json())


def cmd_pipeline(cfg, outdir):
    _echo_config(cfg, outdir)
    cmd_phantom(cfg, outdir)
    cmd_presegment(cfg, outdir)
    cmd_spheremap(cfg, outdir)
    cmd_remesh(cfg, outdir)
    cmd_patches(cfg, outdir)
    cmd_unary(cfg, outdir)
    cmd_segment(cfg, outdir)
    cmd_metrics(cfg, outdir)


# ---------------------------------------------------------------------------
# argument parsing

# short aliases for the commonly overridden keys
_FLAG_MAP = {
    "seed": ("seed", int),
    "kind": ("phantom.kind", str),
    "noise-sigma": ("phantom.noise_sigma", float),
    "blur-sigma-mm": ("phantom.blur_sigma_mm", float),
    "perturb-amplitude-mm": ("preseg.perturb_amplitude_mm", float),
    "recursion": ("quad.recursion", int),
    "column-len": ("patches.column_len", int),
    "column-res-mm": ("patches.column_res_mm", float),
    "pad": ("patches.pad", int),
    "unary-mode": ("unary.mode", str),
    "polarity": ("unary.polarity", str),
    "unary-scale": ("unary.scale", float),
    "external-dir": ("unary.external_dir", str),
    "w-p": ("crf.w_p", float),
    "w1": ("crf.w1", float),
    "theta1": ("crf.theta1", float),
    "theta2": ("crf.theta2", float),
    "theta3": ("crf.theta3", float),
    "theta-comp": ("crf.theta_comp", float),
    "window-radius": ("crf.window_radius", int),
    "iterations": ("crf.iterations", int),
    "kernel-variant": ("crf.kernel_variant", str),
    "lr": ("fit.lr", float),
    "epochs": ("fit.epochs", int),
    "momentum": ("fit.momentum", float),
}


def _generated_flags():
    """Long-form --<section>-<key> flags for every scalar config leaf."""
    flags = dict(_FLAG_MAP)
    covered = {dotted for dotted, _ in _FLAG_MAP.values()}
    for section, body in DEFAULT_CONFIG.items():
        if not isinstance(body, dict):
            continue
        for key, default in body.items():
            dotted = f"{section}.{key}"
            if dotted in covered or isinstance(default, (list, dict)):
                continue
            typ = type(default)
            if typ is bool:
                continue
            flags[f"{section}-{key}".replace("_", "-")] = (dotted, typ)
    return flags


def _build_parser():
    parser = argparse.ArgumentParser(prog="surfcrf",
                                     description="surface CRF segmentation pipeline")
    sub = parser.add_subparsers(dest="command", required=True)
    commands = ("phantom", "presegment", "spheremap", "remesh", "patches",
                "unary", "segment", "fit", "metrics", "pipeline")
    flags = _generated_flags()
    for name in commands:
        p = sub.add_parser(name)
        p.add_argument("--config", default=None, help="RunConfig JSON path")
        p.add_argument("--out", required=True, help="output directory")
        if name == "fit":
            p.add_argument("--manifest", required=True,
                           help="JSON manifest with a 'runs' list of pipeline dirs")
        for flag, (dotted, typ) in flags.items():
            p.add_argument(f"--{flag}", dest=dotted, type=typ, default=None)
    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    skip = {"command", "config", "out", "manifest"}
    overrides = {k: v for k, v in vars(args).items()
                 if k not in skip and v is not None}
    try:
        cfg = load_config(args.config, overrides)
        outdir = args.out
        if args.command == "pipeline":
            cmd_pipeline(cfg, outdir)
        elif args.command == "fit":
            cmd_fit(cfg, outdir, args.manifest)
        else:
            _echo_config(cfg, outdir)
            globals()[f"cmd_{args.command}"](cfg, outdir)
    except Exception as exc:  # single-line machine-parsable error
        print("error: " + json.dumps({"command": args.command, "message": str(exc)}),
              file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
