"""Experiment execution, persistence and acceptance checks."""

import csv
import datetime as _dt
import hashlib
import io
import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .. import __version__, _kernels
from .. import rng as rng_mod
from ..analytic_model import GaussianMixture, GuidedModel
from ..distill import Distiller, DistillConfig, LearnedConfig, NumericAbort, _fmt
from ..metrics import GridSpec, distillation_objective, diversity, sliced_w2
from ..renderer import Renderer
from ..sampler import SamplerConfig, ancestral_sample, mode_assign
from ..schedule import TimeSchedule
from .config import serialize
from .images import render_density_image

MANIFEST = "manifest.json"


# --------------------------------------------------------------------------
# building blocks from a config


def build_target(cfg, guidance_scale=None):
    t = cfg["target"]
    cond = GaussianMixture.from_components(t["components"])
    s = cfg["distill"]["guidance_scale"] if guidance_scale is None else guidance_scale
    return GuidedModel.broadened(cond, s, cov_scale=t["uncond_cov_scale"], mean_scale=t["uncond_mean_scale"])


def build_renderer(cfg):
    r = cfg["renderer"]
    if r["kind"] == "identity":
        return Renderer.identity(r["param_dim"])
    return Renderer.linear(r["param_dim"], r["image_dim"])


def build_schedule(cfg, steps):
    s = cfg["schedule"]
    if s["phase1"] == s["phase2"]:
        return TimeSchedule.uniform(*s["phase1"])
    return TimeSchedule(tuple(s["phase1"]), tuple(s["phase2"]), int(round(steps * s["switch_fraction"])))


def build_distill_config(cfg, seed, **overrides):
    d = dict(cfg["distill"])
    d.update(overrides)
    n = d["n_particles"]
    lc = cfg["learned"]
    return DistillConfig(
        method=d["method"],
        estimator=d["estimator"],
        n_particles=n,
        steps=d["steps"],
        particle_lr=d["particle_lr"],
        particle_batch=d["particle_batch"] or n,
        particle_optimizer=d["particle_optimizer"],
        mc_batch=d["mc_batch"],
        guidance_scale=d["guidance_scale"],
        time_schedule=d.get("time_schedule") or build_schedule(cfg, d["steps"]),
        init_mean=tuple(d["init_mean"]),
        init_std=d["init_std"],
        snapshot_stride=d["snapshot_stride"],
        seed=seed,
        learned=LearnedConfig(**lc),
    )


def baseline_samples(cfg, guidance_scale=None):
    s = cfg["distill"]["guidance_scale"] if guidance_scale is None else guidance_scale
    sc = SamplerConfig(cfg["sampler"]["n_steps"], cfg["sampler"]["n_samples"], s, cfg.seed)
    return ancestral_sample(build_target(cfg, s), sc, rng_mod.stream(cfg.seed, "baseline", int(round(s * 1000))))


def eval_cameras(cfg, renderer):
    if renderer.is_identity:
        return [0.0]
    k = cfg["metrics"]["n_cameras"]
    return [2 * math.pi * i / k for i in range(k)]


# --------------------------------------------------------------------------
# metrics


def ensemble_metrics(cfg, particles, baseline, renderer, guided, objective=None):
    """Sliced W2 (averaged over evaluation cameras), diversity, modes, objective."""
    m = cfg["metrics"]
    out = {"n_particles": int(particles.shape[0])}
    w2 = []
    for ang in eval_cameras(cfg, renderer):
        renders = renderer.render_batch(particles, np.full(particles.shape[0], ang))
        w2.append(sliced_w2(renders, baseline, m["w2_projections"], rng_mod.stream(cfg.seed, "w2-directions")))
    out["sliced_w2"] = float(np.mean(w2))
    out["diversity"] = diversity(particles) if particles.shape[0] >= 2 else None
    if renderer.is_identity:
        target = guided.conditional
        out["mode_counts"] = [int(c) for c in mode_assign(particles, target)]
        out["near_mode_fraction"] = near_mode_fraction(particles, target.means, m["mode_radius"])
    if objective if objective is not None else m["objective"]:
        grid = GridSpec.square(renderer.image_dim, m["grid_bound"], m["grid_points"] or None)
        out["objective"] = distillation_objective(
            particles, renderer, guided, grid, m["objective_times"], n_cameras=m["n_cameras"]
        )
    return out


def near_mode_fraction(points, means, radius):
    d = np.linalg.norm(points[:, None, :] - np.asarray(means)[None, :, :], axis=2)
    return float(np.mean(d.min(axis=1) <= radius))


def within_mode_diversity(points, model):
    """Mean pairwise distance inside each assigned mode, averaged over modes with >= 2 points."""
    labels = np.argmax(model.component_log_resp(points), axis=1)
    vals = [diversity(points[labels == k]) for k in range(model.n_components) if np.sum(labels == k) >= 2]
    return float(np.mean(vals)) if vals else None


# --------------------------------------------------------------------------
# persistence


def _cell(v):
    if v is None:
        return ""
    if isinstance(v, str):
        return v
    if isinstance(v, (bool, list)):
        return json.dumps(v)
    return _fmt(v)


def _csv_bytes(header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_cell(v) for v in row])
    return buf.getvalue().encode()


def points_csv(points, label="particle"):
    points = np.atleast_2d(points)
    header = [label] + [f"coord_{j}" for j in range(points.shape[1])]
    return _csv_bytes(header, ([i, *p] for i, p in enumerate(points)))


def read_points_csv(path):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        cols = [i for i, h in enumerate(header) if h.startswith("coord_")]
        if not cols:
            raise ValueError(f"{path}: no coord_* columns in header")
        return np.array([[float(r[i]) for i in cols] for r in reader if r], dtype=np.float64)


def _clean(obj):
    """JSON-safe copy: numpy scalars to Python, non-finite floats to None."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        return float(obj) if math.isfinite(obj) else None
    return obj


def json_bytes(obj):
    return (json.dumps(_clean(obj), indent=2, sort_keys=True) + "\n").encode()


def flatten(obj, prefix=""):
    """Nested metrics as a flat ``{"a.b.c": value}`` dict; lists stay values."""
    out = {}
    if isinstance(obj, dict):
        for k in sorted(obj):
            out.update(flatten(obj[k], f"{prefix}.{k}" if prefix else str(k)))
    else:
        out[prefix] = obj
    return out


def summary_csv(flat):
    return _csv_bytes(["metric", "value"], flat.items())


class Writer:
    """Collects output files under one directory."""

    def __init__(self, root):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)

    def write(self, rel, data):
        path = self.root / rel
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(data if isinstance(data, bytes) else data.encode())
        return path


def _image(cfg, writer, rel, source, particles):
    e = cfg["experiment"]
    if not e["images"] or particles.shape[1] != 2:
        return
    grid = GridSpec.square(2, e["image_bound"], e["image_points"])
    if source is not None and getattr(source, "dim", 2) != 2:
        source = None
    path = writer.root / f"{rel}.{e['image_format']}"
    path.parent.mkdir(parents=True, exist_ok=True)
    render_density_image(source, grid, path, particles=particles, fmt=e["image_format"])


# --------------------------------------------------------------------------
# sub-runs


@dataclass
class SubRun:
    name: str
    config: DistillConfig
    guided: GuidedModel
    particles: np.ndarray = None
    files: dict = field(default_factory=dict)


def execute(sub, renderer):
    d = Distiller(sub.config, sub.guided, renderer)
    ens, traj = d.run()
    sub.particles = ens.particles
    sub.files = {
        "trajectory.csv": traj.to_bytes(),
        "final_ensemble.csv": points_csv(ens.particles),
        "checkpoint.txt": d.checkpoint_text().encode(),
    }
    return sub


def _threads():
    raw = os.environ.get("VSDLAB_THREADS", "").strip()
    if not raw:
        return 1
    try:
        n = int(raw)
    except ValueError:
        raise ValueError(f"VSDLAB_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise ValueError(f"VSDLAB_THREADS must be a positive integer, got {raw!r}")
    return n


def run_all(subs, renderer):
    """Run sub-runs, in parallel when ``VSDLAB_THREADS`` > 1; results keep input order."""
    n = min(_threads(), len(subs)) or 1
    if n == 1:
        return [execute(s, renderer) for s in subs]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(lambda s: execute(s, renderer), subs))


def _store(writer, sub, cfg):
    for fname, data in sub.files.items():
        writer.write(f"{sub.name}/{fname}", data)
    _image(cfg, writer, f"{sub.name}/particles", sub.guided, sub.particles)


# --------------------------------------------------------------------------
# experiment kinds


def _run_single(cfg, writer, renderer):
    guided = build_target(cfg)
    base = baseline_samples(cfg)
    sub = run_all([SubRun("vsd" if cfg["distill"]["method"] == "vsd" else "sds", build_distill_config(cfg, cfg.seed), guided)], renderer)[0]
    _store(writer, sub, cfg)
    writer.write("baseline_samples.csv", points_csv(base, "sample"))
    return {sub.name: ensemble_metrics(cfg, sub.particles, base, renderer, guided)}


def _run_compare(cfg, writer, renderer):
    guided = build_target(cfg)
    base = baseline_samples(cfg)
    n_sds = cfg["experiment"]["sds_seeds"]
    subs = [SubRun("vsd", build_distill_config(cfg, cfg.seed), guided)]
    for k in range(n_sds):
        seed = rng_mod.derive_seed(cfg.seed, "sds-seed", k)
        sc = build_distill_config(cfg, seed, method="sds", estimator="dirac", n_particles=1, particle_batch=1)
        subs.append(SubRun(f"sds/seed_{k:02d}", sc, guided))
    subs = run_all(subs, renderer)
    _store(writer, subs[0], cfg)
    for sub in subs[1:]:
        for fname, data in sub.files.items():
            writer.write(f"{sub.name}/{fname}", data)
    endpoints = np.concatenate([s.particles for s in subs[1:]], axis=0)
    writer.write("sds/endpoints.csv", points_csv(endpoints, "seed"))
    writer.write("baseline_samples.csv", points_csv(base, "sample"))
    _image(cfg, writer, "sds/endpoints", guided, endpoints)
    _image(cfg, writer, "baseline_samples", guided, base[:2000])
    vsd = ensemble_metrics(cfg, subs[0].particles, base, renderer, guided)
    target = guided.conditional
    vsd["within_mode_diversity"] = within_mode_diversity(subs[0].particles, target)
    sds = {
        "n_seeds": n_sds,
        "diversity": diversity(endpoints) if n_sds >= 2 else None,
        "within_mode_diversity": within_mode_diversity(endpoints, target),
        "mode_counts": [int(c) for c in mode_assign(endpoints, target)],
        "near_mode_fraction": near_mode_fraction(endpoints, target.means, cfg["metrics"]["mode_radius"]),
        "mode_distance": [float(v) for v in np.linalg.norm(endpoints[:, None] - target.means[None], axis=2).min(axis=1)],
    }
    baseline = {"n_samples": int(base.shape[0]), "diversity_of_first_64": diversity(base[:64])}
    return {"vsd": vsd, "sds": sds, "baseline": baseline}


def _run_estimator_compare(cfg, writer, renderer):
    guided = build_target(cfg)
    base = baseline_samples(cfg)
    est = cfg["distill"]["estimator"]
    other = "empirical" if est != "empirical" else "learned"
    subs = [
        SubRun(f"vsd_{est}", build_distill_config(cfg, cfg.seed), guided),
        SubRun(f"vsd_{other}", build_distill_config(cfg, cfg.seed, estimator=other), guided),
    ]
    subs = run_all(subs, renderer)
    out = {}
    for sub in subs:
        _store(writer, sub, cfg)
        out[sub.name] = ensemble_metrics(cfg, sub.particles, base, renderer, guided)
    writer.write("baseline_samples.csv", points_csv(base, "sample"))
    out["w2_gap"] = abs(out["vsd_learned"]["sliced_w2"] - out["vsd_empirical"]["sliced_w2"])
    return out


def _sweep_seeds(cfg):
    return [int(s) for s in cfg["experiment"]["seeds"]] or [cfg.seed]


def _run_cfg_sweep(cfg, writer, renderer):
    scales = [float(s) for s in cfg["experiment"]["sweep_values"]]
    seeds = _sweep_seeds(cfg)
    subs = []
    for s in scales:
        guided = build_target(cfg, s)
        for seed in seeds:
            subs.append(SubRun(f"s_{s:g}/seed_{seed}", build_distill_config(cfg, seed, guidance_scale=s), guided))
    subs = run_all(subs, renderer)
    rows = []
    table = {}
    for s in scales:
        base = baseline_samples(cfg, s)
        writer.write(f"s_{s:g}/baseline_samples.csv", points_csv(base, "sample"))
        for seed in seeds:
            sub = next(x for x in subs if x.name == f"s_{s:g}/seed_{seed}")
            _store(writer, sub, cfg)
            m = ensemble_metrics(cfg, sub.particles, base, renderer, sub.guided)
            table.setdefault(f"{s:g}", {})[str(seed)] = m
            rows.append([s, seed, m["diversity"], m["sliced_w2"]])
    writer.write("diversity_table.csv", _csv_bytes(["guidance_scale", "seed", "diversity", "sliced_w2"], rows))
    return {"scales": scales, "seeds": seeds, "runs": table}


def _run_particles_sweep(cfg, writer, renderer):
    counts = [int(n) for n in cfg["experiment"]["sweep_values"]]
    seeds = _sweep_seeds(cfg)
    guided = build_target(cfg)
    base = baseline_samples(cfg)
    writer.write("baseline_samples.csv", points_csv(base, "sample"))
    subs = [
        SubRun(f"n_{n}/seed_{seed}", build_distill_config(cfg, seed, n_particles=n, particle_batch=0), guided)
        for n in counts
        for seed in seeds
    ]
    subs = run_all(subs, renderer)
    rows = []
    table = {}
    for sub in subs:
        _store(writer, sub, cfg)
        m = ensemble_metrics(cfg, sub.particles, base, renderer, guided)
        table[sub.name] = m
        rows.append([sub.config.n_particles, sub.config.seed, m["diversity"], m["sliced_w2"]])
    writer.write("particles_table.csv", _csv_bytes(["n_particles", "seed", "diversity", "sliced_w2"], rows))
    return {"counts": counts, "seeds": seeds, "runs": table}


def _run_schedule_ablation(cfg, writer, renderer):
    guided = build_target(cfg)
    base = baseline_samples(cfg)
    steps = cfg["distill"]["steps"]
    phase1 = tuple(cfg["schedule"]["phase1"])
    annealed = build_schedule(cfg, steps)
    if annealed.phase1 == annealed.phase2:
        annealed = TimeSchedule(phase1, (0.02, 0.50), int(round(steps * cfg["schedule"]["switch_fraction"])))
    subs = [
        SubRun("annealed", build_distill_config(cfg, cfg.seed, time_schedule=annealed), guided),
        SubRun("uniform", build_distill_config(cfg, cfg.seed, time_schedule=TimeSchedule.uniform(*phase1)), guided),
    ]
    subs = run_all(subs, renderer)
    out = {}
    for sub in subs:
        _store(writer, sub, cfg)
        out[sub.name] = ensemble_metrics(cfg, sub.particles, base, renderer, guided, objective=True)
    writer.write("baseline_samples.csv", points_csv(base, "sample"))
    out["objective_ratio"] = out["annealed"]["objective"] / out["uniform"]["objective"]
    return out


KINDS = {
    "single": _run_single,
    "compare": _run_compare,
    "estimator-compare": _run_estimator_compare,
    "cfg-sweep": _run_cfg_sweep,
    "particles-sweep": _run_particles_sweep,
    "schedule-ablation": _run_schedule_ablation,
}


# --------------------------------------------------------------------------
# acceptance checks


@dataclass(frozen=True)
class Check:
    name: str
    passed: bool
    detail: str


def _check_fig4(cfg, m):
    vsd, sds = m["vsd"], m["sds"]
    return [
        Check(
            "vsd-sliced-w2",
            cfg["distill"]["steps"] <= 5000 and vsd["sliced_w2"] <= 0.2,
            f"sliced W2 {vsd['sliced_w2']:.4f} <= 0.2 after {cfg['distill']['steps']} steps",
        ),
        Check(
            "sds-mode-seeking",
            sds["near_mode_fraction"] >= 0.8,
            f"{sds['near_mode_fraction']:.0%} of {sds['n_seeds']} SDS seeds within {cfg['metrics']['mode_radius']} of a mode (need >= 80%)",
        ),
        Check(
            "sds-diversity",
            sds["diversity"] is not None and sds["diversity"] < 0.5 * vsd["diversity"],
            f"SDS endpoint diversity {sds['diversity']:.4f} < 0.5 x VSD diversity {vsd['diversity']:.4f}",
        ),
    ]


def _check_scale(cfg, m):
    r = m["vsd"]
    return [Check("scale-sliced-w2", r["sliced_w2"] <= 0.15, f"{r['n_particles']} particles: sliced W2 {r['sliced_w2']:.4f} <= 0.15")]


def _check_learned(cfg, m):
    return [
        Check(
            "learned-vs-empirical",
            m["w2_gap"] <= 0.1,
            f"|W2 learned {m['vsd_learned']['sliced_w2']:.4f} - W2 empirical {m['vsd_empirical']['sliced_w2']:.4f}| = {m['w2_gap']:.4f} <= 0.1",
        )
    ]


def _check_cfg(cfg, m):
    out = []
    scales = [f"{s:g}" for s in m["scales"]]
    for seed in m["seeds"]:
        div = [m["runs"][s][str(seed)]["diversity"] for s in scales]
        ok = all(b <= 1.1 * a for a, b in zip(div, div[1:]))
        out.append(
            Check(f"cfg-diversity-seed-{seed}", ok, "diversity over s=" + ",".join(scales) + ": " + ", ".join(f"{d:.4f}" for d in div))
        )
    return out


def _check_schedule(cfg, m):
    a, u = m["annealed"]["objective"], m["uniform"]["objective"]
    return [Check("annealed-objective", a <= 1.1 * u, f"annealed {a:.6g} <= 1.1 x uniform {u:.6g} (ratio {a / u:.3f})")]


CHECKS = {
    "fig4-2d": _check_fig4,
    "scale-2048": _check_scale,
    "learned-2d": _check_learned,
    "cfg-sweep": _check_cfg,
    "schedule-ablation": _check_schedule,
}


def evaluate_checks(cfg, metrics):
    fn = CHECKS.get(cfg[""]["preset"])
    return fn(cfg, metrics) if fn else []


# --------------------------------------------------------------------------
# top level


@dataclass
class RunManifest:
    config: str
    version: str
    started: str
    finished: str
    status: str
    exit_status: int
    error: str
    files: list
    checks: list = field(default_factory=list)
    metrics: dict = field(default=None, repr=False)

    def to_json(self):
        return json.dumps(
            {
                "tool": "vsdlab",
                "version": self.version,
                "backend": _kernels.BACKEND,
                "config": self.config,
                "started": self.started,
                "finished": self.finished,
                "status": self.status,
                "exit_status": self.exit_status,
                "error": self.error,
                "checks": self.checks,
                "files": self.files,
            },
            indent=2,
        ) + "\n"


def _now():
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def inventory(root):
    """Every file under ``root`` except the manifest, with SHA-256 digests."""
    root = Path(root)
    files = []
    for path in sorted(p for p in root.rglob("*") if p.is_file()):
        rel = path.relative_to(root).as_posix()
        if rel == MANIFEST:
            continue
        data = path.read_bytes()
        files.append({"path": rel, "sha256": hashlib.sha256(data).hexdigest(), "bytes": len(data)})
    return files


def run_experiment(config, out_dir, check=False):
    """Execute ``config`` into ``out_dir``; returns the :class:`RunManifest`.

    Acceptance checks attached to the preset are always evaluated and
    recorded; ``check=True`` turns a failure into exit status 4.
    Module errors are recorded in the manifest (status ``"error"``) and then
    re-raised for the caller to map to an exit code.
    """
    writer = Writer(out_dir)
    started = _now()
    text = serialize(config)
    status, code, error, checks, metrics = "ok", 0, "", [], None
    try:
        writer.write("config.cfg", text)
        metrics = KINDS[config["experiment"]["kind"]](config, writer, build_renderer(config))
        results = evaluate_checks(config, metrics)
        checks = [{"name": c.name, "passed": c.passed, "detail": c.detail} for c in results]
        metrics["check"] = {c.name: {"passed": c.passed, "detail": c.detail} for c in results}
        if check and not all(c.passed for c in results):
            status, code = "check-failed", 4
        metrics["run"] = {"preset": config[""]["preset"], "seed": config.seed, "kind": config["experiment"]["kind"]}
        flat = flatten(_clean(metrics))
        writer.write("metrics.json", json_bytes(flat))
        writer.write("summary.csv", summary_csv(flat))
    except NumericAbort as exc:
        status, code, error = "numeric-abort", 3, str(exc)
        raise
    except Exception as exc:
        status, code, error = "error", 1, f"{type(exc).__name__}: {exc}"
        raise
    finally:
        manifest = RunManifest(text, __version__, started, _now(), status, code, error, inventory(writer.root), checks, metrics)
        (writer.root / MANIFEST).write_text(manifest.to_json())
    return manifest
