"""Experiment configuration: a line-oriented ``key = value`` format.

Layout::

    # comment
    preset = "fig4-2d"          # optional: start from a shipped preset
    seed = 7

    [distill]
    method = "vsd"
    n_particles = 64

    [target]
    components = [{"weight": 0.5, "mean": [2, 0], "cov": 0.25}, {"weight": 0.5, "mean": [-2, 0], "cov": 0.25}]

Values are JSON literals (strings in double quotes, numbers, ``true`` /
``false``, lists, objects).  Every key must be known; errors report the
line number and the offending key.
"""

import copy
import json
from dataclasses import dataclass

from .. import __version__


class ConfigError(ValueError):
    def __init__(self, message, line=None, key=None):
        self.line = line
        self.key = key
        where = f"line {line}: " if line is not None else ""
        super().__init__(f"{where}{message}")


def _enum(*allowed):
    def check(v):
        if v not in allowed:
            return f"must be one of {', '.join(repr(a) for a in allowed)}"

    return check


def _positive(v):
    if not v > 0:
        return "must be > 0"


def _nonneg(v):
    if not v >= 0:
        return "must be >= 0"


def _at_least(k):
    def check(v):
        if v < k:
            return f"must be >= {k}"

    return check


def _interval(v):
    if len(v) != 2 or not all(isinstance(x, (int, float)) and not isinstance(x, bool) for x in v):
        return "must be a two-element numeric list [lo, hi]"
    lo, hi = v
    if not (0 < lo <= hi < 1):
        return "must satisfy 0 < lo <= hi < 1"


def _components(v):
    if not isinstance(v, list) or not v:
        return "must be a nonempty list of component objects"
    for c in v:
        if not isinstance(c, dict) or set(c) - {"weight", "mean", "cov"} or not {"weight", "mean"} <= set(c):
            return 'each component needs "weight" and "mean" (and optionally "cov")'


def _fraction(v):
    if not 0 <= v <= 1:
        return "must lie in [0, 1]"


# (type, default, validator); type "float" accepts ints
SCHEMA = {
    "": {
        "preset": ("str", "", None),
        "name": ("str", "custom", None),
        "seed": ("int", 0, _nonneg),
    },
    "experiment": {
        "kind": ("str", "single", _enum("single", "compare", "estimator-compare", "cfg-sweep", "particles-sweep", "schedule-ablation")),
        "sweep_values": ("list", [], None),
        "seeds": ("list", [], None),
        "sds_seeds": ("int", 20, _at_least(1)),
        "images": ("bool", True, None),
        "image_format": ("str", "ppm", _enum("ppm", "png")),
        "image_bound": ("float", 4.0, _positive),
        "image_points": ("int", 128, _at_least(16)),
    },
    "target": {
        "components": (
            "list",
            [
                {"weight": 0.5, "mean": [2.0, 0.0], "cov": 0.25},
                {"weight": 0.5, "mean": [-2.0, 0.0], "cov": 0.25},
            ],
            _components,
        ),
        "uncond_cov_scale": ("float", 4.0, _positive),
        "uncond_mean_scale": ("float", 0.5, None),
    },
    "renderer": {
        "kind": ("str", "identity", _enum("identity", "linear")),
        "param_dim": ("int", 2, _at_least(1)),
        "image_dim": ("int", 2, _at_least(1)),
    },
    "distill": {
        "method": ("str", "vsd", _enum("sds", "vsd")),
        "estimator": ("str", "empirical", _enum("dirac", "empirical", "learned")),
        "n_particles": ("int", 64, _at_least(1)),
        "steps": ("int", 2000, _nonneg),
        "particle_lr": ("float", 0.03, _positive),
        "particle_batch": ("int", 0, _nonneg),
        "particle_optimizer": ("str", "sgd", _enum("sgd", "adam")),
        "mc_batch": ("int", 1, _at_least(1)),
        "guidance_scale": ("float", 0.0, _nonneg),
        "init_std": ("float", 2.0, _nonneg),
        "init_mean": ("list", [], None),
        "snapshot_stride": ("int", 100, _at_least(1)),
    },
    "schedule": {
        "phase1": ("list", [0.02, 0.98], _interval),
        "phase2": ("list", [0.02, 0.50], _interval),
        "switch_fraction": ("float", 0.2, _fraction),
    },
    "learned": {
        "hidden": ("int", 64, _at_least(1)),
        "lr": ("float", 1e-4, _nonneg),
        "optimizer": ("str", "sgd", _enum("sgd", "momentum", "adam")),
        "batch_size": ("int", 1, _at_least(1)),
        "steps_per_update": ("int", 1, _at_least(1)),
    },
    "sampler": {
        "n_steps": ("int", 200, _at_least(1)),
        "n_samples": ("int", 10000, _at_least(1)),
    },
    "metrics": {
        "w2_projections": ("int", 64, _at_least(1)),
        "grid_bound": ("float", 8.0, _positive),
        "grid_points": ("int", 0, _nonneg),
        "objective_times": ("list", [0.05, 0.15, 0.25, 0.35, 0.45, 0.55, 0.65, 0.75, 0.85, 0.95], None),
        "n_cameras": ("int", 8, _at_least(1)),
        "mode_radius": ("float", 0.15, _positive),
        "objective": ("bool", True, None),
    },
}

SECTIONS = [s for s in SCHEMA if s]


def defaults():
    return {sec: {k: copy.deepcopy(spec[1]) for k, spec in keys.items()} for sec, keys in SCHEMA.items()}


def _coerce(section, key, value, line):
    full = f"{section}.{key}" if section else key
    typ, _, check = SCHEMA[section][key]
    ok = {
        "str": isinstance(value, str),
        "int": isinstance(value, int) and not isinstance(value, bool),
        "float": isinstance(value, (int, float)) and not isinstance(value, bool),
        "bool": isinstance(value, bool),
        "list": isinstance(value, list),
    }[typ]
    if not ok:
        raise ConfigError(f"key '{full}' expects {typ}, got {type(value).__name__} {value!r}", line, full)
    if typ == "float":
        value = float(value)
    if check is not None:
        msg = check(value)
        if msg:
            raise ConfigError(f"key '{full}' {msg}; got {value!r}", line, full)
    return value


def _strip_comment(text):
    out = []
    in_str = False
    esc = False
    for ch in text:
        if in_str:
            if esc:
                esc = False
            elif ch == "\\":
                esc = True
            elif ch == '"':
                in_str = False
        elif ch == '"':
            in_str = True
        elif ch == "#":
            break
        out.append(ch)
    return "".join(out).strip()


def _parse_lines(text):
    """Yield ``(line_no, section, key, value)`` for every assignment."""
    section = ""
    seen = set()
    for no, raw in enumerate(text.splitlines(), start=1):
        line = _strip_comment(raw)
        if not line:
            continue
        if line.startswith("["):
            if not line.endswith("]"):
                raise ConfigError(f"malformed section header {raw.strip()!r}", no)
            section = line[1:-1].strip()
            if section not in SCHEMA or not section:
                raise ConfigError(f"unknown section '{section}'; known sections: {', '.join(SECTIONS)}", no, section)
            continue
        key, eq, rest = line.partition("=")
        key = key.strip()
        if not eq or not key:
            raise ConfigError(f"expected 'key = value', got {raw.strip()!r}", no)
        full = f"{section}.{key}" if section else key
        if key not in SCHEMA[section]:
            raise ConfigError(f"unknown key '{full}'", no, full)
        if full in seen:
            raise ConfigError(f"duplicate key '{full}'", no, full)
        seen.add(full)
        try:
            value = json.loads(rest.strip())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"key '{full}' has an unparseable value: {exc.msg}", no, full) from None
        yield no, section, key, value


@dataclass
class ExperimentConfig:
    tree: dict

    @property
    def seed(self):
        return self.tree[""]["seed"]

    @property
    def name(self):
        return self.tree[""]["name"]

    def __getitem__(self, section):
        return self.tree[section]

    def __eq__(self, other):
        return isinstance(other, ExperimentConfig) and json.dumps(self.tree, sort_keys=True) == json.dumps(
            other.tree, sort_keys=True
        )

    def replace(self, **sections):
        """Copy with ``section={key: value}`` overrides (validated)."""
        tree = copy.deepcopy(self.tree)
        for sec, kv in sections.items():
            sec = "" if sec == "top" else sec
            for k, v in kv.items():
                if k not in SCHEMA[sec]:
                    raise ConfigError(f"unknown key '{sec}.{k}'", key=f"{sec}.{k}")
                tree[sec][k] = _coerce(sec, k, v, None)
        cfg = ExperimentConfig(tree)
        validate(cfg)
        return cfg


def validate(cfg):
    """Cross-key invariants not expressible per key."""
    t = cfg.tree
    if t["distill"]["method"] == "sds" and t["distill"]["estimator"] != "dirac":
        raise ConfigError("key 'distill.estimator' must be 'dirac' when distill.method is 'sds'", key="distill.estimator")
    r = t["renderer"]
    if r["kind"] == "identity" and r["image_dim"] != r["param_dim"]:
        raise ConfigError("key 'renderer.image_dim' must equal renderer.param_dim for the identity renderer", key="renderer.image_dim")
    if r["kind"] == "linear" and not (r["param_dim"] >= 2 and r["image_dim"] <= r["param_dim"]):
        raise ConfigError("key 'renderer.image_dim' must be <= renderer.param_dim (and param_dim >= 2) for the linear renderer", key="renderer.image_dim")
    comps = t["target"]["components"]
    dims = {len(c["mean"]) if isinstance(c["mean"], list) else 1 for c in comps}
    if dims != {r["image_dim"]}:
        raise ConfigError(f"key 'target.components' means must have dimension renderer.image_dim = {r['image_dim']}", key="target.components")
    total = sum(c["weight"] for c in comps)
    if abs(total - 1.0) > 1e-12:
        raise ConfigError(f"key 'target.components' weights sum to {total}, not 1", key="target.components")
    s = t["schedule"]
    if not (s["phase1"][0] <= s["phase2"][0] and s["phase2"][1] <= s["phase1"][1]):
        raise ConfigError("key 'schedule.phase2' must lie inside schedule.phase1", key="schedule.phase2")
    d = t["distill"]
    if d["init_mean"] and len(d["init_mean"]) != r["param_dim"]:
        raise ConfigError("key 'distill.init_mean' must have length renderer.param_dim", key="distill.init_mean")
    if d["particle_batch"] > d["n_particles"]:
        raise ConfigError("key 'distill.particle_batch' cannot exceed distill.n_particles (0 means all)", key="distill.particle_batch")
    for tt in t["metrics"]["objective_times"]:
        if not (isinstance(tt, (int, float)) and 0 < tt < 1):
            raise ConfigError("key 'metrics.objective_times' entries must lie in (0, 1)", key="metrics.objective_times")
    return cfg


def parse_config(text):
    """Parse and validate config text; a ``preset`` key seeds the defaults."""
    from .presets import PRESETS

    entries = list(_parse_lines(text))
    tree = defaults()
    for no, section, key, value in entries:
        if section == "" and key == "preset" and value:
            if value not in PRESETS:
                raise ConfigError(f"key 'preset' must be one of {', '.join(sorted(PRESETS))}; got {value!r}", no, "preset")
            tree = PRESETS[value].tree()
    for no, section, key, value in entries:
        tree[section][key] = _coerce(section, key, value, no)
    return validate(ExperimentConfig(tree))


def _dump(value):
    return json.dumps(value, separators=(", ", ": "))


def serialize(cfg):
    lines = [f"# vsdlab {__version__} configuration"]
    for key in SCHEMA[""]:
        lines.append(f"{key} = {_dump(cfg.tree[''][key])}")
    for sec in SECTIONS:
        lines.append("")
        lines.append(f"[{sec}]")
        for key in SCHEMA[sec]:
            lines.append(f"{key} = {_dump(cfg.tree[sec][key])}")
    return "\n".join(lines) + "\n"
