"""Experiment presets shipped with the tool.

A preset is a set of per-key overrides on the documented defaults; a user
config that names a preset may override any key again.
"""

import copy
from dataclasses import dataclass, field


@dataclass(frozen=True)
class Preset:
    name: str
    description: str
    overrides: dict = field(default_factory=dict)

    def tree(self):
        from .config import defaults

        tree = defaults()
        tree[""]["preset"] = self.name
        tree[""]["name"] = self.name
        for section, kv in self.overrides.items():
            tree[section].update(copy.deepcopy(kv))
        return tree


_TWO_MODES = [
    {"weight": 0.5, "mean": [2.0, 0.0], "cov": 0.25},
    {"weight": 0.5, "mean": [-2.0, 0.0], "cov": 0.25},
]

PRESETS = {
    p.name: p
    for p in [
        Preset(
            "fig4-2d",
            "two-mode 2D target, identity render: VSD (64 particles) vs SDS from 20 seeds vs ancestral samples",
            {
                "experiment": {"kind": "compare", "sds_seeds": 20},
                "target": {"components": _TWO_MODES},
                "distill": {"method": "vsd", "estimator": "empirical", "n_particles": 64, "steps": 3000},
            },
        ),
        Preset(
            "learned-2d",
            "fig4-2d target: VSD with the learned MLP estimator against VSD with the empirical estimator",
            {
                "experiment": {"kind": "estimator-compare"},
                "distill": {"estimator": "learned", "n_particles": 64, "steps": 5000},
                "learned": {"lr": 1e-3, "optimizer": "adam", "batch_size": 64},
            },
        ),
        Preset(
            "scale-2048",
            "fig4-2d target with 2048 particles for 2000 steps",
            {
                "distill": {"n_particles": 2048, "steps": 2000, "snapshot_stride": 500},
                "metrics": {"objective": False},
            },
        ),
        Preset(
            "cfg-sweep",
            "diversity of the final VSD ensemble across guidance scales 0, 2, 7.5, 30 (3 seeds each)",
            {
                "experiment": {"kind": "cfg-sweep", "sweep_values": [0.0, 2.0, 7.5, 30.0], "seeds": [0, 1, 2]},
                "target": {"uncond_mean_scale": 1.0},
                "distill": {"steps": 3000, "mc_batch": 4},
                "metrics": {"objective": False},
            },
        ),
        Preset(
            "particles-sweep",
            "VSD with 1, 2, 4 and 8 particles: diversity and sliced W2 per particle count",
            {
                "experiment": {"kind": "particles-sweep", "sweep_values": [1, 2, 4, 8], "seeds": [0]},
                "distill": {"steps": 3000},
                "metrics": {"objective": False},
            },
        ),
        Preset(
            "schedule-ablation",
            "paired VSD runs with the annealed and the uniform time schedule; reports both final objectives",
            {
                "experiment": {"kind": "schedule-ablation"},
                "distill": {"n_particles": 64, "steps": 3000},
            },
        ),
        Preset(
            "multiview-1d",
            "2D parameters seen through rotating 1D projections of a standard normal target",
            {
                "target": {"components": [{"weight": 1.0, "mean": [0.0], "cov": 1.0}]},
                "renderer": {"kind": "linear", "param_dim": 2, "image_dim": 1},
                "distill": {"n_particles": 128, "steps": 3000},
            },
        ),
    ]
}
