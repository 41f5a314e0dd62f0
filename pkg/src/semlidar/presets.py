"""Desk-scale class catalogue and default experiment configs.

All targets sit inside the 256-bin x 10 ps window (about 0.38 m of
range), so catalogue depths are a scaled-down analogue of a real scene.
Deepest point: 0.15 m placement + 0.20 m profile, inside the window.
"""

from __future__ import annotations

import numpy as np

from .net import TrainConfig
from .photon import DatasetConfig
from .scene import SceneClassSpec

TOP_SNR_DB = 13.01

# Every class shares one placement range for its nearest surface, so
# classes differ by the shape of their depth profile, not by where they sit.
PLACEMENT = (0.05, 0.15)

# family, parameter ranges (besides depth); lengths in meters, angles in degrees
CATALOGUE = [
    ("plane", {"size": (0.3, 0.9)}),
    ("tilted_plane", {"span": (0.03, 0.09), "size": (0.7, 1.0)}),
    ("tilted_plane", {"span": (0.12, 0.22), "size": (0.7, 1.0)}),
    ("sphere", {"radius": (0.08, 0.14)}),
    ("cylinder", {"radius": (0.07, 0.12), "length": (0.15, 0.3), "angle": (0, 180)}),
    ("cone", {"radius": (0.1, 0.16), "height": (0.07, 0.14)}),
    ("pyramid", {"half_width": (0.09, 0.15), "height": (0.04, 0.08)}),
    ("staircase", {"steps": (3, 3), "step_depth": (0.03, 0.06), "size": (0.5, 1.0)}),
    ("two_planes", {"gap": (0.07, 0.14), "split": (0.25, 0.45), "angle": (0, 30), "size": (0.5, 1.0)}),
    ("box_on_plane", {"gap": (0.04, 0.09), "size_back": (0.7, 1.0), "size_front": (0.3, 0.6)}),
    ("sphere_on_plane", {"gap": (0.1, 0.16), "radius": (0.05, 0.08), "size": (0.7, 1.0)}),
    ("staircase", {"steps": (4, 4), "step_depth": (0.02, 0.04), "size": (0.5, 1.0)}),
    ("two_planes", {"gap": (0.15, 0.22), "split": (0.4, 0.6), "angle": (0, 30), "size": (0.5, 1.0)}),
    ("cylinder", {"radius": (0.13, 0.18), "length": (0.15, 0.3), "angle": (0, 180)}),
]


def catalogue_classes(n: int | None = None) -> list[SceneClassSpec]:
    entries = CATALOGUE if n is None else CATALOGUE[:n]
    return [SceneClassSpec(class_id=i, family=f, params={"depth": PLACEMENT, **p})
            for i, (f, p) in enumerate(entries)]


def desk_snr_levels(n: int = 8) -> list[float]:
    return [round(float(v), 2) for v in np.linspace(-16.0, TOP_SNR_DB, n)]


def desk_closed_config(n_classes: int = 10, samples: int = 100, seed: int = 2024) -> DatasetConfig:
    return DatasetConfig(
        classes=catalogue_classes(n_classes),
        snr_db=desk_snr_levels(),
        samples_per_cell=samples,
        photon_budget=2e5,
        master_seed=seed,
    )


def desk_open_config(n_classes: int = 12, samples: int = 100, seed: int = 4048) -> DatasetConfig:
    return DatasetConfig(
        classes=catalogue_classes(n_classes),
        snr_db=[TOP_SNR_DB],
        samples_per_cell=samples,
        photon_budget=2e5,
        master_seed=seed,
    )


def desk_train_config(seed: int = 0) -> TrainConfig:
    # wider initial centres with a slow centre learning rate keep the
    # class centres from collapsing onto one another during training
    return TrainConfig(epochs=200, center_scale=5.0, center_lr_scale=0.01, seed=seed)
