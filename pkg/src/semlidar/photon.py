"""Photon-level forward model: ideal echo profiles, Poisson histograms and
labelled dataset files.

Timing convention: bin ``i`` is sampled at ``t_i = i * bin_width``, so a
single-depth echo at time ``t`` peaks in bin ``round(t / bin_width)``.

SNR convention: ``snr_db = 10 log10(N_sig / N_bg)`` with the expected
total ``N_sig + N_bg`` fixed to the photon budget.  Background is uniform
over bins.  Detector dead time and pile-up are not modelled.
"""

from __future__ import annotations

import json
import math
import struct
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, EmptyTargetError, FormatError, RangeError
from .io_util import atomic_write_bytes, atomic_write_text, config_hash, sha256_file
from .scene import SPEED_OF_LIGHT, DepthReflMap, SceneClassSpec, gen_scene

FWHM_TO_SIGMA = 2.0 * math.sqrt(2.0 * math.log(2.0))  # ~2.355

SNR_DEFINITION = "snr_db = 10*log10(N_signal/N_background), N_signal + N_background = photon budget"

DATASET_MAGIC = b"TSPD"
DATASET_VERSION = 1
_DS_HEADER = struct.Struct("<4sHIdI")


@dataclass(frozen=True)
class PulseModel:
    width_fwhm: float = 10e-12
    jitter_fwhm: float = 100e-12

    @property
    def sigma(self) -> float:
        """Std-dev of the combined laser-pulse and detector-jitter kernel."""
        return math.hypot(self.width_fwhm, self.jitter_fwhm) / FWHM_TO_SIGMA

    def validate(self, axis: "TimeAxis") -> None:
        for name in ("width_fwhm", "jitter_fwhm"):
            v = getattr(self, name)
            if not (0 < v < axis.window):
                raise ConfigError(f"pulse {name}={v} must lie in (0, {axis.window})")


@dataclass(frozen=True)
class TimeAxis:
    bin_width: float = 10e-12
    bin_count: int = 256
    rep_period: float = 50e-9

    def __post_init__(self):
        if not self.bin_width > 0:
            raise ConfigError("bin_width must be positive")
        if self.bin_count < 16:
            raise ConfigError(f"bin_count must be >= 16, got {self.bin_count}")
        if self.bin_count * self.bin_width > self.rep_period * (1 + 1e-12):
            raise ConfigError("recording window exceeds the repetition period")

    @property
    def window(self) -> float:
        return self.bin_count * self.bin_width

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.bin_count) * self.bin_width

    @property
    def max_depth(self) -> float:
        return self.window * SPEED_OF_LIGHT / 2


@dataclass
class IdealIntensity:
    axis: TimeAxis
    values: np.ndarray


@dataclass
class TemporalHistogram:
    axis: TimeAxis
    counts: np.ndarray
    label: int
    snr_db: float
    photon_budget: float
    seed: int


def ideal_intensity(m: DepthReflMap, pulse: PulseModel, axis: TimeAxis) -> IdealIntensity:
    """Unit-mass echo profile of a scene.

    Sum over target pixels of reflectivity-weighted Gaussians centred at the
    round-trip time ``2 depth / c``, evaluated at the bin times and then
    normalised.
    """
    pulse.validate(axis)
    mask = (m.depth > 0) & (m.reflectivity > 0)
    if not mask.any():
        raise EmptyTargetError("scene has no target pixel")
    depth = m.depth.astype(np.float64)
    tof = 2.0 * depth / SPEED_OF_LIGHT
    bad = mask & ((tof < 0) | (tof >= axis.window))
    if bad.any():
        r, c = np.argwhere(bad)[0]
        raise RangeError(
            f"pixel (row {r}, col {c}) depth {depth[r, c]:.6g} m is outside the "
            f"window [0, {axis.max_depth:.6g}) m"
        )
    # pixels sharing a depth share a kernel
    centres, inv = np.unique(tof[mask], return_inverse=True)
    weights = np.bincount(inv.ravel(), weights=m.reflectivity[mask].astype(np.float64))
    sigma = pulse.sigma
    t = axis.times
    z = (t[None, :] - centres[:, None]) / sigma
    s = weights @ np.exp(-0.5 * z * z)
    total = s.sum()
    if not total > 0:
        raise RangeError("echo falls entirely outside the sampled window")
    return IdealIntensity(axis=axis, values=s / total)


def signal_background_split(snr_db: float, budget: float) -> tuple[float, float]:
    ratio = 10.0 ** (snr_db / 10.0)
    n_sig = budget * ratio / (1.0 + ratio)
    return n_sig, budget - n_sig


def expected_counts(s: IdealIntensity, snr_db: float, budget: float) -> np.ndarray:
    """Per-bin Poisson rates; they sum to ``budget``."""
    if not budget > 0:
        raise ConfigError(f"photon budget must be positive, got {budget}")
    n_sig, n_bg = signal_background_split(snr_db, budget)
    return n_sig * s.values + n_bg / s.axis.bin_count


def sample_histogram(s: IdealIntensity, snr_db: float, budget: float, label: int, seed: int) -> TemporalHistogram:
    lam = expected_counts(s, snr_db, budget)
    rng = np.random.default_rng(int(seed))
    counts = rng.poisson(lam).astype(np.uint32)
    return TemporalHistogram(
        axis=s.axis, counts=counts, label=int(label), snr_db=float(snr_db),
        photon_budget=float(budget), seed=int(seed),
    )


def sample_seed(master_seed: int, class_id: int, snr_index: int, sample_index: int) -> int:
    """Per-sample seed: numpy SeedSequence hash of the four indices."""
    ss = np.random.SeedSequence([master_seed, class_id, snr_index, sample_index])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


# ---------------------------------------------------------------------------
# Dataset configuration and generation
# ---------------------------------------------------------------------------


@dataclass
class DatasetConfig:
    classes: list[SceneClassSpec]
    snr_db: list[float]
    samples_per_cell: int = 100
    photon_budget: float = 2e5
    axis: TimeAxis = field(default_factory=TimeAxis)
    pulse: PulseModel = field(default_factory=PulseModel)
    scene_width: int = 32
    scene_height: int = 32
    master_seed: int = 0

    def validate(self) -> None:
        if not self.snr_db:
            raise ConfigError("snr_db list must be non-empty")
        if self.samples_per_cell < 1:
            raise ConfigError("samples_per_cell must be >= 1")
        if not self.photon_budget > 0:
            raise ConfigError("photon_budget must be positive")
        ids = [c.class_id for c in self.classes]
        if len(set(ids)) != len(ids):
            raise ConfigError(f"duplicate class ids in {ids}")
        if not ids:
            raise ConfigError("at least one class is required")
        for c in self.classes:
            c.validate()
        self.pulse.validate(self.axis)

    def to_dict(self) -> dict:
        return {
            "classes": [c.to_dict() for c in self.classes],
            "snr_db": [float(v) for v in self.snr_db],
            "samples_per_cell": self.samples_per_cell,
            "photon_budget": self.photon_budget,
            "axis": asdict(self.axis),
            "pulse": asdict(self.pulse),
            "scene_width": self.scene_width,
            "scene_height": self.scene_height,
            "master_seed": self.master_seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetConfig":
        return cls(
            classes=[SceneClassSpec.from_dict(c) for c in d["classes"]],
            snr_db=[float(v) for v in d["snr_db"]],
            samples_per_cell=int(d.get("samples_per_cell", 100)),
            photon_budget=float(d.get("photon_budget", 2e5)),
            axis=TimeAxis(**d.get("axis", {})),
            pulse=PulseModel(**d.get("pulse", {})),
            scene_width=int(d.get("scene_width", 32)),
            scene_height=int(d.get("scene_height", 32)),
            master_seed=int(d.get("master_seed", 0)),
        )


@dataclass
class Dataset:
    """Labelled histograms, one row per record."""

    bin_width: float
    labels: np.ndarray
    snr_db: np.ndarray
    budget: np.ndarray
    seeds: np.ndarray
    counts: np.ndarray

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def bin_count(self) -> int:
        return self.counts.shape[1]

    def histogram(self, i: int) -> TemporalHistogram:
        axis = TimeAxis(bin_width=self.bin_width, bin_count=self.bin_count,
                        rep_period=max(50e-9, self.bin_width * self.bin_count))
        return TemporalHistogram(
            axis=axis, counts=self.counts[i], label=int(self.labels[i]),
            snr_db=float(self.snr_db[i]), photon_budget=float(self.budget[i]),
            seed=int(self.seeds[i]),
        )

    def snr_levels(self) -> np.ndarray:
        return np.unique(self.snr_db)

    def class_ids(self) -> np.ndarray:
        return np.unique(self.labels)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.bin_width, self.labels[idx], self.snr_db[idx],
                       self.budget[idx], self.seeds[idx], self.counts[idx])


def _record_dtype(bin_count: int) -> np.dtype:
    return np.dtype([
        ("label", "<u4"), ("snr_db", "<f4"), ("budget", "<f8"), ("seed", "<u8"),
        ("counts", "<u4", (bin_count,)),
    ])


def dataset_to_bytes(ds: Dataset) -> bytes:
    rec = np.empty(len(ds), dtype=_record_dtype(ds.bin_count))
    rec["label"] = ds.labels
    rec["snr_db"] = ds.snr_db
    rec["budget"] = ds.budget
    rec["seed"] = ds.seeds
    rec["counts"] = ds.counts
    header = _DS_HEADER.pack(DATASET_MAGIC, DATASET_VERSION, ds.bin_count, ds.bin_width, len(ds))
    return header + rec.tobytes()


def dataset_from_bytes(buf: bytes, path=None) -> Dataset:
    if len(buf) < _DS_HEADER.size:
        raise FormatError("truncated dataset header", offset=len(buf), path=path)
    magic, version, bins, bw, n = _DS_HEADER.unpack_from(buf, 0)
    if magic != DATASET_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {DATASET_MAGIC!r}", offset=0, path=path)
    if version != DATASET_VERSION:
        raise FormatError(f"unsupported dataset version {version}", offset=4, path=path)
    dt = _record_dtype(bins)
    need = _DS_HEADER.size + n * dt.itemsize
    if len(buf) < need:
        # point at the first incomplete record
        done = (len(buf) - _DS_HEADER.size) // dt.itemsize
        raise FormatError(
            f"truncated payload: {done} of {n} records complete",
            offset=_DS_HEADER.size + done * dt.itemsize, path=path,
        )
    if len(buf) > need:
        raise FormatError(f"{len(buf) - need} trailing bytes", offset=need, path=path)
    rec = np.frombuffer(buf, dtype=dt, count=n, offset=_DS_HEADER.size)
    return Dataset(
        bin_width=bw,
        labels=rec["label"].astype(np.uint32),
        snr_db=rec["snr_db"].astype(np.float32),
        budget=rec["budget"].astype(np.float64),
        seeds=rec["seed"].astype(np.uint64),
        counts=rec["counts"].astype(np.uint32),
    )


def write_dataset(ds: Dataset, path) -> None:
    atomic_write_bytes(path, dataset_to_bytes(ds))


def read_dataset(path) -> Dataset:
    path = Path(path)
    return dataset_from_bytes(path.read_bytes(), path=path)


def _gen_cell(args):
    cfg_dict, ci, si = args
    cfg = DatasetConfig.from_dict(cfg_dict)
    spec = cfg.classes[ci]
    snr = cfg.snr_db[si]
    out = np.empty((cfg.samples_per_cell, cfg.axis.bin_count), dtype=np.uint32)
    seeds = np.empty(cfg.samples_per_cell, dtype=np.uint64)
    for k in range(cfg.samples_per_cell):
        seed = sample_seed(cfg.master_seed, spec.class_id, si, k)
        scene = gen_scene(spec, seed, cfg.scene_width, cfg.scene_height)
        s = ideal_intensity(scene, cfg.pulse, cfg.axis)
        h = sample_histogram(s, snr, cfg.photon_budget, spec.class_id, seed)
        out[k] = h.counts
        seeds[k] = seed
    return out, seeds


def build_dataset(cfg: DatasetConfig, workers: int = 1) -> Dataset:
    """Simulate every (class, SNR, sample) record in canonical order.

    Records are ordered class-major, then SNR index, then sample index.
    Output does not depend on ``workers``.
    """
    cfg.validate()
    cells = [(ci, si) for ci in range(len(cfg.classes)) for si in range(len(cfg.snr_db))]
    cfg_dict = cfg.to_dict()
    jobs = [(cfg_dict, ci, si) for ci, si in cells]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(_gen_cell, jobs))
    else:
        results = [_gen_cell(j) for j in jobs]
    n = cfg.samples_per_cell
    labels = np.concatenate([np.full(n, cfg.classes[ci].class_id, dtype=np.uint32) for ci, _ in cells])
    snrs = np.concatenate([np.full(n, cfg.snr_db[si], dtype=np.float32) for _, si in cells])
    return Dataset(
        bin_width=cfg.axis.bin_width,
        labels=labels,
        snr_db=snrs,
        budget=np.full(len(labels), cfg.photon_budget, dtype=np.float64),
        seeds=np.concatenate([r[1] for r in results]),
        counts=np.concatenate([r[0] for r in results]),
    )


def dataset_manifest(cfg: DatasetConfig, ds: Dataset) -> dict:
    cells = []
    for cid in np.unique(ds.labels):
        for snr in np.unique(ds.snr_db):
            sel = (ds.labels == cid) & (ds.snr_db == snr)
            cells.append({
                "class_id": int(cid),
                "snr_db": float(snr),
                "count": int(sel.sum()),
                "photons": int(ds.counts[sel].sum(dtype=np.uint64)),
            })
    return {
        "config": cfg.to_dict(),
        "config_hash": config_hash(cfg.to_dict()),
        "snr_definition": SNR_DEFINITION,
        "record_count": len(ds),
        "labels": [int(v) for v in ds.labels],
        "cells": cells,
    }


def manifest_path(out_path) -> Path:
    out_path = Path(out_path)
    return out_path.with_name(out_path.name + ".manifest.json")


def generate_dataset(cfg: DatasetConfig, out_path, workers: int = 1) -> Dataset:
    """Build the dataset and write it plus its JSON manifest next to it."""
    ds = build_dataset(cfg, workers=workers)
    write_dataset(ds, out_path)
    man = dataset_manifest(cfg, ds)
    man["sha256"] = sha256_file(out_path)
    atomic_write_text(manifest_path(out_path), json.dumps(man, indent=1, sort_keys=True))
    return ds
