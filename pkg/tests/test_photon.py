"""Forward photon model, dataset generation and the TSPD format."""

import json
import math
import struct

import numpy as np
import pytest

from semlidar import photon
from semlidar.errors import ConfigError, EmptyTargetError, FormatError, RangeError
from semlidar.photon import (
    SPEED_OF_LIGHT,
    DatasetConfig,
    PulseModel,
    TimeAxis,
    build_dataset,
    dataset_from_bytes,
    dataset_to_bytes,
    expected_counts,
    generate_dataset,
    ideal_intensity,
    read_dataset,
    sample_histogram,
    sample_seed,
    signal_background_split,
)
from semlidar.scene import DepthReflMap, SceneClassSpec, gen_scene


def _tiny_cfg(**kw):
    classes = [
        SceneClassSpec(0, "plane", {"depth": (0.05, 0.15), "size": (0.4, 0.8)}),
        SceneClassSpec(3, "sphere", {"depth": (0.05, 0.15), "radius": (0.11, 0.12)}),
    ]
    base = dict(classes=classes, snr_db=[-5.0, 5.0], samples_per_cell=6, scene_width=12,
                scene_height=12, master_seed=11)
    base.update(kw)
    return DatasetConfig(**base)


def _brute_intensity(m, pulse, axis):
    """Double loop over pixels and bins, straight from the model definition."""
    sigma = math.hypot(pulse.width_fwhm, pulse.jitter_fwhm) / (2 * math.sqrt(2 * math.log(2)))
    out = np.zeros(axis.bin_count)
    for r in range(m.height):
        for c in range(m.width):
            if m.depth[r, c] == 0:
                continue
            t0 = 2 * float(m.depth[r, c]) / SPEED_OF_LIGHT
            for i in range(axis.bin_count):
                ti = i * axis.bin_width
                out[i] += float(m.reflectivity[r, c]) * math.exp(-0.5 * ((ti - t0) / sigma) ** 2)
    return out / out.sum()


class TestIdealIntensity:
    def test_matches_brute_force_sum(self):
        spec = SceneClassSpec(0, "cone", {"depth": (0.1, 0.1), "radius": (0.12, 0.12),
                                          "height": (0.1, 0.1)})
        m = gen_scene(spec, 0, 10, 10)
        axis = TimeAxis()
        s = ideal_intensity(m, PulseModel(), axis)
        np.testing.assert_allclose(s.values, _brute_intensity(m, PulseModel(), axis), rtol=1e-10, atol=1e-15)

    def test_unit_mass(self):
        m = gen_scene(SceneClassSpec(0, "sphere", {"depth": (0.1, 0.1), "radius": (0.1, 0.1)}), 0)
        assert ideal_intensity(m, PulseModel(), TimeAxis()).values.sum() == pytest.approx(1.0, abs=1e-12)

    def test_single_depth_peak_bin(self):
        depth = np.full((8, 8), 0.15, np.float32)
        m = DepthReflMap(depth, np.ones_like(depth))
        axis = TimeAxis()
        s = ideal_intensity(m, PulseModel(), axis)
        t = 2 * float(np.float32(0.15)) / SPEED_OF_LIGHT
        assert np.argmax(s.values) == round(t / axis.bin_width)

    def test_empty_scene(self):
        z = np.zeros((8, 8), np.float32)
        with pytest.raises(EmptyTargetError):
            ideal_intensity(DepthReflMap(z, z), PulseModel(), TimeAxis())

    def test_out_of_window_names_pixel(self):
        depth = np.zeros((8, 8), np.float32)
        refl = np.zeros_like(depth)
        depth[2, 5], refl[2, 5] = 5.0, 1.0
        with pytest.raises(RangeError, match="row 2, col 5"):
            ideal_intensity(DepthReflMap(depth, refl), PulseModel(), TimeAxis())

    def test_sigma_from_fwhm(self):
        p = PulseModel(30e-12, 40e-12)
        assert p.sigma == pytest.approx(50e-12 / 2.3548200450309493, rel=1e-12)


class TestRates:
    @pytest.mark.parametrize("snr", [-16.0, -3.57, 0.0, 13.01])
    def test_budget_conserved(self, snr):
        m = gen_scene(SceneClassSpec(0, "pyramid", {"depth": (0.1, 0.1), "half_width": (0.1, 0.1),
                                                    "height": (0.05, 0.05)}), 0)
        s = ideal_intensity(m, PulseModel(), TimeAxis())
        lam = expected_counts(s, snr, 2e5)
        assert lam.sum() == pytest.approx(2e5, rel=1e-12)
        n_sig, n_bg = signal_background_split(snr, 2e5)
        assert 10 * np.log10(n_sig / n_bg) == pytest.approx(snr, abs=1e-10)

    def test_nonpositive_budget(self):
        m = gen_scene(SceneClassSpec(0, "plane", {"depth": (0.1, 0.1), "size": (1, 1)}), 0)
        with pytest.raises(ConfigError):
            expected_counts(ideal_intensity(m, PulseModel(), TimeAxis()), 0.0, 0.0)

    def test_sample_is_seeded(self):
        m = gen_scene(SceneClassSpec(0, "plane", {"depth": (0.1, 0.1), "size": (1, 1)}), 0)
        s = ideal_intensity(m, PulseModel(), TimeAxis())
        a = sample_histogram(s, 0.0, 2e5, 1, 42)
        b = sample_histogram(s, 0.0, 2e5, 1, 42)
        c = sample_histogram(s, 0.0, 2e5, 1, 43)
        np.testing.assert_array_equal(a.counts, b.counts)
        assert not np.array_equal(a.counts, c.counts)
        assert a.counts.dtype == np.uint32

    def test_seed_derivation(self):
        ref = np.random.SeedSequence([7, 2, 1, 9]).generate_state(1, np.uint64)[0]
        assert sample_seed(7, 2, 1, 9) == int(ref)
        assert len({sample_seed(0, c, s, k) for c in range(4) for s in range(4) for k in range(20)}) == 320


class TestTimeAxis:
    def test_window_exceeds_period(self):
        with pytest.raises(ConfigError):
            TimeAxis(bin_width=1e-9, bin_count=100, rep_period=50e-9)

    def test_pulse_wider_than_window(self):
        with pytest.raises(ConfigError):
            PulseModel(width_fwhm=1e-6).validate(TimeAxis())


class TestDataset:
    def test_canonical_order_and_counts(self):
        ds = build_dataset(_tiny_cfg())
        assert len(ds) == 2 * 2 * 6
        np.testing.assert_array_equal(ds.labels, np.repeat([0, 3], 12))
        np.testing.assert_array_equal(ds.snr_db, np.tile(np.repeat(np.float32([-5, 5]), 6), 2))
        assert ds.seeds[0] == sample_seed(11, 0, 0, 0)
        assert ds.seeds[-1] == sample_seed(11, 3, 1, 5)

    def test_record_reproducible_from_seed(self):
        cfg = _tiny_cfg()
        ds = build_dataset(cfg)
        i = 17
        spec = cfg.classes[1]
        m = gen_scene(spec, int(ds.seeds[i]), 12, 12)
        h = sample_histogram(ideal_intensity(m, cfg.pulse, cfg.axis), float(ds.snr_db[i]),
                             cfg.photon_budget, spec.class_id, int(ds.seeds[i]))
        np.testing.assert_array_equal(h.counts, ds.counts[i])

    def test_worker_count_independent(self):
        cfg = _tiny_cfg()
        assert dataset_to_bytes(build_dataset(cfg, workers=1)) == dataset_to_bytes(build_dataset(cfg, workers=2))

    def test_round_trip(self, tmp_path):
        ds = build_dataset(_tiny_cfg())
        photon.write_dataset(ds, tmp_path / "d.tspd")
        back = read_dataset(tmp_path / "d.tspd")
        assert dataset_to_bytes(back) == dataset_to_bytes(ds)
        assert back.histogram(3).seed == int(ds.seeds[3])

    def test_file_size(self):
        ds = build_dataset(_tiny_cfg())
        assert len(dataset_to_bytes(ds)) == struct.calcsize("<4sHIdI") + len(ds) * (4 + 4 + 8 + 8 + 4 * 256)

    def test_format_errors(self):
        buf = dataset_to_bytes(build_dataset(_tiny_cfg(samples_per_cell=1)))
        with pytest.raises(FormatError, match="byte offset 0"):
            dataset_from_bytes(b"NOPE" + buf[4:])
        with pytest.raises(FormatError, match="version"):
            dataset_from_bytes(buf[:4] + struct.pack("<H", 9) + buf[6:])
        rec = 4 + 4 + 8 + 8 + 4 * 256
        with pytest.raises(FormatError, match=f"byte offset {struct.calcsize('<4sHIdI') + 3 * rec}"):
            dataset_from_bytes(buf[:-10])
        with pytest.raises(FormatError, match="trailing"):
            dataset_from_bytes(buf + b"\0")

    def test_manifest(self, tmp_path):
        cfg = _tiny_cfg()
        ds = generate_dataset(cfg, tmp_path / "d.tspd")
        man = json.loads(photon.manifest_path(tmp_path / "d.tspd").read_text())
        assert man["record_count"] == len(ds)
        assert man["config"] == cfg.to_dict()
        assert sum(c["count"] for c in man["cells"]) == len(ds)
        assert sum(c["photons"] for c in man["cells"]) == int(ds.counts.sum(dtype=np.uint64))
        assert "log10" in man["snr_definition"]

    def test_config_validation(self):
        with pytest.raises(ConfigError, match="duplicate"):
            _tiny_cfg(classes=[SceneClassSpec(0, "plane", {"depth": (0.1, 0.1), "size": (1, 1)})] * 2).validate()
        with pytest.raises(ConfigError):
            _tiny_cfg(snr_db=[]).validate()

    def test_config_dict_round_trip(self):
        cfg = _tiny_cfg()
        assert DatasetConfig.from_dict(cfg.to_dict()).to_dict() == cfg.to_dict()
