"""Phantom generation: determinism, geometry, and pair synthesis."""

import dataclasses

import numpy as np
import pytest

from tumorreg.autodiff import Tensor
from tumorreg.deformation import exp_svf, warp_image
from tumorreg.phantom import (PhantomSpec, default_spec, generate_phantom,
                              place_tumor, random_smooth_velocity, synth_pair)


class TestGeneratePhantom:
    def test_deterministic_bit_identical(self):
        spec = default_spec((24, 24, 18), seed=9)
        img1, masks1 = generate_phantom(spec)
        img2, masks2 = generate_phantom(spec)
        assert np.array_equal(img1.data, img2.data)
        for k in masks1:
            assert np.array_equal(masks1[k].data, masks2[k].data)

    def test_tumor_sphere_volume(self):
        spec = default_spec((32, 32, 24), seed=1)
        spec = dataclasses.replace(
            spec, tumors=(place_tumor(spec, "left", 4.0),))
        _, masks = generate_phantom(spec)
        volume = masks["tumor"].data.sum()
        analytic = 4.0 / 3.0 * np.pi * 4.0 ** 3
        assert abs(volume - analytic) / analytic <= 0.05

    def test_zero_noise_piecewise_constant(self):
        spec = default_spec((24, 24, 18), seed=2)
        spec = dataclasses.replace(spec, noise_sigma=0.0, edge_sigma=0.0)
        img, _ = generate_phantom(spec)
        values = set(np.unique(img.data).tolist())
        allowed = set(np.float32(v) for v in spec.intensities.values())
        assert values <= allowed

    def test_structures_present_and_binary(self):
        img, masks = generate_phantom(default_spec((32, 32, 24), seed=3))
        for name in ("body", "lung_left", "lung_right", "heart", "cord",
                     "aorta", "trachea", "pa", "ivc"):
            data = masks[name].data
            assert set(np.unique(data)) <= {0.0, 1.0}
            assert data.sum() > 0, name
        assert img.data.min() >= 0.0 and img.data.max() <= 1.0

    def test_tumor_outside_lung_rejected(self):
        spec = default_spec((24, 24, 18), seed=4)
        bad = dataclasses.replace(
            spec, tumors=(dataclasses.replace(place_tumor(spec, "left", 3.0),
                                              center=(1.0, 1.0, 1.0)),))
        with pytest.raises(ValueError, match="outside"):
            generate_phantom(bad)

    def test_too_many_tumors_rejected(self):
        spec = default_spec((24, 24, 18), seed=5)
        tumor = place_tumor(spec, "left", 2.0)
        with pytest.raises(ValueError):
            PhantomSpec(tumors=(tumor, tumor, tumor))


class TestSynthPair:
    def test_zero_perturbation_identical(self):
        spec = default_spec((24, 24, 18), seed=6)
        pair = synth_pair(spec, seed=6)
        assert np.array_equal(np.asarray(pair.I_m), np.asarray(pair.I_f))

    def test_known_svf_consistency(self):
        # warping the moving image by exp(gt_svf) reproduces the fixed image
        spec = default_spec((24, 24, 18), seed=7)
        spec = dataclasses.replace(spec, noise_sigma=0.001, edge_sigma=1.2)
        pair = synth_pair(spec, seed=7, svf_amplitude=1.5, svf_sigma=6.0)
        assert pair.gt_svf is not None
        rewarped = warp_image(Tensor(np.asarray(pair.I_m)),
                              exp_svf(Tensor(pair.gt_svf))).data
        assert np.abs(rewarped - np.asarray(pair.I_f)).mean() <= 0.01

    def test_mirrored_lung_tumors_disjoint(self):
        spec = default_spec((32, 32, 24), seed=8)
        pair = synth_pair(spec, seed=8,
                          moving_tumors=[place_tumor(spec, "left", 3.5)],
                          fixed_tumors=[place_tumor(spec, "right", 3.5)])
        y_m = np.asarray(pair.y_m)
        y_f = np.asarray(pair.y_f)
        assert y_m.sum() > 0 and y_f.sum() > 0
        assert (y_m * y_f).sum() == 0

    def test_scenarios(self):
        spec = default_spec((24, 24, 18), seed=9)
        moving_only = synth_pair(spec, seed=9,
                                 moving_tumors=[place_tumor(spec, "left", 3.0)])
        assert np.asarray(moving_only.y_m).sum() > 0
        assert np.asarray(moving_only.y_f).sum() == 0
        fixed_only = synth_pair(spec, seed=9,
                                fixed_tumors=[place_tumor(spec, "right", 3.0)])
        assert np.asarray(fixed_only.y_m).sum() == 0
        assert np.asarray(fixed_only.y_f).sum() > 0
        free = synth_pair(spec, seed=9)
        assert np.asarray(free.y_m).sum() == 0 and np.asarray(free.y_f).sum() == 0

    def test_independent_noise_keeps_anatomy(self):
        spec = default_spec((24, 24, 18), seed=10)
        pair = synth_pair(spec, seed=10, independent_noise=True)
        i_m, i_f = np.asarray(pair.I_m), np.asarray(pair.I_f)
        assert not np.array_equal(i_m, i_f)
        assert np.abs(i_m - i_f).mean() <= 4 * spec.noise_sigma
        for k in pair.structures_m:
            assert np.array_equal(np.asarray(pair.structures_m[k]),
                                  np.asarray(pair.structures_f[k]))

    def test_jittered_anatomy_differs(self):
        spec = default_spec((24, 24, 18), seed=11)
        pair = synth_pair(spec, seed=11, anatomy_jitter=1.5)
        assert not np.array_equal(np.asarray(pair.structures_m["lung_left"]),
                                  np.asarray(pair.structures_f["lung_left"]))

    def test_dose_attached_for_moving_tumor(self):
        spec = default_spec((24, 24, 18), seed=12)
        pair = synth_pair(spec, seed=12,
                          moving_tumors=[place_tumor(spec, "left", 3.0)],
                          with_dose=True)
        assert pair.dose is not None
        assert pair.dose.meta["prescription_gy"] == 60.0


class TestRandomSmoothVelocity:
    def test_amplitude_and_shape(self, rng):
        v = random_smooth_velocity((16, 16, 12), rng, 2.0)
        assert v.shape == (3, 16, 16, 12)
        mag = np.sqrt((v.astype(np.float64) ** 2).sum(axis=0))
        assert mag.max() == pytest.approx(2.0, rel=1e-5)

    def test_border_decay(self, rng):
        # the border band is zeroed before smoothing, so face magnitudes
        # stay clearly below the interior peak
        v = random_smooth_velocity((16, 16, 16), rng, 2.0, sigma=3.0, taper=3.0)
        mag = np.sqrt((v.astype(np.float64) ** 2).sum(axis=0))
        assert mag[0].max() <= 0.8 * mag.max()

    def test_deterministic_per_rng_seed(self):
        a = random_smooth_velocity((12, 12, 12), np.random.default_rng(5), 1.5)
        b = random_smooth_velocity((12, 12, 12), np.random.default_rng(5), 1.5)
        assert np.array_equal(a, b)
