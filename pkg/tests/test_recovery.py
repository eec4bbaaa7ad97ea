import math

import numpy as np
import pytest
from scipy import ndimage

from fpstain import optics, recovery
from fpstain.errors import ConfigurationError, EmptyInputError, ShapeError


def textured_object(n, pitch, wavelength=0.532, seed=0, phase_span=0.8):
    rng = np.random.default_rng(seed)
    fine = ndimage.gaussian_filter(rng.standard_normal((n, n)), 0.8, mode="wrap")
    coarse = ndimage.gaussian_filter(rng.standard_normal((n, n)), 4.0, mode="wrap")
    f = 0.5 * fine / np.abs(fine).max() + coarse / np.abs(coarse).max()
    f = (f - f.min()) / (f.max() - f.min())
    amp = 0.3 + 0.7 * f
    ph = ndimage.gaussian_filter(rng.standard_normal((n, n)), 3.0, mode="wrap")
    ph = phase_span * (2 * (ph - ph.min()) / (ph.max() - ph.min()) - 1)
    return optics.ComplexField(amp * np.exp(1j * ph), pitch, wavelength)


def small_setup(seed=0, leds=9, cap_n=32, na=0.1, cap_pitch=1.625):
    obj = textured_object(cap_n * 4, cap_pitch / 4, seed=seed)
    geom = optics.grid_geometry(leds, leds)
    pupil = optics.ideal_pupil((cap_n, cap_n), cap_pitch, na, 0.532)
    stack = optics.simulate_stack({"G": obj}, geom, pupil, ["G"])
    return obj, geom, pupil, stack


def passband_limited(obj, stack, pupil):
    spectrum = np.fft.fftshift(np.fft.fft2(obj.data))
    fy = np.fft.fftshift(np.fft.fftfreq(obj.height, d=obj.pixel_pitch))
    fx = np.fft.fftshift(np.fft.fftfreq(obj.width, d=obj.pixel_pitch))
    gx, gy = np.meshgrid(fx, fy)
    mask = np.zeros(obj.data.shape, bool)
    for cap in stack.captures:
        kx, ky = cap.k_illum
        mask |= np.hypot(gx - kx / (2 * math.pi), gy - ky / (2 * math.pi)) <= pupil.cutoff
    return np.fft.ifft2(np.fft.ifftshift(spectrum * mask)), mask


class TestReconstruct:
    def test_closed_loop_amplitude_correlation(self):
        obj, geom, pupil, stack = small_setup(seed=3)
        res = recovery.reconstruct(stack, geom, pupil, recovery.ReconstructionConfig(iterations=5))
        gt, _ = passband_limited(obj, stack, pupil)
        r = np.corrcoef(np.abs(res.object.data).ravel(), np.abs(gt).ravel())[0, 1]
        assert r >= 0.95

    def test_single_on_axis_capture_recovers_sqrt_intensity(self):
        # Band-limited nonnegative object with zero phase: one bright-field
        # capture pins the amplitude.
        cap_pitch, cap_n = 1.625, 32
        rng = np.random.default_rng(5)
        raw = ndimage.gaussian_filter(rng.random((cap_n * 4, cap_n * 4)), 6.0, mode="wrap")
        raw = 0.4 + 0.5 * (raw - raw.min()) / (raw.max() - raw.min())
        pupil = optics.ideal_pupil((cap_n, cap_n), cap_pitch, 0.1, 0.532)
        # band-limit inside the objective passband
        spec = np.fft.fftshift(np.fft.fft2(raw))
        fr = optics._freq_radius(raw.shape, cap_pitch / 4)
        spec[fr > 0.8 * pupil.cutoff] = 0.0
        data = np.real(np.fft.ifft2(np.fft.ifftshift(spec)))
        obj = optics.ComplexField(data.astype(complex), cap_pitch / 4, 0.532)
        geom = optics.IlluminationGeometry(np.array([[0.0, 0.0]]), 80.0)
        stack = optics.simulate_stack({"G": obj}, geom, pupil, ["G"])
        res = recovery.reconstruct(stack, geom, pupil, recovery.ReconstructionConfig(iterations=1))

        amp = np.sqrt(stack.captures[0].intensity)
        up_spec = np.zeros((cap_n * 4, cap_n * 4), complex)
        block = np.fft.fftshift(np.fft.fft2(amp)) * 16
        r0 = cap_n * 2 - cap_n // 2
        up_spec[r0 : r0 + cap_n, r0 : r0 + cap_n] = block
        upsampled = np.abs(np.fft.ifft2(np.fft.ifftshift(up_spec)))
        rms = np.sqrt(np.mean((np.abs(res.object.data) - upsampled) ** 2))
        assert rms < 1e-3

    def test_deterministic(self):
        _, geom, pupil, stack = small_setup(seed=1, leds=5)
        cfg = recovery.ReconstructionConfig(iterations=3)
        a = recovery.reconstruct(stack, geom, pupil, cfg)
        b = recovery.reconstruct(stack, geom, pupil, cfg)
        assert np.array_equal(a.object.data, b.object.data)
        assert np.array_equal(a.recovered_pupil.grid, b.recovered_pupil.grid)
        assert a.residual_history == b.residual_history

    def test_channel_mixed_stack_rejected(self):
        obj, geom, pupil, stack = small_setup(leds=3)
        mixed = optics.AcquisitionStack(
            stack.captures[:4] + [optics.Capture(stack.captures[0].intensity, (0, 0), "R", 0)],
            stack.capture_pitch,
            stack.objective_na,
        )
        with pytest.raises(ConfigurationError):
            recovery.reconstruct(mixed, geom, pupil, recovery.ReconstructionConfig())

    def test_empty_stack_rejected(self):
        _, geom, pupil, stack = small_setup(leds=3)
        empty = optics.AcquisitionStack([], stack.capture_pitch, stack.objective_na)
        with pytest.raises(EmptyInputError):
            recovery.reconstruct(empty, geom, pupil, recovery.ReconstructionConfig())

    def test_residuals_non_increasing_on_noiseless_data(self):
        _, geom, pupil, stack = small_setup(seed=11, leds=7)
        res = recovery.reconstruct(
            stack, geom, pupil, recovery.ReconstructionConfig(iterations=8)
        )
        hist = res.residual_history
        assert len(hist) == 8
        assert all(hist[i + 1] <= hist[i] + 1e-6 for i in range(len(hist) - 1))

    def test_out_of_band_spectrum_untouched(self):
        # With a flat init, everything outside the synthesized passband must
        # stay at the initialization (zero off the DC bin).  The passband is
        # the union of pupil supports at the same rounded bin centers the
        # update loop uses; the only deviation from exact zero is the final
        # inverse/forward FFT round trip.
        obj, geom, pupil, stack = small_setup(seed=2, leds=5)
        cfg = recovery.ReconstructionConfig(iterations=2, init_mode="flat")
        res = recovery.reconstruct(stack, geom, pupil, cfg)
        spectrum = np.fft.fftshift(np.fft.fft2(res.object.data))
        shape_hr = res.object.data.shape
        support = pupil.support()
        mask = np.zeros(shape_hr, bool)
        for cap in stack.captures:
            sr, sc = optics.spectrum_shift_bins(cap.k_illum, shape_hr, res.object.pixel_pitch)
            r0 = shape_hr[0] // 2 + sr - 16
            c0 = shape_hr[1] // 2 + sc - 16
            mask[r0 : r0 + 32, c0 : c0 + 32] |= support
        outside = ~mask
        outside[shape_hr[0] // 2, shape_hr[1] // 2] = False
        assert np.max(np.abs(spectrum[outside])) < 1e-9 * np.max(np.abs(spectrum))

    def test_pupil_recovery_finds_smooth_aberration(self):
        cap_pitch, cap_n, na, wl = 1.625, 32, 0.1, 0.532
        obj = textured_object(cap_n * 4, cap_pitch / 4, seed=5)
        geom = optics.grid_geometry(13, 13)
        ideal = optics.ideal_pupil((cap_n, cap_n), cap_pitch, na, wl)
        supp = ideal.support()
        fy = np.fft.fftshift(np.fft.fftfreq(cap_n, d=cap_pitch))
        gx, gy = np.meshgrid(fy, fy)
        fc = na / wl
        aber = 1.3 * ((gx / fc) ** 2 + (gy / fc) ** 2) + 0.9 * ((gx / fc) ** 2 - (gy / fc) ** 2)
        aber -= aber[supp].mean()
        aber *= 0.8 / np.sqrt(np.mean(aber[supp] ** 2))
        true_pupil = optics.PupilFunction(na, wl, cap_pitch, ideal.grid * np.exp(1j * aber))
        stack = optics.simulate_stack({"G": obj}, geom, true_pupil, ["G"])
        cfg = recovery.ReconstructionConfig(iterations=20, pupil_recovery=True)
        res = recovery.reconstruct(stack, geom, ideal, cfg)
        diff = np.angle(np.exp(1j * (np.angle(res.recovered_pupil.grid) - aber)))
        offset = np.angle(np.mean(np.exp(1j * diff[supp])))
        err = np.angle(np.exp(1j * (diff - offset)))
        assert np.sqrt(np.mean(err[supp] ** 2)) < 0.2


class TestDigitalRefocus:
    def test_in_focus_stack_selects_zero(self):
        _, geom, pupil, stack = small_setup(seed=4, leds=5)
        cfg = recovery.ReconstructionConfig(iterations=3)
        best_dz, _ = recovery.digital_refocus(stack, geom, pupil, cfg, (-20, 20, 5))
        assert best_dz == 0

    def test_recovers_simulated_defocus(self):
        cap_pitch, cap_n = 1.625, 32
        obj = textured_object(cap_n * 4, cap_pitch / 4, seed=9)
        geom = optics.grid_geometry(9, 9)
        pupil = optics.ideal_pupil((cap_n, cap_n), cap_pitch, 0.1, 0.532)
        stack = optics.simulate_stack({"G": obj}, geom, optics.defocus_pupil(pupil, 10.0), ["G"])
        cfg = recovery.ReconstructionConfig(iterations=3)
        best_dz, _ = recovery.digital_refocus(stack, geom, pupil, cfg, (-20, 20, 2))
        assert abs(best_dz - 10.0) <= 2.0

    def test_single_candidate_degenerate_range(self):
        _, geom, pupil, stack = small_setup(seed=4, leds=3)
        cfg = recovery.ReconstructionConfig(iterations=2)
        best_dz, result = recovery.digital_refocus(stack, geom, pupil, cfg, (0.0, 0.0, 1.0))
        plain = recovery.reconstruct(stack, geom, pupil, cfg)
        assert best_dz == 0.0
        assert np.array_equal(result.object.data, plain.object.data)

    def test_empty_range_rejected(self):
        _, geom, pupil, stack = small_setup(seed=4, leds=3)
        with pytest.raises(ConfigurationError):
            recovery.digital_refocus(
                stack, geom, pupil, recovery.ReconstructionConfig(), (5.0, -5.0, 1.0)
            )
        with pytest.raises(ConfigurationError):
            recovery.digital_refocus(
                stack, geom, pupil, recovery.ReconstructionConfig(), (0.0, 1.0, 0.0)
            )

    def test_inverse_consistency_with_in_focus_sharpness(self):
        cap_pitch, cap_n = 1.625, 32
        obj = textured_object(cap_n * 4, cap_pitch / 4, seed=8)
        geom = optics.grid_geometry(7, 7)
        pupil = optics.ideal_pupil((cap_n, cap_n), cap_pitch, 0.1, 0.532)
        cfg = recovery.ReconstructionConfig(iterations=4)
        focused = optics.simulate_stack({"G": obj}, geom, pupil, ["G"])
        in_focus_fig = recovery.sharpness_figure(recovery.reconstruct(focused, geom, pupil, cfg))
        defocused = optics.simulate_stack({"G": obj}, geom, optics.defocus_pupil(pupil, 8.0), ["G"])
        _, refocused = recovery.digital_refocus(defocused, geom, pupil, cfg, (-12, 12, 2))
        assert recovery.sharpness_figure(refocused) >= 0.95 * in_focus_fig


class TestSyntheticNa:
    def test_default_geometry_matches_paper_value(self):
        geom = optics.grid_geometry()
        assert recovery.synthetic_na(geom, 0.1) == pytest.approx(0.55, abs=0.01)

    def test_single_central_led(self):
        geom = optics.IlluminationGeometry(np.array([[0.0, 0.0]]), 80.0)
        assert recovery.synthetic_na(geom, 0.1) == 0.1

    def test_trigonometric_value(self):
        geom = optics.grid_geometry(15, 15, 4.0, 80.0)
        expected = 0.1 + math.sin(math.atan(math.sqrt(2) * 28.0 / 80.0))
        assert recovery.synthetic_na(geom, 0.1) == pytest.approx(expected, rel=1e-12)
        assert expected == pytest.approx(0.544, abs=5e-4)


class TestComposeColor:
    def _result_from(self, data):
        obj = optics.ComplexField(data, 0.40625, 0.532)
        pupil = optics.ideal_pupil((16, 16), 1.625, 0.1, 0.532)
        return recovery.ReconstructionResult(obj, pupil, [0.0])

    def test_equal_channels_give_neutral_gray(self):
        rng = np.random.default_rng(0)
        data = rng.random((32, 32)) + 0j
        results = {ch: self._result_from(data) for ch in "RGB"}
        rgb = recovery.compose_color(results)
        assert np.array_equal(rgb[:, :, 0], rgb[:, :, 1])
        assert np.array_equal(rgb[:, :, 1], rgb[:, :, 2])

    def test_zero_red_channel_stays_zero(self):
        rng = np.random.default_rng(1)
        data = rng.random((32, 32)) + 0j
        results = {
            "R": self._result_from(np.zeros((32, 32), complex)),
            "G": self._result_from(data),
            "B": self._result_from(data),
        }
        rgb = recovery.compose_color(results)
        assert np.all(rgb[:, :, 0] == 0)

    def test_missing_channel_rejected(self):
        data = np.ones((8, 8), complex)
        with pytest.raises(ConfigurationError):
            recovery.compose_color({"R": self._result_from(data), "G": self._result_from(data)})

    def test_dimension_mismatch_rejected(self):
        with pytest.raises(ShapeError):
            recovery.compose_color(
                {
                    "R": self._result_from(np.ones((8, 8), complex)),
                    "G": self._result_from(np.ones((8, 8), complex)),
                    "B": self._result_from(np.ones((16, 16), complex)),
                }
            )

    def test_closed_loop_color_target(self):
        cap_pitch, cap_n = 1.625, 32
        geom = optics.grid_geometry(9, 9)
        pupil = optics.ideal_pupil((cap_n, cap_n), cap_pitch, 0.1, 0.532)
        objs = {}
        for i, ch in enumerate("RGB"):
            objs[ch] = textured_object(cap_n * 4, cap_pitch / 4, seed=20 + i, phase_span=0.3)
        stack = optics.simulate_stack(objs, geom, pupil, ["R", "G", "B"])
        cfg = recovery.ReconstructionConfig(iterations=5)
        results = {}
        for ch in "RGB":
            sub = stack.for_channel(ch)
            wl = geom.channel_wavelengths[ch]
            results[ch] = recovery.reconstruct(
                sub, geom, optics.ideal_pupil((cap_n, cap_n), cap_pitch, 0.1, wl), cfg
            )
        rgb = recovery.compose_color(results)
        for i, ch in enumerate("RGB"):
            truth = np.abs(objs[ch].data) ** 2
            r = np.corrcoef(rgb[:, :, i].ravel().astype(float), truth.ravel())[0, 1]
            assert r >= 0.9, f"channel {ch} correlation {r}"
