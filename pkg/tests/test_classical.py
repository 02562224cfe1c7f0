import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import ndimage

from holofin.classical import (DegenerateGridWarning, LowResBurst, MhprConfig, area_downsample_burst, autofocus,
                               backpropagate, edge_sparsity_metric, estimate_shifts, focus_scan,
                               mhpr_reconstruct, pixel_super_resolve)
from holofin.errors import GeometryError
from holofin.optics import ComplexField, HologramStack, IntensityImage, simulate_hologram, simulate_stack
from holofin.synth import DEFAULT_SPECS, generate_sample


def texture(side=64, seed=0):
    return generate_sample(DEFAULT_SPECS["connected-texture"], side, seed=seed)


def amp_rmse(a, b):
    return float(np.sqrt(np.mean((np.abs(a) - np.abs(b)) ** 2)))


def smooth_image(side, seed=0, sigma=2.0):
    img = ndimage.gaussian_filter(np.random.default_rng(seed).uniform(0, 1, (side, side)), sigma, mode="wrap")
    return (img - img.min()) / (img.max() - img.min())


# ---- MH-PR

def test_mhpr_consistent_field_is_a_fixed_point():
    # a truth whose field at the first plane is real and positive is reproduced by the zero-phase start,
    # after which every plane's amplitude already matches and averaging changes nothing
    amp = 1.0 + 0.3 * smooth_image(32, 1)
    truth = ComplexField(amp.astype(complex)).with_data(
        backpropagate(IntensityImage(amp ** 2), 300.0).data)
    stack = simulate_stack(truth, [300.0, 450.0, 600.0])
    res = mhpr_reconstruct(stack, MhprConfig(20, record_residuals=True))
    assert np.max(np.abs(res.field.data - truth.data)) < 1e-9
    assert max(res.residuals) < 1e-9
    assert len(res.residuals) == 20


def test_mhpr_single_plane_keeps_measured_amplitude():
    truth = texture(32, 2)
    stack = simulate_stack(truth, [400.0])
    out = mhpr_reconstruct(stack, MhprConfig(5)).field
    # with one plane the estimate stays on the constraint set: back-propagated measured amplitude, zero phase
    assert np.max(np.abs(out.data - backpropagate(stack.holograms[0], 400.0).data)) < 1e-10


def test_mhpr_eight_plane_oracle_reduces_error():
    truth = texture(128, 3)
    from holofin.synth import gt_z_list
    stack = simulate_stack(truth, gt_z_list())
    res = mhpr_reconstruct(stack, MhprConfig(100, record_residuals=True))
    initial = amp_rmse(backpropagate(stack.holograms[0], stack.z2[0]).data, truth.data)
    final = amp_rmse(res.field.data, truth.data)
    assert final <= 0.2 * initial
    assert len(res.residuals) == 100
    assert np.all(np.diff(res.residuals) <= 1e-6)


def test_mhpr_three_planes_beat_two():
    errs = {}
    for M, z in ((2, [300.0, 450.0]), (3, [300.0, 450.0, 600.0])):
        errs[M] = np.mean([amp_rmse(mhpr_reconstruct(simulate_stack(texture(64, s), z)).field.data,
                                    texture(64, s).data) for s in range(3)])
    assert errs[3] <= errs[2]


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_mhpr_plane_order_near_invariant(seed):
    stack = simulate_stack(texture(64, seed), [300.0, 450.0, 600.0])
    a = mhpr_reconstruct(stack, MhprConfig(100)).field.data
    b = mhpr_reconstruct(stack, MhprConfig(100, plane_order=(2, 1, 0))).field.data
    assert amp_rmse(a, b) < 1e-3


def test_mhpr_is_deterministic():
    stack = simulate_stack(texture(32, 4), [300.0, 450.0], 0.02, seed=1)
    a = mhpr_reconstruct(stack, MhprConfig(10)).field.data
    b = mhpr_reconstruct(stack, MhprConfig(10)).field.data
    assert np.array_equal(a, b)


def test_mhpr_config_validation():
    with pytest.raises(ValueError):
        MhprConfig(0)
    stack = simulate_stack(texture(16, 0), [300.0, 450.0])
    with pytest.raises(ValueError, match="permutation"):
        mhpr_reconstruct(stack, MhprConfig(2, plane_order=(0, 0)))
    with pytest.raises(ValueError, match="non-finite"):
        HologramStack((IntensityImage(np.full((8, 8), np.inf)),), (300.0,))


def test_backpropagate_normalize():
    holo = IntensityImage(np.full((8, 8), 4.0))
    a = backpropagate(holo, 100.0, normalize=True)
    assert np.allclose(np.abs(a.data), 1.0)


# ---- edge sparsity

def test_edge_sparsity_of_linear_ramp_is_zero():
    ramp = np.add.outer(np.arange(10.0), 2 * np.arange(12.0))
    assert edge_sparsity_metric(ramp) == pytest.approx(0.0, abs=1e-7)


@given(scale=st.floats(0.01, 100), seed=st.integers(0, 1000))
@settings(max_examples=25, deadline=None)
def test_edge_sparsity_is_scale_invariant(scale, seed):
    img = np.random.default_rng(seed).uniform(0, 1, (16, 16))
    assert edge_sparsity_metric(scale * img) == pytest.approx(edge_sparsity_metric(img), rel=1e-9)


def test_edge_sparsity_single_step_oracle():
    img = np.zeros((6, 6))
    img[:, 3:] = 1.0
    # interior gradient is 0.5 on columns 2 and 3 (of 4), zero elsewhere: std/mean = 1
    assert edge_sparsity_metric(img) == pytest.approx(1.0)


def test_edge_sparsity_errors():
    with pytest.raises(ValueError):
        edge_sparsity_metric(np.ones((5, 5)))
    with pytest.raises(ValueError):
        edge_sparsity_metric(np.ones((2, 5)))


# ---- autofocus

@pytest.mark.parametrize("z", [300.0, 450.0, 600.0])
def test_autofocus_recovers_distance(z):
    holo = simulate_hologram(texture(128, 5), z)
    assert abs(autofocus(holo, 250.0, 650.0, 5.0) - z) <= 5.0


def test_autofocus_on_grid_refinement_within_half_step():
    holo = simulate_hologram(texture(64, 6), 450.0)
    scan = focus_scan(holo, 400.0, 500.0, 10.0)
    best = scan.grid[np.argmax(scan.scores)]
    assert scan.refined and abs(scan.z - best) <= 5.0
    assert autofocus(holo, 400.0, 500.0, 10.0) == autofocus(holo, 400.0, 500.0, 10.0)


def test_autofocus_degenerate_grid_warns():
    holo = simulate_hologram(texture(32, 7), 450.0)
    with pytest.warns(DegenerateGridWarning):
        z = autofocus(holo, 440.0, 445.0, 5.0)
    assert z in (440.0, 445.0)
    with pytest.raises(ValueError):
        autofocus(holo, 500.0, 400.0, 5.0)
    with pytest.raises(ValueError):
        autofocus(holo, 400.0, 500.0, 0.0)


# ---- shift estimation and super-resolution

def test_shifts_of_identical_frames_are_zero():
    frame = IntensityImage(smooth_image(32))
    shifts = estimate_shifts(LowResBurst((frame, frame, frame)))
    assert np.max(np.abs(shifts)) < 1e-9


def test_shift_estimation_on_six_by_six_raster():
    burst = area_downsample_burst(IntensityImage(smooth_image(192)), 6)
    est = estimate_shifts(burst)
    err = np.hypot(*(np.asarray(est) - np.asarray(burst.true_shifts)).T)
    assert err.max() < 0.1


def test_shift_estimation_antisymmetry():
    burst = area_downsample_burst(IntensityImage(smooth_image(96, 1)), 3, positions=[(0, 0), (1, 2)])
    fwd = np.asarray(estimate_shifts(burst, reference=0)[1])
    rev = np.asarray(estimate_shifts(burst, reference=1)[0])
    assert np.max(np.abs(fwd + rev)) < 0.05


def test_shift_estimation_rejects_flat_and_single():
    flat = IntensityImage(np.ones((8, 8)))
    with pytest.raises(ValueError, match="flat"):
        estimate_shifts(LowResBurst((IntensityImage(smooth_image(8)), flat)))
    with pytest.raises(ValueError):
        estimate_shifts(LowResBurst((flat,)))


def test_burst_requires_matching_frames():
    with pytest.raises(GeometryError):
        LowResBurst((IntensityImage(np.ones((4, 4))), IntensityImage(np.ones((4, 5)))))


def test_super_resolve_factor_one_is_identity():
    frame = IntensityImage(smooth_image(16))
    out = pixel_super_resolve(LowResBurst((frame,)), 1, [(0.0, 0.0)])
    assert np.array_equal(out.data, frame.data)
    assert out.pixel_pitch == frame.pixel_pitch


def test_super_resolve_output_geometry():
    fine = smooth_image(48, 2)
    burst = area_downsample_burst(IntensityImage(fine), 3)
    out = pixel_super_resolve(burst, 3, burst.true_shifts)
    assert out.shape == (48, 48)
    assert out.pixel_pitch == pytest.approx(burst.frames[0].pixel_pitch / 3)


def test_super_resolve_gains_three_db():
    fine = smooth_image(192)
    burst = area_downsample_burst(IntensityImage(fine), 6)
    sr = pixel_super_resolve(burst, 6, estimate_shifts(burst)).data
    nn = np.kron(burst.frames[0].data, np.ones((6, 6)))

    def psnr(x):
        return 10 * np.log10(1.0 / np.mean((x - fine) ** 2))
    assert psnr(sr) >= psnr(nn) + 3


def test_super_resolve_fills_holes_and_keeps_mean():
    fine = smooth_image(64, 3)
    burst = area_downsample_burst(IntensityImage(fine), 4, positions=[(0, 0), (2, 2)])
    out = pixel_super_resolve(burst, 4, burst.true_shifts).data
    assert np.all(np.isfinite(out))
    assert abs(out.mean() - fine.mean()) < 0.02


def test_super_resolve_errors():
    frame = IntensityImage(smooth_image(8))
    burst = LowResBurst((frame,))
    for bad in (0, 2.5, True):
        with pytest.raises(ValueError):
            pixel_super_resolve(burst, bad, [(0.0, 0.0)])
    with pytest.raises(ValueError):
        pixel_super_resolve(burst, 2, [])
    with pytest.raises(ValueError):
        pixel_super_resolve(burst, 2, [(float("nan"), 0.0)])
    with pytest.raises(GeometryError):
        area_downsample_burst(IntensityImage(np.ones((10, 10))), 3)
