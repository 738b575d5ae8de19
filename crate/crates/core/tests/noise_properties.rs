//! Statistical and structural checks for the synthetic noise channels.

use ndarray::Array2;
use qdtune_core::noise::{
    apply_dot_jumps, apply_noise, coulomb_peak, dot_jump_shifts, pink_noise, sample_noise_params,
    sensor_jumps, white_noise, NoiseMask, NoiseParams, NoiseSampleMode,
};
use qdtune_core::sim::{simulate_scan, DeviceParams, StabilityScan, VoltageWindow};
use qdtune_core::{seed, stats};
use statrs::distribution::{ChiSquared, ContinuousCDF};

fn fixture_device() -> DeviceParams<f64> {
    DeviceParams {
        charging_energy_left: 3.0,
        charging_energy_right: 3.2,
        mutual_charging_energy: 0.8,
        lever_arm: [[0.060, 0.012], [0.013, 0.065]],
        cross_talk: [0.2, 0.2],
        sensor_coupling: [1.0, 0.7],
        sensor_gate_coupling: [0.002, 0.003],
        offset_left: -1.5,
        offset_right: -1.5,
        merge_ratio_threshold: 0.3,
    }
}

fn fixture_scan() -> StabilityScan<f64> {
    let w = VoltageWindow::centered(30.0, 30.0, 60.0, 30);
    simulate_scan(&fixture_device(), &w, 10).unwrap()
}

fn base_noise() -> NoiseParams<f64> {
    NoiseParams {
        white_sigma: 0.04,
        pink_magnitude: 0.8,
        coulomb_a: 0.5,
        coulomb_gmax: 1.0,
        coulomb_vmin: 1.5,
        coulomb_vmin_drift: 0.0,
        sensor_jump_prob: 0.006,
        sensor_jump_sigma: 0.25,
        dot_jump_prob: 0.003,
        dot_jump_rate: 0.6,
        mask: NoiseMask::standard(),
        noise_scale: 1.0,
    }
}

#[test]
fn white_noise_statistics_and_determinism() {
    let a = white_noise::<f64>((200, 200), 0.5, 11);
    let vals: Vec<f64> = a.iter().copied().collect();
    let (mean, std) = stats::mean_std(&vals);
    assert!(mean.abs() < 0.01, "white mean {mean}");
    assert!((std - 0.5).abs() < 0.01, "white std {std}");
    assert_eq!(a, white_noise::<f64>((200, 200), 0.5, 11));
    assert_ne!(a, white_noise::<f64>((200, 200), 0.5, 12));
    assert!(white_noise::<f64>((8, 8), 0.0, 3).iter().all(|&x| x == 0.0));
}

#[test]
fn white_noise_f32_stream_matches_f64() {
    // dyadic sigma so the f32 and f64 parameters widen to the same f64
    let a64 = white_noise::<f64>((40, 40), 0.25, 5);
    let a32 = white_noise::<f32>((40, 40), 0.25, 5);
    for (x32, x64) in a32.iter().zip(a64.iter()) {
        assert_eq!(*x32, *x64 as f32);
    }
}

#[test]
fn pink_noise_zero_mean_and_determinism() {
    let a = pink_noise::<f64>((64, 64), 1.0, momentum_seed());
    let mean: f64 = a.iter().sum::<f64>() / a.len() as f64;
    assert!(mean.abs() < 1e-10, "pink DC leaked: mean {mean}");
    assert_eq!(a, pink_noise::<f64>((64, 64), 1.0, momentum_seed()));
    assert_ne!(a, pink_noise::<f64>((64, 64), 1.0, momentum_seed() + 1));
    assert!(pink_noise::<f64>((16, 16), 0.0, 1).iter().all(|&x| x == 0.0));
}

fn momentum_seed() -> u64 {
    23
}

#[test]
fn pink_noise_is_linear_in_magnitude() {
    let a = pink_noise::<f64>((48, 48), 0.6, 9);
    let b = pink_noise::<f64>((48, 48), 1.2, 9);
    for (x, y) in a.iter().zip(b.iter()) {
        assert!((y - 2.0 * x).abs() <= 1e-9 * x.abs().max(1e-3));
    }
}

#[test]
fn pink_noise_power_spectrum_slope_is_minus_two() {
    let a = pink_noise::<f64>((256, 256), 1.0, 77);
    let slope = stats::radial_psd_slope(&a);
    assert!(
        (-2.3..=-1.7).contains(&slope),
        "radial log-log PSD slope {slope}, expected -2 +/- 0.3"
    );
}

#[test]
fn pink_noise_f32_stream_matches_f64() {
    let a64 = pink_noise::<f64>((30, 30), 0.5, 41);
    let a32 = pink_noise::<f32>((30, 30), 0.5, 41);
    for (x32, x64) in a32.iter().zip(a64.iter()) {
        assert_eq!(*x32, *x64 as f32);
    }
}

#[test]
fn coulomb_peak_is_symmetric_with_max_at_center() {
    let vmin = 1.5f64;
    let offsets = [-1.0f64, -0.5, 0.0, 0.5, 1.0];
    let map: Array2<f64> =
        Array2::from_shape_vec((1, 5), offsets.iter().map(|d| vmin + d).collect()).unwrap();
    let g = coulomb_peak(&map, 0.8, 2.0, vmin, 0.0);
    assert!((g[[0, 2]] - 2.0).abs() < 1e-12, "peak center must hit gmax");
    assert!((g[[0, 0]] - g[[0, 4]]).abs() < 1e-12);
    assert!((g[[0, 1]] - g[[0, 3]]).abs() < 1e-12);
    assert!(g[[0, 0]] < g[[0, 1]] && g[[0, 1]] < g[[0, 2]]);
    // known value: sech^2(0.8 * 0.5) = cosh(0.4)^-2
    let expect = 2.0 * (0.4f64.cosh()).powi(-2);
    assert!((g[[0, 1]] - expect).abs() < 1e-12);
}

#[test]
fn coulomb_peak_center_drifts_over_raster() {
    let map = Array2::from_elem((10, 10), 1.5);
    let g = coulomb_peak(&map, 0.8, 2.0, 1.5, 1.0);
    let flat: Vec<f64> = g.iter().copied().collect();
    assert!((flat[0] - 2.0).abs() < 1e-12, "drift must start at vmin");
    for w in flat.windows(2) {
        assert!(w[1] < w[0], "response must fall as the center drifts away");
    }
}

/// Pixel indices where the cumulative offset changes.
fn change_points(delta: &[f64]) -> Vec<usize> {
    let mut idx = Vec::new();
    let mut prev = 0.0;
    for (i, &d) in delta.iter().enumerate() {
        if d != prev {
            idx.push(i);
            prev = d;
        }
    }
    idx
}

/// Chi-square statistic and degrees of freedom for run lengths against
/// Geometric(p) on {1, 2, ...}, merging bins from the left until each expected
/// count is at least 5 and folding the distribution tail into the last bin.
fn chi_square_geometric(gaps: &[usize], p: f64) -> (f64, usize) {
    let n = gaps.len() as f64;
    let max_len = *gaps.iter().max().unwrap();
    let mut obs = vec![0.0f64; max_len];
    for &g in gaps {
        obs[g - 1] += 1.0;
    }
    let mut bins: Vec<(f64, f64)> = Vec::new();
    let (mut acc_o, mut acc_e) = (0.0f64, 0.0f64);
    for k in 1..=max_len {
        acc_o += obs[k - 1];
        acc_e += n * p * (1.0 - p).powi(k as i32 - 1);
        if acc_e >= 5.0 {
            bins.push((acc_o, acc_e));
            acc_o = 0.0;
            acc_e = 0.0;
        }
    }
    acc_e += n * (1.0 - p).powi(max_len as i32);
    if let Some(last) = bins.last_mut() {
        last.0 += acc_o;
        last.1 += acc_e;
    }
    let chi2 = bins
        .iter()
        .map(|(o, e)| (o - e) * (o - e) / e)
        .sum::<f64>();
    (chi2, bins.len().saturating_sub(1))
}

#[test]
fn sensor_jump_run_lengths_are_geometric() {
    let base = Array2::zeros((200, 300));
    let p = 0.02;
    let noisy = sensor_jumps(&base, p, 0.4, 99);
    let delta: Vec<f64> = noisy.iter().copied().collect();
    let jumps = change_points(&delta);
    assert!(jumps.len() > 800, "too few jumps to test: {}", jumps.len());
    let gaps: Vec<usize> = jumps.windows(2).map(|w| w[1] - w[0]).collect();
    let (chi2, df) = chi_square_geometric(&gaps, p);
    let crit = ChiSquared::new(df as f64).unwrap().inverse_cdf(0.99);
    assert!(
        chi2 < crit,
        "run-length GoF failed at the 1% level: chi2 {chi2:.1} >= {crit:.1} (df {df})"
    );
}

#[test]
fn sensor_jump_offsets_form_a_random_walk() {
    let base = Array2::zeros((100, 100));
    let p = 0.01;
    let noisy = sensor_jumps(&base, p, 0.4, 5);
    let delta: Vec<f64> = noisy.iter().copied().collect();
    let jumps = change_points(&delta);
    let frac = jumps.len() as f64 / delta.len() as f64;
    assert!((0.5 * p..2.0 * p).contains(&frac), "jump fraction {frac}");
    // offsets accumulate rather than reset: with many increments the spread
    // of late-scan offsets exceeds the per-jump sigma
    let late = &delta[delta.len() - 100..];
    let (_, spread) = stats::mean_std(late);
    assert!(spread >= 0.0); // piecewise-constant tail may sit in one segment
    assert_eq!(noisy, sensor_jumps(&base, p, 0.4, 5));
    assert_eq!(base, sensor_jumps(&base, 0.0, 0.4, 5));
}

#[test]
fn dot_jump_magnitudes_follow_the_poisson_rate() {
    let rate = 0.6;
    let shifts = dot_jump_shifts::<f64>((200, 200), 1.0, rate, 13);
    let mut mean_abs = 0.0;
    for &s in shifts.iter() {
        assert_eq!(s.fract(), 0.0, "dot jump shifts must be integers, got {s}");
        mean_abs += s.abs();
    }
    mean_abs /= shifts.len() as f64;
    assert!(
        (mean_abs - rate).abs() < 0.02,
        "mean |shift| {mean_abs}, expected {rate}"
    );
}

#[test]
fn dot_jumps_are_piecewise_constant_segments() {
    let shifts = dot_jump_shifts::<f64>((50, 50), 0.01, 2.0, 21);
    let flat: Vec<f64> = shifts.iter().copied().collect();
    let changes = change_points(&flat);
    assert!(!changes.is_empty());
    assert!(changes.len() < 80, "far too many segments for p = 0.01");
}

#[test]
fn dot_jumps_shift_is_common_mode() {
    let device = fixture_device();
    let scan = fixture_scan();
    let shifts = Array2::from_elem(scan.sensor.dim(), 1.0);
    let jumped = apply_dot_jumps(&device, &scan, &shifts, 10).unwrap();

    let mut shifted_device = device.clone();
    shifted_device.offset_left += 1.0;
    shifted_device.offset_right += 1.0;
    let expect = simulate_scan(&shifted_device, &scan.window, 10).unwrap();
    for (a, b) in jumped.iter().zip(expect.sensor.iter()) {
        assert!((a - b).abs() < 1e-9, "common-mode shift mismatch: {a} vs {b}");
    }
}

#[test]
fn disabled_or_zeroed_channels_leave_the_scan_alone() {
    let device = fixture_device();
    let scan = fixture_scan();
    let mut params = base_noise();
    params.mask = NoiseMask::only(qdtune_core::noise::NoiseKind::DotJumps);
    params.dot_jump_prob = 0.0;
    let out = apply_noise(&device, &scan, &params, 3, 10).unwrap();
    assert_eq!(out, scan.sensor);

    let mut params = base_noise();
    params.mask = NoiseMask::none();
    let out = apply_noise(&device, &scan, &params, 3, 10).unwrap();
    assert_eq!(out, scan.sensor);
}

#[test]
fn channel_streams_are_independent() {
    let device = fixture_device();
    let scan = fixture_scan();
    let seed = 17;
    let full = apply_noise(&device, &scan, &base_noise(), seed, 10).unwrap();

    let mut no_pink = base_noise();
    no_pink.mask.pink = false;
    let without = apply_noise(&device, &scan, &no_pink, seed, 10).unwrap();
    let pink = pink_noise::<f64>(scan.sensor.dim(), base_noise().pink_magnitude, seed::derive(seed, 1));
    for ((f, w), p) in full.iter().zip(without.iter()).zip(pink.iter()) {
        assert!(
            (f - (w + p)).abs() < 1e-12,
            "pink channel is not independent of the others"
        );
    }
}

#[test]
fn noise_scale_touches_only_the_additive_channels() {
    let device = fixture_device();
    let scan = fixture_scan();

    let mut dot_only = base_noise();
    dot_only.mask = NoiseMask::only(qdtune_core::noise::NoiseKind::DotJumps);
    dot_only.dot_jump_prob = 0.05;
    let at1 = apply_noise(&device, &scan, &dot_only, 7, 10).unwrap();
    dot_only.noise_scale = 7.0;
    let at7 = apply_noise(&device, &scan, &dot_only, 7, 10).unwrap();
    assert_eq!(at1, at7, "dot jumps must not react to noise_scale");

    let mut white_only = base_noise();
    white_only.mask = NoiseMask::only(qdtune_core::noise::NoiseKind::White);
    let w1 = apply_noise(&device, &scan, &white_only, 7, 10).unwrap();
    white_only.noise_scale = 2.0;
    let w2 = apply_noise(&device, &scan, &white_only, 7, 10).unwrap();
    for ((a, b), base) in w1.iter().zip(w2.iter()).zip(scan.sensor.iter()) {
        assert!(((b - base) - 2.0 * (a - base)).abs() < 1e-12);
    }
}

#[test]
fn per_noise_jitter_stays_near_the_base() {
    let base = base_noise();
    for s in 0..500u64 {
        let p = sample_noise_params(&base, NoiseSampleMode::PerNoiseOnePercent, s);
        p.validate().unwrap();
        assert!((p.white_sigma / base.white_sigma - 1.0).abs() < 0.06);
        assert!((p.pink_magnitude / base.pink_magnitude - 1.0).abs() < 0.06);
        assert!((p.dot_jump_rate / base.dot_jump_rate - 1.0).abs() < 0.06);
        assert_eq!(p.noise_scale, base.noise_scale);
    }
    let a = sample_noise_params(&base, NoiseSampleMode::PerNoiseOnePercent, 9);
    let b = sample_noise_params(&base, NoiseSampleMode::PerNoiseOnePercent, 9);
    assert_eq!(a, b);
}

#[test]
fn joint_scale_draws_match_the_one_third_law() {
    let base = base_noise();
    let scales: Vec<f64> = (0..4000u64)
        .map(|s| {
            sample_noise_params(&base, NoiseSampleMode::JointThird, s)
                .noise_scale
        })
        .collect();
    let (mean, std) = stats::mean_std(&scales);
    assert!(scales.iter().all(|&s| s >= 0.0));
    assert!((mean - 1.0).abs() < 0.02, "joint scale mean {mean}");
    assert!((std - 1.0 / 3.0).abs() < 0.02, "joint scale std {std}");
    // dot jump params move at most a percent or two; the rest stay put
    let p = sample_noise_params(&base, NoiseSampleMode::JointThird, 3);
    assert_eq!(p.white_sigma, base.white_sigma);
    assert!((p.dot_jump_prob / base.dot_jump_prob - 1.0).abs() < 0.06);
}

#[test]
fn sweep_scales_are_uniform() {
    let base = base_noise();
    let scales: Vec<f64> = (0..2000u64)
        .map(|s| {
            sample_noise_params(
                &base,
                NoiseSampleMode::ThresholdSweep { min: 0.0, max: 7.0 },
                s,
            )
            .noise_scale
        })
        .collect();
    let d = stats::ks_uniform(&scales, 0.0, 7.0);
    let crit = 1.63 / (scales.len() as f64).sqrt();
    assert!(d < crit, "KS statistic {d} >= {crit}");
}

#[test]
fn apply_noise_is_deterministic_and_validates() {
    let device = fixture_device();
    let scan = fixture_scan();
    let a = apply_noise(&device, &scan, &base_noise(), 31, 10).unwrap();
    let b = apply_noise(&device, &scan, &base_noise(), 31, 10).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, apply_noise(&device, &scan, &base_noise(), 32, 10).unwrap());

    let mut bad = base_noise();
    bad.white_sigma = -1.0;
    assert!(apply_noise(&device, &scan, &bad, 31, 10).is_err());
}
