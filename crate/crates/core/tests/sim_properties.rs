//! Property tests for the ground-state search, checked against an independent
//! brute-force oracle.

use proptest::prelude::*;
use qdtune_core::sim::{
    compute_charge_config, simulate_scan, DeviceParams, VoltageWindow,
};

/// Independent oracle: enumerate every configuration, compute the energy from
/// the textbook formula, and pick the minimum by explicit sort with the
/// documented tie-break (smallest total, then smallest left occupancy).
fn oracle_argmin(d: &DeviceParams<f64>, v1: f64, v2: f64, bound: u32) -> (u32, u32) {
    let mu1 = d.lever_arm[0][0] * v1 + d.lever_arm[0][1] * v2 + d.offset_left;
    let mu2 = d.lever_arm[1][0] * v1 + d.lever_arm[1][1] * v2 + d.offset_right;
    let mut table: Vec<(f64, u32, u32, u32)> = Vec::new();
    for n1 in 0..=bound {
        for n2 in 0..=bound {
            let (x, y) = (n1 as f64, n2 as f64);
            let u = 0.5 * d.charging_energy_left * x * (x - 1.0)
                + 0.5 * d.charging_energy_right * y * (y - 1.0)
                + d.mutual_charging_energy * x * y
                - x * mu1
                - y * mu2;
            table.push((u, n1 + n2, n1, n2));
        }
    }
    table.sort_by(|a, b| {
        a.0.partial_cmp(&b.0)
            .unwrap()
            .then(a.1.cmp(&b.1))
            .then(a.2.cmp(&b.2))
    });
    let best = table[0];
    (best.2, best.3)
}

fn arb_device() -> impl Strategy<Value = DeviceParams<f64>> {
    (
        (2.8f64..4.2, 2.8f64..4.2, 0.1f64..1.2),
        (0.05f64..0.075, 0.05f64..0.075),
        (0.0f64..0.3, 0.0f64..0.3),
        (0.5f64..1.2, 0.5f64..1.2),
        (0.001f64..0.004, 0.001f64..0.004),
        (-2.0f64..-1.0, -2.0f64..-1.0),
    )
        .prop_map(|((ec1, ec2, em), (a11, a22), (ct1, ct2), (c1, c2), (g1, g2), (o1, o2))| {
            DeviceParams {
                charging_energy_left: ec1,
                charging_energy_right: ec2,
                mutual_charging_energy: em,
                lever_arm: [[a11, ct1 * a11], [ct2 * a22, a22]],
                cross_talk: [ct1, ct2],
                sensor_coupling: [c1, c2],
                sensor_gate_coupling: [g1, g2],
                offset_left: o1,
                offset_right: o2,
                merge_ratio_threshold: 0.3,
            }
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1100))]

    #[test]
    fn search_matches_brute_force_oracle(
        d in arb_device(),
        v1 in -20.0f64..160.0,
        v2 in -20.0f64..160.0,
    ) {
        // The bound error path is exercised elsewhere; here stay inside it.
        match compute_charge_config(&d, v1, v2, 12) {
            Ok(got) => prop_assert_eq!(got, oracle_argmin(&d, v1, v2, 12)),
            Err(_) => prop_assert_eq!(oracle_argmin(&d, v1, v2, 12).0.max(
                oracle_argmin(&d, v1, v2, 12).1), 12),
        }
    }

    #[test]
    fn occupancy_monotone_along_gate_sweeps(
        d in arb_device(),
        v2 in 0.0f64..60.0,
    ) {
        let mut prev = compute_charge_config(&d, -10.0, v2, 14).unwrap();
        for step in 1..60 {
            let v1 = -10.0 + step as f64 * 2.0;
            let occ = compute_charge_config(&d, v1, v2, 14).unwrap();
            prop_assert!(
                occ.0 + occ.1 >= prev.0 + prev.1,
                "total occupancy dropped from {:?} to {:?} at v1 = {}", prev, occ, v1
            );
            prop_assert!(
                occ.0 >= prev.0,
                "left occupancy dropped from {:?} to {:?} at v1 = {}", prev, occ, v1
            );
            prev = occ;
        }
    }

    #[test]
    fn scan_labels_are_valid_distributions(
        d in arb_device(),
        c1 in 0.0f64..120.0,
        c2 in 0.0f64..120.0,
    ) {
        let w = VoltageWindow::centered(c1, c2, 60.0, 12);
        let scan = simulate_scan(&d, &w, 16).unwrap();
        let label = qdtune_core::sim::label_scan(&scan);
        label.validate().unwrap();
        let sum: f64 = label.p.iter().sum();
        prop_assert!((sum - 1.0).abs() < 1e-9);
    }
}

#[test]
fn scans_are_deterministic_across_calls() {
    use qdtune_core::sim::{sample_device, DeviceRanges, Range};
    let ranges = DeviceRanges {
        charging_energy: Range::new(2.8, 4.2),
        mutual_charging_energy: Range::new(0.1, 1.2),
        lever_arm_diag: Range::new(0.05, 0.075),
        cross_talk: Range::new(0.1, 0.3),
        sensor_coupling_left: Range::new(0.8, 1.2),
        sensor_coupling_right: Range::new(0.5, 0.9),
        sensor_gate_coupling: Range::new(0.001, 0.004),
        offset: Range::new(-2.0, -1.0),
        merge_ratio_threshold: 0.3,
    };
    let d = sample_device::<f64>(7, &ranges).unwrap();
    let w = VoltageWindow::centered(30.0, 30.0, 60.0, 30);
    let a = simulate_scan(&d, &w, 10).unwrap();
    let b = simulate_scan(&d, &w, 10).unwrap();
    assert_eq!(a.sensor, b.sensor);
    assert_eq!(a.occupancy, b.occupancy);
}
