use proptest::prelude::*;

use thz_umi::characterization::{
    circular_angle_spread, fit_ci, k_factor, rms_delay_spread, weighted_circular_spread, Plane,
};
use thz_umi::clustering::{adjusted_rand_index, dbscan, delay_scales, mcd};
use thz_umi::estimation::mpc_threshold;
use thz_umi::params::{ClusteringParams, SounderParams};
use thz_umi::propagation::fspl;
use thz_umi::synth::{Mpc, MpcOrigin};

fn mpc_strategy() -> impl Strategy<Value = Mpc> {
    (0.0f64..2e-6, -160.0f64..-60.0, 0.0f64..360.0, -20.0f64..20.0).prop_map(|(delay, gain_db, azimuth, elevation)| {
        Mpc {
            delay,
            gain_db,
            azimuth,
            elevation,
            cluster_id: None,
            origin: MpcOrigin::Estimated,
        }
    })
}

fn partition(labels: &[i64]) -> Vec<Vec<usize>> {
    let mut groups: std::collections::BTreeMap<i64, Vec<usize>> = Default::default();
    for (i, &l) in labels.iter().enumerate() {
        groups.entry(if l < 0 { -1 - i as i64 } else { l }).or_default().push(i);
    }
    let mut v: Vec<Vec<usize>> = groups.into_values().collect();
    v.sort();
    v
}

proptest! {
    #[test]
    fn mcd_is_a_symmetric_nonnegative_distance(a in mpc_strategy(), b in mpc_strategy(), zeta in 0.0f64..20.0) {
        let (tmax, tstd) = (1e-6, 3e-7);
        let ab = mcd(&a, &b, zeta, tmax, tstd);
        prop_assert!(ab >= 0.0);
        prop_assert_eq!(ab, mcd(&b, &a, zeta, tmax, tstd));
        prop_assert_eq!(mcd(&a, &a, zeta, tmax, tstd), 0.0);
    }

    #[test]
    fn dbscan_partition_ignores_input_order(
        mpcs in prop::collection::vec(mpc_strategy(), 1..40),
        seed in any::<u64>(),
    ) {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let p = ClusteringParams::default();
        let mut perm: Vec<usize> = (0..mpcs.len()).collect();
        perm.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
        let shuffled: Vec<Mpc> = perm.iter().map(|&i| mpcs[i].clone()).collect();
        let a = dbscan(&mpcs, &p).unwrap().labels();
        let b = dbscan(&shuffled, &p).unwrap().labels();
        let mut back = vec![0; b.len()];
        for (j, &i) in perm.iter().enumerate() {
            back[i] = b[j];
        }
        prop_assert_eq!(partition(&a), partition(&back));
    }

    #[test]
    fn ari_ignores_label_names(labels in prop::collection::vec(0i64..5, 2..50), shift in 1i64..100) {
        let renamed: Vec<i64> = labels.iter().map(|l| (l + shift) * 3).collect();
        prop_assert!((adjusted_rand_index(&labels, &renamed) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn spreads_ignore_gain_scale(mpcs in prop::collection::vec(mpc_strategy(), 1..30), g in -40.0f64..40.0) {
        let scaled: Vec<Mpc> = mpcs.iter().cloned().map(|mut m| { m.gain_db += g; m }).collect();
        let close = |a: f64, b: f64| (a - b).abs() <= 1e-9 * a.abs().max(1e-12);
        prop_assert!(close(rms_delay_spread(&mpcs).unwrap(), rms_delay_spread(&scaled).unwrap()));
        for plane in [Plane::Azimuth, Plane::Elevation] {
            let a = circular_angle_spread(&mpcs, plane).unwrap();
            let b = circular_angle_spread(&scaled, plane).unwrap();
            // resultant rounding shows up as sqrt(eps) near zero spread
            prop_assert!((a - b).abs() <= 1e-5, "{} {}", a, b);
        }
    }

    #[test]
    fn azimuth_spread_ignores_rotation(
        w in prop::collection::vec(1e-6f64..1.0, 1..30),
        az in prop::collection::vec(0.0f64..360.0, 30),
        rot in 0.0f64..360.0,
    ) {
        let az = &az[..w.len()];
        let rotated: Vec<f64> = az.iter().map(|a| (a + rot).rem_euclid(360.0)).collect();
        let a = weighted_circular_spread(&w, az);
        let b = weighted_circular_spread(&w, &rotated);
        // resultant rounding shows up as sqrt(eps) near zero spread
        prop_assert!((a - b).abs() <= 1e-5, "{} {}", a, b);
    }

    #[test]
    fn k_factor_ignores_gain_scale(groups in prop::collection::vec(1e-12f64..1e-6, 2..8), s in 1e-3f64..1e3) {
        let scaled: Vec<f64> = groups.iter().map(|g| g * s).collect();
        prop_assert!((k_factor(&groups).unwrap() - k_factor(&scaled).unwrap()).abs() < 1e-9);
    }

    #[test]
    fn delay_scales_are_shift_invariant(mpcs in prop::collection::vec(mpc_strategy(), 2..30), t in 0.0f64..1e-6) {
        let shifted: Vec<Mpc> = mpcs.iter().cloned().map(|mut m| { m.delay += t; m }).collect();
        let (a, b) = (delay_scales(&mpcs), delay_scales(&shifted));
        prop_assert!((a.0 - b.0).abs() <= 1e-15 && (a.1 - b.1).abs() <= 1e-15);
    }

    #[test]
    fn threshold_never_drops_below_noise_rule(alpha in -200.0f64..-40.0) {
        let s = SounderParams::default();
        let t = 20.0 * mpc_threshold(alpha, &s).log10();
        prop_assert!(t >= s.noise_floor + 5.0 - 1e-9);
        prop_assert!(t >= alpha - s.dynamic_range_r - 1e-9);
    }

    #[test]
    fn fspl_grows_twenty_db_per_decade(d in 1.0f64..1000.0) {
        let f = 220e9;
        prop_assert!((fspl(f, 10.0 * d).unwrap() - fspl(f, d).unwrap() - 20.0).abs() < 1e-9);
    }

    #[test]
    fn ci_fit_recovers_any_exponent(n in 1.0f64..5.0) {
        let f = 220e9;
        let f1 = fspl(f, 1.0).unwrap();
        let pts: Vec<(f64, f64)> = (0..20).map(|i| {
            let d = 20.0 + 20.0 * i as f64;
            (d, f1 + 10.0 * n * d.log10())
        }).collect();
        let fit = fit_ci(&pts, f).unwrap();
        prop_assert!((fit.param("ple").unwrap() - n).abs() < 1e-9);
    }
}
