mod common;

use common::{instance, rel_close};
use mosaic_core::cluster::ClusterSpec;
use mosaic_core::interference::{fit_interference, FitForm, InterferenceModel};
use mosaic_core::perf::{lookup_base, Colocation, PerfModel};
use mosaic_core::plan::DeploymentOption;
use mosaic_core::presets::Preset;
use mosaic_core::profiler::{generate_colocation_samples, generate_surfaces, ProfilerConfig, SampleConfig};
use mosaic_core::quota::Quota;
use mosaic_core::surface::ScalingSurface;
use proptest::prelude::*;

fn option(d: u32, a: f64) -> DeploymentOption {
    DeploymentOption::new(d, Quota::from_fraction(a).unwrap())
}

/// Largest grid value at or below `x` and smallest at or above it.
fn bracket<T: PartialOrd + Copy>(values: &[T], x: T) -> (T, T) {
    let lo = *values.iter().filter(|&&v| v <= x).last().unwrap();
    let hi = *values.iter().find(|&&v| v >= x).unwrap();
    (lo, hi)
}

fn stored(s: &ScalingSurface, d: u32, a: f64) -> f64 {
    s.points().iter().find(|p| p.d == d && p.a == a).unwrap().latency
}

#[test]
fn grid_points_are_returned_bit_exactly() {
    for preset in Preset::ALL {
        let w = preset.workloads();
        let surfaces = generate_surfaces(&w, &ClusterSpec::h100(8), &ProfilerConfig::default()).unwrap();
        for s in &surfaces {
            for p in s.points() {
                let est = lookup_base(s, option(p.d, p.a)).unwrap();
                assert_eq!(est.latency.to_bits(), p.latency.to_bits());
                assert_eq!(est.bandwidth_util.to_bits(), p.bandwidth_util.to_bits());
                assert_eq!(est.memory.to_bits(), p.memory.to_bits());
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn interpolation_stays_within_bracketing_values(seed in any::<u64>(), gpus in 1usize..=16, d in 1u32..=16, units in 100u32..=1000) {
        let inst = instance(3, gpus, seed);
        let d = d.min(gpus as u32);
        let a = units as f64 / 1000.0;
        for s in inst.perf.surfaces() {
            let (d0, d1) = bracket(s.d_values(), d);
            let (a0, a1) = bracket(s.a_values(), a);
            let corners = [stored(s, d0, a0), stored(s, d0, a1), stored(s, d1, a0), stored(s, d1, a1)];
            let lo = corners.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = corners.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let l = s.lookup(d, a).unwrap().latency;
            prop_assert!(l >= lo * (1.0 - 1e-12) && l <= hi * (1.0 + 1e-12), "{l} outside [{lo}, {hi}]");
        }
    }

    #[test]
    fn zero_noise_fit_recovers_the_generator(seed in any::<u64>(), e1 in 0.001f64..0.1, e2 in 0.01f64..1.0, e3 in 0.01f64..2.0) {
        let truth = InterferenceModel::new(e1, e2, e3);
        let w = Preset::OfaSys.workloads();
        let samples = generate_colocation_samples(
            &w,
            &ClusterSpec::h100(8),
            &truth,
            &SampleConfig { count: 200, seed, noise_sigma: 0.0, max_colocated: 4, min_colocated: 1 },
            &ProfilerConfig::default(),
        );
        let fit = fit_interference(&samples, FitForm::Full, true).unwrap();
        prop_assert!(rel_close(fit.e1, e1, 1e-9), "e1 {} vs {e1}", fit.e1);
        prop_assert!(rel_close(fit.e2, e2, 1e-9), "e2 {} vs {e2}", fit.e2);
        prop_assert!(rel_close(fit.e3, e3, 1e-9), "e3 {} vs {e3}", fit.e3);
    }

    #[test]
    fn rectified_latency_is_at_least_base(seed in any::<u64>(), e in (0.0f64..0.1, 0.0f64..1.0, 0.0f64..2.0), picks in prop::collection::vec((0usize..4, 1u32..=3), 1..5)) {
        let inst = instance(4, 1, seed);
        let perf = inst.perf.with_interference(InterferenceModel::new(e.0, e.1, e.2));
        let mut coloc = Colocation::new();
        let mut placed = Vec::new();
        for &(m, tenths) in &picks {
            let opt = option(1, tenths as f64 / 10.0);
            coloc.place(inst.dag.id(m), opt, &[0]);
            placed.push((m, opt));
        }
        for &(m, opt) in &placed {
            let id = inst.dag.id(m);
            let base = perf.base(id, opt).unwrap().latency;
            prop_assert!(perf.rectified_latency(id, opt, &[0], &coloc).unwrap() >= base);
        }
    }

    /// Adding a resident with utilization `b` changes the delay by
    /// `e2 * b - e3 * P * (1 - b)` where `P` is the product before. It never
    /// decreases latency when that quantity is non-negative, in particular
    /// without a product term or for a fully bandwidth-bound newcomer.
    #[test]
    fn contention_is_monotone_where_the_product_cannot_shrink(
        bs in prop::collection::vec(0.01f64..1.0, 1..5),
        e in (0.0f64..0.1, 0.0f64..1.0, 0.0f64..2.0),
        b in 0.01f64..=1.0,
    ) {
        let additive = InterferenceModel::new(e.0, e.1, 0.0);
        let full = InterferenceModel::new(e.0, e.1, e.2);
        let mut more = bs.clone();
        more.push(b);
        prop_assert!(additive.delay(&more) >= additive.delay(&bs));
        let mut saturated = bs.clone();
        saturated.push(1.0);
        prop_assert!(full.delay(&saturated) >= full.delay(&bs));
        let p: f64 = bs.iter().product();
        let change = e.1 * b - e.2 * p * (1.0 - b);
        let observed = full.delay(&more) - full.delay(&bs);
        prop_assert!((observed - change).abs() <= 1e-12 * (1.0 + change.abs()));
        if change >= 1e-12 {
            prop_assert!(full.delay(&more) >= full.delay(&bs));
        }
    }
}

/// With a strong product term a second resident can lower the delay: the
/// product of two utilizations below one is smaller than either.
#[test]
fn contention_can_fall_when_a_resident_joins() {
    let m = InterferenceModel::new(0.01, 0.05, 1.0);
    assert!(m.delay(&[0.5, 0.5]) < m.delay(&[0.5]));

    let inst = instance(2, 1, 3);
    let perf = inst.perf.with_interference(m);
    let (x, y) = (inst.dag.id(0), inst.dag.id(1));
    let opt = option(1, 0.5);
    let mut alone = Colocation::new();
    alone.place(x, opt, &[0]);
    let mut both = alone.clone();
    both.place(y, opt, &[0]);
    let bx = perf.base(x, opt).unwrap().bandwidth_util;
    let by = perf.base(y, opt).unwrap().bandwidth_util;
    let expected_change = m.e2 * by - m.e3 * bx * (1.0 - by);
    let change = perf.rectified_latency(x, opt, &[0], &both).unwrap() - perf.rectified_latency(x, opt, &[0], &alone).unwrap();
    assert!((change - expected_change).abs() <= 1e-12);
}

#[test]
fn fitter_reports_negative_coefficients() {
    let w = Preset::OfaSys.workloads();
    let truth = InterferenceModel::new(0.01, -0.02, 0.5);
    let samples = generate_colocation_samples(
        &w,
        &ClusterSpec::h100(8),
        &truth,
        &SampleConfig { count: 200, seed: 5, noise_sigma: 0.0, max_colocated: 4, min_colocated: 1 },
        &ProfilerConfig::default(),
    );
    let fit = fit_interference(&samples, FitForm::Full, true).unwrap();
    assert!(fit.has_negative_coefficient());
    assert!(fit.e2 < 0.0);
}

#[test]
fn excluding_self_drops_the_own_term() {
    let inst = instance(1, 1, 11);
    let m = InterferenceModel::new(0.01, 0.3, 0.2);
    let with_self = inst.perf.with_interference(m);
    let without = PerfModel::new(inst.perf.surfaces().cloned(), m).with_include_self(false);
    let id = inst.dag.id(0);
    let opt = option(1, 1.0);
    let mut c = Colocation::new();
    c.place(id, opt, &[0]);
    let base = with_self.base(id, opt).unwrap();
    let b = base.bandwidth_util;
    assert!(rel_close(with_self.rectified_latency(id, opt, &[0], &c).unwrap(), base.latency + 0.01 + 0.3 * b + 0.2 * b, 1e-12));
    assert!(rel_close(without.rectified_latency(id, opt, &[0], &c).unwrap(), base.latency + 0.01, 1e-12));
}
