//! The differentiable runtime predictor against direct table lookup.

use nas_core::latency::{synthesize_table, total_runtime, validate_runtime_model, LayerLatency, SynthDevice};
use nas_core::oracle::{brute_force_runtime, check_gradients, enumerate_architectures, GradCheckSettings, Probe};
use nas_core::superkernel::Gates;
use nas_core::{DecisionTriple, Graph, LatencyTable, MacroArchConfig, Result, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn table(layers: usize, seed: u64) -> LatencyTable {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows = (0..layers)
        .map(|_| {
            let r53: f64 = rng.random_range(0.5..3.0);
            let r36 = rng.random_range(0.5..3.0);
            let r56 = r53.max(r36) + rng.random_range(0.0..2.0);
            LayerLatency { r5x5_e3_ms: r53, r5x5_e6_ms: r56, r3x3_e6_ms: r36, r3x3_e3_ms: None }
        })
        .collect();
    LatencyTable { device_label: "test".into(), fixed_overhead_ms: rng.random_range(0.0..1.0), layers: rows }
}

fn predicted(arch: &[DecisionTriple], lut: &LatencyTable) -> f64 {
    let mut g = Graph::<f64>::new();
    let bit = |g: &mut Graph<f64>, b: bool| g.scalar(if b { 1.0 } else { 0.0 });
    let gates: Vec<Gates> = arch
        .iter()
        .map(|d| Gates { k5: bit(&mut g, d.use_k5), e3: bit(&mut g, d.use_e3_or_more), e6: bit(&mut g, d.use_e6) })
        .collect();
    let r = total_runtime(&mut g, &gates, lut).unwrap();
    g.item(r)
}

fn exhaustive(layers: usize, seeds: std::ops::Range<u64>) {
    for seed in seeds {
        let lut = table(layers, seed);
        let archs = enumerate_architectures(layers, &vec![true; layers]).unwrap();
        assert_eq!(archs.len(), 5usize.pow(layers as u32));
        for arch in &archs {
            let want = brute_force_runtime(arch, &lut).unwrap();
            let got = predicted(arch, &lut);
            assert!((got - want).abs() <= 1e-9 * want.abs(), "seed {seed} {arch:?}: {got} vs {want}");
            let choices: Vec<_> = arch.iter().map(DecisionTriple::choice).collect();
            let closed = lut.predict(&choices).unwrap();
            assert!((closed - want).abs() <= 1e-9 * want.abs());
        }
    }
}

#[test]
fn all_125_three_layer_architectures_match_lookup() {
    exhaustive(3, 0..10);
}

#[test]
fn all_625_four_layer_architectures_match_lookup() {
    exhaustive(4, 0..3);
}

#[test]
fn synthetic_tables_match_lookup_on_the_toy_space() {
    let config = MacroArchConfig::toy(0);
    let lut = synthesize_table(&config.geometry(), &SynthDevice::default(), 11).unwrap();
    let layers = config.searchable_layers();
    for arch in enumerate_architectures(layers, &config.skip_mask()).unwrap() {
        let want = brute_force_runtime(&arch, &lut).unwrap();
        assert!((predicted(&arch, &lut) - want).abs() <= 1e-9 * want);
    }
}

#[test]
fn turning_any_single_gate_on_never_lowers_runtime() {
    for seed in 0..10 {
        let lut = table(3, seed);
        for arch in enumerate_architectures(3, &[true; 3]).unwrap() {
            let base = predicted(&arch, &lut);
            for i in 0..3 {
                let d = arch[i];
                let mut flips = Vec::new();
                if !d.use_e3_or_more {
                    flips.push(DecisionTriple { use_k5: false, use_e3_or_more: true, use_e6: false });
                } else {
                    if !d.use_k5 {
                        flips.push(DecisionTriple { use_k5: true, ..d });
                    }
                    if !d.use_e6 {
                        flips.push(DecisionTriple { use_e6: true, ..d });
                    }
                }
                for f in flips {
                    let mut next = arch.clone();
                    next[i] = f;
                    let r = predicted(&next, &lut);
                    assert!(r >= base - 1e-12, "seed {seed}: {arch:?} -> {next:?}: {base} > {r}");
                }
            }
        }
    }
}

#[test]
fn runtime_gradient_matches_finite_differences() {
    for seed in 0..10 {
        let lut = table(3, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gates: Vec<Tensor<f64>> = (0..9).map(|_| Tensor::scalar(rng.random_range(0.0..1.0))).collect();
        let eval = |ps: &[Tensor<f64>]| -> Result<(Graph<f64>, Vec<Var>, Var)> {
            let mut g = Graph::new();
            let vars: Vec<Var> = ps.iter().map(|p| g.param(p.clone())).collect();
            let gs: Vec<Gates> = vars.chunks(3).map(|c| Gates { k5: c[0], e3: c[1], e6: c[2] }).collect();
            let r = total_runtime(&mut g, &gs, &lut)?;
            let log_r = g.ln(r);
            Ok((g, vars, log_r))
        };
        let (mut g, vars, out) = eval(&gates).unwrap();
        g.backward(out).unwrap();
        let analytic: Vec<Tensor<f64>> = vars.iter().map(|&v| g.grad(v).unwrap().clone()).collect();
        let names: Vec<String> = (0..9).map(|i| format!("gate{i}")).collect();
        let report = check_gradients(
            |ps| {
                let (g, _, out) = eval(ps)?;
                Ok(Probe { value: g.item(out), signature: 0 })
            },
            &gates,
            &names,
            &analytic,
            &GradCheckSettings::default(),
        )
        .unwrap();
        assert!(report.passed, "seed {seed}:\n{report}");
        assert_eq!(report.checked, 9);
    }
}

#[test]
fn validation_rmse_recovers_injected_noise() {
    let config = MacroArchConfig::toy(0);
    let mut lut = synthesize_table(&config.geometry(), &SynthDevice::default(), 3).unwrap();
    for row in &mut lut.layers {
        row.r3x3_e3_ms = None;
    }
    for seed in 0..5 {
        let report = validate_runtime_model(&lut, 100, 0.5, seed, Some(&config.skip_mask())).unwrap();
        assert!((0.3..=0.7).contains(&report.rmse_ms), "seed {seed}: {report}");
    }
    let exact = validate_runtime_model(&lut, 100, 0.0, 0, None).unwrap();
    assert!(exact.rmse_ms < 1e-12, "{exact}");
}

#[test]
fn validation_reports_approximation_error_of_measured_3x3_e3() {
    let config = MacroArchConfig::toy(0);
    let lut = synthesize_table(&config.geometry(), &SynthDevice::default(), 3).unwrap();
    let report = validate_runtime_model(&lut, 200, 0.0, 1, Some(&config.skip_mask())).unwrap();
    assert!(report.rmse_ms > 0.0);
    assert!(report.mean_rel_error < 0.2, "{report}");
}
