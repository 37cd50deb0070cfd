use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;

fn forced(layer: &mut SuperkernelLayer<f64>, choice: LayerChoice) {
    let (lo, hi) = (-1.0, 1e9);
    let (k5, e3, e6) = match choice {
        LayerChoice::Skip => (hi, hi, hi),
        LayerChoice::MbConv { kernel, expansion } => {
            (if kernel == 5 { lo } else { hi }, lo, if expansion == 6 { lo } else { hi })
        }
    };
    layer.t_k5 = Tensor::scalar(k5);
    layer.t_e3 = Tensor::scalar(e3);
    layer.t_e6 = Tensor::scalar(e6);
}

fn provenance(config: &MacroArchConfig) -> Provenance {
    Provenance { config_hash: config.hash(), lut_hash: "0".repeat(64), lambda: 0.1, seed: 7, search_steps: 3 }
}

fn random_input(config: &MacroArchConfig, n: usize, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::randn(&[n, config.input_height, config.input_width, config.input_channels], 1.0, &mut rng)
}

fn supernet_logits(net: &Supernet<f64>, x: &Tensor<f64>) -> Tensor<f64> {
    let mut g = Graph::new();
    let vars = net.bind(&mut g);
    let xv = g.constant(x.clone());
    let out = net.forward(&mut g, &vars, xv, GateMode::Ste).unwrap();
    g.value(out.logits).clone()
}

fn compact_logits(net: &CompactNetwork<f64>, x: &Tensor<f64>) -> Tensor<f64> {
    let mut g = Graph::new();
    let vars = net.bind(&mut g);
    let xv = g.constant(x.clone());
    let out = net.forward(&mut g, &vars, xv).unwrap();
    g.value(out).clone()
}

fn mixed_config() -> MacroArchConfig {
    MacroArchConfig {
        input_height: 7,
        input_width: 6,
        input_channels: 3,
        stem_channels: 4,
        blocks: vec![
            BlockConfig { num_layers: 2, out_channels: 6, first_stride: 2 },
            BlockConfig { num_layers: 2, out_channels: 4, first_stride: 1 },
        ],
        num_classes: 3,
        seed: 11,
        layer_init: LayerInit::default(),
    }
}

#[test]
fn toy_config_structure() {
    let config = MacroArchConfig::toy(0);
    let net = build_supernet::<f64>(&config).unwrap();
    assert_eq!(net.searchable_layers(), 4);
    let skip: Vec<bool> = net.layers.iter().map(|l| l.skip_allowed).collect();
    assert_eq!(skip, [false, true, false, true]);
    assert_eq!(config.skip_mask(), skip);
}

#[test]
fn layer_specs_track_strides_and_channels() {
    let specs = mixed_config().layer_specs();
    assert_eq!((specs[0].cin, specs[0].cout, specs[0].stride), (4, 6, 2));
    assert_eq!((specs[1].height, specs[1].width), (4, 3));
    assert_eq!((specs[2].cin, specs[2].cout, specs[2].stride), (6, 4, 1));
    assert!(specs[3].skip_allowed && !specs[2].skip_allowed);
}

#[test]
fn same_seed_same_weights() {
    let config = MacroArchConfig::toy(5);
    assert_eq!(build_supernet::<f64>(&config).unwrap(), build_supernet::<f64>(&config).unwrap());
    let other = build_supernet::<f64>(&MacroArchConfig::toy(6)).unwrap();
    assert_ne!(build_supernet::<f64>(&config).unwrap(), other);
}

#[test]
fn invalid_configs_are_rejected() {
    let mut c = MacroArchConfig::toy(0);
    c.blocks[0].first_stride = 3;
    assert!(build_supernet::<f64>(&c).is_err());
    let mut c = MacroArchConfig::toy(0);
    c.num_classes = 1;
    assert!(c.validate().is_err());
    let mut c = MacroArchConfig::toy(0);
    c.blocks[1].num_layers = 0;
    assert!(c.validate().is_err());
}

#[test]
fn param_count_closed_form() {
    for config in [MacroArchConfig::toy(1), mixed_config()] {
        let net = build_supernet::<f64>(&config).unwrap();
        // Independent tally: stem 3·3·Cin·S + 2S, per layer
        // Cin·6Cin + 2·6Cin + 25·6Cin + 6Cin·Cout + 3, head C·K + K.
        let mut expected = 9 * config.input_channels * config.stem_channels + 2 * config.stem_channels;
        for s in config.layer_specs() {
            let w = 6 * s.cin;
            expected += s.cin * w + 2 * w + 25 * w + w * s.cout + 3;
        }
        expected += config.final_channels() * config.num_classes + config.num_classes;
        assert_eq!(net.param_count(), expected);
        assert_eq!(config.supernet_param_count(), expected);
    }
}

#[test]
fn supernet_is_largest_network_plus_thresholds() {
    let config = mixed_config();
    let net = build_supernet::<f64>(&config).unwrap();
    let largest = vec![LayerChoice::MbConv { kernel: 5, expansion: 6 }; 4];
    let fixed = config.fixed_param_count(&largest).unwrap();
    assert_eq!(net.param_count(), fixed + 3 * 4);
    let arch = DerivedArchitecture::new(config.clone(), largest, provenance(&config)).unwrap();
    assert_eq!(materialize(&arch, &net).unwrap().param_count(), fixed);
}

#[test]
fn derive_with_extreme_thresholds() {
    let config = mixed_config();
    let mut net = build_supernet::<f64>(&config).unwrap();
    net.set_thresholds(-1.0);
    let arch = derive_architecture(&net, "x", 0.0, 0, 1).unwrap();
    assert!(arch.layers.iter().all(|c| *c == LayerChoice::MbConv { kernel: 5, expansion: 6 }));
    net.set_thresholds(1e12);
    let arch = derive_architecture(&net, "x", 0.0, 0, 1).unwrap();
    let small = LayerChoice::MbConv { kernel: 3, expansion: 3 };
    assert_eq!(arch.layers, [small, LayerChoice::Skip, small, LayerChoice::Skip]);
}

#[test]
fn derive_matches_hand_evaluated_norms() {
    let config = mixed_config();
    for seed in 0..10u64 {
        let mut c = config.clone();
        c.seed = seed;
        let mut net = build_supernet::<f64>(&c).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for layer in &mut net.layers {
            let t = Tensor::<f64>::randn(&[3], 1.5, &mut rng);
            layer.t_k5 = Tensor::scalar(t.data()[0] + 1.5);
            layer.t_e3 = Tensor::scalar(t.data()[1] + 1.5);
            layer.t_e6 = Tensor::scalar(t.data()[2] + 1.5);
        }
        let arch = derive_architecture(&net, "x", 0.0, seed, 1).unwrap();
        for (layer, choice) in net.layers.iter().zip(&arch.layers) {
            let wide = layer.wide_channels();
            let d = layer.dw_super.data();
            let (mut shell, mut lo_core, mut lo_shell, mut hi_core, mut hi_shell) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for r in 0..5 {
                for c in 0..5 {
                    let ring = r == 0 || r == 4 || c == 0 || c == 4;
                    for ch in 0..wide {
                        let v2 = d[(r * 5 + c) * wide + ch].powi(2);
                        match (ring, ch < wide / 2) {
                            (true, true) => lo_shell += v2,
                            (true, false) => hi_shell += v2,
                            (false, true) => lo_core += v2,
                            (false, false) => hi_core += v2,
                        }
                        if ring {
                            shell += v2;
                        }
                    }
                }
            }
            let k5 = shell > layer.t_k5.item();
            let lo = lo_core + if k5 { lo_shell } else { 0.0 };
            let hi = hi_core + if k5 { hi_shell } else { 0.0 };
            let e3 = !layer.skip_allowed || lo > layer.t_e3.item();
            let e6 = hi > layer.t_e6.item();
            let expected = if !e3 {
                LayerChoice::Skip
            } else {
                LayerChoice::MbConv { kernel: if k5 { 5 } else { 3 }, expansion: if e6 { 6 } else { 3 } }
            };
            assert_eq!(*choice, expected);
        }
    }
}

#[test]
fn materialized_network_matches_supernet() {
    let config = mixed_config();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for trial in 0..12u64 {
        let mut net = build_supernet::<f64>(&config).unwrap();
        let choices: Vec<LayerChoice> = config
            .skip_mask()
            .iter()
            .map(|&skip| {
                let cands = LayerChoice::candidates(skip);
                cands[rand::Rng::random_range(&mut rng, 0..cands.len())]
            })
            .collect();
        for (layer, &c) in net.layers.iter_mut().zip(&choices) {
            forced(layer, c);
        }
        assert_eq!(net.decisions(), choices);
        let arch = derive_architecture(&net, "x", 0.0, 0, 1).unwrap();
        let compact = materialize(&arch, &net).unwrap();
        assert_eq!(compact.choices(), choices);
        let x = random_input(&config, 2, trial);
        let diff = supernet_logits(&net, &x).max_abs_diff(&compact_logits(&compact, &x));
        assert!(diff <= 1e-10, "{choices:?}: {diff}");
        let largest = choices.iter().all(|c| *c == LayerChoice::MbConv { kernel: 5, expansion: 6 });
        assert_eq!(compact.param_count() < net.param_count() - 12, !largest);
        assert_eq!(compact.param_count(), config.fixed_param_count(&choices).unwrap());
    }
}

#[test]
fn network_without_blocks_is_stem_and_head() {
    let mut config = MacroArchConfig::toy(0);
    config.blocks.clear();
    let net = build_supernet::<f64>(&config).unwrap();
    let arch = derive_architecture(&net, "x", 0.0, 0, 1).unwrap();
    let compact = materialize(&arch, &net).unwrap();
    let expected = 9 * 2 * 4 + 2 * 4 + 4 * 2 + 2;
    assert_eq!(compact.param_count(), expected);
    let x = random_input(&config, 3, 0);
    assert_eq!(supernet_logits(&net, &x), compact_logits(&compact, &x));
}

#[test]
fn forward_rejects_wrong_input_shape() {
    let config = MacroArchConfig::toy(0);
    let net = build_supernet::<f64>(&config).unwrap();
    let mut g = Graph::new();
    let vars = net.bind(&mut g);
    let x = g.constant(Tensor::zeros(&[1, 8, 8, 3]));
    assert!(net.forward(&mut g, &vars, x, GateMode::Ste).is_err());
}

#[test]
fn artifacts_round_trip_byte_identically() {
    let dir = std::env::temp_dir().join(format!("nas-space-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let config = mixed_config();
    let net = build_supernet::<f64>(&config).unwrap();

    let p = dir.join("config.json");
    config.save(&p).unwrap();
    let first = std::fs::read(&p).unwrap();
    let loaded = MacroArchConfig::load(&p).unwrap();
    assert_eq!(loaded, config);
    loaded.save(&p).unwrap();
    assert_eq!(std::fs::read(&p).unwrap(), first);

    let arch = derive_architecture(&net, "abc", 0.1, 3, 10).unwrap();
    let p = dir.join("arch.json");
    arch.save(&p).unwrap();
    let first = std::fs::read(&p).unwrap();
    let loaded = DerivedArchitecture::load(&p).unwrap();
    assert_eq!(loaded, arch);
    assert_eq!(loaded.provenance.config_hash, loaded.config.hash());
    loaded.save(&p).unwrap();
    assert_eq!(std::fs::read(&p).unwrap(), first);

    let p = dir.join("ckpt.json");
    net.checkpoint().save(&p).unwrap();
    let first = std::fs::read(&p).unwrap();
    let restored = Supernet::<f64>::from_checkpoint(&config, &Checkpoint::load(&p).unwrap()).unwrap();
    assert_eq!(restored, net);
    restored.checkpoint().save(&p).unwrap();
    assert_eq!(std::fs::read(&p).unwrap(), first);
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn architecture_json_layout() {
    let config = MacroArchConfig::toy(0);
    let small = LayerChoice::MbConv { kernel: 3, expansion: 6 };
    let arch =
        DerivedArchitecture::new(config.clone(), vec![small, LayerChoice::Skip, small, small], provenance(&config))
            .unwrap();
    let v: serde_json::Value = serde_json::from_str(&arch.to_json().unwrap()).unwrap();
    assert_eq!(v["version"], 1);
    assert_eq!(v["layers"][0], serde_json::json!({"k": 3, "e": 6}));
    assert_eq!(v["layers"][1], serde_json::json!({"skip": true}));
    let keys: Vec<&str> = v["provenance"].as_object().unwrap().keys().map(String::as_str).collect();
    for k in ["config_hash", "lut_hash", "lambda", "seed", "search_steps"] {
        assert!(keys.contains(&k));
    }
    assert_eq!(arch.decision_string(), "3x3e6,s,3x3e6,3x3e6");
}

#[test]
fn architecture_loading_rejects_inconsistencies() {
    let config = MacroArchConfig::toy(0);
    let big = LayerChoice::MbConv { kernel: 5, expansion: 6 };
    assert!(matches!(
        DerivedArchitecture::new(config.clone(), vec![big; 3], provenance(&config)),
        Err(Error::LayerCountMismatch { expected: 4, found: 3 })
    ));
    assert!(
        DerivedArchitecture::new(config.clone(), vec![LayerChoice::Skip, big, big, big], provenance(&config)).is_err()
    );

    let arch = DerivedArchitecture::new(config.clone(), vec![big; 4], provenance(&config)).unwrap();
    let mut v: serde_json::Value = serde_json::from_str(&arch.to_json().unwrap()).unwrap();
    v["layers"].as_array_mut().unwrap().pop();
    assert!(DerivedArchitecture::from_json(&v.to_string()).is_err());
    let mut v: serde_json::Value = serde_json::from_str(&arch.to_json().unwrap()).unwrap();
    v["layers"][0] = serde_json::json!({"k": 7, "e": 6});
    assert!(DerivedArchitecture::from_json(&v.to_string()).is_err());
    let mut v: serde_json::Value = serde_json::from_str(&arch.to_json().unwrap()).unwrap();
    v["provenance"]["config_hash"] = serde_json::json!("deadbeef");
    assert!(DerivedArchitecture::from_json(&v.to_string()).is_err());
    assert!(DerivedArchitecture::from_json("{not json").is_err());
}

#[test]
fn checkpoint_rejects_wrong_layer_count() {
    let config = MacroArchConfig::toy(0);
    let net = build_supernet::<f64>(&config).unwrap();
    let ckpt = net.checkpoint();
    let mut other = config.clone();
    other.blocks[1].num_layers = 3;
    assert!(matches!(
        Supernet::<f64>::from_checkpoint(&other, &ckpt),
        Err(Error::LayerCountMismatch { expected: 5, found: 4 })
    ));
    let mut seed_changed = config.clone();
    seed_changed.seed = 1;
    assert!(Supernet::<f64>::from_checkpoint(&seed_changed, &ckpt).is_err());
}

#[test]
fn f32_checkpoint_restores_exactly() {
    let config = MacroArchConfig::toy(2);
    let net = build_supernet::<f32>(&config).unwrap();
    let restored = Supernet::<f32>::from_checkpoint(&config, &net.checkpoint()).unwrap();
    assert_eq!(restored, net);
}
