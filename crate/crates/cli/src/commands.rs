use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use nas_core::data::toy_dataset;
use nas_core::latency::{synthesize_table, validate_runtime_model};
use nas_core::oracle::gradcheck_nas_loss;
use nas_core::search::{lambda_sweep, train_derived};
use nas_core::space::{build_supernet, derive_architecture, materialize, Checkpoint, Supernet};
use nas_core::{run_search, DerivedArchitecture, LatencyTable, Scalar, SearchConfig};
use serde::Serialize;

use crate::config::RunConfig;
use crate::manifest::RunManifest;
use crate::{CheckFailed, Precision};

/// Shared state of one invocation: resolved config, output directory and
/// the manifest being filled in.
pub struct Run {
    pub config: RunConfig,
    pub out: PathBuf,
    pub manifest: RunManifest,
}

impl Run {
    pub fn new(command: &str, config: RunConfig, out: &Path, precision: Precision) -> Result<Self> {
        std::fs::create_dir_all(out).with_context(|| format!("creating output directory {}", out.display()))?;
        let manifest = RunManifest::begin(command, &config, precision.name());
        Ok(Self { config, out: out.to_path_buf(), manifest })
    }

    fn write(&mut self, name: &str, file: &str, contents: &str) -> Result<PathBuf> {
        let path = self.out.join(file);
        std::fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))?;
        self.manifest.artifact(name, &path);
        Ok(path)
    }

    fn write_json<S: Serialize>(&mut self, name: &str, file: &str, value: &S) -> Result<PathBuf> {
        self.write(name, file, &(serde_json::to_string_pretty(value)? + "\n"))
    }

    pub fn finish(self) -> Result<()> {
        let path = self.manifest.finish(&self.out)?;
        eprintln!("manifest: {}", path.display());
        Ok(())
    }

    fn lut(&self) -> Result<LatencyTable> {
        let path = self.config.lut_path()?;
        let layers = self.config.search.arch.searchable_layers();
        let (lut, warnings) = LatencyTable::load_for(&path, layers)
            .with_context(|| format!("loading latency table {}", path.display()))?;
        for w in warnings {
            eprintln!("warning: {w}");
        }
        Ok(lut)
    }
}

pub fn init_config(run: &mut Run) -> Result<()> {
    let path = run.write_json("config", "config.json", &run.config.clone())?;
    println!("config: {}", path.display());
    Ok(())
}

pub fn lut_synth(run: &mut Run) -> Result<()> {
    let arch = &run.config.search.arch;
    let lut = synthesize_table(&arch.geometry(), &run.config.device, run.config.search.seed)?;
    let path = run.write("lut", "lut.json", &lut.to_json_pretty()?)?;
    println!("latency table: {} ({} layers, hash {})", path.display(), lut.layers.len(), lut.hash());
    Ok(())
}

pub fn search<T: Scalar>(run: &mut Run) -> Result<()> {
    let lut = run.lut()?;
    let out = run_search::<T>(&run.config.search, &lut)?;
    run.write("metrics", "metrics.csv", &out.metrics.to_csv()?)?;
    run.write("derived", "derived.json", &out.derived.to_json()?)?;
    run.write_json("checkpoint", "checkpoint.json", &out.supernet.checkpoint())?;
    let last = out.metrics.steps.last();
    println!("decisions: {}", out.derived.decision_string());
    println!("predicted runtime: {} ms", lut.predict(&out.derived.layers)?);
    if let Some(m) = last {
        println!("final step {}: ce {} loss {}", m.step, m.ce, m.loss);
    }
    println!("wall clock: {:.2} s", out.metrics.wall_clock_s);
    Ok(())
}

fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

pub fn derive(run: &mut Run, checkpoint: &Path) -> Result<()> {
    let lut = run.lut()?;
    let search: &SearchConfig = &run.config.search;
    let net = Supernet::<f64>::from_checkpoint(&search.arch, &read_checkpoint(checkpoint)?)?;
    let derived = derive_architecture(&net, &lut.hash(), search.lambda, search.seed, search.steps)?;
    run.write("derived", "derived.json", &derived.to_json()?)?;
    println!("decisions: {}", derived.decision_string());
    println!("predicted runtime: {} ms", lut.predict(&derived.layers)?);
    Ok(())
}

pub fn train<T: Scalar>(run: &mut Run, derived: &Path, checkpoint: Option<&Path>) -> Result<()> {
    let derived = DerivedArchitecture::load(derived)
        .with_context(|| format!("loading derived architecture {}", derived.display()))?;
    let net = match checkpoint {
        Some(path) => Supernet::<T>::from_checkpoint(&derived.config, &read_checkpoint(path)?)?,
        None => build_supernet::<T>(&derived.config)?,
    };
    let mut compact = materialize(&derived, &net)?;
    let search = &run.config.search;
    let (train, test) = toy_dataset::<T>(&search.dataset, search.data_seed)?;
    let report = train_derived(&mut compact, &train, &test, &search.train, search.seed)?;
    run.write("train_metrics", "train.csv", &report.to_csv()?)?;
    run.write_json("train_report", "train_report.json", &report)?;
    println!("parameters: {}", compact.param_count());
    println!("initial accuracy: {}", report.initial_accuracy);
    println!("accuracy: {}", report.accuracy);
    Ok(())
}

pub fn validate_latency(run: &mut Run) -> Result<()> {
    let lut = run.lut()?;
    let v = run.config.validation.clone();
    let mask = run.config.search.arch.skip_mask();
    let report = validate_runtime_model(&lut, v.samples, v.noise_sigma_ms, run.config.search.seed, Some(&mask))?;
    run.write_json("validation", "validation.json", &report)?;
    println!("{report}");
    if let Some(limit) = v.max_rmse_ms {
        if report.rmse_ms > limit {
            return Err(CheckFailed(format!("RMSE {} ms exceeds max_rmse_ms {limit}", report.rmse_ms)).into());
        }
    }
    Ok(())
}

pub fn gradcheck(run: &mut Run) -> Result<()> {
    let lut = run.lut()?;
    let search = &run.config.search;
    let gc = run.config.gradcheck.clone();
    let net = build_supernet::<f64>(&search.arch)?;
    let (train, _) = toy_dataset::<f64>(&search.dataset, search.data_seed)?;
    let n = gc.batch_size.clamp(1, train.len());
    let idx: Vec<usize> = (0..n).collect();
    let (images, labels) = train.gather(&idx);
    let lambda = gc.lambda.unwrap_or(search.lambda);
    let report = gradcheck_nas_loss(&net, &images, &labels, &lut, lambda, &gc.settings)?;
    run.write("gradcheck", "gradcheck.json", &report.to_json()?)?;
    println!("{report}");
    if !report.passed {
        return Err(CheckFailed(format!(
            "gradient check failed: max relative error {:e} > {:e}",
            report.max_rel_error, report.tolerance
        ))
        .into());
    }
    Ok(())
}

pub fn sweep_lambda<T: Scalar>(run: &mut Run, seed_override: Option<u64>) -> Result<()> {
    let lut = run.lut()?;
    let sweep = run.config.sweep.clone();
    let seeds = seed_override.map_or(sweep.seeds, |s| vec![s]);
    let report = lambda_sweep::<T>(&run.config.search, &lut, &sweep.lambdas, &seeds)?;
    run.write("sweep", "sweep.csv", &report.to_csv()?)?;
    run.write_json("sweep_report", "sweep.json", &report)?;
    for s in &report.summary {
        println!(
            "lambda {}: median runtime {} ms, median accuracy {}",
            s.lambda, s.median_runtime_ms, s.median_accuracy
        );
    }
    println!("recommended lambda: {}", report.recommended_lambda);
    Ok(())
}
