//! Source pretraining, single adaptation runs with checkpoint evaluation,
//! and multi-method experiments.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::adversarial::{train_step_d, train_step_g, GenLoss, StepOptions};
use crate::checkpoint::Checkpoint;
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::evaluation::{
    filter_mode_attribution, frechet_gaussian, incompatible_mass, intra_diversity, kid_mmd,
    DistanceProxy, GaussianFit, ModeLabel, ModeSpec,
};
use crate::importance::{ImportanceAccumulator, ImportanceReport};
use crate::models::{
    build_filter_layout, sample_latent, Arch, FilterLayout, Gan, GradSource, NetworkId, Track,
};
use crate::optim::{CosineSchedule, OptimizerState, DEFAULT_LR};
use crate::rng::{stream, Stream};
use crate::scheduler::{adapt, AdaptObserver, AdaptOutcome, Assignment, MemoryBank, RickConfig};
use crate::tensor::Tensor;

use super::config::{EvalConfig, RunConfig};
use super::data::{SyntheticData, Testbed};

pub const FIXED_LATENTS: usize = 16;
pub const METRICS_HEADER: &str =
    "iteration,fd_target,kid_e3,intra_div,incompat_mass,pruned_frac_g,pruned_frac_d,frozen_frac_g,frozen_frac_d";

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainConfig {
    pub iters: usize,
    pub batch: usize,
    pub lr: f64,
    pub latent_dim: usize,
    pub gen_loss: GenLoss,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            iters: 4000,
            batch: 64,
            lr: DEFAULT_LR,
            latent_dim: crate::models::DEFAULT_LATENT_DIM,
            gen_loss: GenLoss::NonSaturating,
        }
    }
}

/// Plain alternating GAN training on the source set with every filter
/// trainable.
pub fn pretrain_source(data: &Dataset, arch: Arch, cfg: &PretrainConfig, seed: u64) -> Result<Gan> {
    if data.dim != arch.data_dim() {
        return Err(Error::Dimension(format!(
            "{} data is {}-dimensional, got {}",
            arch,
            arch.data_dim(),
            data.dim
        )));
    }
    let mut gan = Gan::new(arch, cfg.latent_dim, &mut stream(seed, Stream::Init));
    let mut rng = stream(seed, Stream::Train);
    let sched = CosineSchedule::new(cfg.lr, cfg.iters);
    let mut opt_g = OptimizerState::new(&gan.generator.param_tensors(), sched);
    let mut opt_d = OptimizerState::new(&gan.discriminator.param_tensors(), sched);
    let mask_g = vec![true; gan.generator.num_filters()];
    let mask_d = vec![true; gan.discriminator.num_filters()];
    for it in 0..cfg.iters {
        let opts = StepOptions {
            gen_loss: cfg.gen_loss,
            penalty: None,
            iteration: it + 1,
        };
        let real = data.sample_batch(cfg.batch, &mut rng)?;
        let z = sample_latent(cfg.batch, cfg.latent_dim, &mut rng);
        train_step_d(&mut gan, &real, &z, &mut opt_d, it, &mask_d, opts)?;
        let z = sample_latent(cfg.batch, cfg.latent_dim, &mut rng);
        train_step_g(&mut gan, &z, &mut opt_g, it, &mask_g, opts)?;
    }
    Ok(gan)
}

/// Everything needed to score a generator against the target domain.
#[derive(Debug, Clone)]
pub struct EvalContext {
    pub eval: EvalConfig,
    pub reference_fit: GaussianFit,
    /// Evenly strided subset of the reference set used for KID.
    pub kid_reference: Tensor,
    pub shots: Tensor,
    pub modes: ModeSpec,
    pub distance: DistanceProxy,
}

impl EvalContext {
    pub fn new(data: &SyntheticData, eval: EvalConfig) -> Result<Self> {
        let reference = data.reference.to_tensor()?;
        let n = data.reference.len();
        let k = eval.subset.clamp(2, n);
        let idx: Vec<usize> = (0..k).map(|i| i * n / k).collect();
        let distance = match data.source_spec.testbed {
            Testbed::Point => DistanceProxy::Euclidean,
            Testbed::Icon => DistanceProxy::projected(data.source_spec.testbed.dim(), 0),
        };
        Ok(EvalContext {
            eval,
            reference_fit: GaussianFit::fit(&reference)?,
            kid_reference: data.reference.select(&idx).to_tensor()?,
            shots: data.target.to_tensor()?,
            modes: data.modes.clone(),
            distance,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub fd_target: f64,
    pub kid_e3: f64,
    pub intra_div: f64,
    pub incompat_mass: f64,
}

/// Draws evaluation latents from the run seed's evaluation stream, so every
/// checkpoint of a run is scored on the same latents.
pub fn evaluate_gan(gan: &Gan, ctx: &EvalContext, seed: u64) -> Result<Metrics> {
    let mut rng = stream(seed, Stream::Eval);
    let n = ctx.eval.fd_samples.max(2);
    let z = sample_latent(n, gan.latent_dim, &mut rng);
    let samples = gan.generate(&z)?;
    let fd_target = frechet_gaussian(&GaussianFit::fit(&samples)?, &ctx.reference_fit)?;
    let incompat_mass = incompatible_mass(&samples, &ctx.modes)?;
    let m = ctx.eval.subset.clamp(2, n);
    let d = samples.shape()[1];
    let subset = Tensor::new(vec![m, d], samples.data()[..m * d].to_vec())?;
    let kid_e3 = kid_mmd(&subset, &ctx.kid_reference)?;
    let intra_div = intra_diversity(&subset, &ctx.shots, &ctx.distance)?;
    Ok(Metrics {
        fd_target,
        kid_e3,
        intra_div,
        incompat_mass,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub iteration: usize,
    pub metrics: Metrics,
    pub pruned_frac_g: f64,
    pub pruned_frac_d: f64,
    pub frozen_frac_g: f64,
    pub frozen_frac_d: f64,
}

impl MetricRow {
    pub fn to_csv(&self) -> String {
        let m = &self.metrics;
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.iteration,
            m.fd_target,
            m.kid_e3,
            m.intra_div,
            m.incompat_mass,
            self.pruned_frac_g,
            self.pruned_frac_d,
            self.frozen_frac_g,
            self.frozen_frac_d
        )
    }

    pub fn parse_csv(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.trim().split(',').collect();
        if f.len() != 9 {
            return Err(Error::Format(format!(
                "metrics row has {} fields: `{line}`",
                f.len()
            )));
        }
        let num = |i: usize| -> Result<f64> {
            f[i].parse()
                .map_err(|_| Error::Format(format!("bad metric value `{}`", f[i])))
        };
        Ok(MetricRow {
            iteration: f[0]
                .parse()
                .map_err(|_| Error::Format(format!("bad iteration `{}`", f[0])))?,
            metrics: Metrics {
                fd_target: num(1)?,
                kid_e3: num(2)?,
                intra_div: num(3)?,
                incompat_mass: num(4)?,
            },
            pruned_frac_g: num(5)?,
            pruned_frac_d: num(6)?,
            frozen_frac_g: num(7)?,
            frozen_frac_d: num(8)?,
        })
    }

    pub fn value(&self, metric: &str) -> Option<f64> {
        let m = &self.metrics;
        Some(match metric {
            "fd_target" => m.fd_target,
            "kid_e3" => m.kid_e3,
            "intra_div" => m.intra_div,
            "incompat_mass" => m.incompat_mass,
            "pruned_frac_g" => self.pruned_frac_g,
            "pruned_frac_d" => self.pruned_frac_d,
            "frozen_frac_g" => self.frozen_frac_g,
            "frozen_frac_d" => self.frozen_frac_d,
            _ => return None,
        })
    }
}

pub const METRIC_NAMES: [&str; 8] = [
    "fd_target",
    "kid_e3",
    "intra_div",
    "incompat_mass",
    "pruned_frac_g",
    "pruned_frac_d",
    "frozen_frac_g",
    "frozen_frac_d",
];

pub fn metrics_csv(rows: &[MetricRow]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&r.to_csv());
        s.push('\n');
    }
    s
}

pub fn parse_metrics_csv(text: &str) -> Result<Vec<MetricRow>> {
    let mut lines = text.lines();
    if lines.next() != Some(METRICS_HEADER) {
        return Err(Error::Format("unexpected metrics header".into()));
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .map(MetricRow::parse_csv)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BankSummary {
    pub pruned_g: usize,
    pub pruned_d: usize,
    pub preserve_g: usize,
    pub preserve_d: usize,
    pub filters_g: usize,
    pub filters_d: usize,
    pub states: String,
}

impl BankSummary {
    pub fn new(bank: &MemoryBank, layout: &FilterLayout) -> Self {
        let c = |n, s| bank.count(layout, n, s);
        BankSummary {
            pruned_g: c(NetworkId::Generator, Assignment::Pruned),
            pruned_d: c(NetworkId::Discriminator, Assignment::Pruned),
            preserve_g: c(NetworkId::Generator, Assignment::Preserve),
            preserve_d: c(NetworkId::Discriminator, Assignment::Preserve),
            filters_g: layout.count(NetworkId::Generator),
            filters_d: layout.count(NetworkId::Discriminator),
            states: bank.encode(),
        }
    }
}

/// Final per-run summary written as `summary.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub method: String,
    pub seed: u64,
    pub status: String,
    pub error: Option<String>,
    pub final_row: Option<MetricRow>,
    pub bank: Option<BankSummary>,
    pub wall_clock_secs: f64,
}

#[derive(Debug, Clone)]
pub struct RunReport {
    pub method: String,
    pub config_echo: String,
    pub seed: u64,
    pub rows: Vec<MetricRow>,
    pub bank: BankSummary,
    pub wall_clock_secs: f64,
    pub outcome: AdaptOutcome,
}

/// Shared inputs for adaptation runs.
#[derive(Debug, Clone)]
pub struct Setup {
    pub source: Gan,
    pub data: SyntheticData,
    pub ctx: EvalContext,
    /// Latents fixed once per harness and shared by every method.
    pub fixed_latents: Tensor,
}

impl Setup {
    pub fn new(
        source: Gan,
        data: SyntheticData,
        eval: EvalConfig,
        latent_seed: u64,
    ) -> Result<Self> {
        if source.arch != data.source_spec.testbed.arch() {
            return Err(Error::Config(format!(
                "{} checkpoint does not match the {} testbed",
                source.arch, data.source_spec.testbed
            )));
        }
        let ctx = EvalContext::new(&data, eval)?;
        let fixed_latents = sample_latent(
            FIXED_LATENTS,
            source.latent_dim,
            &mut stream(latent_seed, Stream::FixedLatents),
        );
        Ok(Setup {
            source,
            data,
            ctx,
            fixed_latents,
        })
    }
}

fn write_file(path: &Path, contents: &[u8]) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn samples_csv(t: &Tensor) -> String {
    let d = t.shape()[1];
    let mut s: String = (0..d)
        .map(|i| format!("x{i}"))
        .collect::<Vec<_>>()
        .join(",");
    s.push('\n');
    for r in t.data().chunks_exact(d) {
        s.push_str(
            &r.iter()
                .map(|v| v.to_string())
                .collect::<Vec<_>>()
                .join(","),
        );
        s.push('\n');
    }
    s
}

struct RunObserver<'a> {
    setup: &'a Setup,
    layout: FilterLayout,
    seed: u64,
    rows: Vec<MetricRow>,
    out: Option<PathBuf>,
}

impl AdaptObserver for RunObserver<'_> {
    fn on_checkpoint(&mut self, iteration: usize, gan: &Gan, bank: &MemoryBank) -> Result<()> {
        let l = &self.layout;
        let metrics = evaluate_gan(gan, &self.setup.ctx, self.seed)?;
        self.rows.push(MetricRow {
            iteration,
            metrics,
            pruned_frac_g: bank.fraction(l, NetworkId::Generator, Assignment::Pruned),
            pruned_frac_d: bank.fraction(l, NetworkId::Discriminator, Assignment::Pruned),
            frozen_frac_g: bank.fraction(l, NetworkId::Generator, Assignment::Preserve),
            frozen_frac_d: bank.fraction(l, NetworkId::Discriminator, Assignment::Preserve),
        });
        if let Some(dir) = &self.out {
            Checkpoint::new(gan.clone(), Some(bank.clone()), iteration, self.seed)
                .save(&dir.join(format!("ckpt_{iteration:05}.bin")))?;
            let dump = gan.generate(&self.setup.fixed_latents)?;
            write_file(
                &dir.join(format!("fixed_{iteration:05}.csv")),
                samples_csv(&dump).as_bytes(),
            )?;
        }
        Ok(())
    }

    fn on_round(
        &mut self,
        _iteration: usize,
        report: &ImportanceReport,
        bank: &MemoryBank,
    ) -> Result<()> {
        if let Some(dir) = &self.out {
            let path = dir.join(format!("importance_round_{:02}.csv", report.round));
            let mut buf = Vec::new();
            writeln!(buf, "{}", ImportanceReport::CSV_HEADER).map_err(|e| Error::io(&path, e))?;
            report
                .write_csv_rows(&mut buf, |id| bank.get(id).label().to_string())
                .map_err(|e| Error::io(&path, e))?;
            write_file(&path, &buf)?;
        }
        Ok(())
    }
}

/// One adaptation run. With `out`, writes the config echo, checkpoints,
/// fixed-latent dumps, per-round importance CSVs, the metrics CSV and a
/// JSON summary into that directory.
pub fn run_adaptation(
    setup: &Setup,
    method: &str,
    cfg: &RunConfig,
    out: Option<&Path>,
) -> Result<RunReport> {
    let start = Instant::now();
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_file(&dir.join("config.txt"), cfg.echo().render().as_bytes())?;
    }
    let mut obs = RunObserver {
        setup,
        layout: build_filter_layout(&setup.source),
        seed: cfg.seed,
        rows: Vec::new(),
        out: out.map(Path::to_path_buf),
    };
    let outcome = adapt(
        &setup.source,
        &setup.data.target,
        &cfg.rick,
        cfg.seed,
        &mut obs,
    )?;
    let rows = obs.rows;
    let bank = BankSummary::new(&outcome.bank, &outcome.layout);
    let wall_clock_secs = start.elapsed().as_secs_f64();
    if let Some(dir) = out {
        write_file(&dir.join("metrics.csv"), metrics_csv(&rows).as_bytes())?;
        let summary = RunSummary {
            method: method.to_string(),
            seed: cfg.seed,
            status: "ok".into(),
            error: None,
            final_row: rows.last().copied(),
            bank: Some(bank.clone()),
            wall_clock_secs,
        };
        write_file(
            &dir.join("summary.json"),
            serde_json::to_string_pretty(&summary)?.as_bytes(),
        )?;
    }
    Ok(RunReport {
        method: method.to_string(),
        config_echo: cfg.echo().render(),
        seed: cfg.seed,
        rows,
        bank,
        wall_clock_secs,
        outcome,
    })
}

#[derive(Debug)]
pub struct ExperimentEntry {
    pub method: String,
    pub seed: u64,
    pub dir: PathBuf,
    pub result: std::result::Result<RunReport, String>,
}

pub fn run_dir_name(method: &str, seed: u64) -> String {
    format!("{method}_s{seed}")
}

/// Runs every (method, seed) pair. A failing run is recorded in its
/// `summary.json` and the rest continue.
pub fn run_experiment(
    setup: &Setup,
    methods: &[String],
    base: &RunConfig,
    seeds: &[u64],
    root: &Path,
) -> Result<Vec<ExperimentEntry>> {
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let mut entries = Vec::new();
    for method in methods {
        for &seed in seeds {
            let dir = root.join(run_dir_name(method, seed));
            let mut cfg = base.clone();
            cfg.seed = seed;
            let result = cfg
                .apply(&format!("method={method}"))
                .and_then(|_| run_adaptation(setup, method, &cfg, Some(&dir)));
            let result = match result {
                Ok(r) => Ok(r),
                Err(e) => {
                    fs::create_dir_all(&dir).map_err(|err| Error::io(&dir, err))?;
                    let summary = RunSummary {
                        method: method.clone(),
                        seed,
                        status: "failed".into(),
                        error: Some(e.to_string()),
                        final_row: None,
                        bank: None,
                        wall_clock_secs: 0.0,
                    };
                    write_file(
                        &dir.join("summary.json"),
                        serde_json::to_string_pretty(&summary)?.as_bytes(),
                    )?;
                    Err(e.to_string())
                }
            };
            entries.push(ExperimentEntry {
                method: method.clone(),
                seed,
                dir,
                result,
            });
        }
    }
    Ok(entries)
}

/// Fisher importance of every filter at the current weights, from `steps`
/// gradient evaluations on the target set without any update.
pub fn fisher_snapshot(
    gan: &Gan,
    target: &Dataset,
    steps: usize,
    batch: usize,
    seed: u64,
) -> Result<ImportanceReport> {
    let mut work = gan.clone_for_adaptation();
    let layout = build_filter_layout(&work);
    let mut acc_g = ImportanceAccumulator::new(&layout, NetworkId::Generator, GradSource::Weights);
    let mut acc_d =
        ImportanceAccumulator::new(&layout, NetworkId::Discriminator, GradSource::Weights);
    let active = vec![true; layout.len()];
    let mut rng = stream(seed, Stream::Probe);
    for _ in 0..steps {
        let real = target.sample_batch(batch, &mut rng)?;
        let z = sample_latent(batch, work.latent_dim, &mut rng);
        crate::adversarial::compute_d_grads(&mut work, &real, &z, Track::Weights)?;
        acc_d.accumulate(&work.discriminator, &active)?;
        let z = sample_latent(batch, work.latent_dim, &mut rng);
        crate::adversarial::compute_g_grads(&mut work, &z, GenLoss::NonSaturating, Track::Weights)?;
        acc_g.accumulate(&work.generator, &active)?;
    }
    Ok(acc_g
        .finalize_fisher(0, &active)?
        .merge(acc_d.finalize_fisher(0, &active)?))
}

/// Average ranks, ties sharing the mean of their positions.
fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation; `None` when either side is constant.
pub fn spearman(a: &[f64], b: &[f64]) -> Option<f64> {
    let (ra, rb) = (ranks(a), ranks(b));
    let n = ra.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    (va > 0.0 && vb > 0.0).then(|| cov / (va * vb).sqrt())
}

#[derive(Debug, Clone)]
pub struct AttributionReport {
    pub csv: String,
    /// Rank correlation between Fisher quantile and the absolute shift in
    /// source-only mass when the filter is ablated.
    pub correlation: Option<f64>,
}

pub fn attribution_report(
    gan: &Gan,
    bank: Option<&MemoryBank>,
    modes: &ModeSpec,
    latents: &Tensor,
    fisher: Option<&ImportanceReport>,
) -> Result<AttributionReport> {
    let layout = build_filter_layout(gan);
    let fresh = MemoryBank::new(layout.len());
    let bank = bank.unwrap_or(&fresh);
    let attr = filter_mode_attribution(gan, &layout, bank, modes, latents)?;
    let mut csv = String::from("filter_id,layer,state");
    for i in 0..modes.len() {
        csv.push_str(&format!(",delta_mode{i}_{}", modes.labels()[i].as_str()));
    }
    csv.push_str(",fisher_quantile\n");
    let mut qs = Vec::new();
    let mut shifts = Vec::new();
    for a in &attr {
        let q = fisher
            .and_then(|f| f.score(a.filter_id))
            .map(|s| s.quantile);
        csv.push_str(&format!("{},{},{}", a.filter_id, a.layer, a.state.label()));
        for d in &a.deltas {
            csv.push_str(&format!(",{d}"));
        }
        csv.push_str(&format!(
            ",{}\n",
            q.map(|q| q.to_string()).unwrap_or_default()
        ));
        if let Some(q) = q {
            let shift: f64 = a
                .deltas
                .iter()
                .zip(modes.labels())
                .filter(|(_, &l)| l == ModeLabel::SourceOnly)
                .map(|(d, _)| d)
                .sum();
            qs.push(q);
            shifts.push(shift.abs());
        }
    }
    let correlation = if qs.len() >= 2 {
        spearman(&qs, &shifts)
    } else {
        None
    };
    Ok(AttributionReport { csv, correlation })
}

/// Convenience for callers holding a bare [`RickConfig`].
pub fn run_config(rick: RickConfig, seed: u64) -> RunConfig {
    RunConfig {
        rick,
        eval: EvalConfig::default(),
        seed,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn metric_row_roundtrip() {
        let r = MetricRow {
            iteration: 250,
            metrics: Metrics {
                fd_target: 0.1 + 0.2,
                kid_e3: -1.5e-3,
                intra_div: 0.75,
                incompat_mass: 1.0 / 3.0,
            },
            pruned_frac_g: 0.0,
            pruned_frac_d: 0.03,
            frozen_frac_g: 0.3,
            frozen_frac_d: 0.25,
        };
        let text = metrics_csv(&[r]);
        assert_eq!(parse_metrics_csv(&text).unwrap(), vec![r]);
        assert!(parse_metrics_csv("iteration\n").is_err());
    }

    #[test]
    fn spearman_basics() {
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]), Some(1.0));
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]), Some(-1.0));
        assert_eq!(spearman(&[1.0, 1.0], &[1.0, 2.0]), None);
        assert_eq!(ranks(&[5.0, 1.0, 5.0]), vec![1.5, 0.0, 1.5]);
    }
}
