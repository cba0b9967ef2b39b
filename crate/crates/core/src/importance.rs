//! Per-filter importance: first-order Fisher information (mean squared
//! gradient over the filter span), class salience (mean absolute gradient),
//! modulation probing, and the per-parameter source Fisher used by EWC.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use crate::adversarial::{compute_d_grads, compute_g_grads, g_loss, GenLoss};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::models::{sample_latent, FilterLayout, Gan, GradSource, Net, NetworkId, Track};
use crate::optim::{adam_step, CosineSchedule, OptimizerState};
use crate::rng::Rng;
use crate::tensor::{Graph, Tensor};

pub const DEFAULT_PROBE_ITERS: usize = 500;
/// Probing importance is accumulated over this many final probing steps.
pub const PROBE_WINDOW: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Estimator {
    #[default]
    Fisher,
    Salience,
    Modulation,
}

impl Estimator {
    pub fn as_str(self) -> &'static str {
        match self {
            Estimator::Fisher => "fisher",
            Estimator::Salience => "salience",
            Estimator::Modulation => "modulation",
        }
    }
}

impl fmt::Display for Estimator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Estimator {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fisher" => Ok(Estimator::Fisher),
            "salience" => Ok(Estimator::Salience),
            "modulation" => Ok(Estimator::Modulation),
            _ => Err(Error::Config(format!("unknown estimator `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterScore {
    pub filter_id: usize,
    pub network: NetworkId,
    pub layer: usize,
    pub importance: f64,
    pub quantile: f64,
}

/// Importance of every active filter at one estimation round.
#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceReport {
    pub round: usize,
    pub estimator: Estimator,
    pub scores: Vec<FilterScore>,
}

impl ImportanceReport {
    pub fn merge(mut self, other: ImportanceReport) -> ImportanceReport {
        self.scores.extend(other.scores);
        self.scores.sort_by_key(|s| s.filter_id);
        self
    }

    pub fn score(&self, filter_id: usize) -> Option<&FilterScore> {
        self.scores
            .binary_search_by_key(&filter_id, |s| s.filter_id)
            .ok()
            .map(|i| &self.scores[i])
    }

    pub const CSV_HEADER: &'static str =
        "round,filter_id,network,layer,importance,quantile,assignment";

    /// Writes one CSV row per score. `assignment` maps a filter id to its
    /// decided assignment label.
    pub fn write_csv_rows<W: Write>(
        &self,
        out: &mut W,
        assignment: impl Fn(usize) -> String,
    ) -> std::io::Result<()> {
        for s in &self.scores {
            writeln!(
                out,
                "{},{},{},{},{:e},{},{}",
                self.round,
                s.filter_id,
                s.network.as_str(),
                s.layer,
                s.importance,
                s.quantile,
                assignment(s.filter_id)
            )?;
        }
        Ok(())
    }
}

/// `q_i = #{j : v_j < v_i} / n`.
pub fn quantile_ranks(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    values
        .iter()
        .map(|v| sorted.partition_point(|s| s < v) as f64 / n as f64)
        .collect()
}

/// Running per-filter gradient statistics for one network.
#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceAccumulator {
    network: NetworkId,
    first_id: usize,
    layers: Vec<usize>,
    source: GradSource,
    sum_sq: Vec<f64>,
    sum_abs: Vec<f64>,
    steps: usize,
}

impl ImportanceAccumulator {
    pub fn new(layout: &FilterLayout, network: NetworkId, source: GradSource) -> Self {
        let range = layout.range(network);
        let n = range.len();
        ImportanceAccumulator {
            network,
            first_id: range.start,
            layers: layout.filters[range].iter().map(|f| f.layer).collect(),
            source,
            sum_sq: vec![0.0; n],
            sum_abs: vec![0.0; n],
            steps: 0,
        }
    }

    pub fn network(&self) -> NetworkId {
        self.network
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn sum_sq(&self) -> &[f64] {
        &self.sum_sq
    }

    pub fn sum_abs(&self) -> &[f64] {
        &self.sum_abs
    }

    pub fn reset(&mut self) {
        self.sum_sq.iter_mut().for_each(|v| *v = 0.0);
        self.sum_abs.iter_mut().for_each(|v| *v = 0.0);
        self.steps = 0;
    }

    /// Adds one step of per-filter statistics from the gradients currently
    /// stored in `net`. `active` is indexed by global filter id.
    pub fn accumulate(&mut self, net: &Net, active: &[bool]) -> Result<()> {
        if net.role != self.network || net.num_filters() != self.sum_sq.len() {
            return Err(Error::Contract("accumulator does not match network".into()));
        }
        for f in 0..self.sum_sq.len() {
            if !active[self.first_id + f] {
                continue;
            }
            let (sq, ab) = net.filter_grad_stats(f, self.source)?;
            self.sum_sq[f] += sq;
            self.sum_abs[f] += ab;
        }
        self.steps += 1;
        Ok(())
    }

    /// Adds precomputed per-filter (mean grad², mean |grad|) values.
    pub fn accumulate_stats(&mut self, stats: &[(f64, f64)]) -> Result<()> {
        if stats.len() != self.sum_sq.len() {
            return Err(Error::Dimension("per-filter statistics length".into()));
        }
        for (f, (sq, ab)) in stats.iter().enumerate() {
            if *sq < 0.0 || *ab < 0.0 {
                return Err(Error::Contract("negative gradient statistic".into()));
            }
            self.sum_sq[f] += sq;
            self.sum_abs[f] += ab;
        }
        self.steps += 1;
        Ok(())
    }

    fn finalize(
        &mut self,
        round: usize,
        active: &[bool],
        estimator: Estimator,
    ) -> Result<ImportanceReport> {
        if self.steps == 0 {
            return Err(Error::Contract(
                "finalize called with no accumulated steps".into(),
            ));
        }
        let sums = match estimator {
            Estimator::Salience => &self.sum_abs,
            _ => &self.sum_sq,
        };
        let ids: Vec<usize> = (0..sums.len())
            .filter(|f| active[self.first_id + f])
            .collect();
        let values: Vec<f64> = ids.iter().map(|&f| sums[f] / self.steps as f64).collect();
        let q = quantile_ranks(&values);
        let scores = ids
            .iter()
            .zip(values.iter().zip(q))
            .map(|(&f, (&importance, quantile))| FilterScore {
                filter_id: self.first_id + f,
                network: self.network,
                layer: self.layers[f],
                importance,
                quantile,
            })
            .collect();
        self.reset();
        Ok(ImportanceReport {
            round,
            estimator,
            scores,
        })
    }

    /// `F(W)` = mean over steps of the per-step mean squared gradient.
    pub fn finalize_fisher(&mut self, round: usize, active: &[bool]) -> Result<ImportanceReport> {
        self.finalize(round, active, Estimator::Fisher)
    }

    /// Same as [`Self::finalize_fisher`] with mean absolute gradient.
    pub fn finalize_salience(&mut self, round: usize, active: &[bool]) -> Result<ImportanceReport> {
        self.finalize(round, active, Estimator::Salience)
    }

    pub fn finalize_with(
        &mut self,
        round: usize,
        active: &[bool],
        estimator: Estimator,
    ) -> Result<ImportanceReport> {
        match estimator {
            Estimator::Salience => self.finalize_salience(round, active),
            _ => self.finalize_fisher(round, active),
        }
    }
}

/// Per-parameter Fisher for both networks (filter-major flat order).
#[derive(Debug, Clone, PartialEq)]
pub struct SourceFisher {
    pub generator: Vec<f64>,
    pub discriminator: Vec<f64>,
}

/// Mean squared gradient of the generator loss, per parameter of both
/// networks, over the given latent batches.
pub fn ewc_fisher_from_latents(
    gan: &Gan,
    batches: &[Tensor],
    kind: GenLoss,
) -> Result<SourceFisher> {
    let mut fg = vec![0.0; gan.generator.num_params()];
    let mut fd = vec![0.0; gan.discriminator.num_params()];
    let mut work = gan.clone_for_adaptation();
    for z in batches {
        work.generator.zero_grads();
        work.discriminator.zero_grads();
        let mut g = Graph::new();
        let zv = g.constant(z);
        let (fake, bg) = work.generator.forward(&mut g, zv, Track::Weights)?;
        let (df, bd) = work.discriminator.forward(&mut g, fake, Track::Weights)?;
        let loss = g_loss(&mut g, df, kind);
        let grads = g.backward(loss)?;
        work.generator.store_grads(&grads, &bg)?;
        work.discriminator.store_grads(&grads, &bd)?;
        for (acc, gr) in fg.iter_mut().zip(work.generator.flat_grads()?) {
            *acc += gr * gr;
        }
        for (acc, gr) in fd.iter_mut().zip(work.discriminator.flat_grads()?) {
            *acc += gr * gr;
        }
    }
    let n = batches.len().max(1) as f64;
    fg.iter_mut().chain(fd.iter_mut()).for_each(|v| *v /= n);
    Ok(SourceFisher {
        generator: fg,
        discriminator: fd,
    })
}

pub fn ewc_source_fisher(
    gan: &Gan,
    n_batches: usize,
    batch: usize,
    kind: GenLoss,
    rng: &mut Rng,
) -> Result<SourceFisher> {
    let batches: Vec<Tensor> = (0..n_batches)
        .map(|_| sample_latent(batch, gan.latent_dim, rng))
        .collect();
    ewc_fisher_from_latents(gan, &batches, kind)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeConfig {
    pub iters: usize,
    pub batch: usize,
    pub lr: f64,
    pub gen_loss: GenLoss,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            iters: DEFAULT_PROBE_ITERS,
            batch: crate::adversarial::DEFAULT_BATCH,
            lr: crate::optim::DEFAULT_LR,
            gen_loss: GenLoss::NonSaturating,
        }
    }
}

/// Scales every filter by its `(1+m)` and resets modulation to zero.
fn fold_modulation(net: &mut Net) {
    for l in &mut net.layers {
        if let Some(m) = l.modulation.take() {
            let fan = l.fan();
            for (o, &mv) in m.data().iter().enumerate() {
                let s = 1.0 + mv;
                l.weight.data_mut()[o * fan..(o + 1) * fan]
                    .iter_mut()
                    .for_each(|w| *w *= s);
                l.bias.data_mut()[o] *= s;
            }
        }
    }
}

/// Trains only per-filter modulation scalars on the target data, with base
/// weights frozen, and reports the Fisher information of the modulation over
/// the final [`PROBE_WINDOW`] steps. Works on a copy; `gan` is untouched.
pub fn probe_modulation(
    gan: &Gan,
    target: &Dataset,
    layout: &FilterLayout,
    active: &[bool],
    round: usize,
    cfg: ProbeConfig,
    rng: &mut Rng,
) -> Result<ImportanceReport> {
    if cfg.iters == 0 {
        return Err(Error::Contract(
            "probing needs at least one iteration".into(),
        ));
    }
    let mut work = gan.clone_for_adaptation();
    for id in [NetworkId::Generator, NetworkId::Discriminator] {
        let net = work.net_mut(id);
        fold_modulation(net);
        net.enable_modulation();
    }
    let sched = CosineSchedule::new(cfg.lr, cfg.iters);
    let mut opt_g = OptimizerState::new(&work.generator.modulation_tensors()?, sched);
    let mut opt_d = OptimizerState::new(&work.discriminator.modulation_tensors()?, sched);
    let mask_g = active[layout.range(NetworkId::Generator)].to_vec();
    let mask_d = active[layout.range(NetworkId::Discriminator)].to_vec();
    let map_g = work.generator.modulation_filter_map();
    let map_d = work.discriminator.modulation_filter_map();
    let mut acc_g =
        ImportanceAccumulator::new(layout, NetworkId::Generator, GradSource::Modulation);
    let mut acc_d =
        ImportanceAccumulator::new(layout, NetworkId::Discriminator, GradSource::Modulation);
    let window_start = cfg.iters.saturating_sub(PROBE_WINDOW);

    for it in 0..cfg.iters {
        let real = target.sample_batch(cfg.batch, rng)?;
        let z = sample_latent(cfg.batch, work.latent_dim, rng);
        let ld = compute_d_grads(&mut work, &real, &z, Track::Modulation)?;
        if !ld.is_finite() {
            return Err(Error::NonFinite {
                what: "probe d_loss".into(),
                iteration: it,
            });
        }
        if it >= window_start {
            acc_d.accumulate(&work.discriminator, active)?;
        }
        adam_step(
            &mut work.discriminator.modulation_tensors_mut()?,
            &mut opt_d,
            it,
            &map_d,
            &mask_d,
        )?;

        let z = sample_latent(cfg.batch, work.latent_dim, rng);
        let lg = compute_g_grads(&mut work, &z, cfg.gen_loss, Track::Modulation)?;
        if !lg.is_finite() {
            return Err(Error::NonFinite {
                what: "probe g_loss".into(),
                iteration: it,
            });
        }
        if it >= window_start {
            acc_g.accumulate(&work.generator, active)?;
        }
        adam_step(
            &mut work.generator.modulation_tensors_mut()?,
            &mut opt_g,
            it,
            &map_g,
            &mask_g,
        )?;
    }
    let rg = acc_g.finalize_fisher(round, active)?;
    let rd = acc_d.finalize_fisher(round, active)?;
    let mut report = rg.merge(rd);
    report.estimator = Estimator::Modulation;
    Ok(report)
}
