//! The adaptation loop: periodic importance estimation, the
//! preserve / fine-tune / prune memory bank, and the baseline policies that
//! share the same loop.

use std::fmt;
use std::str::FromStr;

use crate::adversarial::{
    compute_d_grads, compute_g_grads, EwcPenalty, GenLoss, DEFAULT_BATCH, DEFAULT_WARMUP,
};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::importance::{
    ewc_source_fisher, probe_modulation, Estimator, ImportanceAccumulator, ImportanceReport,
    ProbeConfig, DEFAULT_PROBE_ITERS,
};
use crate::models::{
    build_filter_layout, sample_latent, FilterLayout, Gan, GradSource, NetworkId, Track,
};
use crate::optim::{adam_step, CosineSchedule, OptimizerState, DEFAULT_LR};
use crate::rng::{stream, Rng, Stream};

pub const DEFAULT_ITERS: usize = 1250;
pub const DEFAULT_INTERVAL: usize = 50;
pub const DEFAULT_PRUNE_RATE: f64 = 0.03;
pub const DEFAULT_T_HIGH: f64 = 0.7;
pub const DEFAULT_CHECKPOINT_INTERVAL: usize = 250;
pub const DEFAULT_EWC_LAMBDA: f64 = 50.0;
pub const DEFAULT_EWC_BATCHES: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Assignment {
    Preserve,
    FineTune,
    Pruned,
}

impl Assignment {
    pub fn as_char(self) -> char {
        match self {
            Assignment::Preserve => 'P',
            Assignment::FineTune => 'F',
            Assignment::Pruned => 'X',
        }
    }

    pub fn from_char(c: char) -> Result<Self> {
        match c {
            'P' => Ok(Assignment::Preserve),
            'F' => Ok(Assignment::FineTune),
            'X' => Ok(Assignment::Pruned),
            _ => Err(Error::Format(format!("unknown bank state `{c}`"))),
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Assignment::Preserve => "preserve",
            Assignment::FineTune => "finetune",
            Assignment::Pruned => "pruned",
        }
    }
}

/// One state character per filter plus round bookkeeping.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MemoryBank {
    states: Vec<Assignment>,
    prune_round: Vec<Option<usize>>,
    round: usize,
    /// Filters selected for truncation so far, per network. Equals the pruned
    /// count unless truncation re-initialises instead of pruning.
    truncated: [usize; 2],
}

impl MemoryBank {
    pub fn new(len: usize) -> Self {
        MemoryBank {
            states: vec![Assignment::FineTune; len],
            prune_round: vec![None; len],
            round: 0,
            truncated: [0, 0],
        }
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn round(&self) -> usize {
        self.round
    }

    pub fn get(&self, filter: usize) -> Assignment {
        self.states[filter]
    }

    pub fn states(&self) -> &[Assignment] {
        &self.states
    }

    pub fn prune_round(&self, filter: usize) -> Option<usize> {
        self.prune_round[filter]
    }

    pub fn truncated(&self, net: NetworkId) -> usize {
        self.truncated[net.index()]
    }

    /// Sets a non-pruned filter's state. Pruned is absorbing.
    pub fn set(&mut self, filter: usize, state: Assignment) -> Result<()> {
        if self.states[filter] == Assignment::Pruned {
            if state == Assignment::Pruned {
                return Ok(());
            }
            return Err(Error::Contract(format!(
                "filter {filter} is pruned and cannot be revived"
            )));
        }
        if state == Assignment::Pruned {
            self.prune_round[filter] = Some(self.round);
        }
        self.states[filter] = state;
        Ok(())
    }

    pub fn active_mask(&self) -> Vec<bool> {
        self.states
            .iter()
            .map(|&s| s != Assignment::Pruned)
            .collect()
    }

    pub fn count(&self, layout: &FilterLayout, net: NetworkId, state: Assignment) -> usize {
        self.states[layout.range(net)]
            .iter()
            .filter(|&&s| s == state)
            .count()
    }

    pub fn fraction(&self, layout: &FilterLayout, net: NetworkId, state: Assignment) -> f64 {
        self.count(layout, net, state) as f64 / layout.count(net) as f64
    }

    pub fn pruned_ids(&self) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| self.states[i] == Assignment::Pruned)
            .collect()
    }

    pub fn encode(&self) -> String {
        self.states.iter().map(|s| s.as_char()).collect()
    }

    /// Lossless single-line form: `<round> <states> <truncated G> <truncated D> <id:round,...|->`.
    pub fn to_record(&self) -> String {
        let pruned: Vec<String> = self
            .prune_round
            .iter()
            .enumerate()
            .filter_map(|(i, r)| r.map(|r| format!("{i}:{r}")))
            .collect();
        let pruned = if pruned.is_empty() {
            "-".to_string()
        } else {
            pruned.join(",")
        };
        format!(
            "{} {} {} {} {pruned}",
            self.round,
            self.encode(),
            self.truncated[0],
            self.truncated[1]
        )
    }

    pub fn from_record(s: &str) -> Result<Self> {
        let bad = |what: &str| Error::Format(format!("memory bank record: {what}"));
        let parts: Vec<&str> = s.split(' ').collect();
        let [round, states, tg, td, pruned] = parts[..] else {
            return Err(bad("expected 5 fields"));
        };
        let num = |v: &str| v.parse::<usize>().map_err(|_| bad("bad number"));
        let mut bank = MemoryBank::decode(states, num(round)?)?;
        bank.truncated = [num(tg)?, num(td)?];
        if pruned != "-" {
            for item in pruned.split(',') {
                let (id, r) = item.split_once(':').ok_or_else(|| bad("bad prune entry"))?;
                let id = num(id)?;
                if id >= bank.len() || bank.states[id] != Assignment::Pruned {
                    return Err(bad("prune round recorded for a filter that is not pruned"));
                }
                bank.prune_round[id] = Some(num(r)?);
            }
        }
        Ok(bank)
    }

    pub fn decode(s: &str, round: usize) -> Result<Self> {
        let states = s
            .chars()
            .map(Assignment::from_char)
            .collect::<Result<Vec<_>>>()?;
        let len = states.len();
        Ok(MemoryBank {
            states,
            prune_round: vec![None; len],
            round,
            truncated: [0, 0],
        })
    }
}

/// When importance is estimated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EstimationSchedule {
    Dynamic,
    Static,
    Never,
}

/// How high-importance filters are preserved.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PreserveMode {
    Freeze,
    Modulate,
    None,
}

/// What happens to the lowest-importance filters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Truncation {
    Prune,
    Reinit,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PolicyAxes {
    pub schedule: EstimationSchedule,
    pub preserve: PreserveMode,
    pub truncation: Truncation,
    pub ewc: bool,
    pub freeze_low_d: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum PolicyTag {
    #[default]
    RickDynamic,
    RickStatic,
    Tgan,
    Ewc,
    Freezed,
    NoFreezePrune,
    FreezeNoPrune,
    RandomReinit,
    ModulationDynamic,
}

impl PolicyTag {
    pub const ALL: [PolicyTag; 9] = [
        PolicyTag::RickDynamic,
        PolicyTag::RickStatic,
        PolicyTag::Tgan,
        PolicyTag::Ewc,
        PolicyTag::Freezed,
        PolicyTag::NoFreezePrune,
        PolicyTag::FreezeNoPrune,
        PolicyTag::RandomReinit,
        PolicyTag::ModulationDynamic,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PolicyTag::RickDynamic => "rick-dynamic",
            PolicyTag::RickStatic => "rick-static",
            PolicyTag::Tgan => "tgan",
            PolicyTag::Ewc => "ewc",
            PolicyTag::Freezed => "freezed",
            PolicyTag::NoFreezePrune => "no-freeze-prune",
            PolicyTag::FreezeNoPrune => "freeze-no-prune",
            PolicyTag::RandomReinit => "random-reinit",
            PolicyTag::ModulationDynamic => "modulation-dynamic",
        }
    }

    pub fn axes(self) -> PolicyAxes {
        use EstimationSchedule::*;
        let rick = PolicyAxes {
            schedule: Dynamic,
            preserve: PreserveMode::Freeze,
            truncation: Truncation::Prune,
            ewc: false,
            freeze_low_d: false,
        };
        let baseline = PolicyAxes {
            schedule: Never,
            preserve: PreserveMode::None,
            truncation: Truncation::None,
            ..rick
        };
        match self {
            PolicyTag::RickDynamic => rick,
            PolicyTag::RickStatic => PolicyAxes {
                schedule: Static,
                ..rick
            },
            PolicyTag::Tgan => baseline,
            PolicyTag::Ewc => PolicyAxes {
                ewc: true,
                ..baseline
            },
            PolicyTag::Freezed => PolicyAxes {
                freeze_low_d: true,
                ..baseline
            },
            PolicyTag::NoFreezePrune => PolicyAxes {
                preserve: PreserveMode::None,
                ..rick
            },
            PolicyTag::FreezeNoPrune => PolicyAxes {
                truncation: Truncation::None,
                ..rick
            },
            PolicyTag::RandomReinit => PolicyAxes {
                truncation: Truncation::Reinit,
                ..rick
            },
            PolicyTag::ModulationDynamic => PolicyAxes {
                preserve: PreserveMode::Modulate,
                ..rick
            },
        }
    }
}

impl fmt::Display for PolicyTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PolicyTag {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "rick" | "rick-dynamic" => PolicyTag::RickDynamic,
            "rick-static" => PolicyTag::RickStatic,
            "tgan" => PolicyTag::Tgan,
            "ewc" => PolicyTag::Ewc,
            "freezed" => PolicyTag::Freezed,
            "rick-nofreeze" | "no-freeze-prune" => PolicyTag::NoFreezePrune,
            "rick-noprune" | "freeze-no-prune" => PolicyTag::FreezeNoPrune,
            "rick-reinit" | "random-reinit" => PolicyTag::RandomReinit,
            "modulation-dynamic" | "rick-modulation" => PolicyTag::ModulationDynamic,
            _ => return Err(Error::Config(format!("unknown method `{s}`"))),
        })
    }
}

/// Parses a CLI method name into a policy and, for `adam-probe`, the
/// estimator it implies.
pub fn parse_method(s: &str) -> Result<(PolicyTag, Option<Estimator>)> {
    match s {
        "adam-probe" => Ok((PolicyTag::RickStatic, Some(Estimator::Modulation))),
        other => Ok((other.parse()?, None)),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PruneRule {
    /// Prune toward the cumulative rate on a linear per-round schedule.
    Cumulative,
    /// Prune every active filter whose quantile is strictly below `t_low`.
    QuantileBelow(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RickConfig {
    pub total_iters: usize,
    pub warmup: usize,
    pub interval: usize,
    pub t_high: f64,
    pub prune_rate_g: f64,
    pub prune_rate_d: f64,
    pub prune_rule: PruneRule,
    pub estimator: Estimator,
    pub policy: PolicyTag,
    pub batch: usize,
    pub base_lr: f64,
    pub checkpoint_interval: usize,
    pub gen_loss: GenLoss,
    pub ewc_lambda: f64,
    pub ewc_batches: usize,
    pub probe_iters: usize,
}

impl Default for RickConfig {
    fn default() -> Self {
        RickConfig {
            total_iters: DEFAULT_ITERS,
            warmup: DEFAULT_WARMUP,
            interval: DEFAULT_INTERVAL,
            t_high: DEFAULT_T_HIGH,
            prune_rate_g: DEFAULT_PRUNE_RATE,
            prune_rate_d: DEFAULT_PRUNE_RATE,
            prune_rule: PruneRule::Cumulative,
            estimator: Estimator::Fisher,
            policy: PolicyTag::RickDynamic,
            batch: DEFAULT_BATCH,
            base_lr: DEFAULT_LR,
            checkpoint_interval: DEFAULT_CHECKPOINT_INTERVAL,
            gen_loss: GenLoss::NonSaturating,
            ewc_lambda: DEFAULT_EWC_LAMBDA,
            ewc_batches: DEFAULT_EWC_BATCHES,
            probe_iters: DEFAULT_PROBE_ITERS,
        }
    }
}

impl RickConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        for (name, p) in [
            ("prune_rate_g", self.prune_rate_g),
            ("prune_rate_d", self.prune_rate_d),
        ] {
            if !(0.0..self.t_high).contains(&p) {
                return bad(format!(
                    "need 0 <= {name} < t_high, got {p} and {}",
                    self.t_high
                ));
            }
        }
        if self.t_high > 1.0 {
            return bad(format!("t_high must be <= 1, got {}", self.t_high));
        }
        if self.interval == 0 {
            return bad("interval must be >= 1".into());
        }
        if self.warmup + self.interval > self.total_iters {
            return bad(format!(
                "warmup ({}) + interval ({}) exceeds total iterations ({})",
                self.warmup, self.interval, self.total_iters
            ));
        }
        if self.batch == 0 || self.checkpoint_interval == 0 {
            return bad("batch and checkpoint interval must be >= 1".into());
        }
        if let PruneRule::QuantileBelow(t) = self.prune_rule {
            if !(0.0..=1.0).contains(&t) {
                return bad(format!("t_low must lie in [0, 1], got {t}"));
            }
        }
        Ok(())
    }

    pub fn prune_rate(&self, net: NetworkId) -> f64 {
        match net {
            NetworkId::Generator => self.prune_rate_g,
            NetworkId::Discriminator => self.prune_rate_d,
        }
    }

    /// Estimation iterations in `(warmup, total]`.
    pub fn estimation_iterations(&self) -> usize {
        self.total_iters / self.interval - self.warmup / self.interval
    }

    /// Rounds over which the cumulative prune rate is spread.
    pub fn rounds_for(&self, schedule: EstimationSchedule) -> usize {
        match schedule {
            EstimationSchedule::Dynamic => self.estimation_iterations(),
            EstimationSchedule::Static => 1,
            EstimationSchedule::Never => 0,
        }
    }
}

/// Number of filters that should be truncated after `round` of
/// `total_rounds` for a network of `n` filters.
pub fn cumulative_target(round: usize, total_rounds: usize, rate: f64, n: usize) -> usize {
    if total_rounds == 0 {
        return 0;
    }
    let r = round.min(total_rounds) as f64;
    (r * rate * n as f64 / total_rounds as f64 + 1e-9).floor() as usize
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct RoundOutcome {
    /// Filters selected for truncation this round (pruned or re-initialised).
    pub truncated: Vec<usize>,
}

/// Decides this round's assignments from `report`, which must cover exactly
/// the active filters. Pruned filters are never touched.
pub fn estimate_and_assign(
    bank: &mut MemoryBank,
    report: &ImportanceReport,
    cfg: &RickConfig,
    layout: &FilterLayout,
    axes: PolicyAxes,
    round: usize,
    total_rounds: usize,
) -> Result<RoundOutcome> {
    if bank.len() != layout.len() {
        return Err(Error::Contract(format!(
            "bank has {} entries for {} filters",
            bank.len(),
            layout.len()
        )));
    }
    let active: Vec<usize> = (0..bank.len())
        .filter(|&i| bank.get(i) != Assignment::Pruned)
        .collect();
    let covered: Vec<usize> = report.scores.iter().map(|s| s.filter_id).collect();
    if covered != active {
        return Err(Error::Contract(format!(
            "report covers {} filters, {} are active",
            covered.len(),
            active.len()
        )));
    }
    bank.round = round;
    let mut outcome = RoundOutcome::default();
    for net in [NetworkId::Generator, NetworkId::Discriminator] {
        let mut scores: Vec<_> = report.scores.iter().filter(|s| s.network == net).collect();
        scores.sort_by(|a, b| {
            a.quantile
                .total_cmp(&b.quantile)
                .then(a.importance.total_cmp(&b.importance))
                .then(a.filter_id.cmp(&b.filter_id))
        });
        let k = match (axes.truncation, cfg.prune_rule) {
            (Truncation::None, _) => 0,
            (_, PruneRule::Cumulative) => {
                let target =
                    cumulative_target(round, total_rounds, cfg.prune_rate(net), layout.count(net));
                target.saturating_sub(bank.truncated[net.index()])
            }
            (_, PruneRule::QuantileBelow(t_low)) => {
                scores.iter().filter(|s| s.quantile < t_low).count()
            }
        }
        .min(scores.len());
        for s in &scores[..k] {
            let state = match axes.truncation {
                Truncation::Prune => Assignment::Pruned,
                _ => Assignment::FineTune,
            };
            bank.set(s.filter_id, state)?;
            outcome.truncated.push(s.filter_id);
        }
        bank.truncated[net.index()] += k;
        for s in &scores[k..] {
            let state = if axes.preserve != PreserveMode::None && s.quantile >= cfg.t_high {
                Assignment::Preserve
            } else {
                Assignment::FineTune
            };
            bank.set(s.filter_id, state)?;
        }
    }
    outcome.truncated.sort_unstable();
    Ok(outcome)
}

/// Per-network update masks derived from the bank.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UpdateMask {
    /// Weights update where the filter is FineTune.
    pub weights: [Vec<bool>; 2],
    /// Modulation updates where the filter is Preserve.
    pub modulation: [Vec<bool>; 2],
}

impl UpdateMask {
    pub fn weights(&self, net: NetworkId) -> &[bool] {
        &self.weights[net.index()]
    }

    pub fn modulation(&self, net: NetworkId) -> &[bool] {
        &self.modulation[net.index()]
    }
}

/// Builds the update mask and re-zeroes every pruned span.
pub fn apply_bank(gan: &mut Gan, bank: &MemoryBank, layout: &FilterLayout) -> UpdateMask {
    let mut weights = [Vec::new(), Vec::new()];
    let mut modulation = [Vec::new(), Vec::new()];
    for net in [NetworkId::Generator, NetworkId::Discriminator] {
        let range = layout.range(net);
        let states = &bank.states()[range.clone()];
        weights[net.index()] = states.iter().map(|&s| s == Assignment::FineTune).collect();
        modulation[net.index()] = states.iter().map(|&s| s == Assignment::Preserve).collect();
        let n = gan.net_mut(net);
        for (local, &s) in states.iter().enumerate() {
            if s == Assignment::Pruned {
                n.zero_filter(local);
            }
        }
    }
    UpdateMask {
        weights,
        modulation,
    }
}

/// Hooks into the adaptation loop. All methods default to no-ops.
pub trait AdaptObserver {
    fn on_checkpoint(&mut self, _iteration: usize, _gan: &Gan, _bank: &MemoryBank) -> Result<()> {
        Ok(())
    }
    fn on_round(
        &mut self,
        _iteration: usize,
        _report: &ImportanceReport,
        _bank: &MemoryBank,
    ) -> Result<()> {
        Ok(())
    }
    /// Called after every training step (warmup included).
    fn on_step(&mut self, _iteration: usize, _gan: &Gan, _bank: &MemoryBank) -> Result<()> {
        Ok(())
    }
}

pub struct NoopObserver;

impl AdaptObserver for NoopObserver {}

#[derive(Debug, Clone)]
pub struct RoundRecord {
    pub iteration: usize,
    pub report: ImportanceReport,
    pub truncated: Vec<usize>,
    pub bank: MemoryBank,
}

#[derive(Debug, Clone)]
pub struct AdaptOutcome {
    pub gan: Gan,
    pub bank: MemoryBank,
    pub layout: FilterLayout,
    pub rounds: Vec<RoundRecord>,
    pub d_losses: Vec<f64>,
    pub g_losses: Vec<f64>,
}

struct NetOptim {
    weights: OptimizerState,
    modulation: Option<OptimizerState>,
}

impl NetOptim {
    fn new(gan: &Gan, net: NetworkId, sched: CosineSchedule) -> Result<Self> {
        let n = gan.net(net);
        let modulation = if n.has_modulation() {
            Some(OptimizerState::new(&n.modulation_tensors()?, sched))
        } else {
            None
        };
        Ok(NetOptim {
            weights: OptimizerState::new(&n.param_tensors(), sched),
            modulation,
        })
    }

    fn zero_filter(&mut self, gan: &Gan, net: NetworkId, local: usize) {
        let n = gan.net(net);
        self.weights.zero_filter(&n.filter_map()[local]);
        if let Some(m) = self.modulation.as_mut() {
            m.zero_filter(&n.modulation_filter_map()[local]);
        }
    }

    fn step(
        &mut self,
        gan: &mut Gan,
        net: NetworkId,
        iter: usize,
        mask: &UpdateMask,
    ) -> Result<()> {
        let n = gan.net_mut(net);
        let map = n.filter_map();
        adam_step(
            &mut n.param_tensors_mut(),
            &mut self.weights,
            iter,
            &map,
            mask.weights(net),
        )?;
        if let Some(m) = self.modulation.as_mut() {
            let map = n.modulation_filter_map();
            adam_step(
                &mut n.modulation_tensors_mut()?,
                m,
                iter,
                &map,
                mask.modulation(net),
            )?;
        }
        Ok(())
    }
}

fn finite(loss: f64, what: &str, iteration: usize) -> Result<f64> {
    if loss.is_finite() {
        Ok(loss)
    } else {
        Err(Error::NonFinite {
            what: what.into(),
            iteration,
        })
    }
}

/// Adapts a copy of `source` to the few-shot `target` set.
///
/// Iterations `1..=warmup` update only the discriminator. Afterwards every
/// iteration divisible by `interval` is an estimation round (no training
/// step); all other iterations take one D step then one G step under the
/// bank's update mask.
pub fn adapt(
    source: &Gan,
    target: &Dataset,
    cfg: &RickConfig,
    seed: u64,
    observer: &mut dyn AdaptObserver,
) -> Result<AdaptOutcome> {
    cfg.validate()?;
    if target.is_empty() {
        return Err(Error::Contract("target set is empty".into()));
    }
    let axes = cfg.policy.axes();
    let mut rng = stream(seed, Stream::Train);
    let mut reinit_rng = stream(seed, Stream::Reinit);
    let mut probe_rng = stream(seed, Stream::Probe);

    let mut gan = source.clone_for_adaptation();
    if axes.preserve == PreserveMode::Modulate {
        gan.generator.enable_modulation();
        gan.discriminator.enable_modulation();
    }
    let layout = build_filter_layout(&gan);
    let mut bank = MemoryBank::new(layout.len());
    if axes.freeze_low_d {
        let frozen_layers = gan.discriminator.layers.len().div_ceil(2);
        for f in &layout.filters[layout.range(NetworkId::Discriminator)] {
            if f.layer < frozen_layers {
                bank.set(f.filter_id, Assignment::Preserve)?;
            }
        }
    }

    let sched = CosineSchedule::new(cfg.base_lr, cfg.total_iters);
    let mut opt_g = NetOptim::new(&gan, NetworkId::Generator, sched)?;
    let mut opt_d = NetOptim::new(&gan, NetworkId::Discriminator, sched)?;
    let track = if axes.preserve == PreserveMode::Modulate {
        Track::Both
    } else {
        Track::Weights
    };

    let (pen_g, pen_d) = if axes.ewc {
        let mut ewc_rng = stream(seed, Stream::Ewc);
        let fisher = ewc_source_fisher(
            source,
            cfg.ewc_batches,
            cfg.batch,
            cfg.gen_loss,
            &mut ewc_rng,
        )?;
        (
            Some(EwcPenalty {
                lambda: cfg.ewc_lambda,
                fisher: fisher.generator,
                anchor: source.generator.flat_params(),
            }),
            Some(EwcPenalty {
                lambda: cfg.ewc_lambda,
                fisher: fisher.discriminator,
                anchor: source.discriminator.flat_params(),
            }),
        )
    } else {
        (None, None)
    };
    let add_penalty = |gan: &mut Gan, net: NetworkId, p: &Option<EwcPenalty>| -> Result<()> {
        if let Some(p) = p.as_ref().filter(|p| p.lambda != 0.0) {
            let n = gan.net_mut(net);
            let g = p.gradient(&n.flat_params());
            n.add_flat_grads(&g)?;
        }
        Ok(())
    };

    let mut d_losses = Vec::new();
    let mut g_losses = Vec::new();
    observer.on_checkpoint(0, &gan, &bank)?;

    for it in 1..=cfg.warmup {
        let mask = apply_bank(&mut gan, &bank, &layout);
        let real = target.sample_batch(cfg.batch, &mut rng)?;
        let z = sample_latent(cfg.batch, gan.latent_dim, &mut rng);
        let ld = finite(compute_d_grads(&mut gan, &real, &z, track)?, "d_loss", it)?;
        add_penalty(&mut gan, NetworkId::Discriminator, &pen_d)?;
        opt_d.step(&mut gan, NetworkId::Discriminator, it - 1, &mask)?;
        d_losses.push(ld);
        observer.on_step(it, &gan, &bank)?;
        if it % cfg.checkpoint_interval == 0 {
            observer.on_checkpoint(it, &gan, &bank)?;
        }
    }

    let accumulate =
        axes.schedule != EstimationSchedule::Never && cfg.estimator != Estimator::Modulation;
    let source_kind = GradSource::Weights;
    let mut acc_g = ImportanceAccumulator::new(&layout, NetworkId::Generator, source_kind);
    let mut acc_d = ImportanceAccumulator::new(&layout, NetworkId::Discriminator, source_kind);
    let total_rounds = cfg.rounds_for(axes.schedule);
    let mut rounds = Vec::new();

    for it in cfg.warmup + 1..=cfg.total_iters {
        if it % cfg.interval == 0 {
            let estimate = match axes.schedule {
                EstimationSchedule::Dynamic => true,
                EstimationSchedule::Static => rounds.is_empty(),
                EstimationSchedule::Never => false,
            };
            if estimate {
                let round = rounds.len() + 1;
                let active = bank.active_mask();
                let report = match cfg.estimator {
                    Estimator::Modulation => {
                        let pc = ProbeConfig {
                            iters: cfg.probe_iters,
                            batch: cfg.batch,
                            lr: cfg.base_lr,
                            gen_loss: cfg.gen_loss,
                        };
                        probe_modulation(&gan, target, &layout, &active, round, pc, &mut probe_rng)?
                    }
                    est => {
                        let rg = acc_g.finalize_with(round, &active, est)?;
                        let rd = acc_d.finalize_with(round, &active, est)?;
                        rg.merge(rd)
                    }
                };
                let outcome = estimate_and_assign(
                    &mut bank,
                    &report,
                    cfg,
                    &layout,
                    axes,
                    round,
                    total_rounds,
                )?;
                for &id in &outcome.truncated {
                    let f = &layout.filters[id];
                    let net = gan.net_mut(f.network);
                    match axes.truncation {
                        Truncation::Reinit => net.reinit_filter(f.local, &mut reinit_rng),
                        _ => net.zero_filter(f.local),
                    }
                    let opt = match f.network {
                        NetworkId::Generator => &mut opt_g,
                        NetworkId::Discriminator => &mut opt_d,
                    };
                    opt.zero_filter(&gan, f.network, f.local);
                }
                observer.on_round(it, &report, &bank)?;
                rounds.push(RoundRecord {
                    iteration: it,
                    report,
                    truncated: outcome.truncated,
                    bank: bank.clone(),
                });
            }
            acc_g.reset();
            acc_d.reset();
        } else {
            let mask = apply_bank(&mut gan, &bank, &layout);
            let active = if accumulate {
                bank.active_mask()
            } else {
                Vec::new()
            };

            let real = target.sample_batch(cfg.batch, &mut rng)?;
            let z = sample_latent(cfg.batch, gan.latent_dim, &mut rng);
            let ld = finite(compute_d_grads(&mut gan, &real, &z, track)?, "d_loss", it)?;
            if accumulate {
                acc_d.accumulate(&gan.discriminator, &active)?;
            }
            add_penalty(&mut gan, NetworkId::Discriminator, &pen_d)?;
            opt_d.step(&mut gan, NetworkId::Discriminator, it - 1, &mask)?;

            let z = sample_latent(cfg.batch, gan.latent_dim, &mut rng);
            let lg = finite(
                compute_g_grads(&mut gan, &z, cfg.gen_loss, track)?,
                "g_loss",
                it,
            )?;
            if accumulate {
                acc_g.accumulate(&gan.generator, &active)?;
            }
            add_penalty(&mut gan, NetworkId::Generator, &pen_g)?;
            opt_g.step(&mut gan, NetworkId::Generator, it - 1, &mask)?;

            d_losses.push(ld);
            g_losses.push(lg);
            observer.on_step(it, &gan, &bank)?;
        }
        if it % cfg.checkpoint_interval == 0 || it == cfg.total_iters {
            observer.on_checkpoint(it, &gan, &bank)?;
        }
    }

    Ok(AdaptOutcome {
        gan,
        bank,
        layout,
        rounds,
        d_losses,
        g_losses,
    })
}

/// A fresh training-stream generator for callers that need the same draws as
/// [`adapt`] for a given seed.
pub fn training_rng(seed: u64) -> Rng {
    stream(seed, Stream::Train)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::importance::FilterScore;
    use crate::models::{Arch, FilterLayout};

    fn small_layout(n_g: usize) -> (FilterLayout, Gan) {
        let gan = Gan::with_width(Arch::PointMlp, 2, n_g, &mut stream(0, Stream::Init));
        (build_filter_layout(&gan), gan)
    }

    fn report_for(
        bank: &MemoryBank,
        layout: &FilterLayout,
        importance: impl Fn(usize) -> f64,
    ) -> ImportanceReport {
        let mut scores = Vec::new();
        for net in [NetworkId::Generator, NetworkId::Discriminator] {
            let ids: Vec<usize> = layout
                .range(net)
                .filter(|&i| bank.get(i) != Assignment::Pruned)
                .collect();
            let vals: Vec<f64> = ids.iter().map(|&i| importance(i)).collect();
            let q = crate::importance::quantile_ranks(&vals);
            for ((&id, &v), q) in ids.iter().zip(&vals).zip(q) {
                scores.push(FilterScore {
                    filter_id: id,
                    network: net,
                    layer: layout.filters[id].layer,
                    importance: v,
                    quantile: q,
                });
            }
        }
        ImportanceReport {
            round: 0,
            estimator: Estimator::Fisher,
            scores,
        }
    }

    #[test]
    fn cumulative_schedule_arithmetic() {
        assert_eq!(cumulative_target(1, 10, 0.03, 100), 0);
        assert_eq!(cumulative_target(4, 10, 0.03, 100), 1);
        assert_eq!(cumulative_target(10, 10, 0.03, 100), 3);
        assert_eq!(cumulative_target(20, 20, 0.03, 130), 3);
        assert_eq!(cumulative_target(3, 0, 0.03, 130), 0);
    }

    #[test]
    fn round_four_prunes_global_minimum() {
        // hidden width 49 gives 49 + 49 + 2 = 100 generator filters
        let (layout, _) = small_layout(49);
        let n_g = layout.count(NetworkId::Generator);
        assert_eq!(n_g, 100);
        let cfg = RickConfig {
            prune_rate_g: 0.03,
            prune_rate_d: 0.0,
            ..Default::default()
        };
        let axes = PolicyTag::RickDynamic.axes();
        let mut bank = MemoryBank::new(layout.len());
        // importance decreasing in id; filter n_g-1 is the G minimum
        let imp = |i: usize| (layout.len() - i) as f64 + 0.5;
        for round in 1..=10 {
            let r = report_for(&bank, &layout, imp);
            let out = estimate_and_assign(&mut bank, &r, &cfg, &layout, axes, round, 10).unwrap();
            let expect = cumulative_target(round, 10, 0.03, n_g);
            assert_eq!(
                bank.count(&layout, NetworkId::Generator, Assignment::Pruned),
                expect
            );
            if round == 4 {
                assert_eq!(bank.get(n_g - 1), Assignment::Pruned);
                assert_eq!(out.truncated.len(), 1);
            }
            if round < 4 {
                assert!(out.truncated.is_empty());
            }
        }
        assert_eq!(
            bank.count(&layout, NetworkId::Generator, Assignment::Pruned),
            3
        );
    }

    #[test]
    fn t_high_one_preserves_nothing() {
        let (layout, _) = small_layout(16);
        let cfg = RickConfig {
            t_high: 1.0,
            ..Default::default()
        };
        let mut bank = MemoryBank::new(layout.len());
        let r = report_for(&bank, &layout, |i| i as f64);
        estimate_and_assign(
            &mut bank,
            &r,
            &cfg,
            &layout,
            PolicyTag::RickDynamic.axes(),
            1,
            5,
        )
        .unwrap();
        assert!(bank.states().iter().all(|&s| s != Assignment::Preserve));
    }

    #[test]
    fn preserve_is_redecided_but_pruned_is_absorbing() {
        let (layout, _) = small_layout(16);
        let cfg = RickConfig::default();
        let axes = PolicyTag::RickDynamic.axes();
        let mut bank = MemoryBank::new(layout.len());
        let r = report_for(&bank, &layout, |i| i as f64);
        estimate_and_assign(&mut bank, &r, &cfg, &layout, axes, 1, 2).unwrap();
        let top_g = layout.range(NetworkId::Generator).end - 1;
        assert_eq!(bank.get(top_g), Assignment::Preserve);
        let pruned_before = bank.pruned_ids();
        let r = report_for(&bank, &layout, |i| -(i as f64));
        estimate_and_assign(&mut bank, &r, &cfg, &layout, axes, 2, 2).unwrap();
        assert_ne!(bank.get(top_g), Assignment::Preserve);
        for id in pruned_before {
            assert_eq!(bank.get(id), Assignment::Pruned);
        }
        assert!(bank
            .set(bank.pruned_ids()[0], Assignment::FineTune)
            .is_err());
    }

    #[test]
    fn report_size_mismatch_is_contract_error() {
        let (layout, _) = small_layout(8);
        let mut bank = MemoryBank::new(layout.len());
        let mut r = report_for(&bank, &layout, |i| i as f64);
        r.scores.pop();
        let err = estimate_and_assign(
            &mut bank,
            &r,
            &RickConfig::default(),
            &layout,
            PolicyTag::RickDynamic.axes(),
            1,
            1,
        );
        assert!(matches!(err, Err(Error::Contract(_))));
        let mut short = MemoryBank::new(3);
        let r = report_for(&bank, &layout, |i| i as f64);
        assert!(estimate_and_assign(
            &mut short,
            &r,
            &RickConfig::default(),
            &layout,
            PolicyTag::RickDynamic.axes(),
            1,
            1
        )
        .is_err());
    }

    #[test]
    fn quantile_rule_prunes_strictly_below() {
        let (layout, _) = small_layout(8);
        let cfg = RickConfig {
            prune_rule: PruneRule::QuantileBelow(0.0),
            ..Default::default()
        };
        let mut bank = MemoryBank::new(layout.len());
        let r = report_for(&bank, &layout, |i| i as f64);
        estimate_and_assign(
            &mut bank,
            &r,
            &cfg,
            &layout,
            PolicyTag::RickDynamic.axes(),
            1,
            1,
        )
        .unwrap();
        assert!(bank.pruned_ids().is_empty());
        let cfg = RickConfig {
            prune_rule: PruneRule::QuantileBelow(0.1),
            ..Default::default()
        };
        estimate_and_assign(
            &mut bank,
            &r,
            &cfg,
            &layout,
            PolicyTag::RickDynamic.axes(),
            1,
            1,
        )
        .unwrap();
        assert!(!bank.pruned_ids().is_empty());
    }

    #[test]
    fn apply_bank_masks_and_zeroes() {
        let (layout, mut gan) = small_layout(8);
        let mut bank = MemoryBank::new(layout.len());
        let mask = apply_bank(&mut gan, &bank, &layout);
        assert!(mask.weights(NetworkId::Generator).iter().all(|&m| m));
        assert!(mask.weights(NetworkId::Discriminator).iter().all(|&m| m));
        bank.set(7, Assignment::Pruned).unwrap();
        bank.set(3, Assignment::Preserve).unwrap();
        let mask = apply_bank(&mut gan, &bank, &layout);
        assert!(gan.generator.filter_is_zero(7));
        assert!(!mask.weights(NetworkId::Generator)[7]);
        assert!(!mask.weights(NetworkId::Generator)[3]);
        assert!(mask.modulation(NetworkId::Generator)[3]);
    }

    #[test]
    fn bank_encoding_roundtrip() {
        let mut bank = MemoryBank::new(5);
        bank.set(1, Assignment::Preserve).unwrap();
        bank.set(4, Assignment::Pruned).unwrap();
        assert_eq!(bank.encode(), "FPFFX");
        assert_eq!(
            MemoryBank::decode("FPFFX", 0).unwrap().states(),
            bank.states()
        );
        assert!(MemoryBank::decode("FQ", 0).is_err());
        bank.truncated = [1, 0];
        assert_eq!(bank.to_record(), "0 FPFFX 1 0 4:0");
        assert_eq!(MemoryBank::from_record(&bank.to_record()).unwrap(), bank);
        assert!(MemoryBank::from_record("0 FPFFX 1 0 1:0").is_err());
        assert!(MemoryBank::from_record("0 FPFFX 1 0").is_err());
    }

    #[test]
    fn config_validation() {
        assert!(RickConfig::default().validate().is_ok());
        assert!(RickConfig {
            prune_rate_g: 0.8,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(RickConfig {
            interval: 0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(RickConfig {
            warmup: 1240,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(RickConfig {
            t_high: 1.5,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(RickConfig {
            prune_rate_g: 0.0,
            prune_rate_d: 0.0,
            t_high: 1.0,
            ..Default::default()
        }
        .validate()
        .is_ok());
    }

    #[test]
    fn method_names() {
        assert_eq!(
            parse_method("rick").unwrap(),
            (PolicyTag::RickDynamic, None)
        );
        assert_eq!(
            parse_method("adam-probe").unwrap(),
            (PolicyTag::RickStatic, Some(Estimator::Modulation))
        );
        assert_eq!(
            parse_method("rick-noprune").unwrap().0,
            PolicyTag::FreezeNoPrune
        );
        assert_eq!(
            parse_method("rick-nofreeze").unwrap().0,
            PolicyTag::NoFreezePrune
        );
        assert_eq!(
            parse_method("rick-reinit").unwrap().0,
            PolicyTag::RandomReinit
        );
        for tag in PolicyTag::ALL {
            assert_eq!(tag.as_str().parse::<PolicyTag>().unwrap(), tag);
        }
        assert!(parse_method("cdc").is_err());
    }

    #[test]
    fn default_rounds() {
        let cfg = RickConfig::default();
        assert_eq!(cfg.interval, 50);
        assert_eq!(cfg.warmup, 250);
        assert_eq!(cfg.batch, 4);
        assert_eq!(cfg.estimation_iterations(), 20);
        assert_eq!(cfg.rounds_for(EstimationSchedule::Static), 1);
    }
}
