//! The adversarial objective and single-network update steps.

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::models::{sample_latent, Gan, NetworkId, Track};
use crate::optim::{adam_step, OptimizerState};
use crate::rng::Rng;
use crate::tensor::{Graph, Tensor, Var};

/// Probabilities are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]` before `ln`.
pub const PROB_CLAMP: f64 = 1e-7;
pub const DEFAULT_WARMUP: usize = 250;
pub const DEFAULT_BATCH: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GenLoss {
    /// `-mean(ln D(G(z)))`
    #[default]
    NonSaturating,
    /// `mean(ln(1 - D(G(z))))`, the literal minimax form.
    Saturating,
}

fn clamped_ln(g: &mut Graph, p: Var) -> Var {
    let c = g.clamp(p, PROB_CLAMP, 1.0 - PROB_CLAMP);
    g.ln(c)
}

/// `-mean(ln d_real) - mean(ln(1 - d_fake))`.
pub fn d_loss(g: &mut Graph, d_real: Var, d_fake: Var) -> Var {
    let lr = clamped_ln(g, d_real);
    let mr = g.mean(lr);
    let inv = g.one_minus(d_fake);
    let lf = clamped_ln(g, inv);
    let mf = g.mean(lf);
    let s = g.add(mr, mf).expect("scalars");
    g.neg(s)
}

pub fn g_loss(g: &mut Graph, d_fake: Var, kind: GenLoss) -> Var {
    match kind {
        GenLoss::NonSaturating => {
            let l = clamped_ln(g, d_fake);
            let m = g.mean(l);
            g.neg(m)
        }
        GenLoss::Saturating => {
            let inv = g.one_minus(d_fake);
            let l = clamped_ln(g, inv);
            g.mean(l)
        }
    }
}

/// Scalar evaluation of [`d_loss`] on plain probabilities.
pub fn d_loss_value(d_real: &[f64], d_fake: &[f64]) -> f64 {
    let mut g = Graph::new();
    let r = g.constant(&Tensor::new(vec![d_real.len()], d_real.to_vec()).expect("probabilities"));
    let f = g.constant(&Tensor::new(vec![d_fake.len()], d_fake.to_vec()).expect("probabilities"));
    let l = d_loss(&mut g, r, f);
    g.value(l)[0]
}

pub fn g_loss_value(d_fake: &[f64], kind: GenLoss) -> f64 {
    let mut g = Graph::new();
    let f = g.constant(&Tensor::new(vec![d_fake.len()], d_fake.to_vec()).expect("probabilities"));
    let l = g_loss(&mut g, f, kind);
    g.value(l)[0]
}

/// EWC quadratic penalty `λ Σ F_i (θ_i − θ_i^s)²` over one network's
/// filter-major flat parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct EwcPenalty {
    pub lambda: f64,
    pub fisher: Vec<f64>,
    pub anchor: Vec<f64>,
}

impl EwcPenalty {
    pub fn value(&self, params: &[f64]) -> f64 {
        self.lambda
            * params
                .iter()
                .zip(&self.anchor)
                .zip(&self.fisher)
                .map(|((p, a), f)| f * (p - a) * (p - a))
                .sum::<f64>()
    }

    pub fn gradient(&self, params: &[f64]) -> Vec<f64> {
        params
            .iter()
            .zip(&self.anchor)
            .zip(&self.fisher)
            .map(|((p, a), f)| 2.0 * self.lambda * f * (p - a))
            .collect()
    }
}

/// Per-step options shared by the D and G updates.
#[derive(Debug, Clone, Copy, Default)]
pub struct StepOptions<'a> {
    pub gen_loss: GenLoss,
    pub penalty: Option<&'a EwcPenalty>,
    /// Iteration index reported in non-finite diagnostics.
    pub iteration: usize,
}

fn check_loss(loss: f64, what: &str, iteration: usize) -> Result<f64> {
    if loss.is_finite() {
        Ok(loss)
    } else {
        Err(Error::NonFinite {
            what: what.into(),
            iteration,
        })
    }
}

/// Populates discriminator gradients of `d_loss` with the generator detached.
/// Returns the loss value.
pub fn compute_d_grads(gan: &mut Gan, real: &Tensor, z: &Tensor, track: Track) -> Result<f64> {
    if real.shape()[0] != z.shape()[0] {
        return Err(Error::Dimension("real and fake batch sizes differ".into()));
    }
    let fake = gan.generate(z)?;
    let d = &mut gan.discriminator;
    d.zero_grads();
    let mut g = Graph::new();
    let binding = d.bind(&mut g, track);
    let xr = g.constant(real);
    let xf = g.constant(&fake);
    let dr = d.forward_bound(&mut g, &binding, xr)?;
    let df = d.forward_bound(&mut g, &binding, xf)?;
    let loss = d_loss(&mut g, dr, df);
    let value = g.value(loss)[0];
    let grads = g.backward(loss)?;
    d.store_grads(&grads, &binding)?;
    Ok(value)
}

/// Populates generator gradients of `g_loss` with the discriminator detached.
pub fn compute_g_grads(gan: &mut Gan, z: &Tensor, kind: GenLoss, track: Track) -> Result<f64> {
    let (gen, disc) = (&mut gan.generator, &gan.discriminator);
    gen.zero_grads();
    let mut g = Graph::new();
    let zv = g.constant(z);
    let (fake, binding) = gen.forward(&mut g, zv, track)?;
    let (df, _) = disc.forward(&mut g, fake, Track::Nothing)?;
    let loss = g_loss(&mut g, df, kind);
    let value = g.value(loss)[0];
    let grads = g.backward(loss)?;
    gen.store_grads(&grads, &binding)?;
    Ok(value)
}

fn apply_penalty(gan: &mut Gan, net: NetworkId, penalty: Option<&EwcPenalty>) -> Result<()> {
    if let Some(p) = penalty.filter(|p| p.lambda != 0.0) {
        let n = gan.net_mut(net);
        let grad = p.gradient(&n.flat_params());
        n.add_flat_grads(&grad)?;
    }
    Ok(())
}

/// One discriminator update restricted to `mask`.
pub fn train_step_d(
    gan: &mut Gan,
    real: &Tensor,
    z: &Tensor,
    opt: &mut OptimizerState,
    iter: usize,
    mask: &[bool],
    opts: StepOptions<'_>,
) -> Result<f64> {
    let loss = compute_d_grads(gan, real, z, Track::Weights)?;
    let loss = check_loss(loss, "d_loss", opts.iteration)?;
    apply_penalty(gan, NetworkId::Discriminator, opts.penalty)?;
    let map = gan.discriminator.filter_map();
    adam_step(
        &mut gan.discriminator.param_tensors_mut(),
        opt,
        iter,
        &map,
        mask,
    )?;
    Ok(loss)
}

/// One generator update restricted to `mask`.
pub fn train_step_g(
    gan: &mut Gan,
    z: &Tensor,
    opt: &mut OptimizerState,
    iter: usize,
    mask: &[bool],
    opts: StepOptions<'_>,
) -> Result<f64> {
    let loss = compute_g_grads(gan, z, opts.gen_loss, Track::Weights)?;
    let loss = check_loss(loss, "g_loss", opts.iteration)?;
    apply_penalty(gan, NetworkId::Generator, opts.penalty)?;
    let map = gan.generator.filter_map();
    adam_step(
        &mut gan.generator.param_tensors_mut(),
        opt,
        iter,
        &map,
        mask,
    )?;
    Ok(loss)
}

/// `n_warmup` discriminator-only steps on the target data. Schedule positions
/// `0..n_warmup` are consumed from `opt`.
pub fn warmup_d(
    gan: &mut Gan,
    target: &Dataset,
    n_warmup: usize,
    batch: usize,
    opt: &mut OptimizerState,
    mask: &[bool],
    rng: &mut Rng,
) -> Result<Vec<f64>> {
    let mut losses = Vec::with_capacity(n_warmup);
    for it in 0..n_warmup {
        let real = target.sample_batch(batch, rng)?;
        let z = sample_latent(batch, gan.latent_dim, rng);
        let opts = StepOptions {
            iteration: it + 1,
            ..Default::default()
        };
        losses.push(train_step_d(gan, &real, &z, opt, it, mask, opts)?);
    }
    Ok(losses)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::Arch;
    use crate::optim::CosineSchedule;
    use crate::rng::{stream, Stream};

    #[test]
    fn d_loss_examples() {
        assert!((d_loss_value(&[0.5], &[0.5]) - 2.0 * 2f64.ln()).abs() < 1e-12);
        assert!(d_loss_value(&[1.0 - 1e-7], &[1e-7]).abs() < 3e-7);
        let expect = -(0.8f64.ln()) - 0.7f64.ln();
        assert!((d_loss_value(&[0.8], &[0.3]) - expect).abs() < 1e-12);
        assert!((expect - 0.5798).abs() < 1e-4);
    }

    #[test]
    fn g_loss_examples() {
        assert!(g_loss_value(&[1.0 - 1e-7], GenLoss::NonSaturating).abs() < 2e-7);
        assert!((g_loss_value(&[0.5], GenLoss::NonSaturating) - 2f64.ln()).abs() < 1e-12);
        let expect = (4f64.ln() + (4.0f64 / 3.0).ln()) / 2.0;
        assert!((g_loss_value(&[0.25, 0.75], GenLoss::NonSaturating) - expect).abs() < 1e-12);
        assert!((expect - 0.8370).abs() < 1e-4);
    }

    #[test]
    fn clamp_absorbs_saturation() {
        assert!(d_loss_value(&[0.0], &[1.0]).is_finite());
        assert!(g_loss_value(&[0.0], GenLoss::NonSaturating).is_finite());
        assert!(g_loss_value(&[1.0], GenLoss::Saturating).is_finite());
    }

    #[test]
    fn ewc_penalty_hand_values() {
        let p = EwcPenalty {
            lambda: 0.5,
            fisher: vec![1.0],
            anchor: vec![0.0],
        };
        assert_eq!(p.value(&[2.0]), 2.0);
        assert_eq!(p.gradient(&[2.0]), vec![2.0]);
        assert_eq!(p.value(&[0.0]), 0.0);
        assert_eq!(p.gradient(&[0.0]), vec![0.0]);
    }

    fn setup() -> (Gan, Dataset, Rng) {
        let gan = Gan::with_width(Arch::PointMlp, 4, 16, &mut stream(11, Stream::Init));
        let pts: Vec<f64> = (0..10)
            .flat_map(|i| [i as f64 * 0.1, 1.0 - i as f64 * 0.05])
            .collect();
        (
            gan,
            Dataset::new(2, pts).unwrap(),
            stream(11, Stream::Train),
        )
    }

    #[test]
    fn masks_control_updates() {
        let (mut gan, data, mut rng) = setup();
        let nd = gan.discriminator.num_filters();
        let ng = gan.generator.num_filters();
        let sched = CosineSchedule::new(0.002, 100);
        let mut od = OptimizerState::new(&gan.discriminator.param_tensors(), sched);
        let mut og = OptimizerState::new(&gan.generator.param_tensors(), sched);
        let real = data.sample_batch(4, &mut rng).unwrap();
        let z = sample_latent(4, 4, &mut rng);

        let before = gan.clone();
        train_step_d(
            &mut gan,
            &real,
            &z,
            &mut od,
            0,
            &vec![false; nd],
            StepOptions::default(),
        )
        .unwrap();
        train_step_g(
            &mut gan,
            &z,
            &mut og,
            0,
            &vec![false; ng],
            StepOptions::default(),
        )
        .unwrap();
        assert_eq!(gan.generator.flat_params(), before.generator.flat_params());
        assert_eq!(
            gan.discriminator.flat_params(),
            before.discriminator.flat_params()
        );

        train_step_d(
            &mut gan,
            &real,
            &z,
            &mut od,
            1,
            &vec![true; nd],
            StepOptions::default(),
        )
        .unwrap();
        assert_ne!(
            gan.discriminator.flat_params(),
            before.discriminator.flat_params()
        );
        // the D step never touches G
        assert_eq!(gan.generator.flat_params(), before.generator.flat_params());

        let d_before = gan.discriminator.flat_params();
        train_step_g(
            &mut gan,
            &z,
            &mut og,
            1,
            &vec![true; ng],
            StepOptions::default(),
        )
        .unwrap();
        assert_ne!(gan.generator.flat_params(), before.generator.flat_params());
        assert_eq!(gan.discriminator.flat_params(), d_before);
    }

    #[test]
    fn warmup_zero_and_generator_untouched() {
        let (mut gan, data, mut rng) = setup();
        let nd = gan.discriminator.num_filters();
        let mut od = OptimizerState::new(
            &gan.discriminator.param_tensors(),
            CosineSchedule::new(0.002, 100),
        );
        let before = gan.clone();
        warmup_d(&mut gan, &data, 0, 4, &mut od, &vec![true; nd], &mut rng).unwrap();
        assert_eq!(gan, before);
        warmup_d(&mut gan, &data, 20, 4, &mut od, &vec![true; nd], &mut rng).unwrap();
        assert_eq!(gan.generator, before.generator);
        assert_ne!(
            gan.discriminator.flat_params(),
            before.discriminator.flat_params()
        );
    }

    #[test]
    fn warmup_loss_decreases_in_median() {
        let mut decreased = 0;
        for seed in 0..5 {
            let mut gan = Gan::with_width(Arch::PointMlp, 4, 16, &mut stream(seed, Stream::Init));
            let data = Dataset::new(
                2,
                (0..20)
                    .flat_map(|i| [3.0 + 0.01 * i as f64, -2.0])
                    .collect(),
            )
            .unwrap();
            let nd = gan.discriminator.num_filters();
            let mut od = OptimizerState::new(
                &gan.discriminator.param_tensors(),
                CosineSchedule::new(0.002, 100),
            );
            let losses = warmup_d(
                &mut gan,
                &data,
                100,
                4,
                &mut od,
                &vec![true; nd],
                &mut stream(seed, Stream::Train),
            )
            .unwrap();
            let median = |s: &[f64]| {
                let mut v = s.to_vec();
                v.sort_by(f64::total_cmp);
                v[v.len() / 2]
            };
            if median(&losses[80..]) < median(&losses[..20]) {
                decreased += 1;
            }
        }
        assert_eq!(decreased, 5);
    }
}
