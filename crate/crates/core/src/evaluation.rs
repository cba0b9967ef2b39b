//! Sample-space metrics: Fréchet distance between Gaussian fits, KID,
//! cluster-based intra-diversity, and incompatible-mode diagnostics.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::models::{FilterLayout, Gan, NetworkId};
use crate::rng::{stream, Stream};
use crate::scheduler::{Assignment, MemoryBank};
use crate::tensor::Tensor;

pub const DEFAULT_FD_SAMPLES: usize = 5000;
pub const DEFAULT_SUBSET: usize = 1000;
pub const PROJECTION_DIM: usize = 32;
const PSD_TOLERANCE: f64 = 1e-10;
const SYMMETRY_TOLERANCE: f64 = 1e-12;

fn rows(t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [n, d] => Ok((*n, *d)),
        s => Err(Error::Dimension(format!(
            "expected a sample matrix, got shape {s:?}"
        ))),
    }
}

fn row(t: &Tensor, i: usize) -> &[f64] {
    let d = t.shape()[1];
    &t.data()[i * d..(i + 1) * d]
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    sq_dist(a, b).sqrt()
}

/// Index of the nearest point in `pool` (row-major, `dim` wide); ties go to
/// the lowest index.
fn argmin_dist(x: &[f64], pool: &[f64], dim: usize) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, p) in pool.chunks_exact(dim).enumerate() {
        let d = sq_dist(x, p);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianFit {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub count: usize,
}

impl GaussianFit {
    /// Mean and unbiased covariance of the rows of `samples`.
    pub fn fit(samples: &Tensor) -> Result<Self> {
        let (n, d) = rows(samples)?;
        if n < 2 {
            return Err(Error::Contract(format!(
                "need at least 2 samples for a covariance, got {n}"
            )));
        }
        let x = DMatrix::from_row_slice(n, d, samples.data());
        let mean = DVector::from_iterator(d, (0..d).map(|j| x.column(j).sum() / n as f64));
        let mut centered = x;
        for mut r in centered.row_iter_mut() {
            r -= mean.transpose();
        }
        let mut cov = centered.transpose() * &centered / (n - 1) as f64;
        cov = (&cov + cov.transpose()) * 0.5;
        Ok(GaussianFit {
            mean,
            cov,
            count: n,
        })
    }

    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>, count: usize) -> Result<Self> {
        let d = mean.len();
        if cov.nrows() != d || cov.ncols() != d {
            return Err(Error::Dimension(format!(
                "covariance {}x{} for mean of length {d}",
                cov.nrows(),
                cov.ncols()
            )));
        }
        if (&cov - cov.transpose()).amax() > SYMMETRY_TOLERANCE {
            return Err(Error::Numeric("covariance is not symmetric".into()));
        }
        Ok(GaussianFit { mean, cov, count })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Eigen-decomposes a symmetric PSD matrix, clamping eigenvalues in
/// `[-tol, 0)` to zero.
fn psd_eigen(m: &DMatrix<f64>, what: &str) -> Result<SymmetricEigen<f64, nalgebra::Dyn>> {
    let sym = (m + m.transpose()) * 0.5;
    let mut e = SymmetricEigen::new(sym);
    let scale = m.amax().max(1.0);
    for v in e.eigenvalues.iter_mut() {
        if *v < -PSD_TOLERANCE * scale {
            return Err(Error::Numeric(format!(
                "{what} has eigenvalue {v}, not PSD"
            )));
        }
        *v = v.max(0.0);
    }
    Ok(e)
}

fn sqrt_psd(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let e = psd_eigen(m, "covariance")?;
    let root = e.eigenvalues.map(f64::sqrt);
    Ok(&e.eigenvectors * DMatrix::from_diagonal(&root) * e.eigenvectors.transpose())
}

/// ‖μa−μb‖² + Tr(Σa + Σb − 2(ΣaΣb)^½).
///
/// Tr((ΣaΣb)^½) is computed as Σ√λ over the eigenvalues of the symmetric
/// matrix Σa^½ Σb Σa^½, which shares its spectrum with ΣaΣb.
pub fn frechet_gaussian(a: &GaussianFit, b: &GaussianFit) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::Dimension(format!(
            "fits of dimension {} and {}",
            a.dim(),
            b.dim()
        )));
    }
    let mean_term = (&a.mean - &b.mean).norm_squared();
    let root_a = sqrt_psd(&a.cov)?;
    let inner = &root_a * &b.cov * &root_a;
    let e = psd_eigen(&inner, "covariance product")?;
    let tr_sqrt: f64 = e.eigenvalues.iter().map(|v| v.sqrt()).sum();
    let fd = mean_term + a.cov.trace() + b.cov.trace() - 2.0 * tr_sqrt;
    Ok(fd.max(0.0))
}

/// Degree-3 polynomial kernel (u·v/d + 1)³.
pub fn poly_kernel(u: &[f64], v: &[f64]) -> f64 {
    let d = u.len() as f64;
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    (dot / d + 1.0).powi(3)
}

/// Unbiased MMD² with [`poly_kernel`], scaled by 10³.
pub fn kid_mmd(x: &Tensor, y: &Tensor) -> Result<f64> {
    let (m, dx) = rows(x)?;
    let (n, dy) = rows(y)?;
    if dx != dy {
        return Err(Error::Dimension(format!(
            "sample sets of dimension {dx} and {dy}"
        )));
    }
    if m < 2 || n < 2 {
        return Err(Error::Contract(format!(
            "KID needs at least 2 samples per set, got {m} and {n}"
        )));
    }
    let within = |t: &Tensor, k: usize| {
        let mut s = 0.0;
        for i in 0..k {
            for j in i + 1..k {
                s += poly_kernel(row(t, i), row(t, j));
            }
        }
        2.0 * s / (k * (k - 1)) as f64
    };
    let mut cross = 0.0;
    for i in 0..m {
        for j in 0..n {
            cross += poly_kernel(row(x, i), row(y, j));
        }
    }
    let mmd = within(x, m) + within(y, n) - 2.0 * cross / (m * n) as f64;
    Ok(mmd * 1e3)
}

/// Stand-in for a perceptual distance.
#[derive(Debug, Clone, PartialEq)]
pub enum DistanceProxy {
    Euclidean,
    /// Euclidean distance after a fixed linear embedding (`out × in`, row-major).
    Projected {
        input_dim: usize,
        matrix: Vec<f64>,
    },
}

impl DistanceProxy {
    /// Gaussian projection to [`PROJECTION_DIM`] dimensions, scaled so
    /// squared norms are preserved in expectation.
    pub fn projected(input_dim: usize, seed: u64) -> Self {
        let mut rng = stream(seed, Stream::Embedding);
        let scale = 1.0 / (PROJECTION_DIM as f64).sqrt();
        let matrix = (0..PROJECTION_DIM * input_dim)
            .map(|_| {
                let v: f64 = StandardNormal.sample(&mut rng);
                scale * v
            })
            .collect();
        DistanceProxy::Projected { input_dim, matrix }
    }

    pub fn embed(&self, x: &[f64]) -> Vec<f64> {
        match self {
            DistanceProxy::Euclidean => x.to_vec(),
            DistanceProxy::Projected { input_dim, matrix } => matrix
                .chunks_exact(*input_dim)
                .map(|r| r.iter().zip(x).map(|(a, b)| a * b).sum())
                .collect(),
        }
    }

    fn embed_all(&self, t: &Tensor) -> Result<(Vec<f64>, usize)> {
        let (n, d) = rows(t)?;
        if let DistanceProxy::Projected { input_dim, .. } = self {
            if *input_dim != d {
                return Err(Error::Dimension(format!(
                    "projection expects dimension {input_dim}, got {d}"
                )));
            }
        }
        let out: Vec<f64> = (0..n).flat_map(|i| self.embed(row(t, i))).collect();
        let width = out.len() / n;
        Ok((out, width))
    }
}

/// Generated samples are clustered by their nearest few-shot target; the
/// result is the total within-cluster pair distance over the total number of
/// within-cluster pairs, with every pair enumerated.
pub fn intra_diversity(
    generated: &Tensor,
    targets: &Tensor,
    distance: &DistanceProxy,
) -> Result<f64> {
    let (g, e) = distance.embed_all(generated)?;
    let (t, et) = distance.embed_all(targets)?;
    if e != et {
        return Err(Error::Dimension(format!(
            "generated dim {e} vs target dim {et}"
        )));
    }
    let n_targets = t.len() / e;
    let mut clusters: Vec<Vec<&[f64]>> = vec![Vec::new(); n_targets];
    for x in g.chunks_exact(e) {
        clusters[argmin_dist(x, &t, e).0].push(x);
    }
    let mut total = 0.0;
    let mut pairs = 0usize;
    for c in &clusters {
        for i in 0..c.len() {
            for j in i + 1..c.len() {
                total += dist(c[i], c[j]);
                pairs += 1;
            }
        }
    }
    Ok(if pairs == 0 {
        0.0
    } else {
        total / pairs as f64
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ModeLabel {
    Shared,
    SourceOnly,
    TargetOnly,
}

impl ModeLabel {
    pub fn as_str(self) -> &'static str {
        match self {
            ModeLabel::Shared => "shared",
            ModeLabel::SourceOnly => "source-only",
            ModeLabel::TargetOnly => "target-only",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "shared" => Ok(ModeLabel::Shared),
            "source-only" => Ok(ModeLabel::SourceOnly),
            "target-only" => Ok(ModeLabel::TargetOnly),
            _ => Err(Error::Format(format!("unknown mode label `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModeSpec {
    dim: usize,
    centers: Vec<f64>,
    labels: Vec<ModeLabel>,
}

impl ModeSpec {
    pub fn new(centers: Vec<Vec<f64>>, labels: Vec<ModeLabel>) -> Result<Self> {
        if centers.is_empty() || centers.len() != labels.len() {
            return Err(Error::Contract(format!(
                "{} centers with {} labels",
                centers.len(),
                labels.len()
            )));
        }
        let dim = centers[0].len();
        if dim == 0 || centers.iter().any(|c| c.len() != dim) {
            return Err(Error::Dimension(
                "mode centers must share a positive dimension".into(),
            ));
        }
        for i in 0..centers.len() {
            for j in i + 1..centers.len() {
                if centers[i] == centers[j] {
                    return Err(Error::Contract(format!(
                        "mode centers {i} and {j} coincide"
                    )));
                }
            }
        }
        Ok(ModeSpec {
            dim,
            centers: centers.concat(),
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn center(&self, i: usize) -> &[f64] {
        &self.centers[i * self.dim..(i + 1) * self.dim]
    }

    pub fn labels(&self) -> &[ModeLabel] {
        &self.labels
    }

    pub fn nearest(&self, x: &[f64]) -> usize {
        argmin_dist(x, &self.centers, self.dim).0
    }

    /// Fraction of samples whose nearest center is each mode.
    pub fn mode_masses(&self, generated: &Tensor) -> Result<Vec<f64>> {
        let (n, d) = rows(generated)?;
        if d != self.dim {
            return Err(Error::Dimension(format!(
                "samples of dimension {d}, modes of dimension {}",
                self.dim
            )));
        }
        let mut counts = vec![0usize; self.len()];
        for i in 0..n {
            counts[self.nearest(row(generated, i))] += 1;
        }
        Ok(counts.into_iter().map(|c| c as f64 / n as f64).collect())
    }
}

/// Fraction of samples whose nearest mode center is labelled source-only.
pub fn incompatible_mass(generated: &Tensor, modes: &ModeSpec) -> Result<f64> {
    let masses = modes.mode_masses(generated)?;
    Ok(masses
        .iter()
        .zip(modes.labels())
        .filter(|(_, &l)| l == ModeLabel::SourceOnly)
        .map(|(m, _)| m)
        .sum())
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterAttribution {
    pub filter_id: usize,
    pub layer: usize,
    pub state: Assignment,
    /// Per-mode mass with the filter ablated minus the unablated mass.
    pub deltas: Vec<f64>,
}

/// Ablates each generator filter in turn on a working copy and records how
/// the per-mode mass of samples from `latents` shifts.
pub fn filter_mode_attribution(
    gan: &Gan,
    layout: &FilterLayout,
    bank: &MemoryBank,
    modes: &ModeSpec,
    latents: &Tensor,
) -> Result<Vec<FilterAttribution>> {
    if bank.len() != layout.len() {
        return Err(Error::Contract(format!(
            "bank has {} entries for {} filters",
            bank.len(),
            layout.len()
        )));
    }
    let base = modes.mode_masses(&gan.generate(latents)?)?;
    let mut work = gan.generator.clone();
    let mut out = Vec::new();
    for f in &layout.filters[layout.range(NetworkId::Generator)] {
        work.zero_filter(f.local);
        let masses = modes.mode_masses(&work.infer(latents)?)?;
        work.layers[f.layer] = gan.generator.layers[f.layer].clone();
        out.push(FilterAttribution {
            filter_id: f.filter_id,
            layer: f.layer,
            state: bank.get(f.filter_id),
            deltas: masses.iter().zip(&base).map(|(a, b)| a - b).collect(),
        });
    }
    debug_assert!(work == gan.generator);
    Ok(out)
}

/// Index of and distance to the pool row nearest `target`; ties go to the
/// lowest index.
pub fn nearest_neighbor(target: &[f64], pool: &Tensor) -> Result<(usize, f64)> {
    let (_, d) = rows(pool)?;
    if d != target.len() {
        return Err(Error::Dimension(format!(
            "target of dimension {}, pool of dimension {d}",
            target.len()
        )));
    }
    let (i, sq) = argmin_dist(target, pool.data(), d);
    Ok((i, sq.sqrt()))
}

/// Generator outputs along the segment (1−α)z1 + αz2, α evenly spaced in [0, 1].
pub fn interpolate_latents(gan: &Gan, z1: &[f64], z2: &[f64], steps: usize) -> Result<Tensor> {
    if steps < 2 {
        return Err(Error::Contract(format!(
            "interpolation needs at least 2 steps, got {steps}"
        )));
    }
    if z1.len() != gan.latent_dim || z2.len() != gan.latent_dim {
        return Err(Error::Dimension(format!(
            "latents must have length {}",
            gan.latent_dim
        )));
    }
    let mut z = Vec::with_capacity(steps * z1.len());
    for s in 0..steps {
        let alpha = s as f64 / (steps - 1) as f64;
        z.extend(
            z1.iter()
                .zip(z2)
                .map(|(a, b)| (1.0 - alpha) * a + alpha * b),
        );
    }
    gan.generate(&Tensor::new(vec![steps, gan.latent_dim], z)?)
}
