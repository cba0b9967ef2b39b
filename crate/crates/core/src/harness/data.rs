//! Synthetic source and few-shot target domains.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand_distr::{Distribution, Normal};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::evaluation::{ModeLabel, ModeSpec};
use crate::models::{Arch, ICON_SIDE};
use crate::rng::{stream, Rng, Stream};

use super::config::KeyValues;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Testbed {
    Point,
    Icon,
}

impl Testbed {
    pub fn as_str(self) -> &'static str {
        match self {
            Testbed::Point => "point",
            Testbed::Icon => "icon",
        }
    }

    pub fn arch(self) -> Arch {
        match self {
            Testbed::Point => Arch::PointMlp,
            Testbed::Icon => Arch::IconConv,
        }
    }

    pub fn dim(self) -> usize {
        self.arch().data_dim()
    }
}

impl fmt::Display for Testbed {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Testbed {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "point" => Ok(Testbed::Point),
            "icon" => Ok(Testbed::Icon),
            _ => Err(Error::Config(format!("unknown testbed `{s}`"))),
        }
    }
}

const GLYPHS: [[&str; ICON_SIDE]; 8] = [
    [
        "........", "........", "........", "########", "########", "........", "........",
        "........",
    ],
    [
        "...##...", "...##...", "...##...", "...##...", "...##...", "...##...", "...##...",
        "...##...",
    ],
    [
        "...##...", "...##...", "...##...", "########", "########", "...##...", "...##...",
        "...##...",
    ],
    [
        "#......#", ".#....#.", "..#..#..", "...##...", "...##...", "..#..#..", ".#....#.",
        "#......#",
    ],
    [
        "########", "#......#", "#......#", "#......#", "#......#", "#......#", "#......#",
        "########",
    ],
    [
        "........", "........", "..####..", "..####..", "..####..", "..####..", "........",
        "........",
    ],
    [
        "##......", ".##.....", "..##....", "...##...", "....##..", ".....##.", "......##",
        ".......#",
    ],
    [
        "#.......", "#.......", "#.......", "#.......", "#.......", "#.......", "#.......",
        "########",
    ],
];

fn glyph(i: usize) -> Vec<f64> {
    GLYPHS[i]
        .iter()
        .flat_map(|r| r.chars().map(|c| if c == '#' { 1.0 } else { -1.0 }))
        .collect()
}

/// Moves a glyph `by` pixels right, filling with background.
fn shift_glyph(g: &[f64], by: usize) -> Vec<f64> {
    let mut out = vec![-1.0; g.len()];
    for r in 0..ICON_SIDE {
        for c in by..ICON_SIDE {
            out[r * ICON_SIDE + c] = g[r * ICON_SIDE + c - by];
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct SourceSpec {
    pub testbed: Testbed,
    pub modes: usize,
    /// Ring radius (point testbed only).
    pub radius: f64,
    pub std: f64,
    pub per_mode: usize,
}

impl SourceSpec {
    pub fn point() -> Self {
        SourceSpec {
            testbed: Testbed::Point,
            modes: 8,
            radius: 4.0,
            std: 0.15,
            per_mode: 2000,
        }
    }

    pub fn icon() -> Self {
        SourceSpec {
            testbed: Testbed::Icon,
            modes: GLYPHS.len(),
            radius: 0.0,
            std: 0.15,
            per_mode: 500,
        }
    }

    pub fn for_testbed(t: Testbed) -> Self {
        match t {
            Testbed::Point => SourceSpec::point(),
            Testbed::Icon => SourceSpec::icon(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.modes < 4 {
            return Err(Error::Config(format!(
                "need at least 4 source modes, got {}",
                self.modes
            )));
        }
        if self.std <= 0.0 || !self.std.is_finite() {
            return Err(Error::Config(format!(
                "mode std must be positive, got {}",
                self.std
            )));
        }
        if self.per_mode == 0 {
            return Err(Error::Config("samples per mode must be positive".into()));
        }
        match self.testbed {
            Testbed::Point if self.radius <= 0.0 => {
                Err(Error::Config("ring radius must be positive".into()))
            }
            Testbed::Icon if self.modes > GLYPHS.len() => Err(Error::Config(format!(
                "only {} glyphs are available",
                GLYPHS.len()
            ))),
            _ => Ok(()),
        }
    }

    pub fn center(&self, i: usize) -> Vec<f64> {
        match self.testbed {
            Testbed::Point => {
                let a = 2.0 * std::f64::consts::PI * i as f64 / self.modes as f64;
                vec![self.radius * a.cos(), self.radius * a.sin()]
            }
            Testbed::Icon => glyph(i),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TargetSpec {
    pub shared: Vec<usize>,
    /// Source modes whose displaced copies form the target-only modes.
    pub novel: Vec<usize>,
    /// Radial displacement (point) or pixel shift, rounded (icon).
    pub shift: f64,
    pub shots: usize,
}

impl Default for TargetSpec {
    fn default() -> Self {
        TargetSpec {
            shared: vec![0, 2, 4],
            novel: vec![6],
            shift: 1.0,
            shots: 10,
        }
    }
}

impl TargetSpec {
    pub fn validate(&self, source: &SourceSpec) -> Result<()> {
        let mut all = self.shared.clone();
        all.sort_unstable();
        all.dedup();
        if all.len() != self.shared.len()
            || all.iter().chain(&self.novel).any(|&m| m >= source.modes)
        {
            return Err(Error::Config(
                "shared/novel modes must be distinct source mode indices".into(),
            ));
        }
        if self.shared.is_empty() && self.novel.is_empty() {
            return Err(Error::Config("target needs at least one mode".into()));
        }
        if self.shared.len() >= source.modes {
            return Err(Error::Config(
                "at least one source mode must be excluded from the target".into(),
            ));
        }
        if self.shots == 0 {
            return Err(Error::Config("shot count must be at least 1".into()));
        }
        if self.shift <= 0.0 {
            return Err(Error::Config("novel-mode shift must be positive".into()));
        }
        Ok(())
    }

    /// Shared centers first, then the novel ones.
    pub fn centers(&self, source: &SourceSpec) -> Vec<Vec<f64>> {
        let mut c: Vec<Vec<f64>> = self.shared.iter().map(|&m| source.center(m)).collect();
        for &m in &self.novel {
            let base = source.center(m);
            c.push(match source.testbed {
                Testbed::Point => {
                    let f = (source.radius + self.shift) / source.radius;
                    base.iter().map(|v| v * f).collect()
                }
                Testbed::Icon => shift_glyph(&base, (self.shift.round() as usize).max(1)),
            });
        }
        c
    }
}

/// Every source mode (shared or source-only) followed by the target-only modes.
pub fn mode_spec(source: &SourceSpec, target: &TargetSpec) -> Result<ModeSpec> {
    let mut centers: Vec<Vec<f64>> = (0..source.modes).map(|m| source.center(m)).collect();
    let mut labels: Vec<ModeLabel> = (0..source.modes)
        .map(|m| {
            if target.shared.contains(&m) {
                ModeLabel::Shared
            } else {
                ModeLabel::SourceOnly
            }
        })
        .collect();
    let tc = target.centers(source);
    for c in tc.into_iter().skip(target.shared.len()) {
        centers.push(c);
        labels.push(ModeLabel::TargetOnly);
    }
    ModeSpec::new(centers, labels)
}

fn draw(centers: &[Vec<f64>], counts: &[usize], std: f64, rng: &mut Rng) -> Result<Dataset> {
    let noise = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
    let dim = centers[0].len();
    let mut values = Vec::new();
    let mut labels = Vec::new();
    for (m, (c, &n)) in centers.iter().zip(counts).enumerate() {
        for _ in 0..n {
            values.extend(c.iter().map(|v| v + noise.sample(rng)));
            labels.push(m);
        }
    }
    Dataset::with_labels(dim, values, labels)
}

pub fn gen_source(spec: &SourceSpec, rng: &mut Rng) -> Result<Dataset> {
    spec.validate()?;
    let centers: Vec<Vec<f64>> = (0..spec.modes).map(|m| spec.center(m)).collect();
    draw(&centers, &vec![spec.per_mode; spec.modes], spec.std, rng)
}

/// `shots` samples dealt round-robin over the target modes. Labels index
/// [`TargetSpec::centers`].
pub fn gen_target(source: &SourceSpec, target: &TargetSpec, rng: &mut Rng) -> Result<Dataset> {
    target.validate(source)?;
    let centers = target.centers(source);
    let k = centers.len();
    let counts: Vec<usize> = (0..k)
        .map(|m| target.shots / k + usize::from(m < target.shots % k))
        .collect();
    draw(&centers, &counts, source.std, rng)
}

/// A large sample of the full target distribution, used as the reference
/// set for distribution metrics.
pub fn gen_reference(
    source: &SourceSpec,
    target: &TargetSpec,
    per_mode: usize,
    rng: &mut Rng,
) -> Result<Dataset> {
    target.validate(source)?;
    let centers = target.centers(source);
    draw(&centers, &vec![per_mode; centers.len()], source.std, rng)
}

pub const REFERENCE_PER_MODE: usize = 1250;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticData {
    pub seed: u64,
    pub source_spec: SourceSpec,
    pub target_spec: TargetSpec,
    pub source: Dataset,
    /// Held-out source samples for checking pretraining.
    pub source_holdout: Dataset,
    pub target: Dataset,
    pub reference: Dataset,
    pub modes: ModeSpec,
}

impl SyntheticData {
    pub fn generate(source_spec: SourceSpec, target_spec: TargetSpec, seed: u64) -> Result<Self> {
        let mut rng = stream(seed, Stream::Data);
        let source = gen_source(&source_spec, &mut rng)?;
        let holdout_spec = SourceSpec {
            per_mode: source_spec.per_mode.div_ceil(4),
            ..source_spec.clone()
        };
        let source_holdout = gen_source(&holdout_spec, &mut rng)?;
        let target = gen_target(&source_spec, &target_spec, &mut rng)?;
        let reference = gen_reference(&source_spec, &target_spec, REFERENCE_PER_MODE, &mut rng)?;
        let modes = mode_spec(&source_spec, &target_spec)?;
        Ok(SyntheticData {
            seed,
            source_spec,
            target_spec,
            source,
            source_holdout,
            target,
            reference,
            modes,
        })
    }

    /// The same domains with a different shot count.
    pub fn with_shots(&self, shots: usize) -> Result<Self> {
        let target_spec = TargetSpec {
            shots,
            ..self.target_spec.clone()
        };
        SyntheticData::generate(self.source_spec.clone(), target_spec, self.seed)
    }

    pub fn spec_echo(&self) -> KeyValues {
        let s = &self.source_spec;
        let t = &self.target_spec;
        let list = |v: &[usize]| {
            v.iter()
                .map(|m| m.to_string())
                .collect::<Vec<_>>()
                .join(",")
        };
        let mut kv = KeyValues::default();
        kv.push("seed", self.seed);
        kv.push("testbed", s.testbed);
        kv.push("modes", s.modes);
        kv.push("radius", s.radius);
        kv.push("std", s.std);
        kv.push("per_mode", s.per_mode);
        kv.push("shared", list(&t.shared));
        kv.push("novel", list(&t.novel));
        kv.push("shift", t.shift);
        kv.push("shots", t.shots);
        kv
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let spec = dir.join("data.txt");
        fs::write(&spec, self.spec_echo().render()).map_err(|e| Error::io(&spec, e))?;
        write_dataset(&dir.join("source.csv"), &self.source)?;
        write_dataset(&dir.join("source_holdout.csv"), &self.source_holdout)?;
        write_dataset(&dir.join("target.csv"), &self.target)?;
        write_dataset(&dir.join("reference.csv"), &self.reference)?;
        write_modes(&dir.join("modes.csv"), &self.modes)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let spec = dir.join("data.txt");
        let text = fs::read_to_string(&spec).map_err(|e| Error::io(&spec, e))?;
        let mut kv = KeyValues::parse(&text)?;
        let list = |s: String| -> Result<Vec<usize>> {
            if s.is_empty() {
                return Ok(Vec::new());
            }
            s.split(',')
                .map(|m| {
                    m.parse()
                        .map_err(|_| Error::Config(format!("bad mode index `{m}`")))
                })
                .collect()
        };
        let seed = kv.take_parsed("seed")?;
        let source_spec = SourceSpec {
            testbed: kv.take_parsed("testbed")?,
            modes: kv.take_parsed("modes")?,
            radius: kv.take_parsed("radius")?,
            std: kv.take_parsed("std")?,
            per_mode: kv.take_parsed("per_mode")?,
        };
        let target_spec = TargetSpec {
            shared: list(kv.take("shared")?)?,
            novel: list(kv.take("novel")?)?,
            shift: kv.take_parsed("shift")?,
            shots: kv.take_parsed("shots")?,
        };
        kv.finish()?;
        source_spec.validate()?;
        target_spec.validate(&source_spec)?;
        Ok(SyntheticData {
            seed,
            source: read_dataset(&dir.join("source.csv"))?,
            source_holdout: read_dataset(&dir.join("source_holdout.csv"))?,
            target: read_dataset(&dir.join("target.csv"))?,
            reference: read_dataset(&dir.join("reference.csv"))?,
            modes: read_modes(&dir.join("modes.csv"))?,
            source_spec,
            target_spec,
        })
    }
}

fn header(dim: usize, last: &str) -> Vec<String> {
    let mut h: Vec<String> = (0..dim).map(|i| format!("x{i}")).collect();
    h.push(last.into());
    h
}

pub fn write_dataset(path: &Path, data: &Dataset) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header(data.dim, "label"))?;
    for (i, r) in data.rows().enumerate() {
        let mut rec: Vec<String> = r.iter().map(|v| v.to_string()).collect();
        rec.push(data.labels[i].map(|l| l.to_string()).unwrap_or_default());
        w.write_record(rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let mut r = csv::Reader::from_path(path)?;
    let dim = r
        .headers()?
        .len()
        .checked_sub(1)
        .filter(|&d| d > 0)
        .ok_or_else(|| {
            Error::Format(format!(
                "{}: expected coordinate columns and a label",
                path.display()
            ))
        })?;
    let mut values = Vec::new();
    let mut labels = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        for f in rec.iter().take(dim) {
            values.push(
                f.parse::<f64>()
                    .map_err(|_| Error::Format(format!("{}: bad number `{f}`", path.display())))?,
            );
        }
        let l = &rec[dim];
        labels.push(if l.is_empty() {
            None
        } else {
            Some(
                l.parse()
                    .map_err(|_| Error::Format(format!("{}: bad label `{l}`", path.display())))?,
            )
        });
    }
    let mut d = Dataset::new(dim, values)?;
    d.labels = labels;
    Ok(d)
}

pub fn write_modes(path: &Path, modes: &ModeSpec) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header(modes.dim(), "kind"))?;
    for (i, l) in modes.labels().iter().enumerate() {
        let mut rec: Vec<String> = modes.center(i).iter().map(|v| v.to_string()).collect();
        rec.push(l.as_str().into());
        w.write_record(rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_modes(path: &Path) -> Result<ModeSpec> {
    let mut r = csv::Reader::from_path(path)?;
    let dim = r.headers()?.len().saturating_sub(1);
    let mut centers = Vec::new();
    let mut labels = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let c = rec
            .iter()
            .take(dim)
            .map(|f| {
                f.parse::<f64>()
                    .map_err(|_| Error::Format(format!("{}: bad number `{f}`", path.display())))
            })
            .collect::<Result<Vec<_>>>()?;
        centers.push(c);
        labels.push(ModeLabel::parse(&rec[dim])?);
    }
    ModeSpec::new(centers, labels)
}
