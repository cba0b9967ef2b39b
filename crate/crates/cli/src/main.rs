use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use rick_core::checkpoint::Checkpoint;
use rick_core::evaluation::{frechet_gaussian, incompatible_mass, GaussianFit};
use rick_core::harness::config::{EvalConfig, RunConfig};
use rick_core::harness::data::{read_modes, SourceSpec, SyntheticData, TargetSpec, Testbed};
use rick_core::harness::report::{discover_runs, write_report};
use rick_core::harness::resolve_output;
use rick_core::harness::run::{
    attribution_report, evaluate_gan, fisher_snapshot, pretrain_source, run_adaptation,
    run_experiment, PretrainConfig, Setup, FIXED_LATENTS,
};
use rick_core::models::sample_latent;
use rick_core::rng::{stream, Stream};

#[derive(Parser)]
#[command(
    name = "rick",
    version,
    about = "Few-shot GAN adaptation with filter freezing and pruning"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by `adapt` and `experiment`; each overrides the config file.
#[derive(clap::Args, Clone, Default)]
struct AdaptFlags {
    /// key=value file applied before the flags below
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    estimator: Option<String>,
    #[arg(long)]
    shots: Option<usize>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    warmup: Option<usize>,
    #[arg(long)]
    interval: Option<usize>,
    #[arg(long)]
    prune_rate: Option<f64>,
    #[arg(long)]
    t_high: Option<f64>,
    #[arg(long)]
    source: PathBuf,
    #[arg(long)]
    data: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic source/target domains
    GenData {
        #[arg(long, default_value = "point")]
        testbed: Testbed,
        #[arg(long, default_value_t = 10)]
        shots: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the source GAN
    Pretrain {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = PretrainConfig::default().iters)]
        iters: usize,
        #[arg(long, default_value_t = PretrainConfig::default().batch)]
        batch: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Adapt the source GAN to the few-shot target
    Adapt {
        #[arg(long, default_value = "rick")]
        method: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        flags: AdaptFlags,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint against the target domain
    Evaluate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Per-filter ablation of mode masses
    Attribute {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        modes: PathBuf,
        /// target data for a Fisher snapshot to correlate against
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value_t = 1000)]
        samples: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run methods × seeds and write one directory per run
    Experiment {
        #[arg(long, value_delimiter = ',', default_value = "tgan,ewc,rick")]
        methods: Vec<String>,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
        seeds: Vec<u64>,
        #[command(flatten)]
        flags: AdaptFlags,
        #[arg(long)]
        out: PathBuf,
    },
    /// Aggregate finished runs
    Report {
        #[arg(long, num_args = 1.., required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn build_config(method: &str, seed: u64, flags: &AdaptFlags) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(p) = &flags.config {
        let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
        cfg.apply(&text)?;
    }
    let mut kv = format!("method={method}\nseed={seed}\n");
    let mut set = |k: &str, v: Option<String>| {
        if let Some(v) = v {
            kv.push_str(&format!("{k}={v}\n"));
        }
    };
    set("estimator", flags.estimator.clone());
    set("iters", flags.iters.map(|v| v.to_string()));
    set("warmup", flags.warmup.map(|v| v.to_string()));
    set("interval", flags.interval.map(|v| v.to_string()));
    set("prune_rate", flags.prune_rate.map(|v| v.to_string()));
    set("t_high", flags.t_high.map(|v| v.to_string()));
    cfg.apply(&kv)?;
    Ok(cfg)
}

fn load_setup(flags: &AdaptFlags, eval: EvalConfig) -> Result<Setup> {
    let mut data = SyntheticData::load(&flags.data)
        .with_context(|| format!("loading {}", flags.data.display()))?;
    if let Some(k) = flags.shots {
        data = data.with_shots(k)?;
    }
    let source = Checkpoint::load(&flags.source)?.gan;
    Ok(Setup::new(source, data, eval, 0)?)
}

fn print_metrics(m: &rick_core::harness::run::Metrics) {
    println!("fd_target={}", m.fd_target);
    println!("kid_e3={}", m.kid_e3);
    println!("intra_div={}", m.intra_div);
    println!("incompat_mass={}", m.incompat_mass);
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::GenData {
            testbed,
            shots,
            seed,
            out,
        } => {
            let out = resolve_output(&out);
            let target = TargetSpec {
                shots,
                ..TargetSpec::default()
            };
            let data = SyntheticData::generate(SourceSpec::for_testbed(testbed), target, seed)?;
            data.save(&out)?;
            println!(
                "wrote {} source / {} target samples to {}",
                data.source.len(),
                data.target.len(),
                out.display()
            );
        }
        Command::Pretrain {
            data,
            iters,
            batch,
            seed,
            out,
        } => {
            let out = resolve_output(&out);
            let data = SyntheticData::load(&data)?;
            let cfg = PretrainConfig {
                iters,
                batch,
                ..PretrainConfig::default()
            };
            let gan = pretrain_source(&data.source, data.source_spec.testbed.arch(), &cfg, seed)?;
            let z = sample_latent(5000, gan.latent_dim, &mut stream(seed, Stream::Eval));
            let samples = gan.generate(&z)?;
            let fd = frechet_gaussian(
                &GaussianFit::fit(&samples)?,
                &GaussianFit::fit(&data.source_holdout.to_tensor()?)?,
            )?;
            println!("fd_source_holdout={fd}");
            println!(
                "incompat_mass={}",
                incompatible_mass(&samples, &data.modes)?
            );
            if let Some(dir) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
                fs::create_dir_all(dir)?;
            }
            Checkpoint::new(gan, None, 0, seed).save(&out)?;
        }
        Command::Adapt {
            method,
            seed,
            flags,
            out,
        } => {
            let cfg = build_config(&method, seed, &flags)?;
            let setup = load_setup(&flags, cfg.eval)?;
            let out = resolve_output(&out);
            let report = run_adaptation(&setup, &method, &cfg, Some(&out))?;
            if let Some(last) = report.rows.last() {
                print_metrics(&last.metrics);
            }
            println!(
                "pruned_g={} pruned_d={}",
                report.bank.pruned_g, report.bank.pruned_d
            );
        }
        Command::Evaluate { ckpt, data, seed } => {
            let ck = Checkpoint::load(&ckpt)?;
            let data = SyntheticData::load(&data)?;
            let setup = Setup::new(ck.gan, data, EvalConfig::default(), 0)?;
            print_metrics(&evaluate_gan(&setup.source, &setup.ctx, seed)?);
        }
        Command::Attribute {
            ckpt,
            modes,
            data,
            samples,
            out,
        } => {
            let ck = Checkpoint::load(&ckpt)?;
            let modes = read_modes(&modes)?;
            let latents = sample_latent(
                samples.max(FIXED_LATENTS),
                ck.gan.latent_dim,
                &mut stream(0, Stream::FixedLatents),
            );
            let fisher = match data {
                Some(d) => {
                    let data = SyntheticData::load(&d)?;
                    Some(fisher_snapshot(&ck.gan, &data.target, 50, 4, ck.seed)?)
                }
                None => None,
            };
            let rep =
                attribution_report(&ck.gan, ck.bank.as_ref(), &modes, &latents, fisher.as_ref())?;
            match out {
                Some(p) => fs::write(resolve_output(&p), &rep.csv)?,
                None => print!("{}", rep.csv),
            }
            match rep.correlation {
                Some(r) => eprintln!("spearman(fisher quantile, |source-only delta|) = {r:.4}"),
                None if fisher.is_some() => eprintln!("correlation undefined (constant ranks)"),
                None => {}
            }
        }
        Command::Experiment {
            methods,
            seeds,
            flags,
            out,
        } => {
            let base = build_config("rick", 0, &flags)?;
            let setup = load_setup(&flags, base.eval)?;
            let out = resolve_output(&out);
            let entries = run_experiment(&setup, &methods, &base, &seeds, &out)?;
            let mut dirs = Vec::new();
            for e in &entries {
                match &e.result {
                    Ok(_) => dirs.push(e.dir.clone()),
                    Err(msg) => eprintln!("{} seed {} failed: {msg}", e.method, e.seed),
                }
            }
            if dirs.is_empty() {
                bail!("every run failed");
            }
            let refs: Vec<&Path> = dirs.iter().map(PathBuf::as_path).collect();
            let n = write_report(&refs, &out.join("report"))?;
            println!("{n} runs aggregated into {}", out.join("report").display());
        }
        Command::Report { runs, out } => {
            let refs: Vec<&Path> = runs.iter().map(PathBuf::as_path).collect();
            let dirs = discover_runs(&refs)?;
            let refs: Vec<&Path> = dirs.iter().map(PathBuf::as_path).collect();
            let out = resolve_output(&out);
            let n = write_report(&refs, &out)?;
            println!("{n} runs aggregated into {}", out.display());
        }
    }
    Ok(())
}
