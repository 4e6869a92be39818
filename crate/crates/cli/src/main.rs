//! `dudgan`: train, evaluate and sample dual-diffusion GANs.

mod output;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use dudgan_core::autodiff::Tensor;
use dudgan_core::checkpoint::Checkpoint;
use dudgan_core::config::ExperimentConfig;
use dudgan_core::datasets::DataKind;
use dudgan_core::diffusion::standard_normal;
use dudgan_core::training::{evaluate_generator, generator_from_checkpoint, CheckpointMeta, EvalRow, Trainer};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Parser)]
#[command(name = "dudgan", version, about = "Dual-diffusion class-conditional GAN at desk scale")]
struct Cli {
    /// Experiment configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory or file, depending on the command.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Overrides the training seed, or seeds the latent draws when sampling.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Suppress progress output.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model; writes metrics.csv, checkpoints and effective-config.txt.
    Train {
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Compute a metrics report for a checkpoint on fresh samples.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
    },
    /// Draw class-conditional samples.
    Generate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long = "class")]
        class_id: usize,
        #[arg(long, default_value_t = 16)]
        n: usize,
    },
    /// Walk the class embedding from one class to another with fixed latents.
    Interpolate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        class_a: usize,
        #[arg(long)]
        class_b: usize,
        #[arg(long, default_value_t = 9)]
        steps: usize,
        /// Number of latent vectors, each giving one trajectory.
        #[arg(long, default_value_t = 1)]
        n: usize,
    },
    /// Write data noised at five timesteps under both intensity caps.
    NoiseDemo {
        #[arg(long, default_value_t = 16)]
        n: usize,
    },
}

/// Exit 1 for configuration and argument problems, 2 for runtime failures.
enum Failure {
    Config(String),
    Runtime(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Self::Config(_) => 1,
            Self::Runtime(_) => 2,
        }
    }

    fn message(&self) -> &str {
        match self {
            Self::Config(m) | Self::Runtime(m) => m,
        }
    }
}

fn runtime(e: impl std::fmt::Display) -> Failure {
    Failure::Runtime(e.to_string())
}

fn config_err(e: impl std::fmt::Display) -> Failure {
    Failure::Config(e.to_string())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}

fn dispatch(cli: &Cli) -> Result<(), Failure> {
    match &cli.command {
        Command::Train { resume } => cmd_train(cli, resume.as_deref()),
        Command::Eval { ckpt } => cmd_eval(cli, ckpt),
        Command::Generate { ckpt, class_id, n } => cmd_generate(cli, ckpt, *class_id, *n),
        Command::Interpolate { ckpt, class_a, class_b, steps, n } => {
            cmd_interpolate(cli, ckpt, *class_a, *class_b, *steps, *n)
        }
        Command::NoiseDemo { n } => cmd_noise_demo(cli, *n),
    }
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig, Failure> {
    let path = cli.config.as_deref().ok_or_else(|| config_err("--config is required"))?;
    let mut cfg = ExperimentConfig::load(path).map_err(config_err)?;
    if let Some(seed) = cli.seed {
        cfg.train.seed = seed;
    }
    cfg.validate().map_err(config_err)?;
    Ok(cfg)
}

fn out_path(cli: &Cli) -> Result<&Path, Failure> {
    cli.out.as_deref().ok_or_else(|| config_err("--out is required"))
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint, Failure> {
    if !path.exists() {
        return Err(config_err(format!("checkpoint `{}` not found", path.display())));
    }
    Checkpoint::load(path).map_err(runtime)
}

fn cmd_train(cli: &Cli, resume: Option<&Path>) -> Result<(), Failure> {
    let cfg = load_config(cli)?;
    let out = out_path(cli)?;
    let dataset = cfg.dataset.load().map_err(runtime)?;
    let mut trainer = match resume {
        Some(path) => Trainer::from_checkpoint(&cfg, &dataset, &load_checkpoint(path)?).map_err(runtime)?,
        None => Trainer::new(&cfg, &dataset).map_err(config_err)?,
    };
    fs::create_dir_all(out).map_err(|e| runtime(format!("{}: {e}", out.display())))?;
    let cfg_path = out.join("effective-config.txt");
    fs::write(&cfg_path, cfg.to_text()).map_err(|e| runtime(format!("{}: {e}", cfg_path.display())))?;
    let quiet = cli.quiet;
    trainer
        .run(&dataset, Some(out), |row: &EvalRow| {
            if !quiet {
                let m = &row.metrics;
                let mut line = format!(
                    "k={} T_D={:.3} T_C={:.3} r_d={:.3} loss_d={:.4} loss_g={:.4} fd={:.5} precision={:.3} recall={:.3}",
                    row.k, row.step.intensity_d, row.step.intensity_c, row.step.r_d, row.step.loss_d, row.step.loss_g, m.fd,
                    m.precision, m.recall
                );
                if let (Some(c), Some(f)) = (m.mode_coverage, m.class_fidelity) {
                    line.push_str(&format!(" coverage={c:.3} fidelity={f:.3}"));
                }
                println!("{line}");
            }
        })
        .map_err(runtime)?;
    if !quiet {
        if let Some((k, fd)) = trainer.best() {
            println!("best fd {fd:.5} at k={k}");
        }
    }
    Ok(())
}

fn cmd_eval(cli: &Cli, ckpt: &Path) -> Result<(), Failure> {
    let cfg = load_config(cli)?;
    let ck = load_checkpoint(ckpt)?;
    let (gen, meta) = generator_from_checkpoint(&ck).map_err(runtime)?;
    let dataset = cfg.dataset.load().map_err(runtime)?;
    if meta.num_classes != dataset.num_classes() || meta.data_dim != dataset.data_dim() {
        return Err(config_err("checkpoint and configured dataset differ in classes or dimension"));
    }
    let report = evaluate_generator(&gen, &dataset, &cfg).map_err(runtime)?;
    let header = dudgan_core::metrics::MetricsReport::csv_header(dataset.num_classes());
    let fields = report.csv_fields();
    if !cli.quiet {
        for (h, f) in header.iter().zip(&fields) {
            println!("{h} = {}", if f.is_empty() { "n/a" } else { f });
        }
    }
    if let Some(out) = &cli.out {
        let text = format!("{}\n{}\n", header.join(","), fields.join(","));
        fs::write(out, text).map_err(|e| runtime(format!("{}: {e}", out.display())))?;
    }
    Ok(())
}

fn latents(seed: u64, n: usize, d_z: usize) -> Tensor {
    standard_normal(&[n, d_z], &mut ChaCha8Rng::seed_from_u64(seed))
}

fn check_class(meta: &CheckpointMeta, class: usize) -> Result<(), Failure> {
    if class >= meta.num_classes {
        return Err(config_err(format!("class {class} out of range for a {}-class model", meta.num_classes)));
    }
    Ok(())
}

fn cmd_generate(cli: &Cli, ckpt: &Path, class_id: usize, n: usize) -> Result<(), Failure> {
    let out = out_path(cli)?;
    let ck = load_checkpoint(ckpt)?;
    let (gen, meta) = generator_from_checkpoint(&ck).map_err(runtime)?;
    check_class(&meta, class_id)?;
    let z = latents(cli.seed.unwrap_or(0), n, gen.d_z());
    let x = if n == 0 { Tensor::zeros(&[0, meta.data_dim]) } else { gen.generate(&z, &vec![class_id; n]).map_err(runtime)? };
    write_samples(out, &meta, &x, &vec![class_id; n], "sample")
}

fn cmd_interpolate(cli: &Cli, ckpt: &Path, a: usize, b: usize, steps: usize, n: usize) -> Result<(), Failure> {
    let out = out_path(cli)?;
    if steps < 2 {
        return Err(config_err("--steps must be at least 2"));
    }
    let ck = load_checkpoint(ckpt)?;
    let (gen, meta) = generator_from_checkpoint(&ck).map_err(runtime)?;
    check_class(&meta, a)?;
    check_class(&meta, b)?;
    let z = latents(cli.seed.unwrap_or(0), n, gen.d_z());
    let c = meta.num_classes;
    let mut rows = Vec::with_capacity(n * steps);
    let mut alphas = Vec::with_capacity(n * steps);
    let mut mix = Vec::with_capacity(n * steps * c);
    let mut zs = Vec::with_capacity(n * steps * gen.d_z());
    for i in 0..n {
        for s in 0..steps {
            let alpha = s as f64 / (steps - 1) as f64;
            let mut w = vec![0.0; c];
            w[a] += 1.0 - alpha;
            w[b] += alpha;
            mix.extend(w);
            zs.extend_from_slice(z.row(i));
            rows.push(i);
            alphas.push(alpha);
        }
    }
    let total = n * steps;
    let x = if total == 0 {
        Tensor::zeros(&[0, meta.data_dim])
    } else {
        let zs = Tensor::new(vec![total, gen.d_z()], zs).map_err(runtime)?;
        let mix = Tensor::new(vec![total, c], mix).map_err(runtime)?;
        gen.generate_mixed(&zs, &mix).map_err(runtime)?
    };
    output::write_trajectory(out, &meta, &x, &rows, &alphas).map_err(runtime)
}

fn write_samples(out: &Path, meta: &CheckpointMeta, x: &Tensor, labels: &[usize], stem: &str) -> Result<(), Failure> {
    match meta.kind {
        DataKind::Glyphs { side } => output::write_pgm_dir(out, stem, x, side).map_err(runtime),
        _ => output::write_points_csv(out, &meta.denormalize(x), labels).map_err(runtime),
    }
}

fn cmd_noise_demo(cli: &Cli, n: usize) -> Result<(), Failure> {
    let cfg = load_config(cli)?;
    let out = out_path(cli)?;
    let dataset = cfg.dataset.load().map_err(runtime)?;
    let schedule = cfg.diffusion.schedule().map_err(config_err)?;
    fs::create_dir_all(out).map_err(|e| runtime(format!("{}: {e}", out.display())))?;
    let per_class = n.div_ceil(dataset.num_classes()).max(1);
    let idx: Vec<usize> = (0..dataset.num_classes())
        .flat_map(|c| dataset.class_indices(c).into_iter().take(per_class))
        .take(n)
        .collect();
    let batch = dataset.gather(&idx);
    let mut rng = ChaCha8Rng::seed_from_u64(cli.seed.unwrap_or(cfg.train.seed));
    for (tag, cap) in [("d", cfg.intensity.max_d), ("c", cfg.intensity.max_c)] {
        let t_max = schedule.max_timestep(cap).map_err(runtime)?;
        for (i, t) in demo_timesteps(t_max).into_iter().enumerate() {
            let tape = dudgan_core::autodiff::Tape::new();
            let noised = schedule
                .noise_marginal(tape.constant(batch.x.clone()), t, &mut rng)
                .map_err(runtime)?
                .to_tensor();
            let stem = format!("noise-{tag}-{i}-t{t:03}");
            match dataset.kind() {
                DataKind::Glyphs { side } => {
                    output::write_pgm_grid(&out.join(format!("{stem}.pgm")), &noised, side).map_err(runtime)?
                }
                _ => output::write_points_csv(&out.join(format!("{stem}.csv")), &noised, &batch.labels)
                    .map_err(runtime)?,
            }
        }
    }
    if !cli.quiet {
        println!("wrote 10 files to {}", out.display());
    }
    Ok(())
}

/// `{1, T/4, T/2, 3T/4, T}` of the active range, rounded and kept at least 1.
fn demo_timesteps(t_max: usize) -> [usize; 5] {
    let q = |num: usize| ((t_max * num) as f64 / 4.0).round().max(1.0) as usize;
    [1, q(1), q(2), q(3), t_max]
}
