//! Command-line interface: dataset generation, teacher training,
//! distillation, evaluation, inspection dumps, and MACs accounting.
//!
//! Every command is deterministic given its flags: rerunning writes
//! byte-identical files. Exit codes: 0 success, 1 runtime failure,
//! 2 usage or configuration error.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::arch::inspect::{attention_maps, cross_similarity, self_similarity, SimilarityMatrix};
use crate::arch::IqaModel;
use crate::checkpoint::{load_model, save_model};
use crate::config::RunConfig;
use crate::distill::{distill_student, train_teacher, TrainReport};
use crate::error::{Error, Result};
use crate::macs::count_macs;
use crate::metrics::MetricsReport;
use crate::pnm::write_pgm;
use crate::synth::{load_dataset, make_dataset, reduce_resolution, save_dataset, Sample};
use crate::tensor::Tensor;

#[derive(Parser)]
#[command(
    name = "mobileiqa",
    version,
    about = "No-reference image quality assessment with multi-view attention, \
             teacher/student distillation, and a synthetic benchmark"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct ConfigArgs {
    /// Run configuration JSON; defaults apply for missing fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config field, e.g. --set train.alpha=0 (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        for set in &self.sets {
            cfg.apply_set(set)?;
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic dataset: PPM images plus manifest.csv.
    GenData {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 500)]
        count: usize,
        /// Square image edge in pixels (at least 32).
        #[arg(long, default_value_t = 64)]
        size: usize,
        /// Fraction of samples in the training split.
        #[arg(long, default_value_t = 0.8)]
        split: f32,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a global-mixing (teacher) model on score regression.
    TrainTeacher {
        #[command(flatten)]
        config: ConfigArgs,
        /// Dataset directory written by gen-data.
        #[arg(long)]
        data: PathBuf,
        /// Run directory for checkpoint, report, and resolved config.
        #[arg(long)]
        out: PathBuf,
        /// Variant selector: `no-mal` drops the opinion MALs.
        #[arg(long)]
        ablation: Option<String>,
    },
    /// Distill a frozen teacher checkpoint into a student model.
    Distill {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Teacher checkpoint produced by train-teacher.
        #[arg(long)]
        teacher: PathBuf,
        /// Variant selector: `no-kd` trains on the score term alone.
        #[arg(long)]
        ablation: Option<String>,
    },
    /// Score the validation split of a dataset with a checkpoint.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated capture resolutions to sweep, e.g. 32,48,64.
        /// Images are average-pooled to each resolution and restored to
        /// native size before scoring.
        #[arg(long)]
        resize: Option<String>,
    },
    /// Dump MAL similarity matrices and per-MAL attention maps.
    Inspect {
        #[arg(long)]
        ckpt: PathBuf,
        /// Optional second checkpoint for a cross-model similarity matrix.
        #[arg(long)]
        teacher: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Number of validation images in the probe batch.
        #[arg(long, default_value_t = 8)]
        probe: usize,
    },
    /// Print the multiply-accumulate breakdown of a configuration.
    CountMacs {
        #[command(flatten)]
        config: ConfigArgs,
        /// Square input resolution.
        #[arg(long, default_value_t = 64)]
        resolution: usize,
    },
}

pub fn run() -> i32 {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) => 2,
                _ => 1,
            }
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::GenData {
            seed,
            count,
            size,
            split,
            out,
        } => cmd_gen_data(seed, count, size, split, &out),
        Cmd::TrainTeacher {
            config,
            data,
            out,
            ablation,
        } => cmd_train_teacher(&config, &data, &out, ablation.as_deref()),
        Cmd::Distill {
            config,
            data,
            out,
            teacher,
            ablation,
        } => cmd_distill(&config, &data, &out, &teacher, ablation.as_deref()),
        Cmd::Eval {
            ckpt,
            data,
            out,
            resize,
        } => cmd_eval(&ckpt, &data, &out, resize.as_deref()),
        Cmd::Inspect {
            ckpt,
            teacher,
            data,
            out,
            probe,
        } => cmd_inspect(&ckpt, teacher.as_deref(), &data, &out, probe),
        Cmd::CountMacs { config, resolution } => cmd_count_macs(&config, resolution),
    }
}

fn cmd_gen_data(seed: u64, count: usize, size: usize, split: f32, out: &Path) -> Result<()> {
    if size < 32 {
        return Err(Error::config(format!("--size must be at least 32, got {size}")));
    }
    let (train, val) = make_dataset(seed, count, size, size, split)?;
    save_dataset(out, &train, &val)?;
    println!(
        "wrote {} train + {} val samples to {}",
        train.len(),
        val.len(),
        out.display()
    );
    Ok(())
}

fn write_run_outputs(
    out: &Path,
    cfg: &RunConfig,
    report: &mut TrainReport,
    model: &IqaModel,
    ckpt_name: &str,
) -> Result<()> {
    fs::create_dir_all(out)?;
    cfg.save(&out.join("config.json"))?;
    let ckpt = out.join(ckpt_name);
    save_model(&ckpt, model)?;
    report.checkpoint = Some(ckpt);
    fs::write(out.join("report.csv"), report.to_csv())?;
    Ok(())
}

fn cmd_train_teacher(
    config: &ConfigArgs,
    data: &Path,
    out: &Path,
    ablation: Option<&str>,
) -> Result<()> {
    let mut cfg = config.resolve()?;
    cfg.model.global_mixing = true;
    match ablation {
        None => {}
        Some("no-mal") => cfg.model.no_mal = true,
        Some(other) => {
            return Err(Error::config(format!(
                "unknown ablation `{other}`; train-teacher supports `no-mal`"
            )))
        }
    }
    cfg.validate()?;
    let (train, val) = load_dataset(data)?;
    let (model, mut report) = train_teacher(&train, &val, &cfg.model, &cfg.train)?;
    write_run_outputs(out, &cfg, &mut report, &model, "teacher.ckpt")?;
    let last = report.records.last().expect("epochs >= 1");
    println!(
        "trained {} epochs; final loss {:.6}, val srcc {:.4}",
        report.records.len(),
        last.l,
        last.val_srcc
    );
    Ok(())
}

fn cmd_distill(
    config: &ConfigArgs,
    data: &Path,
    out: &Path,
    teacher_ckpt: &Path,
    ablation: Option<&str>,
) -> Result<()> {
    let mut cfg = config.resolve()?;
    cfg.model.global_mixing = false;
    let kd = match ablation {
        None => true,
        Some("no-kd") => false,
        Some(other) => {
            return Err(Error::config(format!(
                "unknown ablation `{other}`; distill supports `no-kd`"
            )))
        }
    };
    cfg.validate()?;
    let teacher = load_model(teacher_ckpt)?;
    let (train, val) = load_dataset(data)?;
    let (student, mut report) =
        distill_student(&teacher, &train, &val, &cfg.model, &cfg.train, kd)?;
    write_run_outputs(out, &cfg, &mut report, &student, "student.ckpt")?;
    let last = report.records.last().expect("epochs >= 1");
    println!(
        "distilled {} epochs; final l {:.6}, l_d {:.6}, val srcc {:.4}",
        report.records.len(),
        last.l,
        last.l_d,
        last.val_srcc
    );
    Ok(())
}

fn parse_resolutions(spec: &str) -> Result<Vec<usize>> {
    spec.split(',')
        .map(|tok| {
            tok.trim()
                .parse::<usize>()
                .map_err(|_| Error::config(format!("bad resolution `{tok}`")))
                .and_then(|r| {
                    if r == 0 {
                        Err(Error::config("resolution must be positive"))
                    } else {
                        Ok(r)
                    }
                })
        })
        .collect()
}

fn predictions(model: &IqaModel, samples: &[Sample], resize: Option<usize>) -> Result<Vec<f32>> {
    samples
        .iter()
        .map(|s| {
            let img = match resize {
                Some(r) => reduce_resolution(&s.image, r)?,
                None => s.image.detach(),
            };
            model.predict(&img)
        })
        .collect()
}

fn cmd_eval(ckpt: &Path, data: &Path, out: &Path, resize: Option<&str>) -> Result<()> {
    let model = load_model(ckpt)?;
    let (_, val) = load_dataset(data)?;
    let mos: Vec<f32> = val.iter().map(|s| s.mos).collect();
    if let Some(parent) = out.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    let csv = match resize {
        None => {
            let preds = predictions(&model, &val, None)?;
            let report = MetricsReport::compute(&preds, &mos)?;
            format!("{}\n{}\n", MetricsReport::CSV_HEADER, report.csv_row())
        }
        Some(spec) => {
            let mut csv = format!("resolution,{}\n", MetricsReport::CSV_HEADER);
            for r in parse_resolutions(spec)? {
                let preds = predictions(&model, &val, Some(r))?;
                let report = MetricsReport::compute(&preds, &mos)?;
                csv.push_str(&format!("{r},{}\n", report.csv_row()));
            }
            csv
        }
    };
    fs::write(out, &csv)?;
    print!("{csv}");
    Ok(())
}

fn similarity_csv(matrix: &SimilarityMatrix) -> String {
    let m = matrix.len();
    let mut csv: String = (0..m)
        .map(|i| format!("mal_{i}"))
        .collect::<Vec<_>>()
        .join(",");
    csv.push('\n');
    for row in matrix {
        let cells: Vec<String> = row
            .iter()
            .map(|c| c.map_or("NaN".to_string(), |v| v.to_string()))
            .collect();
        csv.push_str(&cells.join(","));
        csv.push('\n');
    }
    csv
}

fn cmd_inspect(
    ckpt: &Path,
    teacher_ckpt: Option<&Path>,
    data: &Path,
    out: &Path,
    probe: usize,
) -> Result<()> {
    if probe == 0 {
        return Err(Error::config("--probe must be at least 1"));
    }
    let model = load_model(ckpt)?;
    let (_, val) = load_dataset(data)?;
    let probe_images: Vec<Tensor> = val
        .iter()
        .take(probe)
        .map(|s| s.image.detach())
        .collect();
    fs::create_dir_all(out)?;
    let own = self_similarity(&model, &probe_images)?;
    fs::write(out.join("self_similarity.csv"), similarity_csv(&own))?;
    if let Some(t_path) = teacher_ckpt {
        let teacher = load_model(t_path)?;
        let cross = cross_similarity(&teacher, &model, &probe_images)?;
        fs::write(out.join("cross_similarity.csv"), similarity_csv(&cross))?;
    }
    for (j, img) in probe_images.iter().enumerate() {
        let maps = attention_maps(&model, img)?;
        for (i, map) in maps.maps.iter().enumerate() {
            let name = format!("attn_{j:02}_mal_{i}.pgm");
            write_pgm(&out.join(name), map, maps.h, maps.w)?;
        }
    }
    println!(
        "inspected {} probe images with {} MALs; wrote {}",
        probe_images.len(),
        model.cfg.m,
        out.display()
    );
    Ok(())
}

fn cmd_count_macs(config: &ConfigArgs, resolution: usize) -> Result<()> {
    let cfg = config.resolve()?;
    let breakdown = count_macs(&cfg.model, resolution, resolution)?;
    print!("{}", breakdown.table());
    Ok(())
}
