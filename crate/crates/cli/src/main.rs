use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ossod_core::annotations::{class_frequencies, parse_annotation_set, AnnotationSet, ImageInfo};
use ossod_core::cce::{balance_library, build_library, load_library, save_library, synthesize, SynthesisConfig};
use ossod_core::error::{CceError, Error};
use ossod_core::fusion::{build_threshold_table, fuse, FusionConfig};
use ossod_core::harness::{run_ablation_with, RunConfig, Variant};
use ossod_core::metrics::{evaluate, ApTable};
use ossod_core::raster::{load_ppm, save_ppm, RasterImage};
use ossod_core::world::{ImageStore, Split};

type Result<T> = std::result::Result<T, Error>;

#[derive(Parser)]
#[command(name = "ossod", version, about = "Class-balanced open-set semi-supervised detection tools")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Per-class object counts and percentages of an annotation file.
    Stats {
        #[arg(long)]
        annotations: PathBuf,
        /// Also write the JSON report here.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Cut one foreground segment per ground-truth box.
    BuildLibrary {
        #[arg(long)]
        annotations: PathBuf,
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Resample every class of a library to the mean class frequency.
    BalanceLibrary {
        #[arg(long)]
        library: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Blend library segments into unlabeled images.
    Synthesize(SynthesizeArgs),
    /// Append unknown detections to known pseudo-labels.
    Fuse(FuseArgs),
    /// AP50 per known class and their mean.
    Eval {
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        pred: PathBuf,
        #[arg(long, default_value_t = ossod_core::metrics::AP50)]
        iou: f64,
        /// Also write the JSON report here.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Run the four-variant ablation on the shape world.
    Simulate {
        /// Flat key = value config; defaults when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,5")]
        seeds: Vec<u64>,
        #[arg(long)]
        out: PathBuf,
        /// Write every generated world as PPM images plus annotation files.
        #[arg(long)]
        dump_world: bool,
    },
}

#[derive(Args)]
struct SynthesizeArgs {
    #[arg(long)]
    library: PathBuf,
    #[arg(long)]
    unlabeled: PathBuf,
    #[arg(long)]
    images: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    beta: f64,
    #[arg(long, default_value_t = 0.8)]
    score: f64,
    #[arg(long, default_value_t = 3)]
    placements: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct FuseArgs {
    #[arg(long)]
    known: PathBuf,
    #[arg(long)]
    unknown: PathBuf,
    /// AP report written by `eval --json`.
    #[arg(long)]
    ap: PathBuf,
    #[arg(long, default_value_t = 1.5)]
    gamma: f64,
    #[arg(long, default_value_t = 0.7)]
    iou_gate: f64,
    #[arg(long, default_value_t = 0.5)]
    base_threshold: f64,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (tag, code) = category(&e);
            eprintln!("error[{tag}]: {e}");
            let mut src = std::error::Error::source(&e);
            while let Some(s) = src {
                eprintln!("  caused by: {s}");
                src = s.source();
            }
            ExitCode::from(code)
        }
    }
}

fn category(e: &Error) -> (&'static str, u8) {
    match e {
        Error::Io { .. } => ("io", 3),
        Error::Annotation(_) => ("annotations", 4),
        Error::Geometry(_) | Error::Raster(_) => ("raster", 5),
        Error::Metrics(_) => ("metrics", 6),
        Error::Fusion(_) => ("fusion", 7),
        Error::Cce(_) => ("cce", 8),
        Error::Ema(_) => ("ema", 9),
        Error::World(_) | Error::Config(_) => ("config", 10),
        Error::Iteration { source, .. } => category(source),
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        mkdir(dir)?;
    }
    fs::write(path, text).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn mkdir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|source| Error::Io {
        path: dir.to_path_buf(),
        source,
    })
}

fn loader(dir: &Path) -> impl FnMut(&ImageInfo) -> std::result::Result<RasterImage, CceError> + '_ {
    move |info| {
        load_ppm(dir.join(&info.file_name)).map_err(|e| CceError::Unloadable {
            image_id: info.id,
            reason: e.to_string(),
        })
    }
}

fn save_images(set: &AnnotationSet, images: &ImageStore, dir: &Path) -> Result<()> {
    mkdir(dir)?;
    for info in &set.images {
        if let Some(img) = images.get(&info.id) {
            save_ppm(img, dir.join(&info.file_name))?;
        }
    }
    Ok(())
}

fn save_split(split: &Split, dir: &Path) -> Result<()> {
    save_images(&split.truth, &split.images, dir)?;
    write(&dir.join("annotations.json"), &split.truth.to_json_string())
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Stats { annotations, json } => {
            let set = parse_annotation_set(&annotations)?;
            let st = class_frequencies(&set);
            let names: BTreeMap<u32, &str> = set.categories.iter().map(|c| (c.id, c.name.as_str())).collect();
            println!("{:<6} {:<24} {:>8} {:>8}", "id", "category", "count", "percent");
            for (c, n) in &st.counts {
                println!("{:<6} {:<24} {:>8} {:>8.2}", c, names.get(c).unwrap_or(&"?"), n, st.percentages[c]);
            }
            println!("{:<6} {:<24} {:>8}", "", "total", st.total);
            if let Some(p) = json {
                write(&p, &serde_json::to_string_pretty(&st).expect("stats serialize"))?;
            }
        }
        Command::BuildLibrary { annotations, images, out } => {
            let set = parse_annotation_set(&annotations)?;
            let lib = build_library(&set, loader(&images))?;
            save_library(&lib, &out)?;
            print_library("built", &lib);
        }
        Command::BalanceLibrary { library, seed, out } => {
            let lib = balance_library(&load_library(&library)?, seed)?;
            save_library(&lib, &out)?;
            print_library("balanced", &lib);
        }
        Command::Synthesize(a) => {
            let lib = load_library(&a.library)?;
            let unlabeled = parse_annotation_set(&a.unlabeled)?;
            let cfg = SynthesisConfig {
                beta: a.beta,
                synthetic_score: a.score,
                placements_per_image: a.placements,
                seed: a.seed,
            };
            let syn = synthesize(&lib, &unlabeled, loader(&a.images), &cfg)?;
            save_images(&syn.set, &syn.images, &a.out)?;
            write(&a.out.join("annotations.json"), &syn.set.to_json_string())?;
            println!(
                "{} images, {} annotations, {} segments skipped",
                syn.images.len(),
                syn.set.annotations.len(),
                syn.skipped
            );
        }
        Command::Fuse(a) => {
            let known = parse_annotation_set(&a.known)?;
            let unknown = parse_annotation_set(&a.unknown)?;
            let text = fs::read_to_string(&a.ap).map_err(|source| Error::Io {
                path: a.ap.clone(),
                source,
            })?;
            let aps = ApTable::from_json_str(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", a.ap.display())))?;
            let cfg = FusionConfig {
                gamma: a.gamma,
                iou_gate: a.iou_gate,
                base_unknown_threshold: a.base_threshold,
            };
            let table = build_threshold_table(&aps, &known.categories, &cfg)?;
            let fused = fuse(&known, &unknown, &table, &cfg)?;
            write(&a.out, &fused.to_json_string())?;
            for (c, t) in &table.0 {
                println!("T[{c}] = {t:.5}");
            }
            println!(
                "{} known + {} unknown appended of {}",
                known.annotations.len(),
                fused.annotations.len() - known.annotations.len(),
                unknown.annotations.len()
            );
        }
        Command::Eval { gt, pred, iou, json } => {
            let g = parse_annotation_set(&gt)?;
            let p = parse_annotation_set(&pred)?;
            let aps = evaluate(&g, &p, iou)?;
            let names = g.categories.iter().map(|c| (c.id, c.name.clone())).collect();
            print!("{}", aps.render(&names));
            if let Some(j) = json {
                write(&j, &aps.to_json_string())?;
            }
        }
        Command::Simulate {
            config,
            seeds,
            out,
            dump_world,
        } => simulate(config.as_deref(), &seeds, &out, dump_world)?,
    }
    Ok(())
}

fn print_library(what: &str, lib: &ossod_core::cce::ForegroundLibrary) {
    println!("{what} library: {} segments, target frequency {:.3}", lib.len(), lib.target_frequency());
    for (c, n) in lib.frequencies() {
        println!("  class {c}: {n}");
    }
}

fn slug(v: Variant) -> &'static str {
    match v {
        Variant::Baseline => "baseline",
        Variant::Cce => "cce",
        Variant::Oodfc => "oodfc",
        Variant::Both => "cce_oodfc",
    }
}

fn simulate(config: Option<&Path>, seeds: &[u64], out: &Path, dump_world: bool) -> Result<()> {
    let cfg = match config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|source| Error::Io {
                path: p.to_path_buf(),
                source,
            })?;
            RunConfig::from_kv_str(&text)?
        }
        None => RunConfig::default(),
    };
    mkdir(out)?;
    write(&out.join("config.txt"), &cfg.to_kv_string())?;
    let report = run_ablation_with(&cfg, seeds, |seed, world, results| {
        let dir = out.join(format!("seed_{seed}"));
        for (v, r) in results {
            let d = dir.join(slug(*v));
            write(&d.join("predictions.json"), &r.test_predictions.to_json_string())?;
            write(&d.join("ap.json"), &r.test_ap.to_json_string())?;
            let losses = serde_json::to_string(&r.losses).expect("losses serialize");
            write(&d.join("losses.json"), &losses)?;
        }
        if dump_world {
            let w = dir.join("world");
            save_split(&world.labeled, &w.join("labeled"))?;
            let unl = &world.unlabeled;
            save_images(&unl.truth, &unl.images, &w.join("unlabeled"))?;
            write(&w.join("unlabeled").join("annotations.json"), &unl.unlabeled_view().to_json_string())?;
            write(&w.join("unlabeled").join("truth.json"), &unl.truth.to_json_string())?;
            save_split(&world.test, &w.join("test"))?;
            save_split(&world.validation, &w.join("validation"))?;
        }
        eprintln!("seed {seed} done");
        Ok(())
    })?;
    let text = report.render();
    write(&out.join("report.json"), &report.to_json_string())?;
    write(&out.join("report.txt"), &text)?;
    print!("{text}");
    Ok(())
}
