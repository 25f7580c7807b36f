use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use voxmt_core::io;
use voxmt_core::metrics::{metrics_kv_text, miou, pq};
use voxmt_core::pipeline::{
    current_panoptic, init_weights, run_pipeline, synth_scene, GroundTruth, Model, PipelineConfig, RunOptions,
};
use voxmt_core::selftest;
use voxmt_core::tta::make_tta_set;
use voxmt_core::weights::WeightStore;

#[derive(Parser)]
#[command(name = "voxmt", version, about = "Voxel multi-task LiDAR segmentation and detection")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write a seeded synthetic scene with its labels and boxes.
    Synth {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        objects: usize,
        #[arg(long, default_value_t = 20_000)]
        points: usize,
        /// Label file; defaults to the output path with a `.lbl` extension.
        #[arg(long)]
        labels: Option<PathBuf>,
        /// Ground-truth boxes; defaults to the output path with a `.box` extension.
        #[arg(long)]
        gt_boxes: Option<PathBuf>,
        /// Config file or profile name supplying the thing classes.
        #[arg(long, default_value = "toy")]
        config: String,
    },
    /// Write a freshly initialized weight store for a configuration.
    Init {
        #[arg(long, default_value = "toy")]
        config: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the full key=value configuration of a config file or profile.
    Config {
        #[arg(long, default_value = "toy")]
        config: String,
    },
    /// Run the pipeline on a point cloud.
    Run {
        #[arg(long)]
        config: String,
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Average first-stage scores over the test-time augmentation set.
        #[arg(long)]
        tta: bool,
        #[arg(long)]
        boxes: Option<PathBuf>,
        /// Ground-truth labels; prints the loss report when given.
        #[arg(long)]
        gt: Option<PathBuf>,
        #[arg(long, requires = "gt")]
        gt_boxes: Option<PathBuf>,
    },
    /// Score a panoptic prediction against ground-truth labels.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// Point cloud of the scene; past-sweep points are then left out.
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long, default_value = "toy")]
        config: String,
        /// Per-class CSV output.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Run the acceptance checks and print one line per criterion.
    Selftest {
        /// Run a single criterion.
        #[arg(long)]
        criterion: Option<u32>,
    },
}

fn load_config(spec: &str) -> Result<PipelineConfig> {
    let path = Path::new(spec);
    if path.exists() {
        return PipelineConfig::load(path).with_context(|| format!("loading config {spec}"));
    }
    Ok(PipelineConfig::profile(spec)?)
}

fn sibling(path: &Path, ext: &str) -> PathBuf {
    path.with_extension(ext)
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Synth { seed, out, objects, points, labels, gt_boxes, config } => {
            let cfg = load_config(&config)?;
            let scene = synth_scene(seed, objects, points, &cfg.thing_classes);
            let labels = labels.unwrap_or_else(|| sibling(&out, "lbl"));
            let gt_boxes = gt_boxes.unwrap_or_else(|| sibling(&out, "box"));
            io::save_points(&out, &scene.cloud)?;
            io::save_labels(&labels, &scene.labels)?;
            io::save_boxes(&gt_boxes, &scene.boxes)?;
            println!(
                "wrote {} points, {} boxes to {} ({}, {})",
                scene.cloud.len(),
                scene.boxes.len(),
                out.display(),
                labels.display(),
                gt_boxes.display()
            );
        }
        Cmd::Init { config, seed, out } => {
            let cfg = load_config(&config)?;
            let ws = init_weights(&cfg, seed)?;
            ws.save(&out)?;
            println!("wrote {} tensors to {}", ws.len(), out.display());
        }
        Cmd::Config { config } => print!("{}", load_config(&config)?.to_kv_text()),
        Cmd::Run { config, weights, input, out, tta, boxes, gt, gt_boxes } => {
            let cfg = load_config(&config)?;
            let ws = WeightStore::load(&weights).with_context(|| format!("loading weights {}", weights.display()))?;
            let model = Model::new(&cfg, ws)?;
            let cloud = io::load_points(&input).with_context(|| format!("reading {}", input.display()))?;
            let truth = match &gt {
                Some(p) => Some(GroundTruth {
                    labels: io::load_labels(p)?,
                    boxes: match &gt_boxes {
                        Some(b) => io::load_boxes(b)?,
                        None => Vec::new(),
                    },
                }),
                None => None,
            };
            let set = make_tta_set();
            let opts = RunOptions { ground_truth: truth.as_ref(), tta: tta.then_some(&set[..]) };
            let result = run_pipeline(&cloud, &model, &opts)?;
            io::save_panoptic(&out, &result.panoptic)?;
            if let Some(b) = &boxes {
                io::save_boxes(b, &result.boxes)?;
            }
            log::info!("{} points, {} boxes", cloud.len(), result.boxes.len());
            if let Some(l) = &result.losses {
                print!("{}", l.to_kv_text());
            }
            if let Some((bce, ce)) = result.stage2_losses {
                println!("loss.stage2_point_bce={bce:.9}\nloss.stage2_box_ce={ce:.9}");
            }
            println!("wrote {} labels to {}", result.panoptic.len(), out.display());
        }
        Cmd::Eval { pred, gt, input, config, csv } => {
            let cfg = load_config(&config)?;
            let mut p = io::load_panoptic(&pred)?;
            let mut g = io::load_labels(&gt)?;
            if p.len() != g.len() {
                bail!(voxmt_core::Error::input(format!("{} predicted points, {} labeled points", p.len(), g.len())));
            }
            if let Some(i) = &input {
                let cloud = io::load_points(i)?;
                if cloud.len() != g.len() {
                    bail!(voxmt_core::Error::input("point cloud and labels differ in length"));
                }
                p = current_panoptic(&p, &cloud);
                g = current_panoptic(&g, &cloud);
            }
            let things: Vec<u32> = cfg.thing_classes.iter().map(|&c| c as u32).collect();
            let stuff: Vec<u32> = cfg.thing_map().stuff_classes().into_iter().map(|c| c as u32).collect();
            let m = miou(&p.semantic, &g.semantic, cfg.num_classes, &[])?;
            let q = pq(&p, &g, &things, &stuff)?;
            print!("{}", metrics_kv_text(&m, Some(&q)));
            if let Some(path) = csv {
                let mut text = String::from("class,iou,pq,sq,rq,tp,fp,fn\n");
                for c in &q.per_class {
                    let iou = m.per_class[c.class as usize].map_or(String::new(), |v| format!("{v:.6}"));
                    text += &format!("{},{iou},{:.6},{:.6},{:.6},{},{},{}\n", c.class, c.pq, c.sq, c.rq, c.tp, c.fp, c.fn_);
                }
                std::fs::write(&path, text)?;
            }
        }
        Cmd::Selftest { criterion } => {
            let outcomes = match criterion {
                Some(id) => vec![selftest::run_criterion(id)],
                None => selftest::run_all(),
            };
            for o in &outcomes {
                println!("{}", o.line());
            }
            let failed = outcomes.iter().filter(|o| !o.passed).count();
            println!("{} of {} criteria passed", outcomes.len() - failed, outcomes.len());
            if failed > 0 {
                bail!("{failed} criteria failed");
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = e.downcast_ref::<voxmt_core::Error>().map_or(1, |c| c.exit_code());
            ExitCode::from(code as u8)
        }
    }
}
