//! `handreg`: generate data, train, evaluate, infer and tabulate results.
//!
//! Exit codes: 0 success, 1 usage, 2 data error, 3 numeric failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use handreg_core::geometry::{BoundingBox, StereoRig};
use handreg_core::hand_model::write_obj;
use handreg_core::harness::{
    self, evaluate, infer, loss_table, pck_table, read_text, train_with, write_file, EvalReport, HarnessError, InferView, TrainConfig, TrainedModel,
};
use handreg_core::kv::KvDoc;
use handreg_core::synth::{self, dequantize, from_pgm, rig_preset, to_pgm, Dataset, Split, SynthConfig};

#[derive(Parser)]
#[command(name = "handreg", version, about = "Stereo fisheye 3D hand regression")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    GenData {
        /// Key-value dataset config; missing keys take their defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: u64,
        /// Rig file; defaults to the built-in fisheye pair.
        #[arg(long)]
        rig: Option<PathBuf>,
        /// Generate records on a single thread.
        #[arg(long)]
        serial: bool,
    },
    /// Train a model and write a checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config's `data` entry.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Per-step metrics log; defaults to `<out>.log.tsv`.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on one split.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
        #[arg(long)]
        report: PathBuf,
    },
    /// Predict a hand from one or two crops (PGM).
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, requires = "left_box")]
        left: Option<PathBuf>,
        #[arg(long, requires = "right_box")]
        right: Option<PathBuf>,
        /// Box of the left crop in full-image pixels: `x0,y0,x1,y1`.
        #[arg(long)]
        left_box: Option<String>,
        #[arg(long)]
        right_box: Option<String>,
        /// Rig file; defaults to the rig stored in the checkpoint.
        #[arg(long)]
        rig: Option<PathBuf>,
        /// Write the decoded mesh as OBJ.
        #[arg(long)]
        obj: Option<PathBuf>,
    },
    /// Write PCK and loss tables for plotting.
    Plot {
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Metrics log written by `train`.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Export one crop of a dataset record as PGM and print its box.
    ExportCrop {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        id: usize,
        #[arg(long, value_enum, default_value_t = ViewArg::Left)]
        view: ViewArg,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ViewArg {
    Left,
    Right,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cmd: Command) -> harness::Result<()> {
    match cmd {
        Command::GenData {
            config,
            out,
            seed,
            rig,
            serial,
        } => {
            let cfg = match config {
                Some(p) => SynthConfig::read_kv(&KvDoc::parse(&read_text(&p)?, None)?)?,
                None => SynthConfig::default(),
            };
            let rig = load_rig(rig.as_deref())?.unwrap_or_else(rig_preset);
            let m = synth::generate_dataset(&cfg, &rig, seed, &out, !serial)?;
            println!(
                "{} records ({} stereo, {:.3}) in {} shards at {}",
                m.records,
                m.stereo_records,
                m.stereo_fraction(),
                m.shards,
                out.display()
            );
        }
        Command::Train { config, data, out, log } => {
            let base = config.parent().unwrap_or(Path::new("."));
            let cfg = TrainConfig::from_text(&read_text(&config)?, base, data.as_deref())?;
            let ds = Dataset::open(&cfg.data)?;
            let mut last_epoch = usize::MAX;
            let outcome = train_with(&cfg, &ds, |m| {
                if m.epoch != last_epoch {
                    last_epoch = m.epoch;
                    log::info!("epoch {} step {} loss {:.3}", m.epoch, m.step, m.total);
                }
            })?;
            outcome.model.save(&out, Some(&cfg))?;
            let log_path = log.unwrap_or_else(|| with_suffix(&out, ".log.tsv"));
            write_file(&log_path, outcome.log.to_text().as_bytes())?;
            let last = outcome.log.rows.last().map_or(f64::NAN, |m| m.total);
            println!("{} steps, final loss {last:.4}; checkpoint {}", outcome.log.rows.len(), out.display());
        }
        Command::Eval { ckpt, data, split, report } => {
            let model = TrainedModel::load(&ckpt)?;
            let ds = Dataset::open(&data)?;
            let r = evaluate(&model, &ds, split.into())?;
            write_file(&report, r.to_text().as_bytes())?;
            print!("{}", r.table());
        }
        Command::Infer {
            ckpt,
            left,
            right,
            left_box,
            right_box,
            rig,
            obj,
        } => {
            let model = TrainedModel::load(&ckpt)?;
            let rig = load_rig(rig.as_deref())?.unwrap_or(model.rig);
            let mut views = Vec::new();
            for (v, img, bbox) in [(0, left, left_box), (1, right, right_box)] {
                if let (Some(img), Some(bbox)) = (img, bbox) {
                    views.push(load_view(v, &img, &bbox)?);
                }
            }
            if views.is_empty() {
                return Err(HarnessError::Config("give --left and/or --right".into()));
            }
            let res = infer(&model, &rig, &views)?;
            println!("path {}", res.path);
            for (k, p) in res.state.keypoints3d.iter().enumerate() {
                println!("kp {k} {:.4} {:.4} {:.4}", p.x, p.y, p.z);
            }
            if let Some(p) = obj {
                write_file(&p, write_obj(&res.decoded_vertices, &model.template.faces).as_bytes())?;
            }
        }
        Command::Plot { report, out, log } => {
            let r = EvalReport::from_text(&read_text(&report)?)?;
            std::fs::create_dir_all(&out).map_err(|source| HarnessError::Io { path: out.clone(), source })?;
            write_file(&out.join("pck.tsv"), pck_table(&r)?.as_bytes())?;
            if let Some(l) = log {
                write_file(&out.join("loss.tsv"), loss_table(&read_text(&l)?)?.as_bytes())?;
            }
            println!("tables written to {}", out.display());
        }
        Command::ExportCrop { data, id, view, out } => {
            let ds = Dataset::open(&data)?;
            let rec = ds
                .records
                .get(id)
                .ok_or_else(|| HarnessError::Data(format!("record {id} does not exist ({} records)", ds.records.len())))?;
            let v = view as usize;
            let s = rec.views[v]
                .as_ref()
                .ok_or_else(|| HarnessError::Data(format!("record {id} has no {} view", ["left", "right"][v])))?;
            write_file(&out, &to_pgm(&s.crop, ds.manifest.config.crop_size))?;
            let b = s.bbox;
            println!("{},{},{},{}", b.x_min, b.y_min, b.x_max, b.y_max);
        }
    }
    Ok(())
}

fn with_suffix(p: &Path, suffix: &str) -> PathBuf {
    let mut s = p.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn load_rig(path: Option<&Path>) -> harness::Result<Option<StereoRig>> {
    path.map(|p| Ok(StereoRig::from_text(&read_text(p)?)?)).transpose()
}

fn load_view(view: usize, img: &Path, bbox: &str) -> harness::Result<InferView> {
    let bytes = std::fs::read(img).map_err(|source| HarnessError::Io { path: img.to_path_buf(), source })?;
    let (w, h, pixels) = from_pgm(&bytes)?;
    if w != h {
        return Err(HarnessError::Data(format!("{}: crops must be square, got {w}×{h}", img.display())));
    }
    let c: Vec<f64> = bbox
        .split(',')
        .map(|s| s.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|_| HarnessError::Config(format!("bad box `{bbox}`, want x0,y0,x1,y1")))?;
    let [x0, y0, x1, y1] = c[..] else {
        return Err(HarnessError::Config(format!("bad box `{bbox}`, want x0,y0,x1,y1")));
    };
    Ok(InferView {
        view,
        crop: dequantize(&pixels),
        bbox: BoundingBox::new(x0, y0, x1, y1)?,
    })
}
