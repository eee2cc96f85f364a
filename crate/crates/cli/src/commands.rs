use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use serde_json::json;
use sleepnet::data::{generate_synthetic, read_csv_recording, read_dataset, write_dataset, Dataset};
use sleepnet::dsp::{stft_spectrogram, N_BINS, N_FRAMES};
use sleepnet::gradsuite;
use sleepnet::model::SleepNet;
use sleepnet::training::{
    ablate, evaluate, finetune_run, mask_sweep, pretrain_run, stage0_train, Stage, StageSteps, MASK_SWEEP, VARIANTS,
};
use sleepnet::{Error, Result};

use crate::args::{Cli, Command};
use crate::settings::{base, resolve};

pub fn run(cli: Cli) -> Result<()> {
    let Cli { config, seed, out, log, command } = cli;
    let cfg_path = config.as_deref();
    let log_path = log.as_deref();
    match command {
        Command::Synth { recordings, epochs } => {
            let out = required(out)?;
            let ds = generate_synthetic(recordings, epochs, seed.unwrap_or(0));
            write_dataset(&ds, &out)?;
            println!("wrote {} recordings, {} epochs to {}", ds.recordings.len(), ds.num_epochs(), out.display());
            Ok(())
        }
        Command::Spectrogram { data, recording, epoch, csv } => {
            let ds = load_data(&data.data)?;
            let picks = select_epochs(&ds, recording, epoch)?;
            if csv {
                let text = spectrogram_csv(&ds, &picks);
                match out {
                    Some(p) => fs::write(&p, text)?,
                    None => print!("{text}"),
                }
            } else {
                let out = required(out)?;
                write_spectrogram_bin(&ds, &picks, &out)?;
                println!("wrote {} spectrograms to {}", picks.len(), out.display());
            }
            Ok(())
        }
        Command::Stage0 { data, train } => {
            let out = required(out)?;
            let cfg = resolve(Stage::Stage0, &train, None, cfg_path, seed)?;
            let ds = load_data(&data.data)?;
            let res = stage0_train(&ds, &cfg, log_path)?;
            let extra = json!({
                "seed": cfg.seed,
                "final_loss": res.final_loss,
                "train_acc_sg": res.train_acc_sg,
                "train_acc_sp": res.train_acc_sp,
                "val_acc_sg": res.val_sg.as_ref().map(|m| m.accuracy),
                "val_acc_sp": res.val_sp.as_ref().map(|m| m.accuracy),
            });
            res.net.save(&out, &res.store, Stage::Stage0.name(), extra.clone())?;
            println!("{}", serde_json::to_string_pretty(&extra).unwrap_or_default());
            Ok(())
        }
        Command::Pretrain { data, init, from_scratch, train, mask } => {
            let out = required(out)?;
            let mut cfg = resolve(Stage::Pretrain, &train, Some(&mask), cfg_path, seed)?;
            cfg.from_scratch = from_scratch;
            let start = match init {
                Some(p) => Some(load_checkpoint(&p, &[Stage::Stage0])?),
                None => None,
            };
            if let Some((net, _)) = &start {
                cfg.model = net.cfg.clone();
            }
            let ds = load_data(&data.data)?;
            let res = pretrain_run(&ds, &cfg, start, log_path)?;
            finish_run(&out, Stage::Pretrain, cfg.seed, res)
        }
        Command::Finetune { data, init, train } => {
            let out = required(out)?;
            let mut cfg = resolve(Stage::Finetune, &train, None, cfg_path, seed)?;
            let start = load_checkpoint(&init, &[Stage::Pretrain])?;
            cfg.model = start.0.cfg.clone();
            let ds = load_data(&data.data)?;
            let res = finetune_run(&ds, &cfg, Some(start), log_path)?;
            finish_run(&out, Stage::Finetune, cfg.seed, res)
        }
        Command::Eval { data, checkpoint } => {
            let (net, store) = load_checkpoint(&checkpoint, &[Stage::Stage0, Stage::Pretrain, Stage::Finetune])?;
            let ds = load_data(&data.data)?;
            let m = evaluate(&ds, &net, &store)?;
            let mut v = serde_json::to_value(&m).map_err(|e| Error::Format(e.to_string()))?;
            v["epochs"] = json!(m.total());
            let text = serde_json::to_string_pretty(&v).map_err(|e| Error::Format(e.to_string()))?;
            if let Some(p) = out {
                fs::write(p, format!("{text}\n"))?;
            }
            println!("{text}");
            Ok(())
        }
        Command::Ablate { data, variants, mask_sweep: sweep, stage0_steps, pretrain_steps, finetune_steps, train } => {
            let out = required(out)?;
            let cfg = resolve(Stage::Pretrain, &train, None, cfg_path, seed)?;
            let ds = load_data(&data.data)?;
            let steps = StageSteps { stage0: stage0_steps, pretrain: pretrain_steps, finetune: finetune_steps };
            let report = if sweep {
                mask_sweep(&ds, &MASK_SWEEP, &cfg, steps)?
            } else {
                let names: Vec<&str> = if variants.is_empty() { VARIANTS.to_vec() } else { variants.iter().map(String::as_str).collect() };
                ablate(&ds, &names, &cfg, steps)?
            };
            fs::create_dir_all(&out)?;
            fs::write(out.join("ablation.csv"), report.to_csv())?;
            fs::write(out.join("ablation.txt"), report.to_text())?;
            print!("{}", report.to_text());
            Ok(())
        }
        Command::Gradcheck => {
            let results = gradsuite::run_all()?;
            let mut failed = Vec::new();
            for r in &results {
                let status = if r.passed() { "ok" } else { "FAIL" };
                println!("{:<24} {:>10.3e}  tol {:.0e}  {status}", r.name, r.max_rel_error, r.tolerance);
                if !r.passed() {
                    failed.push(r.name.clone());
                }
            }
            if failed.is_empty() {
                Ok(())
            } else {
                Err(Error::Evaluation(format!("gradient check failed for {}", failed.join(", "))))
            }
        }
        Command::Describe { scale } => {
            let cfg = base(Stage::Pretrain, scale);
            let (net, _) = SleepNet::new::<f32>(&cfg.model, seed.unwrap_or(0))?;
            let layers = net.describe();
            let total: usize = layers.iter().map(|l| l.params).sum();
            let v = json!({ "model": cfg.model, "layers": layers, "total_params": total });
            let text = serde_json::to_string_pretty(&v).map_err(|e| Error::Format(e.to_string()))?;
            if let Some(p) = out {
                fs::write(p, format!("{text}\n"))?;
            }
            println!("{text}");
            Ok(())
        }
    }
}

fn required(out: Option<PathBuf>) -> Result<PathBuf> {
    out.ok_or_else(|| Error::Input("this command needs --out".into()))
}

/// Reads a `.slpd` container or a single-recording `.csv` fixture.
pub fn load_data(path: &Path) -> Result<Dataset> {
    if !path.exists() {
        return Err(Error::Input(format!("dataset not found: {}", path.display())));
    }
    match path.extension().and_then(|e| e.to_str()) {
        Some("slpd") => read_dataset(path),
        Some("csv") => {
            let id = path.file_stem().and_then(|s| s.to_str()).unwrap_or("recording");
            let rec = read_csv_recording(path, id)?;
            Ok(Dataset { recordings: vec![rec], source: path.display().to_string() })
        }
        _ => Err(Error::Input(format!("unsupported dataset extension: {}", path.display()))),
    }
}

fn load_checkpoint(dir: &Path, allowed: &[Stage]) -> Result<(SleepNet, sleepnet::diffcore::ParamStore<f32>)> {
    if !dir.exists() {
        return Err(Error::State(format!("checkpoint not found: {}", dir.display())));
    }
    let (net, store, meta) = SleepNet::load(dir)?;
    let stage = meta["stage"].as_str().unwrap_or("");
    if !allowed.iter().any(|s| s.name() == stage) {
        let want: Vec<&str> = allowed.iter().map(|s| s.name()).collect();
        return Err(Error::State(format!("checkpoint {} is from stage `{stage}`, expected {}", dir.display(), want.join(" or "))));
    }
    info!("loaded {stage} checkpoint from {}", dir.display());
    Ok((net, store))
}

fn finish_run(out: &Path, stage: Stage, seed: u64, res: sleepnet::training::TrainOutcome) -> Result<()> {
    let extra = json!({
        "seed": seed,
        "best_val": res.best_val,
        "steps_run": res.steps_run,
        "stopped_early": res.stopped_early,
        "final_loss": res.log.rows.last().map(|r| r.loss_total),
    });
    res.net.save(out, &res.store, stage.name(), extra.clone())?;
    println!("{}", serde_json::to_string_pretty(&extra).unwrap_or_default());
    Ok(())
}

fn select_epochs(ds: &Dataset, recording: Option<usize>, epoch: Option<usize>) -> Result<Vec<(usize, usize)>> {
    let recs: Vec<usize> = match recording {
        Some(r) if r >= ds.recordings.len() => return Err(Error::Input(format!("recording {r} out of range 0..{}", ds.recordings.len()))),
        Some(r) => vec![r],
        None => (0..ds.recordings.len()).collect(),
    };
    let mut picks = Vec::new();
    for r in recs {
        let n = ds.recordings[r].epochs.len();
        match epoch {
            Some(e) if e >= n => return Err(Error::Input(format!("epoch {e} out of range 0..{n} in recording {r}"))),
            Some(e) => picks.push((r, e)),
            None => picks.extend((0..n).map(|e| (r, e))),
        }
    }
    Ok(picks)
}

fn spectrogram_csv(ds: &Dataset, picks: &[(usize, usize)]) -> String {
    let mut s = String::from("recording,epoch,frame");
    for k in 0..N_BINS {
        let _ = write!(s, ",bin{k}");
    }
    s.push('\n');
    for &(r, e) in picks {
        let spec = stft_spectrogram(&ds.recordings[r].epochs[e].raw);
        for t in 0..N_FRAMES {
            let _ = write!(s, "{r},{e},{t}");
            for v in spec.frame(t) {
                let _ = write!(s, ",{v}");
            }
            s.push('\n');
        }
    }
    s
}

/// `[N,29,129]` little-endian f32 at `out`, header JSON at `<out>.json`.
fn write_spectrogram_bin(ds: &Dataset, picks: &[(usize, usize)], out: &Path) -> Result<()> {
    let mut bytes = Vec::with_capacity(picks.len() * N_FRAMES * N_BINS * 4);
    for &(r, e) in picks {
        for v in stft_spectrogram(&ds.recordings[r].epochs[e].raw).values {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(out, bytes)?;
    let header = json!({ "n": picks.len(), "frames": N_FRAMES, "bins": N_BINS });
    let mut name = out.as_os_str().to_owned();
    name.push(".json");
    fs::write(PathBuf::from(name), format!("{header}\n"))?;
    Ok(())
}
