use std::fmt::Write as _;

use serde::Serialize;

use super::config::{Stage, TrainConfig};
use super::metrics::Metrics;
use super::prepare::Prepared;
use super::stages::{evaluate_windows, finetune_run, pretrain_run, stage0_train, Stage0Outcome, TrainOutcome};
use crate::data::Dataset;
use crate::diffcore::ParamStore;
use crate::error::{input_err, Result};
use crate::model::SleepNet;

pub const VARIANTS: [&str; 7] = ["TF_only", "CNN_only", "TF_CNN_multi", "TF_CNN_CL_FT", "TF_CNN_M_FT", "TF_CNN_PT", "TF_CNN_PT_FT"];

pub const MASK_SWEEP: [f64; 3] = [0.15, 0.5, 0.7];

/// Step budgets of the three stages.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StageSteps {
    pub stage0: usize,
    pub pretrain: usize,
    pub finetune: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRow {
    pub variant: String,
    pub accuracy: f64,
    pub macro_f1: f64,
    /// Validation epochs scored.
    pub epochs: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("variant,accuracy,macro_f1,epochs\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{:.4},{:.4},{}", r.variant, r.accuracy, r.macro_f1, r.epochs);
        }
        s
    }

    pub fn to_text(&self) -> String {
        let w = self.rows.iter().map(|r| r.variant.len()).max().unwrap_or(0).max("variant".len());
        let mut s = format!("{:<w$}  {:>8}  {:>8}  {:>6}\n", "variant", "ACC", "MF1", "epochs");
        for r in &self.rows {
            let _ = writeln!(s, "{:<w$}  {:>8.4}  {:>8.4}  {:>6}", r.variant, r.accuracy, r.macro_f1, r.epochs);
        }
        s
    }
}

fn row(variant: &str, m: &Metrics) -> AblationRow {
    AblationRow { variant: variant.to_string(), accuracy: m.accuracy, macro_f1: m.macro_f1, epochs: m.total() }
}

fn stage_cfg(base: &TrainConfig, stage: Stage, steps: usize) -> TrainConfig {
    TrainConfig { stage, steps, loss_weights: None, ..base.clone() }
}

/// Shared state of one ablation run: data, stage-0 weights and the full
/// pre-training run reused by several variants.
struct Bench<'a> {
    ds: &'a Dataset,
    prep: Prepared,
    base: &'a TrainConfig,
    steps: StageSteps,
    stage0: Option<Stage0Outcome>,
}

impl Bench<'_> {
    fn stage0(&mut self) -> Result<&Stage0Outcome> {
        if self.stage0.is_none() {
            self.stage0 = Some(stage0_train(self.ds, &stage_cfg(self.base, Stage::Stage0, self.steps.stage0), None)?);
        }
        Ok(self.stage0.as_ref().expect("set above"))
    }

    fn init(&mut self) -> Result<(SleepNet, ParamStore<f32>)> {
        let s = self.stage0()?;
        Ok((s.net.clone(), s.store.clone()))
    }

    fn pretrain(&mut self, contrastive: bool, mask_ratio: f64, weights: Option<[f64; 3]>) -> Result<TrainOutcome> {
        let cfg = TrainConfig { contrastive, mask_ratio, loss_weights: weights, ..stage_cfg(self.base, Stage::Pretrain, self.steps.pretrain) };
        let init = self.init()?;
        pretrain_run(self.ds, &cfg, Some(init), None)
    }

    fn finetune(&self, from: TrainOutcome) -> Result<TrainOutcome> {
        finetune_run(self.ds, &stage_cfg(self.base, Stage::Finetune, self.steps.finetune), Some((from.net, from.store)), None)
    }

    fn score(&self, o: &TrainOutcome) -> Result<Metrics> {
        evaluate_windows(&o.net, &o.store, &self.prep, &o.split.val)
    }
}

fn bench<'a>(ds: &'a Dataset, base: &'a TrainConfig, steps: StageSteps) -> Result<Bench<'a>> {
    if base.val_fraction <= 0.0 {
        return Err(input_err!("ablation scores held-out windows; val_fraction must be positive"));
    }
    Ok(Bench { ds, prep: Prepared::new(ds), base, steps, stage0: None })
}

/// Trains each named variant from shared stage-0 weights and scores it on
/// the held-out windows.
pub fn ablate(ds: &Dataset, variants: &[&str], base: &TrainConfig, steps: StageSteps) -> Result<AblationReport> {
    for v in variants {
        if !VARIANTS.contains(v) {
            return Err(input_err!("unknown variant `{v}`; expected one of {}", VARIANTS.join(", ")));
        }
    }
    let mut b = bench(ds, base, steps)?;
    let mut pt: Option<TrainOutcome> = None;
    let mut report = AblationReport::default();
    for &v in variants {
        let m = match v {
            "TF_only" | "CNN_only" => {
                let s = b.stage0()?;
                let m = if v == "TF_only" { &s.val_sp } else { &s.val_sg };
                m.clone().ok_or_else(|| input_err!("no held-out epochs to score"))?
            }
            "TF_CNN_multi" => {
                let o = b.pretrain(false, 0.0, Some([1.0, 1.0, 1.0]))?;
                b.score(&o)?
            }
            "TF_CNN_CL_FT" => {
                let o = b.pretrain(true, 0.0, None)?;
                b.score(&b.finetune(o)?)?
            }
            "TF_CNN_M_FT" => {
                let o = b.pretrain(false, base.mask_ratio, None)?;
                b.score(&b.finetune(o)?)?
            }
            "TF_CNN_PT" | "TF_CNN_PT_FT" => {
                if pt.is_none() {
                    pt = Some(b.pretrain(true, base.mask_ratio, None)?);
                }
                let o = pt.as_ref().expect("set above");
                if v == "TF_CNN_PT" {
                    b.score(o)?
                } else {
                    let copy = TrainOutcome { net: o.net.clone(), store: o.store.clone(), log: super::TrainLog::new(base.seed, "pretrain"), split: o.split.clone(), ..*o };
                    b.score(&b.finetune(copy)?)?
                }
            }
            _ => unreachable!("validated above"),
        };
        report.rows.push(row(v, &m));
    }
    Ok(report)
}

/// Full pipeline (stage 0, pre-training, fine-tuning) once per mask ratio.
pub fn mask_sweep(ds: &Dataset, ratios: &[f64], base: &TrainConfig, steps: StageSteps) -> Result<AblationReport> {
    let mut b = bench(ds, base, steps)?;
    let mut report = AblationReport::default();
    for &r in ratios {
        let o = b.pretrain(true, r, None)?;
        let m = b.score(&b.finetune(o)?)?;
        report.rows.push(row(&format!("mask_{r}"), &m));
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn report_formats() {
        let r = AblationReport {
            rows: vec![
                AblationRow { variant: "TF_only".into(), accuracy: 0.5, macro_f1: 0.25, epochs: 42 },
                AblationRow { variant: "CNN_only".into(), accuracy: 1.0, macro_f1: 1.0, epochs: 42 },
            ],
        };
        assert_eq!(r.to_csv(), "variant,accuracy,macro_f1,epochs\nTF_only,0.5000,0.2500,42\nCNN_only,1.0000,1.0000,42\n");
        let text = r.to_text();
        assert_eq!(text.lines().count(), 3);
        assert!(text.lines().nth(1).unwrap().starts_with("TF_only "));
    }

    #[test]
    fn unknown_variant_rejected() {
        let ds = crate::data::generate_synthetic(1, 21, 0);
        let cfg = TrainConfig::desk(Stage::Pretrain);
        let steps = StageSteps { stage0: 1, pretrain: 1, finetune: 1 };
        let err = ablate(&ds, &["TF_only", "LSTM"], &cfg, steps).unwrap_err();
        assert_eq!(err.category(), "input");
    }
}
