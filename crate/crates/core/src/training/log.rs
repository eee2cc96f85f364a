use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::Result;

pub const LOG_HEADER: &str = "step,loss_epoch,loss_seq,loss_total,val_acc";

#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub step: usize,
    pub loss_epoch: f64,
    pub loss_seq: f64,
    pub loss_total: f64,
    pub val_acc: Option<f64>,
}

impl LogRow {
    pub fn csv(&self) -> String {
        let val = self.val_acc.map(|v| v.to_string()).unwrap_or_default();
        format!("{},{},{},{},{}", self.step, self.loss_epoch, self.loss_seq, self.loss_total, val)
    }
}

/// Training log kept in memory and, when a path is given, appended to a
/// CSV file row by row.
pub struct TrainLog {
    pub seed: u64,
    pub stage: String,
    pub rows: Vec<LogRow>,
    file: Option<BufWriter<File>>,
}

impl TrainLog {
    pub fn new(seed: u64, stage: &str) -> Self {
        TrainLog { seed, stage: stage.to_string(), rows: Vec::new(), file: None }
    }

    pub fn to_file(seed: u64, stage: &str, path: &Path) -> Result<Self> {
        let mut log = TrainLog::new(seed, stage);
        let mut f = BufWriter::new(File::create(path)?);
        writeln!(f, "{}", log.header_comment())?;
        writeln!(f, "{LOG_HEADER}")?;
        f.flush()?;
        log.file = Some(f);
        Ok(log)
    }

    fn header_comment(&self) -> String {
        format!("# stage={} seed={}", self.stage, self.seed)
    }

    pub fn push(&mut self, row: LogRow) -> Result<()> {
        if let Some(f) = &mut self.file {
            writeln!(f, "{}", row.csv())?;
            f.flush()?;
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("{}\n{LOG_HEADER}\n", self.header_comment());
        for r in &self.rows {
            s.push_str(&r.csv());
            s.push('\n');
        }
        s
    }

    /// `loss_total` column.
    pub fn losses(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.loss_total).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_matches_memory() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("log.csv");
        let mut log = TrainLog::to_file(7, "pretrain", &p).unwrap();
        log.push(LogRow { step: 0, loss_epoch: 1.5, loss_seq: 2.0, loss_total: 3.5, val_acc: None }).unwrap();
        log.push(LogRow { step: 1, loss_epoch: 0.1, loss_seq: 0.2, loss_total: 0.30000000000000004, val_acc: Some(0.5) }).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert_eq!(text, log.to_csv());
        assert!(text.starts_with("# stage=pretrain seed=7\nstep,loss_epoch,loss_seq,loss_total,val_acc\n0,1.5,2,3.5,\n"));
        assert!(text.ends_with("1,0.1,0.2,0.30000000000000004,0.5\n"));
    }
}
