use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::Result;
use crate::training::StepLog;

pub const HEADER: &str = "step,lr,loss";

/// Per-step loss CSV with columns `step,lr,loss`.
pub struct LossLog<W: Write> {
    out: W,
}

impl LossLog<BufWriter<File>> {
    pub fn create(path: impl AsRef<Path>) -> Result<Self> {
        Self::new(BufWriter::new(File::create(path)?))
    }
}

impl<W: Write> LossLog<W> {
    pub fn new(mut out: W) -> Result<Self> {
        writeln!(out, "{HEADER}")?;
        Ok(Self { out })
    }

    pub fn append(&mut self, s: &StepLog) -> Result<()> {
        writeln!(self.out, "{},{:e},{}", s.step, s.lr, s.loss)?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<W> {
        self.out.flush()?;
        Ok(self.out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_lines() {
        let mut log = LossLog::new(Vec::new()).unwrap();
        log.append(&StepLog {
            step: 1,
            lr: 2e-4,
            loss: 0.25,
        })
        .unwrap();
        log.append(&StepLog {
            step: 2,
            lr: 1e-6,
            loss: 0.125,
        })
        .unwrap();
        let text = String::from_utf8(log.finish().unwrap()).unwrap();
        assert_eq!(text, "step,lr,loss\n1,2e-4,0.25\n2,1e-6,0.125\n");
        let row: Vec<f64> = text
            .lines()
            .nth(1)
            .unwrap()
            .split(',')
            .map(|v| v.parse().unwrap())
            .collect();
        assert_eq!(row, vec![1.0, 2e-4, 0.25]);
    }
}
