use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::Result;
use crate::objective::LossReport;

pub const METRICS_HEADER: &str = "iteration,phase,d_age_loss,d_trans_loss,g_adv_age,g_adv_trans,g_tv,g_total,wall_ms";

/// Per-iteration CSV log.
#[derive(Debug)]
pub struct MetricsWriter {
    out: BufWriter<File>,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let mut out = BufWriter::new(File::create(path)?);
        writeln!(out, "{METRICS_HEADER}")?;
        Ok(Self { out })
    }

    pub fn write(&mut self, r: &LossReport, wall_ms: f64) -> Result<()> {
        let phase = r.phase.map(|p| p.to_string()).unwrap_or_default();
        writeln!(
            self.out,
            "{},{phase},{},{},{},{},{},{},{wall_ms:.3}",
            r.iteration, r.d_age_loss, r.d_trans_loss, r.g_adv_age, r.g_adv_trans, r.g_tv, r.g_total
        )?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush()?;
        Ok(())
    }
}
