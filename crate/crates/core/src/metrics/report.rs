use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::MetricsError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    /// Training on the source pool.
    Source,
    /// Fine-tuning on the target adaptation set.
    Adapt,
    /// Final evaluation; one row per split.
    Eval,
}

/// One CSV record. BLEU-4 and ERR are empty where no decoding was done.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub phase: Phase,
    pub step: usize,
    pub split: String,
    pub nll: f64,
    pub bleu4: Option<f64>,
    pub err: Option<f64>,
    pub seconds: f64,
}

/// Training curve of one run, ordered by `(phase, step)`.
#[derive(Clone, Debug)]
pub struct TrainRunReport {
    rows: Vec<ReportRow>,
    clock: Option<Instant>,
}

pub const CSV_HEADER: &str = "phase,step,split,nll,bleu4,err,seconds";

impl TrainRunReport {
    /// With `timed` the `seconds` column holds wall-clock time since
    /// creation; otherwise it is 0 so reports are byte-reproducible.
    pub fn new(timed: bool) -> Self {
        Self {
            rows: Vec::new(),
            clock: timed.then(Instant::now),
        }
    }

    pub fn rows(&self) -> &[ReportRow] {
        &self.rows
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn phase_rows(&self, phase: Phase) -> impl Iterator<Item = &ReportRow> {
        self.rows.iter().filter(move |r| r.phase == phase)
    }

    /// Appends a row. `(phase, step)` must be strictly greater than the
    /// previous row's.
    pub fn push(
        &mut self,
        phase: Phase,
        step: usize,
        split: &str,
        nll: f64,
        bleu4: Option<f64>,
        err: Option<f64>,
    ) -> Result<(), MetricsError> {
        if let Some(last) = self.rows.last() {
            if (phase, step) <= (last.phase, last.step) {
                return Err(MetricsError::OutOfOrder {
                    phase,
                    step,
                    last_phase: last.phase,
                    last_step: last.step,
                });
            }
        }
        let seconds = self.clock.map_or(0.0, |c| c.elapsed().as_secs_f64());
        self.rows.push(ReportRow {
            phase,
            step,
            split: split.to_string(),
            nll,
            bleu4,
            err,
            seconds,
        });
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        if self.rows.is_empty() {
            w.write_record(CSV_HEADER.split(',')).expect("in-memory write");
        }
        for r in &self.rows {
            w.serialize(r).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8")
    }

    pub fn from_csv(text: &str) -> Result<Vec<ReportRow>, MetricsError> {
        let mut r = csv::Reader::from_reader(text.as_bytes());
        r.deserialize().collect::<Result<Vec<ReportRow>, _>>().map_err(|e| MetricsError::Csv(e.to_string()))
    }
}
