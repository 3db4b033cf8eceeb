//! Communication ledger, per-round metrics, and the CSV/JSON artifacts.

use serde::Serialize;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct LedgerEntry {
    pub round: usize,
    pub client: usize,
    pub upload_elements: u64,
    pub download_elements: u64,
}

/// Element counts exchanged per round and client. Counts are raw element
/// totals; byte interpretation is left to the consumer.
#[derive(Debug, Clone, Default)]
pub struct CommLedger {
    entries: Vec<LedgerEntry>,
}

impl CommLedger {
    pub fn push(&mut self, entry: LedgerEntry) {
        self.entries.push(entry);
    }

    pub fn entries(&self) -> &[LedgerEntry] {
        &self.entries
    }

    pub fn entry(&self, round: usize, client: usize) -> Option<&LedgerEntry> {
        self.entries
            .iter()
            .find(|e| e.round == round && e.client == client)
    }

    /// (upload, download) element totals over the whole run.
    pub fn totals(&self) -> (u64, u64) {
        self.entries.iter().fold((0, 0), |(up, down), e| {
            (up + e.upload_elements, down + e.download_elements)
        })
    }

    pub fn round_totals(&self, round: usize) -> (u64, u64) {
        self.entries
            .iter()
            .filter(|e| e.round == round)
            .fold((0, 0), |(up, down), e| {
                (up + e.upload_elements, down + e.download_elements)
            })
    }
}

/// Per-client slice of a round report. Accuracy is absent when the client has
/// no test samples; losses are absent for non-participants.
#[derive(Debug, Clone, Serialize)]
pub struct ClientRoundMetrics {
    pub client: usize,
    pub accuracy: Option<f64>,
    pub loss_local: Option<f64>,
    pub loss_transfer: Option<f64>,
    pub upload_elements: u64,
    pub download_elements: u64,
    /// Local dataset size, the weight in the averaged objective.
    pub weight: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct RoundReport {
    pub round: usize,
    pub participants: Vec<usize>,
    pub clients: Vec<ClientRoundMetrics>,
    /// Unweighted mean accuracy over clients with a test set.
    pub mean_accuracy: f64,
    /// Dataset-size-weighted mean accuracy over clients with a test set.
    pub weighted_accuracy: f64,
    pub mean_loss_local: f64,
    pub mean_loss_transfer: f64,
    /// Mean server loss per epoch of this round's transformer training.
    pub server_epoch_losses: Vec<f64>,
    /// Alignment distance between transformed prototypes and fresh latents,
    /// before and after this round's server training.
    pub alignment_before: Option<f64>,
    pub alignment_after: Option<f64>,
}

impl RoundReport {
    /// Aggregates accuracies and losses from the per-client metrics.
    pub fn finalize(&mut self) {
        let scored: Vec<&ClientRoundMetrics> =
            self.clients.iter().filter(|c| c.accuracy.is_some()).collect();
        if scored.is_empty() {
            self.mean_accuracy = f64::NAN;
            self.weighted_accuracy = f64::NAN;
        } else {
            let total_weight: usize = scored.iter().map(|c| c.weight).sum();
            self.mean_accuracy =
                scored.iter().map(|c| c.accuracy.unwrap()).sum::<f64>() / scored.len() as f64;
            self.weighted_accuracy = scored
                .iter()
                .map(|c| c.accuracy.unwrap() * c.weight as f64)
                .sum::<f64>()
                / total_weight as f64;
        }
        let local: Vec<f64> = self
            .clients
            .iter()
            .filter_map(|c| c.loss_local)
            .filter(|v| v.is_finite())
            .collect();
        self.mean_loss_local = mean_or_nan(&local);
        let transfer: Vec<f64> = self
            .clients
            .iter()
            .filter_map(|c| c.loss_transfer)
            .filter(|v| v.is_finite())
            .collect();
        self.mean_loss_transfer = mean_or_nan(&transfer);
    }
}

fn mean_or_nan(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        f64::NAN
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    match v {
        Some(x) if x.is_finite() => format!("{x:.6}"),
        _ => String::new(),
    }
}

/// One row per (round, client), plus an aggregate row per round with
/// client_id -1 carrying the weighted mean accuracy, participant-mean losses,
/// and round communication totals.
pub fn render_rounds_csv(reports: &[RoundReport]) -> String {
    let mut out = String::from("round,client_id,acc,loss_A,loss_M,up_elems,down_elems\n");
    for report in reports {
        for c in &report.clients {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                report.round,
                c.client,
                fmt_opt(c.accuracy),
                fmt_opt(c.loss_local),
                fmt_opt(c.loss_transfer),
                c.upload_elements,
                c.download_elements,
            ));
        }
        let (up, down): (u64, u64) = report.clients.iter().fold((0, 0), |(u, d), c| {
            (u + c.upload_elements, d + c.download_elements)
        });
        out.push_str(&format!(
            "{},-1,{},{},{},{},{}\n",
            report.round,
            fmt_opt(Some(report.weighted_accuracy)),
            fmt_opt(Some(report.mean_loss_local)),
            fmt_opt(Some(report.mean_loss_transfer)),
            up,
            down,
        ));
    }
    out
}

#[derive(Debug, Clone, Serialize)]
pub struct SeedSummary {
    pub seed: u64,
    pub final_weighted_accuracy: f64,
    pub final_mean_accuracy: f64,
    pub upload_total_elements: u64,
    pub download_total_elements: u64,
    pub weighted_accuracy_trace: Vec<f64>,
    pub alignment_before_trace: Vec<Option<f64>>,
    pub alignment_after_trace: Vec<Option<f64>>,
    pub final_server_loss: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ExperimentSummary {
    pub schema: String,
    pub seeds: Vec<u64>,
    pub rounds: usize,
    pub ablation: String,
    pub mode: String,
    pub mean_final_weighted_accuracy: f64,
    pub std_final_weighted_accuracy: f64,
    pub mean_final_accuracy: f64,
    pub std_final_accuracy: f64,
    pub per_seed: Vec<SeedSummary>,
    /// Evaluation covers every client each round, participants or not.
    pub evaluation_includes_non_participants: bool,
}

impl ExperimentSummary {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Config(format!("summary: {e}")))
    }
}

/// Mean and (population) standard deviation of final accuracies.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / values.len() as f64;
    (mean, var.sqrt())
}
