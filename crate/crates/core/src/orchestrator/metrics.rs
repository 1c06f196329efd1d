use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::strategies::StrategyKind;

pub const CSV_HEADER: &str = "round,client,strategy,train_loss,test_acc,alpha,lr,upload_bytes";

/// One client's numbers for one round.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricRecord {
    pub round: u32,
    pub client: u32,
    pub train_loss: f64,
    /// Accuracy of the strategy's evaluation model on the client's test set.
    pub test_acc: f64,
    /// Accuracy of the aggregated global model on the same test set.
    pub global_acc: f64,
    pub alpha: f64,
    pub lr: f64,
    pub upload_bytes: u64,
}

/// Cross-client view of one round.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RoundSummary {
    pub round: u32,
    pub per_client_acc: Vec<f64>,
    pub global_acc: Vec<f64>,
    /// Weighted by training-set size `n_i / n`.
    pub weighted_avg: f64,
    pub unweighted_avg: f64,
}

/// Final-round and best-round results plus the alpha trajectories.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Summary {
    pub strategy: String,
    pub rounds: usize,
    pub final_per_client_acc: Vec<f64>,
    pub final_weighted_avg: f64,
    pub final_unweighted_avg: f64,
    pub best_per_client_acc: Vec<f64>,
    pub best_weighted_avg: f64,
    pub best_unweighted_avg: f64,
    /// `alpha_trajectory[client][round]`.
    pub alpha_trajectory: Vec<Vec<f64>>,
}

/// Per-round, per-client records of one experiment.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsLog {
    pub strategy: StrategyKind,
    /// Training-set size of each client, indexed by client id.
    pub client_weights: Vec<u32>,
    records: Vec<MetricRecord>,
}

impl MetricsLog {
    pub fn new(strategy: StrategyKind, client_weights: Vec<u32>) -> Self {
        MetricsLog {
            strategy,
            client_weights,
            records: Vec::new(),
        }
    }

    /// Inserts a record, keeping (round, client) order regardless of arrival.
    pub fn push(&mut self, record: MetricRecord) {
        let key = (record.round, record.client);
        let at = self
            .records
            .partition_point(|r| (r.round, r.client) < key);
        self.records.insert(at, record);
    }

    pub fn records(&self) -> &[MetricRecord] {
        &self.records
    }

    pub fn num_clients(&self) -> usize {
        self.client_weights.len()
    }

    pub fn rounds(&self) -> usize {
        self.records.last().map_or(0, |r| r.round as usize + 1)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::with_capacity(64 * (self.records.len() + 1));
        out.push_str(CSV_HEADER);
        out.push('\n');
        for r in &self.records {
            writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                r.round,
                r.client,
                self.strategy.name(),
                r.train_loss,
                r.test_acc,
                r.alpha,
                r.lr,
                r.upload_bytes
            )
            .unwrap();
        }
        out
    }

    pub fn round_summaries(&self) -> Vec<RoundSummary> {
        let total: f64 = self.client_weights.iter().map(|&w| w as f64).sum();
        self.records
            .chunk_by(|a, b| a.round == b.round)
            .map(|rows| {
                let per_client_acc: Vec<f64> = rows.iter().map(|r| r.test_acc).collect();
                let global_acc = rows.iter().map(|r| r.global_acc).collect();
                let weighted_avg = rows
                    .iter()
                    .map(|r| self.client_weights[r.client as usize] as f64 / total * r.test_acc)
                    .sum();
                let unweighted_avg = per_client_acc.iter().sum::<f64>() / rows.len() as f64;
                RoundSummary {
                    round: rows[0].round,
                    per_client_acc,
                    global_acc,
                    weighted_avg,
                    unweighted_avg,
                }
            })
            .collect()
    }

    pub fn summary(&self) -> Summary {
        let rounds = self.round_summaries();
        let last = rounds.last().cloned().unwrap_or(RoundSummary {
            round: 0,
            per_client_acc: vec![],
            global_acc: vec![],
            weighted_avg: 0.0,
            unweighted_avg: 0.0,
        });
        let n = self.num_clients();
        let best_per_client_acc = (0..n)
            .map(|c| {
                rounds
                    .iter()
                    .filter_map(|r| r.per_client_acc.get(c).copied())
                    .fold(0.0, f64::max)
            })
            .collect();
        let alpha_trajectory = (0..n as u32)
            .map(|c| {
                self.records
                    .iter()
                    .filter(|r| r.client == c)
                    .map(|r| r.alpha)
                    .collect()
            })
            .collect();
        Summary {
            strategy: self.strategy.name().to_string(),
            rounds: rounds.len(),
            final_per_client_acc: last.per_client_acc,
            final_weighted_avg: last.weighted_avg,
            final_unweighted_avg: last.unweighted_avg,
            best_per_client_acc,
            best_weighted_avg: rounds.iter().map(|r| r.weighted_avg).fold(0.0, f64::max),
            best_unweighted_avg: rounds.iter().map(|r| r.unweighted_avg).fold(0.0, f64::max),
            alpha_trajectory,
        }
    }

    pub fn summary_json(&self) -> String {
        serde_json::to_string_pretty(&self.summary()).expect("summary serializes")
    }
}
