use serde::{Deserialize, Serialize};

use super::{floor, harden_ranger, Granularity, ProfileReport};
use crate::activation::{Threshold, ThresholdSet};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::faultinject::{run_campaign, trial_seed, CampaignConfig};
use crate::metrics::top1_accuracy;
use crate::model::Network;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FtClipActConfig {
    /// Candidates per layer: `max * i / grid_size` for `i = 1..=grid_size`.
    pub grid_size: usize,
    /// Injection rate used to score candidates.
    pub ber: f64,
    /// Injection trials per candidate; 0 scores every admissible candidate equally.
    pub fi_budget: usize,
    /// Admissible fault-free accuracy loss relative to the unclipped network.
    pub tolerance: f64,
    pub seed: u64,
    pub workers: usize,
}

impl Default for FtClipActConfig {
    fn default() -> Self {
        Self {
            grid_size: 20,
            ber: 1e-5,
            fi_budget: 10,
            tolerance: 0.005,
            seed: 0,
            workers: 1,
        }
    }
}

/// One scored candidate.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CandidateRow {
    pub layer: usize,
    pub lambda: f64,
    pub fault_free_top1: f64,
    pub admissible: bool,
    pub score: f64,
}

impl CandidateRow {
    pub const CSV_HEADER: &'static str = "layer,lambda,fault_free_top1,admissible,score";

    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.layer, self.lambda, self.fault_free_top1, self.admissible, self.score
        )
    }
}

/// Layer-wise interval search scored by fault injection (FT-ClipAct
/// reconstruction). Layers are visited first to last; layers not yet
/// visited keep their profiled maxima. Within a layer the admissible
/// candidate with the best mean faulty accuracy wins, ties going to the
/// smaller threshold.
pub fn search_ftclipact(
    net: &Network,
    data: &Dataset,
    report: &ProfileReport,
    cfg: &FtClipActConfig,
) -> Result<(ThresholdSet, Vec<CandidateRow>)> {
    if cfg.grid_size == 0 {
        return Err(Error::Config("FT-ClipAct needs a non-empty grid".into()));
    }
    if !(0.0..=1.0).contains(&cfg.ber) {
        return Err(Error::Config(format!(
            "bit error rate {} outside [0, 1]",
            cfg.ber
        )));
    }
    let baseline = top1_accuracy(net, None, data)?;
    let mut set = harden_ranger(net, report, Granularity::Layer)?;
    let mut log = Vec::new();
    for (slot, (layer, _)) in net.activation_slots().into_iter().enumerate() {
        let max = report.layer_max(layer)?;
        let mut best: Option<(f64, f64)> = None;
        for i in 1..=cfg.grid_size {
            let lambda = floor(max * i as f64 / cfg.grid_size as f64);
            set.bind(layer, Threshold::Layer(lambda));
            let fault_free = top1_accuracy(net, Some(&set), data)?;
            let admissible = fault_free >= baseline - cfg.tolerance;
            let score = if admissible && cfg.fi_budget > 0 {
                let campaign = CampaignConfig {
                    bers: vec![cfg.ber],
                    trials: cfg.fi_budget,
                    seed: trial_seed(cfg.seed, slot, i),
                    workers: cfg.workers,
                    ..Default::default()
                };
                run_campaign(net, Some(&set), &campaign, data)?.summaries[0].mean
            } else {
                0.0
            };
            log.push(CandidateRow {
                layer,
                lambda,
                fault_free_top1: fault_free,
                admissible,
                score,
            });
            // candidates ascend, so a strict improvement is needed to move up
            if admissible && best.is_none_or(|(_, s)| score > s) {
                best = Some((lambda, score));
            }
        }
        // the last candidate is the profiled maximum, which cannot lose
        // accuracy on the profiling data; elsewhere fall back to it
        let lambda = best.map_or(floor(max), |(l, _)| l);
        set.bind(layer, Threshold::Layer(lambda));
    }
    Ok((set, log))
}
