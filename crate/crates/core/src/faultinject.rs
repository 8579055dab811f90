//! Bit-flip fault planning, application and Monte-Carlo campaigns.
//!
//! The fault space enumerates every stored 32-bit word: all weights and
//! biases in canonical parameter order, followed by every clipping threshold
//! in canonical threshold order. Bit `b` of word `w` is the global position
//! `32 * w + b`. Values are kept in floating point and pass through Q15.16
//! only at injection time: encode, flip, decode.
//!
//! Plans use `Xoshiro256PlusPlus`: a flip count drawn from
//! `Binomial(total_bits, ber)` followed by that many distinct positions
//! sampled uniformly without replacement.

use rand::SeedableRng;
use rand_distr::{Binomial, Distribution};
use rand_xoshiro::Xoshiro256PlusPlus;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::activation::{ActivationKind, ThresholdSet};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::fixedpoint::{decode_q15_16, encode_q15_16, flip_bit, WORD_BITS};
use crate::model::{argmax_rows, Network, EVAL_CHUNK};
use crate::tensor::Tensor;

/// The ordered set of fault-eligible words of a (network, thresholds) pair.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FaultSpace {
    param_words: usize,
    threshold_words: usize,
    /// `(first word past the layer, layer index)` for every layer owning
    /// parameters, ascending.
    param_layers: Vec<(usize, usize)>,
    /// Same for thresholds, keyed by activation layer; offsets are relative
    /// to the first threshold word.
    threshold_layers: Vec<(usize, usize)>,
}

impl FaultSpace {
    /// Weights and biases of `net` plus the thresholds of `thresholds`
    /// (ignored for plain ReLU policies, which store none).
    pub fn new(net: &Network, thresholds: Option<&ThresholdSet>) -> Self {
        let mut param_layers = Vec::new();
        let mut end = 0;
        for l in 0..net.layers().len() {
            let n: usize = net.params(l).iter().map(Tensor::len).sum();
            if n > 0 {
                end += n;
                param_layers.push((end, l));
            }
        }
        let mut threshold_layers = Vec::new();
        let mut t_end = 0;
        if let Some(set) = thresholds.filter(|s| s.kind != ActivationKind::Relu) {
            for (l, t) in set.iter() {
                t_end += t.len();
                threshold_layers.push((t_end, l));
            }
        }
        Self {
            param_words: end,
            threshold_words: t_end,
            param_layers,
            threshold_layers,
        }
    }

    /// A space of `words` anonymous parameter words, for planning statistics.
    pub fn with_words(words: usize) -> Self {
        Self {
            param_words: words,
            threshold_words: 0,
            param_layers: vec![(words, 0)],
            threshold_layers: Vec::new(),
        }
    }

    pub fn param_words(&self) -> usize {
        self.param_words
    }

    pub fn threshold_words(&self) -> usize {
        self.threshold_words
    }

    pub fn words(&self) -> usize {
        self.param_words + self.threshold_words
    }

    pub fn total_bits(&self) -> usize {
        self.words() * WORD_BITS as usize
    }

    /// Network layer whose computation is first affected by a flip in `word`.
    pub fn layer_of_word(&self, word: usize) -> Option<usize> {
        let (table, w) = if word < self.param_words {
            (&self.param_layers, word)
        } else {
            (&self.threshold_layers, word - self.param_words)
        };
        let at = table.partition_point(|&(end, _)| end <= w);
        table.get(at).map(|&(_, l)| l)
    }
}

/// Bit positions to flip, sorted by `(word, bit)` and free of duplicates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaultPlan {
    pub flips: Vec<(usize, u8)>,
    pub seed: u64,
    pub ber: f64,
}

impl FaultPlan {
    pub fn empty() -> Self {
        Self {
            flips: Vec::new(),
            seed: 0,
            ber: 0.0,
        }
    }

    pub fn len(&self) -> usize {
        self.flips.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flips.is_empty()
    }

    /// The flips that fall inside `space`. Parameter words precede threshold
    /// words, so a plan drawn for a protected network restricted to the
    /// unprotected space hits the same parameter bits.
    pub fn restrict_to(&self, space: &FaultSpace) -> FaultPlan {
        FaultPlan {
            flips: self
                .flips
                .iter()
                .copied()
                .filter(|&(w, _)| w < space.words())
                .collect(),
            seed: self.seed,
            ber: self.ber,
        }
    }

    /// Lowest network layer touched by the plan.
    pub fn first_layer(&self, space: &FaultSpace) -> Option<usize> {
        self.flips
            .iter()
            .filter_map(|&(w, _)| space.layer_of_word(w))
            .min()
    }
}

/// Draws a plan: `Binomial(total_bits, ber)` flips at distinct uniform positions.
pub fn plan_faults(space: &FaultSpace, ber: f64, seed: u64) -> Result<FaultPlan> {
    if !(0.0..=1.0).contains(&ber) {
        return Err(Error::InvalidValue(format!(
            "bit error rate must lie in [0, 1], got {ber}"
        )));
    }
    let total = space.total_bits();
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
    let count = if ber == 0.0 || total == 0 {
        0
    } else {
        Binomial::new(total as u64, ber)
            .map_err(|e| Error::InvalidValue(e.to_string()))?
            .sample(&mut rng) as usize
    };
    let mut positions = rand::seq::index::sample(&mut rng, total, count).into_vec();
    positions.sort_unstable();
    let bits = WORD_BITS as usize;
    Ok(FaultPlan {
        flips: positions
            .into_iter()
            .map(|p| (p / bits, (p % bits) as u8))
            .collect(),
        seed,
        ber,
    })
}

/// Corrupted copies of the network and thresholds. Several flips of one
/// word compose on its encoded form before it is decoded.
pub fn apply_faults(
    net: &Network,
    thresholds: Option<&ThresholdSet>,
    plan: &FaultPlan,
) -> Result<(Network, Option<ThresholdSet>)> {
    let space = FaultSpace::new(net, thresholds);
    let mut faulty = net.clone();
    let mut faulty_thresholds = thresholds.cloned();
    let mut threshold_values = faulty_thresholds
        .as_ref()
        .filter(|_| space.threshold_words > 0)
        .map(ThresholdSet::values);
    let mut i = 0;
    while i < plan.flips.len() {
        let word = plan.flips[i].0;
        if word >= space.words() {
            return Err(Error::Index {
                index: word,
                len: space.words(),
            });
        }
        let slot = if word < space.param_words {
            faulty
                .param_at_mut(word)
                .expect("word inside parameter space")
        } else {
            let values = threshold_values.as_mut().expect("threshold words exist");
            &mut values[word - space.param_words]
        };
        let mut code = encode_q15_16(*slot)?;
        while i < plan.flips.len() && plan.flips[i].0 == word {
            code = flip_bit(code, plan.flips[i].1 as u32)?;
            i += 1;
        }
        *slot = decode_q15_16(code);
    }
    if let (Some(set), Some(values)) = (faulty_thresholds.as_mut(), threshold_values) {
        set.set_values(&values)?;
    }
    Ok((faulty, faulty_thresholds))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CampaignConfig {
    pub bers: Vec<f64>,
    pub trials: usize,
    pub seed: u64,
    /// Worker threads for trials; results do not depend on it.
    pub workers: usize,
    /// Memory allowed for cached fault-free layer inputs.
    pub cache_bytes: usize,
}

pub const DEFAULT_BERS: [f64; 6] = [1e-7, 3e-7, 1e-6, 3e-6, 1e-5, 3e-5];

impl Default for CampaignConfig {
    fn default() -> Self {
        Self {
            bers: DEFAULT_BERS.to_vec(),
            trials: 500,
            seed: 0,
            workers: 1,
            cache_bytes: 256 << 20,
        }
    }
}

impl CampaignConfig {
    pub fn validate(&self) -> Result<()> {
        if self.trials == 0 {
            return Err(Error::Config("trials must be at least 1".into()));
        }
        if self.bers.is_empty() {
            return Err(Error::Config("empty BER list".into()));
        }
        if let Some(b) = self.bers.iter().find(|b| !(0.0..=1.0).contains(*b)) {
            return Err(Error::Config(format!("bit error rate {b} outside [0, 1]")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub ber: f64,
    pub trial: usize,
    pub seed: u64,
    pub flips: usize,
    pub top1: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BerSummary {
    pub ber: f64,
    pub mean: f64,
    /// Sample standard deviation (0 for a single trial).
    pub std: f64,
    pub ci95_lo: f64,
    pub ci95_hi: f64,
    /// Trials that produced an accuracy.
    pub trials: usize,
    pub failed: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CampaignResult {
    pub fault_free_top1: f64,
    pub trials: Vec<TrialRecord>,
    pub summaries: Vec<BerSummary>,
}

impl CampaignResult {
    pub fn trials_csv(&self) -> String {
        let mut out = String::from("ber,trial,seed,top1\n");
        for t in &self.trials {
            let top1 = t
                .top1
                .map(|v| v.to_string())
                .unwrap_or_else(|| "NaN".into());
            out.push_str(&format!("{},{},{},{}\n", t.ber, t.trial, t.seed, top1));
        }
        out
    }

    pub fn summary_csv(&self) -> String {
        let mut out = String::from("ber,mean,std,ci95_lo,ci95_hi,trials\n");
        for s in &self.summaries {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                s.ber, s.mean, s.std, s.ci95_lo, s.ci95_hi, s.trials
            ));
        }
        out
    }

    pub fn summary(&self, ber: f64) -> Option<&BerSummary> {
        self.summaries.iter().find(|s| s.ber == ber)
    }
}

/// Stable per-trial seed from the master seed and the trial coordinates.
pub fn trial_seed(master: u64, ber_index: usize, trial: usize) -> u64 {
    let mut h = splitmix64(master);
    h = splitmix64(h ^ ber_index as u64);
    splitmix64(h ^ (trial as u64).wrapping_mul(0xD6E8_FEB8_6659_FD93))
}

fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Fault-free inputs of selected layers over a fixed dataset, so a faulty
/// forward pass can resume at the first layer the faults reach.
pub(crate) struct PrefixCache {
    /// `inputs[i]` holds the chunked inputs of layer `i`, when cached.
    inputs: Vec<Option<Vec<Tensor>>>,
}

impl PrefixCache {
    pub(crate) fn build(
        net: &Network,
        thresholds: Option<&ThresholdSet>,
        data: &Dataset,
        budget_bytes: usize,
    ) -> Result<Self> {
        let n = data.len();
        let layers = net.layers().len();
        let mut inputs: Vec<Option<Vec<Tensor>>> = vec![None; layers];
        let mut chunks: Vec<Tensor> = (0..n)
            .step_by(EVAL_CHUNK)
            .map(|s| data.images.slice_batch(s, (s + EVAL_CHUNK).min(n)))
            .collect();
        let mut used = 0usize;
        inputs[0] = Some(chunks.clone());
        for i in 1..layers {
            for c in chunks.iter_mut() {
                *c = net.apply_layer(i - 1, thresholds, c)?;
            }
            let bytes = n * net.shape_at(i).iter().product::<usize>() * 8;
            if used + bytes <= budget_bytes {
                used += bytes;
                inputs[i] = Some(chunks.clone());
            }
        }
        Ok(Self { inputs })
    }

    /// Logits of the (possibly faulty) network, resuming at the deepest
    /// cached layer not after `first`.
    pub(crate) fn logits(
        &self,
        net: &Network,
        thresholds: Option<&ThresholdSet>,
        first: usize,
    ) -> Result<Vec<Tensor>> {
        let start = (0..=first.min(self.inputs.len() - 1))
            .rev()
            .find(|&i| self.inputs[i].is_some())
            .unwrap_or(0);
        self.inputs[start]
            .as_ref()
            .expect("layer 0 is always cached")
            .iter()
            .map(|c| net.forward_from(start, thresholds, c))
            .collect()
    }
}

fn accuracy_of(chunks: &[Tensor], labels: &[usize]) -> f64 {
    let mut correct = 0usize;
    let mut at = 0;
    for c in chunks {
        for p in argmax_rows(c) {
            correct += (p == labels[at]) as usize;
            at += 1;
        }
    }
    correct as f64 / labels.len() as f64
}

/// Runs `cfg.trials` faulty evaluations per BER and aggregates Top-1.
pub fn run_campaign(
    net: &Network,
    thresholds: Option<&ThresholdSet>,
    cfg: &CampaignConfig,
    data: &Dataset,
) -> Result<CampaignResult> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    net.check_thresholds(thresholds)?;
    let space = FaultSpace::new(net, thresholds);
    let cache = PrefixCache::build(net, thresholds, data, cfg.cache_bytes)?;
    let fault_free_top1 = accuracy_of(&cache.logits(net, thresholds, usize::MAX)?, &data.labels);

    let jobs: Vec<(usize, usize)> = (0..cfg.bers.len())
        .flat_map(|b| (0..cfg.trials).map(move |t| (b, t)))
        .collect();
    let run = |&(b, t): &(usize, usize)| -> TrialRecord {
        let ber = cfg.bers[b];
        let seed = trial_seed(cfg.seed, b, t);
        let outcome = plan_faults(&space, ber, seed).and_then(|plan| {
            let flips = plan.len();
            if plan.is_empty() {
                return Ok((flips, fault_free_top1));
            }
            let first = plan.first_layer(&space).unwrap_or(0);
            let (fnet, fth) = apply_faults(net, thresholds, &plan)?;
            let logits = cache.logits(&fnet, fth.as_ref(), first)?;
            Ok((flips, accuracy_of(&logits, &data.labels)))
        });
        match outcome {
            Ok((flips, top1)) => TrialRecord {
                ber,
                trial: t,
                seed,
                flips,
                top1: Some(top1),
                error: None,
            },
            Err(e) => TrialRecord {
                ber,
                trial: t,
                seed,
                flips: 0,
                top1: None,
                error: Some(e.to_string()),
            },
        }
    };
    let trials: Vec<TrialRecord> = if cfg.workers <= 1 {
        jobs.iter().map(run).collect()
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.workers)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
        pool.install(|| jobs.par_iter().map(run).collect())
    };
    let summaries = cfg
        .bers
        .iter()
        .map(|&ber| summarize(ber, trials.iter().filter(|t| t.ber == ber)))
        .collect();
    Ok(CampaignResult {
        fault_free_top1,
        trials,
        summaries,
    })
}

fn summarize<'a>(ber: f64, records: impl Iterator<Item = &'a TrialRecord>) -> BerSummary {
    let mut values = Vec::new();
    let mut failed = 0;
    for r in records {
        match r.top1 {
            Some(v) => values.push(v),
            None => failed += 1,
        }
    }
    let n = values.len();
    let mean = if n == 0 {
        f64::NAN
    } else {
        values.iter().sum::<f64>() / n as f64
    };
    let std = if n < 2 {
        0.0
    } else {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    };
    let half = if n == 0 {
        f64::NAN
    } else {
        1.96 * std / (n as f64).sqrt()
    };
    BerSummary {
        ber,
        mean,
        std,
        ci95_lo: mean - half,
        ci95_hi: mean + half,
        trials: n,
        failed,
    }
}
