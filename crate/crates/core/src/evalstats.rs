//! Agreement statistics, skewed resampling and the ablation runner.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::hash::Hash;

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::derived_rng;
use crate::signals::TaskSet;
use crate::textcore::RatedExample;

pub const DARR_THRESHOLD: f64 = 25.0;

/// How the `kendall` field is computed; carried in reports because other
/// tools often mean tau-b by the same name.
pub const KENDALL_DEFINITION: &str =
    "pairwise (concordant - discordant) / (concordant + discordant) over within-group pairs; human and metric ties discarded";

#[derive(Debug, Error, PartialEq)]
pub enum StatsError {
    #[error("inputs have different lengths ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("no within-group pairs in the input")]
    InputEmpty,
    #[error("all {0} pairs were removed by the threshold filter")]
    FilteredEmpty(usize),
    #[error("all {0} remaining pairs are ties")]
    AllTied(usize),
    #[error("input is constant")]
    Constant,
    #[error("non-finite value in input")]
    NonFinite,
    #[error("need at least {need} records, got {got}")]
    TooFew { need: usize, got: usize },
    #[error("invalid configuration: {0}")]
    BadConfig(String),
    #[error("no references")]
    NoReferences,
    #[error("baseline run failed: {0}")]
    Baseline(String),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairCounts {
    pub pairs_total: usize,
    pub pairs_filtered: usize,
    pub ties_discarded: usize,
    pub concordant: usize,
    pub discordant: usize,
}

impl PairCounts {
    fn statistic(&self) -> Result<f64, StatsError> {
        let usable = self.concordant + self.discordant;
        if self.pairs_total == 0 {
            return Err(StatsError::InputEmpty);
        }
        if self.pairs_filtered == self.pairs_total {
            return Err(StatsError::FilteredEmpty(self.pairs_total));
        }
        if usable == 0 {
            return Err(StatsError::AllTied(self.pairs_total - self.pairs_filtered));
        }
        Ok((self.concordant as f64 - self.discordant as f64) / usable as f64)
    }
}

fn check_inputs(human: &[f64], metric: &[f64], groups_len: usize) -> Result<(), StatsError> {
    if human.len() != metric.len() {
        return Err(StatsError::LengthMismatch(human.len(), metric.len()));
    }
    if human.len() != groups_len {
        return Err(StatsError::LengthMismatch(human.len(), groups_len));
    }
    if human.iter().chain(metric).any(|x| !x.is_finite()) {
        return Err(StatsError::NonFinite);
    }
    Ok(())
}

/// Counts over unordered within-group pairs. Pairs whose human scores
/// differ by less than `threshold` are filtered; among the rest, ties on
/// either side are discarded.
pub fn pair_counts<G: Eq + Hash>(human: &[f64], metric: &[f64], groups: &[G], threshold: f64) -> Result<PairCounts, StatsError> {
    check_inputs(human, metric, groups.len())?;
    let mut members: HashMap<&G, Vec<usize>> = HashMap::new();
    for (i, g) in groups.iter().enumerate() {
        members.entry(g).or_default().push(i);
    }
    let mut c = PairCounts::default();
    for idx in members.values() {
        for (a, &i) in idx.iter().enumerate() {
            for &j in &idx[a + 1..] {
                c.pairs_total += 1;
                let dh = human[i] - human[j];
                if dh.abs() < threshold {
                    c.pairs_filtered += 1;
                    continue;
                }
                let dm = metric[i] - metric[j];
                if dh == 0.0 || dm == 0.0 {
                    c.ties_discarded += 1;
                } else if (dh > 0.0) == (dm > 0.0) {
                    c.concordant += 1;
                } else {
                    c.discordant += 1;
                }
            }
        }
    }
    Ok(c)
}

/// Pairwise Kendall statistic without a threshold filter.
pub fn kendall_pairwise<G: Eq + Hash>(human: &[f64], metric: &[f64], groups: &[G]) -> Result<f64, StatsError> {
    pair_counts(human, metric, groups, 0.0)?.statistic()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DarrReport {
    pub darr: f64,
    pub threshold: f64,
    #[serde(flatten)]
    pub counts: PairCounts,
}

/// Kendall-style agreement after dropping pairs whose human scores are
/// closer than `threshold` (25 on a 100-point scale by convention).
pub fn darr<G: Eq + Hash>(human: &[f64], metric: &[f64], groups: &[G], threshold: f64) -> Result<DarrReport, StatsError> {
    if !(threshold >= 0.0 && threshold.is_finite()) {
        return Err(StatsError::BadConfig(format!("threshold {threshold}")));
    }
    let counts = pair_counts(human, metric, groups, threshold)?;
    Ok(DarrReport {
        darr: counts.statistic()?,
        threshold,
        counts,
    })
}

/// Product-moment correlation.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64, StatsError> {
    if x.len() != y.len() {
        return Err(StatsError::LengthMismatch(x.len(), y.len()));
    }
    if x.len() < 2 {
        return Err(StatsError::TooFew { need: 2, got: x.len() });
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(StatsError::NonFinite);
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(StatsError::Constant);
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    pub kendall: f64,
    pub kendall_definition: String,
    pub pearson: f64,
    /// Absent when every pair falls under the threshold.
    pub darr: Option<f64>,
    pub darr_note: Option<String>,
    pub threshold: f64,
    pub n: usize,
    #[serde(flatten)]
    pub counts: PairCounts,
}

impl CorrelationReport {
    /// Kendall and Pearson are required; DARR is reported when defined.
    pub fn compute<G: Eq + Hash>(human: &[f64], metric: &[f64], groups: &[G], threshold: f64) -> Result<Self, StatsError> {
        let kendall = kendall_pairwise(human, metric, groups)?;
        let pearson = pearson(human, metric)?;
        let (darr, darr_note, counts) = match darr(human, metric, groups, threshold) {
            Ok(r) => (Some(r.darr), None, r.counts),
            Err(e @ (StatsError::FilteredEmpty(_) | StatsError::AllTied(_))) => {
                (None, Some(e.to_string()), pair_counts(human, metric, groups, threshold)?)
            }
            Err(e) => return Err(e),
        };
        Ok(CorrelationReport {
            kendall,
            kendall_definition: KENDALL_DEFINITION.to_string(),
            pearson,
            darr,
            darr_note,
            threshold,
            n: human.len(),
            counts,
        })
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let darr = self.darr.map_or_else(|| "n/a".to_string(), |d| format!("{d:.6}"));
        let rows = [
            ("kendall", format!("{:.6}", self.kendall)),
            ("pearson", format!("{:.6}", self.pearson)),
            ("darr", darr),
            ("threshold", format!("{}", self.threshold)),
            ("n", self.n.to_string()),
            ("pairs_total", self.counts.pairs_total.to_string()),
            ("pairs_filtered", self.counts.pairs_filtered.to_string()),
            ("ties_discarded", self.counts.ties_discarded.to_string()),
            ("concordant", self.counts.concordant.to_string()),
            ("discordant", self.counts.discordant.to_string()),
        ];
        for (k, v) in rows {
            let _ = writeln!(s, "{k:<16}{v:>14}");
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SkewConfig {
    pub alpha_train: f64,
    pub alpha_test: f64,
    pub n_bins: usize,
    pub seed: u64,
    /// Keep test records out of train. Off by default: the two draws are
    /// independent and a record may land in both.
    pub disjoint: bool,
}

impl Default for SkewConfig {
    fn default() -> Self {
        SkewConfig {
            alpha_train: 0.0,
            alpha_test: 0.0,
            n_bins: 10,
            seed: 0,
            disjoint: false,
        }
    }
}

/// Bin (1-based, 1 = lowest ratings) of every record, in input order.
/// Ties in rating are broken by source id, then input order.
pub fn rating_bins(ratings: &[f64], source_ids: &[&str], n_bins: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..ratings.len()).collect();
    order.sort_by(|&a, &b| ratings[a].total_cmp(&ratings[b]).then_with(|| source_ids[a].cmp(source_ids[b])));
    let mut bins = vec![0; ratings.len()];
    for (rank, &i) in order.iter().enumerate() {
        bins[i] = rank * n_bins / ratings.len() + 1;
    }
    bins
}

/// Inclusion probabilities `(train, test)` for bin `b`.
pub fn skew_probabilities(b: usize, config: &SkewConfig) -> (f64, f64) {
    let train = (b as f64).powf(-config.alpha_train);
    let test = ((config.n_bins + 1 - b) as f64).powf(-config.alpha_test);
    (train, test)
}

/// Indices of the records drawn into the left-skewed train sample and the
/// right-skewed test sample, each in input order.
pub fn skew_split_indices(ratings: &[f64], source_ids: &[&str], config: &SkewConfig) -> Result<(Vec<usize>, Vec<usize>), StatsError> {
    if ratings.len() != source_ids.len() {
        return Err(StatsError::LengthMismatch(ratings.len(), source_ids.len()));
    }
    if config.n_bins < 2 {
        return Err(StatsError::BadConfig(format!("n_bins {} < 2", config.n_bins)));
    }
    if !(config.alpha_train >= 0.0 && config.alpha_test >= 0.0) {
        return Err(StatsError::BadConfig("skew factors must be nonnegative".into()));
    }
    if ratings.iter().any(|r| !r.is_finite()) {
        return Err(StatsError::NonFinite);
    }
    if ratings.len() < config.n_bins {
        return Err(StatsError::TooFew {
            need: config.n_bins,
            got: ratings.len(),
        });
    }
    let bins = rating_bins(ratings, source_ids, config.n_bins);
    let mut rng = derived_rng(config.seed, "skew_split", 0);
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (i, &b) in bins.iter().enumerate() {
        let (pt, pe) = skew_probabilities(b, config);
        let (u1, u2): (f64, f64) = (rng.random(), rng.random());
        let in_train = u1 < pt;
        if in_train {
            train.push(i);
        }
        if u2 < pe && !(config.disjoint && in_train) {
            test.push(i);
        }
    }
    Ok((train, test))
}

/// Left-skewed train and right-skewed test samples of `data`.
pub fn skew_split(data: &[RatedExample], config: &SkewConfig) -> Result<(Vec<RatedExample>, Vec<RatedExample>), StatsError> {
    let ratings: Vec<f64> = data.iter().map(|e| e.rating).collect();
    let ids: Vec<&str> = data.iter().map(|e| e.source_id.as_str()).collect();
    let (train, test) = skew_split_indices(&ratings, &ids, config)?;
    let pick = |idx: Vec<usize>| idx.into_iter().map(|i| data[i].clone()).collect();
    Ok((pick(train), pick(test)))
}

/// Best score of `candidate` against any of `references`.
pub fn multiref_score<R, C, E>(
    candidate: &C,
    references: &[R],
    mut score: impl FnMut(&R, &C) -> Result<f64, E>,
) -> Result<f64, MultirefError<E>> {
    let mut best: Option<f64> = None;
    for r in references {
        let s = score(r, candidate).map_err(MultirefError::Scorer)?;
        best = Some(best.map_or(s, |b| b.max(s)));
    }
    best.ok_or(MultirefError::NoReferences)
}

#[derive(Debug, Error, PartialEq)]
pub enum MultirefError<E> {
    #[error("no references")]
    NoReferences,
    #[error("scorer failed: {0}")]
    Scorer(E),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AblationMode {
    SingleTask,
    LeaveOneOut,
}

/// Trains and evaluates one configuration. `None` means no pre-training.
pub trait AblationPipeline: Sync {
    fn tau(&self, tasks: Option<&TaskSet>) -> Result<f64, String>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub task: String,
    pub active: Vec<String>,
    pub tau: Option<f64>,
    pub delta_vs_no_pretraining: Option<f64>,
    /// Leave-one-out only.
    pub delta_vs_full: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub mode: AblationMode,
    pub baseline_tau: f64,
    pub full_tau: Option<f64>,
    pub rows: Vec<AblationRow>,
}

/// Weights of `base` with only task `k` kept (single-task) or task `k`
/// zeroed (leave-one-out).
pub fn ablation_weights(base: &TaskSet, mode: AblationMode, k: usize) -> Vec<f64> {
    base.weights()
        .iter()
        .enumerate()
        .map(|(i, &w)| match mode {
            AblationMode::SingleTask if i == k => w,
            AblationMode::SingleTask => 0.0,
            AblationMode::LeaveOneOut if i == k => 0.0,
            AblationMode::LeaveOneOut => w,
        })
        .collect()
}

/// One row per task of `base`. Baseline failures abort; row failures are
/// recorded and the other rows continue.
pub fn run_ablation(base: &TaskSet, mode: AblationMode, pipeline: &dyn AblationPipeline) -> Result<AblationTable, StatsError> {
    let baseline_tau = pipeline.tau(None).map_err(StatsError::Baseline)?;
    let full_tau = match mode {
        AblationMode::SingleTask => None,
        AblationMode::LeaveOneOut => Some(pipeline.tau(Some(base)).map_err(StatsError::Baseline)?),
    };
    let rows = (0..base.len())
        .into_par_iter()
        .map(|k| {
            let weights = ablation_weights(base, mode, k);
            let task = base.tasks()[k].name.clone();
            let active = base
                .tasks()
                .iter()
                .zip(&weights)
                .filter(|(_, &w)| w != 0.0)
                .map(|(t, _)| t.name.clone())
                .collect();
            let result = base
                .with_weights(&weights)
                .map_err(|e| e.to_string())
                .and_then(|ts| pipeline.tau(Some(&ts)));
            match result {
                Ok(tau) => AblationRow {
                    task,
                    active,
                    tau: Some(tau),
                    delta_vs_no_pretraining: Some(tau - baseline_tau),
                    delta_vs_full: full_tau.map(|f| tau - f),
                    error: None,
                },
                Err(e) => AblationRow {
                    task,
                    active,
                    tau: None,
                    delta_vs_no_pretraining: None,
                    delta_vs_full: None,
                    error: Some(e),
                },
            }
        })
        .collect();
    Ok(AblationTable {
        mode,
        baseline_tau,
        full_tau,
        rows,
    })
}

fn opt(x: Option<f64>) -> String {
    x.map_or_else(String::new, |v| format!("{v:.6}"))
}

impl AblationTable {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("task,active,tau,delta_vs_no_pretraining,delta_vs_full,error\n");
        for r in &self.rows {
            let err = r.error.as_deref().unwrap_or("").replace('"', "'");
            let _ = writeln!(
                s,
                "{},{},{},{},{},\"{}\"",
                r.task,
                r.active.join(";"),
                opt(r.tau),
                opt(r.delta_vs_no_pretraining),
                opt(r.delta_vs_full),
                err
            );
        }
        s
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("baseline tau (no pre-training): {:.6}\n", self.baseline_tau);
        if let Some(f) = self.full_tau {
            let _ = writeln!(s, "full pre-training tau: {f:.6}");
        }
        let _ = writeln!(s, "{:<20}{:>8}{:>12}{:>14}{:>14}", "task", "active", "tau", "d_vs_none", "d_vs_full");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<20}{:>8}{:>12}{:>14}{:>14}{}",
                r.task,
                r.active.len(),
                opt(r.tau),
                opt(r.delta_vs_no_pretraining),
                opt(r.delta_vs_full),
                r.error.as_deref().map(|e| format!("  error: {e}")).unwrap_or_default()
            );
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kendall_examples() {
        let g = [0; 4];
        assert_eq!(kendall_pairwise(&[1.0, 2.0, 3.0, 4.0], &[0.1, 0.2, 0.3, 0.4], &g).unwrap(), 1.0);
        assert_eq!(kendall_pairwise(&[1.0, 2.0, 3.0, 4.0], &[0.4, 0.3, 0.2, 0.1], &g).unwrap(), -1.0);
        let t = kendall_pairwise(&[3.0, 2.0, 1.0], &[0.3, 0.1, 0.2], &[0; 3]).unwrap();
        assert!((t - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(kendall_pairwise(&[1.0, 1.0], &[0.0, 1.0], &[0; 2]), Err(StatsError::AllTied(1)));
        assert_eq!(kendall_pairwise(&[1.0, 2.0], &[0.0, 1.0], &[0, 1]), Err(StatsError::InputEmpty));
    }

    #[test]
    fn darr_examples() {
        let r = darr(&[80.0, 70.0, 40.0], &[0.8, 0.9, 0.1], &[0; 3], DARR_THRESHOLD).unwrap();
        assert_eq!(r.darr, 1.0);
        assert_eq!(r.counts.pairs_filtered, 1);
        assert_eq!(r.counts.concordant, 2);
        assert_eq!(
            darr(&[80.0, 70.0], &[0.8, 0.9], &[0; 2], DARR_THRESHOLD),
            Err(StatsError::FilteredEmpty(1))
        );
        let split = pair_counts(&[1.0, 2.0, 3.0, 4.0], &[1.0, 2.0, 3.0, 4.0], &[0, 0, 1, 1], 0.0).unwrap();
        let merged = pair_counts(&[1.0, 2.0, 3.0, 4.0], &[1.0, 2.0, 3.0, 4.0], &[0; 4], 0.0).unwrap();
        assert_eq!((split.pairs_total, merged.pairs_total), (2, 6));
    }

    #[test]
    fn pearson_examples() {
        let x = [1.0, 2.0, 3.0, 5.0];
        let y: Vec<f64> = x.iter().map(|v| 2.0 * v + 1.0).collect();
        assert!((pearson(&x, &y).unwrap() - 1.0).abs() < 1e-12);
        let neg: Vec<f64> = x.iter().map(|v| -v).collect();
        assert!((pearson(&x, &neg).unwrap() + 1.0).abs() < 1e-12);
        assert!((pearson(&[1.0, 2.0, 3.0], &[1.0, 3.0, 2.0]).unwrap() - 0.5).abs() < 1e-12);
        assert_eq!(pearson(&[1.0, 1.0], &[1.0, 2.0]), Err(StatsError::Constant));
    }

    #[test]
    fn multiref_examples() {
        let refs = [0.2, 0.7];
        let f = |r: &f64, _: &()| Ok::<f64, ()>(*r);
        assert_eq!(multiref_score(&(), &refs, f).unwrap(), 0.7);
        assert_eq!(multiref_score(&(), &[0.2, 0.7, 0.7, 0.2], f).unwrap(), 0.7);
        assert_eq!(multiref_score(&(), &[0.4], f).unwrap(), 0.4);
        assert_eq!(multiref_score(&(), &[] as &[f64], f), Err(MultirefError::NoReferences));
    }

    #[test]
    fn report_without_darr_pairs() {
        let r = CorrelationReport::compute(&[1.0, 2.0, 3.0], &[1.0, 3.0, 2.0], &[0; 3], 25.0).unwrap();
        assert!(r.darr.is_none() && r.darr_note.is_some());
        assert!((r.kendall - 1.0 / 3.0).abs() < 1e-15);
        let json = serde_json::to_string(&r).unwrap();
        assert!(json.contains("\"pairs_total\":3"));
    }

    fn rated(n: usize) -> Vec<RatedExample> {
        let vocab = crate::textcore::Vocabulary::reserved_only();
        (0..n)
            .map(|i| RatedExample {
                pair: crate::textcore::SentencePair::new(
                    crate::textcore::tokenize("a", &vocab),
                    crate::textcore::tokenize("b", &vocab),
                ),
                rating: (i % 7) as f64,
                source_id: format!("s{i:03}"),
            })
            .collect()
    }

    #[test]
    fn skew_zero_keeps_everything_and_is_seeded() {
        let data = rated(40);
        let cfg = SkewConfig {
            seed: 5,
            ..SkewConfig::default()
        };
        let (train, test) = skew_split(&data, &cfg).unwrap();
        assert_eq!((train.len(), test.len()), (40, 40));
        let cfg = SkewConfig {
            alpha_train: 1.0,
            alpha_test: 1.0,
            seed: 5,
            ..SkewConfig::default()
        };
        assert_eq!(skew_split(&data, &cfg).unwrap(), skew_split(&data, &cfg).unwrap());
        let disjoint = SkewConfig { disjoint: true, ..cfg };
        let (train, test) = skew_split(&data, &disjoint).unwrap();
        assert!(test.iter().all(|t| !train.iter().any(|r| r.source_id == t.source_id)));
        assert!(skew_split(&data[..5], &disjoint).is_err());
    }

    #[test]
    fn bins_are_equal_sized_and_ordered() {
        let data = rated(50);
        let ratings: Vec<f64> = data.iter().map(|e| e.rating).collect();
        let ids: Vec<&str> = data.iter().map(|e| e.source_id.as_str()).collect();
        let bins = rating_bins(&ratings, &ids, 10);
        for b in 1..=10 {
            assert_eq!(bins.iter().filter(|&&x| x == b).count(), 5);
        }
        for (i, j) in (0..50).flat_map(|i| (0..50).map(move |j| (i, j))) {
            if data[i].rating < data[j].rating {
                assert!(bins[i] <= bins[j]);
            }
        }
    }

    struct Fake;
    impl AblationPipeline for Fake {
        fn tau(&self, tasks: Option<&TaskSet>) -> Result<f64, String> {
            match tasks {
                None => Ok(0.1),
                Some(t) if t.weights()[0] == 0.0 && t.weights().iter().sum::<f64>() == 0.0 => Ok(0.1),
                Some(t) if t.weights()[3] != 0.0 && t.weights()[4] == 0.0 && t.weights()[5] != 0.0 => Err("boom".into()),
                Some(t) => Ok(0.1 + 0.01 * t.weights().iter().sum::<f64>()),
            }
        }
    }

    #[test]
    fn ablation_rows_and_errors() {
        let mut w = vec![1.0; 9];
        w[0] = 0.0;
        let base = TaskSet::standard().with_weights(&w).unwrap();
        let single = run_ablation(&base, AblationMode::SingleTask, &Fake).unwrap();
        assert_eq!(single.rows.len(), 9);
        assert_eq!(single.rows[0].delta_vs_no_pretraining, Some(0.0));
        assert!(single.rows[0].active.is_empty());
        let loo = run_ablation(&TaskSet::standard(), AblationMode::LeaveOneOut, &Fake).unwrap();
        assert_eq!(loo.rows.len(), 9);
        assert!(loo.rows.iter().all(|r| r.active.len() == 8));
        assert!(loo.rows[4].error.is_some() && loo.rows[5].error.is_none());
        assert_eq!(loo.to_csv().lines().count(), 10);
    }
}
