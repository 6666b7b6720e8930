//! Multi-seed, multi-variant conversion experiments scored against the
//! parallel evaluation utterances, summarized per speaker-group pair.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, FeatureSequence};
use crate::error::{Error, Result};
use crate::metrics::{global_variance, mcd, msd, GvProfile};
use crate::train::{convert, train, Checkpoint, Clock, LossTrace, TrainConfig, TrainFailure, Variant};

/// Direction of a conversion between group labels, e.g. `M-to-F` for a
/// source labelled `M` and a target labelled `F`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PairClass {
    FtoF,
    MtoF,
    FtoM,
    MtoM,
}

impl PairClass {
    pub const ALL: [PairClass; 4] = [PairClass::FtoF, PairClass::MtoF, PairClass::FtoM, PairClass::MtoM];

    pub fn of(source_group: &str, target_group: &str) -> Option<Self> {
        match (source_group, target_group) {
            ("F", "F") => Some(PairClass::FtoF),
            ("M", "F") => Some(PairClass::MtoF),
            ("F", "M") => Some(PairClass::FtoM),
            ("M", "M") => Some(PairClass::MtoM),
            _ => None,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            PairClass::FtoF => "F-to-F",
            PairClass::MtoF => "M-to-F",
            PairClass::FtoM => "F-to-M",
            PairClass::MtoM => "M-to-M",
        }
    }
}

pub const AVERAGE_LABEL: &str = "Average";

/// Scores of one converted utterance against its parallel reference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtteranceScore {
    pub source: usize,
    pub target: usize,
    pub id: String,
    pub mcd: f64,
    pub msd: f64,
}

pub fn score_utterance(
    source: usize,
    target: usize,
    converted: &FeatureSequence,
    reference: &FeatureSequence,
) -> Result<UtteranceScore> {
    Ok(UtteranceScore {
        source,
        target,
        id: converted.id.clone(),
        mcd: mcd(converted, reference),
        msd: msd(converted, reference)?,
    })
}

/// One table row: a pair class or the average over classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub label: String,
    pub mcd: f64,
    pub msd: f64,
}

fn mean(v: impl IntoIterator<Item = f64>) -> f64 {
    let (mut s, mut n) = (0.0, 0usize);
    for x in v {
        s += x;
        n += 1;
    }
    s / n as f64
}

/// Rows for every pair class present in `scores`, in canonical order, then
/// the average of those rows. A class value is the mean over its ordered
/// speaker pairs of the per-pair utterance means. `groups[s]` is the label of
/// speaker `s`.
pub fn summarize(scores: &[UtteranceScore], groups: &[String]) -> Result<Vec<MetricRow>> {
    if scores.is_empty() {
        return Err(Error::Empty);
    }
    let group = |s: usize| groups.get(s).map(String::as_str).ok_or(Error::UnknownSpeaker(s));
    let mut pairs: Vec<(usize, usize)> = scores.iter().map(|s| (s.source, s.target)).collect();
    pairs.sort_unstable();
    pairs.dedup();
    let mut rows = Vec::new();
    for class in PairClass::ALL {
        let mut per_pair = Vec::new();
        for &(x, y) in &pairs {
            let c = PairClass::of(group(x)?, group(y)?)
                .ok_or_else(|| Error::Corpus(format!("speakers {x} and {y} lack F/M group labels")))?;
            if c != class {
                continue;
            }
            let of_pair: Vec<&UtteranceScore> = scores.iter().filter(|s| (s.source, s.target) == (x, y)).collect();
            per_pair.push((mean(of_pair.iter().map(|s| s.mcd)), mean(of_pair.iter().map(|s| s.msd))));
        }
        if !per_pair.is_empty() {
            rows.push(MetricRow {
                label: class.label().into(),
                mcd: mean(per_pair.iter().map(|p| p.0)),
                msd: mean(per_pair.iter().map(|p| p.1)),
            });
        }
    }
    let average = MetricRow {
        label: AVERAGE_LABEL.into(),
        mcd: mean(rows.iter().map(|r| r.mcd)),
        msd: mean(rows.iter().map(|r| r.msd)),
    };
    rows.push(average);
    Ok(rows)
}

/// Outcome of training one variant at one seed and evaluating it.
#[derive(Debug, Clone, PartialEq)]
pub struct JobResult {
    pub variant: Variant,
    pub seed: u64,
    pub checkpoint: Checkpoint,
    pub trace: LossTrace,
    pub scores: Vec<UtteranceScore>,
    pub rows: Vec<MetricRow>,
    /// GV of every converted utterance.
    pub gv: GvProfile,
}

impl JobResult {
    pub fn average(&self) -> &MetricRow {
        self.rows.last().expect("summaries always end with the average row")
    }
}

/// Converts every evaluation utterance of every training speaker to every
/// other training speaker and scores it against the parallel reference.
pub fn evaluate(ckpt: &Checkpoint, corpus: &Corpus) -> Result<(Vec<UtteranceScore>, Vec<FeatureSequence>)> {
    let speakers = ckpt.config.training_speakers(corpus.n_speakers())?;
    let mut scores = Vec::new();
    let mut converted = Vec::new();
    for &x in &speakers {
        for &y in &speakers {
            if x == y {
                continue;
            }
            for u in &corpus.eval[x] {
                let reference = corpus.eval[y]
                    .iter()
                    .find(|r| r.id == u.id)
                    .ok_or_else(|| Error::Corpus(format!("no parallel reference for {} of speaker {y}", u.id)))?;
                let out = convert(ckpt, u, x, y)?;
                scores.push(score_utterance(x, y, &out, reference)?);
                converted.push(out);
            }
        }
    }
    Ok((scores, converted))
}

/// Trains `config` and evaluates the result.
pub fn run_job(config: TrainConfig, corpus: &Corpus, clock: &dyn Clock) -> core::result::Result<JobResult, TrainFailure> {
    let (variant, seed) = (config.variant, config.seed);
    let (checkpoint, trace) = train(config, corpus, clock)?;
    let fail = |error: Error, trace: &LossTrace| TrainFailure {
        error,
        step: checkpoint.step,
        trace: trace.clone(),
    };
    let groups: Vec<String> = checkpoint.speakers.iter().map(|s| s.group.clone()).collect();
    let (scores, converted) = evaluate(&checkpoint, corpus).map_err(|e| fail(e, &trace))?;
    let rows = summarize(&scores, &groups).map_err(|e| fail(e, &trace))?;
    let gv = global_variance(&converted).map_err(|e| fail(e, &trace))?;
    Ok(JobResult {
        variant,
        seed,
        checkpoint,
        trace,
        scores,
        rows,
        gv,
    })
}

/// Mean and sample standard deviation over seeds; the deviation is 0 for a
/// single seed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Spread {
    pub mean: f64,
    pub std: f64,
}

impl Spread {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        let m = mean(values.iter().copied());
        if n < 2 {
            return Self { mean: m, std: 0.0 };
        }
        let ss: f64 = values.iter().map(|v| (v - m) * (v - m)).sum();
        Self {
            mean: m,
            std: libm::sqrt(ss / (n - 1) as f64),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub label: String,
    pub mcd: Spread,
    pub msd: Spread,
}

/// One table column: a variant over all its seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantSummary {
    pub variant: Variant,
    pub seeds: Vec<u64>,
    pub rows: Vec<SummaryRow>,
    /// Per-dimension GV of converted speech, averaged over seeds.
    pub gv: GvProfile,
}

/// Groups job results by variant (in order of first appearance) and reduces
/// each row over seeds.
pub fn aggregate(jobs: &[JobResult]) -> Result<Vec<VariantSummary>> {
    let mut variants: Vec<Variant> = Vec::new();
    for j in jobs {
        if !variants.contains(&j.variant) {
            variants.push(j.variant);
        }
    }
    let mut out = Vec::new();
    for v in variants {
        let runs: Vec<&JobResult> = jobs.iter().filter(|j| j.variant == v).collect();
        let labels: Vec<String> = runs[0].rows.iter().map(|r| r.label.clone()).collect();
        let mut rows = Vec::new();
        for label in labels {
            let mut mcds = Vec::new();
            let mut msds = Vec::new();
            for r in &runs {
                let row = r
                    .rows
                    .iter()
                    .find(|x| x.label == label)
                    .ok_or_else(|| Error::Config(format!("seed {} of {v} has no {label} row", r.seed)))?;
                mcds.push(row.mcd);
                msds.push(row.msd);
            }
            rows.push(SummaryRow {
                label,
                mcd: Spread::of(&mcds),
                msd: Spread::of(&msds),
            });
        }
        let dims = runs[0].gv.per_dim.len();
        let per_dim: Vec<f64> = (0..dims).map(|d| mean(runs.iter().map(|r| r.gv.per_dim[d]))).collect();
        let average = mean(per_dim.iter().copied());
        out.push(VariantSummary {
            variant: v,
            seeds: runs.iter().map(|r| r.seed).collect(),
            rows,
            gv: GvProfile { per_dim, average },
        });
    }
    Ok(out)
}

/// GV of the real evaluation utterances of `speakers`.
pub fn reference_gv(corpus: &Corpus, speakers: &[usize]) -> Result<GvProfile> {
    global_variance(speakers.iter().flat_map(|&s| corpus.eval.get(s).into_iter().flatten()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentReport {
    pub jobs: Vec<JobResult>,
    pub summaries: Vec<VariantSummary>,
    pub reference_gv: GvProfile,
}

/// The `(variant, seed)` job configurations of an experiment, variant-major.
/// Weights and stage lengths left unset in `base` take each variant's preset.
pub fn job_configs(base: &TrainConfig, variants: &[Variant], seeds: &[u64]) -> Result<Vec<TrainConfig>> {
    if seeds.is_empty() || variants.is_empty() {
        return Err(Error::Config("an experiment needs at least one variant and one seed".into()));
    }
    let mut out = Vec::new();
    for &variant in variants {
        for &seed in seeds {
            let mut c = base.clone();
            c.variant = variant;
            c.seed = seed;
            out.push(c);
        }
    }
    Ok(out)
}

/// Collects finished jobs into a report.
pub fn report(jobs: Vec<JobResult>, corpus: &Corpus) -> Result<ExperimentReport> {
    let first = jobs.first().ok_or(Error::Empty)?;
    let speakers = first.checkpoint.config.training_speakers(corpus.n_speakers())?;
    Ok(ExperimentReport {
        summaries: aggregate(&jobs)?,
        reference_gv: reference_gv(corpus, &speakers)?,
        jobs,
    })
}

/// Runs every job in sequence; see [`job_configs`].
pub fn run_experiment(
    base: &TrainConfig,
    variants: &[Variant],
    seeds: &[u64],
    corpus: &Corpus,
    clock: &dyn Clock,
) -> core::result::Result<ExperimentReport, TrainFailure> {
    let early = |error| TrainFailure {
        error,
        step: 0,
        trace: LossTrace::default(),
    };
    let configs = job_configs(base, variants, seeds).map_err(early)?;
    let mut jobs = Vec::new();
    for c in configs {
        jobs.push(run_job(c, corpus, clock)?);
    }
    report(jobs, corpus).map_err(early)
}
