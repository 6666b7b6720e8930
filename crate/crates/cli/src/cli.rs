//! Command-line front end. Every command writes only below its `--out`
//! directory; exit codes are 0 on success, 1 on runtime failure and 2 on
//! usage errors.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use mdvc_core::corpus::{generate_corpus_with, Corpus, CorpusSpec, FeatureSequence};
use mdvc_core::experiment::{job_configs, report as experiment_report, run_job, score_utterance, summarize, JobResult};
use mdvc_core::metrics::global_variance;
use mdvc_core::train::{convert, train, Clock, TrainConfig, TrainFailure, Variant};
use rayon::prelude::*;

use crate::checkpoint;
use crate::config::{resolve_seed, CliConfig};
use crate::corpus_dir::{read_corpus, write_corpus};
use crate::error::{CliError, Result};
use crate::report::{self, SeedRows, REPORT_FILE, TRACE_FILE};
use crate::vcf;
use crate::verify;

pub const CHECKPOINT_FILE: &str = "model.vck";
pub const REFERENCE_CONDITION: &str = "reference";

#[derive(Debug, Parser)]
#[command(name = "mdvc", version, about = "Many-to-many voice conversion on cepstral feature sequences")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic parallel corpus directory.
    GenCorpus(GenCorpusArgs),
    /// Train one model and write its checkpoint and loss trace.
    Train(TrainArgs),
    /// Convert feature files from a source to a target speaker.
    Convert(ConvertArgs),
    /// Score converted utterances against parallel references.
    Evaluate(EvaluateArgs),
    /// Train and evaluate several variants over several seeds.
    Experiment(ExperimentArgs),
    /// Run the gradient, loss and metric verification battery.
    Verify(VerifyArgs),
}

#[derive(Debug, Args)]
pub struct GenCorpusArgs {
    /// Number of speakers; the first half (rounded up) are labelled F, the rest M.
    #[arg(long, default_value_t = 4)]
    pub speakers: usize,
    /// Training utterances per speaker.
    #[arg(long, default_value_t = 81)]
    pub train: usize,
    /// Parallel evaluation utterances per speaker.
    #[arg(long, default_value_t = 35)]
    pub eval: usize,
    /// Minimum frames per utterance; lengths vary up to 25% above it.
    #[arg(long, default_value_t = 160)]
    pub frames: usize,
    /// Observation noise standard deviation.
    #[arg(long, default_value_t = CorpusSpec::DEFAULT_NOISE)]
    pub noise: f64,
    /// Corpus seed [default: $VCF_SEED, else 0].
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output corpus directory.
    #[arg(long)]
    pub out: PathBuf,
}

/// Training settings that override the config file.
#[derive(Debug, Args, Default)]
pub struct TrainOverrides {
    /// JSON config with any training keys (plus corpus, out, variants, seeds, jobs) [default: none].
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Corpus directory [default: config `corpus`].
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Output directory [default: config `out`].
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Steps of every training stage the variant has [default: 2000].
    #[arg(long)]
    pub steps: Option<u64>,
    /// Non-adversarial steps [default: 2000].
    #[arg(long)]
    pub stage1_steps: Option<u64>,
    /// Adversarial generator steps, ignored by other variants [default: 2000].
    #[arg(long)]
    pub stage2_steps: Option<u64>,
    /// Adversarial loss weight [default: 1 for adversarial variants, else 0].
    #[arg(long)]
    pub lambda1: Option<f64>,
    /// Cycle loss weight [default: 1 for cycle variants, else 0].
    #[arg(long)]
    pub lambda2: Option<f64>,
    /// Adam learning rate [default: 1e-4].
    #[arg(long)]
    pub lr: Option<f64>,
    /// Utterances per batch [default: 8].
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Frames per training crop [default: 128].
    #[arg(long)]
    pub crop_frames: Option<usize>,
    /// Critic updates per generator update [default: 5].
    #[arg(long)]
    pub critic_steps: Option<usize>,
    /// Critic weight clipping bound [default: 0.01].
    #[arg(long)]
    pub clip: Option<f64>,
    /// Comma-separated training speaker names [default: every corpus speaker].
    #[arg(long, value_delimiter = ',')]
    pub speakers: Option<Vec<String>>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Model variant: vae, vaewgan, cyclevae-single, cyclevaewgan-single,
    /// cyclevae-multi or cyclevaewgan-multi [default: config `variant`, else vae].
    #[arg(long)]
    pub variant: Option<Variant>,
    /// Training seed [default: config `seed`, else $VCF_SEED, else 0].
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub common: TrainOverrides,
}

#[derive(Debug, Args)]
pub struct ConvertArgs {
    /// Checkpoint written by `train`.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// A feature file, or a directory whose `.vcf` files are all converted.
    #[arg(long)]
    pub input: PathBuf,
    /// Source speaker name.
    #[arg(long)]
    pub source: String,
    /// Target speaker name.
    #[arg(long)]
    pub target: String,
    /// Output directory; each output keeps its input file name.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Converted features laid out as `[<variant>/[<seed>/]]<source>-to-<target>/<id>.vcf`.
    #[arg(long)]
    pub converted: PathBuf,
    /// Corpus directory holding the parallel evaluation references.
    #[arg(long)]
    pub reference: PathBuf,
    /// Output directory for report.csv and GV curves.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ExperimentArgs {
    /// Comma-separated variants [default: config `variants`, else vae,cyclevae-multi].
    #[arg(long, value_delimiter = ',')]
    pub variants: Option<Vec<Variant>>,
    /// Comma-separated seeds [default: config `seeds`, else 0,1,2].
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    /// Concurrent training jobs [default: config `jobs`, else 1].
    #[arg(long)]
    pub jobs: Option<usize>,
    #[command(flatten)]
    pub common: TrainOverrides,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    /// Random trials per gradient check.
    #[arg(long, default_value_t = 20)]
    pub trials: u64,
}

struct WallClock(Instant);

impl Clock for WallClock {
    fn seconds(&self) -> f64 {
        self.0.elapsed().as_secs_f64()
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenCorpus(a) => gen_corpus(a),
        Command::Train(a) => train_cmd(a),
        Command::Convert(a) => convert_cmd(a),
        Command::Evaluate(a) => evaluate_cmd(a),
        Command::Experiment(a) => experiment_cmd(a),
        Command::Verify(a) => verify_cmd(a),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn gen_corpus(a: GenCorpusArgs) -> Result<()> {
    let spec = CorpusSpec {
        noise: a.noise,
        ..CorpusSpec::new(a.speakers, a.train, a.eval, a.frames, resolve_seed(a.seed, None)?)
    };
    let corpus = generate_corpus_with(&spec)?;
    create_dir(&a.out)?;
    write_corpus(&corpus, Some(spec), &a.out)?;
    println!(
        "wrote {} speakers x ({} + {}) utterances to {}",
        a.speakers,
        a.train,
        a.eval,
        a.out.display()
    );
    Ok(())
}

/// A resolved training setup: config file, then flags.
struct Setup {
    file: CliConfig,
    corpus_dir: PathBuf,
    out: PathBuf,
    base: TrainConfig,
}

fn setup(o: &TrainOverrides) -> Result<Setup> {
    let file = CliConfig::load_or_default(o.config.as_deref())?;
    let corpus_dir = o
        .corpus
        .clone()
        .or_else(|| file.corpus.clone())
        .ok_or_else(|| CliError::Usage("no corpus given (--corpus or config `corpus`)".into()))?;
    let out = o
        .out
        .clone()
        .or_else(|| file.out.clone())
        .ok_or_else(|| CliError::Usage("no output directory given (--out or config `out`)".into()))?;
    let mut base = file.train.clone();
    if o.lambda1.is_some() {
        base.lambda1 = o.lambda1;
    }
    if o.lambda2.is_some() {
        base.lambda2 = o.lambda2;
    }
    if let Some(lr) = o.lr {
        base.adam.lr = lr;
    }
    if let Some(b) = o.batch_size {
        base.batch_size = b;
    }
    if let Some(c) = o.crop_frames {
        base.crop_frames = c;
    }
    if let Some(c) = o.critic_steps {
        base.critic_steps_per_gen = c;
    }
    if let Some(c) = o.clip {
        base.clip_c = c;
    }
    Ok(Setup {
        file,
        corpus_dir,
        out,
        base,
    })
}

/// Applies the stage-length flags once the variant is known; the adversarial
/// stage is only set for variants that have one.
fn with_steps(mut c: TrainConfig, o: &TrainOverrides) -> TrainConfig {
    if let Some(s) = o.steps {
        c.stage1_steps = s;
        c.stage2_steps = c.variant.adversarial().then_some(s);
    }
    if let Some(s) = o.stage1_steps {
        c.stage1_steps = s;
    }
    if o.stage2_steps.is_some() && c.variant.adversarial() {
        c.stage2_steps = o.stage2_steps;
    }
    c
}

fn speaker_indices(names: &Option<Vec<String>>, corpus: &Corpus) -> Result<Option<Vec<usize>>> {
    names
        .as_ref()
        .map(|ns| ns.iter().map(|n| corpus.speaker_index(n).map_err(CliError::from)).collect())
        .transpose()
}

fn save_run(out: &Path, ckpt: &mdvc_core::train::Checkpoint, trace: &mdvc_core::train::LossTrace) -> Result<()> {
    create_dir(out)?;
    checkpoint::save(ckpt, &out.join(CHECKPOINT_FILE))?;
    report::write_trace(trace, &out.join(TRACE_FILE))
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let s = setup(&a.common)?;
    let corpus = read_corpus(&s.corpus_dir)?;
    let mut config = s.base;
    if let Some(v) = a.variant {
        config.variant = v;
    }
    config.seed = resolve_seed(a.seed, s.file.seed_given.then_some(s.file.train.seed))?;
    if let Some(sp) = speaker_indices(&a.common.speakers, &corpus)? {
        config.speakers = sp;
    }
    let config = with_steps(config, &a.common);
    config.validate(corpus.n_speakers())?;
    create_dir(&s.out)?;
    let (variant, total) = (config.variant, config.total_steps());
    match train(config, &corpus, &WallClock(Instant::now())) {
        Ok((ckpt, trace)) => {
            save_run(&s.out, &ckpt, &trace)?;
            let last = trace.entries.last().map(|e| e.report.total);
            println!(
                "trained {variant} for {total} steps; final loss {}",
                last.map_or("n/a".into(), |l| format!("{l:.4}"))
            );
            Ok(())
        }
        Err(failure) => {
            report::write_trace(&failure.trace, &s.out.join(TRACE_FILE))?;
            Err(failure.into())
        }
    }
}

fn vcf_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| CliError::io(dir, e))? {
        let path = entry.map_err(|e| CliError::io(dir, e))?.path();
        if path.is_file() && path.extension().is_some_and(|x| x == "vcf") {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

fn convert_cmd(a: ConvertArgs) -> Result<()> {
    let ckpt = checkpoint::load(&a.checkpoint, None)?;
    let source = ckpt.speaker_index(&a.source)?;
    let target = ckpt.speaker_index(&a.target)?;
    let inputs = if a.input.is_dir() {
        vcf_files(&a.input)?
    } else {
        vec![a.input.clone()]
    };
    if inputs.is_empty() {
        return Err(CliError::Usage(format!("no .vcf files in {}", a.input.display())));
    }
    create_dir(&a.out)?;
    for path in &inputs {
        let x = vcf::read_features(path, source)?;
        let y = convert(&ckpt, &x, source, target)?;
        let name = path.file_name().expect("feature files have names");
        vcf::write_features(&y, &a.out.join(name))?;
    }
    println!("converted {} file(s) from {} to {}", inputs.len(), a.source, a.target);
    Ok(())
}

/// Converted utterances of one `(variant, seed)` condition.
struct ConvertedRun {
    variant: String,
    seed: u64,
    pairs: Vec<(usize, usize, PathBuf)>,
}

fn subdirs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| CliError::io(dir, e))? {
        let path = entry.map_err(|e| CliError::io(dir, e))?.path();
        if path.is_dir() {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

fn dir_name(p: &Path) -> String {
    p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
}

fn pair_of(name: &str, corpus: &Corpus) -> Option<(usize, usize)> {
    let (x, y) = name.split_once("-to-")?;
    Some((corpus.speaker_index(x).ok()?, corpus.speaker_index(y).ok()?))
}

/// Finds pair directories at depth 1 (`<pair>`), 2 (`<variant>/<pair>`) or 3
/// (`<variant>/<seed>/<pair>`).
fn discover(root: &Path, corpus: &Corpus) -> Result<Vec<ConvertedRun>> {
    let mut runs: Vec<ConvertedRun> = Vec::new();
    let mut add = |variant: String, seed: u64, pair: (usize, usize), dir: PathBuf| {
        match runs.iter_mut().find(|r| r.variant == variant && r.seed == seed) {
            Some(r) => r.pairs.push((pair.0, pair.1, dir)),
            None => runs.push(ConvertedRun {
                variant,
                seed,
                pairs: vec![(pair.0, pair.1, dir)],
            }),
        }
    };
    for d1 in subdirs(root)? {
        let n1 = dir_name(&d1);
        if let Some(p) = pair_of(&n1, corpus) {
            add("converted".into(), 0, p, d1);
            continue;
        }
        for d2 in subdirs(&d1)? {
            let n2 = dir_name(&d2);
            if let Some(p) = pair_of(&n2, corpus) {
                add(n1.clone(), 0, p, d2);
                continue;
            }
            let Ok(seed) = n2.parse::<u64>() else {
                return Err(CliError::Usage(format!(
                    "{} is neither a <source>-to-<target> directory nor a seed",
                    d2.display()
                )));
            };
            for d3 in subdirs(&d2)? {
                let p = pair_of(&dir_name(&d3), corpus).ok_or_else(|| {
                    CliError::Usage(format!("{} is not a <source>-to-<target> directory", d3.display()))
                })?;
                add(n1.clone(), seed, p, d3);
            }
        }
    }
    if runs.is_empty() {
        return Err(CliError::Usage(format!(
            "no <source>-to-<target> directories under {}",
            root.display()
        )));
    }
    Ok(runs)
}

fn evaluate_cmd(a: EvaluateArgs) -> Result<()> {
    let corpus = read_corpus(&a.reference)?;
    let runs = discover(&a.converted, &corpus)?;
    let groups: Vec<String> = corpus.speakers.iter().map(|s| s.group.clone()).collect();
    let mut missing = Vec::new();
    let mut seed_rows = Vec::new();
    let mut converted_by_variant: BTreeMap<String, Vec<FeatureSequence>> = BTreeMap::new();
    let mut targets = Vec::new();
    for run in &runs {
        let mut scores = Vec::new();
        for (x, y, dir) in &run.pairs {
            if !targets.contains(y) {
                targets.push(*y);
            }
            for path in vcf_files(dir)? {
                let out = vcf::read_features(&path, *y)?;
                match corpus.eval[*y].iter().find(|r| r.id == out.id) {
                    Some(reference) => {
                        scores.push(score_utterance(*x, *y, &out, reference)?);
                        converted_by_variant.entry(run.variant.clone()).or_default().push(out);
                    }
                    None => missing.push(format!("{}/{}", corpus.speakers[*y].name, out.id)),
                }
            }
        }
        if missing.is_empty() {
            if scores.is_empty() {
                return Err(CliError::Usage(format!(
                    "condition {} seed {} has no feature files",
                    run.variant, run.seed
                )));
            }
            seed_rows.push(SeedRows {
                variant: run.variant.clone(),
                seed: run.seed,
                rows: summarize(&scores, &groups)?,
            });
        }
    }
    if !missing.is_empty() {
        return Err(CliError::Usage(format!("missing references: {}", missing.join(", "))));
    }
    create_dir(&a.out)?;
    let summaries = report::write_report(&seed_rows, &a.out.join(REPORT_FILE))?;
    for (variant, utts) in &converted_by_variant {
        report::write_gv(&global_variance(utts)?, &a.out.join(report::gv_file_name(variant)))?;
    }
    targets.sort_unstable();
    let reference_gv = global_variance(targets.iter().flat_map(|&t| &corpus.eval[t]))?;
    report::write_gv(&reference_gv, &a.out.join(report::gv_file_name(REFERENCE_CONDITION)))?;
    print!("{}", report::format_table(&summaries));
    Ok(())
}

fn experiment_cmd(a: ExperimentArgs) -> Result<()> {
    let s = setup(&a.common)?;
    let corpus = read_corpus(&s.corpus_dir)?;
    let variants = a
        .variants
        .or(s.file.variants.clone())
        .unwrap_or_else(|| vec![Variant::Vae, Variant::CyclevaeMulti]);
    let seeds = match a.seeds.or(s.file.seeds.clone()) {
        Some(v) => v,
        None if std::env::var(crate::config::SEED_ENV).is_ok() => vec![resolve_seed(None, None)?],
        None => vec![0, 1, 2],
    };
    let jobs = a.jobs.or(s.file.jobs).unwrap_or(1);
    if jobs == 0 {
        return Err(CliError::Usage("--jobs must be at least 1".into()));
    }
    let mut base = s.base;
    if let Some(sp) = speaker_indices(&a.common.speakers, &corpus)? {
        base.speakers = sp;
    }
    let configs: Vec<TrainConfig> = job_configs(&base, &variants, &seeds)?
        .into_iter()
        .map(|c| with_steps(c, &a.common))
        .collect();
    for c in &configs {
        c.validate(corpus.n_speakers())?;
    }
    create_dir(&s.out)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| CliError::Usage(format!("cannot start {jobs} workers: {e}")))?;
    let start = Instant::now();
    let results: Vec<std::result::Result<JobResult, TrainFailure>> = pool.install(|| {
        configs
            .into_par_iter()
            .map(|c| run_job(c, &corpus, &WallClock(start)))
            .collect()
    });
    let mut done = Vec::new();
    for r in results {
        let job = r?;
        save_run(
            &s.out.join(job.variant.name()).join(job.seed.to_string()),
            &job.checkpoint,
            &job.trace,
        )?;
        done.push(job);
    }
    let seed_rows: Vec<SeedRows> = done
        .iter()
        .map(|j| SeedRows {
            variant: j.variant.name().into(),
            seed: j.seed,
            rows: j.rows.clone(),
        })
        .collect();
    let rep = experiment_report(done, &corpus)?;
    let summaries = report::write_report(&seed_rows, &s.out.join(REPORT_FILE))?;
    for v in &rep.summaries {
        report::write_gv(&v.gv, &s.out.join(report::gv_file_name(v.variant.name())))?;
    }
    report::write_gv(
        &rep.reference_gv,
        &s.out.join(report::gv_file_name(REFERENCE_CONDITION)),
    )?;
    print!("{}", report::format_table(&summaries));
    Ok(())
}

fn verify_cmd(a: VerifyArgs) -> Result<()> {
    if a.trials == 0 {
        return Err(CliError::Usage("--trials must be at least 1".into()));
    }
    let results = verify::run_battery(a.trials);
    for r in &results {
        println!("{r}");
    }
    let failed = results.iter().filter(|r| !r.passed).count();
    println!("{} of {} checks passed", results.len() - failed, results.len());
    if failed > 0 {
        return Err(CliError::Verification(failed, results.len()));
    }
    Ok(())
}
