use std::collections::BTreeMap;
use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::Serialize;
use synthmetric::demo::{edit_rated_records, template_sentences};
use synthmetric::encoder::{pack, HeadSpec, ModelParams, TrainExample};
use synthmetric::evalstats::{
    kendall_pairwise, multiref_score, run_ablation, skew_split_indices, AblationMode, AblationPipeline, AblationTable,
    CorrelationReport, MultirefError,
};
use synthmetric::external::ExternalScorer;
use synthmetric::lexmetrics::EmbeddingTable;
use synthmetric::signals::{
    apply_normalization, compute_corpus_signals, fit_normalization, read_signals, write_signals, BaselineEntailment,
    EntailmentProvider, LikelihoodScorer, Providers, SignalRecord, SignalsHeader, TaskSet, UnigramScorer,
    REGRESSION_DIMS, SIGNALS_SCHEMA,
};
use synthmetric::synthgen::{default_fill_lm, Generator, SynonymStub, SyntheticExample};
use synthmetric::textcore::{
    expand_records, ingest_ratings, read_records, split_no_leak, tokenize, RatedExample, RatingRecord, RatingsFormat,
    Vocabulary, TOKENIZER_VERSION,
};
use synthmetric::trainer::{
    finetune, pretrain, rated_examples, run_recipe, signal_examples, split_synthetic, RecipeManifest, StageSpec,
};
use synthmetric::lexmetrics;

use crate::artifact::{
    file_name, file_sha256, read_pairs, read_predictions, sibling, write_atomic, write_bytes, write_json, write_pairs,
    write_predictions, write_rating_file, PairsHeader, MANIFEST_SCHEMA, REPORT_SCHEMA,
};
use crate::config::RunConfig;
use crate::error::CliError;

/// The resolved configuration and its hash, passed to every command.
pub struct Run {
    pub config: RunConfig,
    pub hash: String,
}

#[derive(Serialize)]
struct Manifest {
    schema: &'static str,
    command: &'static str,
    config_hash: String,
    inputs: BTreeMap<String, String>,
    outputs: BTreeMap<String, String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    recipe: Option<RecipeManifest>,
}

fn hashes(paths: &[(&str, &Path)]) -> Result<BTreeMap<String, String>, CliError> {
    paths
        .iter()
        .map(|(role, p)| Ok((format!("{role}:{}", file_name(p)), file_sha256(p)?)))
        .collect()
}

fn load_vocab(path: &Path) -> Result<Vocabulary, CliError> {
    Ok(Vocabulary::load(path)?)
}

fn read_corpus(path: &Path) -> Result<Vec<String>, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::data(path.display(), e))?;
    Ok(text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect())
}

fn checkpoint_metadata(run: &Run, vocab: &Vocabulary, stage: &str) -> BTreeMap<String, String> {
    BTreeMap::from([
        ("config_hash".to_string(), run.hash.clone()),
        ("stage".to_string(), stage.to_string()),
        ("vocab".to_string(), vocab.fingerprint()),
    ])
}

/// Loads `init` or builds a fresh model, checking the vocabulary either way.
fn initial_params(run: &Run, vocab: &Vocabulary, init: Option<&Path>) -> Result<ModelParams, CliError> {
    match init {
        Some(p) => {
            let (params, meta) = ModelParams::load(p).map_err(|e| CliError::data(p.display(), e))?;
            let fp = vocab.fingerprint();
            match meta.get("vocab") {
                Some(v) if *v == fp => {}
                other => {
                    return Err(CliError::Data(format!(
                        "{}: checkpoint vocabulary {} does not match {fp}",
                        p.display(),
                        other.map_or("<none>", String::as_str)
                    )))
                }
            }
            Ok(params)
        }
        None => {
            let heads = HeadSpec::from_tasks(&TaskSet::standard());
            Ok(ModelParams::init(run.config.encoder(vocab.len()), heads)?)
        }
    }
}

fn save_checkpoint(path: &Path, params: &ModelParams, meta: &BTreeMap<String, String>) -> Result<(), CliError> {
    write_bytes(path, &params.to_bytes(meta))
}

fn task_set(config: &RunConfig) -> Result<TaskSet, CliError> {
    Ok(TaskSet::standard().with_weights(&config.task_weights)?)
}

fn groups_for(config: &RunConfig, ids: &[&str]) -> Vec<String> {
    match config.group_by.as_str() {
        "all" => vec![String::new(); ids.len()],
        _ => ids.iter().map(|s| s.to_string()).collect(),
    }
}

pub fn demo_data(run: &Run, out_dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(out_dir).map_err(|e| CliError::data(out_dir.display(), e))?;
    let corpus = template_sentences(1000, run.config.seed);
    let corpus_path = out_dir.join("corpus.txt");
    write_atomic(&corpus_path, |w| {
        for s in &corpus {
            writeln!(w, "{s}").map_err(|e| CliError::data(corpus_path.display(), e))?;
        }
        Ok(())
    })?;
    let rated = template_sentences(150, run.config.seed + 1);
    let records = edit_rated_records(&rated, 4, 5.0, run.config.seed + 2);
    let ratings_path = out_dir.join("ratings.tsv");
    write_rating_file(&ratings_path, &records, RatingsFormat::WmtTsv, true, &run.hash)?;
    println!("wrote {} sentences to {}", corpus.len(), corpus_path.display());
    println!("wrote {} rated candidates to {}", records.len(), ratings_path.display());
    Ok(())
}

pub fn gen_pairs(
    run: &Run,
    corpus: &Path,
    out: &Path,
    vocab_in: Option<&Path>,
    vocab_out: Option<&Path>,
    extra_text: &[PathBuf],
) -> Result<(), CliError> {
    let sentences = read_corpus(corpus)?;
    let vocab = match vocab_in {
        Some(p) => load_vocab(p)?,
        None => {
            let mut texts = sentences.clone();
            for p in extra_text {
                for r in read_records(p, RatingsFormat::from_path(p))?.records {
                    texts.extend(r.references);
                    texts.push(r.candidate);
                }
            }
            Vocabulary::build(&texts, run.config.vocab_min_count)
        }
    };
    let segments: Vec<_> = sentences.iter().map(|s| tokenize(s, &vocab)).collect();
    let lm = default_fill_lm(&segments, vocab.len());
    let translator = SynonymStub::builtin(run.config.seed);
    let generator = Generator {
        vocab: &vocab,
        lm: &lm,
        translator: &translator,
        config: run.config.generation(),
    };
    let examples = generator.generate_corpus(&segments, run.config.seed)?;
    let records: Vec<_> = examples.iter().map(SyntheticExample::to_record).collect();
    let header = PairsHeader::new(vocab.fingerprint(), run.hash.clone());
    write_atomic(out, |w| write_pairs(w, &header, &records))?;
    if let Some(p) = vocab_out {
        let mut body = vocab.tokens().join("\n");
        body.push('\n');
        write_bytes(p, body.as_bytes())?;
    }
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for e in &examples {
        *counts.entry(e.origin.to_string()).or_default() += 1;
    }
    println!("segments\t{}", segments.len());
    println!("examples\t{}", examples.len());
    for (origin, n) in counts {
        println!("{origin}\t{n}");
    }
    Ok(())
}

pub fn compute_signals(run: &Run, pairs: &Path, vocab_path: &Path, out: &Path) -> Result<(), CliError> {
    let vocab = load_vocab(vocab_path)?;
    let (header, records) = read_pairs(pairs)?;
    if header.vocab != vocab.fingerprint() {
        return Err(CliError::Data(format!(
            "{}: pairs were generated with vocabulary {}, but {} is {}",
            pairs.display(),
            header.vocab,
            vocab_path.display(),
            vocab.fingerprint()
        )));
    }
    let examples: Vec<_> = records.into_iter().map(|r| SyntheticExample::from_record(r, &vocab)).collect();
    let cfg = &run.config;
    let embeddings = if cfg.embeddings_path.is_empty() {
        EmbeddingTable::random(vocab.len(), cfg.embedding_dim, cfg.seed)
    } else {
        EmbeddingTable::load(Path::new(&cfg.embeddings_path), &vocab, cfg.seed)?
    };
    let mut providers_info = BTreeMap::from([(
        "embeddings".to_string(),
        if cfg.embeddings_path.is_empty() {
            format!("random:{}:{}", cfg.embedding_dim, cfg.seed)
        } else {
            format!("file:{}", file_sha256(Path::new(&cfg.embeddings_path))?)
        },
    )]);
    let external;
    let unigram;
    let baseline;
    let (scorer, entailment): (&dyn LikelihoodScorer, &dyn EntailmentProvider) = if cfg.scorer_command.is_empty() {
        let mut seen = std::collections::HashSet::new();
        let corpus: Vec<_> = examples.iter().filter(|e| seen.insert(e.z.ids().to_vec())).map(|e| e.z.clone()).collect();
        unigram = UnigramScorer::train(&corpus, vocab.len(), cfg.scorer_k, cfg.scorer_copy_weight, cfg.seed);
        baseline = BaselineEntailment::default();
        providers_info.insert(
            "scorer".into(),
            format!("unigram-copy:k={}:copy={}", cfg.scorer_k, cfg.scorer_copy_weight),
        );
        providers_info.insert("entailment".into(), "lexical-baseline".into());
        (&unigram, &baseline)
    } else {
        external = ExternalScorer::spawn(&cfg.scorer_command, Duration::from_secs(cfg.scorer_timeout_secs))
            .map_err(|e| CliError::Data(e.to_string()))?;
        providers_info.insert("scorer".into(), format!("external:{}", cfg.scorer_command));
        providers_info.insert("entailment".into(), format!("external:{}", cfg.scorer_command));
        (&external, &external)
    };
    let providers = Providers {
        embeddings: &embeddings,
        scorer,
        entailment,
    };
    let raw = compute_corpus_signals(&examples, &providers)?;
    let normalization = fit_normalization(&raw)?;
    let header = SignalsHeader {
        schema: SIGNALS_SCHEMA.into(),
        tokenizer: TOKENIZER_VERSION.into(),
        bleu_smoothing: lexmetrics::BLEU_SMOOTHING.into(),
        regression_dims: REGRESSION_DIMS.iter().map(|s| s.to_string()).collect(),
        normalization,
        providers: providers_info,
        config_hash: run.hash.clone(),
    };
    let records: Vec<_> = examples
        .iter()
        .zip(raw)
        .map(|(e, signals)| SignalRecord {
            example: e.to_record(),
            signals,
        })
        .collect();
    write_atomic(out, |w| write_signals(w, &header, &records).map_err(|e| CliError::data(out.display(), e)))?;
    println!("signals\t{}", records.len());
    Ok(())
}

fn load_signal_examples(path: &Path, vocab: &Vocabulary, params: &ModelParams) -> Result<(Vec<SyntheticExample>, Vec<TrainExample>), CliError> {
    let file = fs::File::open(path).map_err(|e| CliError::data(path.display(), e))?;
    let (header, records) = read_signals(BufReader::new(file))?;
    if header.tokenizer != TOKENIZER_VERSION {
        return Err(CliError::Data(format!(
            "{}: tokenizer {} does not match {TOKENIZER_VERSION}",
            path.display(),
            header.tokenizer
        )));
    }
    let synth: Vec<_> = records.iter().map(|r| r.example(vocab)).collect();
    let normalized: Vec<_> = records.iter().map(|r| apply_normalization(&r.signals, &header.normalization)).collect();
    let examples = signal_examples(params, &synth, &normalized)?;
    Ok((synth, examples))
}

fn pretrain_split(run: &Run, synth: &[SyntheticExample], examples: Vec<TrainExample>) -> Result<(Vec<TrainExample>, Vec<TrainExample>), CliError> {
    let (train_idx, val_idx) = split_synthetic(synth, run.config.validation_fraction, run.config.seed)?;
    let mut slots: Vec<Option<TrainExample>> = examples.into_iter().map(Some).collect();
    let mut take = |idx: Vec<usize>| idx.into_iter().map(|i| slots[i].take().expect("disjoint split")).collect::<Vec<_>>();
    let train = take(train_idx);
    let val = take(val_idx);
    Ok((train, val))
}

pub fn pretrain_cmd(
    run: &Run,
    signals: &Path,
    vocab_path: &Path,
    init: Option<&Path>,
    out: &Path,
    manifest: Option<&Path>,
) -> Result<(), CliError> {
    let vocab = load_vocab(vocab_path)?;
    let params = initial_params(run, &vocab, init)?;
    let (synth, examples) = load_signal_examples(signals, &vocab, &params)?;
    let (train, validation) = pretrain_split(run, &synth, examples)?;
    let tasks = task_set(&run.config)?;
    let outcome = run_recipe(
        params,
        &[StageSpec::Pretrain {
            train: &train,
            validation: &validation,
            tasks: &tasks,
            config: run.config.pretrain(),
        }],
    )?;
    save_checkpoint(out, &outcome.params, &checkpoint_metadata(run, &vocab, "pretrain"))?;
    let mut inputs = hashes(&[("signals", signals), ("vocab", vocab_path)])?;
    if let Some(p) = init {
        inputs.extend(hashes(&[("init", p)])?);
    }
    let history = &outcome.manifest.stages[0].history;
    write_manifest(run, "pretrain", inputs, out, manifest, outcome.manifest.clone())?;
    println!("train\t{}", train.len());
    println!("validation\t{}", validation.len());
    println!("best_step\t{}", history.best_step);
    println!("best_validation_loss\t{}", history.best_metric);
    Ok(())
}

fn write_manifest(
    run: &Run,
    command: &'static str,
    inputs: BTreeMap<String, String>,
    checkpoint: &Path,
    manifest: Option<&Path>,
    recipe: RecipeManifest,
) -> Result<(), CliError> {
    let m = Manifest {
        schema: MANIFEST_SCHEMA,
        command,
        config_hash: run.hash.clone(),
        inputs,
        outputs: hashes(&[("checkpoint", checkpoint)])?,
        recipe: Some(recipe),
    };
    let path = manifest.map_or_else(|| sibling(checkpoint, ".manifest.json"), Path::to_path_buf);
    write_json(&path, &m)
}

fn load_rated(path: &Path, vocab: &Vocabulary) -> Result<Vec<RatedExample>, CliError> {
    let report = ingest_ratings(path, RatingsFormat::from_path(path), vocab)?;
    for s in &report.skipped {
        eprintln!("{}: skipped line {}: {}", path.display(), s.line, s.reason);
    }
    Ok(report.examples)
}

pub fn finetune_cmd(
    run: &Run,
    ratings: &Path,
    vocab_path: &Path,
    init: Option<&Path>,
    out: &Path,
    manifest: Option<&Path>,
) -> Result<(), CliError> {
    let vocab = load_vocab(vocab_path)?;
    let params = initial_params(run, &vocab, init)?;
    let data = load_rated(ratings, &vocab)?;
    let (train, validation) = split_no_leak(&data, run.config.validation_fraction, run.config.seed)?;
    let max = params.config().max_seq_len;
    let train = rated_examples(&train, max)?;
    let validation = rated_examples(&validation, max)?;
    let outcome = run_recipe(
        params,
        &[StageSpec::Finetune {
            train: &train,
            validation: &validation,
            config: run.config.finetune(),
        }],
    )?;
    save_checkpoint(out, &outcome.params, &checkpoint_metadata(run, &vocab, "finetune"))?;
    let mut inputs = hashes(&[("ratings", ratings), ("vocab", vocab_path)])?;
    if let Some(p) = init {
        inputs.extend(hashes(&[("init", p)])?);
    }
    let history = &outcome.manifest.stages[0].history;
    write_manifest(run, "finetune", inputs, out, manifest, outcome.manifest.clone())?;
    println!("train\t{}", train.len());
    println!("validation\t{}", validation.len());
    println!("best_step\t{}", history.best_step);
    println!("best_validation_kendall\t{}", history.best_metric);
    Ok(())
}

/// One score per record: the best prediction over its references.
fn score_records(params: &ModelParams, vocab: &Vocabulary, records: &[RatingRecord]) -> Result<Vec<f64>, CliError> {
    let max = params.config().max_seq_len;
    let mut inputs = Vec::new();
    let mut spans = Vec::with_capacity(records.len());
    for r in records {
        let cand = tokenize(&r.candidate, vocab);
        let start = inputs.len();
        for reference in &r.references {
            let packed = pack(&tokenize(reference, vocab), &cand, max).map_err(|e| CliError::data(&r.source_id, e))?;
            inputs.push(packed);
        }
        spans.push(start..inputs.len());
    }
    let preds = params.predict_ratings(&inputs)?;
    spans
        .into_iter()
        .zip(records)
        .map(|(span, r)| {
            let idx: Vec<usize> = span.collect();
            multiref_score(&(), &idx, |&i, _| Ok::<_, CliError>(preds[i])).map_err(|e| match e {
                MultirefError::NoReferences => CliError::data(&r.source_id, "record has no references"),
                MultirefError::Scorer(e) => e,
            })
        })
        .collect()
}

pub fn predict(run: &Run, model: &Path, vocab_path: &Path, input: &Path, out: &Path) -> Result<(), CliError> {
    let vocab = load_vocab(vocab_path)?;
    let params = initial_params(run, &vocab, Some(model))?;
    let report = read_records(input, RatingsFormat::from_path(input))?;
    for s in &report.skipped {
        eprintln!("{}: skipped line {}: {}", input.display(), s.line, s.reason);
    }
    let scores = score_records(&params, &vocab, &report.records)?;
    let rows: Vec<_> = report.records.iter().map(|r| r.source_id.clone()).zip(scores).collect();
    write_predictions(out, &rows, &run.hash)?;
    println!("predictions\t{}", rows.len());
    Ok(())
}

#[derive(Serialize)]
struct EvaluationOutput {
    schema: &'static str,
    config_hash: String,
    group_by: String,
    report: CorrelationReport,
}

pub fn evaluate(run: &Run, ratings: &Path, predictions: &Path, out: Option<&Path>) -> Result<(), CliError> {
    let records = read_records(ratings, RatingsFormat::from_path(ratings))?.records;
    let preds = read_predictions(predictions)?;
    if preds.len() != records.len() {
        return Err(CliError::Data(format!(
            "{} has {} rows but {} has {} records",
            predictions.display(),
            preds.len(),
            ratings.display(),
            records.len()
        )));
    }
    let (mut human, mut metric, mut ids) = (Vec::new(), Vec::new(), Vec::new());
    for (i, (r, (id, score))) in records.iter().zip(&preds).enumerate() {
        if *id != r.source_id {
            return Err(CliError::Data(format!(
                "row {}: prediction for {id} does not line up with record {}",
                i + 1,
                r.source_id
            )));
        }
        if let Some(h) = r.rating {
            human.push(h);
            metric.push(*score);
            ids.push(r.source_id.as_str());
        }
    }
    let groups = groups_for(&run.config, &ids);
    let report = CorrelationReport::compute(&human, &metric, &groups, run.config.darr_threshold)?;
    print!("{}", report.to_text());
    if let Some(p) = out {
        write_json(
            p,
            &EvaluationOutput {
                schema: REPORT_SCHEMA,
                config_hash: run.hash.clone(),
                group_by: run.config.group_by.clone(),
                report,
            },
        )?;
    }
    Ok(())
}

pub fn skew_split_cmd(run: &Run, ratings: &Path, train_out: &Path, test_out: &Path) -> Result<(), CliError> {
    let format = RatingsFormat::from_path(ratings);
    let report = read_records(ratings, format)?;
    let rated: Vec<&RatingRecord> = report.records.iter().filter(|r| r.rating.is_some()).collect();
    let values: Vec<f64> = rated.iter().map(|r| r.rating.expect("filtered")).collect();
    let ids: Vec<&str> = rated.iter().map(|r| r.source_id.as_str()).collect();
    let (train, test) = skew_split_indices(&values, &ids, &run.config.skew())?;
    let pick = |idx: &[usize]| idx.iter().map(|&i| rated[i].clone()).collect::<Vec<_>>();
    write_rating_file(train_out, &pick(&train), RatingsFormat::from_path(train_out), report.raw_scores, &run.hash)?;
    write_rating_file(test_out, &pick(&test), RatingsFormat::from_path(test_out), report.raw_scores, &run.hash)?;
    println!("records\t{}", rated.len());
    println!("train\t{}\t{:.4}", train.len(), train.len() as f64 / rated.len() as f64);
    println!("test\t{}\t{:.4}", test.len(), test.len() as f64 / rated.len() as f64);
    Ok(())
}

struct CliPipeline<'a> {
    config: &'a RunConfig,
    init: &'a ModelParams,
    pre_train: &'a [TrainExample],
    pre_val: &'a [TrainExample],
    ft_train: &'a [TrainExample],
    ft_val: &'a [TrainExample],
    test: &'a [TrainExample],
    test_human: &'a [f64],
    test_groups: &'a [String],
}

impl CliPipeline<'_> {
    fn run(&self, tasks: Option<&TaskSet>) -> Result<f64, CliError> {
        let mut params = self.init.clone();
        if let Some(t) = tasks {
            params = pretrain(params, self.pre_train, self.pre_val, t, &self.config.pretrain())?.params;
        }
        let tuned = finetune(params, self.ft_train, self.ft_val, &self.config.finetune())?.params;
        let inputs: Vec<_> = self.test.iter().map(|e| e.input.clone()).collect();
        let preds = tuned.predict_ratings(&inputs)?;
        Ok(kendall_pairwise(self.test_human, &preds, self.test_groups)?)
    }
}

impl AblationPipeline for CliPipeline<'_> {
    fn tau(&self, tasks: Option<&TaskSet>) -> Result<f64, String> {
        self.run(tasks).map_err(|e| e.to_string())
    }
}

#[derive(Serialize)]
struct AblationOutput<'a> {
    schema: &'static str,
    config_hash: &'a str,
    table: &'a AblationTable,
}

pub fn ablate(run: &Run, signals: &Path, ratings: &Path, vocab_path: &Path, mode: AblationMode, out: &Path) -> Result<(), CliError> {
    let vocab = load_vocab(vocab_path)?;
    let init = initial_params(run, &vocab, None)?;
    let (synth, examples) = load_signal_examples(signals, &vocab, &init)?;
    let (pre_train, pre_val) = pretrain_split(run, &synth, examples)?;
    let cfg = &run.config;
    let records = read_records(ratings, RatingsFormat::from_path(ratings))?;
    let (mut data, _) = expand_records(&records.records, &vocab);
    if records.raw_scores {
        synthmetric::textcore::standardize_ratings(&mut data);
    }
    let (rest, test) = split_no_leak(&data, cfg.ablation_test_fraction, cfg.seed)?;
    let (ft_train, ft_val) = split_no_leak(&rest, cfg.validation_fraction, cfg.seed)?;
    let max = init.config().max_seq_len;
    let test_human: Vec<f64> = test.iter().map(|e| e.rating).collect();
    let test_ids: Vec<&str> = test.iter().map(|e| e.source_id.as_str()).collect();
    let test_groups = groups_for(cfg, &test_ids);
    let ft_train = rated_examples(&ft_train, max)?;
    let ft_val = rated_examples(&ft_val, max)?;
    let test = rated_examples(&test, max)?;
    let pipeline = CliPipeline {
        config: cfg,
        init: &init,
        pre_train: &pre_train,
        pre_val: &pre_val,
        ft_train: &ft_train,
        ft_val: &ft_val,
        test: &test,
        test_human: &test_human,
        test_groups: &test_groups,
    };
    let table = run_ablation(&task_set(cfg)?, mode, &pipeline)?;
    write_json(
        out,
        &AblationOutput {
            schema: REPORT_SCHEMA,
            config_hash: &run.hash,
            table: &table,
        },
    )?;
    write_bytes(&sibling(out, ".csv"), table.to_csv().as_bytes())?;
    print!("{}", table.to_text());
    Ok(())
}
