use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use anyhow::{anyhow, Context};
use rayon::prelude::*;
use serde::Serialize;

use valid_core::analysis::{
    compute_edr, emit_curve, emit_edr, even_buckets, layer_curves, parse_bucket_defs, percent,
    probe_trace, BucketDef, LayerCorrectness, LayerObservation,
};
use valid_core::answer::Vocabulary;
use valid_core::contrast::{ContrastConfig, ContrastSpace};
use valid_core::decode::{decode_question, DecodeMode, DecodeOutcome, Sampler, ValidConfig};
use valid_core::dist::entropy;
use valid_core::eval::{
    compare as compare_tables, delta_csv, delta_markdown, merge_tables, metrics_csv,
    metrics_markdown, parse_metrics_csv, score as score_records, EvalRecord, UnparseablePolicy,
};
use valid_core::fusion::{parse_layer_list, parse_presets, preset, CandidateBucket, LayerId};
use valid_core::synth::{synth_corpus, CorpusSpec, EntropyProfile};
use valid_core::trace::{read_questions, write_questions, GoldLabel, QuestionMeta, Storage, Trace};

use crate::args::{
    CompareArgs, CurvesArgs, DecodeArgs, EdrArgs, InspectArgs, ModeArg, PolicyArg, ProbeInputs,
    SamplerArg, ScoreArgs, SpaceArg, StorageArg, SynthArgs, Toggle,
};
use crate::output::{create_dir, expand_traces, write_file, write_jsonl, write_snapshot};
use crate::{CmdResult, Failure};

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

fn pool(jobs: u64) -> CmdResult<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs as usize)
        .build()
        .map_err(|e| Failure::Data(anyhow!("starting worker pool: {e}")))
}

pub fn synth(a: SynthArgs) -> CmdResult {
    if a.layers < 3 {
        return Err(usage("--layers must be at least 3"));
    }
    let spec = CorpusSpec {
        n_questions: a.questions,
        vocab_size: a.vocab_size,
        layer_ids: (1..=a.layers).collect(),
        standard_layer: a.layers - 1,
        distortion: a.distortion,
        distortion_jitter: a.jitter,
        n_clean_layers: a.clean_layers,
        profile: EntropyProfile::default(),
        noise_channel: !a.no_noise,
        storage: match a.storage {
            StorageArg::Logits => Storage::Logits,
            StorageArg::Probs => Storage::Probs,
        },
        dataset_tag: "synthetic-pope".into(),
    };
    // everything is generated in memory first so a bad spec writes nothing
    let corpus = synth_corpus(&spec, a.seed).map_err(|e| usage(e.to_string()))?;

    let trace_dir = a.out.join("traces");
    create_dir(&trace_dir)?;
    for t in &corpus.traces {
        let path = trace_dir.join(format!("{}.vlt", t.question_id()));
        t.save(&path)
            .with_context(|| format!("writing {}", path.display()))?;
    }
    let mut q = Vec::new();
    write_questions(&corpus.questions, &mut q)?;
    write_file(&a.out.join("questions.jsonl"), &q)?;
    let mut vocab = serde_json::to_string(&corpus.vocab).context("serializing vocabulary")?;
    vocab.push('\n');
    write_file(&a.out.join("vocab.json"), vocab.as_bytes())?;

    #[derive(Serialize)]
    struct Settings<'a> {
        args: &'a SynthArgs,
        corpus: &'a CorpusSpec,
    }
    write_snapshot(&a.out, "synth", &[], &Settings { args: &a, corpus: &spec })?;
    let yes = corpus
        .questions
        .iter()
        .filter(|q| q.gold_label == GoldLabel::Yes)
        .count();
    say!(
        "wrote {} traces ({} gold yes) to {}",
        corpus.traces.len(),
        yes,
        a.out.display()
    );
    Ok(())
}

fn resolve_bucket(a: &DecodeArgs) -> CmdResult<CandidateBucket> {
    let mut named = Vec::new();
    if let Some(path) = &a.bucket_file {
        let text = fs::read_to_string(path)
            .map_err(|e| usage(format!("--bucket-file {}: {e}", path.display())))?;
        named = parse_presets(&text)
            .map_err(|e| usage(format!("--bucket-file {}: {e}", path.display())))?;
    }
    let found = named
        .into_iter()
        .find(|(n, _)| *n == a.bucket)
        .map(|(_, b)| b)
        .or_else(|| preset(&a.bucket));
    match found {
        Some(b) => {
            if let Some(std) = a.standard_layer {
                if std != b.standard_layer().0 {
                    return Err(usage(format!(
                        "--standard-layer {std} contradicts preset {} (standard layer {})",
                        a.bucket,
                        b.standard_layer()
                    )));
                }
            }
            Ok(b)
        }
        None => {
            let layers = parse_layer_list(&a.bucket).map_err(|e| {
                usage(format!("--bucket {:?}: not a preset and not a layer list ({e})", a.bucket))
            })?;
            let std = a.standard_layer.ok_or_else(|| {
                usage("--standard-layer is required with an explicit --bucket layer list")
            })?;
            CandidateBucket::new(layers, LayerId(std)).map_err(|e| usage(format!("--bucket: {e}")))
        }
    }
}

fn decode_configs(a: &DecodeArgs) -> CmdResult<Vec<ValidConfig>> {
    let bucket = resolve_bucket(a)?;
    let space = match a.space {
        SpaceArg::Probability => ContrastSpace::Probability,
        SpaceArg::Logit => ContrastSpace::Logit,
    };
    let contrast = ContrastConfig::new(a.alpha, a.beta, space, a.truncation == Toggle::On)
        .map_err(|e| usage(e.to_string()))?;
    let sampler = match (a.sampler, a.temperature) {
        (SamplerArg::Greedy, None) => Sampler::Greedy,
        (SamplerArg::Greedy, Some(_)) => {
            return Err(usage("--temperature needs --sampler temperature"))
        }
        (SamplerArg::Temperature, tau) => Sampler::Temperature {
            tau: tau.unwrap_or(1.0),
        },
    };
    let mut modes: Vec<ModeArg> = Vec::new();
    for m in &a.mode {
        if modes.contains(m) {
            return Err(usage(format!("--mode lists {m:?} twice")));
        }
        modes.push(*m);
    }
    modes
        .into_iter()
        .map(|m| {
            let mode = match m {
                ModeArg::Vanilla => DecodeMode::Vanilla,
                ModeArg::Valid => DecodeMode::Valid,
                ModeArg::Vcd => DecodeMode::Vcd,
                ModeArg::VcdThenValid => DecodeMode::VcdThenValid,
                ModeArg::ValidThenVcd => DecodeMode::ValidThenVcd,
            };
            let cfg = ValidConfig {
                contrast,
                vcd_alpha: a.vcd_alpha,
                k: a.k.map(|k| k as usize),
                bucket: bucket.clone(),
                mode,
                sampler,
                seed: a.seed,
            };
            cfg.validate().map_err(|e| usage(e.to_string()))?;
            Ok(cfg)
        })
        .collect()
}

pub fn decode(a: DecodeArgs) -> CmdResult {
    let configs = decode_configs(&a)?;
    let paths = expand_traces(&a.traces)?;

    let results: Vec<CmdResult<(String, Vec<DecodeOutcome>)>> = pool(a.jobs)?.install(|| {
        paths
            .par_iter()
            .map(|p| {
                let trace = Trace::load(p).with_context(|| format!("reading {}", p.display()))?;
                let outs = configs
                    .iter()
                    .map(|c| {
                        decode_question(&trace, c).with_context(|| {
                            format!("decoding {} with mode {}", p.display(), c.mode)
                        })
                    })
                    .collect::<anyhow::Result<Vec<_>>>()?;
                Ok((trace.question_id().to_string(), outs))
            })
            .collect()
    });
    let mut per_question = results.into_iter().collect::<CmdResult<Vec<_>>>()?;
    per_question.sort_by(|x, y| x.0.cmp(&y.0));
    if let Some(w) = per_question.windows(2).find(|w| w[0].0 == w[1].0) {
        return Err(anyhow!("question id {} appears in more than one trace", w[0].0).into());
    }

    create_dir(&a.out)?;
    let n = per_question.len();
    write_jsonl(
        &a.out.join("outcomes.jsonl"),
        per_question.iter().flat_map(|(_, outs)| outs.iter()),
    )?;
    #[derive(Serialize)]
    struct Settings<'a> {
        args: &'a DecodeArgs,
        resolved: &'a [ValidConfig],
    }
    write_snapshot(&a.out, "decode", &a.traces, &Settings { args: &a, resolved: &configs })?;
    let modes: Vec<&str> = configs.iter().map(|c| c.mode.as_str()).collect();
    say!(
        "decoded {n} questions with {} -> {}",
        modes.join(", "),
        a.out.join("outcomes.jsonl").display()
    );
    Ok(())
}

struct Probed {
    table: Vec<LayerCorrectness>,
    observations: Vec<LayerObservation>,
    standard_layer: LayerId,
    layers: Vec<LayerId>,
    skipped: usize,
}

fn load_questions(path: &Path) -> CmdResult<BTreeMap<String, QuestionMeta>> {
    let qs = read_questions(path).with_context(|| format!("reading {}", path.display()))?;
    let mut map = BTreeMap::new();
    for q in qs {
        let id = q.question_id.clone();
        if map.insert(id.clone(), q).is_some() {
            return Err(anyhow!("{}: duplicate question id {id}", path.display()).into());
        }
    }
    Ok(map)
}

fn load_vocab(path: &Path) -> CmdResult<Vocabulary> {
    Ok(Vocabulary::load(path).with_context(|| format!("reading {}", path.display()))?)
}

fn probe(inputs: &ProbeInputs) -> CmdResult<Probed> {
    let questions = load_questions(&inputs.questions)?;
    let vocab = load_vocab(&inputs.vocab)?;
    let paths = expand_traces(&inputs.traces)?;

    type One = Option<(LayerCorrectness, Vec<LayerObservation>, LayerId, Vec<LayerId>)>;
    let results: Vec<CmdResult<One>> = pool(inputs.jobs)?.install(|| {
        paths
            .par_iter()
            .map(|p| {
                let trace = Trace::load(p).with_context(|| format!("reading {}", p.display()))?;
                let q = questions.get(trace.question_id()).ok_or_else(|| {
                    anyhow!("{}: question {} not in question file", p.display(), trace.question_id())
                })?;
                if q.gold_label == GoldLabel::FreeText {
                    return Ok(None);
                }
                let (row, obs) = probe_trace(&trace, q.gold_label, &vocab)
                    .with_context(|| format!("probing {}", p.display()))?;
                let layers = trace.header.layer_ids.iter().map(|&l| LayerId(l)).collect();
                Ok(Some((row, obs, LayerId(trace.header.standard_layer), layers)))
            })
            .collect()
    });

    let mut rows = Vec::new();
    let mut skipped = 0;
    for r in results {
        match r? {
            Some(x) => rows.push(x),
            None => skipped += 1,
        }
    }
    rows.sort_by(|a, b| a.0.question_id.cmp(&b.0.question_id));
    let first = rows
        .first()
        .ok_or_else(|| anyhow!("no yes/no questions among the traces"))?;
    let standard_layer = first.2;
    let layers = first.3.clone();
    if let Some(r) = rows.iter().find(|r| r.2 != standard_layer) {
        return Err(anyhow!(
            "trace {} has standard layer {} but {} has {}",
            r.0.question_id,
            r.2,
            first.0.question_id,
            standard_layer
        )
        .into());
    }
    let mut table = Vec::with_capacity(rows.len());
    let mut observations = Vec::new();
    for (row, obs, _, _) in rows {
        table.push(row);
        observations.extend(obs);
    }
    Ok(Probed {
        table,
        observations,
        standard_layer,
        layers,
        skipped,
    })
}

pub fn edr(a: EdrArgs) -> CmdResult {
    let explicit = match &a.buckets {
        Some(text) => Some(parse_bucket_defs(text).map_err(|e| usage(format!("--buckets: {e}")))?),
        None => None,
    };
    let p = probe(&a.inputs)?;
    let buckets: Vec<BucketDef> = match explicit {
        Some(b) => b,
        None => {
            let hidden: Vec<LayerId> =
                p.layers.iter().copied().filter(|&l| l != p.standard_layer).collect();
            even_buckets(&hidden, a.bucket_size as usize)
        }
    };
    let report = compute_edr(&p.table, &buckets, p.standard_layer)?;

    let out = &a.inputs.out;
    create_dir(out)?;
    emit_edr(&report, out)?;
    write_jsonl(&out.join("probes.jsonl"), &p.table)?;
    #[derive(Serialize)]
    struct Settings<'a> {
        args: &'a EdrArgs,
        questions: String,
        vocab: String,
        buckets: &'a [BucketDef],
    }
    let settings = Settings {
        args: &a,
        questions: a.inputs.questions.display().to_string(),
        vocab: a.inputs.vocab.display().to_string(),
        buckets: &buckets,
    };
    write_snapshot(out, "edr", &a.inputs.traces, &settings)?;

    let wrong = report.rows.first().map_or(0, |r| r.denominator);
    say!(
        "{} questions, {} wrong at standard layer {}{}",
        p.table.len(),
        wrong,
        report.standard_layer,
        skip_note(p.skipped)
    );
    for r in &report.rows {
        let layers: Vec<String> = r.layers.iter().map(|l| l.to_string()).collect();
        say!(
            "{:<10} {:>7}%  ({}/{})  layers {}",
            r.bucket,
            percent(r.edr),
            r.numerator,
            r.denominator,
            layers.join(",")
        );
    }
    Ok(())
}

fn skip_note(skipped: usize) -> String {
    if skipped == 0 {
        String::new()
    } else {
        format!(" ({skipped} free-text questions skipped)")
    }
}

pub fn curves(a: CurvesArgs) -> CmdResult {
    let p = probe(&a.inputs)?;
    let curve = layer_curves(&p.observations);
    let out = &a.inputs.out;
    create_dir(out)?;
    emit_curve(&curve, out)?;
    #[derive(Serialize)]
    struct Settings {
        questions: String,
        vocab: String,
    }
    let settings = Settings {
        questions: a.inputs.questions.display().to_string(),
        vocab: a.inputs.vocab.display().to_string(),
    };
    write_snapshot(out, "curves", &a.inputs.traces, &settings)?;
    say!("{} questions{}", p.table.len(), skip_note(p.skipped));
    say!("layer  mean_entropy  accuracy");
    for pt in &curve.points {
        say!("{:>5}  {:>12.4}  {:>8.4}", pt.layer, pt.mean_entropy, pt.accuracy);
    }
    Ok(())
}

pub fn score(a: ScoreArgs) -> CmdResult {
    let policy = match a.unparseable {
        PolicyArg::Incorrect => UnparseablePolicy::Incorrect,
        PolicyArg::Drop => UnparseablePolicy::Drop,
        PolicyArg::CoerceNo => UnparseablePolicy::CoerceNo,
    };
    let questions = load_questions(&a.questions)?;
    let vocab = load_vocab(&a.vocab)?;
    let mut records = Vec::new();
    let mut seen = BTreeSet::new();
    for path in &a.outcomes {
        let text =
            fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let at = || format!("{}:{}", path.display(), i + 1);
            let outcome: DecodeOutcome = serde_json::from_str(line).with_context(at)?;
            let q = questions.get(&outcome.question_id).ok_or_else(|| {
                anyhow!("{}: question {} not in question file", at(), outcome.question_id)
            })?;
            if !seen.insert((outcome.question_id.clone(), outcome.mode)) {
                return Err(anyhow!(
                    "{}: second outcome for question {} mode {}",
                    at(),
                    outcome.question_id,
                    outcome.mode
                )
                .into());
            }
            records.push(EvalRecord::from_outcome(&outcome, q, &vocab).with_context(at)?);
        }
    }
    let table = score_records(&records, policy)?;
    create_dir(&a.out)?;
    let md = metrics_markdown(&table);
    write_file(&a.out.join("metrics.csv"), metrics_csv(&table).as_bytes())?;
    write_file(&a.out.join("metrics.md"), md.as_bytes())?;
    #[derive(Serialize)]
    struct Settings<'a> {
        args: &'a ScoreArgs,
        questions: String,
        vocab: String,
    }
    let settings = Settings {
        args: &a,
        questions: a.questions.display().to_string(),
        vocab: a.vocab.display().to_string(),
    };
    write_snapshot(&a.out, "score", &a.outcomes, &settings)?;
    say!("{}", md.trim_end());
    Ok(())
}

pub fn compare(a: CompareArgs) -> CmdResult {
    let mut tables = Vec::new();
    for path in &a.metrics {
        let text =
            fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        tables.push(parse_metrics_csv(&text).with_context(|| path.display().to_string())?);
    }
    let table = merge_tables(&tables)?;
    let report = compare_tables(&table, &a.baseline)?;
    create_dir(&a.out)?;
    let md = delta_markdown(&report);
    write_file(&a.out.join("deltas.csv"), delta_csv(&report).as_bytes())?;
    write_file(&a.out.join("deltas.md"), md.as_bytes())?;
    write_snapshot(&a.out, "compare", &a.metrics, &a)?;
    say!("{}", md.trim_end());
    Ok(())
}

pub fn inspect_trace(a: InspectArgs) -> CmdResult {
    let trace = Trace::load(&a.trace).with_context(|| format!("reading {}", a.trace.display()))?;
    let h = &trace.header;
    let storage = match h.storage {
        Storage::Logits => "logits",
        Storage::Probs => "probs",
    };
    let layers: Vec<String> = h.layer_ids.iter().map(|l| l.to_string()).collect();
    say!("file:           {}", a.trace.display());
    say!("question_id:    {}", h.question_id);
    say!("version:        {}", h.version);
    say!("vocab_size:     {}", h.vocab_size);
    say!("storage:        {storage}");
    say!("layers ({}):    {}", h.layer_count(), layers.join(","));
    say!("standard_layer: {}", h.standard_layer);
    say!("steps:          {}", h.step_count);
    say!(
        "channels:       {} layer rows{}",
        h.layer_count(),
        if h.has_noise_channel { " + noise reference" } else { "" }
    );
    let chosen: Vec<String> = trace.steps.iter().map(|s| s.chosen_token.to_string()).collect();
    say!("chosen_tokens:  {}", chosen.join(" "));

    if let Some(step) = a.step {
        if step >= trace.steps.len() {
            return Err(usage(format!(
                "--step {step} out of range; trace has {} steps",
                trace.steps.len()
            )));
        }
        say!("\nstep {step}");
        say!("layer  entropy   argmax  p(argmax)");
        for (layer, d) in trace.layer_distributions(step)? {
            let top = d.argmax();
            let mark = if layer.0 == h.standard_layer { "  (standard)" } else { "" };
            say!(
                "{:>5}  {:>7.4}  {:>7}  {:>9.4}{mark}",
                layer,
                entropy(&d).value(),
                top,
                d.probs()[top]
            );
        }
        if let Some(n) = trace.noise_distribution(step)? {
            let top = n.argmax();
            say!(
                "noise  {:>7.4}  {:>7}  {:>9.4}",
                entropy(&n).value(),
                top,
                n.probs()[top]
            );
        }
    }
    Ok(())
}
