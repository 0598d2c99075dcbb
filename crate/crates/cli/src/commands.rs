use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};
use std::time::Instant;

use miuk_core::corpus::{generate_synthetic, load_dataset, save_dataset, Document, RelationVocab, SynthConfig};
use miuk_core::encoder::EmbedderSpec;
use miuk_core::kgstore::{DescriptionStore, KgStore};
use miuk_core::model::{Miuk, ModeConfig, PreparedDoc};
use miuk_core::tensorcore::ParamStore;
use miuk_core::trainer::{self, train_triples, Corpus, Evaluation, Task, TrainConfig};
use miuk_core::verify;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::config::{from_value, read_json, DataPaths, RunConfig};
use crate::failure::Failure;
use crate::Split;

const EFFECTIVE_CONFIG: &str = "effective_config.json";
const CHECKPOINT: &str = "checkpoint.bin";

fn write_file(path: &Path, body: impl AsRef<[u8]>) -> Result<(), Failure> {
    std::fs::write(path, body).map_err(|e| Failure::io(path, e))
}

fn create_dir(dir: &Path) -> Result<(), Failure> {
    std::fs::create_dir_all(dir).map_err(|e| Failure::io(dir, e))
}

fn pretty<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("serializable");
    s.push('\n');
    s
}

/// Writes to standard output, ignoring a closed pipe.
fn emit(text: &str) {
    use std::io::Write;
    let mut out = std::io::stdout().lock();
    let _ = out.write_all(text.as_bytes()).and_then(|_| out.flush());
}

fn emit_json<T: Serialize>(v: &T) {
    emit(&format!("{}\n", serde_json::to_string(v).expect("serializable")));
}

fn sha256_hex(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

pub fn ingest_kg(triples: &Path, desp: &Path, types: Option<&Path>, out: &Path) -> Result<(), Failure> {
    create_dir(out)?;
    write_file(
        &out.join(EFFECTIVE_CONFIG),
        pretty(&json!({"triples": triples, "desp": desp, "types": types, "out": out})),
    )?;
    let file = std::fs::File::open(triples).map_err(|e| Failure::io(triples, e))?;
    let (kg, report) = KgStore::parse(std::io::BufReader::new(file))?;
    write_file(&out.join("ingest_report.json"), pretty(&report))?;
    let mut rejects = String::new();
    for r in &report.rejected {
        rejects.push_str(&format!("{}\t{}\t{}\n", r.line_no, r.reason, r.content));
    }
    write_file(&out.join("rejects.log"), rejects)?;
    emit_json(&json!({
        "lines": report.lines,
        "accepted": report.accepted,
        "merged_duplicates": report.merged_duplicates,
        "distinct_triples": report.distinct_triples,
        "entities": report.entities,
        "rejected": report.rejected.len(),
    }));
    report.check()?;

    let descriptions = DescriptionStore::load(desp, types)?;
    kg.save_index(&out.join("kg.json"))?;
    let mut jsonl = String::new();
    for r in descriptions.records() {
        jsonl.push_str(&serde_json::to_string(&r).expect("serializable"));
        jsonl.push('\n');
    }
    write_file(&out.join("descriptions.jsonl"), jsonl)?;
    let mut tsv = String::new();
    for (e, t) in descriptions.types() {
        tsv.push_str(&format!("{e}\t{t}\n"));
    }
    write_file(&out.join("types.tsv"), tsv)?;
    log::info!(
        "indexed {} triples for {} entities and {} descriptions into {}",
        report.distinct_triples,
        report.entities,
        descriptions.len(),
        out.display()
    );
    Ok(())
}

fn parse_split(text: &str) -> Result<[f64; 3], Failure> {
    let parts: Vec<f64> = text
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|_| Failure::config(format!("--split: `{text}` is not three comma-separated fractions")))?;
    let [a, b, c] = parts[..] else {
        return Err(Failure::config(format!("--split: `{text}` needs exactly three fractions")));
    };
    if [a, b, c].iter().any(|f| !(0.0..=1.0).contains(f)) || ((a + b + c) - 1.0).abs() > 1e-9 {
        return Err(Failure::config("--split: fractions must lie in [0, 1] and sum to 1"));
    }
    Ok([a, b, c])
}

fn regime(rho: f64) -> &'static str {
    if rho >= 1.0 {
        "prior-only"
    } else if rho <= 0.0 {
        "text-only"
    } else {
        "mixed"
    }
}

pub fn synth(config: &Path, seed: u64, out: &Path, split: &str) -> Result<(), Failure> {
    let cfg: SynthConfig = from_value(read_json(config)?, &config.display().to_string())?;
    cfg.validate()?;
    let fractions = parse_split(split)?;
    let corpus = generate_synthetic(&cfg, seed)?;
    create_dir(out)?;
    corpus.write_to(out)?;

    let n = corpus.documents.len();
    let n_train = (n as f64 * fractions[0]).round() as usize;
    let n_dev = ((n as f64 * fractions[1]).round() as usize).min(n - n_train);
    let parts = [
        ("train.json", &corpus.documents[..n_train]),
        ("dev.json", &corpus.documents[n_train..n_train + n_dev]),
        ("test.json", &corpus.documents[n_train + n_dev..]),
    ];
    for (name, docs) in parts {
        save_dataset(&out.join(name), docs, &corpus.vocab)?;
    }

    let run = RunConfig {
        data: DataPaths {
            train: "train.json".into(),
            dev: Some("dev.json".into()),
            test: Some("test.json".into()),
            triples: "triples.tsv".into(),
            descriptions: "descriptions.jsonl".into(),
            types: Some("types.tsv".into()),
            rel2id: Some("rel2id.json".into()),
        },
        output_dir: Some("run".into()),
        train: TrainConfig::desk(),
    };
    write_file(&out.join("run.json"), pretty(&run))?;

    let effective = json!({"config": cfg, "seed": seed, "split": fractions});
    write_file(&out.join(EFFECTIVE_CONFIG), pretty(&effective))?;

    let mut files = BTreeMap::new();
    for name in [
        "dataset.json",
        "train.json",
        "dev.json",
        "test.json",
        "triples.tsv",
        "descriptions.jsonl",
        "types.tsv",
        "rules.json",
        "rel2id.json",
        "run.json",
    ] {
        let path = out.join(name);
        let bytes = std::fs::read(&path).map_err(|e| Failure::io(&path, e))?;
        files.insert(name, sha256_hex(&bytes));
    }
    let manifest = json!({
        "seed": seed,
        "config": cfg,
        "config_sha256": sha256_hex(serde_json::to_string(&cfg).expect("serializable").as_bytes()),
        "regime": regime(cfg.prior_dominance),
        "documents": n,
        "splits": {"train": n_train, "dev": n_dev, "test": n - n_train - n_dev},
        "files": files,
    });
    write_file(&out.join("manifest.json"), pretty(&manifest))?;
    emit_json(&manifest);
    Ok(())
}

/// Everything a run config points at, loaded.
struct Workspace {
    cfg: RunConfig,
    vocab: RelationVocab,
    train: Vec<Document>,
    dev: Option<Vec<Document>>,
    test: Option<Vec<Document>>,
    kg: KgStore,
    descriptions: DescriptionStore,
}

impl Workspace {
    fn load(cfg: RunConfig) -> Result<Self, Failure> {
        let d = &cfg.data;
        let given = d.rel2id.as_deref().map(RelationVocab::load).transpose()?;
        let (train, vocab) = load_dataset(&d.train, given.as_ref())?;
        let load = |p: &Option<PathBuf>| -> Result<Option<Vec<Document>>, Failure> {
            Ok(p.as_deref().map(|p| load_dataset(p, Some(&vocab))).transpose()?.map(|(docs, _)| docs))
        };
        let (dev, test) = (load(&d.dev)?, load(&d.test)?);
        let kg = KgStore::load(&d.triples)?;
        let descriptions = DescriptionStore::load(&d.descriptions, d.types.as_deref())?;
        Ok(Workspace {
            cfg,
            vocab,
            train,
            dev,
            test,
            kg,
            descriptions,
        })
    }

    fn corpus<'a>(&'a self, docs: &'a [Document]) -> Corpus<'a> {
        Corpus {
            docs,
            kg: &self.kg,
            descriptions: &self.descriptions,
            vocab: &self.vocab,
        }
    }
}

/// Stored next to a checkpoint: what it was trained on and with.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointMeta {
    relations: Vec<String>,
    threshold: f64,
    train: TrainConfig,
}

fn meta_path(checkpoint: &Path) -> PathBuf {
    checkpoint.with_extension("json")
}

pub fn train(config: &Path, overrides: &[(Vec<String>, Value)]) -> Result<(), Failure> {
    let ws = Workspace::load(RunConfig::load(config, overrides)?)?;
    let out = ws.cfg.output_dir().to_path_buf();
    create_dir(&out)?;
    write_file(&out.join(EFFECTIVE_CONFIG), pretty(&ws.cfg))?;
    let tc = &ws.cfg.train;

    let started = Instant::now();
    let train_corpus = ws.corpus(&ws.train);
    let dev_corpus = ws.dev.as_deref().map(|d| ws.corpus(d));
    let trained = trainer::train(&train_corpus, dev_corpus.as_ref(), tc)?;

    let ckpt = out.join(CHECKPOINT);
    let mut bytes = Vec::new();
    trained.store.save(&mut bytes)?;
    write_file(&ckpt, &bytes)?;
    let meta = CheckpointMeta {
        relations: ws.vocab.names().to_vec(),
        threshold: trained.threshold,
        train: tc.clone(),
    };
    write_file(&meta_path(&ckpt), pretty(&meta))?;
    write_file(&out.join("rel2id.json"), ws.vocab.to_json())?;
    trainer::save_history(&trained.history, &out.join("history.jsonl"))?;

    let dev = match &dev_corpus {
        Some(c) => {
            let train_set = train_triples(&ws.train, &ws.vocab);
            Some(trainer::evaluate(&trained.model, &trained.store, c, &tc.mode, tc.task, &train_set, trained.threshold)?)
        }
        None => None,
    };
    let summary = json!({
        "epochs": trained.history.len(),
        "final_loss": trained.history.last().map(|h| h.loss),
        "threshold": trained.threshold,
        "dev": dev.map(|e| e.metrics),
        "checkpoint": ckpt,
        "checkpoint_sha256": sha256_hex(&bytes),
        "seconds": started.elapsed().as_secs_f64(),
    });
    write_file(&out.join("train_summary.json"), pretty(&summary))?;
    emit_json(&summary);
    Ok(())
}

/// Loads a checkpoint and checks it against the current vocabulary and embedder.
fn load_model(
    checkpoint: &Path,
    vocab: &RelationVocab,
    embedder: &EmbedderSpec,
    mode: &ModeConfig,
) -> Result<(ParamStore<f32>, Miuk, CheckpointMeta), Failure> {
    let mp = meta_path(checkpoint);
    let meta: CheckpointMeta = from_value(
        read_json(&mp).map_err(|f| Failure::compatibility(format!("checkpoint metadata: {}", f.message)))?,
        &mp.display().to_string(),
    )
    .map_err(|f| Failure::compatibility(f.message))?;
    if meta.relations != vocab.names() {
        return Err(Failure::compatibility(format!(
            "relation vocabulary mismatch: checkpoint has {:?}, data has {:?}",
            meta.relations,
            vocab.names()
        )));
    }
    let trained = &meta.train.embedder;
    if (trained.kind, trained.base_dim, trained.hash_seed) != (embedder.kind, embedder.base_dim, embedder.hash_seed) {
        return Err(Failure::compatibility(
            "embedder settings differ from the ones the checkpoint was trained with",
        ));
    }
    let file = std::fs::File::open(checkpoint).map_err(|e| Failure::io(checkpoint, e))?;
    let store = ParamStore::<f32>::load(std::io::BufReader::new(file))?;
    let model = Miuk::bind(&store, embedder.build()?, vocab.len(), mode)?;
    Ok((store, model, meta))
}

pub struct EvalOptions<'a> {
    pub k_sweep: Option<&'a str>,
    pub ablation: Option<&'a str>,
    pub split: Option<Split>,
    pub threshold: Option<f64>,
    pub out: Option<&'a Path>,
}

fn parse_k_sweep(text: &str) -> Result<Vec<usize>, Failure> {
    let bad = || Failure::config(format!("--k-sweep: `{text}` is not a range like 1..5"));
    let (a, b) = match text.split_once("..") {
        Some((a, b)) => (a, b.trim_start_matches('=')),
        None => (text, text),
    };
    let (a, b): (usize, usize) = (a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?);
    if a == 0 || b < a {
        return Err(bad());
    }
    Ok((a..=b).collect())
}

pub fn eval(config: &Path, overrides: &[(Vec<String>, Value)], checkpoint: &Path, opts: EvalOptions<'_>) -> Result<(), Failure> {
    let cfg = RunConfig::load(config, overrides)?;
    let base_mode = match opts.ablation {
        Some(name) => cfg.train.mode.ablation(name)?,
        None => cfg.train.mode.clone(),
    };
    let ks = match opts.k_sweep {
        Some(s) => parse_k_sweep(s)?,
        None => vec![base_mode.k],
    };
    let ws = Workspace::load(cfg)?;
    let (split, docs) = match opts.split {
        Some(Split::Train) => ("train", Some(&ws.train)),
        Some(Split::Dev) => ("dev", ws.dev.as_ref()),
        Some(Split::Test) => ("test", ws.test.as_ref()),
        None if ws.test.is_some() => ("test", ws.test.as_ref()),
        None => ("dev", ws.dev.as_ref()),
    };
    let docs = docs.ok_or_else(|| Failure::config(format!("the config has no {split} split to evaluate")))?;
    let (store, model, meta) = load_model(checkpoint, &ws.vocab, &ws.cfg.train.embedder, &base_mode)?;
    let threshold = opts.threshold.unwrap_or(meta.threshold);
    let train_set: HashSet<_> = train_triples(&ws.train, &ws.vocab);
    let corpus = ws.corpus(docs);

    let mut rows = Vec::new();
    for k in ks {
        let mode = ModeConfig { k, ..base_mode.clone() };
        let Evaluation { metrics, threshold } =
            trainer::evaluate(&model, &store, &corpus, &mode, ws.cfg.train.task, &train_set, threshold)?;
        rows.push(json!({
            "K": k,
            "ablation": opts.ablation,
            "threshold": threshold,
            "metrics": metrics,
        }));
    }
    let result = json!({
        "checkpoint": checkpoint,
        "split": split,
        "documents": docs.len(),
        "task": ws.cfg.train.task,
        "rows": rows,
    });
    if let Some(out) = opts.out {
        if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
            create_dir(dir)?;
        }
        write_file(out, pretty(&result))?;
    }
    emit_json(&result);
    Ok(())
}

pub fn verify(level: verify::Level, seed: u64) -> Result<(), Failure> {
    let started = Instant::now();
    let report = verify::run(level, seed)?;
    for l in &report.lines {
        emit(&format!(
            "{} {:<10} {:<60} {:>10.3e} (limit {:.0e}) {}\n",
            if l.passed { "PASS" } else { "FAIL" },
            l.suite,
            l.name,
            l.value,
            l.limit,
            l.detail
        ));
    }
    let failed = report.lines.iter().filter(|l| !l.passed).count();
    emit(&format!(
        "{} checks, {} failed, {:.1}s\n",
        report.lines.len(),
        failed,
        started.elapsed().as_secs_f64()
    ));
    if failed > 0 {
        return Err(Failure::numeric(format!("{failed} verification checks failed")));
    }
    Ok(())
}

#[derive(Serialize)]
struct ScoredRelation {
    r: String,
    score: f64,
}

#[derive(Serialize)]
struct PairPrediction {
    doc_id: String,
    h: String,
    t: String,
    relations: Vec<ScoredRelation>,
}

fn predictions(prepared: &[PreparedDoc], scores: &[Vec<Vec<f64>>], vocab: &RelationVocab, threshold: f64, task: Task) -> Vec<PairPrediction> {
    let mut out = Vec::new();
    for (prep, doc_scores) in prepared.iter().zip(scores) {
        for (&(h, t), row) in prep.pairs.iter().zip(doc_scores) {
            let relations: Vec<ScoredRelation> = match task {
                Task::Document => row
                    .iter()
                    .enumerate()
                    .filter(|(_, &s)| s >= threshold)
                    .map(|(r, &s)| ScoredRelation {
                        r: vocab.name(r).to_string(),
                        score: s,
                    })
                    .collect(),
                Task::Sentence => trainer::sentlevel_decision(row, threshold)
                    .map(|r| ScoredRelation {
                        r: vocab.name(r).to_string(),
                        score: row[r],
                    })
                    .into_iter()
                    .collect(),
            };
            if !relations.is_empty() {
                out.push(PairPrediction {
                    doc_id: prep.doc_id.clone(),
                    h: prep.entities[h].name.clone(),
                    t: prep.entities[t].name.clone(),
                    relations,
                });
            }
        }
    }
    out
}

pub fn predict(
    config: &Path,
    overrides: &[(Vec<String>, Value)],
    checkpoint: &Path,
    input: &Path,
    threshold: Option<f64>,
    out: Option<&Path>,
) -> Result<(), Failure> {
    let ws = Workspace::load(RunConfig::load(config, overrides)?)?;
    let mode = &ws.cfg.train.mode;
    let (store, model, meta) = load_model(checkpoint, &ws.vocab, &ws.cfg.train.embedder, mode)?;

    // Labels are optional, but any that are present must use the checkpoint's relations.
    let (_, found) = load_dataset(input, None)?;
    let unknown: Vec<&String> = found.names().iter().filter(|n| ws.vocab.id(n).is_none()).collect();
    if !unknown.is_empty() {
        return Err(Failure::compatibility(format!(
            "{} uses relations the checkpoint does not know: {unknown:?}",
            input.display()
        )));
    }
    let (docs, _) = load_dataset(input, Some(&ws.vocab))?;
    let corpus = ws.corpus(&docs);
    let prepared = corpus.prepare(mode)?;
    let scores = trainer::score_prepared(&model, &store, &prepared, mode)?;
    let rows = predictions(&prepared, &scores, &ws.vocab, threshold.unwrap_or(meta.threshold), ws.cfg.train.task);
    let body = pretty(&rows);
    match out {
        Some(path) => write_file(path, body),
        None => {
            emit(&body);
            Ok(())
        }
    }
}
