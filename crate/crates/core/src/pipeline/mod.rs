//! Stage-cached experiment pipeline and report rendering.
//!
//! Each stage writes its artifacts under the output directory together
//! with a stamp holding the stage hash, the config hash and the seed. A
//! stage hash covers the config fields the stage reads plus the hashes of
//! the stages it consumes, so a rerun skips every stage whose inputs are
//! unchanged. A stamp marked incomplete flags partial artifacts.

mod config;
mod render;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use config::{EvalSettings, ModelKind, ModelSpec, PipelineConfig, Stage, TeacherSpec};
pub use render::{read_report_records, render_report, ReportRecord, TableStyle};

use crate::data::{generate_synthetic_corpus, load_corpus, save_corpus, ParallelCorpus, TokenId, Vocab};
use crate::decoding::{translate, write_hypotheses, write_trace};
use crate::error::{Error, Result};
use crate::eval::{
    corpus_bleu, lm_perplexity, repetition_ratio, run_probe, selen_examples, wc_examples, word_accuracy, write_records,
    MetricsReport, ProbeReport, ProbeTask, UniformLm,
};
use crate::model::{ArchConfig, DecoderKind, LmConfig, Model, TinyLm};
use crate::speedbench::measure_speed;
use crate::training::{distill_corpus, train, train_lm, validation_decoding, Objective, TrainConfig};

const STAMP_DIR: &str = "stamps";

/// Record written next to a stage's artifacts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stamp {
    pub stage: Stage,
    pub stage_hash: String,
    pub config_hash: String,
    pub seed: u64,
    /// False while the stage runs or after it failed.
    pub complete: bool,
    pub artifacts: Vec<String>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PipelineOutcome {
    pub ran: Vec<Stage>,
    pub skipped: Vec<Stage>,
    pub metrics: Option<MetricsReport>,
}

fn artifacts(stage: Stage) -> &'static [&'static str] {
    match stage {
        Stage::Generate => &["vocab.txt", "train.raw.tsv", "valid.tsv", "test.tsv"],
        Stage::TrainTeacher => &["teacher.ckpt", "teacher.log.jsonl"],
        Stage::Distill => &["train.kd.tsv"],
        Stage::TrainNat => &["model.ckpt", "model.log.jsonl"],
        Stage::Decode => &["test.hyp.txt", "test.trace.jsonl"],
        Stage::Evaluate => &["metrics.jsonl"],
        Stage::Probe => &["probes.jsonl"],
        Stage::BenchSpeed => &["speed.jsonl"],
    }
}

fn upstream(stage: Stage, cfg: &PipelineConfig) -> Vec<Stage> {
    match stage {
        Stage::Generate => vec![],
        Stage::TrainTeacher => vec![Stage::Generate],
        Stage::Distill => vec![Stage::Generate, Stage::TrainTeacher],
        Stage::TrainNat if cfg.use_distilled => vec![Stage::Generate, Stage::Distill],
        Stage::TrainNat => vec![Stage::Generate],
        Stage::Decode => vec![Stage::Generate, Stage::TrainNat],
        Stage::Evaluate => vec![Stage::Generate, Stage::Decode],
        Stage::Probe | Stage::BenchSpeed => vec![Stage::Generate, Stage::TrainNat],
    }
}

/// Requested stages plus everything they depend on, in dependency order.
pub fn plan(cfg: &PipelineConfig) -> Vec<Stage> {
    let mut needed: Vec<Stage> = cfg.stages.clone();
    let mut i = 0;
    while i < needed.len() {
        for up in upstream(needed[i], cfg) {
            if !needed.contains(&up) {
                needed.push(up);
            }
        }
        i += 1;
    }
    needed.sort();
    needed
}

fn stage_fields(stage: Stage, cfg: &PipelineConfig) -> serde_json::Value {
    use serde_json::json;
    match stage {
        Stage::Generate => json!({ "task": cfg.task }),
        Stage::TrainTeacher => json!({ "preset": cfg.teacher.preset, "train": cfg.teacher.train }),
        Stage::Distill => json!({ "beam": cfg.teacher.beam }),
        Stage::TrainNat => json!({ "model": cfg.model, "train": cfg.train, "kd": cfg.use_distilled }),
        Stage::Decode => json!({ "decode": effective_decode(cfg) }),
        Stage::Evaluate => json!({
            "tag": cfg.tag(),
            "seed": cfg.seed,
            "perplexity": cfg.eval.perplexity,
            "lm_steps": cfg.eval.lm_steps,
        }),
        Stage::Probe => json!({ "probe": cfg.eval.probe }),
        Stage::BenchSpeed => json!({ "speed": cfg.speed, "decode": effective_decode(cfg), "tag": cfg.tag() }),
    }
}

/// Hash of every stage in `stages`, each folding in its upstream hashes.
pub fn stage_hashes(cfg: &PipelineConfig, stages: &[Stage]) -> BTreeMap<Stage, String> {
    let mut out: BTreeMap<Stage, String> = BTreeMap::new();
    for &stage in Stage::ALL.iter().filter(|s| stages.contains(s)) {
        let fields = stage_fields(stage, cfg).to_string();
        let ups: Vec<String> = upstream(stage, cfg)
            .into_iter()
            .map(|u| out.get(&u).cloned().unwrap_or_default())
            .collect();
        let mut parts: Vec<&[u8]> = vec![stage.name().as_bytes(), fields.as_bytes()];
        parts.extend(ups.iter().map(|u| u.as_bytes()));
        out.insert(stage, config::digest(&parts));
    }
    out
}

fn effective_decode(cfg: &PipelineConfig) -> crate::decoding::DecodeConfig {
    validation_decoding(cfg.model.kind.objective(), &cfg.decode)
}

fn stamp_path(dir: &Path, stage: Stage) -> PathBuf {
    dir.join(STAMP_DIR).join(format!("{}.json", stage.name()))
}

pub fn read_stamp(dir: &Path, stage: Stage) -> Option<Stamp> {
    let text = std::fs::read_to_string(stamp_path(dir, stage)).ok()?;
    serde_json::from_str(&text).ok()
}

fn write_stamp(dir: &Path, stamp: &Stamp) -> Result<()> {
    let text = serde_json::to_string_pretty(stamp)?;
    std::fs::write(stamp_path(dir, stamp.stage), text + "\n")?;
    Ok(())
}

fn up_to_date(dir: &Path, stage: Stage, hash: &str) -> bool {
    read_stamp(dir, stage)
        .is_some_and(|s| s.complete && s.stage_hash == hash && artifacts(stage).iter().all(|a| dir.join(a).exists()))
}

/// Runs the planned stages, skipping up-to-date ones unless `force`.
pub fn run_pipeline_with(cfg: &PipelineConfig, force: bool) -> Result<PipelineOutcome> {
    let cfg = cfg.clone().resolved();
    cfg.validate()?;
    let dir = cfg.output_dir.clone();
    std::fs::create_dir_all(dir.join(STAMP_DIR))?;
    std::fs::write(dir.join("config.toml"), cfg.to_toml()?)?;
    let stages = plan(&cfg);
    let hashes = stage_hashes(&cfg, &stages);
    let config_hash = cfg.hash();
    let mut outcome = PipelineOutcome::default();
    for stage in stages {
        let hash = &hashes[&stage];
        if !force && up_to_date(&dir, stage, hash) {
            outcome.skipped.push(stage);
            continue;
        }
        let mut stamp = Stamp {
            stage,
            stage_hash: hash.clone(),
            config_hash: config_hash.clone(),
            seed: cfg.seed,
            complete: false,
            artifacts: artifacts(stage).iter().map(|s| s.to_string()).collect(),
        };
        write_stamp(&dir, &stamp)?;
        let run = Runner { cfg: &cfg, dir: &dir };
        run.stage(stage).map_err(|e| Error::Stage {
            stage: stage.name().to_string(),
            source: Box::new(e),
        })?;
        stamp.complete = true;
        write_stamp(&dir, &stamp)?;
        outcome.ran.push(stage);
    }
    let metrics_path = dir.join("metrics.jsonl");
    if outcome.ran.contains(&Stage::Evaluate) || outcome.skipped.contains(&Stage::Evaluate) {
        outcome.metrics = crate::eval::read_records(&metrics_path)?.into_iter().next();
    }
    Ok(outcome)
}

pub fn run_pipeline(cfg: &PipelineConfig) -> Result<PipelineOutcome> {
    run_pipeline_with(cfg, false)
}

struct Runner<'a> {
    cfg: &'a PipelineConfig,
    dir: &'a Path,
}

impl Runner<'_> {
    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn vocab(&self) -> Result<Vocab> {
        Vocab::load(&self.path("vocab.txt"))
    }

    fn corpus(&self, name: &str, vocab: &Vocab) -> Result<ParallelCorpus> {
        Ok(load_corpus(&self.path(name), vocab, self.cfg.task.max_len)?.corpus)
    }

    fn stage(&self, stage: Stage) -> Result<()> {
        match stage {
            Stage::Generate => self.generate(),
            Stage::TrainTeacher => self.train_teacher(),
            Stage::Distill => self.distill(),
            Stage::TrainNat => self.train_model(),
            Stage::Decode => self.decode(),
            Stage::Evaluate => self.evaluate(),
            Stage::Probe => self.probe(),
            Stage::BenchSpeed => self.bench_speed(),
        }
    }

    fn generate(&self) -> Result<()> {
        let task = generate_synthetic_corpus(&self.cfg.task)?;
        task.vocab.save(&self.path("vocab.txt"))?;
        save_corpus(&task.train, &task.vocab, &self.path("train.raw.tsv"))?;
        save_corpus(&task.valid, &task.vocab, &self.path("valid.tsv"))?;
        save_corpus(&task.test, &task.vocab, &self.path("test.tsv"))
    }

    fn fit(
        &self,
        arch: ArchConfig,
        objective: Objective,
        train_file: &str,
        train_cfg: &TrainConfig,
        out: &str,
        log: &str,
    ) -> Result<()> {
        let vocab = self.vocab()?;
        let corpus = self.corpus(train_file, &vocab)?;
        let valid = self.corpus("valid.tsv", &vocab)?;
        let kind = match objective {
            Objective::At => DecoderKind::At,
            _ => DecoderKind::Nat,
        };
        let model = Model::init(arch, kind, self.cfg.seed)?;
        let outcome = train(model, objective, &corpus, &valid, train_cfg, Some(&self.path(log)))?;
        outcome.model.save(&self.path(out))
    }

    fn train_teacher(&self) -> Result<()> {
        let arch = ArchConfig::preset(&self.cfg.teacher.preset, self.vocab()?.len(), self.cfg.task.max_len)?;
        self.fit(
            arch,
            Objective::At,
            "train.raw.tsv",
            &self.cfg.teacher.train,
            "teacher.ckpt",
            "teacher.log.jsonl",
        )
    }

    fn distill(&self) -> Result<()> {
        let vocab = self.vocab()?;
        let raw = self.corpus("train.raw.tsv", &vocab)?;
        let teacher = Model::load(&self.path("teacher.ckpt"))?;
        let kd = distill_corpus(&teacher, &raw, self.cfg.teacher.beam)?;
        save_corpus(&kd.corpus, &vocab, &self.path("train.kd.tsv"))
    }

    fn train_model(&self) -> Result<()> {
        let arch = self.cfg.model.arch(self.vocab()?.len(), self.cfg.task.max_len)?;
        let file = if self.cfg.use_distilled {
            "train.kd.tsv"
        } else {
            "train.raw.tsv"
        };
        self.fit(
            arch,
            self.cfg.model.kind.objective(),
            file,
            &self.cfg.train,
            "model.ckpt",
            "model.log.jsonl",
        )
    }

    fn test_sources(&self, vocab: &Vocab) -> Result<(ParallelCorpus, Vec<Vec<TokenId>>)> {
        let test = self.corpus("test.tsv", vocab)?;
        let sources = test.sources().map(<[TokenId]>::to_vec).collect();
        Ok((test, sources))
    }

    fn decode(&self) -> Result<()> {
        let vocab = self.vocab()?;
        let model = Model::load(&self.path("model.ckpt"))?;
        let (_, sources) = self.test_sources(&vocab)?;
        let out = translate(&model, &sources, &effective_decode(self.cfg))?;
        write_hypotheses(&self.path("test.hyp.txt"), &vocab, &out)?;
        write_trace(&self.path("test.trace.jsonl"), &out)
    }

    fn evaluate(&self) -> Result<()> {
        let vocab = self.vocab()?;
        let (test, _) = self.test_sources(&vocab)?;
        let refs: Vec<&[TokenId]> = test.targets().collect();
        let hyps = read_hypotheses(&self.path("test.hyp.txt"), &vocab)?;
        let model = Model::load(&self.path("model.ckpt"))?;
        let perplexity = if self.cfg.eval.perplexity {
            let raw = self.corpus("train.raw.tsv", &vocab)?;
            let sentences: Vec<Vec<TokenId>> = raw.targets().map(<[TokenId]>::to_vec).collect();
            let lm = TinyLm::init(LmConfig::small(vocab.len(), self.cfg.task.max_len), self.cfg.seed)?;
            let lm_cfg = TrainConfig {
                steps: self.cfg.eval.lm_steps,
                seed: self.cfg.seed,
                ..TrainConfig::default()
            };
            lm_perplexity(&train_lm(lm, &sentences, &lm_cfg)?, &hyps)?.perplexity
        } else {
            lm_perplexity(
                &UniformLm {
                    vocab_size: vocab.len(),
                },
                &hyps,
            )?
            .perplexity
        };
        let report = MetricsReport {
            model: self.cfg.tag(),
            dataset: format!("synthetic-m{}", self.cfg.task.modes_per_source),
            seed: self.cfg.seed,
            bleu: corpus_bleu(&hyps, &refs)?,
            repetition_ratio: repetition_ratio(&hyps),
            word_accuracy_f: word_accuracy(&hyps, &refs)?.f,
            perplexity,
            params: Some(model.param_count()),
        };
        report.validate()?;
        write_records(&self.path("metrics.jsonl"), &[report])
    }

    fn probe(&self) -> Result<()> {
        let vocab = self.vocab()?;
        let raw = self.corpus("train.raw.tsv", &vocab)?;
        let sentences: Vec<&[TokenId]> = raw.unique_sources();
        let model = Model::load(&self.path("model.ckpt"))?;
        let spec = &self.cfg.task;
        let words: Vec<TokenId> = {
            let mut w: Vec<TokenId> = sentences.iter().flat_map(|s| s.iter().copied()).collect();
            w.sort_unstable();
            w.dedup();
            w
        };
        let probe_cfg = &self.cfg.eval.probe;
        let reports: Vec<ProbeReport> = vec![
            run_probe(
                &model,
                ProbeTask::SeLen,
                &selen_examples(&sentences, spec.min_len, spec.max_len),
                probe_cfg,
            )?,
            run_probe(
                &model,
                ProbeTask::Wc,
                &wc_examples(&sentences, &words, self.cfg.seed),
                probe_cfg,
            )?,
        ];
        write_records(&self.path("probes.jsonl"), &reports)
    }

    fn bench_speed(&self) -> Result<()> {
        let vocab = self.vocab()?;
        let model = Model::load(&self.path("model.ckpt"))?;
        let (_, sources) = self.test_sources(&vocab)?;
        let report = measure_speed(
            &self.cfg.tag(),
            &model,
            &effective_decode(self.cfg),
            &sources,
            &self.cfg.speed,
        )?;
        write_records(&self.path("speed.jsonl"), &[report])
    }
}

/// Reads hypotheses written one per line, mapping unknown words to `<unk>`.
pub fn read_hypotheses(path: &Path, vocab: &Vocab) -> Result<Vec<Vec<TokenId>>> {
    let text = std::fs::read_to_string(path)?;
    Ok(text
        .lines()
        .map(|l| l.split_whitespace().map(|w| vocab.id_or_unk(w)).collect())
        .collect())
}
