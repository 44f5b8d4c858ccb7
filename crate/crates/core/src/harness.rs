//! Experiment orchestration: stages, artifacts, results tables, reports.
//!
//! Every run lives under `<out>/<run-id>/` where the run id is a hash of the
//! resolved config (seed included), so reruns of the same config land in the
//! same place and produce byte-identical artifacts. Stages write a `.done`
//! marker; with `resume` enabled, completed stages are skipped, so deleting
//! one stage directory reruns exactly that stage.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, Checkpoint, Objective};
use crate::config::{ExperimentConfig, PromptMix};
use crate::error::HarnessError;
use crate::metrics::MetricsSink;
use crate::model::ModelParams;
use crate::ppo::{
    evaluate_policy, init_critic_from_orm, train_ppo, ModelScorer, PolicyEval, RewardScorer,
};
use crate::reward::SchemeKind;
use crate::rm::{train_rm, RmObjective};
use crate::rng::derive_seed;
use crate::sft::train_sft;
use crate::task::{build_corpus, load_corpus, prompt_tokens, CorpusRecord, Family};

pub const BASELINE_SCHEME: &str = "sft_baseline";

// ---------------------------------------------------------------------------
// Results table
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ResultRow {
    pub scheme: String,
    pub prompt_mix: String,
    pub eval_family: String,
    pub final_answer_accuracy: f64,
    pub step_correctness: f64,
    pub mean_kl: f64,
    pub mean_aggregate: f64,
    /// "ok" or "failed"; failed sweep cells keep their row with zeroed
    /// metrics instead of killing the sweep.
    pub status: String,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
pub struct ResultsTable {
    pub rows: Vec<ResultRow>,
}

const CSV_HEADER: &str = "scheme,prompt_mix,eval_family,final_answer_accuracy,step_correctness,mean_kl,mean_aggregate,status";

impl ResultsTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                r.scheme,
                r.prompt_mix,
                r.eval_family,
                r.final_answer_accuracy,
                r.step_correctness,
                r.mean_kl,
                r.mean_aggregate,
                r.status
            ));
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self, HarnessError> {
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| HarnessError::Config("empty csv".into()))?;
        if header != CSV_HEADER {
            return Err(HarnessError::Config(format!("unexpected header `{header}`")));
        }
        let mut rows = Vec::new();
        for line in lines {
            if line.trim().is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split(',').collect();
            if parts.len() != 8 {
                return Err(HarnessError::Config(format!("bad csv row `{line}`")));
            }
            let f = |s: &str| -> Result<f64, HarnessError> {
                s.parse()
                    .map_err(|_| HarnessError::Config(format!("bad number `{s}`")))
            };
            rows.push(ResultRow {
                scheme: parts[0].to_string(),
                prompt_mix: parts[1].to_string(),
                eval_family: parts[2].to_string(),
                final_answer_accuracy: f(parts[3])?,
                step_correctness: f(parts[4])?,
                mean_kl: f(parts[5])?,
                mean_aggregate: f(parts[6])?,
                status: parts[7].to_string(),
            });
        }
        Ok(Self { rows })
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.rows.is_empty() {
            return Err(HarnessError::EmptyResults);
        }
        for r in &self.rows {
            if r.status == "ok" && !(0.0..=1.0).contains(&r.final_answer_accuracy) {
                return Err(HarnessError::Config(format!(
                    "accuracy {} out of range in row {}/{}/{}",
                    r.final_answer_accuracy, r.scheme, r.prompt_mix, r.eval_family
                )));
            }
        }
        Ok(())
    }

    pub fn row(&self, scheme: &str, mix: &str, family: &str) -> Option<&ResultRow> {
        self.rows.iter().find(|r| {
            r.scheme == scheme && r.prompt_mix == mix && r.eval_family == family
        })
    }
}

/// Long-format plot data: one line per (row, metric).
pub fn plot_data_csv(table: &ResultsTable) -> String {
    let mut out = String::from("scheme,prompt_mix,eval_family,metric,value\n");
    for r in &table.rows {
        for (metric, value) in [
            ("final_answer_accuracy", r.final_answer_accuracy),
            ("step_correctness", r.step_correctness),
            ("mean_kl", r.mean_kl),
            ("mean_aggregate", r.mean_aggregate),
        ] {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.scheme, r.prompt_mix, r.eval_family, metric, value
            ));
        }
    }
    out
}

pub const PLOT_METRICS_PER_ROW: usize = 4;

/// Directional dataset-mixing verdict.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MixingCheck {
    pub scheme: String,
    /// Families on which mixed training strictly beats both single-family
    /// runs.
    pub families_where_mixed_wins: Vec<String>,
    /// True when mixed beats both single-family runs on at least one family.
    pub mixed_beats_both_on_some_family: bool,
}

pub fn mixing_check(table: &ResultsTable, scheme: &str) -> Option<MixingCheck> {
    let mut wins = Vec::new();
    for family in ["simple", "complex"] {
        let mixed = table.row(scheme, "mixed", family)?;
        let simple_only = table.row(scheme, "simple_only", family)?;
        let complex_only = table.row(scheme, "complex_only", family)?;
        if mixed.final_answer_accuracy > simple_only.final_answer_accuracy
            && mixed.final_answer_accuracy > complex_only.final_answer_accuracy
        {
            wins.push(family.to_string());
        }
    }
    Some(MixingCheck {
        scheme: scheme.to_string(),
        mixed_beats_both_on_some_family: !wins.is_empty(),
        families_where_mixed_wins: wins,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunSummary {
    pub run_id: String,
    pub seed: u64,
    pub rows: Vec<ResultRow>,
    pub mixing_check: Option<MixingCheck>,
}

pub struct ReportFiles {
    pub results_csv: PathBuf,
    pub summary_json: PathBuf,
    pub plot_csv: PathBuf,
}

// ---------------------------------------------------------------------------
// Run identity
// ---------------------------------------------------------------------------

/// Deterministic run id: FNV-1a over the resolved config document. The
/// output directory is not part of the identity, so the same experiment gets
/// the same id wherever its artifacts land.
pub fn run_id(cfg: &ExperimentConfig) -> String {
    let mut identity = cfg.clone();
    identity.out_dir = String::new();
    let text = identity.to_toml();
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in text.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    format!("{h:016x}")
}

// ---------------------------------------------------------------------------
// Harness
// ---------------------------------------------------------------------------

pub struct Harness {
    cfg: ExperimentConfig,
    root: PathBuf,
    resume: bool,
}

struct CorpusPaths {
    sft_train: PathBuf,
    sft_val: PathBuf,
    rm_train: PathBuf,
    rm_val: PathBuf,
    eval_simple: PathBuf,
    eval_complex: PathBuf,
}

impl Harness {
    pub fn new(cfg: ExperimentConfig, resume: bool) -> Result<Self, HarnessError> {
        cfg.validate()?;
        let root = Path::new(&cfg.out_dir).join(run_id(&cfg));
        fs::create_dir_all(&root)?;
        fs::write(root.join("config.toml"), cfg.to_toml())?;
        Ok(Self { cfg, root, resume })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.cfg
    }

    pub fn id(&self) -> String {
        run_id(&self.cfg)
    }

    fn done(&self, dir: &Path) -> bool {
        self.resume && dir.join(".done").exists()
    }

    fn mark_done(&self, dir: &Path) -> Result<(), HarnessError> {
        fs::write(dir.join(".done"), b"ok")?;
        Ok(())
    }

    fn corpus_paths(&self) -> CorpusPaths {
        let d = self.root.join("corpus");
        CorpusPaths {
            sft_train: d.join("sft_train.jsonl"),
            sft_val: d.join("sft_val.jsonl"),
            rm_train: d.join("rm_train.jsonl"),
            rm_val: d.join("rm_val.jsonl"),
            eval_simple: d.join("eval_simple.jsonl"),
            eval_complex: d.join("eval_complex.jsonl"),
        }
    }

    pub fn sft_ckpt_path(&self) -> PathBuf {
        self.root.join("sft").join("model.ckpt")
    }

    pub fn rm_ckpt_path(&self, objective: RmObjective) -> PathBuf {
        self.root.join(objective.as_str()).join("model.ckpt")
    }

    pub fn ppo_cell_dir(&self, kind: SchemeKind, mix: PromptMix) -> PathBuf {
        self.root.join(format!("ppo-{}-{}", kind.as_str(), mix.as_str()))
    }

    pub fn eval_dir(&self) -> PathBuf {
        self.root.join("eval")
    }

    // -- stages ------------------------------------------------------------

    pub fn ensure_corpus(&self) -> Result<(), HarnessError> {
        let dir = self.root.join("corpus");
        if self.done(&dir) {
            return Ok(());
        }
        build_corpus(
            &self.cfg.corpus,
            derive_seed(self.cfg.seed, 0xc0),
            &dir,
        )?;
        self.mark_done(&dir)?;
        Ok(())
    }

    pub fn ensure_sft(&self) -> Result<PathBuf, HarnessError> {
        let dir = self.root.join("sft");
        let ckpt = self.sft_ckpt_path();
        if self.done(&dir) && ckpt.exists() {
            return Ok(ckpt);
        }
        self.ensure_corpus()?;
        fs::create_dir_all(&dir)?;
        let paths = self.corpus_paths();
        let train = load_corpus(&paths.sft_train)?;
        let val = load_corpus(&paths.sft_val)?;
        let params = ModelParams::init(
            self.cfg.model.model_config(),
            derive_seed(self.cfg.seed, 0x01),
        );
        let mut metrics = MetricsSink::to_file(&dir.join("metrics.jsonl"))
            .map_err(HarnessError::Io)?;
        train_sft(
            params,
            &train,
            &val,
            &self.cfg.sft_config(),
            &mut metrics,
            Some(&ckpt),
        )?;
        metrics.flush().map_err(HarnessError::Io)?;
        self.mark_done(&dir)?;
        Ok(ckpt)
    }

    pub fn ensure_rm(&self, objective: RmObjective) -> Result<PathBuf, HarnessError> {
        let dir = self.root.join(objective.as_str());
        let ckpt = self.rm_ckpt_path(objective);
        if self.done(&dir) && ckpt.exists() {
            return Ok(ckpt);
        }
        // warm starts stand in for the pretrained encoders reward models
        // would normally begin from: the PRM starts at the SFT Base; the ORM
        // starts at the trained PRM, whose terminal position already carries
        // the sequence-level signal (last-token supervision alone plateaus
        // at chance within any desk-scale budget)
        let init = match objective {
            RmObjective::Prm => checkpoint::load(&self.ensure_sft()?)?.params,
            RmObjective::Orm => checkpoint::load(&self.ensure_rm(RmObjective::Prm)?)?.params,
        };
        fs::create_dir_all(&dir)?;
        let paths = self.corpus_paths();
        let train = load_corpus(&paths.rm_train)?;
        let val = load_corpus(&paths.rm_val)?;
        let mut metrics = MetricsSink::to_file(&dir.join("metrics.jsonl"))
            .map_err(HarnessError::Io)?;
        train_rm(
            init,
            objective,
            &train,
            &val,
            &self.cfg.rm_config(objective),
            &mut metrics,
            Some(&ckpt),
        )?;
        metrics.flush().map_err(HarnessError::Io)?;
        self.mark_done(&dir)?;
        Ok(ckpt)
    }

    fn prompt_pool(
        &self,
        records: &[CorpusRecord],
        mix: PromptMix,
    ) -> Result<Vec<Vec<usize>>, HarnessError> {
        let keep = |r: &&CorpusRecord| match mix {
            PromptMix::Mixed => true,
            PromptMix::SimpleOnly => r.family == Family::Simple,
            PromptMix::ComplexOnly => r.family == Family::Complex,
        };
        let pool: Vec<Vec<usize>> = records
            .iter()
            .filter(keep)
            .map(|r| prompt_tokens(&r.prompt).map_err(HarnessError::Task))
            .collect::<Result<_, _>>()?;
        if pool.is_empty() {
            return Err(HarnessError::Config(format!(
                "prompt mix {} selects no prompts",
                mix.as_str()
            )));
        }
        Ok(pool)
    }

    fn probe_set(&self, mix: PromptMix) -> Result<Vec<CorpusRecord>, HarnessError> {
        let paths = self.corpus_paths();
        let n = self.cfg.eval.train_probe_prompts;
        let simple = load_corpus(&paths.eval_simple)?;
        let complex = load_corpus(&paths.eval_complex)?;
        Ok(match mix {
            PromptMix::SimpleOnly => simple.into_iter().take(n).collect(),
            PromptMix::ComplexOnly => complex.into_iter().take(n).collect(),
            PromptMix::Mixed => {
                let half = n.div_ceil(2);
                simple
                    .into_iter()
                    .take(half)
                    .chain(complex.into_iter().take(n - half))
                    .collect()
            }
        })
    }

    /// Train one PPO cell (scheme x prompt mix). Returns the cell directory.
    pub fn ensure_ppo_cell(
        &self,
        kind: SchemeKind,
        mix: PromptMix,
    ) -> Result<PathBuf, HarnessError> {
        let dir = self.ppo_cell_dir(kind, mix);
        if self.done(&dir) && dir.join("policy.ckpt").exists() {
            return Ok(dir);
        }
        let sft_path = self.ensure_sft()?;
        let orm_path = self.ensure_rm(RmObjective::Orm)?;
        let prm_path = self.ensure_rm(RmObjective::Prm)?;
        fs::create_dir_all(&dir)?;

        let sft = checkpoint::load(&sft_path)?.params;
        let orm_ckpt = checkpoint::load(&orm_path)?;
        let prm = checkpoint::load(&prm_path)?.params;
        let critic = init_critic_from_orm(&orm_ckpt)?;
        let orm = orm_ckpt.params;

        let paths = self.corpus_paths();
        let train_records = load_corpus(&paths.sft_train)?;
        let pool = self.prompt_pool(&train_records, mix)?;
        let probe = self.probe_set(mix)?;

        let scorer = ModelScorer {
            orm: Some(&orm),
            prm: Some(&prm),
        };
        let scheme = self.cfg.reward_scheme(kind);
        let cfg = self.cfg.ppo_config(kind, mix);
        let stage = format!("ppo-{}-{}", kind.as_str(), mix.as_str());
        let mut metrics = MetricsSink::to_file(&dir.join("metrics.jsonl"))
            .map_err(HarnessError::Io)?;
        train_ppo(
            sft.clone(),
            &sft,
            critic,
            &scorer,
            &scheme,
            &pool,
            &probe,
            &cfg,
            &stage,
            &mut metrics,
            Some(&dir),
        )?;
        metrics.flush().map_err(HarnessError::Io)?;
        self.mark_done(&dir)?;
        Ok(dir)
    }

    // -- evaluation --------------------------------------------------------

    fn table_eval_sets(&self) -> Result<[(String, Vec<CorpusRecord>); 2], HarnessError> {
        let paths = self.corpus_paths();
        let n = self.cfg.eval.table_prompts;
        let simple: Vec<CorpusRecord> =
            load_corpus(&paths.eval_simple)?.into_iter().take(n).collect();
        let complex: Vec<CorpusRecord> =
            load_corpus(&paths.eval_complex)?.into_iter().take(n).collect();
        Ok([("simple".to_string(), simple), ("complex".to_string(), complex)])
    }

    /// Evaluate one policy on both family eval sets; returns two rows and
    /// writes per-prompt detail records under eval/details/.
    fn eval_rows(
        &self,
        scheme_label: &str,
        mix_label: &str,
        policy: &ModelParams,
        reference: &ModelParams,
        scorer: &dyn RewardScorer,
        scheme: &crate::reward::RewardScheme,
    ) -> Result<Vec<ResultRow>, HarnessError> {
        let details_dir = self.eval_dir().join("details");
        fs::create_dir_all(&details_dir)?;
        let mut rows = Vec::with_capacity(2);
        for (family_label, records) in self.table_eval_sets()? {
            let pe: PolicyEval = evaluate_policy(policy, reference, scorer, scheme, &records)?;
            let detail_path = details_dir.join(format!(
                "{scheme_label}_{mix_label}_{family_label}.jsonl"
            ));
            let mut body = String::new();
            for d in &pe.details {
                body.push_str(&serde_json::to_string(d)?);
                body.push('\n');
            }
            fs::write(&detail_path, body)?;
            rows.push(ResultRow {
                scheme: scheme_label.to_string(),
                prompt_mix: mix_label.to_string(),
                eval_family: family_label.clone(),
                final_answer_accuracy: pe.accuracy.final_answer_accuracy,
                step_correctness: pe.accuracy.step_correctness,
                mean_kl: pe.mean_kl,
                mean_aggregate: pe.mean_aggregate,
                status: "ok".to_string(),
            });
        }
        Ok(rows)
    }

    /// Rows for one trained PPO cell, cached under the cell directory.
    fn cell_rows(&self, kind: SchemeKind, mix: PromptMix) -> Result<Vec<ResultRow>, HarnessError> {
        let dir = self.ensure_ppo_cell(kind, mix)?;
        let cache = dir.join("rows.json");
        if self.resume && cache.exists() {
            let rows: Vec<ResultRow> = serde_json::from_str(&fs::read_to_string(&cache)?)?;
            return Ok(rows);
        }
        let policy = checkpoint::load(&dir.join("policy.ckpt"))?.params;
        let reference = checkpoint::load(&self.sft_ckpt_path())?.params;
        let orm = checkpoint::load(&self.rm_ckpt_path(RmObjective::Orm))?.params;
        let prm = checkpoint::load(&self.rm_ckpt_path(RmObjective::Prm))?.params;
        let scorer = ModelScorer {
            orm: Some(&orm),
            prm: Some(&prm),
        };
        let scheme = self.cfg.reward_scheme(kind);
        let rows = self.eval_rows(
            kind.as_str(),
            mix.as_str(),
            &policy,
            &reference,
            &scorer,
            &scheme,
        )?;
        fs::write(&cache, serde_json::to_string_pretty(&rows)?)?;
        Ok(rows)
    }

    /// Baseline rows: the SFT checkpoint evaluated as-is (zero KL by
    /// construction), scored under the configured default scheme.
    fn baseline_rows(&self) -> Result<Vec<ResultRow>, HarnessError> {
        let cache = self.root.join("sft").join("rows_baseline.json");
        if self.resume && cache.exists() {
            let rows: Vec<ResultRow> = serde_json::from_str(&fs::read_to_string(&cache)?)?;
            return Ok(rows);
        }
        self.ensure_sft()?;
        self.ensure_rm(RmObjective::Orm)?;
        self.ensure_rm(RmObjective::Prm)?;
        let sft = checkpoint::load(&self.sft_ckpt_path())?.params;
        let orm = checkpoint::load(&self.rm_ckpt_path(RmObjective::Orm))?.params;
        let prm = checkpoint::load(&self.rm_ckpt_path(RmObjective::Prm))?.params;
        let scorer = ModelScorer {
            orm: Some(&orm),
            prm: Some(&prm),
        };
        let scheme = self.cfg.reward_scheme(self.cfg.ppo.reward_scheme);
        let rows = self.eval_rows(BASELINE_SCHEME, "none", &sft, &sft, &scorer, &scheme)?;
        fs::write(&cache, serde_json::to_string_pretty(&rows)?)?;
        Ok(rows)
    }

    // -- entry points --------------------------------------------------------

    /// Full single-scheme pipeline: corpus, SFT, both reward models, PPO on
    /// the configured scheme/mix, evaluation, report.
    pub fn run_pipeline(&self) -> Result<ResultsTable, HarnessError> {
        self.ensure_corpus()?;
        self.ensure_sft()?;
        self.ensure_rm(RmObjective::Orm)?;
        self.ensure_rm(RmObjective::Prm)?;
        let mut rows = self.baseline_rows()?;
        rows.extend(self.cell_rows(self.cfg.ppo.reward_scheme, self.cfg.ppo.prompt_mix)?);
        let table = ResultsTable { rows };
        table.validate()?;
        self.emit_report(&table)?;
        Ok(table)
    }

    /// Figure-style comparison: PPO once per scheme plus the SFT baseline,
    /// evaluated on both families (6 x 2 rows). A failing scheme marks its
    /// rows as failed without killing the sweep.
    pub fn compare_schemes(&self) -> Result<ResultsTable, HarnessError> {
        self.ensure_corpus()?;
        self.ensure_sft()?;
        self.ensure_rm(RmObjective::Orm)?;
        self.ensure_rm(RmObjective::Prm)?;
        let mix = self.cfg.ppo.prompt_mix;
        let mut rows = self.baseline_rows()?;
        for kind in SchemeKind::all() {
            match self.cell_rows(kind, mix) {
                Ok(cell) => rows.extend(cell),
                Err(err) => {
                    eprintln!("scheme {} failed: {err}", kind.as_str());
                    for family in ["simple", "complex"] {
                        rows.push(ResultRow {
                            scheme: kind.as_str().to_string(),
                            prompt_mix: mix.as_str().to_string(),
                            eval_family: family.to_string(),
                            final_answer_accuracy: 0.0,
                            step_correctness: 0.0,
                            mean_kl: 0.0,
                            mean_aggregate: 0.0,
                            status: "failed".to_string(),
                        });
                    }
                }
            }
        }
        let table = ResultsTable { rows };
        table.validate()?;
        self.emit_report(&table)?;
        Ok(table)
    }

    /// Dataset-mixing ablation: the given scheme trained under each prompt
    /// mix, evaluated on both families (3 x 2 rows), plus the directional
    /// verdict in the summary.
    pub fn ablate_mixing(&self, scheme: SchemeKind) -> Result<ResultsTable, HarnessError> {
        self.ensure_corpus()?;
        self.ensure_sft()?;
        self.ensure_rm(RmObjective::Orm)?;
        self.ensure_rm(RmObjective::Prm)?;
        let mut rows = Vec::new();
        for mix in PromptMix::all() {
            match self.cell_rows(scheme, mix) {
                Ok(cell) => rows.extend(cell),
                Err(err) => {
                    eprintln!("mix {} failed: {err}", mix.as_str());
                    for family in ["simple", "complex"] {
                        rows.push(ResultRow {
                            scheme: scheme.as_str().to_string(),
                            prompt_mix: mix.as_str().to_string(),
                            eval_family: family.to_string(),
                            final_answer_accuracy: 0.0,
                            step_correctness: 0.0,
                            mean_kl: 0.0,
                            mean_aggregate: 0.0,
                            status: "failed".to_string(),
                        });
                    }
                }
            }
        }
        let table = ResultsTable { rows };
        table.validate()?;
        self.emit_report(&table)?;
        Ok(table)
    }

    /// Rebuild report files from the stored table (idempotent).
    pub fn report_from_stored(&self) -> Result<ReportFiles, HarnessError> {
        let csv_path = self.eval_dir().join("results.csv");
        if !csv_path.exists() {
            return Err(HarnessError::MissingArtifact(
                csv_path.display().to_string(),
            ));
        }
        let table = ResultsTable::from_csv(&fs::read_to_string(&csv_path)?)?;
        self.emit_report(&table)
    }

    /// Write results.csv, summary.json and plot_data.csv under eval/.
    pub fn emit_report(&self, table: &ResultsTable) -> Result<ReportFiles, HarnessError> {
        table.validate()?;
        let dir = self.eval_dir();
        fs::create_dir_all(&dir)?;
        let results_csv = dir.join("results.csv");
        fs::write(&results_csv, table.to_csv())?;

        // the mixing verdict is derivable whenever all three mixes of one
        // scheme are present
        let check = SchemeKind::all()
            .into_iter()
            .find_map(|k| mixing_check(table, k.as_str()));
        let summary = RunSummary {
            run_id: self.id(),
            seed: self.cfg.seed,
            rows: table.rows.clone(),
            mixing_check: check,
        };
        let summary_json = dir.join("summary.json");
        fs::write(&summary_json, serde_json::to_string_pretty(&summary)?)?;

        let plot_csv = dir.join("plot_data.csv");
        fs::write(&plot_csv, plot_data_csv(table))?;
        Ok(ReportFiles {
            results_csv,
            summary_json,
            plot_csv,
        })
    }

    /// Fail-fast dependency check for standalone eval/report invocations.
    pub fn require_artifacts(&self, kind: SchemeKind, mix: PromptMix) -> Result<(), HarnessError> {
        for path in [
            self.sft_ckpt_path(),
            self.rm_ckpt_path(RmObjective::Orm),
            self.rm_ckpt_path(RmObjective::Prm),
            self.ppo_cell_dir(kind, mix).join("policy.ckpt"),
        ] {
            if !path.exists() {
                return Err(HarnessError::MissingArtifact(path.display().to_string()));
            }
        }
        Ok(())
    }

    /// Evaluate existing artifacts (no training): baseline plus the
    /// configured scheme cell. Fails before any work if artifacts are
    /// missing.
    pub fn eval_only(&self) -> Result<ResultsTable, HarnessError> {
        let kind = self.cfg.ppo.reward_scheme;
        let mix = self.cfg.ppo.prompt_mix;
        self.require_artifacts(kind, mix)?;
        let mut rows = self.baseline_rows()?;
        rows.extend(self.cell_rows(kind, mix)?);
        let table = ResultsTable { rows };
        table.validate()?;
        self.emit_report(&table)?;
        Ok(table)
    }
}

/// Load a checkpoint, insisting on the expected objective tag.
pub fn load_tagged(path: &Path, objective: Objective) -> Result<Checkpoint, HarnessError> {
    let ckpt = checkpoint::load(path)?;
    if ckpt.objective != objective {
        return Err(HarnessError::Nn(crate::error::NnError::ObjectiveMismatch {
            expected: objective.as_str().into(),
            found: ckpt.objective.as_str().into(),
        }));
    }
    Ok(ckpt)
}
