use std::path::{Path, PathBuf};

use rayon::prelude::*;
use rfprint_core::authmetrics::{
    adversarial_eval, improvement, max_rule, AdversarialReport, EvalDomain, MetricsReport,
};
use rfprint_core::baseline::{
    build_classifier_with, classify, train_classifier, ClassifierModel, ClassifierOutput,
};
use rfprint_core::iqdata::{
    build_splits, iq_file_name, parse_iq_file_name, read_iq_file, slice_recording, SliceSet,
    SplitManifest,
};
use rfprint_core::radiosim::{generate_dataset, make_fleet_with, write_dataset, ChannelProfile};
use rfprint_core::reveal::{customize_per_device, translate, TranslatorPair};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{DatasetSource, RunConfig};
use crate::error::{PipelineError, StageContext};
use crate::report::{write_heatmap, Summary};

type Result<T> = std::result::Result<T, PipelineError>;

/// Any JSON artifact, stamped with the hash of the config that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stamped<T> {
    pub config_hash: String,
    pub stage: String,
    pub data: T,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetFile {
    pub file: String,
    pub device_id: usize,
    pub domain_id: String,
    pub samples: usize,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceSummary {
    pub domain_id: String,
    pub slice_length: usize,
    pub stride: usize,
    /// Slices per device, indexed by device id.
    pub per_device: Vec<usize>,
}

/// Max-Rule score check over every (slice, hypothesis) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaxRuleCheck {
    pub scores_checked: u64,
    pub violations: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdversarialSummary {
    pub chance_pct: f64,
    pub mean_impersonation_pct: f64,
    pub max_impersonation_pct: f64,
    pub pairs: Vec<AdversarialReport>,
}

/// Whether a stage computed its artifact or found a valid one on disk.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Computed,
    Reused,
}

pub struct Pipeline {
    pub config: RunConfig,
    pub hash: String,
    pub out: PathBuf,
    pub jobs: usize,
    pub quiet: bool,
}

pub const REPORTS: [&str; 4] = ["ttsd", "ttod_raw", "ttod_translated", "ttod_max_rule"];

fn sha256_file(path: &Path) -> std::io::Result<String> {
    Ok(hex::encode(Sha256::digest(std::fs::read(path)?)))
}

impl Pipeline {
    pub fn new(config: RunConfig, out: PathBuf, jobs: usize) -> Result<Self> {
        config.validate()?;
        std::fs::create_dir_all(&out)
            .map_err(|e| PipelineError::Config(format!("cannot create {}: {e}", out.display())))?;
        let hash = config.hash();
        let p = Self {
            config,
            hash,
            out,
            jobs: jobs.max(1),
            quiet: false,
        };
        p.write_json("config", &p.out.join("config.json"), &p.config)?;
        Ok(p)
    }

    fn log(&self, msg: impl AsRef<str>) {
        if !self.quiet {
            eprintln!("[rfprint] {}", msg.as_ref());
        }
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.out.join(rel)
    }

    fn write_json<T: Serialize>(&self, stage: &'static str, path: &Path, data: &T) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).stage(stage)?;
        }
        let stamped = Stamped {
            config_hash: self.hash.clone(),
            stage: stage.into(),
            data,
        };
        let text = serde_json::to_string_pretty(&stamped).stage(stage)?;
        std::fs::write(path, text + "\n").stage(stage)
    }

    /// Reads an artifact if present and produced under the current config.
    fn read_fresh<T: DeserializeOwned>(
        &self,
        stage: &'static str,
        path: &Path,
    ) -> Result<Option<T>> {
        if !path.exists() {
            return Ok(None);
        }
        let text = std::fs::read_to_string(path).stage(stage)?;
        let stamped: Stamped<T> = serde_json::from_str(&text).stage(stage)?;
        Ok((stamped.config_hash == self.hash).then_some(stamped.data))
    }

    /// Like [`Self::read_fresh`] but the artifact is a prerequisite.
    fn require<T: DeserializeOwned>(
        &self,
        stage: &'static str,
        rel: &str,
        producer: &str,
    ) -> Result<T> {
        let path = self.path(rel);
        self.read_fresh(stage, &path)?.ok_or_else(|| {
            PipelineError::data(
                stage,
                format!(
                    "{} is missing or from another config; run `{producer}` first",
                    path.display()
                ),
            )
        })
    }

    fn dataset_dir(&self) -> PathBuf {
        match &self.config.dataset {
            DatasetSource::Simulated(_) => self.path("data"),
            DatasetSource::Directory { path, .. } => path.clone(),
        }
    }

    // ---- simulate ----

    pub fn simulate(&self) -> Result<Outcome> {
        const STAGE: &str = "simulate";
        let DatasetSource::Simulated(sim) = &self.config.dataset else {
            return Err(PipelineError::Config(
                "simulate needs a simulated dataset source".into(),
            ));
        };
        let dir = self.dataset_dir();
        let manifest = dir.join("manifest.json");
        if let Some(files) = self.read_fresh::<Vec<DatasetFile>>(STAGE, &manifest)? {
            let intact = files
                .iter()
                .all(|f| sha256_file(&dir.join(&f.file)).is_ok_and(|h| h == f.sha256));
            if intact {
                self.log("simulate: reusing dataset");
                return Ok(Outcome::Reused);
            }
        }
        let fleet =
            make_fleet_with(sim.n_devices, self.config.seed, &sim.impairments).stage(STAGE)?;
        let channels = [&sim.base_channel, &sim.source_channel]
            .iter()
            .map(|c| ChannelProfile::generate(c.domain_id.clone(), c.seed, &c.multipath))
            .collect::<rfprint_core::Result<Vec<_>>>()
            .stage(STAGE)?;
        let recs = generate_dataset(&fleet, &channels, &sim.waveform, sim.samples_per_device)
            .stage(STAGE)?;
        write_dataset(&dir, &recs).stage(STAGE)?;
        let files = recs
            .iter()
            .map(|r| {
                let file = iq_file_name(r.device_id(), r.domain_id());
                Ok(DatasetFile {
                    sha256: sha256_file(&dir.join(&file)).stage(STAGE)?,
                    file,
                    device_id: r.device_id(),
                    domain_id: r.domain_id().to_string(),
                    samples: r.sample_count(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        self.write_json(STAGE, &manifest, &files)?;
        self.write_json(STAGE, &dir.join("fleet.json"), &fleet)?;
        self.log(format!(
            "simulate: wrote {} recordings to {}",
            files.len(),
            dir.display()
        ));
        Ok(Outcome::Computed)
    }

    // ---- slice ----

    fn load_domain(&self, stage: &'static str, domain: &str) -> Result<SliceSet> {
        let dir = self.dataset_dir();
        let entries = std::fs::read_dir(&dir).map_err(|e| {
            PipelineError::data(stage, format!("cannot list {}: {e}", dir.display()))
        })?;
        let mut found: Vec<(usize, PathBuf)> = Vec::new();
        for entry in entries {
            let path = entry.stage(stage)?.path();
            let name = path
                .file_name()
                .and_then(|n| n.to_str())
                .unwrap_or_default();
            if let Some((device, d)) = parse_iq_file_name(name) {
                if d == domain {
                    found.push((device, path));
                }
            }
        }
        if found.is_empty() {
            return Err(PipelineError::data(
                stage,
                format!("no recordings for domain {domain} in {}", dir.display()),
            ));
        }
        found.sort();
        let params = self.config.slice_params();
        let parts = found
            .iter()
            .map(|(device, path)| slice_recording(&read_iq_file(path, *device, domain)?, &params))
            .collect::<rfprint_core::Result<Vec<_>>>()
            .stage(stage)?;
        SliceSet::concat(&parts).stage(stage)
    }

    /// Base-domain and source-domain slice sets.
    pub fn load_slices(&self, stage: &'static str) -> Result<(SliceSet, SliceSet)> {
        let (base, source) = self.config.domains();
        Ok((
            self.load_domain(stage, &base)?,
            self.load_domain(stage, &source)?,
        ))
    }

    fn slice_summary(set: &SliceSet) -> SliceSummary {
        let n = set.label_set().iter().max().map_or(0, |m| m + 1);
        SliceSummary {
            domain_id: set.domain_id().to_string(),
            slice_length: set.slice_length(),
            stride: set.stride(),
            per_device: (0..n).map(|d| set.indices_of(d).len()).collect(),
        }
    }

    pub fn slice(&self) -> Result<Outcome> {
        const STAGE: &str = "slice";
        let path = self.path("slices.json");
        let (t, s) = self.load_slices(STAGE)?;
        let summary = vec![Self::slice_summary(&t), Self::slice_summary(&s)];
        if self.read_fresh::<Vec<SliceSummary>>(STAGE, &path)?.as_ref() == Some(&summary) {
            self.log("slice: reusing slice summary");
            return Ok(Outcome::Reused);
        }
        self.write_json(STAGE, &path, &summary)?;
        self.log(format!(
            "slice: {} base and {} source slices",
            t.len(),
            s.len()
        ));
        Ok(Outcome::Computed)
    }

    // ---- split ----

    pub fn split(&self) -> Result<Outcome> {
        const STAGE: &str = "split";
        let path = self.path("splits.json");
        if self.read_fresh::<SplitManifest>(STAGE, &path)?.is_some() {
            self.log("split: reusing manifest");
            return Ok(Outcome::Reused);
        }
        let (t, s) = self.load_slices(STAGE)?;
        let mut m = build_splits(&t, &s, self.config.seed).stage(STAGE)?;
        m.config_hash = self.hash.clone();
        self.write_json(STAGE, &path, &m)?;
        self.log(format!(
            "split: {} train / {} val / {} test base slices, {} reveal / {} eval source slices",
            m.base_train.len(),
            m.base_val.len(),
            m.base_test.len(),
            m.reveal_train_s.len(),
            m.ttod_eval_s.len()
        ));
        Ok(Outcome::Computed)
    }

    pub fn splits(&self, stage: &'static str) -> Result<SplitManifest> {
        self.require(stage, "splits.json", "split")
    }

    // ---- train-baseline ----

    fn load_model(&self, stage: &'static str) -> Result<Option<ClassifierModel>> {
        let path = self.path("models/baseline.ckpt");
        if !path.exists() {
            return Ok(None);
        }
        let (model, hash) = ClassifierModel::load(&path).stage(stage)?;
        Ok((hash == self.hash).then_some(model))
    }

    pub fn classifier(&self, stage: &'static str) -> Result<ClassifierModel> {
        self.load_model(stage)?.ok_or_else(|| {
            PipelineError::data(
                stage,
                "baseline checkpoint missing or stale; run `train-baseline` first",
            )
        })
    }

    pub fn train_baseline(&self) -> Result<Outcome> {
        const STAGE: &str = "train-baseline";
        if self.load_model(STAGE)?.is_some() {
            self.log("train-baseline: reusing checkpoint");
            return Ok(Outcome::Reused);
        }
        let m = self.splits(STAGE)?;
        let (t, _) = self.load_slices(STAGE)?;
        let n = t.label_set().len();
        let model = build_classifier_with(&self.config.classifier_arch(n), self.config.seed)
            .stage(STAGE)?;
        let cfg = self.config.classifier_train();
        let model = train_classifier(
            model,
            &t.select(&m.base_train),
            &t.select(&m.base_val),
            &cfg,
        )
        .stage(STAGE)?;
        std::fs::create_dir_all(self.path("models")).stage(STAGE)?;
        model
            .write_log_csv(self.path("models/baseline_log.csv"))
            .stage(STAGE)?;
        model
            .save(self.path("models/baseline.ckpt"), &self.hash)
            .stage(STAGE)?;
        let best = model.best_epoch.and_then(|e| model.training_log.get(e));
        if let Some(b) = best {
            self.log(format!(
                "train-baseline: kept epoch {} (val accuracy {:.3})",
                b.epoch, b.val_accuracy
            ));
        }
        Ok(Outcome::Computed)
    }

    // ---- train-reveal ----

    fn translator_path(&self, device: usize) -> PathBuf {
        self.path(&format!("models/reveal_dev{device}.ckpt"))
    }

    fn load_translator(
        &self,
        stage: &'static str,
        device: usize,
    ) -> Result<Option<TranslatorPair>> {
        let path = self.translator_path(device);
        if !path.exists() {
            return Ok(None);
        }
        let (pair, hash) = TranslatorPair::load(&path).stage(stage)?;
        Ok((hash == self.hash && pair.device_id == device).then_some(pair))
    }

    pub fn translators(&self, stage: &'static str, n: usize) -> Result<Vec<TranslatorPair>> {
        (0..n)
            .map(|d| {
                self.load_translator(stage, d)?.ok_or_else(|| {
                    PipelineError::data(
                        stage,
                        format!("translator {d} missing or stale; run `train-reveal` first"),
                    )
                })
            })
            .collect()
    }

    pub fn train_reveal(&self) -> Result<Outcome> {
        const STAGE: &str = "train-reveal";
        let m = self.splits(STAGE)?;
        let classifier = self.classifier(STAGE)?;
        let (t, s) = self.load_slices(STAGE)?;
        let reveal_t = t.select(&m.reveal_train_t);
        let reveal_s = s.select(&m.reveal_train_s);
        let devices: Vec<usize> = t.label_set().into_iter().collect();
        let mut todo = Vec::new();
        for &d in &devices {
            if self.load_translator(STAGE, d)?.is_none() {
                todo.push(d);
            }
        }
        if todo.is_empty() {
            self.log("train-reveal: reusing all translators");
            return Ok(Outcome::Reused);
        }
        std::fs::create_dir_all(self.path("models")).stage(STAGE)?;
        let arch = self.config.translator_arch();
        let lambda = self.config.translator.lambda;
        let train_one = |d: usize| -> Result<()> {
            let s_train = reveal_s.select(&reveal_s.indices_of(d));
            let t_train = reveal_t.select(&reveal_t.indices_of(d));
            let seed = self.config.seed.wrapping_add(100 + d as u64);
            let pair = TranslatorPair::new(d, &arch, lambda, seed).stage(STAGE)?;
            let candidates = self.config.reveal_candidates(d);
            let pair =
                customize_per_device(pair, &s_train, &t_train, &s_train, &classifier, &candidates)
                    .stage(STAGE)?;
            pair.write_steps_csv(self.path(&format!("models/reveal_dev{d}_steps.csv")))
                .stage(STAGE)?;
            pair.save(self.translator_path(d), &self.hash)
                .stage(STAGE)?;
            if let Some(sel) = &pair.selection {
                self.log(format!(
                    "train-reveal: device {d} kept {} epochs (validation TTOD {:.1}%)",
                    sel.config.epochs, sel.validation_ttod
                ));
            }
            Ok(())
        };
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(self.jobs)
            .build()
            .map_err(|e| PipelineError::Other {
                stage: STAGE,
                source: e.into(),
            })?;
        pool.install(|| {
            todo.par_iter()
                .map(|&d| train_one(d))
                .collect::<Result<Vec<()>>>()
        })?;
        Ok(Outcome::Computed)
    }

    // ---- evaluate ----

    fn report_path(&self, name: &str) -> PathBuf {
        self.path(&format!("reports/{name}.json"))
    }

    fn emit_report(&self, stage: &'static str, report: &MetricsReport) -> Result<()> {
        self.write_json(stage, &self.report_path(&report.label), report)?;
        let csv = self.path(&format!("reports/{}_confusion.csv", report.label));
        report.confusion.write_csv(&csv).stage(stage)?;
        let png = self.path(&format!("reports/{}_confusion.png", report.label));
        write_heatmap(&report.confusion, &png).stage(stage)?;
        Ok(())
    }

    pub fn evaluate(&self) -> Result<Outcome> {
        const STAGE: &str = "evaluate";
        let fresh = REPORTS
            .iter()
            .chain(["max_rule_check"].iter())
            .map(|r| {
                Ok(self
                    .read_fresh::<serde_json::Value>(STAGE, &self.report_path(r))?
                    .is_some())
            })
            .collect::<Result<Vec<bool>>>()?;
        if fresh.iter().all(|&f| f) {
            self.log("evaluate: reusing reports");
            return Ok(Outcome::Reused);
        }
        let m = self.splits(STAGE)?;
        let classifier = self.classifier(STAGE)?;
        let (t, s) = self.load_slices(STAGE)?;
        let n = classifier.arch.n_classes;
        let pairs = self.translators(STAGE, n)?;

        let test = t.select(&m.base_test);
        let out = classify(&classifier, &test).stage(STAGE)?;
        let ttsd = MetricsReport::from_output("ttsd", &out, test.labels(), EvalDomain::Same)
            .stage(STAGE)?;

        let eval = s.select(&m.ttod_eval_s);
        let labels = eval.labels();
        let raw = classify(&classifier, &eval).stage(STAGE)?;
        let ttod_raw =
            MetricsReport::from_output("ttod_raw", &raw, labels, EvalDomain::Other).stage(STAGE)?;

        let (base_domain, _) = self.config.domains();
        let translated = pairs
            .iter()
            .map(|p| classify(&classifier, &translate(p, &eval, &base_domain)?))
            .collect::<rfprint_core::Result<Vec<_>>>()
            .stage(STAGE)?;

        // each slice through its own device's translator
        let own: Vec<f32> = labels
            .iter()
            .enumerate()
            .flat_map(|(k, &j)| translated[j].row(k).to_vec())
            .collect();
        let own = ClassifierOutput::from_probabilities(n, own);
        let mut ttod_translated =
            MetricsReport::from_output("ttod_translated", &own, labels, EvalDomain::Other)
                .stage(STAGE)?;

        let mr = max_rule(&raw, &translated).stage(STAGE)?;
        let mut ttod_max_rule =
            MetricsReport::from_max_rule("ttod_max_rule", &mr, labels).stage(STAGE)?;
        if ttod_raw.pstest_pct > 0.0 {
            ttod_translated = ttod_translated
                .with_improvement_over(ttod_raw.pstest_pct)
                .stage(STAGE)?;
            ttod_max_rule = ttod_max_rule
                .with_improvement_over(ttod_raw.pstest_pct)
                .stage(STAGE)?;
        }

        let mut check = MaxRuleCheck {
            scores_checked: 0,
            violations: 0,
        };
        for k in 0..raw.len() {
            for (i, (&a, &r)) in mr.row(k).iter().zip(raw.row(k)).enumerate() {
                check.scores_checked += 1;
                if a < r || a < translated[i].row(k)[i] {
                    check.violations += 1;
                }
            }
        }

        for r in [&ttsd, &ttod_raw, &ttod_translated, &ttod_max_rule] {
            self.emit_report(STAGE, r)?;
            self.log(format!(
                "evaluate: {:<16} accuracy {:6.2}%  RRP {:6.2}%",
                r.label, r.pstest_pct, r.rrp_pct
            ));
        }
        self.write_json(STAGE, &self.report_path("max_rule_check"), &check)?;
        Ok(Outcome::Computed)
    }

    // ---- adversarial ----

    pub fn adversarial(&self) -> Result<Outcome> {
        const STAGE: &str = "adversarial";
        let path = self.report_path("adversarial");
        if self
            .read_fresh::<AdversarialSummary>(STAGE, &path)?
            .is_some()
        {
            self.log("adversarial: reusing report");
            return Ok(Outcome::Reused);
        }
        let m = self.splits(STAGE)?;
        let classifier = self.classifier(STAGE)?;
        let (_, s) = self.load_slices(STAGE)?;
        let n = classifier.arch.n_classes;
        let pairs = self.translators(STAGE, n)?;
        let eval = s.select(&m.ttod_eval_s);
        let by_device: Vec<SliceSet> = (0..n).map(|j| eval.select(&eval.indices_of(j))).collect();
        let mut reports = Vec::new();
        for pair in &pairs {
            for (j, slices) in by_device.iter().enumerate() {
                if j != pair.device_id {
                    reports.push(adversarial_eval(pair, &classifier, slices).stage(STAGE)?);
                }
            }
        }
        let imp: Vec<f64> = reports.iter().map(|r| r.impersonation_pct).collect();
        let summary = AdversarialSummary {
            chance_pct: 100.0 / n as f64,
            mean_impersonation_pct: imp.iter().sum::<f64>() / imp.len().max(1) as f64,
            max_impersonation_pct: imp.iter().cloned().fold(0.0, f64::max),
            pairs: reports,
        };
        self.write_json(STAGE, &path, &summary)?;
        self.log(format!(
            "adversarial: impersonation mean {:.2}% max {:.2}% (chance {:.2}%)",
            summary.mean_impersonation_pct, summary.max_impersonation_pct, summary.chance_pct
        ));
        Ok(Outcome::Computed)
    }

    // ---- report ----

    pub fn report(&self) -> Result<Summary> {
        const STAGE: &str = "report";
        let get = |name: &str| -> Result<MetricsReport> {
            self.require(STAGE, &format!("reports/{name}.json"), "evaluate")
        };
        let ttsd = get("ttsd")?;
        let raw = get("ttod_raw")?;
        let translated = get("ttod_translated")?;
        let max_rule = get("ttod_max_rule")?;
        let check: MaxRuleCheck = self.require(STAGE, "reports/max_rule_check.json", "evaluate")?;
        let adv: AdversarialSummary =
            self.require(STAGE, "reports/adversarial.json", "adversarial")?;
        let ratio = |old: f64, new: f64| improvement(old, new).ok();
        let summary = Summary {
            n_devices: raw.per_device_softmax.len(),
            ttsd_pct: ttsd.pstest_pct,
            ttod_raw_pct: raw.pstest_pct,
            ttod_translated_pct: translated.pstest_pct,
            ttod_max_rule_pct: max_rule.pstest_pct,
            ttod_improvement_x: ratio(raw.pstest_pct, max_rule.pstest_pct),
            rrp_raw_pct: raw.rrp_pct,
            rrp_max_rule_pct: max_rule.rrp_pct,
            rrp_improvement_x: ratio(raw.rrp_pct, max_rule.rrp_pct),
            max_rule_violations: check.violations,
            chance_pct: adv.chance_pct,
            mean_impersonation_pct: adv.mean_impersonation_pct,
            max_impersonation_pct: adv.max_impersonation_pct,
        };
        self.write_json(STAGE, &self.report_path("summary"), &summary)?;
        std::fs::write(self.path("reports/summary.md"), summary.to_markdown()).stage(STAGE)?;
        self.log(format!(
            "report: wrote {}",
            self.path("reports/summary.md").display()
        ));
        Ok(summary)
    }

    /// Every stage in order, each reusing valid artifacts.
    pub fn run_all(&self) -> Result<Summary> {
        if matches!(self.config.dataset, DatasetSource::Simulated(_)) {
            self.simulate()?;
        }
        self.slice()?;
        self.split()?;
        self.train_baseline()?;
        self.train_reveal()?;
        self.evaluate()?;
        self.adversarial()?;
        self.report()
    }
}
