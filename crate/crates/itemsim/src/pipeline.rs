//! Stage drivers wiring the pipeline end to end:
//! generate -> ingest -> embed -> analyze, plus report re-rendering.
//!
//! Every stage is idempotent given unchanged inputs. With a seed configured,
//! timestamps are pinned so repeated runs produce byte-identical artifacts.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use chrono::{DateTime, TimeZone, Utc};
use thiserror::Error;

use crate::config::RunConfig;
use crate::corpus::{bank_load, bank_save, EpaTopic, ItemBank, Provenance, Strategy};
use crate::embedder::{embed_with_cache, make_backend, EmbedStats, EmbeddingCache, EmbeddingVector};
use crate::genharness::{
    generate_batch, make_provider, output_stem, render_generation_document, GenerationPlan,
    GuidedContext, ManifestPlan, ProviderConfig, RequestStatus, RunManifest,
};
use crate::parser::{parse_bank, parse_document, BankSource};
use crate::report::{
    bank_canonical_texts, build_report, flags_csv, parse_json, render, BackendReport,
    RenderFormat,
};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] crate::config::ConfigError),
    #[error(transparent)]
    Gen(#[from] crate::genharness::GenError),
    #[error(transparent)]
    Corpus(#[from] crate::corpus::CorpusError),
    #[error(transparent)]
    Embed(#[from] crate::embedder::EmbedError),
    #[error(transparent)]
    Report(#[from] crate::report::ReportError),
    #[error(transparent)]
    Sim(#[from] crate::simengine::SimError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("no parseable candidate for provider {provider_id} ({strategy}) topic '{topic}'")]
    NoParseableCandidates {
        provider_id: String,
        strategy: Strategy,
        topic: String,
    },
    #[error("missing artifact {path}; run `{stage}` first")]
    MissingArtifact { path: String, stage: &'static str },
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Directory layout of one workspace.
#[derive(Debug, Clone)]
pub struct Workspace {
    root: PathBuf,
}

impl Workspace {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn generated_dir(&self, run_id: &str) -> PathBuf {
        self.root.join("generated").join(run_id)
    }

    pub fn provider_dir(&self, run_id: &str, provider_id: &str, strategy: Strategy) -> PathBuf {
        self.generated_dir(run_id)
            .join(provider_id)
            .join(strategy.to_string())
    }

    pub fn generation_file(
        &self,
        run_id: &str,
        provider_id: &str,
        strategy: Strategy,
        topic: &EpaTopic,
    ) -> PathBuf {
        self.provider_dir(run_id, provider_id, strategy)
            .join(format!("{}.txt", output_stem(topic, strategy)))
    }

    pub fn manifest_path(&self, run_id: &str) -> PathBuf {
        self.generated_dir(run_id).join("manifest.json")
    }

    pub fn bank_path(&self) -> PathBuf {
        self.root.join("bank.jsonl")
    }

    pub fn cache_dir(&self) -> PathBuf {
        self.root.join("cache")
    }

    pub fn cache_path(&self, backend_id: &str) -> PathBuf {
        self.cache_dir().join(format!("{backend_id}.embcache"))
    }

    pub fn reports_dir(&self) -> PathBuf {
        self.root.join("reports")
    }

    pub fn report_path(&self, backend_id: &str, ext: &str) -> PathBuf {
        self.reports_dir()
            .join(format!("report_{backend_id}.{ext}"))
    }

    pub fn flags_path(&self, backend_id: &str) -> PathBuf {
        self.reports_dir().join(format!("flags_{backend_id}.csv"))
    }
}

/// Wall clock for provenance and manifests: pinned when a seed is set so
/// seeded runs are byte-identical.
pub fn clock_for(config: &RunConfig) -> Box<dyn Fn() -> DateTime<Utc> + Sync + Send> {
    match config.seed {
        Some(_) => {
            let fixed = Utc.with_ymd_and_hms(2025, 1, 1, 0, 0, 0).unwrap();
            Box::new(move || fixed)
        }
        None => Box::new(Utc::now),
    }
}

/// (provider, strategy) pairs a config generates, in deterministic order:
/// every provider under naive, the guided provider under guided.
pub fn provider_strategy_pairs(config: &RunConfig) -> Vec<(&ProviderConfig, Strategy)> {
    let mut pairs = Vec::new();
    for strategy in &config.strategies {
        match strategy {
            Strategy::Naive => {
                for provider in &config.providers {
                    pairs.push((provider, Strategy::Naive));
                }
            }
            Strategy::Guided => {
                pairs.push((config.guided_provider_config(), Strategy::Guided));
            }
        }
    }
    pairs
}

#[derive(Debug, Default)]
pub struct GenerateSummary {
    pub files: Vec<PathBuf>,
    pub requests: usize,
    pub request_errors: usize,
}

impl GenerateSummary {
    pub fn warnings(&self) -> usize {
        self.request_errors
    }
}

/// Runs every configured (provider, strategy) batch, writes one raw document
/// per topic plus the run manifest, and parse-checks that every topic
/// produced at least one candidate item.
pub fn cmd_generate(config: &RunConfig, ws: &Workspace) -> Result<GenerateSummary, PipelineError> {
    let now = clock_for(config);
    let mut summary = GenerateSummary::default();
    let mut manifest = RunManifest {
        run_id: config.run_id.clone(),
        created_at: now(),
        plans: Vec::new(),
        requests: Vec::new(),
    };
    let guided_context = GuidedContext::from_files(
        config.samples_file.as_deref(),
        config.guidelines_file.as_deref(),
    )?;

    for (provider_cfg, strategy) in provider_strategy_pairs(config) {
        let plan = GenerationPlan {
            topics: config.topics.clone(),
            questions_per_topic: config.questions_per_topic,
            provider: provider_cfg.clone(),
            strategy,
            guided_context: match strategy {
                Strategy::Guided => Some(guided_context.clone()),
                Strategy::Naive => None,
            },
        };
        let provider = make_provider(provider_cfg, config.seed)?;
        let output = generate_batch(&plan, provider.as_ref(), &|| now())?;

        let dir = ws.provider_dir(&config.run_id, &provider_cfg.provider_id, strategy);
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        let mut outputs = BTreeMap::new();
        for (topic, texts) in &output.texts_by_topic {
            let path = ws.generation_file(&config.run_id, &provider_cfg.provider_id, strategy, topic);
            let document = render_generation_document(texts);
            fs::write(&path, &document).map_err(io_err(&path))?;
            let relative = path
                .strip_prefix(ws.root())
                .unwrap_or(&path)
                .to_string_lossy()
                .into_owned();
            summary.files.push(path.clone());
            outputs.insert(topic.descriptor.clone(), relative);

            let report = parse_document(&document, topic);
            if report.items.is_empty() {
                return Err(PipelineError::NoParseableCandidates {
                    provider_id: provider_cfg.provider_id.clone(),
                    strategy,
                    topic: topic.descriptor.clone(),
                });
            }
        }
        summary.requests += output.records.len();
        summary.request_errors += output
            .records
            .iter()
            .filter(|r| r.status == RequestStatus::Error)
            .count();
        manifest.plans.push(ManifestPlan {
            provider_id: provider_cfg.provider_id.clone(),
            strategy,
            model: provider_cfg.model.clone(),
            temperature: provider_cfg.temperature,
            max_tokens: provider_cfg.max_tokens,
            questions_per_topic: config.questions_per_topic,
            topics: config.topics.iter().map(|t| t.descriptor.clone()).collect(),
            outputs,
        });
        manifest.requests.extend(output.records);
    }

    let manifest_path = ws.manifest_path(&config.run_id);
    if let Some(parent) = manifest_path.parent() {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    let manifest_json =
        serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&manifest_path, manifest_json).map_err(io_err(&manifest_path))?;
    Ok(summary)
}

#[derive(Debug, Default)]
pub struct IngestSummary {
    pub items: usize,
    pub parse_warnings: usize,
    pub rejected_blocks: usize,
    pub file_errors: Vec<(PathBuf, String)>,
    pub bank_path: PathBuf,
}

impl IngestSummary {
    pub fn warnings(&self) -> usize {
        self.parse_warnings + self.rejected_blocks + self.file_errors.len()
    }
}

/// Parses the generated documents into a validated bank and writes it as
/// JSON Lines.
pub fn cmd_ingest(config: &RunConfig, ws: &Workspace) -> Result<IngestSummary, PipelineError> {
    let now = clock_for(config);
    let created_at = now();
    let mut sources = Vec::new();
    for (provider_cfg, strategy) in provider_strategy_pairs(config) {
        for topic in &config.topics {
            sources.push(BankSource {
                path: ws.generation_file(&config.run_id, &provider_cfg.provider_id, strategy, topic),
                topic: topic.clone(),
                provenance: Provenance {
                    provider_id: provider_cfg.provider_id.clone(),
                    strategy,
                    temperature: provider_cfg.temperature,
                    max_tokens: provider_cfg.max_tokens,
                    run_id: config.run_id.clone(),
                    created_at,
                },
            });
        }
    }
    let build = parse_bank(&sources);
    let bank_path = ws.bank_path();
    if let Some(parent) = bank_path.parent() {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    bank_save(&build.bank, &bank_path)?;
    for (path, warning) in &build.warnings {
        log::warn!("{}: line {}: {}", path.display(), warning.line, warning.message);
    }
    for (path, rejected) in &build.rejected {
        log::warn!("{}: rejected block: {}", path.display(), rejected.reason);
    }
    for (path, error) in &build.file_errors {
        log::warn!("{}: {}", path.display(), error);
    }
    Ok(IngestSummary {
        items: build.bank.len(),
        parse_warnings: build.warnings.len(),
        rejected_blocks: build.rejected.len(),
        file_errors: build.file_errors,
        bank_path,
    })
}

fn load_bank(ws: &Workspace) -> Result<ItemBank, PipelineError> {
    let path = ws.bank_path();
    if !path.exists() {
        return Err(PipelineError::MissingArtifact {
            path: path.display().to_string(),
            stage: "ingest",
        });
    }
    Ok(bank_load(&path)?)
}

#[derive(Debug)]
pub struct BackendEmbedSummary {
    pub backend_id: String,
    pub stats: EmbedStats,
}

#[derive(Debug, Default)]
pub struct EmbedSummary {
    pub backends: Vec<BackendEmbedSummary>,
}

impl EmbedSummary {
    pub fn warnings(&self) -> usize {
        self.backends.iter().map(|b| b.stats.truncated).sum()
    }
}

/// Embeds every bank item's canonical text under each selected backend,
/// through the per-backend cache. A warm cache makes this a no-op.
pub fn cmd_embed(
    config: &RunConfig,
    ws: &Workspace,
    backend_filters: &[String],
) -> Result<EmbedSummary, PipelineError> {
    let bank = load_bank(ws)?;
    let (_, texts) = bank_canonical_texts(&bank);
    fs::create_dir_all(ws.cache_dir()).map_err(io_err(&ws.cache_dir()))?;
    let mut summary = EmbedSummary::default();
    for spec in config.selected_backends(backend_filters)? {
        let backend = make_backend(spec, config.seed);
        let mut cache =
            EmbeddingCache::open(&ws.cache_path(&spec.backend_id), &spec.backend_id, spec.dimension)?;
        let (_, stats) = embed_with_cache(backend.as_ref(), &mut cache, &texts)?;
        summary.backends.push(BackendEmbedSummary {
            backend_id: spec.backend_id.clone(),
            stats,
        });
    }
    Ok(summary)
}

#[derive(Debug, Default)]
pub struct AnalyzeSummary {
    pub reports: Vec<(String, PathBuf)>,
    pub truncations: usize,
}

impl AnalyzeSummary {
    pub fn warnings(&self) -> usize {
        self.truncations
    }
}

/// Builds and writes the similarity report set for each selected backend:
/// report_{id}.md / .csv / .json and flags_{id}.csv.
pub fn cmd_analyze(
    config: &RunConfig,
    ws: &Workspace,
    backend_filters: &[String],
) -> Result<AnalyzeSummary, PipelineError> {
    let bank = load_bank(ws)?;
    if bank.is_empty() {
        return Err(crate::report::ReportError::NoGroups.into());
    }
    let (ids, texts) = bank_canonical_texts(&bank);
    let bands = config.band_table()?;
    fs::create_dir_all(ws.cache_dir()).map_err(io_err(&ws.cache_dir()))?;
    fs::create_dir_all(ws.reports_dir()).map_err(io_err(&ws.reports_dir()))?;
    let mut summary = AnalyzeSummary::default();
    for spec in config.selected_backends(backend_filters)? {
        let backend = make_backend(spec, config.seed);
        let mut cache =
            EmbeddingCache::open(&ws.cache_path(&spec.backend_id), &spec.backend_id, spec.dimension)?;
        let (vectors, stats) = embed_with_cache(backend.as_ref(), &mut cache, &texts)?;
        summary.truncations += stats.truncated;
        let embeddings: BTreeMap<String, EmbeddingVector> =
            ids.iter().cloned().zip(vectors).collect();
        let report = build_report(
            &bank,
            spec,
            &embeddings,
            &bands,
            config.flag_threshold,
            config.high_similarity_threshold,
        )?;
        write_report_files(ws, &report, &bands)?;
        summary
            .reports
            .push((spec.backend_id.clone(), ws.report_path(&spec.backend_id, "json")));
    }
    Ok(summary)
}

fn write_report_files(
    ws: &Workspace,
    report: &BackendReport,
    bands: &crate::simengine::BandTable,
) -> Result<(), PipelineError> {
    let writes = [
        (
            ws.report_path(&report.backend_id, "md"),
            render(report, RenderFormat::Markdown, bands),
        ),
        (
            ws.report_path(&report.backend_id, "csv"),
            render(report, RenderFormat::Csv, bands),
        ),
        (
            ws.report_path(&report.backend_id, "json"),
            render(report, RenderFormat::Json, bands),
        ),
        (ws.flags_path(&report.backend_id), flags_csv(report, bands)),
    ];
    for (path, content) in writes {
        fs::write(&path, content).map_err(io_err(&path))?;
    }
    Ok(())
}

/// Re-renders Markdown/CSV/flags from the stored JSON reports and returns
/// the Markdown text per backend.
pub fn cmd_report(
    config: &RunConfig,
    ws: &Workspace,
    backend_filters: &[String],
) -> Result<Vec<(String, String)>, PipelineError> {
    let bands = config.band_table()?;
    let mut rendered = Vec::new();
    for spec in config.selected_backends(backend_filters)? {
        let json_path = ws.report_path(&spec.backend_id, "json");
        if !json_path.exists() {
            return Err(PipelineError::MissingArtifact {
                path: json_path.display().to_string(),
                stage: "analyze",
            });
        }
        let text = fs::read_to_string(&json_path).map_err(io_err(&json_path))?;
        let report = parse_json(&text)?;
        write_report_files(ws, &report, &bands)?;
        rendered.push((
            spec.backend_id.clone(),
            render(&report, RenderFormat::Markdown, &bands),
        ));
    }
    Ok(rendered)
}

#[derive(Debug, Default)]
pub struct RunSummary {
    pub generate: GenerateSummary,
    pub ingest: IngestSummary,
    pub embed: EmbedSummary,
    pub analyze: AnalyzeSummary,
}

impl RunSummary {
    pub fn warnings(&self) -> usize {
        self.generate.warnings()
            + self.ingest.warnings()
            + self.embed.warnings()
            + self.analyze.warnings()
    }
}

/// The full pipeline: generate, ingest, embed, analyze.
pub fn cmd_run(
    config: &RunConfig,
    ws: &Workspace,
    backend_filters: &[String],
) -> Result<RunSummary, PipelineError> {
    Ok(RunSummary {
        generate: cmd_generate(config, ws)?,
        ingest: cmd_ingest(config, ws)?,
        embed: cmd_embed(config, ws, backend_filters)?,
        analyze: cmd_analyze(config, ws, backend_filters)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn offline_config(seed: u64) -> RunConfig {
        let mut config = RunConfig::default();
        config.run_id = "test-run".into();
        config.seed = Some(seed);
        config
    }

    #[test]
    fn full_offline_run_produces_160_items_and_reports() {
        let dir = tempfile::tempdir().unwrap();
        let ws = Workspace::new(dir.path());
        let config = offline_config(7);
        let summary = cmd_run(&config, &ws, &[]).unwrap();
        assert_eq!(summary.generate.requests, 160);
        assert_eq!(summary.ingest.items, 160);
        assert_eq!(summary.warnings(), 0);
        let bank = bank_load(&ws.bank_path()).unwrap();
        assert_eq!(bank.len(), 160);
        assert_eq!(bank.providers(Strategy::Naive).len(), 3);
        assert_eq!(bank.providers(Strategy::Guided), vec!["gpt-4o".to_string()]);
        for backend in ["biobert", "pubmedbert"] {
            assert!(ws.report_path(backend, "md").exists());
            assert!(ws.report_path(backend, "csv").exists());
            assert!(ws.report_path(backend, "json").exists());
            assert!(ws.flags_path(backend).exists());
        }
        let report = parse_json(
            &fs::read_to_string(ws.report_path("biobert", "json")).unwrap(),
        )
        .unwrap();
        assert_eq!(report.groups.len(), 12);
        assert!(report.absent_groups.is_empty());
    }

    #[test]
    fn warm_cache_second_embed_is_free() {
        let dir = tempfile::tempdir().unwrap();
        let ws = Workspace::new(dir.path());
        let config = offline_config(3);
        cmd_generate(&config, &ws).unwrap();
        cmd_ingest(&config, &ws).unwrap();
        let first = cmd_embed(&config, &ws, &[]).unwrap();
        assert!(first.backends.iter().all(|b| b.stats.backend_calls > 0));
        let second = cmd_embed(&config, &ws, &[]).unwrap();
        assert!(second.backends.iter().all(|b| b.stats.backend_calls == 0));
        assert!(second.backends.iter().all(|b| b.stats.cache_hits == 160));
    }

    #[test]
    fn analyze_without_bank_points_to_ingest() {
        let dir = tempfile::tempdir().unwrap();
        let ws = Workspace::new(dir.path());
        let config = offline_config(3);
        let err = cmd_analyze(&config, &ws, &[]).unwrap_err();
        assert!(matches!(err, PipelineError::MissingArtifact { stage: "ingest", .. }));
    }

    #[test]
    fn analyze_empty_bank_reports_no_groups() {
        let dir = tempfile::tempdir().unwrap();
        let ws = Workspace::new(dir.path());
        let config = offline_config(3);
        bank_save(&ItemBank::new(), &ws.bank_path()).unwrap();
        let err = cmd_analyze(&config, &ws, &[]).unwrap_err();
        assert!(err.to_string().contains("no groups found"));
    }

    #[test]
    fn seeded_runs_are_byte_identical() {
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        let config = offline_config(42);
        cmd_run(&config, &Workspace::new(dir_a.path()), &[]).unwrap();
        cmd_run(&config, &Workspace::new(dir_b.path()), &[]).unwrap();
        let mismatches = compare_trees(dir_a.path(), dir_b.path());
        assert!(mismatches.is_empty(), "{mismatches:?}");
    }

    pub(crate) fn compare_trees(a: &Path, b: &Path) -> Vec<String> {
        fn collect(root: &Path, prefix: &Path, out: &mut Vec<PathBuf>) {
            for entry in fs::read_dir(root.join(prefix)).unwrap() {
                let entry = entry.unwrap();
                let rel = prefix.join(entry.file_name());
                if entry.file_type().unwrap().is_dir() {
                    collect(root, &rel, out);
                } else {
                    out.push(rel);
                }
            }
        }
        let mut files_a = Vec::new();
        collect(a, Path::new(""), &mut files_a);
        files_a.sort();
        let mut files_b = Vec::new();
        collect(b, Path::new(""), &mut files_b);
        files_b.sort();
        let mut mismatches = Vec::new();
        if files_a != files_b {
            mismatches.push(format!("file sets differ: {files_a:?} vs {files_b:?}"));
            return mismatches;
        }
        for rel in files_a {
            let bytes_a = fs::read(a.join(&rel)).unwrap();
            let bytes_b = fs::read(b.join(&rel)).unwrap();
            if bytes_a != bytes_b {
                mismatches.push(rel.display().to_string());
            }
        }
        mismatches
    }

    #[test]
    fn run_equals_stage_composition() {
        let dir_run = tempfile::tempdir().unwrap();
        let dir_stages = tempfile::tempdir().unwrap();
        let config = offline_config(11);
        cmd_run(&config, &Workspace::new(dir_run.path()), &[]).unwrap();
        let ws = Workspace::new(dir_stages.path());
        cmd_generate(&config, &ws).unwrap();
        cmd_ingest(&config, &ws).unwrap();
        cmd_embed(&config, &ws, &[]).unwrap();
        cmd_analyze(&config, &ws, &[]).unwrap();
        let mismatches = compare_trees(dir_run.path(), dir_stages.path());
        assert!(mismatches.is_empty(), "{mismatches:?}");
    }
}
