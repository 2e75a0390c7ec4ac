//! Per-group and aggregate similarity results, table-style rendering, and
//! machine-readable exports.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{canonical_text, ItemBank, Strategy};
use crate::embedder::{BackendSpec, EmbeddingVector};
use crate::simengine::{
    inter_mean, intra_mean, scan_flags, BandTable, FlaggedPair, GroupKey, SimError,
};

/// Schema version written into report JSON documents.
pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// Default inclusive threshold a group's inter-strategy mean must reach to
/// count as high similarity.
pub const HIGH_SIMILARITY_THRESHOLD: f64 = 0.65;

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("no groups found")]
    NoGroups,
    #[error("no embedding stored for item {0}")]
    MissingEmbedding(String),
    #[error("similarity computation failed for {context}: {source}")]
    Similarity {
        context: String,
        source: SimError,
    },
    #[error("report document: {0}")]
    Document(String),
}

/// Intra/inter means for one (topic, provider) group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupResult {
    pub key: GroupKey,
    pub inter_mean: f64,
    pub intra_naive: f64,
    pub intra_guided: f64,
    pub n_naive: usize,
    pub n_guided: usize,
}

/// Aggregates recomputable from a set of group results.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    /// Unweighted mean of each provider's group inter-means.
    pub model_averages: BTreeMap<String, f64>,
    /// Unweighted mean over all groups' inter-means.
    pub overall_inter: f64,
    /// Unweighted mean over all groups' naive intra-means.
    pub overall_intra_naive: f64,
    /// Unweighted mean over distinct topics' guided intra-means (the guided
    /// corpus is provider-independent, so each topic counts once).
    pub overall_intra_guided: f64,
}

/// Pure aggregation over group results; the report's stored aggregates are
/// exactly this function's output.
pub fn aggregate(groups: &[GroupResult]) -> Result<Aggregates, ReportError> {
    if groups.is_empty() {
        return Err(ReportError::NoGroups);
    }
    let mut by_provider: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut guided_by_topic: BTreeMap<String, f64> = BTreeMap::new();
    let mut inter_sum = 0.0;
    let mut naive_sum = 0.0;
    for group in groups {
        by_provider
            .entry(group.key.provider_id.clone())
            .or_default()
            .push(group.inter_mean);
        guided_by_topic
            .entry(group.key.topic.descriptor.clone())
            .or_insert(group.intra_guided);
        inter_sum += group.inter_mean;
        naive_sum += group.intra_naive;
    }
    let model_averages = by_provider
        .into_iter()
        .map(|(provider, means)| {
            let avg = means.iter().sum::<f64>() / means.len() as f64;
            (provider, avg)
        })
        .collect();
    let guided_sum: f64 = guided_by_topic.values().sum();
    Ok(Aggregates {
        model_averages,
        overall_inter: inter_sum / groups.len() as f64,
        overall_intra_naive: naive_sum / groups.len() as f64,
        overall_intra_guided: guided_sum / guided_by_topic.len() as f64,
    })
}

/// Full similarity report for one backend.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendReport {
    pub backend_id: String,
    pub groups: Vec<GroupResult>,
    /// Groups that could not be computed (fewer than 2 items on a side);
    /// listed, never fabricated.
    pub absent_groups: Vec<GroupKey>,
    pub aggregates: Aggregates,
    /// Inclusive threshold used for `high_similarity_count`.
    pub high_similarity_threshold: f64,
    /// Number of groups whose inter-strategy mean reaches the threshold.
    pub high_similarity_count: usize,
    /// Flag threshold used for `flags`.
    pub flag_threshold: f64,
    /// Item pairs at or above `flag_threshold`, bank-wide, sorted by score.
    pub flags: Vec<FlaggedPair>,
    pub notes: Vec<String>,
}

fn standing_notes(report_threshold: f64, count: usize, total: usize) -> Vec<String> {
    vec![
        format!(
            "{count} of {total} groups have an inter-strategy mean at or above {report_threshold} \
(inclusive bound; counts are always computed from the group means in this report, not transcribed \
from any external summary)."
        ),
        "Externally quoted counts for comparable tables may disagree with each other; when they \
do, the computed count above is authoritative for this data."
            .to_string(),
    ]
}

/// Builds the per-group and aggregate report for one backend from a bank and
/// its embeddings (keyed by item id).
///
/// Groups are (topic x naive provider); the guided corpus for a topic is
/// shared across providers. A group needs at least 2 items per strategy to
/// be reported; thinner groups land in `absent_groups`.
pub fn build_report(
    bank: &ItemBank,
    backend: &BackendSpec,
    embeddings: &BTreeMap<String, EmbeddingVector>,
    bands: &BandTable,
    flag_threshold: f64,
    high_similarity_threshold: f64,
) -> Result<BackendReport, ReportError> {
    let lookup_vectors = |items: &[&crate::corpus::Item]| -> Result<Vec<EmbeddingVector>, ReportError> {
        items
            .iter()
            .map(|item| {
                embeddings
                    .get(&item.id)
                    .cloned()
                    .ok_or_else(|| ReportError::MissingEmbedding(item.id.clone()))
            })
            .collect()
    };

    let mut groups = Vec::new();
    let mut absent = Vec::new();
    for topic in bank.topics() {
        let guided_items = bank.lookup_strategy(&topic.descriptor, Strategy::Guided);
        let guided_vectors = lookup_vectors(&guided_items)?;
        let intra_guided = if guided_items.len() >= 2 {
            Some(
                intra_mean(&guided_vectors).map_err(|source| ReportError::Similarity {
                    context: format!("guided corpus for '{}'", topic.descriptor),
                    source,
                })?,
            )
        } else {
            None
        };
        for provider_id in bank.providers(Strategy::Naive) {
            let key = GroupKey {
                topic: topic.clone(),
                provider_id: provider_id.clone(),
            };
            let naive_items = bank.lookup(&topic.descriptor, Strategy::Naive, &provider_id);
            if naive_items.len() < 2 || guided_items.len() < 2 {
                absent.push(key);
                continue;
            }
            let naive_vectors = lookup_vectors(&naive_items)?;
            let context = format!("group ('{}', {provider_id})", topic.descriptor);
            let inter = inter_mean(&naive_vectors, &guided_vectors).map_err(|source| {
                ReportError::Similarity {
                    context: context.clone(),
                    source,
                }
            })?;
            let intra_naive =
                intra_mean(&naive_vectors).map_err(|source| ReportError::Similarity {
                    context: context.clone(),
                    source,
                })?;
            groups.push(GroupResult {
                key,
                inter_mean: inter,
                intra_naive,
                intra_guided: intra_guided.expect("guided size checked"),
                n_naive: naive_items.len(),
                n_guided: guided_items.len(),
            });
        }
    }
    if groups.is_empty() {
        return Err(ReportError::NoGroups);
    }
    let aggregates = aggregate(&groups)?;
    let group_means: Vec<(GroupKey, f64)> = groups
        .iter()
        .map(|g| (g.key.clone(), g.inter_mean))
        .collect();
    let high_count =
        crate::simengine::count_at_or_above(&group_means, high_similarity_threshold);

    let ids: Vec<String> = bank.items().iter().map(|item| item.id.clone()).collect();
    let vectors: Vec<EmbeddingVector> = bank
        .items()
        .iter()
        .map(|item| {
            embeddings
                .get(&item.id)
                .cloned()
                .ok_or_else(|| ReportError::MissingEmbedding(item.id.clone()))
        })
        .collect::<Result<_, _>>()?;
    let flags = scan_flags(&ids, &vectors, flag_threshold, None, bands).map_err(|source| {
        ReportError::Similarity {
            context: "bank-wide flag scan".into(),
            source,
        }
    })?;

    let notes = standing_notes(high_similarity_threshold, high_count, groups.len());
    Ok(BackendReport {
        backend_id: backend.backend_id.clone(),
        groups,
        absent_groups: absent,
        aggregates,
        high_similarity_threshold,
        high_similarity_count: high_count,
        flag_threshold,
        flags,
        notes,
    })
}

/// Half-away-from-zero rounding to two decimals, applied only at render time.
pub fn round2(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

fn fmt2(x: f64) -> String {
    format!("{:.2}", round2(x))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RenderFormat {
    Markdown,
    Csv,
    Json,
}

/// Renders a report. Markdown mirrors the per-provider table layout with
/// 2-decimal display values; CSV and JSON carry full precision plus the
/// rounded display values.
pub fn render(report: &BackendReport, format: RenderFormat, bands: &BandTable) -> String {
    match format {
        RenderFormat::Markdown => render_markdown(report, bands),
        RenderFormat::Csv => render_csv(report),
        RenderFormat::Json => render_json(report),
    }
}

fn blueprint_activity(key: &GroupKey) -> String {
    key.topic
        .blueprint
        .as_ref()
        .map(|bp| bp.level3.clone())
        .unwrap_or_else(|| "\u{2014}".to_string())
}

fn render_markdown(report: &BackendReport, bands: &BandTable) -> String {
    let mut out = String::new();
    out.push_str(&format!("# Similarity report \u{2014} `{}`\n\n", report.backend_id));
    out.push_str(
        "| EPA (general prompt) | Blueprint (clinical activity) | Inter-strategy similarity\u{2020} | Intra-strategy similarity: na\u{ef}ve | Intra-strategy similarity: guided |\n",
    );
    out.push_str("| --- | --- | --- | --- | --- |\n");
    let mut current_provider: Option<&str> = None;
    for group in &report.groups {
        if current_provider != Some(group.key.provider_id.as_str()) {
            current_provider = Some(group.key.provider_id.as_str());
            out.push_str(&format!("| **{}** | | | | |\n", group.key.provider_id));
        }
        out.push_str(&format!(
            "| {} | {} | {} | {} | {} |\n",
            group.key.topic.descriptor,
            blueprint_activity(&group.key),
            fmt2(group.inter_mean),
            fmt2(group.intra_naive),
            fmt2(group.intra_guided),
        ));
    }
    out.push_str(
        "\n\u{2020} Mean cosine similarity between the na\u{ef}ve and guided items for the same EPA.\n",
    );

    out.push_str("\n## Aggregates\n\n");
    for (provider, mean) in &report.aggregates.model_averages {
        out.push_str(&format!(
            "- Inter-strategy model average, {provider}: {}\n",
            fmt2(*mean)
        ));
    }
    out.push_str(&format!(
        "- Overall inter-strategy similarity: {}\n",
        fmt2(report.aggregates.overall_inter)
    ));
    out.push_str(&format!(
        "- Overall intra-strategy similarity, na\u{ef}ve: {}\n",
        fmt2(report.aggregates.overall_intra_naive)
    ));
    out.push_str(&format!(
        "- Overall intra-strategy similarity, guided: {}\n",
        fmt2(report.aggregates.overall_intra_guided)
    ));
    out.push_str(&format!(
        "- Groups at or above {} inter-strategy similarity: {} of {}\n",
        report.high_similarity_threshold,
        report.high_similarity_count,
        report.groups.len()
    ));

    if !report.absent_groups.is_empty() {
        out.push_str("\n## Absent groups\n\n");
        for key in &report.absent_groups {
            out.push_str(&format!(
                "- ({}, {}): fewer than 2 items on a side\n",
                key.topic.descriptor, key.provider_id
            ));
        }
    }

    out.push_str(&format!(
        "\n## Flagged pairs (score \u{2265} {})\n\n",
        report.flag_threshold
    ));
    if report.flags.is_empty() {
        out.push_str("No pairs at or above the flag threshold.\n");
    } else {
        out.push_str("| Item A | Item B | Score | Band | Suggested action |\n");
        out.push_str("| --- | --- | --- | --- | --- |\n");
        for flag in &report.flags {
            out.push_str(&format!(
                "| {} | {} | {} | {} | {} |\n",
                flag.row_id,
                flag.col_id,
                fmt2(flag.score),
                flag.band.qualitative(),
                bands.action_for(flag.band),
            ));
        }
    }

    out.push_str("\n## Notes\n\n");
    for note in &report.notes {
        out.push_str(&format!("- {note}\n"));
    }
    out
}

fn render_csv(report: &BackendReport) -> String {
    let mut w = csv::WriterBuilder::new().from_writer(Vec::new());
    w.write_record([
        "kind",
        "backend_id",
        "provider_id",
        "epa",
        "blueprint_activity",
        "inter_mean",
        "intra_naive",
        "intra_guided",
        "n_naive",
        "n_guided",
        "inter_display",
        "intra_naive_display",
        "intra_guided_display",
    ])
    .expect("csv header");
    for group in &report.groups {
        w.write_record([
            "group".to_string(),
            report.backend_id.clone(),
            group.key.provider_id.clone(),
            group.key.topic.descriptor.clone(),
            blueprint_activity(&group.key),
            format!("{}", group.inter_mean),
            format!("{}", group.intra_naive),
            format!("{}", group.intra_guided),
            group.n_naive.to_string(),
            group.n_guided.to_string(),
            fmt2(group.inter_mean),
            fmt2(group.intra_naive),
            fmt2(group.intra_guided),
        ])
        .expect("csv group row");
    }
    for (provider, mean) in &report.aggregates.model_averages {
        w.write_record([
            "model_average".to_string(),
            report.backend_id.clone(),
            provider.clone(),
            String::new(),
            String::new(),
            format!("{mean}"),
            String::new(),
            String::new(),
            String::new(),
            String::new(),
            fmt2(*mean),
            String::new(),
            String::new(),
        ])
        .expect("csv aggregate row");
    }
    w.write_record([
        "overall".to_string(),
        report.backend_id.clone(),
        String::new(),
        String::new(),
        String::new(),
        format!("{}", report.aggregates.overall_inter),
        format!("{}", report.aggregates.overall_intra_naive),
        format!("{}", report.aggregates.overall_intra_guided),
        String::new(),
        String::new(),
        fmt2(report.aggregates.overall_inter),
        fmt2(report.aggregates.overall_intra_naive),
        fmt2(report.aggregates.overall_intra_guided),
    ])
    .expect("csv overall row");
    String::from_utf8(w.into_inner().expect("csv buffer")).expect("csv utf8")
}

/// JSON document wrapper: schema version, the full-precision report, and
/// rounded display values.
#[derive(Serialize, Deserialize)]
struct ReportDocument {
    report_schema_version: u32,
    report: BackendReport,
    display: DisplayBlock,
}

#[derive(Serialize, Deserialize)]
struct DisplayBlock {
    groups: Vec<DisplayGroup>,
    model_averages: BTreeMap<String, String>,
    overall_inter: String,
    overall_intra_naive: String,
    overall_intra_guided: String,
}

#[derive(Serialize, Deserialize)]
struct DisplayGroup {
    provider_id: String,
    epa: String,
    inter: String,
    intra_naive: String,
    intra_guided: String,
}

fn render_json(report: &BackendReport) -> String {
    let document = ReportDocument {
        report_schema_version: REPORT_SCHEMA_VERSION,
        report: report.clone(),
        display: DisplayBlock {
            groups: report
                .groups
                .iter()
                .map(|g| DisplayGroup {
                    provider_id: g.key.provider_id.clone(),
                    epa: g.key.topic.descriptor.clone(),
                    inter: fmt2(g.inter_mean),
                    intra_naive: fmt2(g.intra_naive),
                    intra_guided: fmt2(g.intra_guided),
                })
                .collect(),
            model_averages: report
                .aggregates
                .model_averages
                .iter()
                .map(|(k, v)| (k.clone(), fmt2(*v)))
                .collect(),
            overall_inter: fmt2(report.aggregates.overall_inter),
            overall_intra_naive: fmt2(report.aggregates.overall_intra_naive),
            overall_intra_guided: fmt2(report.aggregates.overall_intra_guided),
        },
    };
    serde_json::to_string_pretty(&document).expect("report document serializes")
}

/// Parses a JSON render back into the report it came from.
pub fn parse_json(text: &str) -> Result<BackendReport, ReportError> {
    let document: ReportDocument =
        serde_json::from_str(text).map_err(|e| ReportError::Document(e.to_string()))?;
    if document.report_schema_version != REPORT_SCHEMA_VERSION {
        return Err(ReportError::Document(format!(
            "unsupported report_schema_version {}",
            document.report_schema_version
        )));
    }
    Ok(document.report)
}

/// flags.csv content: one row per flagged pair with band label and the
/// suggested action text.
pub fn flags_csv(report: &BackendReport, bands: &BandTable) -> String {
    let mut w = csv::WriterBuilder::new().from_writer(Vec::new());
    w.write_record([
        "rank",
        "item_a",
        "item_b",
        "score",
        "score_display",
        "band",
        "suggested_action",
    ])
    .expect("csv header");
    for (rank, flag) in report.flags.iter().enumerate() {
        w.write_record([
            (rank + 1).to_string(),
            flag.row_id.clone(),
            flag.col_id.clone(),
            format!("{}", flag.score),
            fmt2(flag.score),
            flag.band.qualitative().to_string(),
            bands.action_for(flag.band).to_string(),
        ])
        .expect("csv flag row");
    }
    String::from_utf8(w.into_inner().expect("csv buffer")).expect("csv utf8")
}

/// Canonical texts for every bank item, in bank order, paired with ids.
pub fn bank_canonical_texts(bank: &ItemBank) -> (Vec<String>, Vec<String>) {
    let ids = bank.items().iter().map(|i| i.id.clone()).collect();
    let texts = bank.items().iter().map(canonical_text).collect();
    (ids, texts)
}
