//! Two-step inference (first-stage BM25, routed adapter rerank) and the
//! experiment runner that trains, reranks and evaluates every variant.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::thread;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::adapters::{Adapter, AdapterKind, AdapterRegistry};
use crate::config::{EncoderShape, ExperimentConfig};
use crate::container::Container;
use crate::corpus::{generate_synthetic, DomainDataset, Query, Split, TokenizedDataset};
use crate::distillation::{mine_triplets, score_with_teacher, train_adapter, train_full_model, TeacherScores, TrainConfig, TrainReport, TripletExample};
use crate::encoder::{score_bi, EncoderConfig, EncoderMode, EncoderModel, Embedding};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate_run, paired_ttest_bonferroni, Comparison, MetricTriple, Qrels, Run, SignificanceReport, BASE_ALPHA};
use crate::gating::{gate_metrics, random_route, train_gate, GateMetrics, GateModel};
use crate::retrieval::{default_grid, tune_bm25, Bm25Params, InvertedIndex};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RoutingMode {
    Gate,
    Oracle,
    Random,
    Fixed(u32),
    None,
}

#[derive(Debug, Clone, Copy)]
pub struct RerankRequest<'a> {
    pub query_id: &'a str,
    pub tokens: &'a [u32],
    /// Gold domain, needed only for oracle routing.
    pub gold_domain: Option<u32>,
    /// First-stage ranking, best first.
    pub candidates: &'a [(String, f64)],
    pub depth: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Reranked {
    pub ranked: Vec<(String, f64)>,
    pub route: Option<u32>,
    pub adapters_activated: usize,
}

/// Stable 64-bit mix of a seed, a label and an index.
pub fn derive_seed(seed: u64, label: &str, index: u64) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in seed.to_le_bytes().iter().chain(label.as_bytes()).chain(&index.to_le_bytes()) {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Rescoring engine for one backbone. Bi-mode document embeddings are cached
/// per (adapter, document); the cache never changes results.
pub struct Reranker<'a> {
    encoder: &'a EncoderModel,
    registry: Option<&'a AdapterRegistry>,
    gate: Option<&'a GateModel>,
    doc_tokens: &'a HashMap<String, Vec<u32>>,
    seed: u64,
    cache: HashMap<(Option<u32>, String), Embedding>,
    activations: usize,
}

impl<'a> Reranker<'a> {
    pub fn new(encoder: &'a EncoderModel, doc_tokens: &'a HashMap<String, Vec<u32>>, seed: u64) -> Self {
        Reranker { encoder, registry: None, gate: None, doc_tokens, seed, cache: HashMap::new(), activations: 0 }
    }

    pub fn with_adapters(mut self, registry: &'a AdapterRegistry) -> Self {
        self.registry = Some(registry);
        self
    }

    pub fn with_gate(mut self, gate: &'a GateModel) -> Self {
        self.gate = Some(gate);
        self
    }

    /// Total adapter activations so far.
    pub fn activation_count(&self) -> usize {
        self.activations
    }

    /// The routing decision for a query; depends on the query alone.
    pub fn select(&self, query_id: &str, tokens: &[u32], gold: Option<u32>, mode: RoutingMode) -> Result<Option<u32>> {
        let n = self.registry.map_or(0, |r| r.len());
        Ok(match mode {
            RoutingMode::None => None,
            RoutingMode::Fixed(d) => Some(d),
            RoutingMode::Oracle => {
                Some(gold.ok_or_else(|| Error::contract(format!("oracle routing without a gold domain for {query_id}")))?)
            }
            RoutingMode::Gate => {
                let gate = self.gate.ok_or_else(|| Error::contract("gate routing requested without a gate"))?;
                Some(gate.route(self.encoder, tokens)?)
            }
            RoutingMode::Random => {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, query_id, 0));
                Some(random_route(n, &mut rng)?)
            }
        })
    }

    fn adapter(&self, route: Option<u32>) -> Result<Option<&'a Adapter>> {
        match route {
            None => Ok(None),
            Some(d) => self
                .registry
                .and_then(|r| r.get(d))
                .map(Some)
                .ok_or_else(|| Error::contract(format!("no adapter registered for domain {d}"))),
        }
    }

    fn doc(&self, id: &str) -> Result<&'a [u32]> {
        self.doc_tokens
            .get(id)
            .map(|v| v.as_slice())
            .ok_or_else(|| Error::input(format!("candidate {id} has no tokens")))
    }

    /// Rescores the top `depth` candidates with exactly one adapter (or none)
    /// and sorts by score, ties by document id.
    pub fn rerank(&mut self, req: &RerankRequest<'_>, mode: RoutingMode) -> Result<Reranked> {
        let route = self.select(req.query_id, req.tokens, req.gold_domain, mode)?;
        let adapter = self.adapter(route)?;
        let pool = &req.candidates[..req.depth.min(req.candidates.len())];
        let mut ranked = Vec::with_capacity(pool.len());
        match self.encoder.config.mode {
            EncoderMode::Bi => {
                let q = self.encoder.encode(req.tokens, adapter)?.embedding;
                for (id, _) in pool {
                    let key = (route, id.clone());
                    if !self.cache.contains_key(&key) {
                        let e = self.encoder.encode(self.doc(id)?, adapter)?.embedding;
                        self.cache.insert(key.clone(), e);
                    }
                    ranked.push((id.clone(), score_bi(&q, &self.cache[&key])?));
                }
            }
            EncoderMode::Cross => {
                for (id, _) in pool {
                    let s = self.encoder.score_cross(req.tokens, self.doc(id)?, adapter)?.score;
                    ranked.push((id.clone(), s));
                }
            }
        }
        ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let activated = usize::from(adapter.is_some());
        self.activations += activated;
        Ok(Reranked { ranked, route, adapters_activated: activated })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum VariantTag {
    Bm25,
    Specialized,
    All,
    Teacher,
    KdOracle,
    Drama,
    Random,
}

impl VariantTag {
    pub fn name(self) -> &'static str {
        match self {
            VariantTag::Bm25 => "BM25",
            VariantTag::Specialized => "S",
            VariantTag::All => "ALL",
            VariantTag::Teacher => "T",
            VariantTag::KdOracle => "KD-oracle",
            VariantTag::Drama => "DRAMA",
            VariantTag::Random => "RND",
        }
    }

    pub fn from_name(s: &str) -> Result<Self> {
        Ok(match s {
            "BM25" => VariantTag::Bm25,
            "S" => VariantTag::Specialized,
            "ALL" => VariantTag::All,
            "T" => VariantTag::Teacher,
            "KD-oracle" => VariantTag::KdOracle,
            "DRAMA" => VariantTag::Drama,
            "RND" => VariantTag::Random,
            other => return Err(Error::config(format!("unknown variant {other}"))),
        })
    }

    pub fn routing(self) -> RoutingMode {
        match self {
            VariantTag::KdOracle => RoutingMode::Oracle,
            VariantTag::Drama => RoutingMode::Gate,
            VariantTag::Random => RoutingMode::Random,
            _ => RoutingMode::None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SystemVariant {
    pub name: String,
    pub mode: EncoderMode,
    pub adapter: Option<AdapterKind>,
    pub tag: VariantTag,
}

/// BM25, S, ALL, KD-oracle, DRAMA and RND (plus T when the teacher differs
/// from the specialized models).
pub fn standard_variants(mode: EncoderMode, adapter: AdapterKind, with_teacher: bool) -> Vec<SystemVariant> {
    let mut tags = vec![VariantTag::Bm25, VariantTag::Specialized, VariantTag::All];
    if with_teacher {
        tags.push(VariantTag::Teacher);
    }
    tags.extend([VariantTag::KdOracle, VariantTag::Drama, VariantTag::Random]);
    tags.into_iter()
        .map(|tag| SystemVariant {
            name: tag.name().to_string(),
            mode,
            adapter: matches!(tag, VariantTag::KdOracle | VariantTag::Drama | VariantTag::Random).then_some(adapter),
            tag,
        })
        .collect()
}

/// Trained models needed by the reranking variants.
pub struct Artifacts {
    pub specialized: Vec<EncoderModel>,
    pub teachers: Vec<EncoderModel>,
    pub all: EncoderModel,
    pub registry: AdapterRegistry,
    pub gate: GateModel,
}

/// In-domain first-stage candidates for each query, keyed by query id.
pub fn first_stage(
    index: &InvertedIndex,
    params: Bm25Params,
    queries: &[Query],
    depth: usize,
) -> Result<BTreeMap<String, Vec<(String, f64)>>> {
    queries
        .iter()
        .map(|q| Ok((q.id.clone(), index.search_in_domain(params, &q.text, &q.domain, depth)?)))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct VariantRun {
    /// One run per domain, in domain-id order.
    pub runs: Vec<Run>,
    pub routes: BTreeMap<String, Option<u32>>,
    pub activations: usize,
}

struct QueryJob<'q> {
    query: &'q Query,
    tokens: Vec<u32>,
    domain: u32,
}

/// Reranks `split` under one variant. Work is spread over `jobs` threads;
/// output does not depend on `jobs`.
#[allow(clippy::too_many_arguments)]
pub fn run_variant(
    tag: VariantTag,
    art: &Artifacts,
    data: &TokenizedDataset,
    candidates: &BTreeMap<String, Vec<(String, f64)>>,
    split: Split,
    depth: usize,
    seed: u64,
    jobs: usize,
) -> Result<VariantRun> {
    let queries: Vec<QueryJob<'_>> = data
        .data
        .queries(split)
        .iter()
        .map(|q| QueryJob { query: q, tokens: data.vocab.tokenize(&q.text), domain: data.query_domain(q) })
        .collect();
    let chunk = queries.len().div_ceil(jobs.max(1)).max(1);
    let work = |part: &[QueryJob<'_>]| -> Result<Vec<(String, u32, Reranked)>> {
        let mut rerankers: HashMap<Option<u32>, Reranker<'_>> = HashMap::new();
        let mut out = Vec::with_capacity(part.len());
        for job in part {
            let cands = candidates
                .get(&job.query.id)
                .ok_or_else(|| Error::contract(format!("no candidates for {}", job.query.id)))?;
            let req = RerankRequest {
                query_id: &job.query.id,
                tokens: &job.tokens,
                gold_domain: Some(job.domain),
                candidates: cands,
                depth,
            };
            let result = if tag == VariantTag::Bm25 {
                Reranked { ranked: cands[..depth.min(cands.len())].to_vec(), route: None, adapters_activated: 0 }
            } else {
                let (key, encoder) = match tag {
                    VariantTag::Specialized => (Some(job.domain), &art.specialized[job.domain as usize]),
                    VariantTag::Teacher => (Some(job.domain), &art.teachers[job.domain as usize]),
                    _ => (None, &art.all),
                };
                let r = rerankers.entry(key).or_insert_with(|| {
                    Reranker::new(encoder, &data.doc_tokens, seed).with_adapters(&art.registry).with_gate(&art.gate)
                });
                r.rerank(&req, tag.routing())?
            };
            out.push((job.query.id.clone(), job.domain, result));
        }
        Ok(out)
    };
    let results: Vec<(String, u32, Reranked)> = if jobs <= 1 || queries.len() <= 1 {
        work(&queries)?
    } else {
        thread::scope(|s| {
            let handles: Vec<_> = queries.chunks(chunk).map(|part| s.spawn(move || work(part))).collect();
            let mut all = Vec::new();
            for h in handles {
                all.extend(h.join().map_err(|_| Error::contract("rerank worker panicked"))??);
            }
            Ok::<_, Error>(all)
        })?
    };
    let mut runs: Vec<Run> = data.data.domains.iter().map(|_| Run::new(tag.name())).collect();
    let mut routes = BTreeMap::new();
    let mut activations = 0;
    for (qid, domain, r) in results {
        activations += r.adapters_activated;
        routes.insert(qid.clone(), r.route);
        runs[domain as usize].insert(qid, r.ranked);
    }
    Ok(VariantRun { runs, routes, activations })
}

/// Per-query metrics keyed by `(variant, domain)` then by a pairing key.
pub type Cells = BTreeMap<(String, String), BTreeMap<String, MetricTriple>>;

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub variant: String,
    pub domain: String,
    pub mean: MetricTriple,
    /// One mark per baseline: `+`/`-` significant win/loss on NDCG@10, `=`
    /// not significant, empty for the baseline itself.
    pub marks: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub baselines: Vec<String>,
    pub rows: Vec<SummaryRow>,
}

impl Summary {
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("variant\tdomain\tMAP@100\tMRR@10\tNDCG@10");
        for b in &self.baselines {
            let _ = write!(out, "\tvs_{b}");
        }
        out.push('\n');
        for r in &self.rows {
            let _ = write!(out, "{}\t{}\t{:.4}\t{:.4}\t{:.4}", r.variant, r.domain, r.mean.map, r.mean.mrr, r.mean.ndcg);
            for m in &r.marks {
                let _ = write!(out, "\t{m}");
            }
            out.push('\n');
        }
        out
    }

    pub fn row(&self, variant: &str, domain: &str) -> Option<&SummaryRow> {
        self.rows.iter().find(|r| r.variant == variant && r.domain == domain)
    }
}

pub const ALL_DOMAINS: &str = "all";

fn paired(a: &BTreeMap<String, MetricTriple>, b: &BTreeMap<String, MetricTriple>) -> Result<(Vec<f64>, Vec<f64>)> {
    if a.len() != b.len() || a.keys().zip(b.keys()).any(|(x, y)| x != y) {
        return Err(Error::contract("compared runs cover different queries"));
    }
    Ok((a.values().map(|t| t.ndcg).collect(), b.values().map(|t| t.ndcg).collect()))
}

/// Mean metrics per cell plus an `all` row per variant averaging its domain
/// cells, with paired NDCG@10 tests against each baseline at `0.01/m`,
/// `m` = number of domains.
pub fn summarize(cells: &Cells, variants: &[String], domains: &[String], baselines: &[String]) -> Result<(Summary, SignificanceReport)> {
    let m = domains.len().max(1);
    let baselines: Vec<String> = baselines.iter().filter(|b| variants.contains(b)).cloned().collect();
    let mut rows = Vec::new();
    let mut comparisons: Vec<Comparison> = Vec::new();
    let pooled = |v: &str| -> BTreeMap<String, MetricTriple> {
        domains
            .iter()
            .flat_map(|d| cells.get(&(v.to_string(), d.clone())).into_iter().flatten())
            .map(|(k, t)| (k.clone(), *t))
            .collect()
    };
    for v in variants {
        let mut domain_means = Vec::new();
        for d in domains.iter().map(Some).chain([None]) {
            let (label, per_query, mean) = match d {
                Some(d) => {
                    let pq = cells
                        .get(&(v.clone(), d.clone()))
                        .ok_or_else(|| Error::contract(format!("no results for variant {v} on {d}")))?
                        .clone();
                    let mean = MetricTriple::mean(pq.values());
                    domain_means.push(mean);
                    (d.clone(), pq, mean)
                }
                None => (ALL_DOMAINS.to_string(), pooled(v), MetricTriple::mean(domain_means.iter())),
            };
            let mut marks = Vec::new();
            for b in &baselines {
                if b == v {
                    marks.push(String::new());
                    continue;
                }
                let other = match d {
                    Some(d) => cells.get(&(b.clone(), d.clone())).cloned().unwrap_or_default(),
                    None => pooled(b),
                };
                let (x, y) = paired(&per_query, &other)?;
                let mut c = paired_ttest_bonferroni(&x, &y, m)?;
                c.label = format!("{v} vs {b} on {label} (NDCG@10)");
                marks.push(match (c.significant, c.mean_diff > 0.0) {
                    (true, true) => "+".to_string(),
                    (true, false) => "-".to_string(),
                    _ => "=".to_string(),
                });
                comparisons.push(c);
            }
            rows.push(SummaryRow { variant: v.clone(), domain: label, mean, marks });
        }
    }
    Ok((Summary { baselines, rows }, SignificanceReport { base_alpha: BASE_ALPHA, comparisons }))
}

fn file_safe(name: &str) -> String {
    name.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect()
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, text)?;
    Ok(())
}

fn loss_trace(report: &TrainReport) -> String {
    let mut out = String::from("epoch\tloss\n");
    for (i, l) in report.epoch_losses.iter().enumerate() {
        let _ = writeln!(out, "{}\t{l:.9e}", i + 1);
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct GateReport {
    pub metrics: GateMetrics,
    pub report: TrainReport,
    pub warnings: Vec<String>,
}

/// Outputs of one seed's experiment.
#[derive(Debug, Clone)]
pub struct SeedOutcome {
    pub seed: u64,
    pub domains: Vec<String>,
    pub variants: Vec<String>,
    /// Per-query test metrics keyed by `(variant, domain)` then query id.
    pub cells: Cells,
    pub gate: GateMetrics,
    /// Adapter activations per query under gate routing.
    pub drama_activations: usize,
    pub drama_queries: usize,
    /// Test queries whose gate route matched the gold domain.
    pub routed_correctly: Vec<String>,
    pub runs: BTreeMap<String, VariantRun>,
    pub backbone_checksum_before: u64,
    pub backbone_checksum_after: u64,
}

/// File layout and stage functions for one seed of an experiment.
#[derive(Debug, Clone)]
pub struct Workspace {
    pub cfg: ExperimentConfig,
    pub seed: u64,
    pub dir: PathBuf,
}

impl Workspace {
    pub fn new(cfg: ExperimentConfig, seed: u64) -> Self {
        let dir = cfg.out_dir.join(format!("seed{seed}"));
        Workspace { cfg, seed, dir }
    }

    pub fn data_dir(&self) -> PathBuf {
        self.cfg.data_dir.clone().unwrap_or_else(|| self.dir.join("data"))
    }
    pub fn index_path(&self) -> PathBuf {
        self.dir.join("index.bin")
    }
    pub fn bm25_path(&self) -> PathBuf {
        self.dir.join("bm25.params")
    }
    pub fn teacher_path(&self, domain: &str) -> PathBuf {
        self.dir.join("teachers").join(format!("{}.enc", file_safe(domain)))
    }
    pub fn specialized_path(&self, domain: &str) -> PathBuf {
        self.dir.join("models").join(format!("S.{}.enc", file_safe(domain)))
    }
    pub fn all_path(&self) -> PathBuf {
        self.dir.join("models").join("ALL.enc")
    }
    pub fn scores_path(&self, domain: &str) -> PathBuf {
        self.dir.join("teacher_scores").join(format!("{}.tsv", file_safe(domain)))
    }
    pub fn adapter_path(&self, domain: &str) -> PathBuf {
        self.dir.join("adapters").join(format!("{}.adapter", file_safe(domain)))
    }
    pub fn gate_path(&self) -> PathBuf {
        self.dir.join("gate.bin")
    }
    pub fn run_path(&self, variant: &str, domain: &str) -> PathBuf {
        self.dir.join("runs").join(format!("{}.{}.run", file_safe(variant), file_safe(domain)))
    }
    pub fn log_path(&self, name: &str) -> PathBuf {
        self.dir.join("logs").join(format!("{name}.tsv"))
    }

    /// Writes the synthetic dataset for this seed, or validates the
    /// configured dataset directory.
    pub fn gen_data(&self) -> Result<DomainDataset> {
        if let Some(dir) = &self.cfg.data_dir {
            return DomainDataset::load(dir);
        }
        let spec = crate::corpus::SynthSpec { seed: self.seed, ..self.cfg.synth.clone() };
        let ds = generate_synthetic(&spec)?;
        ds.save(&self.data_dir())?;
        Ok(ds)
    }

    pub fn load_data(&self) -> Result<TokenizedDataset> {
        Ok(TokenizedDataset::new(DomainDataset::load(&self.data_dir())?, self.cfg.vocab_cap))
    }

    pub fn build_index(&self, data: &TokenizedDataset) -> Result<InvertedIndex> {
        let index = InvertedIndex::build(&data.data.documents)?;
        fs::create_dir_all(&self.dir)?;
        index.write_file(&self.index_path())?;
        Ok(index)
    }

    pub fn load_index(&self) -> Result<InvertedIndex> {
        InvertedIndex::read_file(&self.index_path())
    }

    pub fn tune(&self, data: &TokenizedDataset, index: &InvertedIndex) -> Result<Bm25Params> {
        let (params, _) = tune_bm25(index, &data.data.val, &data.data.qrels_val, &default_grid())?;
        write_text(&self.bm25_path(), &params.to_text())?;
        Ok(params)
    }

    pub fn load_bm25(&self) -> Result<Bm25Params> {
        let path = self.bm25_path();
        if !path.exists() {
            return Err(Error::MissingArtifact(path));
        }
        Bm25Params::parse(&fs::read_to_string(path)?)
    }

    pub fn triplets(&self, data: &TokenizedDataset, index: &InvertedIndex, params: Bm25Params) -> Result<Vec<TripletExample>> {
        mine_triplets(data, index, params, Split::Train, None, self.cfg.negatives_depth, derive_seed(self.seed, "triplets", 0))
    }

    fn encoder_config(&self, data: &TokenizedDataset, shape: &EncoderShape) -> EncoderConfig {
        shape.with_vocab(data.vocab.len(), self.cfg.mode)
    }

    fn train_cfg(&self, base: &TrainConfig, label: &str, n: u64) -> TrainConfig {
        TrainConfig { seed: derive_seed(self.seed, label, n), ..*base }
    }

    fn train_per_domain(
        &self,
        data: &TokenizedDataset,
        triplets: &[TripletExample],
        shape: &EncoderShape,
        label: &str,
    ) -> Result<Vec<EncoderModel>> {
        let cfg = self.encoder_config(data, shape);
        (0..data.data.num_domains() as u32)
            .map(|n| {
                let own: Vec<TripletExample> = triplets.iter().filter(|t| t.domain == n).cloned().collect();
                let init = EncoderModel::new(cfg, &mut ChaCha8Rng::seed_from_u64(derive_seed(self.seed, label, n.into())))?;
                let (m, report) = train_full_model(init, &own, &self.train_cfg(&self.cfg.full_train, label, n.into()))?;
                write_text(&self.log_path(&format!("{label}.{}", file_safe(&data.data.domains[n as usize]))), &loss_trace(&report))?;
                Ok(m)
            })
            .collect()
    }

    /// Per-domain teachers. With a teacher shape equal to the student's the
    /// teacher is the specialized model itself (same seeds, same data).
    pub fn train_teachers(&self, data: &TokenizedDataset, triplets: &[TripletExample]) -> Result<Vec<EncoderModel>> {
        let label = if self.cfg.teacher_is_student() { "S" } else { "T" };
        let models = self.train_per_domain(data, triplets, &self.cfg.teacher, label)?;
        for (m, d) in models.iter().zip(&data.data.domains) {
            write_bytes(&self.teacher_path(d), &m.to_bytes()?)?;
        }
        Ok(models)
    }

    /// Specialized per-domain models and the multi-domain model. Teachers
    /// equal to the specialized models are reused instead of retrained.
    pub fn train_baselines(
        &self,
        data: &TokenizedDataset,
        triplets: &[TripletExample],
        teachers: Option<&[EncoderModel]>,
    ) -> Result<(Vec<EncoderModel>, EncoderModel)> {
        let specialized = match teachers {
            Some(t) if self.cfg.teacher_is_student() => t.to_vec(),
            _ => self.train_per_domain(data, triplets, &self.cfg.student, "S")?,
        };
        for (m, d) in specialized.iter().zip(&data.data.domains) {
            write_bytes(&self.specialized_path(d), &m.to_bytes()?)?;
        }
        let cfg = self.encoder_config(data, &self.cfg.student);
        let init = EncoderModel::new(cfg, &mut ChaCha8Rng::seed_from_u64(derive_seed(self.seed, "ALL", 0)))?;
        let (all, report) = train_full_model(init, triplets, &self.train_cfg(&self.cfg.full_train, "ALL", 0))?;
        write_text(&self.log_path("ALL"), &loss_trace(&report))?;
        write_bytes(&self.all_path(), &all.to_bytes()?)?;
        Ok((specialized, all))
    }

    pub fn load_model(&self, path: &Path) -> Result<EncoderModel> {
        EncoderModel::from_container(&Container::read_file(path)?)
    }

    pub fn load_teachers(&self, data: &TokenizedDataset) -> Result<Vec<EncoderModel>> {
        data.data.domains.iter().map(|d| self.load_model(&self.teacher_path(d))).collect()
    }

    pub fn load_specialized(&self, data: &TokenizedDataset) -> Result<Vec<EncoderModel>> {
        data.data.domains.iter().map(|d| self.load_model(&self.specialized_path(d))).collect()
    }

    /// The frozen shared backbone.
    pub fn load_backbone(&self) -> Result<EncoderModel> {
        let mut m = self.load_model(&self.all_path())?;
        m.freeze_backbone();
        Ok(m)
    }

    /// Teacher scores and one distilled adapter per domain over the frozen
    /// multi-domain backbone.
    pub fn distill(&self, data: &TokenizedDataset, backbone: &EncoderModel, teachers: &[EncoderModel], triplets: &[TripletExample]) -> Result<AdapterRegistry> {
        let mut adapters = Vec::new();
        for (n, name) in data.data.domains.iter().enumerate() {
            let own: Vec<TripletExample> = triplets.iter().filter(|t| t.domain == n as u32).cloned().collect();
            let scores = score_with_teacher(&teachers[n], &own)?;
            scores.write_file(&ensure_parent(&self.scores_path(name))?)?;
            let scores = TeacherScores::read_file(&self.scores_path(name))?;
            let init = Adapter::new(
                &self.cfg.adapter,
                backbone.config.hidden_dim,
                backbone.config.num_layers,
                Some(n as u32),
                &mut ChaCha8Rng::seed_from_u64(derive_seed(self.seed, "adapter", n as u64)),
            )?;
            let (adapter, report) = train_adapter(backbone, init, &own, &scores, &self.train_cfg(&self.cfg.adapter_train, "adapter", n as u64))?;
            write_text(&self.log_path(&format!("adapter.{}", file_safe(name))), &loss_trace(&report))?;
            write_bytes(&self.adapter_path(name), &adapter.to_bytes()?)?;
            adapters.push(adapter);
        }
        AdapterRegistry::new(adapters)
    }

    pub fn load_registry(&self, data: &TokenizedDataset, backbone: &EncoderModel) -> Result<AdapterRegistry> {
        let adapters = data
            .data
            .domains
            .iter()
            .map(|d| {
                let path = self.adapter_path(d);
                if !path.exists() {
                    return Err(Error::MissingArtifact(path));
                }
                Adapter::load_for(&fs::read(path)?, self.cfg.adapter.kind, backbone.config.hidden_dim, backbone.config.num_layers)
            })
            .collect::<Result<Vec<_>>>()?;
        AdapterRegistry::new(adapters)
    }

    pub fn gate(&self, data: &TokenizedDataset, backbone: &EncoderModel) -> Result<(GateModel, GateReport)> {
        let mut gate = GateModel::new(
            backbone,
            &self.cfg.adapter,
            data.data.domains.clone(),
            &mut ChaCha8Rng::seed_from_u64(derive_seed(self.seed, "gate", 0)),
        )?;
        let examples: Vec<(Vec<u32>, u32)> =
            data.data.train.iter().map(|q| (data.vocab.tokenize(&q.text), data.query_domain(q))).collect();
        let training = train_gate(backbone, &mut gate, &examples, &self.train_cfg(&self.cfg.gate_train, "gate", 0))?;
        write_bytes(&self.gate_path(), &gate.to_bytes()?)?;
        write_text(&self.log_path("gate"), &loss_trace(&training.report))?;
        let metrics = self.gate_accuracy(data, backbone, &gate)?;
        Ok((gate, GateReport { metrics, report: training.report, warnings: training.warnings }))
    }

    pub fn gate_accuracy(&self, data: &TokenizedDataset, backbone: &EncoderModel, gate: &GateModel) -> Result<GateMetrics> {
        let mut pred = Vec::new();
        let mut gold = Vec::new();
        for q in &data.data.test {
            pred.push(gate.route(backbone, &data.vocab.tokenize(&q.text))?);
            gold.push(data.query_domain(q));
        }
        gate_metrics(&pred, &gold, data.data.num_domains())
    }

    pub fn load_gate(&self) -> Result<GateModel> {
        GateModel::from_container(Container::read_file(&self.gate_path())?)
    }

    pub fn variants(&self) -> Vec<SystemVariant> {
        standard_variants(self.cfg.mode, self.cfg.adapter.kind, !self.cfg.teacher_is_student())
    }

    /// Reranks the test split under every variant and writes the run files.
    pub fn rerank_all(&self, data: &TokenizedDataset, art: &Artifacts, index: &InvertedIndex, params: Bm25Params) -> Result<BTreeMap<String, VariantRun>> {
        let cands = first_stage(index, params, &data.data.test, self.cfg.rerank_depth)?;
        let mut out = BTreeMap::new();
        for v in self.variants() {
            let vr = run_variant(v.tag, art, data, &cands, Split::Test, self.cfg.rerank_depth, self.seed, self.cfg.jobs)?;
            for (run, d) in vr.runs.iter().zip(&data.data.domains) {
                write_text(&self.run_path(&v.name, d), &run.to_trec())?;
            }
            out.insert(v.name.clone(), vr);
        }
        Ok(out)
    }

    /// Evaluates stored run files for every variant and domain.
    pub fn evaluate_runs(&self, data: &TokenizedDataset) -> Result<Cells> {
        let mut cells = Cells::new();
        for v in self.variants() {
            for d in &data.data.domains {
                let path = self.run_path(&v.name, d);
                if !path.exists() {
                    return Err(Error::MissingArtifact(path));
                }
                let run = Run::parse_trec(&fs::read_to_string(&path)?)?;
                let qrels = domain_qrels(data, Split::Test, d);
                let e = evaluate_run(&run, &qrels)?;
                write_text(&self.dir.join("eval").join(format!("{}.{}.tsv", file_safe(&v.name), file_safe(d))), &e.to_tsv())?;
                cells.insert((v.name.clone(), d.clone()), e.per_query);
            }
        }
        Ok(cells)
    }

    /// Every stage for this seed, in order, with file handoff.
    pub fn run_seed(&self, progress: &mut dyn FnMut(&str)) -> Result<SeedOutcome> {
        fs::create_dir_all(&self.dir)?;
        progress(&format!("seed {}: data", self.seed));
        self.gen_data()?;
        let data = self.load_data()?;
        let index = self.build_index(&data)?;
        let params = self.tune(&data, &index)?;
        let triplets = self.triplets(&data, &index, params)?;
        progress(&format!("seed {}: {} triplets, teachers", self.seed, triplets.len()));
        let teachers = self.train_teachers(&data, &triplets)?;
        progress(&format!("seed {}: baselines", self.seed));
        let (specialized, _) = self.train_baselines(&data, &triplets, Some(&teachers))?;
        let backbone = self.load_backbone()?;
        let before = crate::numerics::Parameterized::checksum(&backbone);
        progress(&format!("seed {}: adapters", self.seed));
        let registry = self.distill(&data, &backbone, &teachers, &triplets)?;
        progress(&format!("seed {}: gate", self.seed));
        let (gate, gate_report) = self.gate(&data, &backbone)?;
        let after = crate::numerics::Parameterized::checksum(&backbone);
        progress(&format!("seed {}: rerank (gate accuracy {:.3})", self.seed, gate_report.metrics.accuracy));
        let art = Artifacts {
            specialized,
            teachers: if self.cfg.teacher_is_student() { Vec::new() } else { teachers },
            all: backbone,
            registry,
            gate,
        };
        let runs = self.rerank_all(&data, &art, &index, params)?;
        let cells = self.evaluate_runs(&data)?;
        let drama = &runs[VariantTag::Drama.name()];
        let oracle = &runs[VariantTag::KdOracle.name()];
        let routed_correctly = oracle
            .routes
            .iter()
            .filter(|(q, r)| drama.routes.get(*q) == Some(r))
            .map(|(q, _)| q.clone())
            .collect();
        Ok(SeedOutcome {
            seed: self.seed,
            domains: data.data.domains.clone(),
            variants: self.variants().into_iter().map(|v| v.name).collect(),
            cells,
            gate: gate_report.metrics,
            drama_activations: drama.activations,
            drama_queries: drama.routes.len(),
            routed_correctly,
            runs,
            backbone_checksum_before: before,
            backbone_checksum_after: after,
        })
    }
}

fn ensure_parent(path: &Path) -> Result<PathBuf> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    Ok(path.to_path_buf())
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(ensure_parent(path)?, bytes)?;
    Ok(())
}

pub fn domain_qrels(data: &TokenizedDataset, split: Split, domain: &str) -> Qrels {
    data.data
        .qrels(split)
        .restrict(data.data.queries(split).iter().filter(|q| q.domain == domain).map(|q| q.id.as_str()))
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub seeds: Vec<SeedOutcome>,
    pub summary: Summary,
    pub significance: SignificanceReport,
}

impl ExperimentOutcome {
    pub fn gate_report_tsv(&self) -> String {
        let mut out = String::from("seed\taccuracy");
        if let Some(s) = self.seeds.first() {
            for d in &s.domains {
                let _ = write!(out, "\tprecision_{d}");
            }
        }
        out.push('\n');
        for s in &self.seeds {
            let _ = write!(out, "{}\t{:.4}", s.seed, s.gate.accuracy);
            for p in &s.gate.precision {
                let _ = write!(out, "\t{p:.4}");
            }
            out.push('\n');
        }
        out
    }

    pub fn mean_gate_accuracy(&self) -> f64 {
        self.seeds.iter().map(|s| s.gate.accuracy).sum::<f64>() / self.seeds.len().max(1) as f64
    }
}

/// Pools per-seed cells under `seed/qid` keys.
pub fn pool_cells<'a>(per_seed: impl IntoIterator<Item = (u64, &'a Cells)>) -> Cells {
    let mut cells = Cells::new();
    for (seed, seed_cells) in per_seed {
        for (key, per_query) in seed_cells {
            let e = cells.entry(key.clone()).or_default();
            for (q, t) in per_query {
                e.insert(format!("{seed}/{q}"), *t);
            }
        }
    }
    cells
}

/// Baselines every variant is tested against.
pub const BASELINES: [&str; 3] = ["S", "ALL", "RND"];

/// Summary and significance tables over pooled cells, written under `out`.
pub fn write_summary(out: &Path, cells: &Cells, variants: &[String], domains: &[String]) -> Result<(Summary, SignificanceReport)> {
    let baselines: Vec<String> = BASELINES.iter().map(|s| s.to_string()).collect();
    let (summary, significance) = summarize(cells, variants, domains, &baselines)?;
    write_text(&out.join("summary.tsv"), &summary.to_tsv())?;
    write_text(&out.join("significance.tsv"), &significance.to_tsv())?;
    Ok((summary, significance))
}

/// Runs every seed and writes `summary.tsv`, `significance.tsv` and
/// `gate_report.tsv` under the output directory.
pub fn run_all(cfg: &ExperimentConfig, progress: &mut dyn FnMut(&str)) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    fs::create_dir_all(&cfg.out_dir)?;
    write_text(&cfg.out_dir.join("config.resolved"), &cfg.render())?;
    let mut seeds = Vec::new();
    for &seed in &cfg.seeds {
        seeds.push(Workspace::new(cfg.clone(), seed).run_seed(progress)?);
    }
    let cells = pool_cells(seeds.iter().map(|s| (s.seed, &s.cells)));
    let (summary, significance) = write_summary(&cfg.out_dir, &cells, &seeds[0].variants, &seeds[0].domains)?;
    let outcome = ExperimentOutcome { seeds, summary, significance };
    write_text(&cfg.out_dir.join("gate_report.tsv"), &outcome.gate_report_tsv())?;
    Ok(outcome)
}
