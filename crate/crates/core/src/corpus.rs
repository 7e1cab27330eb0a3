//! Tokenization, dataset files, and the synthetic multi-domain generator.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::{self, Write as _};
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::Qrels;

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
pub const SEP_ID: u32 = 2;
const FIRST_TERM_ID: u32 = 3;

pub const DEFAULT_VOCAB_CAP: usize = 5000;

/// Lowercase, split on anything that is not alphanumeric, drop empties.
pub fn tokenize_terms(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(|t| t.to_lowercase())
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    terms: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocabulary {
    /// Keeps the `cap` most frequent terms (ties by term) after the three
    /// reserved ids.
    pub fn build<'a, I>(texts: I, cap: usize) -> Self
    where
        I: IntoIterator<Item = &'a str>,
    {
        let mut freq: HashMap<String, usize> = HashMap::new();
        for text in texts {
            for term in tokenize_terms(text) {
                *freq.entry(term).or_default() += 1;
            }
        }
        let mut ranked: Vec<(String, usize)> = freq.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        ranked.truncate(cap);
        let mut terms = vec!["[pad]".to_string(), "[unk]".to_string(), "[sep]".to_string()];
        terms.extend(ranked.into_iter().map(|(t, _)| t));
        let index = terms
            .iter()
            .enumerate()
            .skip(FIRST_TERM_ID as usize)
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Vocabulary { terms, index }
    }

    /// Vocabulary over the training corpus: documents plus training queries.
    pub fn from_dataset(ds: &DomainDataset, cap: usize) -> Self {
        let texts = ds.documents.iter().map(|d| d.text.as_str()).chain(ds.train.iter().map(|q| q.text.as_str()));
        Vocabulary::build(texts, cap)
    }

    /// Total id space including reserved ids.
    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.len() <= FIRST_TERM_ID as usize
    }

    pub fn id(&self, term: &str) -> u32 {
        self.index.get(term).copied().unwrap_or(UNK_ID)
    }

    pub fn term(&self, id: u32) -> Option<&str> {
        self.terms.get(id as usize).map(|s| s.as_str())
    }

    pub fn tokenize(&self, text: &str) -> Vec<u32> {
        tokenize_terms(text).iter().map(|t| self.id(t)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    pub text: String,
    pub domain: String,
}

/// Queries share the document line format.
pub type Query = Document;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DomainDataset {
    /// Domain names; a domain's id is its position.
    pub domains: Vec<String>,
    pub documents: Vec<Document>,
    pub train: Vec<Query>,
    pub val: Vec<Query>,
    pub test: Vec<Query>,
    pub qrels_train: Qrels,
    pub qrels_val: Qrels,
    pub qrels_test: Qrels,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DomainStats {
    pub domain: String,
    pub documents: usize,
    pub queries: [usize; 3],
    pub avg_relevants: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetStats {
    pub per_domain: Vec<DomainStats>,
}

impl fmt::Display for DatasetStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "domain\tdocuments\ttrain_queries\tval_queries\ttest_queries\tavg_relevants")?;
        for s in &self.per_domain {
            writeln!(
                f,
                "{}\t{}\t{}\t{}\t{}\t{:.2}",
                s.domain, s.documents, s.queries[0], s.queries[1], s.queries[2], s.avg_relevants
            )?;
        }
        Ok(())
    }
}

impl DomainDataset {
    pub fn queries(&self, split: Split) -> &[Query] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn qrels(&self, split: Split) -> &Qrels {
        match split {
            Split::Train => &self.qrels_train,
            Split::Val => &self.qrels_val,
            Split::Test => &self.qrels_test,
        }
    }

    pub fn num_domains(&self) -> usize {
        self.domains.len()
    }

    pub fn domain_id(&self, name: &str) -> Option<u32> {
        self.domains.iter().position(|d| d == name).map(|i| i as u32)
    }

    pub fn stats(&self) -> DatasetStats {
        let per_domain = self
            .domains
            .iter()
            .map(|name| {
                let documents = self.documents.iter().filter(|d| &d.domain == name).count();
                let mut queries = [0; 3];
                let mut rel_total = 0usize;
                for (i, split) in Split::ALL.iter().enumerate() {
                    for q in self.queries(*split).iter().filter(|q| &q.domain == name) {
                        queries[i] += 1;
                        rel_total += self.qrels(*split).relevant(&q.id).count();
                    }
                }
                let nq: usize = queries.iter().sum();
                DomainStats {
                    domain: name.clone(),
                    documents,
                    queries,
                    avg_relevants: if nq == 0 { 0.0 } else { rel_total as f64 / nq as f64 },
                }
            })
            .collect();
        DatasetStats { per_domain }
    }

    /// Checks id uniqueness, split disjointness, domain names and qrels
    /// references, reporting every offender.
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        let known: BTreeSet<&str> = self.domains.iter().map(|s| s.as_str()).collect();
        let mut doc_ids = BTreeSet::new();
        for d in &self.documents {
            if !doc_ids.insert(d.id.as_str()) {
                problems.push(format!("duplicate document id {}", d.id));
            }
            if !known.contains(d.domain.as_str()) {
                problems.push(format!("document {} has unknown domain {}", d.id, d.domain));
            }
        }
        let mut seen: BTreeMap<&str, Split> = BTreeMap::new();
        for split in Split::ALL {
            for q in self.queries(split) {
                if let Some(prev) = seen.insert(q.id.as_str(), split) {
                    problems.push(format!(
                        "query id {} appears in {} and {}",
                        q.id,
                        prev.name(),
                        split.name()
                    ));
                }
                if !known.contains(q.domain.as_str()) {
                    problems.push(format!("query {} has unknown domain {}", q.id, q.domain));
                }
            }
            let ids: BTreeSet<&str> = self.queries(split).iter().map(|q| q.id.as_str()).collect();
            for (qid, did, _) in self.qrels(split).iter() {
                if !doc_ids.contains(did) {
                    problems.push(format!("{} qrels: query {qid} judges missing document {did}", split.name()));
                }
                if !ids.contains(qid) {
                    problems.push(format!("{} qrels: unknown query {qid}", split.name()));
                }
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(problems.join("; ")))
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        write_jsonl(&dir.join("documents.jsonl"), &self.documents)?;
        for split in Split::ALL {
            write_jsonl(&dir.join(format!("queries.{}.jsonl", split.name())), self.queries(split))?;
            fs::write(dir.join(format!("qrels.{}.txt", split.name())), self.qrels(split).to_trec())?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let documents = read_jsonl(&dir.join("documents.jsonl"))?;
        let train = read_jsonl(&dir.join("queries.train.jsonl"))?;
        let val = read_jsonl(&dir.join("queries.val.jsonl"))?;
        let test = read_jsonl(&dir.join("queries.test.jsonl"))?;
        let qrels = |s: &str| -> Result<Qrels> {
            let path = dir.join(format!("qrels.{s}.txt"));
            if !path.exists() {
                return Err(Error::MissingArtifact(path));
            }
            Qrels::parse_trec(&fs::read_to_string(path)?)
        };
        let domains: BTreeSet<String> = documents.iter().map(|d: &Document| d.domain.clone()).collect();
        let ds = DomainDataset {
            domains: domains.into_iter().collect(),
            documents,
            train,
            val,
            test,
            qrels_train: qrels("train")?,
            qrels_val: qrels("val")?,
            qrels_test: qrels("test")?,
        };
        ds.validate()?;
        Ok(ds)
    }
}

fn write_jsonl(path: &Path, rows: &[Document]) -> Result<()> {
    let mut out = String::new();
    for r in rows {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

fn read_jsonl(path: &Path) -> Result<Vec<Document>> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    let text = fs::read_to_string(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse { line: i + 1, msg: format!("{}: {e}", path.display()) })
        })
        .collect()
}

/// Knobs for the synthetic corpus. Each domain owns `vocab_per_domain`
/// terms, a fraction `shared_fraction` of which come from a pool common to
/// all domains. The domain vocabulary is shuffled and cut into topics;
/// documents draw mostly from one topic and queries paraphrase one source
/// document with terms from its topic.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub num_domains: usize,
    pub vocab_per_domain: usize,
    pub shared_fraction: f64,
    pub topics_per_domain: usize,
    pub docs_per_domain: usize,
    pub train_queries: usize,
    pub val_queries: usize,
    pub test_queries: usize,
    pub min_relevant: usize,
    pub max_relevant: usize,
    pub doc_len: (usize, usize),
    pub query_len: (usize, usize),
    /// Probability a document token comes from its topic (else background).
    pub topic_purity: f64,
    /// Probability a query token is copied from the source document (else
    /// drawn from its topic).
    pub copy_rate: f64,
    /// Probability a query token is replaced by a random domain term.
    pub query_noise: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            num_domains: 4,
            vocab_per_domain: 600,
            shared_fraction: 0.0,
            topics_per_domain: 30,
            docs_per_domain: 500,
            train_queries: 200,
            val_queries: 50,
            test_queries: 50,
            min_relevant: 1,
            max_relevant: 3,
            doc_len: (10, 16),
            query_len: (3, 5),
            topic_purity: 0.8,
            copy_rate: 0.5,
            query_noise: 0.1,
            seed: 1,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("num_domains", self.num_domains),
            ("vocab_per_domain", self.vocab_per_domain),
            ("topics_per_domain", self.topics_per_domain),
            ("docs_per_domain", self.docs_per_domain),
            ("train_queries", self.train_queries),
            ("val_queries", self.val_queries),
            ("test_queries", self.test_queries),
            ("min_relevant", self.min_relevant),
            ("doc_len", self.doc_len.0),
            ("query_len", self.query_len.0),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::config(format!("synthetic spec: {name} must be ≥ 1")));
        }
        if !(0.0..=1.0).contains(&self.shared_fraction) {
            return Err(Error::config("shared_fraction must lie in [0, 1]"));
        }
        if self.max_relevant < self.min_relevant || self.doc_len.1 < self.doc_len.0 || self.query_len.1 < self.query_len.0
        {
            return Err(Error::config("synthetic spec: a max bound is below its min"));
        }
        if self.topics_per_domain > self.vocab_per_domain {
            return Err(Error::config("more topics than vocabulary terms"));
        }
        for (name, p) in [("topic_purity", self.topic_purity), ("copy_rate", self.copy_rate), ("query_noise", self.query_noise)]
        {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::config(format!("{name} must lie in [0, 1]")));
            }
        }
        Ok(())
    }

    pub fn domain_name(i: usize) -> String {
        format!("dom{i}")
    }
}

struct DomainPlan {
    name: String,
    vocab: Vec<String>,
    topics: Vec<Vec<String>>,
}

/// Generates a validated dataset; identical specs give identical datasets.
pub fn generate_synthetic(spec: &SynthSpec) -> Result<DomainDataset> {
    spec.validate()?;
    let shared_n = (spec.shared_fraction * spec.vocab_per_domain as f64).round() as usize;
    let own_n = spec.vocab_per_domain - shared_n;
    let shared: Vec<String> = (0..shared_n).map(|i| format!("s{i}")).collect();

    let plans: Vec<DomainPlan> = (0..spec.num_domains)
        .map(|n| {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_mul(1_000_003).wrapping_add(n as u64));
            let mut vocab: Vec<String> = shared.clone();
            vocab.extend((0..own_n).map(|i| format!("t{n}x{i}")));
            vocab.shuffle(&mut rng);
            let per = spec.vocab_per_domain / spec.topics_per_domain;
            let topics = (0..spec.topics_per_domain)
                .map(|t| {
                    let end = if t + 1 == spec.topics_per_domain { vocab.len() } else { (t + 1) * per };
                    vocab[t * per..end].to_vec()
                })
                .collect();
            DomainPlan { name: SynthSpec::domain_name(n), vocab, topics }
        })
        .collect();

    let mut documents = Vec::new();
    let mut splits: [Vec<Query>; 3] = Default::default();
    let mut qrels: [Qrels; 3] = Default::default();

    for (n, plan) in plans.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_mul(7_919).wrapping_add(1_000 + n as u64));
        let mut doc_topic = Vec::with_capacity(spec.docs_per_domain);
        let mut doc_terms: Vec<Vec<String>> = Vec::with_capacity(spec.docs_per_domain);
        let mut by_topic: Vec<Vec<usize>> = vec![Vec::new(); plan.topics.len()];
        for j in 0..spec.docs_per_domain {
            let topic = rng.gen_range(0..plan.topics.len());
            let len = rng.gen_range(spec.doc_len.0..=spec.doc_len.1);
            let terms: Vec<String> = (0..len)
                .map(|_| {
                    if rng.gen_bool(spec.topic_purity) {
                        plan.topics[topic].choose(&mut rng).expect("non-empty topic").clone()
                    } else {
                        plan.vocab.choose(&mut rng).expect("non-empty vocab").clone()
                    }
                })
                .collect();
            by_topic[topic].push(j);
            doc_topic.push(topic);
            documents.push(Document { id: format!("{}-d{j:05}", plan.name), text: terms.join(" "), domain: plan.name.clone() });
            doc_terms.push(terms);
        }
        let doc_base = documents.len() - spec.docs_per_domain;

        let counts = [spec.train_queries, spec.val_queries, spec.test_queries];
        for (s, split) in Split::ALL.iter().enumerate() {
            for k in 0..counts[s] {
                let src = rng.gen_range(0..spec.docs_per_domain);
                let topic = doc_topic[src];
                let len = rng.gen_range(spec.query_len.0..=spec.query_len.1);
                let terms: Vec<String> = (0..len)
                    .map(|_| {
                        if rng.gen_bool(spec.query_noise) {
                            plan.vocab.choose(&mut rng).expect("non-empty vocab").clone()
                        } else if rng.gen_bool(spec.copy_rate) {
                            doc_terms[src].choose(&mut rng).expect("non-empty doc").clone()
                        } else {
                            plan.topics[topic].choose(&mut rng).expect("non-empty topic").clone()
                        }
                    })
                    .collect();
                let qid = format!("{}-{}{k:04}", plan.name, split.name());
                let want = rng.gen_range(spec.min_relevant..=spec.max_relevant);
                let mut relevant = vec![src];
                let mut pool: Vec<usize> = by_topic[topic].iter().copied().filter(|&j| j != src).collect();
                pool.shuffle(&mut rng);
                relevant.extend(pool.into_iter().take(want - 1));
                for j in relevant {
                    qrels[s].insert(&qid, &documents[doc_base + j].id, 1);
                }
                splits[s].push(Query { id: qid, text: terms.join(" "), domain: plan.name.clone() });
            }
        }
    }

    let [train, val, test] = splits;
    let [qrels_train, qrels_val, qrels_test] = qrels;
    let ds = DomainDataset {
        domains: plans.iter().map(|p| p.name.clone()).collect(),
        documents,
        train,
        val,
        test,
        qrels_train,
        qrels_val,
        qrels_test,
    };
    ds.validate()?;
    Ok(ds)
}

/// Dataset with its vocabulary and every text pre-tokenized.
#[derive(Debug, Clone)]
pub struct TokenizedDataset {
    pub data: DomainDataset,
    pub vocab: Vocabulary,
    pub doc_tokens: HashMap<String, Vec<u32>>,
    pub doc_terms: HashMap<String, Vec<String>>,
    pub doc_domain: HashMap<String, u32>,
}

impl TokenizedDataset {
    pub fn new(data: DomainDataset, vocab_cap: usize) -> Self {
        let vocab = Vocabulary::from_dataset(&data, vocab_cap);
        let doc_tokens = data.documents.iter().map(|d| (d.id.clone(), vocab.tokenize(&d.text))).collect();
        let doc_terms = data.documents.iter().map(|d| (d.id.clone(), tokenize_terms(&d.text))).collect();
        let doc_domain = data
            .documents
            .iter()
            .map(|d| (d.id.clone(), data.domain_id(&d.domain).expect("validated domain")))
            .collect();
        TokenizedDataset { data, vocab, doc_tokens, doc_terms, doc_domain }
    }

    pub fn query_domain(&self, q: &Query) -> u32 {
        self.data.domain_id(&q.domain).expect("validated domain")
    }
}

/// Short human-readable summary line used by the CLI.
pub fn describe(ds: &DomainDataset) -> String {
    let mut s = String::new();
    let _ = write!(
        s,
        "{} domains, {} documents, {}/{}/{} queries",
        ds.domains.len(),
        ds.documents.len(),
        ds.train.len(),
        ds.val.len(),
        ds.test.len()
    );
    s
}
