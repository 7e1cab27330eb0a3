//! Triplet mining, ranking and distillation losses, and the training loops
//! for full models and adapter students.

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::adapters::Adapter;
use crate::corpus::{Split, TokenizedDataset};
use crate::encoder::{EncoderMode, EncoderModel};
use crate::error::{Error, Result};
use crate::numerics::{Adam, Gradients, Parameterized, Tape, Var};
use crate::retrieval::{Bm25Params, InvertedIndex};

#[derive(Debug, Clone, PartialEq)]
pub struct TripletExample {
    pub query_id: String,
    pub positive_id: String,
    pub negative_id: String,
    pub query: Vec<u32>,
    pub positive: Vec<u32>,
    pub negative: Vec<u32>,
    pub domain: u32,
}

impl TripletExample {
    pub fn validate(&self) -> Result<()> {
        if self.positive_id == self.negative_id {
            return Err(Error::contract(format!(
                "triplet for {} uses {} as both positive and negative",
                self.query_id, self.positive_id
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TeacherScoreRecord {
    pub query_id: String,
    pub doc_id: String,
    pub score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub margin: f64,
    pub distill_weight: f64,
    pub seed: u64,
}

impl TrainConfig {
    pub fn full_model() -> Self {
        TrainConfig { epochs: 40, batch_size: 128, learning_rate: 2e-5, margin: 0.1, distill_weight: 1.0, seed: 1 }
    }

    pub fn adapter() -> Self {
        TrainConfig { learning_rate: 1e-4, ..Self::full_model() }
    }

    pub fn gate() -> Self {
        TrainConfig { epochs: 10, learning_rate: 1e-4, ..Self::full_model() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be ≥ 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning rate must be positive"));
        }
        if !(self.margin > 0.0 && self.margin.is_finite()) {
            return Err(Error::config("margin must be positive"));
        }
        if !(self.distill_weight >= 0.0 && self.distill_weight.is_finite()) {
            return Err(Error::config("distillation weight must be non-negative"));
        }
        Ok(())
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::full_model()
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainReport {
    /// Mean per-example loss of each epoch.
    pub epoch_losses: Vec<f64>,
}

pub fn triplet_margin_loss(s_pos: f64, s_neg: f64, margin: f64) -> f64 {
    (margin - (s_pos - s_neg)).max(0.0)
}

pub fn distill_loss(student: f64, teacher: f64) -> f64 {
    (student - teacher).powi(2)
}

pub fn combined_loss(s_pos: f64, s_neg: f64, t_pos: f64, t_neg: f64, margin: f64, lambda: f64) -> f64 {
    triplet_margin_loss(s_pos, s_neg, margin)
        + lambda * (distill_loss(s_pos, t_pos) + distill_loss(s_neg, t_neg)) / 2.0
}

fn triplet_var(tape: &mut Tape<'_>, s_pos: Var, s_neg: Var, margin: f64) -> Result<Var> {
    let gap = tape.sub(s_pos, s_neg)?;
    let neg = tape.scale(gap, -1.0);
    let shifted = tape.add_scalar(neg, margin);
    Ok(tape.relu(shifted))
}

fn distill_var(tape: &mut Tape<'_>, student: Var, teacher: f64) -> Result<Var> {
    let t = tape.constant(vec![], vec![teacher])?;
    let d = tape.sub(student, t)?;
    Ok(tape.square(d))
}

/// Student scores for the positive and negative pair of a triplet.
pub fn triplet_scores<'p>(
    tape: &mut Tape<'p>,
    model: &'p EncoderModel,
    adapter: Option<&'p Adapter>,
    t: &TripletExample,
) -> Result<(Var, Var)> {
    match model.config.mode {
        EncoderMode::Bi => {
            let (q, _) = model.encode_var(tape, &t.query, adapter)?;
            let (p, _) = model.encode_var(tape, &t.positive, adapter)?;
            let (n, _) = model.encode_var(tape, &t.negative, adapter)?;
            Ok((tape.cosine(q, p)?, tape.cosine(q, n)?))
        }
        EncoderMode::Cross => {
            let (p, _) = model.score_cross_var(tape, &t.query, &t.positive, adapter)?;
            let (n, _) = model.score_cross_var(tape, &t.query, &t.negative, adapter)?;
            Ok((p, n))
        }
    }
}

/// Shuffled minibatch Adam over `n` examples. `example` returns the loss and
/// gradients of one example with its loss pre-multiplied by the given
/// weight; gradients are summed over a batch before each step.
pub(crate) fn fit<P, F>(target: &mut P, n: usize, cfg: &TrainConfig, mut example: F) -> Result<TrainReport>
where
    P: Parameterized,
    F: FnMut(&P, usize, f64) -> Result<(f64, Gradients)>,
{
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(cfg.learning_rate);
    let mut order: Vec<usize> = (0..n).collect();
    let mut report = TrainReport::default();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let weight = 1.0 / batch.len() as f64;
            for &i in batch {
                let (loss, grads) = example(target, i, weight)?;
                if !loss.is_finite() {
                    return Err(Error::NumericDomain(format!("non-finite training loss on example {i}")));
                }
                total += loss;
                grads.apply_all(target.params_mut())?;
            }
            adam.step(target.params_mut())?;
        }
        report.epoch_losses.push(total / n.max(1) as f64);
    }
    Ok(report)
}

/// Trains every encoder tensor on the triplet margin loss.
pub fn train_full_model(
    mut model: EncoderModel,
    triplets: &[TripletExample],
    cfg: &TrainConfig,
) -> Result<(EncoderModel, TrainReport)> {
    if triplets.is_empty() {
        return Err(Error::contract("cannot train on an empty dataset"));
    }
    triplets.iter().try_for_each(TripletExample::validate)?;
    model.unfreeze();
    let report = fit(&mut model, triplets.len(), cfg, |m, i, w| {
        let mut tape = Tape::new();
        let (p, n) = triplet_scores(&mut tape, m, None, &triplets[i])?;
        let loss = triplet_var(&mut tape, p, n, cfg.margin)?;
        let value = tape.scalar(loss);
        let scaled = tape.scale(loss, w);
        Ok((value, tape.backward(scaled)?))
    })?;
    Ok((model, report))
}

/// Teacher scores keyed by `(query id, doc id)`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TeacherScores {
    records: Vec<TeacherScoreRecord>,
    lookup: HashMap<(String, String), f64>,
}

impl TeacherScores {
    pub fn from_records(records: Vec<TeacherScoreRecord>) -> Result<Self> {
        let mut lookup = HashMap::with_capacity(records.len());
        for r in &records {
            if !r.score.is_finite() {
                return Err(Error::input(format!("non-finite teacher score for ({}, {})", r.query_id, r.doc_id)));
            }
            lookup.insert((r.query_id.clone(), r.doc_id.clone()), r.score);
        }
        Ok(TeacherScores { records, lookup })
    }

    pub fn records(&self) -> &[TeacherScoreRecord] {
        &self.records
    }

    pub fn get(&self, qid: &str, did: &str) -> Option<f64> {
        self.lookup.get(&(qid.to_string(), did.to_string())).copied()
    }

    pub fn require(&self, qid: &str, did: &str) -> Result<f64> {
        self.get(qid, did)
            .ok_or_else(|| Error::contract(format!("no teacher score for pair ({qid}, {did})")))
    }

    /// `query_id<TAB>doc_id<TAB>score` with nine significant digits.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            let _ = writeln!(out, "{}\t{}\t{}", r.query_id, r.doc_id, format_score(r.score));
        }
        out
    }

    pub fn parse_tsv(text: &str) -> Result<Self> {
        let mut records = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 3 {
                return Err(Error::Parse { line: i + 1, msg: "teacher line needs 3 tab-separated fields".into() });
            }
            let score: f64 = f[2]
                .parse()
                .map_err(|_| Error::Parse { line: i + 1, msg: format!("bad score {:?}", f[2]) })?;
            records.push(TeacherScoreRecord { query_id: f[0].into(), doc_id: f[1].into(), score });
        }
        Self::from_records(records)
    }

    pub fn write_file(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_tsv())?;
        Ok(())
    }

    pub fn read_file(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        Self::parse_tsv(&fs::read_to_string(path)?)
    }
}

fn format_score(s: f64) -> String {
    format!("{s:.8e}")
}

/// Rounds to the nine significant digits the cache stores, so cached and
/// in-memory scores agree bit for bit.
pub fn round_score(s: f64) -> f64 {
    format_score(s).parse().expect("formatted float parses")
}

/// Teacher scores for each distinct `(q, d⁺)` and `(q, d⁻)` pair, in
/// triplet order.
pub fn score_with_teacher(teacher: &EncoderModel, triplets: &[TripletExample]) -> Result<TeacherScores> {
    let vocab = teacher.config.vocab_size;
    let mut seen = BTreeSet::new();
    let mut records = Vec::new();
    for t in triplets {
        for (did, doc) in [(&t.positive_id, &t.positive), (&t.negative_id, &t.negative)] {
            if !seen.insert((t.query_id.clone(), did.clone())) {
                continue;
            }
            if let Some(bad) = t.query.iter().chain(doc.iter()).find(|&&x| x as usize >= vocab) {
                return Err(Error::input(format!("token id {bad} unknown to the teacher (vocabulary {vocab})")));
            }
            let score = round_score(teacher.score_pair(&t.query, doc, None)?);
            records.push(TeacherScoreRecord { query_id: t.query_id.clone(), doc_id: did.clone(), score });
        }
    }
    TeacherScores::from_records(records)
}

/// Trains only `adapter` on `retrieval + λ·(distill⁺ + distill⁻)/2` over a
/// frozen student backbone.
pub fn train_adapter(
    student: &EncoderModel,
    mut adapter: Adapter,
    triplets: &[TripletExample],
    teacher: &TeacherScores,
    cfg: &TrainConfig,
) -> Result<(Adapter, TrainReport)> {
    if !student.is_frozen() || student.trainable_count() != 0 {
        return Err(Error::contract("adapter training needs a frozen backbone"));
    }
    if triplets.is_empty() {
        return Err(Error::contract("cannot train an adapter on an empty dataset"));
    }
    let mut targets = Vec::with_capacity(triplets.len());
    for t in triplets {
        t.validate()?;
        targets.push((teacher.require(&t.query_id, &t.positive_id)?, teacher.require(&t.query_id, &t.negative_id)?));
    }
    let report = fit(&mut adapter, triplets.len(), cfg, |a, i, w| {
        let mut tape = Tape::new();
        let (p, n) = triplet_scores(&mut tape, student, Some(a), &triplets[i])?;
        let (tp, tn) = targets[i];
        let retrieval = triplet_var(&mut tape, p, n, cfg.margin)?;
        let dp = distill_var(&mut tape, p, tp)?;
        let dn = distill_var(&mut tape, n, tn)?;
        let d = tape.add(dp, dn)?;
        let d = tape.scale(d, cfg.distill_weight / 2.0);
        let loss = tape.add(retrieval, d)?;
        let value = tape.scalar(loss);
        let scaled = tape.scale(loss, w);
        Ok((value, tape.backward(scaled)?))
    })?;
    Ok((adapter, report))
}

/// One triplet per query of `split`: a random judged-relevant positive and a
/// negative drawn from the unjudged part of the query's in-domain BM25
/// top-`depth`. Queries without a usable negative are skipped.
pub fn mine_triplets(
    data: &TokenizedDataset,
    index: &InvertedIndex,
    params: Bm25Params,
    split: Split,
    domain: Option<u32>,
    depth: usize,
    seed: u64,
) -> Result<Vec<TripletExample>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let qrels = data.data.qrels(split);
    let mut out = Vec::new();
    for q in data.data.queries(split) {
        let qd = data.query_domain(q);
        if domain.is_some_and(|d| d != qd) {
            continue;
        }
        let relevant: Vec<&str> = qrels.relevant(&q.id).collect();
        let Some(&pos) = relevant.choose(&mut rng) else { continue };
        let ranked = index.search_in_domain(params, &q.text, &q.domain, depth)?;
        let pool: Vec<&str> =
            ranked.iter().map(|r| r.0.as_str()).filter(|d| !relevant.contains(d)).collect();
        let Some(&neg) = pool.choose(&mut rng) else { continue };
        let query = data.vocab.tokenize(&q.text);
        if query.is_empty() {
            continue;
        }
        out.push(TripletExample {
            query_id: q.id.clone(),
            positive_id: pos.to_string(),
            negative_id: neg.to_string(),
            query,
            positive: data.doc_tokens[pos].clone(),
            negative: data.doc_tokens[neg].clone(),
            domain: qd,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapters::AdapterConfig;
    use crate::encoder::EncoderConfig;
    use proptest::prelude::*;

    fn tiny_model(mode: EncoderMode, seed: u64) -> EncoderModel {
        let cfg = EncoderConfig { vocab_size: 12, hidden_dim: 8, num_layers: 1, num_heads: 2, ffn_dim: 16, max_seq_len: 16, mode };
        EncoderModel::new(cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    fn triplets() -> Vec<TripletExample> {
        (0..6)
            .map(|i| TripletExample {
                query_id: format!("q{i}"),
                positive_id: format!("p{i}"),
                negative_id: format!("n{i}"),
                query: vec![3 + (i % 3) as u32, 4],
                positive: vec![3 + (i % 3) as u32, 5, 6],
                negative: vec![9, 10, 11 - (i % 2) as u32],
                domain: 0,
            })
            .collect()
    }

    fn fast(epochs: usize, lr: f64) -> TrainConfig {
        TrainConfig { epochs, batch_size: 3, learning_rate: lr, ..TrainConfig::full_model() }
    }

    #[test]
    fn loss_examples() {
        assert_eq!(triplet_margin_loss(1.0, 0.0, 0.1), 0.0);
        assert_eq!(triplet_margin_loss(0.4, 0.4, 0.1), 0.1);
        assert!((triplet_margin_loss(0.2, 0.25, 0.1) - 0.15).abs() < 1e-15);
        assert_eq!(distill_loss(0.3, 0.3), 0.0);
        assert!((distill_loss(0.5, 0.8) - 0.09).abs() < 1e-15);
        assert_eq!(combined_loss(0.2, 0.25, 9.0, -9.0, 0.1, 0.0), triplet_margin_loss(0.2, 0.25, 0.1));
        assert_eq!(combined_loss(0.9, 0.1, 0.9, 0.1, 0.1, 1.0), 0.0);
        let want = 0.15 + ((0.2f64 - 0.5).powi(2) + (0.25f64 - 0.1).powi(2)) / 2.0;
        assert!((combined_loss(0.2, 0.25, 0.5, 0.1, 0.1, 1.0) - want).abs() < 1e-15);
    }

    #[test]
    fn batch_mean_of_distill() {
        let pairs = [(0.1, 0.3), (0.5, 0.5), (-0.2, 0.4)];
        let mut tape = Tape::new();
        let terms: Vec<Var> = pairs
            .iter()
            .map(|&(s, t)| {
                let sv = tape.constant(vec![], vec![s]).unwrap();
                distill_var(&mut tape, sv, t).unwrap()
            })
            .collect();
        let sum = tape.add_all(&terms).unwrap();
        let mean = tape.scale(sum, 1.0 / 3.0);
        let want = pairs.iter().map(|&(s, t)| distill_loss(s, t)).sum::<f64>() / 3.0;
        assert!((tape.scalar(mean) - want).abs() < 1e-15);
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let m = tiny_model(EncoderMode::Bi, 3);
        let before = m.checksum();
        let (trained, report) = train_full_model(m, &triplets(), &fast(0, 1e-2)).unwrap();
        assert_eq!(trained.checksum(), before);
        assert!(report.epoch_losses.is_empty());
        assert!(train_full_model(tiny_model(EncoderMode::Bi, 3), &[], &fast(1, 1e-2)).is_err());
    }

    #[test]
    fn full_training_reduces_loss_and_is_deterministic() {
        for mode in [EncoderMode::Bi, EncoderMode::Cross] {
            let cfg = TrainConfig { margin: 1.5, ..fast(15, 1e-2) };
            let (a, ra) = train_full_model(tiny_model(mode, 4), &triplets(), &cfg).unwrap();
            let (b, _) = train_full_model(tiny_model(mode, 4), &triplets(), &cfg).unwrap();
            assert_eq!(a.checksum(), b.checksum());
            assert!(ra.epoch_losses.last().unwrap() < ra.epoch_losses.first().unwrap(), "{mode:?} {:?}", ra.epoch_losses);
        }
    }

    #[test]
    fn teacher_cache_round_trip_and_repeatability() {
        let teacher = tiny_model(EncoderMode::Cross, 5);
        let a = score_with_teacher(&teacher, &triplets()).unwrap();
        assert_eq!(a, score_with_teacher(&teacher, &triplets()).unwrap());
        assert_eq!(a.records().len(), 12);
        let back = TeacherScores::parse_tsv(&a.to_tsv()).unwrap();
        for (x, y) in a.records().iter().zip(back.records()) {
            assert_eq!(x.score.to_bits(), y.score.to_bits());
        }
        let mut bad = triplets();
        bad[0].query.push(99);
        assert!(matches!(score_with_teacher(&teacher, &bad), Err(Error::Input(_))));
    }

    #[test]
    fn adapter_training_touches_only_the_adapter() {
        for mode in [EncoderMode::Bi, EncoderMode::Cross] {
            for acfg in [AdapterConfig::houlsby(2), AdapterConfig::lora(2, 4.0)] {
                let teacher = tiny_model(mode, 6);
                let scores = score_with_teacher(&teacher, &triplets()).unwrap();
                let mut student = tiny_model(mode, 7);
                student.freeze_backbone();
                let before = student.checksum();
                let adapter = Adapter::new(&acfg, 8, 1, Some(0), &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
                let a0 = adapter.checksum();
                let (trained, report) = train_adapter(&student, adapter, &triplets(), &scores, &fast(3, 1e-2)).unwrap();
                assert_eq!(student.checksum(), before);
                assert_ne!(trained.checksum(), a0);
                assert_eq!(report.epoch_losses.len(), 3);
            }
        }
    }

    #[test]
    fn adapter_training_errors() {
        let teacher = tiny_model(EncoderMode::Bi, 6);
        let mut scores = score_with_teacher(&teacher, &triplets()).unwrap().records().to_vec();
        scores.retain(|r| !(r.query_id == "q2" && r.doc_id == "n2"));
        let scores = TeacherScores::from_records(scores).unwrap();
        let mut student = tiny_model(EncoderMode::Bi, 7);
        let adapter = Adapter::new(&AdapterConfig::houlsby(2), 8, 1, Some(0), &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
        let err = train_adapter(&student, adapter.clone(), &triplets(), &scores, &fast(1, 1e-2)).unwrap_err();
        assert!(matches!(err, Error::Contract(ref m) if m.contains("frozen")));
        student.freeze_backbone();
        let err = train_adapter(&student, adapter, &triplets(), &scores, &fast(1, 1e-2)).unwrap_err();
        assert!(matches!(err, Error::Contract(ref m) if m.contains("(q2, n2)")), "{err}");
    }

    #[test]
    fn distill_weight_changes_the_adapter() {
        let teacher = tiny_model(EncoderMode::Bi, 6);
        let scores = score_with_teacher(&teacher, &triplets()).unwrap();
        let mut student = tiny_model(EncoderMode::Bi, 7);
        student.freeze_backbone();
        let adapter = Adapter::new(&AdapterConfig::houlsby(2), 8, 1, Some(0), &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
        let run = |lambda| {
            let cfg = TrainConfig { distill_weight: lambda, ..fast(3, 1e-2) };
            train_adapter(&student, adapter.clone(), &triplets(), &scores, &cfg).unwrap().0.checksum()
        };
        assert_ne!(run(0.0), run(1.0));
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::full_model().validate().is_ok());
        assert!(TrainConfig { margin: 0.0, ..TrainConfig::full_model() }.validate().is_err());
        assert!(TrainConfig { batch_size: 0, ..TrainConfig::full_model() }.validate().is_err());
        assert_eq!(TrainConfig::gate().epochs, 10);
        assert_eq!(TrainConfig::adapter().learning_rate, 1e-4);
    }

    #[test]
    fn identical_pair_rejected() {
        let mut t = triplets();
        t[0].negative_id = t[0].positive_id.clone();
        assert!(train_full_model(tiny_model(EncoderMode::Bi, 1), &t, &fast(1, 1e-3)).is_err());
    }

    proptest! {
        #[test]
        fn losses_non_negative(sp in -2.0f64..2.0, sn in -2.0f64..2.0, tp in -2.0f64..2.0, tn in -2.0f64..2.0,
                               m in 0.01f64..1.0, l in 0.0f64..5.0) {
            let c = combined_loss(sp, sn, tp, tn, m, l);
            prop_assert!(c >= 0.0);
            prop_assert!(triplet_margin_loss(sp, sn, m) >= 0.0);
            prop_assert!(distill_loss(sp, tp) >= 0.0);
            let zero = sp - sn >= m && (l == 0.0 || (sp == tp && sn == tn));
            prop_assert_eq!(c == 0.0, zero);
        }
    }
}
