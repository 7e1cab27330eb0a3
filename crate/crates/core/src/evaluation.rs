//! Relevance judgments, run files, ranking metrics and paired significance
//! testing.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use crate::error::{Error, Result};

pub type Judgments = BTreeMap<String, u32>;

static NO_JUDGMENTS: Judgments = BTreeMap::new();

pub const MAP_DEPTH: usize = 100;
pub const MRR_DEPTH: usize = 10;
pub const NDCG_DEPTH: usize = 10;
pub const BASE_ALPHA: f64 = 0.01;

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Qrels {
    map: BTreeMap<String, Judgments>,
}

impl Qrels {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, qid: &str, docid: &str, grade: u32) {
        self.map.entry(qid.to_string()).or_default().insert(docid.to_string(), grade);
    }

    pub fn judgments(&self, qid: &str) -> &Judgments {
        self.map.get(qid).unwrap_or(&NO_JUDGMENTS)
    }

    pub fn grade(&self, qid: &str, docid: &str) -> u32 {
        self.judgments(qid).get(docid).copied().unwrap_or(0)
    }

    /// Documents with a positive grade.
    pub fn relevant<'a>(&'a self, qid: &str) -> impl Iterator<Item = &'a str> + 'a {
        self.judgments(qid).iter().filter(|(_, &g)| g > 0).map(|(d, _)| d.as_str())
    }

    pub fn queries(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(|s| s.as_str())
    }

    pub fn contains_query(&self, qid: &str) -> bool {
        self.map.contains_key(qid)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str, u32)> {
        self.map
            .iter()
            .flat_map(|(q, j)| j.iter().map(move |(d, &g)| (q.as_str(), d.as_str(), g)))
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Keeps only the listed queries.
    pub fn restrict<'a>(&self, qids: impl IntoIterator<Item = &'a str>) -> Qrels {
        let keep: BTreeSet<&str> = qids.into_iter().collect();
        Qrels { map: self.map.iter().filter(|(q, _)| keep.contains(q.as_str())).map(|(q, j)| (q.clone(), j.clone())).collect() }
    }

    pub fn parse_trec(text: &str) -> Result<Self> {
        let mut q = Qrels::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.len() != 4 {
                return Err(Error::Parse { line: i + 1, msg: format!("qrels line needs 4 fields, got {}", f.len()) });
            }
            let grade: u32 = f[3]
                .parse()
                .map_err(|_| Error::Parse { line: i + 1, msg: format!("bad grade {:?}", f[3]) })?;
            q.insert(f[0], f[2], grade);
        }
        Ok(q)
    }

    pub fn to_trec(&self) -> String {
        let mut out = String::new();
        for (q, d, g) in self.iter() {
            let _ = writeln!(out, "{q} 0 {d} {g}");
        }
        out
    }
}

pub fn average_precision_at<S: AsRef<str>>(ranking: &[S], judgments: &Judgments, k: usize) -> f64 {
    let total = judgments.values().filter(|&&g| g > 0).count();
    let denom = total.min(k);
    if denom == 0 {
        return 0.0;
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (i, d) in ranking.iter().take(k).enumerate() {
        if judgments.get(d.as_ref()).copied().unwrap_or(0) > 0 {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    sum / denom as f64
}

pub fn reciprocal_rank_at<S: AsRef<str>>(ranking: &[S], judgments: &Judgments, k: usize) -> f64 {
    ranking
        .iter()
        .take(k)
        .position(|d| judgments.get(d.as_ref()).copied().unwrap_or(0) > 0)
        .map_or(0.0, |i| 1.0 / (i + 1) as f64)
}

fn discount(rank0: usize) -> f64 {
    1.0 / ((rank0 + 2) as f64).log2()
}

pub fn ndcg_at<S: AsRef<str>>(ranking: &[S], judgments: &Judgments, k: usize) -> f64 {
    let mut ideal: Vec<u32> = judgments.values().copied().filter(|&g| g > 0).collect();
    ideal.sort_unstable_by(|a, b| b.cmp(a));
    let idcg: f64 = ideal.iter().take(k).enumerate().map(|(i, &g)| g as f64 * discount(i)).sum();
    if idcg == 0.0 {
        return 0.0;
    }
    let dcg: f64 = ranking
        .iter()
        .take(k)
        .enumerate()
        .map(|(i, d)| judgments.get(d.as_ref()).copied().unwrap_or(0) as f64 * discount(i))
        .sum();
    dcg / idcg
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Metric {
    Map,
    Mrr,
    Ndcg,
}

impl Metric {
    pub const ALL: [Metric; 3] = [Metric::Map, Metric::Mrr, Metric::Ndcg];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Map => "MAP@100",
            Metric::Mrr => "MRR@10",
            Metric::Ndcg => "NDCG@10",
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct MetricTriple {
    pub map: f64,
    pub mrr: f64,
    pub ndcg: f64,
}

impl MetricTriple {
    pub fn of<S: AsRef<str>>(ranking: &[S], judgments: &Judgments) -> Self {
        MetricTriple {
            map: average_precision_at(ranking, judgments, MAP_DEPTH),
            mrr: reciprocal_rank_at(ranking, judgments, MRR_DEPTH),
            ndcg: ndcg_at(ranking, judgments, NDCG_DEPTH),
        }
    }

    pub fn get(&self, m: Metric) -> f64 {
        match m {
            Metric::Map => self.map,
            Metric::Mrr => self.mrr,
            Metric::Ndcg => self.ndcg,
        }
    }

    pub fn mean<'a>(items: impl IntoIterator<Item = &'a MetricTriple>) -> MetricTriple {
        let mut n = 0usize;
        let mut acc = MetricTriple::default();
        for t in items {
            n += 1;
            acc.map += t.map;
            acc.mrr += t.mrr;
            acc.ndcg += t.ndcg;
        }
        if n == 0 {
            return acc;
        }
        let n = n as f64;
        MetricTriple { map: acc.map / n, mrr: acc.mrr / n, ndcg: acc.ndcg / n }
    }
}

/// Ranked result lists keyed by query id, best first.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Run {
    pub tag: String,
    pub lists: BTreeMap<String, Vec<(String, f64)>>,
}

impl Run {
    pub fn new(tag: impl Into<String>) -> Self {
        Run { tag: tag.into(), lists: BTreeMap::new() }
    }

    pub fn insert(&mut self, qid: impl Into<String>, ranked: Vec<(String, f64)>) {
        self.lists.insert(qid.into(), ranked);
    }

    pub fn ranking(&self, qid: &str) -> Vec<&str> {
        self.lists.get(qid).map(|l| l.iter().map(|(d, _)| d.as_str()).collect()).unwrap_or_default()
    }

    /// TREC format `qid Q0 docid rank score tag`, queries in id order.
    pub fn to_trec(&self) -> String {
        let mut out = String::new();
        for (q, list) in &self.lists {
            for (i, (d, s)) in list.iter().enumerate() {
                let _ = writeln!(out, "{q} Q0 {d} {} {s:.6} {}", i + 1, self.tag);
            }
        }
        out
    }

    pub fn parse_trec(text: &str) -> Result<Self> {
        let mut rows: BTreeMap<String, Vec<(usize, String, f64)>> = BTreeMap::new();
        let mut tag = String::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let bad = |msg: String| Error::Parse { line: i + 1, msg };
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.len() != 6 {
                return Err(bad(format!("run line needs 6 fields, got {}", f.len())));
            }
            let rank: usize = f[3].parse().map_err(|_| bad(format!("bad rank {:?}", f[3])))?;
            let score: f64 = f[4].parse().map_err(|_| bad(format!("bad score {:?}", f[4])))?;
            if !score.is_finite() {
                return Err(bad("non-finite score".into()));
            }
            tag = f[5].to_string();
            rows.entry(f[0].to_string()).or_default().push((rank, f[2].to_string(), score));
        }
        let mut run = Run::new(tag);
        for (q, mut r) in rows {
            r.sort_by(|a, b| a.0.cmp(&b.0).then_with(|| a.1.cmp(&b.1)));
            let mut seen = BTreeSet::new();
            for (_, d, _) in &r {
                if !seen.insert(d.clone()) {
                    return Err(Error::input(format!("run lists {d} twice for query {q}")));
                }
            }
            run.insert(q, r.into_iter().map(|(_, d, s)| (d, s)).collect());
        }
        Ok(run)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub per_query: BTreeMap<String, MetricTriple>,
    pub mean: MetricTriple,
}

impl Evaluation {
    pub fn values(&self, m: Metric) -> Vec<f64> {
        self.per_query.values().map(|t| t.get(m)).collect()
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::from("qid\tMAP@100\tMRR@10\tNDCG@10\n");
        for (q, t) in &self.per_query {
            let _ = writeln!(out, "{q}\t{:.6}\t{:.6}\t{:.6}", t.map, t.mrr, t.ndcg);
        }
        let _ = writeln!(out, "all\t{:.6}\t{:.6}\t{:.6}", self.mean.map, self.mean.mrr, self.mean.ndcg);
        out
    }
}

/// Scores every judged query; judged queries absent from the run score 0.
pub fn evaluate_run(run: &Run, qrels: &Qrels) -> Result<Evaluation> {
    let stray: Vec<&str> = run.lists.keys().filter(|q| !qrels.contains_query(q)).map(|s| s.as_str()).collect();
    if !stray.is_empty() {
        return Err(Error::input(format!("run queries without judgments: {}", stray.join(", "))));
    }
    let per_query: BTreeMap<String, MetricTriple> = qrels
        .queries()
        .map(|q| (q.to_string(), MetricTriple::of(&run.ranking(q), qrels.judgments(q))))
        .collect();
    let mean = MetricTriple::mean(per_query.values());
    Ok(Evaluation { per_query, mean })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub label: String,
    pub n: usize,
    pub mean_diff: f64,
    pub t: f64,
    pub p: f64,
    pub alpha: f64,
    pub significant: bool,
    /// Zero variance with a nonzero mean difference.
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SignificanceReport {
    pub base_alpha: f64,
    pub comparisons: Vec<Comparison>,
}

impl SignificanceReport {
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("comparison\tn\tmean_diff\tt\tp\talpha\tsignificant\tdegenerate\n");
        for c in &self.comparisons {
            let _ = writeln!(
                out,
                "{}\t{}\t{:.6}\t{:.6}\t{:.6e}\t{:.6e}\t{}\t{}",
                c.label, c.n, c.mean_diff, c.t, c.p, c.alpha, c.significant, c.degenerate
            );
        }
        out
    }
}

/// Two-sided paired Student's t-test of `a − b` at `0.01 / m`.
pub fn paired_ttest_bonferroni(a: &[f64], b: &[f64], m: usize) -> Result<Comparison> {
    if a.len() != b.len() {
        return Err(Error::contract(format!("paired samples differ in length: {} vs {}", a.len(), b.len())));
    }
    if a.len() < 2 {
        return Err(Error::contract("paired t-test needs at least 2 pairs"));
    }
    if m == 0 {
        return Err(Error::contract("number of comparisons must be ≥ 1"));
    }
    let n = a.len();
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = d.iter().sum::<f64>() / n as f64;
    let var = d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let sd = var.sqrt();
    let alpha = BASE_ALPHA / m as f64;
    let (t, p, degenerate) = if sd == 0.0 || !sd.is_finite() {
        if mean == 0.0 {
            (0.0, 1.0, false)
        } else {
            (mean.signum() * f64::INFINITY, 0.0, true)
        }
    } else {
        let t = mean / (sd / (n as f64).sqrt());
        (t, student_t_two_sided_p(t, (n - 1) as f64), false)
    };
    Ok(Comparison { label: String::new(), n, mean_diff: mean, t, p, alpha, significant: p < alpha, degenerate })
}

/// P(|T| ≥ |t|) for Student's t with `df` degrees of freedom.
pub fn student_t_two_sided_p(t: f64, df: f64) -> f64 {
    if !t.is_finite() {
        return 0.0;
    }
    let x = df / (df + t * t);
    regularized_incomplete_beta(x, df / 2.0, 0.5).clamp(0.0, 1.0)
}

/// I_x(a, b) via the Lentz continued fraction.
pub fn regularized_incomplete_beta(x: f64, a: f64, b: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    let front = ln_front.exp();
    if x < (a + 1.0) / (a + b + 2.0) {
        front * beta_continued_fraction(x, a, b) / a
    } else {
        1.0 - front * beta_continued_fraction(1.0 - x, b, a) / b
    }
}

fn beta_continued_fraction(x: f64, a: f64, b: f64) -> f64 {
    const TINY: f64 = 1e-300;
    const EPS: f64 = 1e-16;
    let qab = a + b;
    let qap = a + 1.0;
    let qam = a - 1.0;
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=10_000 {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < EPS {
            break;
        }
    }
    h
}

/// Lanczos approximation (g = 7, 9 terms).
pub fn ln_gamma(x: f64) -> f64 {
    const G: f64 = 7.0;
    const COEF: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut acc = COEF[0];
    for (i, &c) in COEF.iter().enumerate().skip(1) {
        acc += c / (x + i as f64);
    }
    let t = x + G + 0.5;
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + acc.ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn judg(rel: &[&str]) -> Judgments {
        rel.iter().map(|d| (d.to_string(), 1)).collect()
    }

    #[test]
    fn average_precision_examples() {
        let j = judg(&["a", "b"]);
        assert_eq!(average_precision_at(&["a", "b", "c"], &j, 100), 1.0);
        assert_eq!(average_precision_at(&["x", "a"], &judg(&["a"]), 100), 0.5);
        let ap = average_precision_at(&["a", "x", "b"], &j, 100);
        assert!((ap - 0.8333333333333334).abs() < 1e-15);
        assert_eq!(average_precision_at(&["a"], &Judgments::new(), 100), 0.0);
    }

    #[test]
    fn reciprocal_rank_examples() {
        let j = judg(&["r"]);
        assert_eq!(reciprocal_rank_at(&["r"], &j, 10), 1.0);
        assert_eq!(reciprocal_rank_at(&["x", "y", "r"], &j, 10), 1.0 / 3.0);
        let mut long: Vec<String> = (0..10).map(|i| format!("x{i}")).collect();
        long.push("r".into());
        assert_eq!(reciprocal_rank_at(&long, &j, 10), 0.0);
    }

    #[test]
    fn ndcg_examples() {
        let j = judg(&["a", "b"]);
        assert_eq!(ndcg_at(&["a", "b", "x"], &j, 10), 1.0);
        let v = ndcg_at(&["x", "a"], &judg(&["a"]), 10);
        assert!((v - 1.0 / 3f64.log2()).abs() < 1e-15);
        assert_eq!(ndcg_at(&["a"], &Judgments::new(), 10), 0.0);
    }

    #[test]
    fn evaluate_two_query_toy() {
        let mut q = Qrels::new();
        q.insert("q1", "a", 1);
        q.insert("q1", "b", 1);
        q.insert("q2", "c", 1);
        let mut run = Run::new("toy");
        run.insert("q1", vec![("a".into(), 3.0), ("x".into(), 2.0), ("b".into(), 1.0)]);
        run.insert("q2", vec![("y".into(), 2.0), ("c".into(), 1.0)]);
        let e = evaluate_run(&run, &q).unwrap();
        let q1 = e.per_query["q1"];
        let q2 = e.per_query["q2"];
        assert!((q1.map - 5.0 / 6.0).abs() < 1e-15);
        assert_eq!(q2.mrr, 0.5);
        assert_eq!(e.mean.map, (q1.map + q2.map) / 2.0);
        let text = run.to_trec();
        let back = Run::parse_trec(&text).unwrap();
        assert_eq!(evaluate_run(&back, &q).unwrap().to_tsv(), e.to_tsv());
    }

    #[test]
    fn missing_query_scores_zero_and_stray_rejected() {
        let mut q = Qrels::new();
        q.insert("q1", "a", 1);
        let e = evaluate_run(&Run::new("t"), &q).unwrap();
        assert_eq!(e.mean, MetricTriple::default());
        let mut run = Run::new("t");
        run.insert("zz", vec![]);
        assert!(evaluate_run(&run, &q).is_err());
    }

    #[test]
    fn malformed_run_line_reports_line() {
        let err = Run::parse_trec("q Q0 d 1 0.5 t\nq Q0 d2 x 0.4 t\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
    }

    #[test]
    fn qrels_round_trip() {
        let q = Qrels::parse_trec("q1 0 d1 1\nq1 0 d2 0\nq2 0 d3 2\n").unwrap();
        assert_eq!(Qrels::parse_trec(&q.to_trec()).unwrap(), q);
        assert_eq!(q.relevant("q1").collect::<Vec<_>>(), vec!["d1"]);
        assert!(Qrels::parse_trec("q1 0 d1").is_err());
    }

    #[test]
    fn ttest_identical_and_symmetric_differences() {
        let a = [0.3, 0.5, 0.7];
        let c = paired_ttest_bonferroni(&a, &a, 1).unwrap();
        assert_eq!((c.t, c.p, c.significant), (0.0, 1.0, false));
        let c = paired_ttest_bonferroni(&[1.0, -1.0, 1.0, -1.0], &[0.0; 4], 1).unwrap();
        assert_eq!(c.t, 0.0);
        assert!((c.p - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ttest_degenerate_cases() {
        let c = paired_ttest_bonferroni(&[1.0, 1.0], &[0.5, 0.5], 4).unwrap();
        assert!(c.degenerate && c.significant && c.p == 0.0);
        assert_eq!(c.alpha, 0.0025);
        assert!(paired_ttest_bonferroni(&[1.0], &[0.0], 1).is_err());
        assert!(paired_ttest_bonferroni(&[1.0, 2.0], &[0.0], 1).is_err());
    }

    #[test]
    fn ln_gamma_known_values() {
        assert!(ln_gamma(1.0).abs() < 1e-14);
        assert!((ln_gamma(0.5) - std::f64::consts::PI.sqrt().ln()).abs() < 1e-14);
        assert!((ln_gamma(10.0) - 362880f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn t_distribution_closed_forms() {
        // df = 1 is Cauchy: p = 1 − 2·atan(|t|)/π.
        for t in [0.1, 1.0, 3.0, 20.0] {
            let want = 1.0 - 2.0 * f64::atan(t) / std::f64::consts::PI;
            assert!((student_t_two_sided_p(t, 1.0) - want).abs() < 1e-12);
        }
        // df = 2: p = 1 − |t|/√(2 + t²).
        for t in [0.5f64, 2.0, 7.0] {
            let want = 1.0 - t / (2.0 + t * t).sqrt();
            assert!((student_t_two_sided_p(t, 2.0) - want).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn metrics_are_bounded(
            rel in proptest::collection::btree_set(0u8..30, 0..8),
            order in Just((0u8..30).collect::<Vec<_>>()).prop_shuffle(),
            k in 1usize..40,
        ) {
            let j: Judgments = rel.iter().map(|d| (d.to_string(), 1)).collect();
            let ranking: Vec<String> = order.iter().map(|d| d.to_string()).collect();
            for v in [
                average_precision_at(&ranking, &j, k),
                reciprocal_rank_at(&ranking, &j, k),
                ndcg_at(&ranking, &j, k),
            ] {
                prop_assert!((0.0..=1.0 + 1e-12).contains(&v));
            }
        }

        #[test]
        fn ttest_swap_negates_t(
            pairs in proptest::collection::vec((0.0f64..1.0, 0.0f64..1.0), 2..30),
        ) {
            let a: Vec<f64> = pairs.iter().map(|p| p.0).collect();
            let b: Vec<f64> = pairs.iter().map(|p| p.1).collect();
            let x = paired_ttest_bonferroni(&a, &b, 3).unwrap();
            let y = paired_ttest_bonferroni(&b, &a, 3).unwrap();
            prop_assert!((x.t + y.t).abs() <= 1e-9 * x.t.abs().max(1.0));
            prop_assert!((x.p - y.p).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&x.p));
        }
    }
}
