//! Query-only domain classifier: the shared encoder with a gating adapter and
//! a linear head, trained with cross-entropy and routed by argmax.

use rand::Rng;

use crate::adapters::{Adapter, AdapterConfig};
use crate::container::{Container, ContentKind};
use crate::distillation::{fit, TrainConfig, TrainReport};
use crate::encoder::EncoderModel;
use crate::error::{Error, Result};
use crate::numerics::{Parameterized, Tape, Tensor, Var};

const GATE_VERSION: u64 = 1;

#[derive(Debug, Clone)]
pub struct GateModel {
    pub adapter: Adapter,
    /// `[N × hidden]`.
    pub weight: Tensor,
    /// `[N]`.
    pub bias: Tensor,
    pub domains: Vec<String>,
}

impl GateModel {
    pub fn new<R: Rng>(
        encoder: &EncoderModel,
        adapter: &AdapterConfig,
        domains: Vec<String>,
        rng: &mut R,
    ) -> Result<Self> {
        let n = domains.len();
        if n == 0 {
            return Err(Error::config("gate needs at least one domain"));
        }
        let d = encoder.config.hidden_dim;
        let adapter = Adapter::new(adapter, d, encoder.config.num_layers, None, rng)?;
        Ok(GateModel {
            adapter,
            weight: Tensor::glorot(&[n, d], d, n, rng).trainable(),
            bias: Tensor::zeros(&[n]).trainable(),
            domains,
        })
    }

    pub fn num_domains(&self) -> usize {
        self.domains.len()
    }

    fn check(&self, encoder: &EncoderModel) -> Result<()> {
        let n = self.domains.len();
        if n == 0 {
            return Err(Error::config("gate has no domains"));
        }
        if self.weight.shape() != [n, encoder.config.hidden_dim] || self.bias.shape() != [n] {
            return Err(Error::shape(format!(
                "gate head {:?}/{:?} does not fit {n} domains at hidden {}",
                self.weight.shape(),
                self.bias.shape(),
                encoder.config.hidden_dim
            )));
        }
        Ok(())
    }

    pub fn logits_var<'p>(&'p self, tape: &mut Tape<'p>, encoder: &'p EncoderModel, query: &[u32]) -> Result<Var> {
        self.check(encoder)?;
        let (pooled, _) = encoder.encode_var(tape, query, Some(&self.adapter))?;
        let x = tape.reshape(pooled, vec![1, encoder.config.hidden_dim])?;
        let (w, b) = (tape.input(&self.weight), tape.input(&self.bias));
        let logits = tape.linear(x, w, Some(b))?;
        tape.reshape(logits, vec![self.domains.len()])
    }

    pub fn logits(&self, encoder: &EncoderModel, query: &[u32]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let v = self.logits_var(&mut tape, encoder, query)?;
        Ok(tape.value(v).to_vec())
    }

    /// `P(d_n | q)` for every domain.
    pub fn gate_probs(&self, encoder: &EncoderModel, query: &[u32]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let v = self.logits_var(&mut tape, encoder, query)?;
        let p = tape.softmax(v)?;
        Ok(tape.value(p).to_vec())
    }

    /// Top-1 domain; ties go to the lowest id.
    pub fn route(&self, encoder: &EncoderModel, query: &[u32]) -> Result<u32> {
        Ok(argmax(&self.gate_probs(encoder, query)?))
    }

    /// Adapter header and records, then the head, with domain names in the
    /// string table.
    pub fn to_container(&self) -> Container {
        let inner = self.adapter.to_container();
        let mut c = Container::new(ContentKind::Gate);
        c.header = vec![GATE_VERSION, self.domains.len() as u64];
        c.header.extend(inner.header);
        c.strings = self.domains.clone();
        c.records = inner.records;
        c.push_tensor("head.w", &self.weight);
        c.push_tensor("head.b", &self.bias);
        c
    }

    pub fn from_container(c: Container) -> Result<Self> {
        let c = c.expect_kind(ContentKind::Gate)?;
        if c.header_at(0)? != GATE_VERSION {
            return Err(Error::format("unsupported gate version"));
        }
        let n = c.header_at(1)? as usize;
        if c.strings.len() != n || n == 0 || c.records.len() < 2 {
            return Err(Error::format("gate bundle domain table or head missing"));
        }
        let mut records = c.records;
        let bias = records.pop().expect("checked length");
        let weight = records.pop().expect("checked length");
        if weight.name != "head.w" || bias.name != "head.b" {
            return Err(Error::format("gate bundle lacks head.w/head.b"));
        }
        let inner = Container { kind: ContentKind::Adapter, header: c.header[2..].to_vec(), strings: Vec::new(), records };
        let adapter = Adapter::from_container(&inner)?;
        if weight.dims != [n, adapter.hidden] || bias.dims != [n] {
            return Err(Error::format("gate head dimensions do not match the domain table"));
        }
        Ok(GateModel {
            adapter,
            weight: weight.to_tensor()?.trainable(),
            bias: bias.to_tensor()?.trainable(),
            domains: c.strings,
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.to_container().to_bytes()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::from_container(Container::from_bytes(bytes)?)
    }
}

impl Parameterized for GateModel {
    fn params(&self) -> Vec<&Tensor> {
        let mut p = self.adapter.params();
        p.push(&self.weight);
        p.push(&self.bias);
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p = self.adapter.params_mut();
        p.push(&mut self.weight);
        p.push(&mut self.bias);
        p
    }
}

pub fn argmax(values: &[f64]) -> u32 {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best as u32
}

#[derive(Debug, Clone, PartialEq)]
pub struct GateTraining {
    pub report: TrainReport,
    pub warnings: Vec<String>,
}

/// Cross-entropy training of the gating adapter and head on
/// `(query tokens, domain id)` pairs over a frozen backbone.
pub fn train_gate(
    encoder: &EncoderModel,
    gate: &mut GateModel,
    examples: &[(Vec<u32>, u32)],
    cfg: &TrainConfig,
) -> Result<GateTraining> {
    if !encoder.is_frozen() || encoder.trainable_count() != 0 {
        return Err(Error::contract("gate training needs a frozen backbone"));
    }
    gate.check(encoder)?;
    let n = gate.num_domains();
    if let Some((_, d)) = examples.iter().find(|(_, d)| *d as usize >= n) {
        return Err(Error::input(format!("domain label {d} outside 0..{n}")));
    }
    let mut warnings = Vec::new();
    for d in 0..n as u32 {
        if !examples.iter().any(|(_, l)| *l == d) {
            warnings.push(format!("no training queries for domain {} ({d}); it may never be predicted", gate.domains[d as usize]));
        }
    }
    if examples.is_empty() {
        return Ok(GateTraining { report: TrainReport::default(), warnings });
    }
    let report = fit(gate, examples.len(), cfg, |g, i, w| {
        let mut tape = Tape::new();
        let (tokens, label) = &examples[i];
        let logits = g.logits_var(&mut tape, encoder, tokens)?;
        let loss = tape.cross_entropy(logits, *label as usize)?;
        let value = tape.scalar(loss);
        let scaled = tape.scale(loss, w);
        Ok((value, tape.backward(scaled)?))
    })?;
    Ok(GateTraining { report, warnings })
}

/// Uniform draw over `0..n`.
pub fn random_route<R: Rng>(n: usize, rng: &mut R) -> Result<u32> {
    if n == 0 {
        return Err(Error::config("random routing over zero domains"));
    }
    Ok(rng.gen_range(0..n) as u32)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GateMetrics {
    pub accuracy: f64,
    /// Correct-in-domain over predicted-in-domain; 0 when never predicted.
    pub precision: Vec<f64>,
}

pub fn gate_metrics(predictions: &[u32], gold: &[u32], num_domains: usize) -> Result<GateMetrics> {
    if predictions.len() != gold.len() {
        return Err(Error::contract("predictions and gold labels differ in length"));
    }
    if predictions.is_empty() {
        return Err(Error::contract("gate metrics over an empty set"));
    }
    let mut predicted = vec![0usize; num_domains];
    let mut correct = vec![0usize; num_domains];
    for (&p, &g) in predictions.iter().zip(gold) {
        if p as usize >= num_domains || g as usize >= num_domains {
            return Err(Error::input(format!("domain id outside 0..{num_domains}")));
        }
        predicted[p as usize] += 1;
        if p == g {
            correct[p as usize] += 1;
        }
    }
    let hits: usize = correct.iter().sum();
    Ok(GateMetrics {
        accuracy: hits as f64 / predictions.len() as f64,
        precision: predicted
            .iter()
            .zip(&correct)
            .map(|(&p, &c)| if p == 0 { 0.0 } else { c as f64 / p as f64 })
            .collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{EncoderConfig, EncoderMode};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn encoder() -> EncoderModel {
        let cfg = EncoderConfig { vocab_size: 20, hidden_dim: 8, num_layers: 1, num_heads: 2, ffn_dim: 16, max_seq_len: 8, mode: EncoderMode::Bi };
        let mut m = EncoderModel::new(cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        m.freeze_backbone();
        m
    }

    fn gate(enc: &EncoderModel, n: usize) -> GateModel {
        let names = (0..n).map(|i| format!("d{i}")).collect();
        GateModel::new(enc, &AdapterConfig::houlsby(2), names, &mut ChaCha8Rng::seed_from_u64(2)).unwrap()
    }

    #[test]
    fn zero_head_is_uniform_and_routes_to_zero() {
        let enc = encoder();
        let mut g = gate(&enc, 4);
        g.weight.data_mut().fill(0.0);
        let p = g.gate_probs(&enc, &[3, 4, 5]).unwrap();
        assert!(p.iter().all(|&x| (x - 0.25).abs() < 1e-15));
        assert_eq!(g.route(&enc, &[3, 4, 5]).unwrap(), 0);
    }

    #[test]
    fn probabilities_sum_to_one_and_route_is_shift_invariant() {
        let enc = encoder();
        let mut g = gate(&enc, 3);
        let p = g.gate_probs(&enc, &[7, 8]).unwrap();
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let r = g.route(&enc, &[7, 8]).unwrap();
        g.bias.data_mut().iter_mut().for_each(|b| *b += 3.7);
        assert_eq!(g.route(&enc, &[7, 8]).unwrap(), r);
        assert_eq!(argmax(&[0.1, 0.7, 0.2]), 1);
        assert!(GateModel::new(&enc, &AdapterConfig::houlsby(2), vec![], &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn training_separates_disjoint_tokens_and_leaves_backbone() {
        let enc = encoder();
        let mut g = gate(&enc, 2);
        let examples: Vec<(Vec<u32>, u32)> =
            (0..16).map(|i| if i % 2 == 0 { (vec![3 + (i % 4) as u32, 4], 0) } else { (vec![12 + (i % 4) as u32, 13], 1) }).collect();
        let before = enc.checksum();
        let cfg = TrainConfig { epochs: 30, batch_size: 4, learning_rate: 1e-2, ..TrainConfig::gate() };
        let out = train_gate(&enc, &mut g, &examples, &cfg).unwrap();
        assert!(out.warnings.is_empty());
        assert_eq!(enc.checksum(), before);
        let l = &out.report.epoch_losses;
        assert!(l.last().unwrap() < &(l[0] * 0.5), "{l:?}");
        let pred: Vec<u32> = examples.iter().map(|(q, _)| g.route(&enc, q).unwrap()).collect();
        let gold: Vec<u32> = examples.iter().map(|e| e.1).collect();
        assert_eq!(gate_metrics(&pred, &gold, 2).unwrap().accuracy, 1.0);
    }

    #[test]
    fn single_domain_and_missing_domain() {
        let enc = encoder();
        let mut g = gate(&enc, 1);
        let cfg = TrainConfig { epochs: 2, batch_size: 2, learning_rate: 1e-2, ..TrainConfig::gate() };
        train_gate(&enc, &mut g, &[(vec![3], 0), (vec![5], 0)], &cfg).unwrap();
        assert_eq!(g.route(&enc, &[9]).unwrap(), 0);
        let mut g = gate(&enc, 3);
        let out = train_gate(&enc, &mut g, &[(vec![3], 0), (vec![5], 1)], &cfg).unwrap();
        assert_eq!(out.warnings.len(), 1);
        assert!(out.warnings[0].contains("d2"));
    }

    #[test]
    fn random_route_properties() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        assert!((0..50).all(|_| random_route(1, &mut rng).unwrap() == 0));
        let mut counts = [0usize; 4];
        for _ in 0..10_000 {
            counts[random_route(4, &mut rng).unwrap() as usize] += 1;
        }
        assert!(counts.iter().all(|&c| (c as f64 / 10_000.0 - 0.25).abs() < 0.05));
        let a: Vec<u32> = (0..20).map(|_| random_route(4, &mut ChaCha8Rng::seed_from_u64(3)).unwrap()).collect();
        let mut r1 = ChaCha8Rng::seed_from_u64(3);
        let mut r2 = ChaCha8Rng::seed_from_u64(3);
        let s1: Vec<u32> = (0..20).map(|_| random_route(4, &mut r1).unwrap()).collect();
        let s2: Vec<u32> = (0..20).map(|_| random_route(4, &mut r2).unwrap()).collect();
        assert_eq!(s1, s2);
        assert!(a.iter().all(|&x| x == a[0]));
        assert!(random_route(0, &mut rng).is_err());
    }

    #[test]
    fn metrics_examples() {
        let m = gate_metrics(&[0, 1, 2], &[0, 1, 2], 3).unwrap();
        assert_eq!(m.accuracy, 1.0);
        assert!(m.precision.iter().all(|&p| p == 1.0));
        assert_eq!(gate_metrics(&[1, 0], &[0, 1], 2).unwrap().accuracy, 0.0);
        let m = gate_metrics(&[0, 1, 1, 1], &[0, 0, 1, 1], 2).unwrap();
        assert_eq!(m.accuracy, 0.75);
        assert_eq!(m.precision, vec![1.0, 2.0 / 3.0]);
        assert!(gate_metrics(&[], &[], 2).is_err());
    }

    #[test]
    fn bundle_round_trip() {
        let enc = encoder();
        let g = gate(&enc, 3);
        let bytes = g.to_bytes().unwrap();
        let back = GateModel::from_bytes(&bytes).unwrap();
        assert_eq!(back.domains, g.domains);
        assert_eq!(back.checksum(), g.checksum());
        assert_eq!(back.to_bytes().unwrap(), bytes);
        assert_eq!(back.gate_probs(&enc, &[3, 4]).unwrap(), g.gate_probs(&enc, &[3, 4]).unwrap());
    }
}
