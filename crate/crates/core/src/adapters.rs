//! Parameter-efficient domain modules: Houlsby bottleneck adapters and LoRA
//! low-rank deltas, plus the registry that holds one per domain.
//!
//! Houlsby slots sit after the attention sublayer and after the FFN sublayer
//! of every layer (slot `2·layer` and `2·layer + 1`). LoRA targets the query
//! and value projections of every layer (target `2·layer` and `2·layer + 1`).
//! Both start as exact identities: Houlsby `up = 0`, LoRA `B = 0`.

use std::str::FromStr;

use rand::Rng;

use crate::container::{ContentKind, Container};
use crate::error::{Error, Result};
use crate::numerics::{Parameterized, Tape, Tensor, Var};

/// Header sentinel for "no domain" (the gate adapter).
const NO_DOMAIN: u64 = u64::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum AdapterKind {
    Houlsby = 0,
    Lora = 1,
}

impl FromStr for AdapterKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "houlsby" => Ok(AdapterKind::Houlsby),
            "lora" => Ok(AdapterKind::Lora),
            other => Err(Error::config(format!("unknown adapter kind {other:?}"))),
        }
    }
}

impl AdapterKind {
    pub fn name(self) -> &'static str {
        match self {
            AdapterKind::Houlsby => "houlsby",
            AdapterKind::Lora => "lora",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdapterConfig {
    pub kind: AdapterKind,
    pub reduction_factor: usize,
    pub rank: usize,
    pub alpha: f64,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        AdapterConfig { kind: AdapterKind::Houlsby, reduction_factor: 4, rank: 8, alpha: 16.0 }
    }
}

impl AdapterConfig {
    pub fn houlsby(reduction_factor: usize) -> Self {
        AdapterConfig { kind: AdapterKind::Houlsby, reduction_factor, ..Default::default() }
    }

    pub fn lora(rank: usize, alpha: f64) -> Self {
        AdapterConfig { kind: AdapterKind::Lora, rank, alpha, ..Default::default() }
    }
}

/// One bottleneck: `x + gelu(x·down + down_bias)·up + up_bias`.
#[derive(Debug, Clone)]
pub struct HoulsbySlot {
    pub down: Tensor,
    pub down_bias: Tensor,
    pub up: Tensor,
    pub up_bias: Tensor,
}

impl HoulsbySlot {
    fn new<R: Rng>(hidden: usize, bottleneck: usize, rng: &mut R) -> Self {
        HoulsbySlot {
            down: Tensor::glorot(&[hidden, bottleneck], hidden, bottleneck, rng).trainable(),
            down_bias: Tensor::zeros(&[bottleneck]).trainable(),
            up: Tensor::zeros(&[bottleneck, hidden]).trainable(),
            up_bias: Tensor::zeros(&[hidden]).trainable(),
        }
    }

    pub fn hidden(&self) -> usize {
        self.down.shape()[0]
    }

    /// Applies the slot to every row of `x` (`[rows × hidden]`).
    pub fn forward<'p>(&'p self, tape: &mut Tape<'p>, x: Var) -> Result<Var> {
        let down = tape.input(&self.down);
        let down_bias = tape.input(&self.down_bias);
        let up = tape.input(&self.up);
        let up_bias = tape.input(&self.up_bias);
        let h = tape.matmul(x, down)?;
        let h = tape.add_bias(h, down_bias)?;
        let h = tape.gelu(h);
        let h = tape.matmul(h, up)?;
        let h = tape.add_bias(h, up_bias)?;
        tape.add(x, h)
    }

    fn tensors(&self) -> [&Tensor; 4] {
        [&self.down, &self.down_bias, &self.up, &self.up_bias]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor; 4] {
        [&mut self.down, &mut self.down_bias, &mut self.up, &mut self.up_bias]
    }
}

/// Eager single-vector Houlsby transform.
pub fn houlsby_forward(slot: &HoulsbySlot, x: &Tensor) -> Result<Tensor> {
    if x.len() != slot.hidden() {
        return Err(Error::shape(format!(
            "adapter slot of width {} applied to input of shape {:?}",
            slot.hidden(),
            x.shape()
        )));
    }
    let mut tape = Tape::new();
    let xv = tape.input(x);
    let xv = tape.reshape(xv, vec![1, x.len()])?;
    let y = slot.forward(&mut tape, xv)?;
    Ok(Tensor::vector(tape.value(y).to_vec()))
}

#[derive(Debug, Clone)]
pub struct HoulsbyAdapter {
    pub reduction_factor: usize,
    pub slots: Vec<HoulsbySlot>,
}

/// Low-rank factors for one `[out × in]` weight: `delta = B·A`.
#[derive(Debug, Clone)]
pub struct LoraPair {
    pub a: Tensor,
    pub b: Tensor,
}

impl LoraPair {
    fn new<R: Rng>(out_dim: usize, in_dim: usize, rank: usize, rng: &mut R) -> Self {
        LoraPair {
            a: Tensor::glorot(&[rank, in_dim], in_dim, rank, rng).trainable(),
            b: Tensor::zeros(&[out_dim, rank]).trainable(),
        }
    }

    /// `base + scale·B·A` on the tape; `base` is only read.
    pub fn effective_weight<'p>(&'p self, tape: &mut Tape<'p>, base: Var, scale: f64) -> Result<Var> {
        let a = tape.input(&self.a);
        let b = tape.input(&self.b);
        let delta = tape.matmul(b, a)?;
        let delta = tape.scale(delta, scale);
        tape.add(base, delta)
    }
}

#[derive(Debug, Clone)]
pub struct LoraAdapter {
    pub rank: usize,
    pub alpha: f64,
    pub targets: Vec<LoraPair>,
}

impl LoraAdapter {
    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }
}

fn check_rank(rank: usize, out_dim: usize, in_dim: usize) -> Result<()> {
    if rank == 0 || rank >= out_dim.min(in_dim) {
        return Err(Error::config(format!(
            "LoRA rank {rank} is degenerate for a {out_dim}×{in_dim} weight"
        )));
    }
    Ok(())
}

/// `base + (alpha/r)·B·A`, leaving `base` untouched.
pub fn lora_effective_weight(base: &Tensor, pair: &LoraPair, alpha: f64) -> Result<Tensor> {
    let (out_dim, in_dim) = (base.rows(), base.cols());
    let rank = pair.a.rows();
    check_rank(rank, out_dim, in_dim)?;
    if pair.a.shape() != [rank, in_dim] || pair.b.shape() != [out_dim, rank] {
        return Err(Error::shape(format!(
            "LoRA factors {:?}/{:?} do not fit base {:?}",
            pair.a.shape(),
            pair.b.shape(),
            base.shape()
        )));
    }
    let mut tape = Tape::new();
    let bv = tape.input(base);
    let w = pair.effective_weight(&mut tape, bv, alpha / rank as f64)?;
    Ok(tape.to_tensor(w))
}

#[derive(Debug, Clone)]
pub enum AdapterWeights {
    Houlsby(HoulsbyAdapter),
    Lora(LoraAdapter),
}

/// A domain (or gate) adapter for an encoder with a given width and depth.
#[derive(Debug, Clone)]
pub struct Adapter {
    pub domain: Option<u32>,
    pub hidden: usize,
    pub num_layers: usize,
    pub weights: AdapterWeights,
}

impl Adapter {
    pub fn new<R: Rng>(
        config: &AdapterConfig,
        hidden: usize,
        num_layers: usize,
        domain: Option<u32>,
        rng: &mut R,
    ) -> Result<Self> {
        let weights = match config.kind {
            AdapterKind::Houlsby => {
                let r = config.reduction_factor;
                if r == 0 || !hidden.is_multiple_of(r) || hidden / r == 0 {
                    return Err(Error::config(format!(
                        "reduction factor {r} does not divide hidden size {hidden}"
                    )));
                }
                let slots = (0..2 * num_layers).map(|_| HoulsbySlot::new(hidden, hidden / r, rng)).collect();
                AdapterWeights::Houlsby(HoulsbyAdapter { reduction_factor: r, slots })
            }
            AdapterKind::Lora => {
                check_rank(config.rank, hidden, hidden)?;
                let targets = (0..2 * num_layers)
                    .map(|_| LoraPair::new(hidden, hidden, config.rank, rng))
                    .collect();
                AdapterWeights::Lora(LoraAdapter { rank: config.rank, alpha: config.alpha, targets })
            }
        };
        Ok(Adapter { domain, hidden, num_layers, weights })
    }

    pub fn kind(&self) -> AdapterKind {
        match self.weights {
            AdapterWeights::Houlsby(_) => AdapterKind::Houlsby,
            AdapterWeights::Lora(_) => AdapterKind::Lora,
        }
    }

    pub fn houlsby_slot(&self, layer: usize, after_ffn: bool) -> Option<&HoulsbySlot> {
        match &self.weights {
            AdapterWeights::Houlsby(h) => h.slots.get(2 * layer + after_ffn as usize),
            AdapterWeights::Lora(_) => None,
        }
    }

    /// LoRA factors for the query (`value = false`) or value projection.
    pub fn lora_target(&self, layer: usize, value: bool) -> Option<(&LoraPair, f64)> {
        match &self.weights {
            AdapterWeights::Lora(l) => l.targets.get(2 * layer + value as usize).map(|p| (p, l.scale())),
            AdapterWeights::Houlsby(_) => None,
        }
    }

    pub fn param_count(&self) -> usize {
        self.total_count()
    }

    fn describe(&self) -> (u64, u64) {
        match &self.weights {
            AdapterWeights::Houlsby(h) => (h.reduction_factor as u64, 0),
            AdapterWeights::Lora(l) => (l.rank as u64, l.alpha.to_bits()),
        }
    }

    fn record_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        match &self.weights {
            AdapterWeights::Houlsby(h) => {
                for i in 0..h.slots.len() {
                    for part in ["down", "down_bias", "up", "up_bias"] {
                        names.push(format!("slot{i}.{part}"));
                    }
                }
            }
            AdapterWeights::Lora(l) => {
                for i in 0..l.targets.len() {
                    names.push(format!("target{i}.a"));
                    names.push(format!("target{i}.b"));
                }
            }
        }
        names
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::new(ContentKind::Adapter);
        let (size, alpha_bits) = self.describe();
        c.header = vec![
            self.kind() as u64,
            self.domain.map_or(NO_DOMAIN, u64::from),
            self.hidden as u64,
            self.num_layers as u64,
            size,
            alpha_bits,
        ];
        for (name, t) in self.record_names().into_iter().zip(self.params()) {
            c.push_tensor(name, t);
        }
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        if c.kind != ContentKind::Adapter {
            return Err(Error::format(format!("expected adapter container, found {:?}", c.kind)));
        }
        let kind = match c.header_at(0)? {
            0 => AdapterKind::Houlsby,
            1 => AdapterKind::Lora,
            other => return Err(Error::format(format!("unknown adapter kind tag {other}"))),
        };
        let domain = match c.header_at(1)? {
            NO_DOMAIN => None,
            d => Some(u32::try_from(d).map_err(|_| Error::format("domain id overflow"))?),
        };
        let hidden = c.header_at(2)? as usize;
        let num_layers = c.header_at(3)? as usize;
        let size = c.header_at(4)? as usize;
        let mut rd = c.reader();
        let weights = match kind {
            AdapterKind::Houlsby => {
                if size == 0 || !hidden.is_multiple_of(size) {
                    return Err(Error::format(format!("bad reduction factor {size} for hidden {hidden}")));
                }
                let b = hidden / size;
                let mut slots = Vec::with_capacity(2 * num_layers);
                for i in 0..2 * num_layers {
                    slots.push(HoulsbySlot {
                        down: rd.next(&format!("slot{i}.down"), &[hidden, b])?.trainable(),
                        down_bias: rd.next(&format!("slot{i}.down_bias"), &[b])?.trainable(),
                        up: rd.next(&format!("slot{i}.up"), &[b, hidden])?.trainable(),
                        up_bias: rd.next(&format!("slot{i}.up_bias"), &[hidden])?.trainable(),
                    });
                }
                AdapterWeights::Houlsby(HoulsbyAdapter { reduction_factor: size, slots })
            }
            AdapterKind::Lora => {
                let alpha = f64::from_bits(c.header_at(5)?);
                let mut targets = Vec::with_capacity(2 * num_layers);
                for i in 0..2 * num_layers {
                    targets.push(LoraPair {
                        a: rd.next(&format!("target{i}.a"), &[size, hidden])?.trainable(),
                        b: rd.next(&format!("target{i}.b"), &[hidden, size])?.trainable(),
                    });
                }
                AdapterWeights::Lora(LoraAdapter { rank: size, alpha, targets })
            }
        };
        rd.finish()?;
        Ok(Adapter { domain, hidden, num_layers, weights })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.to_container().to_bytes()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Adapter::from_container(&Container::from_bytes(bytes)?)
    }

    /// Loads an adapter and checks it fits an encoder of the given shape.
    pub fn load_for(bytes: &[u8], kind: AdapterKind, hidden: usize, num_layers: usize) -> Result<Self> {
        let a = Adapter::from_bytes(bytes)?;
        if a.kind() != kind || a.hidden != hidden || a.num_layers != num_layers {
            return Err(Error::format(format!(
                "adapter is {} hidden={} layers={}, expected {} hidden={} layers={}",
                a.kind().name(),
                a.hidden,
                a.num_layers,
                kind.name(),
                hidden,
                num_layers
            )));
        }
        Ok(a)
    }
}

impl Parameterized for Adapter {
    fn params(&self) -> Vec<&Tensor> {
        match &self.weights {
            AdapterWeights::Houlsby(h) => h.slots.iter().flat_map(|s| s.tensors()).collect(),
            AdapterWeights::Lora(l) => l.targets.iter().flat_map(|p| [&p.a, &p.b]).collect(),
        }
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        match &mut self.weights {
            AdapterWeights::Houlsby(h) => h.slots.iter_mut().flat_map(|s| s.tensors_mut()).collect(),
            AdapterWeights::Lora(l) => l.targets.iter_mut().flat_map(|p| [&mut p.a, &mut p.b]).collect(),
        }
    }
}

/// Domain adapters indexed by dense domain id `0..N`.
#[derive(Debug, Clone)]
pub struct AdapterRegistry {
    kind: AdapterKind,
    adapters: Vec<Adapter>,
}

impl AdapterRegistry {
    pub fn new(adapters: Vec<Adapter>) -> Result<Self> {
        let first = adapters.first().ok_or_else(|| Error::config("registry needs at least one adapter"))?;
        let kind = first.kind();
        let count = first.param_count();
        for (i, a) in adapters.iter().enumerate() {
            if a.domain != Some(i as u32) {
                return Err(Error::config(format!(
                    "adapter at position {i} carries domain {:?}; ids must be dense 0..N",
                    a.domain
                )));
            }
            if a.kind() != kind || a.hidden != first.hidden || a.num_layers != first.num_layers || a.param_count() != count
            {
                return Err(Error::config(format!("adapter {i} differs in kind or dimensions")));
            }
        }
        Ok(AdapterRegistry { kind, adapters })
    }

    pub fn kind(&self) -> AdapterKind {
        self.kind
    }

    pub fn len(&self) -> usize {
        self.adapters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.adapters.is_empty()
    }

    pub fn get(&self, domain: u32) -> Option<&Adapter> {
        self.adapters.get(domain as usize)
    }

    pub fn adapters(&self) -> &[Adapter] {
        &self.adapters
    }

    /// `N·A`.
    pub fn param_count(&self) -> usize {
        self.adapters.iter().map(Adapter::param_count).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gelu_scalar;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn zero_up_is_identity() {
        let a = Adapter::new(&AdapterConfig::houlsby(4), 8, 1, Some(0), &mut rng(1)).unwrap();
        let slot = a.houlsby_slot(0, false).unwrap();
        let x = Tensor::uniform(&[8], 3.0, &mut rng(2));
        assert_eq!(houlsby_forward(slot, &x).unwrap().data(), x.data());
    }

    #[test]
    fn all_zero_params_is_identity() {
        let mut a = Adapter::new(&AdapterConfig::houlsby(4), 8, 1, Some(0), &mut rng(1)).unwrap();
        a.params_mut().into_iter().for_each(|t| t.data_mut().fill(0.0));
        let x = Tensor::uniform(&[8], 3.0, &mut rng(2));
        let slot = a.houlsby_slot(0, true).unwrap();
        assert_eq!(houlsby_forward(slot, &x).unwrap().data(), x.data());
    }

    #[test]
    fn houlsby_matches_straight_line_reference() {
        let mut r = rng(9);
        let (h, b) = (8, 2);
        let slot = HoulsbySlot {
            down: Tensor::uniform(&[h, b], 1.0, &mut r),
            down_bias: Tensor::uniform(&[b], 1.0, &mut r),
            up: Tensor::uniform(&[b, h], 1.0, &mut r),
            up_bias: Tensor::uniform(&[h], 1.0, &mut r),
        };
        let x = Tensor::uniform(&[h], 2.0, &mut r);
        let got = houlsby_forward(&slot, &x).unwrap();
        for j in 0..h {
            let mut acc = x.data()[j] + slot.up_bias.data()[j];
            for k in 0..b {
                let mut z = slot.down_bias.data()[k];
                for i in 0..h {
                    z += x.data()[i] * slot.down.get2(i, k);
                }
                acc += gelu_scalar(z) * slot.up.get2(k, j);
            }
            assert!((got.data()[j] - acc).abs() < 1e-12);
        }
    }

    #[test]
    fn houlsby_rejects_wrong_width() {
        let a = Adapter::new(&AdapterConfig::houlsby(4), 8, 1, Some(0), &mut rng(1)).unwrap();
        let x = Tensor::zeros(&[6]);
        assert!(matches!(houlsby_forward(a.houlsby_slot(0, false).unwrap(), &x), Err(Error::Shape(_))));
    }

    #[test]
    fn reduction_must_divide() {
        assert!(Adapter::new(&AdapterConfig::houlsby(3), 8, 1, None, &mut rng(0)).is_err());
    }

    #[test]
    fn lora_zero_b_and_zero_alpha() {
        let mut r = rng(4);
        let base = Tensor::uniform(&[6, 5], 1.0, &mut r);
        let pair = LoraPair::new(6, 5, 2, &mut r);
        assert_eq!(lora_effective_weight(&base, &pair, 4.0).unwrap(), base);
        let mut pair = pair;
        pair.b = Tensor::uniform(&[6, 2], 1.0, &mut r);
        assert_eq!(lora_effective_weight(&base, &pair, 0.0).unwrap(), base);
    }

    #[test]
    fn lora_rank_one_bump() {
        let base = Tensor::zeros(&[3, 3]);
        let mut a = vec![0.0; 3];
        a[0] = 1.0;
        let mut b = vec![0.0; 3];
        b[0] = 1.0;
        let pair = LoraPair { a: Tensor::matrix(1, 3, a).unwrap(), b: Tensor::matrix(3, 1, b).unwrap() };
        let w = lora_effective_weight(&base, &pair, 1.0).unwrap();
        let mut expected = vec![0.0; 9];
        expected[0] = 1.0;
        assert_eq!(w.data(), expected.as_slice());
        assert!(base.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn lora_degenerate_rank_rejected() {
        let base = Tensor::zeros(&[4, 4]);
        let pair = LoraPair { a: Tensor::zeros(&[4, 4]), b: Tensor::zeros(&[4, 4]) };
        assert!(matches!(lora_effective_weight(&base, &pair, 1.0), Err(Error::Config(_))));
        assert!(Adapter::new(&AdapterConfig::lora(8, 16.0), 8, 1, None, &mut rng(0)).is_err());
    }

    #[test]
    fn closed_form_counts() {
        let h = Adapter::new(&AdapterConfig::houlsby(4), 64, 2, Some(0), &mut rng(0)).unwrap();
        assert_eq!(h.param_count(), 4 * (64 * 16 + 16 + 16 * 64 + 64));
        assert_eq!(h.param_count(), 8512);
        let l = Adapter::new(&AdapterConfig::lora(8, 16.0), 64, 2, Some(0), &mut rng(0)).unwrap();
        assert_eq!(l.param_count(), 4 * (8 * 64 + 64 * 8));
        assert_eq!(l.param_count(), 4096);
    }

    #[test]
    fn serialization_round_trip_and_mismatch() {
        for cfg in [AdapterConfig::houlsby(4), AdapterConfig::lora(2, 4.0)] {
            let mut a = Adapter::new(&cfg, 8, 2, Some(3), &mut rng(6)).unwrap();
            a.params_mut().into_iter().for_each(|t| {
                let n = t.len();
                t.data_mut().copy_from_slice(Tensor::uniform(&[n], 1.0, &mut rng(n as u64)).data());
            });
            let bytes = a.to_bytes().unwrap();
            let back = Adapter::load_for(&bytes, cfg.kind, 8, 2).unwrap();
            assert_eq!(back.to_bytes().unwrap(), bytes);
            assert_eq!(back.domain, Some(3));
            assert!(matches!(Adapter::load_for(&bytes, cfg.kind, 16, 2), Err(Error::Format(_))));
            let other = if cfg.kind == AdapterKind::Houlsby { AdapterKind::Lora } else { AdapterKind::Houlsby };
            assert!(Adapter::load_for(&bytes, other, 8, 2).is_err());
        }
    }

    #[test]
    fn registry_requires_dense_ids() {
        let cfg = AdapterConfig::houlsby(4);
        let a0 = Adapter::new(&cfg, 8, 1, Some(0), &mut rng(0)).unwrap();
        let a2 = Adapter::new(&cfg, 8, 1, Some(2), &mut rng(0)).unwrap();
        assert!(AdapterRegistry::new(vec![a0.clone(), a2]).is_err());
        let a1 = Adapter::new(&cfg, 8, 1, Some(1), &mut rng(0)).unwrap();
        let reg = AdapterRegistry::new(vec![a0, a1]).unwrap();
        assert_eq!(reg.param_count(), 2 * reg.get(0).unwrap().param_count());
    }
}
