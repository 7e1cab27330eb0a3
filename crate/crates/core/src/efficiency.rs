//! Analytic FLOP counts, energy and carbon conversion, and deployment
//! storage totals.

use std::fmt::Write as _;

use crate::adapters::{AdapterConfig, AdapterKind};
use crate::encoder::{EncoderConfig, EncoderMode};
use crate::error::{Error, Result};

pub const JOULES_PER_FLOP: f64 = 15.6e-12;
pub const GRAMS_CO2_PER_KWH: f64 = 400.0;
const JOULES_PER_KWH: f64 = 3.6e6;

pub const CAVEAT: &str = "theoretical FLOP-level calculations; memory traffic, utilisation and idle draw are not modelled";

pub const FLOP_BASIS: &str = "2 FLOPs per multiply-accumulate over every matrix product of one forward pass; \
embeddings excluded; attention = Q,K,V,O projections + scores + weighted sum; FFN = both projections; \
layer norms (embedding + 2 per layer) at 5 FLOPs per element; mean pooling at 1 FLOP per element; \
cross head = 2*d; Houlsby = down + up projections per slot (2 slots per layer); \
LoRA = one B*A fusion (2*r*d*d) per adapted projection (Q and V per layer); \
biases, softmax, GELU and residual additions not counted";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnergyModel {
    pub joules_per_flop: f64,
    pub grams_co2_per_kwh: f64,
}

impl Default for EnergyModel {
    fn default() -> Self {
        EnergyModel { joules_per_flop: JOULES_PER_FLOP, grams_co2_per_kwh: GRAMS_CO2_PER_KWH }
    }
}

impl EnergyModel {
    pub fn new(joules_per_flop: f64, grams_co2_per_kwh: f64) -> Result<Self> {
        if !(joules_per_flop > 0.0 && grams_co2_per_kwh > 0.0) || !joules_per_flop.is_finite() || !grams_co2_per_kwh.is_finite() {
            return Err(Error::config("energy model constants must be positive and finite"));
        }
        Ok(EnergyModel { joules_per_flop, grams_co2_per_kwh })
    }

    pub fn energy_per_query(&self, flops: f64) -> Result<f64> {
        if !(flops >= 0.0) {
            return Err(Error::contract(format!("FLOP count must be non-negative, got {flops}")));
        }
        Ok(flops * self.joules_per_flop)
    }

    /// Milligrams of CO₂ for the given energy.
    pub fn co2_per_query(&self, joules: f64) -> Result<f64> {
        if !(joules >= 0.0) {
            return Err(Error::contract(format!("energy must be non-negative, got {joules}")));
        }
        Ok(joules / JOULES_PER_KWH * self.grams_co2_per_kwh * 1000.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlopProfile {
    pub name: String,
    pub seq_len: usize,
    pub flops: u64,
    /// Named contributions summing to `flops`.
    pub terms: Vec<(String, u64)>,
    pub basis: &'static str,
}

impl FlopProfile {
    pub fn gflops(&self) -> f64 {
        self.flops as f64 / 1e9
    }

    pub fn term(&self, name: &str) -> u64 {
        self.terms.iter().filter(|(n, _)| n == name).map(|(_, v)| v).sum()
    }
}

/// `x[L×n] · Wᵀ` with `W[m×n]`.
pub fn linear_flops(out_dim: usize, in_dim: usize, seq_len: usize) -> u64 {
    2 * (out_dim * in_dim * seq_len) as u64
}

/// Per-query forward cost at `seq_len` tokens with the closed form
/// `layers·(8Ld² + 4L²d + 4Ldf + 10Ld) + 5Ld + Ld [+ 2d]` plus adapter terms.
pub fn count_flops(config: &EncoderConfig, adapter: Option<&AdapterConfig>, seq_len: usize) -> Result<FlopProfile> {
    if config.hidden_dim == 0 || config.num_heads == 0 || !config.hidden_dim.is_multiple_of(config.num_heads) {
        return Err(Error::config("encoder hidden size must be a positive multiple of the head count"));
    }
    let (l, d, f, n) = (seq_len as u64, config.hidden_dim as u64, config.ffn_dim as u64, config.num_layers as u64);
    let mut terms = vec![
        ("attention_projections".to_string(), n * 4 * linear_flops(config.hidden_dim, config.hidden_dim, seq_len)),
        ("attention_scores".to_string(), n * 2 * l * l * d),
        ("attention_weighted_sum".to_string(), n * 2 * l * l * d),
        (
            "ffn".to_string(),
            n * (linear_flops(config.ffn_dim, config.hidden_dim, seq_len) + linear_flops(config.hidden_dim, config.ffn_dim, seq_len)),
        ),
        ("layer_norm".to_string(), n * 2 * 5 * l * d),
        ("embedding_layer_norm".to_string(), 5 * l * d),
        ("pooling".to_string(), l * d),
    ];
    debug_assert_eq!(terms[3].1, n * 4 * l * d * f);
    if config.mode == EncoderMode::Cross {
        terms.push(("cross_head".to_string(), 2 * d));
    }
    if let Some(a) = adapter {
        match a.kind {
            AdapterKind::Houlsby => {
                if a.reduction_factor == 0 || !config.hidden_dim.is_multiple_of(a.reduction_factor) {
                    return Err(Error::config("reduction factor must divide the hidden size"));
                }
                let b = config.hidden_dim / a.reduction_factor;
                let per_slot = linear_flops(b, config.hidden_dim, seq_len) + linear_flops(config.hidden_dim, b, seq_len);
                terms.push(("houlsby_adapter".to_string(), n * 2 * per_slot));
            }
            AdapterKind::Lora => {
                terms.push(("lora_fusion".to_string(), n * 2 * 2 * (a.rank as u64) * d * d));
            }
        }
    }
    let flops = terms.iter().map(|t| t.1).sum();
    let name = match adapter {
        Some(a) => format!("{}-{}", config.mode.name(), a.kind.name()),
        None => config.mode.name().to_string(),
    };
    Ok(FlopProfile { name, seq_len, flops, terms, basis: FLOP_BASIS })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StorageReport {
    pub backbone: usize,
    pub domains: usize,
    pub adapter: usize,
    pub gate_adapter: usize,
    pub drama_total: usize,
    pub separate_total: usize,
    /// DRAMA total over the separate-models total.
    pub ratio: f64,
    /// DRAMA total as a percentage of one backbone.
    pub percent_of_base: f64,
}

/// `P + N·A + A_gate` against `N·P`.
pub fn storage_comparison(p: usize, n: usize, a: usize, a_gate: usize) -> StorageReport {
    let drama_total = p + n * a + a_gate;
    let separate_total = n * p;
    StorageReport {
        backbone: p,
        domains: n,
        adapter: a,
        gate_adapter: a_gate,
        drama_total,
        separate_total,
        ratio: if separate_total == 0 { f64::NAN } else { drama_total as f64 / separate_total as f64 },
        percent_of_base: if p == 0 { f64::NAN } else { 100.0 * drama_total as f64 / p as f64 },
    }
}

impl StorageReport {
    pub fn to_tsv(&self) -> String {
        format!(
            "backbone\tdomains\tadapter\tgate_adapter\tdrama_total\tseparate_total\tratio\tpercent_of_base\n{}\t{}\t{}\t{}\t{}\t{}\t{:.4}\t{:.2}\n",
            self.backbone,
            self.domains,
            self.adapter,
            self.gate_adapter,
            self.drama_total,
            self.separate_total,
            self.ratio,
            self.percent_of_base
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnergyRow {
    pub variant: String,
    pub params_millions: f64,
    pub gflops: f64,
}

/// Published per-query GFLOP figures and parameter counts for the seven
/// configurations of the efficiency comparison.
pub fn reference_rows() -> Vec<EnergyRow> {
    [
        ("BERT_S", 440.0, 89.40),
        ("DistilBERT_S", 264.0, 44.72),
        ("DRAMA-DistilBERT_LoRA", 0.73, 0.20),
        ("DRAMA-DistilBERT_Houlsby", 80.6, 15.68),
        ("MiniLM_S", 90.8, 11.48),
        ("DRAMA-MiniLM_LoRA", 0.36, 0.15),
        ("DRAMA-MiniLM_Houlsby", 26.3, 4.02),
    ]
    .into_iter()
    .map(|(v, p, g)| EnergyRow { variant: v.to_string(), params_millions: p, gflops: g })
    .collect()
}

/// `variant, params(M), GFLOP/query, J/query, mgCO₂/query` rows.
pub fn energy_report(model: &EnergyModel, rows: &[EnergyRow]) -> Result<String> {
    let mut out = String::new();
    let _ = writeln!(out, "# {CAVEAT}");
    let _ = writeln!(out, "variant\tparams(M)\tGFLOP/query\tJ/query\tmgCO2/query");
    for r in rows {
        let j = model.energy_per_query(r.gflops * 1e9)?;
        let mg = model.co2_per_query(j)?;
        let _ = writeln!(out, "{}\t{}\t{:.2}\t{:.4}\t{:.5}", r.variant, r.params_millions, r.gflops, j, mg);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn config(d: usize, layers: usize, mode: EncoderMode) -> EncoderConfig {
        EncoderConfig { vocab_size: 10, hidden_dim: d, num_layers: layers, num_heads: 1, ffn_dim: 2 * d, max_seq_len: 128, mode }
    }

    #[test]
    fn energy_and_co2_examples() {
        let m = EnergyModel::default();
        assert!((m.energy_per_query(89.40e9).unwrap() - 1.39464).abs() < 1e-12);
        assert!((m.energy_per_query(4.02e9).unwrap() - 0.062712).abs() < 1e-12);
        assert_eq!(m.energy_per_query(0.0).unwrap(), 0.0);
        assert!((m.co2_per_query(1.40).unwrap() - 0.155_555_555_6).abs() < 1e-9);
        assert!((m.co2_per_query(0.70).unwrap() - 0.077_777_777_8).abs() < 1e-9);
        assert_eq!(m.co2_per_query(0.0).unwrap(), 0.0);
        assert!(m.energy_per_query(-1.0).is_err());
        assert!(EnergyModel::new(0.0, 400.0).is_err());
    }

    #[test]
    fn storage_examples() {
        let r = storage_comparison(100, 4, 3, 3);
        assert_eq!((r.drama_total, r.separate_total), (115, 400));
        assert_eq!(r.ratio, 0.2875);
        let r = storage_comparison(100, 1, 0, 0);
        assert_eq!(r.drama_total, r.separate_total);
    }

    #[test]
    fn degenerate_and_single_linear() {
        let p = count_flops(&config(1, 0, EncoderMode::Bi), None, 7).unwrap();
        let layer_terms = ["attention_projections", "attention_scores", "attention_weighted_sum", "ffn", "layer_norm"];
        assert!(layer_terms.iter().all(|t| p.term(t) == 0));
        assert_eq!(p.term("pooling"), 7);
        assert_eq!(linear_flops(3, 5, 11), 2 * 3 * 5 * 11);
        assert!(!p.basis.is_empty());
    }

    #[test]
    fn adapter_terms() {
        let c = config(64, 2, EncoderMode::Bi);
        let base = count_flops(&c, None, 128).unwrap().flops;
        let h = count_flops(&c, Some(&AdapterConfig::houlsby(4)), 128).unwrap();
        assert_eq!(h.flops - base, 2 * 2 * (2 * 128 * 64 * 16 * 2));
        let l = count_flops(&c, Some(&AdapterConfig::lora(8, 16.0)), 128).unwrap();
        assert_eq!(l.flops - base, 2 * 2 * 2 * 8 * 64 * 64);
        let cross = count_flops(&config(64, 2, EncoderMode::Cross), None, 128).unwrap();
        assert_eq!(cross.flops - base, 128);
    }

    #[test]
    fn report_has_table_columns() {
        let text = energy_report(&EnergyModel::default(), &reference_rows()).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert!(lines[0].starts_with("# theoretical"));
        assert_eq!(lines[1], "variant\tparams(M)\tGFLOP/query\tJ/query\tmgCO2/query");
        assert_eq!(lines.len(), 9);
        assert!(lines[2].starts_with("BERT_S\t440\t89.40\t1.3946\t"));
    }

    proptest! {
        #[test]
        fn conversions_are_linear(a in 0.0f64..1e12, b in 0.0f64..1e12) {
            let m = EnergyModel::default();
            let ea = m.energy_per_query(a).unwrap();
            let eb = m.energy_per_query(b).unwrap();
            let eab = m.energy_per_query(a + b).unwrap();
            prop_assert!((eab - (ea + eb)).abs() <= 1e-12 * eab.max(1e-300));
            let cab = m.co2_per_query(ea + eb).unwrap();
            prop_assert!((cab - (m.co2_per_query(ea).unwrap() + m.co2_per_query(eb).unwrap())).abs() <= 1e-12 * cab.max(1e-300));
        }

        #[test]
        fn flops_monotone(l in 1usize..64, layers in 0usize..4, d_mult in 1usize..8) {
            let d = 4 * d_mult;
            let c = config(d, layers, EncoderMode::Bi);
            let f = |c: &EncoderConfig, l| count_flops(c, None, l).unwrap().flops;
            prop_assert!(f(&c, l + 1) > f(&c, l));
            prop_assert!(f(&config(d, layers + 1, EncoderMode::Bi), l) > f(&c, l));
            prop_assert!(f(&config(d + 4, layers, EncoderMode::Bi), l) > f(&c, l));
        }
    }
}
