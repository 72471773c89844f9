//! Head-level analysis: efficiency measures of local versus global heads,
//! inter-head correlation and block ablation.
//!
//! The efficiency measures count free parameters per constraint for one
//! global head (`G1`, `G2`) and for `n` local heads (`L1`, `L2`). `A`, `B` and
//! `C` are the numbers of spatial sections where a pair of filters has one,
//! two or no possible activations. Comparisons use exact rational arithmetic;
//! the `f64` values are for display.

use std::io::Write;

use num_rational::Ratio;
use serde::Serialize;

use crate::backbone::{lhc_block_seed, TinyNet};
use crate::error::{Error, Result};
use crate::lhc::LhcBlock;
use crate::tensor::Tensor;

type Q = Ratio<i128>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EfficiencyPoint {
    pub h: u64,
    pub w: u64,
    pub d: u64,
    pub n: u64,
    pub a: u64,
    pub b: u64,
    pub c: u64,
}

impl EfficiencyPoint {
    pub fn validate(&self) -> Result<()> {
        if self.h == 0 || self.w == 0 || self.d == 0 || self.n == 0 {
            return Err(Error::config("H, W, d and n must be positive"));
        }
        if self.a + self.b + self.c != self.n {
            return Err(Error::config(format!(
                "A + B + C = {} but n = {}",
                self.a + self.b + self.c,
                self.n
            )));
        }
        if self.a + self.b == 0 {
            return Err(Error::config("L1 and L2 need A + B >= 1"));
        }
        Ok(())
    }
}

/// Exact measures.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExactMeasures {
    pub g1: Q,
    pub g2: Q,
    pub l1: Q,
    pub l2: Q,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Measures {
    pub g1: f64,
    pub g2: f64,
    pub l1: f64,
    pub l2: f64,
}

fn q(v: u64) -> Q {
    Q::from_integer(v as i128)
}

fn to_f64(r: Q) -> f64 {
    *r.numer() as f64 / *r.denom() as f64
}

pub fn efficiency_exact(pt: &EfficiencyPoint) -> Result<ExactMeasures> {
    pt.validate()?;
    let hw = q(pt.h * pt.w);
    let d = q(pt.d);
    let m = hw / q(pt.n);
    let (a, b) = (q(pt.a), q(pt.b));
    let g1 = hw * d / (q(6) * (hw + d));
    let g2 = Q::new(1, 6);
    let one = m * d / (q(2) * (m + d));
    let two = m * d / (q(6) * (m + d));
    let l1 = (a * one + b * two) / (a + b);
    let l2 = (a / q(2) + b / q(6)) / (a + b);
    Ok(ExactMeasures { g1, g2, l1, l2 })
}

pub fn efficiency_measures(pt: &EfficiencyPoint) -> Result<Measures> {
    let e = efficiency_exact(pt)?;
    Ok(Measures {
        g1: to_f64(e.g1),
        g2: to_f64(e.g2),
        l1: to_f64(e.l1),
        l2: to_f64(e.l2),
    })
}

/// One `(A, B)` split. Column order of the CSV output follows field order.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RegionRow {
    pub a: u64,
    pub b: u64,
    pub c: u64,
    pub g1: f64,
    pub l1: f64,
    pub g2: f64,
    pub l2: f64,
    /// `L1 > G1`, decided exactly.
    pub l1_favors_local: bool,
    /// `L2 > G2`, decided exactly.
    pub l2_favors_local: bool,
}

/// Every split with `1 <= A + B <= n`, ordered by `A` then `B`.
pub fn region_scan(h: u64, w: u64, n: u64, d: u64) -> Result<Vec<RegionRow>> {
    if n == 0 || !(h * w).is_multiple_of(n) {
        return Err(Error::config(format!("H·W = {} is not divisible by n = {n}", h * w)));
    }
    let mut rows = Vec::new();
    for a in 0..=n {
        for b in 0..=(n - a) {
            if a + b == 0 {
                continue;
            }
            let pt = EfficiencyPoint { h, w, d, n, a, b, c: n - a - b };
            let e = efficiency_exact(&pt)?;
            rows.push(RegionRow {
                a,
                b,
                c: pt.c,
                g1: to_f64(e.g1),
                l1: to_f64(e.l1),
                g2: to_f64(e.g2),
                l2: to_f64(e.l2),
                l1_favors_local: e.l1 > e.g1,
                l2_favors_local: e.l2 > e.g2,
            });
        }
    }
    Ok(rows)
}

/// Embedding dimension `ratio · H·W/n`, rounded down and at least 1.
pub fn dim_from_ratio(h: u64, w: u64, n: u64, ratio: f64) -> Result<u64> {
    if n == 0 || !(ratio.is_finite() && ratio > 0.0) {
        return Err(Error::config("need n > 0 and a positive finite ratio"));
    }
    Ok((((h * w / n) as f64) * ratio).floor().max(1.0) as u64)
}

pub fn write_region_csv<W: Write>(rows: &[RegionRow], out: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(out);
    for row in rows {
        wtr.serialize(row)?;
    }
    wtr.flush()?;
    Ok(())
}

/// Pearson correlation; `None` when either series has zero variance.
pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&a, &b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PairCorrelation {
    pub head_a: usize,
    pub head_b: usize,
    pub correlation: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationReport {
    /// Mean over defined pairs; `None` if no pair is defined.
    pub mean: Option<f64>,
    pub pairs: Vec<PairCorrelation>,
    /// Pairs excluded because a head had zero variance.
    pub undefined: usize,
}

/// Mean pairwise Pearson correlation of per-head series.
pub fn mean_pairwise_correlation(series: &[Vec<f64>]) -> Result<CorrelationReport> {
    if series.len() < 2 {
        return Err(Error::config("correlation needs at least two heads"));
    }
    let mut pairs = Vec::new();
    for i in 0..series.len() {
        for j in i + 1..series.len() {
            pairs.push(PairCorrelation {
                head_a: i,
                head_b: j,
                correlation: pearson(&series[i], &series[j]),
            });
        }
    }
    let defined: Vec<f64> = pairs.iter().filter_map(|p| p.correlation).collect();
    let mean = (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64);
    Ok(CorrelationReport {
        mean,
        undefined: pairs.len() - defined.len(),
        pairs,
    })
}

/// Correlation of the pre-merge head outputs `A_h`, each flattened and
/// concatenated over the probe batch.
pub fn block_head_correlation(block: &LhcBlock, probes: &[Tensor]) -> Result<CorrelationReport> {
    if probes.is_empty() {
        return Err(Error::Empty("probe batch"));
    }
    let mut series = vec![Vec::new(); block.config.heads];
    for x in probes {
        let out = block.evaluate(x)?;
        for (s, a) in series.iter_mut().zip(&out.heads) {
            s.extend_from_slice(a.data());
        }
    }
    mean_pairwise_correlation(&series)
}

/// [`block_head_correlation`] for LHC block `index` of a network, probed with
/// the feature maps that reach it.
pub fn head_output_correlation(net: &TinyNet, index: usize, probes: &[Tensor]) -> Result<CorrelationReport> {
    let block = network_block(net, index)?;
    let mut inputs = Vec::with_capacity(probes.len());
    for x in probes {
        inputs.push(net.block_inputs(x)?.swap_remove(index));
    }
    block_head_correlation(&block, &inputs)
}

pub fn network_block(net: &TinyNet, index: usize) -> Result<LhcBlock> {
    let ins = net
        .spec
        .insertions
        .get(index)
        .ok_or_else(|| Error::config(format!("no LHC block {index}")))?;
    LhcBlock::with_weights(ins.lhc.clone(), net.params.lhc[index].clone())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationMode {
    /// The block passes its input through unchanged.
    SwitchOff,
    /// Weights return to the block's original seeded initialisation.
    Detrain,
    /// Weights are reinitialised from an explicit seed.
    Reinit { seed: u64 },
}

impl std::str::FromStr for AblationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "switch_off" => Ok(Self::SwitchOff),
            "detrain" => Ok(Self::Detrain),
            other => match other.strip_prefix("reinit:") {
                Some(seed) => seed
                    .parse()
                    .map(|seed| Self::Reinit { seed })
                    .map_err(|_| Error::config(format!("bad reinit seed {seed:?}"))),
                None => Err(Error::config(format!("unknown ablation mode {other:?}"))),
            },
        }
    }
}

/// Ablated copy of `net`; the original is untouched.
pub fn ablate_block(net: &TinyNet, index: usize, mode: AblationMode) -> Result<TinyNet> {
    if index >= net.spec.insertions.len() {
        return Err(Error::config(format!(
            "block index {index} out of range ({} blocks)",
            net.spec.insertions.len()
        )));
    }
    let mut out = net.clone();
    match mode {
        AblationMode::SwitchOff => out.enabled[index] = false,
        AblationMode::Detrain => out.reinit_block(index, lhc_block_seed(net.spec.seed, index))?,
        AblationMode::Reinit { seed } => out.reinit_block(index, seed)?,
    }
    Ok(out)
}

/// Copies block `index` (weights and switch) from `original` back into `ablated`.
pub fn restore_block(ablated: &TinyNet, original: &TinyNet, index: usize) -> Result<TinyNet> {
    if ablated.spec != original.spec || index >= original.spec.insertions.len() {
        return Err(Error::config("restore needs the same spec and a valid block index"));
    }
    let mut out = ablated.clone();
    out.enabled[index] = original.enabled[index];
    out.params.lhc[index] = original.params.lhc[index].clone();
    if let (Some(g), Some(o)) = (out.params.gates.get_mut(index), original.params.gates.get(index)) {
        *g = o.clone();
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::BackboneSpec;
    use crate::lhc::LhcConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn pt(a: u64, b: u64) -> EfficiencyPoint {
        EfficiencyPoint { h: 56, w: 56, d: 196, n: 8, a, b, c: 8 - a - b }
    }

    #[test]
    fn measure_examples() {
        let m = efficiency_measures(&pt(8, 0)).unwrap();
        assert_eq!(m.g2, 1.0 / 6.0);
        assert_eq!(m.l2, 0.5);
        let e = efficiency_exact(&pt(0, 5)).unwrap();
        assert_eq!(e.l2, e.g2);
        // G1 = 3136·196 / (6·3332)
        assert_eq!(efficiency_exact(&pt(1, 1)).unwrap().g1, Q::new(3136 * 196, 6 * 3332));
        assert!(efficiency_exact(&pt(0, 0)).is_err());
        assert!(efficiency_exact(&EfficiencyPoint { c: 0, ..pt(1, 1) }).is_err());
    }

    #[test]
    fn l2_dominates_g2() {
        for n in 1..=8 {
            for a in 0..=n {
                for b in 0..=(n - a) {
                    if a + b == 0 {
                        continue;
                    }
                    let p = EfficiencyPoint { h: 8, w: 8, d: 4, n, a, b, c: n - a - b };
                    if 64 % n != 0 {
                        continue;
                    }
                    let e = efficiency_exact(&p).unwrap();
                    assert!(e.l2 >= e.g2);
                    assert_eq!(e.l2 == e.g2, a == 0);
                }
            }
        }
    }

    #[test]
    fn region_boundary_at_reference_blocks() {
        let rows = region_scan(56, 56, 8, 196).unwrap();
        let find = |a, b| rows.iter().find(|r| r.a == a && r.b == b).unwrap().clone();
        assert!(!find(0, 8).l1_favors_local && !find(0, 8).l2_favors_local);
        assert!(!find(1, 7).l1_favors_local);
        assert!(find(2, 6).l1_favors_local);
        for r in &rows {
            // boundary: 162A > 42B
            assert_eq!(r.l1_favors_local, 162 * r.a > 42 * r.b, "{r:?}");
            assert_eq!(r.l2_favors_local, r.a >= 1);
        }
        assert_eq!(rows.len(), 44);
    }

    #[test]
    fn region_csv_header() {
        let mut buf = Vec::new();
        write_region_csv(&region_scan(4, 4, 2, 4).unwrap(), &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("a,b,c,g1,l1,g2,l2,l1_favors_local,l2_favors_local\n"));
        assert_eq!(text.lines().count(), 1 + 5);
    }

    #[test]
    fn correlation_properties() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x: Vec<f64> = Tensor::random_uniform([50], -1.0, 1.0, &mut rng).into_data();
        let y: Vec<f64> = Tensor::random_uniform([50], -1.0, 1.0, &mut rng).into_data();
        assert!((pearson(&x, &x).unwrap() - 1.0).abs() < 1e-12);
        let neg: Vec<f64> = x.iter().map(|v| -v).collect();
        assert!((pearson(&x, &neg).unwrap() + 1.0).abs() < 1e-12);
        let r = pearson(&x, &y).unwrap();
        assert_eq!(r, pearson(&y, &x).unwrap());
        let affine: Vec<f64> = y.iter().map(|v| 3.5 * v + 2.0).collect();
        assert!((pearson(&x, &affine).unwrap() - r).abs() < 1e-12);
        assert_eq!(pearson(&x, &[1.0; 50]), None);

        let report = mean_pairwise_correlation(&[x.clone(), x.clone(), vec![0.0; 50]]).unwrap();
        assert_eq!(report.undefined, 2);
        assert!((report.mean.unwrap() - 1.0).abs() < 1e-12);
        assert!(mean_pairwise_correlation(&[x]).is_err());
    }

    #[test]
    fn duplicated_heads_correlate_perfectly() {
        // 1×1 value kernel: zero-padded convolution would break the row symmetry
        let cfg = LhcConfig::new(2, 4, 3, 1.0, 1, [4, 4, 3]);
        let mut block = LhcBlock::new(cfg, 3).unwrap();
        block.weights.w1[1] = block.weights.w1[0].clone();
        block.weights.b1[1] = block.weights.b1[0].clone();
        // rows identical down each column: both bands see the same Q, K, V
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let probes: Vec<Tensor> = (0..2)
            .map(|_| {
                let row = Tensor::random_uniform([4, 3], 0.0, 1.0, &mut rng);
                Tensor::new([4, 4, 3], row.data().repeat(4)).unwrap()
            })
            .collect();
        let report = block_head_correlation(&block, &probes).unwrap();
        assert!((report.mean.unwrap() - 1.0).abs() < 1e-12, "{report:?}");
        assert_eq!(report, block_head_correlation(&block, &probes).unwrap());
    }

    #[test]
    fn network_correlation_is_bounded_and_reproducible() {
        let net = TinyNet::new(BackboneSpec::tiny([8, 8, 1], 7, 2)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let probes: Vec<Tensor> = (0..3).map(|_| Tensor::random_uniform([8, 8, 1], 0.0, 1.0, &mut rng)).collect();
        let a = head_output_correlation(&net, 0, &probes).unwrap();
        let b = head_output_correlation(&net, 0, &probes).unwrap();
        assert_eq!(a, b);
        let m = a.mean.unwrap();
        assert!(m > -1.0 && m < 1.0);
        assert!(head_output_correlation(&net, 1, &probes).is_err());
    }

    #[test]
    fn ablation_modes() {
        let net = TinyNet::new(BackboneSpec::tiny([8, 8, 1], 7, 4)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let xs: Vec<Tensor> = (0..2).map(|_| Tensor::random_uniform([8, 8, 1], 0.0, 1.0, &mut rng)).collect();
        let base = net.logits(&xs).unwrap();

        let off = ablate_block(&net, 0, AblationMode::SwitchOff).unwrap();
        assert!(net.enabled[0]);
        assert!(!off.logits(&xs).unwrap().bit_eq(&base));
        let back = restore_block(&off, &net, 0).unwrap();
        assert!(back.logits(&xs).unwrap().bit_eq(&base));

        let mut trained = net.clone();
        for t in trained.params.lhc[0].iter_mut() {
            *t = t.map(|v| v + 0.01);
        }
        let detrained = ablate_block(&trained, 0, AblationMode::Detrain).unwrap();
        assert_eq!(detrained.params.lhc[0], net.params.lhc[0]);
        let re = ablate_block(&net, 0, AblationMode::Reinit { seed: 77 }).unwrap();
        assert_ne!(re.params.lhc[0], net.params.lhc[0]);
        assert!(ablate_block(&net, 3, AblationMode::SwitchOff).is_err());

        assert_eq!("switch_off".parse::<AblationMode>().unwrap(), AblationMode::SwitchOff);
        assert_eq!("reinit:5".parse::<AblationMode>().unwrap(), AblationMode::Reinit { seed: 5 });
        assert!("drop".parse::<AblationMode>().is_err());
    }

    #[test]
    fn ablating_every_block_gives_pure_backbone() {
        let mut spec = BackboneSpec::tiny([8, 8, 1], 7, 4);
        spec.insertions.push(crate::backbone::Insertion {
            after: crate::backbone::Position::Stage(1),
            lhc: LhcConfig::new(2, 8, 3, 1.0, 3, [4, 4, 16]),
        });
        let net = TinyNet::new(spec.clone()).unwrap();
        let mut plain_spec = spec;
        plain_spec.insertions.clear();
        let plain = TinyNet::new(plain_spec).unwrap();
        let mut ablated = net.clone();
        for i in 0..2 {
            ablated = ablate_block(&ablated, i, AblationMode::SwitchOff).unwrap();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let xs = vec![Tensor::random_uniform([8, 8, 1], 0.0, 1.0, &mut rng)];
        assert!(ablated.logits(&xs).unwrap().bit_eq(&plain.logits(&xs).unwrap()));
    }
}
