//! LAMP scoring, global pruning and mask algebra.
//!
//! A LAMP score normalises each weight's squared magnitude by the squared
//! mass of all surviving weights in the same layer that are at least as
//! large:
//!
//! ```text
//! score(u) = w_u^2 / sum_{v >= u} w_v^2
//! ```
//!
//! where `>=` is the ascending order by `(w^2, flat index)`. The largest
//! survivor of every layer scores exactly 1.0, which makes scores comparable
//! across layers so one global threshold can be used.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::nn::{NetworkSpec, Parameters};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PruneError {
    #[error("prune fraction must lie in (0, 1), got {0}")]
    InvalidFraction(f64),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("malformed mask encoding at byte {offset}: {reason}")]
    Malformed { offset: usize, reason: String },
}

/// Survivor indicator for one layer's weights (`true` = kept).
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LayerMask {
    pub shape: Vec<usize>,
    pub keep: Vec<bool>,
}

impl LayerMask {
    pub fn surviving(&self) -> usize {
        self.keep.iter().filter(|&&k| k).count()
    }
}

/// One binary mask per parameterized layer. Biases are never masked.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MaskSet {
    pub layers: Vec<LayerMask>,
}

impl MaskSet {
    fn filled(spec: &NetworkSpec, value: bool) -> Self {
        let layers = spec
            .weight_shapes()
            .into_iter()
            .map(|shape| {
                let n = shape.iter().product();
                LayerMask { shape, keep: vec![value; n] }
            })
            .collect();
        Self { layers }
    }

    pub fn ones(spec: &NetworkSpec) -> Self {
        Self::filled(spec, true)
    }

    pub fn zeros(spec: &NetworkSpec) -> Self {
        Self::filled(spec, false)
    }

    pub fn surviving_count(&self) -> usize {
        self.layers.iter().map(LayerMask::surviving).sum()
    }

    pub fn total_count(&self) -> usize {
        self.layers.iter().map(|l| l.keep.len()).sum()
    }

    pub fn congruent(&self, other: &MaskSet) -> bool {
        self.layers.len() == other.layers.len()
            && self.layers.iter().zip(&other.layers).all(|(a, b)| a.shape == b.shape && a.keep.len() == b.keep.len())
    }

    /// `self <= other` elementwise.
    pub fn is_subset_of(&self, other: &MaskSet) -> bool {
        self.congruent(other)
            && self
                .layers
                .iter()
                .zip(&other.layers)
                .all(|(a, b)| a.keep.iter().zip(&b.keep).all(|(&x, &y)| !x || y))
    }

    /// Packed little-endian encoding; see [`encode_mask`].
    pub fn encode(&self) -> Vec<u8> {
        encode_mask(self)
    }

    /// Hex SHA-256 of the packed encoding.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.encode()))
    }
}

/// Per-layer LAMP scores, shaped like the mask.
#[derive(Debug, Clone, PartialEq)]
pub struct LampScoreSet {
    pub layers: Vec<Vec<f64>>,
}

/// Neumaier-compensated running sum.
#[derive(Default, Clone, Copy)]
struct CompensatedSum {
    sum: f64,
    comp: f64,
}

impl CompensatedSum {
    fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

fn check_congruent(params: &Parameters, mask: &MaskSet) -> Result<(), PruneError> {
    let ok = params.layers.len() == mask.layers.len()
        && params
            .layers
            .iter()
            .zip(&mask.layers)
            .all(|(p, m)| p.shape == m.shape && p.weights.len() == m.keep.len());
    if ok {
        Ok(())
    } else {
        Err(PruneError::ShapeMismatch("parameters and mask are not congruent".into()))
    }
}

fn layer_lamp_scores(weights: &[f64], keep: &[bool]) -> Vec<f64> {
    let mut scores = vec![0.0; weights.len()];
    let mut order: Vec<(f64, usize)> = weights
        .iter()
        .zip(keep)
        .enumerate()
        .filter(|(_, (_, &k))| k)
        .map(|(i, (&w, _))| (w * w, i))
        .collect();
    order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    // Walk from the largest down, accumulating the suffix mass.
    let mut tail = CompensatedSum::default();
    for &(sq, i) in order.iter().rev() {
        tail.add(sq);
        let denom = tail.value();
        scores[i] = if denom > 0.0 { sq / denom } else { 0.0 };
    }
    scores
}

/// LAMP score of every surviving weight; masked-out weights score 0.
pub fn lamp_scores(params: &Parameters, mask: &MaskSet) -> Result<LampScoreSet, PruneError> {
    check_congruent(params, mask)?;
    let layers = params
        .layers
        .iter()
        .zip(&mask.layers)
        .map(|(p, m)| layer_lamp_scores(&p.weights, &m.keep))
        .collect();
    Ok(LampScoreSet { layers })
}

/// Result of one pruning stage.
#[derive(Debug, Clone, PartialEq)]
pub struct PruneOutcome {
    /// Stage mask: previous survivors minus the weights removed now.
    pub mask: MaskSet,
    pub removed: usize,
    /// `true` when `floor(fraction * survivors)` was zero and nothing changed.
    pub no_op: bool,
}

/// Remove the `floor(fraction * S)` surviving weights with the lowest scores,
/// globally across layers (`S` = current survivor count).
///
/// The fraction is of the *current* survivors, so repeated stages compound:
/// after `k` stages roughly `(1 - fraction)^k` of the weights remain. Taking
/// the fraction of the original count instead would empty the network after
/// `1 / fraction` stages. Ties in score go to the lower `(layer, index)`.
pub fn select_prune(scores: &LampScoreSet, mask: &MaskSet, fraction: f64) -> Result<PruneOutcome, PruneError> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(PruneError::InvalidFraction(fraction));
    }
    let shapes_ok = scores.layers.len() == mask.layers.len()
        && scores.layers.iter().zip(&mask.layers).all(|(s, m)| s.len() == m.keep.len());
    if !shapes_ok {
        return Err(PruneError::ShapeMismatch("scores and mask are not congruent".into()));
    }
    let survivors = mask.surviving_count();
    let n = (fraction * survivors as f64).floor() as usize;
    let mut next = mask.clone();
    if n == 0 {
        return Ok(PruneOutcome { mask: next, removed: 0, no_op: true });
    }
    let mut candidates: Vec<(f64, usize, usize)> = Vec::with_capacity(survivors);
    for (l, (s, m)) in scores.layers.iter().zip(&mask.layers).enumerate() {
        for (i, (&score, &k)) in s.iter().zip(&m.keep).enumerate() {
            if k {
                candidates.push((score, l, i));
            }
        }
    }
    let cmp = |a: &(f64, usize, usize), b: &(f64, usize, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2));
    if n < candidates.len() {
        candidates.select_nth_unstable_by(n, cmp);
    }
    for &(_, l, i) in &candidates[..n] {
        next.layers[l].keep[i] = false;
    }
    Ok(PruneOutcome { mask: next, removed: n, no_op: false })
}

/// Elementwise product of all masks; the empty product is all-ones for `spec`.
pub fn compose_masks(spec: &NetworkSpec, masks: &[MaskSet]) -> Result<MaskSet, PruneError> {
    let mut out = MaskSet::ones(spec);
    for (j, m) in masks.iter().enumerate() {
        if !out.congruent(m) {
            return Err(PruneError::ShapeMismatch(format!("mask {j} is not congruent with the network")));
        }
        for (o, l) in out.layers.iter_mut().zip(&m.layers) {
            for (a, &b) in o.keep.iter_mut().zip(&l.keep) {
                *a = *a && b;
            }
        }
    }
    Ok(out)
}

/// `init ⊙ mask`: survivors copied bit-for-bit, pruned weights set to `+0.0`,
/// biases copied unchanged.
pub fn apply_mask(init: &Parameters, mask: &MaskSet) -> Result<Parameters, PruneError> {
    check_congruent(init, mask)?;
    let mut out = init.clone();
    for (p, m) in out.layers.iter_mut().zip(&mask.layers) {
        for (w, &k) in p.weights.iter_mut().zip(&m.keep) {
            if !k {
                *w = 0.0;
            }
        }
    }
    Ok(out)
}

/// Surviving fraction of weights (0.0 for a mask with no weights).
pub fn sparsity(mask: &MaskSet) -> f64 {
    let total = mask.total_count();
    if total == 0 {
        0.0
    } else {
        mask.surviving_count() as f64 / total as f64
    }
}

/// Serialize a mask as a sequence of per-layer records, all integers `u32`
/// little-endian:
///
/// ```text
/// layer_index | ndim | dim_0 .. dim_{ndim-1} | ceil(n / 8) packed bytes
/// ```
///
/// Bit `i` of the row-major flat order lives in byte `i / 8`, bit `i % 8`
/// (least significant first).
pub fn encode_mask(mask: &MaskSet) -> Vec<u8> {
    let mut out = Vec::new();
    for (li, layer) in mask.layers.iter().enumerate() {
        out.extend_from_slice(&(li as u32).to_le_bytes());
        out.extend_from_slice(&(layer.shape.len() as u32).to_le_bytes());
        for &d in &layer.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        let mut packed = vec![0u8; layer.keep.len().div_ceil(8)];
        for (i, &k) in layer.keep.iter().enumerate() {
            if k {
                packed[i / 8] |= 1 << (i % 8);
            }
        }
        out.extend_from_slice(&packed);
    }
    out
}

pub fn decode_mask(bytes: &[u8]) -> Result<MaskSet, PruneError> {
    let mut pos = 0usize;
    let read_u32 = |pos: &mut usize| -> Result<usize, PruneError> {
        let chunk = bytes.get(*pos..*pos + 4).ok_or(PruneError::Malformed {
            offset: *pos,
            reason: "truncated integer".into(),
        })?;
        *pos += 4;
        Ok(u32::from_le_bytes(chunk.try_into().unwrap()) as usize)
    };
    let mut layers = Vec::new();
    while pos < bytes.len() {
        let start = pos;
        let index = read_u32(&mut pos)?;
        if index != layers.len() {
            return Err(PruneError::Malformed { offset: start, reason: format!("expected layer {}, found {index}", layers.len()) });
        }
        let ndim = read_u32(&mut pos)?;
        if ndim > 8 {
            return Err(PruneError::Malformed { offset: start + 4, reason: format!("implausible rank {ndim}") });
        }
        let shape = (0..ndim).map(|_| read_u32(&mut pos)).collect::<Result<Vec<_>, _>>()?;
        let n: usize = shape.iter().product();
        let packed = bytes.get(pos..pos + n.div_ceil(8)).ok_or(PruneError::Malformed {
            offset: pos,
            reason: format!("need {} packed bytes for {n} entries", n.div_ceil(8)),
        })?;
        let keep = (0..n).map(|i| packed[i / 8] >> (i % 8) & 1 == 1).collect();
        pos += n.div_ceil(8);
        layers.push(LayerMask { shape, keep });
    }
    Ok(MaskSet { layers })
}

/// Chained digests over a mask history: `d_0 = H(m_0)`, `d_k = H(d_{k-1} || m_k)`.
pub fn mask_chain_digests(masks: &[MaskSet]) -> Vec<String> {
    let mut out: Vec<String> = Vec::with_capacity(masks.len());
    for m in masks {
        let mut h = Sha256::new();
        if let Some(prev) = out.last() {
            h.update(prev.as_bytes());
        }
        h.update(m.encode());
        out.push(hex::encode(h.finalize()));
    }
    out
}

/// Check a recorded digest chain against a mask history and that the history is nested.
pub fn verify_mask_chain(masks: &[MaskSet], digests: &[String]) -> bool {
    mask_chain_digests(masks) == digests && masks.windows(2).all(|w| w[1].is_subset_of(&w[0]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Layer, LayerParams};
    use proptest::prelude::*;

    fn one_layer(weights: Vec<f64>) -> (Parameters, MaskSet) {
        let n = weights.len();
        let params = Parameters { layers: vec![LayerParams { shape: vec![1, n], weights, biases: vec![0.0] }] };
        let mask = MaskSet { layers: vec![LayerMask { shape: vec![1, n], keep: vec![true; n] }] };
        (params, mask)
    }

    #[test]
    fn lamp_worked_example() {
        let (p, m) = one_layer(vec![1.0, -2.0, 3.0]);
        let s = lamp_scores(&p, &m).unwrap();
        assert!((s.layers[0][0] - 1.0 / 14.0).abs() < 1e-15);
        assert!((s.layers[0][1] - 4.0 / 13.0).abs() < 1e-15);
        assert_eq!(s.layers[0][2], 1.0);
    }

    #[test]
    fn lamp_single_survivor_and_ties() {
        let (p, mut m) = one_layer(vec![0.7, -5.0]);
        m.layers[0].keep[1] = false;
        let s = lamp_scores(&p, &m).unwrap();
        assert_eq!(s.layers[0], vec![1.0, 0.0]);

        let (p, m) = one_layer(vec![2.5, 2.5]);
        assert_eq!(lamp_scores(&p, &m).unwrap().layers[0], vec![0.5, 1.0]);
    }

    #[test]
    fn lamp_zero_layer_scores_zero() {
        let (p, m) = one_layer(vec![0.0, 0.0, 0.0]);
        assert_eq!(lamp_scores(&p, &m).unwrap().layers[0], vec![0.0; 3]);
    }

    #[test]
    fn prune_sixteen_of_a_hundred() {
        let weights: Vec<f64> = (0..100).map(|i| (i as f64 - 49.5) * 0.01).collect();
        let (p, m) = one_layer(weights);
        let out = select_prune(&lamp_scores(&p, &m).unwrap(), &m, 0.16).unwrap();
        assert_eq!(out.mask.surviving_count(), 84);
        assert_eq!(out.removed, 16);
        assert!(!out.no_op);
    }

    #[test]
    fn tiny_fraction_is_a_flagged_no_op() {
        let (p, m) = one_layer(vec![1.0, 2.0, 3.0, 4.0, 5.0]);
        let out = select_prune(&lamp_scores(&p, &m).unwrap(), &m, 0.1).unwrap();
        assert!(out.no_op);
        assert_eq!(out.mask, m);
    }

    #[test]
    fn invalid_fraction_rejected() {
        let (p, m) = one_layer(vec![1.0]);
        let s = lamp_scores(&p, &m).unwrap();
        for f in [0.0, 1.0, -0.1, f64::NAN] {
            assert!(matches!(select_prune(&s, &m, f), Err(PruneError::InvalidFraction(_))));
        }
    }

    #[test]
    fn per_layer_maxima_survive_half_pruning() {
        // Layer 0 has tiny weights, layer 1 large ones; the max of each scores 1.0.
        let params = Parameters {
            layers: vec![
                LayerParams { shape: vec![4], weights: vec![1e-3, -2e-3, 3e-3, 4e-3], biases: vec![] },
                LayerParams { shape: vec![4], weights: vec![10.0, 20.0, -30.0, 5.0], biases: vec![] },
            ],
        };
        let mask = MaskSet {
            layers: vec![
                LayerMask { shape: vec![4], keep: vec![true; 4] },
                LayerMask { shape: vec![4], keep: vec![true; 4] },
            ],
        };
        let out = select_prune(&lamp_scores(&params, &mask).unwrap(), &mask, 0.5).unwrap();
        assert!(out.mask.layers[0].keep[3]);
        assert!(out.mask.layers[1].keep[2]);
        assert_eq!(out.mask.surviving_count(), 4);
    }

    fn small_spec() -> NetworkSpec {
        NetworkSpec::new(vec![Layer::Dense { fan_in: 3, fan_out: 1 }, Layer::Relu, Layer::Dense { fan_in: 1, fan_out: 2 }], vec![3], 2).unwrap()
    }

    #[test]
    fn compose_examples() {
        let spec = small_spec();
        let mut a = MaskSet::ones(&spec);
        a.layers[0].keep = vec![true, true, false];
        let mut b = MaskSet::ones(&spec);
        b.layers[0].keep = vec![true, false, true];
        let c = compose_masks(&spec, &[a.clone(), b]).unwrap();
        assert_eq!(c.layers[0].keep, vec![true, false, false]);
        assert_eq!(compose_masks(&spec, &[a.clone()]).unwrap(), a);
        assert_eq!(compose_masks(&spec, &[]).unwrap(), MaskSet::ones(&spec));
    }

    #[test]
    fn apply_mask_examples() {
        let spec = small_spec();
        let init = Parameters {
            layers: vec![
                LayerParams { shape: vec![1, 3], weights: vec![-0.5, 0.25, 1.5], biases: vec![0.1] },
                LayerParams { shape: vec![2, 1], weights: vec![2.0, -3.0], biases: vec![0.2, -0.2] },
            ],
        };
        assert!(apply_mask(&init, &MaskSet::ones(&spec)).unwrap().bitwise_eq(&init));
        let zeroed = apply_mask(&init, &MaskSet::zeros(&spec)).unwrap();
        for (z, i) in zeroed.layers.iter().zip(&init.layers) {
            assert!(z.weights.iter().all(|w| w.to_bits() == 0));
            assert_eq!(z.biases, i.biases);
        }
    }

    #[test]
    fn sparsity_examples() {
        let spec = small_spec();
        assert_eq!(sparsity(&MaskSet::ones(&spec)), 1.0);
        assert_eq!(sparsity(&MaskSet::zeros(&spec)), 0.0);
        assert_eq!(sparsity(&MaskSet { layers: vec![] }), 0.0);
    }

    #[test]
    fn floor_schedule_tracks_closed_form() {
        // Survivor counts only; the ordering of removals does not matter here.
        let mut s = 1_000_000usize;
        for k in 1..=5 {
            s -= (0.16 * s as f64).floor() as usize;
            let frac = s as f64 / 1e6;
            assert!((frac - 0.84f64.powi(k)).abs() < 1e-3);
        }
    }

    #[test]
    fn malformed_encoding_reports_offset() {
        let spec = small_spec();
        let mut bytes = MaskSet::ones(&spec).encode();
        bytes.truncate(bytes.len() - 1);
        match decode_mask(&bytes) {
            Err(PruneError::Malformed { offset, .. }) => assert_eq!(offset, 4 + 4 + 8 + 1 + 4 + 4 + 8),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn encoding_layout_is_pinned() {
        let m = MaskSet { layers: vec![LayerMask { shape: vec![2, 5], keep: vec![true, false, true, true, false, false, false, false, false, true] }] };
        let bytes = m.encode();
        assert_eq!(&bytes[..16], &[0, 0, 0, 0, 2, 0, 0, 0, 2, 0, 0, 0, 5, 0, 0, 0]);
        assert_eq!(&bytes[16..], &[0b0000_1101, 0b0000_0010]);
    }

    #[test]
    fn digest_chain_detects_tampering() {
        let spec = small_spec();
        let m0 = MaskSet::ones(&spec);
        let mut m1 = m0.clone();
        m1.layers[0].keep[1] = false;
        let chain = vec![m0.clone(), m1.clone()];
        let d = mask_chain_digests(&chain);
        assert!(verify_mask_chain(&chain, &d));
        assert!(!verify_mask_chain(&[m1, m0], &d));
    }

    fn mask_strategy() -> impl Strategy<Value = MaskSet> {
        prop::collection::vec((1usize..4, 1usize..6), 1..4).prop_flat_map(|dims| {
            let layers: Vec<_> = dims
                .into_iter()
                .map(|(a, b)| prop::collection::vec(any::<bool>(), a * b).prop_map(move |keep| LayerMask { shape: vec![a, b], keep }))
                .collect();
            layers.prop_map(|layers| MaskSet { layers })
        })
    }

    proptest! {
        #[test]
        fn encode_decode_roundtrip(m in mask_strategy()) {
            prop_assert_eq!(decode_mask(&m.encode()).unwrap(), m);
        }

        #[test]
        fn pruning_is_monotone_and_exact(weights in prop::collection::vec(-3.0f64..3.0, 1..200), fraction in 0.01f64..0.99) {
            let (p, m) = one_layer(weights);
            let s = m.surviving_count();
            let out = select_prune(&lamp_scores(&p, &m).unwrap(), &m, fraction).unwrap();
            prop_assert!(out.mask.is_subset_of(&m));
            prop_assert_eq!(out.mask.surviving_count(), s - (fraction * s as f64).floor() as usize);
        }
    }
}
