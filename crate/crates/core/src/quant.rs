//! Blockwise dynamic 8-bit storage for optimizer states.
//!
//! Each block of `block_size` elements keeps its absolute maximum as an
//! `f64` scale and one byte per element indexing a fixed signed codebook
//! whose entries are dense near zero and sparse near +-1.

use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::Buffer;
use crate::optim::{MomentState, ObjectiveOptimizer, SlotRole, StateSlots, StepOutcome};
use crate::schedule::ObjectiveId;

pub const DEFAULT_BLOCK_SIZE: usize = 256;

const EXPONENT_LEVELS: i32 = 7;

/// The 256-entry signed dynamic map, sorted ascending.
///
/// For each exponent level `i` in `0..7` the midpoints of
/// `linspace(0.1, 1, 2^i + 1)` are scaled by `10^(i - 6)` and added with
/// both signs; `0` and `1` complete the table.
pub fn codebook() -> &'static [f64; 256] {
    static TABLE: OnceLock<[f64; 256]> = OnceLock::new();
    TABLE.get_or_init(|| {
        let mut values = Vec::with_capacity(256);
        for i in 0..EXPONENT_LEVELS {
            let n = (1usize << i) + 1;
            let scale = 10f64.powi(i - (EXPONENT_LEVELS - 1));
            let edge = |k: usize| 0.1 + 0.9 * k as f64 / (n - 1) as f64;
            for k in 0..n - 1 {
                let mid = (edge(k) + edge(k + 1)) / 2.0;
                values.push(scale * mid);
                values.push(-scale * mid);
            }
        }
        values.push(0.0);
        values.push(1.0);
        values.sort_by(f64::total_cmp);
        values.try_into().expect("codebook has 256 entries")
    })
}

/// Largest distance between neighbouring codebook entries.
pub fn max_codebook_gap() -> f64 {
    codebook().windows(2).map(|w| w[1] - w[0]).fold(0.0, f64::max)
}

fn nearest_code(x: f64) -> u8 {
    let table = codebook();
    let hi = table.partition_point(|&c| c < x);
    if hi == 0 {
        return 0;
    }
    if hi == table.len() {
        return (table.len() - 1) as u8;
    }
    let lo = hi - 1;
    if x - table[lo] <= table[hi] - x {
        lo as u8
    } else {
        hi as u8
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedBuffer {
    codes: Vec<u8>,
    absmax: Vec<f64>,
    shape: Vec<usize>,
    block_size: usize,
}

impl QuantizedBuffer {
    pub fn quantize(x: &Buffer, block_size: usize) -> Result<Self> {
        if block_size == 0 {
            return Err(Error::invalid("block_size", "must be >= 1"));
        }
        x.check_finite("value to quantize")?;
        let mut codes = Vec::with_capacity(x.len());
        let mut absmax = Vec::with_capacity(x.len().div_ceil(block_size));
        for block in x.data().chunks(block_size) {
            let peak = block.iter().fold(0.0f64, |a, v| a.max(v.abs()));
            let scale = if peak == 0.0 { 1.0 } else { peak };
            codes.extend(block.iter().map(|v| nearest_code(v / scale)));
            absmax.push(scale);
        }
        Ok(Self {
            codes,
            absmax,
            shape: x.shape().to_vec(),
            block_size,
        })
    }

    pub fn dequantize(&self) -> Buffer {
        let table = codebook();
        let data = self
            .codes
            .chunks(self.block_size)
            .zip(&self.absmax)
            .flat_map(|(block, &scale)| block.iter().map(move |&c| table[c as usize] * scale))
            .collect();
        Buffer::new(self.shape.clone(), data).expect("codes match shape")
    }

    pub fn codes(&self) -> &[u8] {
        &self.codes
    }

    pub fn absmax(&self) -> &[f64] {
        &self.absmax
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn block_size(&self) -> usize {
        self.block_size
    }

    /// Stored size: one byte per code plus one `f64` scale per block.
    pub fn bytes(&self) -> usize {
        self.codes.len() + self.absmax.len() * std::mem::size_of::<f64>()
    }
}

/// Which state slots are kept in 8-bit form between steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuantSubset {
    #[default]
    None,
    Base,
    Delta,
    Both,
}

impl QuantSubset {
    pub fn selects(self, role: SlotRole) -> bool {
        matches!(
            (self, role),
            (QuantSubset::Both, _) | (QuantSubset::Base, SlotRole::Base) | (QuantSubset::Delta, SlotRole::Delta)
        )
    }
}

/// Wraps an optimizer so that the selected state slots are held as
/// [`QuantizedBuffer`]s between steps.
///
/// Around every step the selected slots are dequantized into the inner
/// optimizer, updated in `f64`, and quantized again; their `f64` storage is
/// released afterwards. A failed step keeps the previous codes.
#[derive(Debug, Clone)]
pub struct Quantized<O> {
    inner: O,
    subset: QuantSubset,
    block_size: usize,
    stored: Vec<Option<QuantizedBuffer>>,
}

impl<O: StateSlots> Quantized<O> {
    pub fn new(mut inner: O, subset: QuantSubset, block_size: usize) -> Result<Self> {
        if block_size == 0 {
            return Err(Error::invalid("block_size", "must be >= 1"));
        }
        let mut stored = Vec::new();
        for (role, slot) in inner.slots_mut() {
            if subset.selects(role) {
                stored.push(Some(QuantizedBuffer::quantize(&slot.value, block_size)?));
                slot.value = Buffer::zeros(&[0]);
            } else {
                stored.push(None);
            }
        }
        Ok(Self {
            inner,
            subset,
            block_size,
            stored,
        })
    }

    pub fn subset(&self) -> QuantSubset {
        self.subset
    }

    pub fn block_size(&self) -> usize {
        self.block_size
    }

    /// Inner optimizer; selected slots hold empty placeholders.
    pub fn inner(&self) -> &O {
        &self.inner
    }

    /// Change settings of the inner optimizer that are not stored state,
    /// such as the learning rate. Selected slots stay quantized.
    pub fn configure(&mut self, f: impl FnOnce(&mut O)) {
        f(&mut self.inner);
    }

    pub fn stored(&self) -> &[Option<QuantizedBuffer>] {
        &self.stored
    }

    /// Bytes the same states would take at full `f64` precision.
    pub fn full_precision_bytes(&self) -> usize {
        self.inner
            .slots()
            .iter()
            .zip(&self.stored)
            .map(|((_, s), q)| match q {
                Some(q) => q.codes.len(),
                None => s.value.len(),
            })
            .sum::<usize>()
            * std::mem::size_of::<f64>()
    }

    fn load(&mut self) {
        for ((_, slot), q) in self.inner.slots_mut().into_iter().zip(&self.stored) {
            if let Some(q) = q {
                slot.value = q.dequantize();
            }
        }
    }

    fn unload(&mut self) {
        for ((_, slot), q) in self.inner.slots_mut().into_iter().zip(&self.stored) {
            if q.is_some() {
                slot.value = Buffer::zeros(&[0]);
            }
        }
    }

    /// Run `f` with every slot materialized in `f64`, then re-quantize.
    pub fn with_states<R>(&mut self, f: impl FnOnce(&mut O) -> Result<R>) -> Result<R> {
        self.load();
        let result = f(&mut self.inner).and_then(|r| {
            let mut fresh = Vec::with_capacity(self.stored.len());
            for ((_, slot), q) in self.inner.slots().into_iter().zip(&self.stored) {
                fresh.push(match q {
                    Some(_) => Some(QuantizedBuffer::quantize(&slot.value, self.block_size)?),
                    None => None,
                });
            }
            Ok((r, fresh))
        });
        match result {
            Ok((r, fresh)) => {
                self.stored = fresh;
                self.unload();
                Ok(r)
            }
            Err(e) => {
                self.unload();
                Err(e)
            }
        }
    }

    /// Snapshot of every slot in `f64`, dequantizing the stored ones.
    pub fn materialized(&self) -> Vec<(SlotRole, MomentState)> {
        self.inner
            .slots()
            .into_iter()
            .zip(&self.stored)
            .map(|((role, s), q)| {
                let mut s = s.clone();
                if let Some(q) = q {
                    s.value = q.dequantize();
                }
                (role, s)
            })
            .collect()
    }
}

impl<O: StateSlots> StateSlots for Quantized<O> {
    fn slots(&self) -> Vec<(SlotRole, &MomentState)> {
        self.inner.slots()
    }

    fn slots_mut(&mut self) -> Vec<(SlotRole, &mut MomentState)> {
        self.inner.slots_mut()
    }

    fn state_bytes(&self) -> usize {
        self.inner
            .slots()
            .iter()
            .zip(&self.stored)
            .map(|((_, s), q)| match q {
                Some(q) => q.bytes(),
                None => s.value.len() * std::mem::size_of::<f64>(),
            })
            .sum()
    }
}

impl<O: ObjectiveOptimizer> ObjectiveOptimizer for Quantized<O> {
    fn step(&mut self, theta: &mut Buffer, g: &Buffer, objective: ObjectiveId) -> Result<StepOutcome> {
        if self.subset == QuantSubset::None {
            return self.inner.step(theta, g, objective);
        }
        self.with_states(|inner| inner.step(theta, g, objective))
    }

    fn set_lr(&mut self, lr: f64) {
        self.inner.set_lr(lr);
    }

    fn n_objectives(&self) -> usize {
        self.inner.n_objectives()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dual::DualState;
    use crate::optim::AdamWParams;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn codebook_shape() {
        let cb = codebook();
        assert!(cb.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(cb[255], 1.0);
        assert!(cb.contains(&0.0));
        assert!(cb[0] > -1.0 && cb[0] < -0.99);
        // symmetric apart from 0 and +1
        let positives: Vec<f64> = cb.iter().copied().filter(|&c| c > 0.0 && c < 1.0).collect();
        let negatives: Vec<f64> = cb.iter().copied().filter(|&c| c < 0.0).map(|c| -c).collect();
        assert_eq!(positives.len(), 127);
        let mut negatives = negatives;
        negatives.sort_by(f64::total_cmp);
        assert_eq!(positives, negatives);
    }

    #[test]
    fn largest_gap_is_in_the_top_level() {
        let gap = max_codebook_gap();
        assert!((gap - 0.9 / 64.0).abs() < 1e-12, "{gap}");
    }

    #[test]
    fn zero_block_is_exact() {
        let x = Buffer::zeros(&[300]);
        let q = QuantizedBuffer::quantize(&x, 256).unwrap();
        assert_eq!(q.absmax(), &[1.0, 1.0]);
        assert_eq!(q.dequantize(), x);
    }

    #[test]
    fn grid_aligned_input_is_lossless() {
        let a = 3.5;
        let data: Vec<f64> = codebook().iter().map(|c| c * a).collect();
        let x = Buffer::from_slice(&data);
        let q = QuantizedBuffer::quantize(&x, 256).unwrap();
        assert_eq!(q.absmax(), &[a]);
        assert_eq!(q.dequantize(), x);
    }

    fn roundtrip_error_bound_holds(data: &[f64], block_size: usize) {
        let x = Buffer::from_slice(data);
        let q = QuantizedBuffer::quantize(&x, block_size).unwrap();
        let y = q.dequantize();
        let half_gap = max_codebook_gap() / 2.0;
        for (i, (a, b)) in data.iter().zip(y.data()).enumerate() {
            let scale = q.absmax()[i / block_size];
            assert!((a - b).abs() <= scale * half_gap * (1.0 + 1e-12), "{a} -> {b}");
        }
    }

    #[test]
    fn uniform_block_error_within_half_gap() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let data: Vec<f64> = (0..4096).map(|_| rng.gen_range(-1.0..=1.0)).collect();
        roundtrip_error_bound_holds(&data, 256);
        // extreme negative hits the largest rounding distance
        roundtrip_error_bound_holds(&[-2.0, 2.0, 0.3], 3);
    }

    #[test]
    fn absmax_dominates_block() {
        let x = Buffer::from_slice(&[0.5, -4.0, 1.0, 0.25, 0.0]);
        let q = QuantizedBuffer::quantize(&x, 2).unwrap();
        assert_eq!(q.absmax(), &[4.0, 1.0, 1.0]);
        assert_eq!(q.dequantize().shape(), &[5]);
    }

    #[test]
    fn empty_and_invalid_inputs() {
        let e = Buffer::zeros(&[0]);
        let q = QuantizedBuffer::quantize(&e, 256).unwrap();
        assert_eq!(q.bytes(), 0);
        assert_eq!(q.dequantize(), e);
        assert!(QuantizedBuffer::quantize(&Buffer::from_slice(&[1.0, f64::INFINITY]), 4).is_err());
        assert!(QuantizedBuffer::quantize(&Buffer::from_slice(&[1.0]), 0).is_err());
    }

    #[test]
    fn sign_preserved_above_smallest_code() {
        let smallest = codebook().iter().copied().filter(|&c| c > 0.0).fold(f64::INFINITY, f64::min);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data: Vec<f64> = (0..2048).map(|_| rng.gen_range(-1.0..1.0) * 10f64.powi(rng.gen_range(-7..1))).collect();
        let x = Buffer::from_slice(&data);
        let q = QuantizedBuffer::quantize(&x, 64).unwrap();
        let y = q.dequantize();
        for (i, (a, b)) in data.iter().zip(y.data()).enumerate() {
            if a.abs() > q.absmax()[i / 64] * smallest {
                assert_eq!(a.signum(), b.signum(), "{a} -> {b}");
            }
        }
    }

    #[test]
    fn memory_ratio_below_limit() {
        let x = Buffer::zeros(&[4096]);
        let q = QuantizedBuffer::quantize(&x, DEFAULT_BLOCK_SIZE).unwrap();
        let ratio = q.bytes() as f64 / (x.len() * 8) as f64;
        assert!(ratio < 0.15, "{ratio}");
    }

    fn dual(shape: &[usize]) -> DualState {
        DualState::adamw(shape, 2, AdamWParams { lr: 0.01, ..AdamWParams::default() }).unwrap()
    }

    fn drive(opt: &mut dyn ObjectiveOptimizer, theta: &mut Buffer, steps: u64) {
        for t in 1..=steps {
            let obj = if t % 6 == 1 { ObjectiveId::FORGET } else { ObjectiveId::RETAIN };
            let g = theta.map(|x| x - 0.5 + 0.01 * t as f64);
            opt.step(theta, &g, obj).unwrap();
        }
    }

    #[test]
    fn subset_none_is_pass_through() {
        let mut plain = dual(&[10]);
        let mut wrapped = Quantized::new(dual(&[10]), QuantSubset::None, 4).unwrap();
        let (mut a, mut b) = (Buffer::filled(&[10], 1.0), Buffer::filled(&[10], 1.0));
        drive(&mut plain, &mut a, 60);
        drive(&mut wrapped, &mut b, 60);
        assert_eq!(a, b);
        assert_eq!(wrapped.state_bytes(), plain.state_bytes());
    }

    #[test]
    fn subsets_select_by_role() {
        let d = dual(&[8]);
        let base = Quantized::new(d.clone(), QuantSubset::Base, 4).unwrap();
        let delta = Quantized::new(d.clone(), QuantSubset::Delta, 4).unwrap();
        let both = Quantized::new(d, QuantSubset::Both, 4).unwrap();
        let count = |q: &Quantized<DualState>| q.stored().iter().filter(|s| s.is_some()).count();
        assert_eq!((count(&base), count(&delta), count(&both)), (2, 4, 6));
        assert_eq!(both.full_precision_bytes(), 6 * 8 * 8);
        assert!(both.state_bytes() < base.state_bytes());
    }

    #[test]
    fn quantized_states_stay_close_and_restore() {
        let mut plain = dual(&[32]);
        let mut wrapped = Quantized::new(dual(&[32]), QuantSubset::Both, 256).unwrap();
        let (mut a, mut b) = (Buffer::filled(&[32], 2.0), Buffer::filled(&[32], 2.0));
        drive(&mut plain, &mut a, 120);
        drive(&mut wrapped, &mut b, 120);
        assert!(b.all_finite());
        assert!(a.max_abs_diff(&b).unwrap() < 0.05);
        for (_, s) in wrapped.materialized() {
            assert_eq!(s.value.len(), 32);
        }
        assert!(wrapped.inner().base_m.value.is_empty());
    }

    #[test]
    fn failed_step_keeps_codes() {
        let mut wrapped = Quantized::new(dual(&[4]), QuantSubset::Both, 256).unwrap();
        let mut theta = Buffer::filled(&[4], 1.0);
        drive(&mut wrapped, &mut theta, 7);
        let before = (wrapped.stored().to_vec(), theta.clone());
        let bad = Buffer::from_slice(&[0.0, f64::NAN, 0.0, 0.0]);
        assert!(wrapped.step(&mut theta, &bad, ObjectiveId::RETAIN).is_err());
        assert_eq!((wrapped.stored().to_vec(), theta.clone()), before);
        assert!(wrapped.inner().base_m.value.is_empty());
        drive(&mut wrapped, &mut theta, 3);
    }

    /// Flip the sign of every block whose largest magnitude is negative.
    fn positive_extremes(mut data: Vec<f64>, block: usize) -> Vec<f64> {
        for chunk in data.chunks_mut(block) {
            let extreme = chunk.iter().copied().fold(0.0f64, |a, v| if v.abs() > a.abs() { v } else { a });
            if extreme < 0.0 {
                chunk.iter_mut().for_each(|v| *v = -*v);
            }
        }
        data
    }

    #[test]
    fn negative_extreme_shrinks_on_requantize() {
        // the codebook's most negative entry is above -1, so the block scale
        // of a roundtripped negative extreme drops
        let x = Buffer::from_slice(&[-2.0, 1.0]);
        let q = QuantizedBuffer::quantize(&x, 2).unwrap();
        let q2 = QuantizedBuffer::quantize(&q.dequantize(), 2).unwrap();
        assert_eq!(q.absmax(), &[2.0]);
        assert_eq!(q2.absmax(), &[-2.0 * codebook()[0]]);
        let flipped = QuantizedBuffer::quantize(&x.scale(-1.0), 2).unwrap();
        let again = QuantizedBuffer::quantize(&flipped.dequantize(), 2).unwrap();
        assert_eq!(again, flipped);
    }

    proptest! {
        #[test]
        fn power_of_two_scaling_is_exact(
            data in prop::collection::vec(-1e3f64..1e3, 1..200),
            k in -20i32..20,
            block in 1usize..64,
        ) {
            let x = Buffer::from_slice(&data);
            let alpha = 2f64.powi(k);
            let y = QuantizedBuffer::quantize(&x, block).unwrap().dequantize();
            let ys = QuantizedBuffer::quantize(&x.scale(alpha), block).unwrap().dequantize();
            prop_assert_eq!(ys, y.scale(alpha));
        }

        #[test]
        fn positive_scaling_is_equivariant(
            data in prop::collection::vec(-1e3f64..1e3, 1..200),
            alpha in 1e-3f64..1e3,
        ) {
            let x = Buffer::from_slice(&data);
            let q = QuantizedBuffer::quantize(&x, 32).unwrap();
            let qs = QuantizedBuffer::quantize(&x.scale(alpha), 32).unwrap();
            prop_assert_eq!(q.codes(), qs.codes());
            let y = q.dequantize().scale(alpha);
            let ys = qs.dequantize();
            for (a, b) in y.data().iter().zip(ys.data()) {
                prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1e-300));
            }
        }

        #[test]
        fn requantizing_is_a_fixed_point(data in prop::collection::vec(-1e3f64..1e3, 0..300), block in 1usize..300) {
            let x = Buffer::from_slice(&positive_extremes(data, block));
            let q = QuantizedBuffer::quantize(&x, block).unwrap();
            let q2 = QuantizedBuffer::quantize(&q.dequantize(), block).unwrap();
            prop_assert_eq!(q2.dequantize(), q.dequantize());
        }

        #[test]
        fn error_bound_random_blocks(data in prop::collection::vec(-1e6f64..1e6, 1..600), block in 1usize..300) {
            roundtrip_error_bound_holds(&data, block);
        }
    }
}
