//! Space-time attention read: key/value projection, memory concatenation,
//! and the dense read in which each query pixel attends over every pixel
//! of every stored slot. The read cost depends on the slot count, never on
//! how many frames the sequence has produced.

use crate::error::{Error, Result};
use crate::nn::{ConvLayer, HasParams, Init};
use crate::scalar::Scalar;
use crate::tensor::{chw, ops, Tensor};

/// Which side of the read a key/value pair belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KvRole {
    Query,
    Memory,
}

/// Paired key (D_k×H×W) and value (D_v×H×W) maps for one feature map.
#[derive(Clone)]
pub struct KeyValue<T: Scalar> {
    pub key: Tensor<T>,
    pub value: Tensor<T>,
    pub role: KvRole,
}

impl<T: Scalar> KeyValue<T> {
    pub fn spatial(&self) -> (usize, usize) {
        let s = self.key.shape();
        (s[1], s[2])
    }
}

/// Two parallel convolutional projections; the query side and the memory
/// side each own a separate parameter set.
#[derive(Clone)]
pub struct KvProjector<T: Scalar> {
    pub key: ConvLayer<T>,
    pub value: ConvLayer<T>,
    pub role: KvRole,
}

impl<T: Scalar> KvProjector<T> {
    pub fn new(in_channels: usize, d_k: usize, d_v: usize, role: KvRole, init: &mut Init) -> Self {
        KvProjector {
            key: ConvLayer::new(in_channels, d_k, 3, 1, 1, init),
            value: ConvLayer::new(in_channels, d_v, 3, 1, 1, init),
            role,
        }
    }

    pub fn project(&self, x: &Tensor<T>) -> Result<KeyValue<T>> {
        if x.rank() != 3 || x.shape()[0] != self.key.in_channels() {
            return Err(Error::dim(
                "project_kv",
                format!(
                    "input shape {:?} vs expected {} channels",
                    x.shape(),
                    self.key.in_channels()
                ),
            ));
        }
        Ok(KeyValue { key: self.key.forward(x)?, value: self.value.forward(x)?, role: self.role })
    }
}

impl<T: Scalar> HasParams<T> for KvProjector<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        self.key.visit(&crate::nn::join(prefix, "key"), f);
        self.value.visit(&crate::nn::join(prefix, "value"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        self.key.visit_mut(&crate::nn::join(prefix, "key"), f);
        self.value.visit_mut(&crate::nn::join(prefix, "value"), f);
    }
}

/// Concatenated memory-side keys/values: one row per memory position,
/// ordered slot-major then row-major within a slot.
#[derive(Clone)]
pub struct MemoryKv<T: Scalar> {
    /// P×D_k where P = slots · H · W.
    pub key: Tensor<T>,
    /// P×D_v.
    pub value: Tensor<T>,
    pub slots: usize,
    pub spatial: (usize, usize),
}

impl<T: Scalar> MemoryKv<T> {
    pub fn positions(&self) -> usize {
        self.key.shape()[0]
    }

    /// Recover `(slot, pixel)` from a memory-position row.
    pub fn decode_position(&self, pos: usize) -> (usize, usize) {
        let hw = self.spatial.0 * self.spatial.1;
        (pos / hw, pos % hw)
    }
}

/// Stack per-slot key/value maps into the position-major memory layout.
pub fn concat_memory_kv<T: Scalar>(bank_kvs: &[KeyValue<T>]) -> Result<MemoryKv<T>> {
    if bank_kvs.is_empty() {
        return Err(Error::State("cannot read from an empty memory".into()));
    }
    let (dk, h, w) = chw(&bank_kvs[0].key, "concat_memory_kv")?;
    let (dv, _, _) = chw(&bank_kvs[0].value, "concat_memory_kv")?;
    let mut keys = Vec::with_capacity(bank_kvs.len());
    let mut values = Vec::with_capacity(bank_kvs.len());
    for kv in bank_kvs {
        if kv.key.shape() != [dk, h, w] || kv.value.shape() != [dv, h, w] {
            return Err(Error::dim(
                "concat_memory_kv",
                format!(
                    "slot kv shapes {:?}/{:?} vs {:?}/{:?}",
                    kv.key.shape(),
                    kv.value.shape(),
                    [dk, h, w],
                    [dv, h, w]
                ),
            ));
        }
        keys.push(ops::transpose2d(&ops::reshape(&kv.key, &[dk, h * w])?)?);
        values.push(ops::transpose2d(&ops::reshape(&kv.value, &[dv, h * w])?)?);
    }
    let key_refs: Vec<&Tensor<T>> = keys.iter().collect();
    let value_refs: Vec<&Tensor<T>> = values.iter().collect();
    Ok(MemoryKv {
        key: ops::concat(&key_refs, 0)?,
        value: ops::concat(&value_refs, 0)?,
        slots: bank_kvs.len(),
        spatial: (h, w),
    })
}

/// Readout: retrieved memory value concatenated with the query value,
/// 2·D_v×H×W at the query's spatial dims.
#[derive(Clone)]
pub struct ReadOut<T: Scalar> {
    pub features: Tensor<T>,
}

/// Dense space-time read. Raw dot-product logits per the published update
/// rule; `scale_logits` optionally applies the transformer-style 1/sqrt(D_k).
pub fn memory_read<T: Scalar>(
    q: &KeyValue<T>,
    m: &MemoryKv<T>,
    scale_logits: bool,
) -> Result<ReadOut<T>> {
    Ok(memory_read_with_weights(q, m, scale_logits)?.0)
}

/// As [`memory_read`] but also returns the HW×P attention weights
/// (used by diagnostics and tests).
pub fn memory_read_with_weights<T: Scalar>(
    q: &KeyValue<T>,
    m: &MemoryKv<T>,
    scale_logits: bool,
) -> Result<(ReadOut<T>, Tensor<T>)> {
    let (dk, h, w) = chw(&q.key, "memory_read")?;
    let (dv, _, _) = chw(&q.value, "memory_read")?;
    if m.key.shape()[1] != dk {
        return Err(Error::dim(
            "memory_read",
            format!("query D_k {} vs memory D_k {}", dk, m.key.shape()[1]),
        ));
    }
    if m.value.shape()[1] != dv {
        return Err(Error::dim(
            "memory_read",
            format!("query D_v {} vs memory D_v {}", dv, m.value.shape()[1]),
        ));
    }
    let hw = h * w;
    let qk = ops::transpose2d(&ops::reshape(&q.key, &[dk, hw])?)?; // HW×D_k
    let mut logits = ops::matmul(&qk, &ops::transpose2d(&m.key)?)?; // HW×P
    if scale_logits {
        logits = ops::scale_const(&logits, T::from_f64(1.0 / (dk as f64).sqrt()));
    }
    let weights = ops::softmax_last(&logits);
    let retrieved = ops::matmul(&weights, &m.value)?; // HW×D_v
    let vq = ops::transpose2d(&ops::reshape(&q.value, &[dv, hw])?)?; // HW×D_v
    let stacked = ops::concat(&[&retrieved, &vq], 1)?; // HW×2D_v
    let features = ops::reshape(&ops::transpose2d(&stacked)?, &[2 * dv, h, w])?;
    Ok((ReadOut { features }, weights))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn kv(key: Tensor<f64>, value: Tensor<f64>, role: KvRole) -> KeyValue<f64> {
        KeyValue { key, value, role }
    }

    #[test]
    fn single_position_read_is_exact_concat() {
        let q = kv(
            Tensor::from_vec(&[2, 1, 1], vec![0.3, -1.0]).unwrap(),
            Tensor::from_vec(&[3, 1, 1], vec![5.0, 6.0, 7.0]).unwrap(),
            KvRole::Query,
        );
        let mslot = kv(
            Tensor::from_vec(&[2, 1, 1], vec![2.0, 0.4]).unwrap(),
            Tensor::from_vec(&[3, 1, 1], vec![-1.0, -2.0, -3.0]).unwrap(),
            KvRole::Memory,
        );
        let m = concat_memory_kv(&[mslot]).unwrap();
        let out = memory_read(&q, &m, false).unwrap();
        assert_eq!(out.features.shape(), &[6, 1, 1]);
        assert_eq!(out.features.data(), &[-1.0, -2.0, -3.0, 5.0, 6.0, 7.0]);
    }

    #[test]
    fn identical_memory_keys_average_values() {
        // two slots, 1×1 maps, equal keys: retrieved = mean of values
        let q = kv(
            Tensor::from_vec(&[1, 1, 1], vec![0.7]).unwrap(),
            Tensor::from_vec(&[1, 1, 1], vec![0.0]).unwrap(),
            KvRole::Query,
        );
        let s1 = kv(
            Tensor::from_vec(&[1, 1, 1], vec![1.3]).unwrap(),
            Tensor::from_vec(&[1, 1, 1], vec![10.0]).unwrap(),
            KvRole::Memory,
        );
        let s2 = kv(
            Tensor::from_vec(&[1, 1, 1], vec![1.3]).unwrap(),
            Tensor::from_vec(&[1, 1, 1], vec![20.0]).unwrap(),
            KvRole::Memory,
        );
        let m = concat_memory_kv(&[s1, s2]).unwrap();
        let out = memory_read(&q, &m, false).unwrap();
        assert!((out.features.data()[0] - 15.0).abs() < 1e-12);
    }

    #[test]
    fn memory_positions_slot_major_and_decodable() {
        let mk = |v: f64| {
            kv(
                Tensor::from_fn(&[1, 2, 2], |i| v + i as f64),
                Tensor::from_fn(&[1, 2, 2], |i| -v - i as f64),
                KvRole::Memory,
            )
        };
        let slots = [mk(0.0), mk(100.0), mk(200.0)];
        let m = concat_memory_kv(&slots).unwrap();
        assert_eq!(m.positions(), 12);
        for pos in 0..12 {
            let (slot, pixel) = m.decode_position(pos);
            assert_eq!(slot, pos / 4);
            assert_eq!(pixel, pos % 4);
            let expected = slots[slot].key.data()[pixel];
            assert_eq!(m.key.data()[pos], expected);
        }
    }

    #[test]
    fn empty_bank_is_state_error() {
        let slots: Vec<KeyValue<f64>> = vec![];
        assert!(matches!(concat_memory_kv(&slots), Err(Error::State(_))));
    }

    #[test]
    fn weights_sum_to_one_per_query_pixel() {
        let q = kv(
            Tensor::from_fn(&[3, 2, 2], |i| (i as f64 * 0.73).sin()),
            Tensor::from_fn(&[2, 2, 2], |i| (i as f64).cos()),
            KvRole::Query,
        );
        let s1 = kv(
            Tensor::from_fn(&[3, 2, 2], |i| (i as f64 * 1.1).cos()),
            Tensor::from_fn(&[2, 2, 2], |i| i as f64 * 0.5),
            KvRole::Memory,
        );
        let s2 = kv(
            Tensor::from_fn(&[3, 2, 2], |i| (i as f64 * 0.37).sin() - 0.2),
            Tensor::from_fn(&[2, 2, 2], |i| -(i as f64) * 0.25),
            KvRole::Memory,
        );
        let m = concat_memory_kv(&[s1, s2]).unwrap();
        let (_, weights) = memory_read_with_weights(&q, &m, false).unwrap();
        for r in 0..4 {
            let s: f64 = weights.data()[r * 8..(r + 1) * 8].iter().sum();
            assert!((s - 1.0).abs() < 1e-7, "row {} sums to {}", r, s);
        }
    }
}
