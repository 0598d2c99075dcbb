use std::collections::HashMap;
use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::tensorcore::{DType, Scalar, Tensor};

const MAGIC: &[u8; 4] = b"MIUK";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Learning-rate group a parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    Encoder,
    Other,
}

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
struct Entry<T> {
    name: String,
    group: ParamGroup,
    value: Tensor<T>,
    grad: Vec<T>,
    first_moment: Vec<T>,
    second_moment: Vec<T>,
}

/// Named trainable tensors with gradient accumulators and Adam state.
#[derive(Debug, Clone)]
pub struct ParamStore<T> {
    entries: Vec<Entry<T>>,
    by_name: HashMap<String, ParamId>,
    step: u64,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Per-parameter gradients produced by one backward pass.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    slots: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn new(num_params: usize) -> Self {
        Gradients {
            slots: vec![None; num_params],
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&[T]> {
        self.slots.get(id.0).and_then(|s| s.as_deref())
    }

    pub(crate) fn add_into(&mut self, id: ParamId, grad: &[T]) {
        if self.slots.len() <= id.0 {
            self.slots.resize(id.0 + 1, None);
        }
        match &mut self.slots[id.0] {
            Some(acc) => acc.iter_mut().zip(grad).for_each(|(a, &g)| *a = *a + g),
            slot @ None => *slot = Some(grad.to_vec()),
        }
    }

    /// Adds `other` into `self`, slot by slot.
    pub fn merge(&mut self, other: &Gradients<T>) {
        for (i, slot) in other.slots.iter().enumerate() {
            if let Some(g) = slot {
                self.add_into(ParamId(i), g);
            }
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &[T])> {
        self.slots
            .iter()
            .enumerate()
            .filter_map(|(i, s)| s.as_deref().map(|g| (ParamId(i), g)))
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            entries: Vec::new(),
            by_name: HashMap::new(),
            step: 0,
        }
    }

    pub fn add(&mut self, name: &str, group: ParamGroup, value: Tensor<T>) -> Result<ParamId> {
        if self.by_name.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter name `{name}`")));
        }
        let id = ParamId(self.entries.len());
        let n = value.numel();
        self.entries.push(Entry {
            name: name.to_string(),
            group,
            value: value.with_requires_grad(true),
            grad: vec![T::zero(); n],
            first_moment: vec![T::zero(); n],
            second_moment: vec![T::zero(); n],
        });
        self.by_name.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn group(&self, id: ParamId) -> ParamGroup {
        self.entries[id.0].group
    }

    pub fn set_group(&mut self, id: ParamId, group: ParamGroup) {
        self.entries[id.0].group = group;
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn shape(&self, id: ParamId) -> &[usize] {
        self.entries[id.0].value.shape()
    }

    pub fn value(&self, id: ParamId) -> &[T] {
        self.entries[id.0].value.data()
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut [T] {
        self.entries[id.0].value.data_mut()
    }

    pub fn grad(&self, id: ParamId) -> &[T] {
        &self.entries[id.0].grad
    }

    pub fn num_elements(&self) -> usize {
        self.entries.iter().map(|e| e.value.numel()).sum()
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Adds a backward result into the persistent accumulators.
    pub fn accumulate(&mut self, grads: &Gradients<T>) {
        for (id, g) in grads.iter() {
            if let Some(entry) = self.entries.get_mut(id.0) {
                entry
                    .grad
                    .iter_mut()
                    .zip(g)
                    .for_each(|(a, &b)| *a = *a + b);
            }
        }
    }

    pub fn zero_grad(&mut self) {
        for e in &mut self.entries {
            e.grad.iter_mut().for_each(|g| *g = T::zero());
        }
    }

    /// One bias-corrected Adam update using the accumulated gradients.
    pub fn adam_step(&mut self, cfg: &AdamConfig, lr: impl Fn(ParamGroup) -> f64) {
        self.step += 1;
        let t = self.step as i32;
        let b1 = T::of(cfg.beta1);
        let b2 = T::of(cfg.beta2);
        let one = T::one();
        let bc1 = T::of(1.0 - cfg.beta1.powi(t));
        let bc2 = T::of(1.0 - cfg.beta2.powi(t));
        let eps = T::of(cfg.eps);
        for e in &mut self.entries {
            let rate = T::of(lr(e.group));
            let data = e.value.data_mut();
            for i in 0..data.len() {
                let g = e.grad[i];
                let m = b1 * e.first_moment[i] + (one - b1) * g;
                let v = b2 * e.second_moment[i] + (one - b2) * g * g;
                e.first_moment[i] = m;
                e.second_moment[i] = v;
                let m_hat = m / bc1;
                let v_hat = v / bc2;
                data[i] = data[i] - rate * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }

    pub fn all_finite(&self) -> std::result::Result<(), Error> {
        for e in &self.entries {
            if let Some(index) = e.value.data().iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    param: e.name.clone(),
                    index,
                });
            }
        }
        Ok(())
    }

    /// Writes values (not optimizer state) in the little-endian checkpoint format.
    pub fn save<W: Write>(&self, mut out: W) -> Result<()> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            buf.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
            buf.extend_from_slice(e.name.as_bytes());
            buf.push(T::DTYPE as u8);
            let shape = e.value.shape();
            buf.extend_from_slice(&(shape.len() as u32).to_le_bytes());
            for &d in shape {
                buf.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in e.value.data() {
                v.write_le(&mut buf);
            }
        }
        out.write_all(&buf)?;
        Ok(())
    }

    /// Reads a checkpoint; values stored at another precision are converted.
    pub fn load<R: Read>(mut input: R) -> Result<Self> {
        let mut bytes = Vec::new();
        input.read_to_end(&mut bytes)?;
        let mut cur = Cursor { bytes: &bytes, pos: 0 };
        if cur.take(4)? != MAGIC {
            return Err(Error::Format {
                offset: 0,
                msg: "bad magic, expected MIUK".into(),
            });
        }
        let version = cur.u32()?;
        if version != VERSION {
            return Err(Error::Format {
                offset: 4,
                msg: format!("unsupported checkpoint version {version}"),
            });
        }
        let count = cur.u32()? as usize;
        let mut store = ParamStore::new();
        for _ in 0..count {
            let name_len = cur.u32()? as usize;
            let name_at = cur.pos;
            let name = std::str::from_utf8(cur.take(name_len)?)
                .map_err(|_| Error::Format {
                    offset: name_at,
                    msg: "parameter name is not UTF-8".into(),
                })?
                .to_string();
            let tag_at = cur.pos;
            let dtype = DType::from_tag(cur.take(1)?[0]).ok_or_else(|| Error::Format {
                offset: tag_at,
                msg: "unknown dtype tag".into(),
            })?;
            let rank = cur.u32()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(cur.u32()? as usize);
            }
            let numel: usize = shape.iter().product();
            let raw = cur.take(numel * dtype.width())?;
            let data: Vec<T> = match dtype {
                DType::F32 => raw
                    .chunks_exact(4)
                    .map(|c| T::of(f32::from_le_bytes(c.try_into().unwrap()) as f64))
                    .collect(),
                DType::F64 => raw
                    .chunks_exact(8)
                    .map(|c| T::of(f64::from_le_bytes(c.try_into().unwrap())))
                    .collect(),
            };
            let group = if name.starts_with("encoder.") {
                ParamGroup::Encoder
            } else {
                ParamGroup::Other
            };
            store.add(&name, group, Tensor::new(shape, data)?)?;
        }
        if cur.pos != bytes.len() {
            return Err(Error::Format {
                offset: cur.pos,
                msg: "trailing bytes after last entry".into(),
            });
        }
        Ok(store)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format {
                offset: self.pos,
                msg: format!("truncated: need {n} bytes"),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_store() -> ParamStore<f32> {
        let mut s = ParamStore::new();
        s.add(
            "encoder.projection",
            ParamGroup::Encoder,
            Tensor::from_f64(&[2, 3], &[0.1, -0.2, 0.3, 1e-7, 5.5, -9.0]).unwrap(),
        )
        .unwrap();
        s.add("gate.bias", ParamGroup::Other, Tensor::from_f64(&[2], &[0.0, 1.0]).unwrap())
            .unwrap();
        s
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut s = sample_store();
        assert!(s
            .add("gate.bias", ParamGroup::Other, Tensor::zeros(&[1]))
            .is_err());
    }

    #[test]
    fn save_load_bit_identical() {
        let s = sample_store();
        let mut buf = Vec::new();
        s.save(&mut buf).unwrap();
        let back = ParamStore::<f32>::load(&buf[..]).unwrap();
        assert_eq!(back.len(), 2);
        for id in s.ids() {
            assert_eq!(s.name(id), back.name(id));
            assert_eq!(s.shape(id), back.shape(id));
            let a: Vec<u32> = s.value(id).iter().map(|v| v.to_bits()).collect();
            let b: Vec<u32> = back.value(id).iter().map(|v| v.to_bits()).collect();
            assert_eq!(a, b);
        }
        assert_eq!(back.group(back.id("encoder.projection").unwrap()), ParamGroup::Encoder);
    }

    #[test]
    fn truncated_checkpoint_reports_offset() {
        let s = sample_store();
        let mut buf = Vec::new();
        s.save(&mut buf).unwrap();
        buf.truncate(buf.len() - 3);
        match ParamStore::<f32>::load(&buf[..]) {
            Err(Error::Format { offset, .. }) => assert!(offset > 12),
            other => panic!("expected format error, got {other:?}"),
        }
        assert!(matches!(
            ParamStore::<f32>::load(&b"NOPE"[..]),
            Err(Error::Format { offset: 0, .. })
        ));
    }

    #[test]
    fn accumulate_adds_and_zero_clears() {
        let mut s = sample_store();
        let id = s.id("gate.bias").unwrap();
        let mut g = Gradients::new(s.len());
        g.add_into(id, &[1.0, 2.0]);
        s.accumulate(&g);
        s.accumulate(&g);
        assert_eq!(s.grad(id), &[2.0, 4.0]);
        s.zero_grad();
        assert_eq!(s.grad(id), &[0.0, 0.0]);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut s = ParamStore::<f64>::new();
        let id = s.add("w", ParamGroup::Other, Tensor::vector(vec![1.0, 1.0])).unwrap();
        let mut g = Gradients::new(1);
        g.add_into(id, &[0.5, -3.0]);
        s.accumulate(&g);
        s.adam_step(&AdamConfig::default(), |_| 0.1);
        // bias-corrected first step is lr * sign(g)
        assert!((s.value(id)[0] - 0.9).abs() < 1e-6);
        assert!((s.value(id)[1] - 1.1).abs() < 1e-6);
    }
}
