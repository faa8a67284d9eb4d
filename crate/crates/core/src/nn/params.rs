use std::collections::BTreeMap;
use std::io::{Read, Write};

use rand::Rng;

use super::{NnError, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    /// Frozen parameters never receive optimizer updates.
    pub frozen: bool,
}

/// Named, ordered collection of every trainable tensor in a model.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        self.params.push(Param { name, value, frozen: false });
        ParamId(self.params.len() - 1)
    }

    /// Uniform in ±1/√fan_in.
    pub fn add_uniform<R: Rng>(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        fan_in: usize,
        rng: &mut R,
    ) -> ParamId {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let data = (0..rows * cols).map(|_| rng.gen_range(-bound..=bound)).collect();
        self.add(name, Tensor::from_vec(rows, cols, data))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn set_frozen(&mut self, id: ParamId, frozen: bool) {
        self.params[id.0].frozen = frozen;
    }

    pub fn is_frozen(&self, id: ParamId) -> bool {
        self.params[id.0].frozen
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    /// Ids whose name starts with `prefix.` or equals `prefix`.
    pub fn group(&self, prefix: &str) -> Vec<ParamId> {
        self.iter()
            .filter(|(_, p)| p.name == prefix || p.name.strip_prefix(prefix).is_some_and(|r| r.starts_with('.')))
            .map(|(id, _)| id)
            .collect()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Copies values of every parameter under `from` onto the same-suffixed parameter under `to`.
    pub fn copy_group(&mut self, from: &str, to: &str) -> Result<(), NnError> {
        for id in self.group(from) {
            let suffix = self.params[id.0].name[from.len()..].to_string();
            let target =
                self.find(&format!("{to}{suffix}")).ok_or_else(|| NnError::MissingParam(format!("{to}{suffix}")))?;
            if self.value(target).shape() != self.value(id).shape() {
                return Err(NnError::ShapeMismatch {
                    op: "copy_group",
                    left: self.value(id).shape(),
                    right: self.value(target).shape(),
                });
            }
            let v = self.params[id.0].value.clone();
            self.params[target.0].value = v;
        }
        Ok(())
    }

    /// Overwrites values from `other`, matching parameters by name and shape.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<(), NnError> {
        for (_, p) in other.iter() {
            let id = self.find(&p.name).ok_or_else(|| NnError::MissingParam(p.name.clone()))?;
            if self.value(id).shape() != p.value.shape() {
                return Err(NnError::ShapeMismatch {
                    op: "load",
                    left: self.value(id).shape(),
                    right: p.value.shape(),
                });
            }
            self.params[id.0].value = p.value.clone();
        }
        Ok(())
    }

    /// Binary checkpoint: magic, version, then per parameter its name, frozen flag, shape and
    /// little-endian row-major `f64` data.
    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&(self.params.len() as u64).to_le_bytes())?;
        for p in &self.params {
            let name = p.name.as_bytes();
            w.write_all(&(name.len() as u64).to_le_bytes())?;
            w.write_all(name)?;
            w.write_all(&[p.frozen as u8])?;
            w.write_all(&(p.value.rows() as u64).to_le_bytes())?;
            w.write_all(&(p.value.cols() as u64).to_le_bytes())?;
            for v in p.value.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Self, NnError> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(NnError::Checkpoint("bad magic".into()));
        }
        let version = read_u32(&mut r)?;
        if version != CHECKPOINT_VERSION {
            return Err(NnError::Checkpoint(format!("unsupported version {version}")));
        }
        let count = read_u64(&mut r)? as usize;
        let mut store = ParamStore::new();
        for _ in 0..count {
            let name_len = read_u64(&mut r)? as usize;
            if name_len > 4096 {
                return Err(NnError::Checkpoint("parameter name too long".into()));
            }
            let mut name = vec![0u8; name_len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name).map_err(|_| NnError::Checkpoint("non-utf8 name".into()))?;
            let mut flag = [0u8; 1];
            r.read_exact(&mut flag)?;
            let rows = read_u64(&mut r)? as usize;
            let cols = read_u64(&mut r)? as usize;
            let mut data = Vec::with_capacity(rows * cols);
            let mut buf = [0u8; 8];
            for _ in 0..rows * cols {
                r.read_exact(&mut buf)?;
                data.push(f64::from_le_bytes(buf));
            }
            let id = store.add(name, Tensor::from_vec(rows, cols, data));
            store.set_frozen(id, flag[0] != 0);
        }
        Ok(store)
    }
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"HSDC";
const CHECKPOINT_VERSION: u32 = 1;

fn read_u32<R: Read>(r: &mut R) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> std::io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

/// Gradients keyed by parameter. Parameters absent from the map have zero gradient.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Gradients {
    grads: BTreeMap<ParamId, Tensor>,
}

impl Gradients {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads.get(&id)
    }

    /// Gradient for `id`, or zeros shaped like the parameter when it was unreachable.
    pub fn get_or_zero(&self, id: ParamId, store: &ParamStore) -> Tensor {
        self.grads.get(&id).cloned().unwrap_or_else(|| {
            let (r, c) = store.value(id).shape();
            Tensor::zeros(r, c)
        })
    }

    pub fn accumulate(&mut self, id: ParamId, g: &Tensor) {
        match self.grads.get_mut(&id) {
            Some(t) => t.add_assign(g),
            None => {
                self.grads.insert(id, g.clone());
            }
        }
    }

    pub fn merge(&mut self, other: &Gradients, scale: f64) {
        for (id, g) in &other.grads {
            match self.grads.get_mut(id) {
                Some(t) => t.add_scaled(g, scale),
                None => {
                    let mut t = g.clone();
                    t.scale(scale);
                    self.grads.insert(*id, t);
                }
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for g in self.grads.values_mut() {
            g.scale(s);
        }
    }

    pub fn retain(&mut self, keep: impl Fn(ParamId) -> bool) {
        self.grads.retain(|id, _| keep(*id));
    }

    pub fn global_norm(&self) -> f64 {
        self.grads.values().map(Tensor::sum_sq).sum::<f64>().sqrt()
    }

    /// Rescales so the global L2 norm is at most `max_norm`; returns the norm before clipping.
    pub fn clip_global_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.global_norm();
        if norm > max_norm && norm > 0.0 {
            self.scale(max_norm / norm);
        }
        norm
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.grads.iter().map(|(k, v)| (*k, v))
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        store.add_uniform("a.w", 3, 4, 4, &mut rng);
        let b = store.add("a.b", Tensor::row_vector(vec![1e-300, -0.1, f64::MIN_POSITIVE]));
        store.set_frozen(b, true);
        let mut buf = Vec::new();
        store.write_checkpoint(&mut buf).unwrap();
        let back = ParamStore::read_checkpoint(buf.as_slice()).unwrap();
        assert_eq!(back, store);
        for ((_, p), (_, q)) in store.iter().zip(back.iter()) {
            let bits: Vec<u64> = p.value.data().iter().map(|v| v.to_bits()).collect();
            let bits2: Vec<u64> = q.value.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits, bits2);
        }
    }

    #[test]
    fn truncated_checkpoint_is_rejected() {
        let mut store = ParamStore::new();
        store.add("x", Tensor::zeros(2, 2));
        let mut buf = Vec::new();
        store.write_checkpoint(&mut buf).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(ParamStore::read_checkpoint(buf.as_slice()).is_err());
        assert!(ParamStore::read_checkpoint(&b"NOPE"[..]).is_err());
    }

    #[test]
    fn group_matches_dotted_prefix_only() {
        let mut store = ParamStore::new();
        store.add("f_ta.fwd.w_ih", Tensor::zeros(1, 1));
        store.add("f_ta.bwd.w_ih", Tensor::zeros(1, 1));
        store.add("f_tax.w", Tensor::zeros(1, 1));
        assert_eq!(store.group("f_ta").len(), 2);
    }

    #[test]
    fn clipping_bounds_the_norm() {
        let mut g = Gradients::new();
        g.accumulate(ParamId(0), &Tensor::row_vector(vec![3.0, 4.0]));
        let before = g.clip_global_norm(1.0);
        assert_eq!(before, 5.0);
        assert!((g.global_norm() - 1.0).abs() < 1e-12);
        let mut small = Gradients::new();
        small.accumulate(ParamId(0), &Tensor::row_vector(vec![0.3, 0.4]));
        small.clip_global_norm(5.0);
        assert_eq!(small.get(ParamId(0)).unwrap().data(), &[0.3, 0.4]);
    }
}
