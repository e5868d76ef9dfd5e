//! Named parameter storage, initialization and `PVTM` checkpoints.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::tensor::Tensor;
use super::AutodiffError;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"PVTM";
pub const CHECKPOINT_VERSION: u8 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// All learnable tensors of a model, with gradient buffers.
#[derive(Debug, Clone)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    grads: Vec<Tensor>,
    rng: ChaCha8Rng,
}

impl ParamStore {
    /// Empty store whose initializers draw from a generator seeded with `seed`.
    pub fn new(seed: u64) -> Self {
        ParamStore {
            names: Vec::new(),
            values: Vec::new(),
            grads: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn add_tensor(&mut self, name: &str, t: Tensor) -> ParamId {
        assert!(self.find(name).is_none(), "duplicate parameter name {name}");
        self.names.push(name.to_string());
        self.grads.push(Tensor::zeros(t.shape()));
        self.values.push(t);
        ParamId(self.values.len() - 1)
    }

    /// Kaiming-uniform weight: entries drawn from `U(-b, b)` with `b = sqrt(6 / fan_in)`.
    pub fn kaiming(&mut self, name: &str, shape: &[usize], fan_in: usize) -> ParamId {
        let bound = (6.0 / fan_in.max(1) as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| self.rng.random_range(-bound..bound)).collect();
        self.add_tensor(name, Tensor::new(shape, data).unwrap())
    }

    pub fn uniform(&mut self, name: &str, shape: &[usize], lo: f64, hi: f64) -> ParamId {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| self.rng.random_range(lo..hi)).collect();
        self.add_tensor(name, Tensor::new(shape, data).unwrap())
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.add_tensor(name, Tensor::zeros(shape))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.grads[id.0]
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.grads[id.0]
    }

    pub(crate) fn values(&self) -> &[Tensor] {
        &self.values
    }

    pub(crate) fn values_and_grads_mut(&mut self) -> (&mut [Tensor], &[Tensor]) {
        (&mut self.values, &self.grads)
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| g.fill(0.0));
    }

    /// Multiplies every gradient by `s` (used to average over a batch).
    pub fn scale_grads(&mut self, s: f64) {
        for g in &mut self.grads {
            g.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }

    /// Rounds every value to `f32` precision, matching a checkpoint roundtrip.
    pub fn round_to_f32(&mut self) {
        for v in &mut self.values {
            v.data_mut().iter_mut().for_each(|x| *x = *x as f32 as f64);
        }
    }

    /// Copies checkpoint values in, requiring identical names and shapes.
    pub fn load_values(&mut self, entries: &[(String, Tensor)]) -> Result<(), AutodiffError> {
        let bad = |m: String| Err(AutodiffError::Checkpoint(m));
        if entries.len() != self.values.len() {
            return bad(format!(
                "checkpoint has {} parameters, model expects {}",
                entries.len(),
                self.values.len()
            ));
        }
        for (i, (name, t)) in entries.iter().enumerate() {
            if name != &self.names[i] {
                return bad(format!("parameter {i} is {name:?}, model expects {:?}", self.names[i]));
            }
            if t.shape() != self.values[i].shape() {
                return bad(format!(
                    "parameter {name:?} has shape {:?}, model expects {:?}",
                    t.shape(),
                    self.values[i].shape()
                ));
            }
        }
        for (i, (_, t)) in entries.iter().enumerate() {
            self.values[i] = t.clone();
        }
        Ok(())
    }

    pub fn entries(&self) -> Vec<(String, Tensor)> {
        self.names.iter().cloned().zip(self.values.iter().cloned()).collect()
    }
}

/// Decoded checkpoint contents.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    /// Model configuration as `key=value` text.
    pub config: String,
    pub params: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.push(CHECKPOINT_VERSION);
        out.extend_from_slice(&(self.config.len() as u32).to_le_bytes());
        out.extend_from_slice(self.config.as_bytes());
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, t) in &self.params {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.shape().len() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &x in t.data() {
                out.extend_from_slice(&(x as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, AutodiffError> {
        let mut pos = 0usize;
        let mut take = |n: usize| -> Result<&[u8], AutodiffError> {
            let s = bytes
                .get(pos..pos + n)
                .ok_or_else(|| AutodiffError::Checkpoint(format!("truncated at byte {pos}")))?;
            pos += n;
            Ok(s)
        };
        if take(4)? != CHECKPOINT_MAGIC {
            return Err(AutodiffError::Checkpoint("bad magic, expected PVTM".into()));
        }
        let version = take(1)?[0];
        if version != CHECKPOINT_VERSION {
            return Err(AutodiffError::Checkpoint(format!("unsupported version {version}")));
        }
        let u32_of = |s: &[u8]| u32::from_le_bytes(s.try_into().unwrap()) as usize;
        let clen = u32_of(take(4)?);
        let config = String::from_utf8(take(clen)?.to_vec())
            .map_err(|_| AutodiffError::Checkpoint("config text is not UTF-8".into()))?;
        let count = u32_of(take(4)?);
        let mut params = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let nlen = u16::from_le_bytes(take(2)?.try_into().unwrap()) as usize;
            let name = String::from_utf8(take(nlen)?.to_vec())
                .map_err(|_| AutodiffError::Checkpoint("parameter name is not UTF-8".into()))?;
            let rank = take(1)?[0] as usize;
            let shape = (0..rank)
                .map(|_| take(4).map(u32_of))
                .collect::<Result<Vec<_>, _>>()?;
            let n: usize = shape.iter().product();
            let raw = take(n.checked_mul(4).ok_or_else(|| AutodiffError::Checkpoint("shape overflow".into()))?)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect();
            params.push((name, Tensor::new(&shape, data)?));
        }
        if pos != bytes.len() {
            return Err(AutodiffError::Checkpoint(format!(
                "{} trailing bytes",
                bytes.len() - pos
            )));
        }
        Ok(Checkpoint { config, params })
    }
}

fn io_err(path: &Path, e: std::io::Error) -> AutodiffError {
    AutodiffError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

pub fn save_checkpoint(path: impl AsRef<Path>, config: &str, store: &ParamStore) -> Result<(), AutodiffError> {
    let ck = Checkpoint {
        config: config.to_string(),
        params: store.entries(),
    };
    std::fs::write(path.as_ref(), ck.to_bytes()).map_err(|e| io_err(path.as_ref(), e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint, AutodiffError> {
    let bytes = std::fs::read(path.as_ref()).map_err(|e| io_err(path.as_ref(), e))?;
    Checkpoint::from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kaiming_bounds_and_determinism() {
        let mut a = ParamStore::new(3);
        let mut b = ParamStore::new(3);
        let ia = a.kaiming("w", &[24, 5], 24);
        let ib = b.kaiming("w", &[24, 5], 24);
        assert_eq!(a.get(ia), b.get(ib));
        let bound = 0.5;
        assert!(a.get(ia).data().iter().all(|x| x.abs() < bound));
        let z = a.zeros("b", &[1, 5]);
        assert!(a.get(z).data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn zero_grad_clears_exactly() {
        let mut s = ParamStore::new(0);
        let id = s.kaiming("w", &[3, 3], 3);
        s.grad_mut(id).fill(0.25);
        s.zero_grad();
        assert!(s.grad(id).data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn checkpoint_roundtrip_and_validation() {
        let mut s = ParamStore::new(1);
        s.kaiming("a.w", &[4, 2], 4);
        s.zeros("a.b", &[1, 2]);
        let ck = Checkpoint {
            config: "n=8\n".into(),
            params: s.entries(),
        };
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.config, "n=8\n");
        let mut t = ParamStore::new(99);
        t.kaiming("a.w", &[4, 2], 4);
        t.zeros("a.b", &[1, 2]);
        t.load_values(&back.params).unwrap();
        s.round_to_f32();
        assert_eq!(t.entries(), s.entries());

        let mut wrong = ParamStore::new(0);
        wrong.kaiming("a.w", &[2, 4], 2);
        wrong.zeros("a.b", &[1, 2]);
        assert!(wrong.load_values(&back.params).is_err());
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).is_err());
    }
}
