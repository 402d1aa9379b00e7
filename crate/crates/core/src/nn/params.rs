use alloc::string::String;
use alloc::vec::Vec;

use crate::nn::Mat;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Mat,
    pub grad: Mat,
}

/// Named parameter tensors with matching gradient buffers, in insertion order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Mat) -> ParamId {
        let name = name.into();
        assert!(self.id(&name).is_none(), "duplicate parameter {name}");
        let grad = Mat::zeros(value.rows(), value.cols());
        self.params.push(Param { name, value, grad });
        ParamId(self.params.len() - 1)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
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

    pub fn value(&self, id: ParamId) -> &Mat {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Mat {
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Mat {
        &self.params[id.0].grad
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(0.0);
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.data().len()).sum()
    }

    /// FNV-1a over names, shapes and value bits.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        };
        for p in &self.params {
            eat(p.name.as_bytes());
            eat(&(p.value.rows() as u64).to_le_bytes());
            eat(&(p.value.cols() as u64).to_le_bytes());
            for v in p.value.data() {
                eat(&v.to_bits().to_le_bytes());
            }
        }
        h
    }
}
