//! Flat named arrays describing a complete training state.

use alloc::string::String;
use alloc::vec::Vec;

#[derive(Clone, Debug, PartialEq)]
pub enum ArrayData {
    F64(Vec<f64>),
    U64(Vec<u64>),
}

impl ArrayData {
    pub fn len(&self) -> usize {
        match self {
            ArrayData::F64(v) => v.len(),
            ArrayData::U64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: ArrayData,
}

impl NamedArray {
    pub fn f64(name: impl Into<String>, shape: &[usize], data: Vec<f64>) -> Self {
        Self {
            name: name.into(),
            shape: shape.to_vec(),
            data: ArrayData::F64(data),
        }
    }

    pub fn u64(name: impl Into<String>, data: Vec<u64>) -> Self {
        Self {
            name: name.into(),
            shape: alloc::vec![data.len()],
            data: ArrayData::U64(data),
        }
    }
}
