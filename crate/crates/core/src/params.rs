//! Named parameter storage.
//!
//! Values are held as `f64` for computation but are always representable as
//! `f32`: they are rounded on insertion and after every optimizer step, so
//! writing a checkpoint and reading it back is lossless.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::archive::{Archive, ArchiveTensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Arc<Vec<f64>>,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    index: BTreeMap<String, ParamId>,
}

fn round_f32(v: &mut [f64]) {
    v.iter_mut().for_each(|x| *x = *x as f32 as f64);
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter. Panics on a duplicate name.
    pub fn insert(&mut self, name: impl Into<String>, shape: &[usize], mut values: Vec<f64>) -> ParamId {
        let name = name.into();
        assert_eq!(values.len(), shape.iter().product::<usize>(), "{name}");
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        round_f32(&mut values);
        let id = ParamId(self.params.len());
        self.index.insert(name.clone(), id);
        self.params.push(Param {
            name,
            shape: shape.to_vec(),
            value: Arc::new(values),
        });
        id
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn values(&self, id: ParamId) -> &[f64] {
        &self.params[id.0].value
    }

    pub fn values_mut(&mut self, id: ParamId) -> &mut Vec<f64> {
        Arc::make_mut(&mut self.params[id.0].value)
    }

    pub fn set(&mut self, id: ParamId, values: Vec<f64>) {
        let p = &mut self.params[id.0];
        assert_eq!(values.len(), p.value.len(), "{}", p.name);
        p.value = Arc::new(values);
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalars in parameters whose name starts with `prefix`.
    pub fn num_scalars(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|p| p.name.starts_with(prefix))
            .map(|p| p.value.len())
            .sum()
    }

    pub fn round_to_f32(&mut self) {
        for p in &mut self.params {
            round_f32(Arc::make_mut(&mut p.value).as_mut_slice());
        }
    }

    /// Copies every parameter named `prefix*` from the archive entry
    /// `archive_prefix*`. Fails on the first missing or mis-shaped entry,
    /// leaving the store untouched.
    pub fn load_from(&mut self, archive: &Archive, prefix: &str, archive_prefix: &str) -> Result<usize> {
        let mut staged = Vec::new();
        for (i, p) in self.params.iter().enumerate() {
            let Some(rest) = p.name.strip_prefix(prefix) else { continue };
            let key = format!("{archive_prefix}{rest}");
            let t = archive.tensors.get(&key).ok_or_else(|| Error::MissingParam(key.clone()))?;
            if t.shape != p.shape {
                return Err(Error::ParamShape {
                    name: key,
                    expected: p.shape.clone(),
                    found: t.shape.clone(),
                });
            }
            staged.push((i, t.data.iter().map(|&v| v as f64).collect::<Vec<f64>>()));
        }
        let n = staged.len();
        for (i, v) in staged {
            self.params[i].value = Arc::new(v);
        }
        Ok(n)
    }

    /// Adds every parameter (optionally filtered by prefix) to an archive.
    pub fn export_into(&self, archive: &mut Archive, prefix: &str) {
        for p in self.params.iter().filter(|p| p.name.starts_with(prefix)) {
            archive.tensors.insert(
                p.name.clone(),
                ArchiveTensor {
                    shape: p.shape.clone(),
                    data: p.value.iter().map(|&v| v as f32).collect(),
                },
            );
        }
    }
}

/// Normal samples truncated to `[-2σ, 2σ]` by rejection.
pub fn trunc_normal<R: Rng>(rng: &mut R, n: usize, std: f64) -> Vec<f64> {
    let normal = Normal::new(0.0, std).expect("std must be positive");
    (0..n)
        .map(|_| loop {
            let v: f64 = normal.sample(rng);
            if v.abs() <= 2.0 * std {
                break v;
            }
        })
        .collect()
}

/// Glorot uniform initialization for a `[fan_out, fan_in]` weight.
pub fn xavier_uniform<R: Rng>(rng: &mut R, fan_out: usize, fan_in: usize) -> Vec<f64> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    (0..fan_in * fan_out).map(|_| rng.random_range(-bound..bound)).collect()
}

/// He-style uniform initialization used for convolutions and ReLU MLPs.
pub fn kaiming_uniform<R: Rng>(rng: &mut R, n: usize, fan_in: usize) -> Vec<f64> {
    let bound = (6.0 / fan_in as f64).sqrt();
    (0..n).map(|_| rng.random_range(-bound..bound)).collect()
}
