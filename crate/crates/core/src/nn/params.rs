//! Named parameter tensors with gradient buffers.

use sha2::{Digest, Sha256};

use super::scalar::{Dual, Scalar};
use crate::error::{config, Result};

/// One named tensor. `grad` always has the same length as `value`.
#[derive(Clone, Debug, PartialEq)]
pub struct Param<S = f64> {
    pub name: String,
    pub shape: (usize, usize),
    pub value: Vec<S>,
    pub grad: Vec<S>,
    /// Buffers (e.g. running statistics) are carried, averaged and
    /// checkpointed like parameters, but never receive gradient steps.
    pub trainable: bool,
}

impl<S: Scalar> Param<S> {
    pub fn new(name: impl Into<String>, shape: (usize, usize), value: Vec<S>) -> Result<Self> {
        let name = name.into();
        if value.len() != shape.0 * shape.1 {
            return Err(config(format!(
                "tensor {name}: shape {shape:?} holds {} values, got {}",
                shape.0 * shape.1,
                value.len()
            )));
        }
        if value.iter().any(|v| !v.is_finite()) {
            return Err(config(format!("tensor {name} has non-finite entries")));
        }
        let grad = vec![S::zero(); value.len()];
        Ok(Self { name, shape, value, grad, trainable: true })
    }

    pub fn buffer(name: impl Into<String>, shape: (usize, usize), value: Vec<S>) -> Result<Self> {
        let mut p = Self::new(name, shape, value)?;
        p.trainable = false;
        Ok(p)
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}

/// Ordered collection of named tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet<S = f64> {
    params: Vec<Param<S>>,
}

impl<S: Scalar> ParamSet<S> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn push(&mut self, p: Param<S>) -> Result<usize> {
        if self.params.iter().any(|q| q.name == p.name) {
            return Err(config(format!("duplicate tensor name {}", p.name)));
        }
        self.params.push(p);
        Ok(self.params.len() - 1)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<S>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<S>> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Param<S>> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param<S>> {
        self.params.iter_mut().find(|p| p.name == name)
    }

    pub fn by_index(&self, i: usize) -> &Param<S> {
        &self.params[i]
    }

    pub fn by_index_mut(&mut self, i: usize) -> &mut Param<S> {
        &mut self.params[i]
    }

    /// Total number of scalar entries in trainable tensors.
    pub fn trainable_len(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).map(|p| p.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = S::zero());
        }
    }

    /// Trainable gradients concatenated in tensor order.
    pub fn flat_grad(&self) -> Vec<S> {
        self.params.iter().filter(|p| p.trainable).flat_map(|p| p.grad.iter().copied()).collect()
    }

    /// Trainable values concatenated in tensor order.
    pub fn flat_values(&self) -> Vec<S> {
        self.params.iter().filter(|p| p.trainable).flat_map(|p| p.value.iter().copied()).collect()
    }

    /// Adds a flat vector (trainable tensor order) onto the gradient buffers.
    pub fn accumulate_flat_grad(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.trainable_len() {
            return Err(config(format!(
                "flat gradient has {} entries, parameter set has {}",
                flat.len(),
                self.trainable_len()
            )));
        }
        let mut off = 0;
        for p in self.params.iter_mut().filter(|p| p.trainable) {
            for (g, &d) in p.grad.iter_mut().zip(&flat[off..off + p.value.len()]) {
                *g += S::from_f64(d);
            }
            off += p.value.len();
        }
        Ok(())
    }

    pub fn same_layout<T: Scalar>(&self, other: &ParamSet<T>) -> bool {
        self.params.len() == other.params.len()
            && self
                .params
                .iter()
                .zip(&other.params)
                .all(|(a, b)| a.name == b.name && a.shape == b.shape && a.trainable == b.trainable)
    }

    pub fn to_real(&self) -> ParamSet<f64> {
        ParamSet {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    shape: p.shape,
                    value: p.value.iter().map(|v| v.re()).collect(),
                    grad: p.grad.iter().map(|v| v.re()).collect(),
                    trainable: p.trainable,
                })
                .collect(),
        }
    }
}

impl ParamSet<f64> {
    /// Lifts to dual numbers. `tangent`, when given, is a flat vector over the
    /// trainable entries and becomes their ε-parts; buffers get zero tangent.
    pub fn lift(&self, tangent: Option<&[f64]>) -> Result<ParamSet<Dual>> {
        if let Some(t) = tangent {
            if t.len() != self.trainable_len() {
                return Err(config(format!(
                    "tangent has {} entries, parameter set has {}",
                    t.len(),
                    self.trainable_len()
                )));
            }
        }
        let mut off = 0;
        let params = self
            .params
            .iter()
            .map(|p| {
                let value = p
                    .value
                    .iter()
                    .enumerate()
                    .map(|(k, &v)| {
                        let eps = match tangent {
                            Some(t) if p.trainable => t[off + k],
                            _ => 0.0,
                        };
                        Dual::new(v, eps)
                    })
                    .collect();
                if p.trainable {
                    off += p.value.len();
                }
                Param {
                    name: p.name.clone(),
                    shape: p.shape,
                    value,
                    grad: vec![Dual::default(); p.value.len()],
                    trainable: p.trainable,
                }
            })
            .collect();
        Ok(ParamSet { params })
    }

    /// Hex SHA-256 over names, shapes and the exact bits of every value.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for p in &self.params {
            h.update(p.name.as_bytes());
            h.update((p.shape.0 as u64).to_le_bytes());
            h.update((p.shape.1 as u64).to_le_bytes());
            for v in &p.value {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.value.iter().all(|v| v.is_finite()))
    }

    /// Renames every tensor with a prefix, e.g. `ext.` + `l0.weight`.
    pub fn prefixed(&self, prefix: &str) -> ParamSet<f64> {
        ParamSet {
            params: self
                .params
                .iter()
                .map(|p| Param { name: format!("{prefix}{}", p.name), ..p.clone() })
                .collect(),
        }
    }
}

impl ParamSet<Dual> {
    /// ε-parts of trainable gradients, flat.
    pub fn flat_grad_tangent(&self) -> Vec<f64> {
        self.params.iter().filter(|p| p.trainable).flat_map(|p| p.grad.iter().map(|g| g.eps)).collect()
    }
}

/// `teacher ← rate·teacher + (1 − rate)·student`, element-wise over every
/// tensor (buffers included).
pub fn ema_update(teacher: &mut ParamSet<f64>, student: &ParamSet<f64>, rate: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(config(format!("EMA rate {rate} outside [0, 1]")));
    }
    if !teacher.same_layout(student) {
        return Err(config("teacher and student parameter layouts differ"));
    }
    for (t, s) in teacher.params.iter_mut().zip(&student.params) {
        for (tv, &sv) in t.value.iter_mut().zip(&s.value) {
            *tv = rate * *tv + (1.0 - rate) * sv;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_set(v: f64) -> ParamSet<f64> {
        let mut s = ParamSet::new();
        s.push(Param::new("w", (1, 1), vec![v]).unwrap()).unwrap();
        s
    }

    #[test]
    fn ema_boundary_rates() {
        let student = scalar_set(0.0);
        let mut t = scalar_set(1.0);
        ema_update(&mut t, &student, 1.0).unwrap();
        assert_eq!(t.by_index(0).value[0], 1.0);
        ema_update(&mut t, &student, 0.0).unwrap();
        assert_eq!(t.by_index(0).value[0], 0.0);
    }

    #[test]
    fn ema_default_rate_example() {
        let mut t = scalar_set(1.0);
        ema_update(&mut t, &scalar_set(0.0), 0.9).unwrap();
        assert!((t.by_index(0).value[0] - 0.9).abs() < 1e-15);
    }

    #[test]
    fn ema_rejects_layout_mismatch() {
        let mut t = scalar_set(1.0);
        let mut other = ParamSet::new();
        other.push(Param::new("w", (1, 2), vec![0.0, 0.0]).unwrap()).unwrap();
        assert!(ema_update(&mut t, &other, 0.5).is_err());
        assert!(ema_update(&mut t, &scalar_set(0.0), 1.5).is_err());
    }

    #[test]
    fn non_finite_construction_rejected() {
        assert!(Param::new("w", (1, 1), vec![f64::NAN]).is_err());
        assert!(Param::new("w", (2, 1), vec![0.0]).is_err());
    }

    #[test]
    fn checksum_tracks_bits() {
        let a = scalar_set(1.0);
        let b = scalar_set(1.0 + f64::EPSILON);
        assert_eq!(a.checksum(), scalar_set(1.0).checksum());
        assert_ne!(a.checksum(), b.checksum());
    }
}
