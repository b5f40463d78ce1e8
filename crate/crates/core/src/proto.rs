//! One EMA-maintained, unit-norm prototype per class.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::grad::Tensor;

/// Centroids whose mean has a smaller norm than this carry no direction and
/// are dropped for the step.
pub const DEGENERATE_NORM: f64 = 1e-6;

/// Value reported by [`PrototypeBank::similarities`] for uninitialized classes;
/// below the cosine range.
pub const UNINITIALIZED_SIMILARITY: f64 = -2.0;

#[derive(Clone, Debug, PartialEq)]
pub struct Centroid {
    /// Unit-norm mean direction.
    pub vector: Vec<f64>,
    pub count: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Centroids {
    pub classes: BTreeMap<usize, Centroid>,
    /// Classes whose mean collapsed below [`DEGENERATE_NORM`].
    pub degenerate: Vec<usize>,
}

/// Running per-class sums of representations, for centroids spanning
/// several images.
#[derive(Clone, Debug)]
pub struct CentroidSums {
    dim: usize,
    sums: BTreeMap<usize, (Vec<f64>, usize)>,
}

fn split_reps(reps: &Tensor) -> Result<(usize, usize)> {
    let shape = reps.shape();
    if shape.is_empty() {
        return Err(Error::shape("centroids", "representations need a leading dimension axis"));
    }
    Ok((shape[0], shape[1..].iter().product()))
}

impl CentroidSums {
    pub fn new(dim: usize) -> Self {
        CentroidSums { dim, sums: BTreeMap::new() }
    }

    /// Adds the valid pixels of `reps` (`[d, ...]`, channel-major).
    pub fn add(&mut self, reps: &Tensor, classes: &[u8], valid: &[bool]) -> Result<()> {
        let (dim, n) = split_reps(reps)?;
        if dim != self.dim || classes.len() != n || valid.len() != n {
            return Err(Error::shape(
                "centroids",
                format!("reps [{dim}x{n}], {} classes, {} mask entries, bank dim {}", classes.len(), valid.len(), self.dim),
            ));
        }
        let data = reps.data();
        for i in (0..n).filter(|&i| valid[i]) {
            let entry = self.sums.entry(classes[i] as usize).or_insert_with(|| (vec![0.0; dim], 0));
            for k in 0..dim {
                entry.0[k] += data[k * n + i];
            }
            entry.1 += 1;
        }
        Ok(())
    }

    pub fn finish(self) -> Centroids {
        let mut out = Centroids::default();
        for (class, (sum, count)) in self.sums {
            let mean: Vec<f64> = sum.iter().map(|v| v / count as f64).collect();
            let norm = mean.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm < DEGENERATE_NORM {
                out.degenerate.push(class);
                continue;
            }
            out.classes.insert(class, Centroid { vector: mean.iter().map(|v| v / norm).collect(), count });
        }
        out
    }
}

/// Per-class mean of the valid representations in `reps` (`[d, N]`),
/// re-normalized to unit length. Classes without valid pixels are absent.
pub fn batch_centroids(reps: &Tensor, classes: &[u8], valid: &[bool]) -> Result<Centroids> {
    let (dim, _) = split_reps(reps)?;
    let mut sums = CentroidSums::new(dim);
    sums.add(reps, classes, valid)?;
    Ok(sums.finish())
}

#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeBank {
    num_classes: usize,
    dim: usize,
    prototypes: Vec<f64>,
    pre_norm: Vec<f64>,
    initialized: Vec<bool>,
    alpha: f64,
    iteration: u64,
}

impl PrototypeBank {
    pub fn new(num_classes: usize, dim: usize, alpha: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::Config(format!("prototype alpha must be in [0,1], got {alpha}")));
        }
        if num_classes == 0 || dim == 0 {
            return Err(Error::Config("prototype bank needs at least one class and dimension".into()));
        }
        Ok(PrototypeBank {
            num_classes,
            dim,
            prototypes: vec![0.0; num_classes * dim],
            pre_norm: vec![0.0; num_classes * dim],
            initialized: vec![false; num_classes],
            alpha,
            iteration: 0,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn is_initialized(&self, class: usize) -> bool {
        self.initialized.get(class).copied().unwrap_or(false)
    }

    pub fn initialized_classes(&self) -> Vec<usize> {
        (0..self.num_classes).filter(|&c| self.initialized[c]).collect()
    }

    pub fn prototype(&self, class: usize) -> Option<&[f64]> {
        self.is_initialized(class).then(|| &self.prototypes[class * self.dim..(class + 1) * self.dim])
    }

    /// The vector before the last re-normalization of `class`.
    pub fn pre_normalization(&self, class: usize) -> Option<&[f64]> {
        self.is_initialized(class).then(|| &self.pre_norm[class * self.dim..(class + 1) * self.dim])
    }

    /// Directly sets a prototype (normalized) and marks it initialized.
    pub fn set_prototype(&mut self, class: usize, vector: &[f64]) -> Result<()> {
        if class >= self.num_classes || vector.len() != self.dim {
            return Err(Error::shape("set_prototype", format!("class {class}, length {}", vector.len())));
        }
        let norm = vector.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm < DEGENERATE_NORM {
            return Err(Error::Contract(format!("prototype for class {class} has no direction")));
        }
        let range = class * self.dim..(class + 1) * self.dim;
        self.pre_norm[range.clone()].copy_from_slice(vector);
        self.prototypes[range].iter_mut().zip(vector).for_each(|(p, v)| *p = v / norm);
        self.initialized[class] = true;
        Ok(())
    }

    /// `rho_hat = alpha * rho_hat + (1 - alpha) * rho`, then unit-normalized.
    /// A class seen for the first time takes its centroid directly. Classes
    /// absent from `centroids` are left bit-identical.
    pub fn ema_update(&mut self, centroids: &Centroids) -> Result<()> {
        for (&class, centroid) in &centroids.classes {
            if class >= self.num_classes || centroid.vector.len() != self.dim {
                return Err(Error::Contract(format!("centroid for class {class} does not fit the bank")));
            }
            let range = class * self.dim..(class + 1) * self.dim;
            if !self.initialized[class] {
                self.pre_norm[range.clone()].copy_from_slice(&centroid.vector);
                self.prototypes[range].copy_from_slice(&centroid.vector);
                self.initialized[class] = true;
                continue;
            }
            let mixed: Vec<f64> = self.prototypes[range.clone()]
                .iter()
                .zip(&centroid.vector)
                .map(|(p, c)| self.alpha * p + (1.0 - self.alpha) * c)
                .collect();
            let norm = mixed.iter().map(|v| v * v).sum::<f64>().sqrt();
            self.pre_norm[range.clone()].copy_from_slice(&mixed);
            if norm >= DEGENERATE_NORM {
                self.prototypes[range].iter_mut().zip(&mixed).for_each(|(p, m)| *p = m / norm);
            }
        }
        self.iteration += 1;
        Ok(())
    }

    /// Cosine of each prototype with each representation of `reps`
    /// (`[d, ...]`, unit norm). Output `[C, N]`; uninitialized rows hold
    /// [`UNINITIALIZED_SIMILARITY`].
    pub fn similarities(&self, reps: &Tensor) -> Result<Tensor> {
        let (dim, n) = split_reps(reps)?;
        if dim != self.dim {
            return Err(Error::shape("similarities", format!("reps dim {dim}, bank dim {}", self.dim)));
        }
        let data = reps.data();
        let mut out = vec![UNINITIALIZED_SIMILARITY; self.num_classes * n];
        for c in self.initialized_classes() {
            let proto = &self.prototypes[c * dim..(c + 1) * dim];
            let row = &mut out[c * n..(c + 1) * n];
            row.fill(0.0);
            for (k, &pk) in proto.iter().enumerate() {
                let col = &data[k * n..(k + 1) * n];
                row.iter_mut().zip(col).for_each(|(r, z)| *r += pk * z);
            }
            row.iter_mut().for_each(|r| *r = r.clamp(-1.0, 1.0));
        }
        Tensor::new([self.num_classes, n], out)
    }

    /// Named tensors for checkpoints.
    pub fn to_tensors(&self) -> Vec<(String, Tensor)> {
        vec![
            ("bank.prototypes".into(), Tensor::new([self.num_classes, self.dim], self.prototypes.clone()).expect("sized by construction")),
            ("bank.pre_norm".into(), Tensor::new([self.num_classes, self.dim], self.pre_norm.clone()).expect("sized by construction")),
            (
                "bank.initialized".into(),
                Tensor::from_fn([self.num_classes], |c| if self.initialized[c] { 1.0 } else { 0.0 }),
            ),
            ("bank.state".into(), Tensor::new([2], vec![self.alpha, self.iteration as f64]).expect("two values")),
        ]
    }

    pub fn from_tensors(prototypes: &Tensor, pre_norm: &Tensor, initialized: &Tensor, state: &Tensor) -> Result<Self> {
        let &[num_classes, dim] = prototypes.shape() else {
            return Err(Error::shape("bank", format!("prototypes shape {:?}", prototypes.shape())));
        };
        if pre_norm.shape() != prototypes.shape() || initialized.shape() != [num_classes] || state.shape() != [2] {
            return Err(Error::shape("bank", "inconsistent bank tensors"));
        }
        let mut bank = PrototypeBank::new(num_classes, dim, state.data()[0])?;
        bank.prototypes = prototypes.data().to_vec();
        bank.pre_norm = pre_norm.data().to_vec();
        bank.initialized = initialized.data().iter().map(|v| *v != 0.0).collect();
        bank.iteration = state.data()[1] as u64;
        Ok(bank)
    }
}
