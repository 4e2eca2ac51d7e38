use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::Tensor;
use crate::container::WeightFile;
use crate::error::{Error, Result};

const ROW_STD: f64 = 0.02;

/// Linear event classifier over features, optionally behind one GELU hidden layer.
#[derive(Debug, Clone)]
pub struct DetectorHead {
    /// `[C×d]`
    pub weight: Tensor,
    /// `[C]`
    pub bias: Tensor,
    /// `(W: [d×d], b: [d])` of the optional hidden layer.
    pub hidden: Option<(Tensor, Tensor)>,
    class_order: Vec<usize>,
    dim: usize,
}

fn gaussian(n: usize, rng: &mut impl Rng) -> Vec<f64> {
    let normal = Normal::new(0.0, ROW_STD).expect("valid std");
    (0..n).map(|_| normal.sample(rng)).collect()
}

impl DetectorHead {
    /// A head with no classes yet.
    pub fn new(dim: usize, mlp: bool, rng: &mut impl Rng) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("detector dimension must be positive"));
        }
        let hidden = if mlp {
            Some((
                Tensor::param(gaussian(dim * dim, rng), &[dim, dim])?,
                Tensor::param(vec![0.0; dim], &[dim])?,
            ))
        } else {
            None
        };
        Ok(Self {
            weight: Tensor::param(Vec::new(), &[0, dim])?,
            bias: Tensor::param(Vec::new(), &[0])?,
            hidden,
            class_order: Vec::new(),
            dim,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_classes(&self) -> usize {
        self.class_order.len()
    }

    /// Global label id of each output row.
    pub fn class_order(&self) -> &[usize] {
        &self.class_order
    }

    pub fn row_of(&self, label: usize) -> Option<usize> {
        self.class_order.iter().position(|l| *l == label)
    }

    /// Appends one row per new label. Existing rows keep their values, new
    /// rows are Gaussian(0, 0.02²) with zero bias.
    pub fn grow(&mut self, labels: &[usize], rng: &mut impl Rng) -> Result<()> {
        for (i, l) in labels.iter().enumerate() {
            if self.row_of(*l).is_some() || labels[..i].contains(l) {
                return Err(Error::invalid(format!("label {l} already has a detector row")));
            }
        }
        let (c, d) = (self.num_classes(), self.dim);
        let mut w = self.weight.to_vec();
        w.extend(gaussian(labels.len() * d, rng));
        let mut b = self.bias.to_vec();
        b.resize(c + labels.len(), 0.0);
        self.weight = Tensor::param(w, &[c + labels.len(), d])?;
        self.bias = Tensor::param(b, &[c + labels.len()])?;
        self.class_order.extend_from_slice(labels);
        Ok(())
    }

    /// `[B×C]` logits for `features: [B×d]`.
    pub fn logits(&self, features: &Tensor) -> Result<Tensor> {
        if self.num_classes() == 0 {
            return Err(Error::invalid("detector head has no classes"));
        }
        let x = match &self.hidden {
            Some((w, b)) => features.matmul_t(w)?.add_row(b)?.gelu(),
            None => features.clone(),
        };
        x.matmul_t(&self.weight)?.add_row(&self.bias)
    }

    pub fn parameters(&self) -> Vec<Tensor> {
        let mut out = vec![self.weight.clone(), self.bias.clone()];
        if let Some((w, b)) = &self.hidden {
            out.push(w.clone());
            out.push(b.clone());
        }
        out
    }

    pub fn deep_copy(&self, requires_grad: bool) -> Self {
        Self {
            weight: self.weight.deep_copy(requires_grad),
            bias: self.bias.deep_copy(requires_grad),
            hidden: self
                .hidden
                .as_ref()
                .map(|(w, b)| (w.deep_copy(requires_grad), b.deep_copy(requires_grad))),
            class_order: self.class_order.clone(),
            dim: self.dim,
        }
    }

    pub fn write_into(&self, file: &mut WeightFile) -> Result<()> {
        file.metadata
            .insert("head.class_order".into(), self.class_order.clone().into());
        file.push("head.weight", &self.weight)?;
        file.push("head.bias", &self.bias)?;
        if let Some((w, b)) = &self.hidden {
            file.push("head.hidden.weight", w)?;
            file.push("head.hidden.bias", b)?;
        }
        Ok(())
    }

    pub fn read_from(file: &WeightFile, dim: usize, mlp: bool) -> Result<Self> {
        let order: Vec<usize> = file
            .metadata
            .get("head.class_order")
            .cloned()
            .map(serde_json::from_value)
            .transpose()
            .map_err(|e| Error::Container(format!("head.class_order: {e}")))?
            .ok_or_else(|| Error::Container("head.class_order missing".into()))?;
        let c = order.len();
        let hidden = if mlp {
            Some((
                file.tensor("head.hidden.weight", &[dim, dim], true)?,
                file.tensor("head.hidden.bias", &[dim], true)?,
            ))
        } else {
            None
        };
        Ok(Self {
            weight: file.tensor("head.weight", &[c, dim], true)?,
            bias: file.tensor("head.bias", &[c], true)?,
            hidden,
            class_order: order,
            dim,
        })
    }
}
