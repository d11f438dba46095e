//! Column-major copy of a dataset's instance matrix, laid out for
//! coordinate-wise access.

use std::ops::Range;

use crate::dataset::BagDataset;
use crate::model::Coefficients;

#[derive(Debug, Clone)]
pub(crate) struct Design {
    pub n_instances: usize,
    pub n_features: usize,
    /// Column `k` occupies `columns[k * N..(k + 1) * N]`.
    columns: Vec<f64>,
    pub bags: Vec<Range<usize>>,
    /// Bag label as 0/1, one entry per bag.
    pub z: Vec<f64>,
    pub col_sumsq: Vec<f64>,
}

impl Design {
    pub fn new(ds: &BagDataset) -> Self {
        let n_instances = ds.n_instances();
        let p = ds.n_features();
        let mut columns = vec![0.0; n_instances * p];
        let mut bags = Vec::with_capacity(ds.n_bags());
        let mut offset = 0;
        for bag in &ds.bags {
            for (j, row) in bag.features.rows().into_iter().enumerate() {
                for (k, &v) in row.iter().enumerate() {
                    columns[k * n_instances + offset + j] = v;
                }
            }
            bags.push(offset..offset + bag.len());
            offset += bag.len();
        }
        let col_sumsq = (0..p)
            .map(|k| {
                columns[k * n_instances..(k + 1) * n_instances]
                    .iter()
                    .map(|v| v * v)
                    .sum()
            })
            .collect();
        Design {
            n_instances,
            n_features: p,
            columns,
            bags,
            z: ds.bags.iter().map(|b| b.z()).collect(),
            col_sumsq,
        }
    }

    #[inline]
    pub fn column(&self, k: usize) -> &[f64] {
        &self.columns[k * self.n_instances..(k + 1) * self.n_instances]
    }

    pub fn linear_predictors(&self, coef: &Coefficients) -> Vec<f64> {
        let mut eta = vec![coef.intercept; self.n_instances];
        for (k, &b) in coef.beta.iter().enumerate() {
            if b != 0.0 {
                for (e, x) in eta.iter_mut().zip(self.column(k)) {
                    *e += b * x;
                }
            }
        }
        eta
    }

    /// Bag label broadcast to every instance.
    pub fn instance_labels(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.n_instances];
        for (range, &z) in self.bags.iter().zip(&self.z) {
            out[range.clone()].fill(z);
        }
        out
    }
}
