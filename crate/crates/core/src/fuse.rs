//! Naive late fusion of the two branches' activation sequences.

use crate::data::{Branch, Cas, FuseMode};
use crate::error::{dim_err, Error, Result};
use crate::tensor::Tensor;

/// `Avg`: element-wise mean. `Weight`: `w·P^cb + (1 − w)·P^vl`.
pub fn fuse_cas(cbp: &Cas, vlp: &Cas, mode: FuseMode, weight: f64) -> Result<Cas> {
    if cbp.values.shape() != vlp.values.shape() {
        return Err(dim_err!(
            "cannot fuse CAS of shapes {:?} and {:?}",
            cbp.values.shape(),
            vlp.values.shape()
        ));
    }
    let w = match mode {
        FuseMode::Avg => 0.5,
        FuseMode::Weight => {
            if !(0.0..=1.0).contains(&weight) {
                return Err(Error::Parameter(alloc::format!("fusion weight {weight} outside [0, 1]")));
            }
            weight
        }
    };
    let data = cbp
        .values
        .data()
        .iter()
        .zip(vlp.values.data())
        .map(|(&a, &b)| match mode {
            FuseMode::Avg => (a + b) / 2.0,
            // rounding can push a convex combination past 1
            FuseMode::Weight => (w * a + (1.0 - w) * b).clamp(0.0, 1.0),
        })
        .collect();
    Cas::new(Branch::Fused, Tensor::new(cbp.values.shape().to_vec(), data)?)
}
