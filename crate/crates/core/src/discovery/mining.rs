use crate::error::{Error, Result};
use crate::ops::cosine_distance_slice;
use crate::tensor::{Scalar, Tensor};

/// Aligned anchor, positive and negative logit rows.
#[derive(Clone, Debug, PartialEq)]
pub struct TripletBatch<T: Scalar = f32> {
    pub anchor: Tensor<T>,
    pub positive: Tensor<T>,
    pub negative: Tensor<T>,
}

impl<T: Scalar> TripletBatch<T> {
    pub fn new(anchor: Tensor<T>, positive: Tensor<T>, negative: Tensor<T>) -> Result<Self> {
        if anchor.rank() != 2 {
            return Err(Error::shape("triplet_batch", "rank", 2, anchor.rank()));
        }
        anchor.expect_same_shape(&positive, "triplet_batch")?;
        anchor.expect_same_shape(&negative, "triplet_batch")?;
        Ok(Self {
            anchor,
            positive,
            negative,
        })
    }
}

/// Nearest and farthest neighbour of each row by cosine distance, over `j != i`.
///
/// Ties go to the lowest index. A zero row has no direction; its distance to
/// anything is taken as 1.
pub fn mine_triplet_indices<T: Scalar>(features: &Tensor<T>) -> Result<(Vec<usize>, Vec<usize>)> {
    if features.rank() != 2 {
        return Err(Error::shape("mine_triplets", "rank", 2, features.rank()));
    }
    let n = features.shape()[0];
    if n < 3 {
        return Err(Error::invalid(
            "mine_triplets",
            format!("batch of {n} rows cannot supply a distinct positive and negative (need 3)"),
        ));
    }
    let mut positives = Vec::with_capacity(n);
    let mut negatives = Vec::with_capacity(n);
    for i in 0..n {
        let mut best = (T::infinity(), 0);
        let mut worst = (T::neg_infinity(), 0);
        for j in (0..n).filter(|&j| j != i) {
            let d = cosine_distance_slice(features.row(i), features.row(j)).unwrap_or_else(T::one);
            if d < best.0 {
                best = (d, j);
            }
            if d > worst.0 {
                worst = (d, j);
            }
        }
        positives.push(best.1);
        negatives.push(worst.1);
    }
    Ok((positives, negatives))
}

/// Mines neighbours on `features` and gathers the matching `logits` rows.
pub fn mine_triplets<T: Scalar>(features: &Tensor<T>, logits: &Tensor<T>) -> Result<TripletBatch<T>> {
    let (pos, neg) = mine_triplet_indices(features)?;
    if logits.rank() != 2 || logits.shape()[0] != pos.len() {
        return Err(Error::shape(
            "mine_triplets",
            "logit rows",
            pos.len(),
            logits.shape().first().copied().unwrap_or(0),
        ));
    }
    TripletBatch::new(logits.clone(), logits.select_rows(&pos), logits.select_rows(&neg))
}
