//! Named parameter collections.

use crate::autodiff::{Tape, Var};
use crate::tensor::Tensor;

/// A fixed, ordered collection of named tensors.
///
/// The order of [`ParamGroup::tensors`] defines gradient slot layout and
/// checkpoint layout, so implementations must keep it stable.
pub trait ParamGroup {
    fn tensors(&self) -> Vec<&Tensor>;
    fn tensors_mut(&mut self) -> Vec<&mut Tensor>;
    fn names(&self) -> Vec<String>;

    fn num_tensors(&self) -> usize {
        self.tensors().len()
    }

    fn num_scalars(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Zero tensors shaped like this group.
    fn zeros_like(&self) -> Vec<Tensor> {
        self.tensors().iter().map(|t| Tensor::zeros(t.rows(), t.cols())).collect()
    }

    fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.is_finite())
    }
}

/// Registers every tensor of a group on a tape. With `slot_offset`, tensor
/// `i` accumulates into gradient slot `offset + i`; without, it is frozen.
pub fn bind<'a, G: ParamGroup + ?Sized>(
    group: &'a G,
    tape: &mut Tape<'a>,
    slot_offset: Option<usize>,
) -> Vec<Var> {
    group
        .tensors()
        .into_iter()
        .enumerate()
        .map(|(i, t)| match slot_offset {
            Some(off) => tape.param(t, off + i),
            None => tape.frozen(t),
        })
        .collect()
}

/// Glorot-style normal initialisation scaled by `gain`.
pub fn init_weight(rng: &mut impl rand::Rng, rows: usize, cols: usize, fan_in: usize, gain: f64) -> Tensor {
    let std = gain / (fan_in.max(1) as f64).sqrt();
    Tensor::from_fn(rows, cols, |_, _| std * crate::rng::standard_normal(rng))
}

/// Applies `f` to every (param, other) pair of two equally shaped groups.
pub fn zip_apply(params: &mut [&mut Tensor], others: &[Tensor], mut f: impl FnMut(&mut f64, f64)) {
    assert_eq!(params.len(), others.len(), "group size mismatch");
    for (p, o) in params.iter_mut().zip(others) {
        assert_eq!(p.shape(), o.shape(), "tensor shape mismatch");
        for (x, &y) in p.data_mut().iter_mut().zip(o.data()) {
            f(x, y);
        }
    }
}
