//! Named-tensor access shared by the optimizer, gradient clipping, the
//! finite-difference tests and checkpointing.

pub struct TensorEntry<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a [f64],
}

/// A model whose learnable state is a fixed, ordered set of named tensors.
/// `tensor_entries` and `tensors_mut` must enumerate the same tensors in the
/// same order.
pub trait Parameterized {
    fn tensor_entries(&self) -> Vec<TensorEntry<'_>>;
    fn tensors_mut(&mut self) -> Vec<(String, &mut [f64])>;

    fn n_parameters(&self) -> usize {
        self.tensor_entries().iter().map(|t| t.data.len()).sum()
    }

    fn all_finite(&self) -> bool {
        self.tensor_entries()
            .iter()
            .all(|t| t.data.iter().all(|x| x.is_finite()))
    }
}

/// Euclidean norm over every tensor in the container.
pub fn global_norm(p: &impl Parameterized) -> f64 {
    p.tensor_entries()
        .iter()
        .map(|t| t.data.iter().map(|x| x * x).sum::<f64>())
        .sum::<f64>()
        .sqrt()
}

/// Scale every tensor in place (used for gradient clipping).
pub fn scale_all(p: &mut impl Parameterized, factor: f64) {
    for (_, data) in p.tensors_mut() {
        for x in data {
            *x *= factor;
        }
    }
}

/// Clip gradients to a maximum global norm; returns the pre-clip norm.
pub fn clip_global_norm(grads: &mut impl Parameterized, max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm && norm > 0.0 {
        scale_all(grads, max_norm / norm);
    }
    norm
}

/// dst += scale · src, tensor by tensor. Containers must share shape.
pub fn add_scaled<P: Parameterized>(dst: &mut P, src: &P, scale: f64) {
    let src_entries = src.tensor_entries();
    for ((_, dst_data), entry) in dst.tensors_mut().into_iter().zip(src_entries) {
        debug_assert_eq!(dst_data.len(), entry.data.len());
        for (d, s) in dst_data.iter_mut().zip(entry.data.iter()) {
            *d += scale * s;
        }
    }
}
