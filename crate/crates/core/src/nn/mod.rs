//! Real-valued layer primitives with forward and backward passes.

pub mod activation;
pub mod batchnorm;
pub mod conv;
pub mod dropout;
pub mod linear;
pub mod loss;
pub mod pool;

pub use activation::{hardtanh, hardtanh_backward};
pub use batchnorm::{BatchNorm, BnCache};
pub use conv::{conv2d_backward, conv2d_forward, conv2d_forward_biased, ConvGrads, ConvSpec};
pub use dropout::{dropout, dropout_backward};
pub use linear::{linear_backward, linear_forward, LinearGrads};
pub use loss::{softmax, softmax_xent};
pub use pool::{avgpool_global, avgpool_global_backward};

/// Whether a layer runs with training semantics (batch statistics, dropout)
/// or inference semantics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// Runs `f` over fixed-size chunks of `out` (in parallel when enabled), with a
/// scratch value created by `init` and reused across one worker's chunks.
pub(crate) fn for_each_chunk_with<S, I, F>(out: &mut [f64], chunk: usize, init: I, f: F)
where
    I: Fn() -> S + Sync + Send,
    F: Fn(&mut S, usize, &mut [f64]) + Sync + Send,
{
    if chunk == 0 {
        return;
    }
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        out.par_chunks_mut(chunk)
            .enumerate()
            .for_each_init(&init, |s, (i, c)| f(s, i, c));
    }
    #[cfg(not(feature = "parallel"))]
    {
        let mut scratch = init();
        out.chunks_mut(chunk)
            .enumerate()
            .for_each(|(i, c)| f(&mut scratch, i, c));
    }
}

/// Maps `f` over `0..n` (possibly in parallel), returning results in index order.
pub(crate) fn map_indices<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        (0..n).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n).map(f).collect()
    }
}
