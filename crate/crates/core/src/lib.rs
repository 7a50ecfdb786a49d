//! Speaker diarization with transformer-based target-speaker voice activity
//! detection and encoder-decoder attractors.

pub mod eda;
pub mod error;
pub mod cli;
pub mod layers;
pub mod pipeline;
pub mod score;
pub mod simulate;
pub mod tensor;
pub mod tsvad;

pub use error::{Error, Result};
pub use tensor::Tensor;

/// Maps `f` over `0..n` on up to `jobs` threads, keeping input order.
pub fn parallel_map<T, F>(n: usize, jobs: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync,
{
    let jobs = jobs.clamp(1, n.max(1));
    if jobs == 1 {
        return (0..n).map(f).collect();
    }
    let mut slots: Vec<Option<T>> = (0..n).map(|_| None).collect();
    let per = n.div_ceil(jobs);
    std::thread::scope(|s| {
        for (k, part) in slots.chunks_mut(per).enumerate() {
            let f = &f;
            s.spawn(move || {
                for (i, slot) in part.iter_mut().enumerate() {
                    *slot = Some(f(k * per + i));
                }
            });
        }
    });
    slots.into_iter().map(|s| s.expect("filled")).collect()
}
