use rayon::prelude::*;

use crate::encoder::{Encoder, EncoderParams};
use crate::error::{PatError, Result};
use crate::tensor::{Real, Tensor};

/// Global and per-part features for a list of images, in input order.
#[derive(Clone, Debug)]
pub struct Embeddings<T: Real = f32> {
    /// `n x D`.
    pub global: Tensor<T>,
    /// One `n x D` block per part.
    pub locals: Vec<Tensor<T>>,
}

fn stack<T: Real>(blocks: &[Tensor<T>]) -> Result<Tensor<T>> {
    let cols = blocks[0].cols();
    let mut data = Vec::with_capacity(blocks.iter().map(Tensor::len).sum());
    for b in blocks {
        data.extend_from_slice(b.data());
    }
    Tensor::new(vec![data.len() / cols, cols], data)
}

/// Gradient-free forward over `images` in chunks of `batch_size`. Chunks run
/// on the rayon pool; each chunk is an independent forward so the result
/// does not depend on the number of threads.
pub fn embed_images<T: Real>(
    encoder: &Encoder,
    params: &EncoderParams<T>,
    images: &[Tensor<T>],
    batch_size: usize,
) -> Result<Embeddings<T>> {
    if images.is_empty() {
        return Err(PatError::config("nothing to embed"));
    }
    if batch_size == 0 {
        return Err(PatError::config("batch size must be >= 1"));
    }
    let outputs = images
        .par_chunks(batch_size)
        .map(|chunk| {
            let refs: Vec<&Tensor<T>> = chunk.iter().collect();
            encoder.forward(params, &refs, false)
        })
        .collect::<Result<Vec<_>>>()?;
    let globals: Vec<Tensor<T>> = outputs.iter().map(|o| o.global.clone()).collect();
    let m = encoder.config().num_parts;
    let mut locals = Vec::with_capacity(m);
    for i in 0..m {
        let parts: Vec<Tensor<T>> = outputs.iter().map(|o| o.locals[i].clone()).collect();
        locals.push(stack(&parts)?);
    }
    Ok(Embeddings {
        global: stack(&globals)?,
        locals,
    })
}
