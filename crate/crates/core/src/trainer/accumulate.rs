//! Gradient accumulation for a loss that couples every pair in the batch.
//!
//! Summing per-micro-batch loss gradients is wrong here: each micro-batch
//! would only see its own negatives. Instead the whole batch is embedded
//! first without a graph, the full `B × B` loss and its gradients with
//! respect to the embeddings are computed once, and then every micro-batch
//! is re-embedded on a tape and backpropagated from its slice of those
//! embedding gradients. Parameter gradients add up across micro-batches
//! because every parameter reaches the loss only through the embeddings.

use crate::error::{Error, Result};
use crate::head::AlignmentHead;
use crate::objective::{contrastive_grads, loss_and_grads, LossAndGrads};
use crate::store::Batch;
use crate::tensor::{Real, Tape, Tensor};

/// Loss and parameter gradients of the batch formed by concatenating
/// `micro_batches`, computed one micro-batch graph at a time.
pub fn accumulate_gradients<T: Real>(
    head: &AlignmentHead<T>,
    micro_batches: &[Batch<T>],
) -> Result<LossAndGrads<T>> {
    match micro_batches {
        [] => return Err(Error::Precondition("no micro-batches".into())),
        [single] => return loss_and_grads(head, single),
        _ => {}
    }
    let mut txt_parts = Vec::with_capacity(micro_batches.len());
    let mut img_parts = Vec::with_capacity(micro_batches.len());
    for mb in micro_batches {
        txt_parts.push(head.embed_text(mb)?);
        img_parts.push(head.embed_image(&mb.images)?);
    }
    let txt = Tensor::concat_leading(&txt_parts)?;
    let img = Tensor::concat_leading(&img_parts)?;
    let eg = contrastive_grads(&img, &txt, head.log_scale.data()[0])?;
    if !eg.loss.is_finite() {
        return Err(Error::Numeric(format!("loss is {}", eg.loss)));
    }

    let shapes: Vec<Vec<usize>> = head.params().iter().map(|p| p.shape().to_vec()).collect();
    let mut grads: Vec<Tensor<T>> = shapes.iter().map(|s| Tensor::zeros(s.clone())).collect();
    let mut start = 0;
    for mb in micro_batches {
        let end = start + mb.len();
        let mut tape = Tape::new();
        let vars = head.register(&mut tape, true);
        let t = head.embed_text_on(&mut tape, &vars, mb)?;
        let i = head.embed_image_on(&mut tape, &vars, &mb.images)?;
        let g = tape.backward_with(vec![
            (t, eg.txt.slice_leading(start, end)?),
            (i, eg.img.slice_leading(start, end)?),
        ])?;
        for ((acc, v), shape) in grads.iter_mut().zip(vars.all()).zip(&shapes) {
            if let Some(gv) = g.get(v) {
                debug_assert_eq!(gv.shape(), shape.as_slice());
                acc.add_assign(gv)?;
            }
        }
        start = end;
    }
    let last = grads.len() - 1;
    grads[last].data_mut()[0] = eg.log_scale;
    Ok(LossAndGrads {
        loss: eg.loss,
        grads,
    })
}

/// Splits a batch into micro-batches of at most `size` samples.
pub fn split_batch<T: Real>(batch: &Batch<T>, size: usize) -> Result<Vec<Batch<T>>> {
    if size == 0 {
        return Err(Error::Config("micro-batch size must be at least 1".into()));
    }
    (0..batch.len())
        .step_by(size)
        .map(|s| batch.slice(s, (s + size).min(batch.len())))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::head::{HeadSpec, TextHeadSpec};
    use crate::store::{gen_synthetic, Dataset, SyntheticSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(lookup: bool, image: bool, b: usize) -> (AlignmentHead<f64>, Batch<f64>) {
        let mut spec = SyntheticSpec::new(3, 6, 4, b, 0);
        spec.min_len = Some(2);
        spec.noise = 0.1;
        let data = gen_synthetic(&spec).unwrap();
        let batch = Dataset::from_shards(vec![data.train]).unwrap().all().unwrap().cast();
        let text = if lookup {
            TextHeadSpec::Lookup {
                vocab: spec.vocab_size(),
                d_out: 6,
            }
        } else {
            TextHeadSpec::Mlp {
                widths: vec![6, 8, 6],
            }
        };
        let hs = HeadSpec {
            text,
            image: image.then(|| vec![6, 6]),
        };
        let head = AlignmentHead::init(&hs, 1.0, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        (head, batch)
    }

    #[test]
    fn matches_whole_batch_autodiff() {
        for (lookup, image) in [(false, false), (false, true), (true, false), (true, true)] {
            for (b, a) in [(2, 2), (8, 2), (8, 4)] {
                let (head, batch) = setup(lookup, image, b);
                let whole = loss_and_grads(&head, &batch).unwrap();
                let parts = split_batch(&batch, b / a).unwrap();
                assert_eq!(parts.len(), a);
                let acc = accumulate_gradients(&head, &parts).unwrap();
                assert!((whole.loss - acc.loss).abs() < 1e-12);
                for (g, h) in whole.grads.iter().zip(&acc.grads) {
                    for (x, y) in g.data().iter().zip(h.data()) {
                        assert!((x - y).abs() <= 1e-10 * (1.0 + x.abs()), "{x} vs {y}");
                    }
                }
            }
        }
    }

    #[test]
    fn single_micro_batch_is_plain_step() {
        let (head, batch) = setup(false, true, 4);
        let a = accumulate_gradients(&head, &[batch.clone()]).unwrap();
        let b = loss_and_grads(&head, &batch).unwrap();
        assert_eq!(a.loss, b.loss);
        assert_eq!(a.grads, b.grads);
    }
}
