//! Symmetric contrastive objective over a batch of matched pairs.

use crate::error::{Error, Result};
use crate::head::AlignmentHead;
use crate::store::Batch;
use crate::tensor::{norm, Real, Tape, Tensor};

const UNIT_TOLERANCE: f64 = 1e-3;

fn check_unit_rows<T: Real>(x: &Tensor<T>, what: &str) -> Result<()> {
    for i in 0..x.rows() {
        let n = norm(x.row(i));
        if (n - 1.0).abs() > UNIT_TOLERANCE {
            return Err(Error::Precondition(format!(
                "{what} row {i} has norm {n}, expected 1"
            )));
        }
    }
    Ok(())
}

/// Loss value for unit-norm `img` and `txt` rows; row `i` of each forms
/// the true pair.
pub fn contrastive_loss<T: Real>(img: &Tensor<T>, txt: &Tensor<T>, log_scale: T) -> Result<f64> {
    check_unit_rows(img, "image")?;
    check_unit_rows(txt, "text")?;
    let mut tape = Tape::new();
    let i = tape.constant(img.clone());
    let t = tape.constant(txt.clone());
    let s = tape.constant(Tensor::scalar(log_scale));
    let l = tape.contrastive_loss(i, t, s)?;
    Ok(tape.value(l).data()[0].as_f64())
}

/// Loss and its gradients with respect to both embedding sets and the
/// log-scale.
pub struct EmbeddingGrads<T: Real> {
    pub loss: f64,
    pub img: Tensor<T>,
    pub txt: Tensor<T>,
    pub log_scale: T,
}

pub fn contrastive_grads<T: Real>(
    img: &Tensor<T>,
    txt: &Tensor<T>,
    log_scale: T,
) -> Result<EmbeddingGrads<T>> {
    let mut tape = Tape::new();
    let i = tape.param(img.clone());
    let t = tape.param(txt.clone());
    let s = tape.param(Tensor::scalar(log_scale));
    let l = tape.contrastive_loss(i, t, s)?;
    let g = tape.backward(l)?;
    Ok(EmbeddingGrads {
        loss: tape.value(l).data()[0].as_f64(),
        img: g.get_or_zeros(i, img.shape()),
        txt: g.get_or_zeros(t, txt.shape()),
        log_scale: g.get_or_zeros(s, &[1]).data()[0],
    })
}

/// Loss value and one gradient per head parameter, in declaration order.
#[derive(Clone, Debug)]
pub struct LossAndGrads<T: Real = f32> {
    pub loss: f64,
    pub grads: Vec<Tensor<T>>,
}

/// Runs text embedding, image embedding and the loss on one tape and
/// backpropagates into every head parameter.
pub fn loss_and_grads<T: Real>(head: &AlignmentHead<T>, batch: &Batch<T>) -> Result<LossAndGrads<T>> {
    let mut tape = Tape::new();
    let vars = head.register(&mut tape, true);
    let txt = head.embed_text_on(&mut tape, &vars, batch)?;
    let img = head.embed_image_on(&mut tape, &vars, &batch.images)?;
    let loss = tape.contrastive_loss(img, txt, vars.log_scale)?;
    let value = tape.value(loss).data()[0].as_f64();
    if !value.is_finite() {
        return Err(Error::Numeric(format!("loss is {value}")));
    }
    let g = tape.backward(loss)?;
    let grads = vars
        .all()
        .into_iter()
        .zip(head.params())
        .map(|(v, p)| g.get_or_zeros(v, p.shape()))
        .collect();
    Ok(LossAndGrads { loss: value, grads })
}

/// Loss only, without building gradients.
pub fn batch_loss<T: Real>(head: &AlignmentHead<T>, batch: &Batch<T>) -> Result<f64> {
    let img = head.embed_image(&batch.images)?;
    let txt = head.embed_text(batch)?;
    let mut tape = Tape::new();
    let i = tape.constant(img);
    let t = tape.constant(txt);
    let s = tape.constant(head.log_scale.clone());
    let l = tape.contrastive_loss(i, t, s)?;
    Ok(tape.value(l).data()[0].as_f64())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rows(r: &[Vec<f64>]) -> Tensor<f64> {
        Tensor::from_rows(r).unwrap()
    }

    #[test]
    fn single_pair_has_zero_loss() {
        let e = rows(&[vec![0.6, 0.8]]);
        assert_eq!(contrastive_loss(&e, &e, 2.0).unwrap(), 0.0);
    }

    #[test]
    fn identical_embeddings_give_log_batch() {
        for b in [2usize, 16, 128] {
            let e = rows(&vec![vec![1.0, 0.0, 0.0]; b]);
            for s in [0.0, 1.3, 4.6] {
                let l = contrastive_loss(&e, &e, s).unwrap();
                assert!((l - (b as f64).ln()).abs() < 1e-12, "B={b} s={s} loss={l}");
            }
        }
        let e = rows(&vec![vec![1.0, 0.0]; 2]);
        assert!((contrastive_loss(&e, &e, 0.0).unwrap() - 0.693_147).abs() < 1e-6);
    }

    #[test]
    fn hand_computed_two_by_two() {
        let e = rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let l = contrastive_loss(&e, &e, 0.0).unwrap();
        assert!((l - 0.313_262).abs() < 1e-6, "{l}");
    }

    #[test]
    fn scale_gradient_vanishes_at_uniform_logits() {
        let e = rows(&vec![vec![0.0, 1.0]; 4]);
        let g = contrastive_grads(&e, &e, 1.0).unwrap();
        assert!(g.log_scale.abs() < 1e-12);
        assert!((g.loss - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn rejects_non_unit_rows() {
        let a = rows(&[vec![2.0, 0.0]]);
        assert!(matches!(
            contrastive_loss(&a, &a, 0.0),
            Err(Error::Precondition(_))
        ));
    }
}
