use crate::error::{Error, Result};
use crate::tensor::{Float, Tape, Tensor, Var};

/// Masked negative log-likelihood over the target rows of `logits`.
#[derive(Clone, Copy, Debug)]
pub struct Loss {
    pub sum: Var,
    pub mean: Var,
    /// Number of non-pad positions.
    pub tokens: usize,
}

/// `mask[t]` is `true` for real tokens; padded rows contribute nothing.
pub fn nll_loss<T: Float>(
    tape: &mut Tape<T>,
    logits: Var,
    targets: &[usize],
    mask: &[bool],
) -> Result<Loss> {
    if mask.len() != targets.len() {
        return Err(Error::Shape {
            op: "nll_loss",
            lhs: vec![targets.len()],
            rhs: vec![mask.len()],
        });
    }
    let tokens = mask.iter().filter(|&&m| m).count();
    if tokens == 0 {
        return Err(Error::EmptyTarget);
    }
    let per_row = tape.cross_entropy_rows(logits, targets)?;
    let weighted = if tokens == mask.len() {
        per_row
    } else {
        let weights = mask
            .iter()
            .map(|&m| if m { T::one() } else { T::zero() })
            .collect();
        let w = tape.constant(Tensor::new(vec![mask.len()], weights)?);
        tape.mul(per_row, w)?
    };
    let sum = tape.sum(weighted)?;
    let mean = tape.scale(sum, T::of(1.0 / tokens as f64))?;
    Ok(Loss { sum, mean, tokens })
}
