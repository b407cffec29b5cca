use rand::seq::SliceRandom;

use crate::rng::rng_for;
use crate::vocab::{EOS, PAD};

/// Keeps at most `max_len - 1` tokens and appends EOS.
pub fn truncate_target(ids: &[usize], max_len: usize) -> Vec<usize> {
    let keep = ids.len().min(max_len.saturating_sub(1));
    let mut out = ids[..keep].to_vec();
    out.push(EOS);
    out
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    /// Positions in the dataset.
    pub indices: Vec<usize>,
    /// Truncated, EOS-terminated targets padded with PAD to a common length.
    pub targets: Vec<Vec<usize>>,
    /// `true` marks a real token.
    pub mask: Vec<Vec<bool>>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Target of row `i` with padding removed.
    pub fn unpadded(&self, i: usize) -> Vec<usize> {
        self.targets[i]
            .iter()
            .zip(&self.mask[i])
            .filter(|(_, &m)| m)
            .map(|(&t, _)| t)
            .collect()
    }
}

/// One epoch of batches over `captions` (token ids, no EOS), shuffled by a
/// stream derived from `(seed, epoch)`.
pub fn make_batches(
    captions: &[Vec<usize>],
    batch_size: usize,
    seed: u64,
    epoch: usize,
    max_report_len: usize,
) -> Vec<Batch> {
    let mut order: Vec<usize> = (0..captions.len()).collect();
    order.shuffle(&mut rng_for(seed, &format!("epoch.{epoch}")));
    order
        .chunks(batch_size.max(1))
        .map(|chunk| {
            let targets: Vec<Vec<usize>> = chunk
                .iter()
                .map(|&i| truncate_target(&captions[i], max_report_len))
                .collect();
            let width = targets.iter().map(Vec::len).max().unwrap_or(0);
            let mask = targets
                .iter()
                .map(|t| (0..width).map(|j| j < t.len()).collect())
                .collect();
            let targets = targets
                .into_iter()
                .map(|mut t| {
                    t.resize(width, PAD);
                    t
                })
                .collect();
            Batch {
                indices: chunk.to_vec(),
                targets,
                mask,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn remainder_batch() {
        let caps: Vec<Vec<usize>> = (0..10).map(|i| vec![4 + i; 1 + i % 3]).collect();
        let sizes: Vec<usize> = make_batches(&caps, 4, 1, 0, 24)
            .iter()
            .map(Batch::len)
            .collect();
        assert_eq!(sizes, vec![4, 4, 2]);
    }

    #[test]
    fn truncation_keeps_prefix_and_appends_eos() {
        let ids: Vec<usize> = (10..40).collect();
        let t = truncate_target(&ids, 24);
        assert_eq!(t.len(), 24);
        assert_eq!(&t[..23], &ids[..23]);
        assert_eq!(t[23], EOS);
        assert_eq!(truncate_target(&[5, 6], 24), vec![5, 6, EOS]);
    }

    #[test]
    fn padding_and_masks() {
        let caps = vec![vec![5, 6, 7], vec![8]];
        let batches = make_batches(&caps, 2, 0, 0, 24);
        let b = &batches[0];
        for i in 0..2 {
            assert_eq!(b.targets[i].len(), 4);
            let real = b.mask[i].iter().filter(|&&m| m).count();
            assert_eq!(b.unpadded(i), truncate_target(&caps[b.indices[i]], 24));
            assert!(b.targets[i][real..].iter().all(|&t| t == PAD));
        }
    }
}
