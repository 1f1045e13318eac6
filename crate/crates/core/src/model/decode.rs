use super::transformer::Model;
use crate::error::Result;
use crate::vocab::{BOS_ID, EOS_ID};

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(values: impl IntoIterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in values.into_iter().enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

impl Model {
    /// Greedy decoding from `[bos]`. The returned ids stop before `[eos]`
    /// and never number more than `max_len`.
    pub fn greedy_decode(&self, context_ids: &[usize], max_len: usize) -> Result<Vec<usize>> {
        let memory = self.encode(context_ids)?;
        let mut prefix = vec![BOS_ID];
        let mut out = Vec::new();
        while out.len() < max_len {
            let logits = self.decode_logits(&memory, &prefix)?;
            let next = argmax(logits.row(logits.nrows() - 1).iter().copied());
            if next == EOS_ID {
                break;
            }
            out.push(next);
            prefix.push(next);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn argmax_prefers_lowest_index() {
        assert_eq!(argmax([1.0, 3.0, 3.0, 2.0]), 1);
        assert_eq!(argmax([f64::NEG_INFINITY; 3]), 0);
    }
}
