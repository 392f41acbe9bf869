use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Unit-cost Levenshtein distance between `hyp` and `reference`, with the
/// reference length.
pub fn wer(hyp: &[u32], reference: &[u32]) -> Result<(usize, usize)> {
    if reference.is_empty() {
        return Err(Error::EmptyTarget("WER reference".into()));
    }
    let mut prev: Vec<usize> = (0..=hyp.len()).collect();
    let mut cur = vec![0; hyp.len() + 1];
    for (i, r) in reference.iter().enumerate() {
        cur[0] = i + 1;
        for (j, h) in hyp.iter().enumerate() {
            let sub = prev[j] + usize::from(r != h);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    Ok((prev[hyp.len()], reference.len()))
}

/// Corpus-level error counts: edits and reference tokens are pooled before dividing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ErrorCounts {
    pub edits: usize,
    pub ref_tokens: usize,
    pub utterances: usize,
}

impl ErrorCounts {
    pub fn add(&mut self, hyp: &[u32], reference: &[u32]) -> Result<()> {
        let (e, n) = wer(hyp, reference)?;
        self.edits += e;
        self.ref_tokens += n;
        self.utterances += 1;
        Ok(())
    }

    pub fn rate(&self) -> f64 {
        if self.ref_tokens == 0 {
            0.0
        } else {
            self.edits as f64 / self.ref_tokens as f64
        }
    }
}
