use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct WerResult {
    pub substitutions: usize,
    pub insertions: usize,
    pub deletions: usize,
    pub ref_len: usize,
    /// Percentage, `100 · edits / max(1, ref_len)`.
    pub wer: f64,
}

impl WerResult {
    pub fn edits(&self) -> usize {
        self.substitutions + self.insertions + self.deletions
    }
}

/// Alignment step, in tie-breaking priority order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum EditOp {
    Match,
    Substitute,
    Insert,
    Delete,
}

/// Minimal unit-cost alignment. Among optimal alignments the one chosen
/// prefers, walking back from the end, a diagonal step over an insertion
/// over a deletion.
pub fn align<T: PartialEq>(reference: &[T], hyp: &[T]) -> Vec<EditOp> {
    let (n, m) = (reference.len(), hyp.len());
    let w = m + 1;
    let mut d = vec![0usize; (n + 1) * w];
    for i in 0..=n {
        d[i * w] = i;
    }
    for j in 0..=m {
        d[j] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let sub = d[(i - 1) * w + j - 1] + usize::from(reference[i - 1] != hyp[j - 1]);
            let ins = d[i * w + j - 1] + 1;
            let del = d[(i - 1) * w + j] + 1;
            d[i * w + j] = sub.min(ins).min(del);
        }
    }
    let mut ops = Vec::with_capacity(n.max(m));
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        let here = d[i * w + j];
        if i > 0 && j > 0 {
            let same = reference[i - 1] == hyp[j - 1];
            if here == d[(i - 1) * w + j - 1] + usize::from(!same) {
                ops.push(if same { EditOp::Match } else { EditOp::Substitute });
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if j > 0 && here == d[i * w + j - 1] + 1 {
            ops.push(EditOp::Insert);
            j -= 1;
        } else {
            ops.push(EditOp::Delete);
            i -= 1;
        }
    }
    ops.reverse();
    ops
}

pub fn wer<T: PartialEq>(reference: &[T], hyp: &[T]) -> WerResult {
    let mut r = WerResult {
        ref_len: reference.len(),
        ..WerResult::default()
    };
    for op in align(reference, hyp) {
        match op {
            EditOp::Match => {}
            EditOp::Substitute => r.substitutions += 1,
            EditOp::Insert => r.insertions += 1,
            EditOp::Delete => r.deletions += 1,
        }
    }
    r.wer = 100.0 * r.edits() as f64 / reference.len().max(1) as f64;
    r
}

/// Corpus-level aggregate: total edits over total reference tokens.
pub fn corpus_wer<'a>(results: impl IntoIterator<Item = &'a WerResult>) -> WerResult {
    let mut total = WerResult::default();
    for r in results {
        total.substitutions += r.substitutions;
        total.insertions += r.insertions;
        total.deletions += r.deletions;
        total.ref_len += r.ref_len;
    }
    total.wer = 100.0 * total.edits() as f64 / total.ref_len.max(1) as f64;
    total
}
