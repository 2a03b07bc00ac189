use super::wer::edit_distance;

/// Hypothesis chunks aligned one-to-one with reference segments.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SegmentedDoc {
    pub segments: Vec<Vec<String>>,
}

impl SegmentedDoc {
    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    pub fn joined(&self) -> Vec<String> {
        self.segments.iter().map(|s| s.join(" ")).collect()
    }
}

/// `cost[i][j]` = edit distance between `hyp[i..j]` and `reference`, for `j >= i`.
fn span_costs(hyp: &[String], reference: &[String]) -> Vec<Vec<usize>> {
    let n = hyp.len();
    let r = reference.len();
    let mut out = Vec::with_capacity(n + 1);
    for i in 0..=n {
        let mut row = vec![0; n + 1];
        let mut prev: Vec<usize> = (0..=r).collect();
        row[i] = r;
        let mut cur = vec![0; r + 1];
        for j in i..n {
            cur[0] = j - i + 1;
            for k in 0..r {
                let sub = prev[k] + usize::from(hyp[j] != reference[k]);
                cur[k + 1] = sub.min(prev[k + 1] + 1).min(cur[k] + 1);
            }
            std::mem::swap(&mut prev, &mut cur);
            row[j + 1] = prev[r];
        }
        out.push(row);
    }
    out
}

/// Splits `hyp` into `refs.len()` contiguous chunks minimizing the summed
/// edit distance to the reference segments. Among optimal splits the
/// lexicographically smallest boundary vector wins. Returns the chunks and
/// the total cost. With no reference segments the result is empty.
pub fn mwer_resegment(hyp: &[String], refs: &[Vec<String>]) -> (SegmentedDoc, usize) {
    let k = refs.len();
    let n = hyp.len();
    if k == 0 {
        return (
            SegmentedDoc {
                segments: Vec::new(),
            },
            0,
        );
    }
    let costs: Vec<Vec<Vec<usize>>> = refs.iter().map(|r| span_costs(hyp, r)).collect();
    // best[s][i]: minimal cost of placing hyp[i..] into segments s..k
    let mut best = vec![vec![usize::MAX; n + 1]; k + 1];
    best[k][n] = 0;
    for s in (0..k).rev() {
        for i in 0..=n {
            let lo = if s + 1 == k { n } else { i };
            let mut b = usize::MAX;
            for j in lo..=n {
                if best[s + 1][j] == usize::MAX {
                    continue;
                }
                b = b.min(costs[s][i][j] + best[s + 1][j]);
            }
            best[s][i] = b;
        }
    }
    let total = best[0][0];
    let mut segments = Vec::with_capacity(k);
    let mut i = 0;
    for s in 0..k {
        let lo = if s + 1 == k { n } else { i };
        let j = (lo..=n)
            .find(|&j| {
                best[s + 1][j] != usize::MAX && costs[s][i][j] + best[s + 1][j] == best[s][i]
            })
            .expect("optimal split exists");
        segments.push(hyp[i..j].to_vec());
        i = j;
    }
    (SegmentedDoc { segments }, total)
}

/// Summed edit distance of an explicit segmentation.
pub fn segmentation_cost(doc: &SegmentedDoc, refs: &[Vec<String>]) -> usize {
    doc.segments
        .iter()
        .zip(refs)
        .map(|(h, r)| edit_distance(h, r))
        .sum()
}
