//! Numpy-style broadcasting helpers for elementwise binary ops.

/// Result shape of broadcasting `a` against `b`, or `None` if incompatible.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides of `src` laid over `out`, with zero stride on broadcast axes.
fn aligned_strides(src: &[usize], out: &[usize]) -> Vec<usize> {
    let offset = out.len() - src.len();
    let mut strides = vec![0; out.len()];
    let mut acc = 1;
    for i in (0..src.len()).rev() {
        strides[offset + i] = if src[i] == 1 { 0 } else { acc };
        acc *= src[i];
    }
    strides
}

/// How an input maps onto a broadcast output.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Layout {
    Same,
    /// Input is a trailing suffix of the output; index is `i % len`.
    Suffix(usize),
    General,
}

pub(crate) fn layout(src: &[usize], out: &[usize]) -> Layout {
    if src == out {
        return Layout::Same;
    }
    if src.len() <= out.len() && out[out.len() - src.len()..] == *src {
        return Layout::Suffix(src.iter().product());
    }
    Layout::General
}

/// Visits every output position with the matching input offsets.
pub(crate) fn for_each_index(out: &[usize], a: &[usize], b: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let sa = aligned_strides(a, out);
    let sb = aligned_strides(b, out);
    let total: usize = out.iter().product();
    if total == 0 {
        return;
    }
    let rank = out.len();
    let mut idx = vec![0usize; rank];
    let (mut ia, mut ib) = (0usize, 0usize);
    for i in 0..total {
        f(i, ia, ib);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            ia += sa[ax];
            ib += sb[ax];
            if idx[ax] < out[ax] {
                break;
            }
            ia -= sa[ax] * out[ax];
            ib -= sb[ax] * out[ax];
            idx[ax] = 0;
        }
    }
}

/// Offset in `src` for each output position.
pub(crate) fn source_offsets(src: &[usize], out: &[usize]) -> Vec<usize> {
    let mut offsets = Vec::with_capacity(out.iter().product());
    for_each_index(out, src, &[], |_, ia, _| offsets.push(ia));
    offsets
}
