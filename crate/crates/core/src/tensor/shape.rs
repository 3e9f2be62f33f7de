//! Shape arithmetic shared by the ops.

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Numpy-style right-aligned broadcast of two shapes.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// For every flat index of `out`, the flat index of the broadcast input.
/// `None` when no broadcasting happens.
pub(crate) fn broadcast_map(out: &[usize], input: &[usize]) -> Option<Vec<usize>> {
    if out == input {
        return None;
    }
    let n: usize = out.iter().product();
    let in_n: usize = input.iter().product();
    // input is a suffix of out: plain modulo
    if input.len() <= out.len() && out[out.len() - input.len()..] == *input {
        return Some((0..n).map(|i| i % in_n.max(1)).collect());
    }
    let rank = out.len();
    let in_strides = strides(input);
    let mut eff = vec![0usize; rank];
    for i in 0..input.len() {
        let o = i + rank - input.len();
        eff[o] = if input[i] == 1 { 0 } else { in_strides[i] };
    }
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..n {
        map.push(off);
        for d in (0..rank).rev() {
            idx[d] += 1;
            off += eff[d];
            if idx[d] < out[d] {
                break;
            }
            off -= eff[d] * idx[d];
            idx[d] = 0;
        }
    }
    Some(map)
}

/// Sums a gradient over the broadcast axes back to the input length.
pub(crate) fn reduce_broadcast(grad: Vec<f64>, map: &Option<Vec<usize>>, in_len: usize) -> Vec<f64> {
    match map {
        None => grad,
        Some(m) => {
            let mut out = vec![0.0; in_len];
            for (g, &i) in grad.iter().zip(m) {
                out[i] += g;
            }
            out
        }
    }
}

/// Splits `shape` around `axis` into (outer, len, inner) extents.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}
