//! Serialization orders for 2D maps, spectra and frame stacks.
//!
//! Every ordering is an explicit permutation of cell indices, so any
//! sequence model output can be put back on its grid exactly.
//!
//! Conventions: cells are row-major `row * width + col`, rows grow
//! downward. The spiral starts at the centered DC cell `(h/2, w/2)` and
//! turns right, down, left, up with leg lengths 1, 1, 2, 2, 3, 3, ...;
//! cells outside the grid are skipped. Rings are Chebyshev squares.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScanPath {
    order: Vec<usize>,
    inverse: Vec<usize>,
}

impl ScanPath {
    /// Fails unless `order` is a bijection on `0..order.len()`.
    pub fn new(order: Vec<usize>) -> Result<Self> {
        let n = order.len();
        let mut inverse = vec![usize::MAX; n];
        for (k, &cell) in order.iter().enumerate() {
            if cell >= n || inverse[cell] != usize::MAX {
                return Err(Error::shape("scan_path", format!("not a permutation at step {k}")));
            }
            inverse[cell] = k;
        }
        Ok(Self { order, inverse })
    }

    pub fn identity(n: usize) -> Self {
        Self { order: (0..n).collect(), inverse: (0..n).collect() }
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    /// Cell visited at each step.
    pub fn order(&self) -> &[usize] {
        &self.order
    }

    /// Step at which each cell is visited.
    pub fn inverse(&self) -> &[usize] {
        &self.inverse
    }

    pub fn reversed(&self) -> Self {
        let order: Vec<usize> = self.order.iter().rev().copied().collect();
        let n = order.len();
        let inverse = self.inverse.iter().map(|&k| n - 1 - k).collect();
        Self { order, inverse }
    }

    /// Reorders `axis` of `x` (grid layout) into visiting order.
    pub fn serialize(&self, x: &Tensor, axis: usize) -> Result<Tensor> {
        self.check_axis(x, axis)?;
        x.index_select(axis, &self.order)
    }

    /// Puts a sequence in visiting order back on the grid.
    pub fn restore(&self, seq: &Tensor, axis: usize) -> Result<Tensor> {
        self.check_axis(seq, axis)?;
        seq.index_select(axis, &self.inverse)
    }

    pub fn serialize_slice<T: Copy>(&self, cells: &[T]) -> Vec<T> {
        self.order.iter().map(|&c| cells[c]).collect()
    }

    pub fn restore_slice<T: Copy>(&self, seq: &[T]) -> Vec<T> {
        self.inverse.iter().map(|&k| seq[k]).collect()
    }

    fn check_axis(&self, x: &Tensor, axis: usize) -> Result<()> {
        match x.shape().get(axis) {
            Some(&n) if n == self.len() => Ok(()),
            _ => Err(Error::shape("scan_path", format!("axis {axis} of {:?} vs path of {}", x.shape(), self.len()))),
        }
    }
}

/// The four cross-scan directions, in the order returned by
/// [`cross_scan_paths`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Horizontal,
    Vertical,
    HorizontalReverse,
    VerticalReverse,
}

impl Direction {
    pub const ALL: [Direction; 4] =
        [Direction::Horizontal, Direction::Vertical, Direction::HorizontalReverse, Direction::VerticalReverse];
}

/// Row-major, column-major, and both reversed.
pub fn cross_scan_paths(height: usize, width: usize) -> [ScanPath; 4] {
    let horizontal = ScanPath::identity(height * width);
    let vertical_order = (0..width).flat_map(|c| (0..height).map(move |r| r * width + c)).collect();
    let vertical = ScanPath::new(vertical_order).expect("column-major order is a permutation");
    let hr = horizontal.reversed();
    let vr = vertical.reversed();
    [horizontal, vertical, hr, vr]
}

/// Sums the four sequences after putting each back on the grid.
/// `seqs[k]` is in the visiting order of `paths[k]` along `axis`.
pub fn cross_merge(seqs: &[Tensor], paths: &[ScanPath], axis: usize) -> Result<Tensor> {
    if seqs.len() != paths.len() || seqs.is_empty() {
        return Err(Error::shape("cross_merge", format!("{} sequences for {} paths", seqs.len(), paths.len())));
    }
    let mut acc = paths[0].restore(&seqs[0], axis)?;
    for (s, p) in seqs.iter().zip(paths).skip(1) {
        acc = acc.add(&p.restore(s, axis)?)?;
    }
    Ok(acc)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpiralDirection {
    LowToHigh,
    HighToLow,
}

/// Clockwise unit-step spiral from the centered DC cell.
pub fn spiral_scan_path(height: usize, width: usize, direction: SpiralDirection) -> ScanPath {
    let total = height * width;
    let mut order = Vec::with_capacity(total);
    let (mut r, mut c) = ((height / 2) as isize, (width / 2) as isize);
    let moves = [(0isize, 1isize), (1, 0), (0, -1), (-1, 0)];
    let emit = |r: isize, c: isize, order: &mut Vec<usize>| {
        if r >= 0 && c >= 0 && (r as usize) < height && (c as usize) < width {
            order.push(r as usize * width + c as usize);
        }
    };
    emit(r, c, &mut order);
    let mut leg = 1;
    let mut turn = 0;
    while order.len() < total {
        for _ in 0..2 {
            let (dr, dc) = moves[turn % 4];
            for _ in 0..leg {
                r += dr;
                c += dc;
                emit(r, c, &mut order);
            }
            turn += 1;
        }
        leg += 1;
    }
    order.truncate(total);
    let path = ScanPath::new(order).expect("spiral visits every cell once");
    match direction {
        SpiralDirection::LowToHigh => path,
        SpiralDirection::HighToLow => path.reversed(),
    }
}

/// Scans over the `frames x positions` spatio-temporal grid: horizontal is
/// frame-major, vertical is position-major, plus both reversed.
pub fn spatiotemporal_paths(frames: usize, positions: usize) -> [ScanPath; 4] {
    cross_scan_paths(frames, positions)
}

/// Token orders over `2 * positions` tokens where spatial token `p` is
/// index `p` and frequency token `p` is index `positions + p`.
#[derive(Debug, Clone)]
pub struct DualDomainPaths {
    /// All spatial tokens, then all frequency tokens.
    pub seq2seq: ScanPath,
    /// `s0, f0, s1, f1, ...`
    pub point2point: ScanPath,
}

pub fn dual_domain_paths(positions: usize) -> DualDomainPaths {
    let interleaved = (0..positions).flat_map(|p| [p, positions + p]).collect();
    DualDomainPaths {
        seq2seq: ScanPath::identity(2 * positions),
        point2point: ScanPath::new(interleaved).expect("interleaving is a permutation"),
    }
}
