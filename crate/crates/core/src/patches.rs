//! Patch tokenization of latent grids, with 4-neighborhood context.

use alloc::vec::Vec;

use crate::error::{bail, Result};
use crate::grid::LatentGrid;

/// One square patch and its top/bottom/left/right neighbors, each stored
/// row-major as `patch * patch` values.
///
/// A neighbor that falls outside the grid is replaced by edge replication of
/// the patch itself: a missing left neighbor repeats the patch's first
/// column, a missing top neighbor repeats its first row, and so on.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchContext {
    pub row: usize,
    pub col: usize,
    pub values: Vec<f64>,
    pub top: Vec<f64>,
    pub bottom: Vec<f64>,
    pub left: Vec<f64>,
    pub right: Vec<f64>,
}

impl PatchContext {
    /// `values | top | bottom | left | right`, concatenated.
    pub fn flatten_into(&self, out: &mut Vec<f64>) {
        out.extend_from_slice(&self.values);
        out.extend_from_slice(&self.top);
        out.extend_from_slice(&self.bottom);
        out.extend_from_slice(&self.left);
        out.extend_from_slice(&self.right);
    }
}

fn check(grid: &LatentGrid, patch: usize) -> Result<(usize, usize)> {
    let (w, h) = grid.dims();
    if patch == 0 || w % patch != 0 || h % patch != 0 {
        bail!(Resample, "patch size {patch} does not divide grid {w}x{h}");
    }
    Ok((w / patch, h / patch))
}

fn read_patch(grid: &LatentGrid, patch: usize, row: usize, col: usize) -> Vec<f64> {
    let w = grid.width();
    let v = grid.values();
    let mut out = Vec::with_capacity(patch * patch);
    for y in row * patch..(row + 1) * patch {
        out.extend_from_slice(&v[y * w + col * patch..y * w + (col + 1) * patch]);
    }
    out
}

/// Row-major token layout: token `r * cols + c` holds patch `(r, c)`.
pub fn grid_to_tokens(grid: &LatentGrid, patch: usize) -> Result<Vec<f64>> {
    let (cols, rows) = check(grid, patch)?;
    let mut out = Vec::with_capacity(grid.len());
    for r in 0..rows {
        for c in 0..cols {
            out.extend(read_patch(grid, patch, r, c));
        }
    }
    Ok(out)
}

/// Inverse of [`grid_to_tokens`].
pub fn tokens_to_grid(tokens: &[f64], patch: usize, width: usize, height: usize) -> Result<LatentGrid> {
    if patch == 0 || width % patch != 0 || height % patch != 0 || tokens.len() != width * height {
        bail!(Shape, "{} token values cannot fill {width}x{height} with patch {patch}", tokens.len());
    }
    let cols = width / patch;
    let pp = patch * patch;
    let mut vals = alloc::vec![0.0; width * height];
    for (t, chunk) in tokens.chunks_exact(pp).enumerate() {
        let (r, c) = (t / cols, t % cols);
        for dy in 0..patch {
            let y = r * patch + dy;
            vals[y * width + c * patch..y * width + (c + 1) * patch]
                .copy_from_slice(&chunk[dy * patch..(dy + 1) * patch]);
        }
    }
    LatentGrid::new(width, height, vals)
}

pub fn split_patches_with_context(grid: &LatentGrid, patch: usize) -> Result<Vec<PatchContext>> {
    let (cols, rows) = check(grid, patch)?;
    let mut out = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            let values = read_patch(grid, patch, r, c);
            let repl_row = |src_row: usize| -> Vec<f64> {
                let line = &values[src_row * patch..(src_row + 1) * patch];
                (0..patch).flat_map(|_| line.iter().copied()).collect()
            };
            let repl_col = |src_col: usize| -> Vec<f64> {
                (0..patch)
                    .flat_map(|y| core::iter::repeat(values[y * patch + src_col]).take(patch))
                    .collect()
            };
            let top = if r > 0 { read_patch(grid, patch, r - 1, c) } else { repl_row(0) };
            let bottom = if r + 1 < rows {
                read_patch(grid, patch, r + 1, c)
            } else {
                repl_row(patch - 1)
            };
            let left = if c > 0 { read_patch(grid, patch, r, c - 1) } else { repl_col(0) };
            let right = if c + 1 < cols {
                read_patch(grid, patch, r, c + 1)
            } else {
                repl_col(patch - 1)
            };
            out.push(PatchContext {
                row: r,
                col: c,
                values,
                top,
                bottom,
                left,
                right,
            });
        }
    }
    Ok(out)
}

/// Rebuild a grid from the center values of [`split_patches_with_context`].
pub fn reassemble(patches: &[PatchContext], patch: usize, width: usize, height: usize) -> Result<LatentGrid> {
    let tokens: Vec<f64> = patches.iter().flat_map(|p| p.values.iter().copied()).collect();
    tokens_to_grid(&tokens, patch, width, height)
}
