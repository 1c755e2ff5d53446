//! Patch extraction for stride-1 convolutions padded by the kernel radius.
//!
//! Activations of a convolution layer are stored as a `J x |T|` matrix whose
//! column `t` holds the channels at location `t` (row-major over the grid).
//! The flat form used between layers is the column-stacked `vec` of that
//! matrix. A patch column lists the offsets `δ` row-major over
//! `[-R, R]²`, each contributing its `J` channels.

use crate::error::{shape_err, Result};
use crate::linalg::Matrix;
use crate::nets::Grid;

/// Source location for offset `delta` around `location`, if it is on the grid.
fn neighbour(grid: Grid, radius: usize, location: usize, delta: usize) -> Option<usize> {
    let side = 2 * radius + 1;
    let (y, x) = ((location / grid.width) as isize, (location % grid.width) as isize);
    let dy = (delta / side) as isize - radius as isize;
    let dx = (delta % side) as isize - radius as isize;
    let (sy, sx) = (y + dy, x + dx);
    if sy < 0 || sx < 0 || sy >= grid.height as isize || sx >= grid.width as isize {
        None
    } else {
        Some(sy as usize * grid.width + sx as usize)
    }
}

/// Patch vector at one location from flat activations (`t * J + j` layout),
/// optionally followed by the homogeneous coordinate.
pub(crate) fn patch(
    flat: &[f64],
    channels: usize,
    radius: usize,
    grid: Grid,
    padding: &[f64],
    location: usize,
    homogeneous: bool,
) -> Vec<f64> {
    let offsets = (2 * radius + 1).pow(2);
    let mut out = Vec::with_capacity(channels * offsets + 1);
    for delta in 0..offsets {
        match neighbour(grid, radius, location, delta) {
            Some(src) => out.extend_from_slice(&flat[src * channels..(src + 1) * channels]),
            None => out.extend_from_slice(padding),
        }
    }
    if homogeneous {
        out.push(1.0);
    }
    out
}

/// Adds a patch cotangent back onto the flat input cotangent. Padded
/// positions are constants and receive nothing.
pub(crate) fn scatter_patch(
    cotangent: &mut [f64],
    patch_cotangent: &[f64],
    channels: usize,
    radius: usize,
    grid: Grid,
    location: usize,
) {
    let offsets = (2 * radius + 1).pow(2);
    for delta in 0..offsets {
        if let Some(src) = neighbour(grid, radius, location, delta) {
            let dst = &mut cotangent[src * channels..(src + 1) * channels];
            for (d, p) in dst.iter_mut().zip(&patch_cotangent[delta * channels..(delta + 1) * channels]) {
                *d += p;
            }
        }
    }
}

/// Expanded activations: the `(J·|Δ|) x |T|` matrix whose column `t` is the
/// zero-padded patch around location `t`.
pub fn extract_patches(activations: &Matrix, radius: usize, grid: Grid) -> Result<Matrix> {
    let padding = vec![0.0; activations.rows()];
    extract_patches_padded(activations, radius, grid, &padding)
}

/// Like [`extract_patches`] with an explicit padding vector.
pub fn extract_patches_padded(activations: &Matrix, radius: usize, grid: Grid, padding: &[f64]) -> Result<Matrix> {
    let (channels, locations) = activations.shape();
    if locations != grid.locations() {
        return shape_err(format!("{locations} columns for a {}x{} grid", grid.height, grid.width));
    }
    if padding.len() != channels {
        return shape_err(format!("{} padding values for {channels} channels", padding.len()));
    }
    let flat = crate::linalg::vec(activations);
    let offsets = (2 * radius + 1).pow(2);
    let mut out = Matrix::zeros(channels * offsets, locations);
    for t in 0..locations {
        out.set_col(t, &patch(&flat, channels, radius, grid, padding, t, false));
    }
    Ok(out)
}
