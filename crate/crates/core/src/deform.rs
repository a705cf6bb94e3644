//! 3D deformable attention: offset-guided token search over the RGB token
//! volume and the attention block that consumes it.
//!
//! Reference points form a regular grid in normalized [-1, 1] coordinates,
//! one per output cell, with endpoints mapped onto the first and last input
//! index by `idx = (q + 1) / 2 * (extent - 1)`. An offset network displaces
//! the grid; displaced points gather input tokens by trilinear interpolation
//! with the kernel `g(a, b) = max(0, 1 - |a - b|)` in index units, so at most
//! eight source tokens contribute per point. Out-of-range points clamp to the
//! volume boundary.

use crate::attention::{attention_block, AttnMap, AttnWeights, FfnWeights, LN_EPS};
use crate::error::{Error, Result};
use crate::tensor::{conv, counter, ops, Tensor};

/// Geometry of the offset network and the sampling scale.
#[derive(Debug, Clone, Copy)]
pub struct DeformConfig {
    /// Kernel extent of the first offset conv.
    pub kernel: usize,
    /// Stride of the first offset conv; equal to `kernel` for non-overlapping
    /// windows.
    pub stride: usize,
    /// Scale applied to the tanh-bounded offsets, in normalized units.
    pub offset_range: f64,
}

pub struct OffsetNetParams {
    /// (d, d, k, k, k) kernel of the strided conv.
    pub conv1: Tensor,
    /// (3, d, 1, 1, 1) kernel of the projection conv; zero-initialized so
    /// training starts from the undeformed gather.
    pub conv2: Tensor,
}

pub struct DeformBlockParams {
    pub offset_net: OffsetNetParams,
    pub attn: AttnWeights,
    pub ffn: FfnWeights,
}

/// Attention map and sampling coordinates captured from one block.
#[derive(Debug, Clone, serde::Serialize)]
pub struct DeformTrace {
    pub map: AttnMap,
    /// Clamped deformed points, axis-major (t, y, x), each in [-1, 1].
    pub deformed_points: Vec<f64>,
    pub grid_extents: (usize, usize, usize),
}

/// Evenly spaced reference points over (t, h, w), flattened (3, t, h, w) with
/// channel order (t, y, x). Endpoints sit exactly on -1 and 1.
pub fn reference_grid(t: usize, h: usize, w: usize) -> Vec<f64> {
    let axis = |n: usize, i: usize| -> f64 {
        if n <= 1 {
            0.0
        } else {
            -1.0 + 2.0 * i as f64 / (n - 1) as f64
        }
    };
    let cells = t * h * w;
    let mut grid = vec![0.0; 3 * cells];
    let mut cell = 0;
    for it in 0..t {
        for iy in 0..h {
            for ix in 0..w {
                grid[cell] = axis(t, it);
                grid[cells + cell] = axis(h, iy);
                grid[2 * cells + cell] = axis(w, ix);
                cell += 1;
            }
        }
    }
    grid
}

/// Two-layer conv stack producing bounded offsets: conv(k, stride) -> LN over
/// channels -> GELU -> 1x1x1 conv to 3 channels -> tanh -> offset_range.
pub fn offset_network(
    z: &Tensor,
    params: &OffsetNetParams,
    cfg: &DeformConfig,
) -> Result<Tensor> {
    let hidden = conv::conv3d(z, &params.conv1, cfg.stride)?;
    let (d, ot, oh, ow) = hidden.dims4("offset_network")?;
    let m = ot * oh * ow;
    // LN across the channel axis of each cell.
    let cellwise = ops::transpose2(&ops::reshape(&hidden, &[d, m])?)?;
    let normed = ops::gelu(&ops::layer_norm(&cellwise, LN_EPS)?)?;
    let hidden = ops::reshape(&ops::transpose2(&normed)?, &[d, ot, oh, ow])?;
    let raw = conv::conv3d(&hidden, &params.conv2, 1)?;
    ops::scale(&ops::tanh(&raw)?, cfg.offset_range)
}

struct AxisSample {
    lo: usize,
    hi: usize,
    frac: f64,
    /// d(index)/d(offset); zero when the point clamped on this axis.
    index_per_offset: f64,
}

fn sample_axis(p: f64, dp: f64, extent: usize) -> AxisSample {
    let q = p + dp;
    let (q, clamped) = if q < -1.0 {
        (-1.0, true)
    } else if q > 1.0 {
        (1.0, true)
    } else {
        (q, false)
    };
    let scale = (extent.saturating_sub(1)) as f64 / 2.0;
    let idx = (q + 1.0) * scale;
    let lo = (idx.floor() as usize).min(extent - 1);
    let hi = (lo + 1).min(extent - 1);
    AxisSample {
        lo,
        hi,
        frac: idx - lo as f64,
        index_per_offset: if clamped { 0.0 } else { scale },
    }
}

fn clamp_unit(v: f64) -> f64 {
    v.clamp(-1.0, 1.0)
}

/// Clamped deformed points (grid + offsets) for export, axis-major (t, y, x).
pub fn deformed_points(offsets: &Tensor) -> Result<Vec<f64>> {
    let (three, t, h, w) = offsets.dims4("deformed_points")?;
    if three != 3 {
        return Err(Error::shape("deformed_points", format!("{:?}", offsets.shape())));
    }
    let grid = reference_grid(t, h, w);
    Ok(grid
        .iter()
        .zip(offsets.data().iter())
        .map(|(p, dp)| clamp_unit(p + dp))
        .collect())
}

/// Gather deformable tokens: for every displaced reference point, the
/// trilinear blend of the (up to) eight surrounding token vectors of `z`.
pub fn three_d_token_search(z: &Tensor, offsets: &Tensor) -> Result<Tensor> {
    let (d, t, h, w) = z.dims4("three_d_token_search")?;
    let (three, ot, oh, ow) = offsets.dims4("three_d_token_search")?;
    if three != 3 {
        return Err(Error::shape(
            "three_d_token_search",
            format!("offsets must be (3, ...), got {:?}", offsets.shape()),
        ));
    }
    let cells = ot * oh * ow;
    let in_cells = t * h * w;
    let grid = reference_grid(ot, oh, ow);
    let off = offsets.to_vec();

    fn resolve(
        grid: &[f64],
        off: &[f64],
        cells: usize,
        extents: (usize, usize, usize),
        cell: usize,
    ) -> [AxisSample; 3] {
        [
            sample_axis(grid[cell], off[cell], extents.0),
            sample_axis(grid[cells + cell], off[cells + cell], extents.1),
            sample_axis(grid[2 * cells + cell], off[2 * cells + cell], extents.2),
        ]
    }

    let zd = z.data();
    let mut out = vec![0.0; d * cells];
    for cell in 0..cells {
        let [at, ay, ax] = resolve(&grid, &off, cells, (t, h, w), cell);
        for (ti, tw) in [(at.lo, 1.0 - at.frac), (at.hi, at.frac)] {
            if tw == 0.0 {
                continue;
            }
            for (yi, yw) in [(ay.lo, 1.0 - ay.frac), (ay.hi, ay.frac)] {
                if yw == 0.0 {
                    continue;
                }
                let plane = ti * h * w + yi * w;
                for (xi, xw) in [(ax.lo, 1.0 - ax.frac), (ax.hi, ax.frac)] {
                    if xw == 0.0 {
                        continue;
                    }
                    let weight = tw * yw * xw;
                    let src = plane + xi;
                    for c in 0..d {
                        out[c * cells + cell] += weight * zd[c * in_cells + src];
                    }
                }
            }
        }
    }
    drop(zd);
    counter::add_macs((8 * d * cells) as u64);

    Tensor::from_op(
        "three_d_token_search",
        vec![d, ot, oh, ow],
        out,
        &[z, offsets],
        move |g, parents| {
            let z = &parents[0];
            let offsets = &parents[1];
            let zd = z.data();
            let mut dz = vec![0.0; d * in_cells];
            let mut doff = vec![0.0; 3 * cells];
            for cell in 0..cells {
                let [at, ay, ax] = resolve(&grid, &off, cells, (t, h, w), cell);
                let corners = |a: &AxisSample| [(a.lo, 1.0 - a.frac, -1.0), (a.hi, a.frac, 1.0)];
                for (ti, tw, tdw) in corners(&at) {
                    for (yi, yw, ydw) in corners(&ay) {
                        let plane = ti * h * w + yi * w;
                        for (xi, xw, xdw) in corners(&ax) {
                            let src = plane + xi;
                            let weight = tw * yw * xw;
                            let mut grad_dot_z = 0.0;
                            for c in 0..d {
                                let gv = g[c * cells + cell];
                                dz[c * in_cells + src] += weight * gv;
                                grad_dot_z += gv * zd[c * in_cells + src];
                            }
                            doff[cell] += grad_dot_z * tdw * yw * xw * at.index_per_offset;
                            doff[cells + cell] += grad_dot_z * tw * ydw * xw * ay.index_per_offset;
                            doff[2 * cells + cell] += grad_dot_z * tw * yw * xdw * ax.index_per_offset;
                        }
                    }
                }
            }
            drop(zd);
            z.accumulate_grad(&dz);
            offsets.accumulate_grad(&doff);
        },
    )
}

/// Row-token view of a (d, t, h, w) volume: (t*h*w, d), t-major.
pub fn tokens_from_volume(z: &Tensor) -> Result<Tensor> {
    let (d, t, h, w) = z.dims4("tokens_from_volume")?;
    ops::transpose2(&ops::reshape(z, &[d, t * h * w])?)
}

/// Inverse of `tokens_from_volume`.
pub fn volume_from_tokens(tokens: &Tensor, t: usize, h: usize, w: usize) -> Result<Tensor> {
    let (n, d) = tokens.dims2("volume_from_tokens")?;
    if n != t * h * w {
        return Err(Error::shape(
            "volume_from_tokens",
            format!("{n} tokens vs {t}x{h}x{w}"),
        ));
    }
    ops::reshape(&ops::transpose2(tokens)?, &[d, t, h, w])
}

/// One 3D deformable attention block. Queries are the full token set plus the
/// modal tokens; keys and values are the searched tokens plus the same modal
/// tokens. Returns the updated volume and modal tokens.
pub fn deformable_block(
    z: &Tensor,
    modal: &[&Tensor],
    params: &DeformBlockParams,
    cfg: &DeformConfig,
    heads: usize,
    mut trace: Option<&mut DeformTrace>,
) -> Result<(Tensor, Vec<Tensor>)> {
    let (d, t, h, w) = z.dims4("deformable_block")?;
    let offsets = offset_network(z, &params.offset_net, cfg)?;
    let searched = three_d_token_search(z, &offsets)?;
    let (_, ot, oh, ow) = searched.dims4("deformable_block")?;

    let z_tokens = tokens_from_volume(z)?;
    let searched_tokens = tokens_from_volume(&searched)?;
    let modal_rows: Vec<Tensor> = modal
        .iter()
        .map(|m| {
            let (mt, mo, md) = m.dims3("deformable_block")?;
            if mt != t || mo != 1 || md != d {
                return Err(Error::shape(
                    "deformable_block",
                    format!("modal token {:?} vs (T,1,d)=({t},1,{d})", m.shape()),
                ));
            }
            ops::reshape(m, &[t, d])
        })
        .collect::<Result<Vec<_>>>()?;

    let mut q_parts: Vec<&Tensor> = vec![&z_tokens];
    q_parts.extend(modal_rows.iter());
    let q_tokens = ops::concat(&q_parts, 0)?;
    let mut kv_parts: Vec<&Tensor> = vec![&searched_tokens];
    kv_parts.extend(modal_rows.iter());
    let kv_tokens = ops::concat(&kv_parts, 0)?;

    let mut map = trace
        .is_some()
        .then(|| AttnMap { heads: 0, n_q: 0, n_k: 0, weights: Vec::new() });
    let out = attention_block(&q_tokens, &kv_tokens, &params.attn, &params.ffn, heads, map.as_mut())?;
    if let (Some(tr), Some(map)) = (trace.as_deref_mut(), map) {
        tr.map = map;
        tr.deformed_points = deformed_points(&offsets)?;
        tr.grid_extents = (ot, oh, ow);
    }

    let n_z = t * h * w;
    let z_out = volume_from_tokens(&ops::slice(&out, 0, 0, n_z)?, t, h, w)?;
    let mut modal_out = Vec::with_capacity(modal.len());
    for i in 0..modal.len() {
        modal_out.push(ops::reshape(&ops::slice(&out, 0, n_z + i * t, t)?, &[t, 1, d])?);
    }
    Ok((z_out, modal_out))
}
