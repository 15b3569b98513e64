//! Linear-projection patch embedding followed by a transformer encoder stack.

use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::kernels::{segments_from_lengths, Segment};
use crate::nn::layers::{EncoderLayer, LayerConfig, LayerNorm, Linear, INIT_STD};
use crate::nn::{Graph, ParamId, ParamStore, Var};
use crate::tensor::{Real, Tensor};

/// Geometry of the patch grid for one image size.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchGrid {
    pub patch: usize,
    pub rows: usize,
    pub cols: usize,
    pub channels: usize,
}

impl PatchGrid {
    pub fn new(height: usize, width: usize, channels: usize, patch: usize) -> Result<Self> {
        if patch == 0 || height % patch != 0 || width % patch != 0 || height == 0 || width == 0 {
            return Err(Error::IndivisibleImage { height, width, patch });
        }
        Ok(Self { patch, rows: height / patch, cols: width / patch, channels })
    }

    pub fn num_patches(&self) -> usize {
        self.rows * self.cols
    }

    /// Length of one flattened `P × P × C` patch.
    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * self.channels
    }

    pub fn height(&self) -> usize {
        self.rows * self.patch
    }

    pub fn width(&self) -> usize {
        self.cols * self.patch
    }
}

/// Gather index turning `batch` stacked `[H, W, C]` maps into rows of flattened
/// `f × f × C` blocks in raster order (space-to-depth with block size `f`).
pub fn space_to_depth_index(batch: usize, h: usize, w: usize, c: usize, f: usize) -> Vec<usize> {
    let (gh, gw) = (h / f, w / f);
    let mut idx = Vec::with_capacity(batch * h * w * c);
    for b in 0..batch {
        for gy in 0..gh {
            for gx in 0..gw {
                for py in 0..f {
                    for px in 0..f {
                        let base = ((b * h + gy * f + py) * w + gx * f + px) * c;
                        idx.extend(base..base + c);
                    }
                }
            }
        }
    }
    idx
}

/// Inverse permutation of [`space_to_depth_index`].
pub fn depth_to_space_index(batch: usize, h: usize, w: usize, c: usize, f: usize) -> Vec<usize> {
    let fwd = space_to_depth_index(batch, h, w, c, f);
    let mut inv = vec![0; fwd.len()];
    for (i, &src) in fwd.iter().enumerate() {
        inv[src] = i;
    }
    inv
}

/// Splits an `[H, W, C]` image into `[N, P²·C]` flattened patches, row-major.
pub fn patchify<T: Real>(image: &Tensor<T>, patch: usize) -> Result<Tensor<T>> {
    let s = image.shape();
    if s.len() != 3 {
        return Err(Error::ShapeMismatch(format!("expected [H, W, C], got {s:?}")));
    }
    let grid = PatchGrid::new(s[0], s[1], s[2], patch)?;
    let idx = space_to_depth_index(1, s[0], s[1], s[2], patch);
    let data = idx.iter().map(|&i| image.data()[i]).collect();
    Tensor::new([grid.num_patches(), grid.patch_dim()], data)
}

/// Inverse of [`patchify`].
pub fn unpatchify<T: Real>(patches: &Tensor<T>, grid: &PatchGrid) -> Result<Tensor<T>> {
    if patches.shape() != [grid.num_patches(), grid.patch_dim()] {
        return Err(Error::ShapeMismatch(format!(
            "patches {:?} for grid {:?}",
            patches.shape(),
            grid
        )));
    }
    let idx = space_to_depth_index(1, grid.height(), grid.width(), grid.channels, grid.patch);
    let mut out = vec![T::zero(); patches.numel()];
    for (i, &dst) in idx.iter().enumerate() {
        out[dst] = patches.data()[i];
    }
    Tensor::new([grid.height(), grid.width(), grid.channels], out)
}

/// Stacks the patch matrices of several images into `[B·N, P²·C]`.
pub fn patchify_batch<T: Real>(images: &[&Tensor<T>], patch: usize) -> Result<Tensor<T>> {
    let mut data = Vec::new();
    let mut dim = 0;
    for img in images {
        let p = patchify(img, patch)?;
        dim = p.cols();
        data.extend_from_slice(p.data());
    }
    let rows = if dim == 0 { 0 } else { data.len() / dim };
    Tensor::new([rows, dim], data)
}

/// Masked-patch replacement applied before the transformer layers.
#[derive(Clone, Debug)]
pub struct PatchMask {
    pub embedding: ParamId,
    pub mask: Rc<Vec<bool>>,
}

#[derive(Clone, Debug)]
pub struct VisualEncoder {
    pub grid: PatchGrid,
    pub d_model: usize,
    pub patch_embed: Linear,
    pub pos_embed: ParamId,
    pub layers: Vec<EncoderLayer>,
    pub norm: LayerNorm,
    pub dropout: f64,
}

impl VisualEncoder {
    pub const PREFIX: &'static str = "encoder.";

    pub fn new<T: Real>(store: &mut ParamStore<T>, grid: PatchGrid, cfg: &LayerConfig, rng: &mut impl Rng) -> Self {
        let d = cfg.d_model;
        Self {
            grid,
            d_model: d,
            patch_embed: Linear::new(store, "encoder.patch_embed", grid.patch_dim(), d, rng),
            pos_embed: store.add_normal("encoder.pos_embed", &[grid.num_patches(), d], INIT_STD, rng),
            layers: (0..cfg.enc_layers)
                .map(|i| EncoderLayer::new(store, &format!("encoder.layers.{i}"), cfg, rng))
                .collect(),
            norm: LayerNorm::new(store, "encoder.norm", d),
            dropout: cfg.dropout,
        }
    }

    pub fn segments(&self, batch: usize) -> Vec<Segment> {
        segments_from_lengths(&vec![self.grid.num_patches(); batch])
    }

    /// Projected patch embeddings `[B·N, d]` before positions are added.
    pub fn embed_patches<T: Real>(&self, g: &mut Graph<T>, patches: Var) -> Result<Var> {
        if g.value(patches).cols() != self.grid.patch_dim() {
            return Err(Error::ShapeMismatch(format!(
                "patch width {} (expected {})",
                g.value(patches).cols(),
                self.grid.patch_dim()
            )));
        }
        Ok(self.patch_embed.forward(g, patches))
    }

    /// Encodes `[B·N, P²·C]` patches into `[B·N, d]` features.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, patches: Var, mask: Option<&PatchMask>) -> Result<Var> {
        let n = self.grid.num_patches();
        let rows = g.value(patches).rows();
        if rows % n != 0 {
            return Err(Error::ShapeMismatch(format!("{rows} patch rows is not a multiple of {n}")));
        }
        let batch = rows / n;
        let mut x = self.embed_patches(g, patches)?;
        if let Some(m) = mask {
            if m.mask.len() != rows {
                return Err(Error::ShapeMismatch(format!("mask of {} for {rows} patches", m.mask.len())));
            }
            let fill = g.param(m.embedding);
            x = g.select_rows(x, fill, m.mask.clone());
        }
        let pos = g.param(self.pos_embed);
        let pos = g.gather_rows(pos, (0..batch).flat_map(|_| 0..n).collect());
        x = g.add(x, pos);
        x = g.dropout(x, self.dropout);
        let segments = self.segments(batch);
        for layer in &self.layers {
            x = layer.forward(g, x, &segments)?;
        }
        Ok(self.norm.forward(g, x))
    }

    /// Evaluation-mode features `[N, d]` for one normalized `[H, W, C]` image.
    pub fn encode<T: Real>(&self, store: &ParamStore<T>, image: &Tensor<T>) -> Result<Tensor<T>> {
        let p = patchify(image, self.grid.patch)?;
        if p.rows() != self.grid.num_patches() {
            return Err(Error::ShapeMismatch(format!(
                "image gives {} patches, encoder expects {}",
                p.rows(),
                self.grid.num_patches()
            )));
        }
        let mut g = Graph::new(store);
        let x = g.input(p);
        let out = self.forward(&mut g, x, None)?;
        Ok(g.value(out).clone())
    }
}
