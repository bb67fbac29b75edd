//! Small CNN: conv → folded batch-norm affine → ReLU → optional pool, then
//! global average pooling and a linear classifier. Output channels are
//! maskable.

use crate::error::{shape_err, Error, Result};
use crate::model::OpCounter;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolKind {
    None,
    /// Non-overlapping `k x k` max pooling.
    Max(usize),
    /// Non-overlapping `k x k` average pooling.
    Avg(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    /// `[C_out, C_in, k, k]`.
    pub weight: Tensor,
    pub scale: Vec<f32>,
    pub shift: Vec<f32>,
    pub stride: usize,
    pub pad: usize,
    pub pool: PoolKind,
}

impl ConvLayer {
    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn kernel(&self) -> usize {
        self.weight.shape()[2]
    }

    /// Conv output spatial size for an `h x w` input.
    pub fn conv_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let k = self.kernel();
        if h + 2 * self.pad < k || w + 2 * self.pad < k {
            return shape_err(format!("{h}x{w} input too small for kernel {k}"));
        }
        Ok((
            (h + 2 * self.pad - k) / self.stride + 1,
            (w + 2 * self.pad - k) / self.stride + 1,
        ))
    }

    fn pooled_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        match self.pool {
            PoolKind::None => Ok((h, w)),
            PoolKind::Max(k) | PoolKind::Avg(k) => {
                if k == 0 || h < k || w < k {
                    return shape_err(format!("{h}x{w} map too small for pool {k}"));
                }
                Ok((h / k, w / k))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CnnGraph {
    pub in_channels: usize,
    pub layers: Vec<ConvLayer>,
    /// `[C_last, n_classes]`.
    pub classifier: Tensor,
}

impl CnnGraph {
    pub fn n_classes(&self) -> usize {
        self.classifier.shape()[1]
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return shape_err("cnn has no conv layers");
        }
        let mut c = self.in_channels;
        for (i, l) in self.layers.iter().enumerate() {
            let s = l.weight.shape();
            if s.len() != 4 || s[1] != c || s[2] != s[3] {
                return shape_err(format!("conv {i}: weight {s:?} with {c} input channels"));
            }
            if l.scale.len() != s[0] || l.shift.len() != s[0] {
                return shape_err(format!("conv {i}: affine length mismatch"));
            }
            if l.stride == 0 {
                return Err(Error::Param(format!("conv {i}: stride 0")));
            }
            if !l.weight.is_finite() || !l.scale.iter().chain(&l.shift).all(|v| v.is_finite()) {
                return Err(Error::Param(format!("conv {i} has non-finite weights")));
            }
            c = s[0];
        }
        if self.classifier.rank() != 2 || self.classifier.shape()[0] != c {
            return shape_err(format!(
                "classifier {:?} after {c} channels",
                self.classifier.shape()
            ));
        }
        if !self.classifier.is_finite() {
            return Err(Error::Param("classifier has non-finite weights".into()));
        }
        Ok(())
    }
}

/// Keep-flags per output channel of every conv layer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelMask {
    pub layers: Vec<Vec<bool>>,
}

impl ChannelMask {
    pub fn full(g: &CnnGraph) -> Self {
        Self {
            layers: g
                .layers
                .iter()
                .map(|l| vec![true; l.out_channels()])
                .collect(),
        }
    }

    pub fn without(mut self, layer: usize, channel: usize) -> Self {
        self.layers[layer][channel] = false;
        self
    }

    pub fn check(&self, g: &CnnGraph) -> Result<()> {
        if self.layers.len() != g.layers.len()
            || self
                .layers
                .iter()
                .zip(&g.layers)
                .any(|(m, l)| m.len() != l.out_channels())
        {
            return Err(Error::MaskMismatch(
                "channel mask does not match cnn".into(),
            ));
        }
        Ok(())
    }
}

/// Post-activation feature maps per conv layer plus logits.
#[derive(Debug, Clone, PartialEq)]
pub struct CnnTrace {
    /// `[B, C_i, H_i, W_i]`, captured after ReLU and before pooling.
    pub features: Vec<Tensor>,
    pub logits: Tensor,
    /// Input to each layer; the last entry feeds global pooling.
    pub inputs: Vec<Tensor>,
}

pub fn cnn_forward(g: &CnnGraph, batch: &Tensor, mask: &ChannelMask) -> Result<CnnTrace> {
    cnn_forward_counted(g, batch, mask).map(|(t, _)| t)
}

pub fn cnn_forward_counted(
    g: &CnnGraph,
    batch: &Tensor,
    mask: &ChannelMask,
) -> Result<(CnnTrace, OpCounter)> {
    mask.check(g)?;
    if batch.rank() != 4 || batch.shape()[1] != g.in_channels {
        return shape_err(format!(
            "cnn batch {:?}, expected [B, {}, H, W]",
            batch.shape(),
            g.in_channels
        ));
    }
    let mut counter = OpCounter::default();
    let trace = run_layers(
        g,
        mask,
        0,
        batch.clone(),
        Vec::new(),
        Vec::new(),
        &mut counter,
    )?;
    Ok((trace, counter))
}

/// Re-runs layers `start..` from a cached full-mask trace.
pub fn cnn_forward_from(
    g: &CnnGraph,
    mask: &ChannelMask,
    start: usize,
    cached: &CnnTrace,
) -> Result<CnnTrace> {
    mask.check(g)?;
    let n = g.layers.len();
    if cached.features.len() != n || cached.inputs.len() != n + 1 || start > n {
        return Err(Error::CacheMismatch(
            "cnn cache does not match graph".into(),
        ));
    }
    if mask.layers[..start].iter().any(|m| m.iter().any(|&k| !k)) {
        return Err(Error::CacheMismatch(format!(
            "mask prunes a layer before start {start}"
        )));
    }
    let mut counter = OpCounter::default();
    run_layers(
        g,
        mask,
        start,
        cached.inputs[start].clone(),
        cached.features[..start].to_vec(),
        cached.inputs[..start].to_vec(),
        &mut counter,
    )
}

fn run_layers(
    g: &CnnGraph,
    mask: &ChannelMask,
    start: usize,
    mut x: Tensor,
    mut features: Vec<Tensor>,
    mut inputs: Vec<Tensor>,
    counter: &mut OpCounter,
) -> Result<CnnTrace> {
    for (li, layer) in g.layers.iter().enumerate().skip(start) {
        let in_keep: Vec<bool> = if li == 0 {
            vec![true; g.in_channels]
        } else {
            mask.layers[li - 1].clone()
        };
        let act = conv_layer(layer, &x, &in_keep, &mask.layers[li], counter)?;
        let pooled = pool(layer, &act)?;
        inputs.push(x);
        features.push(act);
        x = pooled;
    }
    let logits = classify(g, &x, mask.layers.last().expect("non-empty"), counter)?;
    inputs.push(x);
    Ok(CnnTrace {
        features,
        logits,
        inputs,
    })
}

fn conv_layer(
    layer: &ConvLayer,
    x: &Tensor,
    in_keep: &[bool],
    out_keep: &[bool],
    counter: &mut OpCounter,
) -> Result<Tensor> {
    let (b, ci, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let co = layer.out_channels();
    let k = layer.kernel();
    let (ho, wo) = layer.conv_hw(h, w)?;
    let (s, p) = (layer.stride, layer.pad);
    let wt = layer.weight.data();
    let kept_in: Vec<usize> = (0..ci).filter(|&c| in_keep[c]).collect();
    let n_out = out_keep.iter().filter(|&&k| k).count();
    counter.macs += (b * ho * wo * k * k * kept_in.len() * n_out) as u64;
    let mut out = vec![0.0f32; b * co * ho * wo];
    for bi in 0..b {
        let xs = &x.data()[bi * ci * h * w..(bi + 1) * ci * h * w];
        for o in (0..co).filter(|&o| out_keep[o]) {
            let dst = &mut out[(bi * co + o) * ho * wo..(bi * co + o + 1) * ho * wo];
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = 0.0f64;
                    for &c in &kept_in {
                        let filt = &wt[((o * ci + c) * k) * k..((o * ci + c + 1) * k) * k];
                        for ky in 0..k {
                            let iy = (oy * s + ky) as isize - p as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..k {
                                let ix = (ox * s + kx) as isize - p as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                acc += filt[ky * k + kx] as f64
                                    * xs[(c * h + iy as usize) * w + ix as usize] as f64;
                            }
                        }
                    }
                    let v = acc * layer.scale[o] as f64 + layer.shift[o] as f64;
                    dst[oy * wo + ox] = v.max(0.0) as f32;
                }
            }
        }
    }
    Tensor::new(vec![b, co, ho, wo], out)
}

fn pool(layer: &ConvLayer, x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let k = match layer.pool {
        PoolKind::None => return Ok(x.clone()),
        PoolKind::Max(k) | PoolKind::Avg(k) => k,
    };
    let (ho, wo) = layer.pooled_hw(h, w)?;
    let mut out = Vec::with_capacity(b * c * ho * wo);
    for map in x.data().chunks(h * w) {
        for oy in 0..ho {
            for ox in 0..wo {
                let window = (0..k)
                    .flat_map(|dy| (0..k).map(move |dx| map[(oy * k + dy) * w + ox * k + dx]));
                out.push(match layer.pool {
                    PoolKind::Max(_) => window.fold(f32::NEG_INFINITY, f32::max),
                    _ => (window.map(|v| v as f64).sum::<f64>() / (k * k) as f64) as f32,
                });
            }
        }
    }
    Tensor::new(vec![b, c, ho, wo], out)
}

fn classify(
    g: &CnnGraph,
    x: &Tensor,
    last_keep: &[bool],
    counter: &mut OpCounter,
) -> Result<Tensor> {
    let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let n_cls = g.n_classes();
    let kept: Vec<usize> = (0..c).filter(|&i| last_keep[i]).collect();
    counter.add_elems += (b * kept.len() * h * w) as u64;
    counter.macs += (b * kept.len() * n_cls) as u64;
    let mut logits = Vec::with_capacity(b * n_cls);
    for sample in x.data().chunks(c * h * w) {
        let mut acc = vec![0.0f64; n_cls];
        for &ch in &kept {
            let m = sample[ch * h * w..(ch + 1) * h * w]
                .iter()
                .map(|&v| v as f64)
                .sum::<f64>()
                / (h * w) as f64;
            let m = m as f32 as f64;
            let row = &g.classifier.data()[ch * n_cls..(ch + 1) * n_cls];
            for (a, &wv) in acc.iter_mut().zip(row) {
                *a += m * wv as f64;
            }
        }
        logits.extend(acc.into_iter().map(|v| v as f32));
    }
    Tensor::new(vec![b, n_cls], logits)
}

/// FLOPs of one sample through the masked CNN at input size `h x w`,
/// using the same convention as the instrumented forward.
pub fn cnn_flops(g: &CnnGraph, mask: &ChannelMask, h: usize, w: usize) -> Result<u64> {
    mask.check(g)?;
    let (mut h, mut w) = (h, w);
    let mut kept_in = g.in_channels;
    let mut macs = 0u64;
    for (l, keep) in g.layers.iter().zip(&mask.layers) {
        let (ho, wo) = l.conv_hw(h, w)?;
        let kept_out = keep.iter().filter(|&&k| k).count();
        macs += (ho * wo * l.kernel() * l.kernel() * kept_in * kept_out) as u64;
        let (ph, pw) = l.pooled_hw(ho, wo)?;
        h = ph;
        w = pw;
        kept_in = kept_out;
    }
    macs += (kept_in * g.n_classes()) as u64;
    Ok(2 * macs + (kept_in * h * w) as u64)
}

/// Bakes a channel mask into the weights: a removed channel's filter and
/// affine are zeroed, as are the consuming layer's input slices (or the
/// classifier rows for the last layer).
pub fn bake_channels(g: &CnnGraph, mask: &ChannelMask) -> Result<CnnGraph> {
    mask.check(g)?;
    let mut out = g.clone();
    for li in 0..out.layers.len() {
        for (c, &keep) in mask.layers[li].iter().enumerate() {
            if keep {
                continue;
            }
            let layer = &mut out.layers[li];
            let (ci, k) = (layer.in_channels(), layer.kernel());
            layer.weight.data_mut()[c * ci * k * k..(c + 1) * ci * k * k].fill(0.0);
            layer.scale[c] = 0.0;
            layer.shift[c] = 0.0;
            if let Some(next) = out.layers.get_mut(li + 1) {
                let (co, ci, k) = (next.out_channels(), next.in_channels(), next.kernel());
                for o in 0..co {
                    next.weight.data_mut()[((o * ci + c) * k) * k..((o * ci + c + 1) * k) * k]
                        .fill(0.0);
                }
            } else {
                let n_cls = out.classifier.shape()[1];
                out.classifier.data_mut()[c * n_cls..(c + 1) * n_cls].fill(0.0);
            }
        }
    }
    Ok(out)
}
