//! The reference tiny detector network: four 3x3 stride-2 conv blocks with
//! leaky-ReLU, then a 1x1 head emitting five channels per grid cell
//! (objectness logit + four box regression values). Forward and backward
//! passes are hand-written so parameters stay addressable as one flat vector,
//! which is what the EWC penalty and Fisher estimation need.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::core::Pixels;
use crate::rng::rng_for;

/// Leaky-ReLU negative slope.
const SLOPE: f64 = 0.1;

/// Map channels: objectness logit, box offsets and sizes (raw, pre-sigmoid).
pub const MAP_CHANNELS: usize = 5;
pub const CH_OBJ: usize = 0;
pub const CH_TX: usize = 1;
pub const CH_TY: usize = 2;
pub const CH_TW: usize = 3;
pub const CH_TH: usize = 4;

/// Square CHW tensor.
#[derive(Debug, Clone)]
pub struct Tensor3 {
    pub c: usize,
    pub s: usize,
    pub data: Vec<f64>,
}

impl Tensor3 {
    pub fn zeros(c: usize, s: usize) -> Self {
        Self {
            c,
            s,
            data: vec![0.0; c * s * s],
        }
    }

    #[inline]
    pub fn channel(&self, c: usize) -> &[f64] {
        &self.data[c * self.s * self.s..(c + 1) * self.s * self.s]
    }

    #[inline]
    pub fn channel_mut(&mut self, c: usize) -> &mut [f64] {
        &mut self.data[c * self.s * self.s..(c + 1) * self.s * self.s]
    }
}

/// Raw per-grid-cell network output: objectness logits, box regression
/// offsets and sizes, before any sigmoid. `data` is laid out `[5][G][G]`.
#[derive(Debug, Clone, PartialEq)]
pub struct OutputMap {
    pub grid: usize,
    pub data: Vec<f64>,
}

impl OutputMap {
    pub fn zeros(grid: usize) -> Self {
        Self {
            grid,
            data: vec![0.0; MAP_CHANNELS * grid * grid],
        }
    }

    #[inline]
    pub fn at(&self, ch: usize, gy: usize, gx: usize) -> f64 {
        self.data[(ch * self.grid + gy) * self.grid + gx]
    }

    #[inline]
    pub fn at_mut(&mut self, ch: usize, gy: usize, gx: usize) -> &mut f64 {
        &mut self.data[(ch * self.grid + gy) * self.grid + gx]
    }

    pub fn same_geometry(&self, other: &Self) -> bool {
        self.grid == other.grid && self.data.len() == other.data.len()
    }
}

/// Network shape descriptor. The grid is the input size divided by 2 per
/// conv block, e.g. 256 with channels [8, 16, 24, 32] gives a 16x16 grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Architecture {
    pub input_size: usize,
    pub channels: Vec<usize>,
}

impl Architecture {
    /// The reference desk-scale detector: 256x256 input, 16x16 grid.
    pub fn reference() -> Self {
        Self {
            input_size: 256,
            channels: vec![8, 16, 24, 32],
        }
    }

    pub fn grid(&self) -> usize {
        self.input_size >> self.channels.len()
    }

    fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.channels.len());
        let mut c_in = 3;
        for &c_out in &self.channels {
            dims.push((c_in, c_out));
            c_in = c_out;
        }
        dims
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        for (c_in, c_out) in self.layer_dims() {
            n += c_out * c_in * 9 + c_out;
        }
        let last = *self.channels.last().expect("at least one conv layer");
        n + MAP_CHANNELS * last + MAP_CHANNELS
    }

    /// (weight_offset, bias_offset) per conv layer, then the head.
    fn offsets(&self) -> (Vec<(usize, usize)>, (usize, usize)) {
        let mut offs = Vec::new();
        let mut pos = 0;
        for (c_in, c_out) in self.layer_dims() {
            offs.push((pos, pos + c_out * c_in * 9));
            pos += c_out * c_in * 9 + c_out;
        }
        let last = *self.channels.last().unwrap();
        let head = (pos, pos + MAP_CHANNELS * last);
        debug_assert_eq!(head.1 + MAP_CHANNELS, self.param_count());
        (offs, head)
    }
}

/// Objectness head bias at init. Strongly negative so an untrained detector
/// scores every cell well below the default confidence threshold.
const OBJ_BIAS_INIT: f64 = -4.0;

/// He-uniform initialization from a seed; identical seeds give identical
/// parameter vectors.
pub fn init_params(arch: &Architecture, seed: u64) -> Vec<f64> {
    let mut rng: ChaCha8Rng = rng_for(seed, &["detector-init"], &[]);
    let mut params = vec![0.0; arch.param_count()];
    let (offsets, head) = arch.offsets();
    for ((c_in, c_out), (w_off, b_off)) in arch.layer_dims().into_iter().zip(&offsets) {
        let limit = (6.0 / (c_in as f64 * 9.0)).sqrt();
        for w in &mut params[*w_off..w_off + c_out * c_in * 9] {
            *w = rng.random_range(-limit..limit);
        }
        for b in &mut params[*b_off..b_off + c_out] {
            *b = 0.0;
        }
    }
    let last = *arch.channels.last().unwrap();
    let limit = (6.0 / last as f64).sqrt();
    for w in &mut params[head.0..head.0 + MAP_CHANNELS * last] {
        *w = rng.random_range(-limit..limit);
    }
    let head_bias = head.0 + MAP_CHANNELS * last;
    params[head_bias + CH_OBJ] = OBJ_BIAS_INIT;
    params
}

/// Normalize an 8-bit RGB raster into a CHW tensor in [-0.5, 0.5].
pub fn image_to_tensor(pixels: &Pixels) -> Tensor3 {
    let s = pixels.width as usize;
    assert_eq!(
        pixels.width, pixels.height,
        "detector input must be square"
    );
    let mut t = Tensor3::zeros(3, s);
    let plane = s * s;
    for i in 0..plane {
        let base = i * 3;
        t.data[i] = f64::from(pixels.data[base]) / 255.0 - 0.5;
        t.data[plane + i] = f64::from(pixels.data[base + 1]) / 255.0 - 0.5;
        t.data[2 * plane + i] = f64::from(pixels.data[base + 2]) / 255.0 - 0.5;
    }
    t
}

/// Post-activation tensors of each conv block, kept for the backward pass.
pub struct ActivationCache {
    acts: Vec<Tensor3>,
}

/// 3x3 stride-2 pad-1 convolution. `out` must be pre-sized; it is
/// overwritten with bias + conv result.
fn conv_s2(inp: &Tensor3, weights: &[f64], bias: &[f64], out: &mut Tensor3) {
    let s = inp.s;
    let os = out.s;
    debug_assert_eq!(os * 2, s);
    let c_in = inp.c;
    for oc in 0..out.c {
        out.channel_mut(oc).fill(bias[oc]);
    }
    for oc in 0..out.c {
        for ic in 0..c_in {
            let w9 = &weights[(oc * c_in + ic) * 9..(oc * c_in + ic) * 9 + 9];
            let in_c = inp.channel(ic);
            for ky in 0..3usize {
                let (w0, w1, w2) = (w9[ky * 3], w9[ky * 3 + 1], w9[ky * 3 + 2]);
                let oy_start = usize::from(ky == 0);
                for oy in oy_start..os {
                    let iy = 2 * oy + ky - 1;
                    let in_row = &in_c[iy * s..iy * s + s];
                    // split borrows: take the channel slice once per row
                    let out_row = {
                        let base = (oc * os + oy) * os;
                        &mut out.data[base..base + os]
                    };
                    // kx = 1 and 2 are valid for every ox; kx = 0 needs ox >= 1
                    out_row[0] += w1 * in_row[0] + w2 * in_row[1];
                    for ox in 1..os {
                        let ix = 2 * ox;
                        out_row[ox] += w0 * in_row[ix - 1] + w1 * in_row[ix] + w2 * in_row[ix + 1];
                    }
                }
            }
        }
    }
}

fn leaky_relu_inplace(t: &mut Tensor3) {
    for v in &mut t.data {
        if *v < 0.0 {
            *v *= SLOPE;
        }
    }
}

/// 1x1 head over the last activation.
fn head_forward(act: &Tensor3, hw: &[f64], hb: &[f64], map: &mut OutputMap) {
    let plane = act.s * act.s;
    for k in 0..MAP_CHANNELS {
        let out = &mut map.data[k * plane..(k + 1) * plane];
        out.fill(hb[k]);
        for c in 0..act.c {
            let w = hw[k * act.c + c];
            let a = act.channel(c);
            for (o, &v) in out.iter_mut().zip(a) {
                *o += w * v;
            }
        }
    }
}

/// Forward pass. When `cache` is provided the post-activation tensors are
/// stored for a later [`backward`] call.
pub fn forward(
    arch: &Architecture,
    params: &[f64],
    input: &Tensor3,
    mut cache: Option<&mut ActivationCache>,
) -> OutputMap {
    assert_eq!(input.s, arch.input_size, "input size mismatch");
    assert_eq!(params.len(), arch.param_count(), "parameter length mismatch");
    let (offsets, head) = arch.offsets();
    if let Some(c) = cache.as_deref_mut() {
        c.acts.clear();
    }
    let mut cur = input.clone();
    let mut size = arch.input_size;
    for ((c_in, c_out), (w_off, b_off)) in arch.layer_dims().into_iter().zip(&offsets) {
        size /= 2;
        let mut out = Tensor3::zeros(c_out, size);
        conv_s2(
            &cur,
            &params[*w_off..w_off + c_out * c_in * 9],
            &params[*b_off..b_off + c_out],
            &mut out,
        );
        leaky_relu_inplace(&mut out);
        if let Some(c) = cache.as_deref_mut() {
            c.acts.push(out.clone());
        }
        cur = out;
    }
    let last = *arch.channels.last().unwrap();
    let grid = arch.grid();
    let mut map = OutputMap::zeros(grid);
    head_forward(
        &cur,
        &params[head.0..head.0 + MAP_CHANNELS * last],
        &params[head.0 + MAP_CHANNELS * last..head.0 + MAP_CHANNELS * last + MAP_CHANNELS],
        &mut map,
    );
    map
}

pub fn empty_cache() -> ActivationCache {
    ActivationCache { acts: Vec::new() }
}

/// Backward pass for one image. Takes the gradient of the loss with respect
/// to the output map and returns the gradient with respect to the flat
/// parameter vector. `input` and `cache` must come from the matching
/// [`forward`] call.
pub fn backward(
    arch: &Architecture,
    params: &[f64],
    input: &Tensor3,
    cache: &ActivationCache,
    dmap: &OutputMap,
) -> Vec<f64> {
    let (offsets, head) = arch.offsets();
    let dims = arch.layer_dims();
    let n_layers = dims.len();
    assert_eq!(cache.acts.len(), n_layers, "cache/arch mismatch");
    let mut grad = vec![0.0; params.len()];

    // Head: dmap -> (dhw, dhb, d_last_act)
    let last_act = &cache.acts[n_layers - 1];
    let plane = last_act.s * last_act.s;
    let last_c = last_act.c;
    let hw = &params[head.0..head.0 + MAP_CHANNELS * last_c];
    let mut d_act = Tensor3::zeros(last_c, last_act.s);
    {
        let (dhw, dhb) = {
            let (a, b) = grad[head.0..].split_at_mut(MAP_CHANNELS * last_c);
            (a, &mut b[..MAP_CHANNELS])
        };
        for k in 0..MAP_CHANNELS {
            let dm = &dmap.data[k * plane..(k + 1) * plane];
            dhb[k] = dm.iter().sum();
            for c in 0..last_c {
                let a = last_act.channel(c);
                let mut acc = 0.0;
                for (dv, av) in dm.iter().zip(a) {
                    acc += dv * av;
                }
                dhw[k * last_c + c] = acc;
                let w = hw[k * last_c + c];
                let da = d_act.channel_mut(c);
                for (o, dv) in da.iter_mut().zip(dm) {
                    *o += w * dv;
                }
            }
        }
    }

    // Conv blocks, last to first.
    let mut d_out = d_act;
    for l in (0..n_layers).rev() {
        let (c_in, c_out) = dims[l];
        let (w_off, b_off) = offsets[l];
        let act = &cache.acts[l];
        // leaky-ReLU backward: slope mask from the sign of the post-activation
        let mut dz = d_out;
        for (d, &a) in dz.data.iter_mut().zip(&act.data) {
            if a < 0.0 {
                *d *= SLOPE;
            }
        }
        let below: &Tensor3 = if l == 0 { input } else { &cache.acts[l - 1] };
        let s = below.s;
        let os = act.s;
        // bias gradient
        for oc in 0..c_out {
            grad[b_off + oc] = dz.channel(oc).iter().sum();
        }
        // weight gradient
        for oc in 0..c_out {
            let dz_c = dz.channel(oc);
            for ic in 0..c_in {
                let in_c = below.channel(ic);
                let w_base = w_off + (oc * c_in + ic) * 9;
                for ky in 0..3usize {
                    let (mut a0, mut a1, mut a2) = (0.0, 0.0, 0.0);
                    let oy_start = usize::from(ky == 0);
                    for oy in oy_start..os {
                        let iy = 2 * oy + ky - 1;
                        let in_row = &in_c[iy * s..iy * s + s];
                        let dz_row = &dz_c[oy * os..oy * os + os];
                        a1 += dz_row[0] * in_row[0];
                        a2 += dz_row[0] * in_row[1];
                        for ox in 1..os {
                            let ix = 2 * ox;
                            let d = dz_row[ox];
                            a0 += d * in_row[ix - 1];
                            a1 += d * in_row[ix];
                            a2 += d * in_row[ix + 1];
                        }
                    }
                    grad[w_base + ky * 3] = a0;
                    grad[w_base + ky * 3 + 1] = a1;
                    grad[w_base + ky * 3 + 2] = a2;
                }
            }
        }
        // input gradient (skipped for the first layer: not needed)
        if l > 0 {
            let mut d_in = Tensor3::zeros(c_in, s);
            for oc in 0..c_out {
                let dz_c = dz.channel(oc);
                for ic in 0..c_in {
                    let w9 = &params[w_off + (oc * c_in + ic) * 9..w_off + (oc * c_in + ic) * 9 + 9];
                    let d_in_c = d_in.channel_mut(ic);
                    for ky in 0..3usize {
                        let (w0, w1, w2) = (w9[ky * 3], w9[ky * 3 + 1], w9[ky * 3 + 2]);
                        let oy_start = usize::from(ky == 0);
                        for oy in oy_start..os {
                            let iy = 2 * oy + ky - 1;
                            let d_in_row = &mut d_in_c[iy * s..iy * s + s];
                            let dz_row = &dz_c[oy * os..oy * os + os];
                            let d0 = dz_row[0];
                            d_in_row[0] += w1 * d0;
                            d_in_row[1] += w2 * d0;
                            for ox in 1..os {
                                let ix = 2 * ox;
                                let d = dz_row[ox];
                                d_in_row[ix - 1] += w0 * d;
                                d_in_row[ix] += w1 * d;
                                d_in_row[ix + 1] += w2 * d;
                            }
                        }
                    }
                }
            }
            d_out = d_in;
        } else {
            break;
        }
    }
    grad
}

/// Numerically stable logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Largest confidence a decoded detection may carry. Saturated logits would
/// otherwise round to exactly 1.0 in f64 and survive a threshold of 1.
pub const CONFIDENCE_CAP: f64 = 1.0 - 1e-9;

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_arch() -> Architecture {
        Architecture {
            input_size: 16,
            channels: vec![4, 6],
        }
    }

    #[test]
    fn param_count_matches_layout() {
        let arch = tiny_arch();
        // 4*3*9+4 + 6*4*9+6 + 5*6+5 = 112 + 222 + 35
        assert_eq!(arch.param_count(), 112 + 222 + 35);
        assert_eq!(arch.grid(), 4);
    }

    #[test]
    fn init_is_seed_deterministic() {
        let arch = Architecture::reference();
        let a = init_params(&arch, 42);
        let b = init_params(&arch, 42);
        let c = init_params(&arch, 43);
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_eq!(a.len(), arch.param_count());
    }

    #[test]
    fn forward_is_deterministic() {
        let arch = tiny_arch();
        let params = init_params(&arch, 1);
        let mut input = Tensor3::zeros(3, 16);
        for (i, v) in input.data.iter_mut().enumerate() {
            *v = ((i % 17) as f64) / 17.0 - 0.5;
        }
        let m1 = forward(&arch, &params, &input, None);
        let m2 = forward(&arch, &params, &input, None);
        assert_eq!(m1.data, m2.data);
        assert_eq!(m1.grid, 4);
    }

    #[test]
    fn cached_and_uncached_forward_agree() {
        let arch = tiny_arch();
        let params = init_params(&arch, 2);
        let mut input = Tensor3::zeros(3, 16);
        for (i, v) in input.data.iter_mut().enumerate() {
            *v = ((i * 31 % 101) as f64) / 101.0 - 0.5;
        }
        let mut cache = empty_cache();
        let with = forward(&arch, &params, &input, Some(&mut cache));
        let without = forward(&arch, &params, &input, None);
        assert_eq!(with.data, without.data);
        assert_eq!(cache.acts.len(), 2);
    }

    #[test]
    fn sigmoid_is_stable_at_extremes() {
        assert_eq!(sigmoid(1000.0), 1.0);
        assert_eq!(sigmoid(-1000.0), 0.0);
        assert!((sigmoid(0.0) - 0.5).abs() < 1e-15);
        assert!(sigmoid(1000.0).min(CONFIDENCE_CAP) < 1.0);
    }
}
