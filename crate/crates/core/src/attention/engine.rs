//! Sparse attention kernels.
//!
//! Feature maps arrive channel-major (`[C, H, W]`) and are transposed to
//! token-major buffers (`[H * W][C]`) so every token is a contiguous slice.
//! All per-query arithmetic goes through [`attend`], which keeps the
//! single-query and windowed paths bit-identical for the same keys.

use std::collections::BTreeMap;

use super::keys::{omega_samples, Bounds, KeyCoord, KeyCoordSet, WindowGrid};
use super::params::AttentionParams;
use crate::error::{arg_err, shape_err, FgstError, Result};
use crate::flow::{neighbour_frames, FlowSet};
use crate::numerics::{softmax, Tensor};

pub(crate) fn to_tokens(t: &Tensor) -> Result<(usize, usize, usize, Vec<f64>)> {
    let (c, h, w) = t.dims3()?;
    let plane = h * w;
    let src = t.data();
    let mut out = vec![0.0; c * plane];
    for ch in 0..c {
        for p in 0..plane {
            out[p * c + ch] = src[ch * plane + p];
        }
    }
    Ok((c, h, w, out))
}

pub(crate) fn from_tokens(c: usize, h: usize, w: usize, tokens: &[f64]) -> Tensor {
    let plane = h * w;
    let mut out = vec![0.0; c * plane];
    for p in 0..plane {
        for ch in 0..c {
            out[ch * plane + p] = tokens[p * c + ch];
        }
    }
    Tensor::new(vec![c, h, w], out).expect("token buffer matches extents")
}

/// `y = M x` with `M` row-major `[y.len(), x.len()]`.
fn project(m: &[f64], x: &[f64], y: &mut [f64]) {
    let cols = x.len();
    for (r, yr) in y.iter_mut().enumerate() {
        let row = &m[r * cols..(r + 1) * cols];
        let mut acc = 0.0;
        for (a, b) in row.iter().zip(x) {
            acc += a * b;
        }
        *yr = acc;
    }
}

/// `out[c] = Σ_n Σ_e W[n, c, e] h[n * d + e]`.
fn project_out(w: &[f64], heads: usize, d: usize, h: &[f64], out: &mut [f64]) {
    let c = out.len();
    for (ch, o) in out.iter_mut().enumerate() {
        let mut acc = 0.0;
        for n in 0..heads {
            let row = &w[(n * c + ch) * d..(n * c + ch + 1) * d];
            for e in 0..d {
                acc += row[e] * h[n * d + e];
            }
        }
        *o = acc;
    }
}

/// One query against its keys. `kv[k]` and `kw[k]` are the key's logit and
/// value projections. Writes per-head weights (`[N][K]`, appended to
/// `weights`), head aggregates `h` and the output vector.
fn attend(
    uq: &[f64],
    kv: &[&[f64]],
    kw: &[&[f64]],
    params: &AttentionParams,
    weights: &mut Vec<f64>,
    h: &mut [f64],
    out: &mut [f64],
) -> Result<()> {
    if kv.is_empty() {
        return Err(FgstError::EmptyKeys);
    }
    let (heads, d) = (params.heads, params.head_dim());
    let scale = (d as f64).sqrt();
    let mut logits = vec![0.0; kv.len()];
    h.iter_mut().for_each(|v| *v = 0.0);
    for n in 0..heads {
        let off = n * d;
        for (l, key) in logits.iter_mut().zip(kv) {
            let mut acc = 0.0;
            for e in 0..d {
                acc += uq[off + e] * key[off + e];
            }
            *l = acc / scale;
        }
        let a = softmax(&logits)?;
        for (ak, key) in a.iter().zip(kw) {
            for e in 0..d {
                h[off + e] += ak * key[off + e];
            }
        }
        weights.extend_from_slice(&a);
    }
    project_out(params.out.data(), heads, d, h, out);
    Ok(())
}

fn gather(features: &Tensor, row: usize, col: usize) -> Vec<f64> {
    let (c, h, w) = (features.shape()[0], features.shape()[1], features.shape()[2]);
    (0..c).map(|ch| features.data()[(ch * h + row) * w + col]).collect()
}

fn check_sequence(features: &[Tensor], channels: usize) -> Result<(usize, usize)> {
    let Some(first) = features.first() else {
        return arg_err("empty feature sequence");
    };
    let (c, h, w) = first.dims3()?;
    if c != channels {
        return shape_err(format!("features have {c} channels, attention expects {channels}"));
    }
    for f in features {
        if f.shape() != first.shape() {
            return shape_err(format!(
                "inconsistent frame extents {:?} and {:?}",
                first.shape(),
                f.shape()
            ));
        }
    }
    Ok((h, w))
}

/// Attention of one query vector over an explicit key set.
pub fn fgs_msa(
    query: &[f64],
    keys: &KeyCoordSet,
    features: &[Tensor],
    params: &AttentionParams,
) -> Result<Vec<f64>> {
    params.validate()?;
    let c = params.channels;
    if query.len() != c {
        return shape_err(format!("query of length {} for {c} channels", query.len()));
    }
    if keys.is_empty() {
        return Err(FgstError::EmptyKeys);
    }
    let (h, w) = check_sequence(features, c)?;
    let mut kv = Vec::with_capacity(keys.len());
    let mut kw = Vec::with_capacity(keys.len());
    for k in keys.coords() {
        if k.frame >= features.len() || k.row >= h || k.col >= w {
            return arg_err(format!("key {k:?} outside the feature sequence"));
        }
        let x = gather(&features[k.frame], k.row, k.col);
        let mut a = vec![0.0; c];
        let mut b = vec![0.0; c];
        project(params.v.data(), &x, &mut a);
        project(params.value.data(), &x, &mut b);
        kv.push(a);
        kw.push(b);
    }
    let mut uq = vec![0.0; c];
    project(params.u.data(), query, &mut uq);
    let kv_refs: Vec<&[f64]> = kv.iter().map(Vec::as_slice).collect();
    let kw_refs: Vec<&[f64]> = kw.iter().map(Vec::as_slice).collect();
    let mut weights = Vec::new();
    let mut hbuf = vec![0.0; c];
    let mut out = vec![0.0; c];
    attend(&uq, &kv_refs, &kw_refs, params, &mut weights, &mut hbuf, &mut out)?;
    Ok(out)
}

/// Multiply-accumulate tally of one attention call.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct AttentionStats {
    pub macs: u64,
}

struct WindowPlan {
    queries: Vec<usize>,
    keys: KeyCoordSet,
}

/// Forward state of windowed attention over one reference frame.
pub(crate) struct FrameAttention {
    c: usize,
    h: usize,
    w: usize,
    /// Distinct key frames, ascending.
    frames: Vec<usize>,
    query: Vec<f64>,
    keys: Vec<Vec<f64>>,
    kv: Vec<Vec<f64>>,
    kw: Vec<Vec<f64>>,
    uq: Vec<f64>,
    windows: Vec<WindowPlan>,
    /// Per query pixel, `[N][K]` weights over its window's keys.
    weights: Vec<Vec<f64>>,
    head_out: Vec<f64>,
    out: Vec<f64>,
    pub stats: AttentionStats,
}

/// Inputs shared by the windowed kernels.
pub(crate) struct FrameInputs<'a> {
    pub query: &'a Tensor,
    /// Key feature maps indexed by frame; only the temporal neighbours of `t`
    /// are read.
    pub keys: &'a [Option<&'a Tensor>],
    pub t: usize,
    pub flows: &'a FlowSet,
    pub params: &'a AttentionParams,
    pub window: usize,
    pub r: usize,
}

impl FrameInputs<'_> {
    fn bounds(&self) -> Result<Bounds> {
        let (c, h, w) = self.query.dims3()?;
        if c != self.params.channels {
            return shape_err(format!(
                "query has {c} channels, attention expects {}",
                self.params.channels
            ));
        }
        if self.t >= self.keys.len() {
            return arg_err(format!("frame {} outside a {}-frame sequence", self.t, self.keys.len()));
        }
        Ok(Bounds::new(self.keys.len(), h, w))
    }

    fn key_map(&self, f: usize) -> Result<&Tensor> {
        let k = self.keys[f].ok_or_else(|| FgstError::InvalidArgument(format!("missing key features for frame {f}")))?;
        if k.shape() != self.query.shape() {
            return shape_err(format!(
                "key frame {f} is {:?}, query is {:?}",
                k.shape(),
                self.query.shape()
            ));
        }
        Ok(k)
    }
}

impl FrameAttention {
    pub(crate) fn forward(inp: &FrameInputs<'_>) -> Result<Self> {
        let params = inp.params;
        params.validate()?;
        let bounds = inp.bounds()?;
        let (c, h, w) = (params.channels, bounds.height, bounds.width);
        let plane = h * w;
        let cc = (c * c) as u64;
        let mut macs = 0u64;

        let mut frames = neighbour_frames(inp.t, inp.r, bounds.frames);
        frames.sort_unstable();
        frames.dedup();
        let slot_of: BTreeMap<usize, usize> = frames.iter().enumerate().map(|(s, &f)| (f, s)).collect();

        let mut keys = Vec::with_capacity(frames.len());
        let mut kv = Vec::with_capacity(frames.len());
        let mut kw = Vec::with_capacity(frames.len());
        for &f in &frames {
            let (_, _, _, tok) = to_tokens(inp.key_map(f)?)?;
            let mut a = vec![0.0; plane * c];
            let mut b = vec![0.0; plane * c];
            for p in 0..plane {
                let x = &tok[p * c..(p + 1) * c];
                project(params.v.data(), x, &mut a[p * c..(p + 1) * c]);
                project(params.value.data(), x, &mut b[p * c..(p + 1) * c]);
            }
            macs += 2 * cc * plane as u64;
            keys.push(tok);
            kv.push(a);
            kw.push(b);
        }

        let (_, _, _, query) = to_tokens(inp.query)?;
        let mut uq = vec![0.0; plane * c];
        for p in 0..plane {
            project(params.u.data(), &query[p * c..(p + 1) * c], &mut uq[p * c..(p + 1) * c]);
        }
        macs += cc * plane as u64;

        let grid = WindowGrid::new(h, w, inp.window)?;
        let mut windows = Vec::with_capacity(grid.windows().len());
        let mut weights = vec![Vec::new(); plane];
        let mut head_out = vec![0.0; plane * c];
        let mut out = vec![0.0; plane * c];
        for idx in 0..grid.windows().len() {
            let psi = grid.psi(idx, inp.t, inp.flows, inp.r, bounds)?;
            let refs: Vec<(usize, usize)> = psi
                .coords()
                .iter()
                .map(|k| (slot_of[&k.frame], k.row * w + k.col))
                .collect();
            let kv_refs: Vec<&[f64]> = refs.iter().map(|&(s, p)| &kv[s][p * c..(p + 1) * c]).collect();
            let kw_refs: Vec<&[f64]> = refs.iter().map(|&(s, p)| &kw[s][p * c..(p + 1) * c]).collect();
            let queries: Vec<usize> = grid.windows()[idx].queries().map(|(i, j)| i * w + j).collect();
            for &p in &queries {
                let mut wts = Vec::with_capacity(params.heads * refs.len());
                attend(
                    &uq[p * c..(p + 1) * c],
                    &kv_refs,
                    &kw_refs,
                    params,
                    &mut wts,
                    &mut head_out[p * c..(p + 1) * c],
                    &mut out[p * c..(p + 1) * c],
                )?;
                weights[p] = wts;
                macs += 2 * (c * refs.len()) as u64 + cc;
            }
            windows.push(WindowPlan { queries, keys: psi });
        }

        Ok(Self {
            c,
            h,
            w,
            frames,
            query,
            keys,
            kv,
            kw,
            uq,
            windows,
            weights,
            head_out,
            out,
            stats: AttentionStats { macs },
        })
    }

    pub(crate) fn output(&self) -> Tensor {
        from_tokens(self.c, self.h, self.w, &self.out)
    }

    pub(crate) fn key_frames(&self) -> &[usize] {
        &self.frames
    }

    /// `(t-independent window index, key set, mean weight per key)` for every window.
    pub(crate) fn window_weights(&self, heads: usize) -> Vec<(&KeyCoordSet, Vec<f64>)> {
        self.windows
            .iter()
            .map(|win| {
                let k = win.keys.len();
                let mut mean = vec![0.0; k];
                for &p in &win.queries {
                    for n in 0..heads {
                        for (m, wt) in mean.iter_mut().zip(&self.weights[p][n * k..(n + 1) * k]) {
                            *m += wt;
                        }
                    }
                }
                let norm = (win.queries.len() * heads) as f64;
                mean.iter_mut().for_each(|m| *m /= norm);
                (&win.keys, mean)
            })
            .collect()
    }

    /// Vector-Jacobian product for a channel-major output gradient.
    pub(crate) fn backward(&self, params: &AttentionParams, grad_out: &[f64]) -> AttentionGrads {
        let (c, plane) = (self.c, self.h * self.w);
        let (heads, d) = (params.heads, params.head_dim());
        let scale = (d as f64).sqrt();
        let (u, v, value, wout) = (params.u.data(), params.v.data(), params.value.data(), params.out.data());

        let mut g_tok = vec![0.0; plane * c];
        for ch in 0..c {
            for p in 0..plane {
                g_tok[p * c + ch] = grad_out[ch * plane + p];
            }
        }

        let mut d_out = vec![0.0; wout.len()];
        let mut d_uq = vec![0.0; plane * c];
        let mut d_kv: Vec<Vec<f64>> = self.kv.iter().map(|b| vec![0.0; b.len()]).collect();
        let mut d_kw: Vec<Vec<f64>> = self.kw.iter().map(|b| vec![0.0; b.len()]).collect();
        let slot_of: BTreeMap<usize, usize> = self.frames.iter().enumerate().map(|(s, &f)| (f, s)).collect();
        let mut dh = vec![0.0; c];

        for win in &self.windows {
            let refs: Vec<(usize, usize)> = win
                .keys
                .coords()
                .iter()
                .map(|k| (slot_of[&k.frame], k.row * self.w + k.col))
                .collect();
            let nk = refs.len();
            for &p in &win.queries {
                let go = &g_tok[p * c..(p + 1) * c];
                let hq = &self.head_out[p * c..(p + 1) * c];
                // out = Σ_n W_n h_n
                for n in 0..heads {
                    for ch in 0..c {
                        let row = (n * c + ch) * d;
                        for e in 0..d {
                            d_out[row + e] += go[ch] * hq[n * d + e];
                        }
                    }
                    for e in 0..d {
                        dh[n * d + e] = (0..c).map(|ch| wout[(n * c + ch) * d + e] * go[ch]).sum();
                    }
                }
                let wts = &self.weights[p];
                let uq = &self.uq[p * c..(p + 1) * c];
                for n in 0..heads {
                    let off = n * d;
                    let a = &wts[n * nk..(n + 1) * nk];
                    let mut da = vec![0.0; nk];
                    for (k, &(s, kp)) in refs.iter().enumerate() {
                        let kw = &self.kw[s][kp * c..(kp + 1) * c];
                        let mut acc = 0.0;
                        for e in 0..d {
                            acc += dh[off + e] * kw[off + e];
                        }
                        da[k] = acc;
                        let dkw = &mut d_kw[s][kp * c..(kp + 1) * c];
                        for e in 0..d {
                            dkw[off + e] += a[k] * dh[off + e];
                        }
                    }
                    let mix: f64 = a.iter().zip(&da).map(|(x, y)| x * y).sum();
                    for (k, &(s, kp)) in refs.iter().enumerate() {
                        let dl = a[k] * (da[k] - mix) / scale;
                        if dl == 0.0 {
                            continue;
                        }
                        let kv = &self.kv[s][kp * c..(kp + 1) * c];
                        for e in 0..d {
                            d_uq[p * c + off + e] += dl * kv[off + e];
                        }
                        let dkv = &mut d_kv[s][kp * c..(kp + 1) * c];
                        for e in 0..d {
                            dkv[off + e] += dl * uq[off + e];
                        }
                    }
                }
            }
        }

        // uq = U q
        let mut d_u = vec![0.0; u.len()];
        let mut dq_tok = vec![0.0; plane * c];
        for p in 0..plane {
            let q = &self.query[p * c..(p + 1) * c];
            let g = &d_uq[p * c..(p + 1) * c];
            for r in 0..c {
                if g[r] == 0.0 {
                    continue;
                }
                let row = &u[r * c..(r + 1) * c];
                for ch in 0..c {
                    d_u[r * c + ch] += g[r] * q[ch];
                    dq_tok[p * c + ch] += row[ch] * g[r];
                }
            }
        }

        // kv = V k, kw = W' k
        let mut d_v = vec![0.0; v.len()];
        let mut d_value = vec![0.0; value.len()];
        let mut d_keys = Vec::with_capacity(self.frames.len());
        for s in 0..self.frames.len() {
            let mut dk_tok = vec![0.0; plane * c];
            for p in 0..plane {
                let k = &self.keys[s][p * c..(p + 1) * c];
                let gv = &d_kv[s][p * c..(p + 1) * c];
                let gw = &d_kw[s][p * c..(p + 1) * c];
                for r in 0..c {
                    let (a, b) = (gv[r], gw[r]);
                    if a == 0.0 && b == 0.0 {
                        continue;
                    }
                    for ch in 0..c {
                        d_v[r * c + ch] += a * k[ch];
                        d_value[r * c + ch] += b * k[ch];
                        dk_tok[p * c + ch] += v[r * c + ch] * a + value[r * c + ch] * b;
                    }
                }
            }
            d_keys.push(from_tokens(c, self.h, self.w, &dk_tok).into_data());
        }

        AttentionGrads {
            query: from_tokens(c, self.h, self.w, &dq_tok).into_data(),
            keys: d_keys,
            u: d_u,
            v: d_v,
            value: d_value,
            out: d_out,
        }
    }
}

/// Gradients of windowed attention; `keys` follows [`FrameAttention::key_frames`].
pub(crate) struct AttentionGrads {
    pub query: Vec<f64>,
    pub keys: Vec<Vec<f64>>,
    pub u: Vec<f64>,
    pub v: Vec<f64>,
    pub value: Vec<f64>,
    pub out: Vec<f64>,
}

fn key_slice(features: &[Tensor]) -> Vec<Option<&Tensor>> {
    features.iter().map(Some).collect()
}

/// Windowed flow-guided attention for reference frame `t`, with queries and
/// keys both taken from `features`.
pub fn fgsw_msa(
    features: &[Tensor],
    t: usize,
    flows: &FlowSet,
    params: &AttentionParams,
    window: usize,
    r: usize,
) -> Result<Tensor> {
    let (out, _) = fgsw_msa_with_stats(features.get(t).ok_or_else(|| {
        FgstError::InvalidArgument(format!("frame {t} outside a {}-frame sequence", features.len()))
    })?, features, t, flows, params, window, r)?;
    Ok(out)
}

/// Windowed attention with a separate query map; returns the output and the
/// executed multiply-accumulate count.
pub fn fgsw_msa_with_stats(
    query: &Tensor,
    key_frames: &[Tensor],
    t: usize,
    flows: &FlowSet,
    params: &AttentionParams,
    window: usize,
    r: usize,
) -> Result<(Tensor, AttentionStats)> {
    check_sequence(key_frames, params.channels)?;
    let keys = key_slice(key_frames);
    let fa = FrameAttention::forward(&FrameInputs {
        query,
        keys: &keys,
        t,
        flows,
        params,
        window,
        r,
    })?;
    Ok((fa.output(), fa.stats))
}

/// Fixed-shape variant: every query scores `(2r + 1) * M^2` key slots, one per
/// (window position, temporal neighbour). Slots outside a truncated window and
/// repeated coordinates are masked out of the softmax, so the result equals
/// the deduplicated computation. Key projections are recomputed for each of
/// the `2r + 1` neighbour slots.
pub fn fgsw_msa_padded(
    query: &Tensor,
    key_frames: &[Tensor],
    t: usize,
    flows: &FlowSet,
    params: &AttentionParams,
    window: usize,
    r: usize,
) -> Result<(Tensor, AttentionStats)> {
    params.validate()?;
    let (h, w) = check_sequence(key_frames, params.channels)?;
    if query.shape() != key_frames[0].shape() {
        return shape_err(format!("query {:?} vs keys {:?}", query.shape(), key_frames[0].shape()));
    }
    let bounds = Bounds::new(key_frames.len(), h, w);
    if t >= bounds.frames {
        return arg_err(format!("frame {t} outside a {}-frame sequence", bounds.frames));
    }
    let (c, heads, d) = (params.channels, params.heads, params.head_dim());
    let plane = h * w;
    let cc = (c * c) as u64;
    let scale = (d as f64).sqrt();
    let mut macs = 0u64;

    let neighbours = neighbour_frames(t, r, bounds.frames);
    let mut kv = Vec::with_capacity(neighbours.len());
    let mut kw = Vec::with_capacity(neighbours.len());
    for &f in &neighbours {
        let (_, _, _, tok) = to_tokens(&key_frames[f])?;
        let mut a = vec![0.0; plane * c];
        let mut b = vec![0.0; plane * c];
        for p in 0..plane {
            project(params.v.data(), &tok[p * c..(p + 1) * c], &mut a[p * c..(p + 1) * c]);
            project(params.value.data(), &tok[p * c..(p + 1) * c], &mut b[p * c..(p + 1) * c]);
        }
        macs += 2 * cc * plane as u64;
        kv.push(a);
        kw.push(b);
    }
    let (_, _, _, qtok) = to_tokens(query)?;
    let mut uq = vec![0.0; plane * c];
    for p in 0..plane {
        project(params.u.data(), &qtok[p * c..(p + 1) * c], &mut uq[p * c..(p + 1) * c]);
    }
    macs += cc * plane as u64;

    let grid = WindowGrid::new(h, w, window)?;
    let slots_per_query = window * window * neighbours.len();
    let zero = vec![0.0; c];
    let mut out = vec![0.0; plane * c];
    for win in grid.windows() {
        // (slot index into kv/kw, pixel) or None for padding / duplicates
        let mut slots: Vec<Option<(usize, usize)>> = Vec::with_capacity(slots_per_query);
        let mut seen: Vec<KeyCoord> = Vec::new();
        for a in 0..window {
            for b in 0..window {
                let (i, j) = (win.row0 + a, win.col0 + b);
                if a >= win.rows || b >= win.cols {
                    slots.extend(std::iter::repeat_n(None, neighbours.len()));
                    continue;
                }
                for (s, k) in omega_samples((i, j), t, flows, r, bounds)?.into_iter().enumerate() {
                    if seen.contains(&k) {
                        slots.push(None);
                    } else {
                        seen.push(k);
                        slots.push(Some((s, k.row * w + k.col)));
                    }
                }
            }
        }
        for (i, j) in win.queries() {
            let p = i * w + j;
            let q = &uq[p * c..(p + 1) * c];
            let mut hq = vec![0.0; c];
            let mut logits = vec![f64::NEG_INFINITY; slots.len()];
            for n in 0..heads {
                let off = n * d;
                for (l, slot) in logits.iter_mut().zip(&slots) {
                    let key: &[f64] = match slot {
                        Some((s, kp)) => &kv[*s][kp * c..(kp + 1) * c],
                        None => &zero,
                    };
                    let mut acc = 0.0;
                    for e in 0..d {
                        acc += q[off + e] * key[off + e];
                    }
                    *l = if slot.is_some() { acc / scale } else { f64::NEG_INFINITY };
                }
                let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let ex: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
                let total: f64 = ex.iter().sum();
                for (e_k, slot) in ex.iter().zip(&slots) {
                    let key: &[f64] = match slot {
                        Some((s, kp)) => &kw[*s][kp * c..(kp + 1) * c],
                        None => &zero,
                    };
                    let a = e_k / total;
                    for e in 0..d {
                        hq[off + e] += a * key[off + e];
                    }
                }
            }
            project_out(params.out.data(), heads, d, &hq, &mut out[p * c..(p + 1) * c]);
            macs += 2 * (c * slots_per_query) as u64 + cc;
        }
    }
    Ok((from_tokens(c, h, w, &out), AttentionStats { macs }))
}

/// Dense attention of every token of every frame over all `T * H * W` tokens.
pub fn global_msa(features: &[Tensor], params: &AttentionParams) -> Result<(Vec<Tensor>, AttentionStats)> {
    params.validate()?;
    let c = params.channels;
    let (h, w) = check_sequence(features, c)?;
    let plane = h * w;
    let total = features.len() * plane;
    let cc = (c * c) as u64;
    let mut kv = vec![0.0; total * c];
    let mut kw = vec![0.0; total * c];
    let mut uq = vec![0.0; total * c];
    for (f, frame) in features.iter().enumerate() {
        let (_, _, _, tok) = to_tokens(frame)?;
        for p in 0..plane {
            let x = &tok[p * c..(p + 1) * c];
            let g = (f * plane + p) * c;
            project(params.u.data(), x, &mut uq[g..g + c]);
            project(params.v.data(), x, &mut kv[g..g + c]);
            project(params.value.data(), x, &mut kw[g..g + c]);
        }
    }
    let mut macs = 3 * cc * total as u64;
    let kv_refs: Vec<&[f64]> = kv.chunks(c).collect();
    let kw_refs: Vec<&[f64]> = kw.chunks(c).collect();
    let mut weights = Vec::with_capacity(params.heads * total);
    let mut hbuf = vec![0.0; c];
    let mut out = vec![0.0; total * c];
    for g in 0..total {
        weights.clear();
        attend(
            &uq[g * c..(g + 1) * c],
            &kv_refs,
            &kw_refs,
            params,
            &mut weights,
            &mut hbuf,
            &mut out[g * c..(g + 1) * c],
        )?;
        macs += 2 * (c * total) as u64 + cc;
    }
    let frames = out.chunks(plane * c).map(|tok| from_tokens(c, h, w, tok)).collect();
    Ok((frames, AttentionStats { macs }))
}
