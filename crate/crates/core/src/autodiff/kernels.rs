//! Dense kernels shared by the forward and backward passes.

use alloc::vec;
use alloc::vec::Vec;

/// `out[n×m] += a[n×k] · b[k×m]`
pub fn matmul_acc(a: &[f64], b: &[f64], out: &mut [f64], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * m..(i + 1) * m];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * m..(p + 1) * m];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out[n×k] += g[n×m] · b[k×m]ᵀ`
pub fn matmul_bt_acc(g: &[f64], b: &[f64], out: &mut [f64], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let grow = &g[i * m..(i + 1) * m];
        let orow = &mut out[i * k..(i + 1) * k];
        for (p, o) in orow.iter_mut().enumerate() {
            let brow = &b[p * m..(p + 1) * m];
            let mut s = 0.0;
            for (&gv, &bv) in grow.iter().zip(brow) {
                s += gv * bv;
            }
            *o += s;
        }
    }
}

/// `out[k×m] += a[n×k]ᵀ · g[n×m]`
pub fn matmul_at_acc(a: &[f64], g: &[f64], out: &mut [f64], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let arow = &a[i * k..(i + 1) * k];
        let grow = &g[i * m..(i + 1) * m];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * m..(p + 1) * m];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub o: usize,
    pub kh: usize,
    pub kw: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

pub fn conv2d_forward(x: &[f64], wt: &[f64], g: &ConvGeom) -> Vec<f64> {
    let mut out = vec![0.0; g.n * g.o * g.ho * g.wo];
    for n in 0..g.n {
        for o in 0..g.o {
            let obase = (n * g.o + o) * g.ho * g.wo;
            for c in 0..g.c {
                let xbase = (n * g.c + c) * g.h * g.w;
                let wbase = (o * g.c + c) * g.kh * g.kw;
                for ki in 0..g.kh {
                    for kj in 0..g.kw {
                        let wv = wt[wbase + ki * g.kw + kj];
                        for oi in 0..g.ho {
                            let ii = oi + ki;
                            if ii < g.pad || ii - g.pad >= g.h {
                                continue;
                            }
                            let xi = ii - g.pad;
                            for oj in 0..g.wo {
                                let jj = oj + kj;
                                if jj < g.pad || jj - g.pad >= g.w {
                                    continue;
                                }
                                out[obase + oi * g.wo + oj] += wv * x[xbase + xi * g.w + jj - g.pad];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Accumulates input and weight gradients of a stride-1 convolution.
pub fn conv2d_backward(
    x: &[f64],
    wt: &[f64],
    gy: &[f64],
    g: &ConvGeom,
    mut dx: Option<&mut [f64]>,
    mut dw: Option<&mut [f64]>,
) {
    for n in 0..g.n {
        for o in 0..g.o {
            let obase = (n * g.o + o) * g.ho * g.wo;
            for c in 0..g.c {
                let xbase = (n * g.c + c) * g.h * g.w;
                let wbase = (o * g.c + c) * g.kh * g.kw;
                for ki in 0..g.kh {
                    for kj in 0..g.kw {
                        let widx = wbase + ki * g.kw + kj;
                        let wv = wt[widx];
                        let mut wacc = 0.0;
                        for oi in 0..g.ho {
                            let ii = oi + ki;
                            if ii < g.pad || ii - g.pad >= g.h {
                                continue;
                            }
                            let xi = ii - g.pad;
                            for oj in 0..g.wo {
                                let jj = oj + kj;
                                if jj < g.pad || jj - g.pad >= g.w {
                                    continue;
                                }
                                let xidx = xbase + xi * g.w + jj - g.pad;
                                let gv = gy[obase + oi * g.wo + oj];
                                wacc += gv * x[xidx];
                                if let Some(dx) = dx.as_deref_mut() {
                                    dx[xidx] += gv * wv;
                                }
                            }
                        }
                        if let Some(dw) = dw.as_deref_mut() {
                            dw[widx] += wacc;
                        }
                    }
                }
            }
        }
    }
}

/// Which elements share normalization statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormGroups {
    /// One group per channel, pooled over batch and spatial positions.
    PerChannel,
    /// One group per (sample, channel) plane.
    PerPlane,
}

#[derive(Clone, Copy, Debug)]
pub struct NormLayout {
    pub n: usize,
    pub c: usize,
    pub inner: usize,
    pub groups: NormGroups,
}

impl NormLayout {
    pub fn group_count(&self) -> usize {
        match self.groups {
            NormGroups::PerChannel => self.c,
            NormGroups::PerPlane => self.n * self.c,
        }
    }

    pub fn group_size(&self) -> usize {
        match self.groups {
            NormGroups::PerChannel => self.n * self.inner,
            NormGroups::PerPlane => self.inner,
        }
    }

    #[inline]
    pub fn group_of(&self, i: usize) -> usize {
        match self.groups {
            NormGroups::PerChannel => (i / self.inner) % self.c,
            NormGroups::PerPlane => i / self.inner,
        }
    }
}

/// Per-group mean and biased variance.
pub fn group_moments(x: &[f64], layout: &NormLayout) -> (Vec<f64>, Vec<f64>) {
    let gc = layout.group_count();
    let m = layout.group_size() as f64;
    let mut mean = vec![0.0; gc];
    for (i, &v) in x.iter().enumerate() {
        mean[layout.group_of(i)] += v;
    }
    for v in &mut mean {
        *v /= m;
    }
    let mut var = vec![0.0; gc];
    for (i, &v) in x.iter().enumerate() {
        let g = layout.group_of(i);
        let d = v - mean[g];
        var[g] += d * d;
    }
    for v in &mut var {
        *v /= m;
    }
    (mean, var)
}
