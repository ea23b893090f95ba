//! Channels-last 3-D convolution kernels.
//!
//! Zero input activations are skipped in both passes, which makes the first
//! stage over a mostly empty voxel grid cheap without changing results.

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub(crate) struct ConvGeometry {
    pub input: [usize; 3],
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
    pub output: [usize; 3],
    pub cin: usize,
    pub cout: usize,
    out_shape: [usize; 4],
}

impl ConvGeometry {
    pub fn new(x: &[usize], w: &[usize], stride: [usize; 3], pad: [usize; 3]) -> Result<Self> {
        if x.len() != 4 || w.len() != 5 || x[3] != w[3] {
            return Err(Error::dim("conv3d", x, w));
        }
        let mut output = [0; 3];
        for d in 0..3 {
            if stride[d] == 0 || x[d] + 2 * pad[d] < w[d] {
                return Err(Error::dim("conv3d", x, w));
            }
            output[d] = (x[d] + 2 * pad[d] - w[d]) / stride[d] + 1;
        }
        Ok(Self {
            input: [x[0], x[1], x[2]],
            kernel: [w[0], w[1], w[2]],
            stride,
            pad,
            output,
            cin: x[3],
            cout: w[4],
            out_shape: [output[0], output[1], output[2], w[4]],
        })
    }

    pub fn out_shape(&self) -> &[usize] {
        &self.out_shape
    }

    /// Input coordinate along axis `d` for output `o` and tap `k`.
    #[inline]
    fn source(&self, d: usize, o: usize, k: usize) -> Option<usize> {
        let pos = (o * self.stride[d] + k) as isize - self.pad[d] as isize;
        (pos >= 0 && (pos as usize) < self.input[d]).then_some(pos as usize)
    }

    /// Calls `f(out_pos, in_pos, tap)` for every valid (output, tap) pair.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let [ox_n, oy_n, oz_n] = self.output;
        let [kx_n, ky_n, kz_n] = self.kernel;
        let [_, iy_n, iz_n] = self.input;
        for ox in 0..ox_n {
            for oy in 0..oy_n {
                for oz in 0..oz_n {
                    let opos = (ox * oy_n + oy) * oz_n + oz;
                    for kx in 0..kx_n {
                        let Some(ix) = self.source(0, ox, kx) else { continue };
                        for ky in 0..ky_n {
                            let Some(iy) = self.source(1, oy, ky) else { continue };
                            for kz in 0..kz_n {
                                let Some(iz) = self.source(2, oz, kz) else { continue };
                                let ipos = (ix * iy_n + iy) * iz_n + iz;
                                let tap = (kx * ky_n + ky) * kz_n + kz;
                                f(opos, ipos, tap);
                            }
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv3d_forward(geom: &ConvGeometry, x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
    let (cin, cout) = (geom.cin, geom.cout);
    let n_out: usize = geom.output.iter().product();
    let mut out = Vec::with_capacity(n_out * cout);
    for _ in 0..n_out {
        out.extend_from_slice(b);
    }
    geom.for_each_tap(|opos, ipos, tap| {
        let orow = &mut out[opos * cout..(opos + 1) * cout];
        let irow = &x[ipos * cin..(ipos + 1) * cin];
        let wblock = &w[tap * cin * cout..(tap + 1) * cin * cout];
        for (ci, &v) in irow.iter().enumerate() {
            if v == 0.0 {
                continue;
            }
            let wrow = &wblock[ci * cout..(ci + 1) * cout];
            orow.iter_mut().zip(wrow).for_each(|(o, w)| *o += v * w);
        }
    });
    out
}

type ConvGrads = (Option<Vec<f64>>, Option<Vec<f64>>, Option<Vec<f64>>);

pub(crate) fn conv3d_backward(geom: &ConvGeometry, x: &[f64], w: &[f64], g: &[f64], needs: &[bool]) -> ConvGrads {
    let (cin, cout) = (geom.cin, geom.cout);
    let mut gx = needs[0].then(|| vec![0.0; x.len()]);
    let mut gw = needs[1].then(|| vec![0.0; w.len()]);
    let gb = needs[2].then(|| {
        let mut acc = vec![0.0; cout];
        g.chunks(cout).for_each(|row| acc.iter_mut().zip(row).for_each(|(a, r)| *a += r));
        acc
    });
    if gx.is_some() || gw.is_some() {
        geom.for_each_tap(|opos, ipos, tap| {
            let grow = &g[opos * cout..(opos + 1) * cout];
            let wblock = tap * cin * cout;
            for ci in 0..cin {
                let woff = wblock + ci * cout;
                if let Some(gw) = gw.as_mut() {
                    let v = x[ipos * cin + ci];
                    if v != 0.0 {
                        gw[woff..woff + cout].iter_mut().zip(grow).for_each(|(a, g)| *a += v * g);
                    }
                }
                if let Some(gx) = gx.as_mut() {
                    gx[ipos * cin + ci] += w[woff..woff + cout].iter().zip(grow).map(|(a, b)| a * b).sum::<f64>();
                }
            }
        });
    }
    (gx, gw, gb)
}
