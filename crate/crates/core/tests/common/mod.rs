//! Straight-line reference math on nested vectors. Shares nothing with the
//! tape implementation beyond reading parameter values.
#![allow(dead_code)]

use avitmp_core::attention::{AttentionParams, FfnParams};
use avitmp_core::layers::{LayerNorm, Linear};
use avitmp_core::numerics::{ParamId, ParamStore, Tensor};

pub type Mat = Vec<Vec<f64>>;

pub fn mat(t: &Tensor) -> Mat {
    let c = *t.shape().last().unwrap();
    t.data().chunks(c).map(<[f64]>::to_vec).collect()
}

pub fn vecp(s: &ParamStore, id: ParamId) -> Vec<f64> {
    s.get(id).data().to_vec()
}

pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    let m = b[0].len();
    a.iter()
        .map(|row| {
            (0..m)
                .map(|j| row.iter().zip(b).map(|(x, brow)| x * brow[j]).sum())
                .collect()
        })
        .collect()
}

pub fn transpose(a: &Mat) -> Mat {
    (0..a[0].len()).map(|j| a.iter().map(|r| r[j]).collect()).collect()
}

pub fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect())
        .collect()
}

pub fn map(a: &Mat, f: impl Fn(f64) -> f64) -> Mat {
    a.iter().map(|r| r.iter().map(|v| f(*v)).collect()).collect()
}

pub fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())
}

pub fn linear(s: &ParamStore, l: &Linear, x: &Mat) -> Mat {
    let w = mat(s.get(l.weight));
    let b = vecp(s, l.bias);
    matmul(x, &w)
        .into_iter()
        .map(|r| r.iter().zip(&b).map(|(v, c)| v + c).collect())
        .collect()
}

pub fn layer_norm(s: &ParamStore, ln: &LayerNorm, x: &Mat) -> Mat {
    let (g, b) = (vecp(s, ln.gamma), vecp(s, ln.beta));
    x.iter()
        .map(|r| {
            let n = r.len() as f64;
            let mu = r.iter().sum::<f64>() / n;
            let var = r.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n;
            let inv = 1.0 / (var + 1e-5).sqrt();
            r.iter()
                .enumerate()
                .map(|(i, v)| (v - mu) * inv * g[i] + b[i])
                .collect()
        })
        .collect()
}

fn center(a: &Mat) -> Mat {
    let n = a.len() as f64;
    let mu: Vec<f64> = (0..a[0].len()).map(|j| a.iter().map(|r| r[j]).sum::<f64>() / n).collect();
    a.iter().map(|r| r.iter().zip(&mu).map(|(v, m)| v - m).collect()).collect()
}

fn softmax_rows(a: &Mat) -> Mat {
    a.iter()
        .map(|r| {
            let mx = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = r.iter().map(|v| (v - mx).exp()).collect();
            let z: f64 = e.iter().sum();
            e.into_iter().map(|v| v / z).collect()
        })
        .collect()
}

fn cols(a: &Mat, start: usize, len: usize) -> Mat {
    a.iter().map(|r| r[start..start + len].to_vec()).collect()
}

pub fn attention(s: &ParamStore, p: &AttentionParams, q: &Mat, k: &Mat, v: &Mat, zero: bool) -> Mat {
    let (qp, kp, vp) = (linear(s, &p.q, q), linear(s, &p.k, k), linear(s, &p.v, v));
    let dk = p.width / p.heads;
    let mut out = vec![Vec::new(); q.len()];
    for h in 0..p.heads {
        let mut qh = cols(&qp, h * dk, dk);
        let mut kh = cols(&kp, h * dk, dk);
        if zero {
            qh = center(&qh);
            kh = center(&kh);
        }
        let sc = map(&matmul(&qh, &transpose(&kh)), |x| x / (dk as f64).sqrt());
        let o = matmul(&softmax_rows(&sc), &cols(&vp, h * dk, dk));
        for (dst, src) in out.iter_mut().zip(o) {
            dst.extend(src);
        }
    }
    linear(s, &p.out, &out)
}

pub fn ffn(s: &ParamStore, p: &FfnParams, x: &Mat) -> Mat {
    linear(s, &p.contract, &map(&linear(s, &p.expand, x), gelu))
}

pub fn max_diff(a: &Mat, t: &Tensor) -> f64 {
    a.iter()
        .flatten()
        .zip(t.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}
