//! Straight-line loop implementations used as independent oracles. Nothing
//! here touches the tape; every quantity is materialized with plain loops
//! over `Vec<f64>` in `[C, h, w]` layout.
#![allow(dead_code, clippy::needless_range_loop, clippy::too_many_arguments)]

#[derive(Clone)]
pub struct Fm {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub v: Vec<f64>,
}

impl Fm {
    pub fn new(c: usize, h: usize, w: usize, v: Vec<f64>) -> Self {
        assert_eq!(v.len(), c * h * w);
        Self { c, h, w, v }
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.v[(c * self.h + y) * self.w + x]
    }

    pub fn hw(&self) -> usize {
        self.h * self.w
    }
}

/// `kernel` is `[cout, cin, k, k]` row-major.
pub fn conv(x: &Fm, kernel: &[f64], cout: usize, k: usize, pad: usize) -> Fm {
    let mut out = vec![0.0; cout * x.h * x.w];
    for co in 0..cout {
        for y in 0..x.h {
            for xx in 0..x.w {
                let mut s = 0.0;
                for ci in 0..x.c {
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = y as isize + ky as isize - pad as isize;
                            let ix = xx as isize + kx as isize - pad as isize;
                            if iy < 0 || ix < 0 || iy >= x.h as isize || ix >= x.w as isize {
                                continue;
                            }
                            s += kernel[((co * x.c + ci) * k + ky) * k + kx] * x.at(ci, iy as usize, ix as usize);
                        }
                    }
                }
                out[(co * x.h + y) * x.w + xx] = s;
            }
        }
    }
    Fm::new(cout, x.h, x.w, out)
}

pub fn add_bias(x: &mut Fm, b: &[f64]) {
    let hw = x.hw();
    for c in 0..x.c {
        for p in 0..hw {
            x.v[c * hw + p] += b[c];
        }
    }
}

pub fn relu(x: &mut Fm) {
    for v in &mut x.v {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

pub fn batchnorm(x: &mut Fm, gamma: &[f64], beta: &[f64]) {
    let hw = x.hw();
    for c in 0..x.c {
        let mut mean = 0.0;
        for p in 0..hw {
            mean += x.v[c * hw + p];
        }
        mean /= hw as f64;
        let mut var = 0.0;
        for p in 0..hw {
            var += (x.v[c * hw + p] - mean).powi(2);
        }
        var /= hw as f64;
        let inv = 1.0 / (var + 1e-5).sqrt();
        for p in 0..hw {
            x.v[c * hw + p] = gamma[c] * (x.v[c * hw + p] - mean) * inv + beta[c];
        }
    }
}

pub fn maxpool(x: &Fm) -> Fm {
    let (h, w) = (x.h / 2, x.w / 2);
    let mut out = vec![0.0; x.c * h * w];
    for c in 0..x.c {
        for y in 0..h {
            for xx in 0..w {
                let mut m = f64::NEG_INFINITY;
                for dy in 0..2 {
                    for dx in 0..2 {
                        m = m.max(x.at(c, 2 * y + dy, 2 * xx + dx));
                    }
                }
                out[(c * h + y) * w + xx] = m;
            }
        }
    }
    Fm::new(x.c, h, w, out)
}

pub fn upsample(x: &Fm) -> Fm {
    let (h, w) = (x.h * 2, x.w * 2);
    let mut out = vec![0.0; x.c * h * w];
    for c in 0..x.c {
        for y in 0..h {
            for xx in 0..w {
                out[(c * h + y) * w + xx] = x.at(c, y / 2, xx / 2);
            }
        }
    }
    Fm::new(x.c, h, w, out)
}

pub fn concat(a: &Fm, b: &Fm) -> Fm {
    let mut v = a.v.clone();
    v.extend_from_slice(&b.v);
    Fm::new(a.c + b.c, a.h, a.w, v)
}

pub fn add(a: &Fm, b: &Fm) -> Fm {
    Fm::new(a.c, a.h, a.w, a.v.iter().zip(&b.v).map(|(x, y)| x + y).collect())
}

/// Linear → ReLU → Linear on the rows of a `rows × width` matrix.
pub fn mlp(
    x: &[f64],
    rows: usize,
    width: usize,
    hidden: usize,
    w1: &[f64],
    b1: &[f64],
    w2: &[f64],
    b2: &[f64],
) -> Vec<f64> {
    let mut out = vec![0.0; rows * width];
    for r in 0..rows {
        let mut hid = vec![0.0; hidden];
        for j in 0..hidden {
            let mut s = b1[j];
            for i in 0..width {
                s += x[r * width + i] * w1[i * hidden + j];
            }
            hid[j] = s.max(0.0);
        }
        for i in 0..width {
            let mut s = b2[i];
            for j in 0..hidden {
                s += hid[j] * w2[j * width + i];
            }
            out[r * width + i] = s;
        }
    }
    out
}

pub struct CvtParams<'a> {
    pub proj_k: &'a [f64],
    pub proj_q: &'a [f64],
    pub proj_v: &'a [f64],
    pub fuse_w: &'a [f64],
    pub fuse_b: &'a [f64],
}

pub struct CvtOracle {
    pub r: Vec<Vec<f64>>,
    pub w: Vec<f64>,
    pub h: Vec<usize>,
    pub t: Fm,
    pub out: Fm,
}

/// Default wiring: K from X, Q from X′, V from X″, fused with X.
pub fn cvt(x: &Fm, x1: &Fm, x2: &Fm, p: &CvtParams) -> CvtOracle {
    let c = x.c;
    let hw = x.hw();
    let k = conv(x, p.proj_k, c, 1, 0);
    let q = conv(x1, p.proj_q, c, 1, 0);
    let v = conv(x2, p.proj_v, c, 1, 0);
    let mut r = vec![vec![0.0; hw]; hw];
    for i in 0..hw {
        let qn = (0..c).map(|ch| q.v[ch * hw + i].powi(2)).sum::<f64>().sqrt().max(1e-12);
        for j in 0..hw {
            let kn = (0..c).map(|ch| k.v[ch * hw + j].powi(2)).sum::<f64>().sqrt().max(1e-12);
            let mut dot = 0.0;
            for ch in 0..c {
                dot += (q.v[ch * hw + i] / qn) * (k.v[ch * hw + j] / kn);
            }
            r[i][j] = dot;
        }
    }
    let mut w = vec![0.0; hw];
    let mut h = vec![0usize; hw];
    for i in 0..hw {
        let mut best = 0;
        for j in 1..hw {
            if r[i][j] > r[i][best] {
                best = j;
            }
        }
        h[i] = best;
        w[i] = r[i][best];
    }
    let mut t = vec![0.0; c * hw];
    for i in 0..hw {
        for ch in 0..c {
            t[ch * hw + i] = v.v[ch * hw + h[i]];
        }
    }
    let t = Fm::new(c, x.h, x.w, t);
    let mut fused = conv(&concat(x, &t), p.fuse_w, c, 3, 1);
    add_bias(&mut fused, p.fuse_b);
    let mut out = x1.v.clone();
    for ch in 0..c {
        for i in 0..hw {
            out[ch * hw + i] += fused.v[ch * hw + i] * w[i];
        }
    }
    CvtOracle { r, w, h, t, out: Fm::new(c, x.h, x.w, out) }
}

/// Lookup of a named parameter's flat values.
pub type Params<'a> = &'a dyn Fn(&str) -> Vec<f64>;

fn conv_bn(x: &Fm, p: Params, kernel: &str, bn: &str, cout: usize, k: usize, relu_after: bool) -> Fm {
    let mut y = conv(x, &p(kernel), cout, k, k / 2);
    batchnorm(&mut y, &p(&format!("{bn}.gamma")), &p(&format!("{bn}.beta")));
    if relu_after {
        relu(&mut y);
    }
    y
}

pub struct NetOracle {
    /// `(scale, logits)` finest first.
    pub logits: Vec<(usize, Fm)>,
    pub cycle: Vec<f64>,
}

/// Whole network with the default block (spatial MLPs, cycle, K from X and
/// V from X″). Heads sit on scale 1 and on every skip scale.
pub fn network(image: &Fm, p: Params, widths: &[usize], ftvp_scales: &[usize], classes: usize) -> NetOracle {
    let n = widths.len();
    let mut x = conv_bn(image, p, "enc.stem.conv", "enc.stem.bn", widths[0], 3, true);
    let mut feats = Vec::new();
    for i in 0..n {
        let pooled = maxpool(&x);
        let pre = format!("enc.s{i}");
        let y = conv_bn(&pooled, p, &format!("{pre}.conv1"), &format!("{pre}.bn1"), widths[i], 3, true);
        let y = conv_bn(&y, p, &format!("{pre}.conv2"), &format!("{pre}.bn2"), widths[i], 3, false);
        let short =
            if pooled.c == widths[i] { pooled } else { conv(&pooled, &p(&format!("{pre}.short")), widths[i], 1, 0) };
        let mut s = add(&y, &short);
        relu(&mut s);
        feats.push(s);
        x = feats[i].clone();
    }
    let mut proj: Vec<Option<Fm>> = (0..n).map(|_| None).collect();
    let mut cycle = Vec::new();
    let mut scales = ftvp_scales.to_vec();
    scales.sort();
    for s in scales {
        let f = &feats[s];
        let hw = f.hw();
        let pre = format!("ftvp{s}");
        let m = |dir: &str, v: &[f64]| {
            let g = |n: &str| p(&format!("{pre}.cvp.{dir}.{n}"));
            mlp(v, f.c, hw, hw / 2, &g("w1"), &g("b1"), &g("w2"), &g("b2"))
        };
        let x1 = Fm::new(f.c, f.h, f.w, m("fwd", &f.v));
        let x2 = Fm::new(f.c, f.h, f.w, m("bwd", &x1.v));
        cycle.push(f.v.iter().zip(&x2.v).map(|(a, b)| (a - b).abs()).sum::<f64>() / f.v.len() as f64);
        let g = |n: &str| p(&format!("{pre}.cvt.{n}"));
        let (pk, pq, pv, fw, fb) = (g("proj_k"), g("proj_q"), g("proj_v"), g("fuse.w"), g("fuse.b"));
        let o = cvt(f, &x1, &x2, &CvtParams { proj_k: &pk, proj_q: &pq, proj_v: &pv, fuse_w: &fw, fuse_b: &fb });
        proj[s] = Some(o.out);
    }
    let deepest = n - 1;
    let skips: Vec<usize> = ftvp_scales.iter().copied().filter(|&s| s != deepest).collect();
    let mut f = proj[deepest].as_ref().unwrap_or(&feats[deepest]).clone();
    let mut logits = Vec::new();
    for s in (1..=deepest).rev() {
        if s != deepest {
            f = upsample(&f);
            if skips.contains(&s) {
                f = concat(proj[s].as_ref().unwrap(), &f);
            }
        }
        f = conv_bn(&f, p, &format!("dec.s{s}.conv"), &format!("dec.s{s}.bn"), widths[s], 3, true);
        if s == 1 || skips.contains(&s) {
            let mut l = conv(&f, &p(&format!("head.s{s}.w")), classes, 1, 0);
            add_bias(&mut l, &p(&format!("head.s{s}.b")));
            logits.push((s, l));
        }
    }
    logits.reverse();
    NetOracle { logits, cycle }
}
