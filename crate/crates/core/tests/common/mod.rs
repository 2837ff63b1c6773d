//! Straight-line f64 re-implementations of the fusion layer, the mask
//! prompt generator and the mask decoder, written against plain nested
//! vectors so they share no code with the autodiff graph. Each `*_trials`
//! function runs the library and the transcription on random parameters
//! and inputs and returns the largest absolute difference seen.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rs2sam::bhfm::{BhfmLayer, FusionCoeffs, FusionKind};
use rs2sam::head::{HeadConfig, HighRes, MaskHead};
use rs2sam::mpg::{resize_prompt, MaskPromptGenerator};
use rs2sam::nn::{Attention, LayerNorm, Linear, Mlp, ParamBuilder, ParamId, ParamStore, Session};
use rs2sam::Tensor;

pub type M = Vec<Vec<f64>>;

pub fn rand_mat(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> M {
    (0..rows)
        .map(|_| (0..cols).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .collect()
}

pub fn to_tensor(m: &M) -> Tensor<f64> {
    let cols = m[0].len();
    Tensor::new(&[m.len(), cols], m.concat()).unwrap()
}

pub fn from_flat(data: &[f64], cols: usize) -> M {
    data.chunks(cols).map(<[f64]>::to_vec).collect()
}

pub fn max_diff(a: &M, b: &[f64]) -> f64 {
    let flat = a.concat();
    assert_eq!(flat.len(), b.len(), "size mismatch");
    flat.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Replace every parameter with U(-0.5, 0.5) noise so zero biases and unit
/// norm gains do not hide mistakes.
pub fn scramble(store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng) {
    for e in store.values_mut() {
        let shape = e.value.shape().to_vec();
        e.value = Tensor::from_fn(&shape, |_| rng.gen_range(-0.5..0.5));
    }
}

fn p(store: &ParamStore<f64>, id: ParamId) -> &[f64] {
    store.get(id).data()
}

pub fn linear(store: &ParamStore<f64>, l: &Linear, x: &M) -> M {
    let w = p(store, l.w);
    let b = l.b.map(|b| p(store, b));
    x.iter()
        .map(|row| {
            (0..l.d_out)
                .map(|o| {
                    let mut acc = b.map_or(0.0, |b| b[o]);
                    for i in 0..l.d_in {
                        acc += w[o * l.d_in + i] * row[i];
                    }
                    acc
                })
                .collect()
        })
        .collect()
}

pub fn gelu(x: &M) -> M {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    x.iter()
        .map(|r| {
            r.iter()
                .map(|&v| 0.5 * v * (1.0 + (c * (v + 0.044715 * v * v * v)).tanh()))
                .collect()
        })
        .collect()
}

pub fn layer_norm(store: &ParamStore<f64>, l: &LayerNorm, x: &M) -> M {
    let g = p(store, l.gamma);
    let b = p(store, l.beta);
    x.iter()
        .map(|r| {
            let n = r.len() as f64;
            let mean = r.iter().sum::<f64>() / n;
            let var = r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let sd = (var + 1e-5).sqrt();
            r.iter()
                .enumerate()
                .map(|(j, v)| g[j] * (v - mean) / sd + b[j])
                .collect()
        })
        .collect()
}

pub fn mlp(store: &ParamStore<f64>, m: &Mlp, x: &M) -> M {
    linear(store, &m.fc2, &gelu(&linear(store, &m.fc1, x)))
}

pub fn add(a: &M, b: &M) -> M {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.iter().zip(y).map(|(u, v)| u + v).collect())
        .collect()
}

/// Elementwise product; a single-row operand is broadcast over rows.
pub fn mul(a: &M, b: &M) -> M {
    let rows = a.len().max(b.len());
    (0..rows)
        .map(|i| {
            let x = &a[if a.len() == 1 { 0 } else { i }];
            let y = &b[if b.len() == 1 { 0 } else { i }];
            x.iter().zip(y).map(|(u, v)| u * v).collect()
        })
        .collect()
}

pub fn scale(a: &M, s: f64) -> M {
    a.iter().map(|r| r.iter().map(|v| v * s).collect()).collect()
}

pub fn attention(store: &ParamStore<f64>, a: &Attention, query: &M, kv: &M) -> M {
    let q = linear(store, &a.q, query);
    let k = linear(store, &a.k, kv);
    let v = linear(store, &a.v, kv);
    let d = a.head_dim;
    let mut merged = vec![vec![0.0; d * a.heads]; q.len()];
    for h in 0..a.heads {
        let off = h * d;
        for (i, qi) in q.iter().enumerate() {
            let scores: Vec<f64> = k
                .iter()
                .map(|kj| (0..d).map(|t| qi[off + t] * kj[off + t]).sum::<f64>() / (d as f64).sqrt())
                .collect();
            let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
            let z: f64 = e.iter().sum();
            for t in 0..d {
                merged[i][off + t] = e.iter().zip(&v).map(|(w, vj)| w / z * vj[off + t]).sum();
            }
        }
    }
    linear(store, &a.o, &merged)
}

/// Bilinear resize of a row-major `[h*w, c]` map, half-pixel centers,
/// sample positions clamped to the source.
pub fn resize(x: &M, h: usize, w: usize, oh: usize, ow: usize) -> M {
    let coord = |d: usize, src: usize, dst: usize| {
        let s = ((d as f64 + 0.5) * src as f64 / dst as f64 - 0.5).max(0.0);
        let lo = (s.floor() as usize).min(src - 1);
        let hi = (lo + 1).min(src - 1);
        (lo, hi, s - lo as f64)
    };
    let c = x[0].len();
    let mut out = Vec::with_capacity(oh * ow);
    for y in 0..oh {
        let (y0, y1, fy) = coord(y, h, oh);
        for xx in 0..ow {
            let (x0, x1, fx) = coord(xx, w, ow);
            out.push(
                (0..c)
                    .map(|ch| {
                        (1.0 - fy) * ((1.0 - fx) * x[y0 * w + x0][ch] + fx * x[y0 * w + x1][ch])
                            + fy * ((1.0 - fx) * x[y1 * w + x0][ch] + fx * x[y1 * w + x1][ch])
                    })
                    .collect(),
            );
        }
    }
    out
}

/// One fusion layer: returns `(F_out, T_next)`.
pub fn bhfm_oracle(
    store: &ParamStore<f64>,
    l: &BhfmLayer,
    f_i: &M,
    t_i: &M,
    f_in: &M,
    coeffs: FusionCoeffs,
    kind: FusionKind,
) -> (M, M) {
    let FusionCoeffs { alpha_t, alpha_i } = coeffs;
    let f1 = gelu(&linear(store, &l.down, f_i));
    let t1 = linear(store, &l.text_proj, t_i);
    let f2 = if kind == FusionKind::Linear {
        f1.clone()
    } else {
        add(&attention(store, &l.img_attn, &f1, &t1), &f1)
    };
    let t_next = if kind == FusionKind::Bi {
        let t2 = add(&attention(store, &l.txt_attn, &t1, &f1), &t1);
        add(
            &scale(t_i, 1.0 - alpha_t),
            &scale(&linear(store, &l.restore, &t2), alpha_t),
        )
    } else {
        t_i.clone()
    };
    let f3 = add(&add(f_in, &linear(store, &l.up, &f2)), f_i);
    let body = add(&f3, &mlp(store, &l.mlp, &layer_norm(store, &l.norm, &f3)));
    let gate = linear(store, &l.gate_up, &gelu(&linear(store, &l.gate_down, &f3)));
    (add(&body, &scale(&gate, alpha_i)), t_next)
}

pub fn bhfm_trials(trials: usize) -> f64 {
    let mut worst: f64 = 0.0;
    let (c, td, n, nt) = (8, 6, 12, 5);
    for trial in 0..trials as u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + trial);
        let mut store = ParamStore::new();
        let layer = {
            let mut pb = ParamBuilder::new(&mut store, &mut rng);
            BhfmLayer::new(&mut pb, "l", c, td, 2, 2).unwrap()
        };
        scramble(&mut store, &mut rng);
        let kind = [FusionKind::Bi, FusionKind::Uni, FusionKind::Linear][trial as usize % 3];
        let alpha_t = rng.gen_range(0.0..1.0);
        let alpha_i = rng.gen_range(0.0..2.0);
        let f_i = rand_mat(n, c, &mut rng);
        let f_in = rand_mat(n, c, &mut rng);
        let t_i = rand_mat(nt, td, &mut rng);

        let mut s = Session::new(&store);
        let fv = s.constant(to_tensor(&f_i));
        let fin = s.constant(to_tensor(&f_in));
        let tv = s.constant(to_tensor(&t_i));
        let coeffs = FusionCoeffs { alpha_t, alpha_i };
        let (out, t_next) = layer.forward(&mut s, fv, tv, fin, coeffs, kind).unwrap();
        let (want_f, want_t) = bhfm_oracle(&store, &layer, &f_i, &t_i, &f_in, coeffs, kind);
        worst = worst
            .max(max_diff(&want_f, s.g.value(out).data()))
            .max(max_diff(&want_t, s.g.value(t_next).data()));
    }
    worst
}

/// Pseudo-mask logits on the patch grid, then resized to `(oh, ow)`.
pub fn mpg_oracle(
    store: &ParamStore<f64>,
    m: &MaskPromptGenerator,
    cls: &M,
    v: &M,
    use_mhca: bool,
    out: (usize, usize),
) -> (M, M) {
    let cls2 = if use_mhca {
        mul(cls, &attention(store, &m.attn, cls, v))
    } else {
        cls.clone()
    };
    let gate = linear(store, &m.proj, &cls2);
    let x = mul(v, &gate);
    let logits = mlp(store, &m.generator, &x);
    let (gh, gw) = m.grid;
    let resized = resize(&logits, gh, gw, out.0, out.1);
    (logits, resized)
}

pub fn mpg_trials(trials: usize) -> f64 {
    let mut worst: f64 = 0.0;
    let (d, grid) = (8, (4, 4));
    for trial in 0..trials as u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(2000 + trial);
        let mut store = ParamStore::new();
        let m = {
            let mut pb = ParamBuilder::new(&mut store, &mut rng);
            MaskPromptGenerator::new(&mut pb, d, grid, 2).unwrap()
        };
        scramble(&mut store, &mut rng);
        let use_mhca = trial % 2 == 0;
        let target = (rng.gen_range(1..9), rng.gen_range(1..9));
        let cls = rand_mat(1, d, &mut rng);
        let v = rand_mat(grid.0 * grid.1, d, &mut rng);

        let mut s = Session::new(&store);
        let cv = s.constant(to_tensor(&cls));
        let vv = s.constant(to_tensor(&v));
        let pm = m.generate(&mut s, cv, vv, use_mhca).unwrap();
        let r = resize_prompt(&mut s, pm, target.0, target.1).unwrap();
        let (want, want_r) = mpg_oracle(&store, &m, &cls, &v, use_mhca, target);
        worst = worst
            .max(max_diff(&want, s.g.value(pm.logits).data()))
            .max(max_diff(&want_r, s.g.value(r).data()));
    }
    worst
}

pub struct HeadInputs {
    pub cls: M,
    /// Pseudo-mask on the stride-16 grid.
    pub dense: Option<M>,
    pub f_en: M,
    pub s4: M,
    pub s8: M,
    pub pixels: M,
}

/// Prompt encoding followed by mask decoding; returns `[H*W]` logits.
pub fn head_oracle(store: &ParamStore<f64>, h: &MaskHead, x: &HeadInputs) -> Vec<f64> {
    let cfg = &h.cfg;
    let (ih, iw) = cfg.image_size;
    let (g16, g8, g4) = ((ih / 16, iw / 16), (ih / 8, iw / 8), (ih / 4, iw / 4));

    let tok = mlp(store, &h.token_mlp, &x.cls);
    let learned = from_flat(p(store, h.sparse_token), cfg.dim);
    let sparse = [tok, learned].concat();
    let mut feat = x.f_en.clone();
    if let Some(d) = &x.dense {
        let col: M = d.iter().flatten().map(|&v| vec![v]).collect();
        feat = add(&feat, &linear(store, &h.dense_proj, &col));
    }

    let mut t = [from_flat(p(store, h.mask_token), cfg.dim), sparse].concat();
    for r in &h.rounds {
        let q = layer_norm(store, &r.norm_t1, &t);
        t = add(&t, &attention(store, &r.t2i, &q, &feat));
        let q = layer_norm(store, &r.norm_t2, &t);
        t = add(&t, &mlp(store, &r.mlp, &q));
        let q = layer_norm(store, &r.norm_x, &feat);
        feat = add(&feat, &attention(store, &r.i2t, &q, &t));
    }
    let feat = layer_norm(store, &h.norm_out, &feat);
    let hyper = mlp(store, &h.hyper, &t[..1].to_vec());

    let u = resize(&feat, g16.0, g16.1, g8.0, g8.1);
    let u = gelu(&add(&linear(store, &h.up8, &u), &linear(store, &h.skip8, &x.s8)));
    let u = resize(&u, g8.0, g8.1, g4.0, g4.1);
    let u = gelu(&add(&linear(store, &h.up4, &u), &linear(store, &h.skip4, &x.s4)));
    let u = resize(&u, g4.0, g4.1, ih, iw);
    let u = gelu(&add(&linear(store, &h.up1, &u), &mlp(store, &h.pixel, &x.pixels)));
    u.iter()
        .map(|row| cfg.logit_scale * row.iter().zip(&hyper[0]).map(|(a, b)| a * b).sum::<f64>())
        .collect()
}

pub fn small_head_config() -> HeadConfig {
    HeadConfig {
        dim: 8,
        token_dim: 6,
        heads: 2,
        rounds: 2,
        mlp_ratio: 2,
        up_dim: 4,
        image_size: (32, 32),
        skip_widths: (4, 6),
        logit_scale: 2.0,
    }
}

pub fn head_trials(trials: usize) -> f64 {
    let mut worst: f64 = 0.0;
    let cfg = small_head_config();
    let (ih, iw) = cfg.image_size;
    for trial in 0..trials as u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(3000 + trial);
        let mut store = ParamStore::new();
        let head = {
            let mut pb = ParamBuilder::new(&mut store, &mut rng);
            MaskHead::new(&mut pb, cfg.clone()).unwrap()
        };
        scramble(&mut store, &mut rng);
        let x = HeadInputs {
            cls: rand_mat(1, cfg.token_dim, &mut rng),
            dense: (trial % 2 == 0).then(|| rand_mat(ih / 16, iw / 16, &mut rng)),
            f_en: rand_mat(ih * iw / 256, cfg.dim, &mut rng),
            s4: rand_mat(ih * iw / 16, cfg.skip_widths.0, &mut rng),
            s8: rand_mat(ih * iw / 64, cfg.skip_widths.1, &mut rng),
            pixels: rand_mat(ih * iw, 3, &mut rng),
        };

        let mut s = Session::new(&store);
        let cls = s.constant(to_tensor(&x.cls));
        let dense = x.dense.as_ref().map(|d| s.constant(to_tensor(d)));
        let prompts = head.encode_prompts(&mut s, cls, dense).unwrap();
        let f_en = s.constant(to_tensor(&x.f_en));
        let hires = HighRes {
            s4: s.constant(to_tensor(&x.s4)),
            s8: s.constant(to_tensor(&x.s8)),
            pixels: s.constant(to_tensor(&x.pixels)),
        };
        let logits = head.decode_mask(&mut s, f_en, prompts, hires).unwrap();
        let want = head_oracle(&store, &head, &x);
        let got = s.g.value(logits).data();
        let d = want.iter().zip(got).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert_eq!(want.len(), got.len());
        worst = worst.max(d);
    }
    worst
}

/// Integer pixel counts of a mask pair.
pub fn brute_counts(pred: &[u8], gt: &[u8]) -> (u64, u64) {
    let mut inter = 0;
    let mut union = 0;
    for i in 0..pred.len() {
        if pred[i] == 1 && gt[i] == 1 {
            inter += 1;
        }
        if pred[i] == 1 || gt[i] == 1 {
            union += 1;
        }
    }
    (inter, union)
}

pub fn random_mask(n: usize, density: f64, rng: &mut ChaCha8Rng) -> Vec<u8> {
    (0..n).map(|_| rng.gen_bool(density) as u8).collect()
}

pub mod checks {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use rs2sam::config::RunConfig;
    use rs2sam::data::generate;
    use rs2sam::gradcheck::toy_config;
    use rs2sam::harness::build_model;
    use rs2sam::losses::{ce_loss, dice_loss, tbl_loss, total_loss, LossWeights, DICE_EPS};
    use rs2sam::metrics::{evaluate, iou};
    use rs2sam::model::Model;
    use rs2sam::nn::{ParamStore, Session};
    use rs2sam::Tensor;

    use super::{brute_counts, random_mask};

    #[derive(Debug)]
    pub struct LossIdentities {
        pub tbl_same: f64,
        pub tbl_constant: f64,
        pub dice_self: f64,
        pub ce_zero_err: f64,
        pub total_err: f64,
    }

    pub fn loss_identities(trials: usize) -> LossIdentities {
        let store = ParamStore::<f64>::new();
        let mut out = LossIdentities {
            tbl_same: 0.0,
            tbl_constant: 0.0,
            dice_self: 0.0,
            ce_zero_err: 0.0,
            total_err: 0.0,
        };
        for trial in 0..trials as u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(4000 + trial);
            let (h, w) = (rng.gen_range(2..12), rng.gen_range(2..12));
            let n = h * w;
            let soft: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
            let gt: Vec<f64> = (0..n).map(|_| rng.gen_bool(0.4) as u8 as f64).collect();
            let logits: Vec<f64> = (0..n).map(|_| rng.gen_range(-4.0..4.0)).collect();
            let wv = rng.gen_range(-3.0..3.0);
            let (c1, c2) = (rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0));

            let mut s = Session::new(&store);
            let t = |v: &[f64]| Tensor::new(&[h, w], v.to_vec()).unwrap();
            let wt = s.constant(Tensor::new(&[1], vec![wv]).unwrap());
            let m = s.constant(t(&soft));
            let same = tbl_loss(&mut s, m, m, wt).unwrap();
            let a = s.constant(Tensor::full(&[h, w], c1));
            let b = s.constant(Tensor::full(&[h, w], c2));
            let cst = tbl_loss(&mut s, a, b, wt).unwrap();
            let g = s.constant(t(&gt));
            let dice = dice_loss(&mut s, g, g, DICE_EPS).unwrap();
            let z = s.constant(Tensor::zeros(&[h, w]));
            let ce0 = ce_loss(&mut s, z, &gt).unwrap();
            let lg = s.constant(t(&logits));
            let bundle = total_loss(&mut s, lg, &gt, wt, LossWeights::default()).unwrap();
            let v = |s: &Session<'_, f64>, x| s.g.value(x).data()[0];
            let manual = 1.0 * v(&s, bundle.ce) + 0.1 * v(&s, bundle.dice) + 0.2 * v(&s, bundle.tbl);

            out.tbl_same = out.tbl_same.max(v(&s, same).abs());
            out.tbl_constant = out.tbl_constant.max(v(&s, cst).abs());
            out.dice_self = out.dice_self.max(v(&s, dice));
            out.ce_zero_err = out.ce_zero_err.max((v(&s, ce0) - std::f64::consts::LN_2).abs());
            out.total_err = out.total_err.max((v(&s, bundle.total) - manual).abs());
        }
        out
    }

    fn toy_model(overrides: &[(&str, &str)]) -> (RunConfig, Model<f64>) {
        let mut cfg = toy_config();
        for (k, v) in overrides {
            cfg.set(k, v).unwrap();
        }
        let model = build_model::<f64>(&cfg).unwrap();
        (cfg, model)
    }

    /// With `alpha_t = 0`: whether the text state leaving the fourth fusion
    /// layer is bitwise the state that entered the first, over `trials`
    /// samples, and the layer count it passed through.
    pub fn alpha_t_text_fixed(trials: usize) -> (bool, usize) {
        let (cfg, model) = toy_model(&[("bhfm.alpha_t", "0")]);
        let samples = generate(trials, 50, &cfg.data).unwrap();
        let mut fixed = true;
        for sample in &samples {
            let input = model.prepare(sample).unwrap();
            let mut s = Session::new(&model.store);
            let (fwd, _) = model.run(&mut s, &input).unwrap();
            let t0 = model.bhfm.text_state(&mut s, fwd.text).unwrap();
            let out = fwd.text_out.expect("fusion layers active");
            let (a, b) = (s.g.value(t0).data(), s.g.value(out).data());
            fixed &= a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits());
        }
        (fixed, model.bhfm.layers.len())
    }

    /// With `alpha_i = 0`: the largest analytic and central-difference
    /// gradient magnitude over every gated-branch parameter coordinate
    /// sampled.
    pub fn alpha_i_gate_gradient() -> (f64, f64, usize) {
        let (cfg, model) = toy_model(&[("bhfm.alpha_i", "0")]);
        let sample = generate(1, 51, &cfg.data).unwrap().remove(0);
        let input = model.prepare(&sample).unwrap();
        let loss_of = |m: &Model<f64>| {
            let mut s = Session::new(&m.store);
            let (_, l) = m.run(&mut s, &input).unwrap();
            s.g.value(l.unwrap().total).data()[0]
        };
        let mut s = Session::new(&model.store);
        let (_, l) = model.run(&mut s, &input).unwrap();
        s.g.backward(l.unwrap().total).unwrap();
        let grads = s.param_grads();

        let gated: Vec<_> = model
            .store
            .ids()
            .filter(|&id| {
                let n = &model.store.entry(id).name;
                n.contains("gate_down") || n.contains("gate_up")
            })
            .collect();
        let mut analytic: f64 = 0.0;
        let mut numeric: f64 = 0.0;
        let mut rng = ChaCha8Rng::seed_from_u64(52);
        let h = 1e-5;
        for &id in &gated {
            if let Some(g) = &grads[id.index()] {
                analytic = analytic.max(g.data().iter().map(|v| v.abs()).fold(0.0, f64::max));
            }
            let n = model.store.get(id).numel();
            for _ in 0..3 {
                let k = rng.gen_range(0..n);
                let mut plus = model.clone();
                plus.store.get_mut(id).data_mut()[k] += h;
                let mut minus = model.clone();
                minus.store.get_mut(id).data_mut()[k] -= h;
                numeric = numeric.max(((loss_of(&plus) - loss_of(&minus)) / (2.0 * h)).abs());
            }
        }
        (analytic, numeric, gated.len())
    }

    #[derive(Debug)]
    pub struct MetricCheck {
        pub pairs: usize,
        pub iou_mismatches: usize,
        pub report_mismatches: usize,
        pub reports: usize,
        pub non_monotone: usize,
    }

    /// Per-sample IoU and dataset reports on random 16x16 pairs against
    /// integer pixel counting.
    pub fn metric_oracle(pairs: usize) -> MetricCheck {
        let mut rng = ChaCha8Rng::seed_from_u64(5000);
        let mut preds = Vec::new();
        let mut gts = Vec::new();
        let mut out = MetricCheck {
            pairs,
            iou_mismatches: 0,
            report_mismatches: 0,
            reports: 0,
            non_monotone: 0,
        };
        for _ in 0..pairs {
            let dp = rng.gen_range(0.0..1.0);
            let dg = rng.gen_range(0.0..1.0);
            let mut p = random_mask(256, dp, &mut rng);
            let g = random_mask(256, dg, &mut rng);
            // Mix in near-copies so high-IoU buckets are populated.
            if rng.gen_bool(0.4) {
                p = g.iter().map(|&v| if rng.gen_bool(0.05) { 1 - v } else { v }).collect();
            }
            let (i, u) = brute_counts(&p, &g);
            let want = if u == 0 { 1.0 } else { i as f64 / u as f64 };
            if iou(&p, &g).unwrap() != want {
                out.iou_mismatches += 1;
            }
            preds.push(p);
            gts.push(g);
        }
        // Reports over prefixes of increasing length, the last being all.
        for n in (1..=pairs).step_by(7).chain([pairs]) {
            let pairs_n: Vec<(&[u8], &[u8])> = preds[..n]
                .iter()
                .zip(&gts[..n])
                .map(|(p, g)| (&p[..], &g[..]))
                .collect();
            let r = evaluate(&pairs_n).unwrap();
            let mut ious = Vec::new();
            let (mut si, mut su) = (0u64, 0u64);
            for (p, g) in &pairs_n {
                let (i, u) = brute_counts(p, g);
                si += i;
                su += u;
                ious.push(if u == 0 { 1.0 } else { i as f64 / u as f64 });
            }
            let pr = |t: f64| 100.0 * ious.iter().filter(|&&v| v > t).count() as f64 / n as f64;
            let want = [
                pr(0.5),
                pr(0.6),
                pr(0.7),
                pr(0.8),
                pr(0.9),
                if su == 0 { 100.0 } else { 100.0 * si as f64 / su as f64 },
                100.0 * ious.iter().sum::<f64>() / n as f64,
            ];
            out.reports += 1;
            if r.row() != want || r.n != n {
                out.report_mismatches += 1;
            }
            if !r.is_monotone() {
                out.non_monotone += 1;
            }
        }
        out
    }
}
