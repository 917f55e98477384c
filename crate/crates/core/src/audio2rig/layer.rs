//! One post-norm transformer encoder layer.
//!
//! ```text
//! h = LN1(x + Dropout(MHA(x)))
//! y = LN2(h + Dropout(W2 · Dropout(ReLU(W1 · h))))
//! ```
//!
//! Attention is full (unmasked) self-attention over the sequence.

use ndarray::{s, Array2, Zip};
use rand::Rng;

use crate::nn::{join, softmax_rows, softmax_rows_backward, LayerNorm, LayerNormCache, Linear, Parameters};

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderLayer {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    pub norm1: LayerNorm,
    pub ff_in: Linear,
    pub ff_out: Linear,
    pub norm2: LayerNorm,
}

/// Intermediate values kept for backpropagation.
#[derive(Clone, Debug)]
pub struct LayerTape {
    input: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    /// Attention probabilities, one `T × T` matrix per head.
    pub probs: Vec<Array2<f64>>,
    ctx: Array2<f64>,
    attn_mask: Option<Array2<f64>>,
    norm1: LayerNormCache,
    normed: Array2<f64>,
    ff_pre: Array2<f64>,
    ff_act: Array2<f64>,
    act_mask: Option<Array2<f64>>,
    ff_mask: Option<Array2<f64>>,
    norm2: LayerNormCache,
}

/// Inverted-dropout mask: kept entries scaled by `1 / (1 - p)`.
fn dropout_mask<R: Rng + ?Sized>(shape: (usize, usize), p: f64, rng: &mut R) -> Array2<f64> {
    let keep = 1.0 / (1.0 - p);
    Array2::from_shape_simple_fn(shape, || if rng.random::<f64>() < p { 0.0 } else { keep })
}

impl EncoderLayer {
    pub fn init<R: Rng + ?Sized>(d_model: usize, d_ff: usize, rng: &mut R) -> Self {
        Self {
            query: Linear::init_xavier(d_model, d_model, rng),
            key: Linear::init_xavier(d_model, d_model, rng),
            value: Linear::init_xavier(d_model, d_model, rng),
            out: Linear::init_xavier(d_model, d_model, rng),
            norm1: LayerNorm::new(d_model),
            ff_in: Linear::init(d_model, d_ff, rng),
            ff_out: Linear::init(d_ff, d_model, rng),
            norm2: LayerNorm::new(d_model),
        }
    }

    pub fn zeros_like(&self) -> Self {
        let d_model = self.query.inputs();
        let d_ff = self.ff_in.outputs();
        Self {
            query: Linear::zeros(d_model, d_model),
            key: Linear::zeros(d_model, d_model),
            value: Linear::zeros(d_model, d_model),
            out: Linear::zeros(d_model, d_model),
            norm1: LayerNorm::zeros(d_model),
            ff_in: Linear::zeros(d_model, d_ff),
            ff_out: Linear::zeros(d_ff, d_model),
            norm2: LayerNorm::zeros(d_model),
        }
    }

    /// Runs the layer. With `dropout = Some((p, rng))` and `p > 0` the three
    /// dropout sites are active; otherwise the layer is deterministic.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        x: &Array2<f64>,
        n_heads: usize,
        mut dropout: Option<(f64, &mut R)>,
    ) -> (Array2<f64>, LayerTape) {
        let (frames, d_model) = x.dim();
        let head_dim = d_model / n_heads;
        let scale = 1.0 / (head_dim as f64).sqrt();
        let xv = x.view();
        let q = self.query.forward(&xv);
        let k = self.key.forward(&xv);
        let v = self.value.forward(&xv);

        let mut ctx = Array2::zeros((frames, d_model));
        let mut probs = Vec::with_capacity(n_heads);
        for h in 0..n_heads {
            let cols = s![.., h * head_dim..(h + 1) * head_dim];
            let mut p = q.slice(cols).dot(&k.slice(cols).t()) * scale;
            softmax_rows(&mut p);
            ctx.slice_mut(cols).assign(&p.dot(&v.slice(cols)));
            probs.push(p);
        }

        let mut mask = |shape: (usize, usize)| match dropout.as_mut() {
            Some((p, rng)) if *p > 0.0 => Some(dropout_mask(shape, *p, &mut **rng)),
            _ => None,
        };

        let mut attn = self.out.forward(&ctx.view());
        let attn_mask = mask(attn.dim());
        if let Some(m) = &attn_mask {
            attn *= m;
        }
        let (normed, norm1) = self.norm1.forward(&(x + &attn));

        let ff_pre = self.ff_in.forward(&normed.view());
        let mut ff_act = ff_pre.mapv(|v| v.max(0.0));
        let act_mask = mask(ff_act.dim());
        if let Some(m) = &act_mask {
            ff_act *= m;
        }
        let mut ff = self.ff_out.forward(&ff_act.view());
        let ff_mask = mask(ff.dim());
        if let Some(m) = &ff_mask {
            ff *= m;
        }
        let (y, norm2) = self.norm2.forward(&(&normed + &ff));

        let tape = LayerTape {
            input: x.clone(),
            q,
            k,
            v,
            probs,
            ctx,
            attn_mask,
            norm1,
            normed,
            ff_pre,
            ff_act,
            act_mask,
            ff_mask,
            norm2,
        };
        (y, tape)
    }

    /// Accumulates parameter gradients into `grad`; returns `dL/dx`.
    pub fn backward(&self, tape: &LayerTape, dy: &Array2<f64>, grad: &mut EncoderLayer) -> Array2<f64> {
        let n_heads = tape.probs.len();
        let d_model = dy.ncols();
        let head_dim = d_model / n_heads;
        let scale = 1.0 / (head_dim as f64).sqrt();

        let d_res2 = self.norm2.backward(&tape.norm2, dy, &mut grad.norm2);
        let mut d_ff = d_res2.clone();
        if let Some(m) = &tape.ff_mask {
            d_ff *= m;
        }
        let mut d_act = self.ff_out.backward(&tape.ff_act.view(), &d_ff, &mut grad.ff_out);
        if let Some(m) = &tape.act_mask {
            d_act *= m;
        }
        Zip::from(&mut d_act).and(&tape.ff_pre).for_each(|d, &pre| {
            if pre <= 0.0 {
                *d = 0.0;
            }
        });
        let d_normed = d_res2 + self.ff_in.backward(&tape.normed.view(), &d_act, &mut grad.ff_in);

        let d_res1 = self.norm1.backward(&tape.norm1, &d_normed, &mut grad.norm1);
        let mut d_attn = d_res1.clone();
        if let Some(m) = &tape.attn_mask {
            d_attn *= m;
        }
        let d_ctx = self.out.backward(&tape.ctx.view(), &d_attn, &mut grad.out);

        let mut dq = Array2::zeros(tape.q.raw_dim());
        let mut dk = Array2::zeros(tape.k.raw_dim());
        let mut dv = Array2::zeros(tape.v.raw_dim());
        for (h, p) in tape.probs.iter().enumerate() {
            let cols = s![.., h * head_dim..(h + 1) * head_dim];
            let d_ctx_h = d_ctx.slice(cols);
            let dp = d_ctx_h.dot(&tape.v.slice(cols).t());
            dv.slice_mut(cols).assign(&p.t().dot(&d_ctx_h));
            let ds = softmax_rows_backward(p, &dp) * scale;
            dq.slice_mut(cols).assign(&ds.dot(&tape.k.slice(cols)));
            dk.slice_mut(cols).assign(&ds.t().dot(&tape.q.slice(cols)));
        }
        let xv = tape.input.view();
        let mut dx = d_res1;
        dx += &self.query.backward(&xv, &dq, &mut grad.query);
        dx += &self.key.backward(&xv, &dk, &mut grad.key);
        dx += &self.value.backward(&xv, &dv, &mut grad.value);
        dx
    }
}

impl Parameters for EncoderLayer {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        self.query.visit(&join(prefix, "attn.query"), f);
        self.key.visit(&join(prefix, "attn.key"), f);
        self.value.visit(&join(prefix, "attn.value"), f);
        self.out.visit(&join(prefix, "attn.out"), f);
        self.norm1.visit(&join(prefix, "norm1"), f);
        self.ff_in.visit(&join(prefix, "ff.in"), f);
        self.ff_out.visit(&join(prefix, "ff.out"), f);
        self.norm2.visit(&join(prefix, "norm2"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        self.query.visit_mut(&join(prefix, "attn.query"), f);
        self.key.visit_mut(&join(prefix, "attn.key"), f);
        self.value.visit_mut(&join(prefix, "attn.value"), f);
        self.out.visit_mut(&join(prefix, "attn.out"), f);
        self.norm1.visit_mut(&join(prefix, "norm1"), f);
        self.ff_in.visit_mut(&join(prefix, "ff.in"), f);
        self.ff_out.visit_mut(&join(prefix, "ff.out"), f);
        self.norm2.visit_mut(&join(prefix, "norm2"), f);
    }
}
