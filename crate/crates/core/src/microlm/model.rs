//! Pre-norm causal transformer with hand-written backward pass.
//!
//! ```text
//! x = embed_seq + pos[0..L]
//! per block:  x = x + Attn(LN1(x)) · Wo
//!             x = x + GELU(LN2(x) · W1 + b1) · W2 + b2
//! logits = LNf(x) · W_head + b_head        (W_head = tok_embᵀ when tied)
//! ```
//!
//! Attention is multi-head, scaled dot-product, strictly causal. GELU is the
//! tanh approximation.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::{log_softmax, Matrix};

use super::lora::{effective, lora_backward, LoraParams, LoraTarget};
use super::LmError;

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LmConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_len: usize,
    pub tied_head: bool,
}

impl LmConfig {
    pub fn validate(&self) -> Result<(), LmError> {
        let bad = |m: String| Err(LmError::Config(m));
        if self.vocab_size < 2 {
            return bad(format!("vocab_size {} < 2", self.vocab_size));
        }
        if self.n_layers == 0 || self.n_layers > 4 {
            return bad(format!("n_layers {} outside 1..=4", self.n_layers));
        }
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return bad(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.d_ff == 0 || self.max_len == 0 {
            return bad("d_ff and max_len must be positive".into());
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams {
    pub ln1_g: Vec<f64>,
    pub ln1_b: Vec<f64>,
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    pub ln2_g: Vec<f64>,
    pub ln2_b: Vec<f64>,
    pub w1: Matrix,
    pub b1: Vec<f64>,
    pub w2: Matrix,
    pub b2: Vec<f64>,
}

impl BlockParams {
    fn zeros(d: usize, f: usize) -> Self {
        Self {
            ln1_g: vec![0.0; d],
            ln1_b: vec![0.0; d],
            wq: Matrix::zeros(d, d),
            wk: Matrix::zeros(d, d),
            wv: Matrix::zeros(d, d),
            wo: Matrix::zeros(d, d),
            ln2_g: vec![0.0; d],
            ln2_b: vec![0.0; d],
            w1: Matrix::zeros(d, f),
            b1: vec![0.0; f],
            w2: Matrix::zeros(f, d),
            b2: vec![0.0; d],
        }
    }

    pub fn weight(&self, target: LoraTarget) -> &Matrix {
        match target {
            LoraTarget::Query => &self.wq,
            LoraTarget::Key => &self.wk,
            LoraTarget::Value => &self.wv,
            LoraTarget::Output => &self.wo,
            LoraTarget::FfIn => &self.w1,
            LoraTarget::FfOut => &self.w2,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LmParams {
    pub config: LmConfig,
    pub tok_emb: Matrix,
    pub pos_emb: Matrix,
    pub blocks: Vec<BlockParams>,
    pub lnf_g: Vec<f64>,
    pub lnf_b: Vec<f64>,
    /// `d_model × vocab`; absent when the head is tied to `tok_emb`.
    pub head: Option<Matrix>,
    pub head_b: Vec<f64>,
}

impl LmParams {
    pub fn zeros(config: &LmConfig) -> Self {
        let (v, d, f) = (config.vocab_size, config.d_model, config.d_ff);
        Self {
            tok_emb: Matrix::zeros(v, d),
            pos_emb: Matrix::zeros(config.max_len, d),
            blocks: (0..config.n_layers)
                .map(|_| BlockParams::zeros(d, f))
                .collect(),
            lnf_g: vec![0.0; d],
            lnf_b: vec![0.0; d],
            head: (!config.tied_head).then(|| Matrix::zeros(d, v)),
            head_b: vec![0.0; v],
            config: config.clone(),
        }
    }

    pub fn init<R: Rng + ?Sized>(config: &LmConfig, rng: &mut R) -> Result<Self, LmError> {
        config.validate()?;
        let (v, d, f) = (config.vocab_size, config.d_model, config.d_ff);
        let mut p = Self::zeros(config);
        let resid = 1.0 / (2.0 * config.n_layers as f64).sqrt();
        p.tok_emb = Matrix::randn(v, d, 1.0, rng);
        p.pos_emb = Matrix::randn(config.max_len, d, 0.5, rng);
        for b in &mut p.blocks {
            b.ln1_g = vec![1.0; d];
            b.ln2_g = vec![1.0; d];
            let s = 1.0 / (d as f64).sqrt();
            b.wq = Matrix::randn(d, d, s, rng);
            b.wk = Matrix::randn(d, d, s, rng);
            b.wv = Matrix::randn(d, d, s, rng);
            b.wo = Matrix::randn(d, d, s * resid, rng);
            b.w1 = Matrix::randn(d, f, s, rng);
            b.w2 = Matrix::randn(f, d, resid / (f as f64).sqrt(), rng);
        }
        p.lnf_g = vec![1.0; d];
        if let Some(h) = &mut p.head {
            *h = Matrix::randn(d, v, 0.02, rng);
        }
        Ok(p)
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(&self.config)
    }

    pub fn tensors(&self) -> Vec<(String, &[f64])> {
        let mut out: Vec<(String, &[f64])> = vec![
            ("tok_emb".into(), self.tok_emb.as_slice()),
            ("pos_emb".into(), self.pos_emb.as_slice()),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            let p = |n: &str| format!("blocks.{i}.{n}");
            out.extend([
                (p("ln1.g"), b.ln1_g.as_slice()),
                (p("ln1.b"), b.ln1_b.as_slice()),
                (p("attn.wq"), b.wq.as_slice()),
                (p("attn.wk"), b.wk.as_slice()),
                (p("attn.wv"), b.wv.as_slice()),
                (p("attn.wo"), b.wo.as_slice()),
                (p("ln2.g"), b.ln2_g.as_slice()),
                (p("ln2.b"), b.ln2_b.as_slice()),
                (p("ff.w1"), b.w1.as_slice()),
                (p("ff.b1"), b.b1.as_slice()),
                (p("ff.w2"), b.w2.as_slice()),
                (p("ff.b2"), b.b2.as_slice()),
            ]);
        }
        out.push(("lnf.g".into(), self.lnf_g.as_slice()));
        out.push(("lnf.b".into(), self.lnf_b.as_slice()));
        if let Some(h) = &self.head {
            out.push(("head.w".into(), h.as_slice()));
        }
        out.push(("head.b".into(), self.head_b.as_slice()));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out: Vec<(String, &mut [f64])> = vec![
            ("tok_emb".into(), self.tok_emb.as_mut_slice()),
            ("pos_emb".into(), self.pos_emb.as_mut_slice()),
        ];
        for (i, b) in self.blocks.iter_mut().enumerate() {
            let p = |n: &str| format!("blocks.{i}.{n}");
            out.extend([
                (p("ln1.g"), b.ln1_g.as_mut_slice()),
                (p("ln1.b"), b.ln1_b.as_mut_slice()),
                (p("attn.wq"), b.wq.as_mut_slice()),
                (p("attn.wk"), b.wk.as_mut_slice()),
                (p("attn.wv"), b.wv.as_mut_slice()),
                (p("attn.wo"), b.wo.as_mut_slice()),
                (p("ln2.g"), b.ln2_g.as_mut_slice()),
                (p("ln2.b"), b.ln2_b.as_mut_slice()),
                (p("ff.w1"), b.w1.as_mut_slice()),
                (p("ff.b1"), b.b1.as_mut_slice()),
                (p("ff.w2"), b.w2.as_mut_slice()),
                (p("ff.b2"), b.b2.as_mut_slice()),
            ]);
        }
        out.push(("lnf.g".into(), self.lnf_g.as_mut_slice()));
        out.push(("lnf.b".into(), self.lnf_b.as_mut_slice()));
        if let Some(h) = &mut self.head {
            out.push(("head.w".into(), h.as_mut_slice()));
        }
        out.push(("head.b".into(), self.head_b.as_mut_slice()));
        out
    }
}

struct LnCache {
    xhat: Matrix,
    rstd: Vec<f64>,
}

fn layer_norm(x: &Matrix, g: &[f64], b: &[f64]) -> (Matrix, LnCache) {
    let d = x.cols();
    let mut y = Matrix::zeros(x.rows(), d);
    let mut xhat = Matrix::zeros(x.rows(), d);
    let mut rstd = Vec::with_capacity(x.rows());
    for r in 0..x.rows() {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let rs = 1.0 / (var + LN_EPS).sqrt();
        rstd.push(rs);
        for c in 0..d {
            let h = (row[c] - mean) * rs;
            xhat[(r, c)] = h;
            y[(r, c)] = h * g[c] + b[c];
        }
    }
    (y, LnCache { xhat, rstd })
}

/// Returns `dx`, accumulating into `dg`/`db`.
fn layer_norm_backward(
    dy: &Matrix,
    g: &[f64],
    cache: &LnCache,
    dg: &mut [f64],
    db: &mut [f64],
) -> Matrix {
    let d = dy.cols();
    let mut dx = Matrix::zeros(dy.rows(), d);
    for r in 0..dy.rows() {
        let dyr = dy.row(r);
        let xh = cache.xhat.row(r);
        let mut mean_dxh = 0.0;
        let mut mean_dxh_xh = 0.0;
        for c in 0..d {
            dg[c] += dyr[c] * xh[c];
            db[c] += dyr[c];
            let dxh = dyr[c] * g[c];
            mean_dxh += dxh;
            mean_dxh_xh += dxh * xh[c];
        }
        mean_dxh /= d as f64;
        mean_dxh_xh /= d as f64;
        let rs = cache.rstd[r];
        for c in 0..d {
            let dxh = dyr[c] * g[c];
            dx[(r, c)] = rs * (dxh - mean_dxh - xh[c] * mean_dxh_xh);
        }
    }
    dx
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

struct BlockCache {
    ln1: LnCache,
    n1: Matrix,
    q: Matrix,
    k: Matrix,
    v: Matrix,
    /// one `L × L` causal attention matrix per head
    probs: Vec<Matrix>,
    attn: Matrix,
    ln2: LnCache,
    n2: Matrix,
    hpre: Matrix,
    hact: Matrix,
    wq: Matrix,
    wk: Matrix,
    wv: Matrix,
    wo: Matrix,
    w1: Matrix,
    w2: Matrix,
}

/// Activations saved by [`forward_cached`] for [`backward`].
pub struct ForwardCache {
    blocks: Vec<BlockCache>,
    lnf: LnCache,
    nf: Matrix,
    len: usize,
}

fn check_input(params: &LmParams, embed_seq: &Matrix) -> Result<(), LmError> {
    let cfg = &params.config;
    if embed_seq.cols() != cfg.d_model {
        return Err(LmError::DimMismatch {
            expected: cfg.d_model,
            found: embed_seq.cols(),
        });
    }
    if embed_seq.rows() == 0 {
        return Err(LmError::Shape("empty input sequence".into()));
    }
    if embed_seq.rows() > cfg.max_len {
        return Err(LmError::TooLong {
            len: embed_seq.rows(),
            max: cfg.max_len,
        });
    }
    Ok(())
}

/// Logits `L × V` for an `L × d_model` embedding sequence.
pub fn lm_forward(
    params: &LmParams,
    lora: Option<&LoraParams>,
    embed_seq: &Matrix,
) -> Result<Matrix, LmError> {
    forward_cached(params, lora, embed_seq).map(|(logits, _)| logits)
}

pub fn forward_cached(
    params: &LmParams,
    lora: Option<&LoraParams>,
    embed_seq: &Matrix,
) -> Result<(Matrix, ForwardCache), LmError> {
    check_input(params, embed_seq)?;
    let cfg = &params.config;
    let len = embed_seq.rows();
    let hd = cfg.head_dim();
    let inv_sqrt = 1.0 / (hd as f64).sqrt();

    let mut x = embed_seq.clone();
    for t in 0..len {
        for (xv, pv) in x.row_mut(t).iter_mut().zip(params.pos_emb.row(t)) {
            *xv += pv;
        }
    }

    let mut caches = Vec::with_capacity(params.blocks.len());
    for (bi, b) in params.blocks.iter().enumerate() {
        let wq = effective(&b.wq, lora, bi, LoraTarget::Query)?.into_owned();
        let wk = effective(&b.wk, lora, bi, LoraTarget::Key)?.into_owned();
        let wv = effective(&b.wv, lora, bi, LoraTarget::Value)?.into_owned();
        let wo = effective(&b.wo, lora, bi, LoraTarget::Output)?.into_owned();
        let w1 = effective(&b.w1, lora, bi, LoraTarget::FfIn)?.into_owned();
        let w2 = effective(&b.w2, lora, bi, LoraTarget::FfOut)?.into_owned();

        let (n1, ln1) = layer_norm(&x, &b.ln1_g, &b.ln1_b);
        let q = n1.matmul(&wq);
        let k = n1.matmul(&wk);
        let v = n1.matmul(&wv);
        let mut attn = Matrix::zeros(len, cfg.d_model);
        let mut probs = Vec::with_capacity(cfg.n_heads);
        for h in 0..cfg.n_heads {
            let off = h * hd;
            let mut p = Matrix::zeros(len, len);
            for i in 0..len {
                let qi = &q.row(i)[off..off + hd];
                let scores: Vec<f64> = (0..=i)
                    .map(|j| crate::tensor::dot(qi, &k.row(j)[off..off + hd]) * inv_sqrt)
                    .collect();
                let pr = log_softmax(&scores);
                for (j, lp) in pr.into_iter().enumerate() {
                    let pij = lp.exp();
                    p[(i, j)] = pij;
                    let vj = &v.row(j)[off..off + hd];
                    for (a, &vv) in attn.row_mut(i)[off..off + hd].iter_mut().zip(vj) {
                        *a += pij * vv;
                    }
                }
            }
            probs.push(p);
        }
        let proj = attn.matmul(&wo);
        x.add_assign(&proj);

        let (n2, ln2) = layer_norm(&x, &b.ln2_g, &b.ln2_b);
        let mut hpre = n2.matmul(&w1);
        hpre.add_row_vector(&b.b1);
        let hact = Matrix::from_vec(
            len,
            cfg.d_ff,
            hpre.as_slice().iter().map(|&z| gelu(z)).collect(),
        );
        let mut ff = hact.matmul(&w2);
        ff.add_row_vector(&b.b2);
        x.add_assign(&ff);

        caches.push(BlockCache {
            ln1,
            n1,
            q,
            k,
            v,
            probs,
            attn,
            ln2,
            n2,
            hpre,
            hact,
            wq,
            wk,
            wv,
            wo,
            w1,
            w2,
        });
    }

    let (nf, lnf) = layer_norm(&x, &params.lnf_g, &params.lnf_b);
    let mut logits = match &params.head {
        Some(h) => nf.matmul(h),
        None => nf.matmul_t(&params.tok_emb),
    };
    logits.add_row_vector(&params.head_b);
    if !logits.is_finite() {
        return Err(LmError::NonFinite("logits".into()));
    }
    Ok((
        logits,
        ForwardCache {
            blocks: caches,
            lnf,
            nf,
            len,
        },
    ))
}

/// Gradients of every model tensor, the LoRA adapters (when present), and
/// the input embedding sequence, given `dlogits = dL/d(logits)`.
pub fn backward(
    params: &LmParams,
    lora: Option<&LoraParams>,
    cache: &ForwardCache,
    dlogits: &Matrix,
) -> Result<(LmParams, Option<LoraParams>, Matrix), LmError> {
    let cfg = &params.config;
    if dlogits.shape() != (cache.len, cfg.vocab_size) {
        return Err(LmError::Shape(format!(
            "dlogits {:?}, expected {:?}",
            dlogits.shape(),
            (cache.len, cfg.vocab_size)
        )));
    }
    let len = cache.len;
    let hd = cfg.head_dim();
    let inv_sqrt = 1.0 / (hd as f64).sqrt();
    let mut g = params.zeros_like();
    let mut glora = lora.map(LoraParams::zeros_like);

    g.head_b = dlogits.sum_rows();
    let dnf = match &params.head {
        Some(h) => {
            g.head = Some(cache.nf.t_matmul(dlogits));
            dlogits.matmul_t(h)
        }
        None => {
            g.tok_emb.add_assign(&dlogits.t_matmul(&cache.nf));
            dlogits.matmul(&params.tok_emb)
        }
    };
    let mut dx = layer_norm_backward(&dnf, &params.lnf_g, &cache.lnf, &mut g.lnf_g, &mut g.lnf_b);

    for (bi, (b, c)) in params.blocks.iter().zip(&cache.blocks).enumerate().rev() {
        let gb = &mut g.blocks[bi];
        let mut geff: Vec<(LoraTarget, Matrix)> = Vec::with_capacity(6);

        // feed-forward branch
        gb.b2 = dx.sum_rows();
        let gw2 = c.hact.t_matmul(&dx);
        let dhact = dx.matmul_t(&c.w2);
        let dhpre = Matrix::from_vec(
            len,
            cfg.d_ff,
            dhact
                .as_slice()
                .iter()
                .zip(c.hpre.as_slice())
                .map(|(d, &z)| d * gelu_grad(z))
                .collect(),
        );
        gb.b1 = dhpre.sum_rows();
        let gw1 = c.n2.t_matmul(&dhpre);
        let dn2 = dhpre.matmul_t(&c.w1);
        let dln2 = layer_norm_backward(&dn2, &b.ln2_g, &c.ln2, &mut gb.ln2_g, &mut gb.ln2_b);
        dx.add_assign(&dln2);
        geff.push((LoraTarget::FfOut, gw2));
        geff.push((LoraTarget::FfIn, gw1));

        // attention branch
        let gwo = c.attn.t_matmul(&dx);
        let dattn = dx.matmul_t(&c.wo);
        let mut dq = Matrix::zeros(len, cfg.d_model);
        let mut dk = Matrix::zeros(len, cfg.d_model);
        let mut dv = Matrix::zeros(len, cfg.d_model);
        for h in 0..cfg.n_heads {
            let off = h * hd;
            let p = &c.probs[h];
            for i in 0..len {
                let da = &dattn.row(i)[off..off + hd];
                // dP_ij = da · v_j ; dv_j += P_ij da
                let mut dp = vec![0.0; i + 1];
                for j in 0..=i {
                    let vj = &c.v.row(j)[off..off + hd];
                    dp[j] = crate::tensor::dot(da, vj);
                    let pij = p[(i, j)];
                    for (dvv, &dav) in dv.row_mut(j)[off..off + hd].iter_mut().zip(da) {
                        *dvv += pij * dav;
                    }
                }
                let inner: f64 = (0..=i).map(|j| p[(i, j)] * dp[j]).sum();
                for j in 0..=i {
                    let ds = p[(i, j)] * (dp[j] - inner) * inv_sqrt;
                    if ds == 0.0 {
                        continue;
                    }
                    for d in 0..hd {
                        dq[(i, off + d)] += ds * c.k[(j, off + d)];
                        dk[(j, off + d)] += ds * c.q[(i, off + d)];
                    }
                }
            }
        }
        let gwq = c.n1.t_matmul(&dq);
        let gwk = c.n1.t_matmul(&dk);
        let gwv = c.n1.t_matmul(&dv);
        let mut dn1 = dq.matmul_t(&c.wq);
        dn1.add_assign(&dk.matmul_t(&c.wk));
        dn1.add_assign(&dv.matmul_t(&c.wv));
        let dln1 = layer_norm_backward(&dn1, &b.ln1_g, &c.ln1, &mut gb.ln1_g, &mut gb.ln1_b);
        dx.add_assign(&dln1);
        geff.push((LoraTarget::Output, gwo));
        geff.push((LoraTarget::Query, gwq));
        geff.push((LoraTarget::Key, gwk));
        geff.push((LoraTarget::Value, gwv));

        // dL/dW_eff is both the base-weight gradient and the LoRA input
        for (target, grad) in geff {
            if let (Some(l), Some(gl)) = (lora, glora.as_mut()) {
                if let Some(pair) = l.pair(bi, target) {
                    let gp = lora_backward(&grad, l.scaling, pair);
                    gl.blocks[bi].insert(target, gp);
                }
            }
            let slot = match target {
                LoraTarget::Query => &mut gb.wq,
                LoraTarget::Key => &mut gb.wk,
                LoraTarget::Value => &mut gb.wv,
                LoraTarget::Output => &mut gb.wo,
                LoraTarget::FfIn => &mut gb.w1,
                LoraTarget::FfOut => &mut gb.w2,
            };
            *slot = grad;
        }
    }

    for t in 0..len {
        for (gp, &d) in g.pos_emb.row_mut(t).iter_mut().zip(dx.row(t)) {
            *gp += d;
        }
    }
    Ok((g, glora, dx))
}
