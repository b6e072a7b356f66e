//! Analytic gradients of segment log-likelihoods and the language-model
//! warm-up that produces the "pretrained" backbone.

use ndarray::{s, Array1};
use rand::seq::SliceRandom;

use super::model::{BackboneParams, ConditionerParams, LatentVector, Temperature};
use crate::error::{CoreError, Result};
use crate::exec::Exec;
use crate::params::ParamSet;
use crate::rng;
use crate::simplex::softmax;

/// Gradient of a log-likelihood with respect to every generator parameter
/// and the injected latent vector.
#[derive(Debug, Clone)]
pub struct StepGrad {
    pub log_likelihood: f64,
    pub backbone: BackboneParams,
    pub conditioner: ConditionerParams,
    pub latent: Vec<f64>,
}

impl StepGrad {
    fn zeros(
        params: &BackboneParams,
        omega: Option<&ConditionerParams>,
        latent_dim: usize,
    ) -> StepGrad {
        StepGrad {
            log_likelihood: 0.0,
            backbone: params.zeros_like(),
            conditioner: omega
                .map(|o| o.zeros_like())
                .unwrap_or_else(|| ConditionerParams {
                    down_w: ndarray::Array2::zeros((0, 0)),
                    down_b: Array1::zeros(0),
                    up_w: ndarray::Array2::zeros((0, 0)),
                    up_b: Array1::zeros(0),
                }),
            latent: vec![0.0; latent_dim],
        }
    }

    pub fn accumulate(&mut self, other: &StepGrad, weight: f64) {
        self.log_likelihood += weight * other.log_likelihood;
        self.backbone.add_scaled(&other.backbone, weight);
        if self.conditioner.flat_len() == other.conditioner.flat_len() {
            self.conditioner.add_scaled(&other.conditioner, weight);
        }
        self.latent
            .iter_mut()
            .zip(&other.latent)
            .for_each(|(a, b)| *a += weight * b);
    }

    pub fn scale(&mut self, weight: f64) {
        self.log_likelihood *= weight;
        self.backbone
            .arrays_mut()
            .into_iter()
            .flatten()
            .for_each(|x| *x *= weight);
        self.conditioner
            .arrays_mut()
            .into_iter()
            .flatten()
            .for_each(|x| *x *= weight);
        self.latent.iter_mut().for_each(|x| *x *= weight);
    }
}

/// Adds d log p(target | stream) into `g`. `omega` = None runs the bare
/// backbone (no adapter).
fn accumulate_token(
    params: &BackboneParams,
    omega: Option<(&ConditionerParams, &LatentVector)>,
    stream: &[u32],
    target: u32,
    eta: f64,
    g: &mut StepGrad,
) {
    let ctx = params.context(stream);
    let h = (params.hidden_w.dot(&ctx) + &params.hidden_b).mapv(super::model::sigmoid);
    let (hc, cat) = match omega {
        Some((o, z)) => {
            let cat = o.bottleneck(&h, &z.0);
            (&h + &o.up_w.dot(&cat) + &o.up_b, Some(cat))
        }
        None => (h.clone(), None),
    };
    let logits = params.logits(&hc);
    let p = softmax(&logits.mapv(|l| l / eta).to_vec());
    g.log_likelihood += p[target as usize].ln();

    let mut g_logits = Array1::from_iter(p.iter().map(|x| -x / eta));
    g_logits[target as usize] += 1.0 / eta;

    let gb = &mut g.backbone;
    for v in 0..g_logits.len() {
        gb.out_w.row_mut(v).scaled_add(g_logits[v], &hc);
    }
    gb.out_b += &g_logits;
    let g_hc = params.out_w.t().dot(&g_logits);

    let mut g_h = g_hc.clone();
    if let (Some((o, _)), Some(cat)) = (omega, cat) {
        let gc = &mut g.conditioner;
        let r = o.rank();
        for i in 0..g_hc.len() {
            gc.up_w.row_mut(i).scaled_add(g_hc[i], &cat);
        }
        gc.up_b += &g_hc;
        let g_cat = o.up_w.t().dot(&g_hc);
        let g_down = g_cat.slice(s![..r]).to_owned();
        for i in 0..r {
            gc.down_w.row_mut(i).scaled_add(g_down[i], &h);
        }
        gc.down_b += &g_down;
        g_h += &o.down_w.t().dot(&g_down);
        g.latent
            .iter_mut()
            .zip(g_cat.slice(s![r..]))
            .for_each(|(a, b)| *a += b);
    }

    let g_u = &g_h * &h.mapv(|x| x * (1.0 - x));
    for i in 0..g_u.len() {
        gb.hidden_w.row_mut(i).scaled_add(g_u[i], &ctx);
    }
    gb.hidden_b += &g_u;
    let g_ctx = params.hidden_w.t().dot(&g_u);
    for (pos, &tok) in stream.iter().rev().take(params.window).enumerate() {
        gb.pos_weights[pos] += g_ctx.dot(&params.embed.row(tok as usize));
        gb.embed
            .row_mut(tok as usize)
            .scaled_add(params.pos_weights[pos], &g_ctx);
    }
}

/// log P(segment | prefix, z) and its gradient. Only finite temperatures
/// are differentiable.
pub fn step_log_likelihood_grad(
    params: &BackboneParams,
    omega: &ConditionerParams,
    prefix: &[u32],
    z: &LatentVector,
    tokens: &[u32],
    temp: Temperature,
) -> StepGrad {
    let eta = match temp {
        Temperature::Finite(eta) => eta,
        Temperature::Greedy => panic!("greedy decoding has no gradient"),
    };
    let mut g = StepGrad::zeros(params, Some(omega), z.dim());
    let mut stream = prefix.to_vec();
    for &tok in tokens {
        accumulate_token(params, Some((omega, z)), &stream, tok, eta, &mut g);
        stream.push(tok);
    }
    g
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LmConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub step_size: f64,
    pub seed: u64,
}

/// Next-token warm-up of the bare backbone on full token streams. Each
/// stream's first `prompt_len[i]` tokens are context only. Returns the mean
/// per-token log-likelihood after every epoch.
pub fn pretrain_lm(
    params: &mut BackboneParams,
    streams: &[(Vec<u32>, usize)],
    cfg: &LmConfig,
    exec: Exec,
) -> Result<Vec<f64>> {
    if streams.is_empty() {
        return Err(CoreError::Empty("language-model corpus"));
    }
    let n_tokens: usize = streams.iter().map(|(s, p)| s.len() - p).sum();
    let mut order: Vec<usize> = (0..streams.len()).collect();
    let mut rng = rng::rng(cfg.seed);
    let mut trace = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_ll = 0.0;
        for batch in order.chunks(cfg.batch_size.max(1)) {
            let frozen = &*params;
            let grads = exec.map_slice(batch, |&i| {
                let (stream, prompt) = &streams[i];
                let mut g = StepGrad::zeros(frozen, None, 0);
                for pos in *prompt..stream.len() {
                    accumulate_token(frozen, None, &stream[..pos], stream[pos], 1.0, &mut g);
                }
                g
            });
            let batch_tokens: usize = batch
                .iter()
                .map(|&i| streams[i].0.len() - streams[i].1)
                .sum();
            let mut total = grads[0].clone();
            for g in &grads[1..] {
                total.accumulate(g, 1.0);
            }
            epoch_ll += total.log_likelihood;
            if !total.backbone.is_finite() {
                return Err(CoreError::Numeric(format!(
                    "non-finite LM gradient at epoch {epoch}"
                )));
            }
            params.add_scaled(&total.backbone, cfg.step_size / batch_tokens as f64);
        }
        trace.push(epoch_ll / n_tokens as f64);
    }
    Ok(trace)
}
