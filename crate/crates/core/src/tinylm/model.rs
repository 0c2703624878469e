use std::collections::BTreeMap;

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, ArrayView2, Axis, Zip};

use super::{ModelParams, SubModule};
use crate::corpus::TokenSequence;
use crate::error::{GdsError, Result};
use crate::lora::{AdapterGrad, LoraAdapter, LoraAdapterSet};

/// Gradients with the same layout as [`ModelParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet(pub ModelParams);

impl GradientSet {
    pub fn params(&self) -> &ModelParams {
        &self.0
    }

    pub fn into_params(self) -> ModelParams {
        self.0
    }
}

struct NormCache {
    /// x / rms(x)
    normed: Array2<f64>,
    rms: Array1<f64>,
}

struct LayerTrace {
    attn_norm: NormCache,
    attn_in: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    /// Attention probabilities, one `T x T` matrix per head.
    probs: Vec<Array2<f64>>,
    ctx: Array2<f64>,
    ffn_norm: NormCache,
    ffn_in: Array2<f64>,
    gate: Array2<f64>,
    up: Array2<f64>,
    act: Array2<f64>,
    /// `x A^T` for each adapted projection.
    lora_u: [Option<Array2<f64>>; 7],
}

/// Activations retained by [`forward_ids`] for the backward pass.
pub struct ForwardTrace {
    ids: Vec<u32>,
    layers: Vec<LayerTrace>,
    final_norm: NormCache,
    final_out: Array2<f64>,
    logits: Array2<f64>,
    log_probs: Array2<f64>,
    loss: f64,
    adapted: bool,
}

impl ForwardTrace {
    pub fn loss(&self) -> f64 {
        self.loss
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    /// `T x vocab_size` output logits.
    pub fn logits(&self) -> &Array2<f64> {
        &self.logits
    }

    /// `T x vocab_size` log-softmax of the logits.
    pub fn log_probs(&self) -> &Array2<f64> {
        &self.log_probs
    }

    /// `log p(x_{t+1} | x_{<=t})` for `t = 0..T-1`.
    pub fn target_log_probs(&self) -> Vec<f64> {
        (0..self.ids.len() - 1)
            .map(|t| self.log_probs[[t, self.ids[t + 1] as usize]])
            .collect()
    }
}

fn rmsnorm(x: &Array2<f64>, gain: &Array1<f64>, eps: f64) -> (Array2<f64>, NormCache) {
    let d = x.ncols() as f64;
    let rms = x.map_axis(Axis(1), |row| (row.dot(&row) / d + eps).sqrt());
    let normed = x / &rms.view().insert_axis(Axis(1));
    let y = &normed * gain;
    (y, NormCache { normed, rms })
}

/// Returns dx; accumulates into `dgain`.
fn rmsnorm_backward(
    dy: &Array2<f64>,
    cache: &NormCache,
    gain: &Array1<f64>,
    dgain: Option<&mut Array1<f64>>,
) -> Array2<f64> {
    if let Some(dg) = dgain {
        *dg += &(dy * &cache.normed).sum_axis(Axis(0));
    }
    let dn = dy * gain;
    let d = dy.ncols() as f64;
    let mut dx = dn;
    Zip::from(dx.rows_mut())
        .and(cache.normed.rows())
        .and(&cache.rms)
        .for_each(|mut dxr, nr, &r| {
            let proj = dxr.dot(&nr) / d;
            Zip::from(&mut dxr).and(&nr).for_each(|g, &n| *g = (*g - n * proj) / r);
        });
    dx
}

fn project(
    x: &Array2<f64>,
    w: &Array2<f64>,
    adapter: Option<&LoraAdapter>,
) -> (Array2<f64>, Option<Array2<f64>>) {
    let mut y = x.dot(&w.t());
    let u = adapter.map(|ad| {
        let u = x.dot(&ad.a.t());
        general_mat_mul(ad.scaling, &u, &ad.b.t(), 1.0, &mut y);
        u
    });
    (y, u)
}

struct ProjBack<'a> {
    dw: Option<&'a mut Array2<f64>>,
    adapter: Option<(&'a LoraAdapter, &'a Array2<f64>, Option<&'a mut AdapterGrad>)>,
}

fn project_backward(dy: &Array2<f64>, x: &Array2<f64>, w: &Array2<f64>, back: ProjBack<'_>) -> Array2<f64> {
    if let Some(dw) = back.dw {
        general_mat_mul(1.0, &dy.t(), x, 1.0, dw);
    }
    let mut dx = dy.dot(w);
    if let Some((ad, u, grad)) = back.adapter {
        let du = dy.dot(&ad.b) * ad.scaling;
        if let Some(g) = grad {
            general_mat_mul(ad.scaling, &dy.t(), u, 1.0, &mut g.b);
            general_mat_mul(1.0, &du.t(), x, 1.0, &mut g.a);
        }
        general_mat_mul(1.0, &du, &ad.a, 1.0, &mut dx);
    }
    dx
}

fn softmax_rows_inplace(m: &mut Array2<f64>) {
    for mut row in m.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
}

fn silu(z: f64) -> f64 {
    z / (1.0 + (-z).exp())
}

fn silu_grad(z: f64) -> f64 {
    let sig = 1.0 / (1.0 + (-z).exp());
    sig * (1.0 + z * (1.0 - sig))
}

fn check_ids(params: &ModelParams, ids: &[u32]) -> Result<()> {
    let cfg = &params.config;
    if ids.len() < 2 {
        return Err(GdsError::invalid(format!(
            "sequence needs at least 2 tokens, got {}",
            ids.len()
        )));
    }
    if ids.len() > cfg.max_seq_len {
        return Err(GdsError::invalid(format!(
            "sequence length {} exceeds max_seq_len {}",
            ids.len(),
            cfg.max_seq_len
        )));
    }
    if let Some((position, &id)) = ids.iter().enumerate().find(|(_, &id)| id as usize >= cfg.vocab_size) {
        return Err(GdsError::TokenOutOfRange {
            id,
            position,
            vocab_size: cfg.vocab_size,
        });
    }
    Ok(())
}

/// Token-mean causal LM loss and its trace.
pub fn forward(params: &ModelParams, seq: &TokenSequence) -> Result<(f64, ForwardTrace)> {
    let trace = forward_ids(params, &seq.ids, None)?;
    Ok((trace.loss, trace))
}

/// Forward pass over raw ids, optionally with LoRA adapters on the projections.
pub fn forward_ids(
    params: &ModelParams,
    ids: &[u32],
    adapters: Option<&LoraAdapterSet>,
) -> Result<ForwardTrace> {
    check_ids(params, ids)?;
    let cfg = &params.config;
    let t_len = ids.len();
    let hd = cfg.head_dim();
    let scale = 1.0 / (hd as f64).sqrt();

    let mut h = Array2::zeros((t_len, cfg.d_model));
    for (t, &id) in ids.iter().enumerate() {
        let mut row = h.row_mut(t);
        row.assign(&params.tok_emb.row(id as usize));
        row += &params.pos_emb.row(t);
    }

    let mut layers = Vec::with_capacity(cfg.n_layers);
    for (li, lp) in params.layers.iter().enumerate() {
        let ad = |s: SubModule| adapters.and_then(|a| a.get(li, s));
        let mut lora_u: [Option<Array2<f64>>; 7] = Default::default();

        let (attn_in, attn_norm) = rmsnorm(&h, &lp.attn_norm, cfg.rmsnorm_eps);
        let (q, uq) = project(&attn_in, lp.weight(SubModule::Q), ad(SubModule::Q));
        let (k, uk) = project(&attn_in, lp.weight(SubModule::K), ad(SubModule::K));
        let (v, uv) = project(&attn_in, lp.weight(SubModule::V), ad(SubModule::V));
        lora_u[0] = uq;
        lora_u[1] = uk;
        lora_u[2] = uv;

        let mut ctx = Array2::zeros((t_len, cfg.d_model));
        let mut probs = Vec::with_capacity(cfg.n_heads);
        for head in 0..cfg.n_heads {
            let cols = s![.., head * hd..(head + 1) * hd];
            let mut sc = q.slice(cols).dot(&k.slice(cols).t()) * scale;
            for i in 0..t_len {
                for j in i + 1..t_len {
                    sc[[i, j]] = f64::NEG_INFINITY;
                }
            }
            softmax_rows_inplace(&mut sc);
            ctx.slice_mut(cols).assign(&sc.dot(&v.slice(cols)));
            probs.push(sc);
        }
        let (o, uo) = project(&ctx, lp.weight(SubModule::O), ad(SubModule::O));
        lora_u[3] = uo;
        h += &o;

        let (ffn_in, ffn_norm) = rmsnorm(&h, &lp.ffn_norm, cfg.rmsnorm_eps);
        let (gate, ug) = project(&ffn_in, lp.weight(SubModule::Gate), ad(SubModule::Gate));
        let (up, uu) = project(&ffn_in, lp.weight(SubModule::Up), ad(SubModule::Up));
        let act = Zip::from(&gate).and(&up).map_collect(|&g, &u| silu(g) * u);
        let (down, ud) = project(&act, lp.weight(SubModule::Down), ad(SubModule::Down));
        lora_u[4] = ug;
        lora_u[5] = uu;
        lora_u[6] = ud;
        h += &down;

        layers.push(LayerTrace {
            attn_norm,
            attn_in,
            q,
            k,
            v,
            probs,
            ctx,
            ffn_norm,
            ffn_in,
            gate,
            up,
            act,
            lora_u,
        });
    }

    let (final_out, final_norm) = rmsnorm(&h, &params.final_norm, cfg.rmsnorm_eps);
    let logits = final_out.dot(&params.head.t());
    let mut log_probs = logits.clone();
    for mut row in log_probs.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
        row.mapv_inplace(|v| v - lse);
    }
    let n_targets = (t_len - 1) as f64;
    let loss = -(0..t_len - 1)
        .map(|t| log_probs[[t, ids[t + 1] as usize]])
        .sum::<f64>()
        / n_targets;
    if !loss.is_finite() {
        return Err(GdsError::NonFinite {
            context: "forward loss".into(),
        });
    }

    Ok(ForwardTrace {
        ids: ids.to_vec(),
        layers,
        final_norm,
        final_out,
        logits,
        log_probs,
        loss,
        adapted: adapters.is_some(),
    })
}

/// Exact gradients of the token-mean loss with respect to every parameter.
pub fn backward(params: &ModelParams, trace: &ForwardTrace) -> Result<GradientSet> {
    backward_scaled(params, trace, 1.0)
}

/// Gradients of `scale * loss`.
pub fn backward_scaled(params: &ModelParams, trace: &ForwardTrace, scale: f64) -> Result<GradientSet> {
    if trace.adapted {
        return Err(GdsError::invalid(
            "trace was produced with adapters; use lora::backward_adapters",
        ));
    }
    let (grads, _) = backward_impl(params, None, trace, scale, true, false)?;
    Ok(grads.expect("base gradients requested"))
}

pub(crate) type AdapterGrads = BTreeMap<(usize, SubModule), AdapterGrad>;

/// Shared backward pass. `want_base` / `want_adapters` select which
/// parameter gradients are accumulated; activation gradients always flow.
pub(crate) fn backward_impl(
    params: &ModelParams,
    adapters: Option<&LoraAdapterSet>,
    trace: &ForwardTrace,
    scale: f64,
    want_base: bool,
    want_adapters: bool,
) -> Result<(Option<GradientSet>, Option<AdapterGrads>)> {
    if trace.adapted != adapters.is_some() {
        return Err(GdsError::invalid("adapter set does not match the forward trace"));
    }
    let cfg = &params.config;
    let ids = &trace.ids;
    let t_len = ids.len();
    let hd = cfg.head_dim();
    let att_scale = 1.0 / (hd as f64).sqrt();

    let mut g = want_base.then(|| ModelParams::zeros(cfg));
    let mut ag: Option<AdapterGrads> = match (want_adapters, adapters) {
        (true, Some(set)) => Some(
            set.iter()
                .map(|(key, ad)| (*key, AdapterGrad::zeros_like(ad)))
                .collect(),
        ),
        _ => None,
    };

    // d loss / d logits
    let coef = scale / (t_len - 1) as f64;
    let mut dlogits = Array2::zeros(trace.logits.raw_dim());
    for t in 0..t_len - 1 {
        let mut row = dlogits.row_mut(t);
        Zip::from(&mut row)
            .and(&trace.log_probs.row(t))
            .for_each(|d, &lp| *d = lp.exp() * coef);
        row[ids[t + 1] as usize] -= coef;
    }

    if let Some(g) = g.as_mut() {
        general_mat_mul(1.0, &dlogits.t(), &trace.final_out, 1.0, &mut g.head);
    }
    let dfinal = dlogits.dot(&params.head);
    let mut dh = rmsnorm_backward(
        &dfinal,
        &trace.final_norm,
        &params.final_norm,
        g.as_mut().map(|g| &mut g.final_norm),
    );

    for li in (0..cfg.n_layers).rev() {
        let lp = &params.layers[li];
        let lt = &trace.layers[li];
        let ad = |s: SubModule| adapters.and_then(|a| a.get(li, s));

        macro_rules! back {
            ($dy:expr, $x:expr, $sub:expr) => {{
                let sub: SubModule = $sub;
                let dw = g.as_mut().map(|g| &mut g.layers[li].proj[sub.index()]);
                let adapter = ad(sub).map(|a| {
                    let u = lt.lora_u[sub.index()].as_ref().expect("adapter activations");
                    (a, u, ag.as_mut().and_then(|m| m.get_mut(&(li, sub))))
                });
                project_backward($dy, $x, lp.weight(sub), ProjBack { dw, adapter })
            }};
        }

        // feed-forward
        let dact = back!(&dh, &lt.act, SubModule::Down);
        let mut dgate = Array2::zeros(lt.gate.raw_dim());
        let mut dup = Array2::zeros(lt.up.raw_dim());
        Zip::from(&mut dgate)
            .and(&mut dup)
            .and(&dact)
            .and(&lt.gate)
            .and(&lt.up)
            .for_each(|dg, du, &da, &z, &u| {
                *du = da * silu(z);
                *dg = da * u * silu_grad(z);
            });
        let mut dffn_in = back!(&dgate, &lt.ffn_in, SubModule::Gate);
        dffn_in += &back!(&dup, &lt.ffn_in, SubModule::Up);
        dh += &rmsnorm_backward(
            &dffn_in,
            &lt.ffn_norm,
            &lp.ffn_norm,
            g.as_mut().map(|g| &mut g.layers[li].ffn_norm),
        );

        // attention
        let dctx = back!(&dh, &lt.ctx, SubModule::O);
        let mut dq = Array2::zeros((t_len, cfg.d_model));
        let mut dk = Array2::zeros((t_len, cfg.d_model));
        let mut dv = Array2::zeros((t_len, cfg.d_model));
        for head in 0..cfg.n_heads {
            let cols = s![.., head * hd..(head + 1) * hd];
            let p = &lt.probs[head];
            let dctx_h: ArrayView2<f64> = dctx.slice(cols);
            let dp = dctx_h.dot(&lt.v.slice(cols).t());
            dv.slice_mut(cols).assign(&p.t().dot(&dctx_h));
            let mut ds = dp;
            Zip::from(ds.rows_mut()).and(p.rows()).for_each(|mut dsr, pr| {
                let inner = dsr.dot(&pr);
                Zip::from(&mut dsr).and(&pr).for_each(|d, &pv| *d = pv * (*d - inner));
            });
            ds *= att_scale;
            dq.slice_mut(cols).assign(&ds.dot(&lt.k.slice(cols)));
            dk.slice_mut(cols).assign(&ds.t().dot(&lt.q.slice(cols)));
        }
        let mut dattn_in = back!(&dq, &lt.attn_in, SubModule::Q);
        dattn_in += &back!(&dk, &lt.attn_in, SubModule::K);
        dattn_in += &back!(&dv, &lt.attn_in, SubModule::V);
        dh += &rmsnorm_backward(
            &dattn_in,
            &lt.attn_norm,
            &lp.attn_norm,
            g.as_mut().map(|g| &mut g.layers[li].attn_norm),
        );
    }

    if let Some(g) = g.as_mut() {
        for (t, &id) in ids.iter().enumerate() {
            let row = dh.row(t);
            let mut e = g.tok_emb.row_mut(id as usize);
            e += &row;
            let mut p = g.pos_emb.row_mut(t);
            p += &row;
        }
        if let Some(path) = g.first_non_finite() {
            return Err(GdsError::NonFinite {
                context: format!("gradient of {path}"),
            });
        }
    }
    if let Some(ag) = ag.as_ref() {
        for ((layer, sub), grad) in ag {
            if grad.a.iter().chain(grad.b.iter()).any(|x| !x.is_finite()) {
                return Err(GdsError::NonFinite {
                    context: format!("adapter gradient of {}", sub.path(*layer)),
                });
            }
        }
    }
    Ok((g.map(GradientSet), ag))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tinylm::ModelConfig;

    fn small() -> ModelParams {
        let cfg = ModelConfig {
            vocab_size: 20,
            d_model: 8,
            n_heads: 2,
            n_layers: 2,
            d_ff: 12,
            max_seq_len: 10,
            rmsnorm_eps: 1e-6,
        };
        ModelParams::init(&cfg, 3).unwrap()
    }

    #[test]
    fn rejects_bad_ids() {
        let p = small();
        assert!(matches!(
            forward_ids(&p, &[1, 20], None),
            Err(GdsError::TokenOutOfRange { id: 20, position: 1, .. })
        ));
        assert!(forward_ids(&p, &[1], None).is_err());
        assert!(forward_ids(&p, &[1; 11], None).is_err());
    }

    #[test]
    fn unused_rows_have_zero_gradient() {
        let p = small();
        let tr = forward_ids(&p, &[3, 4, 5, 3], None).unwrap();
        let g = backward(&p, &tr).unwrap().into_params();
        for id in 0..20 {
            let zero = g.tok_emb.row(id).iter().all(|&x| x == 0.0);
            assert_eq!(zero, ![3, 4, 5].contains(&id), "row {id}");
        }
        // positions beyond the sample never receive gradient
        assert!(g.pos_emb.slice(s![4.., ..]).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn scaling_loss_scales_gradient() {
        let p = small();
        let tr = forward_ids(&p, &[1, 7, 2, 9, 9], None).unwrap();
        let g1 = backward(&p, &tr).unwrap().into_params();
        let g2 = backward_scaled(&p, &tr, 2.0).unwrap().into_params();
        for ((_, a), (_, b)) in g1.named().iter().zip(g2.named().iter()) {
            for (x, y) in a.iter().zip(b.iter()) {
                assert!((2.0 * x - y).abs() <= 1e-15 * y.abs().max(1e-300));
            }
        }
    }

    #[test]
    fn backward_leaves_params_untouched() {
        let p = small();
        let before = p.clone();
        let tr = forward_ids(&p, &[1, 2, 3], None).unwrap();
        let _ = backward(&p, &tr).unwrap();
        assert_eq!(p, before);
    }
}
