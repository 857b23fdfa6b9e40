//! Recurrent update operator applied to every live edge.
//!
//! Per forward pass: `x = context + enc(corr)`, then twice
//! `[TC -> SA -> recurrent]` (blocks skipped per toggles), then flow and
//! confidence heads on the final hidden state. The first softmax aggregation
//! groups edges by patch, the second by target frame.

use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{ModelConfig, WeightStore};
use crate::nn::{sigmoid, Linear, Mat, OpCounter, NORM_EPS};

/// Per-edge inputs of one update pass. Rows in all matrices are aligned.
#[derive(Debug, Clone, PartialEq)]
pub struct UpdateBatch {
    pub hidden: Mat,
    pub corr: Mat,
    pub context: Mat,
    pub patch: Vec<u64>,
    /// Target frame per edge, also the temporal ordering key.
    pub frame: Vec<u64>,
}

impl UpdateBatch {
    pub fn len(&self) -> usize {
        self.patch.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patch.is_empty()
    }

    fn validate(&self, d: usize, l: usize) -> Result<()> {
        let e = self.len();
        let ok = self.frame.len() == e
            && (self.hidden.rows, self.hidden.cols) == (e, d)
            && (self.context.rows, self.context.cols) == (e, d)
            && (self.corr.rows, self.corr.cols) == (e, l);
        if ok {
            Ok(())
        } else {
            Err(Error::Validation("update batch rows or widths misaligned".into()))
        }
    }

    fn permuted(&self, order: &[usize]) -> UpdateBatch {
        let rows = |m: &Mat| {
            let mut out = Mat::zeros(m.rows, m.cols);
            for (dst, &src) in order.iter().enumerate() {
                out.row_mut(dst).copy_from_slice(m.row(src));
            }
            out
        };
        UpdateBatch {
            hidden: rows(&self.hidden),
            corr: rows(&self.corr),
            context: rows(&self.context),
            patch: order.iter().map(|&i| self.patch[i]).collect(),
            frame: order.iter().map(|&i| self.frame[i]).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UpdateOutput {
    /// Flow correction `(du, dv)` in feature pixels.
    pub flow: Vec<[f32; 2]>,
    pub confidence: Vec<f32>,
    pub hidden: Mat,
}

/// Neighbour rows `(prev, next)` along target frames within each patch.
pub fn temporal_neighbors(patch: &[u64], frame: &[u64]) -> Vec<(Option<usize>, Option<usize>)> {
    let mut idx: Vec<usize> = (0..patch.len()).collect();
    idx.sort_by_key(|&i| (patch[i], frame[i], i));
    let mut out = vec![(None, None); patch.len()];
    for w in idx.windows(2) {
        let (a, b) = (w[0], w[1]);
        if patch[a] == patch[b] && frame[b] == frame[a] + 1 {
            out[b].0 = Some(a);
            out[a].1 = Some(b);
        }
    }
    out
}

/// `FC([state(prev), state(cur), state(next)])` with zeros at chain ends.
pub fn temporal_conv(
    states: &Mat,
    patch: &[u64],
    frame: &[u64],
    fc: &Linear,
    counter: &mut OpCounter,
) -> Mat {
    let d = states.cols;
    let nb = temporal_neighbors(patch, frame);
    let mut input = Mat::zeros(states.rows, 3 * d);
    input
        .data
        .par_chunks_mut(3 * d)
        .zip(nb.par_iter())
        .enumerate()
        .for_each(|(i, (row, &(p, n)))| {
            if let Some(p) = p {
                row[..d].copy_from_slice(states.row(p));
            }
            row[d..2 * d].copy_from_slice(states.row(i));
            if let Some(n) = n {
                row[2 * d..].copy_from_slice(states.row(n));
            }
        });
    fc.forward(&input, counter)
}

fn group_members(groups: &[u64]) -> BTreeMap<u64, Vec<usize>> {
    let mut m: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
    for (i, &g) in groups.iter().enumerate() {
        m.entry(g).or_default().push(i);
    }
    m
}

/// Per-group, per-channel softmax of `logits` over the group members.
pub fn scatter_softmax(logits: &Mat, groups: &[u64]) -> Mat {
    let d = logits.cols;
    let mut w = Mat::zeros(logits.rows, d);
    for members in group_members(groups).values() {
        for c in 0..d {
            let mx = members
                .iter()
                .map(|&i| logits.data[i * d + c])
                .fold(f32::NEG_INFINITY, f32::max);
            let mut sum = 0.0f64;
            for &i in members {
                let e = ((logits.data[i * d + c] - mx) as f64).exp();
                w.data[i * d + c] = e as f32;
                sum += e;
            }
            for &i in members {
                w.data[i * d + c] = (w.data[i * d + c] as f64 / sum) as f32;
            }
        }
    }
    w
}

/// Weighted per-group sums of `values`, gathered back to every member row.
pub fn scatter_aggregate(weights: &Mat, values: &Mat, groups: &[u64]) -> Mat {
    let d = values.cols;
    let mut out = Mat::zeros(values.rows, d);
    for members in group_members(groups).values() {
        let mut acc = vec![0.0f64; d];
        for &i in members {
            for (a, (w, v)) in acc.iter_mut().zip(weights.row(i).iter().zip(values.row(i))) {
                *a += *w as f64 * *v as f64;
            }
        }
        let acc: Vec<f32> = acc.into_iter().map(|v| v as f32).collect();
        for &i in members {
            out.row_mut(i).copy_from_slice(&acc);
        }
    }
    out
}

struct SaBlock<'a> {
    gate: Linear<'a>,
    value: Linear<'a>,
    proj: Linear<'a>,
}

impl SaBlock<'_> {
    fn forward(&self, x: &Mat, groups: &[u64], counter: &mut OpCounter) -> Mat {
        let logits = self.gate.forward(x, counter);
        let values = self.value.forward(x, counter);
        let w = scatter_softmax(&logits, groups);
        counter.softmax_elements += (x.rows * x.cols) as u64;
        let agg = scatter_aggregate(&w, &values, groups);
        counter.add_macs(x.rows * x.cols);
        let mut out = self.proj.forward(&agg, counter);
        out.add_assign(x);
        out
    }
}

/// Gated recurrent unit with update gate `z`, reset gate `r` and candidate `c`.
pub struct Gru<'a> {
    pub z: Linear<'a>,
    pub r: Linear<'a>,
    pub c: Linear<'a>,
}

impl Gru<'_> {
    pub fn step(&self, h: &Mat, x: &Mat, counter: &mut OpCounter) -> Mat {
        let hx = Mat::hconcat(&[h, x]);
        let mut z = self.z.forward(&hx, counter);
        let mut r = self.r.forward(&hx, counter);
        z.data.iter_mut().for_each(|v| *v = sigmoid(*v));
        r.data.iter_mut().for_each(|v| *v = sigmoid(*v));
        for (rv, hv) in r.data.iter_mut().zip(&h.data) {
            *rv *= hv;
        }
        let rhx = Mat::hconcat(&[&r, x]);
        let c = self.c.forward(&rhx, counter);
        let mut out = Mat::zeros(h.rows, h.cols);
        for i in 0..out.data.len() {
            let zi = z.data[i];
            out.data[i] = (1.0 - zi) * h.data[i] + zi * c.data[i].tanh();
        }
        out
    }
}

/// `FC2(ReLU(FC1(LayerNorm([h, x]))))`.
pub struct LightStep<'a> {
    pub norm_weight: &'a [f32],
    pub norm_bias: &'a [f32],
    pub fc1: Linear<'a>,
    pub fc2: Linear<'a>,
}

pub fn layer_norm_rows(x: &mut Mat, weight: &[f32], bias: &[f32]) {
    let d = x.cols;
    for row in x.data.chunks_exact_mut(d.max(1)) {
        let mean = row.iter().map(|&v| v as f64).sum::<f64>() / d as f64;
        let var = row.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + NORM_EPS as f64).sqrt();
        for (c, v) in row.iter_mut().enumerate() {
            *v = ((*v as f64 - mean) * inv) as f32 * weight[c] + bias[c];
        }
    }
}

impl LightStep<'_> {
    pub fn step(&self, h: &Mat, x: &Mat, counter: &mut OpCounter) -> Mat {
        let mut hx = Mat::hconcat(&[h, x]);
        layer_norm_rows(&mut hx, self.norm_weight, self.norm_bias);
        let mut a = self.fc1.forward(&hx, counter);
        crate::nn::relu_inplace(&mut a.data);
        self.fc2.forward(&a, counter)
    }
}

enum Recurrent<'a> {
    Gru(Gru<'a>),
    Light(LightStep<'a>),
}

struct Repeat<'a> {
    tc: Option<Linear<'a>>,
    sa: Option<SaBlock<'a>>,
    rec: Recurrent<'a>,
}

/// Borrowed view of the update weights.
pub struct UpdateOperator<'a> {
    cfg: &'a ModelConfig,
    encoder: Linear<'a>,
    reps: Vec<Repeat<'a>>,
    flow_head: Linear<'a>,
    conf_head: Linear<'a>,
}

impl<'a> UpdateOperator<'a> {
    pub fn new(weights: &'a WeightStore, cfg: &'a ModelConfig) -> Result<Self> {
        let lin = |n: &str| Linear::from_store(weights, n);
        let mut reps = Vec::new();
        for rep in 1..=2 {
            let tc = if cfg.use_tc {
                Some(lin(&format!("update.tc{rep}"))?)
            } else {
                None
            };
            let sa = if cfg.use_sa {
                Some(SaBlock {
                    gate: lin(&format!("update.sa{rep}.gate"))?,
                    value: lin(&format!("update.sa{rep}.value"))?,
                    proj: lin(&format!("update.sa{rep}.proj"))?,
                })
            } else {
                None
            };
            let rec = if cfg.use_gru {
                Recurrent::Gru(Gru {
                    z: lin(&format!("update.gru{rep}.z"))?,
                    r: lin(&format!("update.gru{rep}.r"))?,
                    c: lin(&format!("update.gru{rep}.c"))?,
                })
            } else {
                let p = format!("update.light{rep}");
                Recurrent::Light(LightStep {
                    norm_weight: &weights.get(&format!("{p}.norm.weight"))?.data,
                    norm_bias: &weights.get(&format!("{p}.norm.bias"))?.data,
                    fc1: lin(&format!("{p}.fc1"))?,
                    fc2: lin(&format!("{p}.fc2"))?,
                })
            };
            reps.push(Repeat { tc, sa, rec });
        }
        let encoder = lin("update.corr_encoder")?;
        if encoder.din != cfg.corr_len() || encoder.dout != cfg.hidden_dim() {
            return Err(Error::Config("corr_encoder does not match config".into()));
        }
        Ok(Self {
            cfg,
            encoder,
            reps,
            flow_head: lin("update.flow_head")?,
            conf_head: lin("update.conf_head")?,
        })
    }

    /// Run the operator. Edges are processed in canonical `(patch, frame)`
    /// order and returned in input order, so results do not depend on the
    /// batch order.
    pub fn forward(&self, batch: &UpdateBatch, counter: &mut OpCounter) -> Result<UpdateOutput> {
        let d = self.cfg.hidden_dim();
        batch.validate(d, self.cfg.corr_len())?;
        let mut order: Vec<usize> = (0..batch.len()).collect();
        order.sort_by_key(|&i| (batch.patch[i], batch.frame[i], i));
        let identity = order.iter().enumerate().all(|(a, &b)| a == b);
        let canon;
        let b = if identity {
            batch
        } else {
            canon = batch.permuted(&order);
            &canon
        };

        let mut x = self.encoder.forward(&b.corr, counter);
        x.add_assign(&b.context);
        x.check_finite("encoder")?;
        let mut h = b.hidden.clone();
        for (k, rep) in self.reps.iter().enumerate() {
            let n = k + 1;
            if let Some(tc) = &rep.tc {
                let t = temporal_conv(&x, &b.patch, &b.frame, tc, counter);
                x.add_assign(&t);
                x.check_finite(&format!("tc{n}"))?;
            }
            if let Some(sa) = &rep.sa {
                let groups = if k == 0 { &b.patch } else { &b.frame };
                x = sa.forward(&x, groups, counter);
                x.check_finite(&format!("sa{n}"))?;
            }
            h = match &rep.rec {
                Recurrent::Gru(g) => {
                    let h = g.step(&h, &x, counter);
                    h.check_finite(&format!("gru{n}"))?;
                    h
                }
                Recurrent::Light(l) => {
                    let h = l.step(&h, &x, counter);
                    h.check_finite(&format!("light{n}"))?;
                    h
                }
            };
            x = h.clone();
        }
        let flow = self.flow_head.forward(&h, counter);
        let conf = self.conf_head.forward(&h, counter);
        flow.check_finite("flow_head")?;
        conf.check_finite("conf_head")?;

        let e = b.len();
        let mut out = UpdateOutput {
            flow: vec![[0.0; 2]; e],
            confidence: vec![0.0; e],
            hidden: Mat::zeros(e, d),
        };
        for (pos, &src) in order.iter().enumerate() {
            out.flow[src] = [flow.data[2 * pos], flow.data[2 * pos + 1]];
            out.confidence[src] = sigmoid(conf.data[pos]);
            out.hidden.row_mut(src).copy_from_slice(h.row(pos));
        }
        Ok(out)
    }
}

/// Analytical multiply-accumulates of one operator pass per edge.
pub fn update_macs_per_edge(cfg: &ModelConfig) -> u64 {
    let d = cfg.hidden_dim() as u64;
    let l = cfg.corr_len() as u64;
    let mut per_rep = 0;
    if cfg.use_tc {
        per_rep += 3 * d * d;
    }
    if cfg.use_sa {
        per_rep += 3 * d * d + d;
    }
    per_rep += if cfg.use_gru { 6 * d * d } else { 3 * d * d };
    l * d + 2 * per_rep + 3 * d
}

/// Softmax elements of one operator pass over `edges` edges.
pub fn update_e_sigma(cfg: &ModelConfig, edges: u64) -> u64 {
    if cfg.use_sa {
        2 * edges * cfg.hidden_dim() as u64
    } else {
        0
    }
}
