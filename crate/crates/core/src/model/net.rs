use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::geo::{knn_query, Neighbors};
use super::interp::{idw_weights, knn_interpolate, KnnWeightMode, StationFeatures};
use crate::data::{WindowBatch, TIME_FEATURES};
use crate::nn::{Graph, LstmParams, MhaParams, NamedParams, Scalar, Tensor, Var};
use crate::{Error, Result};

fn default_true() -> bool {
    true
}

fn default_power() -> f64 {
    2.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AqNetConfig {
    pub hidden_dim: usize,
    pub n_heads: usize,
    pub t_in: usize,
    pub horizon: usize,
    pub k_neighbors: usize,
    pub knn_weight_mode: KnnWeightMode,
    /// Feed the sin/cos time channels to the encoder.
    #[serde(default = "default_true")]
    pub use_cyclic: bool,
    /// Include the attention block. Without it the encoder is a plain LSTM.
    #[serde(default = "default_true")]
    pub use_attention: bool,
    /// Exponent of the inverse-distance weights.
    #[serde(default = "default_power")]
    pub idw_power: f64,
}

impl AqNetConfig {
    pub fn new(t_in: usize, horizon: usize) -> Self {
        Self {
            hidden_dim: 64,
            n_heads: 4,
            t_in,
            horizon,
            k_neighbors: 20,
            knn_weight_mode: KnnWeightMode::InverseDistance,
            use_cyclic: true,
            use_attention: true,
            idw_power: 2.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden_dim == 0 || self.n_heads == 0 {
            return Err(Error::invalid("hidden_dim and n_heads must be positive"));
        }
        if self.hidden_dim % self.n_heads != 0 {
            return Err(Error::invalid(format!(
                "hidden_dim {} is not divisible by n_heads {}",
                self.hidden_dim, self.n_heads
            )));
        }
        if self.k_neighbors == 0 {
            return Err(Error::invalid("k_neighbors must be at least 1"));
        }
        if self.t_in == 0 || self.horizon == 0 {
            return Err(Error::invalid("t_in and horizon must be at least 1"));
        }
        if !(self.idw_power.is_finite() && self.idw_power > 0.0) {
            return Err(Error::invalid("idw_power must be positive"));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        WindowBatch::CHANNELS + if self.use_cyclic { TIME_FEATURES } else { 0 }
    }
}

/// Parameters of the full network.
#[derive(Clone, Debug, PartialEq)]
pub struct AqNet<T> {
    pub config: AqNetConfig,
    pub lstm: LstmParams<T>,
    pub mha: Option<MhaParams<T>>,
    /// `[hidden_dim × horizon]`
    pub head_weight: Tensor<T>,
    /// `[horizon]`
    pub head_bias: Tensor<T>,
    /// Log temperature of the feature-similarity weights (learned mode only).
    pub log_tau: Option<Tensor<T>>,
}

/// Tape handles produced by [`AqNet::forward`].
#[derive(Clone, Copy, Debug)]
pub struct ForwardVars {
    /// `[B·N × H]`, row `b·N + n`
    pub visible: Var,
    /// `[B·M × H]`, row `b·M + m`, when the batch has hidden targets
    pub hidden: Option<Var>,
    /// `[B·N × hidden_dim]`
    pub pooled: Var,
    pub attention: Option<Var>,
}

/// Inference outputs in normalized units.
#[derive(Clone, Debug)]
pub struct Prediction {
    /// `[B × H × N]`
    pub visible: Tensor<f64>,
    /// `[B × H × M]`
    pub hidden: Tensor<f64>,
    pub features: Vec<StationFeatures>,
    /// `[B·N × heads × T × T]`, sequence `b·N + n`
    pub attention: Option<Vec<f64>>,
}

impl<T: Scalar> AqNet<T> {
    pub fn init(config: AqNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.hidden_dim;
        let lstm = LstmParams::init(config.input_dim(), d, &mut rng);
        let mha = config
            .use_attention
            .then(|| MhaParams::init(config.n_heads, d, &mut rng));
        let head_weight = Tensor::uniform(&[d, config.horizon], 1.0 / (d as f64).sqrt(), &mut rng);
        Ok(Self {
            lstm,
            mha,
            head_weight,
            head_bias: Tensor::zeros(&[config.horizon]),
            log_tau: (config.knn_weight_mode == KnnWeightMode::LearnedFeature)
                .then(|| Tensor::zeros(&[1])),
            config,
        })
    }

    pub fn zeros(config: AqNetConfig) -> Result<Self> {
        config.validate()?;
        let d = config.hidden_dim;
        Ok(Self {
            lstm: LstmParams::zeros(config.input_dim(), d),
            mha: config
                .use_attention
                .then(|| MhaParams::zeros(config.n_heads, d)),
            head_weight: Tensor::zeros(&[d, config.horizon]),
            head_bias: Tensor::zeros(&[config.horizon]),
            log_tau: (config.knn_weight_mode == KnnWeightMode::LearnedFeature)
                .then(|| Tensor::zeros(&[1])),
            config,
        })
    }

    pub fn cast<U: Scalar>(&self) -> AqNet<U> {
        AqNet {
            config: self.config.clone(),
            lstm: LstmParams {
                input_dim: self.lstm.input_dim,
                hidden_dim: self.lstm.hidden_dim,
                w_ih: self.lstm.w_ih.cast(),
                w_hh: self.lstm.w_hh.cast(),
                bias: self.lstm.bias.cast(),
            },
            mha: self.mha.as_ref().map(|m| MhaParams {
                n_heads: m.n_heads,
                d_model: m.d_model,
                w_q: m.w_q.cast(),
                w_k: m.w_k.cast(),
                w_v: m.w_v.cast(),
                w_o: m.w_o.cast(),
            }),
            head_weight: self.head_weight.cast(),
            head_bias: self.head_bias.cast(),
            log_tau: self.log_tau.as_ref().map(Tensor::cast),
        }
    }

    /// Checks every tensor against the configuration.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        self.lstm.validate()?;
        let c = &self.config;
        if self.lstm.input_dim != c.input_dim() || self.lstm.hidden_dim != c.hidden_dim {
            return Err(Error::shape("lstm dimensions disagree with the configuration"));
        }
        match (&self.mha, c.use_attention) {
            (Some(m), true) => {
                m.validate()?;
                if m.n_heads != c.n_heads || m.d_model != c.hidden_dim {
                    return Err(Error::shape("attention dimensions disagree with the configuration"));
                }
            }
            (None, false) => {}
            _ => return Err(Error::shape("attention block presence disagrees with use_attention")),
        }
        if self.head_weight.shape() != [c.hidden_dim, c.horizon] || self.head_bias.len() != c.horizon
        {
            return Err(Error::shape("prediction head disagrees with the configuration"));
        }
        let learned = c.knn_weight_mode == KnnWeightMode::LearnedFeature;
        if learned != self.log_tau.as_ref().is_some_and(|t| t.len() == 1) {
            return Err(Error::shape("temperature parameter disagrees with knn_weight_mode"));
        }
        Ok(())
    }

    pub fn tau(&self) -> f64 {
        self.log_tau
            .as_ref()
            .map_or(1.0, |t| t.data()[0].to_f64().unwrap_or(0.0).exp())
    }

    fn check_batch(&self, batch: &WindowBatch) -> Result<()> {
        if batch.t_in != self.config.t_in || batch.horizon != self.config.horizon {
            return Err(Error::shape(format!(
                "batch has t_in={} horizon={}, model expects t_in={} horizon={}",
                batch.t_in, batch.horizon, self.config.t_in, self.config.horizon
            )));
        }
        if batch.batch == 0 || batch.n_inputs == 0 {
            return Err(Error::shape("empty batch"));
        }
        Ok(())
    }

    /// Encoder input `[T·B·N × C]`, row `t·(B·N) + b·N + n`.
    fn input_matrix(&self, batch: &WindowBatch) -> Tensor<T> {
        let (b, t_in, n) = (batch.batch, batch.t_in, batch.n_inputs);
        let c = self.config.input_dim();
        let seqs = b * n;
        let mut x = vec![T::zero(); t_in * seqs * c];
        for t in 0..t_in {
            for bi in 0..b {
                for ni in 0..n {
                    let row = &mut x[((t * seqs) + bi * n + ni) * c..][..c];
                    for (ch, slot) in row.iter_mut().enumerate().take(WindowBatch::CHANNELS) {
                        *slot = T::from_f64(batch.input(bi, ch, t, ni)).unwrap_or(T::nan());
                    }
                    if self.config.use_cyclic {
                        for k in 0..TIME_FEATURES {
                            row[WindowBatch::CHANNELS + k] =
                                T::from_f64(batch.time_feature(bi, k, t)).unwrap_or(T::nan());
                        }
                    }
                }
            }
        }
        Tensor {
            shape: vec![t_in * seqs, c],
            data: x,
        }
    }

    fn hidden_neighbors(&self, batch: &WindowBatch) -> Result<Option<Neighbors>> {
        if batch.n_hidden() == 0 {
            return Ok(None);
        }
        let q = &batch.target_coords[batch.n_inputs..];
        if q.iter().any(|c| !(c[0].is_finite() && c[1].is_finite())) {
            return Err(Error::invalid("hidden station coordinate is not finite"));
        }
        knn_query(&batch.station_coords, q, self.config.k_neighbors).map(Some)
    }

    /// Records the network on `g`.
    pub fn forward(&self, g: &mut Graph<T>, batch: &WindowBatch) -> Result<ForwardVars> {
        self.check_batch(batch)?;
        let (b, n, t_in) = (batch.batch, batch.n_inputs, batch.t_in);
        let seqs = b * n;
        let x = g.constant(self.input_matrix(batch));
        let lstm = self.lstm.bind(g, "lstm");
        let z = lstm.forward(g, x, t_in)?;
        let (z, attention) = match &self.mha {
            Some(m) => {
                let out = m.bind(g, "mha").forward(g, z, seqs)?;
                (out.output, Some(out.attention))
            }
            None => (z, None),
        };
        let pooled = g.block_mean(z, t_in)?;
        let w = g.param("head.weight", &self.head_weight);
        let bias = g.param("head.bias", &self.head_bias);
        let lin = g.matmul(pooled, w)?;
        let visible = g.add_bias(lin, bias)?;

        let hidden = match self.hidden_neighbors(batch)? {
            None => None,
            Some(nb) => Some(self.interpolate_graph(g, &nb, b, n, pooled, visible)?),
        };
        Ok(ForwardVars {
            visible,
            hidden,
            pooled,
            attention,
        })
    }

    fn interpolate_graph(
        &self,
        g: &mut Graph<T>,
        nb: &Neighbors,
        b: usize,
        n: usize,
        pooled: Var,
        visible: Var,
    ) -> Result<Var> {
        let m = nb.queries();
        let k = nb.k;
        let power = self.config.idw_power;
        let mut idw = Vec::with_capacity(b * m);
        for bi in 0..b {
            for q in 0..m {
                let (idx, dist) = nb.row(q);
                let w = idw_weights(dist, power);
                idw.push(
                    idx.iter()
                        .zip(w)
                        .map(|(&i, w)| (bi * n + i, T::from_f64(w).unwrap_or(T::nan())))
                        .collect::<Vec<_>>(),
                );
            }
        }
        match (&self.log_tau, self.config.knn_weight_mode) {
            (None, _) | (_, KnnWeightMode::InverseDistance) => g.mix(visible, idw),
            (Some(log_tau), KnnWeightMode::LearnedFeature) => {
                let rows: Vec<usize> = idw.iter().flatten().map(|&(r, _)| r).collect();
                let fq = g.mix(pooled, idw)?;
                let rep: Vec<usize> = (0..b * m).flat_map(|i| std::iter::repeat_n(i, k)).collect();
                let fq_rep = g.gather_rows(fq, rep)?;
                let fi = g.gather_rows(pooled, rows.clone())?;
                let diff = g.sub(fi, fq_rep)?;
                let sq = g.mul(diff, diff)?;
                let dist = g.row_sum(sq);
                let dist = g.reshape(dist, vec![b * m, k])?;
                let lt = g.param("knn.log_tau", log_tau);
                let neg = g.scale(lt, -T::one());
                let inv_tau = g.exp(neg);
                let scaled = g.scale_by(dist, inv_tau)?;
                let logits = g.scale(scaled, -T::one());
                let w = g.softmax_rows(logits);
                let vals = g.gather_rows(visible, rows)?;
                g.mix_rows(w, vals)
            }
        }
    }

    /// Visible plus hidden masked MSE; the hidden term is skipped when the
    /// batch has no valid hidden targets.
    pub fn loss(&self, g: &mut Graph<T>, batch: &WindowBatch) -> Result<Var> {
        let fw = self.forward(g, batch)?;
        let (b, h, n) = (batch.batch, batch.horizon, batch.n_inputs);
        let (tv, mv) = targets_by_row(batch, 0..n);
        let vis = g.masked_mse(fw.visible, cast_vec(&tv), mv)?;
        match fw.hidden {
            Some(hid) => {
                let (th, mh) = targets_by_row(batch, n..batch.n_targets);
                if !mh.iter().any(|&m| m) {
                    return Ok(vis);
                }
                debug_assert_eq!(th.len(), b * h * batch.n_hidden());
                let hl = g.masked_mse(hid, cast_vec(&th), mh)?;
                g.add(vis, hl)
            }
            None => Ok(vis),
        }
    }

    /// Runs the network without keeping the tape.
    pub fn predict(&self, batch: &WindowBatch) -> Result<Prediction> {
        let mut g = Graph::new();
        let fw = self.forward(&mut g, batch)?;
        let (b, h, n) = (batch.batch, batch.horizon, batch.n_inputs);
        let m = batch.n_hidden();
        let visible = unflatten(g.value(fw.visible), b, n, h);
        let hidden = match fw.hidden {
            Some(v) => unflatten(g.value(v), b, m, h),
            None => Tensor::zeros(&[b, h, 0]),
        };
        let pooled = g.value(fw.pooled).to_f64_vec();
        let d = self.config.hidden_dim;
        let features = (0..b)
            .map(|bi| StationFeatures {
                features: Tensor {
                    shape: vec![n, d],
                    data: pooled[bi * n * d..(bi + 1) * n * d].to_vec(),
                },
                coords: batch.station_coords.clone(),
            })
            .collect();
        let attention = fw
            .attention
            .and_then(|a| g.attention_probs(a))
            .map(|(p, _, _)| p.iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect());
        Ok(Prediction {
            visible,
            hidden,
            features,
            attention,
        })
    }

    /// Pooled station features for each batch element.
    pub fn encode(&self, batch: &WindowBatch) -> Result<Vec<StationFeatures>> {
        Ok(self.predict(batch)?.features)
    }

    /// `[B × H × N]` normalized predictions at the visible stations.
    pub fn predict_visible(&self, batch: &WindowBatch) -> Result<Tensor<f64>> {
        Ok(self.predict(batch)?.visible)
    }

    /// `[B × H × M]` normalized predictions at the hidden stations.
    pub fn predict_hidden(&self, batch: &WindowBatch) -> Result<Tensor<f64>> {
        Ok(self.predict(batch)?.hidden)
    }

    /// `[B × H × Q]` interpolated predictions at arbitrary coordinates.
    pub fn predict_at(
        &self,
        batch: &WindowBatch,
        query: &[[f64; 2]],
        k: usize,
    ) -> Result<Tensor<f64>> {
        let p = self.predict(batch)?;
        let (b, h, n) = (batch.batch, batch.horizon, batch.n_inputs);
        let q = query.len();
        let mut out = Vec::with_capacity(b * h * q);
        for bi in 0..b {
            let preds = Tensor {
                shape: vec![h, n],
                data: p.visible.data()[bi * h * n..(bi + 1) * h * n].to_vec(),
            };
            let y = knn_interpolate(
                &p.features[bi],
                &preds,
                query,
                k,
                self.config.knn_weight_mode,
                self.config.idw_power,
                self.tau(),
            )?;
            out.extend_from_slice(y.data());
        }
        Tensor::new(vec![b, h, q], out)
    }
}

impl<T: Scalar> NamedParams<T> for AqNet<T> {
    fn named(&self) -> Vec<(String, &Tensor<T>)> {
        let mut v: Vec<(String, &Tensor<T>)> = self
            .lstm
            .named()
            .into_iter()
            .map(|(k, t)| (format!("lstm.{k}"), t))
            .collect();
        if let Some(m) = &self.mha {
            v.extend(m.named().into_iter().map(|(k, t)| (format!("mha.{k}"), t)));
        }
        v.push(("head.weight".into(), &self.head_weight));
        v.push(("head.bias".into(), &self.head_bias));
        if let Some(t) = &self.log_tau {
            v.push(("knn.log_tau".into(), t));
        }
        v
    }

    fn named_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut v: Vec<(String, &mut Tensor<T>)> = self
            .lstm
            .named_mut()
            .into_iter()
            .map(|(k, t)| (format!("lstm.{k}"), t))
            .collect();
        if let Some(m) = &mut self.mha {
            v.extend(m.named_mut().into_iter().map(|(k, t)| (format!("mha.{k}"), t)));
        }
        v.push(("head.weight".into(), &mut self.head_weight));
        v.push(("head.bias".into(), &mut self.head_bias));
        if let Some(t) = &mut self.log_tau {
            v.push(("knn.log_tau".into(), t));
        }
        v
    }
}

/// Targets of the given target-station columns rearranged to `[B·S × H]`
/// (row `b·S + s`), matching the network's output rows.
fn targets_by_row(batch: &WindowBatch, cols: std::ops::Range<usize>) -> (Vec<f64>, Vec<bool>) {
    let s = cols.len();
    let h = batch.horizon;
    let mut t = vec![0.0; batch.batch * s * h];
    let mut m = vec![false; batch.batch * s * h];
    for b in 0..batch.batch {
        for (si, j) in cols.clone().enumerate() {
            for hh in 0..h {
                let i = (b * s + si) * h + hh;
                t[i] = batch.target(b, hh, j);
                m[i] = batch.target_valid(b, hh, j);
            }
        }
    }
    (t, m)
}

fn cast_vec<T: Scalar>(v: &[f64]) -> Vec<T> {
    v.iter().map(|&x| T::from_f64(x).unwrap_or(T::nan())).collect()
}

/// `[B·S × H]` rows to `[B × H × S]`.
fn unflatten<T: Scalar>(t: &Tensor<T>, b: usize, s: usize, h: usize) -> Tensor<f64> {
    let src = t.to_f64_vec();
    let mut out = vec![0.0; b * h * s];
    for bi in 0..b {
        for si in 0..s {
            for hh in 0..h {
                out[(bi * h + hh) * s + si] = src[(bi * s + si) * h + hh];
            }
        }
    }
    Tensor {
        shape: vec![b, h, s],
        data: out,
    }
}
