//! LSTM and multi-head self-attention layers.
//!
//! Sequences are stored time-major: a `[T × B × D]` tensor is viewed as a
//! `[T·B × D]` matrix where row `t·B + b` is step `t` of sequence `b`.

use rand::Rng;

use super::graph::{Graph, Var};
use super::tensor::{Scalar, Tensor};
use crate::{Error, Result};

/// Enumerates parameters by stable name for optimizers and checkpoints.
pub trait NamedParams<T> {
    fn named(&self) -> Vec<(String, &Tensor<T>)>;
    fn named_mut(&mut self) -> Vec<(String, &mut Tensor<T>)>;
}

fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Single-layer LSTM. Gate columns are ordered input, forget, cell, output.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmParams<T> {
    pub input_dim: usize,
    pub hidden_dim: usize,
    /// `[input_dim × 4·hidden_dim]`
    pub w_ih: Tensor<T>,
    /// `[hidden_dim × 4·hidden_dim]`
    pub w_hh: Tensor<T>,
    /// `[4·hidden_dim]`
    pub bias: Tensor<T>,
}

impl<T: Scalar> LstmParams<T> {
    pub fn zeros(input_dim: usize, hidden_dim: usize) -> Self {
        Self {
            input_dim,
            hidden_dim,
            w_ih: Tensor::zeros(&[input_dim, 4 * hidden_dim]),
            w_hh: Tensor::zeros(&[hidden_dim, 4 * hidden_dim]),
            bias: Tensor::zeros(&[4 * hidden_dim]),
        }
    }

    /// Uniform `±1/√fan_in` weights, zero biases except the forget gate at +1.
    pub fn init<R: Rng + ?Sized>(input_dim: usize, hidden_dim: usize, rng: &mut R) -> Self {
        let w_ih = Tensor::uniform(
            &[input_dim, 4 * hidden_dim],
            1.0 / (input_dim as f64).sqrt(),
            rng,
        );
        let w_hh = Tensor::uniform(
            &[hidden_dim, 4 * hidden_dim],
            1.0 / (hidden_dim as f64).sqrt(),
            rng,
        );
        let mut bias = Tensor::zeros(&[4 * hidden_dim]);
        for v in &mut bias.data_mut()[hidden_dim..2 * hidden_dim] {
            *v = T::one();
        }
        Self {
            input_dim,
            hidden_dim,
            w_ih,
            w_hh,
            bias,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let h4 = 4 * self.hidden_dim;
        if self.hidden_dim == 0 || self.input_dim == 0 {
            return Err(Error::shape("lstm dimensions must be positive"));
        }
        if self.w_ih.shape() != [self.input_dim, h4]
            || self.w_hh.shape() != [self.hidden_dim, h4]
            || self.bias.len() != h4
        {
            return Err(Error::shape(format!(
                "lstm parameters inconsistent with input_dim={} hidden_dim={}",
                self.input_dim, self.hidden_dim
            )));
        }
        Ok(())
    }

    pub fn bind(&self, g: &mut Graph<T>, prefix: &str) -> LstmVars {
        LstmVars {
            w_ih: g.param(&join(prefix, "w_ih"), &self.w_ih),
            w_hh: g.param(&join(prefix, "w_hh"), &self.w_hh),
            bias: g.param(&join(prefix, "bias"), &self.bias),
            hidden: self.hidden_dim,
        }
    }
}

impl<T: Scalar> NamedParams<T> for LstmParams<T> {
    fn named(&self) -> Vec<(String, &Tensor<T>)> {
        vec![
            ("w_ih".into(), &self.w_ih),
            ("w_hh".into(), &self.w_hh),
            ("bias".into(), &self.bias),
        ]
    }

    fn named_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        vec![
            ("w_ih".into(), &mut self.w_ih),
            ("w_hh".into(), &mut self.w_hh),
            ("bias".into(), &mut self.bias),
        ]
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LstmVars {
    w_ih: Var,
    w_hh: Var,
    bias: Var,
    hidden: usize,
}

impl LstmVars {
    /// Runs the recurrence over `x` (`[steps·seqs × input_dim]`, time-major)
    /// from zero initial state and returns all hidden states
    /// (`[steps·seqs × hidden_dim]`).
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, x: Var, steps: usize) -> Result<Var> {
        let rows = g.value(x).rows();
        if steps == 0 || rows % steps != 0 {
            return Err(Error::shape(format!("{rows} rows in {steps} steps")));
        }
        let seqs = rows / steps;
        let h = self.hidden;
        let xw = g.matmul(x, self.w_ih)?;
        let mut outputs = Vec::with_capacity(steps);
        let mut state: Option<(Var, Var)> = None;
        for t in 0..steps {
            let mut pre = g.slice_rows(xw, t * seqs, seqs)?;
            if let Some((h_prev, _)) = state {
                let rec = g.matmul(h_prev, self.w_hh)?;
                pre = g.add(pre, rec)?;
            }
            let pre = g.add_bias(pre, self.bias)?;
            let i_pre = g.slice_cols(pre, 0, h)?;
            let f_pre = g.slice_cols(pre, h, h)?;
            let c_pre = g.slice_cols(pre, 2 * h, h)?;
            let o_pre = g.slice_cols(pre, 3 * h, h)?;
            let i_gate = g.sigmoid(i_pre);
            let cand = g.tanh(c_pre);
            let o_gate = g.sigmoid(o_pre);
            let mut c = g.mul(i_gate, cand)?;
            if let Some((_, c_prev)) = state {
                let f_gate = g.sigmoid(f_pre);
                let keep = g.mul(f_gate, c_prev)?;
                c = g.add(keep, c)?;
            }
            let c_act = g.tanh(c);
            let h_t = g.mul(o_gate, c_act)?;
            outputs.push(h_t);
            state = Some((h_t, c));
        }
        g.concat_rows(&outputs)
    }
}

/// Multi-head self-attention with bias-free projections and a residual
/// connection: `out = concat_h(softmax(Q_h K_hᵀ/√d_k) V_h) · W_o + Z`.
#[derive(Clone, Debug, PartialEq)]
pub struct MhaParams<T> {
    pub n_heads: usize,
    pub d_model: usize,
    pub w_q: Tensor<T>,
    pub w_k: Tensor<T>,
    pub w_v: Tensor<T>,
    pub w_o: Tensor<T>,
}

impl<T: Scalar> MhaParams<T> {
    pub fn zeros(n_heads: usize, d_model: usize) -> Self {
        let z = Tensor::zeros(&[d_model, d_model]);
        Self {
            n_heads,
            d_model,
            w_q: z.clone(),
            w_k: z.clone(),
            w_v: z.clone(),
            w_o: z,
        }
    }

    pub fn init<R: Rng + ?Sized>(n_heads: usize, d_model: usize, rng: &mut R) -> Self {
        let b = 1.0 / (d_model as f64).sqrt();
        let shape = [d_model, d_model];
        Self {
            n_heads,
            d_model,
            w_q: Tensor::uniform(&shape, b, rng),
            w_k: Tensor::uniform(&shape, b, rng),
            w_v: Tensor::uniform(&shape, b, rng),
            w_o: Tensor::uniform(&shape, b, rng),
        }
    }

    pub fn d_k(&self) -> usize {
        self.d_model / self.n_heads.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 || self.d_k() == 0 {
            return Err(Error::shape(format!(
                "{} heads do not evenly divide d_model={}",
                self.n_heads, self.d_model
            )));
        }
        let shape = [self.d_model, self.d_model];
        for (name, t) in self.named() {
            if t.shape() != shape {
                return Err(Error::shape(format!(
                    "mha {name} has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn bind(&self, g: &mut Graph<T>, prefix: &str) -> MhaVars {
        MhaVars {
            w_q: g.param(&join(prefix, "w_q"), &self.w_q),
            w_k: g.param(&join(prefix, "w_k"), &self.w_k),
            w_v: g.param(&join(prefix, "w_v"), &self.w_v),
            w_o: g.param(&join(prefix, "w_o"), &self.w_o),
            heads: self.n_heads,
        }
    }
}

impl<T: Scalar> NamedParams<T> for MhaParams<T> {
    fn named(&self) -> Vec<(String, &Tensor<T>)> {
        vec![
            ("w_q".into(), &self.w_q),
            ("w_k".into(), &self.w_k),
            ("w_v".into(), &self.w_v),
            ("w_o".into(), &self.w_o),
        ]
    }

    fn named_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        vec![
            ("w_q".into(), &mut self.w_q),
            ("w_k".into(), &mut self.w_k),
            ("w_v".into(), &mut self.w_v),
            ("w_o".into(), &mut self.w_o),
        ]
    }
}

#[derive(Clone, Copy, Debug)]
pub struct MhaVars {
    w_q: Var,
    w_k: Var,
    w_v: Var,
    w_o: Var,
    heads: usize,
}

pub struct MhaOutput {
    pub output: Var,
    /// The attention node; its probabilities are readable through
    /// [`Graph::attention_probs`].
    pub attention: Var,
}

impl MhaVars {
    /// Self-attention over the time axis of `z` (`[steps·seqs × d_model]`,
    /// time-major). No causal mask.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, z: Var, seqs: usize) -> Result<MhaOutput> {
        let q = g.matmul(z, self.w_q)?;
        let k = g.matmul(z, self.w_k)?;
        let v = g.matmul(z, self.w_v)?;
        let attention = g.attention(q, k, v, self.heads, seqs)?;
        let projected = g.matmul(attention, self.w_o)?;
        let output = g.add(projected, z)?;
        Ok(MhaOutput { output, attention })
    }
}

fn seq_dims<T: Scalar>(x: &Tensor<T>, what: &str) -> Result<(usize, usize, usize)> {
    match *x.shape() {
        [t, b, d] => Ok((t, b, d)),
        _ => Err(Error::shape(format!(
            "{what} expects a [T × B × D] tensor, got {:?}",
            x.shape()
        ))),
    }
}

/// Runs the LSTM over `x` (`[T × B × input_dim]`) and returns the hidden
/// states `[T × B × hidden_dim]`.
pub fn lstm_forward<T: Scalar>(params: &LstmParams<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    params.validate()?;
    let (t, b, d) = seq_dims(x, "lstm_forward")?;
    if d != params.input_dim {
        return Err(Error::shape(format!(
            "lstm input has {d} features, parameters expect {}",
            params.input_dim
        )));
    }
    let mut g = Graph::new();
    let vars = params.bind(&mut g, "lstm");
    let xv = g.constant(x.clone().reshape(vec![t * b, d])?);
    let out = vars.forward(&mut g, xv, t)?;
    g.value(out)
        .clone()
        .reshape(vec![t, b, params.hidden_dim])
}

/// Self-attention with residual over `z` (`[T × B × d_model]`).
pub fn mha_forward<T: Scalar>(params: &MhaParams<T>, z: &Tensor<T>) -> Result<Tensor<T>> {
    let (g, out, _) = run_mha(params, z)?;
    let (t, b, d) = seq_dims(z, "mha_forward")?;
    g.value(out).clone().reshape(vec![t, b, d])
}

/// Per-sequence, per-head attention matrices, `[B × n_heads × T × T]`. These
/// are the same probabilities [`mha_forward`] applies.
pub fn attention_weights<T: Scalar>(params: &MhaParams<T>, z: &Tensor<T>) -> Result<Tensor<T>> {
    let (g, _, att) = run_mha(params, z)?;
    let (t, b, _) = seq_dims(z, "attention_weights")?;
    let (probs, heads, _) = g
        .attention_probs(att)
        .ok_or_else(|| Error::shape("attention node missing"))?;
    Tensor::new(vec![b, heads, t, t], probs.to_vec())
}

fn run_mha<T: Scalar>(params: &MhaParams<T>, z: &Tensor<T>) -> Result<(Graph<T>, Var, Var)> {
    params.validate()?;
    let (t, b, d) = seq_dims(z, "mha")?;
    if d != params.d_model {
        return Err(Error::shape(format!(
            "mha input has {d} features, parameters expect {}",
            params.d_model
        )));
    }
    let mut g = Graph::new();
    let vars = params.bind(&mut g, "mha");
    let zv = g.constant(z.clone().reshape(vec![t * b, d])?);
    let out = vars.forward(&mut g, zv, b)?;
    Ok((g, out.output, out.attention))
}

/// Mean squared error over masked entries.
pub fn mse_loss<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>, mask: &[bool]) -> Result<T> {
    if pred.shape() != target.shape() {
        return Err(Error::shape(format!(
            "mse: prediction {:?} vs target {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    let mut g = Graph::new();
    let p = g.constant(pred.clone());
    let l = g.masked_mse(p, target.data().to_vec(), mask.to_vec())?;
    Ok(g.value(l).data()[0])
}
