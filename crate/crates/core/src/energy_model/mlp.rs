use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{time_embedding, EnergyField, ScoreField, TIME_EMBED_DIM};
use crate::error::{ensure_finite, Error, Result};
use crate::nd::{gemm, vmath, ParamVars, ParamVector, Tensor, Var};

/// Smooth activations; the score of a conservative net needs a second
/// derivative of the activation for its parameter gradient.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Activation {
    #[default]
    Softplus,
    /// Gaussian-error linear unit, tanh approximation.
    Gelu,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_K: f64 = 0.044_715;

impl Activation {
    /// Value, first and second derivative for every element of `z`.
    fn layer(self, z: &[f64], a: &mut [f64], d1: &mut [f64], d2: &mut [f64]) {
        match self {
            Activation::Softplus => vmath::softplus_layer(z, a, d1, d2),
            Activation::Gelu => vmath::gelu_layer(z, a, d1, d2),
        }
    }

    #[cfg(test)]
    fn eval(self, z: f64) -> (f64, f64, f64) {
        let (mut a, mut d1, mut d2) = ([0.0], [0.0], [0.0]);
        self.layer(&[z], &mut a, &mut d1, &mut d2);
        (a[0], d1[0], d2[0])
    }

    fn on_tape<'t>(self, z: Var<'t>) -> Var<'t> {
        match self {
            Activation::Softplus => z.softplus(),
            Activation::Gelu => {
                let u = (z + z * z * z * GELU_K) * GELU_C;
                z * 0.5 * (u.tanh() + 1.0)
            }
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Softplus => "softplus",
            Activation::Gelu => "gelu",
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Activation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "softplus" => Ok(Activation::Softplus),
            "gelu" => Ok(Activation::Gelu),
            other => Err(Error::Config(format!("unknown activation {other:?}"))),
        }
    }
}

/// Architecture of one network: input `[x, embed(t)]`, hidden layers, and
/// either a scalar energy head (conservative) or a `dim`-wide score head.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MlpSpec {
    pub dim: usize,
    pub hidden: Vec<usize>,
    pub conservative: bool,
    pub activation: Activation,
}

impl MlpSpec {
    pub fn new(dim: usize, hidden: Vec<usize>, conservative: bool) -> Self {
        MlpSpec {
            dim,
            hidden,
            conservative,
            activation: Activation::default(),
        }
    }

    pub fn input_width(&self) -> usize {
        self.dim + TIME_EMBED_DIM
    }

    pub fn output_width(&self) -> usize {
        if self.conservative {
            1
        } else {
            self.dim
        }
    }

    /// `(fan_out, fan_in)` of every affine layer, head last.
    fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let mut shapes = Vec::with_capacity(self.hidden.len() + 1);
        let mut fan_in = self.input_width();
        for &h in &self.hidden {
            shapes.push((h, fan_in));
            fan_in = h;
        }
        shapes.push((self.output_width(), fan_in));
        shapes
    }

    pub fn param_count(&self) -> usize {
        self.layer_shapes().iter().map(|(o, i)| o * i + o).sum()
    }

    fn segment_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for l in 0..self.hidden.len() {
            names.push(format!("layer{l}.weight"));
            names.push(format!("layer{l}.bias"));
        }
        names.push("head.weight".into());
        names.push("head.bias".into());
        names
    }

    /// Zero parameters in this architecture's layout.
    pub fn zero_params(&self) -> ParamVector {
        let names = self.segment_names();
        let mut segs = Vec::new();
        for (k, (o, i)) in self.layer_shapes().into_iter().enumerate() {
            segs.push((names[2 * k].clone(), Tensor::zeros(vec![o, i])));
            segs.push((names[2 * k + 1].clone(), Tensor::zeros(vec![o])));
        }
        ParamVector::new(segs).expect("generated names are unique")
    }
}

/// Multilayer perceptron over `[x, embed(t)]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    spec: MlpSpec,
    params: ParamVector,
}

/// Intermediate values of a batched evaluation, reused for gradients.
pub struct Forward {
    rows: usize,
    /// Layer inputs: `inputs[0]` is `[x, embed(t)]`, `inputs[l]` the output of hidden layer `l-1`.
    inputs: Vec<Vec<f64>>,
    /// Per hidden layer: first and second activation derivative at the pre-activation.
    d1: Vec<Vec<f64>>,
    d2: Vec<Vec<f64>>,
    /// Conservative nets only: backward signals `G_l` (dE/d input of layer l)
    /// and `Delta_l = G_{l+1} * act'(Z_l)` per hidden layer.
    back: Vec<Vec<f64>>,
    delta: Vec<Vec<f64>>,
    /// Energies `[rows]` or direct scores `[rows, dim]`.
    pub output: Vec<f64>,
}

impl Forward {
    /// Scores of the evaluated rows: the input-gradient restricted to the
    /// point coordinates for conservative nets, the raw output otherwise.
    pub fn score(&self, dim: usize) -> Tensor {
        let Some(g0) = self.back.first() else {
            return Tensor::from_vec_unchecked(vec![self.rows, dim], self.output.clone());
        };
        let w = dim + TIME_EMBED_DIM;
        let mut out = Vec::with_capacity(self.rows * dim);
        for r in 0..self.rows {
            out.extend_from_slice(&g0[r * w..r * w + dim]);
        }
        Tensor::from_vec_unchecked(vec![self.rows, dim], out)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }
}

impl Mlp {
    /// Gaussian weights with variance `1 / fan_in`, zero biases.
    pub fn new(spec: MlpSpec, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = spec.zero_params();
        let shapes = spec.layer_shapes();
        for (k, (_, fan_in)) in shapes.iter().enumerate() {
            let scale = 1.0 / (*fan_in as f64).sqrt();
            for w in params.segment_at_mut(2 * k).data_mut() {
                let z: f64 = rng.sample(StandardNormal);
                *w = scale * z;
            }
        }
        Mlp { spec, params }
    }

    pub fn from_params(spec: MlpSpec, params: ParamVector) -> Result<Self> {
        if !params.same_layout(&spec.zero_params()) {
            return Err(Error::Shape(
                "parameter segments do not match the network architecture".into(),
            ));
        }
        params.check_finite("network parameters")?;
        Ok(Mlp { spec, params })
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamVector {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamVector {
        &mut self.params
    }

    pub fn count_params(&self) -> usize {
        self.params.total_count()
    }

    pub fn is_conservative(&self) -> bool {
        self.spec.conservative
    }

    fn n_hidden(&self) -> usize {
        self.spec.hidden.len()
    }

    fn weight(&self, k: usize) -> &[f64] {
        self.params.segment_at(2 * k).data()
    }

    fn bias(&self, k: usize) -> &[f64] {
        self.params.segment_at(2 * k + 1).data()
    }

    /// Evaluates the network on rows of `x` at per-row times. For conservative
    /// nets the input-gradient pass runs too.
    pub fn forward(&self, x: &Tensor, t: &[f64]) -> Result<Forward> {
        let dim = self.spec.dim;
        if x.cols() != dim || x.rows() != t.len() {
            return Err(Error::Shape(format!(
                "network expects [n, {dim}] points with n times, got {:?} and {} times",
                x.shape(),
                t.len()
            )));
        }
        let rows = x.rows();
        let width = self.spec.input_width();
        let mut input = Vec::with_capacity(rows * width);
        for (r, &ti) in x.iter_rows().zip(t) {
            input.extend_from_slice(r);
            input.extend_from_slice(&time_embedding(ti));
        }
        let act = self.spec.activation;
        let shapes = self.spec.layer_shapes();
        let nh = self.n_hidden();
        let mut inputs = vec![input];
        let mut d1s = Vec::with_capacity(nh);
        let mut d2s = Vec::with_capacity(nh);
        for (k, &(fan_out, fan_in)) in shapes.iter().enumerate().take(nh) {
            let z = affine(rows, fan_in, fan_out, &inputs[k], self.weight(k), self.bias(k));
            let mut a = vec![0.0; z.len()];
            let mut d1 = vec![0.0; z.len()];
            let mut d2 = vec![0.0; z.len()];
            act.layer(&z, &mut a, &mut d1, &mut d2);
            d1s.push(d1);
            d2s.push(d2);
            inputs.push(a);
        }
        let (out_w, last_in) = shapes[nh];
        let output = affine(rows, last_in, out_w, &inputs[nh], self.weight(nh), self.bias(nh));
        ensure_finite(&output, "network output")?;

        let mut back = Vec::new();
        let mut delta = Vec::new();
        if self.spec.conservative {
            // G at the head input is the head weight row, broadcast over rows.
            let head_w = self.weight(nh);
            let mut g: Vec<f64> = (0..rows).flat_map(|_| head_w.iter().copied()).collect();
            let mut backs = vec![Vec::new(); nh + 1];
            let mut deltas = vec![Vec::new(); nh];
            for k in (0..nh).rev() {
                let (fan_out, fan_in) = shapes[k];
                let dl: Vec<f64> = g.iter().zip(&d1s[k]).map(|(a, b)| a * b).collect();
                let mut g_prev = vec![0.0; rows * fan_in];
                gemm(rows, fan_out, fan_in, 1.0, &dl, false, self.weight(k), false, 0.0, &mut g_prev);
                backs[k + 1] = g;
                deltas[k] = dl;
                g = g_prev;
            }
            backs[0] = g;
            ensure_finite(&backs[0], "network input-gradient")?;
            back = backs;
            delta = deltas;
        }
        Ok(Forward {
            rows,
            inputs,
            d1: d1s,
            d2: d2s,
            back,
            delta,
            output,
        })
    }

    /// Gradient with respect to all parameters of
    /// `sum_r c_energy[r] E_r + sum_r <c_score[r], s_r>`, where `s` is the
    /// score of `fwd` (input-gradient for conservative nets, raw output for
    /// direct ones). `c_energy` requires a conservative net.
    pub fn param_grad(
        &self,
        fwd: &Forward,
        c_energy: Option<&[f64]>,
        c_score: Option<&Tensor>,
    ) -> Result<ParamVector> {
        let rows = fwd.rows;
        let dim = self.spec.dim;
        let nh = self.n_hidden();
        let shapes = self.spec.layer_shapes();
        if let Some(c) = c_energy {
            if !self.spec.conservative {
                return Err(Error::Contract("direct-score network has no energy".into()));
            }
            if c.len() != rows {
                return Err(Error::Shape("energy cotangent length".into()));
            }
        }
        if let Some(c) = c_score {
            if c.rows() != rows || c.cols() != dim {
                return Err(Error::Shape("score cotangent shape".into()));
            }
        }
        let mut grad = self.spec.zero_params();
        // Adjoint of each hidden pre-activation, accumulated from both passes.
        let mut zbar: Vec<Vec<f64>> = shapes[..nh].iter().map(|(o, _)| vec![0.0; rows * o]).collect();
        let mut hbar_last = vec![0.0; rows * shapes[nh].1];

        if self.spec.conservative {
            if let Some(cs) = c_score {
                let width = self.spec.input_width();
                let mut gbar = vec![0.0; rows * width];
                for r in 0..rows {
                    gbar[r * width..r * width + dim].copy_from_slice(cs.row(r));
                }
                for k in 0..nh {
                    let (fan_out, fan_in) = shapes[k];
                    // G_k = Delta_k W_k
                    let mut dbar = vec![0.0; rows * fan_out];
                    gemm(rows, fan_in, fan_out, 1.0, &gbar, false, self.weight(k), true, 0.0, &mut dbar);
                    gemm(
                        fan_out,
                        rows,
                        fan_in,
                        1.0,
                        &fwd.delta[k],
                        true,
                        &gbar,
                        false,
                        1.0,
                        grad.segment_at_mut(2 * k).data_mut(),
                    );
                    // Delta_k = G_{k+1} * act'(Z_k)
                    let g_next = &fwd.back[k + 1];
                    let mut gbar_next = vec![0.0; rows * fan_out];
                    for i in 0..dbar.len() {
                        gbar_next[i] = dbar[i] * fwd.d1[k][i];
                        zbar[k][i] += dbar[i] * g_next[i] * fwd.d2[k][i];
                    }
                    gbar = gbar_next;
                }
                // G_L is the broadcast head weight.
                let hw = grad.segment_at_mut(2 * nh).data_mut();
                let n_last = hw.len();
                for r in 0..rows {
                    for j in 0..n_last {
                        hw[j] += gbar[r * n_last + j];
                    }
                }
            }
            if let Some(ce) = c_energy {
                let n_last = shapes[nh].1;
                let head_w = self.weight(nh);
                let last = &fwd.inputs[nh];
                let hw = grad.segment_at_mut(2 * nh).data_mut();
                for r in 0..rows {
                    for j in 0..n_last {
                        hbar_last[r * n_last + j] += ce[r] * head_w[j];
                        hw[j] += ce[r] * last[r * n_last + j];
                    }
                }
                grad.segment_at_mut(2 * nh + 1).data_mut()[0] += ce.iter().sum::<f64>();
            }
        } else if let Some(cs) = c_score {
            let (out_w, n_last) = shapes[nh];
            gemm(rows, out_w, n_last, 1.0, cs.data(), false, self.weight(nh), false, 0.0, &mut hbar_last);
            gemm(
                out_w,
                rows,
                n_last,
                1.0,
                cs.data(),
                true,
                &fwd.inputs[nh],
                false,
                1.0,
                grad.segment_at_mut(2 * nh).data_mut(),
            );
            let hb = grad.segment_at_mut(2 * nh + 1).data_mut();
            for r in 0..rows {
                for j in 0..out_w {
                    hb[j] += cs.row(r)[j];
                }
            }
        }

        // Ordinary backpropagation through the forward chain.
        let mut hbar = hbar_last;
        for k in (0..nh).rev() {
            let (fan_out, fan_in) = shapes[k];
            let zb = &mut zbar[k];
            for i in 0..zb.len() {
                zb[i] += hbar[i] * fwd.d1[k][i];
            }
            gemm(
                fan_out,
                rows,
                fan_in,
                1.0,
                zb,
                true,
                &fwd.inputs[k],
                false,
                1.0,
                grad.segment_at_mut(2 * k).data_mut(),
            );
            let bb = grad.segment_at_mut(2 * k + 1).data_mut();
            for r in 0..rows {
                for j in 0..fan_out {
                    bb[j] += zb[r * fan_out + j];
                }
            }
            if k > 0 {
                let mut prev = vec![0.0; rows * fan_in];
                gemm(rows, fan_out, fan_in, 1.0, zb, false, self.weight(k), false, 0.0, &mut prev);
                hbar = prev;
            }
        }
        grad.check_finite("parameter gradient")?;
        Ok(grad)
    }

    /// Builds the network output on a tape: the energy for conservative nets
    /// (one element) or the score for direct nets.
    pub fn output_on_tape<'t>(
        &self,
        params: &ParamVars<'t, '_>,
        x: &[Var<'t>],
        t: Var<'t>,
    ) -> Vec<Var<'t>> {
        let pi = std::f64::consts::PI;
        let mut h: Vec<Var<'t>> = x.to_vec();
        let tp = t * pi;
        let t2p = t * (2.0 * pi);
        h.extend([tp.sin(), tp.cos(), t2p.sin(), t2p.cos()]);
        let shapes = self.spec.layer_shapes();
        let names = self.spec.segment_names();
        for (k, &(fan_out, fan_in)) in shapes.iter().enumerate() {
            let w = params.segment(&names[2 * k]);
            let b = params.segment(&names[2 * k + 1]);
            let mut next = Vec::with_capacity(fan_out);
            for o in 0..fan_out {
                let mut z = b[o];
                for i in 0..fan_in {
                    z = z + w[o * fan_in + i] * h[i];
                }
                next.push(if k < shapes.len() - 1 {
                    self.spec.activation.on_tape(z)
                } else {
                    z
                });
            }
            h = next;
        }
        h
    }

    /// Energy on a tape; the score is `tape.grad(energy, x)`.
    pub fn energy_on_tape<'t>(
        &self,
        params: &ParamVars<'t, '_>,
        x: &[Var<'t>],
        t: Var<'t>,
    ) -> Result<Var<'t>> {
        if !self.spec.conservative {
            return Err(Error::Contract("direct-score network has no energy".into()));
        }
        Ok(self.output_on_tape(params, x, t)[0])
    }

    /// Energy of a single point.
    pub fn energy(&self, x: &[f64], t: f64) -> Result<f64> {
        let xt = Tensor::new(vec![1, x.len()], x.to_vec())?;
        Ok(self.energy_batch(&xt, &[t])?[0])
    }

    /// Score of a single point.
    pub fn score(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        let xt = Tensor::new(vec![1, x.len()], x.to_vec())?;
        Ok(self.score_batch(&xt, &[t])?.into_data())
    }
}

/// `rows x fan_out` result of `input W^T + b`.
fn affine(rows: usize, fan_in: usize, fan_out: usize, input: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
    let mut z = vec![0.0; rows * fan_out];
    for row in z.chunks_exact_mut(fan_out) {
        row.copy_from_slice(b);
    }
    gemm(rows, fan_in, fan_out, 1.0, input, false, w, true, 1.0, &mut z);
    z
}

/// Rows per forward pass when evaluating large batches; keeps the
/// activations of one pass resident in cache.
const EVAL_CHUNK: usize = 256;

impl Mlp {
    fn in_chunks(&self, x: &Tensor, t: &[f64], mut each: impl FnMut(Forward)) -> Result<()> {
        if x.rows() <= EVAL_CHUNK || x.rows() != t.len() || x.cols() != self.spec.dim {
            each(self.forward(x, t)?);
            return Ok(());
        }
        let dim = x.cols();
        for start in (0..x.rows()).step_by(EVAL_CHUNK) {
            let end = (start + EVAL_CHUNK).min(x.rows());
            let part = Tensor::from_vec_unchecked(vec![end - start, dim], x.data()[start * dim..end * dim].to_vec());
            each(self.forward(&part, &t[start..end])?);
        }
        Ok(())
    }
}

impl ScoreField for Mlp {
    fn dim(&self) -> usize {
        self.spec.dim
    }

    fn score_batch(&self, x: &Tensor, t: &[f64]) -> Result<Tensor> {
        let dim = self.spec.dim;
        let mut out = Vec::with_capacity(x.rows() * dim);
        self.in_chunks(x, t, |f| {
            if self.spec.conservative {
                out.extend_from_slice(f.score(dim).data());
            } else {
                out.extend_from_slice(&f.output);
            }
        })?;
        Ok(Tensor::from_vec_unchecked(vec![x.rows(), dim], out))
    }
}

impl EnergyField for Mlp {
    fn energy_batch(&self, x: &Tensor, t: &[f64]) -> Result<Vec<f64>> {
        if !self.spec.conservative {
            return Err(Error::Contract("direct-score network has no energy".into()));
        }
        let mut out = Vec::with_capacity(x.rows());
        self.in_chunks(x, t, |f| out.extend_from_slice(&f.output))?;
        Ok(out)
    }

    fn energy_and_score(&self, x: &Tensor, t: &[f64]) -> Result<(Vec<f64>, Tensor)> {
        if !self.spec.conservative {
            return Err(Error::Contract("direct-score network has no energy".into()));
        }
        let f = self.forward(x, t)?;
        let s = f.score(self.spec.dim);
        Ok((f.output, s))
    }
}
