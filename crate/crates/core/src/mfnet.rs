//! Mean-field one-hidden-layer networks.
//!
//! A [`ParticleEnsemble`] holds `r` particles `θ_j = (a_j, w_j, b_j)` and
//! represents the control
//!
//! ```text
//! u(x) = (1/r) Σ_j a_j σ(w_j · x + b_j)
//! ```
//!
//! i.e. the integral of the neuron map against the empirical measure of the
//! particles. Parameters are stored row-major, one row per particle, laid out
//! as `[a_0 .. a_{c-1}, w_0 .. w_{d-1}, b]`. Gradients use the same layout.

use std::fmt;
use std::hash::{Hash, Hasher};
use std::io::{BufRead, Write};
use std::str::FromStr;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{check_dim, Error, Result};

/// Hidden-layer activation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Activation {
    #[default]
    Tanh,
    Relu,
}

impl Activation {
    #[inline]
    pub fn eval(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Relu => z.max(0.0),
        }
    }

    /// Analytic derivative. ReLU uses `σ'(0) = 0`.
    #[inline]
    pub fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => {
                let t = z.tanh();
                1.0 - t * t
            }
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Tanh => "tanh",
            Activation::Relu => "relu",
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
            "tanh" => Ok(Activation::Tanh),
            "relu" => Ok(Activation::Relu),
            other => Err(Error::Format(format!("unknown activation `{other}`"))),
        }
    }
}

/// A single network parameter `θ = (a, w, b)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Particle {
    pub a: Vec<f64>,
    pub w: Vec<f64>,
    pub b: f64,
}

impl Particle {
    pub fn is_finite(&self) -> bool {
        self.a.iter().chain(&self.w).all(|v| v.is_finite()) && self.b.is_finite()
    }
}

/// Scales for random particle initialisation: `a ~ output_scale·N(0, I)`,
/// `(w, b) ~ input_scale·N(0, I)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InitSpec {
    pub output_scale: f64,
    pub input_scale: f64,
}

impl Default for InitSpec {
    fn default() -> Self {
        Self {
            output_scale: 0.0,
            input_scale: 1.0,
        }
    }
}

/// Forward-pass record for one input, consumed by the backward passes.
#[derive(Debug, Clone, PartialEq)]
pub struct NetTape {
    input: Vec<f64>,
    /// Pre-activations `z_j = w_j · x + b_j`.
    pub pre: Vec<f64>,
    act: Vec<f64>,
    dact: Vec<f64>,
}

impl NetTape {
    pub fn input(&self) -> &[f64] {
        &self.input
    }
}

/// Per-particle gradients, laid out like the ensemble parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrad {
    stride: usize,
    control_dim: usize,
    data: Vec<f64>,
}

impl ParamGrad {
    pub(crate) fn zeros(width: usize, state_dim: usize, control_dim: usize) -> Self {
        let stride = control_dim + state_dim + 1;
        Self {
            stride,
            control_dim,
            data: vec![0.0; width * stride],
        }
    }

    pub fn width(&self) -> usize {
        self.data.len() / self.stride
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub(crate) fn row_mut(&mut self, j: usize) -> &mut [f64] {
        &mut self.data[j * self.stride..(j + 1) * self.stride]
    }

    /// Gradient row of particle `j` in `[a, w, b]` layout.
    pub fn row(&self, j: usize) -> &[f64] {
        &self.data[j * self.stride..(j + 1) * self.stride]
    }

    pub fn d_a(&self, j: usize) -> &[f64] {
        &self.row(j)[..self.control_dim]
    }

    pub fn d_w(&self, j: usize) -> &[f64] {
        let row = self.row(j);
        &row[self.control_dim..self.stride - 1]
    }

    pub fn d_b(&self, j: usize) -> f64 {
        self.row(j)[self.stride - 1]
    }

    pub fn row_norm(&self, j: usize) -> f64 {
        self.row(j).iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub(crate) fn add_scaled(&mut self, other: &ParamGrad, scale: f64) {
        for (d, s) in self.data.iter_mut().zip(&other.data) {
            *d += scale * s;
        }
    }
}

/// Empirical measure over `r` particles, evaluated as a feedback control.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticleEnsemble {
    state_dim: usize,
    control_dim: usize,
    activation: Activation,
    params: Vec<f64>,
}

impl ParticleEnsemble {
    pub fn new(
        state_dim: usize,
        control_dim: usize,
        activation: Activation,
        particles: &[Particle],
    ) -> Result<Self> {
        if particles.is_empty() {
            return Err(Error::InvalidParameter {
                name: "width",
                reason: "an ensemble needs at least one particle".into(),
            });
        }
        let mut params = Vec::with_capacity(particles.len() * (state_dim + control_dim + 1));
        for p in particles {
            check_dim("particle output weights", control_dim, p.a.len())?;
            check_dim("particle input weights", state_dim, p.w.len())?;
            params.extend_from_slice(&p.a);
            params.extend_from_slice(&p.w);
            params.push(p.b);
        }
        Ok(Self {
            state_dim,
            control_dim,
            activation,
            params,
        })
    }

    pub fn from_params(
        state_dim: usize,
        control_dim: usize,
        activation: Activation,
        params: Vec<f64>,
    ) -> Result<Self> {
        let stride = state_dim + control_dim + 1;
        if params.is_empty() || !params.len().is_multiple_of(stride) {
            return Err(Error::DimensionMismatch {
                what: "flat parameter vector",
                expected: stride,
                got: params.len(),
            });
        }
        Ok(Self {
            state_dim,
            control_dim,
            activation,
            params,
        })
    }

    pub fn random<R: Rng + ?Sized>(
        width: usize,
        state_dim: usize,
        control_dim: usize,
        activation: Activation,
        init: InitSpec,
        rng: &mut R,
    ) -> Result<Self> {
        if width == 0 {
            return Err(Error::InvalidParameter {
                name: "width",
                reason: "must be at least 1".into(),
            });
        }
        let stride = state_dim + control_dim + 1;
        let mut params = Vec::with_capacity(width * stride);
        for _ in 0..width {
            for _ in 0..control_dim {
                let e: f64 = rng.sample(StandardNormal);
                params.push(init.output_scale * e);
            }
            for _ in 0..=state_dim {
                let e: f64 = rng.sample(StandardNormal);
                params.push(init.input_scale * e);
            }
        }
        Ok(Self {
            state_dim,
            control_dim,
            activation,
            params,
        })
    }

    /// Single-particle ensemble whose output is exactly `value` for every input.
    pub fn constant(value: &[f64], state_dim: usize, activation: Activation) -> Self {
        let level = activation.eval(1.0);
        let particle = Particle {
            a: value.iter().map(|v| v / level).collect(),
            w: vec![0.0; state_dim],
            b: 1.0,
        };
        Self::new(state_dim, value.len(), activation, &[particle]).expect("consistent dims")
    }

    pub fn width(&self) -> usize {
        self.params.len() / self.stride()
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn control_dim(&self) -> usize {
        self.control_dim
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    /// Number of parameters per particle.
    pub fn stride(&self) -> usize {
        self.state_dim + self.control_dim + 1
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub(crate) fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn row(&self, j: usize) -> &[f64] {
        let s = self.stride();
        &self.params[j * s..(j + 1) * s]
    }

    pub fn particle(&self, j: usize) -> Particle {
        let row = self.row(j);
        let c = self.control_dim;
        Particle {
            a: row[..c].to_vec(),
            w: row[c..c + self.state_dim].to_vec(),
            b: row[c + self.state_dim],
        }
    }

    pub fn particles(&self) -> Vec<Particle> {
        (0..self.width()).map(|j| self.particle(j)).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|v| v.is_finite())
    }

    /// Every particle repeated `k` times, in order.
    pub fn duplicated(&self, k: usize) -> Self {
        let mut params = Vec::with_capacity(self.params.len() * k);
        for j in 0..self.width() {
            for _ in 0..k {
                params.extend_from_slice(self.row(j));
            }
        }
        Self {
            params,
            ..self.clone()
        }
    }

    /// Hash of the exact parameter bits.
    pub fn checksum(&self) -> u64 {
        let mut h = std::collections::hash_map::DefaultHasher::new();
        self.state_dim.hash(&mut h);
        self.control_dim.hash(&mut h);
        for v in &self.params {
            v.to_bits().hash(&mut h);
        }
        h.finish()
    }

    #[inline]
    fn pre_activation(&self, row: &[f64], x: &[f64]) -> f64 {
        let c = self.control_dim;
        let w = &row[c..c + self.state_dim];
        let mut z = row[c + self.state_dim];
        for (wi, xi) in w.iter().zip(x) {
            z += wi * xi;
        }
        z
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_dim("network input", self.state_dim, x.len())?;
        let c = self.control_dim;
        let mut out = vec![0.0; c];
        for row in self.params.chunks_exact(self.stride()) {
            let s = self.activation.eval(self.pre_activation(row, x));
            for (o, a) in out.iter_mut().zip(&row[..c]) {
                *o += a * s;
            }
        }
        let inv_r = 1.0 / self.width() as f64;
        out.iter_mut().for_each(|o| *o *= inv_r);
        Ok(out)
    }

    pub fn forward_with_tape(&self, x: &[f64]) -> Result<(Vec<f64>, NetTape)> {
        check_dim("network input", self.state_dim, x.len())?;
        let c = self.control_dim;
        let r = self.width();
        let mut out = vec![0.0; c];
        let mut pre = Vec::with_capacity(r);
        let mut act = Vec::with_capacity(r);
        let mut dact = Vec::with_capacity(r);
        for row in self.params.chunks_exact(self.stride()) {
            let z = self.pre_activation(row, x);
            let s = self.activation.eval(z);
            for (o, a) in out.iter_mut().zip(&row[..c]) {
                *o += a * s;
            }
            pre.push(z);
            act.push(s);
            dact.push(self.activation.derivative(z));
        }
        let inv_r = 1.0 / r as f64;
        out.iter_mut().for_each(|o| *o *= inv_r);
        let tape = NetTape {
            input: x.to_vec(),
            pre,
            act,
            dact,
        };
        Ok((out, tape))
    }

    fn check_backward(&self, x: &[f64], tape: &NetTape, g_u: &[f64]) -> Result<()> {
        check_dim("network input", self.state_dim, x.len())?;
        check_dim("control gradient", self.control_dim, g_u.len())?;
        if tape.pre.len() != self.width() {
            return Err(Error::TapeMismatch("tape width differs from ensemble width"));
        }
        if tape.input != x {
            return Err(Error::TapeMismatch("tape was recorded at a different input"));
        }
        Ok(())
    }

    /// Gradients of `g_u · u(x)` with respect to every particle.
    pub fn backward_params(&self, x: &[f64], tape: &NetTape, g_u: &[f64]) -> Result<ParamGrad> {
        let mut grad = ParamGrad::zeros(self.width(), self.state_dim, self.control_dim);
        self.accumulate_param_grad(x, tape, g_u, 1.0, &mut grad)?;
        Ok(grad)
    }

    /// Adds `scale · ∂(g_u · u(x))/∂θ` into `grad`.
    pub(crate) fn accumulate_param_grad(
        &self,
        x: &[f64],
        tape: &NetTape,
        g_u: &[f64],
        scale: f64,
        grad: &mut ParamGrad,
    ) -> Result<()> {
        self.check_backward(x, tape, g_u)?;
        let c = self.control_dim;
        let d = self.state_dim;
        let stride = self.stride();
        let k = scale / self.width() as f64;
        for (j, (row, g)) in self
            .params
            .chunks_exact(stride)
            .zip(grad.as_mut_slice().chunks_exact_mut(stride))
            .enumerate()
        {
            let s = tape.act[j];
            let ga: f64 = g_u.iter().zip(&row[..c]).map(|(g, a)| g * a).sum();
            for (gi, gu) in g[..c].iter_mut().zip(g_u) {
                *gi += k * gu * s;
            }
            let inner = k * ga * tape.dact[j];
            for (gi, xi) in g[c..c + d].iter_mut().zip(x) {
                *gi += inner * xi;
            }
            g[c + d] += inner;
        }
        Ok(())
    }

    /// Gradient of `g_u · u(x)` with respect to the input `x`.
    pub fn backward_state(&self, x: &[f64], tape: &NetTape, g_u: &[f64]) -> Result<Vec<f64>> {
        self.check_backward(x, tape, g_u)?;
        let c = self.control_dim;
        let d = self.state_dim;
        let k = 1.0 / self.width() as f64;
        let mut gx = vec![0.0; d];
        for (j, row) in self.params.chunks_exact(self.stride()).enumerate() {
            let ga: f64 = g_u.iter().zip(&row[..c]).map(|(g, a)| g * a).sum();
            let inner = k * ga * tape.dact[j];
            for (gi, wi) in gx.iter_mut().zip(&row[c..c + d]) {
                *gi += inner * wi;
            }
        }
        Ok(gx)
    }

    /// Writes the versioned text format:
    ///
    /// ```text
    /// mfnet-ensemble v1
    /// width=<r> state_dim=<d> control_dim=<c> activation=<tanh|relu>
    /// a0,..,a{c-1},w0,..,w{d-1},b
    /// <r comma-separated rows>
    /// ```
    ///
    /// Values use the shortest representation that round-trips exactly.
    pub fn write_text<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "mfnet-ensemble v1")?;
        writeln!(
            out,
            "width={} state_dim={} control_dim={} activation={}",
            self.width(),
            self.state_dim,
            self.control_dim,
            self.activation
        )?;
        let mut cols: Vec<String> = (0..self.control_dim).map(|i| format!("a{i}")).collect();
        cols.extend((0..self.state_dim).map(|i| format!("w{i}")));
        cols.push("b".into());
        writeln!(out, "{}", cols.join(","))?;
        for row in self.params.chunks_exact(self.stride()) {
            let line: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
            writeln!(out, "{}", line.join(","))?;
        }
        Ok(())
    }

    pub fn read_text<R: BufRead>(input: R) -> Result<Self> {
        let mut lines = input.lines();
        let mut next = |what: &str| -> Result<String> {
            lines
                .next()
                .transpose()?
                .ok_or_else(|| Error::Format(format!("missing {what}")))
        };
        let magic = next("format line")?;
        if magic.trim() != "mfnet-ensemble v1" {
            return Err(Error::Format(format!("unsupported header `{magic}`")));
        }
        let meta = next("metadata line")?;
        let (mut width, mut state_dim, mut control_dim, mut activation) = (None, None, None, None);
        for kv in meta.split_whitespace() {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("bad metadata entry `{kv}`")))?;
            let parse = |v: &str| {
                v.parse::<usize>()
                    .map_err(|e| Error::Format(format!("{k}: {e}")))
            };
            match k {
                "width" => width = Some(parse(v)?),
                "state_dim" => state_dim = Some(parse(v)?),
                "control_dim" => control_dim = Some(parse(v)?),
                "activation" => activation = Some(v.parse::<Activation>()?),
                other => return Err(Error::Format(format!("unknown metadata key `{other}`"))),
            }
        }
        let missing = |k: &str| Error::Format(format!("metadata lacks `{k}`"));
        let width = width.ok_or_else(|| missing("width"))?;
        let state_dim = state_dim.ok_or_else(|| missing("state_dim"))?;
        let control_dim = control_dim.ok_or_else(|| missing("control_dim"))?;
        let activation = activation.ok_or_else(|| missing("activation"))?;
        let stride = state_dim + control_dim + 1;
        let _columns = next("column header")?;
        let mut params = Vec::with_capacity(width * stride);
        for j in 0..width {
            let line = next("particle row")?;
            let before = params.len();
            for field in line.split(',') {
                let v = field
                    .trim()
                    .parse::<f64>()
                    .map_err(|e| Error::Format(format!("row {j}: {e}")))?;
                params.push(v);
            }
            if params.len() - before != stride {
                return Err(Error::Format(format!(
                    "row {j} has {} columns, expected {stride}",
                    params.len() - before
                )));
            }
        }
        Self::from_params(state_dim, control_dim, activation, params)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scalar(a: f64, w: f64, b: f64) -> ParticleEnsemble {
        ParticleEnsemble::new(
            1,
            1,
            Activation::Tanh,
            &[Particle {
                a: vec![a],
                w: vec![w],
                b,
            }],
        )
        .unwrap()
    }

    fn random_ensemble(rng: &mut ChaCha8Rng, r: usize, d: usize, c: usize) -> ParticleEnsemble {
        let init = InitSpec {
            output_scale: 1.0,
            input_scale: 0.7,
        };
        ParticleEnsemble::random(r, d, c, Activation::Tanh, init, rng).unwrap()
    }

    #[test]
    fn zero_output_weight_gives_zero_control() {
        let e = scalar(0.0, 2.3, -0.4);
        assert_eq!(e.forward(&[0.9]).unwrap(), vec![0.0]);
    }

    #[test]
    fn scalar_tanh_forward() {
        let e = scalar(1.0, 1.0, 0.0);
        let u = e.forward(&[1.0]).unwrap();
        assert!((u[0] - 0.761_594_155_955_764_9).abs() < 1e-15);
    }

    #[test]
    fn tape_records_pre_activations() {
        let e = scalar(1.0, 2.0, 1.0);
        let (u, tape) = e.forward_with_tape(&[3.0]).unwrap();
        assert_eq!(tape.pre, vec![7.0]);
        assert_eq!(u, e.forward(&[3.0]).unwrap());

        let pair = ParticleEnsemble::new(
            1,
            1,
            Activation::Tanh,
            &[
                Particle {
                    a: vec![1.0],
                    w: vec![1.0],
                    b: 0.0,
                },
                Particle {
                    a: vec![-1.0],
                    w: vec![1.0],
                    b: 0.0,
                },
            ],
        )
        .unwrap();
        let (u, tape) = pair.forward_with_tape(&[1.0]).unwrap();
        assert_eq!(u, vec![0.0]);
        assert_eq!(tape.pre, vec![1.0, 1.0]);
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let e = scalar(1.0, 1.0, 0.0);
        assert!(matches!(
            e.forward(&[1.0, 2.0]),
            Err(Error::DimensionMismatch { .. })
        ));
        let (_, tape) = e.forward_with_tape(&[1.0]).unwrap();
        assert!(matches!(
            e.backward_params(&[2.0], &tape, &[1.0]),
            Err(Error::TapeMismatch(_))
        ));
        let wide = e.duplicated(2);
        assert!(matches!(
            wide.backward_state(&[1.0], &tape, &[1.0]),
            Err(Error::TapeMismatch(_))
        ));
    }

    #[test]
    fn hand_gradients() {
        let e = scalar(1.0, 0.0, 0.0);
        let (_, tape) = e.forward_with_tape(&[1.0]).unwrap();
        let g = e.backward_params(&[1.0], &tape, &[1.0]).unwrap();
        assert_eq!(g.d_a(0), &[0.0]);
        assert_eq!(g.d_w(0), &[1.0]);
        assert_eq!(g.d_b(0), 1.0);

        let e = scalar(1.0, 3.0, 0.0);
        let (_, tape) = e.forward_with_tape(&[0.0]).unwrap();
        assert_eq!(e.backward_state(&[0.0], &tape, &[1.0]).unwrap(), vec![3.0]);
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let e = random_ensemble(&mut rng, 5, 3, 2);
        let x = [0.3, -0.2, 1.1];
        let (_, tape) = e.forward_with_tape(&x).unwrap();
        let g = e.backward_params(&x, &tape, &[0.0, 0.0]).unwrap();
        assert!(g.as_slice().iter().all(|v| *v == 0.0));
        let gx = e.backward_state(&x, &tape, &[0.0, 0.0]).unwrap();
        assert!(gx.iter().all(|v| *v == 0.0));
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
    }

    // Central differences of L(θ, x) = g_u · forward(θ, x), step 1e-5.
    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let h = 1e-5;
        for case in 0..100 {
            let r = rng.random_range(1..=8);
            let d = rng.random_range(1..=8);
            let c = rng.random_range(1..=8);
            let e = random_ensemble(&mut rng, r, d, c);
            let x: Vec<f64> = (0..d).map(|_| rng.random_range(-1.5..1.5)).collect();
            let g_u: Vec<f64> = (0..c).map(|_| rng.random_range(-1.0..1.0)).collect();
            let loss = |e: &ParticleEnsemble, x: &[f64]| -> f64 {
                e.forward(x)
                    .unwrap()
                    .iter()
                    .zip(&g_u)
                    .map(|(u, g)| u * g)
                    .sum()
            };
            let (_, tape) = e.forward_with_tape(&x).unwrap();
            let grad = e.backward_params(&x, &tape, &g_u).unwrap();
            for i in 0..e.params().len() {
                let mut plus = e.clone();
                plus.params_mut()[i] += h;
                let mut minus = e.clone();
                minus.params_mut()[i] -= h;
                let fd = (loss(&plus, &x) - loss(&minus, &x)) / (2.0 * h);
                let err = rel_err(grad.as_slice()[i], fd);
                assert!(err <= 1e-5, "case {case} param {i}: {} vs {fd}", grad.as_slice()[i]);
            }
            let gx = e.backward_state(&x, &tape, &g_u).unwrap();
            for i in 0..d {
                let mut xp = x.clone();
                xp[i] += h;
                let mut xm = x.clone();
                xm[i] -= h;
                let fd = (loss(&e, &xp) - loss(&e, &xm)) / (2.0 * h);
                assert!(rel_err(gx[i], fd) <= 1e-5, "case {case} state {i}");
            }
        }
    }

    #[test]
    fn activation_derivatives_match_finite_differences() {
        let h = 1e-6;
        for act in [Activation::Tanh, Activation::Relu] {
            for &z in &[-2.0, -0.7, -0.1, 0.05, 0.4, 1.3, 3.0] {
                let fd = (act.eval(z + h) - act.eval(z - h)) / (2.0 * h);
                let d = act.derivative(z);
                assert!((d - fd).abs() <= 1e-6 * d.abs().max(1.0), "{act} at {z}");
            }
        }
        assert_eq!(Activation::Relu.derivative(0.0), 0.0);
    }

    #[test]
    fn constant_ensemble_outputs_value() {
        for act in [Activation::Tanh, Activation::Relu] {
            let e = ParticleEnsemble::constant(&[0.3, -1.2], 4, act);
            let u = e.forward(&[5.0, -1.0, 0.0, 2.0]).unwrap();
            assert!((u[0] - 0.3).abs() < 1e-15 && (u[1] + 1.2).abs() < 1e-15);
        }
    }

    #[test]
    fn text_format_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let e = random_ensemble(&mut rng, 6, 3, 2);
        let mut buf = Vec::new();
        e.write_text(&mut buf).unwrap();
        let back = ParticleEnsemble::read_text(buf.as_slice()).unwrap();
        assert_eq!(back, e);
    }

    #[test]
    fn text_format_rejects_short_rows() {
        let text = "mfnet-ensemble v1\nwidth=1 state_dim=1 control_dim=1 activation=tanh\na0,w0,b\n1.0,2.0\n";
        assert!(matches!(
            ParticleEnsemble::read_text(text.as_bytes()),
            Err(Error::Format(_))
        ));
    }

    mod props {
        use super::*;
        use proptest::prelude::{any, prop_assert, proptest, Strategy};

        fn ensemble_and_input() -> impl Strategy<Value = (ParticleEnsemble, Vec<f64>)> {
            (1usize..6, 1usize..5, 1usize..4, any::<u64>(), any::<bool>()).prop_map(
                |(r, d, c, seed, relu)| {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    let act = if relu { Activation::Relu } else { Activation::Tanh };
                    let init = InitSpec {
                        output_scale: 1.0,
                        input_scale: 1.0,
                    };
                    let e = ParticleEnsemble::random(r, d, c, act, init, &mut rng).unwrap();
                    let x = (0..d).map(|_| rng.random_range(-3.0..3.0)).collect();
                    (e, x)
                },
            )
        }

        proptest! {
            #[test]
            fn duplication_leaves_output_unchanged((e, x) in ensemble_and_input(), k in 1usize..5) {
                let u = e.forward(&x).unwrap();
                let v = e.duplicated(k).forward(&x).unwrap();
                for (a, b) in u.iter().zip(&v) {
                    prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
                }
            }

            #[test]
            fn linear_in_output_weights(
                (e, x) in ensemble_and_input(),
                alpha in -2.0f64..2.0,
                beta in -2.0f64..2.0,
                seed in any::<u64>(),
            ) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let c = e.control_dim();
                let stride = e.stride();
                let mut other = e.clone();
                for row in other.params_mut().chunks_exact_mut(stride) {
                    for a in &mut row[..c] {
                        *a = rng.random_range(-1.0..1.0);
                    }
                }
                let mut mixed = e.clone();
                for (j, row) in mixed.params_mut().chunks_exact_mut(stride).enumerate() {
                    for i in 0..c {
                        row[i] = alpha * e.row(j)[i] + beta * other.row(j)[i];
                    }
                }
                let u = e.forward(&x).unwrap();
                let v = other.forward(&x).unwrap();
                let w = mixed.forward(&x).unwrap();
                for i in 0..c {
                    let expect = alpha * u[i] + beta * v[i];
                    prop_assert!((w[i] - expect).abs() <= 1e-12 * (1.0 + expect.abs()));
                }
            }

            #[test]
            fn relu_growth_bound((e, x) in ensemble_and_input()) {
                let e = ParticleEnsemble::from_params(
                    e.state_dim(), e.control_dim(), Activation::Relu, e.params().to_vec()
                ).unwrap();
                let u = e.forward(&x).unwrap();
                let c = e.control_dim();
                let d = e.state_dim();
                let r = e.width() as f64;
                for (i, ui) in u.iter().enumerate() {
                    let bound: f64 = (0..e.width()).map(|j| {
                        let row = e.row(j);
                        let wx: f64 = row[c..c + d].iter().zip(&x).map(|(w, x)| w * x).sum();
                        row[i].abs() * (wx.abs() + row[c + d].abs())
                    }).sum::<f64>() / r;
                    prop_assert!(ui.abs() <= bound * (1.0 + 1e-12) + 1e-300);
                }
            }
        }
    }
}
