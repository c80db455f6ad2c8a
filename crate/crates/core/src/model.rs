//! From-scratch classifier: one optional hidden layer with a smooth
//! nonlinearity, softmax output, mean cross-entropy loss and hand-written
//! gradients.
//!
//! Parameters live in one flat vector so that aggregation is plain vector
//! arithmetic. Layout, for `hidden_dim > 0`:
//!
//! ```text
//! [ W1 (input_dim x hidden_dim, input-major) | b1 (hidden_dim)
//!   | W2 (hidden_dim x classes, hidden-major) | b2 (classes) ]
//! ```
//!
//! With `hidden_dim == 0` the model is multinomial logistic regression and the
//! vector is `[ W (input_dim x classes) | b (classes) ]`. The input-major
//! layout lets the forward and backward passes skip zero pixels.

use rand::Rng;

use crate::error::{Error, Result};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Sigmoid,
}

impl Activation {
    fn apply(self, a: f64) -> f64 {
        match self {
            Activation::Tanh => a.tanh(),
            Activation::Sigmoid => 1.0 / (1.0 + (-a).exp()),
        }
    }

    /// Derivative expressed through the activation output.
    fn slope(self, h: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - h * h,
            Activation::Sigmoid => h * (1.0 - h),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Tanh => "tanh",
            Activation::Sigmoid => "sigmoid",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "tanh" => Some(Activation::Tanh),
            "sigmoid" => Some(Activation::Sigmoid),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Architecture {
    pub input_dim: usize,
    /// Zero selects multinomial logistic regression.
    pub hidden_dim: usize,
    pub classes: usize,
    pub activation: Activation,
}

impl Architecture {
    pub fn new(input_dim: usize, hidden_dim: usize, classes: usize, activation: Activation) -> Result<Self> {
        if input_dim == 0 {
            return Err(Error::Validation("input_dim must be positive".into()));
        }
        if classes < 2 {
            return Err(Error::Validation("at least two classes are required".into()));
        }
        Ok(Architecture {
            input_dim,
            hidden_dim,
            classes,
            activation,
        })
    }

    pub fn param_count(&self) -> usize {
        if self.hidden_dim == 0 {
            (self.input_dim + 1) * self.classes
        } else {
            (self.input_dim + 1) * self.hidden_dim + (self.hidden_dim + 1) * self.classes
        }
    }

    fn layout(&self) -> Layout {
        let (i, h, c) = (self.input_dim, self.hidden_dim, self.classes);
        if h == 0 {
            Layout {
                w1: 0,
                b1: i * c,
                w2: 0,
                b2: 0,
            }
        } else {
            let b1 = i * h;
            let w2 = b1 + h;
            Layout {
                w1: 0,
                b1,
                w2,
                b2: w2 + h * c,
            }
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Layout {
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

/// Half-width of the uniform initialisation is `INIT_SCALE / sqrt(fan_in)`.
pub const INIT_SCALE: f64 = 4.0;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub theta: Vec<f64>,
    pub arch: Architecture,
}

impl ModelParams {
    pub fn zeros(arch: Architecture) -> Self {
        ModelParams {
            theta: vec![0.0; arch.param_count()],
            arch,
        }
    }

    /// Scaled-uniform fan-in initialisation; biases start at zero.
    pub fn init(arch: Architecture, seed: u64) -> Self {
        let mut rng = seed::rng(seed);
        let mut p = Self::zeros(arch);
        let lay = arch.layout();
        let mut fill = |range: std::ops::Range<usize>, fan_in: usize, theta: &mut [f64]| {
            let a = INIT_SCALE / (fan_in as f64).sqrt();
            for v in &mut theta[range] {
                *v = rng.random_range(-a..a);
            }
        };
        if arch.hidden_dim == 0 {
            fill(lay.w1..lay.b1, arch.input_dim, &mut p.theta);
        } else {
            fill(lay.w1..lay.b1, arch.input_dim, &mut p.theta);
            fill(lay.w2..lay.b2, arch.hidden_dim, &mut p.theta);
        }
        p
    }

    pub fn from_vec(arch: Architecture, theta: Vec<f64>) -> Result<Self> {
        let p = ModelParams { theta, arch };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.theta.len() != self.arch.param_count() {
            return Err(Error::Validation(format!(
                "parameter vector has length {}, architecture needs {}",
                self.theta.len(),
                self.arch.param_count()
            )));
        }
        if !self.is_finite() {
            return Err(Error::Validation("non-finite parameter".into()));
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.theta.iter().all(|v| v.is_finite())
    }

    pub fn len(&self) -> usize {
        self.theta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.theta.is_empty()
    }
}

/// Scratch buffers for one sample.
struct Pass {
    hidden: Vec<f64>,
    logits: Vec<f64>,
}

impl Pass {
    fn new(arch: &Architecture) -> Self {
        Pass {
            hidden: vec![0.0; arch.hidden_dim],
            logits: vec![0.0; arch.classes],
        }
    }

    /// Fills `hidden` and `logits`; returns log-sum-exp of the logits.
    fn run(&mut self, p: &ModelParams, x: &[f32]) -> f64 {
        let arch = &p.arch;
        let lay = arch.layout();
        let theta = &p.theta;
        if arch.hidden_dim == 0 {
            let c = arch.classes;
            self.logits.copy_from_slice(&theta[lay.b1..lay.b1 + c]);
            for (i, &xi) in x.iter().enumerate() {
                if xi != 0.0 {
                    let xi = xi as f64;
                    let w = &theta[i * c..(i + 1) * c];
                    self.logits.iter_mut().zip(w).for_each(|(l, w)| *l += xi * w);
                }
            }
        } else {
            let h = arch.hidden_dim;
            self.hidden.copy_from_slice(&theta[lay.b1..lay.b1 + h]);
            for (i, &xi) in x.iter().enumerate() {
                if xi != 0.0 {
                    let xi = xi as f64;
                    let w = &theta[i * h..(i + 1) * h];
                    self.hidden.iter_mut().zip(w).for_each(|(a, w)| *a += xi * w);
                }
            }
            for a in &mut self.hidden {
                *a = arch.activation.apply(*a);
            }
            let c = arch.classes;
            self.logits.copy_from_slice(&theta[lay.b2..lay.b2 + c]);
            for (j, &hj) in self.hidden.iter().enumerate() {
                let w = &theta[lay.w2 + j * c..lay.w2 + (j + 1) * c];
                self.logits.iter_mut().zip(w).for_each(|(l, w)| *l += hj * w);
            }
        }
        let max = self.logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        max + self.logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln()
    }
}

fn check_batch(p: &ModelParams, inputs: &[&[f32]]) -> Result<()> {
    if let Some(bad) = inputs.iter().position(|x| x.len() != p.arch.input_dim) {
        return Err(Error::Argument(format!(
            "sample {bad} has {} features, model expects {}",
            inputs[bad].len(),
            p.arch.input_dim
        )));
    }
    if p.theta.len() != p.arch.param_count() {
        return Err(Error::Argument("parameter length does not match architecture".into()));
    }
    Ok(())
}

/// Class-probability rows (softmax outputs) for each input.
pub fn forward(p: &ModelParams, inputs: &[&[f32]]) -> Result<Vec<Vec<f64>>> {
    check_batch(p, inputs)?;
    let mut pass = Pass::new(&p.arch);
    Ok(inputs
        .iter()
        .map(|x| {
            let lse = pass.run(p, x);
            pass.logits.iter().map(|l| (l - lse).exp()).collect()
        })
        .collect())
}

/// Predicted class (lowest index on ties) and the sample's cross-entropy.
pub(crate) fn predict_one(p: &ModelParams, x: &[f32], label: usize) -> (usize, f64) {
    let mut pass = Pass::new(&p.arch);
    let lse = pass.run(p, x);
    let mut best = 0;
    for (c, &l) in pass.logits.iter().enumerate() {
        if l > pass.logits[best] {
            best = c;
        }
    }
    (best, lse - pass.logits[label])
}

fn check_labels(p: &ModelParams, inputs: &[&[f32]], labels: &[usize]) -> Result<()> {
    if labels.len() != inputs.len() {
        return Err(Error::Argument("inputs and labels differ in length".into()));
    }
    if inputs.is_empty() {
        return Err(Error::Argument("empty batch".into()));
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= p.arch.classes) {
        return Err(Error::Argument(format!("label {l} out of range")));
    }
    Ok(())
}

/// Mean cross-entropy.
pub fn loss(p: &ModelParams, inputs: &[&[f32]], labels: &[usize]) -> Result<f64> {
    check_batch(p, inputs)?;
    check_labels(p, inputs, labels)?;
    let mut pass = Pass::new(&p.arch);
    let total: f64 = inputs
        .iter()
        .zip(labels)
        .map(|(x, &y)| {
            let lse = pass.run(p, x);
            lse - pass.logits[y]
        })
        .sum();
    Ok(total / inputs.len() as f64)
}

/// Mean cross-entropy and its gradient with respect to every parameter.
pub fn loss_and_grad(p: &ModelParams, inputs: &[&[f32]], labels: &[usize]) -> Result<(f64, Vec<f64>)> {
    check_batch(p, inputs)?;
    check_labels(p, inputs, labels)?;
    let arch = &p.arch;
    let lay = arch.layout();
    let (h, c) = (arch.hidden_dim, arch.classes);
    let mut grad = vec![0.0; p.theta.len()];
    let mut pass = Pass::new(arch);
    let mut dlogits = vec![0.0; c];
    let mut dhidden = vec![0.0; h];
    let mut total = 0.0;

    for (x, &y) in inputs.iter().zip(labels) {
        let lse = pass.run(p, x);
        total += lse - pass.logits[y];
        for (d, l) in dlogits.iter_mut().zip(&pass.logits) {
            *d = (l - lse).exp();
        }
        dlogits[y] -= 1.0;

        if h == 0 {
            for (g, d) in grad[lay.b1..lay.b1 + c].iter_mut().zip(&dlogits) {
                *g += d;
            }
            for (i, &xi) in x.iter().enumerate() {
                if xi != 0.0 {
                    let xi = xi as f64;
                    for (g, d) in grad[i * c..(i + 1) * c].iter_mut().zip(&dlogits) {
                        *g += xi * d;
                    }
                }
            }
            continue;
        }

        for (g, d) in grad[lay.b2..lay.b2 + c].iter_mut().zip(&dlogits) {
            *g += d;
        }
        for j in 0..h {
            let hj = pass.hidden[j];
            let w = &p.theta[lay.w2 + j * c..lay.w2 + (j + 1) * c];
            let g = &mut grad[lay.w2 + j * c..lay.w2 + (j + 1) * c];
            let mut back = 0.0;
            for k in 0..c {
                g[k] += hj * dlogits[k];
                back += w[k] * dlogits[k];
            }
            dhidden[j] = back * arch.activation.slope(hj);
        }
        for (g, d) in grad[lay.b1..lay.b1 + h].iter_mut().zip(&dhidden) {
            *g += d;
        }
        for (i, &xi) in x.iter().enumerate() {
            if xi != 0.0 {
                let xi = xi as f64;
                for (g, d) in grad[i * h..(i + 1) * h].iter_mut().zip(&dhidden) {
                    *g += xi * d;
                }
            }
        }
    }

    let scale = 1.0 / inputs.len() as f64;
    grad.iter_mut().for_each(|g| *g *= scale);
    Ok((total * scale, grad))
}

/// `theta -= lr * grad`.
pub fn sgd_update(p: &mut ModelParams, grad: &[f64], lr: f64) {
    p.theta.iter_mut().zip(grad).for_each(|(t, g)| *t -= lr * g);
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_batch(n: usize, dim: usize, classes: usize, seed: u64) -> (Vec<Vec<f32>>, Vec<usize>) {
        let mut rng = seed::rng(seed);
        let xs = (0..n)
            .map(|_| {
                (0..dim)
                    .map(|_| if rng.random_bool(0.3) { 0.0 } else { rng.random::<f32>() })
                    .collect()
            })
            .collect();
        let ys = (0..n).map(|_| rng.random_range(0..classes)).collect();
        (xs, ys)
    }

    fn views(xs: &[Vec<f32>]) -> Vec<&[f32]> {
        xs.iter().map(Vec::as_slice).collect()
    }

    #[test]
    fn zero_params_give_uniform_probabilities() {
        let arch = Architecture::new(6, 4, 5, Activation::Tanh).unwrap();
        let p = ModelParams::zeros(arch);
        let (xs, ys) = random_batch(7, 6, 5, 1);
        for row in forward(&p, &views(&xs)).unwrap() {
            assert!(row.iter().all(|&q| (q - 0.2).abs() < 1e-15));
        }
        let l = loss(&p, &views(&xs), &ys).unwrap();
        assert!((l - 5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn probabilities_sum_to_one() {
        for hidden in [0, 8] {
            let arch = Architecture::new(10, hidden, 4, Activation::Sigmoid).unwrap();
            let p = ModelParams::init(arch, 3);
            let (xs, _) = random_batch(1000, 10, 4, 2);
            for row in forward(&p, &views(&xs)).unwrap() {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn output_bias_shift_leaves_probabilities_unchanged() {
        let arch = Architecture::new(5, 3, 4, Activation::Tanh).unwrap();
        let p = ModelParams::init(arch, 8);
        let mut shifted = p.clone();
        let b2 = shifted.theta.len() - 4;
        shifted.theta[b2..].iter_mut().for_each(|b| *b += 17.5);
        let (xs, _) = random_batch(20, 5, 4, 9);
        let a = forward(&p, &views(&xs)).unwrap();
        let b = forward(&shifted, &views(&xs)).unwrap();
        for (ra, rb) in a.iter().zip(&b) {
            for (qa, qb) in ra.iter().zip(rb) {
                assert!((qa - qb).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn large_logits_do_not_overflow() {
        let arch = Architecture::new(2, 0, 3, Activation::Tanh).unwrap();
        let p = ModelParams::from_vec(arch, vec![800.0, 0.0, -800.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        let x: Vec<&[f32]> = vec![&[1.0, 0.0]];
        let probs = forward(&p, &x).unwrap();
        assert!(probs[0].iter().all(|q| q.is_finite()));
        let l = loss(&p, &x, &[2]).unwrap();
        assert!((l - 1600.0).abs() < 1e-9);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        for (case, (hidden, act)) in [(0, Activation::Tanh), (5, Activation::Tanh), (4, Activation::Sigmoid)]
            .into_iter()
            .enumerate()
        {
            let arch = Architecture::new(7, hidden, 3, act).unwrap();
            let p = ModelParams::init(arch, case as u64);
            let (xs, ys) = random_batch(6, 7, 3, 40 + case as u64);
            let (_, grad) = loss_and_grad(&p, &views(&xs), &ys).unwrap();
            let h = 1e-6;
            for k in 0..p.len() {
                let mut plus = p.clone();
                plus.theta[k] += h;
                let mut minus = p.clone();
                minus.theta[k] -= h;
                let fd = (loss(&plus, &views(&xs), &ys).unwrap() - loss(&minus, &views(&xs), &ys).unwrap())
                    / (2.0 * h);
                let tol = 1e-4 * fd.abs().max(grad[k].abs()).max(1e-5);
                assert!((fd - grad[k]).abs() <= tol, "case {case} param {k}: {fd} vs {}", grad[k]);
            }
        }
    }

    #[test]
    fn duplicated_batch_gives_same_loss_and_gradient() {
        let arch = Architecture::new(6, 4, 3, Activation::Tanh).unwrap();
        let p = ModelParams::init(arch, 5);
        let (xs, ys) = random_batch(5, 6, 3, 6);
        let (l1, g1) = loss_and_grad(&p, &views(&xs), &ys).unwrap();
        let xs2: Vec<Vec<f32>> = xs.iter().chain(xs.iter()).cloned().collect();
        let ys2: Vec<usize> = ys.iter().chain(ys.iter()).copied().collect();
        let (l2, g2) = loss_and_grad(&p, &views(&xs2), &ys2).unwrap();
        assert!((l1 - l2).abs() < 1e-12);
        for (a, b) in g1.iter().zip(&g2) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn confident_correct_predictions_have_vanishing_loss() {
        let arch = Architecture::new(2, 0, 2, Activation::Tanh).unwrap();
        // Logit gap of 60 on the true class.
        let p = ModelParams::from_vec(arch, vec![30.0, -30.0, -30.0, 30.0, 0.0, 0.0]).unwrap();
        let xs: Vec<&[f32]> = vec![&[1.0, 0.0], &[0.0, 1.0]];
        let (l, g) = loss_and_grad(&p, &xs, &[0, 1]).unwrap();
        assert!(l < 1e-20);
        assert!(g.iter().all(|v| v.abs() < 1e-20));
    }

    #[test]
    fn dimension_mismatch_is_an_argument_error() {
        let arch = Architecture::new(3, 2, 2, Activation::Tanh).unwrap();
        let p = ModelParams::zeros(arch);
        let xs: Vec<&[f32]> = vec![&[1.0, 2.0]];
        assert!(matches!(forward(&p, &xs), Err(Error::Argument(_))));
        let ok: Vec<&[f32]> = vec![&[1.0, 2.0, 3.0]];
        assert!(matches!(loss(&p, &ok, &[5]), Err(Error::Argument(_))));
    }
}
