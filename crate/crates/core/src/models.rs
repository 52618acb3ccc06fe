//! Forward computation for the three click predictors: logistic regression,
//! a one-hidden-layer tanh network, and the recurrent network
//!
//! ```text
//! h(t) = tanh(x(t) U^T + h(t-1) R^T + b_h)
//! y(t) = sigmoid(h(t) V^T + b_o)
//! ```

use thiserror::Error;

use crate::datamodel::FeatureVector;
use crate::numkernel::{init_weights, sigmoid, tanh_scalar, KernelError, Matrix, Rng, Vector};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("input width {got} does not match model width {expected}")]
    InputWidth { expected: usize, got: usize },
    #[error("hidden state width {got} does not match hidden size {expected}")]
    HiddenWidth { expected: usize, got: usize },
    #[error("inconsistent parameter shapes: {0}")]
    Shape(String),
    #[error("non-finite parameter in block {0}")]
    NonFinite(&'static str),
    #[error(transparent)]
    Kernel(#[from] KernelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ModelKind {
    Lr,
    Nn,
    Rnn,
}

impl ModelKind {
    pub const ALL: [ModelKind; 3] = [ModelKind::Lr, ModelKind::Nn, ModelKind::Rnn];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Lr => "lr",
            ModelKind::Nn => "nn",
            ModelKind::Rnn => "rnn",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "lr" => Some(ModelKind::Lr),
            "nn" => Some(ModelKind::Nn),
            "rnn" => Some(ModelKind::Rnn),
            _ => None,
        }
    }
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Recurrent network weights. `u` is H x D, `r` is H x H, `v` is 1 x H.
#[derive(Debug, Clone, PartialEq)]
pub struct RnnParams {
    pub u: Matrix,
    pub r: Matrix,
    pub v: Matrix,
    pub b_h: Vector,
    pub b_o: f64,
}

impl RnnParams {
    pub fn zeros(input: usize, hidden: usize) -> Self {
        Self {
            u: Matrix::zeros(hidden, input),
            r: Matrix::zeros(hidden, hidden),
            v: Matrix::zeros(1, hidden),
            b_h: Vector::zeros(hidden),
            b_o: 0.0,
        }
    }

    /// Weights uniform on `[-scale, scale]`, biases zero.
    pub fn init(input: usize, hidden: usize, scale: f64, rng: &mut Rng) -> Result<Self, ModelError> {
        Ok(Self {
            u: init_weights(hidden, input, scale, rng)?,
            r: init_weights(hidden, hidden, scale, rng)?,
            v: init_weights(1, hidden, scale, rng)?,
            b_h: Vector::zeros(hidden),
            b_o: 0.0,
        })
    }

    pub fn hidden_size(&self) -> usize {
        self.u.rows()
    }

    pub fn input_width(&self) -> usize {
        self.u.cols()
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let h = self.u.rows();
        if self.r.shape() != (h, h) || self.v.shape() != (1, h) || self.b_h.len() != h {
            return Err(ModelError::Shape(format!(
                "U {:?}, R {:?}, V {:?}, b_h [{}]",
                self.u.shape(),
                self.r.shape(),
                self.v.shape(),
                self.b_h.len()
            )));
        }
        check_finite(&[
            ("U", self.u.is_finite()),
            ("R", self.r.is_finite()),
            ("V", self.v.is_finite()),
            ("b_h", self.b_h.is_finite()),
            ("b_o", self.b_o.is_finite()),
        ])
    }

    /// Sum of squares over U, R and V (biases excluded).
    pub fn weight_sum_squares(&self) -> f64 {
        self.u.sum_squares() + self.r.sum_squares() + self.v.sum_squares()
    }

    /// The feedforward network that shares this model's input and output layers.
    pub fn feedforward_part(&self) -> NnParams {
        NnParams {
            w1: self.u.clone(),
            b1: self.b_h.clone(),
            w2: self.v.clone(),
            b2: self.b_o,
        }
    }
}

fn check_finite(blocks: &[(&'static str, bool)]) -> Result<(), ModelError> {
    match blocks.iter().find(|(_, ok)| !ok) {
        Some((name, _)) => Err(ModelError::NonFinite(name)),
        None => Ok(()),
    }
}

/// Feedforward baseline: `sigmoid(tanh(x W1^T + b1) W2^T + b2)`.
#[derive(Debug, Clone, PartialEq)]
pub struct NnParams {
    pub w1: Matrix,
    pub b1: Vector,
    pub w2: Matrix,
    pub b2: f64,
}

impl NnParams {
    pub fn zeros(input: usize, hidden: usize) -> Self {
        Self {
            w1: Matrix::zeros(hidden, input),
            b1: Vector::zeros(hidden),
            w2: Matrix::zeros(1, hidden),
            b2: 0.0,
        }
    }

    pub fn init(input: usize, hidden: usize, scale: f64, rng: &mut Rng) -> Result<Self, ModelError> {
        Ok(Self {
            w1: init_weights(hidden, input, scale, rng)?,
            b1: Vector::zeros(hidden),
            w2: init_weights(1, hidden, scale, rng)?,
            b2: 0.0,
        })
    }

    pub fn hidden_size(&self) -> usize {
        self.w1.rows()
    }

    pub fn input_width(&self) -> usize {
        self.w1.cols()
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let h = self.w1.rows();
        if self.w2.shape() != (1, h) || self.b1.len() != h {
            return Err(ModelError::Shape(format!(
                "W1 {:?}, b1 [{}], W2 {:?}",
                self.w1.shape(),
                self.b1.len(),
                self.w2.shape()
            )));
        }
        check_finite(&[
            ("W1", self.w1.is_finite()),
            ("b1", self.b1.is_finite()),
            ("W2", self.w2.is_finite()),
            ("b2", self.b2.is_finite()),
        ])
    }

    pub fn weight_sum_squares(&self) -> f64 {
        self.w1.sum_squares() + self.w2.sum_squares()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LrParams {
    pub w: Vector,
    pub b: f64,
}

impl LrParams {
    pub fn zeros(input: usize) -> Self {
        Self {
            w: Vector::zeros(input),
            b: 0.0,
        }
    }

    pub fn input_width(&self) -> usize {
        self.w.len()
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        check_finite(&[("w", self.w.is_finite()), ("b", self.b.is_finite())])
    }

    pub fn weight_sum_squares(&self) -> f64 {
        self.w.iter().map(|v| v * v).sum()
    }
}

/// Recurrent layer activations. The zero vector is the sequence-start state.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenState(pub Vector);

impl HiddenState {
    pub fn zeros(hidden: usize) -> Self {
        HiddenState(Vector::zeros(hidden))
    }

    pub fn as_slice(&self) -> &[f64] {
        self.0.as_slice()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

fn check_input(expected: usize, got: usize) -> Result<(), ModelError> {
    if expected == got {
        Ok(())
    } else {
        Err(ModelError::InputWidth { expected, got })
    }
}

/// `tanh(x W^T + b [+ h R^T])` written into `out`.
#[inline]
pub(crate) fn hidden_activation(w: &Matrix, b: &[f64], x: &[f64], rec: Option<(&Matrix, &[f64])>, out: &mut [f64]) {
    for (i, o) in out.iter_mut().enumerate() {
        let mut a = b[i] + dot(w.row(i), x);
        if let Some((r, h)) = rec {
            a += dot(r.row(i), h);
        }
        *o = tanh_scalar(a);
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// One recurrent step on raw slices. Returns the click probability and
/// writes the new hidden state into `h_out`.
#[inline]
pub(crate) fn rnn_step_into(p: &RnnParams, x: &[f64], h_prev: &[f64], h_out: &mut [f64]) -> f64 {
    hidden_activation(&p.u, p.b_h.as_slice(), x, Some((&p.r, h_prev)), h_out);
    sigmoid(dot(p.v.row(0), h_out) + p.b_o)
}

/// Advances the recurrent network by one impression.
pub fn rnn_step(p: &RnnParams, x: &FeatureVector, h_prev: &HiddenState) -> Result<(HiddenState, f64), ModelError> {
    check_input(p.input_width(), x.len())?;
    if h_prev.len() != p.hidden_size() {
        return Err(ModelError::HiddenWidth {
            expected: p.hidden_size(),
            got: h_prev.len(),
        });
    }
    let mut h = vec![0.0; p.hidden_size()];
    let prob = rnn_step_into(p, x.as_slice(), h_prev.as_slice(), &mut h);
    Ok((HiddenState(Vector::from_vec(h)), prob))
}

#[inline]
pub(crate) fn nn_forward_into(p: &NnParams, x: &[f64], hidden: &mut [f64]) -> f64 {
    hidden_activation(&p.w1, p.b1.as_slice(), x, None, hidden);
    sigmoid(dot(p.w2.row(0), hidden) + p.b2)
}

pub fn nn_forward(p: &NnParams, x: &FeatureVector) -> Result<f64, ModelError> {
    check_input(p.input_width(), x.len())?;
    let mut hidden = vec![0.0; p.hidden_size()];
    Ok(nn_forward_into(p, x.as_slice(), &mut hidden))
}

#[inline]
pub(crate) fn lr_logit(p: &LrParams, x: &[f64]) -> f64 {
    dot(p.w.as_slice(), x) + p.b
}

pub fn lr_forward(p: &LrParams, x: &FeatureVector) -> Result<f64, ModelError> {
    check_input(p.input_width(), x.len())?;
    Ok(sigmoid(lr_logit(p, x.as_slice())))
}

/// Any of the three trained predictors.
#[derive(Debug, Clone, PartialEq)]
pub enum Model {
    Lr(LrParams),
    Nn(NnParams),
    Rnn(RnnParams),
}

impl Model {
    pub fn kind(&self) -> ModelKind {
        match self {
            Model::Lr(_) => ModelKind::Lr,
            Model::Nn(_) => ModelKind::Nn,
            Model::Rnn(_) => ModelKind::Rnn,
        }
    }

    pub fn input_width(&self) -> usize {
        match self {
            Model::Lr(p) => p.input_width(),
            Model::Nn(p) => p.input_width(),
            Model::Rnn(p) => p.input_width(),
        }
    }

    /// Hidden size; zero for logistic regression.
    pub fn hidden_size(&self) -> usize {
        match self {
            Model::Lr(_) => 0,
            Model::Nn(p) => p.hidden_size(),
            Model::Rnn(p) => p.hidden_size(),
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        match self {
            Model::Lr(p) => p.validate(),
            Model::Nn(p) => p.validate(),
            Model::Rnn(p) => p.validate(),
        }
    }

    /// Click probabilities for one user's featurized impressions, in order.
    /// The recurrent model starts from the zero state and carries it forward.
    pub fn predict_sequence(&self, features: &[FeatureVector]) -> Result<Vec<f64>, ModelError> {
        for f in features {
            check_input(self.input_width(), f.len())?;
        }
        Ok(match self {
            Model::Lr(p) => features.iter().map(|f| sigmoid(lr_logit(p, f.as_slice()))).collect(),
            Model::Nn(p) => {
                let mut hidden = vec![0.0; p.hidden_size()];
                features.iter().map(|f| nn_forward_into(p, f.as_slice(), &mut hidden)).collect()
            }
            Model::Rnn(p) => {
                let mut h = vec![0.0; p.hidden_size()];
                let mut next = h.clone();
                features
                    .iter()
                    .map(|f| {
                        let y = rnn_step_into(p, f.as_slice(), &h, &mut next);
                        std::mem::swap(&mut h, &mut next);
                        y
                    })
                    .collect()
            }
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use crate::numkernel::Rng;

    fn fv(v: Vec<f64>) -> FeatureVector {
        FeatureVector(Vector::from_vec(v))
    }

    fn random_rnn(d: usize, h: usize, rng: &mut Rng) -> RnnParams {
        let mut p = RnnParams::init(d, h, 0.8, rng).unwrap();
        for b in p.b_h.as_mut_slice() {
            *b = rng.uniform_symmetric(0.5);
        }
        p.b_o = rng.uniform_symmetric(0.5);
        p
    }

    fn random_x(d: usize, rng: &mut Rng) -> Vec<f64> {
        (0..d).map(|_| rng.uniform_symmetric(1.5)).collect()
    }

    /// Scalar-loop transcription of the recurrent step, independent of the
    /// row-slice helpers used by the implementation.
    fn loop_rnn(p: &RnnParams, x: &[f64], h_prev: &[f64]) -> (Vec<f64>, f64) {
        let hsz = p.u.rows();
        let mut h = vec![0.0; hsz];
        for i in 0..hsz {
            let mut a = 0.0;
            for j in 0..x.len() {
                a += x[j] * p.u.get(i, j);
            }
            for k in 0..hsz {
                a += h_prev[k] * p.r.get(i, k);
            }
            a += p.b_h[i];
            let e = (-2.0 * a).exp();
            h[i] = (1.0 - e) / (1.0 + e);
        }
        let mut z = p.b_o;
        for i in 0..hsz {
            z += h[i] * p.v.get(0, i);
        }
        (h, 1.0 / (1.0 + (-z).exp()))
    }

    #[test]
    fn zero_rnn_outputs_half() {
        let p = RnnParams::zeros(4, 3);
        let (h, y) = rnn_step(&p, &fv(vec![1.0, -2.0, 3.0, 0.5]), &HiddenState::zeros(3)).unwrap();
        assert_eq!(h.as_slice(), &[0.0, 0.0, 0.0]);
        assert_eq!(y, 0.5);
    }

    #[test]
    fn zero_previous_state_ignores_recurrence() {
        let mut rng = Rng::new(3);
        let p = random_rnn(4, 3, &mut rng);
        let x = fv(random_x(4, &mut rng));
        let (_, y) = rnn_step(&p, &x, &HiddenState::zeros(3)).unwrap();
        let mut no_r = p.clone();
        no_r.r = Matrix::zeros(3, 3);
        let (_, y2) = rnn_step(&no_r, &x, &HiddenState::zeros(3)).unwrap();
        assert_eq!(y, y2);
        assert_eq!(nn_forward(&p.feedforward_part(), &x).unwrap(), y);
    }

    #[test]
    fn rnn_matches_loop_oracle() {
        let mut rng = Rng::new(11);
        for _ in 0..50 {
            let p = random_rnn(4, 3, &mut rng);
            let x = random_x(4, &mut rng);
            let hp: Vec<f64> = (0..3).map(|_| rng.uniform_symmetric(0.99)).collect();
            let (h, y) = rnn_step(&p, &fv(x.clone()), &HiddenState(Vector::from_vec(hp.clone()))).unwrap();
            let (h_ref, y_ref) = loop_rnn(&p, &x, &hp);
            for (a, b) in h.as_slice().iter().zip(&h_ref) {
                assert!((a - b).abs() < 1e-14, "{a} vs {b}");
            }
            assert!((y - y_ref).abs() < 1e-14);
        }
    }

    #[test]
    fn nn_matches_loop_oracle() {
        let mut rng = Rng::new(12);
        for _ in 0..50 {
            let p = random_rnn(5, 4, &mut rng);
            let nn = p.feedforward_part();
            let x = random_x(5, &mut rng);
            let (_, y_ref) = loop_rnn(&p, &x, &[0.0; 4]);
            assert!((nn_forward(&nn, &fv(x)).unwrap() - y_ref).abs() < 1e-14);
        }
        assert_eq!(nn_forward(&NnParams::zeros(3, 2), &fv(vec![1.0, 2.0, 3.0])).unwrap(), 0.5);
    }

    #[test]
    fn lr_examples() {
        assert_eq!(lr_forward(&LrParams::zeros(3), &fv(vec![1.0, 2.0, 3.0])).unwrap(), 0.5);
        let mut rng = Rng::new(13);
        for _ in 0..50 {
            let w = random_x(6, &mut rng);
            let x = random_x(6, &mut rng);
            let b = rng.uniform_symmetric(1.0);
            let mut z = b;
            for i in 0..6 {
                z += w[i] * x[i];
            }
            let oracle = 1.0 / (1.0 + (-z).exp());
            let p = LrParams { w: Vector::from_vec(w.clone()), b };
            let y = lr_forward(&p, &fv(x.clone())).unwrap();
            assert!((y - oracle).abs() < 1e-15);

            let c = 4.0;
            let scaled = LrParams {
                w: Vector::from_vec(w.iter().map(|v| v / c).collect()),
                b,
            };
            let xs = fv(x.iter().map(|v| v * c).collect());
            assert!((lr_forward(&scaled, &xs).unwrap() - y).abs() < 1e-15);
        }
    }

    #[test]
    fn dimension_mismatch_errors() {
        let p = RnnParams::zeros(4, 3);
        assert_eq!(
            rnn_step(&p, &fv(vec![0.0; 5]), &HiddenState::zeros(3)).unwrap_err(),
            ModelError::InputWidth { expected: 4, got: 5 }
        );
        assert!(matches!(
            rnn_step(&p, &fv(vec![0.0; 4]), &HiddenState::zeros(2)),
            Err(ModelError::HiddenWidth { .. })
        ));
        assert!(nn_forward(&NnParams::zeros(4, 2), &fv(vec![0.0; 3])).is_err());
        assert!(lr_forward(&LrParams::zeros(4), &fv(vec![0.0; 3])).is_err());
    }

    #[test]
    fn validate_catches_shape_and_nan() {
        let mut p = RnnParams::zeros(4, 3);
        p.validate().unwrap();
        p.b_h = Vector::zeros(2);
        assert!(matches!(p.validate(), Err(ModelError::Shape(_))));
        let mut p = RnnParams::zeros(4, 3);
        p.r.set(0, 0, f64::NAN);
        assert_eq!(p.validate(), Err(ModelError::NonFinite("R")));
    }

    #[test]
    fn predict_sequence_matches_stepwise() {
        let mut rng = Rng::new(21);
        let p = random_rnn(5, 3, &mut rng);
        let feats: Vec<FeatureVector> = (0..6).map(|_| fv(random_x(5, &mut rng))).collect();
        let batch = Model::Rnn(p.clone()).predict_sequence(&feats).unwrap();
        let mut h = HiddenState::zeros(3);
        for (f, y) in feats.iter().zip(batch) {
            let (next, y_step) = rnn_step(&p, f, &h).unwrap();
            assert_eq!(y, y_step);
            h = next;
        }
    }

    proptest! {
        #[test]
        fn outputs_bounded_and_deterministic(seed in any::<u64>(), scale in 0.01f64..5.0) {
            let mut rng = Rng::new(seed);
            let p = RnnParams::init(6, 4, scale, &mut rng).unwrap();
            let x = fv(random_x(6, &mut rng));
            let hp = HiddenState(Vector::from_vec((0..4).map(|_| rng.uniform_symmetric(1.0)).collect()));
            let (h1, y1) = rnn_step(&p, &x, &hp).unwrap();
            let (h2, y2) = rnn_step(&p, &x, &hp).unwrap();
            prop_assert_eq!(&h1, &h2);
            prop_assert_eq!(y1, y2);
            prop_assert!(y1 > 0.0 && y1 < 1.0);
            prop_assert!(h1.as_slice().iter().all(|v| v.abs() < 1.0));
        }

        #[test]
        fn larger_output_bias_raises_probability(seed in any::<u64>(), delta in 0.01f64..3.0) {
            let mut rng = Rng::new(seed);
            let p = RnnParams::init(6, 4, 0.5, &mut rng).unwrap();
            let x = fv(random_x(6, &mut rng));
            let (_, y) = rnn_step(&p, &x, &HiddenState::zeros(4)).unwrap();
            let mut q = p.clone();
            q.b_o += delta;
            let (_, y2) = rnn_step(&q, &x, &HiddenState::zeros(4)).unwrap();
            prop_assert!(y2 > y);
        }
    }
}
