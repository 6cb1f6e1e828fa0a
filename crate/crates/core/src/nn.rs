//! Layers and losses for the soft and hard networks.
//!
//! Layers hold their parameters as plain [`Tensor`]s; forward functions take
//! the tape variables the parameters were bound to, so the same layer can be
//! evaluated with full, channel-scaled, or sliced weights.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct LinearLayer {
    /// `[C_out, C_in]`
    pub weight: Tensor,
    /// `[C_out]`
    pub bias: Tensor,
}

impl LinearLayer {
    pub fn new(weight: Tensor, bias: Tensor) -> Result<Self> {
        match (weight.shape(), bias.shape()) {
            ([c_out, _], [b]) if c_out == b => Ok(LinearLayer { weight, bias }),
            (w, b) => Err(Error::shape("linear", format!("weight {w:?} with bias {b:?}"))),
        }
    }

    /// Uniform `(-1/sqrt(C_in), 1/sqrt(C_in))` initialization for weights and bias.
    pub fn init<R: Rng + ?Sized>(c_in: usize, c_out: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (c_in as f64).sqrt();
        LinearLayer {
            weight: uniform(&[c_out, c_in], bound, rng),
            bias: uniform(&[c_out], bound, rng),
        }
    }

    pub fn in_features(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_features(&self) -> usize {
        self.weight.shape()[0]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    /// `[C_out, C_in, k_h, k_w]`
    pub weight: Tensor,
    /// `[C_out]`
    pub bias: Tensor,
    pub stride: usize,
    pub padding: usize,
}

impl ConvLayer {
    pub fn new(weight: Tensor, bias: Tensor, stride: usize, padding: usize) -> Result<Self> {
        if !matches!(stride, 1 | 2) {
            return Err(Error::shape("conv", format!("stride must be 1 or 2, got {stride}")));
        }
        match (weight.shape(), bias.shape()) {
            ([c_out, _, _, _], [b]) if c_out == b => Ok(ConvLayer {
                weight,
                bias,
                stride,
                padding,
            }),
            (w, b) => Err(Error::shape("conv", format!("weight {w:?} with bias {b:?}"))),
        }
    }

    pub fn init<R: Rng + ?Sized>(
        c_in: usize,
        c_out: usize,
        kernel: [usize; 2],
        stride: usize,
        padding: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let bound = 1.0 / ((c_in * kernel[0] * kernel[1]) as f64).sqrt();
        ConvLayer::new(
            uniform(&[c_out, c_in, kernel[0], kernel[1]], bound, rng),
            uniform(&[c_out], bound, rng),
            stride,
            padding,
        )
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn kernel(&self) -> [usize; 2] {
        [self.weight.shape()[2], self.weight.shape()[3]]
    }
}

fn uniform<R: Rng + ?Sized>(shape: &[usize], bound: f64, rng: &mut R) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::from_parts(shape.to_vec(), data)
}

/// Multiplies channel `j` (axis 1) of `y` by `scale[j]`.
pub fn scale_channels(tape: &mut Tape, y: Var, scale: Var) -> Result<Var> {
    let shape = tape.shape(y).to_vec();
    let s = tape.broadcast(scale, &shape, Some(1))?;
    tape.mul(y, s)
}

/// `y = x W^T + b`, then each output channel times `out_scale[j]` when given.
///
/// The scale multiplies after the bias is added, so a zero entry removes the
/// channel's weight row and its bias.
pub fn linear_forward(
    tape: &mut Tape,
    weight: Var,
    bias: Var,
    x: Var,
    out_scale: Option<Var>,
) -> Result<Var> {
    let (xs, ws) = (tape.shape(x), tape.shape(weight));
    if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
        return Err(Error::shape("linear", format!("input {xs:?} with weight {ws:?}")));
    }
    let wt = tape.transpose(weight)?;
    let y = tape.matmul(x, wt)?;
    let shape = tape.shape(y).to_vec();
    let b = tape.broadcast(bias, &shape, Some(1))?;
    let y = tape.add(y, b)?;
    match out_scale {
        Some(s) => scale_channels(tape, y, s),
        None => Ok(y),
    }
}

/// Convolution plus per-channel bias, with the same channel-scaling contract
/// as [`linear_forward`].
pub fn conv2d_forward(
    tape: &mut Tape,
    weight: Var,
    bias: Var,
    stride: usize,
    padding: usize,
    x: Var,
    out_scale: Option<Var>,
) -> Result<Var> {
    let y = tape.conv2d(x, weight, stride, padding)?;
    let shape = tape.shape(y).to_vec();
    let b = tape.broadcast(bias, &shape, Some(1))?;
    let y = tape.add(y, b)?;
    match out_scale {
        Some(s) => scale_channels(tape, y, s),
        None => Ok(y),
    }
}

/// Target distribution `(1 - eps) * onehot + eps / K`, one row per label.
pub fn smoothed_targets(labels: &[usize], num_classes: usize, smoothing: f64) -> Result<Tensor> {
    if !(0.0..1.0).contains(&smoothing) {
        return Err(Error::Contract(format!("label smoothing must lie in [0, 1), got {smoothing}")));
    }
    let off = smoothing / num_classes as f64;
    let mut q = vec![off; labels.len() * num_classes];
    for (row, &y) in labels.iter().enumerate() {
        if y >= num_classes {
            return Err(Error::Contract(format!("label {y} out of range for {num_classes} classes")));
        }
        q[row * num_classes + y] += 1.0 - smoothing;
    }
    Tensor::new(vec![labels.len(), num_classes], q)
}

/// Batch mean of `-sum_i q_i log softmax(logits)_i` with label-smoothed `q`.
pub fn cross_entropy(tape: &mut Tape, logits: Var, labels: &[usize], smoothing: f64) -> Result<Var> {
    let &[batch, classes] = tape.shape(logits) else {
        return Err(Error::shape("cross_entropy", format!("logits {:?}", tape.shape(logits))));
    };
    if labels.len() != batch {
        return Err(Error::shape("cross_entropy", format!("{batch} logits rows, {} labels", labels.len())));
    }
    let q = tape.constant(smoothed_targets(labels, classes, smoothing)?);
    let logp = tape.log_softmax(logits)?;
    let weighted = tape.mul(logp, q)?;
    let total = tape.sum(weighted)?;
    tape.scale(total, -1.0 / batch as f64)
}

/// Batch mean of `KL(softmax(teacher) || softmax(student))`.
///
/// Gradient reaches whichever argument is still attached to the graph.
pub fn kl_gap(tape: &mut Tape, teacher: Var, student: Var) -> Result<Var> {
    let shape = tape.shape(teacher).to_vec();
    if shape != tape.shape(student) {
        return Err(Error::shape("kl_gap", format!("{shape:?} vs {:?}", tape.shape(student))));
    }
    let rows = if shape.len() > 1 { shape[..shape.len() - 1].iter().product() } else { 1 };
    let p = tape.softmax(teacher)?;
    let logp = tape.log_softmax(teacher)?;
    let logq = tape.log_softmax(student)?;
    let diff = tape.sub(logp, logq)?;
    let terms = tape.mul(p, diff)?;
    let total = tape.sum(terms)?;
    tape.scale(total, 1.0 / rows as f64)
}

/// Which network acts as the distillation teacher inside the gap measure.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GapDirection {
    /// `G(y_h, y_s) = KL(softmax(y_s) || softmax(y_h))`
    #[default]
    SoftTeacher,
    /// `G(y_h, y_s) = KL(softmax(y_h) || softmax(y_s))`
    HardTeacher,
}

/// The gap measure `G(y_h, y_s)` between hard and soft logits.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GapMeasure {
    pub direction: GapDirection,
    pub temperature: f64,
}

impl Default for GapMeasure {
    fn default() -> Self {
        GapMeasure {
            direction: GapDirection::SoftTeacher,
            temperature: 1.0,
        }
    }
}

impl GapMeasure {
    pub fn eval(&self, tape: &mut Tape, hard: Var, soft: Var) -> Result<Var> {
        let (hard, soft) = if self.temperature == 1.0 {
            (hard, soft)
        } else {
            let inv = 1.0 / self.temperature;
            (tape.scale(hard, inv)?, tape.scale(soft, inv)?)
        };
        match self.direction {
            GapDirection::SoftTeacher => kl_gap(tape, soft, hard),
            GapDirection::HardTeacher => kl_gap(tape, hard, soft),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn eye2() -> Tensor {
        Tensor::matrix(&[&[1.0, 0.0], &[0.0, 1.0]]).unwrap()
    }

    #[test]
    fn linear_identity_and_masked_channel() {
        let mut t = Tape::new();
        let w = t.constant(eye2());
        let b0 = t.constant(Tensor::vector(vec![0.0, 0.0]));
        let x = t.constant(Tensor::matrix(&[&[1.0, 2.0]]).unwrap());
        let y = linear_forward(&mut t, w, b0, x, None).unwrap();
        assert_eq!(t.value(y).values(), &[1.0, 2.0]);

        let b1 = t.constant(Tensor::vector(vec![1.0, 1.0]));
        let s = t.constant(Tensor::vector(vec![1.0, 0.0]));
        let y = linear_forward(&mut t, w, b1, x, Some(s)).unwrap();
        assert_eq!(t.value(y).values(), &[2.0, 0.0]);
    }

    #[test]
    fn linear_weight_gradient_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let layer = LinearLayer::init(4, 5, &mut rng);
        let x = uniform(&[3, 4], 1.0, &mut rng);
        let bias = layer.bias.clone();
        let f = |t: &mut Tape, w: Var| {
            let b = t.constant(bias.clone());
            let xv = t.constant(x.clone());
            let y = linear_forward(t, w, b, xv, None)?;
            t.sum(y)
        };
        let r = grad_check(f, &layer.weight, 1e-5).unwrap();
        assert!(r.max_rel_error < 1e-6, "{}", r.max_rel_error);
    }

    #[test]
    fn conv_identity_and_sum_kernels() {
        let mut t = Tape::new();
        let x = Tensor::new(vec![1, 1, 2, 3], vec![1.0, -2.0, 3.0, 4.0, 5.0, -6.0]).unwrap();
        let xv = t.constant(x.clone());
        let k = t.constant(Tensor::ones(&[1, 1, 1, 1]));
        let b = t.constant(Tensor::vector(vec![0.0]));
        let y = conv2d_forward(&mut t, k, b, 1, 0, xv, None).unwrap();
        assert_eq!(t.value(y), &x);

        let ones = t.constant(Tensor::ones(&[1, 1, 2, 2]));
        let k2 = t.constant(Tensor::ones(&[1, 1, 2, 2]));
        let y = conv2d_forward(&mut t, k2, b, 1, 0, ones, None).unwrap();
        assert_eq!(t.value(y).shape(), &[1, 1, 1, 1]);
        assert_eq!(t.value(y).item(), 4.0);
    }

    #[test]
    fn conv_gradients_match_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let layer = ConvLayer::init(2, 3, [3, 3], 1, 1, &mut rng).unwrap();
        let x = uniform(&[2, 2, 4, 4], 1.0, &mut rng);
        let bias = layer.bias.clone();
        let input = x.clone();
        let f = |t: &mut Tape, k: Var| {
            let b = t.constant(bias.clone());
            let xv = t.constant(input.clone());
            let y = conv2d_forward(t, k, b, 1, 1, xv, None)?;
            let y = t.square(y)?;
            t.sum(y)
        };
        let r = grad_check(f, &layer.weight, 1e-5).unwrap();
        assert!(r.max_rel_error < 1e-6, "kernel {}", r.max_rel_error);

        let kernel = layer.weight.clone();
        let g = |t: &mut Tape, xv: Var| {
            let b = t.constant(bias.clone());
            let k = t.constant(kernel.clone());
            let y = conv2d_forward(t, k, b, 2, 1, xv, None)?;
            let y = t.square(y)?;
            t.sum(y)
        };
        let r = grad_check(g, &x, 1e-5).unwrap();
        assert!(r.max_rel_error < 1e-6, "input {}", r.max_rel_error);
    }

    #[test]
    fn invalid_conv_geometry_is_dimension_error() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::zeros(&[1, 1, 2, 2]));
        let k = t.constant(Tensor::zeros(&[1, 1, 3, 3]));
        let b = t.constant(Tensor::vector(vec![0.0]));
        assert!(matches!(
            conv2d_forward(&mut t, k, b, 1, 0, x, None),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn cross_entropy_reference_values() {
        let mut t = Tape::new();
        let z = t.constant(Tensor::matrix(&[&[0.0, 0.0]]).unwrap());
        let l = cross_entropy(&mut t, z, &[0], 0.0).unwrap();
        assert!((t.value(l).item() - std::f64::consts::LN_2).abs() < 1e-15);

        let z = t.constant(Tensor::matrix(&[&[60.0, 0.0]]).unwrap());
        let l = cross_entropy(&mut t, z, &[0], 0.0).unwrap();
        assert!(t.value(l).item() < 1e-20);

        // K=4, logits [1,0,0,0], label 0, eps 0.1; q = [0.925, 0.025, 0.025, 0.025]
        // log-partition = ln(e + 3); loss = ln(e+3) - 0.925.
        let z = t.constant(Tensor::matrix(&[&[1.0, 0.0, 0.0, 0.0]]).unwrap());
        let l = cross_entropy(&mut t, z, &[0], 0.1).unwrap();
        let expected = (std::f64::consts::E + 3.0).ln() - 0.925;
        assert!((t.value(l).item() - expected).abs() < 1e-14);
        assert!((expected - 0.818668380628679).abs() < 1e-14);
    }

    #[test]
    fn cross_entropy_rejects_bad_label() {
        let mut t = Tape::new();
        let z = t.constant(Tensor::zeros(&[1, 3]));
        assert!(matches!(cross_entropy(&mut t, z, &[3], 0.0), Err(Error::Contract(_))));
    }

    #[test]
    fn kl_gap_reference_values() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::matrix(&[&[0.3, -1.0, 2.0]]).unwrap());
        let z = kl_gap(&mut t, a, a).unwrap();
        assert_eq!(t.value(z).item(), 0.0);

        let teacher = t.constant(Tensor::matrix(&[&[60.0, 0.0]]).unwrap());
        let student = t.constant(Tensor::matrix(&[&[0.0, 0.0]]).unwrap());
        let d = kl_gap(&mut t, teacher, student).unwrap();
        assert!((t.value(d).item() - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn gap_direction_swaps_teacher() {
        let mut t = Tape::new();
        let h = t.constant(Tensor::matrix(&[&[1.0, 0.0, -1.0]]).unwrap());
        let s = t.constant(Tensor::matrix(&[&[0.0, 2.0, 0.5]]).unwrap());
        let soft_teacher = GapMeasure::default().eval(&mut t, h, s).unwrap();
        let direct = kl_gap(&mut t, s, h).unwrap();
        assert_eq!(t.value(soft_teacher), t.value(direct));
        let hard_teacher = GapMeasure {
            direction: GapDirection::HardTeacher,
            temperature: 1.0,
        }
        .eval(&mut t, h, s)
        .unwrap();
        let direct = kl_gap(&mut t, h, s).unwrap();
        assert_eq!(t.value(hard_teacher), t.value(direct));
    }
}
