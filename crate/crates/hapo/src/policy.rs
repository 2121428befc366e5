//! Categorical softmax policy over the 4-action vocabulary.
//!
//! The default experiment policy is a single tanh hidden layer with a
//! zero-initialized output layer (so the starting distribution is uniform);
//! a plain linear-softmax head is available for the smallest-footprint
//! configuration. Gradients are analytic — no autodiff.

use std::fmt::Write as _;

use rand::Rng;

use crate::encode::PolicyFeatures;
use crate::error::{HapoError, HapoResult};
use crate::grid::{NavAction, ACTION_COUNT};
use crate::rng::rng_from_seed;

/// Dense row-major matrix, just big enough for this crate's needs.
#[derive(Clone, Debug, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Mat {
        Mat {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn at_mut(&mut self, r: usize, c: usize) -> &mut f64 {
        &mut self.data[r * self.cols + c]
    }
}

/// Policy weights. `Linear` is the featuresᵀ·W contract; `Mlp` inserts one
/// tanh layer for capacity (output layer zero-initialized, so both variants
/// start out as the uniform policy).
#[derive(Clone, Debug, PartialEq)]
pub enum PolicyParams {
    Linear { w: Mat },
    Mlp { w1: Mat, w2: Mat },
}

impl PolicyParams {
    pub fn linear_zeros(feature_dim: usize) -> PolicyParams {
        PolicyParams::Linear {
            w: Mat::zeros(feature_dim, ACTION_COUNT),
        }
    }

    /// Linear weights seeded N(0, 0.3); useful for non-degenerate fixtures.
    pub fn linear_random(feature_dim: usize, seed: u64) -> PolicyParams {
        let mut rng = rng_from_seed(seed);
        let mut w = Mat::zeros(feature_dim, ACTION_COUNT);
        for v in w.data.iter_mut() {
            *v = 0.3 * standard_normal(&mut rng);
        }
        PolicyParams::Linear { w }
    }

    /// Hidden layer seeded N(0, 0.3), output layer zeros.
    pub fn mlp(feature_dim: usize, hidden: usize, seed: u64) -> PolicyParams {
        let mut rng = rng_from_seed(seed);
        let mut w1 = Mat::zeros(feature_dim, hidden);
        for v in w1.data.iter_mut() {
            *v = 0.3 * standard_normal(&mut rng);
        }
        PolicyParams::Mlp {
            w1,
            w2: Mat::zeros(hidden, ACTION_COUNT),
        }
    }

    /// Uniform-start policy for the given architecture choice.
    pub fn init(feature_dim: usize, hidden_width: usize, seed: u64) -> PolicyParams {
        if hidden_width == 0 {
            PolicyParams::linear_zeros(feature_dim)
        } else {
            PolicyParams::mlp(feature_dim, hidden_width, seed)
        }
    }

    pub fn feature_dim(&self) -> usize {
        match self {
            PolicyParams::Linear { w } => w.rows,
            PolicyParams::Mlp { w1, .. } => w1.rows,
        }
    }

    pub fn hidden_width(&self) -> usize {
        match self {
            PolicyParams::Linear { .. } => 0,
            PolicyParams::Mlp { w1, .. } => w1.cols,
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            PolicyParams::Linear { w } => w.data.len(),
            PolicyParams::Mlp { w1, w2 } => w1.data.len() + w2.data.len(),
        }
    }

    /// Flat parameter view in a fixed order; used by finite-difference tests.
    pub fn to_flat(&self) -> Vec<f64> {
        match self {
            PolicyParams::Linear { w } => w.data.clone(),
            PolicyParams::Mlp { w1, w2 } => {
                let mut v = w1.data.clone();
                v.extend_from_slice(&w2.data);
                v
            }
        }
    }

    pub fn set_flat(&mut self, flat: &[f64]) {
        match self {
            PolicyParams::Linear { w } => w.data.copy_from_slice(flat),
            PolicyParams::Mlp { w1, w2 } => {
                let split = w1.data.len();
                w1.data.copy_from_slice(&flat[..split]);
                w2.data.copy_from_slice(&flat[split..]);
            }
        }
    }

    fn logits(&self, x: &[f64]) -> [f64; ACTION_COUNT] {
        let mut z = [0.0; ACTION_COUNT];
        match self {
            PolicyParams::Linear { w } => {
                for (f, &xf) in x.iter().enumerate() {
                    if xf != 0.0 {
                        for (j, zj) in z.iter_mut().enumerate() {
                            *zj += xf * w.at(f, j);
                        }
                    }
                }
            }
            PolicyParams::Mlp { w1, w2 } => {
                let h = hidden_activations(w1, x);
                for (k, &hk) in h.iter().enumerate() {
                    for (j, zj) in z.iter_mut().enumerate() {
                        *zj += hk * w2.at(k, j);
                    }
                }
            }
        }
        z
    }

    /// Gradient ascent step: `self += lr · grad`.
    pub fn apply_step(&mut self, grad: &PolicyGrad, lr: f64) {
        match (self, grad) {
            (PolicyParams::Linear { w }, PolicyGrad::Linear { dw }) => {
                for (p, g) in w.data.iter_mut().zip(&dw.data) {
                    *p += lr * g;
                }
            }
            (PolicyParams::Mlp { w1, w2 }, PolicyGrad::Mlp { dw1, dw2 }) => {
                for (p, g) in w1.data.iter_mut().zip(&dw1.data) {
                    *p += lr * g;
                }
                for (p, g) in w2.data.iter_mut().zip(&dw2.data) {
                    *p += lr * g;
                }
            }
            _ => panic!("gradient shape does not match parameter shape"),
        }
    }

    /// FNV-1a over the parameter bit patterns; the reference-freeze check.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for x in self.to_flat() {
            for b in x.to_bits().to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
        h
    }
}

fn standard_normal<R: Rng>(rng: &mut R) -> f64 {
    // Box-Muller; avoids pulling in a distributions crate for one use.
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

fn hidden_activations(w1: &Mat, x: &[f64]) -> Vec<f64> {
    let mut pre = vec![0.0; w1.cols];
    for (f, &xf) in x.iter().enumerate() {
        if xf != 0.0 {
            for (k, p) in pre.iter_mut().enumerate() {
                *p += xf * w1.at(f, k);
            }
        }
    }
    for p in pre.iter_mut() {
        *p = p.tanh();
    }
    pre
}

/// Softmax output with the raw logits kept alongside.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ActionDistribution {
    pub logits: [f64; ACTION_COUNT],
    pub probs: [f64; ACTION_COUNT],
}

impl ActionDistribution {
    /// Numerically stable log π(a): `(z_a − m) − ln Σ exp(z − m)`.
    pub fn log_prob(&self, action: NavAction) -> f64 {
        let m = self.logits.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let lse: f64 = self.logits.iter().map(|&z| (z - m).exp()).sum();
        (self.logits[action.id()] - m) - lse.ln()
    }
}

/// Softmax of featuresᵀ·weights with max-subtraction.
pub fn action_distribution(
    features: &PolicyFeatures,
    params: &PolicyParams,
) -> HapoResult<ActionDistribution> {
    if features.vector.len() != params.feature_dim() {
        return Err(HapoError::Domain(format!(
            "feature dim {} does not match policy dim {}",
            features.vector.len(),
            params.feature_dim()
        )));
    }
    if features.vector.iter().any(|x| !x.is_finite()) {
        return Err(HapoError::Domain("non-finite feature entry".into()));
    }
    let logits = params.logits(&features.vector);
    let m = logits.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let mut probs = [0.0; ACTION_COUNT];
    let mut sum = 0.0;
    for (p, &z) in probs.iter_mut().zip(&logits) {
        *p = (z - m).exp();
        sum += *p;
    }
    for p in probs.iter_mut() {
        *p /= sum;
    }
    Ok(ActionDistribution { logits, probs })
}

/// Inverse-CDF draw over action ids in ascending order; consumes exactly one
/// uniform variate per call.
pub fn sample_action<R: Rng>(dist: &ActionDistribution, rng: &mut R) -> (NavAction, f64) {
    let u: f64 = rng.gen();
    let mut cum = 0.0;
    let mut chosen = NavAction::ALL[ACTION_COUNT - 1];
    for action in NavAction::ALL {
        cum += dist.probs[action.id()];
        if u < cum {
            chosen = action;
            break;
        }
    }
    (chosen, dist.log_prob(chosen))
}

/// Argmax decode; ties break toward the lowest action id.
pub fn greedy_action(dist: &ActionDistribution) -> NavAction {
    let mut best = NavAction::MoveForward;
    let mut best_p = dist.probs[0];
    for action in NavAction::ALL {
        if dist.probs[action.id()] > best_p {
            best_p = dist.probs[action.id()];
            best = action;
        }
    }
    best
}

/// Exact 4-term KL(p ‖ q).
pub fn kl_divergence(p: &ActionDistribution, q: &ActionDistribution) -> f64 {
    let mut kl = 0.0;
    for a in 0..ACTION_COUNT {
        if p.probs[a] > 0.0 {
            kl += p.probs[a] * (p.probs[a].ln() - q.probs[a].ln());
        }
    }
    kl
}

/// Gradient accumulator mirroring the parameter shapes.
#[derive(Clone, Debug)]
pub enum PolicyGrad {
    Linear { dw: Mat },
    Mlp { dw1: Mat, dw2: Mat },
}

impl PolicyGrad {
    pub fn zeros_like(params: &PolicyParams) -> PolicyGrad {
        match params {
            PolicyParams::Linear { w } => PolicyGrad::Linear {
                dw: Mat::zeros(w.rows, w.cols),
            },
            PolicyParams::Mlp { w1, w2 } => PolicyGrad::Mlp {
                dw1: Mat::zeros(w1.rows, w1.cols),
                dw2: Mat::zeros(w2.rows, w2.cols),
            },
        }
    }

    pub fn to_flat(&self) -> Vec<f64> {
        match self {
            PolicyGrad::Linear { dw } => dw.data.clone(),
            PolicyGrad::Mlp { dw1, dw2 } => {
                let mut v = dw1.data.clone();
                v.extend_from_slice(&dw2.data);
                v
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        match self {
            PolicyGrad::Linear { dw } => dw.data.iter_mut().for_each(|g| *g *= s),
            PolicyGrad::Mlp { dw1, dw2 } => {
                dw1.data.iter_mut().for_each(|g| *g *= s);
                dw2.data.iter_mut().for_each(|g| *g *= s);
            }
        }
    }

    /// Elementwise `self += other`; shapes must match.
    pub fn add_assign(&mut self, other: &PolicyGrad) {
        match (self, other) {
            (PolicyGrad::Linear { dw }, PolicyGrad::Linear { dw: o }) => {
                dw.data.iter_mut().zip(&o.data).for_each(|(g, &x)| *g += x);
            }
            (PolicyGrad::Mlp { dw1, dw2 }, PolicyGrad::Mlp { dw1: o1, dw2: o2 }) => {
                dw1.data.iter_mut().zip(&o1.data).for_each(|(g, &x)| *g += x);
                dw2.data.iter_mut().zip(&o2.data).for_each(|(g, &x)| *g += x);
            }
            _ => panic!("gradient shape mismatch"),
        }
    }

    pub fn l2_norm(&self) -> f64 {
        self.to_flat().iter().map(|g| g * g).sum::<f64>().sqrt()
    }
}

/// Accumulates `∂z/∂θ · dlogits` into `grad` — the shared backprop path for
/// the NLL, surrogate, and KL objectives.
pub fn accumulate_logit_gradient(
    params: &PolicyParams,
    x: &[f64],
    dlogits: &[f64; ACTION_COUNT],
    grad: &mut PolicyGrad,
) {
    match (params, grad) {
        (PolicyParams::Linear { .. }, PolicyGrad::Linear { dw }) => {
            for (f, &xf) in x.iter().enumerate() {
                if xf != 0.0 {
                    for (j, &dj) in dlogits.iter().enumerate() {
                        *dw.at_mut(f, j) += xf * dj;
                    }
                }
            }
        }
        (PolicyParams::Mlp { w1, w2 }, PolicyGrad::Mlp { dw1, dw2 }) => {
            let h = hidden_activations(w1, x);
            let mut dpre = vec![0.0; h.len()];
            for (k, &hk) in h.iter().enumerate() {
                let mut dh = 0.0;
                for (j, &dj) in dlogits.iter().enumerate() {
                    *dw2.at_mut(k, j) += hk * dj;
                    dh += w2.at(k, j) * dj;
                }
                dpre[k] = dh * (1.0 - hk * hk);
            }
            for (f, &xf) in x.iter().enumerate() {
                if xf != 0.0 {
                    for (k, &dk) in dpre.iter().enumerate() {
                        *dw1.at_mut(f, k) += xf * dk;
                    }
                }
            }
        }
        _ => panic!("gradient shape does not match parameter shape"),
    }
}

/// ∇θ log π(a|s). For the linear head this is the familiar
/// `features · (1[j=a] − probs[j])` outer product.
pub fn log_prob_gradient(
    features: &PolicyFeatures,
    action: NavAction,
    params: &PolicyParams,
) -> HapoResult<PolicyGrad> {
    let dist = action_distribution(features, params)?;
    let mut dlogits = [0.0; ACTION_COUNT];
    for (j, d) in dlogits.iter_mut().enumerate() {
        *d = (j == action.id()) as u8 as f64 - dist.probs[j];
    }
    let mut grad = PolicyGrad::zeros_like(params);
    accumulate_logit_gradient(params, &features.vector, &dlogits, &mut grad);
    Ok(grad)
}

/// Immutable snapshot of the post-warm-up policy, the KL anchor during RL.
#[derive(Clone, Debug)]
pub struct ReferencePolicy {
    params: PolicyParams,
    checksum: u64,
}

impl ReferencePolicy {
    pub fn freeze(params: &PolicyParams) -> ReferencePolicy {
        ReferencePolicy {
            params: params.clone(),
            checksum: params.checksum(),
        }
    }

    pub fn params(&self) -> &PolicyParams {
        &self.params
    }

    pub fn checksum(&self) -> u64 {
        self.checksum
    }

    pub fn verify(&self) -> bool {
        self.params.checksum() == self.checksum
    }
}

/// Plain-text checkpoint with a one-line header carrying the architecture
/// and the encoder settings needed to rebuild the feature pipeline.
pub fn checkpoint_to_string(params: &PolicyParams, encoder: &crate::encode::Encoder) -> String {
    let mut out = String::new();
    let arch = match params {
        PolicyParams::Linear { .. } => "linear",
        PolicyParams::Mlp { .. } => "mlp",
    };
    let _ = writeln!(
        out,
        "hapo-policy v1 arch={arch} f={} h={} d={} window={} delta={} classes={} t_max={}",
        params.feature_dim(),
        params.hidden_width(),
        ACTION_COUNT,
        encoder.window,
        encoder.delta,
        encoder.instruction_classes,
        encoder.t_max,
    );
    let dump = |out: &mut String, m: &Mat| {
        for r in 0..m.rows {
            let row: Vec<String> = (0..m.cols).map(|c| format!("{:?}", m.at(r, c))).collect();
            let _ = writeln!(out, "{}", row.join(" "));
        }
    };
    match params {
        PolicyParams::Linear { w } => dump(&mut out, w),
        PolicyParams::Mlp { w1, w2 } => {
            dump(&mut out, w1);
            dump(&mut out, w2);
        }
    }
    out
}

pub fn checkpoint_from_str(text: &str) -> HapoResult<(PolicyParams, crate::encode::Encoder)> {
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| HapoError::Parse("empty checkpoint".into()))?;
    let mut fields = std::collections::HashMap::new();
    let mut toks = header.split_whitespace();
    let magic = toks.next().unwrap_or("");
    let version = toks.next().unwrap_or("");
    if magic != "hapo-policy" || version != "v1" {
        return Err(HapoError::Parse(format!(
            "unrecognized checkpoint header: {header:?}"
        )));
    }
    for tok in toks {
        let (k, v) = tok
            .split_once('=')
            .ok_or_else(|| HapoError::Parse(format!("bad header field {tok:?}")))?;
        fields.insert(k.to_string(), v.to_string());
    }
    let get = |k: &str| -> HapoResult<&String> {
        fields
            .get(k)
            .ok_or_else(|| HapoError::Parse(format!("checkpoint header missing {k}")))
    };
    let parse_usize = |k: &str| -> HapoResult<usize> {
        get(k)?
            .parse()
            .map_err(|_| HapoError::Parse(format!("bad {k} in checkpoint header")))
    };
    let f = parse_usize("f")?;
    let h = parse_usize("h")?;
    let d = parse_usize("d")?;
    if d != ACTION_COUNT {
        return Err(HapoError::Parse(format!("unsupported action count {d}")));
    }
    let encoder = crate::encode::Encoder {
        window: parse_usize("window")?,
        delta: get("delta")?
            .parse()
            .map_err(|_| HapoError::Parse("bad delta in checkpoint header".into()))?,
        instruction_classes: parse_usize("classes")?,
        t_max: parse_usize("t_max")? as u32,
    };
    let mut read_mat = |rows: usize, cols: usize| -> HapoResult<Mat> {
        let mut m = Mat::zeros(rows, cols);
        for r in 0..rows {
            let line = lines
                .next()
                .ok_or_else(|| HapoError::Parse(format!("checkpoint truncated at row {r}")))?;
            let vals: Vec<&str> = line.split_whitespace().collect();
            if vals.len() != cols {
                return Err(HapoError::Parse(format!(
                    "row {r} has {} values, expected {cols}",
                    vals.len()
                )));
            }
            for (c, v) in vals.iter().enumerate() {
                *m.at_mut(r, c) = v
                    .parse()
                    .map_err(|_| HapoError::Parse(format!("bad float {v:?}")))?;
            }
        }
        Ok(m)
    };
    let params = match get("arch")?.as_str() {
        "linear" => PolicyParams::Linear { w: read_mat(f, d)? },
        "mlp" => PolicyParams::Mlp {
            w1: read_mat(f, h)?,
            w2: read_mat(h, d)?,
        },
        other => return Err(HapoError::Parse(format!("unknown arch {other:?}"))),
    };
    Ok((params, encoder))
}

pub fn save_checkpoint(
    params: &PolicyParams,
    encoder: &crate::encode::Encoder,
    path: &std::path::Path,
) -> HapoResult<()> {
    std::fs::write(path, checkpoint_to_string(params, encoder))?;
    Ok(())
}

pub fn load_checkpoint(path: &std::path::Path) -> HapoResult<(PolicyParams, crate::encode::Encoder)> {
    checkpoint_from_str(&std::fs::read_to_string(path)?)
}
