//! Single-layer ConvLSTM over a short stack of slices, with exact
//! reverse-mode gradients.
//!
//! Slices are consumed in index order as a sequence. Every step emits one
//! probability map through a 1x1 head. During the attention stage the center
//! slice's probability map is refined as `clamp(alpha * o + P)`, where
//! `o = SM * P` uses a similarity map that is held constant for
//! differentiation.

use rand::Rng;

use crate::error::{Error, Result};
use crate::field::{ScalarField2D, SliceStack};
use crate::scalar::{sigmoid, Real};

pub const GATES: [&str; 4] = ["i", "f", "o", "g"];

/// Probability clamp used inside the cross-entropy.
pub const PROB_EPS: f64 = 1e-7;

/// Gate kernels are stored gate-major: the `4 * hidden` output channels are
/// `[i; f; o; g]`, each `hidden` wide.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLSTMParams<T> {
    pub hidden: usize,
    pub kernel: usize,
    /// `(4 * hidden) x 1 x k x k`
    pub wx: Vec<T>,
    /// `(4 * hidden) x hidden x k x k`
    pub wh: Vec<T>,
    /// `4 * hidden`
    pub bias: Vec<T>,
    /// `hidden`
    pub head_w: Vec<T>,
    pub head_b: T,
    pub attention_weight: T,
}

impl<T: Real> ConvLSTMParams<T> {
    pub fn zeros(hidden: usize, kernel: usize) -> Result<Self> {
        if hidden == 0 {
            return Err(Error::param("hidden", "must be >= 1"));
        }
        if kernel % 2 == 0 {
            return Err(Error::param("kernel", format!("{kernel} must be odd")));
        }
        let kk = kernel * kernel;
        Ok(Self {
            hidden,
            kernel,
            wx: vec![T::zero(); 4 * hidden * kk],
            wh: vec![T::zero(); 4 * hidden * hidden * kk],
            bias: vec![T::zero(); 4 * hidden],
            head_w: vec![T::zero(); hidden],
            head_b: T::zero(),
            attention_weight: T::zero(),
        })
    }

    /// Glorot-uniform kernels, zero biases except the forget gate (1.0), and
    /// a zero attention weight.
    pub fn init<R: Rng>(hidden: usize, kernel: usize, rng: &mut R) -> Result<Self> {
        let mut p = Self::zeros(hidden, kernel)?;
        let kk = (kernel * kernel) as f64;
        let glorot = |fan_in: f64, fan_out: f64| (6.0 / (fan_in + fan_out)).sqrt();
        let bx = glorot(kk, hidden as f64 * kk);
        let bh = glorot(hidden as f64 * kk, hidden as f64 * kk);
        let bo = glorot(hidden as f64, 1.0);
        p.wx.iter_mut().for_each(|v| *v = T::lit(rng.gen_range(-bx..bx)));
        p.wh.iter_mut().for_each(|v| *v = T::lit(rng.gen_range(-bh..bh)));
        p.head_w.iter_mut().for_each(|v| *v = T::lit(rng.gen_range(-bo..bo)));
        p.bias[hidden..2 * hidden].iter_mut().for_each(|v| *v = T::one());
        Ok(p)
    }

    /// Same-shaped parameter set filled with zeros; used for gradients.
    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.hidden, self.kernel).expect("shape already validated")
    }

    pub fn validate(&self) -> Result<()> {
        let (h, kk) = (self.hidden, self.kernel * self.kernel);
        let ok = h > 0
            && self.kernel % 2 == 1
            && self.wx.len() == 4 * h * kk
            && self.wh.len() == 4 * h * h * kk
            && self.bias.len() == 4 * h
            && self.head_w.len() == h;
        if !ok {
            return Err(Error::Shape(format!(
                "parameters are not initialized for hidden={} kernel={}",
                self.hidden, self.kernel
            )));
        }
        if self.flat().iter().any(|v| !v.is_finite()) {
            return Err(Error::Value("non-finite parameter".into()));
        }
        Ok(())
    }

    /// Parameter count including the attention weight.
    pub fn len(&self) -> usize {
        self.wx.len() + self.wh.len() + self.bias.len() + self.head_w.len() + 2
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// All parameters in a fixed order: wx, wh, bias, head_w, head_b, attention_weight.
    pub fn flat(&self) -> Vec<T> {
        let mut v = Vec::with_capacity(self.len());
        v.extend_from_slice(&self.wx);
        v.extend_from_slice(&self.wh);
        v.extend_from_slice(&self.bias);
        v.extend_from_slice(&self.head_w);
        v.push(self.head_b);
        v.push(self.attention_weight);
        v
    }

    pub fn set_flat(&mut self, flat: &[T]) {
        assert_eq!(flat.len(), self.len(), "flat parameter length");
        let mut rest = flat;
        for dst in [&mut self.wx, &mut self.wh, &mut self.bias, &mut self.head_w] {
            let (head, tail) = rest.split_at(dst.len());
            dst.copy_from_slice(head);
            rest = tail;
        }
        self.head_b = rest[0];
        self.attention_weight = rest[1];
    }

    /// Visits each parameter mutably, in [`ConvLSTMParams::flat`] order.
    pub fn for_each_mut(&mut self, mut f: impl FnMut(&mut T)) {
        self.wx
            .iter_mut()
            .chain(self.wh.iter_mut())
            .chain(self.bias.iter_mut())
            .chain(self.head_w.iter_mut())
            .chain(std::iter::once(&mut self.head_b))
            .chain(std::iter::once(&mut self.attention_weight))
            .for_each(&mut f);
    }

    /// Named tensors with their shapes, one per gate for the gate kernels.
    pub fn named_tensors(&self) -> Vec<(String, Vec<usize>, Vec<T>)> {
        let (h, k) = (self.hidden, self.kernel);
        let (sx, sh) = (h * k * k, h * h * k * k);
        let mut out = Vec::new();
        for (g, name) in GATES.iter().enumerate() {
            out.push((format!("wx.{name}"), vec![h, 1, k, k], self.wx[g * sx..(g + 1) * sx].to_vec()));
        }
        for (g, name) in GATES.iter().enumerate() {
            out.push((format!("wh.{name}"), vec![h, h, k, k], self.wh[g * sh..(g + 1) * sh].to_vec()));
        }
        for (g, name) in GATES.iter().enumerate() {
            out.push((format!("b.{name}"), vec![h], self.bias[g * h..(g + 1) * h].to_vec()));
        }
        out.push(("head.w".into(), vec![h], self.head_w.clone()));
        out.push(("head.b".into(), vec![1], vec![self.head_b]));
        out.push(("attention_weight".into(), vec![1], vec![self.attention_weight]));
        out
    }

    /// Inverse of [`ConvLSTMParams::named_tensors`]. Unknown names are ignored.
    pub fn from_named_tensors<'a>(tensors: impl IntoIterator<Item = (&'a str, &'a [usize], &'a [T])>) -> Result<Self> {
        let tensors: Vec<_> = tensors.into_iter().collect();
        let find = |name: &str| {
            tensors
                .iter()
                .find(|(n, _, _)| *n == name)
                .ok_or_else(|| Error::Shape(format!("missing tensor `{name}`")))
        };
        let (_, dims, _) = find("wh.i")?;
        if dims.len() != 4 {
            return Err(Error::Shape("wh.i must be rank 4".into()));
        }
        let (hidden, kernel) = (dims[0], dims[2]);
        let mut p = Self::zeros(hidden, kernel)?;
        let (sx, sh) = (hidden * kernel * kernel, hidden * hidden * kernel * kernel);
        let copy = |name: String, dst: &mut [T]| -> Result<()> {
            let (_, _, data) = find(&name)?;
            if data.len() != dst.len() {
                return Err(Error::Shape(format!("tensor `{name}` has {} values, want {}", data.len(), dst.len())));
            }
            dst.copy_from_slice(data);
            Ok(())
        };
        for (g, name) in GATES.iter().enumerate() {
            copy(format!("wx.{name}"), &mut p.wx[g * sx..(g + 1) * sx])?;
            copy(format!("wh.{name}"), &mut p.wh[g * sh..(g + 1) * sh])?;
            copy(format!("b.{name}"), &mut p.bias[g * hidden..(g + 1) * hidden])?;
        }
        copy("head.w".into(), &mut p.head_w)?;
        let mut scalar = [T::zero()];
        copy("head.b".into(), &mut scalar)?;
        p.head_b = scalar[0];
        copy("attention_weight".into(), &mut scalar)?;
        p.attention_weight = scalar[0];
        p.validate()?;
        Ok(p)
    }
}

/// `out[co] += sum_ci w[co][ci] (*) inp[ci]`, same padding.
#[allow(clippy::too_many_arguments)]
fn conv_forward<T: Real>(inp: &[T], cin: usize, w: &[T], cout: usize, k: usize, h: usize, wd: usize, out: &mut [T]) {
    let r = (k / 2) as isize;
    let n = h * wd;
    for co in 0..cout {
        let dst = &mut out[co * n..(co + 1) * n];
        for ci in 0..cin {
            let src = &inp[ci * n..(ci + 1) * n];
            for ky in 0..k {
                let dy = ky as isize - r;
                for kx in 0..k {
                    let dx = kx as isize - r;
                    let wv = w[((co * cin + ci) * k + ky) * k + kx];
                    let (y0, y1) = valid_range(dy, h);
                    let (x0, x1) = valid_range(dx, wd);
                    let (s0, s1) = ((x0 as isize + dx) as usize, (x1 as isize + dx) as usize);
                    for y in y0..y1 {
                        let sy = (y as isize + dy) as usize;
                        let drow = &mut dst[y * wd + x0..y * wd + x1];
                        let srow = &src[sy * wd + s0..sy * wd + s1];
                        for (d, s) in drow.iter_mut().zip(srow) {
                            *d += wv * *s;
                        }
                    }
                }
            }
        }
    }
}

/// Accumulates kernel gradients and (optionally) input gradients of [`conv_forward`].
#[allow(clippy::too_many_arguments)]
fn conv_backward<T: Real>(
    inp: &[T],
    cin: usize,
    w: &[T],
    cout: usize,
    k: usize,
    h: usize,
    wd: usize,
    dout: &[T],
    dw: &mut [T],
    mut dinp: Option<&mut [T]>,
) {
    let r = (k / 2) as isize;
    let n = h * wd;
    for co in 0..cout {
        let g = &dout[co * n..(co + 1) * n];
        for ci in 0..cin {
            let src = &inp[ci * n..(ci + 1) * n];
            for ky in 0..k {
                let dy = ky as isize - r;
                for kx in 0..k {
                    let dx = kx as isize - r;
                    let widx = ((co * cin + ci) * k + ky) * k + kx;
                    let wv = w[widx];
                    let (y0, y1) = valid_range(dy, h);
                    let (x0, x1) = valid_range(dx, wd);
                    let (s0, s1) = ((x0 as isize + dx) as usize, (x1 as isize + dx) as usize);
                    let mut acc = T::zero();
                    for y in y0..y1 {
                        let sy = (y as isize + dy) as usize;
                        let grow = &g[y * wd + x0..y * wd + x1];
                        let srow = &src[sy * wd + s0..sy * wd + s1];
                        for (a, b) in grow.iter().zip(srow) {
                            acc += *a * *b;
                        }
                    }
                    dw[widx] += acc;
                    if let Some(di) = dinp.as_deref_mut() {
                        let dsrc = &mut di[ci * n..(ci + 1) * n];
                        for y in y0..y1 {
                            let sy = (y as isize + dy) as usize;
                            let grow = &g[y * wd + x0..y * wd + x1];
                            for (d, gv) in dsrc[sy * wd + s0..sy * wd + s1].iter_mut().zip(grow) {
                                *d += wv * *gv;
                            }
                        }
                    }
                }
            }
        }
    }
}

#[inline]
fn valid_range(d: isize, len: usize) -> (usize, usize) {
    let lo = (-d).max(0) as usize;
    let hi = (len as isize - d.max(0)).max(0) as usize;
    (lo.min(len), hi)
}

/// Activations of one recurrence step, kept for the backward pass.
#[derive(Debug, Clone)]
struct Step<T> {
    /// post-activation gates `[i; f; o; g]`, each `hidden x N`
    gates: Vec<T>,
    c: Vec<T>,
    tanh_c: Vec<T>,
    h: Vec<T>,
    prob: Vec<T>,
}

/// Full forward record of one stack.
#[derive(Debug, Clone)]
pub struct Trace<T> {
    height: usize,
    width: usize,
    inputs: Vec<Vec<T>>,
    steps: Vec<Step<T>>,
}

impl<T: Real> Trace<T> {
    pub fn probabilities(&self) -> Vec<&[T]> {
        self.steps.iter().map(|s| s.prob.as_slice()).collect()
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    /// Probability maps as fields.
    pub fn to_stack(&self) -> Result<SliceStack<T>> {
        let slices = self
            .steps
            .iter()
            .map(|s| ScalarField2D::new(self.width, self.height, s.prob.clone()))
            .collect::<Result<Vec<_>>>()?;
        SliceStack::new(slices)
    }
}

/// Runs the recurrence and keeps every activation.
pub fn forward_trace<T: Real>(params: &ConvLSTMParams<T>, stack: &SliceStack<T>) -> Result<Trace<T>> {
    params.validate()?;
    let (hh, ww) = (stack.height(), stack.width());
    let n = hh * ww;
    let hc = params.hidden;
    let k = params.kernel;
    let mut h_prev = vec![T::zero(); hc * n];
    let mut c_prev = vec![T::zero(); hc * n];
    let mut steps = Vec::with_capacity(stack.len());
    let inputs: Vec<Vec<T>> = stack.slices().iter().map(|s| s.values().to_vec()).collect();
    for x in &inputs {
        let mut pre = vec![T::zero(); 4 * hc * n];
        for (ch, b) in params.bias.iter().enumerate() {
            pre[ch * n..(ch + 1) * n].iter_mut().for_each(|v| *v = *b);
        }
        conv_forward(x, 1, &params.wx, 4 * hc, k, hh, ww, &mut pre);
        conv_forward(&h_prev, hc, &params.wh, 4 * hc, k, hh, ww, &mut pre);
        let mut gates = pre;
        let split = 3 * hc * n;
        gates[..split].iter_mut().for_each(|v| *v = sigmoid(*v));
        gates[split..].iter_mut().for_each(|v| *v = v.tanh());

        let (gi, rest) = gates.split_at(hc * n);
        let (gf, rest) = rest.split_at(hc * n);
        let (go, gg) = rest.split_at(hc * n);
        let mut c = vec![T::zero(); hc * n];
        let mut tanh_c = vec![T::zero(); hc * n];
        let mut h = vec![T::zero(); hc * n];
        for j in 0..hc * n {
            c[j] = gf[j] * c_prev[j] + gi[j] * gg[j];
            tanh_c[j] = c[j].tanh();
            h[j] = go[j] * tanh_c[j];
        }
        let mut prob = vec![params.head_b; n];
        for (j, wj) in params.head_w.iter().enumerate() {
            for (p, hv) in prob.iter_mut().zip(&h[j * n..(j + 1) * n]) {
                *p += *wj * *hv;
            }
        }
        prob.iter_mut().for_each(|v| *v = sigmoid(*v));

        h_prev.clone_from(&h);
        c_prev.clone_from(&c);
        steps.push(Step { gates, c, tanh_c, h, prob });
    }
    Ok(Trace { height: hh, width: ww, inputs, steps })
}

/// One probability map per input slice.
pub fn forward<T: Real>(params: &ConvLSTMParams<T>, stack: &SliceStack<T>) -> Result<SliceStack<T>> {
    forward_trace(params, stack)?.to_stack()
}

#[inline]
fn bce_term<T: Real>(p: T, y: T) -> T {
    let eps = T::lit(PROB_EPS);
    let p = p.max(eps).min(T::one() - eps);
    -(y * p.ln() + (T::one() - y) * (T::one() - p).ln())
}

/// d bce_term / dp, zero where the clamp is active.
#[inline]
fn bce_grad<T: Real>(p: T, y: T) -> T {
    let eps = T::lit(PROB_EPS);
    if p < eps || p > T::one() - eps {
        T::zero()
    } else {
        -y / p + (T::one() - y) / (T::one() - p)
    }
}

/// Mean binary cross-entropy over all pixels of all slices.
pub fn bce_loss<T: Real>(preds: &SliceStack<T>, gts: &SliceStack<T>) -> Result<T> {
    if preds.len() != gts.len() || preds.height() != gts.height() || preds.width() != gts.width() {
        return Err(Error::Shape("prediction and target stacks differ in shape".into()));
    }
    let mut total = T::zero();
    let mut count = 0usize;
    for (p, y) in preds.slices().iter().zip(gts.slices()) {
        for (pv, yv) in p.values().iter().zip(y.values()) {
            total += bce_term(*pv, *yv);
            count += 1;
        }
    }
    Ok(total / T::lit(count as f64))
}

/// Attention inputs held constant while differentiating the stage-2 loss.
#[derive(Debug, Clone, Copy)]
pub struct AttentionInputs<'a, T> {
    pub similarity: &'a crate::attention::SimilarityMap<T>,
    /// ITA history for this sample, if any.
    pub o_prev: Option<&'a [T]>,
    pub beta: T,
}

/// Outputs of the loss evaluation.
#[derive(Debug, Clone)]
pub struct LossEval<T> {
    pub loss: T,
    /// Center attention output before ITA blending (only with attention).
    pub o_curr: Option<Vec<T>>,
}

/// Center-slice refinement: returns `(o_curr, o_used, p_hat)`.
fn refine_center<T: Real>(p: &[T], att: &AttentionInputs<'_, T>, alpha: T) -> (Vec<T>, Vec<T>, Vec<T>) {
    let sm = att.similarity;
    let n = p.len();
    let o_curr: Vec<T> = (0..n).map(|row| sm.row(row).iter().zip(p).map(|(s, v)| *s * *v).sum()).collect();
    let o_used: Vec<T> = match att.o_prev {
        Some(prev) => prev.iter().zip(&o_curr).map(|(a, b)| att.beta * *a + (T::one() - att.beta) * *b).collect(),
        None => o_curr.clone(),
    };
    let p_hat = p.iter().zip(&o_used).map(|(pv, ov)| (alpha * *ov + *pv).max(T::zero()).min(T::one())).collect();
    (o_curr, o_used, p_hat)
}

/// Loss of a forward trace against targets, optionally with the center
/// slice refined by topology attention.
pub fn loss_of_trace<T: Real>(
    params: &ConvLSTMParams<T>,
    trace: &Trace<T>,
    targets: &[&[T]],
    attention: Option<&AttentionInputs<'_, T>>,
) -> Result<LossEval<T>> {
    check_targets(trace, targets, attention)?;
    let center = trace.steps.len() / 2;
    let mut total = T::zero();
    let mut count = 0usize;
    let mut o_curr_out = None;
    for (t, (step, y)) in trace.steps.iter().zip(targets).enumerate() {
        let probs: Vec<T> = match attention {
            Some(att) if t == center => {
                let (o_curr, _, p_hat) = refine_center(&step.prob, att, params.attention_weight);
                o_curr_out = Some(o_curr);
                p_hat
            }
            _ => step.prob.clone(),
        };
        for (p, yv) in probs.iter().zip(y.iter()) {
            total += bce_term(*p, *yv);
            count += 1;
        }
    }
    Ok(LossEval { loss: total / T::lit(count as f64), o_curr: o_curr_out })
}

fn check_targets<T: Real>(trace: &Trace<T>, targets: &[&[T]], attention: Option<&AttentionInputs<'_, T>>) -> Result<()> {
    let n = trace.height * trace.width;
    if targets.len() != trace.steps.len() || targets.iter().any(|t| t.len() != n) {
        return Err(Error::Shape("targets do not match the forward pass".into()));
    }
    if let Some(att) = attention {
        if att.similarity.size() != n || att.o_prev.is_some_and(|o| o.len() != n) {
            return Err(Error::Shape("attention inputs do not match the patch".into()));
        }
    }
    Ok(())
}

/// Loss and exact gradients w.r.t. every parameter.
pub fn backward<T: Real>(
    params: &ConvLSTMParams<T>,
    stack: &SliceStack<T>,
    targets: &SliceStack<T>,
    attention: Option<&AttentionInputs<'_, T>>,
) -> Result<(LossEval<T>, ConvLSTMParams<T>)> {
    let trace = forward_trace(params, stack)?;
    if targets.len() != stack.len() || targets.height() != stack.height() || targets.width() != stack.width() {
        return Err(Error::Shape("prediction and target stacks differ in shape".into()));
    }
    let ys: Vec<&[T]> = targets.slices().iter().map(|s| s.values()).collect();
    backward_trace(params, &trace, &ys, attention)
}

/// [`backward`] on an existing forward trace.
pub fn backward_trace<T: Real>(
    params: &ConvLSTMParams<T>,
    trace: &Trace<T>,
    targets: &[&[T]],
    attention: Option<&AttentionInputs<'_, T>>,
) -> Result<(LossEval<T>, ConvLSTMParams<T>)> {
    let eval = loss_of_trace(params, trace, targets, attention)?;
    let (hh, ww) = (trace.height, trace.width);
    let n = hh * ww;
    let hc = params.hidden;
    let k = params.kernel;
    let steps = trace.steps.len();
    let center = steps / 2;
    let scale = T::one() / T::lit((steps * n) as f64);
    let mut grad = params.zeros_like();

    // d loss / d logit for every step
    let mut dlogits: Vec<Vec<T>> = Vec::with_capacity(steps);
    for (t, (step, y)) in trace.steps.iter().zip(targets).enumerate() {
        let dprob: Vec<T> = match attention {
            Some(att) if t == center => {
                let alpha = params.attention_weight;
                let (_, o_used, _) = refine_center(&step.prob, att, alpha);
                // d loss / d p_hat, zeroed where the [0,1] clamp is active
                let g: Vec<T> = step
                    .prob
                    .iter()
                    .zip(&o_used)
                    .zip(y.iter())
                    .map(|((p, o), yv)| {
                        let raw = alpha * *o + *p;
                        if raw < T::zero() || raw > T::one() {
                            T::zero()
                        } else {
                            bce_grad(raw, *yv) * scale
                        }
                    })
                    .collect();
                grad.attention_weight = g.iter().zip(&o_used).map(|(a, b)| *a * *b).sum();
                let carry = match att.o_prev {
                    Some(_) => T::one() - att.beta,
                    None => T::one(),
                };
                let mut dp = g.clone();
                let coef = alpha * carry;
                if coef != T::zero() {
                    for (row, gn) in g.iter().enumerate() {
                        if *gn == T::zero() {
                            continue;
                        }
                        let f = coef * *gn;
                        for (d, s) in dp.iter_mut().zip(att.similarity.row(row)) {
                            *d += f * *s;
                        }
                    }
                }
                dp
            }
            _ => step.prob.iter().zip(y.iter()).map(|(p, yv)| bce_grad(*p, *yv) * scale).collect(),
        };
        dlogits.push(dprob.iter().zip(&step.prob).map(|(d, p)| *d * *p * (T::one() - *p)).collect());
    }

    let mut dh_next = vec![T::zero(); hc * n];
    let mut dc_next = vec![T::zero(); hc * n];
    let zeros = vec![T::zero(); hc * n];
    for t in (0..steps).rev() {
        let step = &trace.steps[t];
        let dlogit = &dlogits[t];
        grad.head_b += dlogit.iter().copied().sum::<T>();
        let mut dh = dh_next.clone();
        for j in 0..hc {
            let hj = &step.h[j * n..(j + 1) * n];
            grad.head_w[j] += hj.iter().zip(dlogit).map(|(a, b)| *a * *b).sum::<T>();
            let wj = params.head_w[j];
            for (d, g) in dh[j * n..(j + 1) * n].iter_mut().zip(dlogit) {
                *d += wj * *g;
            }
        }
        let (c_prev, h_prev) = if t == 0 {
            (&zeros, &zeros)
        } else {
            (&trace.steps[t - 1].c, &trace.steps[t - 1].h)
        };
        let gates = &step.gates;
        let mut dpre = vec![T::zero(); 4 * hc * n];
        for j in 0..hc * n {
            let (i, f, o, g) = (gates[j], gates[hc * n + j], gates[2 * hc * n + j], gates[3 * hc * n + j]);
            let tc = step.tanh_c[j];
            let d_o = dh[j] * tc;
            let dc = dc_next[j] + dh[j] * o * (T::one() - tc * tc);
            let di = dc * g;
            let dg = dc * i;
            let df = dc * c_prev[j];
            dc_next[j] = dc * f;
            dpre[j] = di * i * (T::one() - i);
            dpre[hc * n + j] = df * f * (T::one() - f);
            dpre[2 * hc * n + j] = d_o * o * (T::one() - o);
            dpre[3 * hc * n + j] = dg * (T::one() - g * g);
        }
        for (ch, b) in grad.bias.iter_mut().enumerate() {
            *b += dpre[ch * n..(ch + 1) * n].iter().copied().sum::<T>();
        }
        conv_backward(&trace.inputs[t], 1, &params.wx, 4 * hc, k, hh, ww, &dpre, &mut grad.wx, None);
        let mut dh_prev = vec![T::zero(); hc * n];
        conv_backward(h_prev, hc, &params.wh, 4 * hc, k, hh, ww, &dpre, &mut grad.wh, Some(&mut dh_prev));
        dh_next = dh_prev;
    }
    Ok((eval, grad))
}
