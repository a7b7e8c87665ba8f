//! Per-page LSTM that scores whether a slot sequence is a legal visit.
//!
//! Parameters live in one flat vector so the optimizer and the gradient
//! check can treat them uniformly. Gate order inside the stacked weight
//! matrix is input, forget, output, candidate.

use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::profiling::PageProfile;
use crate::scalar::Scalar;
use crate::seed;

pub const PARAMS_HEADER: &str = "ISCNET 1";

#[derive(Debug, Error)]
pub enum ClassifierError {
    #[error("token {token} out of range for a profile of {t} packets")]
    TokenOutOfRange { token: usize, t: usize },
    #[error("empty sequence")]
    EmptySequence,
    #[error("empty batch")]
    EmptyBatch,
    #[error("profile has no exemplar sequences")]
    NoExemplars,
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("params file line {line}: {msg}")]
    Format { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Legal,
    Illegal,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SequenceSample {
    pub tokens: Vec<usize>,
    pub label: Label,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LstmParams<S> {
    pub t: usize,
    pub d: usize,
    pub h: usize,
    pub theta: Vec<S>,
}

struct Layout {
    w: usize,
    b: usize,
    wy: usize,
    by: usize,
    len: usize,
}

impl<S: Scalar> LstmParams<S> {
    fn layout(t: usize, d: usize, h: usize) -> Layout {
        let w = t * d;
        let b = w + 4 * h * (d + h);
        let wy = b + 4 * h;
        let by = wy + h;
        Layout {
            w,
            b,
            wy,
            by,
            len: by + 1,
        }
    }

    pub fn zeros(t: usize, d: usize, h: usize) -> Self {
        LstmParams {
            t,
            d,
            h,
            theta: vec![S::zero(); Self::layout(t, d, h).len],
        }
    }

    /// Xavier-uniform weights, zero biases except the forget gate at one.
    pub fn init(t: usize, d: usize, h: usize, seed: u64) -> Self {
        let mut p = Self::zeros(t, d, h);
        let l = Self::layout(t, d, h);
        let mut rng = seed::rng(seed);
        let mut fill = |xs: &mut [S], fan_in: usize, fan_out: usize| {
            let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for x in xs {
                *x = S::of(rng.gen_range(-a..a));
            }
        };
        fill(&mut p.theta[..l.w], 1, d);
        fill(&mut p.theta[l.w..l.b], d + h, 4 * h);
        fill(&mut p.theta[l.wy..l.by], h, 1);
        for x in &mut p.theta[l.b + h..l.b + 2 * h] {
            *x = S::one();
        }
        p
    }

    pub fn len(&self) -> usize {
        self.theta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.theta.is_empty()
    }

    fn check(&self, tokens: &[usize]) -> Result<(), ClassifierError> {
        if tokens.is_empty() {
            return Err(ClassifierError::EmptySequence);
        }
        match tokens.iter().find(|&&k| k >= self.t) {
            Some(&token) => Err(ClassifierError::TokenOutOfRange { token, t: self.t }),
            None => Ok(()),
        }
    }

    fn run(&self, tokens: &[usize]) -> (S, Vec<Step<S>>) {
        let (d, h) = (self.d, self.h);
        let l = Self::layout(self.t, d, h);
        let th = &self.theta;
        let mut hs = vec![S::zero(); h];
        let mut cs = vec![S::zero(); h];
        let mut steps = Vec::with_capacity(tokens.len());
        for &tok in tokens {
            let mut z = th[tok * d..(tok + 1) * d].to_vec();
            z.extend_from_slice(&hs);
            let mut a = th[l.b..l.b + 4 * h].to_vec();
            for (r, ar) in a.iter_mut().enumerate() {
                let row = &th[l.w + r * (d + h)..l.w + (r + 1) * (d + h)];
                *ar += row.iter().zip(&z).map(|(&w, &x)| w * x).sum::<S>();
            }
            let gi: Vec<S> = a[..h].iter().map(|x| x.sigmoid()).collect();
            let gf: Vec<S> = a[h..2 * h].iter().map(|x| x.sigmoid()).collect();
            let go: Vec<S> = a[2 * h..3 * h].iter().map(|x| x.sigmoid()).collect();
            let gg: Vec<S> = a[3 * h..].iter().map(|x| x.tanh()).collect();
            let c_prev = cs.clone();
            for k in 0..h {
                cs[k] = gf[k] * c_prev[k] + gi[k] * gg[k];
            }
            let tc: Vec<S> = cs.iter().map(|x| x.tanh()).collect();
            for k in 0..h {
                hs[k] = go[k] * tc[k];
            }
            steps.push(Step {
                tok,
                z,
                c_prev,
                gi,
                gf,
                go,
                gg,
                tc,
            });
        }
        let logit = th[l.by] + th[l.wy..l.by].iter().zip(&hs).map(|(&w, &x)| w * x).sum::<S>();
        (logit, steps)
    }

    pub fn logit(&self, tokens: &[usize]) -> Result<S, ClassifierError> {
        self.check(tokens)?;
        Ok(self.run(tokens).0)
    }

    /// Probability that the sequence is legal.
    pub fn forward(&self, tokens: &[usize]) -> Result<S, ClassifierError> {
        Ok(self.logit(tokens)?.sigmoid())
    }

    /// Mean binary cross-entropy and its gradient, by backpropagation
    /// through time.
    pub fn loss_and_grad(&self, batch: &[SequenceSample]) -> Result<(S, LstmParams<S>), ClassifierError> {
        if batch.is_empty() {
            return Err(ClassifierError::EmptyBatch);
        }
        let (d, h) = (self.d, self.h);
        let l = Self::layout(self.t, d, h);
        let th = &self.theta;
        let mut grad = Self::zeros(self.t, d, h);
        let g = &mut grad.theta;
        let scale = S::one() / S::of(batch.len() as f64);
        let mut loss = S::zero();
        for sample in batch {
            self.check(&sample.tokens)?;
            let (z, steps) = self.run(&sample.tokens);
            let y = if sample.label == Label::Legal { S::one() } else { S::zero() };
            loss += z.softplus() - y * z;
            let dz = (z.sigmoid() - y) * scale;
            let last = steps.last().expect("non-empty sequence");
            g[l.by] += dz;
            let mut dh: Vec<S> = (0..h)
                .map(|k| {
                    g[l.wy + k] += dz * last.go[k] * last.tc[k];
                    dz * th[l.wy + k]
                })
                .collect();
            let mut dc = vec![S::zero(); h];
            let mut da = vec![S::zero(); 4 * h];
            for st in steps.iter().rev() {
                for k in 0..h {
                    let (i, f, o, gg, tc) = (st.gi[k], st.gf[k], st.go[k], st.gg[k], st.tc[k]);
                    dc[k] += dh[k] * o * (S::one() - tc * tc);
                    da[k] = dc[k] * gg * i * (S::one() - i);
                    da[h + k] = dc[k] * st.c_prev[k] * f * (S::one() - f);
                    da[2 * h + k] = dh[k] * tc * o * (S::one() - o);
                    da[3 * h + k] = dc[k] * i * (S::one() - gg * gg);
                    dc[k] *= f;
                }
                let mut dzin = vec![S::zero(); d + h];
                for (r, &dar) in da.iter().enumerate() {
                    g[l.b + r] += dar;
                    let row = l.w + r * (d + h);
                    for (c, &x) in st.z.iter().enumerate() {
                        g[row + c] += dar * x;
                        dzin[c] += dar * th[row + c];
                    }
                }
                for c in 0..d {
                    g[st.tok * d + c] += dzin[c];
                }
                dh.copy_from_slice(&dzin[d..]);
            }
        }
        Ok((loss * scale, grad))
    }

    pub fn write<W: Write>(&self, mut sink: W) -> Result<(), ClassifierError> {
        let l = Self::layout(self.t, self.d, self.h);
        writeln!(sink, "{PARAMS_HEADER}")?;
        writeln!(sink, "shape {} {} {}", self.t, self.d, self.h)?;
        let blocks = [
            ("emb", 0, self.t, self.d),
            ("w", l.w, 4 * self.h, self.d + self.h),
            ("b", l.b, 1, 4 * self.h),
            ("wy", l.wy, 1, self.h),
            ("by", l.by, 1, 1),
        ];
        for (name, at, rows, cols) in blocks {
            writeln!(sink, "{name} {rows} {cols}")?;
            for r in 0..rows {
                let row: Vec<String> = self.theta[at + r * cols..at + (r + 1) * cols]
                    .iter()
                    .map(|x| x.to_string())
                    .collect();
                writeln!(sink, "{}", row.join(" "))?;
            }
        }
        sink.flush()?;
        Ok(())
    }

    pub fn read<R: BufRead>(source: R) -> Result<Self, ClassifierError> {
        let mut lines = source.lines().enumerate();
        let mut next = || -> Result<(usize, String), ClassifierError> {
            match lines.next() {
                Some((i, l)) => Ok((i + 1, l?)),
                None => Err(ClassifierError::Format {
                    line: 0,
                    msg: "unexpected end of file".into(),
                }),
            }
        };
        let bad = |line: usize, msg: &str| ClassifierError::Format {
            line,
            msg: msg.to_string(),
        };
        let (n, head) = next()?;
        if head.trim_end() != PARAMS_HEADER {
            return Err(bad(n, "missing ISCNET 1 header"));
        }
        let nums = |n: usize, s: &str, tag: &str| -> Result<Vec<usize>, ClassifierError> {
            let mut it = s.split_whitespace();
            if it.next() != Some(tag) {
                return Err(bad(n, &format!("expected `{tag}`")));
            }
            it.map(|x| x.parse().map_err(|_| bad(n, "bad dimension"))).collect()
        };
        let (n, shape) = next()?;
        let dims = nums(n, &shape, "shape")?;
        let [t, d, h] = dims[..] else {
            return Err(bad(n, "shape needs three dimensions"));
        };
        let mut p = Self::zeros(t, d, h);
        let l = Self::layout(t, d, h);
        let expect = [
            ("emb", t, d),
            ("w", 4 * h, d + h),
            ("b", 1, 4 * h),
            ("wy", 1, h),
            ("by", 1, 1),
        ];
        let mut at = 0;
        for (name, rows, cols) in expect {
            let (n, hdr) = next()?;
            if nums(n, &hdr, name)? != [rows, cols] {
                return Err(bad(n, &format!("block `{name}` has the wrong shape")));
            }
            for _ in 0..rows {
                let (n, row) = next()?;
                let vals: Vec<S> = row
                    .split_whitespace()
                    .map(|x| x.parse::<S>().map_err(|_| bad(n, "bad number")))
                    .collect::<Result<_, _>>()?;
                if vals.len() != cols || vals.iter().any(|v| !v.is_finite()) {
                    return Err(bad(n, "row has the wrong length or a non-finite entry"));
                }
                p.theta[at..at + cols].copy_from_slice(&vals);
                at += cols;
            }
        }
        debug_assert_eq!(at, l.len);
        Ok(p)
    }
}

struct Step<S> {
    tok: usize,
    z: Vec<S>,
    c_prev: Vec<S>,
    gi: Vec<S>,
    gf: Vec<S>,
    go: Vec<S>,
    gg: Vec<S>,
    tc: Vec<S>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: u32,
    pub seed: u64,
    /// Shuffled-exemplar negatives per positive.
    pub shuffle_ratio: f64,
    /// Other-page negatives per positive.
    pub crosspage_ratio: f64,
    pub embed_dim: usize,
    pub hidden_dim: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.05,
            epochs: 500,
            seed: 0,
            shuffle_ratio: 1.0,
            crosspage_ratio: 1.0,
            embed_dim: 8,
            hidden_dim: 16,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ClassifierError> {
        if !(self.learning_rate > 0.0) {
            return Err(ClassifierError::Config("learning_rate must be positive".into()));
        }
        if !(self.shuffle_ratio >= 0.0 && self.crosspage_ratio >= 0.0) {
            return Err(ClassifierError::Config("sampling ratios must be non-negative".into()));
        }
        if self.embed_dim == 0 || self.hidden_dim == 0 {
            return Err(ClassifierError::Config("dimensions must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trained<S> {
    pub params: LstmParams<S>,
    pub converged: bool,
    pub epochs_run: u32,
    pub train_accuracy: f64,
    pub final_loss: f64,
}

/// Positives are the profile's exemplars. Negatives are shuffled exemplars
/// and exemplars of other pages folded into this page's token range; any
/// negative identical to a positive is dropped.
pub fn training_set(
    profile: &PageProfile,
    others: &[&PageProfile],
    config: &TrainConfig,
) -> Result<Vec<SequenceSample>, ClassifierError> {
    let t = profile.packets.len();
    let pos: Vec<Vec<usize>> = profile
        .exemplar_sequences
        .iter()
        .filter(|s| !s.is_empty())
        .cloned()
        .collect();
    if pos.is_empty() || t == 0 {
        return Err(ClassifierError::NoExemplars);
    }
    let mut rng = seed::rng(seed::derive(config.seed, "negatives"));
    let mut samples: Vec<SequenceSample> = pos
        .iter()
        .map(|s| SequenceSample {
            tokens: s.clone(),
            label: Label::Legal,
        })
        .collect();
    let push_neg = |tokens: Vec<usize>, samples: &mut Vec<SequenceSample>| {
        if !pos.contains(&tokens) {
            samples.push(SequenceSample {
                tokens,
                label: Label::Illegal,
            });
        }
    };
    let n_shuffle = (config.shuffle_ratio * pos.len() as f64).round() as usize;
    for _ in 0..n_shuffle {
        let mut s = pos[rng.gen_range(0..pos.len())].clone();
        s.shuffle(&mut rng);
        push_neg(s, &mut samples);
    }
    let foreign: Vec<&Vec<usize>> = others
        .iter()
        .filter(|o| o.page_id != profile.page_id)
        .flat_map(|o| o.exemplar_sequences.iter().filter(|s| !s.is_empty()))
        .collect();
    if !foreign.is_empty() {
        let n_cross = (config.crosspage_ratio * pos.len() as f64).round() as usize;
        for _ in 0..n_cross {
            let s = foreign[rng.gen_range(0..foreign.len())];
            push_neg(s.iter().map(|&k| k % t).collect(), &mut samples);
        }
    }
    Ok(samples)
}

/// Full-batch Adam on the synthesized set. Deterministic in
/// (profile, others, config).
pub fn train<S: Scalar>(
    profile: &PageProfile,
    others: &[&PageProfile],
    config: &TrainConfig,
) -> Result<Trained<S>, ClassifierError> {
    config.validate()?;
    let samples = training_set(profile, others, config)?;
    let mut params = LstmParams::<S>::init(
        profile.packets.len(),
        config.embed_dim,
        config.hidden_dim,
        seed::derive(config.seed, "init"),
    );
    let (b1, b2, eps) = (S::of(0.9), S::of(0.999), S::of(1e-8));
    let lr = S::of(config.learning_rate);
    let mut m = vec![S::zero(); params.len()];
    let mut v = vec![S::zero(); params.len()];
    let (mut b1t, mut b2t) = (S::one(), S::one());
    let mut epochs_run = 0;
    let mut last_loss = f64::INFINITY;
    for epoch in 0..config.epochs {
        let (loss, grad) = params.loss_and_grad(&samples)?;
        last_loss = loss.as_f64();
        if epoch % 10 == 0 && last_loss <= 0.05 && fits(&params, &samples) {
            break;
        }
        b1t *= b1;
        b2t *= b2;
        for k in 0..params.len() {
            let gk = grad.theta[k];
            m[k] = b1 * m[k] + (S::one() - b1) * gk;
            v[k] = b2 * v[k] + (S::one() - b2) * gk * gk;
            let mh = m[k] / (S::one() - b1t);
            let vh = v[k] / (S::one() - b2t);
            params.theta[k] -= lr * mh / (vh.sqrt() + eps);
        }
        epochs_run = epoch + 1;
    }
    let accuracy = accuracy(&params, &samples);
    let converged = fits(&params, &samples);
    if !converged {
        log::warn!(
            "page {}: classifier did not converge (accuracy {accuracy:.3}, loss {last_loss:.4})",
            profile.page_id
        );
    }
    Ok(Trained {
        params,
        converged,
        epochs_run,
        train_accuracy: accuracy,
        final_loss: last_loss,
    })
}

fn prob<S: Scalar>(p: &LstmParams<S>, s: &SequenceSample) -> f64 {
    p.forward(&s.tokens).map(|x| x.as_f64()).unwrap_or(0.0)
}

fn accuracy<S: Scalar>(p: &LstmParams<S>, samples: &[SequenceSample]) -> f64 {
    let ok = samples
        .iter()
        .filter(|s| (prob(p, s) >= 0.5) == (s.label == Label::Legal))
        .count();
    ok as f64 / samples.len() as f64
}

fn fits<S: Scalar>(p: &LstmParams<S>, samples: &[SequenceSample]) -> bool {
    accuracy(p, samples) >= 0.95
        && samples
            .iter()
            .filter(|s| s.label == Label::Legal)
            .all(|s| prob(p, s) >= 0.5)
}

/// Largest relative disagreement between the analytic gradient and central
/// differences, `|a - n| / max(|a| + |n|, floor)`.
pub fn gradient_check(params: &LstmParams<f64>, batch: &[SequenceSample], step: f64, floor: f64) -> f64 {
    let (_, grad) = params.loss_and_grad(batch).expect("valid batch");
    let mut worst = 0.0f64;
    let mut p = params.clone();
    for k in 0..params.len() {
        let x = p.theta[k];
        p.theta[k] = x + step;
        let up = p.loss_and_grad(batch).expect("valid batch").0;
        p.theta[k] = x - step;
        let down = p.loss_and_grad(batch).expect("valid batch").0;
        p.theta[k] = x;
        let num = (up - down) / (2.0 * step);
        let a = grad.theta[k];
        worst = worst.max((a - num).abs() / (a.abs() + num.abs()).max(floor));
    }
    worst
}
