//! Self-knowledge distillation: a frozen teacher and a trainable student
//! start from the same weights; the student learns to embed both the
//! English text and its translation where the teacher embeds the English.
//!
//! Per pair `(x, y)` with last-token pooled outputs:
//!
//! ```text
//! loss_e = mse(T(x), S(x)) + mse(T(x), S(y))
//! loss_i = mse(Tᵢ(x), Sᵢ(x)) + mse(Tᵢ(x), Sᵢ(y))     (image rows, mean pooled)
//! total  = loss_e / 2             without the image term
//!        = (loss_e + loss_i) / 4  with it
//! ```
//!
//! Pairs without an image always use the first form, even when the image
//! term is enabled.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{ImageStore, ParallelPair};
use crate::encoder::{EncoderParams, Frozen, TokenId, IMAGE_TOKEN};
use crate::error::{Error, Result};
use crate::rng::Stream;
use crate::scalar::{dot, norm, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub use_image_loss: bool,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            use_image_loss: false,
            learning_rate: 1e-2,
            batch_size: 128,
            epochs: 1,
            seed: 0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::invalid("loss config", "learning_rate must be positive"));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::invalid("loss config", "batch_size and epochs must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown<T> {
    pub loss_e: T,
    pub loss_i: Option<T>,
    pub total: T,
}

/// `(1/d) Σ (aᵢ - bᵢ)²`
pub fn mse<T: Scalar>(a: &[T], b: &[T]) -> Result<T> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::Dimension {
            id: "mse operand".into(),
            expected: a.len(),
            got: b.len(),
        });
    }
    let sum: T = a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum();
    Ok(sum / T::from_usize_lossy(a.len()))
}

pub fn loss_e<T: Scalar>(t_x: &[T], s_x: &[T], s_y: &[T]) -> Result<T> {
    Ok(mse(t_x, s_x)? + mse(t_x, s_y)?)
}

/// Same shape as [`loss_e`], applied to mean-pooled image rows.
pub fn loss_i<T: Scalar>(t_img_x: &[T], s_img_x: &[T], s_img_y: &[T]) -> Result<T> {
    loss_e(t_img_x, s_img_x, s_img_y)
}

/// Combine the addends: `loss_e / 2`, or `(loss_e + loss_i) / 4`.
pub fn combine<T: Scalar>(loss_e: T, loss_i: Option<T>) -> LossBreakdown<T> {
    let total = match loss_i {
        None => loss_e / T::lit(2.0),
        Some(li) => (loss_e + li) / T::lit(4.0),
    };
    LossBreakdown { loss_e, loss_i, total }
}

/// A pair tokenized and with its image features resolved.
#[derive(Debug, Clone)]
pub struct PreparedPair<T> {
    pub id: String,
    pub x_tokens: Vec<TokenId>,
    pub y_tokens: Vec<TokenId>,
    pub image: Option<Vec<T>>,
}

impl<T: Scalar> PreparedPair<T> {
    pub fn new(pair: &ParallelPair, vocab_size: usize, images: &ImageStore<T>) -> Result<Self> {
        let image = pair.image_ref.as_deref().map(|r| images.features(r)).transpose()?;
        Ok(Self {
            id: pair.id.clone(),
            x_tokens: crate::encoder::tokenize(&pair.english_text, vocab_size),
            y_tokens: crate::encoder::tokenize(&pair.translated_text, vocab_size),
            image,
        })
    }

    fn uses_image_loss(&self, cfg: &LossConfig) -> bool {
        cfg.use_image_loss && self.image.is_some()
    }
}

/// The pooled outputs the loss depends on.
struct Pooled<T> {
    t_x: Vec<T>,
    s_x: Vec<T>,
    s_y: Vec<T>,
    images: Option<[Vec<T>; 3]>,
}

fn pooled<T: Scalar>(
    pair: &PreparedPair<T>,
    teacher: &EncoderParams<T>,
    student: &EncoderParams<T>,
    with_images: bool,
) -> Result<Pooled<T>> {
    let img = pair.image.as_deref();
    let tx = teacher.forward_tokens(&pair.x_tokens, img)?;
    let sx = student.forward_tokens(&pair.x_tokens, img)?;
    let sy = student.forward_tokens(&pair.y_tokens, img)?;
    let last = |m: &crate::encoder::EmbeddingMatrix<T>| m.rows()[m.len() - 1].clone();
    let images = if with_images {
        Some([
            tx.pool_image()?.values,
            sx.pool_image()?.values,
            sy.pool_image()?.values,
        ])
    } else {
        None
    };
    Ok(Pooled {
        t_x: last(&tx),
        s_x: last(&sx),
        s_y: last(&sy),
        images,
    })
}

pub fn total_loss<T: Scalar>(
    pair: &PreparedPair<T>,
    teacher: &EncoderParams<T>,
    student: &EncoderParams<T>,
    cfg: &LossConfig,
) -> Result<LossBreakdown<T>> {
    if teacher.dim() != student.dim() {
        return Err(Error::Dimension {
            id: "student".into(),
            expected: teacher.dim(),
            got: student.dim(),
        });
    }
    let p = pooled(pair, teacher, student, pair.uses_image_loss(cfg))?;
    let le = loss_e(&p.t_x, &p.s_x, &p.s_y)?;
    let li = p
        .images
        .map(|[t, sx, sy]| loss_i(&t, &sx, &sy))
        .transpose()?;
    Ok(combine(le, li))
}

/// Sparse gradient of the loss with respect to the student.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T> {
    /// Token-table rows with a (possibly zero) gradient.
    pub table: BTreeMap<TokenId, Vec<T>>,
    /// Full `k x d` projector gradient when an image was involved.
    pub projector: Option<Vec<T>>,
}

impl<T: Scalar> Gradients<T> {
    fn empty() -> Self {
        Self {
            table: BTreeMap::new(),
            projector: None,
        }
    }

    fn add_row(&mut self, token: TokenId, g: &[T]) {
        let row = self.table.entry(token).or_insert_with(|| vec![T::zero(); g.len()]);
        for (r, &v) in row.iter_mut().zip(g) {
            *r += v;
        }
    }

    /// projector += features ⊗ g
    fn add_outer(&mut self, features: &[T], g: &[T]) {
        let d = g.len();
        let p = self
            .projector
            .get_or_insert_with(|| vec![T::zero(); features.len() * d]);
        for (r, &f) in features.iter().enumerate() {
            for (slot, &gj) in p[r * d..(r + 1) * d].iter_mut().zip(g) {
                *slot += f * gj;
            }
        }
    }

    /// `self += scale * other`, rows visited in id order.
    pub fn accumulate(&mut self, other: &Gradients<T>, scale: T) {
        for (&tok, g) in &other.table {
            let scaled: Vec<T> = g.iter().map(|&v| v * scale).collect();
            self.add_row(tok, &scaled);
        }
        if let Some(op) = &other.projector {
            let p = self.projector.get_or_insert_with(|| vec![T::zero(); op.len()]);
            for (a, &b) in p.iter_mut().zip(op) {
                *a += b * scale;
            }
        }
    }

    pub fn is_zero(&self) -> bool {
        self.table
            .values()
            .flatten()
            .chain(self.projector.iter().flatten())
            .all(|v| v.is_zero())
    }

    /// Gradient-descent step.
    pub fn apply(&self, params: &mut EncoderParams<T>, learning_rate: T) {
        for (&tok, g) in &self.table {
            for (w, &gi) in params.row_mut(tok).iter_mut().zip(g) {
                *w -= learning_rate * gi;
            }
        }
        if let Some(pg) = &self.projector {
            for (w, &gi) in params.projector_mut().iter_mut().zip(pg) {
                *w -= learning_rate * gi;
            }
        }
    }
}

/// Route a gradient on a last-token pooled output back to its parameter.
fn route_last<T: Scalar>(grads: &mut Gradients<T>, tokens: &[TokenId], image: Option<&[T]>, g: &[T]) {
    let last = *tokens.last().expect("tokenize never returns empty");
    if last == IMAGE_TOKEN {
        grads.add_outer(image.expect("image row implies features"), g);
    } else {
        grads.add_row(last, g);
    }
}

/// Exact gradient of [`total_loss`] with respect to the student's
/// parameters. Every token of both student sequences gets an entry, so
/// the key set is exactly the parameters the pair touches.
pub fn gradients<T: Scalar>(
    pair: &PreparedPair<T>,
    teacher: &EncoderParams<T>,
    student: &EncoderParams<T>,
    cfg: &LossConfig,
) -> Result<(LossBreakdown<T>, Gradients<T>)> {
    let with_images = pair.uses_image_loss(cfg);
    let p = pooled(pair, teacher, student, with_images)?;
    let le = loss_e(&p.t_x, &p.s_x, &p.s_y)?;
    let li = p
        .images
        .as_ref()
        .map(|[t, sx, sy]| loss_i(t, sx, sy))
        .transpose()?;
    let breakdown = combine(le, li);

    let d = student.dim();
    let weight = if with_images { T::lit(0.25) } else { T::lit(0.5) };
    // d/ds of weight * mse(t, s) = weight * (2/d) (s - t)
    let coef = weight * T::lit(2.0) / T::from_usize_lossy(d);
    let grad_of = |s: &[T], t: &[T]| -> Vec<T> { s.iter().zip(t).map(|(&si, &ti)| coef * (si - ti)).collect() };

    let mut grads = Gradients::empty();
    for &tok in pair.x_tokens.iter().chain(&pair.y_tokens) {
        if tok != IMAGE_TOKEN {
            grads.add_row(tok, &vec![T::zero(); d]);
        }
    }
    let img = pair.image.as_deref();
    if let Some(f) = img {
        grads.add_outer(f, &vec![T::zero(); d]);
    }
    route_last(&mut grads, &pair.x_tokens, img, &grad_of(&p.s_x, &p.t_x));
    route_last(&mut grads, &pair.y_tokens, img, &grad_of(&p.s_y, &p.t_x));
    if let Some([t, sx, sy]) = &p.images {
        // One image row per sequence, so the mean pool passes g through with weight 1.
        let f = img.expect("image loss implies features");
        grads.add_outer(f, &grad_of(sx, t));
        grads.add_outer(f, &grad_of(sy, t));
    }
    Ok((breakdown, grads))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FdReport {
    pub max_relative_error: f64,
    pub max_absolute_error: f64,
    pub parameters_checked: usize,
}

/// Compare [`gradients`] against central differences on every parameter
/// the pair touches. Relative error uses the denominator
/// `max(|analytic|, |numeric|, 1e-12)`.
pub fn finite_diff_check<T: Scalar>(
    pair: &PreparedPair<T>,
    student: &EncoderParams<T>,
    teacher: &EncoderParams<T>,
    cfg: &LossConfig,
    eps: f64,
) -> Result<FdReport> {
    if !(eps > 0.0 && eps <= 1e-2) {
        return Err(Error::invalid("finite difference step", format!("eps {eps} outside (0, 1e-2]")));
    }
    let (_, analytic) = gradients(pair, teacher, student, cfg)?;
    let mut probe = student.clone();
    let h = T::lit(eps);
    let mut report = FdReport {
        max_relative_error: 0.0,
        max_absolute_error: 0.0,
        parameters_checked: 0,
    };
    let mut check = |probe: &mut EncoderParams<T>, slot: fn(&mut EncoderParams<T>, usize) -> &mut T, idx: usize, a: T| -> Result<()> {
        let orig = *slot(probe, idx);
        *slot(probe, idx) = orig + h;
        let plus = total_loss(pair, teacher, probe, cfg)?.total;
        *slot(probe, idx) = orig - h;
        let minus = total_loss(pair, teacher, probe, cfg)?.total;
        *slot(probe, idx) = orig;
        let numeric = ((plus - minus) / (h + h)).as_f64();
        let a = a.as_f64();
        let abs = (a - numeric).abs();
        let rel = abs / a.abs().max(numeric.abs()).max(1e-12);
        report.max_absolute_error = report.max_absolute_error.max(abs);
        report.max_relative_error = report.max_relative_error.max(rel);
        report.parameters_checked += 1;
        Ok(())
    };
    let d = student.dim();
    for (&tok, g) in &analytic.table {
        for (j, &a) in g.iter().enumerate() {
            check(&mut probe, |p, i| &mut p.table[i], tok as usize * d + j, a)?;
        }
    }
    if let Some(pg) = &analytic.projector {
        for (i, &a) in pg.iter().enumerate() {
            check(&mut probe, |p, i| &mut p.projector[i], i, a)?;
        }
    }
    Ok(report)
}

// ---------------------------------------------------------------------------
// Training

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub pairs: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub steps: usize,
    /// Batch-mean total loss at each step, before the update.
    pub step_losses: Vec<f64>,
    pub initial_mean_total: f64,
    pub final_mean_total: f64,
}

/// Mean per-pair total loss over a prepared corpus.
pub fn mean_total<T: Scalar>(
    pairs: &[PreparedPair<T>],
    teacher: &EncoderParams<T>,
    student: &EncoderParams<T>,
    cfg: &LossConfig,
) -> Result<f64> {
    let totals = pairs
        .par_iter()
        .map(|p| total_loss(p, teacher, student, cfg).map(|b| b.total.as_f64()))
        .collect::<Result<Vec<f64>>>()?;
    Ok(totals.iter().sum::<f64>() / totals.len().max(1) as f64)
}

pub fn prepare_corpus<T: Scalar>(
    corpus: &[ParallelPair],
    vocab_size: usize,
    images: &ImageStore<T>,
) -> Result<Vec<PreparedPair<T>>> {
    corpus
        .iter()
        .map(|p| PreparedPair::new(p, vocab_size, images))
        .collect()
}

/// Mini-batch gradient descent of `student` toward the frozen `teacher`.
///
/// One seeded permutation per epoch, the last partial batch kept, batch
/// loss the mean of per-pair totals. Per-pair gradients may be computed in
/// parallel (current rayon pool) but are summed in batch order, so the
/// result does not depend on the thread count.
pub fn train<T: Scalar>(
    corpus: &[PreparedPair<T>],
    teacher: &Frozen<T>,
    mut student: EncoderParams<T>,
    cfg: &LossConfig,
) -> Result<(EncoderParams<T>, TrainReport)> {
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(Error::invalid("training corpus", "no pairs"));
    }
    if cfg.use_image_loss && corpus.iter().all(|p| p.image.is_none()) {
        return Err(Error::invalid(
            "loss config",
            "image loss requested but no pair in the corpus has an image",
        ));
    }
    let initial_mean_total = mean_total(corpus, teacher, &student, cfg)?;
    let lr = T::lit(cfg.learning_rate);
    let mut step_losses = Vec::new();
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..corpus.len()).collect();
        Stream::keyed(cfg.seed, &[b"epoch", &(epoch as u64).to_le_bytes()]).shuffle(&mut order);
        for batch in order.chunks(cfg.batch_size) {
            let step = step_losses.len();
            let per_pair = batch
                .par_iter()
                .map(|&i| gradients(&corpus[i], teacher, &student, cfg))
                .collect::<Result<Vec<_>>>()?;
            let scale = T::one() / T::from_usize_lossy(batch.len());
            let mut sum = T::zero();
            let mut grads = Gradients::empty();
            for (loss, g) in &per_pair {
                sum += loss.total;
                grads.accumulate(g, scale);
            }
            let batch_loss = (sum * scale).as_f64();
            if !batch_loss.is_finite() {
                return Err(Error::NonFiniteLoss { step });
            }
            step_losses.push(batch_loss);
            grads.apply(&mut student, lr);
        }
    }
    let final_mean_total = mean_total(corpus, teacher, &student, cfg)?;
    if !final_mean_total.is_finite() {
        return Err(Error::NonFiniteLoss {
            step: step_losses.len(),
        });
    }
    let report = TrainReport {
        pairs: corpus.len(),
        epochs: cfg.epochs,
        batch_size: cfg.batch_size,
        steps: step_losses.len(),
        step_losses,
        initial_mean_total,
        final_mean_total,
    };
    Ok((student, report))
}

/// Mean cosine similarities between last-token pooled outputs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Alignment {
    /// cos(S(y), T(x))
    pub translated: f64,
    /// cos(S(x), T(x))
    pub english: f64,
}

pub fn alignment<T: Scalar>(
    corpus: &[PreparedPair<T>],
    teacher: &EncoderParams<T>,
    student: &EncoderParams<T>,
) -> Result<Alignment> {
    let cos = |a: &[T], b: &[T]| (dot(a, b) / (norm(a) * norm(b))).as_f64();
    let sims = corpus
        .par_iter()
        .map(|p| {
            let q = pooled(p, teacher, student, false)?;
            Ok((cos(&q.s_y, &q.t_x), cos(&q.s_x, &q.t_x)))
        })
        .collect::<Result<Vec<(f64, f64)>>>()?;
    let n = sims.len().max(1) as f64;
    Ok(Alignment {
        translated: sims.iter().map(|s| s.0).sum::<f64>() / n,
        english: sims.iter().map(|s| s.1).sum::<f64>() / n,
    })
}
