//! Training objectives for intermediate pre-training.
//!
//! Every cosine-based loss returns analytic gradients with respect to the raw
//! (unnormalised) embeddings it was given, in the order the inputs appear in
//! the function signature. Softmax denominators are evaluated with the row
//! maximum subtracted from every exponent, which is exact in real arithmetic
//! and keeps `exp` finite for small temperatures.

use ndarray::{Array2, Array3, ArrayView1, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Text,
    Image,
}

/// `N×d` encoder outputs plus the ids that tie rows across modalities.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBatch {
    vectors: Array2<f64>,
    modality: Modality,
    batch_ids: Vec<u64>,
}

impl EmbeddingBatch {
    pub fn new(vectors: Array2<f64>, modality: Modality, batch_ids: Vec<u64>) -> Result<Self> {
        let (n, d) = vectors.dim();
        if n == 0 || d == 0 {
            return Err(Error::Shape(format!("embedding batch must be non-empty, got {n}x{d}")));
        }
        if batch_ids.len() != n {
            return Err(Error::Shape(format!(
                "{} batch ids for {n} rows",
                batch_ids.len()
            )));
        }
        if let Some(pos) = vectors.iter().position(|v| !v.is_finite()) {
            return Err(Error::Domain(format!(
                "non-finite entry at row {}, column {}",
                pos / d,
                pos % d
            )));
        }
        Ok(Self {
            vectors,
            modality,
            batch_ids,
        })
    }

    /// Batch whose ids are `0..N`.
    pub fn sequential(vectors: Array2<f64>, modality: Modality) -> Result<Self> {
        let ids = (0..vectors.nrows() as u64).collect();
        Self::new(vectors, modality, ids)
    }

    pub fn vectors(&self) -> &Array2<f64> {
        &self.vectors
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    pub fn batch_ids(&self) -> &[u64] {
        &self.batch_ids
    }

    pub fn len(&self) -> usize {
        self.vectors.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.vectors.ncols()
    }

    pub fn into_vectors(self) -> Array2<f64> {
        self.vectors
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossResult {
    pub total: f64,
    pub per_item: Vec<f64>,
    /// One gradient per differentiable input, each with that input's shape.
    /// Hard-negative tensors are reported flattened to `(N·M)×d`.
    pub gradients: Option<Vec<Array2<f64>>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContrastiveConfig {
    pub temperature: f64,
    pub margin: f64,
    pub hard_negative_count: usize,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        Self {
            temperature: 0.05,
            margin: 1.0,
            hard_negative_count: 0,
        }
    }
}

impl ContrastiveConfig {
    pub fn validate(&self) -> Result<()> {
        check_temperature(self.temperature)?;
        if !(self.margin.is_finite() && self.margin >= 0.0) {
            return Err(Error::Config(format!("margin must be >= 0, got {}", self.margin)));
        }
        Ok(())
    }
}

/// `N×M×d` hard negatives; item `i` uses only its first `valid[i]` slots.
#[derive(Debug, Clone, PartialEq)]
pub struct HardNegatives {
    vectors: Array3<f64>,
    valid: Vec<usize>,
}

impl HardNegatives {
    pub fn new(vectors: Array3<f64>) -> Self {
        let (n, m, _) = vectors.dim();
        Self {
            vectors,
            valid: vec![m; n],
        }
    }

    /// Ragged negatives: slots past `valid[i]` are ignored and receive zero
    /// gradient.
    pub fn ragged(vectors: Array3<f64>, valid: Vec<usize>) -> Result<Self> {
        let (n, m, _) = vectors.dim();
        if valid.len() != n {
            return Err(Error::Shape(format!("{} valid counts for {n} items", valid.len())));
        }
        if let Some(&bad) = valid.iter().find(|&&v| v > m) {
            return Err(Error::Shape(format!("valid count {bad} exceeds M={m}")));
        }
        Ok(Self { vectors, valid })
    }

    pub fn empty(n: usize, d: usize) -> Self {
        Self::new(Array3::zeros((n, 0, d)))
    }

    pub fn vectors(&self) -> &Array3<f64> {
        &self.vectors
    }

    pub fn valid(&self) -> &[usize] {
        &self.valid
    }

    pub fn per_item(&self) -> usize {
        self.vectors.dim().1
    }
}

fn check_temperature(tau: f64) -> Result<()> {
    if !(tau.is_finite() && tau > 0.0) {
        return Err(Error::Config(format!("temperature must be > 0, got {tau}")));
    }
    Ok(())
}

fn check_pair(a: &EmbeddingBatch, b: &EmbeddingBatch) -> Result<()> {
    if a.vectors.dim() != b.vectors.dim() {
        return Err(Error::Shape(format!(
            "batch shapes differ: {:?} vs {:?}",
            a.vectors.dim(),
            b.vectors.dim()
        )));
    }
    if let Some(i) = (0..a.len()).find(|&i| a.batch_ids[i] != b.batch_ids[i]) {
        return Err(Error::Alignment(format!(
            "row {i}: batch id {} does not match {}",
            a.batch_ids[i], b.batch_ids[i]
        )));
    }
    Ok(())
}

fn norm(v: ArrayView1<f64>) -> f64 {
    v.dot(&v).sqrt()
}

pub fn cosine_similarity(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() || u.is_empty() {
        return Err(Error::Shape(format!(
            "cosine similarity needs equal non-zero dimensions, got {} and {}",
            u.len(),
            v.len()
        )));
    }
    let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if nu == 0.0 {
        return Err(Error::Domain("cosine similarity: first argument has zero norm".into()));
    }
    if nv == 0.0 {
        return Err(Error::Domain("cosine similarity: second argument has zero norm".into()));
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    Ok((dot / (nu * nv)).clamp(-1.0, 1.0))
}

/// Row-normalised copy plus the original row norms.
pub(crate) fn normalize_rows(x: &Array2<f64>, what: &str) -> Result<(Array2<f64>, Vec<f64>)> {
    let mut out = x.clone();
    let mut norms = Vec::with_capacity(x.nrows());
    for (i, mut row) in out.rows_mut().into_iter().enumerate() {
        let n = norm(row.view());
        if n == 0.0 {
            return Err(Error::Domain(format!("{what}: row {i} has zero norm")));
        }
        row /= n;
        norms.push(n);
    }
    Ok((out, norms))
}

/// Pull a gradient taken w.r.t. normalised rows back to the raw rows:
/// `g_x = (g_x̂ − (g_x̂·x̂) x̂) / ‖x‖`.
pub(crate) fn unnormalize_grad(g_hat: Array2<f64>, x_hat: &Array2<f64>, norms: &[f64]) -> Array2<f64> {
    let mut g = g_hat;
    for ((mut gr, xr), &n) in g.rows_mut().into_iter().zip(x_hat.rows()).zip(norms) {
        let proj = gr.dot(&xr);
        gr.scaled_add(-proj, &xr);
        gr /= n;
    }
    g
}

struct Directional {
    per_item: Vec<f64>,
    grad_anchors: Array2<f64>,
    grad_targets: Array2<f64>,
    grad_negatives: Option<Array2<f64>>,
}

/// One direction of in-batch InfoNCE, optionally with per-anchor hard
/// negatives appended to the denominator. Gradients are of `Σ per_item`.
fn directional(
    anchors: &Array2<f64>,
    targets: &Array2<f64>,
    negatives: Option<&HardNegatives>,
    tau: f64,
) -> Result<Directional> {
    let n = anchors.nrows();
    let (a_hat, a_norm) = normalize_rows(anchors, "anchors")?;
    let (t_hat, t_norm) = normalize_rows(targets, "targets")?;
    let negatives = negatives.filter(|hn| hn.per_item() > 0);
    let (neg_hat, neg_norm, m) = match negatives {
        Some(hn) => {
            let (_, m, d) = hn.vectors.dim();
            let flat = hn
                .vectors
                .to_shape((n * m, d))
                .map_err(|e| Error::Shape(e.to_string()))?
                .to_owned();
            let mut hat = flat.clone();
            let mut norms = vec![1.0; n * m];
            for i in 0..n {
                for k in 0..hn.valid[i] {
                    let r = i * m + k;
                    let nr = norm(flat.row(r));
                    if nr == 0.0 {
                        return Err(Error::Domain(format!("hard negative ({i},{k}) has zero norm")));
                    }
                    hat.row_mut(r).mapv_inplace(|v| v / nr);
                    norms[r] = nr;
                }
            }
            (Some(hat), norms, m)
        }
        None => (None, Vec::new(), 0),
    };

    let sims = a_hat.dot(&t_hat.t());
    let mut per_item = Vec::with_capacity(n);
    // d(Σ loss)/d(cosine), for in-batch targets and for negatives.
    let mut g_sims = Array2::<f64>::zeros((n, n));
    let mut g_negs = Array2::<f64>::zeros((n, m));
    let mut logits = Vec::with_capacity(n + m);
    for i in 0..n {
        logits.clear();
        logits.extend(sims.row(i).iter().map(|s| s / tau));
        let valid = negatives.map_or(0, |hn| hn.valid[i]);
        if let Some(nh) = &neg_hat {
            for k in 0..valid {
                logits.push(a_hat.row(i).dot(&nh.row(i * m + k)) / tau);
            }
        }
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = logits.iter().map(|l| (l - max).exp()).sum();
        let lse = max + sum.ln();
        per_item.push(lse - logits[i]);
        for j in 0..n {
            let p = (logits[j] - max).exp() / sum;
            g_sims[[i, j]] = (p - if i == j { 1.0 } else { 0.0 }) / tau;
        }
        for k in 0..valid {
            g_negs[[i, k]] = (logits[n + k] - max).exp() / sum / tau;
        }
    }

    let mut g_a_hat = g_sims.dot(&t_hat);
    let g_t_hat = g_sims.t().dot(&a_hat);
    let grad_negatives = match &neg_hat {
        Some(nh) => {
            let mut g_n_hat = Array2::<f64>::zeros(nh.raw_dim());
            for i in 0..n {
                for k in 0..m {
                    let w = g_negs[[i, k]];
                    if w != 0.0 {
                        g_a_hat.row_mut(i).scaled_add(w, &nh.row(i * m + k));
                        g_n_hat.row_mut(i * m + k).scaled_add(w, &a_hat.row(i));
                    }
                }
            }
            Some(unnormalize_grad(g_n_hat, nh, &neg_norm))
        }
        None => None,
    };
    Ok(Directional {
        per_item,
        grad_anchors: unnormalize_grad(g_a_hat, &a_hat, &a_norm),
        grad_targets: unnormalize_grad(g_t_hat, &t_hat, &t_norm),
        grad_negatives,
    })
}

/// In-batch InfoNCE from `anchors` to `targets`; `total` is the sum over
/// items. Argument order selects the direction (image→text or text→image).
pub fn infonce_loss(anchors: &EmbeddingBatch, targets: &EmbeddingBatch, tau: f64) -> Result<LossResult> {
    check_temperature(tau)?;
    check_pair(anchors, targets)?;
    let d = directional(&anchors.vectors, &targets.vectors, None, tau)?;
    Ok(LossResult {
        total: d.per_item.iter().sum(),
        per_item: d.per_item,
        gradients: Some(vec![d.grad_anchors, d.grad_targets]),
    })
}

/// Bidirectional cross-modal contrastive loss:
/// `total = (1/N) Σ_i (ℓ_i^{v→l} + ℓ_i^{l→v})`, with `per_item[i]` holding the
/// bracketed sum. Gradients are `[image, text]`.
pub fn cmcl_total(image: &EmbeddingBatch, text: &EmbeddingBatch, cfg: &ContrastiveConfig) -> Result<LossResult> {
    bidirectional(image, text, None, cfg)
}

/// [`cmcl_total`] with `M` LM-perturbed hard negatives per item added to the
/// image→text denominator only. Gradients are `[image, text, negatives]`;
/// the negatives gradient is flattened to `(N·M)×d`.
pub fn ans_loss(
    image: &EmbeddingBatch,
    text: &EmbeddingBatch,
    hard_negatives: &HardNegatives,
    cfg: &ContrastiveConfig,
) -> Result<LossResult> {
    let (n, m, d) = hard_negatives.vectors.dim();
    if m != cfg.hard_negative_count {
        return Err(Error::Shape(format!(
            "hard negative tensor has M={m}, config expects {}",
            cfg.hard_negative_count
        )));
    }
    if n != image.len() || d != image.dim() {
        return Err(Error::Shape(format!(
            "hard negatives {n}x{m}x{d} do not match batch {}x{}",
            image.len(),
            image.dim()
        )));
    }
    if let Some(pos) = hard_negatives.vectors.iter().position(|v| !v.is_finite()) {
        return Err(Error::Domain(format!("non-finite hard negative entry at flat index {pos}")));
    }
    let mut result = bidirectional(image, text, Some(hard_negatives), cfg)?;
    if let Some(grads) = result.gradients.as_mut() {
        if grads.len() == 2 {
            grads.push(Array2::zeros((n * m, d)));
        }
    }
    Ok(result)
}

fn bidirectional(
    image: &EmbeddingBatch,
    text: &EmbeddingBatch,
    negatives: Option<&HardNegatives>,
    cfg: &ContrastiveConfig,
) -> Result<LossResult> {
    cfg.validate()?;
    check_pair(image, text)?;
    let n = image.len() as f64;
    let v2l = directional(&image.vectors, &text.vectors, negatives, cfg.temperature)?;
    let l2v = directional(&text.vectors, &image.vectors, None, cfg.temperature)?;
    let per_item: Vec<f64> = v2l.per_item.iter().zip(&l2v.per_item).map(|(a, b)| a + b).collect();
    let total = per_item.iter().sum::<f64>() / n;
    let grad_image = (v2l.grad_anchors + &l2v.grad_targets) / n;
    let grad_text = (v2l.grad_targets + &l2v.grad_anchors) / n;
    let mut grads = vec![grad_image, grad_text];
    if let Some(g) = v2l.grad_negatives {
        grads.push(g / n);
    }
    Ok(LossResult {
        total,
        per_item,
        gradients: Some(grads),
    })
}

/// Text contrastive loss between two dropout encodings of the same captions.
/// The denominator runs over the dropout-positive encodings `h_j^+`.
/// `total` is the mean over items; gradients are `[reps, positives]`.
pub fn tcl_loss(reps: &EmbeddingBatch, positives: &EmbeddingBatch, tau: f64) -> Result<LossResult> {
    tcl_loss_with_negatives(reps, positives, None, tau)
}

/// [`tcl_loss`] with per-caption hard negatives in the denominator.
/// Gradients are `[reps, positives]` plus the flattened negatives gradient
/// when negatives are given.
pub fn tcl_loss_with_negatives(
    reps: &EmbeddingBatch,
    positives: &EmbeddingBatch,
    negatives: Option<&HardNegatives>,
    tau: f64,
) -> Result<LossResult> {
    check_temperature(tau)?;
    check_pair(reps, positives)?;
    let n = reps.len() as f64;
    let d = directional(&reps.vectors, &positives.vectors, negatives, tau)?;
    let mut grads = vec![d.grad_anchors / n, d.grad_targets / n];
    if let Some(g) = d.grad_negatives {
        grads.push(g / n);
    }
    Ok(LossResult {
        total: d.per_item.iter().sum::<f64>() / n,
        per_item: d.per_item,
        gradients: Some(grads),
    })
}

/// Margin ranking loss with one random mismatched image and caption per
/// item. `total` is the sum over items; gradients are
/// `[image, text, negative_images, negative_texts]` (zero at inactive terms).
pub fn hinge_loss(
    image: &EmbeddingBatch,
    text: &EmbeddingBatch,
    negative_images: &EmbeddingBatch,
    negative_texts: &EmbeddingBatch,
    alpha: f64,
) -> Result<LossResult> {
    let shape = image.vectors.dim();
    for (name, b) in [("text", text), ("negative_images", negative_images), ("negative_texts", negative_texts)] {
        if b.vectors.dim() != shape {
            return Err(Error::Shape(format!(
                "{name} batch is {:?}, image batch is {shape:?}",
                b.vectors.dim()
            )));
        }
    }
    if !alpha.is_finite() {
        return Err(Error::Config(format!("margin must be finite, got {alpha}")));
    }
    let (v, v_norm) = normalize_rows(&image.vectors, "image")?;
    let (l, l_norm) = normalize_rows(&text.vectors, "text")?;
    let (nv, nv_norm) = normalize_rows(&negative_images.vectors, "negative_images")?;
    let (nl, nl_norm) = normalize_rows(&negative_texts.vectors, "negative_texts")?;
    let mut gv = Array2::zeros(v.raw_dim());
    let mut gl = Array2::zeros(v.raw_dim());
    let mut gnv = Array2::zeros(v.raw_dim());
    let mut gnl = Array2::zeros(v.raw_dim());
    let mut per_item = Vec::with_capacity(shape.0);
    for i in 0..shape.0 {
        let pos = v.row(i).dot(&l.row(i));
        let neg_img = nv.row(i).dot(&l.row(i));
        let neg_txt = v.row(i).dot(&nl.row(i));
        let t1 = alpha - pos + neg_img;
        let t2 = alpha - pos + neg_txt;
        per_item.push(t1.max(0.0) + t2.max(0.0));
        if t1 > 0.0 {
            gv.row_mut(i).scaled_add(-1.0, &l.row(i));
            gl.row_mut(i).scaled_add(-1.0, &v.row(i));
            gl.row_mut(i).scaled_add(1.0, &nv.row(i));
            gnv.row_mut(i).scaled_add(1.0, &l.row(i));
        }
        if t2 > 0.0 {
            gv.row_mut(i).scaled_add(-1.0, &l.row(i));
            gl.row_mut(i).scaled_add(-1.0, &v.row(i));
            gv.row_mut(i).scaled_add(1.0, &nl.row(i));
            gnl.row_mut(i).scaled_add(1.0, &v.row(i));
        }
    }
    Ok(LossResult {
        total: per_item.iter().sum(),
        per_item,
        gradients: Some(vec![
            unnormalize_grad(gv, &v, &v_norm),
            unnormalize_grad(gl, &l, &l_norm),
            unnormalize_grad(gnv, &nv, &nv_norm),
            unnormalize_grad(gnl, &nl, &nl_norm),
        ]),
    })
}

const NORMALIZATION_TOL: f64 = 1e-6;

fn cross_entropy_rows(distributions: &Array2<f64>, targets: &[usize], what: &str) -> Result<Vec<f64>> {
    if distributions.nrows() != targets.len() {
        return Err(Error::Shape(format!(
            "{} {what} distributions for {} targets",
            distributions.nrows(),
            targets.len()
        )));
    }
    let vocab = distributions.ncols();
    let mut per_item = Vec::with_capacity(targets.len());
    for (row_idx, (row, &target)) in distributions.rows().into_iter().zip(targets).enumerate() {
        if target >= vocab {
            return Err(Error::Index(format!(
                "row {row_idx}: target {target} outside {what} vocabulary of size {vocab}"
            )));
        }
        let sum = row.sum();
        if (sum - 1.0).abs() > NORMALIZATION_TOL || row.iter().any(|p| !(*p >= 0.0)) {
            return Err(Error::Validation(format!(
                "row {row_idx}: {what} distribution is not normalised (sum {sum})"
            )));
        }
        per_item.push(-row[target].ln());
    }
    Ok(per_item)
}

fn mean_result(per_item: Vec<f64>) -> LossResult {
    let total = if per_item.is_empty() {
        0.0
    } else {
        per_item.iter().sum::<f64>() / per_item.len() as f64
    };
    LossResult {
        total,
        per_item,
        gradients: None,
    }
}

/// Masked-token cross-entropy, averaged over masked positions. Each row of
/// `distributions` is one masked position.
pub fn mlm_loss(distributions: &Array2<f64>, targets: &[usize]) -> Result<LossResult> {
    cross_entropy_rows(distributions, targets, "token").map(mean_result)
}

/// Voken classification cross-entropy. Tokens whose target is `None` have no
/// voken and are left out of both `per_item` and the mean.
pub fn voken_loss(distributions: &Array2<f64>, targets: &[Option<usize>]) -> Result<LossResult> {
    if distributions.nrows() != targets.len() {
        return Err(Error::Shape(format!(
            "{} voken distributions for {} targets",
            distributions.nrows(),
            targets.len()
        )));
    }
    let rows: Vec<usize> = (0..targets.len()).filter(|&i| targets[i].is_some()).collect();
    let kept = distributions.select(Axis(0), &rows);
    let kept_targets: Vec<usize> = rows.iter().map(|&i| targets[i].unwrap()).collect();
    cross_entropy_rows(&kept, &kept_targets, "voken").map(mean_result)
}

/// Softmax cross-entropy from raw logits, mean over rows, with the gradient
/// w.r.t. the logits. Used by the trainers; `mlm_loss` is the
/// distribution-level contract.
pub fn softmax_cross_entropy(logits: &Array2<f64>, targets: &[usize]) -> Result<(LossResult, Array2<f64>)> {
    if logits.nrows() != targets.len() {
        return Err(Error::Shape(format!("{} logit rows for {} targets", logits.nrows(), targets.len())));
    }
    let mut grad = crate::autograd::softmax_rows(logits);
    let count = targets.len().max(1) as f64;
    let mut per_item = Vec::with_capacity(targets.len());
    for (i, &t) in targets.iter().enumerate() {
        if t >= logits.ncols() {
            return Err(Error::Index(format!("target {t} outside {} classes", logits.ncols())));
        }
        let row = logits.row(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        per_item.push(lse - row[t]);
        grad[[i, t]] -= 1.0;
    }
    grad /= count;
    Ok((mean_result(per_item), grad))
}

/// Squared MMD between two activation sets under `k(x, y) = (xᵀy)²` on
/// L2-normalised rows. Rows are set elements; both sets must share a column
/// dimension.
pub fn nst_loss(teacher: &Array2<f64>, student: &Array2<f64>) -> Result<f64> {
    nst_loss_with_grad(teacher, student).map(|(loss, _)| loss)
}

/// [`nst_loss`] plus its gradient w.r.t. the raw student rows.
pub fn nst_loss_with_grad(teacher: &Array2<f64>, student: &Array2<f64>) -> Result<(f64, Array2<f64>)> {
    if teacher.nrows() == 0 || student.nrows() == 0 {
        return Err(Error::Domain("NST needs non-empty activation sets".into()));
    }
    if teacher.ncols() != student.ncols() {
        return Err(Error::Shape(format!(
            "teacher activations have dim {}, student {}",
            teacher.ncols(),
            student.ncols()
        )));
    }
    let (t, _) = normalize_rows(teacher, "teacher activations")?;
    let (s, s_norm) = normalize_rows(student, "student activations")?;
    let nt = t.nrows() as f64;
    let ns = s.nrows() as f64;
    let k_tt = t.dot(&t.t()).mapv(|x| x * x);
    let ss = s.dot(&s.t());
    let ts = t.dot(&s.t());
    let loss = k_tt.sum() / (nt * nt) + ss.mapv(|x| x * x).sum() / (ns * ns) - 2.0 * ts.mapv(|x| x * x).sum() / (nt * ns);
    let g_hat = ss.dot(&s) * (4.0 / (ns * ns)) - ts.t().dot(&t) * (4.0 / (nt * ns));
    Ok((loss.max(0.0), unnormalize_grad(g_hat, &s, &s_norm)))
}
