//! Per-pixel segmentation model: a one-hidden-layer network (tanh hidden,
//! softmax output) over zero-padded square patches, trained with the sum of
//! soft Dice loss and cross entropy, with exact analytic gradients.
//!
//! Multi-task heterogeneity is realized by masking: the Dice term averages
//! only over the classes a client supervises, and target labels never fall
//! outside that set, so an organ-only client never supervises the tumor
//! channel.

use std::collections::BTreeSet;

use crate::error::{FedSimError, Result};
use crate::param_math::{sq_distance, ParamVector};

/// Architecture constants; fixes the flat parameter layout
/// `[w1 | b1 | w2 | b2]` and the total parameter count.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ModelSpec {
    /// Patch radius in pixels; the input patch is `(2r+1) x (2r+1)`.
    pub patch_radius: usize,
    pub hidden_units: usize,
    pub num_classes: usize,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            patch_radius: 2,
            hidden_units: 16,
            num_classes: 3,
        }
    }
}

impl ModelSpec {
    pub fn patch_diameter(&self) -> usize {
        2 * self.patch_radius + 1
    }

    pub fn patch_area(&self) -> usize {
        self.patch_diameter() * self.patch_diameter()
    }

    /// Total parameter count P.
    pub fn param_count(&self) -> usize {
        let a = self.patch_area();
        let h = self.hidden_units;
        let c = self.num_classes;
        (a * h + h) + (h * c + c)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(FedSimError::Usage(format!(
                "num_classes {} < 2",
                self.num_classes
            )));
        }
        if self.hidden_units == 0 {
            return Err(FedSimError::Usage("hidden_units must be >= 1".into()));
        }
        Ok(())
    }

    // Flat layout offsets.
    fn w1_at(&self, j: usize, i: usize) -> usize {
        j * self.patch_area() + i
    }
    fn b1_at(&self, j: usize) -> usize {
        self.patch_area() * self.hidden_units + j
    }
    fn w2_at(&self, c: usize, j: usize) -> usize {
        self.patch_area() * self.hidden_units + self.hidden_units + c * self.hidden_units + j
    }
    fn b2_at(&self, c: usize) -> usize {
        self.patch_area() * self.hidden_units
            + self.hidden_units
            + self.num_classes * self.hidden_units
            + c
    }
}

/// A mini-batch of images with per-pixel class labels and the set of class
/// ids this client supervises.
#[derive(Debug, Clone)]
pub struct Batch<'a> {
    pub images: Vec<&'a [f64]>,
    pub labels: Vec<&'a [u8]>,
    pub height: usize,
    pub width: usize,
    pub label_space: &'a BTreeSet<u8>,
}

impl<'a> Batch<'a> {
    pub fn new(
        images: Vec<&'a [f64]>,
        labels: Vec<&'a [u8]>,
        height: usize,
        width: usize,
        label_space: &'a BTreeSet<u8>,
    ) -> Result<Self> {
        if images.is_empty() || images.len() != labels.len() {
            return Err(FedSimError::Usage(format!(
                "batch needs matching, nonempty image/label lists ({} vs {})",
                images.len(),
                labels.len()
            )));
        }
        for (img, lab) in images.iter().zip(&labels) {
            if img.len() != height * width || lab.len() != height * width {
                return Err(FedSimError::Usage(
                    "image or label plane does not match H*W".into(),
                ));
            }
            if let Some(&bad) = lab.iter().find(|l| !label_space.contains(l) && **l != 0) {
                return Err(FedSimError::Usage(format!(
                    "label {bad} outside the client's label space"
                )));
            }
        }
        Ok(Self {
            images,
            labels,
            height,
            width,
            label_space,
        })
    }

    fn pixel_count(&self) -> usize {
        self.images.len() * self.height * self.width
    }

    fn check_geometry(&self, spec: &ModelSpec) -> Result<()> {
        let d = spec.patch_diameter();
        if self.height < d || self.width < d {
            return Err(FedSimError::Usage(format!(
                "batch {}x{} smaller than patch diameter {d}",
                self.height, self.width
            )));
        }
        Ok(())
    }
}

fn check_params(params: &ParamVector, spec: &ModelSpec) -> Result<()> {
    spec.validate()?;
    if params.len() != spec.param_count() {
        return Err(FedSimError::Usage(format!(
            "parameter vector length {} != model parameter count {}",
            params.len(),
            spec.param_count()
        )));
    }
    Ok(())
}

/// Copies the zero-padded patch centered at (y, x) into `out`.
fn extract_patch(img: &[f64], h: usize, w: usize, y: usize, x: usize, r: usize, out: &mut [f64]) {
    let d = 2 * r + 1;
    let (y, x, r) = (y as isize, x as isize, r as isize);
    for dy in -r..=r {
        let yy = y + dy;
        let row_in = yy >= 0 && yy < h as isize;
        for dx in -r..=r {
            let xx = x + dx;
            let v = if row_in && xx >= 0 && xx < w as isize {
                img[yy as usize * w + xx as usize]
            } else {
                0.0
            };
            out[((dy + r) * d as isize + (dx + r)) as usize] = v;
        }
    }
}

/// Hidden activations and class probabilities for one pixel's patch.
fn pixel_forward(
    params: &ParamVector,
    spec: &ModelSpec,
    patch: &[f64],
    hidden: &mut [f64],
    probs: &mut [f64],
) {
    let p = params.as_slice();
    let area = spec.patch_area();
    for j in 0..spec.hidden_units {
        let row = &p[spec.w1_at(j, 0)..spec.w1_at(j, 0) + area];
        let mut acc = p[spec.b1_at(j)];
        for (wi, xi) in row.iter().zip(patch) {
            acc += wi * xi;
        }
        hidden[j] = acc.tanh();
    }
    let mut max_z = f64::NEG_INFINITY;
    for c in 0..spec.num_classes {
        let row = &p[spec.w2_at(c, 0)..spec.w2_at(c, 0) + spec.hidden_units];
        let mut z = p[spec.b2_at(c)];
        for (wj, hj) in row.iter().zip(hidden.iter()) {
            z += wj * hj;
        }
        probs[c] = z;
        max_z = max_z.max(z);
    }
    let mut denom = 0.0;
    for pc in probs.iter_mut() {
        *pc = (*pc - max_z).exp();
        denom += *pc;
    }
    for pc in probs.iter_mut() {
        *pc /= denom;
    }
}

/// Per-pixel class probabilities for the whole batch, flattened as
/// `[image][row][col][class]`. Every pixel's distribution sums to 1.
pub fn forward(params: &ParamVector, spec: &ModelSpec, batch: &Batch) -> Result<Vec<f64>> {
    check_params(params, spec)?;
    batch.check_geometry(spec)?;
    let c = spec.num_classes;
    let mut out = vec![0.0; batch.pixel_count() * c];
    let mut patch = vec![0.0; spec.patch_area()];
    let mut hidden = vec![0.0; spec.hidden_units];
    let mut cursor = 0;
    for img in &batch.images {
        for y in 0..batch.height {
            for x in 0..batch.width {
                extract_patch(
                    img,
                    batch.height,
                    batch.width,
                    y,
                    x,
                    spec.patch_radius,
                    &mut patch,
                );
                pixel_forward(params, spec, &patch, &mut hidden, &mut out[cursor..cursor + c]);
                cursor += c;
            }
        }
    }
    Ok(out)
}

/// Base loss terms and their exact gradient, before any loss scaling or
/// proximal regularization.
pub(crate) struct BaseLossGrad {
    /// SoftDiceLoss + CrossEntropy over the supervised classes.
    pub loss: f64,
    /// Mean soft Dice score over the supervised classes, in (0, 1].
    pub soft_dice: f64,
    pub grad: ParamVector,
}

const DICE_SMOOTH: f64 = 1e-5;

/// One-hot targets derived from batch labels, flattened `[pixel][class]`.
fn onehot_from_labels(batch: &Batch, num_classes: usize) -> Vec<f64> {
    let mut t = vec![0.0; batch.pixel_count() * num_classes];
    let mut n = 0;
    for lab in &batch.labels {
        for &l in lab.iter() {
            t[n * num_classes + l as usize] = 1.0;
            n += 1;
        }
    }
    t
}

/// Forward + backward pass computing the masked Dice+CE loss and its exact
/// gradient. `targets` is the one-hot matrix the Dice term reads; channels
/// outside the batch's label space are never accessed, which is what makes
/// supervision masking hold structurally.
pub(crate) fn base_loss_grad_with_targets(
    params: &ParamVector,
    spec: &ModelSpec,
    batch: &Batch,
    targets: &[f64],
) -> Result<BaseLossGrad> {
    check_params(params, spec)?;
    batch.check_geometry(spec)?;
    let c = spec.num_classes;
    let n_pixels = batch.pixel_count();
    if targets.len() != n_pixels * c {
        return Err(FedSimError::Usage("targets do not match batch size".into()));
    }

    let supervised: Vec<usize> = (0..c)
        .filter(|&cls| batch.label_space.contains(&(cls as u8)))
        .collect();
    if supervised.is_empty() {
        return Err(FedSimError::Usage("empty label space".into()));
    }

    // Pass 1: probabilities, hidden activations, CE sum, Dice accumulators.
    let probs = forward(params, spec, batch)?;
    let mut hidden_all = vec![0.0; n_pixels * spec.hidden_units];
    {
        let p = params.as_slice();
        let mut patch = vec![0.0; spec.patch_area()];
        let mut n = 0;
        for img in &batch.images {
            for y in 0..batch.height {
                for x in 0..batch.width {
                    extract_patch(
                        img,
                        batch.height,
                        batch.width,
                        y,
                        x,
                        spec.patch_radius,
                        &mut patch,
                    );
                    let hid = &mut hidden_all[n * spec.hidden_units..(n + 1) * spec.hidden_units];
                    for j in 0..spec.hidden_units {
                        let row = &p[spec.w1_at(j, 0)..spec.w1_at(j, 0) + spec.patch_area()];
                        let mut acc = p[spec.b1_at(j)];
                        for (wi, xi) in row.iter().zip(&patch) {
                            acc += wi * xi;
                        }
                        hid[j] = acc.tanh();
                    }
                    n += 1;
                }
            }
        }
    }

    let mut ce_sum = 0.0;
    let mut inter = vec![0.0; c]; // sum_n p * t
    let mut pred_mass = vec![0.0; c]; // sum_n p
    let mut true_mass = vec![0.0; c]; // sum_n t
    {
        let mut n = 0;
        for lab in &batch.labels {
            for &l in lab.iter() {
                let row = &probs[n * c..(n + 1) * c];
                ce_sum -= row[l as usize].ln();
                for &cls in &supervised {
                    let t = targets[n * c + cls];
                    inter[cls] += row[cls] * t;
                    pred_mass[cls] += row[cls];
                    true_mass[cls] += t;
                }
                n += 1;
            }
        }
    }
    let n_f = n_pixels as f64;
    let ce = ce_sum / n_f;

    let inv_s = 1.0 / supervised.len() as f64;
    let mut dice_loss = 0.0;
    let mut dice_score_sum = 0.0;
    // d(Dice)/d(p_{n,c}) = du_coef[c] * t_{n,c} + dv_coef[c]
    let mut du_coef = vec![0.0; c];
    let mut dv_coef = vec![0.0; c];
    for &cls in &supervised {
        let den = pred_mass[cls] + true_mass[cls] + DICE_SMOOTH;
        let dice = (2.0 * inter[cls] + DICE_SMOOTH) / den;
        dice_score_sum += dice;
        dice_loss += 1.0 - dice;
        du_coef[cls] = -inv_s * 2.0 / den;
        dv_coef[cls] = inv_s * (2.0 * inter[cls] + DICE_SMOOTH) / (den * den);
    }
    dice_loss *= inv_s;
    let soft_dice = dice_score_sum * inv_s;
    let loss = dice_loss + ce;
    if !loss.is_finite() {
        return Err(FedSimError::Usage("non-finite loss".into()));
    }

    // Pass 2: backpropagate d(loss)/d(z) through the network.
    let mut grad = vec![0.0; spec.param_count()];
    let mut patch = vec![0.0; spec.patch_area()];
    let mut dz = vec![0.0; c];
    let p = params.as_slice();
    let mut n = 0;
    for (img, lab) in batch.images.iter().zip(&batch.labels) {
        for y in 0..batch.height {
            for x in 0..batch.width {
                let l = lab[y * batch.width + x] as usize;
                let row = &probs[n * c..(n + 1) * c];
                let hid = &hidden_all[n * spec.hidden_units..(n + 1) * spec.hidden_units];

                // Dice chain through the softmax Jacobian.
                let mut s = 0.0;
                for &cls in &supervised {
                    s += (du_coef[cls] * targets[n * c + cls] + dv_coef[cls]) * row[cls];
                }
                for d in 0..c {
                    let g = if batch.label_space.contains(&(d as u8)) {
                        du_coef[d] * targets[n * c + d] + dv_coef[d]
                    } else {
                        0.0
                    };
                    let ce_part = (row[d] - if d == l { 1.0 } else { 0.0 }) / n_f;
                    dz[d] = ce_part + row[d] * (g - s);
                }

                extract_patch(
                    img,
                    batch.height,
                    batch.width,
                    y,
                    x,
                    spec.patch_radius,
                    &mut patch,
                );
                for d in 0..c {
                    let dzd = dz[d];
                    grad[spec.b2_at(d)] += dzd;
                    let w2_off = spec.w2_at(d, 0);
                    for j in 0..spec.hidden_units {
                        grad[w2_off + j] += dzd * hid[j];
                    }
                }
                for j in 0..spec.hidden_units {
                    let mut dh = 0.0;
                    for d in 0..c {
                        dh += dz[d] * p[spec.w2_at(d, j)];
                    }
                    let da = dh * (1.0 - hid[j] * hid[j]);
                    grad[spec.b1_at(j)] += da;
                    let w1_off = spec.w1_at(j, 0);
                    for (gi, xi) in grad[w1_off..w1_off + spec.patch_area()]
                        .iter_mut()
                        .zip(&patch)
                    {
                        *gi += da * xi;
                    }
                }
                n += 1;
            }
        }
    }

    Ok(BaseLossGrad {
        loss,
        soft_dice,
        grad: ParamVector::new(grad)
            .map_err(|_| FedSimError::Usage("non-finite gradient".into()))?,
    })
}

pub(crate) fn base_loss_grad(
    params: &ParamVector,
    spec: &ModelSpec,
    batch: &Batch,
) -> Result<BaseLossGrad> {
    let targets = onehot_from_labels(batch, spec.num_classes);
    base_loss_grad_with_targets(params, spec, batch, &targets)
}

/// Scaled and regularized loss with its exact gradient:
/// `loss_scale * (SoftDiceLoss + CrossEntropy) + (prox_mu/2) * ||params - anchor||^2`.
///
/// `anchor` must be present exactly when `prox_mu > 0`.
pub fn loss_and_grad(
    params: &ParamVector,
    spec: &ModelSpec,
    batch: &Batch,
    loss_scale: f64,
    prox_mu: f64,
    anchor: Option<&ParamVector>,
) -> Result<(f64, ParamVector)> {
    if loss_scale.is_nan() || loss_scale <= 0.0 {
        return Err(FedSimError::Usage(format!(
            "loss_scale {loss_scale} must be > 0"
        )));
    }
    if prox_mu < 0.0 {
        return Err(FedSimError::Usage(format!("prox_mu {prox_mu} must be >= 0")));
    }
    match (prox_mu > 0.0, anchor.is_some()) {
        (true, false) => {
            return Err(FedSimError::Usage(
                "anchor missing while prox_mu > 0".into(),
            ))
        }
        (false, true) => {
            return Err(FedSimError::Usage(
                "anchor given while prox_mu == 0".into(),
            ))
        }
        _ => {}
    }
    let base = base_loss_grad(params, spec, batch)?;
    apply_scale_and_prox(base.loss, base.grad, loss_scale, prox_mu, anchor, params)
}

/// Applies loss scaling and the proximal term to a base loss/gradient pair.
/// A scale of exactly 1 and a mu of exactly 0 leave the inputs untouched
/// bit-for-bit.
pub(crate) fn apply_scale_and_prox(
    base_loss: f64,
    base_grad: ParamVector,
    loss_scale: f64,
    prox_mu: f64,
    anchor: Option<&ParamVector>,
    params: &ParamVector,
) -> Result<(f64, ParamVector)> {
    let mut loss;
    let mut grad;
    if loss_scale == 1.0 {
        loss = base_loss;
        grad = base_grad;
    } else {
        loss = loss_scale * base_loss;
        grad = ParamVector::new(base_grad.as_slice().iter().map(|g| loss_scale * g).collect())?;
    }
    if prox_mu > 0.0 {
        let anchor =
            anchor.ok_or_else(|| FedSimError::Usage("anchor missing while prox_mu > 0".into()))?;
        loss += 0.5 * prox_mu * sq_distance(params, anchor)?;
        for i in 0..grad.len() {
            grad[i] += prox_mu * (params[i] - anchor[i]);
        }
    }
    Ok((loss, grad))
}

/// Hard (argmax) predicted labels for a list of images; ties go to the
/// lowest class id.
pub fn predict_labels(
    params: &ParamVector,
    spec: &ModelSpec,
    images: &[&[f64]],
    height: usize,
    width: usize,
) -> Result<Vec<Vec<u8>>> {
    check_params(params, spec)?;
    let c = spec.num_classes;
    let mut patch = vec![0.0; spec.patch_area()];
    let mut hidden = vec![0.0; spec.hidden_units];
    let mut probs = vec![0.0; c];
    let mut out = Vec::with_capacity(images.len());
    for img in images {
        if img.len() != height * width {
            return Err(FedSimError::Usage("image does not match H*W".into()));
        }
        let mut labels = vec![0u8; height * width];
        for y in 0..height {
            for x in 0..width {
                extract_patch(img, height, width, y, x, spec.patch_radius, &mut patch);
                pixel_forward(params, spec, &patch, &mut hidden, &mut probs);
                let mut best = 0;
                for (cls, &pc) in probs.iter().enumerate() {
                    if pc > probs[best] {
                        best = cls;
                    }
                }
                labels[y * width + x] = best as u8;
            }
        }
        out.push(labels);
    }
    Ok(out)
}

/// Hard Dice overlap `2|A n B| / (|A| + |B|)` for one class over a whole
/// batch of label planes. Both masks empty scores 1.0; exactly one empty
/// scores 0.0.
pub fn dice_score(pred_labels: &[u8], true_labels: &[u8], class_id: u8) -> Result<f64> {
    if pred_labels.len() != true_labels.len() {
        return Err(FedSimError::Usage(format!(
            "dice_score: shape mismatch {} vs {}",
            pred_labels.len(),
            true_labels.len()
        )));
    }
    let mut a = 0u64;
    let mut b = 0u64;
    let mut both = 0u64;
    for (&pl, &tl) in pred_labels.iter().zip(true_labels) {
        let in_a = pl == class_id;
        let in_b = tl == class_id;
        a += in_a as u64;
        b += in_b as u64;
        both += (in_a && in_b) as u64;
    }
    if a + b == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * both as f64 / (a + b) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn full_space() -> BTreeSet<u8> {
        [0u8, 1, 2].into_iter().collect()
    }

    fn organ_space() -> BTreeSet<u8> {
        [0u8, 1].into_iter().collect()
    }

    fn random_params(rng: &mut ChaCha8Rng, spec: &ModelSpec, scale: f64) -> ParamVector {
        ParamVector::new(
            (0..spec.param_count())
                .map(|_| rng.random_range(-scale..scale))
                .collect(),
        )
        .unwrap()
    }

    fn random_image_labels(
        rng: &mut ChaCha8Rng,
        h: usize,
        w: usize,
        max_class: u8,
    ) -> (Vec<f64>, Vec<u8>) {
        let img: Vec<f64> = (0..h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
        let lab: Vec<u8> = (0..h * w).map(|_| rng.random_range(0..=max_class)).collect();
        (img, lab)
    }

    #[test]
    fn test_param_count_default() {
        let spec = ModelSpec::default();
        // (25*16 + 16) + (16*3 + 3)
        assert_eq!(spec.param_count(), 467);
        assert!(ModelSpec {
            num_classes: 1,
            ..spec
        }
        .validate()
        .is_err());
    }

    #[test]
    fn test_forward_zero_params_uniform() {
        let spec = ModelSpec::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (img, lab) = random_image_labels(&mut rng, 8, 8, 2);
        let space = full_space();
        let batch = Batch::new(vec![&img], vec![&lab], 8, 8, &space).unwrap();
        let probs = forward(&ParamVector::zeros(spec.param_count()), &spec, &batch).unwrap();
        for p in probs {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn test_forward_rows_sum_to_one() {
        let spec = ModelSpec::default();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let params = random_params(&mut rng, &spec, 1.0);
        let (img, lab) = random_image_labels(&mut rng, 8, 8, 2);
        let space = full_space();
        let batch = Batch::new(vec![&img], vec![&lab], 8, 8, &space).unwrap();
        let probs = forward(&params, &spec, &batch).unwrap();
        for row in probs.chunks(spec.num_classes) {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&p| p >= 0.0));
        }
    }

    /// Independent scalar-loop forward oracle: explicit bounds checks instead
    /// of patch buffers, plain (unshifted) softmax.
    fn oracle_forward(params: &ParamVector, spec: &ModelSpec, img: &[f64], h: usize, w: usize) -> Vec<f64> {
        let p = params.as_slice();
        let r = spec.patch_radius as isize;
        let d = spec.patch_diameter();
        let mut out = Vec::new();
        for y in 0..h as isize {
            for x in 0..w as isize {
                let mut hidden = Vec::new();
                for j in 0..spec.hidden_units {
                    let mut acc = p[spec.patch_area() * spec.hidden_units + j];
                    for dy in -r..=r {
                        for dx in -r..=r {
                            let (yy, xx) = (y + dy, x + dx);
                            let pix = if yy >= 0 && yy < h as isize && xx >= 0 && xx < w as isize {
                                img[(yy * w as isize + xx) as usize]
                            } else {
                                0.0
                            };
                            let i = ((dy + r) as usize) * d + (dx + r) as usize;
                            acc += p[j * spec.patch_area() + i] * pix;
                        }
                    }
                    hidden.push(acc.tanh());
                }
                let base2 = spec.patch_area() * spec.hidden_units + spec.hidden_units;
                let mut exps = Vec::new();
                for c in 0..spec.num_classes {
                    let mut z = p[base2 + spec.num_classes * spec.hidden_units + c];
                    for (j, hj) in hidden.iter().enumerate() {
                        z += p[base2 + c * spec.hidden_units + j] * hj;
                    }
                    exps.push(z.exp());
                }
                let denom: f64 = exps.iter().sum();
                out.extend(exps.into_iter().map(|e| e / denom));
            }
        }
        out
    }

    #[test]
    fn test_forward_matches_independent_oracle() {
        let spec = ModelSpec::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let params = random_params(&mut rng, &spec, 0.5);
        let (img, lab) = random_image_labels(&mut rng, 8, 8, 2);
        let space = full_space();
        let batch = Batch::new(vec![&img], vec![&lab], 8, 8, &space).unwrap();
        let got = forward(&params, &spec, &batch).unwrap();
        let want = oracle_forward(&params, &spec, &img, 8, 8);
        assert_eq!(got.len(), want.len());
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() < 1e-12, "{g} vs {w}");
        }
    }

    #[test]
    fn test_loss_prox_zero_matches_base_bit_exact() {
        let spec = ModelSpec::default();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let params = random_params(&mut rng, &spec, 0.5);
        let (img, lab) = random_image_labels(&mut rng, 8, 8, 2);
        let space = full_space();
        let batch = Batch::new(vec![&img], vec![&lab], 8, 8, &space).unwrap();
        let base = base_loss_grad(&params, &spec, &batch).unwrap();
        let (loss, grad) = loss_and_grad(&params, &spec, &batch, 1.0, 0.0, None).unwrap();
        assert_eq!(loss.to_bits(), base.loss.to_bits());
        for (a, b) in grad.as_slice().iter().zip(base.grad.as_slice()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn test_loss_scale_doubles_exactly() {
        let spec = ModelSpec::default();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let params = random_params(&mut rng, &spec, 0.5);
        let (img, lab) = random_image_labels(&mut rng, 8, 8, 2);
        let space = full_space();
        let batch = Batch::new(vec![&img], vec![&lab], 8, 8, &space).unwrap();
        let (l1, g1) = loss_and_grad(&params, &spec, &batch, 1.0, 0.0, None).unwrap();
        let (l2, g2) = loss_and_grad(&params, &spec, &batch, 2.0, 0.0, None).unwrap();
        assert_eq!(l2.to_bits(), (2.0 * l1).to_bits());
        for (a, b) in g2.as_slice().iter().zip(g1.as_slice()) {
            assert_eq!(a.to_bits(), (2.0 * b).to_bits());
        }
    }

    #[test]
    fn test_anchor_presence_rules() {
        let spec = ModelSpec::default();
        let params = ParamVector::zeros(spec.param_count());
        let (img, lab) = random_image_labels(&mut ChaCha8Rng::seed_from_u64(6), 8, 8, 2);
        let space = full_space();
        let batch = Batch::new(vec![&img], vec![&lab], 8, 8, &space).unwrap();
        assert!(loss_and_grad(&params, &spec, &batch, 1.0, 0.5, None).is_err());
        assert!(loss_and_grad(&params, &spec, &batch, 1.0, 0.0, Some(&params)).is_err());
    }

    /// Central finite differences against the analytic gradient. Coordinates
    /// below the FD resolution floor are compared absolutely.
    pub(crate) fn max_fd_rel_error(
        params: &ParamVector,
        spec: &ModelSpec,
        batch: &Batch,
        loss_scale: f64,
        prox_mu: f64,
        anchor: Option<&ParamVector>,
    ) -> f64 {
        let h = 1e-5;
        let (_, grad) = loss_and_grad(params, spec, batch, loss_scale, prox_mu, anchor).unwrap();
        let mut worst = 0.0f64;
        for i in 0..params.len() {
            let mut plus = params.clone();
            plus[i] += h;
            let mut minus = params.clone();
            minus[i] -= h;
            let (lp, _) = loss_and_grad(&plus, spec, batch, loss_scale, prox_mu, anchor).unwrap();
            let (lm, _) = loss_and_grad(&minus, spec, batch, loss_scale, prox_mu, anchor).unwrap();
            let fd = (lp - lm) / (2.0 * h);
            let g = grad[i];
            let rel = (g - fd).abs() / g.abs().max(fd.abs()).max(1e-3);
            worst = worst.max(rel);
        }
        worst
    }

    #[test]
    fn test_gradient_matches_finite_differences() {
        let spec = ModelSpec::default();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let space = full_space();
        for trial in 0..3 {
            let params = random_params(&mut rng, &spec, 0.5);
            let (img, lab) = random_image_labels(&mut rng, 8, 8, 2);
            let batch = Batch::new(vec![&img], vec![&lab], 8, 8, &space).unwrap();
            let anchor = random_params(&mut rng, &spec, 0.5);
            let (scale, mu, anc) = match trial {
                0 => (1.0, 0.0, None),
                1 => (1.7, 0.0, None),
                _ => (1.0, 0.3, Some(&anchor)),
            };
            let worst = max_fd_rel_error(&params, &spec, &batch, scale, mu, anc);
            assert!(worst < 1e-5, "trial {trial}: max rel err {worst}");
        }
    }

    #[test]
    fn test_masked_supervision_ignores_excluded_channel_targets() {
        let spec = ModelSpec::default();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let params = random_params(&mut rng, &spec, 0.5);
        let (img, lab) = random_image_labels(&mut rng, 8, 8, 1);
        let space = organ_space();
        let batch = Batch::new(vec![&img], vec![&lab], 8, 8, &space).unwrap();

        let clean = onehot_from_labels(&batch, spec.num_classes);
        let mut perturbed = clean.clone();
        for n in 0..batch.pixel_count() {
            perturbed[n * spec.num_classes + 2] = rng.random_range(-3.0..3.0);
        }
        let a = base_loss_grad_with_targets(&params, &spec, &batch, &clean).unwrap();
        let b = base_loss_grad_with_targets(&params, &spec, &batch, &perturbed).unwrap();
        assert_eq!(a.loss.to_bits(), b.loss.to_bits());
        for (x, y) in a.grad.as_slice().iter().zip(b.grad.as_slice()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn test_loss_term_ranges() {
        let spec = ModelSpec::default();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let space = full_space();
        for _ in 0..10 {
            let params = random_params(&mut rng, &spec, 1.0);
            let (img, lab) = random_image_labels(&mut rng, 8, 8, 2);
            let batch = Batch::new(vec![&img], vec![&lab], 8, 8, &space).unwrap();
            let base = base_loss_grad(&params, &spec, &batch).unwrap();
            assert!(base.soft_dice > 0.0 && base.soft_dice <= 1.0);
            // base loss = dice loss (in [0,1]) + CE (>= 0)
            assert!(base.loss >= 0.0);
        }
    }

    #[test]
    fn test_dice_score_cases() {
        let a = [0u8, 1, 1, 0];
        assert_eq!(dice_score(&a, &a, 1).unwrap(), 1.0);
        let b = [1u8, 0, 0, 1];
        assert_eq!(dice_score(&a, &b, 1).unwrap(), 0.0);
        // |A|=4, |B|=2, |A n B|=2 -> 2*2/(4+2)
        let pred = [1u8, 1, 1, 1, 0, 0];
        let truth = [1u8, 1, 0, 0, 0, 0];
        let got = dice_score(&pred, &truth, 1).unwrap();
        assert!((got - 2.0 / 3.0).abs() < 1e-12);
        // empty/empty convention and one-empty
        assert_eq!(dice_score(&[0u8, 0], &[0u8, 0], 2).unwrap(), 1.0);
        assert_eq!(dice_score(&[2u8, 0], &[0u8, 0], 2).unwrap(), 0.0);
        // symmetry
        assert_eq!(
            dice_score(&pred, &truth, 1).unwrap(),
            dice_score(&truth, &pred, 1).unwrap()
        );
        assert!(dice_score(&[0u8], &[0u8, 0], 1).is_err());
    }

    #[test]
    fn test_batch_rejects_labels_outside_space() {
        let img = vec![0.0; 64];
        let lab = vec![2u8; 64];
        let space = organ_space();
        assert!(Batch::new(vec![&img], vec![&lab], 8, 8, &space).is_err());
    }

    #[test]
    fn test_batch_rejects_too_small_images() {
        let spec = ModelSpec::default();
        let img = vec![0.0; 16];
        let lab = vec![0u8; 16];
        let space = full_space();
        let batch = Batch::new(vec![&img], vec![&lab], 4, 4, &space).unwrap();
        assert!(forward(&ParamVector::zeros(spec.param_count()), &spec, &batch).is_err());
    }
}
