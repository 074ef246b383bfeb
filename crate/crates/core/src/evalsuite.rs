//! Desk-scale proxies for sample quality: reconstruction PSNR, motion
//! coherence and a nearest-centroid probe of conditional fidelity.

use std::fmt::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::conditioning::Condition;
use crate::diffusion::GuidanceOptions;
use crate::error::{Error, Result};
use crate::field::{FieldSample, View};
use crate::pipeline::{field_seed, Model};
use crate::scalar::Scalar;

/// Peak-to-peak range of pixels in [-1, 1].
pub const PSNR_PEAK: f64 = 2.0;

pub fn mse(a: &[View], b: &[View]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape("mse", a.len(), b.len()));
    }
    let (mut sum, mut n) = (0.0, 0usize);
    for (va, vb) in a.iter().zip(b) {
        if !va.pixels.same_dims(&vb.pixels) {
            return Err(Error::invalid("views differ in size"));
        }
        sum += va
            .pixels
            .data
            .iter()
            .zip(&vb.pixels.data)
            .map(|(x, y)| (x - y).powi(2))
            .sum::<f64>();
        n += va.pixels.data.len();
    }
    Ok(sum / n.max(1) as f64)
}

/// `10·log10(peak²/mse)`; infinite for a perfect match.
pub fn psnr(mse: f64, peak: f64) -> f64 {
    10.0 * (peak * peak / mse).log10()
}

/// Mean position (row, col) of pixels whose brightest channel exceeds
/// `threshold`, or `None` when there are none.
pub fn centroid(view: &View, threshold: f64) -> Option<(f64, f64)> {
    let img = &view.pixels;
    let (mut r, mut c, mut n) = (0.0, 0.0, 0usize);
    for (i, px) in img.data.chunks(img.channels).enumerate() {
        if px.iter().cloned().fold(f64::NEG_INFINITY, f64::max) > threshold {
            r += (i / img.width) as f64;
            c += (i % img.width) as f64;
            n += 1;
        }
    }
    (n > 0).then(|| (r / n as f64, c / n as f64))
}

/// Spread of frame-to-frame centroid displacements: the root mean squared
/// deviation of each displacement from their mean. Zero for uniform motion;
/// `+inf` when some view has no object pixels.
pub fn coherence_score(views: &[View], threshold: f64) -> Result<f64> {
    if views.len() < 3 {
        return Err(Error::invalid(format!(
            "coherence needs at least 3 views, got {}",
            views.len()
        )));
    }
    let mut cs = Vec::with_capacity(views.len());
    for v in views {
        match centroid(v, threshold) {
            Some(c) => cs.push(c),
            None => return Ok(f64::INFINITY),
        }
    }
    let d: Vec<(f64, f64)> = cs.windows(2).map(|w| (w[1].0 - w[0].0, w[1].1 - w[0].1)).collect();
    let n = d.len() as f64;
    let mean = (
        d.iter().map(|p| p.0).sum::<f64>() / n,
        d.iter().map(|p| p.1).sum::<f64>() / n,
    );
    let var = d
        .iter()
        .map(|p| (p.0 - mean.0).powi(2) + (p.1 - mean.1).powi(2))
        .sum::<f64>()
        / n;
    Ok(var.sqrt())
}

/// Mean of each signal channel over every pixel of every view.
pub fn channel_means(views: &[View]) -> Vec<f64> {
    let ch = views.first().map_or(0, |v| v.pixels.channels);
    let mut sum = vec![0.0; ch];
    let mut n = 0usize;
    for v in views {
        for px in v.pixels.data.chunks(ch) {
            sum.iter_mut().zip(px).for_each(|(s, p)| *s += p);
            n += 1;
        }
    }
    sum.into_iter().map(|s| s / n.max(1) as f64).collect()
}

/// Nearest-class-mean classifier on [`channel_means`].
#[derive(Debug, Clone, PartialEq)]
pub struct ClassCentroids {
    pub means: Vec<Vec<f64>>,
}

impl ClassCentroids {
    /// `labeled[i] = (class, views)`; every class in `0..classes` needs a sample.
    pub fn fit(classes: usize, labeled: &[(usize, &[View])]) -> Result<Self> {
        if classes < 2 {
            return Err(Error::invalid("need at least two classes"));
        }
        let mut sums: Vec<Vec<f64>> = vec![Vec::new(); classes];
        let mut counts = vec![0usize; classes];
        for &(label, views) in labeled {
            if label >= classes {
                return Err(Error::invalid(format!("label {label} out of range")));
            }
            let f = channel_means(views);
            if sums[label].is_empty() {
                sums[label] = vec![0.0; f.len()];
            }
            sums[label].iter_mut().zip(&f).for_each(|(s, x)| *s += x);
            counts[label] += 1;
        }
        if let Some(c) = counts.iter().position(|&n| n == 0) {
            return Err(Error::invalid(format!("class {c} has no training samples")));
        }
        let means = sums
            .into_iter()
            .zip(counts)
            .map(|(s, n)| s.into_iter().map(|x| x / n as f64).collect())
            .collect();
        Ok(ClassCentroids { means })
    }

    pub fn classify(&self, views: &[View]) -> usize {
        let f = channel_means(views);
        let dist = |m: &Vec<f64>| m.iter().zip(&f).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        (0..self.means.len())
            .min_by(|&a, &b| dist(&self.means[a]).total_cmp(&dist(&self.means[b])))
            .expect("at least two classes")
    }

    pub fn accuracy(&self, labeled: &[(usize, &[View])]) -> f64 {
        let hits = labeled.iter().filter(|(l, v)| self.classify(v) == *l).count();
        hits as f64 / labeled.len().max(1) as f64
    }
}

/// One condition class: generation cycles through its captions.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionClass {
    pub name: String,
    pub captions: Vec<String>,
}

/// Generates `samples_per_class` fields per class from its captions and
/// returns the fraction the centroid classifier assigns to the right class.
#[allow(clippy::too_many_arguments)]
pub fn condition_accuracy<T: Scalar>(
    model: &Model<T>,
    classes: &[ConditionClass],
    centroids: &ClassCentroids,
    samples_per_class: usize,
    views: usize,
    opts: &GuidanceOptions,
    steps: usize,
    seed: u64,
) -> Result<f64> {
    if classes.len() < 2 || classes.len() != centroids.means.len() {
        return Err(Error::invalid("need at least two classes, one centroid each"));
    }
    let mut embeddings = Vec::new();
    let mut labels = Vec::new();
    for (ci, class) in classes.iter().enumerate() {
        if class.captions.is_empty() {
            return Err(Error::invalid(format!("class {} has no captions", class.name)));
        }
        for k in 0..samples_per_class {
            embeddings.push(model.embed_caption(&class.captions[k % class.captions.len()])?);
            labels.push(ci);
        }
    }
    let conds: Vec<Condition<'_, T>> = embeddings.iter().map(Condition::Embedding).collect();
    let seeds: Vec<u64> = (0..conds.len()).map(|i| field_seed(seed, i)).collect();
    let coords = model.default_view_coords(views);
    let samples = model.sample(&conds, &coords, opts, steps, &seeds)?;
    let labeled: Vec<(usize, &[View])> = labels.iter().zip(&samples).map(|(&l, s)| (l, s.as_slice())).collect();
    Ok(centroids.accuracy(&labeled))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FieldScore {
    pub field: usize,
    pub mse: f64,
    pub psnr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub t: usize,
    pub fields: Vec<FieldScore>,
}

pub const EVAL_CSV_HEADER: &str = "field,t,mse,psnr";

impl EvalReport {
    pub fn mean_mse(&self) -> f64 {
        self.fields.iter().map(|f| f.mse).sum::<f64>() / self.fields.len().max(1) as f64
    }

    /// PSNR of the pooled MSE.
    pub fn mean_psnr(&self) -> f64 {
        psnr(self.mean_mse(), PSNR_PEAK)
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("{EVAL_CSV_HEADER}\n");
        for f in &self.fields {
            let _ = writeln!(s, "{},{},{},{}", f.field, self.t, f.mse, f.psnr);
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Reconstruction quality of `fields` after one noise/denoise cycle at `t`
/// (half the schedule when `t` is 0). Field `i` draws its noise from a
/// stream seeded by `seed` and `i`.
pub fn evaluate_reconstruction<T: Scalar>(
    model: &Model<T>,
    fields: &[FieldSample],
    t: usize,
    seed: u64,
) -> Result<EvalReport> {
    let steps = model.config.schedule()?.steps();
    let t = if t == 0 { steps.div_ceil(2) } else { t };
    let mut scores = Vec::with_capacity(fields.len());
    for (i, f) in fields.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(field_seed(seed, i));
        let rec = model.reconstruct(f, t, &mut rng)?;
        let m = mse(&rec, &f.views)?;
        scores.push(FieldScore {
            field: i,
            mse: m,
            psnr: psnr(m, PSNR_PEAK),
        });
    }
    Ok(EvalReport { t, fields: scores })
}
