//! Accuracy measurements, report files, image grids, and the privacy
//! diagnostics a curious coordinator could run against submitted samples.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dataset::LabeledDataset;
use crate::error::{Error, Result};
use crate::models::ObfNetBundle;
use crate::nn::{argmax, Layer, Network, Tensor};

const EVAL_CHUNK: usize = 500;

/// Predicted labels for each row of `images`, passing through `obfnet`
/// first when given.
pub fn predict_labels(backbone: &Network, images: &Tensor, obfnet: Option<&Network>) -> Result<Vec<u8>> {
    let n = images.batch_size();
    let mut labels = Vec::with_capacity(n);
    let indices: Vec<usize> = (0..n).collect();
    for chunk in indices.chunks(EVAL_CHUNK) {
        let batch = images.gather_rows(chunk);
        let input = match obfnet {
            Some(obf) => obf.predict(&batch)?,
            None => batch,
        };
        let logits = backbone.predict(&input)?;
        labels.extend(logits.data().chunks_exact(logits.row_len()).map(|r| argmax(r) as u8));
    }
    Ok(labels)
}

/// Fraction of samples classified correctly.
pub fn eval_accuracy(backbone: &Network, data: &LabeledDataset, obfnet: Option<&Network>) -> Result<f64> {
    Ok(correct_count(backbone, data, obfnet)? as f64 / data.len() as f64)
}

/// Number of samples classified correctly.
pub fn correct_count(backbone: &Network, data: &LabeledDataset, obfnet: Option<&Network>) -> Result<usize> {
    if data.is_empty() {
        return Err(Error::InvalidConfig("evaluation set is empty".into()));
    }
    let predicted = predict_labels(backbone, data.images(), obfnet)?;
    Ok(predicted.iter().zip(data.labels()).filter(|(p, l)| p == l).count())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub name: String,
    pub seed: u64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AccuracyReport {
    pub raw_accuracy: f64,
    pub rows: Vec<ReportRow>,
}

impl AccuracyReport {
    pub fn mean(&self) -> f64 {
        self.rows.iter().map(|r| r.accuracy).sum::<f64>() / self.rows.len() as f64
    }

    /// Largest pairwise accuracy difference between bundle members.
    pub fn spread(&self) -> f64 {
        let max = self.rows.iter().map(|r| r.accuracy).fold(f64::NEG_INFINITY, f64::max);
        let min = self.rows.iter().map(|r| r.accuracy).fold(f64::INFINITY, f64::min);
        max - min
    }

    /// Raw accuracy minus mean obfuscated accuracy.
    pub fn drop(&self) -> f64 {
        self.raw_accuracy - self.mean()
    }

    pub const TSV_HEADER: &'static str = "row\tname\tseed\taccuracy\tdrop_pp";

    /// Tab-separated table: one `raw` row, one `net` row per obfuscator,
    /// then `mean` and `spread` summary rows. Percentage points in `drop_pp`.
    pub fn to_tsv(&self) -> String {
        let mut s = String::new();
        let pp = |v: f64| v * 100.0;
        writeln!(s, "{}", Self::TSV_HEADER).unwrap();
        writeln!(s, "raw\tbackbone\t-\t{:.6}\t{:.3}", self.raw_accuracy, 0.0).unwrap();
        for r in &self.rows {
            writeln!(
                s,
                "net\t{}\t{}\t{:.6}\t{:.3}",
                r.name,
                r.seed,
                r.accuracy,
                pp(self.raw_accuracy - r.accuracy)
            )
            .unwrap();
        }
        writeln!(s, "mean\t-\t-\t{:.6}\t{:.3}", self.mean(), pp(self.drop())).unwrap();
        writeln!(s, "spread\t-\t-\t-\t{:.3}", pp(self.spread())).unwrap();
        s
    }

    /// Bar-chart data: one `label<TAB>accuracy_pct` line per bar.
    pub fn bar_data(&self) -> String {
        let mut s = String::from("label\taccuracy_pct\n");
        writeln!(s, "raw\t{:.3}", self.raw_accuracy * 100.0).unwrap();
        for r in &self.rows {
            writeln!(s, "{}\t{:.3}", r.name, r.accuracy * 100.0).unwrap();
        }
        s
    }

    /// Reads the `drop_pp` field of the `mean` row from a report table.
    pub fn mean_drop_pp_from_tsv(tsv: &str) -> Option<f64> {
        tsv.lines()
            .find(|l| l.starts_with("mean\t"))
            .and_then(|l| l.split('\t').nth(4))
            .and_then(|v| v.parse().ok())
    }
}

/// Per-net accuracy of a bundle against the backbone it was trained for.
pub fn accuracy_report(backbone: &Network, bundle: &ObfNetBundle, data: &LabeledDataset) -> Result<AccuracyReport> {
    bundle.verify_backbone(backbone)?;
    let raw_accuracy = eval_accuracy(backbone, data, None)?;
    let rows = bundle
        .entries()
        .iter()
        .map(|e| {
            Ok(ReportRow {
                name: format!("{}-{}", e.variant, e.instance),
                seed: e.seed,
                accuracy: eval_accuracy(backbone, data, Some(&e.net))?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(AccuracyReport { raw_accuracy, rows })
}

/// Binary PGM (P5) grid of square grayscale tiles, each min-max rescaled to
/// `[0, 255]`. Tiles with zero range render as 0; unused cells stay black.
pub fn render_image_grid(samples: &Tensor, rows: usize, cols: usize) -> Result<Vec<u8>> {
    let n = samples.batch_size();
    if n > rows * cols {
        return Err(Error::InvalidConfig(format!("{n} images do not fit a {rows}x{cols} grid")));
    }
    let len = samples.row_len();
    let side = (len as f64).sqrt().round() as usize;
    if side * side != len {
        return Err(Error::InvalidConfig(format!("samples of {len} values are not square images")));
    }
    let (width, height) = (cols * side, rows * side);
    let mut pixels = vec![0u8; width * height];
    for i in 0..n {
        let img = samples.row(i);
        let min = img.iter().copied().fold(f32::INFINITY, f32::min);
        let max = img.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let range = max - min;
        let (gy, gx) = (i / cols, i % cols);
        for y in 0..side {
            for x in 0..side {
                let v = img[y * side + x];
                let g = if range > 0.0 { ((v - min) / range * 255.0).round() as u8 } else { 0 };
                pixels[(gy * side + y) * width + gx * side + x] = g;
            }
        }
    }
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(&pixels);
    Ok(out)
}

pub fn export_image_grid(samples: &Tensor, path: &Path, rows: usize, cols: usize) -> Result<()> {
    let bytes = render_image_grid(samples, rows, cols)?;
    fs::write(path, bytes)?;
    Ok(())
}

/// Fraction of obfuscator output coordinates that are exactly zero.
pub fn zero_fraction(obfnet: &Network, images: &Tensor) -> Result<f64> {
    let n = images.batch_size();
    let indices: Vec<usize> = (0..n).collect();
    let (mut zeros, mut total) = (0usize, 0usize);
    for chunk in indices.chunks(EVAL_CHUNK) {
        let out = obfnet.predict(&images.gather_rows(chunk))?;
        zeros += out.data().iter().filter(|v| **v == 0.0).count();
        total += out.len();
    }
    if total == 0 {
        return Err(Error::InvalidConfig("no samples".into()));
    }
    Ok(zeros as f64 / total as f64)
}

/// Nearest-neighbour re-identification: for each `obfuscated[i]` find the
/// Euclidean-closest row of `raw` (lowest index on ties) and report the
/// fraction for which that row is `raw[i]`.
pub fn reidentification_attack(raw: &Tensor, obfuscated: &Tensor) -> Result<f64> {
    let n = raw.batch_size();
    if n == 0 || obfuscated.batch_size() != n || raw.row_len() != obfuscated.row_len() {
        return Err(Error::ShapeMismatch {
            layer: 0,
            expected: raw.shape().to_vec(),
            found: obfuscated.shape().to_vec(),
        });
    }
    let hits = (0..n)
        .filter(|&i| {
            let probe = obfuscated.row(i);
            let mut best = (f64::INFINITY, 0usize);
            for j in 0..n {
                let d: f64 = probe
                    .iter()
                    .zip(raw.row(j))
                    .map(|(a, b)| {
                        let d = f64::from(a - b);
                        d * d
                    })
                    .sum();
                if d < best.0 {
                    best = (d, j);
                }
            }
            best.1 == i
        })
        .count();
    Ok(hits as f64 / n as f64)
}

/// Two distinct inputs that an obfuscator maps to bit-identical outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct WitnessPair {
    pub first: Vec<f32>,
    pub second: Vec<f32>,
    pub output: Vec<f32>,
}

/// Builds a many-to-one witness for a net that opens with `Dense` + `ReLU`:
/// a direction `d` with `W·d < 0` in every row, scaled far enough that every
/// first-layer unit is clipped. Any two such inputs give the same output.
///
/// `d` is found with the Ho-Kashyap procedure on `−W`. The inputs are not
/// restricted to `[0, 1]`. Returns `None` when no such direction is found or
/// the f32 forward pass does not confirm the pair.
pub fn many_to_one_witness(obfnet: &Network) -> Result<Option<WitnessPair>> {
    let dense = match obfnet.layers() {
        [Layer::Dense(d), Layer::Relu, ..] => d,
        _ => return Err(Error::InvalidConfig("witness needs a Dense + ReLU first stage".into())),
    };
    let (m, n) = (dense.out_dim, dense.in_dim);
    let w: Vec<f64> = dense.weight.data().iter().map(|&v| f64::from(v)).collect();
    let Some(dir) = separating_direction(&w, m, n) else {
        return Ok(None);
    };
    // margin per unit: -(W d)_i > 0
    let slack: Vec<f64> = (0..m).map(|i| -dot(&w[i * n..(i + 1) * n], &dir)).collect();
    let lambda = dense
        .bias
        .data()
        .iter()
        .zip(&slack)
        .map(|(&b, &s)| f64::from(b).max(0.0) / s)
        .fold(0.0f64, f64::max);
    let base = 2.0 * lambda + 1.0;
    let first: Vec<f32> = dir.iter().map(|&v| (base * v) as f32).collect();
    let second: Vec<f32> = dir.iter().map(|&v| (2.0 * base * v) as f32).collect();
    let run = |x: &[f32]| -> Result<Vec<f32>> {
        Ok(obfnet.predict(&Tensor::new(vec![1, n], x.to_vec())?)?.into_data())
    };
    let (a, b) = (run(&first)?, run(&second)?);
    let same = a.iter().zip(&b).all(|(u, v)| u.to_bits() == v.to_bits());
    Ok((same && first != second).then_some(WitnessPair { first, second, output: a }))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Finds `d` with `W·d < 0` row-wise (Ho-Kashyap on `Y = −W`), or `None`.
fn separating_direction(w: &[f64], m: usize, n: usize) -> Option<Vec<f64>> {
    // Gram matrix YᵀY = WᵀW, with a tiny ridge for conditioning.
    let mut gram = vec![0.0; n * n];
    for row in w.chunks_exact(n) {
        for i in 0..n {
            let ri = row[i];
            if ri == 0.0 {
                continue;
            }
            for (g, rj) in gram[i * n..(i + 1) * n].iter_mut().zip(row) {
                *g += ri * rj;
            }
        }
    }
    let ridge = 1e-10 * (0..n).map(|i| gram[i * n + i]).sum::<f64>() / n as f64;
    for i in 0..n {
        gram[i * n + i] += ridge;
    }
    let chol = cholesky(gram, n)?;
    let solve = |b: &[f64]| -> Vec<f64> {
        // a = (YᵀY)⁻¹ Yᵀ b with Y = −W
        let mut rhs = vec![0.0; n];
        for (row, bi) in w.chunks_exact(n).zip(b) {
            for (r, x) in rhs.iter_mut().zip(row) {
                *r -= x * bi;
            }
        }
        cholesky_solve(&chol, n, rhs)
    };
    let mut b = vec![1.0; m];
    for _ in 0..1000 {
        let a = solve(&b);
        let ya: Vec<f64> = w.chunks_exact(n).map(|row| -dot(row, &a)).collect();
        if ya.iter().all(|&v| v > 1e-6) {
            return Some(a);
        }
        let mut moved = false;
        for (bi, yi) in b.iter_mut().zip(&ya) {
            let e = yi - *bi;
            if e > 0.0 {
                *bi += e;
                moved = true;
            }
        }
        if !moved {
            return None;
        }
    }
    None
}

/// Lower-triangular factor `L` (row-major) with `A = L·Lᵀ`.
fn cholesky(mut a: Vec<f64>, n: usize) -> Option<Vec<f64>> {
    for j in 0..n {
        let row_j = a[j * n..j * n + j].to_vec();
        let diag = a[j * n + j] - dot(&row_j, &row_j);
        if diag <= 0.0 || !diag.is_finite() {
            return None;
        }
        let ljj = diag.sqrt();
        a[j * n + j] = ljj;
        for i in j + 1..n {
            let s = a[i * n + j] - dot(&a[i * n..i * n + j], &row_j);
            a[i * n + j] = s / ljj;
        }
    }
    for i in 0..n {
        a[i * n + i + 1..(i + 1) * n].fill(0.0);
    }
    Some(a)
}

fn cholesky_solve(l: &[f64], n: usize, mut x: Vec<f64>) -> Vec<f64> {
    for i in 0..n {
        let s = dot(&l[i * n..i * n + i], &x[..i]);
        x[i] = (x[i] - s) / l[i * n + i];
    }
    for i in (0..n).rev() {
        let s: f64 = (i + 1..n).map(|k| l[k * n + i] * x[k]).sum();
        x[i] = (x[i] - s) / l[i * n + i];
    }
    x
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepPoint {
    pub scale: f64,
    pub accuracy: f64,
}

/// Standard Laplace variates by inverse CDF.
fn standard_laplace(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| loop {
            let u: f64 = rng.gen::<f64>() - 0.5;
            let tail = 1.0 - 2.0 * u.abs();
            if tail > 0.0 {
                break -u.signum() * tail.ln();
            }
        })
        .collect()
}

/// Backbone accuracy when every pixel gets i.i.d. Laplace(0, b) noise and is
/// clamped back to `[0, 1]`. One standard-Laplace draw per pixel is shared
/// across scales, so the noise at scale `b` is exactly `b` times that draw.
pub fn laplace_baseline_sweep(
    backbone: &Network,
    data: &LabeledDataset,
    scales: &[f64],
    seed: u64,
) -> Result<Vec<SweepPoint>> {
    if let Some(bad) = scales.iter().find(|s| !(s.is_finite() && **s > 0.0)) {
        return Err(Error::InvalidConfig(format!("noise scale must be positive, got {bad}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base = standard_laplace(&mut rng, data.images().len());
    scales
        .iter()
        .map(|&scale| {
            let noisy: Vec<f32> = data
                .images()
                .data()
                .iter()
                .zip(&base)
                .map(|(&p, &l)| (f64::from(p) + scale * l).clamp(0.0, 1.0) as f32)
                .collect();
            let images = Tensor::new(data.images().shape().to_vec(), noisy)?;
            let noisy = LabeledDataset::new(images, data.labels().to_vec(), data.split())?;
            Ok(SweepPoint {
                scale,
                accuracy: eval_accuracy(backbone, &noisy, None)?,
            })
        })
        .collect()
}

pub fn sweep_tsv(points: &[SweepPoint]) -> String {
    let mut s = String::from("scale\taccuracy\n");
    for p in points {
        writeln!(s, "{}\t{:.6}", p.scale, p.accuracy).unwrap();
    }
    s
}
