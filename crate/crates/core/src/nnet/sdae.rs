//! Stacked denoising autoencoder used as a data transformer.
//!
//! Layers are pretrained greedily: layer k learns to reconstruct its clean
//! input from a copy where a random fraction of entries is zeroed. There is
//! no end-to-end fine-tuning.

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::layers::{Activation, Dense, Layer, Regularizer};
use super::{batch_matrix, check_images, Shape};
use crate::dataset::{Dataset, Image};
use crate::error::{Error, Result};
use crate::seed::{self, Rng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SdaeSpec {
    /// Code width of each stacked layer, shallowest first.
    pub widths: Vec<usize>,
    /// Masking-noise rate per layer; a single value applies to all layers.
    pub corruption: Vec<f64>,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl SdaeSpec {
    fn corruption_at(&self, layer: usize) -> f64 {
        if self.corruption.len() == 1 {
            self.corruption[0]
        } else {
            self.corruption[layer]
        }
    }

    fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.widths.contains(&0) {
            return Err(Error::InvalidSpec("SDAE widths must be positive and nonempty".into()));
        }
        if self.corruption.len() != 1 && self.corruption.len() != self.widths.len() {
            return Err(Error::InvalidSpec("one corruption rate, or one per layer".into()));
        }
        if let Some(&r) = self.corruption.iter().find(|r| !(0.0..1.0).contains(*r)) {
            return Err(Error::RateOutOfRange(r));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidSpec("batch_size must be positive".into()));
        }
        Ok(())
    }
}

/// The trained encoder stack.
#[derive(Debug, Clone)]
pub struct SdaeEncoder {
    pub input: Shape,
    pub(crate) layers: Vec<Dense>,
    /// Final-epoch reconstruction MSE of each pretrained layer.
    pub reconstruction_mse: Vec<f64>,
}

fn sigmoid_dense(inputs: usize, units: usize, rng: &mut Rng) -> Dense {
    let limit = (6.0 / (inputs + units) as f64).sqrt();
    Dense {
        w: Array2::from_shape_fn((units, inputs), |_| rng.random_range(-limit..=limit)),
        b: Array1::zeros(units),
        activation: Activation::Sigmoid,
        regularizer: Regularizer::None,
        softmax: false,
    }
}

fn pretrain_layer(x: &Array2<f64>, width: usize, corruption: f64, spec: &SdaeSpec, rng: &mut Rng) -> (Dense, f64) {
    let d = x.ncols();
    let mut enc = Layer::Dense(sigmoid_dense(d, width, rng));
    let mut dec = Layer::Dense(sigmoid_dense(width, d, rng));
    let mut order: Vec<usize> = (0..x.nrows()).collect();
    let mut last_mse = f64::NAN;
    for _ in 0..spec.epochs {
        order.shuffle(rng);
        let mut sq = 0.0;
        for batch in order.chunks(spec.batch_size) {
            let clean = x.select(ndarray::Axis(0), batch);
            let mut noisy = clean.clone();
            if corruption > 0.0 {
                noisy.mapv_inplace(|v| if rng.random::<f64>() < corruption { 0.0 } else { v });
            }
            let (code, c1) = enc.forward(noisy, Some(&mut *rng));
            let (recon, c2) = dec.forward(code, Some(&mut *rng));
            let diff = &recon - &clean;
            sq += diff.iter().map(|v| v * v).sum::<f64>();
            let grad = diff / batch.len() as f64;
            let (g_code, g_dec) = dec.backward(grad, c2);
            let (_, g_enc) = enc.backward(g_code, c1);
            for (layer, g) in [(&mut dec, g_dec), (&mut enc, g_enc)] {
                let g = g.expect("dense grads");
                if let Layer::Dense(dl) = layer {
                    dl.w.scaled_add(-spec.lr, &g.w);
                    dl.b.scaled_add(-spec.lr, &g.b);
                }
            }
        }
        last_mse = sq / (x.len() as f64);
    }
    match enc {
        Layer::Dense(d) => (d, last_mse),
        _ => unreachable!(),
    }
}

pub fn train_sdae(spec: &SdaeSpec, data: &Dataset) -> Result<SdaeEncoder> {
    spec.validate()?;
    let (h, w) = data.image_dims().ok_or(Error::EmptyInput)?;
    let input = Shape::image(h, w);
    let mut rng = seed::rng(spec.seed);
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut x = batch_matrix(data.images(), &idx);
    let mut layers = Vec::new();
    let mut mse = Vec::new();
    for (k, &width) in spec.widths.iter().enumerate() {
        let (layer, err) = pretrain_layer(&x, width, spec.corruption_at(k), spec, &mut rng);
        x = Layer::Dense(layer.clone()).forward(x, None).0;
        layers.push(layer);
        mse.push(err);
    }
    Ok(SdaeEncoder { input, layers, reconstruction_mse: mse })
}

impl SdaeEncoder {
    pub fn code_width(&self) -> usize {
        self.layers.last().map_or(self.input.flat(), |l| l.w.nrows())
    }

    pub fn widths(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.w.nrows()).collect()
    }

    /// Deepest code of every image, `[n x code_width]`.
    pub fn encode(&self, images: &[Image]) -> Result<Array2<f64>> {
        check_images(self.input, images)?;
        let idx: Vec<usize> = (0..images.len()).collect();
        let x = batch_matrix(images, &idx);
        Ok(self.layers.iter().fold(x, |a, l| Layer::Dense(l.clone()).forward(a, None).0))
    }

    /// Reconstruction-free parameter dump: per layer weights then biases.
    pub fn params(&self) -> Vec<f64> {
        self.layers.iter().flat_map(|l| l.w.iter().chain(l.b.iter()).copied()).collect()
    }

    pub fn from_params(input: Shape, widths: &[usize], params: &[f64]) -> Result<Self> {
        let mut rest = params;
        let mut d = input.flat();
        let mut layers = Vec::new();
        for &width in widths {
            let n = width * d + width;
            if rest.len() < n {
                return Err(Error::ModelFormat("SDAE parameter blob too short".into()));
            }
            let (w, b) = rest[..n].split_at(width * d);
            layers.push(Dense {
                w: Array2::from_shape_vec((width, d), w.to_vec()).expect("shape"),
                b: Array1::from(b.to_vec()),
                activation: Activation::Sigmoid,
                regularizer: Regularizer::None,
                softmax: false,
            });
            rest = &rest[n..];
            d = width;
        }
        if !rest.is_empty() {
            return Err(Error::ModelFormat("SDAE parameter blob too long".into()));
        }
        Ok(Self { input, layers, reconstruction_mse: Vec::new() })
    }
}

/// Replace each image by its code vector (a `1 x width` image); labels kept.
pub fn transform(encoder: &SdaeEncoder, dataset: &Dataset) -> Result<Dataset> {
    if dataset.is_empty() {
        return Ok(Dataset::empty(dataset.n_classes(), dataset.split_name()));
    }
    let codes = encoder.encode(dataset.images())?;
    let width = codes.ncols();
    let images = codes.rows().into_iter().map(|r| Image::from_clamped(1, width, r.iter().copied())).collect();
    Dataset::new(images, dataset.labels().to_vec(), dataset.n_classes(), format!("{}-sdae", dataset.split_name()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_data(n: usize, d: usize, seed: u64) -> Dataset {
        let mut rng = seed::rng(seed);
        let ims = (0..n).map(|_| Image::from_clamped(1, d, (0..d).map(|_| rng.random::<f64>()))).collect();
        Dataset::new(ims, vec![0; n], 1, "r").unwrap()
    }

    fn spec(widths: Vec<usize>, corruption: f64, epochs: usize) -> SdaeSpec {
        SdaeSpec { widths, corruption: vec![corruption], epochs, lr: 1.0, batch_size: 8, seed: 5 }
    }

    #[test]
    fn identity_width_layer_reconstructs() {
        let d = random_data(32, 8, 1);
        let enc = train_sdae(&spec(vec![8], 0.0, 3000), &d).unwrap();
        assert!(enc.reconstruction_mse[0] < 0.01, "mse {}", enc.reconstruction_mse[0]);
    }

    #[test]
    fn code_shape_and_determinism() {
        let d = random_data(20, 6, 2);
        let s = spec(vec![5, 3], 0.2, 3);
        let enc = train_sdae(&s, &d).unwrap();
        let t = transform(&enc, &d).unwrap();
        assert_eq!(t.len(), 20);
        assert_eq!(t.image_dims(), Some((1, 3)));
        assert_eq!(t.labels(), d.labels());
        assert_eq!(transform(&enc, &d).unwrap().images(), t.images());
        assert_eq!(train_sdae(&s, &d).unwrap().params(), enc.params());
        assert!(transform(&enc, &Dataset::empty(1, "e")).unwrap().is_empty());
        assert!(transform(&enc, &random_data(2, 5, 3)).is_err());
    }

    #[test]
    fn rejects_bad_specs() {
        let d = random_data(4, 3, 2);
        assert!(train_sdae(&spec(vec![], 0.0, 1), &d).is_err());
        assert!(matches!(train_sdae(&spec(vec![2], 1.0, 1), &d), Err(Error::RateOutOfRange(_))));
    }
}
