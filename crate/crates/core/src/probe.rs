//! Distribution-shift probe: how far interpolated utterances drift from the
//! originals in encoder space, layer by layer.
//!
//! Each utterance is represented by the mean of its valid encoder frames.
//! Per layer the report gives the Euclidean distance between the two
//! population centroids, the mean pairwise distance inside each population,
//! and their ratio.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{augment_batch, AugmentConfig, MixMode};
use crate::data::Batch;
use crate::model::{self, ModelParams};
use crate::ndgrad::{Graph, Real, Tensor, Var};
use crate::{Error, Result};

const RATIO_FLOOR: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerStats {
    pub layer: usize,
    pub centroid_dist: f64,
    pub within_orig: f64,
    pub within_mix: f64,
    pub separation_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub layers: Vec<LayerStats>,
}

impl ProbeReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,centroid_dist,within_orig,within_mix,separation_ratio\n");
        for s in &self.layers {
            out.push_str(&format!(
                "{},{:.9},{:.9},{:.9},{:.9}\n",
                s.layer, s.centroid_dist, s.within_orig, s.within_mix, s.separation_ratio
            ));
        }
        out
    }
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

fn centroid(set: &[Vec<f64>]) -> Vec<f64> {
    let mut c = vec![0.0; set.first().map_or(0, Vec::len)];
    for v in set {
        for (ck, vk) in c.iter_mut().zip(v) {
            *ck += vk;
        }
    }
    c.iter_mut().for_each(|ck| *ck /= set.len() as f64);
    c
}

fn mean_pairwise(set: &[Vec<f64>]) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for a in 0..set.len() {
        for b in a + 1..set.len() {
            sum += dist(&set[a], &set[b]);
            n += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Separation statistics of two populations of pooled vectors.
pub fn separation(layer: usize, orig: &[Vec<f64>], mix: &[Vec<f64>]) -> Result<LayerStats> {
    if orig.is_empty() || mix.is_empty() {
        return Err(Error::Shape("probe populations must be non-empty".into()));
    }
    let centroid_dist = dist(&centroid(orig), &centroid(mix));
    let within_orig = mean_pairwise(orig);
    let within_mix = mean_pairwise(mix);
    let within = (0.5 * (within_orig + within_mix)).max(RATIO_FLOOR);
    Ok(LayerStats {
        layer,
        centroid_dist,
        within_orig,
        within_mix,
        separation_ratio: centroid_dist / within,
    })
}

/// Mean over each row's first `lens[row]` frames of a `[rows, frames, width]` value.
fn pool<T: Real>(g: &Graph<T>, v: Var, lens: &[usize]) -> Vec<Vec<f64>> {
    let s = g.shape(v);
    let (nt, w) = (s[1], s[2]);
    let d = g.value(v).data();
    lens.iter()
        .enumerate()
        .map(|(b, &len)| {
            let mut acc = vec![0.0; w];
            for t in 0..len {
                for (k, a) in acc.iter_mut().enumerate() {
                    *a += d[(b * nt + t) * w + k].as_f64();
                }
            }
            acc.iter().map(|a| a / len as f64).collect()
        })
        .collect()
}

/// Layer-wise pooled representations (layer 0 is the projected input).
fn encode_pooled<T: Real>(
    params: &ModelParams<T>,
    features: Vec<f32>,
    rows: usize,
    frames: usize,
    dim: usize,
    lens: &[usize],
    layers: &[usize],
) -> Result<Vec<Vec<Vec<f64>>>> {
    let mut g = Graph::<T>::new();
    let bound = params.bind(&mut g, false);
    let x = Tensor::new(
        vec![rows, frames, dim],
        features.iter().map(|&v| T::from_f64_lossy(v as f64)).collect(),
    )?;
    let enc = model::encode(&mut g, &bound, x, lens)?;
    Ok(layers.iter().map(|&l| pool(&g, enc.layers[l], &enc.lengths)).collect())
}

/// Encodes the clean originals of `batch` and the interpolated rows built
/// from it under `aug` (in append mode, after any SpecAugment in `aug`), in
/// eval mode, and reports separation at each requested layer.
pub fn probe_distribution<T: Real>(
    params: &ModelParams<T>,
    batch: &Batch,
    aug: &AugmentConfig,
    layers: &[usize],
    seed: u64,
) -> Result<ProbeReport> {
    if layers.is_empty() {
        return Err(Error::Config("probe needs at least one layer".into()));
    }
    let depth = params.config().enc_layers;
    if let Some(&l) = layers.iter().find(|&&l| l > depth) {
        return Err(Error::Config(format!("probe layer {l} outside 0..={depth}")));
    }
    if batch.len() < 4 {
        return Err(Error::Config(format!("probe batch needs at least 4 rows, got {}", batch.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = AugmentConfig {
        mode: MixMode::Append,
        ..aug.clone()
    };
    let mb = augment_batch(batch.clone(), &cfg, &mut rng)?;
    let (nt, d) = (mb.max_frames, mb.dim);
    let mut mix_feats = Vec::new();
    let mut mix_lens = Vec::new();
    for (r, _) in mb.mixed_rows() {
        mix_feats.extend_from_slice(mb.row(r));
        mix_lens.push(mb.frame_lens[r]);
    }
    let orig = encode_pooled(params, batch.features.clone(), batch.len(), batch.max_frames, batch.dim, &batch.frame_lens, layers)?;
    let mix = encode_pooled(params, mix_feats, mix_lens.len(), nt, d, &mix_lens, layers)?;
    let stats = layers
        .iter()
        .zip(orig.iter().zip(&mix))
        .map(|(&l, (o, m))| separation(l, o, m))
        .collect::<Result<_>>()?;
    Ok(ProbeReport { layers: stats })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_populations_have_zero_ratio() {
        let set = vec![vec![0.0, 1.0], vec![2.0, -1.0], vec![0.5, 0.5]];
        let s = separation(1, &set, &set).unwrap();
        assert!(s.centroid_dist < 1e-12);
        assert!(s.separation_ratio < 1e-12);
        assert_eq!(s.within_orig, s.within_mix);
    }

    #[test]
    fn shifted_population() {
        let a = vec![vec![0.0], vec![2.0]];
        let b = vec![vec![10.0], vec![12.0]];
        let s = separation(0, &a, &b).unwrap();
        assert!((s.centroid_dist - 10.0).abs() < 1e-12);
        assert!((s.separation_ratio - 5.0).abs() < 1e-12);
    }

    #[test]
    fn collapsed_population_floors_the_ratio() {
        let a = vec![vec![1.0]; 3];
        let b = vec![vec![2.0]; 3];
        let s = separation(0, &a, &b).unwrap();
        assert!(s.separation_ratio.is_finite());
        assert!((s.separation_ratio - 1.0 / RATIO_FLOOR).abs() < 1.0);
    }
}
