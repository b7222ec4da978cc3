//! Synthetic paired datasets with many-to-many structure.
//!
//! Every sample is a sparse mixture of shared concept vectors. Image, text
//! and tag views are fixed random linear maps of the sample's latent; each
//! ROI views a single active concept. A faulty positive gets a text view
//! rendered from an unrelated latent, while the ground-truth relevance keeps
//! using the original one.

use alloc::format;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::{dot, norm, Matrix, Seed};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseSigma {
    pub image: f64,
    pub text: f64,
    pub roi: f64,
    pub tag: f64,
}

impl NoiseSigma {
    pub fn uniform(sigma: f64) -> Self {
        Self { image: sigma, text: sigma, roi: sigma, tag: sigma }
    }
}

impl Default for NoiseSigma {
    fn default() -> Self {
        Self { image: 0.5, text: 0.5, roi: 0.5, tag: 0.25 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub n_samples: usize,
    pub n_concepts: usize,
    pub latent_dim: usize,
    pub concepts_per_sample: usize,
    pub d_image: usize,
    pub d_text: usize,
    pub d_roi: usize,
    pub d_tag: usize,
    pub rois_per_image: usize,
    pub noise_sigma: NoiseSigma,
    pub faulty_positive_rate: f64,
    pub seed: Seed,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_samples: 2000,
            n_concepts: 20,
            latent_dim: 32,
            concepts_per_sample: 3,
            d_image: 64,
            d_text: 64,
            d_roi: 2052,
            d_tag: 32,
            rois_per_image: 10,
            noise_sigma: NoiseSigma::default(),
            faulty_positive_rate: 0.1,
            seed: Seed(0),
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: alloc::string::String| Err(Error::SpecInvalid(msg));
        let dims = [
            ("n_samples", self.n_samples),
            ("n_concepts", self.n_concepts),
            ("latent_dim", self.latent_dim),
            ("concepts_per_sample", self.concepts_per_sample),
            ("d_image", self.d_image),
            ("d_text", self.d_text),
            ("d_roi", self.d_roi),
            ("d_tag", self.d_tag),
            ("rois_per_image", self.rois_per_image),
        ];
        for (name, v) in dims {
            if v == 0 {
                return bad(format!("{name} must be at least 1"));
            }
        }
        if self.concepts_per_sample > self.n_concepts {
            return bad(format!(
                "concepts_per_sample ({}) exceeds n_concepts ({})",
                self.concepts_per_sample, self.n_concepts
            ));
        }
        let s = self.noise_sigma;
        for (name, v) in [("image", s.image), ("text", s.text), ("roi", s.roi), ("tag", s.tag)] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("noise_sigma.{name} must be finite and >= 0, got {v}"));
            }
        }
        if !(0.0..1.0).contains(&self.faulty_positive_rate) {
            return bad(format!("faulty_positive_rate must be in [0, 1), got {}", self.faulty_positive_rate));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthDataset {
    pub spec: SynthSpec,
    /// n × d_image
    pub image: Matrix,
    /// n × d_text
    pub text: Matrix,
    /// (n·M) × d_roi; rows `i·M .. (i+1)·M` belong to sample `i`.
    pub roi: Matrix,
    /// n × d_tag
    pub tag: Matrix,
    /// n × n ground truth, symmetric with unit diagonal.
    pub relevance: Matrix,
}

impl SynthDataset {
    pub fn len(&self) -> usize {
        self.image.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn rois_per_image(&self) -> usize {
        self.roi.rows() / self.len().max(1)
    }

    /// The M ROI features of sample `i`, row-major M × d_roi.
    pub fn rois(&self, i: usize) -> &[f64] {
        let m = self.rois_per_image();
        let d = self.roi.cols();
        &self.roi.as_slice()[i * m * d..(i + 1) * m * d]
    }

    /// Checks shapes against each other and the spec; used after loading.
    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        let s = &self.spec;
        let n = s.n_samples;
        let expect = [
            ("image", &self.image, (n, s.d_image)),
            ("text", &self.text, (n, s.d_text)),
            ("roi", &self.roi, (n * s.rois_per_image, s.d_roi)),
            ("tag", &self.tag, (n, s.d_tag)),
            ("relevance", &self.relevance, (n, n)),
        ];
        for (name, m, shape) in expect {
            if m.shape() != shape {
                return Err(Error::SpecInvalid(format!(
                    "{name} has shape {:?}, spec implies {:?}",
                    m.shape(),
                    shape
                )));
            }
        }
        Ok(())
    }
}

/// Draws concept subsets from a reshuffled deck so every concept is used
/// about equally often and a sample never repeats a concept.
struct Deck {
    k: usize,
    cards: Vec<usize>,
}

impl Deck {
    fn refill(&mut self, rng: &mut ChaCha20Rng) {
        let mut fresh: Vec<usize> = (0..self.k).collect();
        fresh.shuffle(rng);
        self.cards.extend(fresh);
    }

    fn draw(&mut self, count: usize, rng: &mut ChaCha20Rng) -> Vec<usize> {
        let mut chosen = Vec::with_capacity(count);
        while chosen.len() < count {
            match self.cards.iter().rposition(|c| !chosen.contains(c)) {
                Some(pos) => chosen.push(self.cards.remove(pos)),
                None => self.refill(rng),
            }
        }
        chosen
    }
}

fn gaussian(rng: &mut ChaCha20Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn gaussian_rows(rows: usize, cols: usize, rng: &mut ChaCha20Rng) -> Matrix {
    let data = (0..rows * cols).map(|_| gaussian(rng)).collect();
    Matrix::from_vec_unchecked(rows, cols, data)
}

fn normalized(mut v: Vec<f64>) -> Vec<f64> {
    let n = norm(&v);
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    v
}

/// `out = w · z + sigma · noise`, written into `out`.
fn view(w: &Matrix, z: &[f64], sigma: f64, rng: &mut ChaCha20Rng, out: &mut [f64]) {
    for (o, row) in out.iter_mut().zip(w.row_iter()) {
        *o = dot(row, z) + sigma * gaussian(rng);
    }
}

struct Sample {
    concepts: Vec<usize>,
    latent: Vec<f64>,
}

fn draw_sample(spec: &SynthSpec, concepts: &Matrix, deck: &mut Deck, rng: &mut ChaCha20Rng) -> Sample {
    let active = deck.draw(spec.concepts_per_sample, rng);
    let mut z = alloc::vec![0.0; spec.latent_dim];
    for &c in &active {
        let w: f64 = rng.random_range(0.5..1.5);
        for (zi, &ci) in z.iter_mut().zip(concepts.row(c)) {
            *zi += w * ci;
        }
    }
    Sample { concepts: active, latent: normalized(z) }
}

/// Generates a dataset. Randomness comes from three sequential streams
/// derived from `spec.seed`: structure (concepts, maps, latents), corruption
/// (faulty positives) and observation noise. Keeping them apart means the
/// corruption rate cannot shift the latents or the relevance matrix.
pub fn generate(spec: &SynthSpec) -> Result<SynthDataset> {
    spec.validate()?;
    let mut rng = spec.seed.derive(0).rng();
    let mut corrupt = spec.seed.derive(1).rng();
    let mut noise = spec.seed.derive(2).rng();
    let (n, l, m) = (spec.n_samples, spec.latent_dim, spec.rois_per_image);

    let mut concepts = gaussian_rows(spec.n_concepts, l, &mut rng);
    for i in 0..concepts.rows() {
        let unit = normalized(concepts.row(i).to_vec());
        concepts.row_mut(i).copy_from_slice(&unit);
    }
    let w_image = gaussian_rows(spec.d_image, l, &mut rng);
    let w_text = gaussian_rows(spec.d_text, l, &mut rng);
    let w_tag = gaussian_rows(spec.d_tag, l, &mut rng);
    let w_roi = gaussian_rows(spec.d_roi, l, &mut rng);
    // Noise-free ROI view of every concept.
    let roi_means: Vec<Vec<f64>> =
        concepts.row_iter().map(|c| w_roi.row_iter().map(|row| dot(row, c)).collect()).collect();

    let mut deck = Deck { k: spec.n_concepts, cards: Vec::new() };
    let mut faulty_deck = Deck { k: spec.n_concepts, cards: Vec::new() };
    let mut image = Matrix::zeros(n, spec.d_image);
    let mut text = Matrix::zeros(n, spec.d_text);
    let mut tag = Matrix::zeros(n, spec.d_tag);
    let mut roi = Matrix::zeros(n * m, spec.d_roi);
    let mut latents = Matrix::zeros(n, l);
    let sigma = spec.noise_sigma;

    for i in 0..n {
        let s = draw_sample(spec, &concepts, &mut deck, &mut rng);
        latents.row_mut(i).copy_from_slice(&s.latent);
        view(&w_image, &s.latent, sigma.image, &mut noise, image.row_mut(i));

        let faulty = corrupt.random::<f64>() < spec.faulty_positive_rate;
        if faulty {
            let other = draw_sample(spec, &concepts, &mut faulty_deck, &mut corrupt);
            view(&w_text, &other.latent, sigma.text, &mut noise, text.row_mut(i));
        } else {
            view(&w_text, &s.latent, sigma.text, &mut noise, text.row_mut(i));
        }

        let mut pooled = alloc::vec![0.0; l];
        for &c in &s.concepts {
            for (p, &x) in pooled.iter_mut().zip(concepts.row(c)) {
                *p += x;
            }
        }
        view(&w_tag, &normalized(pooled), sigma.tag, &mut noise, tag.row_mut(i));

        for r in 0..m {
            let c = s.concepts[rng.random_range(0..s.concepts.len())];
            for (o, &mu) in roi.row_mut(i * m + r).iter_mut().zip(&roi_means[c]) {
                *o = mu + sigma.roi * gaussian(&mut noise);
            }
        }
    }

    let mut relevance = Matrix::zeros(n, n);
    for i in 0..n {
        relevance.set(i, i, 1.0);
        for j in i + 1..n {
            let r = dot(latents.row(i), latents.row(j)).clamp(-1.0, 1.0);
            relevance.set(i, j, r);
            relevance.set(j, i, r);
        }
    }

    Ok(SynthDataset { spec: spec.clone(), image, text, roi, tag, relevance })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthSpec {
        SynthSpec { n_samples: 60, d_roi: 24, rois_per_image: 4, ..SynthSpec::default() }
    }

    #[test]
    fn deterministic() {
        let a = generate(&small()).unwrap();
        let b = generate(&small()).unwrap();
        assert_eq!(a, b);
        let c = generate(&SynthSpec { seed: Seed(1), ..small() }).unwrap();
        assert_ne!(a.image, c.image);
    }

    #[test]
    fn single_concept_gives_all_ones() {
        let spec = SynthSpec {
            n_concepts: 1,
            concepts_per_sample: 1,
            noise_sigma: NoiseSigma::uniform(0.0),
            faulty_positive_rate: 0.0,
            ..small()
        };
        let d = generate(&spec).unwrap();
        for &x in d.relevance.as_slice() {
            assert!((x - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn distinct_concepts_are_nearly_orthogonal() {
        let spec = SynthSpec {
            n_samples: 16,
            n_concepts: 16,
            concepts_per_sample: 1,
            latent_dim: 256,
            ..small()
        };
        let d = generate(&spec).unwrap();
        for i in 0..16 {
            for j in 0..16 {
                if i != j {
                    assert!(d.relevance.get(i, j).abs() < 0.2, "{i} {j}: {}", d.relevance.get(i, j));
                }
            }
        }
    }

    #[test]
    fn relevance_invariants() {
        let d = generate(&small()).unwrap();
        let n = d.len();
        for i in 0..n {
            assert_eq!(d.relevance.get(i, i), 1.0);
            for j in 0..n {
                let r = d.relevance.get(i, j);
                assert_eq!(r, d.relevance.get(j, i));
                assert!((-1.0..=1.0).contains(&r));
            }
        }
    }

    #[test]
    fn faulty_rate_leaves_relevance_alone() {
        let clean = generate(&SynthSpec { faulty_positive_rate: 0.0, ..small() }).unwrap();
        let noisy = generate(&SynthSpec { faulty_positive_rate: 0.9, ..small() }).unwrap();
        assert_eq!(clean.relevance, noisy.relevance);
        assert_eq!(clean.image, noisy.image);
        assert_ne!(clean.text, noisy.text);
    }

    #[test]
    fn invalid_specs_rejected() {
        for spec in [
            SynthSpec { concepts_per_sample: 30, ..small() },
            SynthSpec { d_tag: 0, ..small() },
            SynthSpec { faulty_positive_rate: 1.0, ..small() },
            SynthSpec { noise_sigma: NoiseSigma::uniform(-0.1), ..small() },
        ] {
            assert!(matches!(generate(&spec), Err(Error::SpecInvalid(_))));
        }
    }

    #[test]
    fn deck_never_repeats_within_a_sample() {
        let mut rng = Seed(3).rng();
        let mut deck = Deck { k: 5, cards: Vec::new() };
        let mut counts = [0usize; 5];
        for _ in 0..100 {
            let mut draw = deck.draw(3, &mut rng);
            draw.iter().for_each(|&c| counts[c] += 1);
            draw.sort_unstable();
            draw.dedup();
            assert_eq!(draw.len(), 3);
        }
        // 300 draws over 5 concepts; the deck keeps usage balanced.
        assert!(counts.iter().all(|&c| (55..=65).contains(&c)), "{counts:?}");
    }
}
