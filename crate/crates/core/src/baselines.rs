//! Reference activation codecs: magnitude sparsification, its randomised
//! variant, a learned per-token bottleneck and keyed circular-convolution
//! superposition.

use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::params::{Bound, ParamId, ParamStore};
use crate::tensor::Tensor;

/// Per-sample sparse selection of a `[B, ...]` tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Sparse {
    /// Shape of the dense tensor the selection came from.
    pub shape: Vec<usize>,
    /// `[B, k]` values at the selected positions.
    pub values: Tensor,
    /// `B * k` flat per-sample indices, ascending within each sample.
    pub indices: Vec<u32>,
}

impl Sparse {
    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    pub fn kept(&self) -> usize {
        self.values.cols()
    }

    /// Per-sample width `D` of the dense tensor.
    pub fn width(&self) -> usize {
        self.shape[1..].iter().product()
    }

    /// Dense tensor with zeros off the support.
    pub fn to_dense(&self) -> Tensor {
        let (k, d) = (self.kept(), self.width());
        let mut out = vec![0.0; self.batch() * d];
        for (b, (vals, idx)) in self
            .values
            .data()
            .chunks_exact(k)
            .zip(self.indices.chunks_exact(k))
            .enumerate()
        {
            for (&v, &i) in vals.iter().zip(idx) {
                out[b * d + i as usize] = v;
            }
        }
        Tensor::from_parts(self.shape.clone(), out)
    }

    /// Restricts a dense tensor of the original shape to this support.
    pub fn gather(&self, dense: &Tensor) -> Result<Tensor> {
        if dense.shape() != self.shape.as_slice() {
            return Err(Error::contract(format!(
                "gradient {:?} does not match the selection made for {:?}",
                dense.shape(),
                self.shape
            )));
        }
        let (k, d) = (self.kept(), self.width());
        let data = self
            .indices
            .chunks_exact(k)
            .enumerate()
            .flat_map(|(b, idx)| idx.iter().map(move |&i| dense.data()[b * d + i as usize]))
            .collect();
        Ok(Tensor::from_parts(vec![self.batch(), k], data))
    }

    /// Same support, new values. Used for the backward route.
    pub fn with_values(&self, values: Tensor) -> Result<Sparse> {
        if values.shape() != self.values.shape() {
            return Err(Error::contract(format!(
                "values {:?} do not fit a selection of {:?}",
                values.shape(),
                self.values.shape()
            )));
        }
        Ok(Sparse {
            shape: self.shape.clone(),
            values,
            indices: self.indices.clone(),
        })
    }
}

/// Indices of the `k` largest scores, ties to the lower index, ascending.
pub fn top_indices(scores: &[f64], k: usize) -> Vec<u32> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    if k < order.len() {
        order.select_nth_unstable_by(k, |&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
        order.truncate(k);
    }
    let mut kept: Vec<u32> = order.into_iter().map(|i| i as u32).collect();
    kept.sort_unstable();
    kept
}

fn check_kept(z: &Tensor, k: usize) -> Result<usize> {
    if z.ndim() < 2 {
        return Err(Error::shape("topk", format!("expected [B, ...], got {:?}", z.shape())));
    }
    let d = z.len() / z.shape()[0];
    if k == 0 || k > d {
        return Err(Error::contract(format!("kept values {k} must lie in [1, {d}]")));
    }
    Ok(d)
}

fn select_by(z: &Tensor, k: usize, d: usize, mut score: impl FnMut(&[f64]) -> Vec<f64>) -> Sparse {
    let mut values = Vec::with_capacity(z.shape()[0] * k);
    let mut indices = Vec::with_capacity(z.shape()[0] * k);
    for row in z.data().chunks_exact(d) {
        let kept = top_indices(&score(row), k);
        values.extend(kept.iter().map(|&i| row[i as usize]));
        indices.extend(kept);
    }
    Sparse {
        shape: z.shape().to_vec(),
        values: Tensor::from_parts(vec![z.shape()[0], k], values),
        indices,
    }
}

/// Keeps the `k` largest-magnitude entries of every sample.
pub fn topk_encode(z: &Tensor, k: usize) -> Result<Sparse> {
    let d = check_kept(z, k)?;
    Ok(select_by(z, k, d, |row| row.iter().map(|v| v.abs()).collect()))
}

/// Top-K on magnitudes perturbed by `Uniform(0, noise_scale * std(|z|))`,
/// where the spread is taken per sample. Values sent are the unperturbed
/// activations.
pub fn randtopk_encode<R: Rng + ?Sized>(z: &Tensor, k: usize, noise_scale: f64, rng: &mut R) -> Result<Sparse> {
    let d = check_kept(z, k)?;
    if !(noise_scale >= 0.0 && noise_scale.is_finite()) {
        return Err(Error::Config(format!("noise scale {noise_scale} must be finite and non-negative")));
    }
    Ok(select_by(z, k, d, |row| {
        let mags: Vec<f64> = row.iter().map(|v| v.abs()).collect();
        let mean = mags.iter().sum::<f64>() / d as f64;
        let std = (mags.iter().map(|m| (m - mean) * (m - mean)).sum::<f64>() / d as f64).sqrt();
        let spread = noise_scale * std;
        if spread > 0.0 {
            mags.iter().map(|m| m + rng.random::<f64>() * spread).collect()
        } else {
            mags
        }
    }))
}

/// Per-token affine map, optionally followed by GELU, between feature widths.
#[derive(Clone, Debug)]
pub struct Bottleneck {
    pub input: usize,
    pub output: usize,
    pub nonlinear: bool,
    weight: ParamId,
    bias: ParamId,
}

impl Bottleneck {
    /// Random init with standard deviation `1/sqrt(input)`.
    pub fn new(store: &mut ParamStore, name: &str, input: usize, output: usize, rng: &mut ChaCha8Rng) -> Self {
        let std = 1.0 / (input as f64).sqrt();
        Self {
            input,
            output,
            nonlinear: true,
            weight: store.push(format!("{name}.w"), Tensor::randn(&[input, output], std, rng)),
            bias: store.push(format!("{name}.b"), Tensor::zeros(&[output])),
        }
    }

    /// Linear map initialised to the identity.
    pub fn identity(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        let mut w = Tensor::zeros(&[dim, dim]);
        for i in 0..dim {
            w.data_mut()[i * dim + i] = 1.0;
        }
        Self {
            input: dim,
            output: dim,
            nonlinear: false,
            weight: store.push(format!("{name}.w"), w),
            bias: store.push(format!("{name}.b"), Tensor::zeros(&[dim])),
        }
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let y = x.matmul(p[self.weight])?.add_bias(p[self.bias])?;
        Ok(if self.nonlinear { y.gelu() } else { y })
    }
}

/// Keys for superposing `R` activation vectors of width `D` into one slot.
///
/// Decoding divides by the key spectrum with its power floored at
/// [`C3Keys::SPECTRAL_FLOOR`], which is exact correlation for unit-modulus
/// spectra.
#[derive(Clone)]
pub struct C3Keys {
    dim: usize,
    spectra: Vec<Vec<Complex<f64>>>,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl fmt::Debug for C3Keys {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("C3Keys")
            .field("dim", &self.dim)
            .field("keys", &self.spectra.len())
            .finish()
    }
}

impl C3Keys {
    pub const SPECTRAL_FLOOR: f64 = 1e-6;

    /// Arbitrary real keys, one per superposed sample.
    pub fn from_keys(keys: &[Vec<f64>]) -> Result<Self> {
        let dim = keys.first().map_or(0, Vec::len);
        if dim == 0 || keys.iter().any(|k| k.len() != dim) {
            return Err(Error::contract("superposition keys must be non-empty and of equal length"));
        }
        let mut planner = FftPlanner::new();
        let forward = planner.plan_fft_forward(dim);
        let inverse = planner.plan_fft_inverse(dim);
        let spectra = keys
            .iter()
            .map(|k| {
                let mut buf: Vec<Complex<f64>> = k.iter().map(|&v| Complex::new(v, 0.0)).collect();
                forward.process(&mut buf);
                buf
            })
            .collect();
        Ok(Self {
            dim,
            spectra,
            forward,
            inverse,
        })
    }

    /// Seeded Gaussian keys whose spectra are rescaled to unit modulus.
    pub fn gaussian(count: usize, dim: usize, seed: u64) -> Result<Self> {
        if count == 0 {
            return Err(Error::Config("superposition needs at least one key".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let raw: Vec<Vec<f64>> = (0..count)
            .map(|_| Tensor::randn(&[dim], 1.0, &mut rng).into_data())
            .collect();
        let mut keys = Self::from_keys(&raw)?;
        for spectrum in &mut keys.spectra {
            for c in spectrum.iter_mut() {
                let m = c.norm();
                *c = if m > 0.0 { *c / m } else { Complex::new(1.0, 0.0) };
            }
        }
        Ok(keys)
    }

    pub fn count(&self) -> usize {
        self.spectra.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Key `r` in the signal domain.
    pub fn key(&self, r: usize) -> Vec<f64> {
        let mut buf = self.spectra[r].clone();
        self.inverse.process(&mut buf);
        buf.iter().map(|c| c.re / self.dim as f64).collect()
    }

    fn spectrum(&self, x: &[f64]) -> Vec<Complex<f64>> {
        let mut buf: Vec<Complex<f64>> = x.iter().map(|&v| Complex::new(v, 0.0)).collect();
        self.forward.process(&mut buf);
        buf
    }

    fn signal(&self, mut buf: Vec<Complex<f64>>) -> Vec<f64> {
        self.inverse.process(&mut buf);
        buf.iter().map(|c| c.re / self.dim as f64).collect()
    }

    /// Number of slots for a batch, padding up to a multiple of `R`.
    pub fn slots(&self, batch: usize) -> usize {
        batch.div_ceil(self.count())
    }

    /// `[B, ...]` to `[ceil(B/R), D]`. Sample `s*R + r` is convolved with key
    /// `r` and added into slot `s`; a short last group repeats the final
    /// sample.
    pub fn encode(&self, z: &Tensor) -> Result<Tensor> {
        self.superpose(z, true)
    }

    /// As [`C3Keys::encode`] but a short last group is filled with zeros.
    /// This is the adjoint of [`C3Keys::decode`] for unit-modulus keys and
    /// carries gradients back.
    pub fn encode_zero_padded(&self, z: &Tensor) -> Result<Tensor> {
        self.superpose(z, false)
    }

    fn superpose(&self, z: &Tensor, repeat_last: bool) -> Result<Tensor> {
        let batch = self.check(z)?;
        let r = self.count();
        let slots = self.slots(batch);
        let mut out = Vec::with_capacity(slots * self.dim);
        for s in 0..slots {
            let mut acc = vec![Complex::new(0.0, 0.0); self.dim];
            for (j, key) in self.spectra.iter().enumerate() {
                let i = s * r + j;
                if i >= batch && !repeat_last {
                    break;
                }
                let i = i.min(batch - 1);
                let zs = self.spectrum(&z.data()[i * self.dim..(i + 1) * self.dim]);
                for ((a, x), k) in acc.iter_mut().zip(&zs).zip(key) {
                    *a += x * k;
                }
            }
            out.extend(self.signal(acc));
        }
        Ok(Tensor::from_parts(vec![slots, self.dim], out))
    }

    /// Recovers sample `r` of a slot by floored spectral division.
    pub fn decode_one(&self, slot: &[f64], r: usize) -> Vec<f64> {
        let s = self.spectrum(slot);
        let key = &self.spectra[r];
        let buf = s
            .iter()
            .zip(key)
            .map(|(x, k)| x * k.conj() / k.norm_sqr().max(Self::SPECTRAL_FLOOR))
            .collect();
        self.signal(buf)
    }

    /// `[S, D]` slots back to `[batch, D]` estimates, dropping padding.
    pub fn decode(&self, slots: &Tensor, batch: usize) -> Result<Tensor> {
        if slots.ndim() != 2 || slots.cols() != self.dim || slots.rows() != self.slots(batch) {
            return Err(Error::shape(
                "c3sl_decode",
                format!("{:?} slots for a batch of {batch} with width {}", slots.shape(), self.dim),
            ));
        }
        let r = self.count();
        let mut out = Vec::with_capacity(batch * self.dim);
        for i in 0..batch {
            let s = i / r;
            out.extend(self.decode_one(&slots.data()[s * self.dim..(s + 1) * self.dim], i % r));
        }
        Ok(Tensor::from_parts(vec![batch, self.dim], out))
    }

    fn check(&self, z: &Tensor) -> Result<usize> {
        let batch = z.shape().first().copied().unwrap_or(0);
        if batch == 0 || z.len() / batch != self.dim {
            return Err(Error::shape(
                "c3sl_encode",
                format!("{:?} does not have per-sample width {}", z.shape(), self.dim),
            ));
        }
        Ok(batch)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Tape;

    #[test]
    fn topk_magnitude_rule() {
        let z = Tensor::from_rows(&[&[3.0, -5.0, 1.0]]);
        let s = topk_encode(&z, 1).unwrap();
        assert_eq!(s.values.data(), &[-5.0]);
        assert_eq!(s.indices, vec![1]);
    }

    #[test]
    fn topk_ties_take_lower_index() {
        let z = Tensor::from_rows(&[&[1.0, -2.0, 2.0, 0.5]]);
        assert_eq!(topk_encode(&z, 1).unwrap().indices, vec![1]);
        assert_eq!(topk_encode(&z, 3).unwrap().indices, vec![0, 1, 2]);
    }

    #[test]
    fn topk_full_width_is_lossless() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let z = Tensor::randn(&[3, 4, 5], 1.0, &mut rng);
        let s = topk_encode(&z, 20).unwrap();
        assert_eq!(s.to_dense(), z);
        let g = Tensor::randn(&[3, 4, 5], 1.0, &mut rng);
        assert_eq!(s.with_values(s.gather(&g).unwrap()).unwrap().to_dense(), g);
    }

    #[test]
    fn backward_route_drops_untransmitted_positions() {
        let z = Tensor::from_rows(&[&[0.1, 4.0, -3.0, 0.2]]);
        let s = topk_encode(&z, 2).unwrap();
        let g = Tensor::from_rows(&[&[1.0, 2.0, 3.0, 4.0]]);
        let routed = s.with_values(s.gather(&g).unwrap()).unwrap().to_dense();
        assert_eq!(routed.data(), &[0.0, 2.0, 3.0, 0.0]);
        assert!(s.gather(&Tensor::zeros(&[1, 3])).is_err());
    }

    #[test]
    fn randtopk_without_noise_is_topk() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let z = Tensor::randn(&[4, 30], 1.0, &mut rng);
        let a = topk_encode(&z, 7).unwrap();
        let b = randtopk_encode(&z, 7, 0.0, &mut rng).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn randtopk_sends_true_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let z = Tensor::randn(&[2, 50], 1.0, &mut rng);
        let s = randtopk_encode(&z, 10, 5.0, &mut rng).unwrap();
        for (b, idx) in s.indices.chunks_exact(10).enumerate() {
            for (j, &i) in idx.iter().enumerate() {
                assert_eq!(s.values.data()[b * 10 + j], z.data()[b * 50 + i as usize]);
            }
        }
    }

    #[test]
    fn identity_bottleneck_reconstructs() {
        let mut store = ParamStore::new();
        let enc = Bottleneck::identity(&mut store, "enc", 6);
        let dec = Bottleneck::identity(&mut store, "dec", 6);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let z = Tensor::randn(&[2, 3, 6], 1.0, &mut rng);
        let tape = Tape::new();
        let p = store.bind(&tape);
        let x = tape.constant(z.clone());
        let y = dec.forward(&p, enc.forward(&p, x).unwrap()).unwrap();
        assert_eq!(y.value().max_abs_diff(&z), 0.0);
    }

    #[test]
    fn delta_key_is_exact() {
        let mut delta = vec![0.0; 16];
        delta[0] = 1.0;
        let keys = C3Keys::from_keys(&[delta]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let z = Tensor::randn(&[3, 16], 1.0, &mut rng);
        let back = keys.decode(&keys.encode(&z).unwrap(), 3).unwrap();
        assert!(back.max_abs_diff(&z) < 1e-12);
    }

    #[test]
    fn unit_spectrum_keys_have_unit_norm() {
        let keys = C3Keys::gaussian(3, 64, 9).unwrap();
        for r in 0..3 {
            let k = keys.key(r);
            let norm: f64 = k.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn crosstalk_grows_with_root_of_superposed_count() {
        let d = 256;
        for r in [2usize, 4] {
            let mut rng = ChaCha8Rng::seed_from_u64(r as u64);
            let (mut sq, mut n) = (0.0, 0usize);
            for trial in 0..200 {
                let keys = C3Keys::gaussian(r, d, trial).unwrap();
                let z = Tensor::randn(&[r, d], 1.0, &mut rng);
                let back = keys.decode(&keys.encode(&z).unwrap(), r).unwrap();
                for (a, b) in back.data().iter().zip(z.data()) {
                    sq += (a - b) * (a - b);
                    n += 1;
                }
            }
            let std = (sq / n as f64).sqrt();
            let expected = ((r - 1) as f64).sqrt();
            assert!((std / expected - 1.0).abs() < 0.1, "R={r}: {std} vs {expected}");
        }
    }

    #[test]
    fn padding_repeats_last_sample() {
        let keys = C3Keys::gaussian(4, 8, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let z = Tensor::randn(&[6, 8], 1.0, &mut rng);
        let slots = keys.encode(&z).unwrap();
        assert_eq!(slots.shape(), &[2, 8]);
        let mut padded = z.data().to_vec();
        padded.extend_from_slice(&z.data()[40..48]);
        padded.extend_from_slice(&z.data()[40..48]);
        let full = keys.encode(&Tensor::new(vec![8, 8], padded).unwrap()).unwrap();
        assert!(full.max_abs_diff(&slots) < 1e-12);
        assert_eq!(keys.decode(&slots, 6).unwrap().shape(), &[6, 8]);
    }
}
