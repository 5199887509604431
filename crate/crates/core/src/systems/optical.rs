//! Optical scrambler: a random complex transmission matrix with either full
//! complex-field readout or intensity-only (modulus squared) measurement.

use crate::error::{Error, Result};
use crate::rng::{self, Role, Stream};
use crate::systems::System;
use crate::tensor::Tensor;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use std::f64::consts::TAU;

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MeasurementMode {
    FullComplex,
    Intensity,
}

/// The simulated scrambler. Inputs are phase maps `a` in `[0,1]^n`, modulated
/// onto unit-modulus phasors `x = exp(i 2*pi a)` before hitting the matrix.
///
/// Complex quantities are stored as separate real/imag tensors; complex-pair
/// outputs interleave `(re, im)` per element.
pub struct OpticalSystem {
    pub f_re: Tensor,
    pub f_im: Tensor,
    pub measurement_mode: MeasurementMode,
    pub drift_rate: f64,
    pub noise_sigma: f64,
    /// Detector gain applied to intensity outputs (exposure knob; keeps
    /// typical intensities inside [0,1] for image-valued targets).
    pub intensity_scale: f64,
    n: usize,
    m: usize,
    frobenius_norm: f64,
    rng: Stream,
}

impl OpticalSystem {
    /// F is drawn i.i.d. circular complex Gaussian with variance 1/n, so
    /// unit-modulus inputs give outputs of magnitude O(1).
    pub fn new(
        n: usize,
        m: usize,
        measurement_mode: MeasurementMode,
        drift_rate: f64,
        noise_sigma: f64,
        intensity_scale: f64,
        seed: u64,
    ) -> Self {
        let mut init = rng::stream(seed, Role::SystemInit);
        let comp = Normal::new(0.0, (0.5 / n as f64).sqrt()).unwrap();
        let draw = |rng: &mut Stream| -> Vec<f64> {
            (0..m * n).map(|_| comp.sample(rng)).collect()
        };
        let f_re = Tensor::new(vec![m, n], draw(&mut init)).unwrap();
        let f_im = Tensor::new(vec![m, n], draw(&mut init)).unwrap();
        let frobenius_norm = frobenius(&f_re, &f_im);
        OpticalSystem {
            f_re,
            f_im,
            measurement_mode,
            drift_rate,
            noise_sigma,
            intensity_scale,
            n,
            m,
            frobenius_norm,
            rng: rng::stream(seed, Role::SystemNoise),
        }
    }

    /// Replace F with an explicit matrix pair (used by tests and for
    /// reproducing an exported system).
    pub fn with_matrix(mut self, f_re: Tensor, f_im: Tensor) -> Result<Self> {
        if f_re.shape() != [self.m, self.n] || f_im.shape() != [self.m, self.n] {
            return Err(Error::shape("optical matrix", f_re.shape(), &[self.m, self.n]));
        }
        self.f_re = f_re;
        self.f_im = f_im;
        self.frobenius_norm = frobenius(&self.f_re, &self.f_im);
        Ok(self)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> usize {
        self.m
    }

    /// Complex field u = F x for a phase map, as interleaved `(re, im)` pairs.
    pub fn field(&self, phase: &Tensor) -> Result<Tensor> {
        if phase.len() != self.n {
            return Err(Error::shape("optical_forward", phase.shape(), &[self.n]));
        }
        if phase.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::Domain(
                "optical_forward: phase values must lie in [0, 1]".into(),
            ));
        }
        let xs: Vec<(f64, f64)> = phase
            .data()
            .iter()
            .map(|&a| ((TAU * a).cos(), (TAU * a).sin()))
            .collect();
        let mut out = vec![0.0; 2 * self.m];
        for mu in 0..self.m {
            let (mut re, mut im) = (0.0, 0.0);
            let fr = &self.f_re.data()[mu * self.n..(mu + 1) * self.n];
            let fi = &self.f_im.data()[mu * self.n..(mu + 1) * self.n];
            for i in 0..self.n {
                let (xr, xi) = xs[i];
                re += fr[i] * xr - fi[i] * xi;
                im += fr[i] * xi + fi[i] * xr;
            }
            out[2 * mu] = re;
            out[2 * mu + 1] = im;
        }
        Tensor::new(vec![2 * self.m], out)
    }

    /// One system query: modulate, propagate, measure, then apply the drift
    /// step and additive output noise.
    pub fn forward(&mut self, phase: &Tensor) -> Result<Tensor> {
        let field = self.field(phase)?;
        let mut out = match self.measurement_mode {
            MeasurementMode::FullComplex => field,
            MeasurementMode::Intensity => {
                let d = field.data();
                let vals = (0..self.m)
                    .map(|mu| {
                        self.intensity_scale
                            * (d[2 * mu] * d[2 * mu] + d[2 * mu + 1] * d[2 * mu + 1])
                    })
                    .collect();
                Tensor::new(vec![self.m], vals)?
            }
        };
        if self.drift_rate > 0.0 {
            self.drift_step();
        }
        if self.noise_sigma > 0.0 {
            let noise = Normal::new(0.0, self.noise_sigma).unwrap();
            let clamp = self.measurement_mode == MeasurementMode::Intensity;
            for v in out.data_mut() {
                *v += noise.sample(&mut self.rng);
                // a camera never reports negative counts
                if clamp && *v < 0.0 {
                    *v = 0.0;
                }
            }
        }
        Ok(out)
    }

    /// `F <- normalize(F + drift_rate * G)` with fresh complex Gaussian G;
    /// the Frobenius norm is restored so task difficulty stays stationary.
    pub fn drift_step(&mut self) {
        if self.drift_rate == 0.0 {
            return;
        }
        for t in [&mut self.f_re, &mut self.f_im] {
            for v in t.data_mut() {
                let g: f64 = StandardNormal.sample(&mut self.rng);
                *v += self.drift_rate * g;
            }
        }
        let cur = frobenius(&self.f_re, &self.f_im);
        let scale = self.frobenius_norm / cur;
        for t in [&mut self.f_re, &mut self.f_im] {
            for v in t.data_mut() {
                *v *= scale;
            }
        }
    }
}

impl System for OpticalSystem {
    fn input_len(&self) -> usize {
        self.n
    }

    fn input_shape(&self) -> Vec<usize> {
        vec![self.n]
    }

    fn output_len(&self) -> usize {
        match self.measurement_mode {
            MeasurementMode::FullComplex => 2 * self.m,
            MeasurementMode::Intensity => self.m,
        }
    }

    fn query(&mut self, x: &Tensor) -> Result<Tensor> {
        self.forward(x)
    }
}

fn frobenius(re: &Tensor, im: &Tensor) -> f64 {
    re.data()
        .iter()
        .chain(im.data())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
}
