//! Retinal ganglion cell proxy: a frozen convolutional rate model standing in
//! for the real recorded system. Stimulus frames go through a small CNN with
//! spatially smoothed first-layer kernels (receptive-field structure) and an
//! exponential rate head; counts mode replaces each rate by a Poisson draw.

use crate::error::{Error, Result};
use crate::graph::{Activation, Graph, Padding};
use crate::rng::{self, Role, Stream};
use crate::systems::System;
use crate::tensor::{params_checksum, Tensor};
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RetinaSampling {
    Rate,
    Counts,
}

pub struct RetinaSystem {
    conv1_k: Tensor,
    conv1_b: Tensor,
    conv2_k: Tensor,
    conv2_b: Tensor,
    fc_w: Tensor,
    fc_b: Tensor,
    frames: usize,
    height: usize,
    width: usize,
    n_cells: usize,
    pub sampling: RetinaSampling,
    rng: Stream,
}

const C1: usize = 8;
const C2: usize = 4;

impl RetinaSystem {
    /// `rate_base` sets the typical firing rate (counts per time bin);
    /// `log_rate_std` sets how strongly rates depend on the stimulus.
    pub fn new(
        frames: usize,
        height: usize,
        width: usize,
        n_cells: usize,
        rate_base: f64,
        log_rate_std: f64,
        sampling: RetinaSampling,
        seed: u64,
    ) -> Result<Self> {
        let mut init = rng::stream(seed, Role::SystemInit);
        let conv1_k = smooth_kernels(rng::glorot_uniform(
            &[C1, 1, 3, 3],
            9,
            9 * C1,
            &mut init,
        ));
        let conv1_b = Tensor::zeros(&[C1]);
        let conv2_k = rng::glorot_uniform(&[C2, C1, 3, 3], 9 * C1, 9 * C2, &mut init);
        let conv2_b = Tensor::zeros(&[C2]);
        let feat = C2 * height.div_ceil(2).div_ceil(2) * width.div_ceil(2).div_ceil(2);
        let fc_w = rng::glorot_uniform(&[feat, n_cells], feat, n_cells, &mut init);
        let fc_b = Tensor::zeros(&[n_cells]);

        let mut sys = RetinaSystem {
            conv1_k,
            conv1_b,
            conv2_k,
            conv2_b,
            fc_w,
            fc_b,
            frames,
            height,
            width,
            n_cells,
            sampling,
            rng: rng::stream(seed, Role::SystemNoise),
        };
        sys.calibrate(rate_base, log_rate_std, &mut init)?;
        Ok(sys)
    }

    /// Rescale the rate head so log-rates over random stimuli have roughly the
    /// requested mean and spread.
    fn calibrate(&mut self, rate_base: f64, log_rate_std: f64, rng: &mut Stream) -> Result<()> {
        let mut pre = Vec::new();
        for _ in 0..32 {
            let frame = rng::uniform01(&[1, self.height, self.width], rng);
            let z = self.frame_preactivation(&frame)?;
            pre.extend_from_slice(z.data());
        }
        let n = pre.len() as f64;
        let mean = pre.iter().sum::<f64>() / n;
        let var = pre.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let scale = log_rate_std / var.sqrt().max(1e-12);
        for v in self.fc_w.data_mut() {
            *v *= scale;
        }
        let bias = rate_base.ln() - mean * scale;
        for v in self.fc_b.data_mut() {
            *v = bias;
        }
        Ok(())
    }

    fn frame_preactivation(&self, frame: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let x = g.constant(frame.clone());
        let k1 = g.constant(self.conv1_k.clone());
        let b1 = g.constant(self.conv1_b.clone());
        let c1 = g.conv2d(x, k1, 1, Padding::Same)?;
        let c1 = g.add_channel_broadcast(c1, b1)?;
        let c1 = g.activation(c1, Activation::Relu);
        let p1 = g.maxpool2x2(c1)?;
        let k2 = g.constant(self.conv2_k.clone());
        let b2 = g.constant(self.conv2_b.clone());
        let c2 = g.conv2d(p1, k2, 1, Padding::Same)?;
        let c2 = g.add_channel_broadcast(c2, b2)?;
        let c2 = g.activation(c2, Activation::Relu);
        let p2 = g.maxpool2x2(c2)?;
        let feat = self.fc_w.shape()[0];
        let flat = g.reshape(p2, vec![1, feat])?;
        let w = g.constant(self.fc_w.clone());
        let b = g.constant(self.fc_b.clone());
        let z = g.matmul(flat, w)?;
        let z = g.add_row_broadcast(z, b)?;
        Ok(g.value(z).reshape(vec![self.n_cells])?)
    }

    /// Deterministic positive rates `[T, m]` for a stimulus `[T, H, W]`.
    pub fn forward_rates(&self, stimulus: &Tensor) -> Result<Tensor> {
        if stimulus.shape() != [self.frames, self.height, self.width] {
            return Err(Error::shape(
                "retina_forward",
                stimulus.shape(),
                &[self.frames, self.height, self.width],
            ));
        }
        if stimulus.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::Domain(
                "retina_forward: stimulus values must lie in [0, 1]".into(),
            ));
        }
        let hw = self.height * self.width;
        let mut out = Vec::with_capacity(self.frames * self.n_cells);
        for t in 0..self.frames {
            let frame = Tensor::new(
                vec![1, self.height, self.width],
                stimulus.data()[t * hw..(t + 1) * hw].to_vec(),
            )?;
            let z = self.frame_preactivation(&frame)?;
            out.extend(z.data().iter().map(|v| v.exp()));
        }
        Tensor::new(vec![self.frames, self.n_cells], out)
    }

    /// Poisson counts with the deterministic rates as means.
    pub fn forward_counts(&mut self, stimulus: &Tensor) -> Result<Tensor> {
        let rates = self.forward_rates(stimulus)?;
        let data = rates
            .data()
            .iter()
            .map(|&l| Poisson::new(l.max(1e-12)).unwrap().sample(&mut self.rng))
            .collect();
        Tensor::new(rates.shape().to_vec(), data)
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn n_cells(&self) -> usize {
        self.n_cells
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn params_checksum(&self) -> u64 {
        params_checksum([
            &self.conv1_k,
            &self.conv1_b,
            &self.conv2_k,
            &self.conv2_b,
            &self.fc_w,
            &self.fc_b,
        ])
    }
}

impl System for RetinaSystem {
    fn input_len(&self) -> usize {
        self.frames * self.height * self.width
    }

    fn input_shape(&self) -> Vec<usize> {
        vec![self.frames, self.height, self.width]
    }

    fn output_len(&self) -> usize {
        self.frames * self.n_cells
    }

    fn query(&mut self, x: &Tensor) -> Result<Tensor> {
        match self.sampling {
            RetinaSampling::Rate => self.forward_rates(x),
            RetinaSampling::Counts => self.forward_counts(x),
        }
    }
}

/// Box-blur each 3x3 kernel so first-layer receptive fields are low-pass.
fn smooth_kernels(k: Tensor) -> Tensor {
    let shape = k.shape().to_vec();
    let (c_out, c_in) = (shape[0], shape[1]);
    let mut out = k.clone();
    for co in 0..c_out {
        for ci in 0..c_in {
            let base = (co * c_in + ci) * 9;
            let src = &k.data()[base..base + 9];
            for y in 0..3i32 {
                for x in 0..3i32 {
                    let mut acc = 0.0;
                    let mut cnt = 0.0;
                    for dy in -1..=1 {
                        for dx in -1..=1 {
                            let (ny, nx) = (y + dy, x + dx);
                            if (0..3).contains(&ny) && (0..3).contains(&nx) {
                                acc += src[(ny * 3 + nx) as usize];
                                cnt += 1.0;
                            }
                        }
                    }
                    out.data_mut()[base + (y * 3 + x) as usize] = acc / cnt;
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> RetinaSystem {
        RetinaSystem::new(3, 8, 8, 2, 10.0, 0.4, RetinaSampling::Rate, 21).unwrap()
    }

    #[test]
    fn rates_positive_and_deterministic() {
        let sys = small();
        let stim = rng::uniform01(&[3, 8, 8], &mut rng::stream(4, Role::Dataset));
        let a = sys.forward_rates(&stim).unwrap();
        let b = sys.forward_rates(&stim).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.shape(), &[3, 2]);
        assert!(a.data().iter().all(|&v| v > 0.0));
    }

    #[test]
    fn params_frozen_across_queries() {
        let mut sys = small();
        let before = sys.params_checksum();
        let stim = rng::uniform01(&[3, 8, 8], &mut rng::stream(4, Role::Dataset));
        for _ in 0..5 {
            sys.forward_rates(&stim).unwrap();
            sys.forward_counts(&stim).unwrap();
        }
        assert_eq!(before, sys.params_checksum());
    }

    #[test]
    fn shape_mismatch_rejected() {
        let sys = small();
        assert!(sys.forward_rates(&Tensor::zeros(&[3, 8, 7])).is_err());
    }

    #[test]
    fn counts_empirical_mean_matches_rate() {
        // fixed rate lambda, 10^4 draws: mean within 3*sqrt(lambda/1e4)
        let mut sys = small();
        let stim = rng::uniform01(&[3, 8, 8], &mut rng::stream(4, Role::Dataset));
        let lambda = sys.forward_rates(&stim).unwrap().data()[0];
        let n = 10_000;
        let mut acc = 0.0;
        for _ in 0..n {
            acc += sys.forward_counts(&stim).unwrap().data()[0];
        }
        let mean = acc / n as f64;
        assert!(
            (mean - lambda).abs() < 3.0 * (lambda / n as f64).sqrt(),
            "mean {mean} vs rate {lambda}"
        );
    }

    #[test]
    fn calibration_centers_log_rates() {
        let sys = RetinaSystem::new(2, 8, 8, 3, 12.0, 0.4, RetinaSampling::Rate, 33).unwrap();
        let mut logs = Vec::new();
        let mut r = rng::stream(9, Role::Dataset);
        for _ in 0..50 {
            let stim = rng::uniform01(&[2, 8, 8], &mut r);
            logs.extend(sys.forward_rates(&stim).unwrap().data().iter().map(|v| v.ln()));
        }
        let mean = logs.iter().sum::<f64>() / logs.len() as f64;
        assert!((mean - 12.0f64.ln()).abs() < 0.5, "log-rate mean {mean}");
    }
}
