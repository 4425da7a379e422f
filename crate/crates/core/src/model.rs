//! U-Net style encoder–decoder shared by both streams, selected by a learned
//! prompt vector added to the bottleneck features.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const SLOPE: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TaskId {
    /// Background modeling.
    Bm,
    /// Text erasing.
    Te,
}

impl std::str::FromStr for TaskId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "BM" => Ok(TaskId::Bm),
            "TE" => Ok(TaskId::Te),
            _ => Err(Error::Config(format!("unknown task {s:?} (expected TE or BM)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Channels of the three encoder blocks; the last is also the bottleneck
    /// width and the prompt length.
    pub widths: [usize; 3],
    /// Prompts start uniform in `±prompt_init`; 0 gives zero prompts.
    pub prompt_init: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            widths: [16, 32, 64],
            prompt_init: 0.0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: Tensor,
    pub bias: Tensor,
    stride: usize,
}

impl Conv {
    fn init(rng: &mut ChaCha8Rng, cin: usize, cout: usize, stride: usize) -> Conv {
        let fan_in = cin * 9;
        let bound = (6.0 / fan_in as f64).sqrt();
        let w: Vec<f64> = (0..cout * fan_in).map(|_| rng.gen_range(-bound..bound)).collect();
        Conv {
            weight: Tensor::param(w, &[cout, cin, 3, 3]).expect("positive conv shape"),
            bias: Tensor::param(vec![0.0; cout], &[cout]).expect("positive conv shape"),
            stride,
        }
    }

    fn apply(&self, x: &Tensor) -> Result<Tensor> {
        x.conv2d(&self.weight, Some(&self.bias), self.stride, 1)
    }
}

#[derive(Clone, Debug)]
pub struct PromptedModel {
    pub config: ModelConfig,
    pub enc1: Conv,
    pub enc2: Conv,
    pub enc3: Conv,
    pub bottleneck: Conv,
    pub prompt_bm: Tensor,
    pub prompt_te: Tensor,
    pub dec3: Conv,
    pub dec2: Conv,
    pub dec1: Conv,
    pub head: Conv,
}

/// Total downsampling of the encoder.
pub const DOWNSAMPLE: usize = 8;

impl PromptedModel {
    /// Fan-in scaled uniform weights, zero biases; deterministic in `seed`.
    pub fn init(seed: u64) -> PromptedModel {
        Self::with_config(&ModelConfig::default(), seed)
    }

    pub fn with_config(config: &ModelConfig, seed: u64) -> PromptedModel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let [c1, c2, c3] = config.widths;
        let enc1 = Conv::init(&mut rng, 3, c1, 1);
        let enc2 = Conv::init(&mut rng, c1, c2, 2);
        let enc3 = Conv::init(&mut rng, c2, c3, 2);
        let bottleneck = Conv::init(&mut rng, c3, c3, 2);
        let mut prompt = || {
            let b = config.prompt_init;
            let v = (0..c3)
                .map(|_| if b > 0.0 { rng.gen_range(-b..b) } else { 0.0 })
                .collect();
            Tensor::param(v, &[c3]).expect("positive prompt length")
        };
        let prompt_bm = prompt();
        let prompt_te = prompt();
        PromptedModel {
            config: config.clone(),
            enc1,
            enc2,
            enc3,
            bottleneck,
            prompt_bm,
            prompt_te,
            dec3: Conv::init(&mut rng, 2 * c3, c2, 1),
            dec2: Conv::init(&mut rng, 2 * c2, c1, 1),
            dec1: Conv::init(&mut rng, 2 * c1, c1, 1),
            head: Conv::init(&mut rng, c1, 3, 1),
        }
    }

    pub fn prompt(&self, task: TaskId) -> &Tensor {
        match task {
            TaskId::Bm => &self.prompt_bm,
            TaskId::Te => &self.prompt_te,
        }
    }

    /// `[n,3,h,w]` to `[n,3,h,w]` in (0,1); `h` and `w` must be multiples of 8.
    pub fn forward(&self, x: &Tensor, task: TaskId) -> Result<Tensor> {
        let s = x.shape();
        if s.len() != 4 || s[1] != 3 {
            return Err(Error::InvalidShape(format!("model input must be [n,3,h,w], got {s:?}")));
        }
        if !s[2].is_multiple_of(DOWNSAMPLE) || !s[3].is_multiple_of(DOWNSAMPLE) {
            return Err(Error::InvalidShape(format!(
                "spatial size {}x{} is not divisible by {DOWNSAMPLE}",
                s[2], s[3]
            )));
        }
        let block = |conv: &Conv, x: &Tensor| -> Result<Tensor> { Ok(conv.apply(x)?.leaky_relu(SLOPE)) };
        let e1 = block(&self.enc1, x)?;
        let e2 = block(&self.enc2, &e1)?;
        let e3 = block(&self.enc3, &e2)?;
        let c = self.config.widths[2];
        let prompt = self.prompt(task).reshape(&[c, 1, 1])?;
        let b = block(&self.bottleneck, &e3)?.add(&prompt)?;

        let up = |x: &Tensor, skip: &Tensor| Tensor::concat(&[&x.upsample_nearest(2)?, skip], 1);
        let d3 = block(&self.dec3, &up(&b, &e3)?)?;
        let d2 = block(&self.dec2, &up(&d3, &e2)?)?;
        let d1 = block(&self.dec1, &up(&d2, &e1)?)?;
        Ok(self.head.apply(&d1)?.sigmoid())
    }

    /// Parameters in their fixed order: encoder, bottleneck, prompts, decoder, head.
    pub fn named_parameters(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        let mut conv = |name: &str, c: &Conv| {
            out.push((format!("{name}.weight"), c.weight.clone()));
            out.push((format!("{name}.bias"), c.bias.clone()));
        };
        conv("enc1", &self.enc1);
        conv("enc2", &self.enc2);
        conv("enc3", &self.enc3);
        conv("bottleneck", &self.bottleneck);
        out.push(("prompt.bm".into(), self.prompt_bm.clone()));
        out.push(("prompt.te".into(), self.prompt_te.clone()));
        let mut conv = |name: &str, c: &Conv| {
            out.push((format!("{name}.weight"), c.weight.clone()));
            out.push((format!("{name}.bias"), c.bias.clone()));
        };
        conv("dec3", &self.dec3);
        conv("dec2", &self.dec2);
        conv("dec1", &self.dec1);
        conv("head", &self.head);
        out
    }

    pub fn zero_grad(&self) {
        for (_, p) in self.named_parameters() {
            p.zero_grad();
        }
    }

    pub fn num_parameters(&self) -> usize {
        self.named_parameters().iter().map(|(_, p)| p.numel()).sum()
    }
}

/// Prompts carry a task bias and are kept out of weight decay.
pub fn is_decay_exempt(name: &str) -> bool {
    name.starts_with("prompt.")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_input(seed: u64, n: usize, h: usize) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new((0..n * 3 * h * h).map(|_| rng.gen()).collect(), &[n, 3, h, h]).unwrap()
    }

    #[test]
    fn zero_prompts_make_tasks_identical() {
        let m = PromptedModel::init(3);
        let x = random_input(0, 2, 16);
        let bm = m.forward(&x, TaskId::Bm).unwrap();
        let te = m.forward(&x, TaskId::Te).unwrap();
        assert_eq!(bm.shape(), x.shape());
        assert_eq!(bm.to_vec(), te.to_vec());
        assert!(bm.to_vec().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn perturbing_one_prompt_changes_only_its_task() {
        let m = PromptedModel::init(3);
        let x = random_input(1, 1, 16);
        let bm0 = m.forward(&x, TaskId::Bm).unwrap().to_vec();
        m.prompt_te.update_data(|p| p.iter_mut().for_each(|v| *v += 1.0));
        assert_eq!(m.forward(&x, TaskId::Bm).unwrap().to_vec(), bm0);
        assert_ne!(m.forward(&x, TaskId::Te).unwrap().to_vec(), bm0);
    }

    #[test]
    fn init_is_seeded() {
        let flat = |m: &PromptedModel| -> Vec<f64> {
            m.named_parameters().iter().flat_map(|(_, p)| p.to_vec()).collect()
        };
        assert_eq!(flat(&PromptedModel::init(5)), flat(&PromptedModel::init(5)));
        assert_ne!(flat(&PromptedModel::init(5)), flat(&PromptedModel::init(6)));
        let names: Vec<String> = PromptedModel::init(5).named_parameters().into_iter().map(|(n, _)| n).collect();
        let unique: std::collections::HashSet<_> = names.iter().collect();
        assert_eq!(unique.len(), names.len());
        assert_eq!(names.len(), 18);
    }

    #[test]
    fn indivisible_size_is_rejected() {
        let m = PromptedModel::init(0);
        assert!(m.forward(&Tensor::zeros(&[1, 3, 12, 16]), TaskId::Te).is_err());
    }

    #[test]
    fn mid_gray_forward_is_finite() {
        let m = PromptedModel::init(0);
        let y = m.forward(&Tensor::full(&[1, 3, 64, 64], 0.5), TaskId::Te).unwrap();
        assert!(y.to_vec().iter().all(|v| v.is_finite()));
    }
}
