use rand::Rng;

use super::AnnotatedImage;
use crate::error::{Error, Result};
use crate::masks::{rasterize, AnnotationPool, BinaryMask};
use crate::tensor::Tensor;

/// Stacked training examples. Masks are `[n,1,h,w]` with entries 0.0 / 1.0.
#[derive(Clone, Debug)]
pub struct Batch {
    pub images: Tensor,
    pub text_masks: Tensor,
    pub rand_masks: Tensor,
    pub cleans: Option<Tensor>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.images.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn common_size(samples: &[AnnotatedImage]) -> Result<(usize, usize)> {
    let first = samples
        .first()
        .ok_or_else(|| Error::InvalidShape("empty batch".into()))?;
    for s in samples {
        if s.image.shape() != first.image.shape() || s.image.shape()[0] != 3 {
            return Err(Error::shape("make_batch", first.image.shape(), s.image.shape()));
        }
        if let Some(c) = &s.clean {
            if c.shape() != s.image.shape() {
                return Err(Error::shape("make_batch clean", s.image.shape(), c.shape()));
            }
        }
    }
    Ok((first.height(), first.width()))
}

fn stack(parts: impl Iterator<Item = Vec<f64>>, shape: &[usize]) -> Result<Tensor> {
    let data: Vec<f64> = parts.flatten().collect();
    Tensor::new(data, shape)
}

fn stack_masks(masks: &[BinaryMask], h: usize, w: usize) -> Result<Tensor> {
    stack(
        masks.iter().map(|m| m.values.iter().map(|&v| v as f64).collect()),
        &[masks.len(), 1, h, w],
    )
}

/// Builds a batch for pretraining. `pool_indices[i]` is the position of
/// `samples[i]` in `pool`; its own annotation is never drawn as `M_rand`
/// unless the pool holds nothing else. `dilation` grows `M_text` only.
pub fn make_batch_with<R: Rng + ?Sized>(
    samples: &[AnnotatedImage],
    pool_indices: &[usize],
    pool: &AnnotationPool,
    dilation: usize,
    rng: &mut R,
) -> Result<Batch> {
    let (h, w) = common_size(samples)?;
    assert_eq!(samples.len(), pool_indices.len(), "one pool index per sample");
    let n = samples.len();
    let mut text = Vec::with_capacity(n);
    let mut rand = Vec::with_capacity(n);
    for (s, &idx) in samples.iter().zip(pool_indices) {
        text.push(rasterize(&s.polygons, h, w)?.dilate(dilation));
        rand.push(pool.sample_mask(h, w, rng, Some(idx))?);
    }
    let cleans = if samples.iter().all(|s| s.clean.is_some()) {
        Some(stack(
            samples.iter().map(|s| s.clean.as_ref().unwrap().to_vec()),
            &[n, 3, h, w],
        )?)
    } else {
        None
    };
    Ok(Batch {
        images: stack(samples.iter().map(|s| s.image.to_vec()), &[n, 3, h, w])?,
        text_masks: stack_masks(&text, h, w)?,
        rand_masks: stack_masks(&rand, h, w)?,
        cleans,
    })
}

pub fn make_batch<R: Rng + ?Sized>(
    samples: &[AnnotatedImage],
    pool_indices: &[usize],
    pool: &AnnotationPool,
    rng: &mut R,
) -> Result<Batch> {
    make_batch_with(samples, pool_indices, pool, 0, rng)
}

/// Batch for supervised finetuning; every sample must carry a clean target.
/// Random masks are left empty since that stage never uses them.
pub fn make_supervised_batch(samples: &[AnnotatedImage]) -> Result<Batch> {
    let (h, w) = common_size(samples)?;
    let n = samples.len();
    let mut cleans = Vec::with_capacity(n);
    for (i, s) in samples.iter().enumerate() {
        cleans.push(s.clean.as_ref().ok_or(Error::MissingClean(i))?.to_vec());
    }
    let text: Vec<BinaryMask> = samples
        .iter()
        .map(|s| rasterize(&s.polygons, h, w))
        .collect::<Result<_>>()?;
    Ok(Batch {
        images: stack(samples.iter().map(|s| s.image.to_vec()), &[n, 3, h, w])?,
        text_masks: stack_masks(&text, h, w)?,
        rand_masks: Tensor::zeros(&[n, 1, h, w]),
        cleans: Some(stack(cleans.into_iter(), &[n, 3, h, w])?),
    })
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::data::synth::{synth_generate, SynthConfig};
    use crate::masks::TextPolygon;

    fn blank(h: usize, w: usize) -> AnnotatedImage {
        AnnotatedImage {
            image: Tensor::full(&[3, h, w], 0.5),
            polygons: vec![],
            clean: None,
        }
    }

    #[test]
    fn no_polygons_gives_zero_text_mask() {
        let mut pool = AnnotationPool::default();
        pool.push(vec![], 8, 8);
        let b = make_batch(&[blank(8, 8)], &[0], &pool, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(b.text_masks.to_vec().iter().all(|&v| v == 0.0));
        assert!(b.cleans.is_none());
    }

    #[test]
    fn batch_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let samples: Vec<_> = (0..2)
            .map(|_| synth_generate(&SynthConfig::default(), &mut rng).unwrap())
            .collect();
        let mut pool = AnnotationPool::default();
        for s in &samples {
            pool.push(s.polygons.clone(), 64, 64);
        }
        let b = make_batch(&samples, &[0, 1], &pool, &mut rng).unwrap();
        assert_eq!(b.images.shape(), &[2, 3, 64, 64]);
        assert_eq!(b.text_masks.shape(), &[2, 1, 64, 64]);
        assert_eq!(b.rand_masks.shape(), &[2, 1, 64, 64]);
        assert_eq!(b.cleans.as_ref().unwrap().shape(), &[2, 3, 64, 64]);
        for m in [&b.text_masks, &b.rand_masks] {
            assert!(m.to_vec().iter().all(|&v| v == 0.0 || v == 1.0));
        }
    }

    #[test]
    fn rand_mask_comes_from_the_other_item() {
        let mut pool = AnnotationPool::default();
        pool.push(vec![], 8, 8);
        pool.push(vec![TextPolygon::rect(0.0, 0.0, 8.0, 8.0)], 8, 8);
        for seed in 0..10 {
            let b = make_batch(&[blank(8, 8)], &[0], &pool, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            assert!(b.rand_masks.to_vec().iter().all(|&v| v == 1.0));
        }
    }

    #[test]
    fn heterogeneous_shapes_rejected() {
        let mut pool = AnnotationPool::default();
        pool.push(vec![], 8, 8);
        pool.push(vec![], 8, 8);
        let r = make_batch(&[blank(8, 8), blank(8, 16)], &[0, 1], &pool, &mut ChaCha8Rng::seed_from_u64(0));
        assert!(r.is_err());
    }

    #[test]
    fn supervised_batch_requires_clean() {
        assert!(matches!(make_supervised_batch(&[blank(8, 8)]), Err(Error::MissingClean(0))));
    }
}
