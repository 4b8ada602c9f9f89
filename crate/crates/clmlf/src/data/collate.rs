//! Batch assembly: tokenization, truncation, padding, image decoding and
//! standardization.

use super::{format_input, Example, ImageSource, Vocab, PAD_ID, SEP_ID};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use ndarray::{Array2, Array3, Array4};
use rand::Rng;

/// Collated training unit: `[S, n_max]` token ids and mask, `[S, C, H, W]`
/// standardized images, `[S]` labels.
#[derive(Debug, Clone)]
pub struct Batch<T: Scalar> {
    pub token_ids: Array2<usize>,
    pub text_mask: Array2<u8>,
    pub images: Array4<T>,
    pub labels: Vec<usize>,
}

impl<T: Scalar> Batch<T> {
    pub fn size(&self) -> usize {
        self.labels.len()
    }

    pub fn seq_len(&self) -> usize {
        self.token_ids.ncols()
    }
}

/// Decode one example's image to `[C, H, W]` floats in `[0, 1]`, resized to
/// `image_size`. Multi-image examples have one source drawn uniformly from
/// `rng`; single-image examples consume no randomness.
pub fn decode_image_01<T: Scalar, R: Rng + ?Sized>(
    example: &Example,
    image_size: (usize, usize),
    rng: &mut R,
) -> Result<Array3<T>> {
    let source = match example.images.as_slice() {
        [] => {
            return Err(Error::Image {
                id: example.id.clone(),
                message: "example has no image source".into(),
            })
        }
        [single] => single,
        many => &many[rng.random_range(0..many.len())],
    };
    let (h, w) = image_size;
    let img_err = |message: String| Error::Image {
        id: example.id.clone(),
        message,
    };
    let rgb = match source {
        ImageSource::Path(p) => image::open(p)
            .map_err(|e| img_err(format!("{}: {e}", p.display())))?
            .to_rgb8(),
        ImageSource::Raw {
            height,
            width,
            channels,
            data,
        } => {
            if data.len() != height * width * channels {
                return Err(img_err("raw buffer length mismatch".into()));
            }
            let expanded = match channels {
                3 => data.clone(),
                1 => data.iter().flat_map(|&v| [v, v, v]).collect(),
                c => return Err(img_err(format!("unsupported channel count {c}"))),
            };
            image::RgbImage::from_raw(*width as u32, *height as u32, expanded)
                .ok_or_else(|| img_err("raw buffer does not form an image".into()))?
        }
    };
    let rgb = if rgb.dimensions() == (w as u32, h as u32) {
        rgb
    } else {
        image::imageops::resize(
            &rgb,
            w as u32,
            h as u32,
            image::imageops::FilterType::Triangle,
        )
    };
    let scale = T::from_f64(1.0 / 255.0);
    let mut out = Array3::<T>::zeros((3, h, w));
    for (x, y, pixel) in rgb.enumerate_pixels() {
        for c in 0..3 {
            out[[c, y as usize, x as usize]] = T::from_f64(pixel[c] as f64) * scale;
        }
    }
    Ok(out)
}

/// Fixed mean 0.5 / std 0.5 per channel, mapping `[0,1]` onto `[-1,1]`.
pub fn standardize_image<T: Scalar>(img: &mut Array3<T>) {
    let half = T::from_f64(0.5);
    img.mapv_inplace(|v| (v - half) / half);
}

pub(crate) fn tokenize_to_ids(
    example: &Example,
    vocab: &Vocab,
    max_len: usize,
) -> Result<(Vec<usize>, Vec<u8>)> {
    let formatted = format_input(&example.text, example.aspect.as_deref())?;
    let mut ids: Vec<usize> = formatted.split_whitespace().map(|t| vocab.id(t)).collect();
    if ids.len() > max_len {
        ids.truncate(max_len - 1);
        ids.push(SEP_ID);
    }
    let mut mask = vec![1u8; ids.len()];
    while ids.len() < max_len {
        ids.push(PAD_ID);
        mask.push(0);
    }
    Ok((ids, mask))
}

/// Assemble a batch. Pure given `(examples, vocab, max_len, image_size, rng
/// state)`; the rng is consumed only by multi-image selection.
pub fn collate<T: Scalar, R: Rng + ?Sized>(
    examples: &[Example],
    vocab: &Vocab,
    max_len: usize,
    image_size: (usize, usize),
    rng: &mut R,
) -> Result<Batch<T>> {
    if max_len < 3 {
        return Err(Error::Config("max_len must be at least 3".into()));
    }
    if examples.is_empty() {
        return Err(Error::InvalidInput("cannot collate an empty batch".into()));
    }
    let s = examples.len();
    let (h, w) = image_size;
    let mut token_ids = Array2::<usize>::zeros((s, max_len));
    let mut text_mask = Array2::<u8>::zeros((s, max_len));
    let mut images = Array4::<T>::zeros((s, 3, h, w));
    let mut labels = Vec::with_capacity(s);
    for (i, ex) in examples.iter().enumerate() {
        let (ids, mask) = tokenize_to_ids(ex, vocab, max_len)?;
        for (j, (&id, &m)) in ids.iter().zip(mask.iter()).enumerate() {
            token_ids[[i, j]] = id;
            text_mask[[i, j]] = m;
        }
        let mut img = decode_image_01::<T, R>(ex, image_size, rng)?;
        standardize_image(&mut img);
        images
            .index_axis_mut(ndarray::Axis(0), i)
            .assign(&img.view());
        labels.push(ex.label);
    }
    Ok(Batch {
        token_ids,
        text_mask,
        images,
        labels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{SplitTag, CLS_ID};
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn raw_example(id: &str, text: &str, label: usize) -> Example {
        Example {
            id: id.into(),
            text: text.into(),
            images: vec![ImageSource::Raw {
                height: 8,
                width: 8,
                channels: 3,
                data: vec![128; 8 * 8 * 3],
            }],
            label,
            aspect: None,
        }
    }

    #[test]
    fn shapes_and_padding() {
        let vocab = Vocab::build(["hello world"]);
        let examples = vec![raw_example("a", "hello world", 0), raw_example("b", "hello", 1)];
        let mut rng = ChaCha20Rng::seed_from_u64(0);
        let batch: Batch<f64> = collate(&examples, &vocab, 8, (8, 8), &mut rng).unwrap();
        assert_eq!(batch.token_ids.shape(), [2, 8]);
        assert_eq!(batch.images.shape(), [2, 3, 8, 8]);
        // "[CLS] hello world [SEP]" is 4 tokens; the rest is PAD with mask 0.
        assert_eq!(batch.token_ids[[0, 0]], CLS_ID);
        assert_eq!(batch.text_mask[[0, 0]], 1);
        assert_eq!(batch.text_mask[[0, 3]], 1);
        assert_eq!(batch.text_mask[[0, 4]], 0);
        assert_eq!(batch.token_ids[[0, 4]], PAD_ID);
        assert_eq!(batch.labels, vec![0, 1]);
    }

    #[test]
    fn truncation_preserves_cls_and_final_sep() {
        let long = "t1 t2 t3 t4 t5 t6 t7 t8 t9 t10 t11 t12";
        let vocab = Vocab::build([long]);
        let examples = vec![raw_example("a", long, 0)];
        let mut rng = ChaCha20Rng::seed_from_u64(0);
        let batch: Batch<f64> = collate(&examples, &vocab, 8, (8, 8), &mut rng).unwrap();
        assert_eq!(batch.token_ids[[0, 0]], CLS_ID);
        assert_eq!(batch.token_ids[[0, 7]], SEP_ID);
        assert!(batch.text_mask.row(0).iter().all(|&m| m == 1));
    }

    #[test]
    fn batch_of_32() {
        let vocab = Vocab::build(["x"]);
        let examples: Vec<Example> = (0..32)
            .map(|i| raw_example(&format!("e{i}"), "x", i % 3))
            .collect();
        let mut rng = ChaCha20Rng::seed_from_u64(0);
        let batch: Batch<f32> = collate(&examples, &vocab, 4, (8, 8), &mut rng).unwrap();
        assert_eq!(batch.size(), 32);
    }

    #[test]
    fn unreadable_image_names_the_example() {
        let vocab = Vocab::build(["x"]);
        let examples = vec![Example {
            id: "broken".into(),
            text: "x".into(),
            images: vec![ImageSource::Path("/nonexistent/q.png".into())],
            label: 0,
            aspect: None,
        }];
        let mut rng = ChaCha20Rng::seed_from_u64(0);
        match collate::<f64, _>(&examples, &vocab, 4, (8, 8), &mut rng) {
            Err(Error::Image { id, .. }) => assert_eq!(id, "broken"),
            other => panic!("expected image error, got {other:?}"),
        }
    }

    #[test]
    fn standardization_maps_unit_interval_to_symmetric() {
        let examples = vec![raw_example("a", "x", 0)];
        let vocab = Vocab::build(["x"]);
        let mut rng = ChaCha20Rng::seed_from_u64(0);
        let batch: Batch<f64> = collate(&examples, &vocab, 4, (8, 8), &mut rng).unwrap();
        // 128/255 ~ 0.502; standardized ~ 0.0039.
        let v = batch.images[[0, 0, 0, 0]];
        assert!((v - (128.0 / 255.0 - 0.5) / 0.5).abs() < 1e-12);
    }

    #[test]
    fn collate_is_pure_given_rng_state() {
        let vocab = Vocab::build(["x"]);
        let examples: Vec<Example> = (0..4)
            .map(|i| Example {
                id: format!("m{i}"),
                text: "x".into(),
                images: (0..3)
                    .map(|j| ImageSource::Raw {
                        height: 8,
                        width: 8,
                        channels: 3,
                        data: vec![j as u8 * 100; 8 * 8 * 3],
                    })
                    .collect(),
                label: 0,
                aspect: None,
            })
            .collect();
        let b1: Batch<f64> = collate(
            &examples,
            &vocab,
            4,
            (8, 8),
            &mut ChaCha20Rng::seed_from_u64(7),
        )
        .unwrap();
        let b2: Batch<f64> = collate(
            &examples,
            &vocab,
            4,
            (8, 8),
            &mut ChaCha20Rng::seed_from_u64(7),
        )
        .unwrap();
        assert_eq!(b1.images, b2.images);
        let _ = SplitTag::All;
    }
}
