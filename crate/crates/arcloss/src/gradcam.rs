//! Gradient-weighted class activation maps over the conv layer feeding the
//! global average pool, with PNG overlay export.

use crate::error::{Error, Result};
use crate::model::Model;
use crate::tape::{Mode, Tape};
use crate::tensor::Tensor;
use crate::util::{stream_rng, Stream};
use std::io::Write;
use std::path::Path;

/// Spatial importance map, normalized to [0, 1] (max = 1 unless all zero).
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    pub values: Vec<f64>,
    pub height: usize,
    pub width: usize,
    pub source_layer: String,
    pub class_index: usize,
}

impl Heatmap {
    pub fn at(&self, y: usize, x: usize) -> f64 {
        self.values[y * self.width + x]
    }
}

/// Raw CAM before upsampling: per-channel weights are the spatial means of
/// the class-logit gradient; the map is the ReLU of the weighted activation
/// sum.
pub fn cam_map(activations: &Tensor, grads: &Tensor) -> Result<Vec<f64>> {
    let (n, k, h, w) = activations.dims4()?;
    if n != 1 || grads.shape != activations.shape {
        return Err(Error::Shape(format!(
            "cam_map wants matching single-image tensors, got {:?} and {:?}",
            activations.shape, grads.shape
        )));
    }
    let hw = h * w;
    let mut map = vec![0.0f64; hw];
    for ch in 0..k {
        let gplane = &grads.data[ch * hw..(ch + 1) * hw];
        let weight = gplane.iter().sum::<f64>() / hw as f64;
        let aplane = &activations.data[ch * hw..(ch + 1) * hw];
        for (m, a) in map.iter_mut().zip(aplane) {
            *m += weight * a;
        }
    }
    for m in &mut map {
        *m = m.max(0.0);
    }
    Ok(map)
}

/// Bilinear resize of an h x w grid to oh x ow (corner-aligned mapping).
pub fn bilinear_upsample(src: &[f64], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    let mut out = vec![0.0f64; oh * ow];
    let ys = if oh > 1 { (h - 1) as f64 / (oh - 1) as f64 } else { 0.0 };
    let xs = if ow > 1 { (w - 1) as f64 / (ow - 1) as f64 } else { 0.0 };
    for oy in 0..oh {
        let fy = oy as f64 * ys;
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let dy = fy - y0 as f64;
        for ox in 0..ow {
            let fx = ox as f64 * xs;
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let dx = fx - x0 as f64;
            let top = src[y0 * w + x0] * (1.0 - dx) + src[y0 * w + x1] * dx;
            let bot = src[y1 * w + x0] * (1.0 - dx) + src[y1 * w + x1] * dx;
            out[oy * ow + ox] = top * (1.0 - dy) + bot * dy;
        }
    }
    out
}

/// Class activation map for one image (CHW or 1xCHW). The target defaults to
/// the predicted class. Eval mode throughout.
pub fn gradcam(model: &mut Model, image: &Tensor, target_class: Option<usize>) -> Result<Heatmap> {
    let batch = match image.rank() {
        3 => Tensor::from_vec(
            &[1, image.shape[0], image.shape[1], image.shape[2]],
            image.data.clone(),
        )?,
        4 if image.shape[0] == 1 => image.clone(),
        _ => {
            return Err(Error::Shape(format!(
                "gradcam wants a single CHW image, got {:?}",
                image.shape
            )))
        }
    };
    let (_, h, w) = model.spec.input;
    let mut tape = Tape::new();
    let mut rng = stream_rng(0, Stream::Noise, u64::MAX, 1); // unused in eval mode
    let fp = model.forward_on(&mut tape, &batch, Mode::Eval, &mut rng)?;
    let logits = tape.value(fp.logits);
    let predicted = crate::geometry::predicted_labels(logits)?[0];
    let target = target_class.unwrap_or(predicted);
    if target >= model.spec.num_classes {
        return Err(Error::Config(format!(
            "class index {target} out of range [0, {})",
            model.spec.num_classes
        )));
    }
    let scalar = tape.pick(fp.logits, target)?;
    let grads = tape.backward(scalar)?;
    let act = tape.value(fp.conv_activations);
    let raw = cam_map(act, grads.get(fp.conv_activations))?;
    let (gh, gw) = (act.shape[2], act.shape[3]);
    let mut up = bilinear_upsample(&raw, gh, gw, h, w);
    let max = up.iter().cloned().fold(0.0f64, f64::max);
    if max > 0.0 {
        for v in &mut up {
            *v /= max;
        }
    }
    Ok(Heatmap {
        values: up,
        height: h,
        width: w,
        source_layer: format!("{}:pre-pool-activations", model.spec.name),
        class_index: target,
    })
}

/// Piecewise-linear blue -> cyan -> green -> yellow -> red map (anchors at
/// 0, 0.25, 0.5, 0.75, 1).
pub fn colormap(v: f64) -> [f64; 3] {
    const ANCHORS: [[f64; 3]; 5] = [
        [0.0, 0.0, 1.0],
        [0.0, 1.0, 1.0],
        [0.0, 1.0, 0.0],
        [1.0, 1.0, 0.0],
        [1.0, 0.0, 0.0],
    ];
    let v = v.clamp(0.0, 1.0) * 4.0;
    let i = (v.floor() as usize).min(3);
    let t = v - i as f64;
    let (a, b) = (ANCHORS[i], ANCHORS[i + 1]);
    [
        a[0] + (b[0] - a[0]) * t,
        a[1] + (b[1] - a[1]) * t,
        a[2] + (b[2] - a[2]) * t,
    ]
}

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Blend pixel: 0.5 * image + 0.5 * colormap(heat).
pub fn blend_pixel(image_rgb: [f64; 3], heat: f64) -> [u8; 3] {
    let c = colormap(heat);
    [
        to_byte(0.5 * image_rgb[0] + 0.5 * c[0]),
        to_byte(0.5 * image_rgb[1] + 0.5 * c[1]),
        to_byte(0.5 * image_rgb[2] + 0.5 * c[2]),
    ]
}

fn image_rgb_at(image: &Tensor, y: usize, x: usize) -> [f64; 3] {
    let (c, h, w) = (image.shape[0], image.shape[1], image.shape[2]);
    if c == 3 {
        [
            image.data[y * w + x],
            image.data[h * w + y * w + x],
            image.data[2 * h * w + y * w + x],
        ]
    } else {
        let g = image.data[y * w + x];
        [g, g, g]
    }
}

/// Write the 0.5/0.5 overlay of a display-range ([0,1]) CHW image and a
/// heatmap as a PNG.
pub fn export_overlay(heatmap: &Heatmap, image: &Tensor, path: &Path) -> Result<()> {
    if image.rank() != 3 || !matches!(image.shape[0], 1 | 3) {
        return Err(Error::Shape(format!("overlay wants a CHW image, got {:?}", image.shape)));
    }
    if (image.shape[1], image.shape[2]) != (heatmap.height, heatmap.width) {
        return Err(Error::Shape(format!(
            "heatmap {}x{} vs image {}x{}",
            heatmap.height, heatmap.width, image.shape[1], image.shape[2]
        )));
    }
    let mut img = image::RgbImage::new(heatmap.width as u32, heatmap.height as u32);
    for y in 0..heatmap.height {
        for x in 0..heatmap.width {
            let px = blend_pixel(image_rgb_at(image, y, x), heatmap.at(y, x));
            img.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    img.save(path)?;
    Ok(())
}

/// Plain heatmap as a PNG through the colormap (no underlying image).
pub fn export_heatmap_png(heatmap: &Heatmap, path: &Path) -> Result<()> {
    let mut img = image::RgbImage::new(heatmap.width as u32, heatmap.height as u32);
    for y in 0..heatmap.height {
        for x in 0..heatmap.width {
            let c = colormap(heatmap.at(y, x));
            img.put_pixel(
                x as u32,
                y as u32,
                image::Rgb([to_byte(c[0]), to_byte(c[1]), to_byte(c[2])]),
            );
        }
    }
    img.save(path)?;
    Ok(())
}

/// Raw heatmap values as CSV rows (one row per scanline).
pub fn export_heatmap_csv(heatmap: &Heatmap, path: &Path) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for row in heatmap.values.chunks(heatmap.width) {
        let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        writeln!(out, "{}", line.join(","))?;
    }
    Ok(())
}

/// Fraction of total map mass inside the brightest decile of pixels; a
/// side-by-side compactness statistic with no pass threshold attached.
pub fn top_decile_mass(heatmap: &Heatmap) -> f64 {
    let total: f64 = heatmap.values.iter().sum();
    if total <= 0.0 {
        return 0.0;
    }
    let mut sorted = heatmap.values.clone();
    sorted.sort_by(|a, b| b.partial_cmp(a).expect("heatmap values are finite"));
    let top = (sorted.len() / 10).max(1);
    sorted[..top].iter().sum::<f64>() / total
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::GradCheck;
    use crate::kernels::Padding;
    use crate::model::{ArchitectureSpec, LayerKind};

    fn tiny_model(seed: u64) -> Model {
        let spec = ArchitectureSpec {
            name: "tiny".into(),
            input: (1, 8, 8),
            layers: vec![
                LayerKind::Conv { out_channels: 6, kernel: 3, padding: Padding::Same },
                LayerKind::LeakyRelu { alpha: 0.1 },
                LayerKind::MaxPool,
                LayerKind::Conv { out_channels: 4, kernel: 1, padding: Padding::Same },
                LayerKind::LeakyRelu { alpha: 0.1 },
                LayerKind::GlobalAvgPool,
                LayerKind::Dense { out: 3 },
            ],
            embed_dim: 4,
            num_classes: 3,
        };
        Model::build(spec, seed).unwrap()
    }

    fn sample_image(seed: u64) -> Tensor {
        let mut rng = stream_rng(seed, Stream::Export, 3, 0);
        Tensor::randn(&[1, 8, 8], 0.5, &mut rng)
    }

    #[test]
    fn uniform_positive_single_channel_gives_flat_map() {
        // one channel, constant activation, constant positive gradient:
        // weighted sum is constant, so the normalized map is exactly 1
        let act = Tensor::filled(&[1, 1, 3, 3], 2.0);
        let grads = Tensor::filled(&[1, 1, 3, 3], 0.25);
        let raw = cam_map(&act, &grads).unwrap();
        assert!(raw.iter().all(|&v| (v - 0.5).abs() < 1e-15));
        let up = bilinear_upsample(&raw, 3, 3, 6, 6);
        let max = up.iter().cloned().fold(0.0f64, f64::max);
        assert!(up.iter().all(|&v| (v / max - 1.0).abs() < 1e-12));
    }

    #[test]
    fn negative_weighted_sum_is_clipped_to_zero() {
        let act = Tensor::filled(&[1, 1, 2, 2], 1.0);
        let grads = Tensor::filled(&[1, 1, 2, 2], -1.0);
        let raw = cam_map(&act, &grads).unwrap();
        assert_eq!(raw, vec![0.0; 4]);
    }

    #[test]
    fn bilinear_upsample_known_values() {
        // 2x2 corners interpolate linearly to 3x3
        let up = bilinear_upsample(&[0.0, 1.0, 2.0, 3.0], 2, 2, 3, 3);
        let want = [0.0, 0.5, 1.0, 1.0, 1.5, 2.0, 2.0, 2.5, 3.0];
        for (g, w) in up.iter().zip(&want) {
            assert!((g - w).abs() < 1e-12, "{up:?}");
        }
        // same-size resize is the identity
        let id = bilinear_upsample(&[1.0, 2.0, 3.0, 4.0], 2, 2, 2, 2);
        assert_eq!(id, vec![1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn heatmap_contract_shape_range_max() {
        let mut model = tiny_model(1);
        let hm = gradcam(&mut model, &sample_image(1), None).unwrap();
        assert_eq!((hm.height, hm.width), (8, 8));
        assert_eq!(hm.values.len(), 64);
        assert!(hm.values.iter().all(|&v| (0.0..=1.0).contains(&v)));
        let max = hm.values.iter().cloned().fold(0.0f64, f64::max);
        assert!(max == 1.0 || hm.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn heatmap_deterministic_and_scale_invariant() {
        let mut model = tiny_model(2);
        let img = sample_image(2);
        let a = gradcam(&mut model, &img, Some(1)).unwrap();
        let b = gradcam(&mut model, &img, Some(1)).unwrap();
        assert_eq!(a, b);
        // positive scaling of the classifier scales logit gradients but not
        // the normalized map
        let n = model.params.len();
        for p in &mut model.params[n - 2..] {
            for v in &mut p.value.data {
                *v *= 3.0;
            }
        }
        let c = gradcam(&mut model, &img, Some(1)).unwrap();
        for (x, y) in a.values.iter().zip(&c.values) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn gradcam_rejects_bad_class() {
        let mut model = tiny_model(3);
        assert!(gradcam(&mut model, &sample_image(3), Some(99)).is_err());
    }

    #[test]
    fn eval_backward_matches_finite_differences_on_tiny_model() {
        // d logit_c / d input via the tape vs central differences
        let mut model = tiny_model(4);
        let img = sample_image(4);
        let target = 2usize;
        let forward = |data: &[f64]| {
            let batch = Tensor::from_vec(&[1, 1, 8, 8], data.to_vec()).unwrap();
            let mut tape = Tape::new();
            let mut rng = stream_rng(0, Stream::Noise, 0, 0);
            let fp = model.forward_on(&mut tape, &batch, Mode::Eval, &mut rng).unwrap();
            tape.value(fp.logits).data[target]
        };
        let mut model2 = tiny_model(4);
        let batch = Tensor::from_vec(&[1, 1, 8, 8], img.data.clone()).unwrap();
        let mut tape = Tape::new();
        let mut rng = stream_rng(0, Stream::Noise, 0, 0);
        let fp = model2.forward_on(&mut tape, &batch, Mode::Eval, &mut rng).unwrap();
        let input_node = crate::tape::NodeId(0);
        let scalar = tape.pick(fp.logits, target).unwrap();
        let grads = tape.backward(scalar).unwrap();
        GradCheck::default()
            .check_coords(
                forward,
                &img.data,
                &grads.get(input_node).data,
                &(0..64).step_by(5).collect::<Vec<_>>(),
                "gradcam input grad",
            )
            .unwrap_or_else(|e| panic!("{e}"));
    }

    #[test]
    fn colormap_endpoints_and_monotone_red() {
        assert_eq!(colormap(0.0), [0.0, 0.0, 1.0]);
        assert_eq!(colormap(1.0), [1.0, 0.0, 0.0]);
        assert_eq!(colormap(0.5), [0.0, 1.0, 0.0]);
        let mut last = -1.0;
        for i in 0..=10 {
            let c = colormap(i as f64 * 0.1);
            // red channel never decreases along the ramp
            assert!(c[0] >= last - 1e-12);
            last = c[0];
        }
    }

    #[test]
    fn blend_arithmetic_hand_case() {
        // gray 0.4 with heat 0: 0.5*0.4 + 0.5*blue
        let px = blend_pixel([0.4, 0.4, 0.4], 0.0);
        assert_eq!(px, [51, 51, 179]); // (0.2, 0.2, 0.7) * 255 rounded
        let px = blend_pixel([1.0, 1.0, 1.0], 1.0);
        assert_eq!(px, [255, 128, 128]); // (1.0, 0.5, 0.5)
    }

    #[test]
    fn overlay_zero_heatmap_is_dimmed_blue_blend() {
        let dir = tempfile::tempdir().unwrap();
        let img = Tensor::filled(&[1, 2, 2], 0.4);
        let hm = Heatmap {
            values: vec![0.0; 4],
            height: 2,
            width: 2,
            source_layer: "t".into(),
            class_index: 0,
        };
        let path = dir.path().join("o.png");
        export_overlay(&hm, &img, &path).unwrap();
        let loaded = image::open(&path).unwrap().to_rgb8();
        for px in loaded.pixels() {
            assert_eq!(px.0, [51, 51, 179]);
        }
    }

    #[test]
    fn overlay_png_byte_identical_across_runs() {
        let dir = tempfile::tempdir().unwrap();
        let mut model = tiny_model(5);
        let img_raw = sample_image(5);
        // display copy clamped into [0,1]
        let display = Tensor {
            shape: img_raw.shape.clone(),
            data: img_raw.data.iter().map(|v| v.clamp(0.0, 1.0)).collect(),
        };
        let hm = gradcam(&mut model, &img_raw, None).unwrap();
        let (p1, p2) = (dir.path().join("a.png"), dir.path().join("b.png"));
        export_overlay(&hm, &display, &p1).unwrap();
        let hm2 = gradcam(&mut model, &img_raw, None).unwrap();
        export_overlay(&hm2, &display, &p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn top_decile_mass_bounds() {
        let flat = Heatmap {
            values: vec![1.0; 100],
            height: 10,
            width: 10,
            source_layer: "t".into(),
            class_index: 0,
        };
        assert!((top_decile_mass(&flat) - 0.1).abs() < 1e-12);
        let mut peaky = flat.clone();
        peaky.values = vec![0.0; 100];
        peaky.values[3] = 1.0;
        assert_eq!(top_decile_mass(&peaky), 1.0);
    }
}
