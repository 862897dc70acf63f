//! WebAssembly bindings for a static demo page.
//!
//! The plain functions are the tested surface; the `#[wasm_bindgen]` wrappers
//! only convert errors into JavaScript exceptions.

use std::io::Cursor;

use image::{Rgb, RgbImage};
use malaria_core::data::{apply_augment, preprocess_image, AugmentConfig, AugmentParams, Planes};
use malaria_core::eval::{report, ConfusionMatrix};
use malaria_core::{Architecture, ModelGraph, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use wasm_bindgen::prelude::*;

fn to_png(t: &Tensor<f32>) -> Result<Vec<u8>, String> {
    let planes = Planes::from_tensor(t);
    let (h, w) = (planes.height, planes.width);
    let img = RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px = |c| (planes.at(c, y as usize, x as usize).clamp(0.0, 1.0) * 255.0).round() as u8;
        Rgb([px(0), px(1), px(2)])
    });
    let mut out = Cursor::new(Vec::new());
    img.write_to(&mut out, image::ImageFormat::Png)
        .map_err(|e| e.to_string())?;
    Ok(out.into_inner())
}

/// Preprocess a PNG, draw one augmentation with `seed` and return it as PNG.
pub fn preview_augment(
    png: &[u8],
    seed: u64,
    cfg: &AugmentConfig,
) -> Result<(Vec<u8>, AugmentParams), String> {
    cfg.validate().map_err(|e| e.to_string())?;
    let input = preprocess_image(png).map_err(|e| e.to_string())?;
    let params = cfg.sample(&mut ChaCha8Rng::seed_from_u64(seed));
    let out = apply_augment(&Planes::from_tensor(&input), &params).to_tensor();
    Ok((to_png(&out)?, params))
}

/// Report for a 2×2 confusion matrix `[[tp, fn], [fp, tn]]` as
/// `{"report": …, "table": "…"}`.
pub fn metrics_json(counts: [u64; 4]) -> Result<String, String> {
    let [tp, fn_, fp, tn] = counts;
    let cm = ConfusionMatrix::from_counts(vec![vec![tp, fn_], vec![fp, tn]]);
    let r = report(&cm).map_err(|e| e.to_string())?;
    let v = serde_json::json!({"report": r, "table": r.to_table()});
    Ok(v.to_string())
}

/// Parameter count and per-layer output shapes for one 224×224 image.
pub fn architecture_json(width_divisor: usize) -> Result<String, String> {
    if width_divisor == 0 {
        return Err("width divisor must be >= 1".into());
    }
    let model = ModelGraph::<f32>::with_architecture(Architecture::narrow(width_divisor), 0)
        .map_err(|e| e.to_string())?;
    let trace = model
        .shape_trace(&Tensor::zeros(&[1, 3, 224, 224]))
        .map_err(|e| e.to_string())?;
    let layers: Vec<_> = trace
        .iter()
        .map(|(name, shape)| serde_json::json!({"name": name, "shape": shape}))
        .collect();
    let v = serde_json::json!({
        "architecture": model.architecture(),
        "parameters": model.parameter_count(),
        "layers": layers,
    });
    Ok(v.to_string())
}

#[wasm_bindgen]
pub struct AugmentPreview {
    png: Vec<u8>,
    params: AugmentParams,
}

#[wasm_bindgen]
impl AugmentPreview {
    #[wasm_bindgen(getter)]
    pub fn png(&self) -> Vec<u8> {
        self.png.clone()
    }

    #[wasm_bindgen(getter, js_name = angleDeg)]
    pub fn angle_deg(&self) -> f64 {
        self.params.angle_deg
    }

    #[wasm_bindgen(getter)]
    pub fn scale(&self) -> f64 {
        self.params.scale
    }

    #[wasm_bindgen(getter)]
    pub fn flip(&self) -> bool {
        self.params.flip
    }
}

#[wasm_bindgen(js_name = augmentPreview)]
pub fn augment_preview(
    png: &[u8],
    seed: u64,
    rotation_deg: f64,
    zoom_min: f64,
    zoom_max: f64,
    hflip_prob: f64,
) -> Result<AugmentPreview, JsError> {
    let cfg = AugmentConfig {
        rotation_deg,
        zoom_range: [zoom_min, zoom_max],
        hflip_prob,
    };
    let (png, params) = preview_augment(png, seed, &cfg).map_err(|e| JsError::new(&e))?;
    Ok(AugmentPreview { png, params })
}

#[wasm_bindgen(js_name = metricsReport)]
pub fn metrics_report(tp: u64, fn_: u64, fp: u64, tn: u64) -> Result<String, JsError> {
    metrics_json([tp, fn_, fp, tn]).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = architectureSummary)]
pub fn architecture_summary(width_divisor: usize) -> Result<String, JsError> {
    architecture_json(width_divisor).map_err(|e| JsError::new(&e))
}
