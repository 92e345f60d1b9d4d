//! Browser bindings. Each export wraps a plain function returning
//! `Result<_, String>` so the logic is testable off the browser.

use hs3::segmetrics::{ConfusionMatrix, DEFAULT_IGNORE_INDEX};
use hs3::synthdata::{render_scene, SceneSpec};
use hs3::tradeoff::{build_tradeoff_curve, select, selector_line, ReferencePoint, SelectorConfig};
use serde_json::json;
use wasm_bindgen::prelude::*;

fn parse(csv: &str) -> Result<ConfusionMatrix, String> {
    ConfusionMatrix::from_csv(csv).map(|(_, c)| c).map_err(|e| e.to_string())
}

/// mIoU of a confusion matrix given as CSV text.
pub fn miou_of(csv: &str) -> Result<f64, String> {
    parse(csv)?.metrics().miou.ok_or_else(|| "confusion matrix is empty".to_string())
}

/// Trade-off curve for one stage plus the chosen class count.
///
/// `mode` is `"ratio"` or `"theta"`; `theta` is ignored for ratio mode.
/// The result is JSON: `{curve, selection, line}`.
pub fn analyse_stage(csv: &str, miou_ref: f64, mode: &str, theta: f64, seed: u64) -> Result<String, String> {
    let conf = parse(csv)?;
    let curve = build_tradeoff_curve(&conf, seed).map_err(|e| e.to_string())?;
    let reference = ReferencePoint::new(conf.num_classes(), miou_ref).map_err(|e| e.to_string())?;
    let cfg = match mode {
        "ratio" => SelectorConfig::ratio(),
        "theta" => SelectorConfig::theta(theta),
        other => return Err(format!("unknown selector `{other}`")),
    };
    let sel = select(&curve, &reference, &cfg).map_err(|e| e.to_string())?;
    let k_min = curve.points.first().map_or(1.0, |p| p.k as f64);
    let points: Vec<_> = curve
        .points
        .iter()
        .map(|p| json!({"k": p.k, "miou": p.miou, "assignment": p.map.assignment()}))
        .collect();
    let line: Vec<_> = selector_line(&reference, &cfg, k_min).into_iter().map(|(k, m)| [k, m]).collect();
    Ok(json!({
        "num_classes": conf.num_classes(),
        "curve": points,
        "selection": {
            "k": sel.k,
            "assignment": sel.map.assignment(),
            "crossing_k": sel.crossing_k,
            "clamped": sel.clamped,
        },
        "line": line,
    })
    .to_string())
}

/// Scene `index` of the default generator with the given seed and noise,
/// as RGBA rows: the image on the left, its label map on the right.
pub fn scene_rgba(seed: u64, index: usize, noise: f64) -> Result<Vec<u8>, String> {
    let spec = SceneSpec { seed, noise, ..SceneSpec::default() };
    spec.validate().map_err(|e| e.to_string())?;
    let (sample, _) = render_scene(&spec, index);
    let (h, w) = (spec.height, spec.width);
    let mut out = vec![0u8; h * 2 * w * 4];
    let byte = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            let left = (y * 2 * w + x) * 4;
            let right = left + w * 4;
            for c in 0..3 {
                out[left + c] = byte(sample.image[p * 3 + c] as f64);
            }
            out[left + 3] = 255;
            let rgb = label_colour(&spec, sample.labels[p]);
            out[right..right + 3].copy_from_slice(&rgb.map(byte));
            out[right + 3] = 255;
        }
    }
    Ok(out)
}

/// Group hue, darker for later classes of the group.
fn label_colour(spec: &SceneSpec, label: u8) -> [f64; 3] {
    if label == DEFAULT_IGNORE_INDEX {
        return [0.0; 3];
    }
    let class = label as usize;
    let group = class / spec.classes_per_group;
    let shade = 1.0 - 0.6 * (class % spec.classes_per_group) as f64 / spec.classes_per_group as f64;
    spec.group_colour(group).map(|v| ((v - 0.5) * 4.0 + 0.5).clamp(0.0, 1.0) * shade)
}

#[wasm_bindgen(js_name = miou)]
pub fn miou_js(csv: &str) -> Result<f64, JsError> {
    miou_of(csv).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = analyseStage)]
pub fn analyse_stage_js(csv: &str, miou_ref: f64, mode: &str, theta: f64, seed: u32) -> Result<String, JsError> {
    analyse_stage(csv, miou_ref, mode, theta, seed as u64).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = sceneRgba)]
pub fn scene_rgba_js(seed: u32, index: u32, noise: f64) -> Result<Vec<u8>, JsError> {
    scene_rgba(seed as u64, index as usize, noise).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = sceneSize)]
pub fn scene_size() -> Vec<u32> {
    let spec = SceneSpec::default();
    vec![spec.width as u32 * 2, spec.height as u32]
}
