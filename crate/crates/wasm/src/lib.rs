//! Browser bindings: synthesize a frame, count a model's cost, watch a
//! rotation solve. Every export returns a JSON string.

use rbnn_core::datagen::{gen_frame, GenConfig, ModClass, FRAME_LEN};
use rbnn_core::model::{analyze, ArchSpec, CountingRules, ModelVariant};
use rbnn_core::rng::{normal_tensor, stream};
use rbnn_core::rotation::{learn_rotation, RotationState};
use serde_json::json;
use wasm_bindgen::prelude::*;

/// Largest weight tensor the demo will rotate.
const MAX_ROTATION_WEIGHTS: usize = 1 << 16;

fn frame_json(class: &str, snr_db: i16, seed: u64, index: u32) -> Result<String, String> {
    let class: ModClass = class.parse().map_err(|e: rbnn_core::Error| e.to_string())?;
    let cfg = GenConfig {
        classes: vec![class],
        snrs: vec![snr_db],
        frames_per_cell: 1,
        seed,
        ..GenConfig::default()
    };
    let frame = gen_frame(&cfg, 0, snr_db, index as usize);
    let (i, q) = frame.iq.split_at(FRAME_LEN);
    Ok(json!({ "class": class.name(), "snr_db": snr_db, "i": i, "q": q }).to_string())
}

fn complexity_json(
    variant: &str,
    classes: u32,
    width: u32,
    include_bn: bool,
) -> Result<String, String> {
    let variant: ModelVariant = variant
        .parse()
        .map_err(|e: rbnn_core::Error| e.to_string())?;
    if classes == 0 || width == 0 {
        return Err("classes and width must be positive".into());
    }
    let arch = ArchSpec::with_base_width(width as usize, classes as usize);
    let report =
        analyze(&arch, variant, CountingRules::with_bn(include_bn)).map_err(|e| e.to_string())?;
    let mut v = serde_json::to_value(&report).map_err(|e| e.to_string())?;
    v["params"] = report.params().into();
    v["memory_mb"] = report.memory_mb().into();
    Ok(v.to_string())
}

fn rotation_json(c_out: u32, c_in: u32, seed: u64) -> Result<String, String> {
    let shape = [c_out as usize, c_in as usize, 3, 3];
    let n: usize = shape.iter().product();
    if n == 0 || n > MAX_ROTATION_WEIGHTS {
        return Err(format!(
            "weight count {n} outside 1..={MAX_ROTATION_WEIGHTS}"
        ));
    }
    let w = normal_tensor(&shape, &mut stream(seed, &[]));
    let out = learn_rotation(&w, &RotationState::identity(n)).map_err(|e| e.to_string())?;
    Ok(json!({
        "n1": out.state.n1,
        "n2": out.state.n2,
        "objectives": out.objectives,
        "cycles": out.cycles,
        "cos_phi_start": out.cos_phi_start,
        "cos_phi_end": out.cos_phi_end,
    })
    .to_string())
}

/// I and Q rails of one synthesized frame.
#[wasm_bindgen]
pub fn frame_iq(class: &str, snr_db: i16, seed: u64, index: u32) -> Result<String, JsValue> {
    frame_json(class, snr_db, seed, index).map_err(|e| JsValue::from_str(&e))
}

/// Per-layer and total counts for a variant at a given base width.
#[wasm_bindgen]
pub fn complexity(
    variant: &str,
    classes: u32,
    width: u32,
    include_bn: bool,
) -> Result<String, JsValue> {
    complexity_json(variant, classes, width, include_bn).map_err(|e| JsValue::from_str(&e))
}

/// Objective after every step of a rotation solve on random 3x3 conv weights.
#[wasm_bindgen]
pub fn rotation_trace(c_out: u32, c_in: u32, seed: u64) -> Result<String, JsValue> {
    rotation_json(c_out, c_in, seed).map_err(|e| JsValue::from_str(&e))
}
