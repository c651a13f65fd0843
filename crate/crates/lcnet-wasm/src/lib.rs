//! Browser bindings for the interactive demo page.
//!
//! Three operations are exposed: per-layer cost analysis for any
//! scale/mask combination, repeated forward passes on a held model for
//! in-browser latency measurement (the page does the timing with
//! `performance.now()`, since wasm has no monotonic clock of its own),
//! and learning-rate schedule curves. Everything returns plain JSON
//! strings; the page stays framework-free.
//!
//! Errors travel as `String` internally and only become `JsValue` at the
//! exported boundary: constructing a `JsValue` aborts on non-wasm
//! targets, and the internals are unit-tested on the host.
//!
//! Build: `rustup target add wasm32-unknown-unknown`, then
//! `./build-demo.sh` from the repository root (requires wasm-bindgen-cli).

use wasm_bindgen::prelude::*;

use lcnet_core::analysis::summarize;
use lcnet_core::arch::{build_model, ForwardOpts, LcnetConfig, Model};
use lcnet_core::ops::Mode;
use lcnet_core::tensor::Tensor;
use lcnet_core::train::{lr_at, ScheduleCfg};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

fn config_from(scale: f32, se_mask: &str, kernel_mask: &str, classes: u32) -> LcnetConfig {
    LcnetConfig {
        scale,
        se_mask: se_mask.to_string(),
        kernel_mask: kernel_mask.to_string(),
        num_classes: classes as usize,
        ..Default::default()
    }
}

fn analyze_impl(
    scale: f32,
    se_mask: &str,
    kernel_mask: &str,
    hw: u32,
) -> Result<String, String> {
    let cfg = config_from(scale, se_mask, kernel_mask, 1000);
    let report = summarize(&cfg, (hw as usize, hw as usize)).map_err(|e| e.to_string())?;
    let rows: Vec<_> = report
        .rows
        .iter()
        .map(|r| {
            json!({
                "label": r.label,
                "shape": r.out_shape,
                "params": r.params,
                "macs": r.macs,
            })
        })
        .collect();
    Ok(json!({
        "rows": rows,
        "total_params": report.total_params,
        "total_macs": report.total_macs,
    })
    .to_string())
}

/// Per-layer cost report as JSON:
/// `{ rows: [{label, shape, params, macs}], total_params, total_macs }`.
#[wasm_bindgen]
pub fn analyze_json(
    scale: f32,
    se_mask: &str,
    kernel_mask: &str,
    hw: u32,
) -> Result<String, JsValue> {
    analyze_impl(scale, se_mask, kernel_mask, hw).map_err(|e| JsValue::from_str(&e))
}

fn lr_curve_impl(
    base_lr: f32,
    warmup_epochs: u32,
    total_epochs: u32,
    steps_per_epoch: u32,
) -> Result<String, String> {
    let cfg = ScheduleCfg::new(
        base_lr,
        warmup_epochs as usize,
        total_epochs as usize,
        steps_per_epoch as usize,
    )
    .map_err(|e| e.to_string())?;
    let total = cfg.total_steps();
    let stride = total.div_ceil(512).max(1);
    let mut steps = Vec::new();
    let mut lrs = Vec::new();
    let mut step = 0;
    while step < total {
        steps.push(step);
        lrs.push(lr_at(&cfg, step).map_err(|e| e.to_string())?);
        step += stride;
    }
    // always include the final step so the decay tail is visible
    if *steps.last().unwrap() != total - 1 {
        steps.push(total - 1);
        lrs.push(lr_at(&cfg, total - 1).map_err(|e| e.to_string())?);
    }
    Ok(json!({ "steps": steps, "lr": lrs }).to_string())
}

/// Learning-rate schedule samples as JSON
/// `{ steps: [..], lr: [..] }`, downsampled to at most 512 points.
#[wasm_bindgen]
pub fn lr_curve_json(
    base_lr: f32,
    warmup_epochs: u32,
    total_epochs: u32,
    steps_per_epoch: u32,
) -> Result<String, JsValue> {
    lr_curve_impl(base_lr, warmup_epochs, total_epochs, steps_per_epoch)
        .map_err(|e| JsValue::from_str(&e))
}

/// A built model held across calls so the page can time repeated forward
/// passes without paying construction cost.
#[wasm_bindgen]
pub struct DemoModel {
    model: Model,
    input: Tensor,
    classes: usize,
}

impl DemoModel {
    fn new_impl(
        scale: f32,
        se_mask: &str,
        kernel_mask: &str,
        hw: u32,
        seed: u32,
    ) -> Result<DemoModel, String> {
        let classes = 1000usize;
        let cfg = config_from(scale, se_mask, kernel_mask, classes as u32);
        let model = build_model(&cfg, seed as u64).map_err(|e| e.to_string())?;
        let hw = hw as usize;
        let mut rng = ChaCha8Rng::seed_from_u64(seed as u64);
        let input = Tensor::from_vec(
            &[1, 3, hw, hw],
            (0..3 * hw * hw).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .map_err(|e| e.to_string())?;
        Ok(DemoModel {
            model,
            input,
            classes,
        })
    }

    fn infer_once_impl(&self) -> Result<f32, String> {
        let probs = self
            .model
            .forward_opts(&self.input, Mode::Infer, &ForwardOpts::default())
            .map_err(|e| e.to_string())?;
        Ok(probs.data().iter().fold(0.0f32, |a, &b| a.max(b)))
    }

    fn top_probs_impl(&self) -> Result<String, String> {
        let probs = self
            .model
            .forward_opts(&self.input, Mode::Infer, &ForwardOpts::default())
            .map_err(|e| e.to_string())?;
        let mut ranked: Vec<(usize, f32)> =
            probs.data()[..self.classes].iter().copied().enumerate().collect();
        ranked.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        let top: Vec<_> = ranked
            .into_iter()
            .take(5)
            .map(|(class, p)| json!({ "class": class, "p": p }))
            .collect();
        Ok(json!(top).to_string())
    }

    fn macs_impl(&self) -> Result<f64, String> {
        let (h, w) = (self.input.dims()[2], self.input.dims()[3]);
        lcnet_core::analysis::count_macs(&self.model, (h, w))
            .map(|m| m as f64)
            .map_err(|e| e.to_string())
    }
}

#[wasm_bindgen]
impl DemoModel {
    /// Builds the model and a fixed random input batch of one.
    #[wasm_bindgen(constructor)]
    pub fn new(
        scale: f32,
        se_mask: &str,
        kernel_mask: &str,
        hw: u32,
        seed: u32,
    ) -> Result<DemoModel, JsValue> {
        Self::new_impl(scale, se_mask, kernel_mask, hw, seed).map_err(|e| JsValue::from_str(&e))
    }

    /// One inference pass; returns the top-1 probability so the call
    /// cannot be optimized away. The page wraps this in its own timer.
    pub fn infer_once(&self) -> Result<f32, JsValue> {
        self.infer_once_impl().map_err(|e| JsValue::from_str(&e))
    }

    /// Top-5 (class, probability) pairs for the held input, as JSON.
    pub fn top_probs_json(&self) -> Result<String, JsValue> {
        self.top_probs_impl().map_err(|e| JsValue::from_str(&e))
    }

    /// Per-sample MAC count of the held configuration, for ms/GMAC readouts.
    pub fn macs(&self) -> Result<f64, JsValue> {
        self.macs_impl().map_err(|e| JsValue::from_str(&e))
    }
}
