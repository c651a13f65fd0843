//! Per-layer parameter and multiply-accumulate accounting.
//!
//! Conventions: one MAC per multiply-accumulate in convolutions
//! (`H'*W'*Cout*Cin_per_group*k^2`), the fully connected head (`D*K`) and
//! the two SE transforms (`2*C^2/r`). Batch norm (foldable at inference),
//! activations, pooling and dropout contribute zero MACs. Parameters count
//! conv/FC/SE weights and biases plus BN gamma and beta; BN running
//! statistics are state, not parameters. Counts are per sample (batch
//! size 1).

use crate::arch::{plan, ArchError, Layer, LcnetConfig, Model, Segment};

/// One reporting row: stem, a block, gap, the optional last conv, or fc.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CostRow {
    pub label: String,
    /// Output shape with N = 1, e.g. `[1, 16, 112, 112]` or `[1, 1000]`.
    pub out_shape: Vec<usize>,
    pub params: u64,
    pub macs: u64,
}

/// Per-layer rows rolled up to model totals.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CostReport {
    pub rows: Vec<CostRow>,
    pub total_params: u64,
    pub total_macs: u64,
}

/// Activation state while walking the chain.
#[derive(Clone, Copy)]
enum Shape {
    Spatial { c: usize, h: usize, w: usize },
    Flat { d: usize },
}

impl Shape {
    fn dims(&self) -> Vec<usize> {
        match *self {
            Shape::Spatial { c, h, w } => vec![1, c, h, w],
            Shape::Flat { d } => vec![1, d],
        }
    }
}

/// params and MACs contributed by one layer; advances the shape state.
fn layer_cost(layer: &Layer, shape: &mut Shape) -> (u64, u64) {
    match layer {
        Layer::Conv { desc, .. } => {
            let Shape::Spatial { h, w, .. } = *shape else {
                unreachable!("conv after flatten cannot be planned")
            };
            let (oh, ow) = desc.output_hw(h, w).expect("planned shapes are valid");
            let cin_per_group = if desc.depthwise { 1 } else { desc.in_channels };
            let k2 = (desc.kernel * desc.kernel) as u64;
            let weight = desc.out_channels as u64 * cin_per_group as u64 * k2;
            let bias = if desc.has_bias {
                desc.out_channels as u64
            } else {
                0
            };
            let macs = (oh * ow) as u64 * desc.out_channels as u64 * cin_per_group as u64 * k2;
            *shape = Shape::Spatial {
                c: desc.out_channels,
                h: oh,
                w: ow,
            };
            (weight + bias, macs)
        }
        Layer::BatchNorm { channels, .. } => (2 * *channels as u64, 0),
        Layer::Se {
            channels,
            reduction,
            ..
        } => {
            let c = *channels as u64;
            let mid = c / *reduction as u64;
            let params = mid * c + mid + c * mid + c;
            let macs = 2 * c * mid;
            (params, macs)
        }
        Layer::GlobalAvgPool => {
            if let Shape::Spatial { c, .. } = *shape {
                *shape = Shape::Spatial { c, h: 1, w: 1 };
            }
            (0, 0)
        }
        Layer::Flatten => {
            if let Shape::Spatial { c, h, w } = *shape {
                *shape = Shape::Flat { d: c * h * w };
            }
            (0, 0)
        }
        Layer::FullyConnected {
            in_dim, out_dim, ..
        } => {
            let params = (*out_dim * *in_dim + *out_dim) as u64;
            let macs = (*out_dim * *in_dim) as u64;
            *shape = Shape::Flat { d: *out_dim };
            (params, macs)
        }
        Layer::Activation(_) | Layer::Dropout { .. } => (0, 0),
    }
}

fn validate_hw(input_hw: (usize, usize)) -> Result<(), ArchError> {
    let (h, w) = input_hw;
    if h < 32 || w < 32 || !h.is_multiple_of(32) || !w.is_multiple_of(32) {
        return Err(ArchError::InvalidInput(format!(
            "spatial size {h}x{w} must be >= 32 and divisible by 32"
        )));
    }
    Ok(())
}

fn walk(
    layers: &[Layer],
    segments: &[Segment],
    input_hw: (usize, usize),
) -> Result<CostReport, ArchError> {
    validate_hw(input_hw)?;
    let mut shape = Shape::Spatial {
        c: 3,
        h: input_hw.0,
        w: input_hw.1,
    };
    let mut rows = Vec::with_capacity(segments.len());
    let mut li = 0usize;
    for seg in segments {
        let mut params = 0u64;
        let mut macs = 0u64;
        while li < seg.end {
            let (p, m) = layer_cost(&layers[li], &mut shape);
            params += p;
            macs += m;
            li += 1;
        }
        rows.push(CostRow {
            label: seg.label.clone(),
            out_shape: shape.dims(),
            params,
            macs,
        });
    }
    let total_params = rows.iter().map(|r| r.params).sum();
    let total_macs = rows.iter().map(|r| r.macs).sum();
    Ok(CostReport {
        rows,
        total_params,
        total_macs,
    })
}

/// Total trainable parameter count of a built model.
pub fn count_params(model: &Model) -> u64 {
    let mut shape = Shape::Spatial { c: 3, h: 32, w: 32 };
    model
        .layers()
        .iter()
        .map(|l| layer_cost(l, &mut shape).0)
        .sum()
}

/// Total per-sample MACs at the given input resolution.
pub fn count_macs(model: &Model, input_hw: (usize, usize)) -> Result<u64, ArchError> {
    Ok(walk(model.layers(), model.segments(), input_hw)?.total_macs)
}

/// Full per-layer report for a config, no parameter allocation needed.
pub fn summarize(config: &LcnetConfig, input_hw: (usize, usize)) -> Result<CostReport, ArchError> {
    let (layers, segments, _) = plan(config)?;
    walk(&layers, &segments, input_hw)
}

/// Same report computed from an already-built model.
pub fn summarize_model(model: &Model, input_hw: (usize, usize)) -> Result<CostReport, ArchError> {
    walk(model.layers(), model.segments(), input_hw)
}

/// Formats a raw count in millions with 3 significant digits: 2953800
/// becomes "2.95", 155700480 becomes "156".
pub fn format_millions(count: u64) -> String {
    let m = count as f64 / 1e6;
    if m >= 100.0 {
        format!("{m:.0}")
    } else if m >= 10.0 {
        format!("{m:.1}")
    } else {
        format!("{m:.2}")
    }
}

fn shape_string(dims: &[usize]) -> String {
    dims.iter()
        .map(|d| d.to_string())
        .collect::<Vec<_>>()
        .join("x")
}

impl CostReport {
    /// Aligned plain-text table plus totals in M units.
    pub fn to_text(&self) -> String {
        let mut label_w = "layer".len();
        let mut shape_w = "out_shape".len();
        let mut params_w = "params".len();
        let mut macs_w = "macs".len();
        let rendered: Vec<(String, String, String, String)> = self
            .rows
            .iter()
            .map(|r| {
                (
                    r.label.clone(),
                    shape_string(&r.out_shape),
                    r.params.to_string(),
                    r.macs.to_string(),
                )
            })
            .collect();
        for (l, s, p, m) in &rendered {
            label_w = label_w.max(l.len());
            shape_w = shape_w.max(s.len());
            params_w = params_w.max(p.len());
            macs_w = macs_w.max(m.len());
        }
        let mut out = format!(
            "{:<label_w$}  {:<shape_w$}  {:>params_w$}  {:>macs_w$}\n",
            "layer", "out_shape", "params", "macs"
        );
        for (l, s, p, m) in &rendered {
            out.push_str(&format!(
                "{l:<label_w$}  {s:<shape_w$}  {p:>params_w$}  {m:>macs_w$}\n"
            ));
        }
        out.push_str(&format!(
            "total: {}M params ({}), {}M macs ({})\n",
            format_millions(self.total_params),
            self.total_params,
            format_millions(self.total_macs),
            self.total_macs,
        ));
        out
    }

    /// CSV with columns `layer,out_shape,params,macs`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,out_shape,params,macs\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{}\n",
                r.label,
                shape_string(&r.out_shape),
                r.params,
                r.macs
            ));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::build_model;

    #[test]
    fn stem_costs_match_closed_form() {
        let report = summarize(&LcnetConfig::default(), (224, 224)).unwrap();
        let stem = &report.rows[0];
        assert_eq!(stem.label, "stem");
        assert_eq!(stem.out_shape, vec![1, 16, 112, 112]);
        // conv 3->16 k3 no bias: 3*16*9 = 432 weights, plus BN 2*16
        assert_eq!(stem.params, 432 + 32);
        // 112*112*16*3*9
        assert_eq!(stem.macs, 5_419_008);
    }

    #[test]
    fn default_report_row_structure() {
        let report = summarize(&LcnetConfig::default(), (224, 224)).unwrap();
        let labels: Vec<&str> = report.rows.iter().map(|r| r.label.as_str()).collect();
        assert_eq!(labels.len(), 17); // stem + 13 blocks + gap + last_conv + fc
        assert_eq!(labels[0], "stem");
        assert_eq!(labels[14], "gap");
        assert_eq!(labels[15], "last_conv");
        assert_eq!(labels[16], "fc");
        assert_eq!(report.rows[14].out_shape, vec![1, 512, 1, 1]);
        assert_eq!(report.rows[15].out_shape, vec![1, 1280, 1, 1]);
        assert_eq!(report.rows[16].out_shape, vec![1, 1000]);
        // totals equal the sum of rows
        assert_eq!(
            report.total_params,
            report.rows.iter().map(|r| r.params).sum::<u64>()
        );
        assert_eq!(
            report.total_macs,
            report.rows.iter().map(|r| r.macs).sum::<u64>()
        );
    }

    #[test]
    fn count_params_equals_allocated_tensor_elements() {
        for scale in [0.25f32, 0.5, 1.0] {
            let cfg = LcnetConfig::with_scale(scale);
            let model = build_model(&cfg, 0).unwrap();
            let counted = count_params(&model);
            let allocated: u64 = model
                .params()
                .iter()
                .filter(|(k, _)| Model::is_trainable(k))
                .map(|(_, t)| t.len() as u64)
                .sum();
            assert_eq!(counted, allocated, "scale {scale}");
        }
    }

    #[test]
    fn se_mask_monotonicity() {
        let base = summarize(&LcnetConfig::default(), (224, 224)).unwrap();
        let all = summarize(
            &LcnetConfig {
                se_mask: "1111111111111".into(),
                ..Default::default()
            },
            (224, 224),
        )
        .unwrap();
        assert!(all.total_macs > base.total_macs);
        assert!(all.total_params > base.total_params);
    }

    #[test]
    fn kernel_mask_all_three_cheaper_than_default() {
        let base = summarize(&LcnetConfig::default(), (224, 224)).unwrap();
        let small = summarize(
            &LcnetConfig {
                kernel_mask: "0000000000000".into(),
                ..Default::default()
            },
            (224, 224),
        )
        .unwrap();
        assert!(small.total_macs < base.total_macs);
        assert!(small.total_params < base.total_params);
    }

    #[test]
    fn macs_are_per_sample() {
        // the report never depends on a batch dimension; shapes are pinned
        // at N = 1 by convention
        let report = summarize(&LcnetConfig::default(), (224, 224)).unwrap();
        assert!(report.rows.iter().all(|r| r.out_shape[0] == 1));
    }

    #[test]
    fn csv_and_text_render() {
        let report = summarize(
            &LcnetConfig {
                scale: 0.25,
                num_classes: 10,
                ..Default::default()
            },
            (224, 224),
        )
        .unwrap();
        let csv = report.to_csv();
        assert!(csv.starts_with("layer,out_shape,params,macs\n"));
        assert_eq!(csv.lines().count(), 1 + report.rows.len());
        let text = report.to_text();
        assert!(text.contains("total:"));
        assert!(text.contains("stem"));
    }

    #[test]
    fn format_millions_three_significant_digits() {
        assert_eq!(format_millions(2_953_800), "2.95");
        assert_eq!(format_millions(155_700_480), "156");
        assert_eq!(format_millions(16_773_440), "16.8");
        assert_eq!(format_millions(906_000_000), "906");
    }

    #[test]
    fn rejects_invalid_resolution() {
        assert!(summarize(&LcnetConfig::default(), (100, 100)).is_err());
        let model = build_model(&LcnetConfig::with_scale(0.25), 0).unwrap();
        assert!(count_macs(&model, (31, 32)).is_err());
    }
}
