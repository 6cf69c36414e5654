//! Parameter, operation and memory counts per layer.
//!
//! A convolution costs `2 * c_in * k_h * k_w * h_out * w_out * c_out`
//! operations (multiply and add counted separately); a linear layer
//! `2 * in * out`. Binarized layers report the same count as XNOR operations
//! instead of FLOPs. Memory is `real_params * real_width / 8 +
//! binary_params * binary_width / 8` bytes. Rotation matrices and blend angles
//! are training-time state and are not counted.

use serde::Serialize;

use super::{ArchSpec, ModelVariant};
use crate::error::Result;
use crate::nn::ConvSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct CountingRules {
    pub include_bn: bool,
    pub real_width_bits: u32,
    pub binary_width_bits: u32,
}

impl Default for CountingRules {
    fn default() -> Self {
        Self {
            include_bn: false,
            real_width_bits: 64,
            binary_width_bits: 1,
        }
    }
}

impl CountingRules {
    pub fn with_bn(include_bn: bool) -> Self {
        Self {
            include_bn,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerKind {
    Conv,
    Bn,
    Linear,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerRecord {
    pub name: String,
    pub kind: LayerKind,
    pub params_real: u64,
    pub params_binary: u64,
    pub flops: u64,
    pub xnor_ops: u64,
    pub memory_bytes: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Totals {
    pub params_real: u64,
    pub params_binary: u64,
    pub flops: u64,
    pub xnor_ops: u64,
    pub memory_bytes: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComplexityReport {
    pub variant: ModelVariant,
    pub num_classes: usize,
    pub rules: CountingRules,
    pub layers: Vec<LayerRecord>,
    pub totals: Totals,
}

impl ComplexityReport {
    pub fn params(&self) -> u64 {
        self.totals.params_real + self.totals.params_binary
    }

    pub fn memory_mb(&self) -> f64 {
        self.totals.memory_bytes / 1e6
    }

    /// Memory of an ensemble of `members` copies.
    pub fn ensemble_memory_mb(&self, members: usize) -> f64 {
        self.memory_mb() * members as f64
    }

    pub fn to_csv(&self) -> String {
        let mut s =
            String::from("layer,kind,params_real,params_binary,flops,xnor_ops,memory_bytes\n");
        let row = |s: &mut String, name: &str, kind: &str, t: Totals| {
            s.push_str(&format!(
                "{name},{kind},{},{},{},{},{}\n",
                t.params_real, t.params_binary, t.flops, t.xnor_ops, t.memory_bytes
            ));
        };
        for l in &self.layers {
            let kind = match l.kind {
                LayerKind::Conv => "conv",
                LayerKind::Bn => "bn",
                LayerKind::Linear => "linear",
            };
            row(
                &mut s,
                &l.name,
                kind,
                Totals {
                    params_real: l.params_real,
                    params_binary: l.params_binary,
                    flops: l.flops,
                    xnor_ops: l.xnor_ops,
                    memory_bytes: l.memory_bytes,
                },
            );
        }
        row(&mut s, "total", "", self.totals);
        s
    }
}

fn conv_ops(spec: &ConvSpec, h_out: usize, w_out: usize) -> u64 {
    2 * (spec.c_in * spec.k_h * spec.k_w * h_out * w_out * spec.c_out) as u64
}

struct Builder {
    rules: CountingRules,
    layers: Vec<LayerRecord>,
}

impl Builder {
    fn memory(&self, real: u64, binary: u64) -> f64 {
        real as f64 * self.rules.real_width_bits as f64 / 8.0
            + binary as f64 * self.rules.binary_width_bits as f64 / 8.0
    }

    fn push(&mut self, name: String, kind: LayerKind, params: u64, ops: u64, binary: bool) {
        let (params_real, params_binary, flops, xnor_ops) = if binary {
            (0, params, 0, ops)
        } else {
            (params, 0, ops, 0)
        };
        self.layers.push(LayerRecord {
            name,
            kind,
            params_real,
            params_binary,
            flops,
            xnor_ops,
            memory_bytes: self.memory(params_real, params_binary),
        });
    }

    fn conv(&mut self, name: String, spec: &ConvSpec, hw: (usize, usize), binary: bool) {
        let ops = conv_ops(spec, hw.0, hw.1);
        self.push(name, LayerKind::Conv, spec.weight_len() as u64, ops, binary);
    }

    fn bn(&mut self, name: String, channels: usize) {
        if self.rules.include_bn {
            self.push(name, LayerKind::Bn, 2 * channels as u64, 0, false);
        }
    }
}

/// Per-layer counts for `variant` built on `arch`.
pub fn analyze(
    arch: &ArchSpec,
    variant: ModelVariant,
    rules: CountingRules,
) -> Result<ComplexityReport> {
    arch.validate()?;
    let mut b = Builder {
        rules,
        layers: Vec::new(),
    };
    let stem = arch.stem();
    let (mut h, mut w) = stem.output_hw(arch.in_h, arch.in_w)?;
    b.conv("stem".into(), &stem, (h, w), variant.binarizes_stem());
    b.bn("stem.bn".into(), stem.c_out);
    let binary = variant.binarizes_blocks();
    for (i, blk) in arch.blocks.iter().enumerate() {
        let name = format!("block{}", i + 1);
        let (c1, c2) = (blk.conv1(), blk.conv2());
        let hw1 = c1.output_hw(h, w)?;
        let hw2 = c2.output_hw(hw1.0, hw1.1)?;
        b.conv(format!("{name}.conv1"), &c1, hw1, binary);
        b.bn(format!("{name}.bn1"), c1.c_out);
        b.conv(format!("{name}.conv2"), &c2, hw2, binary);
        b.bn(format!("{name}.bn2"), c2.c_out);
        if let Some(sc) = blk.shortcut() {
            let hws = sc.output_hw(h, w)?;
            b.conv(format!("{name}.shortcut"), &sc, hws, binary);
            b.bn(format!("{name}.shortcut_bn"), sc.c_out);
        }
        (h, w) = hw2;
    }
    let f = arch.feature_channels();
    b.bn("head.bn".into(), f);
    let k = arch.num_classes;
    b.push(
        "linear".into(),
        LayerKind::Linear,
        (k * f + k) as u64,
        2 * (k * f) as u64,
        variant.binarizes_classifier(),
    );

    let layers = b.layers;
    let sum = |f: fn(&LayerRecord) -> u64| layers.iter().map(f).sum::<u64>();
    let totals = Totals {
        params_real: sum(|l| l.params_real),
        params_binary: sum(|l| l.params_binary),
        flops: sum(|l| l.flops),
        xnor_ops: sum(|l| l.xnor_ops),
        memory_bytes: layers.iter().map(|l| l.memory_bytes).sum(),
    };
    Ok(ComplexityReport {
        variant,
        num_classes: k,
        rules,
        layers,
        totals,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report(v: ModelVariant, bn: bool) -> ComplexityReport {
        analyze(&ArchSpec::lresnet18a(24), v, CountingRules::with_bn(bn)).unwrap()
    }

    /// Independent tally: stem 9*32, then per block 9*ci*co + 9*co*co (+ ci*co).
    #[test]
    fn parameter_total_by_hand() {
        let blocks = [
            (32, 32, false),
            (32, 32, false),
            (32, 32, true),
            (32, 32, false),
            (32, 64, true),
            (64, 64, false),
            (64, 128, true),
            (128, 128, false),
        ];
        let mut conv = 9 * 32;
        let mut bn = 2 * 32;
        for (ci, co, short) in blocks {
            conv += 9 * ci * co + 9 * co * co;
            bn += 4 * co;
            if short {
                conv += ci * co;
                bn += 2 * co;
            }
        }
        bn += 2 * 128;
        let linear = 128 * 24 + 24;
        assert_eq!((conv, bn, linear), (730_400, 2_816, 3_096));
        assert_eq!(report(ModelVariant::Real, true).params(), 736_312);
        assert_eq!(report(ModelVariant::Real, false).params(), 733_496);
    }

    #[test]
    fn totals_are_sums_and_each_layer_counted_once() {
        for v in ModelVariant::ALL {
            for bn in [false, true] {
                let r = report(v, bn);
                assert_eq!(
                    r.totals.flops,
                    r.layers.iter().map(|l| l.flops).sum::<u64>()
                );
                assert_eq!(
                    r.totals.xnor_ops,
                    r.layers.iter().map(|l| l.xnor_ops).sum::<u64>()
                );
                for l in &r.layers {
                    assert!(l.params_real == 0 || l.params_binary == 0, "{}", l.name);
                }
            }
        }
    }

    #[test]
    fn operation_counts() {
        let real = report(ModelVariant::Real, false);
        assert_eq!(real.totals.xnor_ops, 0);
        assert!((4.40e8..=4.58e8).contains(&(real.totals.flops as f64)));
        let rbnn = report(ModelVariant::Rbnn, false);
        assert_eq!(rbnn.totals.flops, 1_179_648 + 6_144);
        assert_eq!(rbnn.totals.flops + rbnn.totals.xnor_ops, real.totals.flops);
        let bnn = report(ModelVariant::Bnn, false);
        assert_eq!(bnn.totals.flops, 0);
    }

    #[test]
    fn memory_counts() {
        let mb = |v| report(v, false).memory_mb();
        assert!((mb(ModelVariant::Real) - 5.867_968).abs() < 1e-9);
        assert!((mb(ModelVariant::Bnn) - 0.091_687).abs() < 1e-9);
        assert!((mb(ModelVariant::Rbnn) - 0.118_336).abs() < 1e-9);
        assert_eq!(mb(ModelVariant::Rbnn), mb(ModelVariant::Bnn2Real));
        let r = report(ModelVariant::Rbnn, false);
        assert_eq!(r.ensemble_memory_mb(4), 4.0 * r.memory_mb());
    }

    #[test]
    fn csv_has_header_layers_and_total() {
        let r = report(ModelVariant::Real, true);
        let csv = r.to_csv();
        let lines: Vec<_> = csv.lines().collect();
        assert_eq!(lines.len(), r.layers.len() + 2);
        assert!(lines.last().unwrap().starts_with("total,,"));
    }
}
