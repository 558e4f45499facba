//! Static compute and size model: multiply-accumulates and parameter counts
//! of a width-reduced network, without instantiating weights.
//!
//! Counting convention: one MAC per weight multiply. Bias additions,
//! normalization, activations and pooling are per-element operations,
//! reported separately and excluded from the MAC figure. Channel counts
//! shrink by the ceiling rule on the scaled side; spatial dimensions never
//! shrink.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::od::DropoutDistribution;
use crate::tensor::kept_units;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum CostLayer {
    Conv2d {
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        out_h: usize,
        out_w: usize,
        bias: bool,
        scale_in: bool,
        scale_out: bool,
    },
    Dense {
        /// Input channels that scale with width; the spatial block they are
        /// multiplied by stays fixed (flattened feature maps).
        in_ch: usize,
        in_block: usize,
        out: usize,
        bias: bool,
        scale_in: bool,
        scale_out: bool,
    },
    Batchnorm {
        channels: usize,
        spatial: usize,
        scale: bool,
    },
    /// Activation/pooling style work: `channels * per_channel` elementwise
    /// operations.
    PerElement {
        channels: usize,
        per_channel: usize,
        scale: bool,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchCostDescriptor {
    pub name: String,
    pub layers: Vec<CostLayer>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CostBreakdown {
    pub macs: u64,
    pub params: u64,
    pub per_element_ops: u64,
}

fn scaled(ch: usize, p: f64, scale: bool) -> usize {
    if scale {
        kept_units(p, ch)
    } else {
        ch
    }
}

/// Exact counts at width `p` with ceiling-rounded channel counts.
pub fn cost_model(desc: &ArchCostDescriptor, p: f64) -> Result<CostBreakdown> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::InvalidWidth(p));
    }
    let mut macs = 0u64;
    let mut params = 0u64;
    let mut per_element = 0u64;
    for layer in &desc.layers {
        match *layer {
            CostLayer::Conv2d {
                in_ch,
                out_ch,
                kernel,
                out_h,
                out_w,
                bias,
                scale_in,
                scale_out,
            } => {
                let ci = scaled(in_ch, p, scale_in) as u64;
                let co = scaled(out_ch, p, scale_out) as u64;
                let k2 = (kernel * kernel) as u64;
                macs += (out_h * out_w) as u64 * co * ci * k2;
                params += co * ci * k2 + if bias { co } else { 0 };
            }
            CostLayer::Dense {
                in_ch,
                in_block,
                out,
                bias,
                scale_in,
                scale_out,
            } => {
                let ci = scaled(in_ch, p, scale_in) as u64 * in_block as u64;
                let co = scaled(out, p, scale_out) as u64;
                macs += ci * co;
                params += ci * co + if bias { co } else { 0 };
            }
            CostLayer::Batchnorm {
                channels,
                spatial,
                scale,
            } => {
                let c = scaled(channels, p, scale) as u64;
                params += 2 * c;
                // Normalize plus affine per element.
                per_element += 2 * c * spatial as u64;
            }
            CostLayer::PerElement {
                channels,
                per_channel,
                scale,
            } => {
                per_element += scaled(channels, p, scale) as u64 * per_channel as u64;
            }
        }
    }
    Ok(CostBreakdown {
        macs,
        params,
        per_element_ops: per_element,
    })
}

/// Transfer sizes for a capability cap: 8 bytes per parameter each direction,
/// plus the size reduction factor against the full model.
pub fn comm_savings(desc: &ArchCostDescriptor, p_cap: f64) -> Result<(u64, u64, f64)> {
    let at_cap = cost_model(desc, p_cap)?;
    let full = cost_model(desc, 1.0)?;
    let bytes = 8 * at_cap.params;
    let factor = full.params as f64 / at_cap.params as f64;
    Ok((bytes, bytes, factor))
}

/// CSV table over the candidate widths: one row per width.
pub fn cost_table_csv(desc: &ArchCostDescriptor, dist: &DropoutDistribution) -> Result<String> {
    let mut out = String::from("p,macs,params,downstream_bytes,upstream_bytes\n");
    for &p in dist.values() {
        let cost = cost_model(desc, p)?;
        let (down, up, _) = comm_savings(desc, p)?;
        out.push_str(&format!("{p},{},{},{down},{up}\n", cost.macs, cost.params));
    }
    Ok(out)
}

/// Descriptor for the two-conv digit classifier (28x28 gray input):
/// conv 5x5 x10, pool 2x2, conv 5x5 x20, pool 2x2, dense head.
pub fn femnist_cnn_descriptor(classes: usize) -> ArchCostDescriptor {
    ArchCostDescriptor {
        name: "femnist_cnn".into(),
        layers: vec![
            CostLayer::Conv2d {
                in_ch: 1,
                out_ch: 10,
                kernel: 5,
                out_h: 24,
                out_w: 24,
                bias: true,
                scale_in: false,
                scale_out: true,
            },
            CostLayer::PerElement {
                channels: 10,
                per_channel: 24 * 24 + 12 * 12,
                scale: true,
            },
            CostLayer::Conv2d {
                in_ch: 10,
                out_ch: 20,
                kernel: 5,
                out_h: 8,
                out_w: 8,
                bias: true,
                scale_in: true,
                scale_out: true,
            },
            CostLayer::PerElement {
                channels: 20,
                per_channel: 8 * 8 + 4 * 4,
                scale: true,
            },
            CostLayer::Dense {
                in_ch: 20,
                in_block: 4 * 4,
                out: classes,
                bias: true,
                scale_in: true,
                scale_out: false,
            },
        ],
    }
}

/// Descriptor for the 32x32 CIFAR variant of ResNet18: 3x3 stem, four stages
/// of two basic blocks (64/128/256/512), 1x1 downsample shortcuts, linear
/// head. Kept as a static descriptor only; the engine does not train it.
pub fn resnet18_cifar_descriptor(classes: usize) -> ArchCostDescriptor {
    let mut layers = Vec::new();
    // Stem.
    layers.push(CostLayer::Conv2d {
        in_ch: 3,
        out_ch: 64,
        kernel: 3,
        out_h: 32,
        out_w: 32,
        bias: false,
        scale_in: false,
        scale_out: true,
    });
    layers.push(CostLayer::Batchnorm {
        channels: 64,
        spatial: 32 * 32,
        scale: true,
    });

    let stages: [(usize, usize, usize); 4] =
        [(64, 64, 32), (64, 128, 16), (128, 256, 8), (256, 512, 4)];
    for (stage_idx, &(cin, cout, side)) in stages.iter().enumerate() {
        let spatial = side * side;
        for block in 0..2 {
            let block_in = if block == 0 { cin } else { cout };
            layers.push(CostLayer::Conv2d {
                in_ch: block_in,
                out_ch: cout,
                kernel: 3,
                out_h: side,
                out_w: side,
                bias: false,
                scale_in: true,
                scale_out: true,
            });
            layers.push(CostLayer::Batchnorm {
                channels: cout,
                spatial,
                scale: true,
            });
            layers.push(CostLayer::Conv2d {
                in_ch: cout,
                out_ch: cout,
                kernel: 3,
                out_h: side,
                out_w: side,
                bias: false,
                scale_in: true,
                scale_out: true,
            });
            layers.push(CostLayer::Batchnorm {
                channels: cout,
                spatial,
                scale: true,
            });
            // Projection shortcut where the shape changes.
            if block == 0 && stage_idx > 0 {
                layers.push(CostLayer::Conv2d {
                    in_ch: cin,
                    out_ch: cout,
                    kernel: 1,
                    out_h: side,
                    out_w: side,
                    bias: false,
                    scale_in: true,
                    scale_out: true,
                });
                layers.push(CostLayer::Batchnorm {
                    channels: cout,
                    spatial,
                    scale: true,
                });
            }
            layers.push(CostLayer::PerElement {
                channels: cout,
                per_channel: 2 * spatial,
                scale: true,
            });
        }
    }
    layers.push(CostLayer::Dense {
        in_ch: 512,
        in_block: 1,
        out: classes,
        bias: true,
        scale_in: true,
        scale_out: false,
    });
    ArchCostDescriptor {
        name: "resnet18_cifar".into(),
        layers,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn within(value: u64, target: f64, tol: f64) -> bool {
        (value as f64 - target).abs() <= tol * target
    }

    #[test]
    fn digit_cnn_full_width_counts() {
        let desc = femnist_cnn_descriptor(62);
        let full = cost_model(&desc, 1.0).unwrap();
        // Weight multiplies: 144,000 + 320,000 + 19,840.
        assert_eq!(full.macs, 483_840);
        // 260 + 5,020 + 19,902 learnables.
        assert_eq!(full.params, 25_182);
        assert!(within(full.macs, 491_000.0, 0.05));
        assert!(within(full.params, 26_000.0, 0.05));
    }

    #[test]
    fn resnet18_full_width_counts() {
        let desc = resnet18_cifar_descriptor(10);
        let full = cost_model(&desc, 1.0).unwrap();
        assert_eq!(full.params, 11_173_962);
        assert_eq!(full.macs, 555_422_720);
        assert!(within(full.macs, 555_000_000.0, 0.05));
        assert!(within(full.params, 11_000_000.0, 0.05));
    }

    #[test]
    fn dense_10_to_10_half_width_quarters_the_macs() {
        let desc = ArchCostDescriptor {
            name: "single_dense".into(),
            layers: vec![CostLayer::Dense {
                in_ch: 10,
                in_block: 1,
                out: 10,
                bias: false,
                scale_in: true,
                scale_out: true,
            }],
        };
        let full = cost_model(&desc, 1.0).unwrap();
        let half = cost_model(&desc, 0.5).unwrap();
        assert_eq!(full.macs, 100);
        assert_eq!(half.macs, 25);
    }

    #[test]
    fn costs_are_monotone_in_width() {
        let desc = femnist_cnn_descriptor(62);
        let dist = DropoutDistribution::uniform_k(10).unwrap();
        let mut prev = cost_model(&desc, dist.values()[0]).unwrap();
        for &p in &dist.values()[1..] {
            let cur = cost_model(&desc, p).unwrap();
            assert!(cur.macs >= prev.macs);
            assert!(cur.params >= prev.params);
            prev = cur;
        }
    }

    #[test]
    fn comm_savings_factors() {
        // Single dense 100 -> 100 layer: weight block shrinks by 1/p^2.
        let desc = ArchCostDescriptor {
            name: "dense100".into(),
            layers: vec![CostLayer::Dense {
                in_ch: 100,
                in_block: 1,
                out: 100,
                bias: false,
                scale_in: true,
                scale_out: true,
            }],
        };
        let (_, _, f1) = comm_savings(&desc, 1.0).unwrap();
        assert!((f1 - 1.0).abs() < 1e-12);
        let (down, up, f_half) = comm_savings(&desc, 0.5).unwrap();
        assert_eq!(down, 8 * 2500);
        assert_eq!(up, down);
        assert!((f_half - 4.0).abs() < 1e-12);
        let (_, _, f_fifth) = comm_savings(&desc, 0.2).unwrap();
        assert!((f_fifth - 25.0).abs() < 1e-12);
    }

    #[test]
    fn csv_has_one_row_per_width() {
        let desc = femnist_cnn_descriptor(62);
        let dist = DropoutDistribution::uniform_k(5).unwrap();
        let csv = cost_table_csv(&desc, &dist).unwrap();
        let lines: Vec<&str> = csv.trim().lines().collect();
        assert_eq!(lines.len(), 6);
        assert!(lines[0].starts_with("p,macs,params"));
        assert!(lines[5].starts_with("1,483840,25182"));
    }
}
