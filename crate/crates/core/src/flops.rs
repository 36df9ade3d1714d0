//! Analytic multiply-accumulate counts for convolutions, projections, and
//! attention score/apply products, in both full and axial attention modes.
//! FLOPs are reported as 2x the MAC count. Normalizations, softmax, and
//! the decay elementwise products are excluded.

use std::fmt;

use crate::error::{Error, Result};
use crate::model::ModelConfig;

#[derive(Debug, Clone)]
pub struct FlopLine {
    pub name: String,
    pub macs: u64,
}

impl FlopLine {
    pub fn flops(&self) -> u64 {
        2 * self.macs
    }
}

/// Attention-core cost of one stage in both modes.
#[derive(Debug, Clone)]
pub struct StageAttention {
    pub stage: usize,
    pub grid: (usize, usize),
    /// Score + apply MACs per stage across all blocks, full attention.
    pub full_macs: u64,
    /// Score + apply MACs per stage across all blocks, axial attention.
    pub axial_macs: u64,
}

impl StageAttention {
    /// Exactly (H + W) / (H * W); the axial/full MAC ratio.
    pub fn ratio(&self) -> f64 {
        let (h, w) = self.grid;
        (h + w) as f64 / (h * w) as f64
    }
}

#[derive(Debug, Clone)]
pub struct FlopReport {
    pub input: (usize, usize),
    /// Costs independent of the attention mode: stem and downsample convs,
    /// QKVO projections, FFN projections, decoder projections.
    pub common: Vec<FlopLine>,
    pub attention: Vec<StageAttention>,
}

impl FlopReport {
    pub fn common_macs(&self) -> u64 {
        self.common.iter().map(|l| l.macs).sum()
    }

    /// Total MACs with full attention everywhere.
    pub fn total_macs_full(&self) -> u64 {
        self.common_macs() + self.attention.iter().map(|a| a.full_macs).sum::<u64>()
    }

    /// Total MACs with the deployed placement: axial in stages 0-2, full
    /// in stage 3.
    pub fn total_macs_axial(&self) -> u64 {
        self.common_macs()
            + self
                .attention
                .iter()
                .map(|a| if a.stage < 3 { a.axial_macs } else { a.full_macs })
                .sum::<u64>()
    }

    pub fn total_flops_full(&self) -> u64 {
        2 * self.total_macs_full()
    }

    pub fn total_flops_axial(&self) -> u64 {
        2 * self.total_macs_axial()
    }
}

impl fmt::Display for FlopReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "layer\tmacs\tflops")?;
        for line in &self.common {
            writeln!(f, "{}\t{}\t{}", line.name, line.macs, line.flops())?;
        }
        for a in &self.attention {
            writeln!(
                f,
                "stage{}.attn.full\t{}\t{}",
                a.stage,
                a.full_macs,
                2 * a.full_macs
            )?;
            writeln!(
                f,
                "stage{}.attn.axial\t{}\t{}",
                a.stage,
                a.axial_macs,
                2 * a.axial_macs
            )?;
            writeln!(f, "stage{}.attn.ratio\t{:.6}\t-", a.stage, a.ratio())?;
        }
        writeln!(f, "total.full\t{}\t{}", self.total_macs_full(), self.total_flops_full())?;
        writeln!(
            f,
            "total.axial\t{}\t{}",
            self.total_macs_axial(),
            self.total_flops_axial()
        )
    }
}

/// Closed-form cost model for a model config at input resolution h x w.
pub fn estimate_flops(config: &ModelConfig, h: usize, w: usize) -> Result<FlopReport> {
    config.validate()?;
    if h % 32 != 0 || w % 32 != 0 {
        return Err(Error::shape(format!(
            "input {h}x{w} must be divisible by 32"
        )));
    }
    let dims = config.stage_dims.map(|d| d as u64);
    let r = config.ffn_ratio as u64;
    let mut common = Vec::new();

    // Stem convs at their output resolutions.
    let c0 = dims[0];
    common.push(FlopLine {
        name: "stem.conv1".into(),
        macs: (c0 / 2) * 3 * 9 * ((h / 2) * (w / 2)) as u64,
    });
    common.push(FlopLine {
        name: "stem.conv2".into(),
        macs: c0 * (c0 / 2) * 9 * ((h / 4) * (w / 4)) as u64,
    });

    let mut attention = Vec::new();
    for s in 0..4 {
        let gh = h / (4 << s);
        let gw = w / (4 << s);
        let n = (gh * gw) as u64;
        let c = dims[s];
        let blocks = config.stage_depths[s] as u64;
        // Q, K, V, O projections plus the FFN pair, per block.
        common.push(FlopLine {
            name: format!("stage{s}.proj"),
            macs: blocks * (4 * n * c * c),
        });
        common.push(FlopLine {
            name: format!("stage{s}.ffn"),
            macs: blocks * (2 * n * c * (r * c)),
        });
        // Attention core: scores N*N*c plus apply N*N*c per block (full);
        // horizontal N*W*c + vertical N*H*c, each twice, per block (axial).
        attention.push(StageAttention {
            stage: s,
            grid: (gh, gw),
            full_macs: blocks * 2 * n * n * c,
            axial_macs: blocks * 2 * n * (gh as u64 + gw as u64) * c,
        });
        if s < 3 {
            let cn = dims[s + 1];
            let on = ((gh / 2) * (gw / 2)) as u64;
            common.push(FlopLine {
                name: format!("down{s}.conv"),
                macs: cn * c * 9 * on,
            });
        }
    }

    // Decoder: three projections to the common width at their own grids,
    // fusion and classification at the 1/8 grid.
    let dd = config.decoder_dim as u64;
    let n1 = ((h / 8) * (w / 8)) as u64;
    for s in 1..4 {
        let ns = ((h / (4 << s)) * (w / (4 << s))) as u64;
        common.push(FlopLine {
            name: format!("decoder.proj{}", s - 1),
            macs: ns * dims[s] * dd,
        });
    }
    common.push(FlopLine {
        name: "decoder.fuse".into(),
        macs: n1 * (3 * dd) * dd,
    });
    common.push(FlopLine {
        name: "decoder.classify".into(),
        macs: n1 * dd * config.num_classes as u64,
    });

    Ok(FlopReport {
        input: (h, w),
        common,
        attention,
    })
}

/// Score + apply MACs for one full-attention layer over n tokens of
/// width c.
pub fn attention_macs_full(n: usize, c: usize) -> u64 {
    2 * (n as u64) * (n as u64) * (c as u64)
}

/// Score + apply MACs for one axial-attention layer over an h x w grid of
/// width c.
pub fn attention_macs_axial(h: usize, w: usize, c: usize) -> u64 {
    2 * ((h * w) as u64) * ((h + w) as u64) * (c as u64)
}
