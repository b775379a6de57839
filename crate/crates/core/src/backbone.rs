//! ResNet18 trunks (planar and volumetric) exposing the eight block outputs.

use famnet_tensor::{Scalar, Var, WindowSpec};
use rand::Rng;

use crate::error::{Error, Result};
use crate::model::{Branch, ForwardCtx, Initializer, ModelConfig};

pub const BASE_CHANNELS: [usize; 4] = [64, 128, 256, 512];
const STEM_CHANNELS: usize = 64;

/// Minimum clip depth: three temporal halvings must leave depth ≥ 1.
pub const MIN_DEPTH: usize = 8;

pub fn stage_channels(width: f64) -> [usize; 4] {
    BASE_CHANNELS.map(|c| scaled(c, width))
}

fn scaled(c: usize, width: f64) -> usize {
    ((c as f64 * width).round() as usize).max(1)
}

/// Outputs of the two basic blocks of each of the four stages.
#[derive(Clone, Copy, Debug)]
pub struct FeatureTaps {
    taps: [[Var; 2]; 4],
}

impl FeatureTaps {
    pub fn new(taps: [[Var; 2]; 4]) -> Self {
        FeatureTaps { taps }
    }

    /// Output of block `j` of stage `i`, both counted from 1.
    pub fn tap(&self, i: usize, j: usize) -> Var {
        self.taps[i - 1][j - 1]
    }
}

fn stem_spec(branch: Branch) -> WindowSpec {
    match branch {
        Branch::TwoD => WindowSpec::new([1, 7, 7], [1, 2, 2], [0, 3, 3]),
        Branch::ThreeD => WindowSpec::new([7, 7, 7], [1, 2, 2], [3, 3, 3]),
    }
}

// Spatial-only in both branches so the three stage transitions alone
// account for the temporal reduction.
const STEM_POOL: WindowSpec = WindowSpec {
    kernel: [1, 3, 3],
    stride: [1, 2, 2],
    padding: [0, 1, 1],
};

fn block_stride(branch: Branch, stage: usize) -> [usize; 3] {
    match (branch, stage) {
        (_, 1) => [1, 1, 1],
        (Branch::TwoD, _) => [1, 2, 2],
        (Branch::ThreeD, _) => [2, 2, 2],
    }
}

fn kernel3(branch: Branch) -> [usize; 3] {
    match branch {
        Branch::TwoD => [1, 3, 3],
        Branch::ThreeD => [3, 3, 3],
    }
}

fn conv3(branch: Branch, stride: [usize; 3]) -> WindowSpec {
    let k = kernel3(branch);
    WindowSpec::new(k, stride, k.map(|k| k / 2))
}

fn block_prefix(stage: usize, block: usize) -> String {
    format!("backbone.layer{stage}.{}", block - 1)
}

/// Whether block `block` of `stage` needs a projection shortcut.
fn has_downsample(stage: usize, block: usize) -> bool {
    block == 1 && stage > 1
}

pub(crate) fn init<T: Scalar, R: Rng>(init: &mut Initializer<'_, T, R>, cfg: &ModelConfig) {
    let ch = cfg.channels();
    let stem_c = scaled(STEM_CHANNELS, cfg.width);
    let stem_k = stem_spec(cfg.branch).kernel;
    init.conv("backbone.conv1", stem_c, 3, stem_k, false);
    init.batch_norm("backbone.bn1", stem_c);
    let k = kernel3(cfg.branch);
    let mut cin = stem_c;
    for stage in 1..=4 {
        let c = ch[stage - 1];
        for block in 1..=2 {
            let p = block_prefix(stage, block);
            let bin = if block == 1 { cin } else { c };
            init.conv(&format!("{p}.conv1"), c, bin, k, false);
            init.batch_norm(&format!("{p}.bn1"), c);
            init.conv(&format!("{p}.conv2"), c, c, k, false);
            init.batch_norm(&format!("{p}.bn2"), c);
            if has_downsample(stage, block) || bin != c {
                init.conv(&format!("{p}.downsample.0"), c, bin, [1, 1, 1], false);
                init.batch_norm(&format!("{p}.downsample.1"), c);
            }
        }
        cin = c;
    }
}

fn basic_block<T: Scalar>(
    ctx: &mut ForwardCtx<'_, T>,
    branch: Branch,
    prefix: &str,
    x: Var,
    stride: [usize; 3],
) -> Result<Var> {
    let h = ctx.conv(x, &format!("{prefix}.conv1"), conv3(branch, stride))?;
    let h = ctx.batch_norm(h, &format!("{prefix}.bn1"))?;
    let h = ctx.graph.relu(h);
    let h = ctx.conv(h, &format!("{prefix}.conv2"), conv3(branch, [1, 1, 1]))?;
    let h = ctx.batch_norm(h, &format!("{prefix}.bn2"))?;
    let shortcut = if ctx.store().contains(&format!("{prefix}.downsample.0.weight")) {
        let s = ctx.conv(x, &format!("{prefix}.downsample.0"), WindowSpec::new([1, 1, 1], stride, [0, 0, 0]))?;
        ctx.batch_norm(s, &format!("{prefix}.downsample.1"))?
    } else {
        x
    };
    let sum = ctx.graph.add(h, shortcut)?;
    Ok(ctx.graph.relu(sum))
}

/// Runs the trunk on `x: (B, 3, D, H, W)`.
pub fn forward<T: Scalar>(ctx: &mut ForwardCtx<'_, T>, cfg: &ModelConfig, x: Var) -> Result<FeatureTaps> {
    let shape = ctx.graph.shape(x).to_vec();
    if shape.len() != 5 || shape[1] != 3 {
        return Err(Error::invalid(format!("expected input (B, 3, D, H, W), got {shape:?}")));
    }
    match cfg.branch {
        Branch::TwoD if shape[2] != 1 => {
            return Err(Error::invalid(format!("2D branch expects depth 1, got {}", shape[2])))
        }
        Branch::ThreeD if shape[2] < MIN_DEPTH => {
            return Err(Error::SequenceTooShort { len: shape[2], needed: MIN_DEPTH })
        }
        _ => {}
    }
    let h = ctx.conv(x, "backbone.conv1", stem_spec(cfg.branch))?;
    let h = ctx.batch_norm(h, "backbone.bn1")?;
    let h = ctx.graph.relu(h);
    let mut h = ctx.graph.max_pool(h, STEM_POOL)?;
    let mut taps = [[h; 2]; 4];
    for stage in 1..=4 {
        for block in 1..=2 {
            let stride = if block == 1 { block_stride(cfg.branch, stage) } else { [1, 1, 1] };
            h = basic_block(ctx, cfg.branch, &block_prefix(stage, block), h, stride)?;
            taps[stage - 1][block - 1] = h;
        }
    }
    Ok(FeatureTaps::new(taps))
}
