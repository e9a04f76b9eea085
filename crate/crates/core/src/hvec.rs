//! Hierarchical view-ensemble convolution blocks.
//!
//! A sub-block splits its input into four channel groups and runs them
//! through serially coupled branches: three 2-D-oriented convolutions
//! (1x3x3, 3x1x3, 3x3x1) covering the orthogonal views of the volume, and a
//! focal branch that convolves at half resolution for wider context. Each
//! branch also receives the previous branch's output added to its group.
//! The branch outputs are concatenated and fused by a 1x1x1 convolution,
//! followed by group normalization and ReLU.
//!
//! A full module is two sub-blocks under a residual shortcut; the shortcut
//! is the identity when the channel count is preserved and a 1x1x1
//! projection otherwise.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::tensor::{dims5, Element, Graph, Tensor, Var};

pub const NORM_GROUPS: usize = 4;
pub const NORM_EPS: f64 = 1e-5;

/// Indices of one convolution's weight/bias in the parameter set.
#[derive(Clone, Copy, Debug)]
pub struct ConvRef {
    pub weight: usize,
    pub bias: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct NormRef {
    pub gamma: usize,
    pub beta: usize,
}

/// Uniform fan-in initialization, `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`;
/// biases start at zero, norm scale at one. The normalization layers erase
/// any gain inside sub-blocks, so the bound mainly sets the scale of
/// shortcut projections and heads, where a larger gain lets residual drift
/// saturate the sigmoid outputs at initialization.
fn init_conv<T: Element>(
    ps: &mut ParamSet<T>,
    prefix: &str,
    cout: usize,
    cin: usize,
    kernel: [usize; 3],
    rng: &mut ChaCha8Rng,
) -> Result<ConvRef> {
    let fan_in = cin * kernel[0] * kernel[1] * kernel[2];
    let bound = (1.0 / fan_in as f64).sqrt();
    let shape = [cout, cin, kernel[0], kernel[1], kernel[2]];
    let data: Vec<T> = (0..shape.iter().product::<usize>())
        .map(|_| T::from_f64(rng.random_range(-bound..bound)))
        .collect();
    let weight = ps.add(format!("{prefix}.weight"), Tensor::from_vec(&shape, data)?)?;
    let bias = ps.add(format!("{prefix}.bias"), Tensor::zeros(&[cout]))?;
    Ok(ConvRef { weight, bias })
}

fn init_norm<T: Element>(ps: &mut ParamSet<T>, prefix: &str, channels: usize) -> Result<NormRef> {
    let gamma = ps.add(
        format!("{prefix}.gamma"),
        Tensor::full(&[channels], T::one()),
    )?;
    let beta = ps.add(format!("{prefix}.beta"), Tensor::zeros(&[channels]))?;
    Ok(NormRef { gamma, beta })
}

/// Register a 1x1x1 convolution (stems, skip projections, heads).
pub(crate) fn init_pointwise_conv<T: Element>(
    ps: &mut ParamSet<T>,
    prefix: &str,
    cin: usize,
    cout: usize,
    rng: &mut ChaCha8Rng,
) -> Result<ConvRef> {
    init_conv(ps, prefix, cout, cin, [1, 1, 1], rng)
}

/// Apply a registered convolution with stride 1 and the given padding.
pub(crate) fn apply_conv<T: Element>(
    g: &mut Graph<T>,
    vars: &[Var],
    conv: ConvRef,
    x: Var,
    padding: [usize; 3],
) -> Result<Var> {
    g.conv3d(
        x,
        vars[conv.weight],
        Some(vars[conv.bias]),
        [1, 1, 1],
        padding,
    )
}

#[derive(Clone, Copy, Debug)]
pub struct HvecSubBlockConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    /// Run the fourth branch at half resolution (trilinear 2x down and up).
    pub focal_downsample: bool,
}

impl HvecSubBlockConfig {
    pub fn new(in_channels: usize, out_channels: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            focal_downsample: true,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || !self.in_channels.is_multiple_of(4) {
            return Err(Error::Config(format!(
                "sub-block input channels must be a positive multiple of 4, got {}",
                self.in_channels
            )));
        }
        if self.out_channels == 0 || !self.out_channels.is_multiple_of(NORM_GROUPS) {
            return Err(Error::Config(format!(
                "sub-block output channels must be a positive multiple of {NORM_GROUPS} \
                 (group-norm groups), got {}",
                self.out_channels
            )));
        }
        Ok(())
    }
}

/// One HVEC sub-block: four serial branches, 1x1x1 fusion, norm, ReLU.
#[derive(Clone, Debug)]
pub struct HvecSubBlock {
    pub cfg: HvecSubBlockConfig,
    branches: [ConvRef; 4],
    fuse: ConvRef,
    norm: NormRef,
}

/// Kernel extents and same-paddings of the four branches, in serial order:
/// axial, coronal, sagittal views, then the focal (down-sampled axial) view.
const BRANCH_KERNELS: [([usize; 3], [usize; 3]); 4] = [
    ([1, 3, 3], [0, 1, 1]),
    ([3, 1, 3], [1, 0, 1]),
    ([3, 3, 1], [1, 1, 0]),
    ([1, 3, 3], [0, 1, 1]),
];

impl HvecSubBlock {
    pub fn build<T: Element>(
        prefix: &str,
        cfg: HvecSubBlockConfig,
        ps: &mut ParamSet<T>,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let group = cfg.in_channels / 4;
        let mut branches = Vec::with_capacity(4);
        for (k, (kernel, _)) in BRANCH_KERNELS.iter().enumerate() {
            branches.push(init_conv(
                ps,
                &format!("{prefix}.branch{}", k + 1),
                group,
                group,
                *kernel,
                rng,
            )?);
        }
        let fuse = init_conv(
            ps,
            &format!("{prefix}.fuse"),
            cfg.out_channels,
            cfg.in_channels,
            [1, 1, 1],
            rng,
        )?;
        let norm = init_norm(ps, &format!("{prefix}.norm"), cfg.out_channels)?;
        Ok(Self {
            cfg,
            branches: branches.try_into().expect("exactly four branches"),
            fuse,
            norm,
        })
    }

    /// Forward pass returning the fused output and the four branch outputs.
    pub fn forward_with_branches<T: Element>(
        &self,
        g: &mut Graph<T>,
        x: Var,
        vars: &[Var],
    ) -> Result<(Var, [Var; 4])> {
        let [_, c, d, h, w] = dims5(g.value(x).shape())?;
        if c != self.cfg.in_channels {
            return Err(Error::Shape(format!(
                "sub-block expects {} input channels, got {c}",
                self.cfg.in_channels
            )));
        }
        if self.cfg.focal_downsample && (d % 2 != 0 || h % 2 != 0 || w % 2 != 0) {
            return Err(Error::Shape(format!(
                "sub-block with focal down-sampling requires even spatial dims, got {d}x{h}x{w}"
            )));
        }
        let group = c / 4;
        let groups = g.split_channels(x, &[group; 4])?;

        let y1 = apply_conv(g, vars, self.branches[0], groups[0], BRANCH_KERNELS[0].1)?;
        let in2 = g.add(groups[1], y1)?;
        let y2 = apply_conv(g, vars, self.branches[1], in2, BRANCH_KERNELS[1].1)?;
        let in3 = g.add(groups[2], y2)?;
        let y3 = apply_conv(g, vars, self.branches[2], in3, BRANCH_KERNELS[2].1)?;
        let in4 = g.add(groups[3], y3)?;
        let y4 = if self.cfg.focal_downsample {
            let down = g.resize3(in4, [d / 2, h / 2, w / 2])?;
            let conv = apply_conv(g, vars, self.branches[3], down, BRANCH_KERNELS[3].1)?;
            g.resize3(conv, [d, h, w])?
        } else {
            apply_conv(g, vars, self.branches[3], in4, BRANCH_KERNELS[3].1)?
        };

        let cat = g.concat_channels(&[y1, y2, y3, y4])?;
        let fused = apply_conv(g, vars, self.fuse, cat, [0, 0, 0])?;
        let normed = g.group_norm(
            fused,
            vars[self.norm.gamma],
            vars[self.norm.beta],
            NORM_GROUPS,
            NORM_EPS,
        )?;
        Ok((g.relu(normed), [y1, y2, y3, y4]))
    }

    pub fn forward<T: Element>(&self, g: &mut Graph<T>, x: Var, vars: &[Var]) -> Result<Var> {
        Ok(self.forward_with_branches(g, x, vars)?.0)
    }
}

/// Two sub-blocks under a medium-range residual shortcut.
#[derive(Clone, Debug)]
pub struct HvecModule {
    pub in_channels: usize,
    pub out_channels: usize,
    pub sub1: HvecSubBlock,
    pub sub2: HvecSubBlock,
    shortcut: Option<ConvRef>,
}

impl HvecModule {
    pub fn build<T: Element>(
        prefix: &str,
        in_channels: usize,
        out_channels: usize,
        ps: &mut ParamSet<T>,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let sub1 = HvecSubBlock::build(
            &format!("{prefix}.sub1"),
            HvecSubBlockConfig::new(in_channels, out_channels),
            ps,
            rng,
        )?;
        let sub2 = HvecSubBlock::build(
            &format!("{prefix}.sub2"),
            HvecSubBlockConfig::new(out_channels, out_channels),
            ps,
            rng,
        )?;
        let shortcut = if in_channels == out_channels {
            None
        } else {
            Some(init_conv(
                ps,
                &format!("{prefix}.shortcut"),
                out_channels,
                in_channels,
                [1, 1, 1],
                rng,
            )?)
        };
        Ok(Self {
            in_channels,
            out_channels,
            sub1,
            sub2,
            shortcut,
        })
    }

    pub fn forward<T: Element>(&self, g: &mut Graph<T>, x: Var, vars: &[Var]) -> Result<Var> {
        let mid = self.sub1.forward(g, x, vars)?;
        let out = self.sub2.forward(g, mid, vars)?;
        let short = match self.shortcut {
            None => x,
            Some(conv) => apply_conv(g, vars, conv, x, [0, 0, 0])?,
        };
        g.add(out, short)
    }
}

/// Convolution parameters (weights + biases) of one sub-block: four branch
/// convolutions at `9*(C_in/4)^2 + C_in/4` each plus the fusion conv.
pub fn hvec_subblock_conv_params(in_channels: usize, out_channels: usize) -> usize {
    let group = in_channels / 4;
    4 * (9 * group * group + group) + in_channels * out_channels + out_channels
}

/// Group-norm affine parameters of one sub-block.
pub fn hvec_subblock_norm_params(out_channels: usize) -> usize {
    2 * out_channels
}

/// All parameters of a full module (both sub-blocks, norms, shortcut).
pub fn hvec_module_params(in_channels: usize, out_channels: usize) -> usize {
    let mut total = hvec_subblock_conv_params(in_channels, out_channels)
        + hvec_subblock_norm_params(out_channels)
        + hvec_subblock_conv_params(out_channels, out_channels)
        + hvec_subblock_norm_params(out_channels);
    if in_channels != out_channels {
        total += in_channels * out_channels + out_channels;
    }
    total
}

/// Parameters of the dense 3x3x3 convolution an HVEC sub-block replaces.
pub fn dense3d_param_count(in_channels: usize, out_channels: usize) -> usize {
    27 * in_channels * out_channels + out_channels
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(42)
    }

    fn rand_input(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..shape.iter().product::<usize>())
            .map(|_| r.random_range(-1.0..1.0))
            .collect();
        Tensor::from_vec(shape, data).unwrap()
    }

    #[test]
    fn subblock_preserves_spatial_shape() {
        let mut ps = ParamSet::<f64>::new();
        let sb =
            HvecSubBlock::build("sb", HvecSubBlockConfig::new(8, 12), &mut ps, &mut rng()).unwrap();
        for dims in [[2, 2, 2], [4, 6, 2], [6, 4, 8]] {
            let mut g = Graph::new();
            let x = g.constant(rand_input(&[1, 8, dims[0], dims[1], dims[2]], 1));
            let vars = ps.bind_all(&mut g);
            let y = sb.forward(&mut g, x, &vars).unwrap();
            assert_eq!(
                g.value(y).shape(),
                &[1, 12, dims[0], dims[1], dims[2]],
                "dims {dims:?}"
            );
        }
    }

    #[test]
    fn focal_branch_can_run_at_native_resolution() {
        let mut ps = ParamSet::<f64>::new();
        let cfg = HvecSubBlockConfig {
            focal_downsample: false,
            ..HvecSubBlockConfig::new(4, 4)
        };
        let sb = HvecSubBlock::build("sb", cfg, &mut ps, &mut rng()).unwrap();
        // odd spatial dims are fine without the 2x focal resampling
        let mut g = Graph::new();
        let x = g.constant(rand_input(&[1, 4, 3, 5, 5], 2));
        let vars = ps.bind_all(&mut g);
        let y = sb.forward(&mut g, x, &vars).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 4, 3, 5, 5]);
    }

    #[test]
    fn subblock_rejects_bad_channels_and_odd_dims() {
        let mut ps = ParamSet::<f64>::new();
        assert!(
            HvecSubBlock::build("sb", HvecSubBlockConfig::new(6, 8), &mut ps, &mut rng()).is_err()
        );

        let mut ps = ParamSet::<f64>::new();
        let sb =
            HvecSubBlock::build("sb", HvecSubBlockConfig::new(4, 4), &mut ps, &mut rng()).unwrap();
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 4, 3, 4, 4]));
        let vars = ps.bind_all(&mut g);
        assert!(sb.forward(&mut g, x, &vars).is_err());
    }

    #[test]
    fn parameter_counts_match_closed_form() {
        assert_eq!(hvec_subblock_conv_params(16, 16), 864);
        assert_eq!(dense3d_param_count(16, 16), 6928);
        assert!(hvec_subblock_conv_params(16, 16) < dense3d_param_count(16, 16));

        // registered parameters agree with the closed form
        let mut ps = ParamSet::<f64>::new();
        HvecSubBlock::build("sb", HvecSubBlockConfig::new(16, 16), &mut ps, &mut rng()).unwrap();
        let conv_scalars: usize = ps
            .iter()
            .filter(|p| !p.name.contains(".norm."))
            .map(|p| p.value.numel())
            .sum();
        assert_eq!(conv_scalars, 864);
        let norm_scalars: usize = ps
            .iter()
            .filter(|p| p.name.contains(".norm."))
            .map(|p| p.value.numel())
            .sum();
        assert_eq!(norm_scalars, hvec_subblock_norm_params(16));
    }

    #[test]
    fn two_subblocks_beat_dense_conv_for_all_widths() {
        for c in [8usize, 16, 32, 64] {
            let two = 2 * hvec_subblock_conv_params(c, c);
            assert!(two < dense3d_param_count(c, c), "width {c}: {two}");
        }
    }

    #[test]
    fn projection_shortcut_has_expected_size() {
        let mut ps = ParamSet::<f64>::new();
        HvecModule::build("m", 16, 32, &mut ps, &mut rng()).unwrap();
        let w = ps.index_of("m.shortcut.weight").unwrap();
        let b = ps.index_of("m.shortcut.bias").unwrap();
        assert_eq!(ps.get(w).value.numel() + ps.get(b).value.numel(), 544);
        assert_eq!(hvec_module_params(16, 32), ps.total_scalars());
    }

    #[test]
    fn identity_shortcut_when_width_preserved() {
        let mut ps = ParamSet::<f64>::new();
        HvecModule::build("m", 8, 8, &mut ps, &mut rng()).unwrap();
        assert!(ps.index_of("m.shortcut.weight").is_none());
        assert_eq!(hvec_module_params(8, 8), ps.total_scalars());
    }

    #[test]
    fn residual_identity_at_zeroed_convolutions() {
        let mut ps = ParamSet::<f64>::new();
        let m = HvecModule::build("m", 8, 8, &mut ps, &mut rng()).unwrap();
        for p in ps.iter_mut() {
            if !p.name.contains(".norm.") {
                p.value.fill(0.0);
            }
        }
        let input = rand_input(&[2, 8, 4, 4, 4], 3);
        let mut g = Graph::new();
        let x = g.constant(input.clone());
        let vars = ps.bind_all(&mut g);
        let y = m.forward(&mut g, x, &vars).unwrap();
        assert_eq!(g.value(y).data(), input.data());
    }

    #[test]
    fn serial_order_isolates_leading_branches() {
        // zeroing group 4 leaves branches 1-3 bit-identical; zeroing
        // group 1 changes branch 1
        let mut ps = ParamSet::<f64>::new();
        let sb =
            HvecSubBlock::build("sb", HvecSubBlockConfig::new(8, 8), &mut ps, &mut rng()).unwrap();
        let base = rand_input(&[1, 8, 4, 4, 4], 4);
        let vol: usize = 4 * 4 * 4;

        let run = |input: Tensor<f64>| {
            let mut g = Graph::new();
            let x = g.constant(input);
            let vars = ps.bind_all(&mut g);
            let (_, branches) = sb.forward_with_branches(&mut g, x, &vars).unwrap();
            branches.map(|b| g.value(b).data().to_vec())
        };

        let reference = run(base.clone());

        let mut zero_g4 = base.clone();
        zero_g4.data_mut()[6 * vol..8 * vol].fill(0.0);
        let variant = run(zero_g4);
        for k in 0..3 {
            assert_eq!(reference[k], variant[k], "branch {} changed", k + 1);
        }

        let mut zero_g1 = base;
        zero_g1.data_mut()[0..2 * vol].fill(0.0);
        let variant = run(zero_g1);
        assert_ne!(reference[0], variant[0], "branch 1 should change");
    }

    #[test]
    fn subblock_gradients_match_finite_differences() {
        // out width 8 keeps two channels per norm group; with one channel
        // per group the fusion bias has an exactly-zero gradient that the
        // relative-error floor turns into pure finite-difference noise
        let mut ps = ParamSet::<f64>::new();
        let sb =
            HvecSubBlock::build("sb", HvecSubBlockConfig::new(4, 8), &mut ps, &mut rng()).unwrap();
        let mut inputs = vec![rand_input(&[1, 4, 4, 4, 4], 5)];
        inputs.extend(ps.iter().map(|p| p.value.clone()));
        let f = move |g: &mut Graph<f64>, v: &[Var]| {
            let y = sb.forward(g, v[0], &v[1..])?;
            let sq = g.mul(y, y)?;
            Ok(g.sum(sq))
        };
        let report = crate::tensor::grad_check(&f, &inputs, 1e-5).unwrap();
        assert!(report.max_rel_err < 1e-5, "err {}", report.max_rel_err);
    }

    #[test]
    fn stacked_modules_gradients_match_finite_differences() {
        let mut ps = ParamSet::<f64>::new();
        let mut r = rng();
        let m1 = HvecModule::build("m1", 4, 8, &mut ps, &mut r).unwrap();
        let m2 = HvecModule::build("m2", 8, 8, &mut ps, &mut r).unwrap();
        let mut inputs = vec![rand_input(&[1, 4, 2, 4, 4], 6)];
        inputs.extend(ps.iter().map(|p| p.value.clone()));
        let f = move |g: &mut Graph<f64>, v: &[Var]| {
            let a = m1.forward(g, v[0], &v[1..])?;
            let b = m2.forward(g, a, &v[1..])?;
            let s = g.sigmoid(b);
            Ok(g.sum(s))
        };
        let report = crate::tensor::grad_check(&f, &inputs, 1e-5).unwrap();
        assert!(report.max_rel_err < 1e-5, "err {}", report.max_rel_err);
    }
}
