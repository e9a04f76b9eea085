//! The full multi-task network: a shared encoder and two task-specific
//! decoders built from HVEC modules.
//!
//! The encoder is a 1x1x1 stem followed by three {HVEC module, 2x max-pool}
//! stages. Each decoder stage restores resolution with trilinear
//! interpolation, projects the matching encoder skip with a 1x1x1
//! convolution, sums it into the stream (long-range residual learning) and
//! applies an HVEC module. The detection decoder ends in a sigmoid head
//! regressing the normalized centerline proximity map. The segmentation
//! decoder is wider, receives the detection path's final feature map by
//! channel concatenation, runs one extra HVEC module on the fused features
//! and ends in a sigmoid head producing foreground probabilities.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hvec::{
    apply_conv, dense3d_param_count, hvec_module_params, hvec_subblock_conv_params, ConvRef,
    HvecModule,
};
use crate::params::ParamSet;
use crate::tensor::{dims5, Element, Graph, Tensor, Var};

fn default_stages() -> usize {
    3
}
fn default_encoder_channels() -> Vec<usize> {
    vec![16, 32, 64, 128]
}
fn default_seg_channels() -> Vec<usize> {
    vec![64, 32, 16]
}
fn default_det_channels() -> Vec<usize> {
    vec![32, 16, 8]
}
fn default_lambda() -> f64 {
    0.7
}
fn default_groups() -> usize {
    4
}

/// Architecture hyperparameters. All widths must be multiples of 4 (the
/// HVEC group constraint) and the detection decoder must not be wider than
/// the segmentation decoder at any stage.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub stages: usize,
    /// Stem width followed by the output width of each encoder stage.
    pub encoder_channels: Vec<usize>,
    pub seg_decoder_channels: Vec<usize>,
    pub det_decoder_channels: Vec<usize>,
    /// Trade-off between segmentation and proximity-regression losses.
    pub lambda: f64,
    pub groups: usize,
    /// Drop the detection decoder and the cross-path concatenation.
    pub single_task: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            stages: default_stages(),
            encoder_channels: default_encoder_channels(),
            seg_decoder_channels: default_seg_channels(),
            det_decoder_channels: default_det_channels(),
            lambda: default_lambda(),
            groups: default_groups(),
            single_task: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stages != 3 {
            return Err(Error::Config(format!(
                "architecture is defined for exactly 3 stages, got {}",
                self.stages
            )));
        }
        if self.groups != 4 {
            return Err(Error::Config(format!(
                "HVEC uses exactly 4 channel groups, got {}",
                self.groups
            )));
        }
        if self.encoder_channels.len() != self.stages + 1 {
            return Err(Error::Config(format!(
                "encoder_channels needs {} entries (stem + one per stage), got {}",
                self.stages + 1,
                self.encoder_channels.len()
            )));
        }
        for (name, widths) in [
            ("seg_decoder_channels", &self.seg_decoder_channels),
            ("det_decoder_channels", &self.det_decoder_channels),
        ] {
            if widths.len() != self.stages {
                return Err(Error::Config(format!(
                    "{name} needs {} entries, got {}",
                    self.stages,
                    widths.len()
                )));
            }
        }
        let all_widths = self
            .encoder_channels
            .iter()
            .chain(&self.seg_decoder_channels)
            .chain(&self.det_decoder_channels);
        for &w in all_widths {
            if w == 0 || w % 4 != 0 {
                return Err(Error::Config(format!(
                    "channel width {w} is not a positive multiple of 4"
                )));
            }
        }
        for i in 0..self.stages {
            if self.det_decoder_channels[i] > self.seg_decoder_channels[i] {
                return Err(Error::Config(format!(
                    "detection decoder must not be wider than the segmentation decoder \
                     (stage {i}: {} > {})",
                    self.det_decoder_channels[i], self.seg_decoder_channels[i]
                )));
            }
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config(format!(
                "lambda must lie in [0, 1], got {}",
                self.lambda
            )));
        }
        Ok(())
    }

    /// Spatial divisor implied by the pooling stages.
    pub fn spatial_divisor(&self) -> usize {
        1 << self.stages
    }

    /// The effective loss weight: a single-task model is pure segmentation.
    pub fn effective_lambda(&self) -> f64 {
        if self.single_task {
            1.0
        } else {
            self.lambda
        }
    }
}

struct DecoderStage {
    skip_proj: ConvRef,
    module: HvecModule,
}

/// Per-component parameter totals, as reported by the CLI.
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq, Eq)]
pub struct ParamCounts {
    pub encoder: usize,
    pub seg_decoder: usize,
    pub det_decoder: usize,
    pub heads: usize,
    pub total: usize,
}

/// One row of the HVEC-vs-dense parameter comparison table.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct EfficiencyRow {
    pub channels: usize,
    pub hvec_subblock: usize,
    pub dense3x3x3: usize,
    pub ratio: f64,
}

pub struct EmNet {
    pub config: ModelConfig,
    stem: ConvRef,
    encoder: Vec<HvecModule>,
    det_stages: Vec<DecoderStage>,
    det_head: Option<ConvRef>,
    seg_stages: Vec<DecoderStage>,
    seg_fuse: HvecModule,
    seg_head: ConvRef,
}

/// Network outputs for one forward pass; `proximity` is absent on
/// single-task models.
pub struct NetOutputs {
    pub seg_prob: Var,
    pub proximity: Option<Var>,
}

impl EmNet {
    /// Construct the network and its freshly initialized parameters;
    /// initialization is deterministic in `seed`.
    pub fn build<T: Element>(config: ModelConfig, seed: u64) -> Result<(Self, ParamSet<T>)> {
        config.validate()?;
        let mut ps = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let enc = &config.encoder_channels;

        let stem = init_conv1(&mut ps, "stem", 1, enc[0], &mut rng)?;
        let mut encoder = Vec::with_capacity(config.stages);
        for i in 0..config.stages {
            encoder.push(HvecModule::build(
                &format!("encoder.hvec{i}"),
                enc[i],
                enc[i + 1],
                &mut ps,
                &mut rng,
            )?);
        }
        let bottom = enc[config.stages];
        // skip connections pair decoder stage i with encoder stage (last - i)
        let skip_widths: Vec<usize> = (0..config.stages).map(|i| enc[config.stages - i]).collect();

        let (det_stages, det_head) = if config.single_task {
            (Vec::new(), None)
        } else {
            let stages = build_decoder(
                "det",
                bottom,
                &skip_widths,
                &config.det_decoder_channels,
                &mut ps,
                &mut rng,
            )?;
            let head = init_conv1(
                &mut ps,
                "det.head",
                *config.det_decoder_channels.last().expect("validated"),
                1,
                &mut rng,
            )?;
            (stages, Some(head))
        };

        let seg_stages = build_decoder(
            "seg",
            bottom,
            &skip_widths,
            &config.seg_decoder_channels,
            &mut ps,
            &mut rng,
        )?;
        let seg_last = *config.seg_decoder_channels.last().expect("validated");
        let fuse_in = if config.single_task {
            seg_last
        } else {
            seg_last + *config.det_decoder_channels.last().expect("validated")
        };
        let seg_fuse = HvecModule::build(
            &format!("seg.hvec{}", config.stages),
            fuse_in,
            seg_last,
            &mut ps,
            &mut rng,
        )?;
        let seg_head = init_conv1(&mut ps, "seg.head", seg_last, 1, &mut rng)?;

        Ok((
            Self {
                config,
                stem,
                encoder,
                det_stages,
                det_head,
                seg_stages,
                seg_fuse,
                seg_head,
            },
            ps,
        ))
    }

    /// Run the network on a `[N, 1, D, H, W]` input whose spatial dims are
    /// divisible by 8. Outputs share the input's spatial shape and lie in
    /// (0, 1).
    pub fn forward<T: Element>(
        &self,
        g: &mut Graph<T>,
        x: Var,
        vars: &[Var],
    ) -> Result<NetOutputs> {
        let [_, c, d, h, w] = dims5(g.value(x).shape())?;
        if c != 1 {
            return Err(Error::Shape(format!(
                "expected a single input channel, got {c}"
            )));
        }
        let div = self.config.spatial_divisor();
        if d % div != 0 || h % div != 0 || w % div != 0 {
            return Err(Error::Shape(format!(
                "spatial dims {d}x{h}x{w} must be divisible by {div}"
            )));
        }

        let mut stream = apply_conv(g, vars, self.stem, x, [0, 0, 0])?;
        let mut skips = Vec::with_capacity(self.config.stages);
        for module in &self.encoder {
            let features = module.forward(g, stream, vars)?;
            skips.push(features);
            stream = g.maxpool2(features)?;
        }
        skips.reverse();

        let det_final = if self.config.single_task {
            None
        } else {
            Some(run_decoder(g, vars, stream, &skips, &self.det_stages)?)
        };
        let seg_final = run_decoder(g, vars, stream, &skips, &self.seg_stages)?;

        let fused_in = match det_final {
            Some(det_feat) => g.concat_channels(&[seg_final, det_feat])?,
            None => seg_final,
        };
        let fused = self.seg_fuse.forward(g, fused_in, vars)?;
        let seg_logits = apply_conv(g, vars, self.seg_head, fused, [0, 0, 0])?;
        let seg_prob = g.sigmoid(seg_logits);

        let proximity = match (det_final, self.det_head) {
            (Some(det_feat), Some(head)) => {
                let logits = apply_conv(g, vars, head, det_feat, [0, 0, 0])?;
                Some(g.sigmoid(logits))
            }
            _ => None,
        };
        Ok(NetOutputs {
            seg_prob,
            proximity,
        })
    }
}

fn init_conv1<T: Element>(
    ps: &mut ParamSet<T>,
    prefix: &str,
    cin: usize,
    cout: usize,
    rng: &mut ChaCha8Rng,
) -> Result<ConvRef> {
    crate::hvec::init_pointwise_conv(ps, prefix, cin, cout, rng)
}

fn build_decoder<T: Element>(
    path: &str,
    bottom: usize,
    skip_widths: &[usize],
    widths: &[usize],
    ps: &mut ParamSet<T>,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<DecoderStage>> {
    let mut stages = Vec::with_capacity(widths.len());
    let mut stream = bottom;
    for (i, (&target, &skip)) in widths.iter().zip(skip_widths).enumerate() {
        let skip_proj = init_conv1(ps, &format!("{path}.proj{i}"), skip, stream, rng)?;
        let module = HvecModule::build(&format!("{path}.hvec{i}"), stream, target, ps, rng)?;
        stages.push(DecoderStage { skip_proj, module });
        stream = target;
    }
    Ok(stages)
}

fn run_decoder<T: Element>(
    g: &mut Graph<T>,
    vars: &[Var],
    bottom: Var,
    skips: &[Var],
    stages: &[DecoderStage],
) -> Result<Var> {
    let mut stream = bottom;
    for (stage, &skip) in stages.iter().zip(skips) {
        let [_, _, d, h, w] = dims5(g.value(skip).shape())?;
        let up = g.resize3(stream, [d, h, w])?;
        let proj = apply_conv(g, vars, stage.skip_proj, skip, [0, 0, 0])?;
        let summed = g.add(up, proj)?;
        stream = stage.module.forward(g, summed, vars)?;
    }
    Ok(stream)
}

fn conv1_params(cin: usize, cout: usize) -> usize {
    cin * cout + cout
}

/// Closed-form parameter accounting, a pure function of the config. Agrees
/// exactly with the number of scalars registered by [`EmNet::build`].
pub fn param_count(config: &ModelConfig) -> Result<ParamCounts> {
    config.validate()?;
    let enc = &config.encoder_channels;
    let stages = config.stages;

    let mut encoder = conv1_params(1, enc[0]);
    for i in 0..stages {
        encoder += hvec_module_params(enc[i], enc[i + 1]);
    }
    let bottom = enc[stages];
    let skip_widths: Vec<usize> = (0..stages).map(|i| enc[stages - i]).collect();

    let decoder_params = |widths: &[usize]| {
        let mut total = 0;
        let mut stream = bottom;
        for (&target, &skip) in widths.iter().zip(&skip_widths) {
            total += conv1_params(skip, stream);
            total += hvec_module_params(stream, target);
            stream = target;
        }
        total
    };

    let det_decoder = if config.single_task {
        0
    } else {
        decoder_params(&config.det_decoder_channels)
    };
    let seg_last = *config.seg_decoder_channels.last().expect("validated");
    let det_last = *config.det_decoder_channels.last().expect("validated");
    let fuse_in = if config.single_task {
        seg_last
    } else {
        seg_last + det_last
    };
    let seg_decoder =
        decoder_params(&config.seg_decoder_channels) + hvec_module_params(fuse_in, seg_last);

    let mut heads = conv1_params(seg_last, 1);
    if !config.single_task {
        heads += conv1_params(det_last, 1);
    }

    Ok(ParamCounts {
        encoder,
        seg_decoder,
        det_decoder,
        heads,
        total: encoder + seg_decoder + det_decoder + heads,
    })
}

/// HVEC sub-block vs dense 3x3x3 parameter comparison for each distinct
/// width in the config.
pub fn efficiency_table(config: &ModelConfig) -> Vec<EfficiencyRow> {
    let mut widths: Vec<usize> = config
        .encoder_channels
        .iter()
        .chain(&config.seg_decoder_channels)
        .chain(&config.det_decoder_channels)
        .copied()
        .collect();
    widths.sort_unstable();
    widths.dedup();
    widths
        .into_iter()
        .map(|c| {
            let hvec = hvec_subblock_conv_params(c, c);
            let dense = dense3d_param_count(c, c);
            EfficiencyRow {
                channels: c,
                hvec_subblock: hvec,
                dense3x3x3: dense,
                ratio: hvec as f64 / dense as f64,
            }
        })
        .collect()
}

/// Convenience wrapper: bind parameters and run one forward pass,
/// returning the tensors.
pub fn infer<T: Element>(
    net: &EmNet,
    params: &ParamSet<T>,
    input: &Tensor<T>,
) -> Result<(Tensor<T>, Option<Tensor<T>>)> {
    let mut g = Graph::new();
    let x = g.constant(input.clone());
    let vars = params.bind_all(&mut g);
    let out = net.forward(&mut g, x, &vars)?;
    let seg = g.value(out.seg_prob).clone();
    let prox = out.proximity.map(|p| g.value(p).clone());
    Ok((seg, prox))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    pub fn tiny_config() -> ModelConfig {
        ModelConfig {
            encoder_channels: vec![4, 8, 8, 8],
            seg_decoder_channels: vec![8, 8, 4],
            det_decoder_channels: vec![4, 4, 4],
            ..ModelConfig::default()
        }
    }

    fn rand_input(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..shape.iter().product::<usize>())
            .map(|_| r.random_range(0.0..1.0))
            .collect();
        Tensor::from_vec(shape, data).unwrap()
    }

    #[test]
    fn outputs_match_input_shape_and_range() {
        let (net, ps) = EmNet::build::<f64>(ModelConfig::default(), 7).unwrap();
        let input = rand_input(&[1, 1, 16, 16, 16], 1);
        let (seg, prox) = infer(&net, &ps, &input).unwrap();
        assert_eq!(seg.shape(), &[1, 1, 16, 16, 16]);
        let prox = prox.expect("multi-task model emits a proximity map");
        assert_eq!(prox.shape(), &[1, 1, 16, 16, 16]);
        for &v in seg.data().iter().chain(prox.data()) {
            assert!(v > 0.0 && v < 1.0, "output {v} outside (0,1)");
        }
    }

    #[test]
    fn rejects_indivisible_spatial_dims() {
        let (net, ps) = EmNet::build::<f64>(tiny_config(), 7).unwrap();
        let input = rand_input(&[1, 1, 12, 16, 16], 1);
        assert!(infer(&net, &ps, &input).is_err());
    }

    #[test]
    fn single_task_variant_drops_detection() {
        let cfg = ModelConfig {
            single_task: true,
            ..tiny_config()
        };
        let (net, ps) = EmNet::build::<f64>(cfg, 7).unwrap();
        let input = rand_input(&[1, 1, 8, 8, 8], 2);
        let (seg, prox) = infer(&net, &ps, &input).unwrap();
        assert_eq!(seg.shape(), &[1, 1, 8, 8, 8]);
        assert!(prox.is_none());
        assert!(ps.iter().all(|p| !p.name.starts_with("det.")));
    }

    #[test]
    fn encoder_is_shared_between_variants() {
        let multi = EmNet::build::<f64>(tiny_config(), 11).unwrap().1;
        let single = EmNet::build::<f64>(
            ModelConfig {
                single_task: true,
                ..tiny_config()
            },
            11,
        )
        .unwrap()
        .1;
        let enc_names = |ps: &ParamSet<f64>| {
            ps.iter()
                .filter(|p| p.name.starts_with("encoder.") || p.name.starts_with("stem"))
                .map(|p| (p.name.clone(), p.value.shape().to_vec()))
                .collect::<Vec<_>>()
        };
        assert_eq!(enc_names(&multi), enc_names(&single));
    }

    #[test]
    fn forward_is_deterministic() {
        let (net, ps) = EmNet::build::<f32>(tiny_config(), 3).unwrap();
        let input = rand_input(&[2, 1, 8, 8, 8], 5).cast::<f32>();
        let (a, _) = infer(&net, &ps, &input).unwrap();
        let (b, _) = infer(&net, &ps, &input).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn detection_path_feeds_segmentation() {
        // gradient of a pure segmentation loss w.r.t. a detection-path
        // parameter is nonzero through the cross concatenation
        let (net, ps) = EmNet::build::<f64>(tiny_config(), 13).unwrap();
        let input = rand_input(&[1, 1, 8, 8, 8], 6);
        let mut g = Graph::new();
        let x = g.constant(input);
        let vars = ps.bind_all(&mut g);
        let out = net.forward(&mut g, x, &vars).unwrap();
        let loss = g.sum(out.seg_prob);
        g.backward(loss).unwrap();

        let idx = ps.index_of("det.hvec2.sub2.fuse.weight").unwrap();
        let grad = g.grad(vars[idx]).expect("gradient must flow");
        assert!(grad.data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn param_count_matches_registered_parameters() {
        for cfg in [ModelConfig::default(), tiny_config()] {
            let counts = param_count(&cfg).unwrap();
            let ps = EmNet::build::<f64>(cfg.clone(), 1).unwrap().1;
            assert_eq!(counts.total, ps.total_scalars(), "config {cfg:?}");

            let sum_by = |prefixes: &[&str]| -> usize {
                ps.iter()
                    .filter(|p| prefixes.iter().any(|pre| p.name.starts_with(pre)))
                    .map(|p| p.value.numel())
                    .sum()
            };
            assert_eq!(
                counts.encoder,
                sum_by(&["stem", "encoder."]),
                "encoder breakdown"
            );
            assert_eq!(
                counts.heads,
                sum_by(&["seg.head", "det.head"]),
                "head breakdown"
            );
        }
    }

    #[test]
    fn tiny_config_total_matches_independent_count() {
        // frozen from a closed-form spreadsheet count of every layer
        let counts = param_count(&tiny_config()).unwrap();
        assert_eq!(counts.encoder, 1344);
        assert_eq!(counts.det_decoder, 716);
        assert_eq!(counts.seg_decoder, 1776);
        assert_eq!(counts.heads, 10);
        assert_eq!(counts.total, 3846);
    }

    #[test]
    fn doubling_widths_roughly_quadruples_conv_params() {
        let base = param_count(&ModelConfig::default()).unwrap();
        let doubled = param_count(&ModelConfig {
            encoder_channels: vec![32, 64, 128, 256],
            seg_decoder_channels: vec![128, 64, 32],
            det_decoder_channels: vec![64, 32, 16],
            ..ModelConfig::default()
        })
        .unwrap();
        let ratio = doubled.total as f64 / base.total as f64;
        assert!((3.7..4.3).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn efficiency_rows_all_below_dense() {
        for row in efficiency_table(&ModelConfig::default()) {
            assert!(row.ratio < 1.0, "width {}", row.channels);
        }
    }

    #[test]
    fn config_validation_rejects_bad_widths() {
        let bad = ModelConfig {
            encoder_channels: vec![16, 30, 64, 128],
            ..ModelConfig::default()
        };
        assert!(bad.validate().is_err());

        let wider_det = ModelConfig {
            det_decoder_channels: vec![128, 16, 8],
            ..ModelConfig::default()
        };
        assert!(wider_det.validate().is_err());
    }
}
