//! Graph construction: conv units, dense blocks, residual-inception blocks,
//! and the full encoder-decoder network.

use std::collections::BTreeMap;

use super::{LayerGraph, LayerNode, LayerOp, NetConfig, ParamSpec};
use crate::error::{CunetError, Result};

struct GraphBuilder {
    nodes: Vec<LayerNode>,
    specs: Vec<ParamSpec>,
    dropout_rate: f64,
}

impl GraphBuilder {
    fn new(dropout_rate: f64) -> GraphBuilder {
        GraphBuilder {
            nodes: Vec::new(),
            specs: Vec::new(),
            dropout_rate,
        }
    }

    fn push(&mut self, name: String, op: LayerOp, inputs: Vec<usize>, channels: usize) -> usize {
        self.nodes.push(LayerNode {
            name,
            op,
            inputs,
            channels,
        });
        self.nodes.len() - 1
    }

    fn input(&mut self, channels: usize) -> usize {
        self.push("input".into(), LayerOp::Input, vec![], channels)
    }

    fn declare(&mut self, name: &str, shape: Vec<usize>) -> String {
        debug_assert!(
            !self.specs.iter().any(|s| s.name == name),
            "duplicate parameter name {name}"
        );
        self.specs.push(ParamSpec {
            name: name.to_string(),
            shape,
        });
        name.to_string()
    }

    /// Bare convolution node (used for projections and the head).
    fn conv(
        &mut self,
        input: usize,
        in_c: usize,
        out_c: usize,
        kernel: usize,
        dilation: usize,
        name: &str,
    ) -> usize {
        let weight = self.declare(&format!("{name}.w"), vec![out_c, in_c, kernel, kernel, kernel]);
        let bias = self.declare(&format!("{name}.b"), vec![out_c]);
        // "Same" padding: dilation * (k - 1) / 2 preserves extents at stride 1.
        let pad = dilation * (kernel - 1) / 2;
        self.push(
            name.to_string(),
            LayerOp::Conv {
                weight,
                bias,
                stride: [1; 3],
                dilation: [dilation; 3],
                padding: [pad; 3],
            },
            vec![input],
            out_c,
        )
    }

    /// CONV(3x3x3) - InstanceNorm - ReLU.
    fn conv_unit(&mut self, input: usize, in_c: usize, out_c: usize, dilation: usize, name: &str) -> usize {
        let c = self.conv(input, in_c, out_c, 3, dilation, name);
        let n = self.push(format!("{name}.in"), LayerOp::InstanceNorm, vec![c], out_c);
        self.push(format!("{name}.relu"), LayerOp::Relu, vec![n], out_c)
    }

    /// Dense block: three conv units; layer L sees the block input
    /// concatenated with every earlier layer's output. Layers 1 and 2 emit
    /// in_c/2 channels, layer 3 emits `out_c` (2*in_c on the encoder path).
    /// Dropout follows layer 1 only.
    fn dense_block(&mut self, input: usize, in_c: usize, out_c: usize, name: &str) -> Result<usize> {
        if in_c % 2 != 0 {
            return Err(CunetError::Graph(format!(
                "dense block `{name}` needs an even channel count, got {in_c}"
            )));
        }
        let mid = in_c / 2;
        let l1 = self.conv_unit(input, in_c, mid, 1, &format!("{name}.l1"));
        let l1 = if self.dropout_rate > 0.0 {
            self.push(format!("{name}.l1.drop"), LayerOp::Dropout, vec![l1], mid)
        } else {
            l1
        };
        let c2_in = self.push(
            format!("{name}.l2.cat"),
            LayerOp::Concat,
            vec![input, l1],
            in_c + mid,
        );
        let l2 = self.conv_unit(c2_in, in_c + mid, mid, 1, &format!("{name}.l2"));
        let c3_in = self.push(
            format!("{name}.l3.cat"),
            LayerOp::Concat,
            vec![input, l1, l2],
            2 * in_c,
        );
        Ok(self.conv_unit(c3_in, 2 * in_c, out_c, 1, &format!("{name}.l3")))
    }

    /// Residual-inception block: parallel dilated conv units chained by dense
    /// connections (each later branch also sees the earlier branch outputs),
    /// fused by addition together with the (projected) input.
    fn rib(&mut self, input: usize, in_c: usize, out_c: usize, rates: &[usize], name: &str) -> usize {
        let mut branch_outs: Vec<usize> = Vec::with_capacity(rates.len());
        for &rate in rates {
            let (feed, feed_c) = if branch_outs.is_empty() {
                (input, in_c)
            } else {
                let mut ins = vec![input];
                ins.extend(&branch_outs);
                let c = in_c + out_c * branch_outs.len();
                (
                    self.push(format!("{name}.b{rate}.cat"), LayerOp::Concat, ins, c),
                    c,
                )
            };
            let b = self.conv_unit(feed, feed_c, out_c, rate, &format!("{name}.b{rate}"));
            branch_outs.push(b);
        }
        let residual = if in_c == out_c {
            input
        } else {
            self.conv(input, in_c, out_c, 1, 1, &format!("{name}.proj"))
        };
        let mut acc = branch_outs[0];
        for (i, &b) in branch_outs.iter().enumerate().skip(1) {
            acc = self.push(format!("{name}.add{i}"), LayerOp::Add, vec![acc, b], out_c);
        }
        self.push(format!("{name}.add_res"), LayerOp::Add, vec![acc, residual], out_c)
    }

    fn finish(
        self,
        cfg: Option<NetConfig>,
        output: usize,
        pool_levels: usize,
        input_channels: usize,
    ) -> LayerGraph {
        LayerGraph {
            cfg,
            nodes: self.nodes,
            specs: self.specs,
            params: BTreeMap::new(),
            output,
            pool_levels,
            input_channels,
            dropout_rate: self.dropout_rate,
        }
    }
}

impl LayerGraph {
    /// Standalone encoder dense block: `in_c` channels in, `2*in_c` out.
    pub fn dense_block(in_c: usize, dropout_rate: f64, name: &str) -> Result<LayerGraph> {
        LayerGraph::dense_block_emitting(in_c, 2 * in_c, dropout_rate, name)
    }

    /// Standalone dense block emitting `out_c` channels (the decoder variant
    /// keeps the level width instead of doubling).
    pub fn dense_block_emitting(
        in_c: usize,
        out_c: usize,
        dropout_rate: f64,
        name: &str,
    ) -> Result<LayerGraph> {
        let mut b = GraphBuilder::new(dropout_rate);
        let input = b.input(in_c);
        let out = b.dense_block(input, in_c, out_c, name)?;
        Ok(b.finish(None, out, 0, in_c))
    }

    /// Standalone residual-inception block.
    pub fn rib(in_c: usize, out_c: usize, rates: &[usize], name: &str) -> Result<LayerGraph> {
        if in_c == 0 || out_c == 0 || rates.is_empty() {
            return Err(CunetError::Graph(format!(
                "rib `{name}` needs positive channels and at least one rate"
            )));
        }
        let mut b = GraphBuilder::new(0.0);
        let input = b.input(in_c);
        let out = b.rib(input, in_c, out_c, rates, name);
        Ok(b.finish(None, out, 0, in_c))
    }

    /// Build the full encoder-decoder network:
    ///
    /// * stem: a conv unit and a RIB, each emitting base/2 channels,
    ///   concatenated to `base_width`;
    /// * encoder: one doubling dense block per level with 2x max pooling
    ///   between levels;
    /// * decoder: 2x upsampling, a channel-halving RIB, addition of the
    ///   encoder skip, then a width-preserving dense block;
    /// * head: 1x1x1 conv to `num_classes` followed by channel softmax.
    pub fn network(cfg: &NetConfig) -> Result<LayerGraph> {
        cfg.validate()?;
        let mut b = GraphBuilder::new(cfg.dropout_rate);
        let m = cfg.in_modalities;
        let half = cfg.base_width / 2;
        let input = b.input(m);

        let stem_conv = b.conv_unit(input, m, half, 1, "stem.conv");
        let stem_rib = b.rib(input, m, half, &cfg.rib_rates, "stem.rib");
        let mut x = b.push(
            "stem.cat".into(),
            LayerOp::Concat,
            vec![stem_conv, stem_rib],
            cfg.base_width,
        );
        let mut c = cfg.base_width;

        let mut skips: Vec<usize> = Vec::with_capacity(cfg.depth);
        for (i, &width) in cfg.encoder_widths.iter().enumerate() {
            x = b.dense_block(x, c, width, &format!("enc{i}"))?;
            c = width;
            skips.push(x);
            if i + 1 < cfg.depth {
                x = b.push(format!("enc{i}.pool"), LayerOp::MaxPool, vec![x], c);
            }
        }

        for i in (0..cfg.depth.saturating_sub(1)).rev() {
            let width = cfg.encoder_widths[i];
            x = b.push(format!("dec{i}.up"), LayerOp::Upsample, vec![x], c);
            x = b.rib(x, c, width, &cfg.rib_rates, &format!("dec{i}.rib"));
            x = b.push(format!("dec{i}.skip"), LayerOp::Add, vec![x, skips[i]], width);
            x = b.dense_block(x, width, width, &format!("dec{i}.dense"))?;
            c = width;
        }

        let logits = b.conv(x, c, cfg.num_classes, 1, 1, "head");
        let probs = b.push("probs".into(), LayerOp::SoftmaxChannels, vec![logits], cfg.num_classes);
        Ok(b.finish(Some(cfg.clone()), probs, cfg.depth - 1, m))
    }
}

#[cfg(test)]
mod tests {
    use super::super::Mode;
    use super::*;
    use crate::tensor::Tensor;
    use crate::util::seeded_rng;
    use rand::Rng;

    #[test]
    fn dense_block_wiring_channel_counts() {
        // in 16: layers emit 8, 8, 32; layer-3 input is 16 + 8 + 8 = 32.
        let g = LayerGraph::dense_block(16, 0.2, "blk").unwrap();
        let shapes = g.check_shapes(1, [8, 8, 8]).unwrap();
        let find = |n: &str| shapes.iter().find(|(name, _)| name == n).unwrap().1;
        assert_eq!(find("blk.l1.relu")[1], 8);
        assert_eq!(find("blk.l2.cat")[1], 24);
        assert_eq!(find("blk.l3.cat")[1], 32);
        assert_eq!(find("blk.l3.relu")[1], 32);
        // Spatial extents preserved throughout.
        for (_, s) in &shapes {
            assert_eq!(&s[2..], &[8, 8, 8]);
        }
    }

    #[test]
    fn dense_block_rejects_odd_channels() {
        assert!(LayerGraph::dense_block(5, 0.2, "blk").is_err());
    }

    #[test]
    fn dense_block_parameter_count_matches_hand_count() {
        // in 4 -> out 8: l1 (4->2), l2 (6->2), l3 (8->8), all 3x3x3.
        let g = LayerGraph::dense_block(4, 0.2, "blk").unwrap();
        let hand = (2 * 4 * 27 + 2) + (2 * 6 * 27 + 2) + (8 * 8 * 27 + 8);
        assert_eq!(g.parameter_count(), hand);
        assert_eq!(hand, 218 + 326 + 1736);
    }

    #[test]
    fn rib_branch_input_channels() {
        // in 4, out 4, rates 1/3/5: branches see 4, 8, 12 channels.
        let g = LayerGraph::rib(4, 4, &[1, 3, 5], "rib").unwrap();
        let shapes = g.check_shapes(1, [6, 6, 6]).unwrap();
        let find = |n: &str| shapes.iter().find(|(name, _)| name == n).unwrap().1;
        assert_eq!(find("input")[1], 4);
        assert_eq!(find("rib.b3.cat")[1], 8);
        assert_eq!(find("rib.b5.cat")[1], 12);
        // Equal channels: identity residual, no projection parameter.
        assert!(!g.param_specs().iter().any(|s| s.name.contains("proj")));
    }

    #[test]
    fn rib_with_zero_params_is_identity_when_proj_is_identity() {
        let mut g = LayerGraph::rib(4, 4, &[1, 3, 5], "rib").unwrap();
        let zeros = g
            .param_specs()
            .iter()
            .map(|s| {
                let n: usize = s.shape.iter().product();
                (s.name.clone(), Tensor::variable(vec![0.0; n], &s.shape).unwrap())
            })
            .collect();
        g.set_params(zeros).unwrap();
        let mut rng = seeded_rng(1, "rib-id");
        let data: Vec<f64> = (0..4 * 6 * 6 * 6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let x = Tensor::from_vec(data.clone(), &[1, 4, 6, 6, 6]).unwrap();
        let y = g.forward(&x, Mode::Eval, None).unwrap();
        assert_eq!(y.data(), &data[..]);
    }

    #[test]
    fn network_channel_progression_reference_config() {
        let g = LayerGraph::network(&NetConfig::reference()).unwrap();
        let widths: Vec<usize> = (0..5)
            .map(|i| {
                g.nodes()
                    .iter()
                    .find(|n| n.name == format!("enc{i}.l3.relu"))
                    .unwrap()
                    .channels
            })
            .collect();
        assert_eq!(widths, vec![32, 64, 128, 256, 512]);
        let stem = g.nodes().iter().find(|n| n.name == "stem.cat").unwrap();
        assert_eq!(stem.channels, 16);
        // Final decoder feature width matches the first encoder width.
        let last = g
            .nodes()
            .iter()
            .find(|n| n.name == "dec0.dense.l3.relu")
            .unwrap();
        assert_eq!(last.channels, 32);
    }

    #[test]
    fn network_rejects_indivisible_patch() {
        let g = LayerGraph::network(&NetConfig::desk()).unwrap();
        // depth 3 => two pooling stages => extents must be divisible by 4.
        assert!(g.check_shapes(1, [6, 16, 16]).is_err());
        assert!(g.check_shapes(1, [16, 16, 16]).is_ok());
    }

    #[test]
    fn network_forward_shape_and_simplex() {
        let cfg = NetConfig::desk();
        let mut g = LayerGraph::network(&cfg).unwrap();
        g.materialize(11);
        let mut rng = seeded_rng(12, "net-fwd");
        let data: Vec<f64> = (0..4 * 16 * 16 * 16).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let x = Tensor::from_vec(data, &[1, 4, 16, 16, 16]).unwrap();
        let y = g.forward(&x, Mode::Eval, None).unwrap();
        assert_eq!(y.shape(), &[1, 4, 16, 16, 16]);
        let vol = 16 * 16 * 16;
        for v in 0..vol {
            let s: f64 = (0..4).map(|c| y.data()[c * vol + v]).sum();
            assert!((s - 1.0).abs() < 1e-9, "voxel {v}: sum {s}");
        }
    }

    #[test]
    fn network_zero_params_outputs_uniform_probabilities() {
        let cfg = NetConfig::desk();
        let mut g = LayerGraph::network(&cfg).unwrap();
        let zeros = g
            .param_specs()
            .iter()
            .map(|s| {
                let n: usize = s.shape.iter().product();
                (s.name.clone(), Tensor::variable(vec![0.0; n], &s.shape).unwrap())
            })
            .collect();
        g.set_params(zeros).unwrap();
        let x = Tensor::full(&[1, 4, 8, 8, 8], 0.3);
        let y = g.forward(&x, Mode::Eval, None).unwrap();
        for &p in y.data() {
            assert!((p - 0.25).abs() < 1e-12);
        }
    }
}
