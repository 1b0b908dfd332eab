//! Seeded toy backbones for experiments and tests.
//!
//! Convolution and FC weights use He-normal initialization (`N(0, 2/fan_in)`);
//! biases start at zero. Folded batch-norm layers get scales near one and
//! small shifts so they are not exact identities.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, InputSpec, LayerSpec, Op, PoolAttrs};
use crate::tensor::Tensor;

/// How the backbone turns its last feature map into logits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassifierStyle {
    /// Global average pool, flatten, FC.
    #[default]
    Gap,
    /// Flatten the whole map, FC. Keeps spatial layout.
    Flatten,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZooSpec {
    /// `[C, H, W]` of one sample.
    pub input: [usize; 3],
    /// Channels per stage; stages after the first halve the resolution.
    pub widths: Vec<usize>,
    #[serde(default = "one")]
    pub blocks_per_stage: usize,
    pub num_classes: usize,
    #[serde(default)]
    pub classifier: ClassifierStyle,
    pub seed: u64,
}

fn one() -> usize {
    1
}

impl ZooSpec {
    pub fn new(input: [usize; 3], widths: Vec<usize>, num_classes: usize, seed: u64) -> Self {
        Self {
            input,
            widths,
            blocks_per_stage: 1,
            num_classes,
            classifier: ClassifierStyle::Gap,
            seed,
        }
    }

    fn check(&self) -> Result<()> {
        if self.widths.is_empty()
            || self.widths.contains(&0)
            || self.num_classes == 0
            || self.input.contains(&0)
        {
            return Err(Error::Config(
                "zoo spec needs positive widths, classes and input dims".into(),
            ));
        }
        Ok(())
    }
}

struct Builder {
    rng: ChaCha8Rng,
    layers: Vec<LayerSpec>,
    cur: String,
    channels: usize,
    hw: [usize; 2],
}

impl Builder {
    fn new(spec: &ZooSpec) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(spec.seed),
            layers: Vec::new(),
            cur: "input".into(),
            channels: spec.input[0],
            hw: [spec.input[1], spec.input[2]],
        }
    }

    fn he(&mut self, shape: Vec<usize>, fan_in: usize) -> Tensor {
        let normal = Normal::new(0.0f32, (2.0 / fan_in as f32).sqrt()).unwrap();
        let n = shape.iter().product();
        Tensor::from_f32(
            shape,
            (0..n).map(|_| normal.sample(&mut self.rng)).collect(),
        )
        .unwrap()
    }

    fn push(&mut self, layer: LayerSpec) {
        self.cur = layer.output.clone();
        self.layers.push(layer);
    }

    fn unary(&mut self, name: &str, op: Op) {
        let l = LayerSpec::new(name, op, &[&self.cur], name);
        self.push(l);
    }

    fn conv(&mut self, name: &str, out: usize, k: usize, stride: usize) {
        let w = self.he(vec![out, self.channels, k, k], self.channels * k * k);
        let b = Tensor::zeros(vec![out]).unwrap();
        let l = LayerSpec::conv2d(name, &self.cur, name, w, b, stride, k / 2);
        self.push(l);
        self.channels = out;
        self.hw = self.hw.map(|d| (d + 2 * (k / 2) - k) / stride + 1);
    }

    fn depthwise(&mut self, name: &str, stride: usize) {
        let c = self.channels;
        let w = self.he(vec![c, 1, 3, 3], 9);
        let b = Tensor::zeros(vec![c]).unwrap();
        let l = LayerSpec::depthwise(name, &self.cur, name, w, b, stride, 1);
        self.push(l);
        self.hw = self.hw.map(|d| (d - 1) / stride + 1);
    }

    fn bn(&mut self, name: &str) {
        let c = self.channels;
        let scale = (0..c).map(|_| self.rng.random_range(0.9f32..1.1)).collect();
        let shift = (0..c)
            .map(|_| self.rng.random_range(-0.05f32..0.05))
            .collect();
        let l = LayerSpec::batch_norm(
            name,
            &self.cur,
            name,
            Tensor::from_f32(vec![c], scale).unwrap(),
            Tensor::from_f32(vec![c], shift).unwrap(),
        );
        self.push(l);
    }

    fn head(mut self, spec: &ZooSpec, name: &str) -> Result<Graph> {
        let features = match spec.classifier {
            ClassifierStyle::Gap => {
                self.unary("gap", Op::GlobalAvgPool);
                self.channels
            }
            ClassifierStyle::Flatten => self.channels * self.hw[0] * self.hw[1],
        };
        self.unary("flatten", Op::Flatten);
        let w = self.he(vec![spec.num_classes, features], features);
        let b = Tensor::zeros(vec![spec.num_classes]).unwrap();
        let fc = LayerSpec::fully_connected("fc", &self.cur, "logits", w, b);
        self.push(fc);
        let [c, h, w] = spec.input;
        let g = Graph::new(
            name,
            InputSpec {
                name: "input".into(),
                shape: vec![1, c, h, w],
            },
            self.layers,
            "logits",
            spec.num_classes,
        );
        g.validate()?;
        Ok(g)
    }
}

/// Residual network: conv stem, then per stage `blocks_per_stage` blocks of
/// `conv-bn-relu-conv-bn (+skip) relu`. Later stages open with a stride-2
/// `conv-bn-relu`. Every block output (`s{i}b{j}_out`) is a cut point.
pub fn toy_resnet(spec: &ZooSpec) -> Result<Graph> {
    spec.check()?;
    let mut b = Builder::new(spec);
    b.conv("stem_conv", spec.widths[0], 3, 1);
    b.bn("stem_bn");
    b.unary("stem_relu", Op::ReLU);
    for (s, &width) in spec.widths.iter().enumerate() {
        if s > 0 {
            b.conv(&format!("s{s}_down_conv"), width, 3, 2);
            b.bn(&format!("s{s}_down_bn"));
            b.unary(&format!("s{s}_down_relu"), Op::ReLU);
        }
        for j in 0..spec.blocks_per_stage {
            let p = format!("s{s}b{j}");
            let skip = b.cur.clone();
            b.conv(&format!("{p}_conv1"), width, 3, 1);
            b.bn(&format!("{p}_bn1"));
            b.unary(&format!("{p}_relu1"), Op::ReLU);
            b.conv(&format!("{p}_conv2"), width, 3, 1);
            b.bn(&format!("{p}_bn2"));
            let add = format!("{p}_add");
            let l = LayerSpec::new(&add, Op::Add, &[&b.cur, &skip], &add);
            b.push(l);
            b.unary(&format!("{p}_out"), Op::ReLU);
        }
    }
    b.head(spec, "toy_resnet")
}

/// Depthwise-separable network: conv stem, then per stage
/// `dw3x3-bn-relu6-pw1x1-bn-relu6`, with stride 2 in the depthwise layer of
/// later stages. Stage outputs (`s{i}_out`) are cut points.
pub fn toy_mobilenet(spec: &ZooSpec) -> Result<Graph> {
    spec.check()?;
    let mut b = Builder::new(spec);
    b.conv("stem_conv", spec.widths[0], 3, 1);
    b.bn("stem_bn");
    b.unary("stem_relu6", Op::ReLU6);
    for (s, &width) in spec.widths.iter().enumerate() {
        for j in 0..spec.blocks_per_stage {
            let p = format!("s{s}b{j}");
            b.depthwise(&format!("{p}_dw"), if s > 0 && j == 0 { 2 } else { 1 });
            b.bn(&format!("{p}_dw_bn"));
            b.unary(&format!("{p}_dw_relu6"), Op::ReLU6);
            b.conv(&format!("{p}_pw"), width, 1, 1);
            b.bn(&format!("{p}_pw_bn"));
            let out = if j + 1 == spec.blocks_per_stage {
                format!("s{s}_out")
            } else {
                format!("{p}_out")
            };
            b.unary(&out, Op::ReLU6);
        }
    }
    b.head(spec, "toy_mobilenet")
}

/// Plain `conv-relu` stack with 2x2 max pooling between stages.
pub fn toy_chain(spec: &ZooSpec) -> Result<Graph> {
    spec.check()?;
    let mut b = Builder::new(spec);
    for (s, &width) in spec.widths.iter().enumerate() {
        if s > 0 && b.hw[0] >= 2 && b.hw[1] >= 2 {
            b.unary(
                &format!("s{s}_pool"),
                Op::MaxPool(PoolAttrs {
                    kernel: [2, 2],
                    stride: [2, 2],
                }),
            );
            b.hw = b.hw.map(|d| d / 2);
        }
        b.conv(&format!("s{s}_conv"), width, 3, 1);
        b.unary(&format!("s{s}_out"), Op::ReLU);
    }
    b.head(spec, "toy_chain")
}

/// Builds a zoo model by name: `resnet`, `mobilenet` or `chain`.
pub fn build(arch: &str, spec: &ZooSpec) -> Result<Graph> {
    match arch {
        "resnet" | "toy_resnet" => toy_resnet(spec),
        "mobilenet" | "toy_mobilenet" => toy_mobilenet(spec),
        "chain" | "toy_chain" => toy_chain(spec),
        other => Err(Error::Config(format!(
            "unknown architecture `{other}` (resnet|mobilenet|chain)"
        ))),
    }
}
