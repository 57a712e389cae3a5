//! Builders for the modified-VGG16 encoder and the FCN-32s/16s/8s decoders.
//!
//! Every convolution is emitted as `Const(weights) → Conv2D → BiasAdd(Const(bias)) → Relu`
//! (no `Relu` after the 1×1 scoring layer). Decoder upsampling uses
//! `ConvTranspose2D → BiasAdd`. Skip connections add the upsampled map to the
//! raw pool output, whose channel count already matches the upsample filters.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::attrs;
use crate::error::{Error, Result};
use crate::graph::{AttrValue, Graph, NodeId, OpKind};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FcnVariant {
    Fcn32s,
    Fcn16s,
    Fcn8s,
}

impl FcnVariant {
    pub const ALL: [FcnVariant; 3] = [FcnVariant::Fcn32s, FcnVariant::Fcn16s, FcnVariant::Fcn8s];

    pub fn name(self) -> &'static str {
        match self {
            FcnVariant::Fcn32s => "fcn32s",
            FcnVariant::Fcn16s => "fcn16s",
            FcnVariant::Fcn8s => "fcn8s",
        }
    }
}

impl fmt::Display for FcnVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FcnVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "").as_str() {
            "fcn32s" => Ok(FcnVariant::Fcn32s),
            "fcn16s" => Ok(FcnVariant::Fcn16s),
            "fcn8s" => Ok(FcnVariant::Fcn8s),
            _ => Err(Error::invalid(format!("unknown architecture `{s}` (fcn8s, fcn16s, fcn32s)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum InitMode {
    Zeros,
    Normal { mean: f32, stddev: f32 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InitSpec {
    pub mode: InitMode,
    pub seed: u64,
}

impl InitSpec {
    pub fn zeros() -> Self {
        InitSpec {
            mode: InitMode::Zeros,
            seed: 0,
        }
    }

    pub fn normal(mean: f32, stddev: f32, seed: u64) -> Self {
        InitSpec {
            mode: InitMode::Normal { mean, stddev },
            seed,
        }
    }
}

struct Initializer {
    mode: InitMode,
    rng: ChaCha8Rng,
}

impl Initializer {
    fn new(spec: InitSpec) -> Result<Self> {
        if let InitMode::Normal { mean, stddev } = spec.mode {
            if !(stddev >= 0.0 && stddev.is_finite() && mean.is_finite()) {
                return Err(Error::invalid(format!("invalid normal init N({mean}, {stddev})")));
            }
        }
        Ok(Initializer {
            mode: spec.mode,
            rng: ChaCha8Rng::seed_from_u64(spec.seed),
        })
    }

    fn tensor(&mut self, shape: Vec<usize>) -> Tensor {
        let n: usize = shape.iter().product();
        let data = match self.mode {
            InitMode::Zeros => vec![0.0; n],
            InitMode::Normal { mean, stddev } => {
                let dist = Normal::new(mean, stddev).expect("validated in Initializer::new");
                (0..n).map(|_| dist.sample(&mut self.rng)).collect()
            }
        };
        Tensor::from_f32(shape, data).expect("shape matches generated length")
    }
}

/// Named taps the decoders attach to.
#[derive(Debug, Clone, Copy)]
pub struct EncoderTaps {
    pub input: NodeId,
    pub pool3: NodeId,
    pub pool4: NodeId,
    pub score: NodeId,
}

struct Builder<'a> {
    g: &'a mut Graph,
    init: Initializer,
    dims: (usize, usize),
}

impl Builder<'_> {
    /// `Conv2D` + `BiasAdd` (+ `Relu`); returns the last node.
    fn conv(&mut self, x: NodeId, name: &str, k: usize, cin: usize, cout: usize, relu: bool) -> NodeId {
        let w = self.g.add_const(format!("{name}/weights"), self.init.tensor(vec![k, k, cin, cout]));
        let conv = self.g.add(
            OpKind::Conv2D,
            name,
            &[x, w],
            attrs! {
                "strides" => AttrValue::Int(1),
                "padding" => AttrValue::Str("same".into()),
                "kernel" => AttrValue::Ints(vec![k as i64, k as i64]),
                "filters" => AttrValue::Int(cout as i64),
            },
        );
        let b = self.g.add_const(format!("{name}/bias"), self.init.tensor(vec![cout]));
        let biased = self.g.add(OpKind::BiasAdd, format!("{name}/bias_add"), &[conv, b], attrs! {});
        if relu {
            self.g.add(OpKind::Relu, format!("{name}/relu"), &[biased], attrs! {})
        } else {
            biased
        }
    }

    fn upsample(
        &mut self,
        x: NodeId,
        name: &str,
        out_name: &str,
        k: usize,
        stride: usize,
        cin: usize,
        cout: usize,
    ) -> NodeId {
        let w = self.g.add_const(format!("{name}/weights"), self.init.tensor(vec![k, k, cin, cout]));
        let up = self.g.add(
            OpKind::ConvTranspose2D,
            name,
            &[x, w],
            attrs! {
                "strides" => AttrValue::Int(stride as i64),
                "padding" => AttrValue::Str("same".into()),
                "kernel" => AttrValue::Ints(vec![k as i64, k as i64]),
                "filters" => AttrValue::Int(cout as i64),
            },
        );
        let b = self.g.add_const(format!("{name}/bias"), self.init.tensor(vec![cout]));
        self.g.add(OpKind::BiasAdd, out_name, &[up, b], attrs! {})
    }

    fn pool(&mut self, x: NodeId, name: &str) -> NodeId {
        self.g.add(OpKind::MaxPool2x2, name, &[x], attrs! {})
    }

    fn encoder(&mut self, classes: usize) -> EncoderTaps {
        let input = self.g.add_input("image");
        let (h, w) = self.dims;
        self.g.nodes.get_mut(&input).unwrap().attrs.insert("shape".into(), AttrValue::Ints(vec![h as i64, w as i64, 3]));
        let mut x = input;
        let mut cin = 3;
        let mut pools = Vec::new();
        for (block, (convs, cout)) in [(2, 64), (2, 128), (3, 256), (3, 512), (3, 512)].into_iter().enumerate() {
            for i in 1..=convs {
                x = self.conv(x, &format!("conv{}_{}", block + 1, i), 3, cin, cout, true);
                cin = cout;
            }
            x = self.pool(x, &format!("pool{}", block + 1));
            pools.push(x);
        }
        x = self.conv(x, "conv6", 1, 512, 4096, true);
        x = self.conv(x, "conv7", 1, 4096, 4096, true);
        let score = self.conv(x, "conv1by1", 1, 4096, classes, false);
        self.g.nodes.get_mut(&score).unwrap().name = "score".into();
        EncoderTaps {
            input,
            pool3: pools[2],
            pool4: pools[3],
            score,
        }
    }
}

fn check_dims(h: usize, w: usize, classes: usize) -> Result<()> {
    if h == 0 || w == 0 || !h.is_multiple_of(32) || !w.is_multiple_of(32) {
        return Err(Error::invalid(format!("input {h}×{w} must be non-zero multiples of 32")));
    }
    if classes < 2 {
        return Err(Error::invalid(format!("need at least 2 classes, got {classes}")));
    }
    Ok(())
}

/// The encoder alone, with `score` as the single output.
pub fn build_encoder(h: usize, w: usize, classes: usize, init: InitSpec) -> Result<Graph> {
    check_dims(h, w, classes)?;
    let mut g = Graph::new(format!("vgg16_encoder_{h}x{w}_c{classes}"));
    let mut b = Builder {
        g: &mut g,
        init: Initializer::new(init)?,
        dims: (h, w),
    };
    let taps = b.encoder(classes);
    g.outputs = vec![taps.score];
    Ok(g)
}

/// A complete FCN with output `logits` of shape `h × w × classes`.
pub fn build_fcn(variant: FcnVariant, h: usize, w: usize, classes: usize, init: InitSpec) -> Result<Graph> {
    check_dims(h, w, classes)?;
    let mut g = Graph::new(format!("{variant}_{h}x{w}_c{classes}"));
    let mut b = Builder {
        g: &mut g,
        init: Initializer::new(init)?,
        dims: (h, w),
    };
    let taps = b.encoder(classes);
    let logits = match variant {
        FcnVariant::Fcn32s => b.upsample(taps.score, "output", "logits", 32, 32, classes, classes),
        FcnVariant::Fcn16s => {
            let up4 = b.upsample(taps.score, "up4", "up4/bias_add", 4, 2, classes, 512);
            let skip4 = b.g.add(OpKind::Add, "skip4", &[up4, taps.pool4], attrs! {});
            b.upsample(skip4, "output", "logits", 16, 16, 512, classes)
        }
        FcnVariant::Fcn8s => {
            let up4 = b.upsample(taps.score, "up4", "up4/bias_add", 4, 2, classes, 512);
            let skip4 = b.g.add(OpKind::Add, "skip4", &[up4, taps.pool4], attrs! {});
            let up3 = b.upsample(skip4, "up3", "up3/bias_add", 4, 2, 512, 256);
            let skip3 = b.g.add(OpKind::Add, "skip3", &[up3, taps.pool3], attrs! {});
            b.upsample(skip3, "output", "logits", 16, 8, 256, classes)
        }
    };
    g.outputs = vec![logits];
    Ok(g)
}
