use fra_tensor::{Graph, ParamStore, Scalar, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::{join, BatchNorm, Conv, Mode};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    /// Four stages of basic residual blocks with configurable widths.
    ResnetSmall,
    /// Bottleneck ResNet-50 (stage depths 3-4-6-3, output width 2048).
    Resnet50,
}

/// Output of the encoder for one view.
pub struct EncoderOutput {
    /// `[B, C, H, W]` activations before pooling.
    pub feature_map: Var,
    /// `[B, C]` spatial mean of `feature_map`.
    pub pooled: Var,
}

#[derive(Clone, Debug)]
struct ConvBn {
    conv: Conv,
    bn: BatchNorm,
}

impl ConvBn {
    fn new(name: &str, cin: usize, cout: usize, kernel: usize, stride: usize) -> Self {
        Self {
            conv: Conv::new(join(name, "conv"), cin, cout, kernel, stride),
            bn: BatchNorm::new(join(name, "bn"), cout),
        }
    }

    fn init<T: Scalar>(&self, store: &mut ParamStore<T>, rng: &mut impl Rng) {
        self.conv.init(store, rng);
        self.bn.init(store);
    }

    fn forward<T: Scalar>(&self, g: &mut Graph<T>, s: &ParamStore<T>, x: Var, mode: Mode) -> Var {
        let y = self.conv.forward(g, s, x);
        self.bn.forward(g, s, y, mode)
    }
}

#[derive(Clone, Debug)]
enum Block {
    Basic { a: ConvBn, b: ConvBn, shortcut: Option<ConvBn> },
    Bottleneck { a: ConvBn, b: ConvBn, c: ConvBn, shortcut: Option<ConvBn> },
}

impl Block {
    fn basic(name: &str, cin: usize, cout: usize, stride: usize) -> Self {
        let shortcut = (stride != 1 || cin != cout).then(|| ConvBn::new(&join(name, "downsample"), cin, cout, 1, stride));
        Block::Basic {
            a: ConvBn::new(&join(name, "a"), cin, cout, 3, stride),
            b: ConvBn::new(&join(name, "b"), cout, cout, 3, 1),
            shortcut,
        }
    }

    fn bottleneck(name: &str, cin: usize, width: usize, stride: usize) -> Self {
        let cout = width * 4;
        let shortcut = (stride != 1 || cin != cout).then(|| ConvBn::new(&join(name, "downsample"), cin, cout, 1, stride));
        Block::Bottleneck {
            a: ConvBn::new(&join(name, "a"), cin, width, 1, 1),
            b: ConvBn::new(&join(name, "b"), width, width, 3, stride),
            c: ConvBn::new(&join(name, "c"), width, cout, 1, 1),
            shortcut,
        }
    }

    fn init<T: Scalar>(&self, store: &mut ParamStore<T>, rng: &mut impl Rng) {
        match self {
            Block::Basic { a, b, shortcut } => {
                a.init(store, rng);
                b.init(store, rng);
                if let Some(s) = shortcut {
                    s.init(store, rng);
                }
            }
            Block::Bottleneck { a, b, c, shortcut } => {
                a.init(store, rng);
                b.init(store, rng);
                c.init(store, rng);
                if let Some(s) = shortcut {
                    s.init(store, rng);
                }
            }
        }
    }

    fn forward<T: Scalar>(&self, g: &mut Graph<T>, s: &ParamStore<T>, x: Var, mode: Mode) -> Var {
        let (body, shortcut) = match self {
            Block::Basic { a, b, shortcut } => {
                let h = a.forward(g, s, x, mode);
                let h = g.relu(h);
                (b.forward(g, s, h, mode), shortcut)
            }
            Block::Bottleneck { a, b, c, shortcut } => {
                let h = a.forward(g, s, x, mode);
                let h = g.relu(h);
                let h = b.forward(g, s, h, mode);
                let h = g.relu(h);
                (c.forward(g, s, h, mode), shortcut)
            }
        };
        let identity = match shortcut {
            Some(sc) => sc.forward(g, s, x, mode),
            None => x,
        };
        let y = g.add(body, identity);
        g.relu(y)
    }
}

/// Residual encoder with total stride 32.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub kind: EncoderKind,
    pub out_channels: usize,
    stem: ConvBn,
    blocks: Vec<Block>,
}

impl Encoder {
    pub const NAME: &'static str = "encoder";

    /// `widths`/`depths` describe the four stages of the small variant and
    /// are ignored for ResNet-50.
    pub fn new(kind: EncoderKind, widths: [usize; 4], depths: [usize; 4]) -> Self {
        let root = Self::NAME;
        match kind {
            EncoderKind::ResnetSmall => {
                let stem = ConvBn::new(&join(root, "stem"), 3, widths[0], 3, 2);
                let mut blocks = Vec::new();
                let mut cin = widths[0];
                for (stage, (&w, &d)) in widths.iter().zip(&depths).enumerate() {
                    for i in 0..d.max(1) {
                        let stride = if stage > 0 && i == 0 { 2 } else { 1 };
                        blocks.push(Block::basic(&format!("{root}.layer{}.{i}", stage + 1), cin, w, stride));
                        cin = w;
                    }
                }
                Self { kind, out_channels: widths[3], stem, blocks }
            }
            EncoderKind::Resnet50 => {
                let stem = ConvBn::new(&join(root, "stem"), 3, 64, 7, 2);
                let mut blocks = Vec::new();
                let mut cin = 64;
                for (stage, (w, d)) in [(64, 3), (128, 4), (256, 6), (512, 3)].into_iter().enumerate() {
                    for i in 0..d {
                        let stride = if stage > 0 && i == 0 { 2 } else { 1 };
                        blocks.push(Block::bottleneck(&format!("{root}.layer{}.{i}", stage + 1), cin, w, stride));
                        cin = w * 4;
                    }
                }
                Self { kind, out_channels: 2048, stem, blocks }
            }
        }
    }

    pub fn stride(&self) -> usize {
        32
    }

    pub fn init<T: Scalar>(&self, store: &mut ParamStore<T>, rng: &mut impl Rng) {
        self.stem.init(store, rng);
        for b in &self.blocks {
            b.init(store, rng);
        }
    }

    /// `x` is `[B, 3, S, S]`; the feature map is `[B, C, S/32, S/32]`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, s: &ParamStore<T>, x: Var, mode: Mode) -> EncoderOutput {
        let h = self.stem.forward(g, s, x, mode);
        let h = g.relu(h);
        let mut h = g.max_pool2d(h, 3, 2, 1);
        for b in &self.blocks {
            h = b.forward(g, s, h, mode);
        }
        let shape = g.shape(h).to_vec();
        let flat = g.reshape(h, &[shape[0], shape[1], shape[2] * shape[3]]);
        let pooled = g.mean_axis(flat, 2);
        EncoderOutput { feature_map: h, pooled }
    }
}
