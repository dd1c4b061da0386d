use rand::Rng;

use super::{BackboneConfig, EncoderScale, HeadConfig};
use crate::error::{Error, Result};
use crate::nn::{ConvLayer, Graph, Init, NodeId, ParamStore, Tensor};

#[derive(Debug, Clone)]
enum Block {
    /// 3×3 conv + ReLU.
    Plain(ConvLayer),
    /// 1×1 → 3×3 → 1×1 residual block; the last conv starts at zero so the
    /// block begins as (a projection of) the identity.
    Bottleneck {
        reduce: ConvLayer,
        spatial: ConvLayer,
        expand: ConvLayer,
        projection: Option<ConvLayer>,
    },
}

#[derive(Debug, Clone)]
struct Level {
    pool_before: bool,
    blocks: Vec<Block>,
}

/// Encoder-decoder feature extractor with same-padded convolutions and skip
/// connections concatenated after nearest-neighbour upsampling.
#[derive(Debug, Clone)]
pub struct Backbone {
    config: BackboneConfig,
    store: ParamStore,
    levels: Vec<Level>,
    decoder: Vec<ConvLayer>,
    output: ConvLayer,
}

fn plain<R: Rng>(store: &mut ParamStore, name: &str, cin: usize, cout: usize, rng: &mut R) -> Block {
    Block::Plain(ConvLayer::new(store, name, cin, cout, 3, Init::He, rng))
}

fn bottleneck<R: Rng>(store: &mut ParamStore, name: &str, cin: usize, cout: usize, rng: &mut R) -> Block {
    let mid = cout / 4;
    Block::Bottleneck {
        reduce: ConvLayer::new(store, &format!("{name}.reduce"), cin, mid, 1, Init::He, rng),
        spatial: ConvLayer::new(store, &format!("{name}.spatial"), mid, mid, 3, Init::He, rng),
        expand: ConvLayer::new(store, &format!("{name}.expand"), mid, cout, 1, Init::Zero, rng),
        projection: (cin != cout).then(|| ConvLayer::new(store, &format!("{name}.proj"), cin, cout, 1, Init::He, rng)),
    }
}

impl Backbone {
    pub fn new<R: Rng>(config: BackboneConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let cin = config.input_channels;
        let (levels, decoder_widths): (Vec<Level>, &[usize]) = match config.encoder_scale {
            EncoderScale::Tiny => {
                let widths = [8, 16, 32, 32];
                let mut levels = Vec::new();
                let mut prev = cin;
                for (i, &w) in widths.iter().enumerate() {
                    let blocks = vec![
                        plain(&mut store, &format!("enc{i}.0"), prev, w, rng),
                        plain(&mut store, &format!("enc{i}.1"), w, w, rng),
                    ];
                    levels.push(Level {
                        pool_before: i > 0,
                        blocks,
                    });
                    prev = w;
                }
                (levels, &[32, 16, 16])
            }
            EncoderScale::Full => {
                let mut levels = vec![
                    Level {
                        pool_before: false,
                        blocks: vec![plain(&mut store, "stem.0", cin, 64, rng)],
                    },
                    Level {
                        pool_before: true,
                        blocks: vec![plain(&mut store, "stem.1", 64, 64, rng)],
                    },
                ];
                let mut prev = 64;
                for (s, (&depth, &width)) in [3usize, 4, 6, 3].iter().zip(&[256usize, 512, 1024, 2048]).enumerate() {
                    let blocks = (0..depth)
                        .map(|b| {
                            let block = bottleneck(&mut store, &format!("layer{}.{b}", s + 1), prev, width, rng);
                            prev = width;
                            block
                        })
                        .collect();
                    levels.push(Level {
                        pool_before: true,
                        blocks,
                    });
                }
                (levels, &[256, 128, 64, 32, 16])
            }
        };

        let widths: Vec<usize> = levels.iter().map(|l| block_out(l.blocks.last().expect("nonempty level"))).collect();
        let mut decoder = Vec::new();
        let mut prev = *widths.last().expect("at least one level");
        for (k, &w) in decoder_widths.iter().enumerate() {
            let skip = widths[widths.len() - 2 - k];
            decoder.push(ConvLayer::new(&mut store, &format!("dec{k}"), prev + skip, w, 3, Init::He, rng));
            prev = w;
        }
        let output = ConvLayer::new(&mut store, "out", prev, config.feature_dim, 1, Init::He, rng);
        Ok(Self {
            config,
            store,
            levels,
            decoder,
            output,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Record the backbone on `x` as parameter group `group`.
    pub fn forward(&self, g: &mut Graph<'_>, group: usize, x: &Tensor) -> Result<NodeId> {
        let (_, c, h, w) = x.dim();
        if c != self.config.input_channels {
            return Err(Error::shape(format!("expected {} input channels, got {c}", self.config.input_channels)));
        }
        self.config.check_spatial(h, w)?;
        let mut cur = g.input(x.clone());
        let mut skips = Vec::with_capacity(self.levels.len());
        for level in &self.levels {
            if level.pool_before {
                cur = g.maxpool2(cur);
            }
            for block in &level.blocks {
                cur = apply_block(g, group, block, cur);
            }
            skips.push(cur);
        }
        skips.pop();
        for conv in &self.decoder {
            let up = g.upsample2(cur);
            let skip = skips.pop().expect("one skip per decoder level");
            let cat = g.concat(&[up, skip]);
            let y = g.conv(group, *conv, cat);
            cur = g.relu(y);
        }
        Ok(g.conv(group, self.output, cur))
    }
}

fn block_out(block: &Block) -> usize {
    match block {
        Block::Plain(c) => c.out_channels,
        Block::Bottleneck { expand, .. } => expand.out_channels,
    }
}

fn apply_block(g: &mut Graph<'_>, group: usize, block: &Block, x: NodeId) -> NodeId {
    match block {
        Block::Plain(conv) => {
            let y = g.conv(group, *conv, x);
            g.relu(y)
        }
        Block::Bottleneck {
            reduce,
            spatial,
            expand,
            projection,
        } => {
            let a = g.conv(group, *reduce, x);
            let a = g.relu(a);
            let b = g.conv(group, *spatial, a);
            let b = g.relu(b);
            let c = g.conv(group, *expand, b);
            let shortcut = match projection {
                Some(p) => g.conv(group, *p, x),
                None => x,
            };
            let sum = g.add(c, shortcut);
            g.relu(sum)
        }
    }
}

/// Small per-pixel classifier on top of the backbone features.
#[derive(Debug, Clone)]
pub struct Head {
    config: HeadConfig,
    in_channels: usize,
    store: ParamStore,
    hidden: Vec<ConvLayer>,
    output: ConvLayer,
}

impl Head {
    pub fn new<R: Rng>(config: HeadConfig, in_channels: usize, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut prev = in_channels;
        let hidden = (0..config.hidden_layers)
            .map(|i| {
                let layer = ConvLayer::new(&mut store, &format!("hidden{i}"), prev, config.hidden_depth, config.kernel, Init::He, rng);
                prev = config.hidden_depth;
                layer
            })
            .collect();
        // zero logits at initialization
        let output = ConvLayer::new(&mut store, "logits", prev, config.out_logits, 1, Init::Zero, rng);
        Ok(Self {
            config,
            in_channels,
            store,
            hidden,
            output,
        })
    }

    pub fn config(&self) -> &HeadConfig {
        &self.config
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn forward(&self, g: &mut Graph<'_>, group: usize, x: NodeId) -> NodeId {
        let mut cur = x;
        for conv in &self.hidden {
            let y = g.conv(group, *conv, cur);
            cur = g.relu(y);
        }
        g.conv(group, self.output, cur)
    }
}
