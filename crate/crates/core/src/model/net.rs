use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{Graph, ParamId, ParamStore, Scalar, Tensor, Var};
use crate::volume::SliceBatch;

use super::config::{Activation, ModelConfig, Pooling, PositionEmbedding};

const LN_EPS: f64 = 1e-5;
const POS_INIT: f64 = 0.02;

#[derive(Debug, Clone, PartialEq)]
struct Norm {
    gamma: ParamId,
    beta: ParamId,
}

#[derive(Debug, Clone, PartialEq)]
struct Dense {
    w: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone, PartialEq)]
struct Block {
    norm1: Norm,
    q: Dense,
    k: Dense,
    v: Dense,
    o: Dense,
    norm2: Norm,
    ffn1: Dense,
    ffn2: Dense,
}

/// Where every parameter of the network lives in its [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Layout {
    patch: Dense,
    pos: Option<ParamId>,
    blocks: Vec<Block>,
    final_norm: Norm,
    fusion: Dense,
    decoder: Vec<Dense>,
    head: Dense,
}

struct Init<'a> {
    store: &'a mut ParamStore<f32>,
    rng: ChaCha8Rng,
}

impl Init<'_> {
    /// LeCun-uniform weight of the given shape; `fan_in` is the reduction size.
    fn weight(&mut self, name: &str, shape: &[usize], fan_in: usize) -> ParamId {
        let bound = (3.0 / fan_in as f64).sqrt();
        self.store.insert_uniform(name, shape, bound, &mut self.rng)
    }

    fn zeros(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.store.insert(name, Tensor::zeros(shape))
    }

    fn dense(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Dense {
        Dense {
            w: self.weight(&format!("{name}.weight"), &[fan_in, fan_out], fan_in),
            b: self.zeros(&format!("{name}.bias"), &[fan_out]),
        }
    }

    fn conv(&mut self, name: &str, c_in: usize, c_out: usize, k: usize) -> Dense {
        Dense {
            w: self.weight(&format!("{name}.weight"), &[c_out, c_in, k, k], c_in * k * k),
            b: self.zeros(&format!("{name}.bias"), &[c_out]),
        }
    }

    fn norm(&mut self, name: &str, dim: usize) -> Norm {
        Norm {
            gamma: self.store.insert(format!("{name}.gamma"), Tensor::ones(&[dim])),
            beta: self.zeros(&format!("{name}.beta"), &[dim]),
        }
    }
}

/// Create all parameters for `cfg` in a fixed order from `seed`.
pub(crate) fn init_params(cfg: &ModelConfig, seed: u64) -> Result<(ParamStore<f32>, Layout)> {
    cfg.validate()?;
    let mut store = ParamStore::new();
    let mut init = Init {
        store: &mut store,
        rng: ChaCha8Rng::seed_from_u64(seed),
    };
    let e = cfg.embed_dim;
    let patch = init.dense("patch_embed", cfg.patch_dim(), e);
    let pos = match cfg.position_embedding {
        PositionEmbedding::Learned => {
            let bound = POS_INIT * 3f64.sqrt();
            Some(
                init.store
                    .insert_uniform("pos_embed", &[cfg.tokens(), e], bound, &mut init.rng),
            )
        }
        PositionEmbedding::Sinusoidal => None,
    };
    let blocks = (0..cfg.n_layers)
        .map(|i| {
            let p = format!("encoder.{i}");
            Block {
                norm1: init.norm(&format!("{p}.norm1"), e),
                q: init.dense(&format!("{p}.attn.q"), e, e),
                k: init.dense(&format!("{p}.attn.k"), e, e),
                v: init.dense(&format!("{p}.attn.v"), e, e),
                o: init.dense(&format!("{p}.attn.out"), e, e),
                norm2: init.norm(&format!("{p}.norm2"), e),
                ffn1: init.dense(&format!("{p}.ffn.0"), e, cfg.ffn_dim),
                ffn2: init.dense(&format!("{p}.ffn.1"), cfg.ffn_dim, e),
            }
        })
        .collect();
    let final_norm = init.norm("encoder.norm", e);
    let fusion = init.dense("fusion", cfg.pooled_dim(), cfg.latent_dim);
    let mut c_in = cfg.decoder_seed_shape[0];
    let mut decoder = Vec::with_capacity(cfg.decoder_layers);
    for (i, c_out) in cfg.decoder_channels().into_iter().enumerate() {
        decoder.push(init.conv(&format!("decoder.{i}"), c_in, c_out, 3));
        c_in = c_out;
    }
    let head = init.conv("decoder.head", c_in, cfg.n_modalities, 1);
    Ok((
        store,
        Layout {
            patch,
            pos,
            blocks,
            final_norm,
            fusion,
            decoder,
            head,
        },
    ))
}

/// Standard sine/cosine position table `[tokens, dim]`.
pub fn sinusoidal_table(tokens: usize, dim: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; tokens * dim];
    for t in 0..tokens {
        for i in 0..dim {
            let freq = 1.0 / 10_000f64.powf((2 * (i / 2)) as f64 / dim as f64);
            let angle = t as f64 * freq;
            out[t * dim + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() } as f32;
        }
    }
    out
}

/// Cut `[B, C, H, W]` slices into `[B·T, C·p·p]` patch rows, tokens in raster
/// order and each row ordered `(c, dy, dx)`.
pub fn patchify(batch: &SliceBatch, patch: usize) -> Vec<f32> {
    let (c, h, w) = (batch.channels, batch.height, batch.width);
    let (gh, gw) = (h / patch, w / patch);
    let row = c * patch * patch;
    let mut out = vec![0.0f32; batch.len() * gh * gw * row];
    for b in 0..batch.len() {
        let src = batch.get(b);
        for ty in 0..gh {
            for tx in 0..gw {
                let base = ((b * gh + ty) * gw + tx) * row;
                for ch in 0..c {
                    for dy in 0..patch {
                        let s = (ch * h + ty * patch + dy) * w + tx * patch;
                        let d = base + (ch * patch + dy) * patch;
                        out[d..d + patch].copy_from_slice(&src[s..s + patch]);
                    }
                }
            }
        }
    }
    out
}

fn activate<T: Scalar>(g: &mut Graph<T>, x: Var, act: Activation) -> Var {
    match act {
        Activation::Gelu => g.gelu(x),
        Activation::Relu => g.relu(x),
    }
}

fn dense<T: Scalar>(g: &mut Graph<T>, p: &[Var], x: Var, d: &Dense) -> Result<Var> {
    g.linear(x, p[d.w.index()], Some(p[d.b.index()]))
}

fn norm<T: Scalar>(g: &mut Graph<T>, p: &[Var], x: Var, n: &Norm) -> Result<Var> {
    g.layer_norm(x, p[n.gamma.index()], p[n.beta.index()], T::from_f64_lossy(LN_EPS))
}

/// Build the forward graph for `patches` (`[B·T, C·p·p]`) and return the
/// reconstruction `[B, C, H, W]`. `p` holds one bound variable per parameter.
pub(crate) fn forward_graph(
    g: &mut Graph<f32>,
    cfg: &ModelConfig,
    layout: &Layout,
    p: &[Var],
    patches: Var,
    batch: usize,
) -> Result<Var> {
    let (t, e) = (cfg.tokens(), cfg.embed_dim);
    let mut h = dense(g, p, patches, &layout.patch)?;
    let pos = match layout.pos {
        Some(id) => p[id.index()],
        None => g.constant(Tensor::new(&[t, e], sinusoidal_table(t, e))?),
    };
    h = g.reshape(h, &[batch, t, e])?;
    h = g.add_broadcast(h, pos)?;
    h = g.reshape(h, &[batch * t, e])?;

    for block in &layout.blocks {
        let n1 = norm(g, p, h, &block.norm1)?;
        let q = dense(g, p, n1, &block.q)?;
        let k = dense(g, p, n1, &block.k)?;
        let v = dense(g, p, n1, &block.v)?;
        let ctx = g.attention(q, k, v, batch, t, cfg.n_heads)?;
        let attn = dense(g, p, ctx, &block.o)?;
        h = g.add(h, attn)?;
        let n2 = norm(g, p, h, &block.norm2)?;
        let f = dense(g, p, n2, &block.ffn1)?;
        let f = activate(g, f, cfg.ffn_activation);
        let f = dense(g, p, f, &block.ffn2)?;
        h = g.add(h, f)?;
    }
    h = norm(g, p, h, &layout.final_norm)?;

    let pooled = match cfg.pooling {
        Pooling::Mean => {
            let x = g.reshape(h, &[batch, t, e])?;
            g.mean_axis1(x)?
        }
        Pooling::Flatten => g.reshape(h, &[batch, t * e])?,
    };
    let latent = dense(g, p, pooled, &layout.fusion)?;
    let [c, s, _] = cfg.decoder_seed_shape;
    let mut x = g.reshape(latent, &[batch, c, s, s])?;
    let mut side = s;
    for stage in &layout.decoder {
        if side < cfg.image_size {
            x = g.upsample_nearest2x(x)?;
            side *= 2;
            if side > cfg.image_size {
                x = g.center_crop(x, cfg.image_size, cfg.image_size)?;
                side = cfg.image_size;
            }
        }
        x = g.conv2d(x, p[stage.w.index()], Some(p[stage.b.index()]))?;
        x = g.gelu(x);
    }
    g.conv2d(x, p[layout.head.w.index()], Some(p[layout.head.b.index()]))
}

/// Check that `batch` matches the model's input contract.
pub(crate) fn check_batch(cfg: &ModelConfig, batch: &SliceBatch) -> Result<()> {
    if batch.channels != cfg.n_modalities || batch.height != cfg.image_size || batch.width != cfg.image_size {
        return Err(Error::shape(
            "model input",
            &[batch.channels, batch.height, batch.width],
            &[cfg.n_modalities, cfg.image_size, cfg.image_size],
        ));
    }
    Ok(())
}
