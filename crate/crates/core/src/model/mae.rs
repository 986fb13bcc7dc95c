//! Asymmetric ViT encoder/decoder with shared mask token.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{patch::normalize_patches, MaskSpec, ModelConfig};
use crate::error::{invalid, shape, Error, Result};
use crate::numerics::{Matrix, ParamId, ParamSet, Real, Tape, Var};

#[derive(Debug, Clone)]
struct BlockIds {
    norm1: (ParamId, ParamId),
    qkv: (ParamId, ParamId),
    proj: (ParamId, ParamId),
    norm2: (ParamId, ParamId),
    fc1: (ParamId, ParamId),
    fc2: (ParamId, ParamId),
}

#[derive(Debug, Clone)]
struct Layout {
    patch_embed: (ParamId, ParamId),
    encoder: Vec<BlockIds>,
    encoder_norm: (ParamId, ParamId),
    decoder_embed: (ParamId, ParamId),
    mask_token: ParamId,
    decoder: Vec<BlockIds>,
    decoder_norm: (ParamId, ParamId),
    decoder_pred: (ParamId, ParamId),
}

/// Parameter names and shapes in registration order.
fn parameter_shapes(cfg: &ModelConfig) -> Vec<(String, usize, usize)> {
    let mut out = Vec::new();
    let mut linear = |out: &mut Vec<_>, name: &str, i: usize, o: usize| {
        out.push((format!("{name}.weight"), i, o));
        out.push((format!("{name}.bias"), 1, o));
    };
    let block = |out: &mut Vec<_>, prefix: &str, d: usize, linear: &mut dyn FnMut(&mut Vec<_>, &str, usize, usize)| {
        out.push((format!("{prefix}.norm1.weight"), 1, d));
        out.push((format!("{prefix}.norm1.bias"), 1, d));
        linear(out, &format!("{prefix}.attn.qkv"), d, 3 * d);
        linear(out, &format!("{prefix}.attn.proj"), d, d);
        out.push((format!("{prefix}.norm2.weight"), 1, d));
        out.push((format!("{prefix}.norm2.bias"), 1, d));
        linear(out, &format!("{prefix}.mlp.fc1"), d, d * cfg.mlp_ratio);
        linear(out, &format!("{prefix}.mlp.fc2"), d * cfg.mlp_ratio, d);
    };
    let (d, dd) = (cfg.embed_dim, cfg.decoder_dim);
    linear(&mut out, "patch_embed", cfg.patch_dim(), d);
    for l in 0..cfg.encoder_layers {
        block(&mut out, &format!("encoder.{l}"), d, &mut linear);
    }
    out.push(("encoder.norm.weight".into(), 1, d));
    out.push(("encoder.norm.bias".into(), 1, d));
    linear(&mut out, "decoder_embed", d, dd);
    out.push(("mask_token".into(), 1, dd));
    for l in 0..cfg.decoder_layers {
        block(&mut out, &format!("decoder.{l}"), dd, &mut linear);
    }
    out.push(("decoder.norm.weight".into(), 1, dd));
    out.push(("decoder.norm.bias".into(), 1, dd));
    linear(&mut out, "decoder_pred", dd, cfg.patch_dim());
    out
}

fn lookup<T: Real>(params: &ParamSet<T>, name: &str) -> Result<ParamId> {
    params
        .find(name)
        .ok_or_else(|| invalid(format!("missing parameter {name}")))
}

fn pair<T: Real>(params: &ParamSet<T>, prefix: &str) -> Result<(ParamId, ParamId)> {
    Ok((
        lookup(params, &format!("{prefix}.weight"))?,
        lookup(params, &format!("{prefix}.bias"))?,
    ))
}

impl Layout {
    fn resolve<T: Real>(cfg: &ModelConfig, params: &ParamSet<T>) -> Result<Self> {
        let block = |prefix: String| -> Result<BlockIds> {
            Ok(BlockIds {
                norm1: pair(params, &format!("{prefix}.norm1"))?,
                qkv: pair(params, &format!("{prefix}.attn.qkv"))?,
                proj: pair(params, &format!("{prefix}.attn.proj"))?,
                norm2: pair(params, &format!("{prefix}.norm2"))?,
                fc1: pair(params, &format!("{prefix}.mlp.fc1"))?,
                fc2: pair(params, &format!("{prefix}.mlp.fc2"))?,
            })
        };
        Ok(Self {
            patch_embed: pair(params, "patch_embed")?,
            encoder: (0..cfg.encoder_layers)
                .map(|l| block(format!("encoder.{l}")))
                .collect::<Result<_>>()?,
            encoder_norm: pair(params, "encoder.norm")?,
            decoder_embed: pair(params, "decoder_embed")?,
            mask_token: lookup(params, "mask_token")?,
            decoder: (0..cfg.decoder_layers)
                .map(|l| block(format!("decoder.{l}")))
                .collect::<Result<_>>()?,
            decoder_norm: pair(params, "decoder.norm")?,
            decoder_pred: pair(params, "decoder_pred")?,
        })
    }
}

/// Fixed 2-D sine-cosine positional encoding, one row per grid cell in
/// row-major order. The first half of each row encodes the column, the
/// second half the row.
pub fn sincos_position_encoding(dim: usize, grid: usize) -> Matrix<f64> {
    let quarter = dim / 4;
    let omega: Vec<f64> = (0..quarter)
        .map(|i| 1.0 / 10000f64.powf(i as f64 / quarter as f64))
        .collect();
    Matrix::from_fn(grid * grid, dim, |t, c| {
        let (row, col) = (t / grid, t % grid);
        let (coord, c) = if c < dim / 2 { (col, c) } else { (row, c - dim / 2) };
        let angle = coord as f64 * omega[c % quarter];
        if c < quarter {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

/// Recorded variables of one transformer block.
#[derive(Debug, Clone, Copy)]
pub struct LayerVars {
    pub attention: Var,
    pub output: Var,
}

/// Encoder pass over a batch; rows of every variable are the images'
/// visible tokens stacked in batch order.
#[derive(Debug, Clone)]
pub struct EncoderPass {
    pub layers: Vec<LayerVars>,
    /// Final normalized embeddings; `None` when the pass stopped early.
    pub output: Option<Var>,
    pub segments: Vec<(usize, usize)>,
    pub visible: Vec<Vec<usize>>,
}

/// Decoder pass over a batch; every image contributes `n` rows.
#[derive(Debug, Clone)]
pub struct DecoderPass {
    pub layers: Vec<LayerVars>,
    pub prediction: Var,
    pub segments: Vec<(usize, usize)>,
}

/// One block's output embeddings and per-head attention.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerTrace {
    pub output: Matrix<f64>,
    pub attention: Vec<Matrix<f64>>,
}

impl LayerTrace {
    /// Mean of the head attention matrices.
    pub fn mean_attention(&self) -> Matrix<f64> {
        let mut acc = self.attention[0].clone();
        for h in &self.attention[1..] {
            acc.add_assign(h);
        }
        acc.scale(1.0 / self.attention.len() as f64)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderTrace {
    pub visible: Vec<usize>,
    pub layers: Vec<LayerTrace>,
    pub output: Option<Matrix<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderTrace {
    pub layers: Vec<LayerTrace>,
    /// `n x P*P*channels`, one row per token.
    pub reconstruction: Matrix<f64>,
}

/// Everything recorded while running one image through the model.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    pub mask: MaskSpec,
    pub encoder: EncoderTrace,
    pub decoder: Option<DecoderTrace>,
}

fn layer_trace<T: Real>(tape: &Tape<T>, layer: &LayerVars, seg: usize, (start, len): (usize, usize)) -> LayerTrace {
    let out = tape.value(layer.output);
    let rows: Vec<usize> = (start..start + len).collect();
    LayerTrace {
        output: out.select_rows(&rows).cast(),
        attention: tape
            .attention_probs(layer.attention)
            .map(|p| p[seg].iter().map(Matrix::cast).collect())
            .unwrap_or_default(),
    }
}

impl EncoderPass {
    pub fn trace<T: Real>(&self, tape: &Tape<T>, item: usize) -> EncoderTrace {
        let seg = self.segments[item];
        let rows: Vec<usize> = (seg.0..seg.0 + seg.1).collect();
        EncoderTrace {
            visible: self.visible[item].clone(),
            layers: self.layers.iter().map(|l| layer_trace(tape, l, item, seg)).collect(),
            output: self.output.map(|o| tape.value(o).select_rows(&rows).cast()),
        }
    }
}

impl DecoderPass {
    pub fn trace<T: Real>(&self, tape: &Tape<T>, item: usize) -> DecoderTrace {
        let seg = self.segments[item];
        let rows: Vec<usize> = (seg.0..seg.0 + seg.1).collect();
        DecoderTrace {
            layers: self.layers.iter().map(|l| layer_trace(tape, l, item, seg)).collect(),
            reconstruction: tape.value(self.prediction).select_rows(&rows).cast(),
        }
    }
}

/// Miniature masked autoencoder.
#[derive(Debug, Clone)]
pub struct Mae<T> {
    config: ModelConfig,
    params: ParamSet<T>,
    layout: Layout,
    encoder_pos: Matrix<T>,
    decoder_pos: Matrix<T>,
}

impl<T: Real> Mae<T> {
    /// Fresh model: Xavier-uniform linear weights, zero biases, unit norm
    /// gains, mask token drawn from N(0, 0.02^2).
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        if config.decoder_layers == 0 {
            return Err(invalid("decoder_layers must be at least 1"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let normal = Normal::new(0.0, 0.02).expect("valid normal");
        let mut params = ParamSet::new();
        for (name, rows, cols) in parameter_shapes(&config) {
            let value = if name == "mask_token" {
                Matrix::from_fn(rows, cols, |_, _| T::lit(normal.sample(&mut rng)))
            } else if name.ends_with(".bias") {
                Matrix::zeros(rows, cols)
            } else if rows == 1 {
                Matrix::filled(rows, cols, T::one())
            } else {
                let limit = (6.0 / (rows + cols) as f64).sqrt();
                Matrix::from_fn(rows, cols, |_, _| T::lit(rng.gen_range(-limit..limit)))
            };
            params.add(name, value);
        }
        Self::from_params(config, params)
    }

    /// Rebuilds a model around an existing registry, checking every name
    /// and shape.
    pub fn from_params(config: ModelConfig, params: ParamSet<T>) -> Result<Self> {
        config.validate()?;
        let expected = parameter_shapes(&config);
        if expected.len() != params.len() {
            return Err(shape("parameter count", expected.len(), params.len()));
        }
        for (name, rows, cols) in &expected {
            let id = lookup(&params, name)?;
            if params.get(id).shape() != (*rows, *cols) {
                return Err(shape(
                    "parameter",
                    format!("{name} {rows}x{cols}"),
                    format!("{:?}", params.get(id).shape()),
                ));
            }
        }
        let layout = Layout::resolve(&config, &params)?;
        let g = config.grid();
        Ok(Self {
            encoder_pos: sincos_position_encoding(config.embed_dim, g).cast(),
            decoder_pos: sincos_position_encoding(config.decoder_dim, g).cast(),
            config,
            params,
            layout,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    pub fn into_params(self) -> ParamSet<T> {
        self.params
    }

    pub fn cast<U: Real>(&self) -> Mae<U> {
        Mae::from_params(self.config.clone(), self.params.cast()).expect("same layout")
    }

    pub fn mask_token_id(&self) -> ParamId {
        self.layout.mask_token
    }

    pub fn encoder_position_encoding(&self) -> &Matrix<T> {
        &self.encoder_pos
    }

    pub fn decoder_position_encoding(&self) -> &Matrix<T> {
        &self.decoder_pos
    }

    fn block(&self, tape: &mut Tape<T>, x: Var, ids: &BlockIds, segments: &[(usize, usize)]) -> Result<LayerVars> {
        let p = &self.params;
        let (g1, b1) = (tape.param(p, ids.norm1.0), tape.param(p, ids.norm1.1));
        let h = tape.layer_norm(x, g1, b1)?;
        let (w, b) = (tape.param(p, ids.qkv.0), tape.param(p, ids.qkv.1));
        let qkv = tape.linear(h, w, Some(b))?;
        let attention = tape.attention(qkv, self.config.heads, segments)?;
        let (w, b) = (tape.param(p, ids.proj.0), tape.param(p, ids.proj.1));
        let proj = tape.linear(attention, w, Some(b))?;
        let x = tape.add(x, proj)?;
        let (g2, b2) = (tape.param(p, ids.norm2.0), tape.param(p, ids.norm2.1));
        let h = tape.layer_norm(x, g2, b2)?;
        let (w, b) = (tape.param(p, ids.fc1.0), tape.param(p, ids.fc1.1));
        let f = tape.linear(h, w, Some(b))?;
        let f = tape.gelu(f);
        let (w, b) = (tape.param(p, ids.fc2.0), tape.param(p, ids.fc2.1));
        let f = tape.linear(f, w, Some(b))?;
        let output = tape.add(x, f)?;
        Ok(LayerVars { attention, output })
    }

    /// Runs the encoder on each image's tokens listed in `visible` (in
    /// that order). `patches[b]` holds all `n` raw patch rows of image `b`.
    pub fn encode(&self, tape: &mut Tape<T>, patches: &[&Matrix<T>], visible: &[&[usize]]) -> Result<EncoderPass> {
        self.encode_depth(tape, patches, visible, self.config.encoder_layers)
    }

    /// Like [`Mae::encode`] but stops after `depth` blocks; the final norm
    /// only runs when all blocks do.
    pub fn encode_depth(
        &self,
        tape: &mut Tape<T>,
        patches: &[&Matrix<T>],
        visible: &[&[usize]],
        depth: usize,
    ) -> Result<EncoderPass> {
        let n = self.config.num_tokens();
        if patches.len() != visible.len() || patches.is_empty() {
            return Err(shape("encode batch", patches.len(), visible.len()));
        }
        if depth > self.config.encoder_layers {
            return Err(invalid(format!(
                "encoder depth {depth} > {}",
                self.config.encoder_layers
            )));
        }
        let mut rows = Vec::new();
        let mut pos = Vec::new();
        let mut segments = Vec::with_capacity(patches.len());
        let mut start = 0;
        for (p, v) in patches.iter().zip(visible) {
            if p.shape() != (n, self.config.patch_dim()) {
                return Err(shape(
                    "encode patches",
                    format!("{n}x{}", self.config.patch_dim()),
                    format!("{:?}", p.shape()),
                ));
            }
            if v.is_empty() {
                return Err(Error::Mask("encoder needs at least one visible token".into()));
            }
            if let Some(&bad) = v.iter().find(|&&i| i >= n) {
                return Err(Error::Mask(format!("visible index {bad} out of range {n}")));
            }
            for &i in v.iter() {
                rows.extend_from_slice(p.row(i));
                pos.extend_from_slice(self.encoder_pos.row(i));
            }
            segments.push((start, v.len()));
            start += v.len();
        }
        let x = tape.constant(Matrix::new(start, self.config.patch_dim(), rows)?);
        let pos = tape.constant(Matrix::new(start, self.config.embed_dim, pos)?);
        let (w, b) = (
            tape.param(&self.params, self.layout.patch_embed.0),
            tape.param(&self.params, self.layout.patch_embed.1),
        );
        let mut x = tape.linear(x, w, Some(b))?;
        x = tape.add(x, pos)?;
        let mut layers = Vec::with_capacity(depth);
        for ids in &self.layout.encoder[..depth] {
            let l = self.block(tape, x, ids, &segments)?;
            x = l.output;
            layers.push(l);
        }
        let output = if depth == self.config.encoder_layers {
            let (g, b) = (
                tape.param(&self.params, self.layout.encoder_norm.0),
                tape.param(&self.params, self.layout.encoder_norm.1),
            );
            Some(tape.layer_norm(x, g, b)?)
        } else {
            None
        };
        Ok(EncoderPass {
            layers,
            output,
            segments,
            visible: visible.iter().map(|v| v.to_vec()).collect(),
        })
    }

    /// Runs the decoder on encoder outputs; masked slots receive the shared
    /// mask token, then every slot gets its positional encoding.
    pub fn decode(&self, tape: &mut Tape<T>, enc: &EncoderPass, masks: &[&MaskSpec]) -> Result<DecoderPass> {
        let n = self.config.num_tokens();
        let enc_out = enc
            .output
            .ok_or_else(|| invalid("decode requires a complete encoder pass"))?;
        if masks.len() != enc.segments.len() {
            return Err(shape("decode batch", enc.segments.len(), masks.len()));
        }
        let mut layout = Vec::with_capacity(n * masks.len());
        for (b, mask) in masks.iter().enumerate() {
            mask.validate()?;
            if mask.n() != n {
                return Err(Error::Mask(format!("mask covers {} tokens, model has {n}", mask.n())));
            }
            let vis = &enc.visible[b];
            let mut sorted = vis.clone();
            sorted.sort_unstable();
            if sorted != mask.visible() {
                return Err(Error::Mask(format!(
                    "encoder inputs of item {b} do not match the mask's visible set"
                )));
            }
            let mut slot = vec![None; n];
            for (k, &i) in vis.iter().enumerate() {
                slot[i] = Some(enc.segments[b].0 + k);
            }
            layout.extend(slot);
        }
        let p = &self.params;
        let (w, b) = (
            tape.param(p, self.layout.decoder_embed.0),
            tape.param(p, self.layout.decoder_embed.1),
        );
        let y = tape.linear(enc_out, w, Some(b))?;
        let token = tape.param(p, self.layout.mask_token);
        let x = tape.assemble(y, token, &layout)?;
        let pos = tape.constant(self.decoder_pos.clone());
        let mut x = tape.add_tiled(x, pos)?;
        let segments: Vec<(usize, usize)> = (0..masks.len()).map(|b| (b * n, n)).collect();
        let mut layers = Vec::with_capacity(self.layout.decoder.len());
        for ids in &self.layout.decoder {
            let l = self.block(tape, x, ids, &segments)?;
            x = l.output;
            layers.push(l);
        }
        let (g, b) = (
            tape.param(p, self.layout.decoder_norm.0),
            tape.param(p, self.layout.decoder_norm.1),
        );
        let x = tape.layer_norm(x, g, b)?;
        let (w, b) = (
            tape.param(p, self.layout.decoder_pred.0),
            tape.param(p, self.layout.decoder_pred.1),
        );
        let prediction = tape.linear(x, w, Some(b))?;
        Ok(DecoderPass {
            layers,
            prediction,
            segments,
        })
    }

    /// Reconstruction targets for raw patch rows: per-patch normalized when
    /// `norm_pix_loss` is set.
    pub fn targets(&self, patches: &Matrix<T>) -> Matrix<T> {
        if self.config.norm_pix_loss {
            normalize_patches(patches)
        } else {
            patches.clone()
        }
    }

    /// Mean squared error over masked tokens of the whole batch.
    pub fn loss(
        &self,
        tape: &mut Tape<T>,
        dec: &DecoderPass,
        targets: &[&Matrix<T>],
        masks: &[&MaskSpec],
    ) -> Result<Var> {
        let n = self.config.num_tokens();
        let mut rows = Vec::new();
        for (b, m) in masks.iter().enumerate() {
            rows.extend(m.masked().iter().map(|&i| b * n + i));
        }
        if rows.is_empty() {
            return Err(Error::Mask(
                "no masked tokens: reconstruction loss has no support".into(),
            ));
        }
        let stacked = Matrix::vstack(targets)?;
        tape.masked_mse(dec.prediction, stacked, &rows)
    }

    /// Full training forward: encode visible tokens, decode, loss.
    pub fn forward_loss(
        &self,
        tape: &mut Tape<T>,
        patches: &[&Matrix<T>],
        masks: &[&MaskSpec],
    ) -> Result<(Var, EncoderPass, DecoderPass)> {
        let visible: Vec<&[usize]> = masks.iter().map(|m| m.visible()).collect();
        let enc = self.encode(tape, patches, &visible)?;
        let dec = self.decode(tape, &enc, masks)?;
        let targets: Vec<Matrix<T>> = patches.iter().map(|p| self.targets(p)).collect();
        let target_refs: Vec<&Matrix<T>> = targets.iter().collect();
        let loss = self.loss(tape, &dec, &target_refs, masks)?;
        Ok((loss, enc, dec))
    }

    /// Inference traces for a batch of images under the given masks.
    pub fn trace_batch(&self, patches: &[&Matrix<T>], masks: &[&MaskSpec]) -> Result<Vec<ForwardTrace>> {
        let mut tape = Tape::new();
        let visible: Vec<&[usize]> = masks.iter().map(|m| m.visible()).collect();
        let enc = self.encode(&mut tape, patches, &visible)?;
        let dec = self.decode(&mut tape, &enc, masks)?;
        Ok((0..patches.len())
            .map(|b| ForwardTrace {
                mask: masks[b].clone(),
                encoder: enc.trace(&tape, b),
                decoder: Some(dec.trace(&tape, b)),
            })
            .collect())
    }

    pub fn trace(&self, patches: &Matrix<T>, mask: &MaskSpec) -> Result<ForwardTrace> {
        Ok(self.trace_batch(&[patches], &[mask])?.remove(0))
    }

    /// Encoder traces of intact images up to `depth` blocks.
    pub fn encode_intact(&self, patches: &[&Matrix<T>], depth: usize) -> Result<Vec<EncoderTrace>> {
        let all: Vec<usize> = (0..self.config.num_tokens()).collect();
        let visible: Vec<&[usize]> = patches.iter().map(|_| all.as_slice()).collect();
        let mut tape = Tape::new();
        let enc = self.encode_depth(&mut tape, patches, &visible, depth)?;
        Ok((0..patches.len()).map(|b| enc.trace(&tape, b)).collect())
    }
}
