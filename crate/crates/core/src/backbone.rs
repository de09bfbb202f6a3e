//! A small seeded multimodal transformer: a patch-based vision encoder, a
//! projector into the language width, byte-level text embeddings and a
//! stack of bidirectional pre-norm blocks whose every output is exposed.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapters::{AdapterSet, ProjectionShape};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::numerics::{ParamStore, Tape, Tensor, Var};

const LN_EPS: f64 = 1e-5;
const ATTN_PROJECTIONS: [&str; 4] = ["q", "k", "v", "o"];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub image_size: usize,
    pub patch: usize,
    pub d_vision: usize,
    pub d_model: usize,
    pub heads: usize,
    pub encoder_depth: usize,
    /// Number of language blocks, `L`.
    pub depth: usize,
    pub vocab: usize,
    pub max_text: usize,
    pub mlp_ratio: usize,
    pub init_std: f32,
    pub seed: u64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            patch: 8,
            d_vision: 64,
            d_model: 128,
            heads: 4,
            encoder_depth: 2,
            depth: 8,
            vocab: 256,
            max_text: 128,
            mlp_ratio: 4,
            init_std: 0.02,
            seed: 42,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.patch == 0 || !self.image_size.is_multiple_of(self.patch) {
            return fail(format!(
                "image side {} is not divisible by patch side {}",
                self.image_size, self.patch
            ));
        }
        if self.heads == 0 || !self.d_model.is_multiple_of(self.heads) || !self.d_vision.is_multiple_of(self.heads) {
            return fail(format!(
                "widths {} and {} must be divisible by {} heads",
                self.d_vision, self.d_model, self.heads
            ));
        }
        if self.depth < 2 {
            return fail(format!("language depth must be at least 2, got {}", self.depth));
        }
        if self.vocab != 256 {
            return fail("byte-level tokenizer needs a vocabulary of 256".into());
        }
        if self.max_text == 0 {
            return fail("maximum text length must be positive".into());
        }
        Ok(())
    }

    pub fn patches_per_image(&self) -> usize {
        (self.image_size / self.patch).pow(2)
    }
}

/// Source image, edited image and instruction.
#[derive(Clone, Debug, PartialEq)]
pub struct EditSample {
    pub source: Image,
    pub edited: Image,
    pub instruction: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Segment {
    SourceVisual,
    EditedVisual,
    Text,
}

/// Byte tokens of an instruction, truncated to the configured maximum.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TextTokens {
    pub ids: Vec<u8>,
    pub truncated: bool,
}

/// Layout of the assembled sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceLayout {
    pub segments: Vec<Segment>,
    pub last_source: usize,
    pub last_edited: usize,
    pub truncated: bool,
}

/// Post-block activations of every language layer.
#[derive(Clone, Debug, PartialEq)]
pub struct HiddenStates {
    layers: Vec<Tensor>,
    pub layout: SequenceLayout,
}

impl HiddenStates {
    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// Activations of 1-based layer `l`.
    pub fn layer(&self, l: usize) -> &Tensor {
        &self.layers[l - 1]
    }

    pub fn h_source(&self, l: usize) -> &[f32] {
        self.layer(l).row(self.layout.last_source)
    }

    pub fn h_edited(&self, l: usize) -> &[f32] {
        self.layer(l).row(self.layout.last_edited)
    }
}

/// Options for a forward pass recorded on a tape.
#[derive(Default)]
pub struct ForwardOptions<'a> {
    pub adapters: Option<&'a AdapterSet>,
    /// Enables adapter dropout.
    pub dropout_rng: Option<&'a mut ChaCha8Rng>,
    /// Stop after this many language blocks (defaults to all).
    pub up_to_layer: Option<usize>,
}

/// Tape handles of a recorded forward pass.
pub struct ForwardTrace {
    pub layers: Vec<Var>,
    pub layout: SequenceLayout,
}

#[derive(Clone, Debug)]
pub struct Backbone {
    config: BackboneConfig,
    params: ParamStore,
}

impl Backbone {
    /// Seeded Gaussian weights, zero biases, unit layer-norm gains. All
    /// parameters are frozen.
    pub fn new(config: BackboneConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut p = ParamStore::new();
        let std = config.init_std;
        let mut randn = |p: &mut ParamStore, name: String, shape: &[usize]| {
            p.insert(name, Tensor::randn(shape, std, &mut rng), false);
        };
        let (dv, d) = (config.d_vision, config.d_model);
        let patch_dim = config.patch * config.patch * 3;

        randn(&mut p, "vis.patch.w".into(), &[patch_dim, dv]);
        p.insert("vis.patch.b", Tensor::zeros(&[1, dv]), false);
        randn(&mut p, "vis.pos".into(), &[config.patches_per_image(), dv]);
        for i in 0..config.encoder_depth {
            insert_block(&mut p, &mut randn, &format!("vis.{i}"), dv, config.mlp_ratio);
        }
        insert_norm(&mut p, "vis.ln_f", dv);
        randn(&mut p, "proj.w".into(), &[dv, d]);
        p.insert("proj.b", Tensor::zeros(&[1, d]), false);
        randn(&mut p, "txt.embed".into(), &[config.vocab, d]);
        randn(&mut p, "txt.pos".into(), &[config.max_text, d]);
        for i in 0..config.depth {
            insert_block(&mut p, &mut randn, &format!("lm.{i}"), d, config.mlp_ratio);
        }
        p.freeze_all();
        Ok(Self { config, params: p })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    /// Every attention projection that can take an adapter.
    pub fn adaptable_projections(&self) -> BTreeMap<String, ProjectionShape> {
        let mut out = BTreeMap::new();
        let towers = [
            ("vis", self.config.encoder_depth, self.config.d_vision),
            ("lm", self.config.depth, self.config.d_model),
        ];
        for (tower, depth, width) in towers {
            for i in 0..depth {
                for proj in ATTN_PROJECTIONS {
                    out.insert(
                        format!("{tower}.{i}.attn.{proj}"),
                        ProjectionShape {
                            input: width,
                            output: width,
                        },
                    );
                }
            }
        }
        out
    }

    fn check_image(&self, img: &Image) -> Result<()> {
        let s = self.config.image_size;
        if img.width() != s || img.height() != s {
            return Err(Error::Data(format!(
                "image is {}x{}, backbone expects {s}x{s}",
                img.width(),
                img.height()
            )));
        }
        Ok(())
    }

    /// Non-overlapping patches, row-major over the patch grid, each
    /// flattened as (row, column, channel).
    pub fn patchify(&self, img: &Image) -> Result<Tensor> {
        self.check_image(img)?;
        let g = self.config.patch;
        let per_side = self.config.image_size / g;
        let mut data = Vec::with_capacity(img.data().len());
        for py in 0..per_side {
            for px in 0..per_side {
                for y in 0..g {
                    for x in 0..g {
                        data.extend(img.pixel(px * g + x, py * g + y));
                    }
                }
            }
        }
        Tensor::new(vec![per_side * per_side, g * g * 3], data)
    }

    /// Vision encoder output for one image (`patches x d_vision`).
    pub fn encode_image(&self, tape: &mut Tape, img: &Image, opts: &mut ForwardOptions) -> Result<Var> {
        let patches = tape.constant(self.patchify(img)?);
        let w = tape.param(&self.params, "vis.patch.w")?;
        let b = tape.param(&self.params, "vis.patch.b")?;
        let pos = tape.param(&self.params, "vis.pos")?;
        let x = tape.matmul(patches, w)?;
        let x = tape.add_row(x, b)?;
        let mut x = tape.add(x, pos)?;
        for i in 0..self.config.encoder_depth {
            x = self.block(tape, &format!("vis.{i}"), x, self.config.d_vision, opts)?;
        }
        self.norm(tape, "vis.ln_f", x)
    }

    pub fn encode_images(
        &self,
        tape: &mut Tape,
        source: &Image,
        edited: &Image,
        opts: &mut ForwardOptions,
    ) -> Result<(Var, Var)> {
        if source.width() != edited.width() || source.height() != edited.height() {
            return Err(Error::Data("source and edited images differ in size".into()));
        }
        let vs = self.encode_image(tape, source, opts)?;
        let ve = self.encode_image(tape, edited, opts)?;
        Ok((vs, ve))
    }

    /// Token-wise projection of `[V_s; V_e]` into the language width.
    pub fn project(&self, tape: &mut Tape, vs: Var, ve: Var) -> Result<Var> {
        let v = tape.concat_rows(&[vs, ve])?;
        let w = tape.param(&self.params, "proj.w")?;
        let b = tape.param(&self.params, "proj.b")?;
        let t = tape.matmul(v, w)?;
        tape.add_row(t, b)
    }

    pub fn tokenize(&self, text: &str) -> Result<TextTokens> {
        if text.is_empty() {
            return Err(Error::Data("instruction text is empty".into()));
        }
        let bytes = text.as_bytes();
        let truncated = bytes.len() > self.config.max_text;
        Ok(TextTokens {
            ids: bytes[..bytes.len().min(self.config.max_text)].to_vec(),
            truncated,
        })
    }

    /// Byte embeddings plus positions (`tokens x d_model`).
    pub fn embed_text(&self, tape: &mut Tape, tokens: &TextTokens) -> Result<Var> {
        let table = self.params.get("txt.embed")?;
        let pos = self.params.get("txt.pos")?;
        let d = self.config.d_model;
        let mut data = Vec::with_capacity(tokens.ids.len() * d);
        for (i, &id) in tokens.ids.iter().enumerate() {
            data.extend(
                table
                    .row(id as usize)
                    .iter()
                    .zip(pos.row(i))
                    .map(|(&e, &p)| (e as f64 + p as f64) as f32),
            );
        }
        Ok(tape.constant(Tensor::new(vec![tokens.ids.len(), d], data)?))
    }

    /// Records the full forward pass and returns the language-block outputs.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        sample: &EditSample,
        opts: &mut ForwardOptions,
    ) -> Result<ForwardTrace> {
        let depth = opts.up_to_layer.unwrap_or(self.config.depth);
        if depth == 0 || depth > self.config.depth {
            return Err(Error::Config(format!(
                "layer {depth} outside 1..={}",
                self.config.depth
            )));
        }
        let tokens = self.tokenize(&sample.instruction)?;
        let (vs, ve) = self.encode_images(tape, &sample.source, &sample.edited, opts)?;
        let tv = self.project(tape, vs, ve)?;
        let tp = self.embed_text(tape, &tokens)?;
        let mut x = tape.concat_rows(&[tv, tp])?;

        let n_img = self.config.patches_per_image();
        let mut segments = vec![Segment::SourceVisual; n_img];
        segments.extend(vec![Segment::EditedVisual; n_img]);
        segments.extend(vec![Segment::Text; tokens.ids.len()]);
        let layout = SequenceLayout {
            segments,
            last_source: n_img - 1,
            last_edited: 2 * n_img - 1,
            truncated: tokens.truncated,
        };

        let mut layers = Vec::with_capacity(depth);
        for i in 0..depth {
            x = self.block(tape, &format!("lm.{i}"), x, self.config.d_model, opts)?;
            if !tape.value(x).is_finite() {
                return Err(Error::NonFiniteActivation { layer: i + 1 });
            }
            layers.push(x);
        }
        Ok(ForwardTrace { layers, layout })
    }

    /// Evaluation-mode forward recording every layer.
    pub fn forward_all_layers(&self, sample: &EditSample, adapters: Option<&AdapterSet>) -> Result<HiddenStates> {
        let mut tape = Tape::new();
        let mut opts = ForwardOptions {
            adapters,
            ..ForwardOptions::default()
        };
        let trace = self.forward_on_tape(&mut tape, sample, &mut opts)?;
        Ok(HiddenStates {
            layers: trace.layers.iter().map(|&v| tape.value(v).clone()).collect(),
            layout: trace.layout,
        })
    }

    fn norm(&self, tape: &mut Tape, prefix: &str, x: Var) -> Result<Var> {
        let g = tape.param(&self.params, &format!("{prefix}.g"))?;
        let b = tape.param(&self.params, &format!("{prefix}.b"))?;
        tape.layer_norm(x, g, b, LN_EPS)
    }

    fn linear(&self, tape: &mut Tape, name: &str, x: Var, opts: &mut ForwardOptions) -> Result<Var> {
        let w = tape.param(&self.params, &format!("{name}.w"))?;
        let b = tape.param(&self.params, &format!("{name}.b"))?;
        let y = tape.matmul(x, w)?;
        let y = tape.add_row(y, b)?;
        match opts.adapters {
            Some(set) => set.apply(tape, name, x, y, opts.dropout_rng.as_deref_mut()),
            None => Ok(y),
        }
    }

    fn block(&self, tape: &mut Tape, prefix: &str, x: Var, width: usize, opts: &mut ForwardOptions) -> Result<Var> {
        let h = self.norm(tape, &format!("{prefix}.ln1"), x)?;
        let q = self.linear(tape, &format!("{prefix}.attn.q"), h, opts)?;
        let k = self.linear(tape, &format!("{prefix}.attn.k"), h, opts)?;
        let v = self.linear(tape, &format!("{prefix}.attn.v"), h, opts)?;
        let dh = width / self.config.heads;
        let mut heads = Vec::with_capacity(self.config.heads);
        for i in 0..self.config.heads {
            let (s, e) = (i * dh, (i + 1) * dh);
            let qh = tape.slice_cols(q, s, e)?;
            let kh = tape.slice_cols(k, s, e)?;
            let vh = tape.slice_cols(v, s, e)?;
            let scores = tape.matmul_nt(qh, kh)?;
            let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt());
            let attn = tape.softmax_rows(scores)?;
            heads.push(tape.matmul(attn, vh)?);
        }
        let a = tape.concat_cols(&heads)?;
        let a = self.linear(tape, &format!("{prefix}.attn.o"), a, opts)?;
        let x = tape.add(x, a)?;

        let h = self.norm(tape, &format!("{prefix}.ln2"), x)?;
        let h = self.linear(tape, &format!("{prefix}.mlp.fc1"), h, opts)?;
        let h = tape.gelu(h);
        let h = self.linear(tape, &format!("{prefix}.mlp.fc2"), h, opts)?;
        tape.add(x, h)
    }
}

fn insert_norm(p: &mut ParamStore, prefix: &str, width: usize) {
    p.insert(format!("{prefix}.g"), Tensor::full(&[1, width], 1.0), false);
    p.insert(format!("{prefix}.b"), Tensor::zeros(&[1, width]), false);
}

fn insert_block(
    p: &mut ParamStore,
    randn: &mut impl FnMut(&mut ParamStore, String, &[usize]),
    prefix: &str,
    width: usize,
    mlp_ratio: usize,
) {
    insert_norm(p, &format!("{prefix}.ln1"), width);
    insert_norm(p, &format!("{prefix}.ln2"), width);
    for proj in ATTN_PROJECTIONS {
        randn(p, format!("{prefix}.attn.{proj}.w"), &[width, width]);
        p.insert(format!("{prefix}.attn.{proj}.b"), Tensor::zeros(&[1, width]), false);
    }
    let hidden = width * mlp_ratio;
    randn(p, format!("{prefix}.mlp.fc1.w"), &[width, hidden]);
    p.insert(format!("{prefix}.mlp.fc1.b"), Tensor::zeros(&[1, hidden]), false);
    randn(p, format!("{prefix}.mlp.fc2.w"), &[hidden, width]);
    p.insert(format!("{prefix}.mlp.fc2.b"), Tensor::zeros(&[1, width]), false);
}
