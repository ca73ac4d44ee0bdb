use std::rc::Rc;

use rand::Rng;

use crate::error::{contract, Result};
use crate::image::Image;
use crate::numerics::{normal_init, PairRotation, ParamId, ParamStore, Tape, Tensor, Var};
use crate::tokens::{
    downsample_mask, kept_indices, patchify, unpatchify, Branch, RopeCoord, SequenceLayout,
};

use super::{build_mask, DitConfig};

/// Pixels in `[0,1]` map to `[-1,1]` in model space.
pub fn to_model_space(image: &Image, p: usize) -> Result<Tensor> {
    Ok(patchify(image, p)?.map(|v| 2.0 * v - 1.0))
}

/// Inverse of [`to_model_space`], clamped to `[0,1]`.
pub fn from_model_space(patches: &Tensor, h: usize, w: usize, p: usize) -> Result<Image> {
    let mut img = unpatchify(&patches.map(|v| 0.5 * (v + 1.0)), h, w, p)?;
    img.clamp01();
    Ok(img)
}

/// One identity's conditions as the model sees them.
#[derive(Clone, Debug, PartialEq)]
pub struct IdentityInput {
    /// Canvas patches kept by the pruning mask, model space, `[n_i, 3p^2]`.
    /// `None` is the null condition: zero tokens after embedding.
    pub patches: Option<Tensor>,
    pub coords: Vec<RopeCoord>,
    /// `None` feeds a zero vector to the offset MLP.
    pub embedding: Option<Vec<f64>>,
}

impl IdentityInput {
    /// Patchifies the canvas, keeps tokens whose cell touches the mask.
    pub fn from_canvas(canvas: &Image, mask: &[bool], embedding: Vec<f64>, p: usize) -> Result<Self> {
        let (h, w) = (canvas.height(), canvas.width());
        let token_mask = downsample_mask(mask, h, w, p)?;
        let keep = kept_indices(&token_mask);
        let all = to_model_space(canvas, p)?;
        let gw = w / p;
        let mut data = Vec::with_capacity(keep.len() * all.cols());
        for &i in &keep {
            data.extend_from_slice(all.row_slice(i));
        }
        Ok(Self {
            patches: Some(Tensor::matrix(keep.len(), all.cols(), data)?),
            coords: keep.iter().map(|&i| RopeCoord::identity(i % gw, i / gw)).collect(),
            embedding: Some(embedding),
        })
    }

    pub fn null(coords: Vec<RopeCoord>) -> Self {
        Self {
            patches: None,
            coords,
            embedding: None,
        }
    }

    /// Condition dropout: same coordinates, zeroed tokens and embedding.
    pub fn dropped(&self) -> Self {
        Self::null(self.coords.clone())
    }

    pub fn is_null(&self) -> bool {
        self.patches.is_none() && self.embedding.is_none()
    }
}

/// Everything one forward pass consumes.
#[derive(Clone, Copy, Debug)]
pub struct ModelInput<'a> {
    /// Noisy image in model space, patch layout `[gw*gh, 3p^2]`.
    pub x_t: &'a Tensor,
    /// Image token grid `(width, height)`.
    pub grid: (usize, usize),
    pub t: f64,
    pub prompt: &'a [usize],
    pub identities: &'a [IdentityInput],
}

/// Global conditioning `y` and per-identity offsets.
#[derive(Clone, Debug, PartialEq)]
pub struct ModulationState {
    pub y: Tensor,
    pub deltas: Vec<Tensor>,
}

impl ModulationState {
    /// `y + delta_i`.
    pub fn identity_conditioning(&self, i: usize) -> Tensor {
        self.y
            .zip_map(&self.deltas[i], |a, b| a + b)
            .expect("offsets share the width of y")
    }
}

/// Per-token `(alpha, beta, gamma)`, each `[N, d]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Triple {
    pub alpha: Tensor,
    pub beta: Tensor,
    pub gamma: Tensor,
}

#[derive(Clone, Debug)]
struct BlockIds {
    mods: [(ParamId, ParamId); 2],
    q: (ParamId, ParamId),
    k: (ParamId, ParamId),
    v: (ParamId, ParamId),
    o: (ParamId, ParamId),
    fc1: (ParamId, ParamId),
    fc2: (ParamId, ParamId),
}

#[derive(Clone, Debug)]
struct Ids {
    patch: (ParamId, ParamId),
    text: ParamId,
    glob1: (ParamId, ParamId),
    glob2: (ParamId, ParamId),
    id1: (ParamId, ParamId),
    id2: (ParamId, ParamId),
    blocks: Vec<BlockIds>,
    head: (ParamId, ParamId),
}

#[derive(Clone, Debug)]
pub struct Dit {
    pub config: DitConfig,
    pub params: ParamStore,
    ids: Ids,
}

fn linear_params<R: Rng>(
    store: &mut ParamStore,
    rng: &mut R,
    name: &str,
    fan_in: usize,
    fan_out: usize,
    std: f64,
) -> Result<(ParamId, ParamId)> {
    let w = store.add(format!("{name}.w"), normal_init(rng, fan_in, fan_out, std))?;
    let b = store.add(format!("{name}.b"), Tensor::zeros(&[1, fan_out]))?;
    Ok((w, b))
}

/// Sinusoidal features of `1000 t`, cosines then sines.
pub fn time_embedding(t: f64, dim: usize) -> Tensor {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for k in 0..half {
        let freq = (-(10000f64).ln() * k as f64 / half as f64).exp();
        let a = 1000.0 * t * freq;
        out[k] = a.cos();
        out[half + k] = a.sin();
    }
    Tensor::row(&out)
}

struct Ctx<'a> {
    store: &'a ParamStore,
    tape: &'a mut Tape,
}

impl Ctx<'_> {
    fn p(&mut self, id: ParamId) -> Var {
        self.tape.param(self.store, id)
    }

    fn linear(&mut self, x: Var, (w, b): (ParamId, ParamId)) -> Result<Var> {
        let (w, b) = (self.p(w), self.p(b));
        self.tape.linear(x, w, b)
    }
}

struct Traced {
    tokens: Var,
    layout: SequenceLayout,
}

impl Dit {
    pub fn new<R: Rng>(config: DitConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let d = config.width;
        let inv = |n: usize| 1.0 / (n as f64).sqrt();
        let mut s = ParamStore::new();
        let patch = linear_params(&mut s, rng, "patch", config.patch_dim(), d, inv(config.patch_dim()))?;
        let text = s.add("text.table", normal_init(rng, config.vocab, d, 1.0))?;
        let glob1 = linear_params(&mut s, rng, "glob.fc1", config.time_dim + d, d, inv(config.time_dim + d))?;
        let glob2 = linear_params(&mut s, rng, "glob.fc2", d, d, inv(d))?;
        let id1 = linear_params(&mut s, rng, "id.fc1", config.embed_dim, d, inv(config.embed_dim))?;
        let id2 = linear_params(&mut s, rng, "id.fc2", d, d, 0.0)?;
        let mut blocks = Vec::with_capacity(config.blocks);
        for b in 0..config.blocks {
            let sub_mod = |s: &mut ParamStore, rng: &mut R, name: String| -> Result<(ParamId, ParamId)> {
                let (w, bias) = linear_params(s, rng, &name, d, 3 * d, inv(d))?;
                let t = &mut s.get_mut(w).tensor;
                for r in 0..d {
                    for c in 2 * d..3 * d {
                        t.set(r, c, 0.0);
                    }
                }
                Ok((w, bias))
            };
            let mods = [
                sub_mod(&mut s, rng, format!("block{b}.attn.mod"))?,
                sub_mod(&mut s, rng, format!("block{b}.mlp.mod"))?,
            ];
            let mut lin = |s: &mut ParamStore, name: &str, i: usize, o: usize| {
                linear_params(s, rng, &format!("block{b}.{name}"), i, o, inv(i))
            };
            blocks.push(BlockIds {
                mods,
                q: lin(&mut s, "attn.q", d, d)?,
                k: lin(&mut s, "attn.k", d, d)?,
                v: lin(&mut s, "attn.v", d, d)?,
                o: lin(&mut s, "attn.o", d, d)?,
                fc1: lin(&mut s, "mlp.fc1", d, 2 * d)?,
                fc2: lin(&mut s, "mlp.fc2", 2 * d, d)?,
            });
        }
        let head = linear_params(&mut s, rng, "head", d, config.patch_dim(), inv(d))?;
        Ok(Self {
            config,
            params: s,
            ids: Ids {
                patch,
                text,
                glob1,
                glob2,
                id1,
                id2,
                blocks,
                head,
            },
        })
    }

    /// Replaces the zero-initialized gate slices and the offset MLP's final
    /// layer with small random values. Used to probe paths that are inert
    /// at initialization.
    pub fn randomize_zero_init<R: Rng>(&mut self, rng: &mut R, std: f64) {
        let d = self.config.width;
        let mut fill = |id: ParamId, cols: std::ops::Range<usize>| {
            let t = &mut self.params.get_mut(id).tensor;
            for r in 0..t.rows() {
                for c in cols.clone() {
                    t.set(r, c, std * rng.sample::<f64, _>(rand_distr::StandardNormal));
                }
            }
        };
        for b in &self.ids.blocks {
            for &(w, bias) in &b.mods {
                fill(w, 2 * d..3 * d);
                fill(bias, 2 * d..3 * d);
            }
        }
        fill(self.ids.id2.0, 0..d);
        fill(self.ids.id2.1, 0..d);
    }

    /// Zeroes the global-conditioning MLP's final layer.
    pub fn zero_global_head(&mut self) {
        for id in [self.ids.glob2.0, self.ids.glob2.1] {
            self.params.get_mut(id).tensor.data_mut().fill(0.0);
        }
    }

    fn check_input(&self, input: &ModelInput) -> Result<()> {
        let (gw, gh) = input.grid;
        if input.x_t.shape() != [gw * gh, self.config.patch_dim()] {
            return Err(contract(format!(
                "x_t has shape {:?}, expected [{}, {}]",
                input.x_t.shape(),
                gw * gh,
                self.config.patch_dim()
            )));
        }
        if !(0.0..=1.0).contains(&input.t) {
            return Err(contract(format!("t = {} outside [0,1]", input.t)));
        }
        if input.prompt.is_empty() {
            return Err(contract("prompt must hold at least one token"));
        }
        if let Some(&bad) = input.prompt.iter().find(|&&id| id >= self.config.vocab) {
            return Err(contract(format!("prompt token {bad} outside vocab {}", self.config.vocab)));
        }
        for (i, id) in input.identities.iter().enumerate() {
            if let Some(p) = &id.patches {
                if p.rows() != id.coords.len() || p.cols() != self.config.patch_dim() {
                    return Err(contract(format!("identity {i}: patches do not match coords or patch size")));
                }
            }
            if let Some(e) = &id.embedding {
                if e.len() != self.config.embed_dim {
                    return Err(contract(format!(
                        "identity {i}: embedding has {} dims, model expects {}",
                        e.len(),
                        self.config.embed_dim
                    )));
                }
            }
        }
        Ok(())
    }

    fn global_conditioning(&self, ctx: &mut Ctx, t: f64, text: Var) -> Result<Var> {
        let n = ctx.tape.value(text).rows();
        let ones = ctx.tape.leaf(Tensor::filled(&[1, n], 1.0 / n as f64));
        let mean = ctx.tape.matmul(ones, text)?;
        let temb = ctx.tape.leaf(time_embedding(t, self.config.time_dim));
        let cat = ctx.tape.concat_cols(&[temb, mean])?;
        let h = ctx.linear(cat, self.ids.glob1)?;
        let h = ctx.tape.gelu(h);
        ctx.linear(h, self.ids.glob2)
    }

    fn identity_offset(&self, ctx: &mut Ctx, e: Var) -> Result<Var> {
        let h = ctx.linear(e, self.ids.id1)?;
        let h = ctx.tape.gelu(h);
        ctx.linear(h, self.ids.id2)
    }

    /// `[y, y + delta_1, ..]` (just `[y]` without identity modulation) and
    /// the table row each token reads.
    fn conditioning_table(
        &self,
        ctx: &mut Ctx,
        input: &ModelInput,
        text: Var,
        layout: &SequenceLayout,
    ) -> Result<(Var, Vec<usize>, Var, Vec<Var>)> {
        let y = self.global_conditioning(ctx, input.t, text)?;
        let mut deltas = Vec::new();
        let mut rows = vec![y];
        if self.config.identity_modulation {
            for id in input.identities {
                let e = match &id.embedding {
                    Some(e) => Tensor::row(e),
                    None => Tensor::zeros(&[1, self.config.embed_dim]),
                };
                let e = ctx.tape.leaf(e);
                let delta = self.identity_offset(ctx, e)?;
                rows.push(ctx.tape.add(y, delta)?);
                deltas.push(delta);
            }
        }
        let table = ctx.tape.concat_rows(&rows)?;
        let modulated = self.config.identity_modulation;
        let index = layout
            .branches()
            .iter()
            .map(|b| match b {
                Branch::Identity(i) if modulated => 1 + i,
                _ => 0,
            })
            .collect();
        Ok((table, index, y, deltas))
    }

    fn triple(&self, ctx: &mut Ctx, table: Var, index: &[usize], ids: (ParamId, ParamId)) -> Result<[Var; 3]> {
        let d = self.config.width;
        let g = ctx.tape.gelu(table);
        let m = ctx.linear(g, ids)?;
        let per = ctx.tape.gather_rows(m, index)?;
        Ok([
            ctx.tape.slice_cols(per, 0, d)?,
            ctx.tape.slice_cols(per, d, d)?,
            ctx.tape.slice_cols(per, 2 * d, d)?,
        ])
    }

    /// `(1 + alpha) * LN(x) + beta`.
    fn modulate(ctx: &mut Ctx, x: Var, alpha: Var, beta: Var) -> Result<Var> {
        let ln = ctx.tape.layer_norm(x)?;
        let a = ctx.tape.add_scalar(alpha, 1.0);
        let h = ctx.tape.mul(a, ln)?;
        ctx.tape.add(h, beta)
    }

    fn embed_tokens(&self, ctx: &mut Ctx, input: &ModelInput) -> Result<(Var, Var, SequenceLayout)> {
        let d = self.config.width;
        let table = ctx.p(self.ids.text);
        let text = ctx.tape.gather_rows(table, input.prompt)?;
        let x = ctx.tape.leaf(input.x_t.clone());
        let image = ctx.linear(x, self.ids.patch)?;
        let mut parts = vec![text, image];
        for id in input.identities {
            let tok = match &id.patches {
                Some(p) if p.rows() > 0 => {
                    let leaf = ctx.tape.leaf(p.clone());
                    ctx.linear(leaf, self.ids.patch)?
                }
                _ => ctx.tape.leaf(Tensor::zeros(&[id.coords.len(), d])),
            };
            parts.push(tok);
        }
        let tokens = ctx.tape.concat_rows(&parts)?;
        let coords: Vec<Vec<RopeCoord>> = input.identities.iter().map(|i| i.coords.clone()).collect();
        let layout = SequenceLayout::new(input.prompt.len(), input.grid, &coords)?;
        Ok((tokens, text, layout))
    }

    fn head_rotation(&self, layout: &SequenceLayout) -> Result<Rc<PairRotation>> {
        let rope = self.config.rope()?;
        let heads = self.config.heads;
        let pairs = self.config.head_dim() / 2;
        let mut angles = Vec::with_capacity(layout.len() * pairs * heads);
        for &c in layout.coords() {
            let a = rope.angles(c);
            for _ in 0..heads {
                angles.extend_from_slice(&a);
            }
        }
        Ok(Rc::new(PairRotation::from_angles(layout.len(), pairs * heads, &angles)?))
    }

    fn attention(&self, ctx: &mut Ctx, h: Var, b: &BlockIds, rot: &Rc<PairRotation>, mask: &crate::numerics::AttentionMask) -> Result<Var> {
        let q = ctx.linear(h, b.q)?;
        let k = ctx.linear(h, b.k)?;
        let v = ctx.linear(h, b.v)?;
        let q = ctx.tape.rotate(q, rot)?;
        let k = ctx.tape.rotate(k, rot)?;
        let hd = self.config.head_dim();
        let mut heads = Vec::with_capacity(self.config.heads);
        for i in 0..self.config.heads {
            let (qh, kh, vh) = (
                ctx.tape.slice_cols(q, i * hd, hd)?,
                ctx.tape.slice_cols(k, i * hd, hd)?,
                ctx.tape.slice_cols(v, i * hd, hd)?,
            );
            heads.push(ctx.tape.attention(qh, kh, vh, mask)?);
        }
        let o = if heads.len() == 1 { heads[0] } else { ctx.tape.concat_cols(&heads)? };
        ctx.linear(o, b.o)
    }

    fn trace(&self, ctx: &mut Ctx, input: &ModelInput, blocks: usize) -> Result<Traced> {
        self.check_input(input)?;
        let (mut x, text, layout) = self.embed_tokens(ctx, input)?;
        let (table, index, _, _) = self.conditioning_table(ctx, input, text, &layout)?;
        let mask = build_mask(&layout, self.config.isolated_attention);
        let rot = self.head_rotation(&layout)?;
        for b in &self.ids.blocks[..blocks] {
            let [a1, b1, g1] = self.triple(ctx, table, &index, b.mods[0])?;
            let h = Self::modulate(ctx, x, a1, b1)?;
            let out = self.attention(ctx, h, b, &rot, &mask)?;
            let gated = ctx.tape.mul(g1, out)?;
            x = ctx.tape.add(x, gated)?;

            let [a2, b2, g2] = self.triple(ctx, table, &index, b.mods[1])?;
            let h = Self::modulate(ctx, x, a2, b2)?;
            let h = ctx.linear(h, b.fc1)?;
            let h = ctx.tape.gelu(h);
            let out = ctx.linear(h, b.fc2)?;
            let gated = ctx.tape.mul(g2, out)?;
            x = ctx.tape.add(x, gated)?;
        }
        Ok(Traced { tokens: x, layout })
    }

    /// Predicted velocity over image tokens, `[gw*gh, 3p^2]`, using the
    /// parameters in `store` (which must share this model's layout).
    pub fn forward_in(&self, store: &ParamStore, tape: &mut Tape, input: &ModelInput) -> Result<Var> {
        let mut ctx = Ctx { store, tape };
        let traced = self.trace(&mut ctx, input, self.config.blocks)?;
        let img = traced.layout.image();
        let xi = ctx.tape.slice_rows(traced.tokens, img.start, img.len)?;
        ctx.linear(xi, self.ids.head)
    }

    pub fn forward(&self, tape: &mut Tape, input: &ModelInput) -> Result<Var> {
        self.forward_in(&self.params, tape, input)
    }

    /// Forward without gradients.
    pub fn velocity(&self, input: &ModelInput) -> Result<Tensor> {
        let mut tape = Tape::new();
        let v = self.forward(&mut tape, input)?;
        Ok(tape.value(v).clone())
    }

    /// All tokens after the first `blocks` blocks.
    pub fn hidden_states(&self, input: &ModelInput, blocks: usize) -> Result<(Tensor, SequenceLayout)> {
        if blocks > self.config.blocks {
            return Err(contract(format!("model has only {} blocks", self.config.blocks)));
        }
        let mut tape = Tape::new();
        let mut ctx = Ctx { store: &self.params, tape: &mut tape };
        let traced = self.trace(&mut ctx, input, blocks)?;
        Ok((tape.value(traced.tokens).clone(), traced.layout))
    }

    /// The unconditional input for CFG: every identity replaced by the
    /// null condition at the same coordinates.
    pub fn unconditional(identities: &[IdentityInput]) -> Vec<IdentityInput> {
        identities.iter().map(IdentityInput::dropped).collect()
    }

    pub fn modulation_state(&self, input: &ModelInput) -> Result<ModulationState> {
        self.check_input(input)?;
        let mut tape = Tape::new();
        let mut ctx = Ctx { store: &self.params, tape: &mut tape };
        let (_, text, layout) = self.embed_tokens(&mut ctx, input)?;
        let (_, _, y, deltas) = self.conditioning_table(&mut ctx, input, text, &layout)?;
        Ok(ModulationState {
            y: tape.value(y).clone(),
            deltas: deltas.iter().map(|&d| tape.value(d).clone()).collect(),
        })
    }

    /// Per-token modulation triple of one sublayer (0 = attention, 1 = MLP).
    pub fn token_triples(&self, input: &ModelInput, block: usize, sublayer: usize) -> Result<Triple> {
        if block >= self.config.blocks || sublayer > 1 {
            return Err(contract(format!("no sublayer {sublayer} in block {block}")));
        }
        self.check_input(input)?;
        let mut tape = Tape::new();
        let mut ctx = Ctx { store: &self.params, tape: &mut tape };
        let (_, text, layout) = self.embed_tokens(&mut ctx, input)?;
        let (table, index, _, _) = self.conditioning_table(&mut ctx, input, text, &layout)?;
        let [a, b, g] = self.triple(&mut ctx, table, &index, self.ids.blocks[block].mods[sublayer])?;
        Ok(Triple {
            alpha: tape.value(a).clone(),
            beta: tape.value(b).clone(),
            gamma: tape.value(g).clone(),
        })
    }

    /// Parameters of the identity-offset MLP.
    pub fn identity_mlp_params(&self) -> [ParamId; 4] {
        [self.ids.id1.0, self.ids.id1.1, self.ids.id2.0, self.ids.id2.1]
    }

    /// Standalone `y` from a timestep and prompt.
    pub fn global_conditioning_vector(&self, t: f64, prompt: &[usize]) -> Result<Tensor> {
        if !(0.0..=1.0).contains(&t) {
            return Err(contract(format!("t = {t} outside [0,1]")));
        }
        if prompt.is_empty() {
            return Err(contract("prompt must hold at least one token"));
        }
        let mut tape = Tape::new();
        let mut ctx = Ctx { store: &self.params, tape: &mut tape };
        let table = ctx.p(self.ids.text);
        let text = ctx.tape.gather_rows(table, prompt)?;
        let y = self.global_conditioning(&mut ctx, t, text)?;
        Ok(tape.value(y).clone())
    }

    /// Standalone `delta = MLP_id(e)`.
    pub fn identity_offset_vector(&self, e: &[f64]) -> Result<Tensor> {
        if e.len() != self.config.embed_dim {
            return Err(contract("embedding width does not match the model"));
        }
        let mut tape = Tape::new();
        let mut ctx = Ctx { store: &self.params, tape: &mut tape };
        let e = ctx.tape.leaf(Tensor::row(e));
        let d = self.identity_offset(&mut ctx, e)?;
        Ok(tape.value(d).clone())
    }
}
