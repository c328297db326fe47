use std::sync::Arc;

use super::config::{ModelConfig, PartRegionSpec};
use super::params::{BlockSlots, EncoderParams};
use crate::autodiff::{AttentionGroup, AttentionLayout, AttentionProbs, Tape, Var};
use crate::error::{PatError, Result};
use crate::tensor::{Real, Tensor};

/// Which learned token an attention map or feature refers to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TokenRef {
    Class,
    /// Zero-based part index.
    Part(usize),
}

impl std::str::FromStr for TokenRef {
    type Err = PatError;

    fn from_str(s: &str) -> Result<Self> {
        if s == "cls" {
            return Ok(TokenRef::Class);
        }
        s.strip_prefix('p')
            .and_then(|n| n.parse::<usize>().ok())
            .filter(|&n| n >= 1)
            .map(|n| TokenRef::Part(n - 1))
            .ok_or_else(|| PatError::config(format!("unknown token {s:?} (expected cls|p1|p2|...)")))
    }
}

/// Forward result for a batch of images.
#[derive(Clone, Debug)]
pub struct EncoderOutput<T: Real = f32> {
    /// `B x D` class-token features.
    pub global: Tensor<T>,
    /// One `B x D` tensor per part token.
    pub locals: Vec<Tensor<T>>,
    /// `B x num_classes`.
    pub logits: Tensor<T>,
    /// Per-block attention weights, when retained.
    pub attention: Option<Vec<AttentionProbs<T>>>,
}

/// Tape handles produced by [`Encoder::forward_tape`].
#[derive(Clone, Debug)]
pub struct TapeOutput {
    pub global: Var,
    pub locals: Vec<Var>,
    pub logits: Var,
    pub attention: Vec<Var>,
    /// Token sequence entering the first block, `(B * S) x D`.
    pub tokens: Var,
}

/// Model geometry: config, part regions and the attention pattern they imply.
#[derive(Clone, Debug)]
pub struct Encoder {
    config: ModelConfig,
    regions: PartRegionSpec,
    layout: Arc<AttentionLayout>,
}

impl Encoder {
    pub fn new(config: ModelConfig, regions: PartRegionSpec) -> Result<Self> {
        config.validate()?;
        regions.validate()?;
        let (gh, gw) = config.grid();
        if regions.grid_h != gh || regions.grid_w != gw {
            return Err(PatError::config(format!(
                "regions are for a {}x{} grid, model grid is {gh}x{gw}",
                regions.grid_h, regions.grid_w
            )));
        }
        if regions.num_parts() != config.num_parts {
            return Err(PatError::config(format!(
                "{} part regions for {} part tokens",
                regions.num_parts(),
                config.num_parts
            )));
        }
        let layout = Arc::new(build_layout(&config, &regions));
        Ok(Self {
            config,
            regions,
            layout,
        })
    }

    /// Encoder with the default vertical square windows.
    pub fn with_default_regions(config: ModelConfig) -> Result<Self> {
        let (gh, gw) = config.grid();
        let regions = super::config::default_part_regions(gh, gw, config.num_parts)?;
        Self::new(config, regions)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn regions(&self) -> &PartRegionSpec {
        &self.regions
    }

    pub fn layout(&self) -> &Arc<AttentionLayout> {
        &self.layout
    }

    fn check_image<T: Real>(&self, image: &Tensor<T>) -> Result<()> {
        let c = &self.config;
        let want = [c.channels, c.image_h, c.image_w];
        if image.dims() != want {
            return Err(PatError::shape("patch_embed", image.dims(), &want));
        }
        Ok(())
    }

    /// Flattens a `C x H x W` image into `N x (C*p*p)` patch rows, patches in
    /// row-major grid order, each patch ordered by (channel, dy, dx).
    pub fn patchify<T: Real>(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_image(image)?;
        let c = &self.config;
        let p = c.patch_size;
        let (gh, gw) = c.grid();
        let (h, w) = (c.image_h, c.image_w);
        let src = image.data();
        let mut out = Vec::with_capacity(c.num_patches() * c.patch_dim());
        for gy in 0..gh {
            for gx in 0..gw {
                for ch in 0..c.channels {
                    for dy in 0..p {
                        let row = ch * h * w + (gy * p + dy) * w + gx * p;
                        out.extend_from_slice(&src[row..row + p]);
                    }
                }
            }
        }
        Tensor::new(vec![c.num_patches(), c.patch_dim()], out)
    }

    /// Linear patch embedding, `N x D`.
    pub fn patch_embed<T: Real>(&self, image: &Tensor<T>, params: &EncoderParams<T>) -> Result<Tensor<T>> {
        let patches = self.patchify(image)?;
        let s = params.slots();
        let mut out = patches.matmul(params.get(s.patch_w))?;
        let bias = params.get(s.patch_b).data().to_vec();
        let d = self.config.embed_dim;
        for row in out.data_mut().chunks_mut(d) {
            for (x, &b) in row.iter_mut().zip(&bias) {
                *x += b;
            }
        }
        Ok(out)
    }

    /// Records the batched forward pass on `tape`. `vars` come from
    /// [`EncoderParams::register`] or [`EncoderParams::register_const`].
    pub fn forward_tape<T: Real>(
        &self,
        tape: &mut Tape<T>,
        params: &EncoderParams<T>,
        vars: &[Var],
        images: &[&Tensor<T>],
    ) -> Result<TapeOutput> {
        let c = &self.config;
        if images.is_empty() {
            return Err(PatError::config("empty batch"));
        }
        let b = images.len();
        let n = c.num_patches();
        let m = c.num_parts;
        let seq = c.seq_len();
        let slot = params.slots();

        let mut patch_rows = Vec::with_capacity(b * n * c.patch_dim());
        for img in images {
            patch_rows.extend_from_slice(self.patchify(img)?.data());
        }
        let patches = tape.constant(Tensor::new(vec![b * n, c.patch_dim()], patch_rows)?);
        let emb = tape.matmul(patches, vars[slot.patch_w])?;
        let emb = tape.add_row(emb, vars[slot.patch_b])?;

        // [cls, parts..., patches of sample 0, patches of sample 1, ...]
        let pool = tape.concat_rows(&[vars[slot.cls_token], vars[slot.part_tokens], emb])?;
        let mut token_index = Vec::with_capacity(b * seq);
        let mut pos_index = Vec::with_capacity(b * seq);
        for s in 0..b {
            for t in 0..seq {
                token_index.push(if t <= m { t } else { 1 + m + s * n + (t - 1 - m) });
                pos_index.push(t);
            }
        }
        let z = tape.gather_rows(pool, &token_index)?;
        let pos = tape.gather_rows(vars[slot.pos_embed], &pos_index)?;
        let mut z = tape.add(z, pos)?;
        let tokens = z;

        let mut attention = Vec::with_capacity(c.blocks);
        for (l, bs) in slot.blocks.iter().enumerate() {
            let (next, attn) = self.block(tape, vars, bs, z)?;
            if !tape.value(next).is_finite() {
                return Err(PatError::NonFinite(format!("encoder block {l}")));
            }
            z = next;
            attention.push(attn);
        }
        let z = tape.layer_norm(z, vars[slot.norm_gamma], vars[slot.norm_beta])?;

        let cls_rows: Vec<usize> = (0..b).map(|s| s * seq).collect();
        let global = tape.gather_rows(z, &cls_rows)?;
        let mut locals = Vec::with_capacity(m);
        for i in 0..m {
            let rows: Vec<usize> = (0..b).map(|s| s * seq + 1 + i).collect();
            locals.push(tape.gather_rows(z, &rows)?);
        }
        let logits = tape.matmul(global, vars[slot.head_w])?;
        let logits = tape.add_row(logits, vars[slot.head_b])?;
        Ok(TapeOutput {
            global,
            locals,
            logits,
            attention,
            tokens,
        })
    }

    fn block<T: Real>(&self, tape: &mut Tape<T>, vars: &[Var], bs: &BlockSlots, z: Var) -> Result<(Var, Var)> {
        let h = tape.layer_norm(z, vars[bs.ln1_gamma], vars[bs.ln1_beta])?;
        let attn = self.attention_core(tape, vars, bs, h, &self.layout)?;
        let o = tape.matmul(attn, vars[bs.wo])?;
        let o = tape.add_row(o, vars[bs.bo])?;
        let z = tape.add(z, o)?;
        let h = tape.layer_norm(z, vars[bs.ln2_gamma], vars[bs.ln2_beta])?;
        let f = tape.matmul(h, vars[bs.fc1_w])?;
        let f = tape.add_row(f, vars[bs.fc1_b])?;
        let f = tape.gelu(f);
        let f = tape.matmul(f, vars[bs.fc2_w])?;
        let f = tape.add_row(f, vars[bs.fc2_b])?;
        Ok((tape.add(z, f)?, attn))
    }

    /// Shared Q/K/V projections followed by grouped attention.
    fn attention_core<T: Real>(
        &self,
        tape: &mut Tape<T>,
        vars: &[Var],
        bs: &BlockSlots,
        h: Var,
        layout: &Arc<AttentionLayout>,
    ) -> Result<Var> {
        let q = tape.matmul(h, vars[bs.wq])?;
        let q = tape.add_row(q, vars[bs.bq])?;
        let k = tape.matmul(h, vars[bs.wk])?;
        let k = tape.add_row(k, vars[bs.bk])?;
        let v = tape.matmul(h, vars[bs.wv])?;
        let v = tape.add_row(v, vars[bs.bv])?;
        tape.attention(q, k, v, self.config.heads, layout)
    }

    /// Inference forward over a batch; attention weights kept when `retain`.
    pub fn forward<T: Real>(
        &self,
        params: &EncoderParams<T>,
        images: &[&Tensor<T>],
        retain: bool,
    ) -> Result<EncoderOutput<T>> {
        let mut tape = Tape::new();
        let vars = params.register_const(&mut tape);
        let out = self.forward_tape(&mut tape, params, &vars, images)?;
        let attention = retain.then(|| {
            out.attention
                .iter()
                .map(|&a| tape.attention_probs(a).expect("attention node").clone())
                .collect()
        });
        Ok(EncoderOutput {
            global: tape.value(out.global).clone(),
            locals: out.locals.iter().map(|&v| tape.value(v).clone()).collect(),
            logits: tape.value(out.logits).clone(),
            attention,
        })
    }

    fn block_slots<'a, T: Real>(&self, params: &'a EncoderParams<T>, block: usize) -> Result<&'a BlockSlots> {
        params.slots().blocks.get(block).ok_or(PatError::Index {
            what: "block",
            index: block,
            len: self.config.blocks,
        })
    }

    fn check_sequence<T: Real>(&self, z: &Tensor<T>) -> Result<()> {
        let want = [self.config.seq_len(), self.config.embed_dim];
        if z.dims() != want {
            return Err(PatError::shape("attention", z.dims(), &want));
        }
        Ok(())
    }

    fn single_layout_attention<T: Real>(
        &self,
        z: &Tensor<T>,
        params: &EncoderParams<T>,
        block: usize,
        layout: AttentionLayout,
    ) -> Result<Tensor<T>> {
        self.check_sequence(z)?;
        let bs = self.block_slots(params, block)?;
        let mut tape = Tape::new();
        let vars = params.register_const(&mut tape);
        let h = tape.constant(z.clone());
        let out = self.attention_core(&mut tape, &vars, bs, h, &Arc::new(layout))?;
        Ok(tape.value(out).clone())
    }

    /// Attention of `[class, image_1..N]` among themselves using block
    /// `block`'s projections on the sequence `z` (`S x D`). Returns the
    /// `(1 + N) x D` attention output for those rows.
    pub fn global_attention<T: Real>(&self, z: &Tensor<T>, params: &EncoderParams<T>, block: usize) -> Result<Tensor<T>> {
        let seq = self.config.seq_len();
        let layout = AttentionLayout {
            seq_len: seq,
            groups: vec![self.layout.groups[0].clone()],
        };
        let out = self.single_layout_attention(z, params, block, layout)?;
        let rows: Vec<usize> = self.layout.groups[0].queries.clone();
        gather(&out, &rows)
    }

    /// Each part token attending to itself and its region only. Returns the
    /// `M x D` attention output of the part-token rows.
    pub fn part_attention<T: Real>(
        &self,
        z: &Tensor<T>,
        params: &EncoderParams<T>,
        block: usize,
        regions: &PartRegionSpec,
    ) -> Result<Tensor<T>> {
        regions.validate()?;
        if regions.num_parts() != self.config.num_parts {
            return Err(PatError::config("region count does not match part tokens"));
        }
        let layout = build_layout(&self.config, regions);
        let groups = layout.groups[1..].to_vec();
        let layout = AttentionLayout {
            seq_len: layout.seq_len,
            groups,
        };
        let out = self.single_layout_attention(z, params, block, layout)?;
        let rows: Vec<usize> = (1..=self.config.num_parts).collect();
        gather(&out, &rows)
    }

    /// Average attention of `token` over image tokens across the first
    /// `ceil(L/2)` blocks and all heads, as a `grid_h x grid_w` map scaled so
    /// its maximum is 1.
    pub fn fused_attention_map<T: Real>(
        &self,
        output: &EncoderOutput<T>,
        sample: usize,
        token: TokenRef,
    ) -> Result<Tensor<f64>> {
        let attention = output
            .attention
            .as_ref()
            .ok_or_else(|| PatError::State("attention weights were not retained".into()))?;
        let c = &self.config;
        let m = c.num_parts;
        let n = c.num_patches();
        let (gh, gw) = c.grid();
        if attention.is_empty() {
            return Err(PatError::State("encoder has no blocks".into()));
        }
        let (group, query_pos) = match token {
            TokenRef::Class => (0, 0),
            TokenRef::Part(i) if i < m => (1 + i, 0),
            TokenRef::Part(i) => {
                return Err(PatError::Index {
                    what: "part token",
                    index: i,
                    len: m,
                })
            }
        };
        let used = c.blocks.div_ceil(2);
        let mut map = vec![0.0f64; n];
        for probs in attention.iter().take(used) {
            if sample >= probs.probs.len() {
                return Err(PatError::Index {
                    what: "sample",
                    index: sample,
                    len: probs.probs.len(),
                });
            }
            let keys = &probs.layout.groups[group].keys;
            let nk = keys.len();
            for h in 0..probs.heads {
                let p = probs.group(sample, group, h);
                let row = &p[query_pos * nk..(query_pos + 1) * nk];
                for (&key, &w) in keys.iter().zip(row) {
                    if key > m {
                        map[key - 1 - m] += w.f64();
                    }
                }
            }
        }
        let denom = (used * c.heads) as f64;
        for v in &mut map {
            *v /= denom;
        }
        let max = map.iter().copied().fold(0.0, f64::max);
        if max > 0.0 {
            for v in &mut map {
                *v /= max;
            }
        }
        Tensor::new(vec![gh, gw], map)
    }
}

fn gather<T: Real>(t: &Tensor<T>, rows: &[usize]) -> Result<Tensor<T>> {
    let mut data = Vec::with_capacity(rows.len() * t.cols());
    for &r in rows {
        data.extend_from_slice(t.row(r));
    }
    Tensor::new(vec![rows.len(), t.cols()], data)
}

/// Group 0: class + image tokens attend among themselves. Group 1 + i: part
/// token i attends to itself and the image tokens of its region.
fn build_layout(cfg: &ModelConfig, regions: &PartRegionSpec) -> AttentionLayout {
    let m = cfg.num_parts;
    let seq = cfg.seq_len();
    let mut global: Vec<usize> = vec![0];
    global.extend(1 + m..seq);
    let mut groups = vec![AttentionGroup {
        queries: global.clone(),
        keys: global,
    }];
    for (i, region) in regions.regions.iter().enumerate() {
        let mut keys = vec![1 + i];
        keys.extend(region.iter().map(|&t| 1 + m + t));
        groups.push(AttentionGroup {
            queries: vec![1 + i],
            keys,
        });
    }
    AttentionLayout {
        seq_len: seq,
        groups,
    }
}
