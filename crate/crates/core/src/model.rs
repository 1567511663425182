//! Full tracking model: patch embedding + positional tables + coordinate
//! vocabulary feeding the bidirectional scan encoder, with the center head
//! reading the element-wise fused RGB/TIR search tokens and the query
//! readout reading the four query tokens.
//!
//! The struct owns every learnable array (including the prompt vocabulary,
//! which stage-1 training simply never routes), so a checkpoint is always
//! complete. Serialization uses the named-array container in
//! [`crate::arrayfile`].

use crate::arrayfile::{self, ArrayFileError, NamedArray};
use crate::assembly::{
    add_positional, build_sequence, embed_prompts, patch_embed, patch_embed_backward,
    AssemblyError, ConcatMode, CoordVocabulary, Image, Modality, PatchEmbedParams,
    PositionalTables, PromptTokens, Role, ScanOrder, TemplateTokens, TokenSequence, TokenSource,
};
use crate::encoder::{self, EncoderDims, EncoderGrads, EncoderParams};
use crate::geom::Box2;
use crate::head::{
    head_backward, head_forward, query_readout, query_readout_backward, HeadCache, HeadGrads,
    HeadMaps, HeadParams, QueryCache, QueryReadout, QueryReadoutGrads,
};
use crate::rng::Rng;
use crate::tensor::{LinearGrads, Mat};

#[derive(Debug)]
pub enum ModelError {
    Assembly(AssemblyError),
    ArrayFile(ArrayFileError),
    MissingSearchTokens,
    MissingQueryTokens,
    MissingArray(String),
    UnexpectedArray(String),
    ShapeMismatch(String),
    BadDims(String),
}

impl std::fmt::Display for ModelError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ModelError::Assembly(e) => write!(f, "assembly: {e}"),
            ModelError::ArrayFile(e) => write!(f, "checkpoint: {e}"),
            ModelError::MissingSearchTokens => write!(f, "sequence lacks search tokens"),
            ModelError::MissingQueryTokens => write!(f, "sequence lacks query tokens"),
            ModelError::MissingArray(n) => write!(f, "checkpoint missing array {n}"),
            ModelError::UnexpectedArray(n) => write!(f, "checkpoint has unknown array {n}"),
            ModelError::ShapeMismatch(n) => write!(f, "checkpoint shape mismatch for {n}"),
            ModelError::BadDims(msg) => write!(f, "bad model dims: {msg}"),
        }
    }
}

impl std::error::Error for ModelError {}

impl From<AssemblyError> for ModelError {
    fn from(e: AssemblyError) -> Self {
        ModelError::Assembly(e)
    }
}

impl From<ArrayFileError> for ModelError {
    fn from(e: ArrayFileError) -> Self {
        ModelError::ArrayFile(e)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModelDims {
    pub d_model: usize,
    pub n_state: usize,
    pub layers: usize,
    pub patch: usize,
    pub template_size: usize,
    pub search_size: usize,
    pub nbins: usize,
    pub alpha: f64,
    pub prompt_capacity: usize,
    pub head_hidden: usize,
}

impl ModelDims {
    /// Desk-scale defaults exercised by the harness.
    pub fn desk() -> Self {
        ModelDims {
            d_model: 32,
            n_state: 8,
            layers: 2,
            patch: 16,
            template_size: 64,
            search_size: 128,
            nbins: 400,
            alpha: 2.0,
            prompt_capacity: 7,
            head_hidden: 32,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.template_size % self.patch != 0 || self.search_size % self.patch != 0 {
            return Err(ModelError::BadDims(
                "template/search size must be divisible by patch".into(),
            ));
        }
        if self.nbins < 2 {
            return Err(ModelError::BadDims("nbins must be >= 2".into()));
        }
        if !(self.alpha >= 1.0) {
            return Err(ModelError::BadDims("alpha must be >= 1".into()));
        }
        if self.d_model == 0 || self.n_state == 0 || self.head_hidden == 0 {
            return Err(ModelError::BadDims("zero dimension".into()));
        }
        Ok(())
    }

    pub fn l_template(&self) -> usize {
        (self.template_size / self.patch) * (self.template_size / self.patch)
    }

    pub fn l_search(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn grid(&self) -> usize {
        self.search_size / self.patch
    }

    pub fn encoder_dims(&self) -> EncoderDims {
        EncoderDims::new(self.d_model, self.n_state, self.layers)
    }
}

#[derive(Clone, Debug)]
pub struct CropPair {
    pub rgb: Image,
    pub tir: Image,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub dims: ModelDims,
    pub patch_embed: PatchEmbedParams,
    pub pos: PositionalTables,
    pub vocab: CoordVocabulary,
    pub encoder: EncoderParams,
    pub head: HeadParams,
    pub readout: QueryReadout,
}

#[derive(Clone, Debug)]
pub struct ModelGrads {
    pub patch_embed: LinearGrads,
    pub pos_template: Mat,
    pub pos_search: Mat,
    pub vocab_table: Mat,
    pub vocab_slot_offsets: Mat,
    pub vocab_query: Mat,
    pub encoder: EncoderGrads,
    pub head: HeadGrads,
    pub readout: QueryReadoutGrads,
}

impl Model {
    pub fn init(seed: u64, dims: ModelDims) -> Result<Model, ModelError> {
        dims.validate()?;
        let base = Rng::new(seed);
        let mut patch_rng = base.fork(0xA1);
        let mut pos_rng = base.fork(0xA2);
        let mut vocab_rng = base.fork(0xA3);
        let mut head_rng = base.fork(0xA4);
        let mut readout_rng = base.fork(0xA5);
        let enc_seed = base.fork(0xA6).next_u64();
        Ok(Model {
            dims,
            patch_embed: PatchEmbedParams::init(dims.patch, 3, dims.d_model, &mut patch_rng),
            pos: PositionalTables::init(
                dims.l_template(),
                dims.l_search(),
                dims.d_model,
                &mut pos_rng,
            ),
            vocab: CoordVocabulary::init(
                dims.nbins,
                dims.alpha,
                dims.prompt_capacity,
                dims.d_model,
                &mut vocab_rng,
            )?,
            encoder: encoder::init_params(enc_seed, dims.encoder_dims()),
            head: HeadParams::init(dims.d_model, dims.head_hidden, &mut head_rng),
            readout: QueryReadout::init(dims.d_model, &mut readout_rng),
        })
    }

    pub fn zeros_grads(&self) -> ModelGrads {
        ModelGrads {
            patch_embed: LinearGrads::zeros_like(&self.patch_embed.proj),
            pos_template: Mat::zeros(self.pos.template.rows(), self.pos.template.cols()),
            pos_search: Mat::zeros(self.pos.search.rows(), self.pos.search.cols()),
            vocab_table: Mat::zeros(self.vocab.table.rows(), self.vocab.table.cols()),
            vocab_slot_offsets: Mat::zeros(
                self.vocab.slot_offsets.rows(),
                self.vocab.slot_offsets.cols(),
            ),
            vocab_query: Mat::zeros(self.vocab.query_init.rows(), self.vocab.query_init.cols()),
            encoder: self.encoder.zeros_grads(),
            head: HeadGrads::zeros_like(&self.head),
            readout: QueryReadoutGrads::zeros_like(&self.readout),
        }
    }

    fn embed_pair(&self, crop: &CropPair) -> Result<(Mat, Mat), ModelError> {
        let rgb = patch_embed(&crop.rgb, &self.patch_embed)?;
        let tir = patch_embed(&crop.tir, &self.patch_embed)?;
        Ok((rgb, tir))
    }

    /// Embeds crops and prompt boxes into the encoder input sequence.
    /// Template crops are (frame index, crop) pairs in ascending frame
    /// order; prompt boxes are oldest-first in search-normalized
    /// coordinates.
    pub fn assemble(
        &self,
        templates: &[(u32, CropPair)],
        search: &CropPair,
        search_frame: u32,
        prompt_boxes: &[Box2],
        prompts_enabled: bool,
        mode: ConcatMode,
        order: ScanOrder,
    ) -> Result<AssembledInput, ModelError> {
        let mut template_tokens = Vec::with_capacity(templates.len());
        for (frame, crop) in templates {
            let (rgb, tir) = self.embed_pair(crop)?;
            template_tokens.push(TemplateTokens {
                rgb: add_positional(&rgb, &self.pos.template)?,
                tir: add_positional(&tir, &self.pos.template)?,
                frame_index: *frame,
            });
        }
        let (s_rgb, s_tir) = self.embed_pair(search)?;
        let s_rgb = add_positional(&s_rgb, &self.pos.search)?;
        let s_tir = add_positional(&s_tir, &self.pos.search)?;

        let prompts: Option<PromptTokens> = if prompts_enabled {
            Some(embed_prompts(prompt_boxes, &self.vocab)?)
        } else {
            None
        };
        let seq = build_sequence(
            &template_tokens,
            &s_rgb,
            &s_tir,
            search_frame,
            prompts.as_ref(),
            mode,
            order,
        )?;
        Ok(AssembledInput {
            seq,
            templates: templates.to_vec(),
            search: search.clone(),
            prompt_boxes: prompt_boxes.to_vec(),
            prompts_enabled,
        })
    }

    pub fn forward(&self, asm: &AssembledInput) -> Result<ModelForward, ModelError> {
        let (enc_out, enc_caches) = encoder::encoder_forward(&asm.seq.tokens, &self.encoder);

        let rgb_pos = asm.seq.positions_of(Role::Search, Modality::Rgb);
        let tir_pos = asm.seq.positions_of(Role::Search, Modality::Tir);
        if rgb_pos.is_empty() || tir_pos.is_empty() || rgb_pos.len() != tir_pos.len() {
            return Err(ModelError::MissingSearchTokens);
        }
        let g = self.dims.grid();
        if rgb_pos.len() != g * g {
            return Err(ModelError::MissingSearchTokens);
        }

        // element-wise RGB + TIR fusion, reshaped to channels x grid
        let d = self.dims.d_model;
        let mut fused = Mat::zeros(d, g * g);
        for (p, (&rp, &tp)) in rgb_pos.iter().zip(&tir_pos).enumerate() {
            let r = enc_out.row(rp);
            let t = enc_out.row(tp);
            for di in 0..d {
                fused.set(di, p, r[di] + t[di]);
            }
        }

        let (maps, head_cache) = head_forward(&self.head, &fused, g);

        let query = if asm.prompts_enabled {
            let q_pos = asm.seq.positions_of(Role::Query, Modality::None);
            if q_pos.len() != 4 {
                return Err(ModelError::MissingQueryTokens);
            }
            let mut tokens = Mat::zeros(4, d);
            for (i, &p) in q_pos.iter().enumerate() {
                tokens.row_mut(i).copy_from_slice(enc_out.row(p));
            }
            let (box_norm, cache) = query_readout(&self.readout, &tokens, self.dims.alpha);
            Some(QueryForward {
                positions: q_pos,
                tokens,
                box_norm,
                cache,
            })
        } else {
            None
        };

        Ok(ModelForward {
            enc_out,
            enc_caches,
            rgb_pos,
            tir_pos,
            fused,
            maps,
            head_cache,
            query,
        })
    }

    /// Backpropagates logit-map cotangents (and optionally query-coordinate
    /// cotangents) through the head, encoder and embedding layers.
    pub fn backward(
        &self,
        asm: &AssembledInput,
        fwd: &ModelForward,
        d_score: &Mat,
        d_offset: &Mat,
        d_size: &Mat,
        d_query: Option<[f64; 4]>,
        grads: &mut ModelGrads,
    ) -> Result<(), ModelError> {
        let d = self.dims.d_model;
        let l = asm.seq.len();
        let mut d_enc_out = Mat::zeros(l, d);

        // head path
        let d_fused = head_backward(
            &self.head,
            &fwd.head_cache,
            d_score,
            d_offset,
            d_size,
            &mut grads.head,
        );
        for (p, (&rp, &tp)) in fwd.rgb_pos.iter().zip(&fwd.tir_pos).enumerate() {
            for di in 0..d {
                let g = d_fused.get(di, p);
                d_enc_out.add_at(rp, di, g);
                d_enc_out.add_at(tp, di, g);
            }
        }

        // query path
        if let Some(dq) = d_query {
            let qf = fwd.query.as_ref().ok_or(ModelError::MissingQueryTokens)?;
            let d_tokens = query_readout_backward(
                &self.readout,
                &qf.tokens,
                &qf.cache,
                dq,
                self.dims.alpha,
                &mut grads.readout,
            );
            for (i, &p) in qf.positions.iter().enumerate() {
                for di in 0..d {
                    d_enc_out.add_at(p, di, d_tokens.get(i, di));
                }
            }
        }

        let d_seq = encoder::encoder_backward(
            &self.encoder,
            &fwd.enc_caches,
            &d_enc_out,
            &mut grads.encoder,
        );

        self.assembly_backward(asm, &d_seq, grads)
    }

    /// Scatters per-token cotangents back to the patch embedding, positional
    /// tables and vocabulary via the recorded token sources.
    fn assembly_backward(
        &self,
        asm: &AssembledInput,
        d_seq: &Mat,
        grads: &mut ModelGrads,
    ) -> Result<(), ModelError> {
        let d = self.dims.d_model;
        let l_t = self.dims.l_template();
        let l_s = self.dims.l_search();
        let m = asm.templates.len();

        let mut d_template: Vec<[Mat; 2]> = (0..m)
            .map(|_| [Mat::zeros(l_t, d), Mat::zeros(l_t, d)])
            .collect();
        let mut d_search = [Mat::zeros(l_s, d), Mat::zeros(l_s, d)];

        for k in 0..asm.seq.len() {
            let row = d_seq.row(k);
            match asm.seq.sources[k] {
                TokenSource::TemplatePatch {
                    slot,
                    modality,
                    patch,
                } => {
                    let mi = if modality == Modality::Rgb { 0 } else { 1 };
                    let dst = d_template[slot][mi].row_mut(patch);
                    for (a, b) in dst.iter_mut().zip(row) {
                        *a += b;
                    }
                }
                TokenSource::SearchPatch { modality, patch } => {
                    let mi = if modality == Modality::Rgb { 0 } else { 1 };
                    let dst = d_search[mi].row_mut(patch);
                    for (a, b) in dst.iter_mut().zip(row) {
                        *a += b;
                    }
                }
                TokenSource::Coord { bin, slot, .. } => {
                    let t = grads.vocab_table.row_mut(bin - 1);
                    for (a, b) in t.iter_mut().zip(row) {
                        *a += b;
                    }
                    let s = grads.vocab_slot_offsets.row_mut(slot);
                    for (a, b) in s.iter_mut().zip(row) {
                        *a += b;
                    }
                }
                TokenSource::Query { index } => {
                    let q = grads.vocab_query.row_mut(index);
                    for (a, b) in q.iter_mut().zip(row) {
                        *a += b;
                    }
                }
            }
        }

        for (slot, bufs) in d_template.iter().enumerate() {
            let crop = &asm.templates[slot].1;
            for (mi, img) in [&crop.rgb, &crop.tir].into_iter().enumerate() {
                patch_embed_backward(img, &self.patch_embed, &bufs[mi], &mut grads.patch_embed)?;
                grads.pos_template.add_assign(&bufs[mi]);
            }
        }
        for (mi, img) in [&asm.search.rgb, &asm.search.tir].into_iter().enumerate() {
            patch_embed_backward(img, &self.patch_embed, &d_search[mi], &mut grads.patch_embed)?;
            grads.pos_search.add_assign(&d_search[mi]);
        }
        Ok(())
    }

    // -- serialization -----------------------------------------------------

    pub fn named_arrays(&self) -> Vec<NamedArray> {
        let mut out = Vec::new();
        let mut push = |name: &str, shape: Vec<usize>, values: &[f64]| {
            out.push(NamedArray {
                name: name.to_string(),
                shape,
                values: values.to_vec(),
            });
        };
        push(
            "meta.dims",
            vec![9],
            &[
                self.dims.d_model as f64,
                self.dims.n_state as f64,
                self.dims.layers as f64,
                self.dims.patch as f64,
                self.dims.template_size as f64,
                self.dims.search_size as f64,
                self.dims.nbins as f64,
                self.dims.prompt_capacity as f64,
                self.dims.head_hidden as f64,
            ],
        );
        push("meta.alpha", vec![1], &[self.dims.alpha]);
        push(
            "patch_embed.w",
            vec![self.patch_embed.proj.w.rows(), self.patch_embed.proj.w.cols()],
            self.patch_embed.proj.w.as_slice(),
        );
        push(
            "patch_embed.b",
            vec![self.patch_embed.proj.b.len()],
            &self.patch_embed.proj.b,
        );
        push(
            "pos.template",
            vec![self.pos.template.rows(), self.pos.template.cols()],
            self.pos.template.as_slice(),
        );
        push(
            "pos.search",
            vec![self.pos.search.rows(), self.pos.search.cols()],
            self.pos.search.as_slice(),
        );
        push(
            "vocab.table",
            vec![self.vocab.table.rows(), self.vocab.table.cols()],
            self.vocab.table.as_slice(),
        );
        push(
            "vocab.slot_offsets",
            vec![self.vocab.slot_offsets.rows(), self.vocab.slot_offsets.cols()],
            self.vocab.slot_offsets.as_slice(),
        );
        push(
            "vocab.query_init",
            vec![self.vocab.query_init.rows(), self.vocab.query_init.cols()],
            self.vocab.query_init.as_slice(),
        );
        for (name, shape, values) in self.encoder.named_arrays() {
            out.push(NamedArray {
                name,
                shape,
                values,
            });
        }
        let mut push = |name: &str, shape: Vec<usize>, values: &[f64]| {
            out.push(NamedArray {
                name: name.to_string(),
                shape,
                values: values.to_vec(),
            });
        };
        let conv_entry = |tag: &str, conv: &crate::head::Conv2d| {
            (
                format!("{tag}.w"),
                vec![conv.out_ch, conv.in_ch, conv.k, conv.k],
                conv.w.clone(),
                format!("{tag}.b"),
                conv.b.clone(),
            )
        };
        let (n, s, w, nb, b) = conv_entry("head.conv1", &self.head.conv1);
        push(&n, s, &w);
        push(&nb, vec![b.len()], &b);
        push("head.gamma1", vec![self.head.gamma1.len()], &self.head.gamma1);
        let (n, s, w, nb, b) = conv_entry("head.conv2", &self.head.conv2);
        push(&n, s, &w);
        push(&nb, vec![b.len()], &b);
        push("head.gamma2", vec![self.head.gamma2.len()], &self.head.gamma2);
        for (tag, conv) in [
            ("head.score", &self.head.score),
            ("head.offset", &self.head.offset),
            ("head.size", &self.head.size),
        ] {
            push(
                &format!("{tag}.w"),
                vec![conv.out_ch, conv.in_ch, conv.k, conv.k],
                &conv.w,
            );
            push(&format!("{tag}.b"), vec![conv.b.len()], &conv.b);
        }
        push(
            "readout.w",
            vec![self.readout.w.rows(), self.readout.w.cols()],
            self.readout.w.as_slice(),
        );
        push("readout.b", vec![self.readout.b.len()], &self.readout.b);
        out
    }

    /// Mutable flat parameter views; order matches [`ModelGrads::arrays_mut`].
    pub fn arrays_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = vec![
            self.patch_embed.proj.w.as_mut_slice(),
            &mut self.patch_embed.proj.b,
            self.pos.template.as_mut_slice(),
            self.pos.search.as_mut_slice(),
            self.vocab.table.as_mut_slice(),
            self.vocab.slot_offsets.as_mut_slice(),
            self.vocab.query_init.as_mut_slice(),
        ];
        out.extend(self.encoder.arrays_mut());
        out.push(&mut self.head.conv1.w);
        out.push(&mut self.head.conv1.b);
        out.push(&mut self.head.gamma1);
        out.push(&mut self.head.conv2.w);
        out.push(&mut self.head.conv2.b);
        out.push(&mut self.head.gamma2);
        out.push(&mut self.head.score.w);
        out.push(&mut self.head.score.b);
        out.push(&mut self.head.offset.w);
        out.push(&mut self.head.offset.b);
        out.push(&mut self.head.size.w);
        out.push(&mut self.head.size.b);
        out.push(self.readout.w.as_mut_slice());
        out.push(&mut self.readout.b);
        out
    }

    pub fn save(&self, path: &std::path::Path) -> Result<(), ModelError> {
        arrayfile::write_arrays_to_path(path, &self.named_arrays())?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Model, ModelError> {
        let arrays = arrayfile::read_arrays_from_path(path)?;
        Model::from_arrays(arrays)
    }

    pub fn from_arrays(arrays: Vec<NamedArray>) -> Result<Model, ModelError> {
        let find = |name: &str| -> Result<&NamedArray, ModelError> {
            arrays
                .iter()
                .find(|a| a.name == name)
                .ok_or_else(|| ModelError::MissingArray(name.to_string()))
        };
        let meta = find("meta.dims")?;
        if meta.values.len() != 9 {
            return Err(ModelError::ShapeMismatch("meta.dims".into()));
        }
        let alpha = find("meta.alpha")?.values[0];
        let dims = ModelDims {
            d_model: meta.values[0] as usize,
            n_state: meta.values[1] as usize,
            layers: meta.values[2] as usize,
            patch: meta.values[3] as usize,
            template_size: meta.values[4] as usize,
            search_size: meta.values[5] as usize,
            nbins: meta.values[6] as usize,
            alpha,
            prompt_capacity: meta.values[7] as usize,
            head_hidden: meta.values[8] as usize,
        };
        let mut model = Model::init(0, dims)?;
        let expected = model.named_arrays();
        if arrays.len() != expected.len() {
            for a in &arrays {
                if !expected.iter().any(|e| e.name == a.name) {
                    return Err(ModelError::UnexpectedArray(a.name.clone()));
                }
            }
        }
        {
            let names: Vec<(String, Vec<usize>)> = expected
                .iter()
                .skip(2) // meta entries are not parameters
                .map(|a| (a.name.clone(), a.shape.clone()))
                .collect();
            let views = model.arrays_mut();
            debug_assert_eq!(names.len(), views.len());
            for ((name, shape), view) in names.iter().zip(views) {
                let src = arrays
                    .iter()
                    .find(|a| &a.name == name)
                    .ok_or_else(|| ModelError::MissingArray(name.clone()))?;
                if &src.shape != shape || src.values.len() != view.len() {
                    return Err(ModelError::ShapeMismatch(name.clone()));
                }
                view.copy_from_slice(&src.values);
            }
        }
        Ok(model)
    }
}

impl ModelGrads {
    /// Mutable flat views in the same order as [`Model::arrays_mut`].
    pub fn arrays_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = vec![
            self.patch_embed.w.as_mut_slice(),
            &mut self.patch_embed.b,
            self.pos_template.as_mut_slice(),
            self.pos_search.as_mut_slice(),
            self.vocab_table.as_mut_slice(),
            self.vocab_slot_offsets.as_mut_slice(),
            self.vocab_query.as_mut_slice(),
        ];
        out.extend(self.encoder.arrays_mut());
        out.push(&mut self.head.conv1.w);
        out.push(&mut self.head.conv1.b);
        out.push(&mut self.head.gamma1);
        out.push(&mut self.head.conv2.w);
        out.push(&mut self.head.conv2.b);
        out.push(&mut self.head.gamma2);
        out.push(&mut self.head.score.w);
        out.push(&mut self.head.score.b);
        out.push(&mut self.head.offset.w);
        out.push(&mut self.head.offset.b);
        out.push(&mut self.head.size.w);
        out.push(&mut self.head.size.b);
        out.push(self.readout.w.as_mut_slice());
        out.push(&mut self.readout.b);
        out
    }

    pub fn scale(&mut self, s: f64) {
        for arr in self.arrays_mut() {
            for v in arr {
                *v *= s;
            }
        }
    }

    pub fn global_norm(&mut self) -> f64 {
        let mut sum = 0.0;
        for arr in self.arrays_mut() {
            for v in arr.iter() {
                sum += v * v;
            }
        }
        sum.sqrt()
    }
}

#[derive(Clone, Debug)]
pub struct AssembledInput {
    pub seq: TokenSequence,
    pub templates: Vec<(u32, CropPair)>,
    pub search: CropPair,
    pub prompt_boxes: Vec<Box2>,
    pub prompts_enabled: bool,
}

#[derive(Clone, Debug)]
pub struct QueryForward {
    pub positions: Vec<usize>,
    pub tokens: Mat,
    pub box_norm: Box2,
    pub cache: QueryCache,
}

#[derive(Clone, Debug)]
pub struct ModelForward {
    pub enc_out: Mat,
    pub enc_caches: Vec<(Mat, encoder::BlockCache)>,
    pub rgb_pos: Vec<usize>,
    pub tir_pos: Vec<usize>,
    pub fused: Mat,
    pub maps: HeadMaps,
    pub head_cache: HeadCache,
    pub query: Option<QueryForward>,
}
