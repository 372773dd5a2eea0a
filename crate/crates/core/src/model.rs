//! ViT/DeiT-style encoders over fused tokens, with MLP or KAN feed-forward
//! blocks and heads.

use std::fmt;
use std::str::FromStr;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::embedding::{Fusion, TokenEmbedding, TokenSequence};
use crate::error::{Error, Result};
use crate::features::FunctionRepresentation;
use crate::kan::{DropPath, KanBlock, KanHead, KanSettings, DEFAULT_DROP_PATH_RATE};
use crate::layers::{LayerNorm, Linear};
use crate::params::{Bindings, ParamId, ParamStore};
use crate::rng::{seeded, SeededRng};
use crate::tensor::Tensor;

const TOKEN_INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backbone {
    Vit,
    Deit,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlockKind {
    Mlp,
    Kan,
}

/// Which of (encoder feed-forward, head) is KAN.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Configuration {
    MlpMlp,
    KanKan,
    KanMlp,
    MlpKan,
}

impl Configuration {
    pub const ALL: [Configuration; 4] = [
        Configuration::MlpMlp,
        Configuration::KanKan,
        Configuration::KanMlp,
        Configuration::MlpKan,
    ];

    pub fn parts(self) -> (BlockKind, BlockKind) {
        use BlockKind::*;
        match self {
            Self::MlpMlp => (Mlp, Mlp),
            Self::KanKan => (Kan, Kan),
            Self::KanMlp => (Kan, Mlp),
            Self::MlpKan => (Mlp, Kan),
        }
    }

    pub fn from_parts(encoder_ffn: BlockKind, head: BlockKind) -> Self {
        use BlockKind::*;
        match (encoder_ffn, head) {
            (Mlp, Mlp) => Self::MlpMlp,
            (Kan, Kan) => Self::KanKan,
            (Kan, Mlp) => Self::KanMlp,
            (Mlp, Kan) => Self::MlpKan,
        }
    }
}

impl fmt::Display for Configuration {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::MlpMlp => "mlp-mlp",
            Self::KanKan => "kan-kan",
            Self::KanMlp => "kan-mlp",
            Self::MlpKan => "mlp-kan",
        })
    }
}

impl FromStr for Configuration {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|c| c.to_string() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::validation(format!("unknown configuration '{s}'")))
    }
}

impl fmt::Display for Backbone {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Vit => "vit",
            Self::Deit => "deit",
        })
    }
}

impl FromStr for Backbone {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "vit" => Ok(Self::Vit),
            "deit" => Ok(Self::Deit),
            _ => Err(Error::validation(format!("unknown backbone '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub backbone: Backbone,
    pub encoder_ffn: BlockKind,
    pub head: BlockKind,
    /// FC row width `A`; set from the data.
    pub n_anchors: usize,
    pub d_model: usize,
    pub depth: usize,
    pub n_heads: usize,
    pub mlp_hidden_ratio: usize,
    pub kan_grid_size: usize,
    pub kan_grid_range: f64,
    pub kan_base_path: bool,
    pub kan_layers_per_block: usize,
    pub drop_path_rate: f64,
    /// Wrap MLP feed-forward branches in DropPath too.
    pub mlp_drop_path: bool,
    pub fusion: Fusion,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backbone: Backbone::Vit,
            encoder_ffn: BlockKind::Kan,
            head: BlockKind::Kan,
            n_anchors: 16,
            d_model: 64,
            depth: 4,
            n_heads: 4,
            mlp_hidden_ratio: 2,
            kan_grid_size: crate::kan::DEFAULT_GRID_SIZE,
            kan_grid_range: crate::kan::DEFAULT_GRID_RANGE,
            kan_base_path: true,
            kan_layers_per_block: 1,
            drop_path_rate: DEFAULT_DROP_PATH_RATE,
            mlp_drop_path: true,
            fusion: Fusion::Sum,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn configuration(&self) -> Configuration {
        Configuration::from_parts(self.encoder_ffn, self.head)
    }

    pub fn with_configuration(mut self, c: Configuration) -> Self {
        (self.encoder_ffn, self.head) = c.parts();
        self
    }

    pub fn kan_settings(&self) -> KanSettings {
        KanSettings {
            grid_size: self.kan_grid_size,
            grid_range: self.kan_grid_range,
            base_path: self.kan_base_path,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_anchors", self.n_anchors),
            ("d_model", self.d_model),
            ("depth", self.depth),
            ("n_heads", self.n_heads),
            ("mlp_hidden_ratio", self.mlp_hidden_ratio),
            ("kan_layers_per_block", self.kan_layers_per_block),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::validation(format!("{name} must be positive")));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::validation(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        DropPath::new(self.drop_path_rate)?;
        Ok(())
    }
}

/// Pre-norm multi-head self-attention branch, `proj(MHSA(LN(x)))`.
#[derive(Debug, Clone)]
pub struct SelfAttention {
    norm: LayerNorm,
    qkv: Linear,
    proj: Linear,
    n_heads: usize,
    drop_path: DropPath,
}

impl SelfAttention {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut SeededRng,
        name: &str,
        d_model: usize,
        n_heads: usize,
        drop_path_rate: f64,
    ) -> Result<Self> {
        if n_heads == 0 || d_model % n_heads != 0 {
            return Err(Error::validation(format!(
                "d_model {d_model} is not divisible by n_heads {n_heads}"
            )));
        }
        Ok(Self {
            norm: LayerNorm::new(store, &format!("{name}.norm"), d_model),
            qkv: Linear::new(store, rng, &format!("{name}.qkv"), d_model, 3 * d_model, true),
            proj: Linear::new(store, rng, &format!("{name}.proj"), d_model, d_model, true),
            n_heads,
            drop_path: DropPath::new(drop_path_rate)?,
        })
    }

    /// `x: (batch·seq) × d`, each sample attending only within its own rows.
    pub fn branch(&self, tape: &Tape, params: &Bindings, x: Var, batch: usize) -> Result<Var> {
        let rows = tape.shape(x)[0];
        if batch == 0 || rows % batch != 0 {
            return Err(Error::validation(format!(
                "{rows} rows do not split into {batch} samples"
            )));
        }
        let d = self.proj.out_dim;
        let dh = d / self.n_heads;
        let seq = tape.shape(x)[0] / batch;
        let scale = 1.0 / (dh as f64).sqrt();
        let h = self.norm.forward(tape, params, x)?;
        let qkv = self.qkv.forward(tape, params, h)?;
        let mut samples = Vec::with_capacity(batch);
        for b in 0..batch {
            let rows = tape.slice_rows(qkv, b * seq, seq)?;
            let mut heads = Vec::with_capacity(self.n_heads);
            for head in 0..self.n_heads {
                let q = tape.slice_cols(rows, head * dh, dh)?;
                let k = tape.slice_cols(rows, d + head * dh, dh)?;
                let v = tape.slice_cols(rows, 2 * d + head * dh, dh)?;
                let scores = tape.scale(tape.matmul(q, tape.transpose(k)?)?, scale);
                let weights = tape.softmax(scores, 1)?;
                heads.push(tape.matmul(weights, v)?);
            }
            samples.push(tape.concat_cols(&heads)?);
        }
        let merged = tape.concat_rows(&samples)?;
        self.proj.forward(tape, params, merged)
    }
}

#[derive(Debug, Clone)]
struct MlpBlock {
    norm: LayerNorm,
    fc1: Linear,
    fc2: Linear,
    drop_path: Option<DropPath>,
}

#[derive(Debug, Clone)]
enum FeedForward {
    Mlp(MlpBlock),
    Kan(KanBlock),
}

#[derive(Debug, Clone)]
struct EncoderBlock {
    attention: SelfAttention,
    ffn: FeedForward,
}

impl EncoderBlock {
    fn forward(
        &self,
        tape: &Tape,
        params: &Bindings,
        x: Var,
        batch: usize,
        training: bool,
        rng: &mut SeededRng,
    ) -> Result<Var> {
        let a = self.attention.branch(tape, params, x, batch)?;
        let a = self.attention.drop_path.apply(tape, a, batch, training, rng)?;
        let x = tape.add(x, a)?;
        match &self.ffn {
            FeedForward::Kan(block) => block.forward(tape, params, x, batch, training, rng),
            FeedForward::Mlp(mlp) => {
                let h = mlp.norm.forward(tape, params, x)?;
                let h = tape.gelu(mlp.fc1.forward(tape, params, h)?);
                let mut h = mlp.fc2.forward(tape, params, h)?;
                if let Some(dp) = &mlp.drop_path {
                    h = dp.apply(tape, h, batch, training, rng)?;
                }
                tape.add(x, h)
            }
        }
    }
}

#[derive(Debug, Clone)]
enum Head {
    Mlp(Linear),
    Kan(KanHead),
}

impl Head {
    fn new(
        store: &mut ParamStore,
        rng: &mut SeededRng,
        name: &str,
        config: &ModelConfig,
    ) -> Result<Self> {
        Ok(match config.head {
            BlockKind::Mlp => Head::Mlp(Linear::new(store, rng, name, config.d_model, 2, true)),
            BlockKind::Kan => Head::Kan(KanHead::new(
                store,
                rng,
                name,
                &[config.d_model, 2],
                &config.kan_settings(),
            )?),
        })
    }

    fn forward(&self, tape: &Tape, params: &Bindings, x: Var) -> Result<Var> {
        match self {
            Head::Mlp(l) => l.forward(tape, params, x),
            Head::Kan(k) => k.forward(tape, params, x),
        }
    }
}

/// Class-head logits and, for DeiT, distillation-head logits (`batch × 2` each).
#[derive(Debug, Clone, Copy)]
pub struct HeadLogits {
    pub class: Var,
    pub distill: Option<Var>,
}

#[derive(Debug, Clone)]
pub struct ClassifierModel {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub embedding: TokenEmbedding,
    class_token: ParamId,
    distill_token: Option<ParamId>,
    blocks: Vec<EncoderBlock>,
    final_norm: LayerNorm,
    head: Head,
    distill_head: Option<Head>,
}

pub fn build_model(config: &ModelConfig) -> Result<ClassifierModel> {
    ClassifierModel::new(config.clone())
}

pub fn count_parameters(model: &ClassifierModel) -> usize {
    model.params.scalar_count()
}

impl ClassifierModel {
    /// Deterministic initialization from `config.seed`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let mut store = ParamStore::new();
        let mut rng = seeded(config.seed);
        let embedding =
            TokenEmbedding::new(&mut store, &mut rng, config.n_anchors, d, config.fusion)?;
        let normal = Normal::new(0.0, TOKEN_INIT_STD).expect("valid std");
        let token = |store: &mut ParamStore, rng: &mut SeededRng, name: &str| {
            let v = (0..d).map(|_| normal.sample(rng)).collect();
            store.add(name, Tensor::new(vec![1, d], v).expect("1×d"))
        };
        let class_token = token(&mut store, &mut rng, "class_token");
        let distill_token = (config.backbone == Backbone::Deit)
            .then(|| token(&mut store, &mut rng, "distill_token"));

        let settings = config.kan_settings();
        let mut blocks = Vec::with_capacity(config.depth);
        for i in 0..config.depth {
            let name = format!("block{i}");
            let attention = SelfAttention::new(
                &mut store,
                &mut rng,
                &format!("{name}.attn"),
                d,
                config.n_heads,
                config.drop_path_rate,
            )?;
            let ffn = match config.encoder_ffn {
                BlockKind::Kan => FeedForward::Kan(KanBlock::new(
                    &mut store,
                    &mut rng,
                    &format!("{name}.ffn"),
                    &vec![d; config.kan_layers_per_block + 1],
                    &settings,
                    config.drop_path_rate,
                )?),
                BlockKind::Mlp => {
                    let hidden = config.mlp_hidden_ratio * d;
                    FeedForward::Mlp(MlpBlock {
                        norm: LayerNorm::new(&mut store, &format!("{name}.ffn.norm"), d),
                        fc1: Linear::new(&mut store, &mut rng, &format!("{name}.ffn.fc1"), d, hidden, true),
                        fc2: Linear::new(&mut store, &mut rng, &format!("{name}.ffn.fc2"), hidden, d, true),
                        drop_path: config
                            .mlp_drop_path
                            .then(|| DropPath::new(config.drop_path_rate))
                            .transpose()?,
                    })
                }
            };
            blocks.push(EncoderBlock { attention, ffn });
        }
        let final_norm = LayerNorm::new(&mut store, "final_norm", d);
        let head = Head::new(&mut store, &mut rng, "head", &config)?;
        let distill_head = match config.backbone {
            Backbone::Deit => Some(Head::new(&mut store, &mut rng, "distill_head", &config)?),
            Backbone::Vit => None,
        };
        Ok(Self {
            config,
            params: store,
            embedding,
            class_token,
            distill_token,
            blocks,
            final_norm,
            head,
            distill_head,
        })
    }

    pub fn parameter_count(&self) -> usize {
        self.params.scalar_count()
    }

    fn special_tokens(&self) -> usize {
        1 + usize::from(self.distill_token.is_some())
    }

    /// Stacked tokens (`batch·N × d`) for a batch of representations sharing `N`.
    pub fn embed_batch(
        &self,
        tape: &Tape,
        params: &Bindings,
        reps: &[&FunctionRepresentation],
    ) -> Result<Var> {
        if reps.is_empty() {
            return Err(Error::validation("empty batch"));
        }
        let n = reps[0].n_patches();
        if let Some(r) = reps.iter().find(|r| r.n_patches() != n) {
            return Err(Error::validation(format!(
                "batch mixes {} and {} patch rows",
                n,
                r.n_patches()
            )));
        }
        let embedded = reps
            .iter()
            .map(|r| {
                let fc = tape.constant(r.fc.clone());
                let pos = tape.constant(r.token_positions());
                self.embedding.forward(tape, params, fc, pos)
            })
            .collect::<Result<Vec<_>>>()?;
        tape.concat_rows(&embedded)
    }

    /// Runs the encoder on stacked tokens (`batch·N × d`).
    pub fn encode(
        &self,
        tape: &Tape,
        params: &Bindings,
        tokens: Var,
        batch: usize,
        training: bool,
        rng: &mut SeededRng,
    ) -> Result<HeadLogits> {
        let shape = tape.shape(tokens);
        if shape.len() != 2 || shape[1] != self.config.d_model {
            return Err(Error::Shape {
                op: "model_forward",
                lhs: shape,
                rhs: vec![self.config.d_model],
            });
        }
        if batch == 0 || shape[0] % batch != 0 || shape[0] == 0 {
            return Err(Error::validation(format!(
                "{} token rows do not split into {batch} samples",
                shape[0]
            )));
        }
        let n = shape[0] / batch;
        let special = self.special_tokens();
        let mut parts = Vec::with_capacity(batch * (special + 1));
        for b in 0..batch {
            parts.push(params[self.class_token]);
            if let Some(t) = self.distill_token {
                parts.push(params[t]);
            }
            parts.push(tape.slice_rows(tokens, b * n, n)?);
        }
        let mut x = tape.concat_rows(&parts)?;
        for block in &self.blocks {
            x = block.forward(tape, params, x, batch, training, rng)?;
        }
        let seq = n + special;
        let pick = |offset: usize| -> Result<Var> {
            let rows = (0..batch)
                .map(|b| tape.slice_rows(x, b * seq + offset, 1))
                .collect::<Result<Vec<_>>>()?;
            let rows = tape.concat_rows(&rows)?;
            self.final_norm.forward(tape, params, rows)
        };
        let class = self.head.forward(tape, params, pick(0)?)?;
        let distill = match &self.distill_head {
            Some(h) => Some(h.forward(tape, params, pick(1)?)?),
            None => None,
        };
        Ok(HeadLogits { class, distill })
    }

    /// Inference logits: the class head, or for DeiT the mean of both heads.
    pub fn combine(&self, tape: &Tape, logits: HeadLogits) -> Result<Var> {
        match logits.distill {
            Some(d) => Ok(tape.scale(tape.add(logits.class, d)?, 0.5)),
            None => Ok(logits.class),
        }
    }

    /// Training loss; DeiT trains both heads against the labels, averaged.
    pub fn loss(&self, tape: &Tape, logits: HeadLogits, labels: &[usize]) -> Result<Var> {
        let ce = tape.cross_entropy(logits.class, labels)?;
        match logits.distill {
            Some(d) => {
                let ce_d = tape.cross_entropy(d, labels)?;
                Ok(tape.scale(tape.add(ce, ce_d)?, 0.5))
            }
            None => Ok(ce),
        }
    }

    /// Combined logits for a batch of representations.
    pub fn forward_reps(
        &self,
        tape: &Tape,
        params: &Bindings,
        reps: &[&FunctionRepresentation],
        training: bool,
        rng: &mut SeededRng,
    ) -> Result<HeadLogits> {
        let tokens = self.embed_batch(tape, params, reps)?;
        self.encode(tape, params, tokens, reps.len(), training, rng)
    }

    /// Logits (`batch × 2`) for already-embedded sequences.
    pub fn forward(&self, sequences: &[TokenSequence], training: bool, seed: u64) -> Result<Tensor> {
        if sequences.is_empty() {
            return Err(Error::validation("empty batch"));
        }
        let tape = Tape::new();
        let params = self.params.bind(&tape);
        let parts: Vec<Var> = sequences.iter().map(|s| tape.constant(s.tokens.clone())).collect();
        let tokens = tape.concat_rows(&parts)?;
        let mut rng = seeded(seed);
        let logits = self.encode(&tape, &params, tokens, sequences.len(), training, &mut rng)?;
        Ok(tape.value(self.combine(&tape, logits)?))
    }

    /// Eval-mode logits for each representation.
    pub fn logits(&self, reps: &[&FunctionRepresentation]) -> Result<Tensor> {
        let tape = Tape::new();
        let params = self.params.bind(&tape);
        let logits = self.forward_reps(&tape, &params, reps, false, &mut seeded(0))?;
        Ok(tape.value(self.combine(&tape, logits)?))
    }

    /// Eval-mode positive-class probabilities.
    pub fn predict_proba(&self, reps: &[&FunctionRepresentation]) -> Result<Vec<f64>> {
        let logits = self.logits(reps)?;
        Ok((0..reps.len())
            .map(|i| {
                let (a, b) = (logits.get2(i, 0), logits.get2(i, 1));
                1.0 / (1.0 + (a - b).exp())
            })
            .collect())
    }
}
