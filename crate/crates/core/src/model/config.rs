use super::ModelError;

/// How a parameter is initialized.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    /// Normal with standard deviation `1/sqrt(fan_in)`.
    FanIn(usize),
    Normal(f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub preset: String,
    pub model_dim: usize,
    pub ff_dim: usize,
    pub n_heads: usize,
    pub n_layers_contrastive: usize,
    pub n_layers_mlm: usize,
    pub conv_kernel: usize,
    /// Relative offsets beyond this distance share one bias.
    pub rel_pos_max: usize,
    pub subsample_factor: usize,
    pub frame_dim: usize,
    pub codebook_size: usize,
    pub codebook_dim: usize,
    pub vocab_size: usize,
    pub max_text_len: usize,
    /// Text input embeddings reuse the shared softmax weight.
    pub tie_text_embedding: bool,
    pub quant_temp_start: f64,
    pub quant_temp_end: f64,
    pub quant_temp_decay: f64,
}

pub const PRESETS: [&str; 3] = ["desk", "paper-600m", "paper-2b"];

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    /// Test-scale default. The vocabulary is sized for the synthetic
    /// corpus rather than the 4096-entry production table.
    pub fn desk() -> Self {
        Self {
            preset: "desk".into(),
            model_dim: 64,
            ff_dim: 256,
            n_heads: 4,
            n_layers_contrastive: 2,
            n_layers_mlm: 2,
            conv_kernel: 5,
            rel_pos_max: 8,
            subsample_factor: 4,
            frame_dim: 16,
            codebook_size: 64,
            codebook_dim: 32,
            vocab_size: 64,
            max_text_len: crate::vocab::DEFAULT_TEXT_CAP,
            tie_text_embedding: true,
            quant_temp_start: 2.0,
            quant_temp_end: 0.5,
            quant_temp_decay: 0.999,
        }
    }

    pub fn paper_600m() -> Self {
        Self {
            preset: "paper-600m".into(),
            model_dim: 1024,
            ff_dim: 4096,
            n_heads: 8,
            n_layers_contrastive: 8,
            n_layers_mlm: 16,
            conv_kernel: 5,
            rel_pos_max: 64,
            subsample_factor: 4,
            frame_dim: 80,
            codebook_size: 1024,
            codebook_dim: 1024,
            vocab_size: crate::vocab::DEFAULT_VOCAB_SIZE,
            ..Self::desk()
        }
    }

    pub fn paper_2b() -> Self {
        Self {
            preset: "paper-2b".into(),
            model_dim: 1408,
            ff_dim: 4 * 1408,
            n_heads: 16,
            n_layers_contrastive: 8,
            n_layers_mlm: 32,
            ..Self::paper_600m()
        }
    }

    pub fn preset(name: &str) -> Result<Self, ModelError> {
        match name {
            "desk" => Ok(Self::desk()),
            "paper-600m" => Ok(Self::paper_600m()),
            "paper-2b" => Ok(Self::paper_2b()),
            _ => Err(ModelError::UnknownPreset(name.to_string())),
        }
    }

    pub fn n_layers(&self) -> usize {
        self.n_layers_contrastive + self.n_layers_mlm
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.n_heads
    }

    /// Number of stride-2 convolutions in the subsampler.
    pub fn subsample_stages(&self) -> usize {
        self.subsample_factor.trailing_zeros() as usize
    }

    /// `ceil(frames / subsample_factor)`.
    pub fn subsampled_len(&self, frames: usize) -> usize {
        frames.div_ceil(self.subsample_factor)
    }

    pub fn quant_temperature(&self, step: u64) -> f64 {
        let t = self.quant_temp_start * self.quant_temp_decay.powf(step as f64);
        t.max(self.quant_temp_end)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::InvalidConfig(m.to_string()));
        if self.subsample_factor < 1 || !self.subsample_factor.is_power_of_two() {
            return bad("subsample_factor must be a power of two ≥ 1");
        }
        if self.n_layers_contrastive < 1 || self.n_layers_mlm < 1 {
            return bad("each block needs at least one layer");
        }
        if self.n_heads < 1 || self.model_dim % self.n_heads != 0 {
            return bad("model_dim must be divisible by n_heads");
        }
        if self.conv_kernel % 2 == 0 {
            return bad("conv_kernel must be odd");
        }
        if self.vocab_size <= crate::vocab::NUM_RESERVED {
            return bad("vocab_size too small");
        }
        if self.codebook_size < 2 || self.codebook_dim < 1 || self.frame_dim < 1 || self.ff_dim < 1 {
            return bad("codebook, frame and feed-forward sizes must be positive");
        }
        if !(self.quant_temp_end > 0.0 && self.quant_temp_start >= self.quant_temp_end) {
            return bad("need 0 < quant_temp_end ≤ quant_temp_start");
        }
        if !(self.quant_temp_decay > 0.0 && self.quant_temp_decay <= 1.0) {
            return bad("quant_temp_decay must lie in (0, 1]");
        }
        Ok(())
    }

    /// Applies one `key = value` setting (keys without the `model.` prefix).
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ModelError> {
        let err = || ModelError::InvalidConfig(format!("bad value {value:?} for model.{key}"));
        let u = || value.parse::<usize>().map_err(|_| err());
        let f = || value.parse::<f64>().map_err(|_| err());
        match key {
            "preset" => *self = Self::preset(value)?,
            "dim" | "model_dim" => self.model_dim = u()?,
            "ff_dim" => self.ff_dim = u()?,
            "heads" | "n_heads" => self.n_heads = u()?,
            "layers_contrastive" | "n_layers_contrastive" => self.n_layers_contrastive = u()?,
            "layers_mlm" | "n_layers_mlm" => self.n_layers_mlm = u()?,
            "conv_kernel" => self.conv_kernel = u()?,
            "rel_pos_max" => self.rel_pos_max = u()?,
            "subsample_factor" => self.subsample_factor = u()?,
            "frame_dim" => self.frame_dim = u()?,
            "codebook_size" => self.codebook_size = u()?,
            "codebook_dim" => self.codebook_dim = u()?,
            "vocab_size" => self.vocab_size = u()?,
            "max_text_len" => self.max_text_len = u()?,
            "tie_text_embedding" => self.tie_text_embedding = value.parse().map_err(|_| err())?,
            "quant_temp_start" => self.quant_temp_start = f()?,
            "quant_temp_end" => self.quant_temp_end = f()?,
            "quant_temp_decay" => self.quant_temp_decay = f()?,
            _ => return Err(ModelError::InvalidConfig(format!("unknown key model.{key}"))),
        }
        Ok(())
    }

    /// Every parameter's name, shape and initializer, in a fixed order.
    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let d = self.model_dim;
        let mut out = Vec::new();
        let mut push = |name: String, shape: Vec<usize>, init: Init| out.push(ParamSpec { name, shape, init });

        let mut fan = self.frame_dim;
        if self.subsample_stages() == 0 {
            push("speech.sub.0.w".into(), vec![fan, d], Init::FanIn(fan));
            push("speech.sub.0.b".into(), vec![d], Init::Zeros);
        }
        for s in 0..self.subsample_stages() {
            push(format!("speech.sub.{s}.w"), vec![3 * fan, d], Init::FanIn(3 * fan));
            push(format!("speech.sub.{s}.b"), vec![d], Init::Zeros);
            fan = d;
        }
        push("speech.ln_g".into(), vec![d], Init::Ones);
        push("speech.ln_b".into(), vec![d], Init::Zeros);
        push("speech.mask_emb".into(), vec![d], Init::Normal(1.0));

        push("quant.w".into(), vec![d, self.codebook_size], Init::FanIn(d));
        push("quant.b".into(), vec![self.codebook_size], Init::Zeros);
        push(
            "quant.codebook".into(),
            vec![self.codebook_size, self.codebook_dim],
            Init::Normal(1.0),
        );
        push("contrast.w".into(), vec![d, self.codebook_dim], Init::FanIn(d));
        push("contrast.b".into(), vec![self.codebook_dim], Init::Zeros);
        push("speech_head.w".into(), vec![d, self.codebook_size], Init::FanIn(d));
        push("speech_head.b".into(), vec![self.codebook_size], Init::Zeros);

        for l in 0..self.n_layers() {
            let p = layer_prefix(self, l);
            for ff in ["ff1", "ff2"] {
                push(format!("{p}.{ff}.ln_g"), vec![d], Init::Ones);
                push(format!("{p}.{ff}.ln_b"), vec![d], Init::Zeros);
                push(format!("{p}.{ff}.w1"), vec![d, self.ff_dim], Init::FanIn(d));
                push(format!("{p}.{ff}.b1"), vec![self.ff_dim], Init::Zeros);
                push(format!("{p}.{ff}.w2"), vec![self.ff_dim, d], Init::FanIn(self.ff_dim));
                push(format!("{p}.{ff}.b2"), vec![d], Init::Zeros);
            }
            push(format!("{p}.att.ln_g"), vec![d], Init::Ones);
            push(format!("{p}.att.ln_b"), vec![d], Init::Zeros);
            for m in ["wq", "wk", "wv", "wo"] {
                push(format!("{p}.att.{m}"), vec![d, d], Init::FanIn(d));
            }
            push(format!("{p}.att.bo"), vec![d], Init::Zeros);
            push(
                format!("{p}.att.rel"),
                vec![self.n_heads, 2 * self.rel_pos_max + 1],
                Init::Zeros,
            );
            push(format!("{p}.conv.ln_g"), vec![d], Init::Ones);
            push(format!("{p}.conv.ln_b"), vec![d], Init::Zeros);
            push(format!("{p}.conv.pw1"), vec![d, 2 * d], Init::FanIn(d));
            push(format!("{p}.conv.pw1_b"), vec![2 * d], Init::Zeros);
            push(format!("{p}.conv.dw"), vec![self.conv_kernel, d], Init::FanIn(self.conv_kernel));
            push(format!("{p}.conv.dw_b"), vec![d], Init::Zeros);
            push(format!("{p}.conv.ln2_g"), vec![d], Init::Ones);
            push(format!("{p}.conv.ln2_b"), vec![d], Init::Zeros);
            push(format!("{p}.conv.pw2"), vec![d, d], Init::FanIn(d));
            push(format!("{p}.conv.pw2_b"), vec![d], Init::Zeros);
            push(format!("{p}.out.ln_g"), vec![d], Init::Ones);
            push(format!("{p}.out.ln_b"), vec![d], Init::Zeros);
        }

        if !self.tie_text_embedding {
            push("text.emb".into(), vec![self.vocab_size, d], Init::FanIn(d));
        }
        push("softmax.w".into(), vec![self.vocab_size, d], Init::FanIn(d));
        push("softmax.b".into(), vec![self.vocab_size], Init::Zeros);
        out
    }

    /// Exact parameter count, computed without allocating any tensor.
    pub fn param_count(&self) -> usize {
        self.param_specs().iter().map(ParamSpec::numel).sum()
    }

    /// Name of the text input embedding table.
    pub fn text_embedding_name(&self) -> &'static str {
        if self.tie_text_embedding {
            "softmax.w"
        } else {
            "text.emb"
        }
    }
}

pub(crate) fn layer_prefix(cfg: &ModelConfig, l: usize) -> String {
    if l < cfg.n_layers_contrastive {
        format!("enc.c{l}")
    } else {
        format!("enc.m{}", l - cfg.n_layers_contrastive)
    }
}
