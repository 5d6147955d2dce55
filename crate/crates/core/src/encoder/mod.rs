//! The full map from logo images to unit-norm embeddings.
//!
//! A trainable visual backbone produces `D_v`-dimensional features; a frozen
//! textual encoder produces `D_t`-dimensional features (exactly zero where no
//! text is available); the concatenated feature is projected to 512 dimensions
//! by an MLP head and row-normalized during training. At inference the default
//! embedding is the *pre-projection* concatenation `[V : T]`, L2-normalized;
//! the projected 512-d embedding stays available behind a flag for ablations.
//!
//! Input mean/std normalization lives here (identity for the small backbone),
//! so galleries built from un-augmented references share one consistent path
//! with training.

pub mod checkpoint;

use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};
use std::sync::OnceLock;

use ndarray::{Array2, Array4, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::dataio::BrandId;
use crate::nn::{self, Conv2d, Linear, MaxPool2, ParamSlot, Relu};

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("empty batch")]
    EmptyBatch,
    #[error("dimension mismatch: declared {declared}, got {actual} ({what})")]
    DimMismatch {
        what: String,
        declared: usize,
        actual: usize,
    },
    #[error("projected row {0} has norm below 1e-12; degenerate head")]
    DegenerateRow(usize),
    #[error("backbone '{0}' is frozen; it cannot receive gradients")]
    FrozenBackbone(String),
    #[error("external adapter failed: {0}")]
    Adapter(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Per-channel input normalization applied before the visual backbone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InputNorm {
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl Default for InputNorm {
    fn default() -> Self {
        Self {
            mean: [0.0; 3],
            std: [1.0; 3],
        }
    }
}

impl InputNorm {
    fn apply(&self, images: &Array4<f32>) -> Array4<f32> {
        if self == &Self::default() {
            return images.clone();
        }
        let mut out = images.clone();
        for c in 0..3 {
            let (m, s) = (self.mean[c], self.std[c]);
            out.index_axis_mut(Axis(1), c).mapv_inplace(|v| (v - m) / s);
        }
        out
    }
}

/// How the visual and textual features are fused at inference.
///
/// `PerModality` rescales each modality to unit norm before concatenating so
/// neither side's raw magnitude dominates the cosine; `Plain` concatenates raw
/// features. Both normalize the final embedding, and both reduce to the same
/// vector when the text embedding is zero.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    #[default]
    PerModality,
    Plain,
}

/// Visual backbone `f`: image batch -> (n, D_v) features.
pub trait VisualBackbone {
    fn feature_dim(&self) -> usize;
    fn kind(&self) -> BackboneSpec;
    fn forward(&mut self, images: &Array4<f32>, train: bool) -> Result<Array2<f32>, EncoderError>;
    fn backward(&mut self, grad: &Array2<f32>) -> Result<(), EncoderError>;
    fn visit_params(&mut self, f: &mut dyn FnMut(ParamSlot));
}

/// Serializable description of a backbone, used by configs and checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BackboneSpec {
    /// Small trainable convnet: `widths.len()` blocks of conv3x3 + ReLU +
    /// 2x2 max-pool, then global average pooling. `D_v = *widths.last()`.
    Tiny { widths: Vec<usize> },
    /// Adapter for a pretrained deep backbone driven over a line protocol:
    /// the adapter process receives one image path per line and answers with
    /// `{"embedding": [..]}` per line. Inference-only.
    External { command: Vec<String>, dim: usize },
}

impl Default for BackboneSpec {
    fn default() -> Self {
        BackboneSpec::Tiny {
            widths: vec![16, 32, 64, 128],
        }
    }
}

impl BackboneSpec {
    pub fn build(&self, rng: &mut ChaCha20Rng) -> Box<dyn VisualBackbone> {
        match self {
            BackboneSpec::Tiny { widths } => Box::new(TinyConvNet::new(widths, rng)),
            BackboneSpec::External { command, dim } => {
                Box::new(ExternalBackbone::new(command.clone(), *dim))
            }
        }
    }
}

/// Four-ish conv blocks and a global average pool. Small enough to train on a
/// CPU in minutes, wide enough to separate glyph shape and color.
pub struct TinyConvNet {
    convs: Vec<Conv2d>,
    relus: Vec<Relu>,
    pools: Vec<MaxPool2>,
    widths: Vec<usize>,
    gap_shape: Option<(usize, usize, usize, usize)>,
}

impl TinyConvNet {
    pub fn new(widths: &[usize], rng: &mut ChaCha20Rng) -> Self {
        assert!(!widths.is_empty());
        let mut convs = Vec::new();
        let mut in_c = 3;
        for &w in widths {
            convs.push(Conv2d::new(in_c, w, 3, 1, 1, rng));
            in_c = w;
        }
        Self {
            relus: (0..widths.len()).map(|_| Relu::new()).collect(),
            pools: (0..widths.len()).map(|_| MaxPool2::new()).collect(),
            convs,
            widths: widths.to_vec(),
            gap_shape: None,
        }
    }
}

impl VisualBackbone for TinyConvNet {
    fn feature_dim(&self) -> usize {
        *self.widths.last().unwrap()
    }

    fn kind(&self) -> BackboneSpec {
        BackboneSpec::Tiny {
            widths: self.widths.clone(),
        }
    }

    fn forward(&mut self, images: &Array4<f32>, train: bool) -> Result<Array2<f32>, EncoderError> {
        if images.shape()[0] == 0 {
            return Err(EncoderError::EmptyBatch);
        }
        let mut x = images.clone();
        for i in 0..self.convs.len() {
            x = self.convs[i].forward(&x, train);
            x = self.relus[i]
                .forward_d(&x.into_dyn(), train)
                .into_dimensionality()
                .unwrap();
            if x.shape()[2] >= 2 && x.shape()[3] >= 2 {
                x = self.pools[i].forward(&x, train);
            } else if train {
                // remember that this pool was skipped
                self.pools[i] = MaxPool2::new();
            }
        }
        let shape = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        if train {
            self.gap_shape = Some(shape);
        }
        Ok(nn::global_avg_pool(&x))
    }

    fn backward(&mut self, grad: &Array2<f32>) -> Result<(), EncoderError> {
        let shape = self
            .gap_shape
            .take()
            .ok_or_else(|| EncoderError::Checkpoint("backward without forward".into()))?;
        let mut g = nn::global_avg_pool_backward(grad, shape);
        for i in (0..self.convs.len()).rev() {
            if g.shape()[2] < self.pool_input_h(i, shape) {
                g = self.pools[i].backward(&g);
            }
            g = self.relus[i]
                .backward_d(&g.into_dyn())
                .into_dimensionality()
                .unwrap();
            g = self.convs[i].backward(&g);
        }
        Ok(())
    }

    fn visit_params(&mut self, f: &mut dyn FnMut(ParamSlot)) {
        for (i, conv) in self.convs.iter_mut().enumerate() {
            conv.visit_params(&format!("backbone.conv{i}"), f);
        }
    }
}

impl TinyConvNet {
    /// Height entering pool `i` during the cached forward; used to tell
    /// whether that pool actually ran.
    fn pool_input_h(&self, _i: usize, _gap_shape: (usize, usize, usize, usize)) -> usize {
        usize::MAX // pools always run for inputs >= 2x2; see forward()
    }
}

/// Line-protocol adapter around an external feature extractor.
pub struct ExternalBackbone {
    command: Vec<String>,
    dim: usize,
    child: Option<(Child, BufReader<ChildStdout>, ChildStdin)>,
    scratch_dir: Option<tempdir::TempDirHandle>,
    counter: u64,
}

/// Tiny internal stand-in for the tempfile crate so the library keeps its
/// dependency surface small; the directory is removed on drop.
mod tempdir {
    use std::path::PathBuf;

    pub struct TempDirHandle(pub PathBuf);

    impl TempDirHandle {
        pub fn create(tag: &str) -> std::io::Result<Self> {
            let pid = std::process::id();
            let t = std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .unwrap()
                .as_nanos();
            let dir = std::env::temp_dir().join(format!("logoid-{tag}-{pid}-{t}"));
            std::fs::create_dir_all(&dir)?;
            Ok(Self(dir))
        }
    }

    impl Drop for TempDirHandle {
        fn drop(&mut self) {
            let _ = std::fs::remove_dir_all(&self.0);
        }
    }
}

impl ExternalBackbone {
    pub fn new(command: Vec<String>, dim: usize) -> Self {
        Self {
            command,
            dim,
            child: None,
            scratch_dir: None,
            counter: 0,
        }
    }

    fn ensure_child(&mut self) -> Result<(), EncoderError> {
        if self.child.is_some() {
            return Ok(());
        }
        if self.command.is_empty() {
            return Err(EncoderError::Adapter("empty adapter command".into()));
        }
        let mut child = Command::new(&self.command[0])
            .args(&self.command[1..])
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .spawn()
            .map_err(|e| EncoderError::Adapter(format!("spawn {:?}: {e}", self.command)))?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = BufReader::new(child.stdout.take().expect("piped stdout"));
        self.child = Some((child, stdout, stdin));
        Ok(())
    }

    fn query(&mut self, path: &Path) -> Result<Vec<f32>, EncoderError> {
        self.ensure_child()?;
        let (_, stdout, stdin) = self.child.as_mut().unwrap();
        writeln!(stdin, "{}", path.display())?;
        stdin.flush()?;
        let mut line = String::new();
        stdout.read_line(&mut line)?;
        let parsed: serde_json::Value = serde_json::from_str(line.trim())
            .map_err(|e| EncoderError::Adapter(format!("bad adapter reply {line:?}: {e}")))?;
        let arr = parsed
            .get("embedding")
            .and_then(|v| v.as_array())
            .ok_or_else(|| EncoderError::Adapter(format!("missing 'embedding' in {line:?}")))?;
        arr.iter()
            .map(|v| {
                v.as_f64()
                    .map(|f| f as f32)
                    .ok_or_else(|| EncoderError::Adapter("non-numeric embedding entry".into()))
            })
            .collect()
    }
}

impl VisualBackbone for ExternalBackbone {
    fn feature_dim(&self) -> usize {
        self.dim
    }

    fn kind(&self) -> BackboneSpec {
        BackboneSpec::External {
            command: self.command.clone(),
            dim: self.dim,
        }
    }

    fn forward(&mut self, images: &Array4<f32>, _train: bool) -> Result<Array2<f32>, EncoderError> {
        let n = images.shape()[0];
        if n == 0 {
            return Err(EncoderError::EmptyBatch);
        }
        if self.scratch_dir.is_none() {
            self.scratch_dir = Some(tempdir::TempDirHandle::create("embed")?);
        }
        let dir = self.scratch_dir.as_ref().unwrap().0.clone();
        let mut out = Array2::<f32>::zeros((n, self.dim));
        for i in 0..n {
            self.counter += 1;
            let path = dir.join(format!("{}.png", self.counter));
            let img = images.index_axis(Axis(0), i);
            crate::imgtensor::save_png(&img, &path)
                .map_err(|e| EncoderError::Adapter(e.to_string()))?;
            let feat = self.query(&path)?;
            let _ = std::fs::remove_file(&path);
            if feat.len() != self.dim {
                return Err(EncoderError::DimMismatch {
                    what: "external backbone output".into(),
                    declared: self.dim,
                    actual: feat.len(),
                });
            }
            for (j, v) in feat.into_iter().enumerate() {
                out[[i, j]] = v;
            }
        }
        Ok(out)
    }

    fn backward(&mut self, _grad: &Array2<f32>) -> Result<(), EncoderError> {
        Err(EncoderError::FrozenBackbone("external".into()))
    }

    fn visit_params(&mut self, _f: &mut dyn FnMut(ParamSlot)) {}
}

/// One batch element as the textual side sees it.
#[derive(Debug, Clone, Default)]
pub struct TextItem<'a> {
    /// Path of the source image, for recognizer adapters that re-read pixels.
    pub source_path: Option<&'a Path>,
    /// Ground-truth text from the manifest, for the perfect-OCR path.
    pub ocr_text: Option<&'a str>,
}

/// Frozen textual encoder `g`. Returns the detected text per item and an
/// `(n, D_t)` matrix whose row is exactly zero where no text was found.
pub trait TextualEncoder {
    fn dim(&self) -> usize;
    fn spec(&self) -> TextualSpec;
    fn encode(&self, items: &[TextItem]) -> Result<(Vec<String>, Array2<f32>), EncoderError>;
    /// Digest of the (frozen) weights; constant across training.
    fn weights_digest(&self) -> String;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TextualSpec {
    /// Never detects text: every embedding row is zero (vision-only runs).
    None { dim: usize },
    /// Perfect-OCR stand-in: reads `ocr_text` from the manifest and embeds it
    /// with the hashed-trigram map.
    Manifest { dim: usize },
    /// Real recognizer adapter: one image path per line in, `{"text": ...}`
    /// per line out, then the hashed-trigram map.
    Command { dim: usize, command: Vec<String> },
}

impl Default for TextualSpec {
    fn default() -> Self {
        TextualSpec::Manifest { dim: 256 }
    }
}

impl TextualSpec {
    pub fn build(&self) -> Box<dyn TextualEncoder> {
        match self {
            TextualSpec::None { dim } => Box::new(ZeroTextEncoder { dim: *dim }),
            TextualSpec::Manifest { dim } => Box::new(TrigramTextEncoder {
                dim: *dim,
                recognizer: None,
            }),
            TextualSpec::Command { dim, command } => Box::new(TrigramTextEncoder {
                dim: *dim,
                recognizer: Some(command.clone()),
            }),
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            TextualSpec::None { dim }
            | TextualSpec::Manifest { dim }
            | TextualSpec::Command { dim } => *dim,
        }
    }
}

pub struct ZeroTextEncoder {
    dim: usize,
}

impl TextualEncoder for ZeroTextEncoder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn spec(&self) -> TextualSpec {
        TextualSpec::None { dim: self.dim }
    }

    fn encode(&self, items: &[TextItem]) -> Result<(Vec<String>, Array2<f32>), EncoderError> {
        Ok((
            vec![String::new(); items.len()],
            Array2::zeros((items.len(), self.dim)),
        ))
    }

    fn weights_digest(&self) -> String {
        format!("zero-{}", self.dim)
    }
}

const TRIGRAM_BUCKETS: usize = 4096;
const TRIGRAM_PROJECTION_SEED: u64 = 0x6c6f_676f_7465_7874;

fn trigram_projection() -> &'static Array2<f32> {
    static PROJ: OnceLock<Array2<f32>> = OnceLock::new();
    PROJ.get_or_init(|| {
        let mut rng = ChaCha20Rng::seed_from_u64(TRIGRAM_PROJECTION_SEED);
        Array2::from_shape_fn((TRIGRAM_BUCKETS, 256), |_| rng.random_range(-1.0f32..1.0))
    })
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Deterministic text embedding: hashed character-trigram bag followed by a
/// fixed seeded random projection, unit-normalized. Empty text maps to the
/// zero vector.
pub fn embed_text(text: &str, dim: usize) -> Vec<f32> {
    let cleaned: String = text.trim().to_lowercase();
    if cleaned.is_empty() {
        return vec![0.0; dim];
    }
    let chars: Vec<char> = std::iter::once('^')
        .chain(cleaned.chars())
        .chain(std::iter::once('$'))
        .collect();
    let mut bag = vec![0.0f32; TRIGRAM_BUCKETS];
    if chars.len() < 3 {
        let s: String = chars.iter().collect();
        bag[(fnv1a(s.as_bytes()) % TRIGRAM_BUCKETS as u64) as usize] += 1.0;
    } else {
        for win in chars.windows(3) {
            let s: String = win.iter().collect();
            bag[(fnv1a(s.as_bytes()) % TRIGRAM_BUCKETS as u64) as usize] += 1.0;
        }
    }
    let proj = trigram_projection();
    let take = dim.min(256);
    let mut out = vec![0.0f32; dim];
    for b in 0..TRIGRAM_BUCKETS {
        if bag[b] != 0.0 {
            for j in 0..take {
                out[j] += bag[b] * proj[[b, j]];
            }
        }
    }
    let norm: f64 = out.iter().map(|v| (*v as f64) * (*v as f64)).sum::<f64>().sqrt();
    if norm > 1e-12 {
        for v in &mut out {
            *v = (*v as f64 / norm) as f32;
        }
    }
    out
}

pub struct TrigramTextEncoder {
    dim: usize,
    /// When set, text comes from this recognizer command instead of the
    /// manifest's `ocr_text`.
    recognizer: Option<Vec<String>>,
}

impl TrigramTextEncoder {
    fn recognize(&self, path: &Path) -> Result<String, EncoderError> {
        let cmd = self.recognizer.as_ref().unwrap();
        let out = Command::new(&cmd[0])
            .args(&cmd[1..])
            .arg(path)
            .output()
            .map_err(|e| EncoderError::Adapter(format!("recognizer spawn: {e}")))?;
        let line = String::from_utf8_lossy(&out.stdout);
        let parsed: serde_json::Value = serde_json::from_str(line.trim())
            .map_err(|e| EncoderError::Adapter(format!("bad recognizer reply {line:?}: {e}")))?;
        Ok(parsed
            .get("text")
            .and_then(|v| v.as_str())
            .unwrap_or("")
            .to_string())
    }
}

impl TextualEncoder for TrigramTextEncoder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn spec(&self) -> TextualSpec {
        match &self.recognizer {
            None => TextualSpec::Manifest { dim: self.dim },
            Some(c) => TextualSpec::Command {
                dim: self.dim,
                command: c.clone(),
            },
        }
    }

    fn encode(&self, items: &[TextItem]) -> Result<(Vec<String>, Array2<f32>), EncoderError> {
        let mut texts = Vec::with_capacity(items.len());
        for item in items {
            let text = match (&self.recognizer, item.ocr_text, item.source_path) {
                (Some(_), _, Some(p)) => self.recognize(p)?,
                (Some(_), _, None) => String::new(),
                (None, Some(t), _) => t.to_string(),
                (None, None, _) => String::new(),
            };
            texts.push(text);
        }
        let mut mat = Array2::<f32>::zeros((items.len(), self.dim));
        for (i, t) in texts.iter().enumerate() {
            let v = embed_text(t, self.dim);
            for (j, x) in v.into_iter().enumerate() {
                mat[[i, j]] = x;
            }
        }
        Ok((texts, mat))
    }

    fn weights_digest(&self) -> String {
        static DIGEST: OnceLock<String> = OnceLock::new();
        DIGEST
            .get_or_init(|| {
                let proj = trigram_projection();
                let mut h = Sha256::new();
                for v in proj.iter() {
                    h.update(v.to_le_bytes());
                }
                format!("{:x}", h.finalize())
            })
            .clone()
    }
}

/// Per-view feature pair before projection.
#[derive(Debug, Clone)]
pub struct FeatureBatch {
    pub visual: Array2<f32>,
    pub textual: Array2<f32>,
    pub texts: Vec<String>,
}

impl FeatureBatch {
    pub fn concat(&self) -> Array2<f32> {
        let n = self.visual.nrows();
        let (dv, dt) = (self.visual.ncols(), self.textual.ncols());
        let mut out = Array2::<f32>::zeros((n, dv + dt));
        out.slice_mut(ndarray::s![.., ..dv]).assign(&self.visual);
        out.slice_mut(ndarray::s![.., dv..]).assign(&self.textual);
        out
    }
}

/// Two projected, row-normalized view matrices with their labels.
#[derive(Debug, Clone)]
pub struct EmbeddingPair {
    pub za: Array2<f32>,
    pub zb: Array2<f32>,
    pub labels: Vec<BrandId>,
}

pub const PROJECTION_DIM: usize = 512;

/// Two-layer MLP head: (D_v + D_t) -> hidden -> 512, no bias on the output.
pub struct ProjectionHead {
    fc1: Linear,
    relu: Relu,
    fc2: Linear,
    pub in_dim: usize,
    pub hidden: usize,
}

impl ProjectionHead {
    pub fn new(in_dim: usize, hidden: usize, rng: &mut ChaCha20Rng) -> Self {
        Self {
            fc1: Linear::new(in_dim, hidden, true, rng),
            relu: Relu::new(),
            fc2: Linear::new(hidden, PROJECTION_DIM, false, rng),
            in_dim,
            hidden,
        }
    }

    pub fn forward(&mut self, x: &Array2<f32>, train: bool) -> Array2<f32> {
        let h = self.fc1.forward(x, train);
        let h = self
            .relu
            .forward_d(&h.into_dyn(), train)
            .into_dimensionality()
            .unwrap();
        self.fc2.forward(&h, train)
    }

    pub fn backward(&mut self, grad_out: &Array2<f32>) -> Array2<f32> {
        let g = self.fc2.backward(grad_out);
        let g = self
            .relu
            .backward_d(&g.into_dyn())
            .into_dimensionality()
            .unwrap();
        self.fc1.backward(&g)
    }

    pub fn visit_params(&mut self, f: &mut dyn FnMut(ParamSlot)) {
        self.fc1.visit_params("head.fc1", f);
        self.fc2.visit_params("head.fc2", f);
    }
}

/// Row-normalize in place; errors on rows with norm below 1e-12.
pub fn normalize_rows_f32(mut y: Array2<f32>) -> Result<Array2<f32>, EncoderError> {
    for (i, mut row) in y.outer_iter_mut().enumerate() {
        let norm: f64 = row.iter().map(|v| (*v as f64) * (*v as f64)).sum::<f64>().sqrt();
        if norm < 1e-12 {
            return Err(EncoderError::DegenerateRow(i));
        }
        row.mapv_inplace(|v| (v as f64 / norm) as f32);
    }
    Ok(y)
}

/// The assembled encoder: backbone + frozen textual encoder + projection head.
pub struct Embedder {
    pub backbone: Box<dyn VisualBackbone>,
    pub textual: Box<dyn TextualEncoder>,
    pub head: ProjectionHead,
    pub input_norm: InputNorm,
    pub fusion: FusionMode,
}

/// Encoder section of the run configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub backbone: BackboneSpec,
    pub textual: TextualSpec,
    pub head_hidden: usize,
    pub fusion: FusionMode,
    pub input_norm: InputNorm,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneSpec::default(),
            textual: TextualSpec::default(),
            head_hidden: 256,
            fusion: FusionMode::default(),
            input_norm: InputNorm::default(),
        }
    }
}

impl Embedder {
    /// Deterministically initialize from a config and a weight seed.
    pub fn from_config(cfg: &EncoderConfig, seed: u64) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let backbone = cfg.backbone.build(&mut rng);
        let textual = cfg.textual.build();
        let in_dim = backbone.feature_dim() + textual.dim();
        let head = ProjectionHead::new(in_dim, cfg.head_hidden, &mut rng);
        Self {
            backbone,
            textual,
            head,
            input_norm: cfg.input_norm.clone(),
            fusion: cfg.fusion,
        }
    }

    pub fn config(&self) -> EncoderConfig {
        EncoderConfig {
            backbone: self.backbone.kind(),
            textual: self.textual.spec(),
            head_hidden: self.head.hidden,
            fusion: self.fusion,
            input_norm: self.input_norm.clone(),
        }
    }

    /// Run both encoders on one view batch. The textual encoder sees no
    /// gradient by construction: its output is produced outside the
    /// differentiated graph and its trait carries no backward path.
    pub fn encode_features(
        &mut self,
        images: &Array4<f32>,
        items: &[TextItem],
        train: bool,
    ) -> Result<FeatureBatch, EncoderError> {
        let n = images.shape()[0];
        if n == 0 {
            return Err(EncoderError::EmptyBatch);
        }
        if items.len() != n {
            return Err(EncoderError::DimMismatch {
                what: "text items vs batch".into(),
                declared: n,
                actual: items.len(),
            });
        }
        let normed = self.input_norm.apply(images);
        let visual = self.backbone.forward(&normed, train)?;
        if visual.ncols() != self.backbone.feature_dim() {
            return Err(EncoderError::DimMismatch {
                what: "visual feature".into(),
                declared: self.backbone.feature_dim(),
                actual: visual.ncols(),
            });
        }
        let (texts, textual) = self.textual.encode(items)?;
        if textual.ncols() != self.textual.dim() {
            return Err(EncoderError::DimMismatch {
                what: "textual feature".into(),
                declared: self.textual.dim(),
                actual: textual.ncols(),
            });
        }
        Ok(FeatureBatch {
            visual,
            textual,
            texts,
        })
    }

    /// Projection head output before normalization, training-mode.
    pub fn project_raw(&mut self, features: &FeatureBatch, train: bool) -> Array2<f32> {
        self.head.forward(&features.concat(), train)
    }

    /// Project `[V : T]` through the head and normalize rows to unit length.
    pub fn project_and_normalize(
        &mut self,
        features: &FeatureBatch,
    ) -> Result<Array2<f32>, EncoderError> {
        normalize_rows_f32(self.project_raw(features, false))
    }

    /// Inference embedding. Default: the L2-normalized concatenation
    /// `[V : T]` (`D_v + D_t` dims); with `use_projection`, the normalized
    /// 512-d projected embedding.
    pub fn encode_inference(
        &mut self,
        images: &Array4<f32>,
        items: &[TextItem],
        use_projection: bool,
    ) -> Result<Array2<f32>, EncoderError> {
        let features = self.encode_features(images, items, false)?;
        if use_projection {
            return self.project_and_normalize(&features);
        }
        let fused = match self.fusion {
            FusionMode::Plain => features.concat(),
            FusionMode::PerModality => {
                let norm_part = |m: &Array2<f32>| -> Array2<f32> {
                    let mut out = m.clone();
                    for mut row in out.outer_iter_mut() {
                        let n: f64 =
                            row.iter().map(|v| (*v as f64) * (*v as f64)).sum::<f64>().sqrt();
                        if n > 1e-12 {
                            row.mapv_inplace(|v| (v as f64 / n) as f32);
                        }
                    }
                    out
                };
                FeatureBatch {
                    visual: norm_part(&features.visual),
                    textual: norm_part(&features.textual),
                    texts: features.texts.clone(),
                }
                .concat()
            }
        };
        normalize_rows_f32(fused)
    }

    pub fn inference_dim(&self, use_projection: bool) -> usize {
        if use_projection {
            PROJECTION_DIM
        } else {
            self.backbone.feature_dim() + self.textual.dim()
        }
    }

    /// Visit all trainable parameters (backbone then head) in stable order.
    pub fn visit_params(&mut self, f: &mut dyn FnMut(ParamSlot)) {
        self.backbone.visit_params(f);
        self.head.visit_params(f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    fn blob_batch(n: usize, side: usize) -> Array4<f32> {
        let mut out = Array4::zeros((n, 3, side, side));
        for i in 0..n {
            let img = Array3::from_shape_fn((3, side, side), |(c, y, x)| {
                (((i + 1) * (c + 2) * (y + 3) * (x + 5)) % 17) as f32 / 17.0
            });
            out.index_axis_mut(Axis(0), i).assign(&img);
        }
        out
    }

    fn tiny_embedder() -> Embedder {
        let cfg = EncoderConfig {
            backbone: BackboneSpec::Tiny {
                widths: vec![8, 16],
            },
            textual: TextualSpec::Manifest { dim: 32 },
            head_hidden: 24,
            ..Default::default()
        };
        Embedder::from_config(&cfg, 42)
    }

    #[test]
    fn textless_rows_are_zero() {
        let mut e = tiny_embedder();
        let images = blob_batch(2, 16);
        let items = vec![
            TextItem {
                ocr_text: Some("acme"),
                ..Default::default()
            },
            TextItem::default(),
        ];
        let fb = e.encode_features(&images, &items, false).unwrap();
        assert!(fb.textual.row(1).iter().all(|&v| v == 0.0));
        assert!(fb.textual.row(0).iter().any(|&v| v != 0.0));
        assert_eq!(fb.texts, vec!["acme".to_string(), String::new()]);
    }

    #[test]
    fn empty_batch_rejected() {
        let mut e = tiny_embedder();
        let images = Array4::zeros((0, 3, 16, 16));
        assert!(matches!(
            e.encode_features(&images, &[], false),
            Err(EncoderError::EmptyBatch)
        ));
    }

    #[test]
    fn forward_is_deterministic() {
        let images = blob_batch(3, 16);
        let items = vec![TextItem::default(); 3];
        let mut e1 = tiny_embedder();
        let mut e2 = tiny_embedder();
        let f1 = e1.encode_features(&images, &items, false).unwrap();
        let f2 = e2.encode_features(&images, &items, false).unwrap();
        assert_eq!(f1.visual, f2.visual);
        let z1 = e1.project_and_normalize(&f1).unwrap();
        let z2 = e2.project_and_normalize(&f2).unwrap();
        assert_eq!(z1, z2);
    }

    #[test]
    fn projection_rows_unit_norm_and_scale_invariant() {
        let mut e = tiny_embedder();
        let images = blob_batch(4, 16);
        let items = vec![TextItem::default(); 4];
        let fb = e.encode_features(&images, &items, false).unwrap();
        let z = e.project_and_normalize(&fb).unwrap();
        assert_eq!(z.ncols(), PROJECTION_DIM);
        for row in z.outer_iter() {
            let n: f64 = row.iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-6, "norm {n}");
        }
        // scaling a pre-normalization row by 5 yields the same normalized row
        let y = e.project_raw(&fb, false);
        let mut y5 = y.clone();
        y5.row_mut(0).mapv_inplace(|v| v * 5.0);
        let z1 = normalize_rows_f32(y).unwrap();
        let z5 = normalize_rows_f32(y5).unwrap();
        for (a, b) in z1.row(0).iter().zip(z5.row(0).iter()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn inference_dims_and_zero_text_path() {
        let mut e = tiny_embedder();
        assert_eq!(e.inference_dim(false), 16 + 32);
        assert_eq!(e.inference_dim(true), 512);
        let images = blob_batch(1, 16);
        let items = vec![TextItem::default()];
        let emb = e.encode_inference(&images, &items, false).unwrap();
        assert_eq!(emb.ncols(), 48);
        // textless: embedding equals normalized [V : 0]
        let fb = e.encode_features(&images, &items, false).unwrap();
        let vnorm: f64 = fb
            .visual
            .row(0)
            .iter()
            .map(|v| (*v as f64).powi(2))
            .sum::<f64>()
            .sqrt();
        for j in 0..16 {
            let expect = (fb.visual[[0, j]] as f64 / vnorm) as f32;
            assert!((emb[[0, j]] - expect).abs() < 1e-5);
        }
        for j in 16..48 {
            assert_eq!(emb[[0, j]], 0.0);
        }
        let proj = e.encode_inference(&images, &items, true).unwrap();
        assert_eq!(proj.ncols(), 512);
    }

    #[test]
    fn embed_text_empty_is_zero_and_nonempty_unit() {
        let z = embed_text("", 64);
        assert!(z.iter().all(|&v| v == 0.0));
        let v = embed_text("brand", 64);
        let n: f64 = v.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-5);
        // deterministic
        assert_eq!(v, embed_text("brand", 64));
        // distinct texts map to distinct directions
        let w = embed_text("other", 64);
        let dot: f32 = v.iter().zip(w.iter()).map(|(a, b)| a * b).sum();
        assert!(dot.abs() < 0.9);
    }
}
