//! IMU encoder: stacked conv / group-norm / max-pool blocks feeding a GRU,
//! plus two MLP projection heads (multimodal and self-supervised).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tensor::{kernels, Graph, GruVars, Tensor, Var};

pub const GROUP_NORM_EPS: f64 = 1e-5;
const CHECKPOINT_MAGIC: &[u8; 8] = b"PRIMUSEC";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub in_channels: usize,
    pub conv_channels: Vec<usize>,
    pub kernel: usize,
    pub pool_window: usize,
    pub gn_groups: usize,
    pub gru_hidden: usize,
    pub head_hidden: usize,
    pub embed_dim: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            in_channels: 6,
            conv_channels: vec![64, 128, 256],
            kernel: 7,
            pool_window: 2,
            gn_groups: 4,
            gru_hidden: 256,
            head_hidden: 512,
            embed_dim: 512,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("in_channels", self.in_channels),
            ("kernel", self.kernel),
            ("pool_window", self.pool_window),
            ("gn_groups", self.gn_groups),
            ("gru_hidden", self.gru_hidden),
            ("head_hidden", self.head_hidden),
            ("embed_dim", self.embed_dim),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::config(field, "must be positive"));
            }
        }
        if self.conv_channels.is_empty() {
            return Err(Error::config("conv_channels", "needs at least one block"));
        }
        if let Some(c) = self.conv_channels.iter().find(|&&c| c == 0 || c % self.gn_groups != 0) {
            return Err(Error::config(
                "conv_channels",
                format!("{c} is not a positive multiple of gn_groups = {}", self.gn_groups),
            ));
        }
        Ok(())
    }

    /// Temporal length after each conv/pool block, or `None` on underflow.
    pub fn output_len(&self, t: usize) -> Option<usize> {
        let mut len = t;
        for _ in &self.conv_channels {
            len = kernels::window_out_len(len, self.kernel, 1)?;
            len = kernels::window_out_len(len, self.pool_window, self.pool_window)?;
        }
        Some(len)
    }

    /// Smallest input length that survives every block.
    pub fn min_input_len(&self) -> usize {
        let mut need = 1;
        for _ in &self.conv_channels {
            need = (need - 1) * self.pool_window + self.pool_window;
            need = need - 1 + self.kernel;
        }
        need
    }

    /// Closed-form number of learnable scalars.
    pub fn param_count(&self) -> usize {
        let mut total = 0;
        let mut c_in = self.in_channels;
        for &c in &self.conv_channels {
            total += c * c_in * self.kernel + c + 2 * c;
            c_in = c;
        }
        let h = self.gru_hidden;
        total += 3 * h * c_in + 3 * h * h + 6 * h;
        let head = h * self.head_hidden + self.head_hidden + self.head_hidden * self.embed_dim + self.embed_dim;
        total + 2 * head
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvBlock {
    pub weight: Tensor,
    pub bias: Tensor,
    pub gn_gamma: Tensor,
    pub gn_beta: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GruParams {
    pub w_ih: Tensor,
    pub w_hh: Tensor,
    pub b_ih: Tensor,
    pub b_hh: Tensor,
}

/// Two linear layers with a ReLU between them.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpHead {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    pub config: EncoderConfig,
    pub blocks: Vec<ConvBlock>,
    pub gru: GruParams,
    pub mm_head: MlpHead,
    pub ss_head: MlpHead,
}

fn uniform_tensor(rng: &mut SeededRng, shape: Vec<usize>, fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| (2.0 * rng.uniform() - 1.0) * bound).collect();
    Tensor::new(shape, data).expect("shape from config")
}

fn init_head(rng: &mut SeededRng, d_in: usize, hidden: usize, d_out: usize) -> MlpHead {
    MlpHead {
        w1: uniform_tensor(rng, vec![d_in, hidden], d_in),
        b1: Tensor::zeros(vec![hidden]),
        w2: uniform_tensor(rng, vec![hidden, d_out], hidden),
        b2: Tensor::zeros(vec![d_out]),
    }
}

/// Fan-in scaled uniform weights `U(±1/√fan_in)`, zero biases, unit
/// group-norm gains.
pub fn init_encoder(cfg: &EncoderConfig, rng: &mut SeededRng) -> Result<EncoderParams> {
    cfg.validate()?;
    let mut blocks = Vec::with_capacity(cfg.conv_channels.len());
    let mut c_in = cfg.in_channels;
    for &c in &cfg.conv_channels {
        blocks.push(ConvBlock {
            weight: uniform_tensor(rng, vec![c, c_in, cfg.kernel], c_in * cfg.kernel),
            bias: Tensor::zeros(vec![c]),
            gn_gamma: Tensor::vector(vec![1.0; c]),
            gn_beta: Tensor::zeros(vec![c]),
        });
        c_in = c;
    }
    let h = cfg.gru_hidden;
    let gru = GruParams {
        w_ih: uniform_tensor(rng, vec![3 * h, c_in], c_in),
        w_hh: uniform_tensor(rng, vec![3 * h, h], h),
        b_ih: Tensor::zeros(vec![3 * h]),
        b_hh: Tensor::zeros(vec![3 * h]),
    };
    let mm_head = init_head(rng, h, cfg.head_hidden, cfg.embed_dim);
    let ss_head = init_head(rng, h, cfg.head_hidden, cfg.embed_dim);
    Ok(EncoderParams {
        config: cfg.clone(),
        blocks,
        gru,
        mm_head,
        ss_head,
    })
}

impl EncoderParams {
    /// All learnable tensors in declaration order.
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for b in &self.blocks {
            out.extend([&b.weight, &b.bias, &b.gn_gamma, &b.gn_beta]);
        }
        out.extend([&self.gru.w_ih, &self.gru.w_hh, &self.gru.b_ih, &self.gru.b_hh]);
        for h in [&self.mm_head, &self.ss_head] {
            out.extend([&h.w1, &h.b1, &h.w2, &h.b2]);
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for b in &mut self.blocks {
            out.extend([&mut b.weight, &mut b.bias, &mut b.gn_gamma, &mut b.gn_beta]);
        }
        let g = &mut self.gru;
        out.extend([&mut g.w_ih, &mut g.w_hh, &mut g.b_ih, &mut g.b_hh]);
        for h in [&mut self.mm_head, &mut self.ss_head] {
            out.extend([&mut h.w1, &mut h.b1, &mut h.w2, &mut h.b2]);
        }
        out
    }

    /// Human-readable tensor names, aligned with [`EncoderParams::tensors`].
    pub fn tensor_names(&self) -> Vec<String> {
        let mut out = Vec::new();
        for i in 0..self.blocks.len() {
            for p in ["weight", "bias", "gn_gamma", "gn_beta"] {
                out.push(format!("blocks.{i}.{p}"));
            }
        }
        for p in ["w_ih", "w_hh", "b_ih", "b_hh"] {
            out.push(format!("gru.{p}"));
        }
        for h in ["mm_head", "ss_head"] {
            for p in ["w1", "b1", "w2", "b2"] {
                out.push(format!("{h}.{p}"));
            }
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Puts every tensor on `graph` as a trainable leaf.
    pub fn bind(&self, graph: &mut Graph) -> EncoderVars {
        self.bind_with(graph, true)
    }

    /// Puts every tensor on `graph` as a constant (inference only).
    pub fn bind_frozen(&self, graph: &mut Graph) -> EncoderVars {
        self.bind_with(graph, false)
    }

    fn bind_with(&self, graph: &mut Graph, trainable: bool) -> EncoderVars {
        let mut leaf = |t: &Tensor| {
            if trainable {
                graph.param(t.clone())
            } else {
                graph.constant(t.clone())
            }
        };
        let blocks = self
            .blocks
            .iter()
            .map(|b| BlockVars {
                weight: leaf(&b.weight),
                bias: leaf(&b.bias),
                gamma: leaf(&b.gn_gamma),
                beta: leaf(&b.gn_beta),
            })
            .collect();
        let gru = GruVars {
            w_ih: leaf(&self.gru.w_ih),
            w_hh: leaf(&self.gru.w_hh),
            b_ih: leaf(&self.gru.b_ih),
            b_hh: leaf(&self.gru.b_hh),
        };
        let mut head = |h: &MlpHead| HeadVars {
            w1: leaf(&h.w1),
            b1: leaf(&h.b1),
            w2: leaf(&h.w2),
            b2: leaf(&h.b2),
        };
        let mm_head = head(&self.mm_head);
        let ss_head = head(&self.ss_head);
        EncoderVars {
            config: self.config.clone(),
            blocks,
            gru,
            mm_head,
            ss_head,
        }
    }

    /// Multimodal-head embeddings for `[C × T]` segments, no gradient tape
    /// retained.
    pub fn embed(&self, segments: &[Tensor]) -> Result<Tensor> {
        let mut g = Graph::new();
        let vars = self.bind_frozen(&mut g);
        let h = vars.encode_backbone(&mut g, segments)?;
        let e = vars.head_mm(&mut g, h)?;
        Ok(g.value(e).clone())
    }

    /// Flat parameter vector in declaration order.
    pub fn flatten(&self) -> Vec<f64> {
        self.tensors().iter().flat_map(|t| t.data().iter().copied()).collect()
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BlockVars {
    pub weight: Var,
    pub bias: Var,
    pub gamma: Var,
    pub beta: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct HeadVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

/// Encoder parameters bound to one graph.
#[derive(Clone, Debug)]
pub struct EncoderVars {
    pub config: EncoderConfig,
    pub blocks: Vec<BlockVars>,
    pub gru: GruVars,
    pub mm_head: HeadVars,
    pub ss_head: HeadVars,
}

impl EncoderVars {
    /// Vars in the same order as [`EncoderParams::tensors`].
    pub fn all(&self) -> Vec<Var> {
        let mut out = Vec::new();
        for b in &self.blocks {
            out.extend([b.weight, b.bias, b.gamma, b.beta]);
        }
        out.extend([self.gru.w_ih, self.gru.w_hh, self.gru.b_ih, self.gru.b_hh]);
        for h in [&self.mm_head, &self.ss_head] {
            out.extend([h.w1, h.b1, h.w2, h.b2]);
        }
        out
    }

    /// Gradients for every parameter, zero-filled where none flowed.
    pub fn grads(&self, graph: &Graph) -> Vec<Tensor> {
        self.all().into_iter().map(|v| graph.grad_or_zeros(v)).collect()
    }

    /// Per sample: (conv → group norm → ReLU → max-pool) per block, then a GRU
    /// over the pooled sequence. Returns the final hidden states `[n × H]`.
    pub fn encode_backbone(&self, graph: &mut Graph, segments: &[Tensor]) -> Result<Var> {
        let cfg = &self.config;
        let h0 = graph.constant(Tensor::zeros(vec![cfg.gru_hidden]));
        let mut finals = Vec::with_capacity(segments.len());
        for seg in segments {
            let (c, t) = seg.dims2("encode_backbone")?;
            if c != cfg.in_channels {
                return Err(Error::dim(
                    "encode_backbone",
                    format!("segment has {c} channels, encoder expects {}", cfg.in_channels),
                ));
            }
            if cfg.output_len(t).is_none() {
                return Err(Error::dim(
                    "encode_backbone",
                    format!(
                        "temporal underflow: length {t} is below the minimum {} for this config",
                        cfg.min_input_len()
                    ),
                ));
            }
            let mut x = graph.constant(seg.clone());
            for b in &self.blocks {
                x = graph.conv1d(x, b.weight, b.bias, 1)?;
                x = graph.group_norm(x, cfg.gn_groups, b.gamma, b.beta, GROUP_NORM_EPS)?;
                x = graph.relu(x)?;
                x = graph.max_pool1d(x, cfg.pool_window, cfg.pool_window)?;
            }
            let (_, last) = graph.gru(x, self.gru, h0)?;
            finals.push(last);
        }
        graph.stack_rows(&finals)
    }

    fn head(graph: &mut Graph, h: &HeadVars, x: Var) -> Result<Var> {
        let y = graph.linear(x, h.w1, h.b1)?;
        let y = graph.relu(y)?;
        let y = graph.linear(y, h.w2, h.b2)?;
        graph.l2_normalize(y)
    }

    /// Multimodal projection: linear → ReLU → linear → row normalization.
    pub fn head_mm(&self, graph: &mut Graph, backbone_out: Var) -> Result<Var> {
        Self::head(graph, &self.mm_head, backbone_out)
    }

    /// Self-supervision projection, same shape as [`EncoderVars::head_mm`]
    /// with independent weights.
    pub fn head_ss(&self, graph: &mut Graph, backbone_out: Var) -> Result<Var> {
        Self::head(graph, &self.ss_head, backbone_out)
    }
}

// ------------------------------------------------------------ checkpoint

/// Serializes parameters:
///
/// ```text
/// magic "PRIMUSEC" | u32 version | u32 len + EncoderConfig JSON
/// | u64 n + n × f64 (declaration order) | u64 len + appendix | u32 CRC32
/// ```
///
/// All integers and reals are little-endian; the CRC covers every
/// preceding byte.
pub fn encode_checkpoint(params: &EncoderParams, appendix: &[u8]) -> Result<Vec<u8>> {
    let config = serde_json::to_vec(&params.config)?;
    let flat = params.flatten();
    let mut out = Vec::with_capacity(32 + config.len() + 8 * flat.len() + appendix.len());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(config.len() as u32).to_le_bytes());
    out.extend_from_slice(&config);
    out.extend_from_slice(&(flat.len() as u64).to_le_bytes());
    for v in flat {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&(appendix.len() as u64).to_le_bytes());
    out.extend_from_slice(appendix);
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

/// Little-endian cursor over a byte slice.
pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::CorruptCheckpoint("unexpected end of data".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub(crate) fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| Error::CorruptCheckpoint("length overflow".into()))?)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    pub(crate) fn is_done(&self) -> bool {
        self.pos == self.buf.len()
    }
}

/// Inverse of [`encode_checkpoint`]; returns the parameters and the raw
/// appendix bytes.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<(EncoderParams, Vec<u8>)> {
    if bytes.len() < CHECKPOINT_MAGIC.len() + 4 {
        return Err(Error::CorruptCheckpoint("file too short".into()));
    }
    let (body, crc_bytes) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(crc_bytes.try_into().expect("4 bytes"));
    if crc32fast::hash(body) != stored {
        return Err(Error::CorruptCheckpoint("CRC32 mismatch".into()));
    }
    let mut r = Reader::new(body);
    if r.take(8)? != CHECKPOINT_MAGIC {
        return Err(Error::CorruptCheckpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::CorruptCheckpoint(format!("unsupported format version {version}")));
    }
    let cfg_len = r.u32()? as usize;
    let config: EncoderConfig = serde_json::from_slice(r.take(cfg_len)?)
        .map_err(|e| Error::CorruptCheckpoint(format!("config header: {e}")))?;
    config.validate()?;
    let n = r.u64()? as usize;
    if n != config.param_count() {
        return Err(Error::CorruptCheckpoint(format!(
            "{n} stored parameters, config implies {}",
            config.param_count()
        )));
    }
    let flat = r.f64s(n)?;
    let app_len = r.u64()? as usize;
    let appendix = r.take(app_len)?.to_vec();
    if !r.is_done() {
        return Err(Error::CorruptCheckpoint("trailing bytes".into()));
    }
    let mut params = init_encoder(&config, &mut SeededRng::new(0))?;
    let mut off = 0;
    for t in params.tensors_mut() {
        let len = t.len();
        t.data_mut().copy_from_slice(&flat[off..off + len]);
        off += len;
    }
    Ok((params, appendix))
}

pub fn save_encoder(path: &std::path::Path, params: &EncoderParams) -> Result<()> {
    std::fs::write(path, encode_checkpoint(params, &[])?)?;
    Ok(())
}

pub fn load_encoder(path: &std::path::Path) -> Result<EncoderParams> {
    Ok(decode_checkpoint(&std::fs::read(path)?)?.0)
}
