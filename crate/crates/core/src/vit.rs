//! A small pre-norm Vision Transformer, split into a client half (patch
//! embedding plus the first `split_point` blocks) and a server half (the
//! remaining blocks plus the classifier).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamId, ParamStore};
use crate::tensor::Tensor;

const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VitConfig {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub patch: usize,
    pub dim: usize,
    pub heads: usize,
    pub key_dim: usize,
    pub value_dim: usize,
    pub blocks: usize,
    pub classes: usize,
    pub split_point: usize,
    pub mlp_ratio: usize,
}

impl Default for VitConfig {
    fn default() -> Self {
        Self {
            channels: 3,
            height: 32,
            width: 32,
            patch: 8,
            dim: 64,
            heads: 4,
            key_dim: 16,
            value_dim: 16,
            blocks: 4,
            classes: 10,
            split_point: 2,
            mlp_ratio: 4,
        }
    }
}

impl VitConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.channels,
            self.height,
            self.width,
            self.patch,
            self.dim,
            self.heads,
            self.key_dim,
            self.value_dim,
            self.classes,
            self.mlp_ratio,
        ];
        if positive.contains(&0) {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if !self.height.is_multiple_of(self.patch) || !self.width.is_multiple_of(self.patch) {
            return Err(Error::Config(format!(
                "image {}x{} is not tiled by {}x{} patches",
                self.height, self.width, self.patch, self.patch
            )));
        }
        if !(1 < self.split_point && self.split_point < self.blocks) {
            return Err(Error::Config(format!(
                "split point {} must satisfy 1 < l < {}",
                self.split_point, self.blocks
            )));
        }
        if self.dim != self.heads * self.value_dim {
            return Err(Error::Config(format!(
                "embedding dim {} must equal heads x value dim ({} x {})",
                self.dim, self.heads, self.value_dim
            )));
        }
        Ok(())
    }

    pub fn patches(&self) -> usize {
        (self.height / self.patch) * (self.width / self.patch)
    }

    /// Token count `n`: patches plus the class token.
    pub fn tokens(&self) -> usize {
        self.patches() + 1
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch * self.patch
    }

    /// Features per sample at the split, `D = n * d`.
    pub fn features(&self) -> usize {
        self.tokens() * self.dim
    }

    pub fn image_len(&self) -> usize {
        self.channels * self.height * self.width
    }
}

#[derive(Clone, Debug)]
struct EmbedIds {
    proj_w: ParamId,
    proj_b: ParamId,
    cls: ParamId,
    pos: ParamId,
}

#[derive(Clone, Debug)]
struct BlockIds {
    ln1_g: ParamId,
    ln1_b: ParamId,
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    bk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

#[derive(Clone, Debug)]
struct HeadIds {
    ln_g: ParamId,
    ln_b: ParamId,
    w: ParamId,
    b: ParamId,
}

fn init_embed(cfg: &VitConfig, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> EmbedIds {
    let d = cfg.dim;
    EmbedIds {
        proj_w: store.push("embed.proj_w", Tensor::trunc_normal(&[cfg.patch_dim(), d], INIT_STD, rng)),
        proj_b: store.push("embed.proj_b", Tensor::zeros(&[d])),
        cls: store.push("embed.cls", Tensor::trunc_normal(&[d], INIT_STD, rng)),
        pos: store.push("embed.pos", Tensor::trunc_normal(&[cfg.tokens(), d], INIT_STD, rng)),
    }
}

fn init_block(
    cfg: &VitConfig,
    index: usize,
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
) -> BlockIds {
    let d = cfg.dim;
    let qk = cfg.heads * cfg.key_dim;
    let vd = cfg.heads * cfg.value_dim;
    let hidden = cfg.mlp_ratio * d;
    let mut push = |name: &str, t: Tensor| store.push(format!("block{index}.{name}"), t);
    BlockIds {
        ln1_g: push("ln1_g", Tensor::ones(&[d])),
        ln1_b: push("ln1_b", Tensor::zeros(&[d])),
        wq: push("wq", Tensor::trunc_normal(&[d, qk], INIT_STD, rng)),
        bq: push("bq", Tensor::zeros(&[qk])),
        wk: push("wk", Tensor::trunc_normal(&[d, qk], INIT_STD, rng)),
        bk: push("bk", Tensor::zeros(&[qk])),
        wv: push("wv", Tensor::trunc_normal(&[d, vd], INIT_STD, rng)),
        bv: push("bv", Tensor::zeros(&[vd])),
        wo: push("wo", Tensor::trunc_normal(&[vd, d], INIT_STD, rng)),
        bo: push("bo", Tensor::zeros(&[d])),
        ln2_g: push("ln2_g", Tensor::ones(&[d])),
        ln2_b: push("ln2_b", Tensor::zeros(&[d])),
        w1: push("w1", Tensor::trunc_normal(&[d, hidden], INIT_STD, rng)),
        b1: push("b1", Tensor::zeros(&[hidden])),
        w2: push("w2", Tensor::trunc_normal(&[hidden, d], INIT_STD, rng)),
        b2: push("b2", Tensor::zeros(&[d])),
    }
}

fn init_head(cfg: &VitConfig, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> HeadIds {
    let d = cfg.dim;
    HeadIds {
        ln_g: store.push("head.ln_g", Tensor::ones(&[d])),
        ln_b: store.push("head.ln_b", Tensor::zeros(&[d])),
        w: store.push("head.w", Tensor::trunc_normal(&[d, cfg.classes], INIT_STD, rng)),
        b: store.push("head.b", Tensor::zeros(&[cfg.classes])),
    }
}

/// Output of one transformer block.
pub struct BlockOutput<'t> {
    pub tokens: Var<'t>,
    /// Per-head attention matrices, `[G, H, n', n']`.
    pub attention: Tensor,
}

fn block_forward<'t>(
    cfg: &VitConfig,
    ids: &BlockIds,
    p: &Bound<'t>,
    z: Var<'t>,
) -> Result<BlockOutput<'t>> {
    let shape = z.shape();
    if shape.len() != 3 || shape[2] != cfg.dim {
        return Err(Error::shape(
            "block_forward",
            format!("expected [G, n, {}], got {shape:?}", cfg.dim),
        ));
    }
    let (groups, n) = (shape[0], shape[1]);
    let h = z.layernorm(p[ids.ln1_g], p[ids.ln1_b])?;
    let q = h.matmul(p[ids.wq])?.add_bias(p[ids.bq])?;
    let k = h.matmul(p[ids.wk])?.add_bias(p[ids.bk])?;
    let v = h.matmul(p[ids.wv])?.add_bias(p[ids.bv])?;
    let (dk, dv) = (cfg.key_dim, cfg.value_dim);
    let scale = 1.0 / (dk as f64).sqrt();

    let mut attention = vec![0.0; groups * cfg.heads * n * n];
    let mut outputs = Vec::with_capacity(cfg.heads);
    for head in 0..cfg.heads {
        let qh = q.slice_last(head * dk, dk)?;
        let kh = k.slice_last(head * dk, dk)?;
        let vh = v.slice_last(head * dv, dv)?;
        let a = qh.bmm(kh, true)?.scale(scale).softmax();
        let av = a.value();
        for g in 0..groups {
            let dst = (g * cfg.heads + head) * n * n;
            attention[dst..dst + n * n].copy_from_slice(&av.data()[g * n * n..(g + 1) * n * n]);
        }
        outputs.push(a.bmm(vh, false)?);
    }
    let mha = Var::concat_last(&outputs)?
        .matmul(p[ids.wo])?
        .add_bias(p[ids.bo])?;
    let z = z.add(mha)?;
    let ffn = z
        .layernorm(p[ids.ln2_g], p[ids.ln2_b])?
        .matmul(p[ids.w1])?
        .add_bias(p[ids.b1])?
        .gelu()
        .matmul(p[ids.w2])?
        .add_bias(p[ids.b2])?;
    Ok(BlockOutput {
        tokens: z.add(ffn)?,
        attention: Tensor::from_parts(vec![groups, cfg.heads, n, n], attention),
    })
}

/// Cuts a `[B, C, H, W]` batch into `[B, P, C*p*p]` flattened patches in
/// row-major grid order.
pub fn patchify(cfg: &VitConfig, images: &Tensor) -> Result<Tensor> {
    let s = images.shape();
    if s.len() != 4 || s[1..] != [cfg.channels, cfg.height, cfg.width] {
        return Err(Error::shape(
            "patch_embed",
            format!(
                "expected [B, {}, {}, {}], got {s:?}",
                cfg.channels, cfg.height, cfg.width
            ),
        ));
    }
    let (b, c, h, w, p) = (s[0], cfg.channels, cfg.height, cfg.width, cfg.patch);
    let (gh, gw) = (h / p, w / p);
    let mut out = Vec::with_capacity(images.len());
    let x = images.data();
    for bi in 0..b {
        for py in 0..gh {
            for px in 0..gw {
                for ci in 0..c {
                    for y in 0..p {
                        let row = ((bi * c + ci) * h + py * p + y) * w + px * p;
                        out.extend_from_slice(&x[row..row + p]);
                    }
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![b, gh * gw, cfg.patch_dim()], out))
}

/// Mean over heads of the class-token attention row: `[B, H, n, n] -> [B, n]`.
pub fn cls_scores(attention: &Tensor) -> Tensor {
    let s = attention.shape();
    let (b, heads, n) = (s[0], s[1], s[2]);
    let mut out = vec![0.0; b * n];
    for bi in 0..b {
        let dst = &mut out[bi * n..(bi + 1) * n];
        for h in 0..heads {
            let row = &attention.data()[((bi * heads + h) * n) * n..][..n];
            for (x, y) in dst.iter_mut().zip(row) {
                *x += y;
            }
        }
        dst.iter_mut().for_each(|x| *x /= heads as f64);
    }
    Tensor::from_parts(vec![b, n], out)
}

/// Embedding plus blocks `1..=l`.
#[derive(Clone, Debug)]
pub struct ClientModel {
    pub config: VitConfig,
    pub params: ParamStore,
    embed: EmbedIds,
    blocks: Vec<BlockIds>,
}

/// Blocks `l+1..=L` plus the classifier.
#[derive(Clone, Debug)]
pub struct ServerModel {
    pub config: VitConfig,
    pub params: ParamStore,
    blocks: Vec<BlockIds>,
    head: HeadIds,
}

/// Client output for one batch.
pub struct ClientOutput<'t> {
    /// `[B, n, d]` activations of the last client block.
    pub activations: Var<'t>,
    /// `[B, n]` head-averaged class-token attention of the last client block.
    pub cls_scores: Tensor,
}

impl ClientModel {
    pub fn patch_embed<'t>(&self, p: &Bound<'t>, images: &Tensor) -> Result<Var<'t>> {
        let tape = p[self.embed.proj_w].tape();
        let patches = tape.constant(patchify(&self.config, images)?);
        patches
            .matmul(p[self.embed.proj_w])?
            .add_bias(p[self.embed.proj_b])?
            .prepend_row(p[self.embed.cls])?
            .embedding_add(p[self.embed.pos])
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, images: &Tensor) -> Result<ClientOutput<'t>> {
        if images.shape().first().copied().unwrap_or(0) == 0 {
            return Err(Error::contract("empty batch"));
        }
        let mut z = self.patch_embed(p, images)?;
        let mut attention = None;
        for ids in &self.blocks {
            let out = block_forward(&self.config, ids, p, z)?;
            z = out.tokens;
            attention = Some(out.attention);
        }
        let attention = attention.expect("client owns at least one block");
        Ok(ClientOutput {
            activations: z,
            cls_scores: cls_scores(&attention),
        })
    }

    /// Forward pass of block `index` (0-based within the client).
    pub fn block<'t>(&self, index: usize, p: &Bound<'t>, z: Var<'t>) -> Result<BlockOutput<'t>> {
        block_forward(&self.config, &self.blocks[index], p, z)
    }

    /// Activations and class-token scores as plain tensors.
    pub fn infer(&self, images: &Tensor) -> Result<(Tensor, Tensor)> {
        let tape = Tape::new();
        let p = self.params.bind(&tape);
        let out = self.forward(&p, images)?;
        Ok(((*out.activations.value()).clone(), out.cls_scores))
    }
}

/// Result of a server step on received activations.
#[derive(Clone, Debug)]
pub struct ServerStep {
    pub loss: f64,
    pub input_grad: Tensor,
    pub param_grads: Vec<Tensor>,
}

impl ServerModel {
    /// Logits `[T, L]` for activations `[T, k, d]`, any `k >= 1`.
    pub fn forward<'t>(&self, p: &Bound<'t>, z: Var<'t>) -> Result<Var<'t>> {
        let mut z = z;
        for ids in &self.blocks {
            z = block_forward(&self.config, ids, p, z)?.tokens;
        }
        let t = z.shape()[0];
        z.layernorm(p[self.head.ln_g], p[self.head.ln_b])?
            .gather_rows(vec![vec![0]; t])?
            .reshape(&[t, self.config.dim])?
            .matmul(p[self.head.w])?
            .add_bias(p[self.head.b])
    }

    pub fn block<'t>(&self, index: usize, p: &Bound<'t>, z: Var<'t>) -> Result<BlockOutput<'t>> {
        block_forward(&self.config, &self.blocks[index], p, z)
    }

    /// Mean soft-label cross-entropy and its gradients with respect to the
    /// input activations and to every server parameter.
    pub fn forward_loss(&self, activations: &Tensor, soft_labels: &Tensor) -> Result<ServerStep> {
        check_label_rows(soft_labels, self.config.classes)?;
        if activations.shape().first() != soft_labels.shape().first() {
            return Err(Error::shape(
                "server_forward_loss",
                format!("{:?} activations vs {:?} labels", activations.shape(), soft_labels.shape()),
            ));
        }
        let tape = Tape::new();
        let p = self.params.bind(&tape);
        let z = tape.leaf(activations.clone());
        let loss = self.forward(&p, z)?.soft_cross_entropy(soft_labels)?;
        let grads = tape.backward(loss)?;
        Ok(ServerStep {
            loss: loss.value().item(),
            input_grad: grads.get_or_zeros(z),
            param_grads: self.params.gradients(&p, &grads),
        })
    }

    pub fn logits(&self, activations: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let p = self.params.bind(&tape);
        let z = tape.constant(activations.clone());
        Ok((*self.forward(&p, z)?.value()).clone())
    }
}

/// Slack on label row sums; rows that crossed the wire in `f32` are off by
/// a few ulps.
const LABEL_SUM_TOLERANCE: f64 = 1e-6;

pub(crate) fn check_label_rows(labels: &Tensor, classes: usize) -> Result<()> {
    if labels.ndim() != 2 || labels.cols() != classes {
        return Err(Error::shape(
            "soft labels",
            format!("expected [T, {classes}], got {:?}", labels.shape()),
        ));
    }
    for (i, row) in labels.data().chunks_exact(classes).enumerate() {
        let total: f64 = row.iter().sum();
        if (total - 1.0).abs() > LABEL_SUM_TOLERANCE || row.iter().any(|&y| y < 0.0) {
            return Err(Error::contract(format!(
                "label row {i} is not a probability vector (sum {total})"
            )));
        }
    }
    Ok(())
}

/// One-hot rows for class ids.
pub fn one_hot(labels: &[usize], classes: usize) -> Tensor {
    let mut out = vec![0.0; labels.len() * classes];
    for (i, &y) in labels.iter().enumerate() {
        out[i * classes + y] = 1.0;
    }
    Tensor::from_parts(vec![labels.len(), classes], out)
}

/// Both halves of the network, initialised together so that a split run and
/// an unsplit run share identical weights.
#[derive(Clone, Debug)]
pub struct SplitModel {
    pub client: ClientModel,
    pub server: ServerModel,
}

impl SplitModel {
    pub fn init(config: &VitConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cp = ParamStore::new();
        let mut sp = ParamStore::new();
        let embed = init_embed(config, &mut cp, &mut rng);
        let mut client_blocks = Vec::new();
        let mut server_blocks = Vec::new();
        for i in 0..config.blocks {
            if i < config.split_point {
                client_blocks.push(init_block(config, i + 1, &mut cp, &mut rng));
            } else {
                server_blocks.push(init_block(config, i + 1, &mut sp, &mut rng));
            }
        }
        let head = init_head(config, &mut sp, &mut rng);
        Ok(Self {
            client: ClientModel {
                config: config.clone(),
                params: cp,
                embed,
                blocks: client_blocks,
            },
            server: ServerModel {
                config: config.clone(),
                params: sp,
                blocks: server_blocks,
                head,
            },
        })
    }

    pub fn config(&self) -> &VitConfig {
        &self.client.config
    }

    /// Reference path: the whole network on one tape.
    pub fn unsplit_forward(&self, images: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let cp = self.client.params.bind(&tape);
        let sp = self.server.params.bind(&tape);
        let out = self.client.forward(&cp, images)?;
        Ok((*self.server.forward(&sp, out.activations)?.value()).clone())
    }

    /// Loss and parameter gradients of the whole network on one tape.
    pub fn unsplit_loss_grads(
        &self,
        images: &Tensor,
        targets: &Tensor,
    ) -> Result<(f64, Vec<Tensor>, Vec<Tensor>)> {
        let tape = Tape::new();
        let cp = self.client.params.bind(&tape);
        let sp = self.server.params.bind(&tape);
        let out = self.client.forward(&cp, images)?;
        let loss = self
            .server
            .forward(&sp, out.activations)?
            .soft_cross_entropy(targets)?;
        let grads = tape.backward(loss)?;
        Ok((
            loss.value().item(),
            self.client.params.gradients(&cp, &grads),
            self.server.params.gradients(&sp, &grads),
        ))
    }

    /// Writes a checkpoint: `u64` little-endian header length, a JSON header
    /// with the configuration and parameter shapes, then every value as a
    /// little-endian `f64` in header order.
    pub fn save(&self, path: &Path) -> Result<()> {
        let header = CheckpointHeader {
            config: self.config().clone(),
            client: describe(&self.client.params),
            server: describe(&self.server.params),
        };
        let json = serde_json::to_vec(&header)?;
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let mut write = |bytes: &[u8]| w.write_all(bytes).map_err(|e| Error::io(path, e));
        write(&(json.len() as u64).to_le_bytes())?;
        write(&json)?;
        for t in self.client.params.tensors().iter().chain(self.server.params.tensors()) {
            for v in t.data() {
                write(&v.to_le_bytes())?;
            }
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Loads a checkpoint written by [`SplitModel::save`] for the base network.
    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BufReader::new(file);
        let mut len = [0u8; 8];
        r.read_exact(&mut len).map_err(|e| Error::io(path, e))?;
        let mut json = vec![0u8; u64::from_le_bytes(len) as usize];
        r.read_exact(&mut json).map_err(|e| Error::io(path, e))?;
        let header: CheckpointHeader = serde_json::from_slice(&json)?;
        let mut model = SplitModel::init(&header.config, 0)?;
        for (store, described) in [
            (&mut model.client.params, &header.client),
            (&mut model.server.params, &header.server),
        ] {
            if store.names().len() != described.len()
                || store.iter().zip(described).any(|((n, t), d)| n != d.name || t.shape() != d.shape)
            {
                return Err(Error::Config(format!(
                    "{}: parameter layout does not match its configuration",
                    path.display()
                )));
            }
            for t in store.tensors_mut() {
                let mut buf = vec![0u8; t.len() * 8];
                r.read_exact(&mut buf).map_err(|e| Error::io(path, e))?;
                for (v, b) in t.data_mut().iter_mut().zip(buf.chunks_exact(8)) {
                    *v = f64::from_le_bytes(b.try_into().unwrap());
                }
            }
        }
        Ok(model)
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    config: VitConfig,
    client: Vec<ParamShape>,
    server: Vec<ParamShape>,
}

#[derive(Serialize, Deserialize)]
struct ParamShape {
    name: String,
    shape: Vec<usize>,
}

fn describe(store: &ParamStore) -> Vec<ParamShape> {
    store
        .iter()
        .map(|(n, t)| ParamShape {
            name: n.to_string(),
            shape: t.shape().to_vec(),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{assert_grad_close, numeric_grad};

    fn tiny() -> VitConfig {
        VitConfig {
            channels: 1,
            height: 8,
            width: 8,
            patch: 4,
            dim: 6,
            heads: 2,
            key_dim: 3,
            value_dim: 3,
            blocks: 3,
            classes: 3,
            split_point: 2,
            mlp_ratio: 2,
        }
    }

    fn images(cfg: &VitConfig, b: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::uniform(&[b, cfg.channels, cfg.height, cfg.width], -1.0, 1.0, &mut rng)
    }

    fn naive_layernorm(x: &[f64], g: &[f64], b: &[f64]) -> Vec<f64> {
        let n = x.len() as f64;
        let mean = x.iter().sum::<f64>() / n;
        let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        x.iter()
            .zip(g.iter().zip(b))
            .map(|(v, (g, b))| (v - mean) / (var + 1e-5).sqrt() * g + b)
            .collect()
    }

    fn naive_affine(x: &[f64], w: &Tensor, b: &Tensor) -> Vec<f64> {
        let (rows, cols) = (w.shape()[0], w.shape()[1]);
        (0..cols)
            .map(|j| b.data()[j] + (0..rows).map(|i| x[i] * w.data()[i * cols + j]).sum::<f64>())
            .collect()
    }

    #[test]
    fn block_matches_naive_loops() {
        let cfg = tiny();
        let mut model = SplitModel::init(&cfg, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for t in model.client.params.tensors_mut() {
            *t = Tensor::randn(t.shape(), 0.5, &mut rng);
        }
        let (g, n, d) = (2, 4, cfg.dim);
        let z = Tensor::randn(&[g, n, d], 1.0, &mut rng);
        let tape = Tape::new();
        let p = model.client.params.bind(&tape);
        let out = model.client.block(0, &p, tape.constant(z.clone())).unwrap();

        let get = |name: &str| {
            let i = model.client.params.names().iter().position(|x| x == &format!("block1.{name}")).unwrap();
            model.client.params.tensors()[i].clone()
        };
        let (dk, dv, heads) = (cfg.key_dim, cfg.value_dim, cfg.heads);
        let gelu = |x: f64| 0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh());
        let mut expected = Vec::new();
        for s in 0..g {
            let rows: Vec<&[f64]> = (0..n).map(|t| &z.data()[(s * n + t) * d..(s * n + t + 1) * d]).collect();
            let h: Vec<Vec<f64>> = rows.iter().map(|r| naive_layernorm(r, get("ln1_g").data(), get("ln1_b").data())).collect();
            let q: Vec<Vec<f64>> = h.iter().map(|r| naive_affine(r, &get("wq"), &get("bq"))).collect();
            let k: Vec<Vec<f64>> = h.iter().map(|r| naive_affine(r, &get("wk"), &get("bk"))).collect();
            let v: Vec<Vec<f64>> = h.iter().map(|r| naive_affine(r, &get("wv"), &get("bv"))).collect();
            for t in 0..n {
                let mut concat = Vec::new();
                for head in 0..heads {
                    let logits: Vec<f64> = (0..n)
                        .map(|u| (0..dk).map(|j| q[t][head * dk + j] * k[u][head * dk + j]).sum::<f64>() / (dk as f64).sqrt())
                        .collect();
                    let top = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let e: Vec<f64> = logits.iter().map(|l| (l - top).exp()).collect();
                    let total: f64 = e.iter().sum();
                    for j in 0..dv {
                        concat.push((0..n).map(|u| e[u] / total * v[u][head * dv + j]).sum::<f64>());
                    }
                }
                let mha = naive_affine(&concat, &get("wo"), &get("bo"));
                let mid: Vec<f64> = rows[t].iter().zip(&mha).map(|(a, b)| a + b).collect();
                let hidden: Vec<f64> = naive_affine(&naive_layernorm(&mid, get("ln2_g").data(), get("ln2_b").data()), &get("w1"), &get("b1"))
                    .into_iter()
                    .map(gelu)
                    .collect();
                let ffn = naive_affine(&hidden, &get("w2"), &get("b2"));
                expected.extend(mid.iter().zip(&ffn).map(|(a, b)| a + b));
            }
        }
        let expected = Tensor::new(vec![g, n, d], expected).unwrap();
        assert!(out.tokens.value().max_abs_diff(&expected) < 1e-12);
    }

    #[test]
    fn config_validation() {
        assert!(VitConfig::default().validate().is_ok());
        assert_eq!(VitConfig::default().tokens(), 17);
        let mut c = tiny();
        c.split_point = 1;
        assert!(c.validate().is_err());
        c.split_point = 3;
        assert!(c.validate().is_err());
        let mut c = tiny();
        c.patch = 3;
        assert!(c.validate().is_err());
    }

    #[test]
    fn patch_embed_token_count() {
        let cfg = tiny();
        let model = SplitModel::init(&cfg, 1).unwrap();
        let tape = Tape::new();
        let p = model.client.params.bind(&tape);
        let z = model.client.patch_embed(&p, &images(&cfg, 1, 0)).unwrap();
        assert_eq!(z.shape(), vec![1, 5, 6]);
    }

    #[test]
    fn zero_image_embeds_to_positions() {
        let cfg = tiny();
        let mut model = SplitModel::init(&cfg, 1).unwrap();
        let w = model.client.embed.proj_w;
        *model.client.params.get_mut(w) = Tensor::zeros(&[16, 6]);
        let tape = Tape::new();
        let p = model.client.params.bind(&tape);
        let z = model
            .client
            .patch_embed(&p, &Tensor::zeros(&[1, 1, 8, 8]))
            .unwrap()
            .value();
        let pos = model.client.params.get(model.client.embed.pos);
        let cls = model.client.params.get(model.client.embed.cls);
        for j in 0..6 {
            assert_eq!(z.data()[j], cls.data()[j] + pos.data()[j]);
        }
        assert_eq!(&z.data()[6..], &pos.data()[6..]);
    }

    #[test]
    fn patch_contents_only_move_their_token() {
        let cfg = tiny();
        let model = SplitModel::init(&cfg, 2).unwrap();
        let img = images(&cfg, 1, 3);
        // Swap the contents of grid patches 0 and 3 by direct construction.
        let mut swapped = img.clone();
        for y in 0..4 {
            for x in 0..4 {
                let a = y * 8 + x;
                let b = (y + 4) * 8 + x + 4;
                swapped.data_mut().swap(a, b);
            }
        }
        let embed = |im: &Tensor| {
            let tape = Tape::new();
            let p = model.client.params.bind(&tape);
            let z = model.client.patch_embed(&p, im).unwrap().value();
            let pos = model.client.params.get(model.client.embed.pos);
            let mut rows = (*z).clone();
            for (v, q) in rows.data_mut().iter_mut().zip(pos.data()) {
                *v -= q;
            }
            rows
        };
        let (e0, e1) = (embed(&img), embed(&swapped));
        let same = |i: usize, j: usize| {
            (0..6).all(|c| (e0.data()[i * 6 + c] - e1.data()[j * 6 + c]).abs() < 1e-14)
        };
        assert!(same(0, 0) && same(2, 2) && same(3, 3));
        assert!(same(1, 4) && same(4, 1));
        assert!(!same(1, 1));
    }

    #[test]
    fn attention_rows_are_stochastic_for_any_token_count() {
        let cfg = tiny();
        let model = SplitModel::init(&cfg, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for n in 1..=5 {
            let tape = Tape::new();
            let p = model.server.params.bind(&tape);
            let z = tape.constant(Tensor::randn(&[2, n, 6], 1.0, &mut rng));
            let out = model.server.block(0, &p, z).unwrap();
            assert_eq!(out.tokens.shape(), vec![2, n, 6]);
            for row in out.attention.data().chunks_exact(n) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
            if n == 1 {
                assert!(out.attention.data().iter().all(|&a| a == 1.0));
            }
        }
    }

    #[test]
    fn cls_scores_average_head_rows() {
        let cfg = tiny();
        let model = SplitModel::init(&cfg, 5).unwrap();
        let img = images(&cfg, 3, 1);
        let tape = Tape::new();
        let p = model.client.params.bind(&tape);
        let out = model.client.forward(&p, &img).unwrap();
        // Recompute from the last block directly.
        let z = model.client.patch_embed(&p, &img).unwrap();
        let z = model.client.block(0, &p, z).unwrap().tokens;
        let att = model.client.block(1, &p, z).unwrap().attention;
        let n = cfg.tokens();
        for b in 0..3 {
            let row = &out.cls_scores.data()[b * n..(b + 1) * n];
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-10);
            for j in 0..n {
                let manual = (att.data()[((b * 2) * n) * n + j] + att.data()[((b * 2 + 1) * n) * n + j]) / 2.0;
                assert!((row[j] - manual).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn split_composition_matches_unsplit() {
        let cfg = tiny();
        let model = SplitModel::init(&cfg, 6).unwrap();
        for seed in 0..3 {
            let img = images(&cfg, 4, seed);
            let (acts, _) = model.client.infer(&img).unwrap();
            let split = model.server.logits(&acts).unwrap();
            let unsplit = model.unsplit_forward(&img).unwrap();
            assert_eq!(split, unsplit);
            assert_eq!(unsplit.shape(), &[4, 3]);
        }
    }

    #[test]
    fn server_loss_gradient_matches_finite_differences() {
        let cfg = tiny();
        let model = SplitModel::init(&cfg, 7).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let acts = Tensor::randn(&[2, 3, 6], 1.0, &mut rng);
        let labels = Tensor::from_rows(&[&[0.5, 0.5, 0.0], &[0.0, 0.0, 1.0]]);
        let step = model.server.forward_loss(&acts, &labels).unwrap();
        let fd = numeric_grad(&acts, |a| model.server.forward_loss(a, &labels).unwrap().loss);
        assert_grad_close(&step.input_grad, &fd, 1e-3);
    }

    #[test]
    fn server_loss_rejects_unnormalised_labels() {
        let cfg = tiny();
        let model = SplitModel::init(&cfg, 7).unwrap();
        let acts = Tensor::zeros(&[1, 5, 6]);
        let bad = Tensor::from_rows(&[&[0.5, 0.2, 0.2]]);
        assert!(matches!(
            model.server.forward_loss(&acts, &bad),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn uniform_labels_loss_bounded_below_by_log_classes() {
        let cfg = tiny();
        let model = SplitModel::init(&cfg, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let uniform = Tensor::full(&[4, 3], 1.0 / 3.0);
        let acts = Tensor::randn(&[4, 5, 6], 3.0, &mut rng);
        let loss = model.server.forward_loss(&acts, &uniform).unwrap().loss;
        assert!(loss >= 3f64.ln() - 1e-12);
        // One-hot targets reduce to the usual negative log-likelihood.
        let logits = model.server.logits(&acts).unwrap();
        let targets = one_hot(&[0, 1, 2, 0], 3);
        let nll: f64 = (0..4)
            .map(|i| {
                let row = &logits.data()[i * 3..(i + 1) * 3];
                let lse = row.iter().map(|v| v.exp()).sum::<f64>().ln();
                lse - row[[0, 1, 2, 0][i]]
            })
            .sum::<f64>()
            / 4.0;
        let loss = model.server.forward_loss(&acts, &targets).unwrap().loss;
        assert!((loss - nll).abs() < 1e-12);
    }

    #[test]
    fn checkpoint_round_trip() {
        let cfg = tiny();
        let model = SplitModel::init(&cfg, 11).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        model.save(&path).unwrap();
        let loaded = SplitModel::load(&path).unwrap();
        assert_eq!(loaded.client.params, model.client.params);
        assert_eq!(loaded.server.params, model.server.params);
    }
}
