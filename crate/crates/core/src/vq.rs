//! Stage-1 similarity-driven VQ-VAE: conv residual encoder with unit-norm
//! latent rows, cosine-similarity quantization against a unit-norm codebook,
//! EMA codebook updates with inactive-code resetting, and a conv decoder.
//! Once trained the tokenizer is frozen; Stage 2 only reads it.

use crate::ckpt::{crc32, Checkpoint};
use crate::data::WindowedDataset;
use crate::error::{Result, SdError};
use crate::nn::{Binder, Conv1d};
use crate::rng::stream;
use crate::tensor::{Adam, ParamStore, Tensor};
use rand::seq::SliceRandom;
use rand::Rng;

/// Epsilon in the EMA code-average denominator.
const EMA_EPS: f32 = 1e-5;

#[derive(Debug, Clone)]
pub struct VqConfig {
    pub seq_len: usize,
    pub features: usize,
    pub downsample: usize,
    pub codebook_size: usize,
    pub code_dim: usize,
    pub hidden: usize,
    pub res_blocks: usize,
    pub kernel: usize,
    pub lambda_embed: f32,
    pub ema_decay: f32,
    pub reset_threshold: usize,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    /// Early-stop once the epoch reconstruction MSE drops below this
    /// (0 disables early stopping).
    pub target_mse: f32,
    /// Per-epoch multiplicative learning-rate decay (1.0 = constant).
    pub lr_decay: f64,
}

impl VqConfig {
    /// Desk-scale sines defaults; paper-scale values shrink proportionally
    /// (hidden 512 -> 64, K 512 -> 64, d_c 512 -> 64).
    pub fn desk_sines() -> Self {
        VqConfig {
            seq_len: 24,
            features: 5,
            downsample: 4,
            codebook_size: 64,
            code_dim: 64,
            hidden: 64,
            res_blocks: 1,
            kernel: 3,
            lambda_embed: 0.5,
            ema_decay: 0.99,
            reset_threshold: 0,
            epochs: 200,
            batch: 64,
            lr: 2e-3,
            target_mse: 0.045,
            lr_decay: 1.0,
        }
    }

    /// Longer schedule with a larger codebook; the tokenizer quality floor
    /// for the generation-facing experiments.
    pub fn desk_sines_hq() -> Self {
        VqConfig {
            codebook_size: 256,
            lr: 3e-3,
            lr_decay: 0.975,
            epochs: 100,
            target_mse: 0.0,
            ..Self::desk_sines()
        }
    }

    pub fn latent_len(&self) -> usize {
        self.seq_len / self.downsample
    }

    pub fn validate(&self) -> Result<()> {
        if self.downsample == 0 || !self.downsample.is_power_of_two() {
            return Err(SdError::Config(format!(
                "downsample rate must be a power of two, got {}",
                self.downsample
            )));
        }
        if self.seq_len % self.downsample != 0 {
            return Err(SdError::Config(format!(
                "seq_len {} not divisible by downsample {}",
                self.seq_len, self.downsample
            )));
        }
        if self.codebook_size == 0 {
            return Err(SdError::Config("codebook must be non-empty".into()));
        }
        if !(0.0 < self.ema_decay && self.ema_decay < 1.0) {
            return Err(SdError::Config(format!("ema decay must be in (0,1), got {}", self.ema_decay)));
        }
        Ok(())
    }

    pub fn write_to(&self, ckpt: &mut Checkpoint) {
        ckpt.set_config("vq.seq_len", self.seq_len);
        ckpt.set_config("vq.features", self.features);
        ckpt.set_config("vq.downsample", self.downsample);
        ckpt.set_config("vq.codebook_size", self.codebook_size);
        ckpt.set_config("vq.code_dim", self.code_dim);
        ckpt.set_config("vq.hidden", self.hidden);
        ckpt.set_config("vq.res_blocks", self.res_blocks);
        ckpt.set_config("vq.kernel", self.kernel);
        ckpt.set_config("vq.lambda_embed", self.lambda_embed);
        ckpt.set_config("vq.ema_decay", self.ema_decay);
        ckpt.set_config("vq.reset_threshold", self.reset_threshold);
        ckpt.set_config("vq.epochs", self.epochs);
        ckpt.set_config("vq.batch", self.batch);
        ckpt.set_config("vq.lr", self.lr);
        ckpt.set_config("vq.target_mse", self.target_mse);
        ckpt.set_config("vq.lr_decay", self.lr_decay);
    }

    pub fn read_from(ckpt: &Checkpoint) -> Result<Self> {
        Ok(VqConfig {
            seq_len: ckpt.config_parsed("vq.seq_len")?,
            features: ckpt.config_parsed("vq.features")?,
            downsample: ckpt.config_parsed("vq.downsample")?,
            codebook_size: ckpt.config_parsed("vq.codebook_size")?,
            code_dim: ckpt.config_parsed("vq.code_dim")?,
            hidden: ckpt.config_parsed("vq.hidden")?,
            res_blocks: ckpt.config_parsed("vq.res_blocks")?,
            kernel: ckpt.config_parsed("vq.kernel")?,
            lambda_embed: ckpt.config_parsed("vq.lambda_embed")?,
            ema_decay: ckpt.config_parsed("vq.ema_decay")?,
            reset_threshold: ckpt.config_parsed("vq.reset_threshold")?,
            epochs: ckpt.config_parsed("vq.epochs")?,
            batch: ckpt.config_parsed("vq.batch")?,
            lr: ckpt.config_parsed("vq.lr")?,
            target_mse: ckpt.config_parsed("vq.target_mse")?,
            lr_decay: ckpt.config_parsed("vq.lr_decay")?,
        })
    }
}

/// K × d_c unit-norm code rows with EMA statistics and per-epoch usage.
#[derive(Debug, Clone)]
pub struct Codebook {
    pub codes: Tensor<f32>,
    pub ema_cluster_size: Vec<f32>,
    pub ema_embed_sum: Tensor<f32>,
    pub usage: Vec<u64>,
}

impl Codebook {
    pub fn init(k: usize, d_c: usize, rng: &mut impl Rng) -> Self {
        let mut codes = Tensor::<f32>::randn(vec![k, d_c], 1.0, rng);
        normalize_rows(&mut codes);
        let ema_embed_sum = codes.clone();
        Codebook { codes, ema_cluster_size: vec![1.0; k], ema_embed_sum, usage: vec![0; k] }
    }

    pub fn len(&self) -> usize {
        self.codes.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.rows() == 0
    }

    /// Cosine-similarity argmax (codes are unit-norm, so the dot product
    /// decides). Ties break to the lowest index.
    pub fn quantize(&self, h: &[f32]) -> Result<usize> {
        if self.is_empty() {
            return Err(SdError::Config("empty codebook".into()));
        }
        if h.len() != self.codes.cols() {
            return Err(SdError::Dim(format!(
                "latent dim {} != code dim {}",
                h.len(),
                self.codes.cols()
            )));
        }
        let mut best = 0usize;
        let mut best_sim = f32::NEG_INFINITY;
        for k in 0..self.len() {
            let sim: f32 = self.codes.row(k).iter().zip(h).map(|(&c, &v)| c * v).sum();
            if sim > best_sim {
                best_sim = sim;
                best = k;
            }
        }
        Ok(best)
    }

    pub fn quantize_rows(&self, h: &Tensor<f32>) -> Result<Vec<usize>> {
        (0..h.rows()).map(|r| self.quantize(h.row(r))).collect()
    }

    /// Row i of the result is `codes[y_i]`.
    pub fn dequantize(&self, indices: &[usize]) -> Result<Tensor<f32>> {
        let d = self.codes.cols();
        let mut data = Vec::with_capacity(indices.len() * d);
        for &y in indices {
            if y >= self.len() {
                return Err(SdError::Data(format!("token index {y} out of range (K={})", self.len())));
            }
            data.extend_from_slice(self.codes.row(y));
        }
        Tensor::new(vec![indices.len(), d], data)
    }

    /// EMA update from a batch of latents and their assignments:
    /// size_k <- decay*size_k + (1-decay)*count_k,
    /// sum_k  <- decay*sum_k  + (1-decay)*sum of assigned latents,
    /// codes  <- normalize(sum_k / (size_k + eps)).
    pub fn ema_update(&mut self, latents: &Tensor<f32>, indices: &[usize], decay: f32) {
        assert_eq!(latents.rows(), indices.len());
        let k = self.len();
        let d = self.codes.cols();
        let mut counts = vec![0.0f32; k];
        let mut sums = vec![0.0f32; k * d];
        for (r, &y) in indices.iter().enumerate() {
            counts[y] += 1.0;
            for (acc, &v) in sums[y * d..(y + 1) * d].iter_mut().zip(latents.row(r)) {
                *acc += v;
            }
        }
        for kk in 0..k {
            self.ema_cluster_size[kk] = decay * self.ema_cluster_size[kk] + (1.0 - decay) * counts[kk];
            let row = self.ema_embed_sum.row_mut(kk);
            for (s, &b) in row.iter_mut().zip(&sums[kk * d..(kk + 1) * d]) {
                *s = decay * *s + (1.0 - decay) * b;
            }
            let denom = self.ema_cluster_size[kk] + EMA_EPS;
            let avg: Vec<f32> = self.ema_embed_sum.row(kk).iter().map(|&s| s / denom).collect();
            let norm = avg.iter().map(|v| v * v).sum::<f32>().sqrt().max(1e-12);
            for (c, a) in self.codes.row_mut(kk).iter_mut().zip(avg) {
                *c = a / norm;
            }
            self.usage[kk] += counts[kk] as u64;
        }
    }

    /// Replace every code whose epoch usage is <= threshold with a random
    /// donor latent (re-normalized); clears the usage counters.
    pub fn reset_inactive(&mut self, donors: &Tensor<f32>, threshold: usize, rng: &mut impl Rng) {
        if donors.rows() == 0 {
            eprintln!("warning: no donor latents available, skipping inactive-code reset");
            return;
        }
        for kk in 0..self.len() {
            if self.usage[kk] <= threshold as u64 {
                let pick = rng.gen_range(0..donors.rows());
                let mut row = donors.row(pick).to_vec();
                let norm = row.iter().map(|v| v * v).sum::<f32>().sqrt().max(1e-12);
                for v in &mut row {
                    *v /= norm;
                }
                self.codes.row_mut(kk).copy_from_slice(&row);
                self.ema_embed_sum.row_mut(kk).copy_from_slice(&row);
                self.ema_cluster_size[kk] = 1.0;
            }
        }
        self.usage = vec![0; self.len()];
    }

    /// Fraction of codes with nonzero usage counts.
    pub fn utilization(&self) -> f64 {
        self.usage.iter().filter(|&&u| u > 0).count() as f64 / self.len() as f64
    }
}

fn normalize_rows(t: &mut Tensor<f32>) {
    let (rows, cols) = (t.rows(), t.cols());
    for r in 0..rows {
        let norm = t.row(r).iter().map(|v| v * v).sum::<f32>().sqrt().max(1e-12);
        for c in 0..cols {
            t.data_mut()[r * cols + c] /= norm;
        }
    }
}

/// Conv encoder: stem, strided downsampling, residual blocks at the
/// bottleneck, projection to code dim, unit-norm rows.
#[derive(Debug, Clone)]
pub struct ConvEncoder {
    stem: Conv1d,
    down: Vec<Conv1d>,
    res: Vec<(Conv1d, Conv1d)>,
    head: Conv1d,
}

/// Conv decoder: stem from code dim, residual blocks, nearest-neighbor
/// upsampling with convs, projection back to feature dim.
#[derive(Debug, Clone)]
pub struct ConvDecoder {
    stem: Conv1d,
    res: Vec<(Conv1d, Conv1d)>,
    up: Vec<Conv1d>,
    head: Conv1d,
}

/// Frozen Stage-1 artifact: encoder, decoder, codebook, and their config.
#[derive(Debug, Clone)]
pub struct Tokenizer {
    pub config: VqConfig,
    pub params: ParamStore<f32>,
    pub encoder: ConvEncoder,
    pub decoder: ConvDecoder,
    pub codebook: Codebook,
}

impl Tokenizer {
    pub fn init(config: VqConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = stream(seed, 0x70c1);
        let mut params = ParamStore::new();
        let k = config.kernel;
        let pad = k / 2;
        let h = config.hidden;
        let stages = config.downsample.trailing_zeros() as usize;

        let stem = Conv1d::init(&mut params, "enc.stem", config.features, h, k, 1, pad, &mut rng);
        let mut down = Vec::new();
        for s in 0..stages {
            down.push(Conv1d::init(&mut params, &format!("enc.down{s}"), h, h, k, 2, pad, &mut rng));
        }
        let mut enc_res = Vec::new();
        for r in 0..config.res_blocks {
            enc_res.push((
                Conv1d::init(&mut params, &format!("enc.res{r}a"), h, h, k, 1, pad, &mut rng),
                Conv1d::init(&mut params, &format!("enc.res{r}b"), h, h, k, 1, pad, &mut rng),
            ));
        }
        let enc_head = Conv1d::init(&mut params, "enc.head", h, config.code_dim, k, 1, pad, &mut rng);

        let dec_stem = Conv1d::init(&mut params, "dec.stem", config.code_dim, h, k, 1, pad, &mut rng);
        let mut dec_res = Vec::new();
        for r in 0..config.res_blocks {
            dec_res.push((
                Conv1d::init(&mut params, &format!("dec.res{r}a"), h, h, k, 1, pad, &mut rng),
                Conv1d::init(&mut params, &format!("dec.res{r}b"), h, h, k, 1, pad, &mut rng),
            ));
        }
        let mut up = Vec::new();
        for s in 0..stages {
            up.push(Conv1d::init(&mut params, &format!("dec.up{s}"), h, h, k, 1, pad, &mut rng));
        }
        let dec_head = Conv1d::init(&mut params, "dec.head", h, config.features, k, 1, pad, &mut rng);

        let codebook = Codebook::init(config.codebook_size, config.code_dim, &mut rng);
        Ok(Tokenizer {
            config,
            params,
            encoder: ConvEncoder { stem, down, res: enc_res, head: enc_head },
            decoder: ConvDecoder { stem: dec_stem, res: dec_res, up, head: dec_head },
            codebook,
        })
    }

    /// Graph-side encoder: window node `[l, d]` -> unit-norm latents `[L, d_c]`.
    pub fn encode_graph(&self, b: &mut Binder<f32>, x: usize) -> usize {
        let x = b.g.transpose(x); // [d, l]
        let mut h = self.encoder.stem.forward(b, x);
        h = b.g.relu(h);
        for conv in &self.encoder.down {
            h = conv.forward(b, h);
            h = b.g.relu(h);
        }
        for (c1, c2) in &self.encoder.res {
            let inner = c1.forward(b, h);
            let inner = b.g.relu(inner);
            let inner = c2.forward(b, inner);
            h = b.g.add(h, inner);
        }
        let h = self.encoder.head.forward(b, h); // [d_c, L]
        let h = b.g.transpose(h); // [L, d_c]
        b.g.l2_normalize_rows(h)
    }

    /// Graph-side decoder: latents `[L, d_c]` -> reconstruction `[l, d]`.
    pub fn decode_graph(&self, b: &mut Binder<f32>, h: usize) -> usize {
        let h = b.g.transpose(h); // [d_c, L]
        let mut y = self.decoder.stem.forward(b, h);
        y = b.g.relu(y);
        for (c1, c2) in &self.decoder.res {
            let inner = c1.forward(b, y);
            let inner = b.g.relu(inner);
            let inner = c2.forward(b, inner);
            y = b.g.add(y, inner);
        }
        for conv in &self.decoder.up {
            y = b.g.upsample2(y);
            y = conv.forward(b, y);
            y = b.g.relu(y);
        }
        let y = self.decoder.head.forward(b, y); // [d, l]
        b.g.transpose(y)
    }

    /// Frozen-weights encode. Rows of the result have unit norm.
    pub fn encode(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        if !x.is_all_finite() {
            return Err(SdError::Data("non-finite values in encoder input".into()));
        }
        if x.shape().len() != 2 || x.cols() != self.config.features {
            return Err(SdError::Dim(format!(
                "expected [l, {}] window, got {:?}",
                self.config.features,
                x.shape()
            )));
        }
        let mut b = Binder::inference(&self.params);
        let xn = b.g.value(x);
        let h = self.encode_graph(&mut b, xn);
        Ok(b.g.to_tensor(h))
    }

    pub fn decode(&self, h: &Tensor<f32>) -> Result<Tensor<f32>> {
        if h.shape().len() != 2 || h.cols() != self.config.code_dim {
            return Err(SdError::Dim(format!(
                "expected [L, {}] latents, got {:?}",
                self.config.code_dim,
                h.shape()
            )));
        }
        let mut b = Binder::inference(&self.params);
        let hn = b.g.value(h);
        let y = self.decode_graph(&mut b, hn);
        Ok(b.g.to_tensor(y))
    }

    /// Encode then quantize each latent row.
    pub fn tokenize(&self, x: &Tensor<f32>) -> Result<Vec<usize>> {
        let h = self.encode(x)?;
        self.codebook.quantize_rows(&h)
    }

    /// Full round trip through quantization.
    pub fn reconstruct(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        let tokens = self.tokenize(x)?;
        let h = self.codebook.dequantize(&tokens)?;
        self.decode(&h)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ckpt = Checkpoint::new();
        ckpt.set_config("stage", 1);
        self.config.write_to(&mut ckpt);
        for (name, t) in self.params.iter() {
            ckpt.add_array(name, t.clone());
        }
        ckpt.add_array("codebook.codes", self.codebook.codes.clone());
        ckpt.add_array(
            "codebook.ema_cluster_size",
            Tensor::new(vec![self.codebook.len()], self.codebook.ema_cluster_size.clone()).unwrap(),
        );
        ckpt.add_array("codebook.ema_embed_sum", self.codebook.ema_embed_sum.clone());
        ckpt
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let config = VqConfig::read_from(ckpt)?;
        let mut tok = Tokenizer::init(config, 0)?;
        for id in tok.params.ids().collect::<Vec<_>>() {
            let name = tok.params.name(id).to_string();
            let arr = ckpt
                .get_array(&name)
                .ok_or_else(|| SdError::Io(format!("checkpoint missing array {name:?}")))?;
            if arr.shape() != tok.params.get(id).shape() {
                return Err(SdError::Dim(format!("array {name:?} has unexpected shape")));
            }
            *tok.params.get_mut(id) = arr.clone();
        }
        let codes = ckpt
            .get_array("codebook.codes")
            .ok_or_else(|| SdError::Io("checkpoint missing codebook.codes".into()))?;
        let sizes = ckpt
            .get_array("codebook.ema_cluster_size")
            .ok_or_else(|| SdError::Io("checkpoint missing codebook.ema_cluster_size".into()))?;
        let sums = ckpt
            .get_array("codebook.ema_embed_sum")
            .ok_or_else(|| SdError::Io("checkpoint missing codebook.ema_embed_sum".into()))?;
        tok.codebook.codes = codes.clone();
        tok.codebook.ema_cluster_size = sizes.data().to_vec();
        tok.codebook.ema_embed_sum = sums.clone();
        tok.codebook.usage = vec![0; tok.codebook.len()];
        Ok(tok)
    }

    /// Checksum over every frozen array; Stage 2 must leave this unchanged.
    pub fn frozen_checksum(&self) -> u32 {
        let mut bytes = Vec::new();
        for (_, t) in self.params.iter() {
            for &v in t.data() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        for &v in self.codebook.codes.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        for &v in &self.codebook.ema_cluster_size {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        for &v in self.codebook.ema_embed_sum.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        crc32(&bytes)
    }

    /// Fraction of codes selected at least once over the given windows.
    pub fn utilization_on(&self, ds: &WindowedDataset, indices: &[usize]) -> Result<f64> {
        let mut used = vec![false; self.codebook.len()];
        for &i in indices {
            for y in self.tokenize(ds.window(i))? {
                used[y] = true;
            }
        }
        Ok(used.iter().filter(|&&u| u).count() as f64 / self.codebook.len() as f64)
    }

    /// Mean squared reconstruction error over the given windows.
    pub fn reconstruction_mse(&self, ds: &WindowedDataset, indices: &[usize]) -> Result<f64> {
        let mut total = 0.0f64;
        let mut count = 0usize;
        for &i in indices {
            let x = ds.window(i);
            let recon = self.reconstruct(x)?;
            for (a, b) in x.data().iter().zip(recon.data()) {
                let d = (*a - *b) as f64;
                total += d * d;
            }
            count += x.numel();
        }
        Ok(total / count as f64)
    }
}

/// Scalar form of the training objective for a single window:
/// `||x - x_rec||_F^2 + (lambda / L) * sum_i (1 - h_i . sg(h_tilde_i))`.
pub fn vq_loss_value(
    x: &Tensor<f32>,
    x_rec: &Tensor<f32>,
    h: &Tensor<f32>,
    h_quant: &Tensor<f32>,
    lambda: f32,
) -> f64 {
    let recon: f64 =
        x.data().iter().zip(x_rec.data()).map(|(&a, &b)| ((a - b) as f64).powi(2)).sum();
    let l = h.rows();
    let mut cos_term = 0.0f64;
    for r in 0..l {
        let dot: f64 = h.row(r).iter().zip(h_quant.row(r)).map(|(&a, &b)| (a * b) as f64).sum();
        cos_term += 1.0 - dot;
    }
    recon + lambda as f64 / l as f64 * cos_term
}

#[derive(Debug, Clone)]
pub struct EpochStats {
    pub epoch: usize,
    pub recon_mse: f64,
    pub embed_loss: f64,
    pub utilization: f64,
}

#[derive(Debug, Clone, Default)]
pub struct VqTrainLog {
    pub epochs: Vec<EpochStats>,
}

impl VqTrainLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,recon_mse,embed_loss,utilization\n");
        for e in &self.epochs {
            s.push_str(&format!("{},{},{},{}\n", e.epoch, e.recon_mse, e.embed_loss, e.utilization));
        }
        s
    }
}

/// Stage-1 training loop. Gradient updates reach the encoder through the
/// straight-through estimator; the codebook learns only through EMA.
pub fn train_vqvae(
    dataset: &WindowedDataset,
    config: &VqConfig,
    seed: u64,
) -> Result<(Tokenizer, VqTrainLog)> {
    config.validate()?;
    let mut tok = Tokenizer::init(config.clone(), seed)?;
    let train_idx = dataset.train_indices();
    if train_idx.is_empty() {
        return Err(SdError::Data("no training windows".into()));
    }
    let ids: Vec<_> = tok.params.ids().collect();
    let mut opt = Adam::new(&tok.params, &ids, config.lr);
    let mut log = VqTrainLog::default();
    let mut shuffle_rng = stream(seed, 0x5471);
    let mut reset_rng = stream(seed, 0x4e5e);
    let l = config.latent_len();

    for epoch in 0..config.epochs {
        if config.lr_decay != 1.0 {
            opt.set_lr(config.lr * config.lr_decay.powi(epoch as i32));
        }
        let mut order = train_idx.clone();
        order.shuffle(&mut shuffle_rng);
        let mut epoch_sq_err = 0.0f64;
        let mut epoch_entries = 0usize;
        let mut epoch_embed = 0.0f64;
        let mut last_batch_latents: Option<Tensor<f32>> = None;

        for batch in order.chunks(config.batch) {
            let mut b = Binder::new(&tok.params);
            let mut batch_loss: Option<usize> = None;
            let mut batch_latents = Vec::with_capacity(batch.len() * l * config.code_dim);
            let mut batch_indices = Vec::with_capacity(batch.len() * l);

            for &i in batch {
                let x = dataset.window(i);
                let xn = b.g.value(x);
                let h = tok.encode_graph(&mut b, xn);
                let h_data = b.g.to_tensor(h);
                let idx = tok.codebook.quantize_rows(&h_data)?;
                let h_quant = tok.codebook.dequantize(&idx)?;
                batch_latents.extend_from_slice(h_data.data());
                batch_indices.extend_from_slice(&idx);

                // reconstruction term (straight-through to the encoder)
                let st = b.g.straight_through(h, &h_quant);
                let recon = tok.decode_graph(&mut b, st);
                let diff = b.g.sub(recon, xn);
                let sq = b.g.mul(diff, diff);
                let recon_loss = b.g.sum(sq);

                // embedding term: (lambda / L) * sum_i (1 - h_i . sg(h~_i))
                let hq_const = b.g.value(&h_quant);
                let dots = b.g.mul(h, hq_const);
                let dot_sum = b.g.sum(dots);
                let embed_loss =
                    b.g.affine(dot_sum, -config.lambda_embed / l as f32, config.lambda_embed);

                let sample_loss = b.g.add(recon_loss, embed_loss);
                epoch_sq_err += b.g.scalar_value(recon_loss) as f64;
                epoch_entries += x.numel();
                epoch_embed += b.g.scalar_value(embed_loss) as f64;
                batch_loss = Some(match batch_loss {
                    None => sample_loss,
                    Some(acc) => b.g.add(acc, sample_loss),
                });
            }

            let total = batch_loss.expect("non-empty batch");
            let mean_loss = b.g.affine(total, 1.0 / batch.len() as f32, 0.0);
            let loss_val = b.g.scalar_value(mean_loss);
            if !loss_val.is_finite() {
                return Err(SdError::Contract(format!(
                    "training diverged at epoch {epoch}: loss = {loss_val}"
                )));
            }
            let grads = b.backward_collect(mean_loss);
            opt.step(&mut tok.params, &grads)?;

            let latents =
                Tensor::new(vec![batch_indices.len(), config.code_dim], batch_latents)?;
            tok.codebook.ema_update(&latents, &batch_indices, config.ema_decay);
            last_batch_latents = Some(latents);
        }

        let utilization = tok.codebook.utilization();
        let recon_mse = epoch_sq_err / epoch_entries as f64;
        log.epochs.push(EpochStats {
            epoch,
            recon_mse,
            embed_loss: epoch_embed / train_idx.len() as f64,
            utilization,
        });

        if let Some(donors) = &last_batch_latents {
            tok.codebook.reset_inactive(donors, config.reset_threshold, &mut reset_rng);
        }

        if config.target_mse > 0.0 && recon_mse < config.target_mse as f64 {
            break;
        }
    }
    Ok((tok, log))
}
