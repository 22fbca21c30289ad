use std::sync::atomic::{AtomicU64, Ordering};

use crate::autodiff::{Graph, Mode, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng::{normal, StreamRng, Streams, INIT};

use super::config::{AdapterKind, ModelConfig};
use super::linear::{apply_site, fuse_layer, plain_linear, LinearWithAdapter, SiteNames};

/// Per-stage dropout applied to trainable hidden activations (adapter rank
/// space and exit-head MLPs) when the graph is in train mode.
pub struct StageDropout<'a> {
    pub rates: &'a [f64],
    pub rng: &'a mut StreamRng,
}

/// Extra switches for a forward pass.
#[derive(Default)]
pub struct ForwardOpts<'a> {
    pub dropout: Option<StageDropout<'a>>,
    /// Skip every adapter and evaluate the frozen backbone alone.
    pub bypass_adapters: bool,
}

impl<'a> ForwardOpts<'a> {
    pub fn with_dropout(rates: &'a [f64], rng: &'a mut StreamRng) -> Self {
        ForwardOpts {
            dropout: Some(StageDropout { rates, rng }),
            bypass_adapters: false,
        }
    }

    pub fn backbone_only() -> Self {
        ForwardOpts {
            dropout: None,
            bypass_adapters: true,
        }
    }

    fn rate_for(&mut self, stage: usize) -> Option<(f64, &mut StreamRng)> {
        let d = self.dropout.as_mut()?;
        let p = *d.rates.get(stage - 1)?;
        Some((p, &mut *d.rng))
    }
}

/// Token state between stages. Enforces that stages are run in order.
#[derive(Debug, Clone, Copy)]
pub struct StagePass {
    pub tokens: Var,
    next_stage: usize,
    batch: usize,
}

impl StagePass {
    pub fn next_stage(&self) -> usize {
        self.next_stage
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    /// Keeps only batch entries `rows`, staying at the same stage.
    pub fn select(&self, g: &mut Graph, rows: &[usize]) -> Result<StagePass> {
        Ok(StagePass {
            tokens: g.select_rows(self.tokens, rows)?,
            next_stage: self.next_stage,
            batch: rows.len(),
        })
    }
}

/// Frozen ViT backbone with adapters at the MHA and FFN input projections and
/// one exit head every `interval` blocks.
#[derive(Debug)]
pub struct DynAdapterModel {
    config: ModelConfig,
    store: ParamStore,
    fused: bool,
    block_evals: AtomicU64,
}

impl Clone for DynAdapterModel {
    fn clone(&self) -> Self {
        DynAdapterModel {
            config: self.config.clone(),
            store: self.store.clone(),
            fused: self.fused,
            block_evals: AtomicU64::new(self.block_evals()),
        }
    }
}

fn gaussian(dims: &[usize], std: f64, rng: &mut StreamRng) -> Tensor {
    Tensor::from_fn(dims, |_| (normal(rng) * std) as f32)
}

fn ones(n: usize) -> Tensor {
    Tensor::from_fn(&[n], |_| 1.0)
}

/// Rows per evaluation graph in the batched convenience methods.
pub const EVAL_CHUNK: usize = 64;

/// Splits `[B, ..]` (or a single unbatched image) into pieces of at most
/// `size` leading rows.
pub fn batch_chunks(images: &Tensor, size: usize) -> Result<Vec<Tensor>> {
    let dims = images.dims();
    if dims.len() != 4 {
        return Ok(vec![images.clone()]);
    }
    let b = dims[0];
    if b <= size {
        return Ok(vec![images.clone()]);
    }
    let w = images.len() / b;
    (0..b)
        .step_by(size)
        .map(|s| {
            let e = (s + size).min(b);
            let mut d = dims.to_vec();
            d[0] = e - s;
            Tensor::new(d, images.data()[s * w..e * w].to_vec())
        })
        .collect()
}

/// Stacks `[b_i, ..]` tensors along the leading axis.
pub fn concat_rows<'a>(parts: impl Iterator<Item = &'a Tensor>) -> Result<Tensor> {
    let mut dims: Option<Vec<usize>> = None;
    let mut data = Vec::new();
    for t in parts {
        match &mut dims {
            None => dims = Some(t.dims().to_vec()),
            Some(d) => {
                if d[1..] != t.dims()[1..] {
                    return Err(Error::dim("concat_rows", format!("{d:?} with {:?}", t.dims())));
                }
                d[0] += t.dims()[0];
            }
        }
        data.extend_from_slice(t.data());
    }
    Tensor::new(dims.ok_or_else(|| Error::contract("nothing to concatenate"))?, data)
}

pub fn block_prefix(block: usize) -> String {
    format!("block.{block}")
}

pub fn head_prefix(stage: usize) -> String {
    format!("head.{stage}")
}

impl DynAdapterModel {
    /// Builds a model with a seeded frozen backbone, zero-effect adapters and
    /// randomly initialised heads.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = Streams::new(seed).stream(INIT);
        let mut store = ParamStore::new();
        let c = &config;
        let d = c.embed_dim;
        let n = c.token_len();
        let pd = c.patch_dim();

        store.insert("embed.patch.weight", gaussian(&[d, pd], (1.0 / pd as f64).sqrt(), &mut rng), false)?;
        store.insert("embed.patch.bias", gaussian(&[d], 0.1, &mut rng), false)?;
        store.insert("embed.cls", gaussian(&[d], 0.5, &mut rng), false)?;
        store.insert("embed.pos", gaussian(&[n, d], 0.5, &mut rng), false)?;

        for l in 1..=c.depth {
            let p = block_prefix(l);
            let frozen: [(String, Tensor); 12] = [
                (format!("{p}.ln1.gain"), ones(d)),
                (format!("{p}.ln1.bias"), Tensor::zeros(&[d])),
                (format!("{p}.mha.qkv.weight"), gaussian(&[3 * d, d], (1.0 / d as f64).sqrt(), &mut rng)),
                (format!("{p}.mha.qkv.bias"), gaussian(&[3 * d], 0.02, &mut rng)),
                (format!("{p}.mha.proj.weight"), gaussian(&[d, d], (1.0 / d as f64).sqrt(), &mut rng)),
                (format!("{p}.mha.proj.bias"), gaussian(&[d], 0.02, &mut rng)),
                (format!("{p}.ln2.gain"), ones(d)),
                (format!("{p}.ln2.bias"), Tensor::zeros(&[d])),
                (format!("{p}.ffn.fc1.weight"), gaussian(&[c.mlp_hidden, d], (1.0 / d as f64).sqrt(), &mut rng)),
                (format!("{p}.ffn.fc1.bias"), gaussian(&[c.mlp_hidden], 0.02, &mut rng)),
                (
                    format!("{p}.ffn.fc2.weight"),
                    gaussian(&[d, c.mlp_hidden], (1.0 / c.mlp_hidden as f64).sqrt(), &mut rng),
                ),
                (format!("{p}.ffn.fc2.bias"), gaussian(&[d], 0.02, &mut rng)),
            ];
            for (name, t) in frozen {
                store.insert(name, t, false)?;
            }
            for (site, active) in [("mha", c.adapter.placement.mha_in), ("ffn", c.adapter.placement.ffn_in)] {
                if !active {
                    continue;
                }
                let names = SiteNames::new(&format!("{p}.{site}"), Self::site_linear(site));
                let out = store.get(&names.weight)?.dims()[0];
                Self::init_adapter(&mut store, &names, c, d, out, &mut rng)?;
            }
        }

        for i in 1..=c.stages() {
            let p = head_prefix(i);
            store.insert(format!("{p}.norm.gain"), ones(d), true)?;
            store.insert(format!("{p}.norm.bias"), Tensor::zeros(&[d]), true)?;
            let k = c.num_classes;
            match c.head_hidden[i - 1] {
                0 => {
                    store.insert(format!("{p}.out.weight"), gaussian(&[k, d], (1.0 / d as f64).sqrt(), &mut rng), true)?;
                    store.insert(format!("{p}.out.bias"), Tensor::zeros(&[k]), true)?;
                }
                h => {
                    store.insert(format!("{p}.fc1.weight"), gaussian(&[h, d], (1.0 / d as f64).sqrt(), &mut rng), true)?;
                    store.insert(format!("{p}.fc1.bias"), Tensor::zeros(&[h]), true)?;
                    store.insert(format!("{p}.out.weight"), gaussian(&[k, h], (1.0 / h as f64).sqrt(), &mut rng), true)?;
                    store.insert(format!("{p}.out.bias"), Tensor::zeros(&[k]), true)?;
                }
            }
        }

        Ok(DynAdapterModel {
            config,
            store,
            fused: false,
            block_evals: AtomicU64::new(0),
        })
    }

    fn site_linear(site: &str) -> &'static str {
        if site == "mha" {
            "qkv"
        } else {
            "fc1"
        }
    }

    fn init_adapter(
        store: &mut ParamStore,
        names: &SiteNames,
        c: &ModelConfig,
        inp: usize,
        out: usize,
        rng: &mut StreamRng,
    ) -> Result<()> {
        let r = c.adapter.rank;
        match c.adapter.kind {
            AdapterKind::ParallelLowRank => {
                // B = 0 makes the delta A B vanish at step 0.
                store.insert(&names.lora_a, gaussian(&[out, r], (1.0 / r as f64).sqrt(), rng), true)?;
                store.insert(&names.lora_b, Tensor::zeros(&[r, inp]), true)?;
            }
            AdapterKind::SequentialRep => {
                let g = c.adapter.groups;
                store.insert(&names.down_w, gaussian(&[r, inp], (1.0 / inp as f64).sqrt(), rng), true)?;
                store.insert(&names.down_b, Tensor::zeros(&[r]), true)?;
                store.insert(&names.up_w, Tensor::zeros(&[g, inp / g, r / g]), true)?;
                store.insert(&names.up_b, Tensor::zeros(&[inp]), true)?;
            }
        }
        Ok(())
    }

    /// Reassembles a model from stored parameters (e.g. a checkpoint).
    pub fn from_parts(config: ModelConfig, store: ParamStore, fused: bool) -> Result<Self> {
        config.validate()?;
        let m = DynAdapterModel {
            config,
            store,
            fused,
            block_evals: AtomicU64::new(0),
        };
        m.check_layout()?;
        Ok(m)
    }

    /// Every tensor a model with this config and fusion state must hold,
    /// with the right shape, and nothing else.
    fn check_layout(&self) -> Result<()> {
        let mut reference = DynAdapterModel::init(self.config.clone(), 0)?;
        if self.fused {
            reference = reference.fuse()?;
        }
        for (name, p) in reference.store.iter() {
            let t = self.store.get(name)?;
            if t.dims() != p.tensor.dims() {
                return Err(Error::dim(
                    "model layout",
                    format!("{name} is {:?}, expected {:?}", t.dims(), p.tensor.dims()),
                ));
            }
        }
        if let Some(extra) = self.store.names().find(|n| !reference.store.contains(n)) {
            return Err(Error::contract(format!("unexpected tensor `{extra}` for this configuration")));
        }
        Ok(())
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn is_fused(&self) -> bool {
        self.fused
    }

    pub fn stages(&self) -> usize {
        self.config.stages()
    }

    /// Number of (sample, block) evaluations performed so far.
    pub fn block_evals(&self) -> u64 {
        self.block_evals.load(Ordering::Relaxed)
    }

    pub fn reset_block_evals(&self) {
        self.block_evals.store(0, Ordering::Relaxed);
    }

    /// Adapter-injected sites of one block, as `(prefix, linear)` pairs.
    pub fn sites(&self, block: usize) -> Vec<SiteNames> {
        let p = block_prefix(block);
        ["mha", "ffn"]
            .into_iter()
            .map(|s| SiteNames::new(&format!("{p}.{s}"), Self::site_linear(s)))
            .collect()
    }

    pub fn is_backbone(name: &str) -> bool {
        (name.starts_with("embed.") || name.starts_with("block.")) && !name.contains(".adapter.")
    }

    pub fn is_adapter(name: &str) -> bool {
        name.contains(".adapter.")
    }

    /// Stage (1-based) owning block `block`.
    pub fn stage_of_block(&self, block: usize) -> usize {
        (block - 1) / self.config.interval + 1
    }

    /// Stage a parameter belongs to: blocks map to their stage, heads to
    /// their own index, embeddings to `None`.
    pub fn stage_of_param(&self, name: &str) -> Option<usize> {
        let mut parts = name.split('.');
        match (parts.next(), parts.next().and_then(|x| x.parse::<usize>().ok())) {
            (Some("block"), Some(l)) => Some(self.stage_of_block(l)),
            (Some("head"), Some(i)) => Some(i),
            _ => None,
        }
    }

    /// Snapshot of all backbone tensors.
    pub fn backbone_snapshot(&self) -> Vec<(String, Tensor)> {
        self.store
            .iter()
            .filter(|(n, _)| Self::is_backbone(n))
            .map(|(n, p)| (n.to_string(), p.tensor.clone()))
            .collect()
    }

    /// Marks every transformer-block weight trainable (or frozen again).
    /// Used for the unfrozen-backbone control run.
    pub fn set_blocks_trainable(&mut self, trainable: bool) -> Result<()> {
        let names: Vec<String> = self
            .store
            .names()
            .filter(|n| n.starts_with("block.") && !Self::is_adapter(n))
            .map(String::from)
            .collect();
        for n in names {
            self.store.set_trainable(&n, trainable)?;
        }
        Ok(())
    }

    // ── forward ────────────────────────────────────────────────────────

    /// Image batch `[B, H, W, C]` (or a single `[H, W, C]`) to tokens
    /// `[B, n, d]`: frozen patch projection, class token first, positional
    /// embedding added.
    pub fn patch_embed(&self, images: &Tensor) -> Result<Tensor> {
        let c = &self.config;
        let dims = images.dims();
        let (b, h, w, ch) = match dims {
            [h, w, ch] => (1, *h, *w, *ch),
            [b, h, w, ch] => (*b, *h, *w, *ch),
            _ => return Err(Error::dim("patch_embed", format!("image {dims:?}"))),
        };
        if h != c.image_size || w != c.image_size || ch != c.channels {
            return Err(Error::dim(
                "patch_embed",
                format!(
                    "image {h}x{w}x{ch}, model expects {0}x{0}x{1}",
                    c.image_size, c.channels
                ),
            ));
        }
        let (p, side, d, n) = (c.patch_size, c.patches_per_side(), c.embed_dim, c.token_len());
        let pd = c.patch_dim();
        let wt = self.store.get("embed.patch.weight")?.data();
        let bias = self.store.get("embed.patch.bias")?.data();
        let cls = self.store.get("embed.cls")?.data();
        let pos = self.store.get("embed.pos")?.data();
        let img = images.data();
        let mut out = vec![0f32; b * n * d];
        let mut patch = vec![0f64; pd];
        for s in 0..b {
            let base = s * h * w * ch;
            let tok = &mut out[s * n * d..(s + 1) * n * d];
            for j in 0..d {
                tok[j] = (cls[j] as f64 + pos[j] as f64) as f32;
            }
            for pr in 0..side {
                for pc in 0..side {
                    let mut q = 0;
                    for y in 0..p {
                        for x in 0..p {
                            let off = base + ((pr * p + y) * w + pc * p + x) * ch;
                            for k in 0..ch {
                                patch[q] = img[off + k] as f64;
                                q += 1;
                            }
                        }
                    }
                    let t = 1 + pr * side + pc;
                    for j in 0..d {
                        let row = &wt[j * pd..(j + 1) * pd];
                        let acc: f64 = row.iter().zip(&patch).map(|(&a, &x)| a as f64 * x).sum();
                        tok[t * d + j] = (acc + bias[j] as f64 + pos[t * d + j] as f64) as f32;
                    }
                }
            }
        }
        Tensor::new(vec![b, n, d], out)
    }

    /// Starts a staged forward pass on a batch of images.
    pub fn begin(&self, g: &mut Graph, images: &Tensor) -> Result<StagePass> {
        let tokens = self.patch_embed(images)?;
        let batch = tokens.dims()[0];
        Ok(StagePass {
            tokens: g.constant(&tokens),
            next_stage: 1,
            batch,
        })
    }

    /// Starts a staged forward pass from precomputed tokens `[B, n, d]`.
    pub fn begin_from_tokens(&self, g: &mut Graph, tokens: &Tensor) -> Result<StagePass> {
        let c = &self.config;
        match tokens.dims() {
            [_, n, d] if *n == c.token_len() && *d == c.embed_dim => {}
            other => return Err(Error::dim("forward_stage", format!("tokens {other:?}"))),
        }
        Ok(StagePass {
            tokens: g.constant(tokens),
            next_stage: 1,
            batch: tokens.dims()[0],
        })
    }

    fn affine_norm(&self, g: &mut Graph, x: Var, prefix: &str) -> Result<Var> {
        let gain = g.param(&self.store, &format!("{prefix}.gain"))?;
        let bias = g.param(&self.store, &format!("{prefix}.bias"))?;
        let y = g.layer_norm_lastdim(x)?;
        let y = g.mul(y, gain)?;
        g.add(y, bias)
    }

    fn site(&self, g: &mut Graph, x: Var, names: &SiteNames, opts: &mut ForwardOpts<'_>, stage: usize) -> Result<Var> {
        if self.fused || opts.bypass_adapters {
            let w = g.param(&self.store, &names.weight)?;
            let b = g.param(&self.store, &names.bias)?;
            return plain_linear(g, x, w, b);
        }
        let drop = opts.rate_for(stage);
        apply_site(g, &self.store, names, x, drop)
    }

    /// One transformer block (1-based index) on tokens `[B, n, d]`.
    pub fn block(&self, g: &mut Graph, x: Var, block: usize, opts: &mut ForwardOpts<'_>) -> Result<Var> {
        let c = &self.config;
        let dims = g.dims(x).to_vec();
        let (b, n, d) = match dims.as_slice() {
            [b, n, d] if *d == c.embed_dim => (*b, *n, *d),
            other => return Err(Error::dim("block", format!("tokens {other:?}"))),
        };
        let (h, dh) = (c.heads, c.head_dim());
        let p = block_prefix(block);
        let stage = self.stage_of_block(block);
        let [mha, ffn]: [SiteNames; 2] = self.sites(block).try_into().expect("two sites");

        let xn = self.affine_norm(g, x, &format!("{p}.ln1"))?;
        let qkv = self.site(g, xn, &mha, opts, stage)?;
        let split = |g: &mut Graph, i: usize, axes: &[usize]| -> Result<Var> {
            let t = g.narrow_lastdim(qkv, i * d, d)?;
            let t = g.reshape(t, &[b, n, h, dh])?;
            g.permute(t, axes)
        };
        let q = split(g, 0, &[0, 2, 1, 3])?;
        let kt = split(g, 1, &[0, 2, 3, 1])?;
        let v = split(g, 2, &[0, 2, 1, 3])?;
        let scores = g.matmul(q, kt)?;
        let scores = g.mul_scalar(scores, 1.0 / (dh as f64).sqrt())?;
        let attn = g.softmax_lastdim(scores)?;
        let ctx = g.matmul(attn, v)?;
        let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = g.reshape(ctx, &[b, n, d])?;
        let pw = g.param(&self.store, &format!("{p}.mha.proj.weight"))?;
        let pb = g.param(&self.store, &format!("{p}.mha.proj.bias"))?;
        let attn_out = plain_linear(g, ctx, pw, pb)?;
        let x1 = g.add(attn_out, x)?;

        let xn = self.affine_norm(g, x1, &format!("{p}.ln2"))?;
        let hdn = self.site(g, xn, &ffn, opts, stage)?;
        let hdn = g.gelu(hdn)?;
        let w2 = g.param(&self.store, &format!("{p}.ffn.fc2.weight"))?;
        let b2 = g.param(&self.store, &format!("{p}.ffn.fc2.bias"))?;
        let y = plain_linear(g, hdn, w2, b2)?;
        let out = g.add(y, x1)?;
        self.block_evals.fetch_add(b as u64, Ordering::Relaxed);
        Ok(out)
    }

    /// Runs blocks `(i-1)T+1 ..= iT` for the pass's next stage `i`.
    pub fn forward_stage(&self, g: &mut Graph, pass: &mut StagePass, stage: usize, opts: &mut ForwardOpts<'_>) -> Result<Var> {
        if stage != pass.next_stage || stage == 0 || stage > self.stages() {
            return Err(Error::contract(format!(
                "stage {stage} requested but the pass is at stage {} of {}",
                pass.next_stage,
                self.stages()
            )));
        }
        let t = self.config.interval;
        let mut x = pass.tokens;
        for l in (stage - 1) * t + 1..=stage * t {
            x = self.block(g, x, l, opts)?;
        }
        pass.tokens = x;
        pass.next_stage += 1;
        Ok(x)
    }

    /// Exit head `stage` on the class token of `tokens`. Returns `[B, K]`.
    pub fn head(&self, g: &mut Graph, tokens: Var, stage: usize, opts: &mut ForwardOpts<'_>) -> Result<Var> {
        if stage == 0 || stage > self.stages() {
            return Err(Error::contract(format!("no exit head {stage}")));
        }
        let p = head_prefix(stage);
        let cls = g.slice_token(tokens, 0)?;
        let mut z = self.affine_norm(g, cls, &format!("{p}.norm"))?;
        if self.config.head_hidden[stage - 1] > 0 {
            let w = g.param(&self.store, &format!("{p}.fc1.weight"))?;
            let b = g.param(&self.store, &format!("{p}.fc1.bias"))?;
            z = plain_linear(g, z, w, b)?;
            z = g.gelu(z)?;
            if let Some((rate, rng)) = opts.rate_for(stage) {
                z = g.dropout(z, rate, rng)?;
            }
        }
        let w = g.param(&self.store, &format!("{p}.out.weight"))?;
        let b = g.param(&self.store, &format!("{p}.out.bias"))?;
        plain_linear(g, z, w, b)
    }

    /// Logits of every exit head, shallowest first.
    pub fn forward_all(&self, g: &mut Graph, images: &Tensor, opts: &mut ForwardOpts<'_>) -> Result<Vec<Var>> {
        let mut pass = self.begin(g, images)?;
        let mut logits = Vec::with_capacity(self.stages());
        for i in 1..=self.stages() {
            let x = self.forward_stage(g, &mut pass, i, opts)?;
            logits.push(self.head(g, x, i, opts)?);
        }
        Ok(logits)
    }

    /// Eval-mode logits of every head as plain tensors `[B, K]`. Large
    /// batches are evaluated in chunks to bound graph memory.
    pub fn logits_all(&self, images: &Tensor) -> Result<Vec<Tensor>> {
        let mut parts: Vec<Vec<Tensor>> = Vec::new();
        for chunk in batch_chunks(images, EVAL_CHUNK)? {
            let mut g = Graph::inference();
            let vars = self.forward_all(&mut g, &chunk, &mut ForwardOpts::default())?;
            parts.push(vars.into_iter().map(|v| g.value(v)).collect());
        }
        (0..self.stages())
            .map(|i| concat_rows(parts.iter().map(|p| &p[i])))
            .collect()
    }

    /// Pooled features `[B, d]` after every block.
    pub fn block_features(&self, images: &Tensor, pooling: Pooling, opts: &mut ForwardOpts<'_>) -> Result<Vec<Tensor>> {
        let mut parts: Vec<Vec<Tensor>> = Vec::new();
        for chunk in batch_chunks(images, EVAL_CHUNK)? {
            let mut g = Graph::new(Mode::Eval);
            let pass = self.begin(&mut g, &chunk)?;
            let mut feats = Vec::with_capacity(self.config.depth);
            let mut x = pass.tokens;
            for l in 1..=self.config.depth {
                x = self.block(&mut g, x, l, opts)?;
                let pooled = match pooling {
                    Pooling::ClassToken => g.slice_token(x, 0)?,
                    Pooling::MeanTokens => {
                        let t = g.permute(x, &[0, 2, 1])?;
                        g.mean_lastdim(t)?
                    }
                };
                feats.push(g.value(pooled));
            }
            parts.push(feats);
        }
        (0..self.config.depth)
            .map(|l| concat_rows(parts.iter().map(|p| &p[l])))
            .collect()
    }

    // ── fusion ─────────────────────────────────────────────────────────

    /// Folds every adapter into its frozen weight. The returned model carries
    /// no adapter tensors and cannot be trained further.
    pub fn fuse(&self) -> Result<DynAdapterModel> {
        if self.fused {
            return Err(Error::contract("model is already fused"));
        }
        let mut store = self.store.clone();
        store.clear_grads();
        for l in 1..=self.config.depth {
            for names in self.sites(l) {
                let layer = LinearWithAdapter::extract(&self.store, &names)?;
                let fused = fuse_layer(&layer)?;
                fused.install(&mut store, &names, false)?;
            }
        }
        Ok(DynAdapterModel {
            config: self.config.clone(),
            store,
            fused: true,
            block_evals: AtomicU64::new(0),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pooling {
    ClassToken,
    MeanTokens,
}

impl std::str::FromStr for Pooling {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cls" | "class_token" => Ok(Pooling::ClassToken),
            "mean" | "mean_tokens" => Ok(Pooling::MeanTokens),
            other => Err(Error::config(format!("unknown pooling `{other}`"))),
        }
    }
}

impl std::fmt::Display for Pooling {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Pooling::ClassToken => "cls",
            Pooling::MeanTokens => "mean",
        })
    }
}
